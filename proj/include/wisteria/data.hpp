// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <istream>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace wisteria {

// Character-level vocabulary. Ids are fixed so checkpoints stay portable.
namespace vocab {
inline constexpr std::int32_t kA = 0;
inline constexpr std::int32_t kC = 1;
inline constexpr std::int32_t kG = 2;
inline constexpr std::int32_t kT = 3;
inline constexpr std::int32_t kN = 4;
inline constexpr std::int32_t kMask = 5;
inline constexpr std::int32_t kPad = 6;
inline constexpr std::size_t kSize = 7;

char id_to_char(std::int32_t id);
// Nucleotide letters of either case; anything else maps to N.
std::int32_t char_to_id(char c) noexcept;
}  // namespace vocab

using TokenSequence = std::vector<std::int32_t>;

TokenSequence tokenize(std::string_view seq);
// MASK renders as '?', PAD as '-'.
std::string detokenize(std::span<const std::int32_t> ids);

struct FastaRecord {
  std::string id;
  std::string sequence;  // uppercase over {A,C,G,T,N}
};

// Streaming FASTA reader: holds at most the record being assembled.
class FastaReader {
 public:
  explicit FastaReader(std::istream& in) : in_(in) {}

  // Next record, or nullopt at end of input. Throws ParseError (with line
  // number) on sequence data before the first header or an empty record.
  std::optional<FastaRecord> next();

  std::size_t line_number() const noexcept { return line_no_; }

 private:
  std::istream& in_;
  std::size_t line_no_ = 0;
  std::optional<std::string> pending_header_;
  std::size_t pending_header_line_ = 0;
  bool done_ = false;
};

std::vector<FastaRecord> parse_fasta(std::istream& in);
std::vector<FastaRecord> read_fasta_file(const std::filesystem::path& path);
// Newline-delimited list of FASTA paths; relative paths resolve against the
// manifest's directory. Blank lines and '#' comments are skipped.
std::vector<FastaRecord> read_manifest(const std::filesystem::path& manifest);
void write_fasta(std::ostream& out, std::span<const FastaRecord> records, std::size_t line_width = 80);

// Splittable seeding: the stream for (seed, counter) is independent of how
// many other streams were consumed before it.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter) noexcept;
double unit_uniform(std::mt19937_64& rng) noexcept;  // [0, 1) with 53-bit resolution

struct MaskingConfig {
  double p_select = 0.15;
  double p_mask = 0.8;
  double p_random = 0.1;
  double p_keep = 0.1;

  // Throws ConfigError unless p_mask + p_random + p_keep == 1 (+-1e-12) and
  // every probability lies in [0, 1].
  void validate() const;
};

struct MaskedRow {
  TokenSequence input_ids;
  TokenSequence target_ids;  // original tokens everywhere
  std::vector<std::uint8_t> loss_mask;
};

// BERT-style corruption: each non-PAD position is selected with p_select;
// selected positions become MASK, a uniform random nucleotide, or stay as is.
MaskedRow apply_mlm_mask(std::span<const std::int32_t> ids, std::mt19937_64& rng, const MaskingConfig& cfg);

struct MaskedBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  TokenSequence input_ids;             // [B * L]
  TokenSequence target_ids;            // [B * L]
  std::vector<std::uint8_t> loss_mask; // [B * L]
  std::vector<std::uint8_t> pad_mask;  // [B * L], 1 at padding
  std::uint64_t index = 0;             // position in the batch stream

  std::size_t tokens() const noexcept { return batch * length; }
  std::size_t selected() const noexcept;
  // Valid-prefix length of each row (padding is a suffix).
  std::vector<std::size_t> row_lengths() const;
};

// Batch size that keeps B * L == token_budget; ConfigError otherwise.
std::size_t budget_batch_size(std::size_t token_budget, std::size_t seq_len);

// Chunk of a record: tokens [offset, offset + L) of record `record`.
struct ChunkRef {
  std::size_t record;
  std::size_t offset;
};

// Constant-token-budget MLM batch stream over a corpus. Records are cut
// into non-overlapping chunks of seq_len (last chunk PAD-filled). Chunk
// order is reshuffled every epoch; the stream is endless and batch i is a
// pure function of (corpus, seed, i).
class BatchStream {
 public:
  BatchStream(std::vector<TokenSequence> corpus, std::size_t seq_len, std::size_t token_budget,
              MaskingConfig masking, std::uint64_t seed);

  MaskedBatch next() { return batch_at(cursor_++); }
  MaskedBatch batch_at(std::uint64_t index) const;

  std::uint64_t cursor() const noexcept { return cursor_; }
  void seek(std::uint64_t index) noexcept { cursor_ = index; }
  std::size_t batch_size() const noexcept { return batch_; }
  std::size_t seq_len() const noexcept { return seq_len_; }
  std::size_t num_chunks() const noexcept { return chunks_.size(); }

 private:
  const std::vector<std::size_t>& epoch_order(std::uint64_t epoch) const;

  std::vector<TokenSequence> corpus_;
  std::size_t seq_len_;
  std::size_t batch_;
  MaskingConfig masking_;
  std::uint64_t seed_;
  std::vector<ChunkRef> chunks_;
  std::uint64_t cursor_ = 0;
  mutable std::uint64_t cached_epoch_ = UINT64_MAX;
  mutable std::vector<std::size_t> cached_order_;
};

// Single-producer bounded hand-off queue.
template <class T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

  // Returns false if the queue was closed.
  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
};

// Runs a BatchStream on a producer thread, at most `capacity` batches ahead.
class PrefetchingBatchStream {
 public:
  PrefetchingBatchStream(const BatchStream& stream, std::uint64_t first_index, std::size_t capacity = 2);
  ~PrefetchingBatchStream();
  PrefetchingBatchStream(const PrefetchingBatchStream&) = delete;
  PrefetchingBatchStream& operator=(const PrefetchingBatchStream&) = delete;

  MaskedBatch next();

 private:
  const BatchStream& stream_;
  BoundedQueue<MaskedBatch> queue_;
  std::jthread producer_;
};

enum class CorpusKind { kPeriodic, kMotif, kUniform };

CorpusKind parse_corpus_kind(std::string_view name);
std::string corpus_kind_name(CorpusKind kind);

struct SynthParams {
  CorpusKind kind = CorpusKind::kUniform;
  std::size_t num_records = 16;  // motif: per class
  std::size_t length = 1024;
  std::size_t period = 8;
  std::string pattern;       // periodic: explicit base pattern (random when empty)
  double noise = 0.0;        // periodic: substitution probability
  bool random_phase = false; // periodic: random start offset per record
  std::string motif = "TATAAA";
};

struct Corpus {
  std::vector<FastaRecord> records;
  std::vector<int> labels;  // motif corpora: 0 = background, 1 = motif planted; else empty
};

Corpus synth_corpus(const SynthParams& params, std::uint64_t seed);

std::vector<TokenSequence> tokenize_corpus(std::span<const FastaRecord> records);

// Per-position conditional entropy (nats) of a periodic corpus with
// substitution noise eps: H(eps) + eps * ln 3.
double periodic_entropy_bound(double noise);

}  // namespace wisteria
