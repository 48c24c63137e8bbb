// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include "wisteria/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "wisteria/errors.hpp"

namespace wisteria {

namespace vocab {

char id_to_char(std::int32_t id) {
  switch (id) {
    case kA: return 'A';
    case kC: return 'C';
    case kG: return 'G';
    case kT: return 'T';
    case kN: return 'N';
    case kMask: return '?';
    case kPad: return '-';
    default: throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  }
}

std::int32_t char_to_id(char c) noexcept {
  switch (c) {
    case 'A': case 'a': return kA;
    case 'C': case 'c': return kC;
    case 'G': case 'g': return kG;
    case 'T': case 't': return kT;
    default: return kN;
  }
}

}  // namespace vocab

TokenSequence tokenize(std::string_view seq) {
  TokenSequence ids(seq.size());
  std::transform(seq.begin(), seq.end(), ids.begin(), vocab::char_to_id);
  return ids;
}

std::string detokenize(std::span<const std::int32_t> ids) {
  std::string out(ids.size(), 'N');
  std::transform(ids.begin(), ids.end(), out.begin(), vocab::id_to_char);
  return out;
}

namespace {

char normalize_base(char c) { return vocab::id_to_char(vocab::char_to_id(c)); }

std::string header_id(const std::string& line) {
  const auto end = line.find_first_of(" \t", 1);
  return line.substr(1, end == std::string::npos ? std::string::npos : end - 1);
}

}  // namespace

std::optional<FastaRecord> FastaReader::next() {
  if (done_) return std::nullopt;
  std::string sequence;
  std::string line;
  auto finish = [&]() -> FastaRecord {
    if (sequence.empty()) {
      throw ParseError("empty sequence for record '" + header_id(*pending_header_) + "' (header at line " +
                       std::to_string(pending_header_line_) + ")");
    }
    FastaRecord rec{header_id(*pending_header_), std::move(sequence)};
    return rec;
  };
  while (std::getline(in_, line)) {
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '>') {
      if (pending_header_) {
        FastaRecord rec = finish();
        pending_header_ = line;
        pending_header_line_ = line_no_;
        return rec;
      }
      pending_header_ = line;
      pending_header_line_ = line_no_;
      continue;
    }
    if (line.front() == ';') continue;  // legacy comment line
    if (!pending_header_) {
      throw ParseError("sequence data before first header at line " + std::to_string(line_no_));
    }
    for (char c : line) {
      if (c == ' ' || c == '\t') continue;
      sequence.push_back(normalize_base(c));
    }
  }
  done_ = true;
  if (!pending_header_) return std::nullopt;
  FastaRecord rec = finish();
  pending_header_.reset();
  return rec;
}

std::vector<FastaRecord> parse_fasta(std::istream& in) {
  FastaReader reader(in);
  std::vector<FastaRecord> out;
  while (auto rec = reader.next()) out.push_back(std::move(*rec));
  return out;
}

std::vector<FastaRecord> read_fasta_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open FASTA file " + path.string());
  try {
    return parse_fasta(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::vector<FastaRecord> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open corpus manifest " + manifest.string());
  std::vector<FastaRecord> all;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::filesystem::path p(line);
    if (p.is_relative()) p = manifest.parent_path() / p;
    auto recs = read_fasta_file(p);
    std::move(recs.begin(), recs.end(), std::back_inserter(all));
  }
  return all;
}

void write_fasta(std::ostream& out, std::span<const FastaRecord> records, std::size_t line_width) {
  for (const auto& r : records) {
    out << '>' << r.id << '\n';
    for (std::size_t i = 0; i < r.sequence.size(); i += line_width) {
      out << r.sequence.substr(i, line_width) << '\n';
    }
  }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t counter) noexcept {
  // splitmix64 finalizer over a golden-ratio-spaced counter
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (counter + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double unit_uniform(std::mt19937_64& rng) noexcept {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

void MaskingConfig::validate() const {
  for (double p : {p_select, p_mask, p_random, p_keep}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("masking probabilities must lie in [0, 1]");
  }
  const double total = p_mask + p_random + p_keep;
  if (std::abs(total - 1.0) > 1e-12) {
    throw ConfigError("masking split p_mask + p_random + p_keep must sum to 1, got " + std::to_string(total));
  }
}

MaskedRow apply_mlm_mask(std::span<const std::int32_t> ids, std::mt19937_64& rng, const MaskingConfig& cfg) {
  cfg.validate();
  MaskedRow row;
  row.input_ids.assign(ids.begin(), ids.end());
  row.target_ids.assign(ids.begin(), ids.end());
  row.loss_mask.assign(ids.size(), 0);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == vocab::kPad) continue;
    if (!(unit_uniform(rng) < cfg.p_select)) continue;
    row.loss_mask[i] = 1;
    const double v = unit_uniform(rng);
    if (v < cfg.p_mask) {
      row.input_ids[i] = vocab::kMask;
    } else if (v < cfg.p_mask + cfg.p_random) {
      row.input_ids[i] = static_cast<std::int32_t>(rng() & 3U);  // uniform over A,C,G,T
    }
  }
  return row;
}

std::size_t MaskedBatch::selected() const noexcept {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), std::uint8_t{1}));
}

std::vector<std::size_t> MaskedBatch::row_lengths() const {
  std::vector<std::size_t> lengths(batch, length);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t len = 0;
    while (len < length && !pad_mask[b * length + len]) ++len;
    for (std::size_t t = len; t < length; ++t) {
      if (!pad_mask[b * length + t]) {
        throw InputError("padding must form a suffix of each row (row " + std::to_string(b) + ")");
      }
    }
    lengths[b] = len;
  }
  return lengths;
}

std::size_t budget_batch_size(std::size_t token_budget, std::size_t seq_len) {
  if (seq_len == 0 || token_budget == 0) throw ConfigError("token_budget and seq_len must be positive");
  if (token_budget % seq_len != 0) {
    throw ConfigError("token_budget " + std::to_string(token_budget) + " is not divisible by seq_len " +
                      std::to_string(seq_len));
  }
  return token_budget / seq_len;
}

BatchStream::BatchStream(std::vector<TokenSequence> corpus, std::size_t seq_len, std::size_t token_budget,
                         MaskingConfig masking, std::uint64_t seed)
    : corpus_(std::move(corpus)),
      seq_len_(seq_len),
      batch_(budget_batch_size(token_budget, seq_len)),
      masking_(masking),
      seed_(seed) {
  masking_.validate();
  for (std::size_t r = 0; r < corpus_.size(); ++r) {
    for (std::size_t off = 0; off < corpus_[r].size(); off += seq_len_) chunks_.push_back({r, off});
  }
  if (chunks_.empty()) throw InputError("corpus contains no sequence data");
}

const std::vector<std::size_t>& BatchStream::epoch_order(std::uint64_t epoch) const {
  if (epoch != cached_epoch_) {
    cached_order_.resize(chunks_.size());
    for (std::size_t i = 0; i < cached_order_.size(); ++i) cached_order_[i] = i;
    std::mt19937_64 rng(mix_seed(seed_ ^ 0xC0FFEEULL, epoch));
    // Fisher-Yates with an explicit draw so the order is library independent.
    for (std::size_t i = cached_order_.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(cached_order_[i - 1], cached_order_[j]);
    }
    cached_epoch_ = epoch;
  }
  return cached_order_;
}

MaskedBatch BatchStream::batch_at(std::uint64_t index) const {
  MaskedBatch out;
  out.batch = batch_;
  out.length = seq_len_;
  out.index = index;
  out.input_ids.reserve(batch_ * seq_len_);
  out.target_ids.reserve(batch_ * seq_len_);
  out.loss_mask.reserve(batch_ * seq_len_);
  out.pad_mask.reserve(batch_ * seq_len_);
  std::mt19937_64 rng(mix_seed(seed_, index));
  const std::uint64_t n = chunks_.size();
  TokenSequence chunk(seq_len_);
  for (std::size_t r = 0; r < batch_; ++r) {
    const std::uint64_t global = index * batch_ + r;
    const auto& order = epoch_order(global / n);
    const ChunkRef ref = chunks_[order[global % n]];
    const auto& seq = corpus_[ref.record];
    const std::size_t avail = std::min(seq_len_, seq.size() - ref.offset);
    std::copy_n(seq.begin() + static_cast<std::ptrdiff_t>(ref.offset), avail, chunk.begin());
    std::fill(chunk.begin() + static_cast<std::ptrdiff_t>(avail), chunk.end(), vocab::kPad);
    MaskedRow row = apply_mlm_mask(chunk, rng, masking_);
    out.input_ids.insert(out.input_ids.end(), row.input_ids.begin(), row.input_ids.end());
    out.target_ids.insert(out.target_ids.end(), row.target_ids.begin(), row.target_ids.end());
    out.loss_mask.insert(out.loss_mask.end(), row.loss_mask.begin(), row.loss_mask.end());
    for (auto id : chunk) out.pad_mask.push_back(id == vocab::kPad ? 1 : 0);
  }
  return out;
}

PrefetchingBatchStream::PrefetchingBatchStream(const BatchStream& stream, std::uint64_t first_index,
                                               std::size_t capacity)
    : stream_(stream), queue_(capacity) {
  // The producer reads only through batch_at on its own copy of the stream
  // state, so the trainer thread never races on the epoch cache.
  producer_ = std::jthread([this, first_index, copy = stream_](std::stop_token stop) {
    for (std::uint64_t i = first_index; !stop.stop_requested(); ++i) {
      if (!queue_.push(copy.batch_at(i))) return;
    }
  });
}

PrefetchingBatchStream::~PrefetchingBatchStream() {
  producer_.request_stop();
  queue_.close();
}

MaskedBatch PrefetchingBatchStream::next() {
  auto batch = queue_.pop();
  if (!batch) throw Error("batch producer stopped");
  return std::move(*batch);
}

CorpusKind parse_corpus_kind(std::string_view name) {
  if (name == "periodic") return CorpusKind::kPeriodic;
  if (name == "motif" || name == "motif-planted") return CorpusKind::kMotif;
  if (name == "uniform") return CorpusKind::kUniform;
  throw ConfigError("unknown corpus kind '" + std::string(name) + "' (expected periodic, motif, uniform)");
}

std::string corpus_kind_name(CorpusKind kind) {
  switch (kind) {
    case CorpusKind::kPeriodic: return "periodic";
    case CorpusKind::kMotif: return "motif";
    case CorpusKind::kUniform: return "uniform";
  }
  return "unknown";
}

namespace {

constexpr char kBases[4] = {'A', 'C', 'G', 'T'};

std::string uniform_sequence(std::size_t length, std::mt19937_64& rng) {
  std::string s(length, 'A');
  for (auto& c : s) c = kBases[rng() & 3U];
  return s;
}

}  // namespace

Corpus synth_corpus(const SynthParams& p, std::uint64_t seed) {
  if (p.length == 0 || p.num_records == 0) throw ConfigError("synthetic corpus needs positive length and count");
  std::mt19937_64 rng(mix_seed(seed, 0x5157));
  Corpus corpus;
  switch (p.kind) {
    case CorpusKind::kUniform:
      for (std::size_t i = 0; i < p.num_records; ++i) {
        corpus.records.push_back({"uniform_" + std::to_string(i), uniform_sequence(p.length, rng)});
      }
      break;
    case CorpusKind::kPeriodic: {
      if (p.period < 2) throw ConfigError("periodic corpus needs period >= 2");
      if (!(p.noise >= 0.0 && p.noise <= 1.0)) throw ConfigError("periodic noise must lie in [0, 1]");
      std::string pattern = p.pattern;
      if (pattern.empty()) {
        pattern = uniform_sequence(p.period, rng);
      } else {
        if (pattern.size() != p.period) throw ConfigError("periodic pattern length must equal period");
        for (auto& c : pattern) {
          c = normalize_base(c);
          if (c == 'N') throw ConfigError("periodic pattern must be over A,C,G,T");
        }
      }
      for (std::size_t i = 0; i < p.num_records; ++i) {
        const std::size_t phase = p.random_phase ? static_cast<std::size_t>(rng() % p.period) : 0;
        std::string s(p.length, 'A');
        for (std::size_t t = 0; t < p.length; ++t) {
          char c = pattern[(t + phase) % p.period];
          if (p.noise > 0.0 && unit_uniform(rng) < p.noise) {
            // substitute with one of the three other bases
            const std::int32_t orig = vocab::char_to_id(c);
            const auto shift = static_cast<std::int32_t>(1 + rng() % 3);
            c = kBases[(orig + shift) % 4];
          }
          s[t] = c;
        }
        corpus.records.push_back({"periodic_" + std::to_string(i), std::move(s)});
      }
      break;
    }
    case CorpusKind::kMotif: {
      std::string motif = p.motif;
      if (motif.empty()) throw ConfigError("motif must be non-empty");
      for (auto& c : motif) {
        c = normalize_base(c);
        if (c == 'N') throw ConfigError("motif must be over A,C,G,T");
      }
      if (motif.size() > p.length) {
        throw ConfigError("motif of length " + std::to_string(motif.size()) + " longer than sequence length " +
                          std::to_string(p.length));
      }
      for (std::size_t i = 0; i < p.num_records; ++i) {
        for (int label = 0; label < 2; ++label) {
          std::string s = uniform_sequence(p.length, rng);
          if (label == 1) {
            const std::size_t pos = static_cast<std::size_t>(rng() % (p.length - motif.size() + 1));
            s.replace(pos, motif.size(), motif);
          }
          corpus.records.push_back({(label ? "pos_" : "neg_") + std::to_string(i), std::move(s)});
          corpus.labels.push_back(label);
        }
      }
      break;
    }
  }
  return corpus;
}

std::vector<TokenSequence> tokenize_corpus(std::span<const FastaRecord> records) {
  std::vector<TokenSequence> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(tokenize(r.sequence));
  return out;
}

double periodic_entropy_bound(double noise) {
  if (noise <= 0.0) return 0.0;
  if (noise >= 1.0) return std::log(3.0);
  return -noise * std::log(noise) - (1.0 - noise) * std::log1p(-noise) + noise * std::log(3.0);
}

}  // namespace wisteria
