// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wisteria/data.hpp"
#include "wisteria/model.hpp"

namespace wisteria {

// N, 2N, 4N, 8N.
std::vector<std::size_t> default_eval_lengths(std::size_t train_len);

struct PplOptions {
  std::uint64_t seed = 20260;
  MaskingConfig masking;
  std::size_t token_budget = 8192;  // tokens per forward pass
  std::size_t max_windows = 0;      // 0: every window of the corpus
};

struct PplRow {
  std::size_t length = 0;
  double ppl = 0.0;
  double mean_ce = 0.0;
  std::size_t positions = 0;  // masked positions scored
  std::size_t windows = 0;
};

// Perplexity over masked positions, exp(mean cross-entropy), at each window
// length. Records are cut into non-overlapping windows; a short tail window
// is scored with its valid prefix. The mask of window w is drawn from
// (options.seed, w) so a table is a pure function of its inputs. Throws
// ConfigError for a length below 2 or lengths that are not strictly
// increasing, InputError when nothing could be scored.
std::vector<PplRow> eval_perplexity(const Model& model, std::span<const TokenSequence> corpus,
                                    std::span<const std::size_t> lengths, const PplOptions& options = {});

// Mean-pooled final hidden states of whole records -> [n, D]. Records are
// grouped into padded batches of at most token_budget tokens.
Tensor embed_records(const Model& model, std::span<const TokenSequence> records, std::size_t token_budget = 8192);

struct ProbeConfig {
  std::size_t folds = 5;
  std::size_t seeds = 5;
  std::size_t epochs = 300;  // full-batch AdamW steps per fold
  double lr = 0.05;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double mean = 0.0;
  double std = 0.0;  // population std over seeds
  std::vector<double> per_seed;
  std::size_t classes = 0;
};

// Softmax linear classifier on frozen, fold-standardized features with
// k-fold cross-validation repeated over `seeds` shuffles. Per seed the
// accuracy is the fraction of held-out predictions that are correct.
// Throws InputError for fewer than 40 samples or a single class,
// DimensionError when embeddings and labels disagree.
ProbeResult linear_probe(const Tensor& embeddings, std::span<const int> labels, const ProbeConfig& cfg = {});

struct BenchConfig {
  ModelConfig model;
  std::vector<Variant> variants{Variant::kFull, Variant::kNoFourier};
  std::vector<std::size_t> lengths{1024, 2048, 4096, 8192};
  std::size_t batch = 1;
  std::size_t reps = 3;
  std::size_t warmup = 1;
  std::int64_t memory_limit = 0;  // bytes; 0: three quarters of physical memory
};

struct BenchRow {
  std::string variant;
  std::size_t length = 0;
  bool ok = true;  // false: the run hit the memory limit
  double median_s = 0.0;
  double tokens_per_s = 0.0;
  std::int64_t peak_bytes = 0;       // tracked peak during a forward pass
  std::int64_t attn_peak_bytes = 0;  // increment while the attention layer ran
  std::int64_t attn_logit_bytes = 0; // heads * L^2 doubles per row, 0 without attention
};

// Inference throughput and peak tracked memory per (variant, length), in
// that nesting order. Wall clock is the median over `reps` timed forward
// passes after `warmup` untimed ones. A std::bad_alloc under the memory
// limit becomes a row with ok = false.
std::vector<BenchRow> bench(const BenchConfig& cfg);

// Host description recorded next to bench tables.
std::string machine_descriptor();

// CSV with header id,label,e0..e{D-1}; label is -1 when labels is empty.
// Values print with float round-trip precision. Throws IoError naming the
// path.
void export_embeddings(const Model& model, std::span<const FastaRecord> records, std::span<const int> labels,
                       const std::filesystem::path& path, std::size_t token_budget = 8192);

struct EvalReport {
  std::vector<PplRow> perplexity;
  std::optional<ProbeResult> probe;
  std::vector<BenchRow> bench;
  std::string machine;

  // Throws ConfigError when an invariant is broken: ppl < 1, accuracy
  // outside [0, 1], or lengths not strictly increasing.
  void validate() const;
  // ppl.csv, probe.csv, bench.csv (those that are non-empty) + summary.txt.
  void write(const std::filesystem::path& dir) const;
  std::string summary() const;
};

std::string ppl_csv(std::span<const PplRow> rows);
std::string probe_csv(const ProbeResult& r);
std::string bench_csv(std::span<const BenchRow> rows);

}  // namespace wisteria
