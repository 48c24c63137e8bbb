// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "wisteria/config.hpp"
#include "wisteria/data.hpp"
#include "wisteria/model.hpp"

namespace wisteria {

// Mean cross-entropy over the batch's selected positions.
Tensor mlm_loss(const Tensor& logits, const MaskedBatch& batch);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

struct LrSchedule {
  double peak_lr = 8e-3;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 2000;
  double min_lr = 8e-4;
};

// Linear 0 -> peak over the warmup, then cosine peak -> min_lr until
// total_steps; min_lr afterwards.
double lr_schedule(std::size_t t, const LrSchedule& s);

struct OptimState {
  AdamWConfig hyper;
  LrSchedule schedule;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;  // one per parameter, shaped like it
  std::vector<std::vector<double>> v;

  static OptimState for_params(const ParamList& params, AdamWConfig hyper, LrSchedule schedule);
};

// One bias-corrected AdamW update with decoupled weight decay:
//   theta -= lr * (m_hat / (sqrt(v_hat) + eps)) + lr * wd * theta
// Parameters flagged decay=false skip the decay term. Advances s.t. Throws
// NumericError naming the parameter when a gradient is not finite.
void adamw_step(const ParamList& params, OptimState& s, double lr);

// Scales gradients so their global L2 norm is at most max_norm (no-op for
// max_norm <= 0). Returns the norm before clipping.
double clip_grad_norm(const ParamList& params, double max_norm);

struct TrainConfig {
  std::size_t seq_len = 256;
  std::size_t token_budget = 8192;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 2000;
  double peak_lr = 8e-3;
  double min_lr_ratio = 0.1;
  AdamWConfig adamw;
  double clip_norm = 1.0;
  MaskingConfig masking;
  std::uint64_t data_seed = 0;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint

  void validate() const;
  LrSchedule schedule() const;

  static TrainConfig from_key_values(const KeyValues& kv);
  std::vector<std::pair<std::string, std::string>> to_entries() const;
};

struct StepRecord {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double tokens_per_s = 0.0;  // wall clock; excluded from determinism claims
};

// JSON line {step, loss, lr, grad_norm, tokens_per_s}.
std::string step_record_json(const StepRecord& r);

class Trainer {
 public:
  Trainer(Model& model, std::vector<TokenSequence> corpus, TrainConfig cfg);

  // One optimization step on the next batch of the stream. Throws
  // NumericError (parameters untouched) when the loss is not finite.
  StepRecord step();
  // Same, on an explicit batch; does not move the stream cursor. Throws
  // InputError when the batch selects no position.
  StepRecord step_on(const MaskedBatch& batch);
  void seek(std::uint64_t batch_index) noexcept { stream_.seek(batch_index); }

  std::uint64_t steps_done() const noexcept { return state_.t; }
  const OptimState& state() const noexcept { return state_; }
  const BatchStream& stream() const noexcept { return stream_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  Model& model() noexcept { return model_; }

  // Full-precision resume state: parameters, moments, step and stream
  // cursor. Loading requires a model built from the same config.
  void save_state(const std::filesystem::path& path) const;
  void load_state(const std::filesystem::path& path);

 private:
  Model& model_;
  TrainConfig cfg_;
  ParamList params_;
  BatchStream stream_;
  OptimState state_;
};

struct TrainOptions {
  std::size_t steps = 0;  // 0: run to cfg.total_steps
  std::filesystem::path out_dir;  // empty: no files written
  std::ostream* log = nullptr;    // JSON lines
  bool prefetch = true;
  std::function<void(const StepRecord&)> on_step;
};

// Runs steps until `steps` (or total_steps) optimizer steps have been taken
// in total, writing `log.jsonl` records and checkpoints
// (`ckpt_step<N>.wstr` + `state_step<N>.bin`, then `final.wstr` +
// `final_state.bin`) under out_dir. On a non-finite loss the error
// propagates and the last written checkpoint is left untouched.
std::vector<StepRecord> train(Trainer& trainer, const TrainOptions& options);

}  // namespace wisteria
