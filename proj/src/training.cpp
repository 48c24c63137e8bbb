// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include "wisteria/training.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <ostream>

#include "wisteria/errors.hpp"

namespace wisteria {

static_assert(std::endian::native == std::endian::little, "resume-state files assume a little-endian host");

Tensor mlm_loss(const Tensor& logits, const MaskedBatch& batch) {
  return cross_entropy_masked(logits, batch.target_ids, batch.loss_mask);
}

double lr_schedule(std::size_t t, const LrSchedule& s) {
  if (s.warmup_steps > 0 && t < s.warmup_steps) {
    return s.peak_lr * static_cast<double>(t) / static_cast<double>(s.warmup_steps);
  }
  if (t >= s.total_steps) return s.min_lr;
  const double span = static_cast<double>(s.total_steps - s.warmup_steps);
  const double progress = static_cast<double>(t - s.warmup_steps) / span;
  return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

OptimState OptimState::for_params(const ParamList& params, AdamWConfig hyper, LrSchedule schedule) {
  OptimState s;
  s.hyper = hyper;
  s.schedule = schedule;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.numel(), 0.0);
    s.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

void adamw_step(const ParamList& params, OptimState& s, double lr) {
  if (s.m.size() != params.size() || s.v.size() != params.size()) {
    throw DimensionError("optimizer state does not match the parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].tensor.has_grad()) continue;
    for (double g : params[i].tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + params[i].name + "'");
    }
  }
  s.t += 1;
  const double b1 = s.hyper.beta1, b2 = s.hyper.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    auto theta = p.mutable_data();
    if (s.m[i].size() != theta.size()) throw DimensionError("moment shape mismatch for '" + params[i].name + "'");
    const bool has_grad = p.has_grad();
    const auto grad = p.grad();
    const double wd = params[i].decay ? s.hyper.weight_decay : 0.0;
    auto& m = s.m[i];
    auto& v = s.v[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double g = has_grad ? grad[k] : 0.0;
      m[k] = b1 * m[k] + (1.0 - b1) * g;
      v[k] = b2 * v[k] + (1.0 - b2) * g * g;
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      theta[k] = theta[k] - lr * (m_hat / (std::sqrt(v_hat) + s.hyper.eps)) - lr * wd * theta[k];
    }
  }
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  std::vector<Tensor> tensors;
  tensors.reserve(params.size());
  for (const auto& p : params) tensors.push_back(p.tensor);
  const double norm = grad_norm(tensors);
  if (max_norm > 0.0 && std::isfinite(norm) && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& t : tensors) {
      if (!t.has_grad()) continue;
      for (auto& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("train config field '" + field + "' " + why);
  };
  if (seq_len < 2) fail("seq_len", "must be >= 2");
  if (token_budget == 0 || token_budget % seq_len != 0) fail("token_budget", "must be a positive multiple of seq_len");
  if (total_steps == 0) fail("total_steps", "must be positive");
  if (warmup_steps > total_steps) fail("warmup_steps", "must not exceed total_steps");
  if (!(peak_lr > 0.0)) fail("peak_lr", "must be positive");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) fail("min_lr_ratio", "must lie in [0, 1]");
  if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0)) fail("beta1", "must lie in [0, 1)");
  if (!(adamw.beta2 >= 0.0 && adamw.beta2 < 1.0)) fail("beta2", "must lie in [0, 1)");
  if (!(adamw.eps > 0.0)) fail("adam_eps", "must be positive");
  if (!(adamw.weight_decay >= 0.0)) fail("weight_decay", "must be non-negative");
  masking.validate();
}

LrSchedule TrainConfig::schedule() const {
  return LrSchedule{peak_lr, warmup_steps, total_steps, peak_lr * min_lr_ratio};
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  TrainConfig c;
  c.seq_len = kv.get_size("seq_len", c.seq_len);
  c.token_budget = kv.get_size("token_budget", c.token_budget);
  c.warmup_steps = kv.get_size("warmup_steps", c.warmup_steps);
  c.total_steps = kv.get_size("total_steps", c.total_steps);
  c.peak_lr = kv.get_double("peak_lr", c.peak_lr);
  c.min_lr_ratio = kv.get_double("min_lr_ratio", c.min_lr_ratio);
  c.adamw.beta1 = kv.get_double("beta1", c.adamw.beta1);
  c.adamw.beta2 = kv.get_double("beta2", c.adamw.beta2);
  c.adamw.eps = kv.get_double("adam_eps", c.adamw.eps);
  c.adamw.weight_decay = kv.get_double("weight_decay", c.adamw.weight_decay);
  c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
  c.masking.p_select = kv.get_double("mask_rate", c.masking.p_select);
  c.masking.p_mask = kv.get_double("mask_token_frac", c.masking.p_mask);
  c.masking.p_random = kv.get_double("mask_random_frac", c.masking.p_random);
  c.masking.p_keep = kv.get_double("mask_keep_frac", c.masking.p_keep);
  c.data_seed = kv.get_u64("data_seed", c.data_seed);
  c.checkpoint_every = kv.get_size("checkpoint_every", c.checkpoint_every);
  return c;
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_entries() const {
  auto s = [](std::uint64_t v) { return std::to_string(v); };
  return {{"seq_len", s(seq_len)},
          {"token_budget", s(token_budget)},
          {"warmup_steps", s(warmup_steps)},
          {"total_steps", s(total_steps)},
          {"peak_lr", format_double(peak_lr)},
          {"min_lr_ratio", format_double(min_lr_ratio)},
          {"beta1", format_double(adamw.beta1)},
          {"beta2", format_double(adamw.beta2)},
          {"adam_eps", format_double(adamw.eps)},
          {"weight_decay", format_double(adamw.weight_decay)},
          {"clip_norm", format_double(clip_norm)},
          {"mask_rate", format_double(masking.p_select)},
          {"mask_token_frac", format_double(masking.p_mask)},
          {"mask_random_frac", format_double(masking.p_random)},
          {"mask_keep_frac", format_double(masking.p_keep)},
          {"data_seed", s(data_seed)},
          {"checkpoint_every", s(checkpoint_every)}};
}

std::string step_record_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["lr"] = r.lr;
  j["grad_norm"] = r.grad_norm;
  j["tokens_per_s"] = r.tokens_per_s;
  return j.dump();
}

// --------------------------------------------------------------- trainer

Trainer::Trainer(Model& model, std::vector<TokenSequence> corpus, TrainConfig cfg)
    : model_(model),
      cfg_(cfg),
      params_(model.parameters()),
      stream_(std::move(corpus), cfg.seq_len, cfg.token_budget, cfg.masking, cfg.data_seed) {
  cfg_.validate();
  state_ = OptimState::for_params(params_, cfg_.adamw, cfg_.schedule());
}

StepRecord Trainer::step() {
  for (;;) {
    MaskedBatch batch = stream_.next();
    if (batch.selected() == 0) continue;  // nothing to score; skip
    return step_on(batch);
  }
}

StepRecord Trainer::step_on(const MaskedBatch& batch) {
  if (batch.selected() == 0) throw InputError("batch " + std::to_string(batch.index) + " selects no position");
  const auto start = std::chrono::steady_clock::now();
  for (auto& p : params_) p.tensor.zero_grad();
  StepRecord rec;
  rec.step = state_.t + 1;
  {
    Tape tape;
    const Tensor logits = model_.forward(batch.input_ids, batch.batch, batch.length, batch.row_lengths());
    const Tensor loss = mlm_loss(logits, batch);
    rec.loss = loss.item();
    if (!std::isfinite(rec.loss)) {
      throw NumericError("non-finite loss at step " + std::to_string(rec.step) + " (batch " +
                         std::to_string(batch.index) + ")");
    }
    tape.backward(loss);
  }
  rec.grad_norm = clip_grad_norm(params_, cfg_.clip_norm);
  rec.lr = lr_schedule(rec.step, state_.schedule);
  adamw_step(params_, state_, rec.lr);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rec.tokens_per_s = seconds > 0.0 ? static_cast<double>(batch.tokens()) / seconds : 0.0;
  return rec;
}

namespace {

constexpr char kStateMagic[4] = {'W', 'S', 'R', 'S'};
constexpr std::uint32_t kStateVersion = 1;

template <class T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("resume state '" + path + "' is truncated at byte offset " +
                             std::to_string(static_cast<long long>(in.tellg())));
  return v;
}

void put_doubles(std::ostream& out, std::span<const double> v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void get_doubles(std::istream& in, std::span<double> v, const std::string& path, const std::string& what) {
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!in) throw FormatError("resume state '" + path + "' is truncated in " + what);
}

}  // namespace

void Trainer::save_state(const std::filesystem::path& path) const {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write resume state '" + tmp.string() + "'");
    out.write(kStateMagic, 4);
    put<std::uint32_t>(out, kStateVersion);
    put<std::uint64_t>(out, state_.t);
    put<std::uint64_t>(out, stream_.cursor());
    put<std::uint64_t>(out, params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& p = params_[i];
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      put<std::uint64_t>(out, p.tensor.numel());
      put_doubles(out, p.tensor.data());
      put_doubles(out, state_.m[i]);
      put_doubles(out, state_.v[i]);
    }
    if (!out) throw IoError("failed while writing resume state '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

void Trainer::load_state(const std::filesystem::path& path) {
  const std::string ps = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open resume state '" + ps + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kStateMagic, 4) != 0) throw FormatError("resume state '" + ps + "' has bad magic");
  const auto version = get<std::uint32_t>(in, ps);
  if (version != kStateVersion) throw FormatError("resume state '" + ps + "' has unsupported version");
  const auto t = get<std::uint64_t>(in, ps);
  const auto cursor = get<std::uint64_t>(in, ps);
  const auto count = get<std::uint64_t>(in, ps);
  if (count != params_.size()) {
    throw FormatError("resume state '" + ps + "' holds " + std::to_string(count) + " parameters, model has " +
                      std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const auto name_len = get<std::uint32_t>(in, ps);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in || name != p.name) throw FormatError("resume state '" + ps + "' expected parameter '" + p.name + "'");
    const auto numel = get<std::uint64_t>(in, ps);
    if (numel != p.tensor.numel()) throw FormatError("resume state size mismatch for '" + p.name + "'");
    get_doubles(in, p.tensor.mutable_data(), ps, p.name);
    get_doubles(in, state_.m[i], ps, p.name + " (first moment)");
    get_doubles(in, state_.v[i], ps, p.name + " (second moment)");
  }
  state_.t = t;
  stream_.seek(cursor);
}

std::vector<StepRecord> train(Trainer& trainer, const TrainOptions& options) {
  const std::size_t target = options.steps ? options.steps : trainer.config().total_steps;
  std::ofstream file_log;
  std::ostream* log = options.log;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    if (!log) {
      file_log.open(options.out_dir / "log.jsonl", std::ios::app);
      if (!file_log) throw IoError("cannot open '" + (options.out_dir / "log.jsonl").string() + "'");
      log = &file_log;
    }
  }
  std::vector<StepRecord> records;
  std::optional<PrefetchingBatchStream> prefetch;
  if (options.prefetch) prefetch.emplace(trainer.stream(), trainer.stream().cursor());

  while (trainer.steps_done() < target) {
    StepRecord rec;
    if (prefetch) {
      const MaskedBatch batch = prefetch->next();
      trainer.seek(batch.index + 1);
      if (batch.selected() == 0) continue;
      rec = trainer.step_on(batch);
    } else {
      rec = trainer.step();
    }
    records.push_back(rec);
    if (log) *log << step_record_json(rec) << "\n" << std::flush;
    if (options.on_step) options.on_step(rec);
    const std::size_t every = trainer.config().checkpoint_every;
    if (!options.out_dir.empty() && every > 0 && rec.step % every == 0 && rec.step < target) {
      const std::string tag = std::to_string(rec.step);
      save_checkpoint(trainer.model(), options.out_dir / ("ckpt_step" + tag + ".wstr"));
      trainer.save_state(options.out_dir / ("state_step" + tag + ".bin"));
    }
  }
  if (!options.out_dir.empty()) {
    save_checkpoint(trainer.model(), options.out_dir / "final.wstr");
    trainer.save_state(options.out_dir / "final_state.bin");
  }
  return records;
}

}  // namespace wisteria
