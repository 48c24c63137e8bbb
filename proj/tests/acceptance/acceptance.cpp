// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS/FAIL line per criterion.
//   acceptance            run all twelve
//   acceptance 3 7 12     run the listed ones
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "test_util.hpp"
#include "wisteria/eval.hpp"
#include "wisteria/grad_check.hpp"
#include "wisteria/memory.hpp"
#include "wisteria/ops.hpp"
#include "wisteria/training.hpp"

namespace fs = std::filesystem;
using namespace wisteria;
using wisteria::testing::max_abs_diff;
using wisteria::testing::randn;
using wisteria::testing::scale_in_place;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::int32_t> random_ids(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::int32_t> ids(n);
  for (auto& v : ids) v = static_cast<std::int32_t>(rng() % 4);
  return ids;
}

GradCheckReport check_params(const std::function<Tensor()>& f, const ParamList& params, const Tensor* x) {
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  if (x) {
    inputs.push_back(*x);
    names.push_back("x");
  }
  for (const auto& p : params) {
    inputs.push_back(p.tensor);
    names.push_back(p.name);
  }
  return GradChecker(1e-5).check(f, inputs, names);
}

// Initialization-scale weights leave several blocks in regions where the
// output barely moves (LayerNorm at its epsilon, near-zero scan output), so
// the checks first scale projections into an informative range.
void scale_projections(ParamList& params) {
  for (auto& p : params) {
    const std::string& n = p.name;
    if (n.find("proj") != std::string::npos || n.ends_with("dt_w")) scale_in_place(p.tensor, 20.0);
    if (n.find("mlp_w") != std::string::npos) scale_in_place(p.tensor, 25.0);
    if (n.ends_with("wq") || n.ends_with("wk") || n.ends_with("wv") || n.ends_with("wo")) scale_in_place(p.tensor, 30.0);
    if (n.find("fope") != std::string::npos) scale_in_place(p.tensor, 20.0);
    if (n == "head.w") scale_in_place(p.tensor, 30.0);
  }
}

// ------------------------------------------------------------------ 1

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<std::string, double>> results;
  SsmConfig ssm;
  ssm.d_model = 4;
  ssm.state_dim = 3;

  {
    Tensor x = randn({2, 6, 4}, 1, 1.0, true);
    Tensor w = randn({4, 3}, 2, 1.0, true), b = randn({4}, 3, 1.0, true);
    const auto same = GradChecker(1e-5).check(
        [&] { return depthwise_conv1d(x, w, b, 2, ConvPadding::kSame, {6, 4}); }, {x, w, b});
    const auto causal =
        GradChecker(1e-5).check([&] { return depthwise_conv1d(x, w, b, 3, ConvPadding::kCausal); }, {x, w, b});
    results.emplace_back("depthwise dilated conv", std::max(same.max_rel_error, causal.max_rel_error));
  }
  {
    Tensor x = randn({1, 8, 2}, 4, 1.0, true), delta = randn({1, 8, 2}, 5, 1.0, true);
    for (auto& v : delta.mutable_data()) v = 0.1 + std::abs(v) * 0.5;
    Tensor a_log = randn({2, 3}, 6, 0.5, true), b = randn({1, 8, 3}, 7, 1.0, true);
    Tensor c = randn({1, 8, 3}, 8, 1.0, true), d = randn({2}, 9, 1.0, true);
    const auto r = GradChecker(1e-5).check([&] { return selective_scan(x, delta, a_log, b, c, d); },
                                           {x, delta, a_log, b, c, d});
    results.emplace_back("selective scan", r.max_rel_error);
  }
  {
    Initializer init(10);
    const BiMamba bm = BiMamba::init(ssm, init);
    ParamList params;
    bm.collect("", params);
    for (auto& p : params) {
      if (p.name.find("proj") != std::string::npos) scale_in_place(p.tensor, 10.0);
    }
    Tensor x = randn({2, 6, 4}, 11, 1.0, true);
    results.emplace_back("bimamba", check_params([&] { return bm.forward(x, {6, 3}); }, params, &x).max_rel_error);
  }
  {
    Initializer init(12);
    const GcmbBlock g = GcmbBlock::init(ssm, 3, 2, 1, init);
    ParamList params;
    g.collect("", params);
    scale_projections(params);
    Tensor x = randn({2, 6, 4}, 13, 1.0, true);
    results.emplace_back("gcmb block", check_params([&] { return g.forward(x, {6, 5}); }, params, &x).max_rel_error);
  }
  {
    Initializer init(14);
    const GatedMlp m = GatedMlp::init(4, 8, init);
    ParamList params;
    m.collect("", params);
    for (auto& p : params) {
      for (auto& v : p.tensor.mutable_data()) v += 0.3;
    }
    Tensor x = randn({4, 4}, 15, 1.0, true);
    results.emplace_back("gated mlp", check_params([&] { return m.forward(x); }, params, &x).max_rel_error);
  }
  {
    Initializer init(16);
    const Attention a = Attention::init(8, 2, PositionMode::kFope, 4, 4, init);
    ParamList params;
    a.collect("", params);
    scale_projections(params);
    Tensor x = randn({2, 6, 8}, 17, 1.0, true);
    results.emplace_back("fope attention",
                         check_params([&] { return a.forward(x, {6, 4}); }, params, &x).max_rel_error);
  }
  {
    ModelConfig c;
    c.dim = 8;
    c.num_layers = 2;
    c.num_gcmb = 1;
    c.heads = 2;
    c.state_dim = 3;
    c.kernel = 3;
    c.train_len = 4;
    c.seed = 18;
    const Model m = Model::build(c);
    ParamList params = m.parameters();
    scale_projections(params);
    const auto ids = random_ids(12, 19);
    results.emplace_back("2-layer model",
                         check_params([&] { return m.forward(ids, 2, 6, {6, 4}); }, params, nullptr).max_rel_error);
  }

  double worst = 0.0;
  std::string worst_name, all;
  for (const auto& [name, err] : results) {
    if (err >= worst) {
      worst = err;
      worst_name = name;
    }
    all += fmt(" %s=%.1e", name.c_str(), err);
  }
  const double secs = seconds_since(t0);
  const bool pass = worst < 1e-4 && secs < 120.0;
  return {pass, fmt("max rel err %.2e (%s) < 1e-4 over %zu blocks; %.1f s < 120 s;", worst, worst_name.c_str(),
                    results.size(), secs) +
                    all};
}

// ------------------------------------------------------------------ 2

Outcome scan_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t len = 16, ch = 3, ns = 4;
  double worst = 0.0;
  auto vec = [](const Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Tensor x = randn({1, len, ch}, 1000 + seed);
    Tensor delta = randn({1, len, ch}, 2000 + seed);
    for (auto& v : delta.mutable_data()) v = 0.01 + std::abs(v) * 0.3;
    const Tensor a_log = randn({ch, ns}, 3000 + seed, 0.5);
    const Tensor b = randn({1, len, ns}, 4000 + seed), c = randn({1, len, ns}, 5000 + seed);
    const Tensor d = randn({ch}, 6000 + seed);
    const Tensor y = selective_scan(x, delta, a_log, b, c, d);
    const auto ref = oracle::unrolled_scan(vec(x), vec(delta), vec(a_log), vec(b), vec(c), vec(d), len, ch, ns);
    worst = std::max(worst, max_abs_diff(y.data(), ref));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-10 && secs < 10.0,
          fmt("max |scan - unrolled| %.2e < 1e-10 over 100 instances (L=16, D=3, N_s=4); %.2f s < 10 s", worst, secs)};
}

// ------------------------------------------------------------------ 3

Outcome fope_degeneration() {
  Initializer init(30);
  const std::size_t dim = 64, heads = 4, len = 32, dh = dim / heads;
  Attention fope = Attention::init(dim, heads, PositionMode::kFope, 256, 4, init);
  fope.fope.cutoff = 0.0;
  for (auto& v : fope.fope.coeffs.mutable_data()) v = 0.0;
  Attention rope = fope;
  rope.mode = PositionMode::kRope;
  const Tensor x = randn({1, len, dim}, 31);
  const Tensor lf = fope.logits(x), lr = rope.logits(x);
  const double diff = max_abs_diff(lf.data(), lr.data());

  // independent reference for the RoPE logits
  const Tensor qp = linear(x, fope.wq), kp = linear(x, fope.wk);
  double ref_diff = 0.0;
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> q(len * dh), k(len * dh);
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t e = 0; e < dh; ++e) {
        q[t * dh + e] = qp.data()[t * dim + h * dh + e];
        k[t * dh + e] = kp.data()[t * dim + h * dh + e];
      }
    }
    const auto ref = oracle::rope_logits(q, k, len, dh);
    ref_diff = std::max(ref_diff, max_abs_diff(std::span(lr.data()).subspan(h * len * len, len * len), ref));
  }

  // pairs below the cutoff pass through unrotated, with live harmonics
  FopeParams p = FopeParams::init(dh, 1024, 4, init);
  for (auto& v : p.coeffs.mutable_data()) v = 0.5;
  const Tensor z = randn({len, heads, dh}, 32);
  const Tensor rz = fope_rotate(z, p);
  std::size_t pass_pairs = 0, mismatched = 0;
  for (std::size_t m = 0; m < dh / 2; ++m) {
    if (!(p.base_freqs[m] < p.cutoff)) continue;
    ++pass_pairs;
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t i = (t * heads + h) * dh + 2 * m;
        if (rz.data()[i] != z.data()[i] || rz.data()[i + 1] != z.data()[i + 1]) ++mismatched;
      }
    }
  }
  const bool pass = diff < 1e-9 && ref_diff < 1e-9 && pass_pairs > 0 && mismatched == 0;
  return {pass, fmt("max |FoPE - RoPE logits| %.2e < 1e-9, RoPE vs reference %.2e < 1e-9 (L=32, D=64); "
                    "%zu sub-cutoff pairs unrotated, %zu mismatches (exact)",
                    diff, ref_diff, pass_pairs, mismatched)};
}

// ------------------------------------------------------------------ 4

Outcome equivariance() {
  SsmConfig cfg;
  cfg.d_model = 8;
  cfg.state_dim = 4;
  Initializer init(40);
  const BiMamba bm = BiMamba::init(cfg, init, true);
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor x = randn({2, 24, 8}, 41 + s);
    worst = std::max(worst, max_abs_diff(bm.forward(flip(x, 1)).data(), flip(bm.forward(x), 1).data()));
  }
  return {worst < 1e-10, fmt("max |bimamba(flip x) - flip bimamba(x)| %.2e < 1e-10 (tied streams, 5 inputs)", worst)};
}

// ------------------------------------------------------------------ 5

Outcome masking_statistics() {
  std::mt19937_64 data_rng(50), rng(51);
  const std::size_t n = 1'000'000;
  TokenSequence ids(n);
  for (auto& v : ids) v = static_cast<std::int32_t>(data_rng() % 4);
  const MaskedRow row = apply_mlm_mask(ids, rng, MaskingConfig{});
  std::size_t selected = 0, masked = 0, changed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!row.loss_mask[i]) continue;
    ++selected;
    if (row.input_ids[i] == vocab::kMask) {
      ++masked;
    } else if (row.input_ids[i] != ids[i]) {
      ++changed;
    }
  }
  const double sel = static_cast<double>(selected) / static_cast<double>(n);
  const double mask_frac = static_cast<double>(masked) / static_cast<double>(selected);
  // a uniform nucleotide replacement changes the token with probability 3/4
  const double random_frac = static_cast<double>(changed) / static_cast<double>(selected) / 0.75;
  const double keep_frac = 1.0 - mask_frac - random_frac;
  const bool pass = sel >= 0.148 && sel <= 0.152 && std::abs(mask_frac - 0.8) <= 0.01 &&
                    std::abs(random_frac - 0.1) <= 0.01 && std::abs(keep_frac - 0.1) <= 0.01;
  return {pass, fmt("selected %.5f in [0.148, 0.152]; mask %.4f, random %.4f, keep %.4f each within 0.01 of "
                    "0.8/0.1/0.1 (10^6 positions)",
                    sel, mask_frac, random_frac, keep_frac)};
}

// ------------------------------------------------------------------ 6

Outcome token_budget() {
  std::mt19937_64 rng(60);
  std::vector<TokenSequence> corpus;
  for (int i = 0; i < 4; ++i) corpus.push_back(random_ids(3000 + 500 * i, rng()));
  bool exact = true;
  std::string shapes;
  for (const std::size_t len : {std::size_t{256}, std::size_t{1024}}) {
    BatchStream s(corpus, len, 8192, MaskingConfig{}, 61);
    for (int i = 0; i < 4; ++i) {
      const MaskedBatch b = s.next();
      exact = exact && b.batch * b.length == 8192 && b.input_ids.size() == 8192 && b.length == len;
    }
    shapes += fmt(" L=%zu->B=%zu", len, budget_batch_size(8192, len));
  }
  const std::size_t b1 = budget_batch_size(1'048'576, 1024), b2 = budget_batch_size(1'048'576, 131'072);
  const bool pass = exact && b1 == 1024 && b2 == 8;
  return {pass, fmt("B*L == 8192 for every batch:%s; budget 1048576: L=1024 -> B=%zu, L=131072 -> B=%zu",
                    shapes.c_str(), b1, b2)};
}

// ------------------------------------------------------------------ 7

Outcome dilation_and_locality() {
  const auto sched = dilation_schedule(3, 5);
  const bool sched_ok = sched == std::vector<std::size_t>{1, 1, 3, 9, 27};
  ModelConfig c;
  c.dim = 16;
  c.heads = 4;
  c.state_dim = 4;
  const Model m = Model::build(c);
  const auto dil = m.gcmb_dilations();
  bool local = dil == sched;
  std::string per_layer;
  const std::size_t len = 600, dim = c.dim;
  for (std::size_t i = 0; i < m.num_layers(); ++i) {
    const auto* g = std::get_if<GcmbBlock>(&m.layer(i));
    if (!g) continue;
    const std::size_t reach = (g->conv_a_w.shape()[1] - 1) / 2 * std::max(g->dilation_a, g->dilation_b);
    // the SSM path is excluded by probing the fusion on a fixed H
    Tensor h = randn({1, len, dim}, 70 + i);
    const Tensor y0 = g->fuse(h);
    std::size_t outside_changed = 0, edge_changed = 0;
    for (const std::size_t p : {std::size_t{150}, std::size_t{300}, std::size_t{449}}) {
      Tensor hp = h;
      hp = Tensor::from_data(h.shape(), std::vector<double>(h.data().begin(), h.data().end()));
      hp.mutable_data()[p * dim + 3] += 0.5;
      const Tensor y1 = g->fuse(hp);
      for (std::size_t t = 0; t < len; ++t) {
        bool differs = false;
        for (std::size_t j = 0; j < dim; ++j) differs = differs || y0.data()[t * dim + j] != y1.data()[t * dim + j];
        const bool inside = t + reach >= p && t <= p + reach;
        if (!inside && differs) ++outside_changed;
        if ((t + reach == p || t == p + reach) && differs) ++edge_changed;
      }
    }
    local = local && outside_changed == 0 && edge_changed == 6;
    per_layer += fmt(" d=%zu:span=%zu,out=%zu,edge=%zu/6", g->dilation_a, 2 * reach + 1, outside_changed, edge_changed);
  }
  return {sched_ok && local,
          fmt("schedule n=3 -> [%zu,%zu,%zu,%zu,%zu]; locality exact per GCMB layer:", sched[0], sched[1], sched[2],
              sched[3], sched[4]) +
              per_layer};
}

// ------------------------------------------------------------------ 8

ModelConfig desk_model(std::size_t train_len, std::uint64_t seed) {
  ModelConfig c;
  c.dim = 64;
  c.num_layers = 4;
  c.num_gcmb = 2;
  c.state_dim = 8;
  c.heads = 4;
  c.train_len = train_len;
  c.seed = seed;
  return c;
}

Outcome training_smoke() {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig tc;
  tc.seq_len = 256;
  tc.token_budget = 2048;
  tc.warmup_steps = 30;
  tc.total_steps = 500;
  tc.data_seed = 1;

  SynthParams sp;
  sp.kind = CorpusKind::kPeriodic;
  sp.period = 8;
  sp.num_records = 64;
  sp.length = 1024;
  Model periodic_model = Model::build(desk_model(256, 1));
  Trainer periodic(periodic_model, tokenize_corpus(synth_corpus(sp, 1).records), tc);
  std::size_t reached = 0;
  double last = 0.0;
  while (periodic.steps_done() < 500) {
    last = periodic.step().loss;
    if (last < 0.1) {
      reached = periodic.steps_done();
      break;
    }
  }
  const double t_periodic = seconds_since(t0);

  SynthParams up;
  up.kind = CorpusKind::kUniform;
  up.num_records = 64;
  up.length = 1024;
  TrainConfig uc = tc;
  uc.total_steps = 200;
  Model uniform_model = Model::build(desk_model(256, 2));
  Trainer uniform(uniform_model, tokenize_corpus(synth_corpus(up, 2).records), uc);
  std::vector<double> losses;
  for (int i = 0; i < 200; ++i) losses.push_back(uniform.step().loss);
  double plateau = 0.0;
  for (std::size_t i = 150; i < 200; ++i) plateau += losses[i];
  plateau /= 50.0;

  const double secs = seconds_since(t0);
  const bool pass = reached > 0 && std::abs(plateau - std::log(4.0)) <= 0.05 && secs < 900.0;
  return {pass, fmt("periodic (period 8, no noise): loss %.4f < 0.1 at step %zu <= 500 (%.0f s); uniform: mean loss of "
                    "steps 151-200 %.4f within 0.05 of ln 4 = %.4f; %.0f s < 900 s",
                    last, reached, t_periodic, plateau, std::log(4.0), secs)};
}

// ------------------------------------------------------------------ 9

Outcome probe_learnability() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string motif = "ACGTTGCA";  // balanced composition
  const std::size_t len = 512;
  SynthParams sp;
  sp.kind = CorpusKind::kMotif;
  sp.num_records = 150;
  sp.length = len;
  sp.motif = motif;
  const Corpus task = synth_corpus(sp, 11);
  const auto task_tokens = tokenize_corpus(task.records);

  Model model = Model::build(desk_model(len, 5));
  const ProbeResult untrained = linear_probe(embed_records(model, task_tokens), task.labels);

  // pretraining corpus: uniform background rich in the motif
  SynthParams bg;
  bg.kind = CorpusKind::kUniform;
  bg.num_records = 200;
  bg.length = len;
  Corpus pre = synth_corpus(bg, 12);
  std::mt19937_64 rng(3);
  for (auto& r : pre.records) {
    for (int k = 0; k < 32; ++k) r.sequence.replace(rng() % (len - motif.size()), motif.size(), motif);
  }
  TrainConfig tc;
  tc.seq_len = len;
  tc.token_budget = 2048;
  tc.warmup_steps = 30;
  tc.total_steps = 400;
  tc.data_seed = 2;
  Trainer trainer(model, tokenize_corpus(pre.records), tc);
  train(trainer, {});
  const ProbeResult trained = linear_probe(embed_records(model, task_tokens), task.labels);

  const double secs = seconds_since(t0);
  const bool pass = trained.mean >= 0.95 && std::abs(untrained.mean - 0.5) <= 0.1 && secs < 1200.0;
  return {pass, fmt("trained %.4f +- %.4f >= 0.95; untrained %.4f +- %.4f within 0.5 +- 0.1 (5 seeds x 5 folds, "
                    "L=%zu, 300 records); %.0f s < 1200 s",
                    trained.mean, trained.std, untrained.mean, untrained.std, len, secs)};
}

// ------------------------------------------------------------------ 10

Outcome fope_vs_rope() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n_train = 64;
  int wins = 0;
  std::string rows;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SynthParams sp;
    sp.kind = CorpusKind::kPeriodic;
    sp.pattern = "ACGTTGCAGGTACCATGACTTGAC";
    sp.period = sp.pattern.size();
    sp.noise = 0.1;
    sp.random_phase = true;
    sp.num_records = 64;
    sp.length = 1024;
    const auto train_set = tokenize_corpus(synth_corpus(sp, 100 + seed).records);
    const auto eval_set = tokenize_corpus(synth_corpus(sp, 200 + seed).records);
    double ppl[2];
    for (int mode = 0; mode < 2; ++mode) {
      ModelConfig mc;
      mc.dim = 32;
      mc.num_layers = 2;
      mc.num_gcmb = 0;
      mc.state_dim = 8;
      mc.heads = 4;
      mc.train_len = n_train;
      mc.seed = seed;
      mc.attn_mode = mode == 0 ? PositionMode::kFope : PositionMode::kRope;
      Model m = Model::build(mc);
      TrainConfig tc;
      tc.seq_len = n_train;
      tc.token_budget = 2048;
      tc.warmup_steps = 20;
      tc.total_steps = 400;
      tc.data_seed = seed;
      Trainer trainer(m, train_set, tc);
      train(trainer, {});
      PplOptions po;
      po.max_windows = 64;
      const std::vector<std::size_t> lengths{4 * n_train};
      ppl[mode] = eval_perplexity(m, eval_set, lengths, po)[0].ppl;
    }
    if (ppl[0] <= ppl[1]) ++wins;
    rows += fmt(" seed %llu: fope %.4f, rope %.4f;", static_cast<unsigned long long>(seed), ppl[0], ppl[1]);
  }
  return {wins >= 2, fmt("FoPE <= RoPE perplexity at 4 x N_train = %zu in %d/3 seeds (majority needed);", 4 * n_train,
                         wins) +
                         rows + fmt(" %.0f s", seconds_since(t0))};
}

// ------------------------------------------------------------------ 11

Outcome bench_curves() {
  BenchConfig cfg;
  cfg.model.dim = 32;
  cfg.model.heads = 2;
  cfg.model.num_layers = 4;
  cfg.model.num_gcmb = 2;
  cfg.model.state_dim = 8;
  cfg.model.train_len = 256;
  cfg.reps = 1;
  cfg.warmup = 0;
  const auto rows = bench(cfg);
  auto find = [&](const std::string& v, std::size_t len) -> const BenchRow* {
    for (const auto& r : rows) {
      if (r.variant == v && r.length == len) return &r;
    }
    return nullptr;
  };
  bool ok = true, monotone = true;
  for (const auto& v : {"full", "no_fourier"}) {
    std::int64_t prev = 0;
    for (const std::size_t len : cfg.lengths) {
      const BenchRow* r = find(v, len);
      ok = ok && r && r->ok;
      if (!r) continue;
      monotone = monotone && r->peak_bytes >= prev;
      prev = r->peak_bytes;
    }
  }
  const BenchRow *f8 = find("full", 8192), *n8 = find("no_fourier", 8192), *f1 = find("full", 1024);
  if (!ok || !f8 || !n8 || !f1) return {false, "bench rows missing or out of memory"};
  const bool crossover = f8->tokens_per_s < n8->tokens_per_s;
  const double ratio = static_cast<double>(f1->attn_peak_bytes) / static_cast<double>(f1->attn_logit_bytes);
  const bool within = ratio >= 0.5 && ratio <= 2.0;
  std::string curve;
  for (const auto& r : rows) curve += fmt(" %s@%zu=%.0f", r.variant.c_str(), r.length, r.tokens_per_s);
  return {crossover && monotone && within,
          fmt("tokens/s at 8192: full %.0f < no_fourier %.0f; peak bytes monotone in L: %s; attention peak / "
              "analytic heads*L^2*8 at 1024 = %lld / %lld = %.3f within [0.5, 2];",
              f8->tokens_per_s, n8->tokens_per_s, monotone ? "yes" : "no", static_cast<long long>(f1->attn_peak_bytes),
              static_cast<long long>(f1->attn_logit_bytes), ratio) +
              curve};
}

// ------------------------------------------------------------------ 12

std::string strip_rate(const std::string& json) {
  static const std::regex rate(R"(,?"tokens_per_s":[^,}]*)");
  return std::regex_replace(json, rate, "");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "wisteria_acceptance_12";
  fs::remove_all(dir);
  ModelConfig mc = desk_model(128, 7);
  mc.dim = 32;
  TrainConfig tc;
  tc.seq_len = 128;
  tc.token_budget = 1024;
  tc.warmup_steps = 3;
  tc.total_steps = 12;
  tc.checkpoint_every = 6;
  tc.data_seed = 8;
  SynthParams sp;
  sp.kind = CorpusKind::kPeriodic;
  sp.noise = 0.1;
  sp.num_records = 16;
  sp.length = 512;
  const auto corpus = tokenize_corpus(synth_corpus(sp, 9).records);

  std::vector<std::string> logs[2];
  for (int run = 0; run < 2; ++run) {
    Model m = Model::build(mc);
    Trainer t(m, corpus, tc);
    TrainOptions o;
    o.out_dir = dir / ("run" + std::to_string(run));
    for (const auto& r : train(t, o)) logs[run].push_back(strip_rate(step_record_json(r)));
  }
  const bool same_logs = logs[0] == logs[1];
  const bool same_ckpt = slurp(dir / "run0" / "final.wstr") == slurp(dir / "run1" / "final.wstr");
  const bool same_files =
      strip_rate(slurp(dir / "run0" / "log.jsonl")) == strip_rate(slurp(dir / "run1" / "log.jsonl"));

  // resume from the step-6 state and compare step 7
  Model resumed = Model::build(mc);
  Trainer rt(resumed, corpus, tc);
  rt.load_state(dir / "run0" / "state_step6.bin");
  const StepRecord next = rt.step();
  Model straight_model = Model::build(mc);
  Trainer st(straight_model, corpus, tc);
  StepRecord ref;
  for (int i = 0; i < 7; ++i) ref = st.step();
  const bool resume_exact = next.step == 7 && next.loss == ref.loss;

  // forward drift across an f32 checkpoint round trip
  const Model loaded = load_checkpoint(dir / "run0" / "final.wstr");
  Model original = Model::build(mc);
  Trainer full(original, corpus, tc);
  train(full, {});
  const auto ids = random_ids(2 * 128, 10);
  const Tensor a = original.forward(ids, 2, 128), b = loaded.forward(ids, 2, 128);
  double scale = 0.0;
  for (const double v : a.data()) scale = std::max(scale, std::abs(v));
  const double drift = max_abs_diff(a.data(), b.data()) / scale;
  fs::remove_all(dir);

  const bool pass = same_logs && same_ckpt && same_files && resume_exact && drift < 1e-6;
  return {pass, fmt("same-seed logs identical (tokens_per_s excluded): %s, checkpoints byte-identical: %s; resumed "
                    "step-7 loss %.17g vs %.17g (bit-exact: %s); forward drift after f32 round trip %.2e < 1e-6 rel",
                    same_logs && same_files ? "yes" : "no", same_ckpt ? "yes" : "no", next.loss, ref.loss,
                    resume_exact ? "yes" : "no", drift)};
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "gradient suite", gradient_suite},
    {2, "scan oracle", scan_oracle},
    {3, "FoPE degeneration", fope_degeneration},
    {4, "reversal equivariance", equivariance},
    {5, "masking statistics", masking_statistics},
    {6, "token budget", token_budget},
    {7, "dilation schedule and locality", dilation_and_locality},
    {8, "training smoke", training_smoke},
    {9, "probe learnability", probe_learnability},
    {10, "FoPE vs RoPE extrapolation", fope_vs_rope},
    {11, "throughput and memory curves", bench_curves},
    {12, "determinism and persistence", determinism},
};

}  // namespace

int main(int argc, char** argv) {
  memory::retain_freed_pages();
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : kCriteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.id) == wanted.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("%s criterion %2d  %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
