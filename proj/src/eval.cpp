// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include "wisteria/eval.hpp"

#include <sys/utsname.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "wisteria/config.hpp"
#include "wisteria/errors.hpp"
#include "wisteria/ops.hpp"
#include "wisteria/training.hpp"

namespace wisteria {

namespace {

struct Window {
  std::size_t record;
  std::size_t offset;
  std::size_t valid;
};

void check_lengths(std::span<const std::size_t> lengths) {
  if (lengths.empty()) throw ConfigError("at least one evaluation length is required");
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] < 2) {
      throw ConfigError("evaluation length " + std::to_string(lengths[i]) + " is below the minimum of 2");
    }
    if (i > 0 && lengths[i] <= lengths[i - 1]) throw ConfigError("evaluation lengths must be strictly increasing");
  }
}

// Sum of -log softmax(logits)[target] over selected positions.
double masked_nll_sum(std::span<const double> logits, const MaskedRow& row, std::size_t base, std::size_t v,
                      std::size_t& count) {
  double total = 0.0;
  for (std::size_t t = 0; t < row.loss_mask.size(); ++t) {
    if (!row.loss_mask[t]) continue;
    const double* z = logits.data() + (base + t) * v;
    const double mx = *std::max_element(z, z + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(z[j] - mx);
    total += mx + std::log(s) - z[row.target_ids[t]];
    ++count;
  }
  return total;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    out.flush();
    if (!out) throw IoError("failed while writing '" + path.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move output into place at '" + path.string() + "': " + ec.message());
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

std::vector<std::size_t> default_eval_lengths(std::size_t train_len) {
  return {train_len, 2 * train_len, 4 * train_len, 8 * train_len};
}

std::vector<PplRow> eval_perplexity(const Model& model, std::span<const TokenSequence> corpus,
                                    std::span<const std::size_t> lengths, const PplOptions& options) {
  check_lengths(lengths);
  options.masking.validate();
  const std::size_t v = model.config().vocab;
  NoGradGuard no_grad;
  std::vector<PplRow> rows;
  for (const std::size_t len : lengths) {
    std::vector<Window> windows;
    for (std::size_t r = 0; r < corpus.size(); ++r) {
      for (std::size_t off = 0; off < corpus[r].size(); off += len) {
        windows.push_back({r, off, std::min(len, corpus[r].size() - off)});
      }
    }
    if (options.max_windows > 0 && windows.size() > options.max_windows) windows.resize(options.max_windows);

    const std::size_t per_batch = std::max<std::size_t>(1, options.token_budget / len);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t first = 0; first < windows.size(); first += per_batch) {
      const std::size_t b = std::min(per_batch, windows.size() - first);
      TokenSequence ids(b * len, vocab::kPad);
      SeqLengths valid(b);
      std::vector<MaskedRow> masked(b);
      for (std::size_t i = 0; i < b; ++i) {
        const Window& w = windows[first + i];
        const auto src = std::span<const std::int32_t>(corpus[w.record]).subspan(w.offset, w.valid);
        std::mt19937_64 rng(mix_seed(options.seed, first + i));
        masked[i] = apply_mlm_mask(src, rng, options.masking);
        std::copy(masked[i].input_ids.begin(), masked[i].input_ids.end(), ids.begin() + i * len);
        valid[i] = w.valid;
      }
      const Tensor logits = model.forward(ids, b, len, valid);
      for (std::size_t i = 0; i < b; ++i) total += masked_nll_sum(logits.data(), masked[i], i * len, v, count);
    }
    if (count == 0) throw InputError("no masked position to score at length " + std::to_string(len));
    const double ce = total / static_cast<double>(count);
    rows.push_back({len, std::exp(ce), ce, count, windows.size()});
  }
  return rows;
}

Tensor embed_records(const Model& model, std::span<const TokenSequence> records, std::size_t token_budget) {
  const std::size_t d = model.config().dim;
  Buffer out(records.size() * d);
  NoGradGuard no_grad;
  std::size_t first = 0;
  while (first < records.size()) {
    // grow the group while the padded batch fits the budget
    std::size_t last = first + 1;
    std::size_t width = std::max<std::size_t>(1, records[first].size());
    while (last < records.size()) {
      const std::size_t w = std::max(width, records[last].size());
      if (w * (last - first + 1) > token_budget) break;
      width = w;
      ++last;
    }
    const std::size_t b = last - first;
    TokenSequence ids(b * width, vocab::kPad);
    SeqLengths valid(b);
    for (std::size_t i = 0; i < b; ++i) {
      const TokenSequence& rec = records[first + i];
      if (rec.empty()) throw InputError("cannot embed an empty record (index " + std::to_string(first + i) + ")");
      std::copy(rec.begin(), rec.end(), ids.begin() + i * width);
      valid[i] = rec.size();
    }
    const Tensor e = model.extract_embeddings(ids, b, width, valid);
    std::copy(e.data().begin(), e.data().end(), out.begin() + first * d);
    first = last;
  }
  return Tensor::from_buffer({records.size(), d}, std::move(out));
}

ProbeResult linear_probe(const Tensor& embeddings, std::span<const int> labels, const ProbeConfig& cfg) {
  if (embeddings.rank() != 2) throw DimensionError("probe embeddings must be [n, D]");
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  if (labels.size() != n) {
    throw DimensionError("probe has " + std::to_string(n) + " embeddings but " + std::to_string(labels.size()) +
                         " labels");
  }
  if (n < 40) throw InputError("linear probe needs at least 40 samples, got " + std::to_string(n));
  if (cfg.folds < 2 || cfg.folds > n) throw ConfigError("probe folds must lie in [2, n]");
  if (cfg.seeds == 0) throw ConfigError("probe needs at least one seed");
  int max_label = 0;
  for (const int y : labels) {
    if (y < 0) throw InputError("probe labels must be non-negative");
    max_label = std::max(max_label, y);
  }
  const std::size_t classes = static_cast<std::size_t>(max_label) + 1;
  std::vector<std::size_t> per_class(classes, 0);
  for (const int y : labels) ++per_class[static_cast<std::size_t>(y)];
  if (std::count_if(per_class.begin(), per_class.end(), [](std::size_t c) { return c > 0; }) < 2) {
    throw InputError("linear probe needs at least two classes");
  }

  const auto x = embeddings.data();
  ProbeResult result;
  result.classes = classes;
  for (std::size_t s = 0; s < cfg.seeds; ++s) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(cfg.seed, s));
    std::shuffle(order.begin(), order.end(), rng);

    std::size_t correct = 0;
    for (std::size_t f = 0; f < cfg.folds; ++f) {
      const std::size_t lo = f * n / cfg.folds, hi = (f + 1) * n / cfg.folds;
      std::vector<std::size_t> train, test;
      for (std::size_t i = 0; i < n; ++i) (i >= lo && i < hi ? test : train).push_back(order[i]);

      std::vector<double> mu(d, 0.0), sd(d, 0.0);
      for (const std::size_t i : train) {
        for (std::size_t j = 0; j < d; ++j) mu[j] += x[i * d + j];
      }
      for (auto& m : mu) m /= static_cast<double>(train.size());
      for (const std::size_t i : train) {
        for (std::size_t j = 0; j < d; ++j) sd[j] += (x[i * d + j] - mu[j]) * (x[i * d + j] - mu[j]);
      }
      for (auto& q : sd) q = std::sqrt(q / static_cast<double>(train.size())) + 1e-8;
      auto standardized = [&](const std::vector<std::size_t>& idx) {
        std::vector<double> out(idx.size() * d);
        for (std::size_t r = 0; r < idx.size(); ++r) {
          for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (x[idx[r] * d + j] - mu[j]) / sd[j];
        }
        return out;
      };
      const Tensor xtr = Tensor::from_data({train.size(), d}, standardized(train));
      const Tensor xte = Tensor::from_data({test.size(), d}, standardized(test));
      std::vector<std::int32_t> ytr(train.size());
      for (std::size_t r = 0; r < train.size(); ++r) ytr[r] = labels[train[r]];
      const std::vector<std::uint8_t> all(train.size(), 1);

      ParamList params{{"w", Tensor::zeros({d, classes}, true), true}, {"b", Tensor::zeros({classes}, true), false}};
      AdamWConfig hyper;
      hyper.weight_decay = cfg.weight_decay;
      OptimState state = OptimState::for_params(params, hyper, LrSchedule{});
      for (std::size_t e = 0; e < cfg.epochs; ++e) {
        for (auto& p : params) p.tensor.zero_grad();
        Tape tape;
        const Tensor loss = cross_entropy_masked(linear(xtr, params[0].tensor, params[1].tensor), ytr, all);
        tape.backward(loss);
        adamw_step(params, state, cfg.lr);
      }
      NoGradGuard no_grad;
      const Tensor logits = linear(xte, params[0].tensor, params[1].tensor);
      const auto z = logits.data();
      for (std::size_t r = 0; r < test.size(); ++r) {
        const auto begin = z.begin() + static_cast<std::ptrdiff_t>(r * classes);
        const auto pred = std::max_element(begin, begin + static_cast<std::ptrdiff_t>(classes)) - begin;
        if (pred == labels[test[r]]) ++correct;
      }
    }
    result.per_seed.push_back(static_cast<double>(correct) / static_cast<double>(n));
  }
  const double k = static_cast<double>(result.per_seed.size());
  result.mean = std::accumulate(result.per_seed.begin(), result.per_seed.end(), 0.0) / k;
  double var = 0.0;
  for (const double a : result.per_seed) var += (a - result.mean) * (a - result.mean);
  result.std = std::sqrt(var / k);
  return result;
}

std::vector<BenchRow> bench(const BenchConfig& cfg) {
  check_lengths(cfg.lengths);
  if (cfg.reps == 0) throw ConfigError("bench needs at least one timed repetition");
  if (cfg.batch == 0) throw ConfigError("bench batch must be positive");
  const std::int64_t previous_limit = memory::limit();
  const std::int64_t cap = cfg.memory_limit > 0 ? cfg.memory_limit : memory::physical_bytes() / 4 * 3;

  std::vector<BenchRow> rows;
  for (const Variant variant : cfg.variants) {
    const Model model = Model::build_variant(cfg.model, variant);
    const std::size_t n = model.num_layers();
    const bool has_attn = !model.layer_kinds().empty() && model.layer_kinds().back() == LayerKind::kAttention;
    for (const std::size_t len : cfg.lengths) {
      BenchRow row;
      row.variant = variant_name(variant);
      row.length = len;
      if (has_attn) {
        row.attn_logit_bytes =
            static_cast<std::int64_t>(cfg.batch * cfg.model.heads * len * len * sizeof(double));
      }
      TokenSequence ids(cfg.batch * len);
      std::mt19937_64 rng(mix_seed(cfg.model.seed, len));
      for (auto& t : ids) t = static_cast<std::int32_t>(rng() % 4);

      std::vector<double> times;
      memory::set_limit(cap);
      try {
        NoGradGuard no_grad;
        for (std::size_t r = 0; r < cfg.warmup + cfg.reps; ++r) {
          memory::reset_peak();
          const auto t0 = std::chrono::steady_clock::now();
          Tensor x = model.embed(ids, cfg.batch, len);
          x = model.run_layers(x, {}, 0, n - 1);
          const std::int64_t before_last = memory::peak_bytes();
          memory::reset_peak();
          const std::int64_t base = memory::current_bytes();
          x = model.run_layers(x, {}, n - 1, n);
          const std::int64_t last_peak = memory::peak_bytes();
          const Tensor logits = model.head(x);
          const auto t1 = std::chrono::steady_clock::now();
          const std::int64_t peak = std::max({before_last, last_peak, memory::peak_bytes()});
          if (r >= cfg.warmup) times.push_back(std::chrono::duration<double>(t1 - t0).count());
          row.peak_bytes = std::max(row.peak_bytes, peak);
          if (has_attn) row.attn_peak_bytes = std::max(row.attn_peak_bytes, last_peak - base);
        }
        row.median_s = median(times);
        row.tokens_per_s = static_cast<double>(cfg.batch * len) / row.median_s;
      } catch (const std::bad_alloc&) {
        row.ok = false;
        row.peak_bytes = cap;
      }
      memory::set_limit(previous_limit);
      rows.push_back(row);
    }
  }
  return rows;
}

std::string machine_descriptor() {
  std::ostringstream out;
  utsname u{};
  if (uname(&u) == 0) out << u.sysname << ' ' << u.release << ' ' << u.machine << "; ";
  out << "hardware threads " << std::thread::hardware_concurrency() << "; ";
  out << "physical memory " << memory::physical_bytes() / (1 << 20) << " MiB";
  std::ifstream cpu("/proc/cpuinfo");
  std::string line;
  while (std::getline(cpu, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) out << "; cpu" << line.substr(colon + 1);
      break;
    }
  }
  return out.str();
}

void export_embeddings(const Model& model, std::span<const FastaRecord> records, std::span<const int> labels,
                       const std::filesystem::path& path, std::size_t token_budget) {
  if (!labels.empty() && labels.size() != records.size()) {
    throw DimensionError("export has " + std::to_string(records.size()) + " records but " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::vector<TokenSequence> tokens = tokenize_corpus(records);
  const Tensor e = embed_records(model, tokens, token_budget);
  const std::size_t d = model.config().dim;
  std::ostringstream out;
  out << "id,label";
  for (std::size_t j = 0; j < d; ++j) out << ",e" << j;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < records.size(); ++i) {
    out << records[i].id << ',' << (labels.empty() ? -1 : labels[i]);
    for (std::size_t j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(static_cast<float>(e.data()[i * d + j])));
      out << ',' << buf;
    }
    out << '\n';
  }
  write_text(path, out.str());
}

std::string ppl_csv(std::span<const PplRow> rows) {
  std::string s = "length,ppl,mean_ce,positions,windows\n";
  for (const auto& r : rows) {
    s += std::to_string(r.length) + "," + format_double(r.ppl) + "," + format_double(r.mean_ce) + "," +
         std::to_string(r.positions) + "," + std::to_string(r.windows) + "\n";
  }
  return s;
}

std::string probe_csv(const ProbeResult& r) {
  std::string s = "seed,accuracy\n";
  for (std::size_t i = 0; i < r.per_seed.size(); ++i) s += std::to_string(i) + "," + format_double(r.per_seed[i]) + "\n";
  s += "mean," + format_double(r.mean) + "\nstd," + format_double(r.std) + "\n";
  return s;
}

std::string bench_csv(std::span<const BenchRow> rows) {
  std::string s = "variant,length,status,median_s,tokens_per_s,peak_bytes,attn_peak_bytes,attn_logit_bytes\n";
  for (const auto& r : rows) {
    s += r.variant + "," + std::to_string(r.length) + "," + (r.ok ? "ok" : "oom") + "," + format_double(r.median_s) +
         "," + format_double(r.tokens_per_s) + "," + std::to_string(r.peak_bytes) + "," +
         std::to_string(r.attn_peak_bytes) + "," + std::to_string(r.attn_logit_bytes) + "\n";
  }
  return s;
}

void EvalReport::validate() const {
  for (std::size_t i = 0; i < perplexity.size(); ++i) {
    if (!(perplexity[i].ppl >= 1.0)) throw ConfigError("perplexity below 1 at length " + std::to_string(perplexity[i].length));
    if (i > 0 && perplexity[i].length <= perplexity[i - 1].length) {
      throw ConfigError("perplexity lengths are not strictly increasing");
    }
  }
  if (probe) {
    for (const double a : probe->per_seed) {
      if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("probe accuracy outside [0, 1]");
    }
  }
  for (std::size_t i = 1; i < bench.size(); ++i) {
    if (bench[i].variant == bench[i - 1].variant && bench[i].length <= bench[i - 1].length) {
      throw ConfigError("bench lengths are not strictly increasing for variant " + bench[i].variant);
    }
  }
}

std::string EvalReport::summary() const {
  std::ostringstream out;
  if (!perplexity.empty()) {
    out << "perplexity (masked positions)\n";
    for (const auto& r : perplexity) {
      out << "  L=" << r.length << "  ppl=" << format_double(r.ppl) << "  positions=" << r.positions << '\n';
    }
  }
  if (probe) {
    out << "linear probe: accuracy " << format_double(probe->mean) << " +- " << format_double(probe->std) << " over "
        << probe->per_seed.size() << " seeds, " << probe->classes << " classes\n";
  }
  if (!bench.empty()) {
    out << "bench (" << machine << ")\n";
    for (const auto& r : bench) {
      out << "  " << r.variant << " L=" << r.length;
      if (r.ok) {
        out << "  tokens/s=" << format_double(r.tokens_per_s) << "  peak_bytes=" << r.peak_bytes << '\n';
      } else {
        out << "  out of memory\n";
      }
    }
  }
  return out.str();
}

void EvalReport::write(const std::filesystem::path& dir) const {
  validate();
  std::filesystem::create_directories(dir);
  if (!perplexity.empty()) write_text(dir / "ppl.csv", ppl_csv(perplexity));
  if (probe) write_text(dir / "probe.csv", probe_csv(*probe));
  if (!bench.empty()) write_text(dir / "bench.csv", bench_csv(bench));
  write_text(dir / "summary.txt", summary());
}

}  // namespace wisteria
