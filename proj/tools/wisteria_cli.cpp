// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
//
// wisteria: synthesize corpora, pretrain, evaluate, ablate and benchmark.
// Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime.

#include <Eigen/Core>
#include <CLI11.hpp>
#include <json.hpp>

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "wisteria/config.hpp"
#include "wisteria/data.hpp"
#include "wisteria/errors.hpp"
#include "wisteria/eval.hpp"
#include "wisteria/model.hpp"
#include "wisteria/training.hpp"

namespace fs = std::filesystem;
using namespace wisteria;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* sub, Common& c, bool with_config) {
  if (with_config) {
    sub->add_option("--config", c.config, "flat key = value config file")->check(CLI::ExistingFile);
    sub->add_option("overrides", c.overrides, "key=value overrides applied after the config file");
  }
  sub->add_option("--seed", c.seed, "seed for model init and data order");
  sub->add_option("--out", c.out, "output directory")->required();
  sub->add_flag("--force", c.force, "allow writing into a non-empty output directory");
}

KeyValues load_config(const Common& c) {
  KeyValues kv = c.config.empty() ? KeyValues{} : KeyValues::load(c.config);
  for (const auto& o : c.overrides) kv.apply_override(o);
  return kv;
}

void prepare_out(const Common& c) {
  const fs::path dir(c.out);
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError("output path '" + c.out + "' is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !c.force) {
    throw UsageError("output directory '" + c.out + "' is not empty (use --force to overwrite)");
  }
  fs::create_directories(dir);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed while writing '" + path.string() + "'");
}

void write_manifest(const Common& c, const std::string& command, const std::string& resolved,
                    const std::vector<std::string>& artifacts) {
  nlohmann::ordered_json m;
  m["command"] = command;
  m["seed"] = c.seed ? nlohmann::json(*c.seed) : nlohmann::json(nullptr);
  m["config_file"] = c.config;
  m["overrides"] = c.overrides;
  m["resolved_config"] = resolved;
  m["artifacts"] = artifacts;
  write_file(fs::path(c.out) / "manifest.json", m.dump(2) + "\n");
  write_file(fs::path(c.out) / "resolved.cfg", resolved);
}

// FASTA when the first non-blank character is '>', else a manifest of FASTA paths.
std::vector<FastaRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open data file '" + path + "'");
  char ch = 0;
  while (in.get(ch) && std::isspace(static_cast<unsigned char>(ch))) {
  }
  return ch == '>' ? read_fasta_file(path) : read_manifest(path);
}

std::vector<int> read_labels(const std::string& path, const std::vector<FastaRecord>& records) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open labels file '" + path + "'");
  std::map<std::string, int> by_id;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line_no == 1) continue;  // header
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError(path + ":" + std::to_string(line_no) + ": expected id,label");
    try {
      by_id[line.substr(0, comma)] = std::stoi(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": label is not an integer");
    }
  }
  std::vector<int> labels;
  for (const auto& r : records) {
    const auto it = by_id.find(r.id);
    if (it == by_id.end()) throw InputError("no label for record '" + r.id + "' in " + path);
    labels.push_back(it->second);
  }
  return labels;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if constexpr (std::is_same_v<T, std::string>) {
      out.push_back(item);
    } else {
      try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(item, &pos);
        if (pos != item.size()) throw std::invalid_argument(item);
        out.push_back(static_cast<T>(v));
      } catch (const std::exception&) {
        throw ConfigError(what + ": '" + item + "' is not a non-negative integer");
      }
    }
  }
  if (out.empty()) throw ConfigError(what + " is empty");
  return out;
}

void apply_threads() {
  const char* env = std::getenv("WISTERIA_THREADS");
  if (!env) {
    Eigen::setNbThreads(1);
    return;
  }
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || n < 1) {
    throw ConfigError("WISTERIA_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  Eigen::setNbThreads(static_cast<int>(n));
}

struct Resolved {
  ModelConfig model;
  TrainConfig train;
  std::string text;
};

Resolved resolve_training(const Common& c) {
  KeyValues kv = load_config(c);
  if (c.seed) {
    kv.set("seed", std::to_string(*c.seed));
    kv.set("data_seed", std::to_string(*c.seed));
  }
  Resolved r;
  r.model = ModelConfig::from_key_values(kv);
  r.train = TrainConfig::from_key_values(kv);
  kv.reject_unknown();
  r.model.validate();
  r.train.validate();
  r.text = r.model.canonical_text() + format_key_values(r.train.to_entries());
  return r;
}

// Mean loss over the final `tail` records.
double tail_loss(const std::vector<StepRecord>& log, std::size_t tail) {
  if (log.empty()) return 0.0;
  const std::size_t k = std::min(tail, log.size());
  double s = 0.0;
  for (std::size_t i = log.size() - k; i < log.size(); ++i) s += log[i].loss;
  return s / static_cast<double>(k);
}

int run(int argc, char** argv) {
  CLI::App app{"Wisteria genomic language model toolkit"};
  app.require_subcommand(1);

  Common c;
  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic FASTA corpus");
  std::string kind = "periodic";
  SynthParams sp;
  add_common(synth, c, false);
  synth->add_option("--kind", kind, "periodic, motif or uniform");
  synth->add_option("--records", sp.num_records, "record count (motif: per class)");
  synth->add_option("--length", sp.length, "record length");
  synth->add_option("--period", sp.period, "periodic: period");
  synth->add_option("--pattern", sp.pattern, "periodic: explicit base pattern");
  synth->add_option("--noise", sp.noise, "periodic: substitution probability");
  synth->add_flag("--random-phase", sp.random_phase, "periodic: random start offset per record");
  synth->add_option("--motif", sp.motif, "motif: planted pattern");

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "MLM pretraining");
  std::string data;
  std::size_t steps = 0;
  std::string resume;
  add_common(pretrain, c, true);
  pretrain->add_option("--data", data, "FASTA file or manifest of FASTA paths")->required();
  pretrain->add_option("--steps", steps, "stop after this many optimizer steps (default total_steps)");
  pretrain->add_option("--resume", resume, "resume state written by an earlier run")->check(CLI::ExistingFile);

  // eval-ppl
  auto* eval_ppl = app.add_subcommand("eval-ppl", "masked-position perplexity across lengths");
  std::string ckpt, lengths_text;
  std::size_t max_windows = 0;
  add_common(eval_ppl, c, false);
  eval_ppl->add_option("--ckpt", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  eval_ppl->add_option("--data", data, "FASTA file or manifest")->required();
  eval_ppl->add_option("--lengths", lengths_text, "comma-separated lengths (default N,2N,4N,8N)");
  eval_ppl->add_option("--max-windows", max_windows, "cap on windows per length");

  // probe
  auto* probe = app.add_subcommand("probe", "linear probe on pooled embeddings");
  std::string labels_path;
  bool untrained = false;
  ProbeConfig pc;
  add_common(probe, c, true);
  probe->add_option("--ckpt", ckpt, "model checkpoint")->check(CLI::ExistingFile);
  probe->add_flag("--untrained", untrained, "probe a freshly initialized model built from the config");
  probe->add_option("--data", data, "FASTA file or manifest")->required();
  probe->add_option("--labels", labels_path, "CSV with header and id,label rows")->required();
  probe->add_option("--folds", pc.folds, "cross-validation folds");
  probe->add_option("--seeds", pc.seeds, "shuffle seeds");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train and score model variants");
  std::string variants_text, nblocks_text;
  add_common(ablate, c, true);
  ablate->add_option("--data", data, "FASTA file or manifest")->required();
  ablate->add_option("--variants", variants_text, "comma-separated variant names");
  ablate->add_option("--nblocks", nblocks_text, "comma-separated GCMB counts");
  ablate->add_option("--steps", steps, "optimizer steps per variant (default total_steps)");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "inference throughput and peak memory");
  BenchConfig bc;
  std::int64_t limit_mb = 0;
  add_common(bench_cmd, c, true);
  bench_cmd->add_option("--lengths", lengths_text, "comma-separated lengths (default 1024,2048,4096,8192)");
  bench_cmd->add_option("--variants", variants_text, "comma-separated variants (default full,no_fourier)");
  bench_cmd->add_option("--reps", bc.reps, "timed repetitions");
  bench_cmd->add_option("--warmup", bc.warmup, "untimed repetitions");
  bench_cmd->add_option("--batch", bc.batch, "rows per forward pass");
  bench_cmd->add_option("--memory-limit-mb", limit_mb, "tracked allocation cap (default 3/4 of RAM)");

  // export-embeddings
  auto* exp = app.add_subcommand("export-embeddings", "write mean-pooled embeddings as CSV");
  add_common(exp, c, false);
  exp->add_option("--ckpt", ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  exp->add_option("--data", data, "FASTA file or manifest")->required();
  exp->add_option("--labels", labels_path, "optional CSV with id,label rows");

  // inspect-ckpt
  auto* inspect = app.add_subcommand("inspect-ckpt", "print a checkpoint's config and tensor table");
  inspect->add_option("path", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  apply_threads();
  memory::retain_freed_pages();

  if (*inspect) {
    inspect_checkpoint(ckpt, std::cout);
    return 0;
  }

  if (*synth) {
    sp.kind = parse_corpus_kind(kind);
    prepare_out(c);
    const Corpus corpus = synth_corpus(sp, c.seed.value_or(0));
    std::ofstream fa(fs::path(c.out) / "corpus.fasta");
    write_fasta(fa, corpus.records);
    fa.close();
    std::vector<std::string> artifacts{"corpus.fasta"};
    if (!corpus.labels.empty()) {
      std::string csv = "id,label\n";
      for (std::size_t i = 0; i < corpus.records.size(); ++i) {
        csv += corpus.records[i].id + "," + std::to_string(corpus.labels[i]) + "\n";
      }
      write_file(fs::path(c.out) / "labels.csv", csv);
      artifacts.push_back("labels.csv");
    }
    const std::vector<std::pair<std::string, std::string>> entries{
        {"kind", corpus_kind_name(sp.kind)},  {"records", std::to_string(sp.num_records)},
        {"length", std::to_string(sp.length)}, {"period", std::to_string(sp.period)},
        {"pattern", sp.pattern},               {"noise", format_double(sp.noise)},
        {"random_phase", sp.random_phase ? "true" : "false"}, {"motif", sp.motif},
        {"seed", std::to_string(c.seed.value_or(0))}};
    write_manifest(c, "synth", format_key_values(entries), artifacts);
    std::cout << "wrote " << corpus.records.size() << " records to " << (fs::path(c.out) / "corpus.fasta").string()
              << "\n";
    return 0;
  }

  if (*pretrain) {
    const Resolved r = resolve_training(c);
    const auto records = read_records(data);
    // a resumed run may continue in the directory that holds its state
    if (resume.empty()) {
      prepare_out(c);
    } else {
      fs::create_directories(c.out);
    }
    Model model = Model::build(r.model);
    Trainer trainer(model, tokenize_corpus(records), r.train);
    if (!resume.empty()) trainer.load_state(resume);
    write_manifest(c, "pretrain", r.text, {"log.jsonl", "final.wstr", "final_state.bin"});
    TrainOptions opts;
    opts.steps = steps;
    opts.out_dir = c.out;
    const auto log = train(trainer, opts);
    std::cout << "trained " << trainer.steps_done() << " steps; final loss "
              << (log.empty() ? std::string("n/a") : format_double(log.back().loss)) << "\n";
    return 0;
  }

  if (*eval_ppl) {
    const Model model = load_checkpoint(ckpt);
    const auto tokens = tokenize_corpus(read_records(data));
    const auto lengths = lengths_text.empty() ? default_eval_lengths(model.config().train_len)
                                              : parse_list<std::size_t>(lengths_text, "--lengths");
    PplOptions po;
    if (c.seed) po.seed = *c.seed;
    po.max_windows = max_windows;
    prepare_out(c);
    EvalReport report;
    report.perplexity = eval_perplexity(model, tokens, lengths, po);
    report.write(c.out);
    std::string lens;
    for (auto l : lengths) lens += (lens.empty() ? "" : ",") + std::to_string(l);
    write_manifest(c, "eval-ppl",
                   format_key_values({{"checkpoint", ckpt}, {"lengths", lens}, {"seed", std::to_string(po.seed)},
                                      {"max_windows", std::to_string(max_windows)}}),
                   {"ppl.csv", "summary.txt"});
    std::cout << report.summary();
    return 0;
  }

  if (*probe) {
    if (ckpt.empty() == !untrained) throw UsageError("probe needs exactly one of --ckpt or --untrained");
    std::optional<Model> model;
    std::string resolved;
    if (untrained) {
      KeyValues kv = load_config(c);
      if (c.seed) kv.set("seed", std::to_string(*c.seed));
      const ModelConfig mc = ModelConfig::from_key_values(kv);
      TrainConfig::from_key_values(kv);  // training keys are known but unused here
      kv.reject_unknown();
      model.emplace(Model::build(mc));
      resolved = mc.canonical_text();
    } else {
      if (!c.config.empty() || !c.overrides.empty()) throw UsageError("--ckpt carries its own config");
      model.emplace(load_checkpoint(ckpt));
      resolved = "checkpoint = " + ckpt + "\n";
    }
    if (c.seed) pc.seed = *c.seed;
    const auto records = read_records(data);
    const auto labels = read_labels(labels_path, records);
    prepare_out(c);
    EvalReport report;
    report.probe = linear_probe(embed_records(*model, tokenize_corpus(records)), labels, pc);
    report.write(c.out);
    resolved += format_key_values({{"folds", std::to_string(pc.folds)}, {"seeds", std::to_string(pc.seeds)},
                                   {"probe_seed", std::to_string(pc.seed)}});
    write_manifest(c, "probe", resolved, {"probe.csv", "summary.txt"});
    std::cout << report.summary();
    return 0;
  }

  if (*ablate) {
    if (variants_text.empty() == nblocks_text.empty()) {
      throw UsageError("ablate needs exactly one of --variants or --nblocks");
    }
    const Resolved r = resolve_training(c);
    const auto tokens = tokenize_corpus(read_records(data));
    struct Arm {
      std::string name;
      ModelConfig cfg;
    };
    std::vector<Arm> arms;
    if (!variants_text.empty()) {
      for (const auto& v : parse_list<std::string>(variants_text, "--variants")) {
        ModelConfig mc = r.model;
        mc.variant = parse_variant(v);
        arms.push_back({v, mc});
      }
    } else {
      for (const auto n : parse_list<std::size_t>(nblocks_text, "--nblocks")) {
        ModelConfig mc = r.model;
        mc.num_gcmb = n;
        mc.validate();
        arms.push_back({"nblocks=" + std::to_string(n), mc});
      }
    }
    prepare_out(c);
    write_manifest(c, "ablate", r.text, {"ablate.csv"});
    std::string csv = "arm,layers,parameters,final_loss,ppl\n";
    for (const auto& arm : arms) {
      Model model = Model::build(arm.cfg);
      Trainer trainer(model, tokens, r.train);
      TrainOptions opts;
      opts.steps = steps;
      opts.out_dir = fs::path(c.out) / arm.name;
      const auto log = train(trainer, opts);
      const std::vector<std::size_t> len{r.train.seq_len};
      const auto ppl = eval_perplexity(model, tokens, len);
      std::string layers;
      for (const auto k : model.layer_kinds()) layers += (layers.empty() ? "" : " ") + layer_kind_name(k);
      const std::string row = arm.name + "," + layers + "," + std::to_string(count_parameters(model.parameters())) +
                              "," + format_double(tail_loss(log, 10)) + "," + format_double(ppl[0].ppl) + "\n";
      csv += row;
      std::cout << row << std::flush;
    }
    write_file(fs::path(c.out) / "ablate.csv", csv);
    return 0;
  }

  if (*bench_cmd) {
    KeyValues kv = load_config(c);
    if (c.seed) kv.set("seed", std::to_string(*c.seed));
    bc.model = ModelConfig::from_key_values(kv);
    TrainConfig::from_key_values(kv);
    kv.reject_unknown();
    bc.model.validate();
    if (!lengths_text.empty()) bc.lengths = parse_list<std::size_t>(lengths_text, "--lengths");
    if (!variants_text.empty()) {
      bc.variants.clear();
      for (const auto& v : parse_list<std::string>(variants_text, "--variants")) bc.variants.push_back(parse_variant(v));
    }
    bc.memory_limit = limit_mb * (std::int64_t{1} << 20);
    prepare_out(c);
    EvalReport report;
    report.machine = machine_descriptor();
    report.bench = bench(bc);
    report.write(c.out);
    write_manifest(c, "bench",
                   bc.model.canonical_text() +
                       format_key_values({{"reps", std::to_string(bc.reps)},
                                          {"warmup", std::to_string(bc.warmup)},
                                          {"batch", std::to_string(bc.batch)},
                                          {"machine", report.machine}}),
                   {"bench.csv", "summary.txt"});
    std::cout << report.summary();
    return 0;
  }

  if (*exp) {
    const Model model = load_checkpoint(ckpt);
    const auto records = read_records(data);
    const auto labels = labels_path.empty() ? std::vector<int>{} : read_labels(labels_path, records);
    prepare_out(c);
    export_embeddings(model, records, labels, fs::path(c.out) / "embeddings.csv");
    write_manifest(c, "export-embeddings", "checkpoint = " + ckpt + "\n", {"embeddings.csv"});
    std::cout << "wrote " << records.size() << " embeddings\n";
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
