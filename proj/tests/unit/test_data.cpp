// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "wisteria/data.hpp"
#include "wisteria/errors.hpp"

using namespace wisteria;

namespace {

std::string random_bases(std::size_t n, std::mt19937_64& rng, bool with_n = false) {
  static const char kAlpha[] = "ACGTN";
  std::string s(n, 'A');
  for (auto& c : s) c = kAlpha[rng() % (with_n ? 5 : 4)];
  return s;
}

}  // namespace

TEST_CASE("parse_fasta joins wrapped lines") {
  std::istringstream in(">chr1\nACGT\nNN\n");
  const auto recs = parse_fasta(in);
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].id == "chr1");
  CHECK(recs[0].sequence == "ACGTNN");
}

TEST_CASE("parse_fasta normalizes case and splits ids at whitespace") {
  std::istringstream in(">a desc\nacgt\n>b\nTT\n");
  const auto recs = parse_fasta(in);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].id == "a");
  CHECK(recs[0].sequence == "ACGT");
  CHECK(recs[1].id == "b");
  CHECK(recs[1].sequence == "TT");
}

TEST_CASE("parse_fasta maps unknown letters to N") {
  std::istringstream in(">x\nAXGT\n");
  CHECK(parse_fasta(in)[0].sequence == "ANGT");
}

TEST_CASE("parse_fasta errors carry line numbers") {
  std::istringstream before("ACGT\n>x\nA\n");
  try {
    parse_fasta(before);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }
  std::istringstream empty(">x\n>y\nAC\n");
  CHECK_THROWS_AS(parse_fasta(empty), ParseError);
}

TEST_CASE("FastaReader streams record by record") {
  std::ostringstream big;
  for (int i = 0; i < 200; ++i) big << ">r" << i << "\nACGT\nAC\n";
  std::istringstream in(big.str());
  FastaReader reader(in);
  int n = 0;
  while (auto rec = reader.next()) {
    CHECK(rec->sequence == "ACGTAC");
    ++n;
  }
  CHECK(n == 200);
}

TEST_CASE("write_fasta round trip and manifest resolution") {
  const auto dir = std::filesystem::temp_directory_path() / "wisteria_test_fasta";
  std::filesystem::create_directories(dir);
  std::vector<FastaRecord> recs{{"one", std::string(170, 'G')}, {"two", "ACGTN"}};
  {
    std::ofstream out(dir / "a.fa");
    write_fasta(out, recs, 60);
  }
  {
    std::ofstream out(dir / "list.txt");
    out << "# corpus\n\na.fa\n";
  }
  const auto back = read_manifest(dir / "list.txt");
  REQUIRE(back.size() == 2);
  CHECK(back[0].sequence == recs[0].sequence);
  CHECK(back[1].id == "two");
  CHECK_THROWS_AS(read_fasta_file(dir / "missing.fa"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("tokenize uses the fixed id map") {
  CHECK(tokenize("ACGT") == TokenSequence{0, 1, 2, 3});
  CHECK(tokenize("").empty());
  CHECK(tokenize("N") == TokenSequence{vocab::kN});
  CHECK(detokenize(TokenSequence{vocab::kMask, vocab::kPad}) == "?-");
}

TEST_CASE("tokenize round trip on random sequences") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const std::string s = random_bases(1024, rng, true);
    const TokenSequence ids = tokenize(s);
    REQUIRE(detokenize(ids) == s);
  }
}

TEST_CASE("masking with p_select = 0 leaves input unchanged") {
  MaskingConfig cfg;
  cfg.p_select = 0.0;
  std::mt19937_64 rng(2);
  const TokenSequence ids = tokenize("ACGTACGTNN");
  const MaskedRow row = apply_mlm_mask(ids, rng, cfg);
  CHECK(row.input_ids == ids);
  for (auto m : row.loss_mask) CHECK(m == 0);
}

TEST_CASE("masking with p_select = 1 and p_mask = 1 masks every non-PAD position") {
  MaskingConfig cfg{1.0, 1.0, 0.0, 0.0};
  std::mt19937_64 rng(3);
  TokenSequence ids = tokenize("ACGTN");
  ids.push_back(vocab::kPad);
  const MaskedRow row = apply_mlm_mask(ids, rng, cfg);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(row.input_ids[i] == vocab::kMask);
    CHECK(row.target_ids[i] == ids[i]);
    CHECK(row.loss_mask[i] == 1);
  }
  CHECK(row.input_ids[5] == vocab::kPad);
  CHECK(row.loss_mask[5] == 0);
}

TEST_CASE("masking probabilities must sum to one") {
  CHECK_THROWS_AS((MaskingConfig{0.15, 0.8, 0.1, 0.2}.validate()), ConfigError);
  CHECK_THROWS_AS((MaskingConfig{1.5, 0.8, 0.1, 0.1}.validate()), ConfigError);
  CHECK_NOTHROW((MaskingConfig{0.15, 0.8, 0.1, 0.1}.validate()));
}

TEST_CASE("masking statistics over a million positions") {
  std::mt19937_64 data_rng(4), rng(5);
  const TokenSequence ids = tokenize(random_bases(1'000'000, data_rng));
  const MaskedRow row = apply_mlm_mask(ids, rng, MaskingConfig{});
  std::size_t selected = 0, masked = 0, changed = 0;
  std::array<std::size_t, 4> sel_by_base{}, all_by_base{};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    ++all_by_base[static_cast<std::size_t>(ids[i])];
    if (!row.loss_mask[i]) {
      REQUIRE(row.input_ids[i] == ids[i]);
      continue;
    }
    ++selected;
    ++sel_by_base[static_cast<std::size_t>(ids[i])];
    if (row.input_ids[i] == vocab::kMask) {
      ++masked;
    } else if (row.input_ids[i] != ids[i]) {
      ++changed;
    }
  }
  const double sel = static_cast<double>(selected) / 1e6;
  CHECK(sel >= 0.148);
  CHECK(sel <= 0.152);
  const double mask_frac = static_cast<double>(masked) / static_cast<double>(selected);
  // replacement is uniform over four bases, so 3/4 of the random draws change the token
  const double random_frac = static_cast<double>(changed) / static_cast<double>(selected) / 0.75;
  const double keep_frac = 1.0 - mask_frac - random_frac;
  CHECK(std::abs(mask_frac - 0.8) <= 0.01);
  CHECK(std::abs(random_frac - 0.1) <= 0.01);
  CHECK(std::abs(keep_frac - 0.1) <= 0.01);

  // selection independent of identity: chi-square with 3 dof, p > 0.01 => stat < 11.345
  double chi2 = 0.0;
  for (std::size_t b = 0; b < 4; ++b) {
    const double expect = static_cast<double>(all_by_base[b]) * sel;
    chi2 += (static_cast<double>(sel_by_base[b]) - expect) * (static_cast<double>(sel_by_base[b]) - expect) / expect;
  }
  CHECK(chi2 < 11.345);
}

TEST_CASE("token budget batch sizes") {
  CHECK(budget_batch_size(1'048'576, 1024) == 1024);
  CHECK(budget_batch_size(1'048'576, 131'072) == 8);
  CHECK(budget_batch_size(4096, 4096) == 1);
  CHECK(budget_batch_size(8192, 512) == 16);
  CHECK_THROWS_AS(budget_batch_size(8192, 300), ConfigError);
}

TEST_CASE("batch stream shape, padding and determinism") {
  std::mt19937_64 rng(6);
  std::vector<TokenSequence> corpus;
  for (int i = 0; i < 5; ++i) corpus.push_back(tokenize(random_bases(300 + 17 * i, rng)));
  for (const std::size_t len : {std::size_t{256}, std::size_t{1024}}) {
    BatchStream a(corpus, len, 4096, MaskingConfig{}, 9);
    BatchStream b(corpus, len, 4096, MaskingConfig{}, 9);
    for (int i = 0; i < 6; ++i) {
      const MaskedBatch x = a.next();
      const MaskedBatch y = b.batch_at(static_cast<std::uint64_t>(i));
      CHECK(x.batch * x.length == 4096);
      CHECK(x.input_ids.size() == 4096);
      CHECK(x.input_ids == y.input_ids);
      CHECK(x.loss_mask == y.loss_mask);
      for (std::size_t t = 0; t < x.tokens(); ++t) {
        if (x.pad_mask[t]) {
          CHECK(x.loss_mask[t] == 0);
          CHECK(x.input_ids[t] == vocab::kPad);
        }
      }
      const auto lengths = x.row_lengths();
      CHECK(lengths.size() == x.batch);
    }
  }
  BatchStream other(corpus, 256, 4096, MaskingConfig{}, 10);
  BatchStream base(corpus, 256, 4096, MaskingConfig{}, 9);
  CHECK(other.batch_at(0).input_ids != base.batch_at(0).input_ids);
}

TEST_CASE("batch i does not depend on batches consumed before it") {
  std::mt19937_64 rng(7);
  std::vector<TokenSequence> corpus{tokenize(random_bases(5000, rng))};
  BatchStream a(corpus, 128, 1024, MaskingConfig{}, 3);
  for (int i = 0; i < 50; ++i) a.next();
  const MaskedBatch late = a.next();
  const BatchStream fresh(corpus, 128, 1024, MaskingConfig{}, 3);
  CHECK(fresh.batch_at(50).input_ids == late.input_ids);
  CHECK(fresh.batch_at(50).target_ids == late.target_ids);
}

TEST_CASE("prefetching stream hands over the same batches") {
  std::mt19937_64 rng(8);
  std::vector<TokenSequence> corpus{tokenize(random_bases(3000, rng))};
  const BatchStream s(corpus, 100, 400, MaskingConfig{}, 4);
  PrefetchingBatchStream p(s, 5, 2);
  for (std::uint64_t i = 5; i < 12; ++i) {
    const MaskedBatch b = p.next();
    CHECK(b.index == i);
    CHECK(b.input_ids == s.batch_at(i).input_ids);
  }
}

TEST_CASE("synthetic periodic corpus") {
  SynthParams p;
  p.kind = CorpusKind::kPeriodic;
  p.period = 4;
  p.pattern = "ACGT";
  p.length = 12;
  p.num_records = 2;
  const Corpus c = synth_corpus(p, 1);
  CHECK(c.records[0].sequence == "ACGTACGTACGT");
  CHECK(c.records[1].sequence == "ACGTACGTACGT");
  p.period = 1;
  CHECK_THROWS_AS(synth_corpus(p, 1), ConfigError);
  CHECK(periodic_entropy_bound(0.0) == 0.0);
}

TEST_CASE("synthetic corpora are deterministic in the seed") {
  SynthParams p;
  p.kind = CorpusKind::kPeriodic;
  p.noise = 0.1;
  p.random_phase = true;
  CHECK(synth_corpus(p, 5).records[3].sequence == synth_corpus(p, 5).records[3].sequence);
  CHECK(synth_corpus(p, 5).records[3].sequence != synth_corpus(p, 6).records[3].sequence);
}

TEST_CASE("uniform corpus base frequencies") {
  SynthParams p;
  p.kind = CorpusKind::kUniform;
  p.num_records = 1000;
  p.length = 1000;
  const Corpus c = synth_corpus(p, 2);
  std::array<double, 4> counts{};
  for (const auto& r : c.records) {
    for (const char ch : r.sequence) counts[static_cast<std::size_t>(vocab::char_to_id(ch))] += 1.0;
  }
  for (const double n : counts) {
    CHECK(n / 1e6 >= 0.24);
    CHECK(n / 1e6 <= 0.26);
  }
}

TEST_CASE("motif-planted corpus") {
  SynthParams p;
  p.kind = CorpusKind::kMotif;
  p.motif = "TATAAA";
  p.length = 200;
  p.num_records = 2000;
  const Corpus c = synth_corpus(p, 3);
  REQUIRE(c.labels.size() == c.records.size());
  double occurrences = 0.0;
  std::size_t negatives = 0;
  for (std::size_t i = 0; i < c.records.size(); ++i) {
    const std::string& s = c.records[i].sequence;
    if (c.labels[i] == 1) {
      CHECK(s.find("TATAAA") != std::string::npos);
    } else {
      ++negatives;
      for (std::size_t pos = s.find("TATAAA"); pos != std::string::npos; pos = s.find("TATAAA", pos + 1)) {
        occurrences += 1.0;
      }
    }
  }
  // expected (L - 5) 4^-6 occurrences per sequence; near-Poisson counts
  const double expect = static_cast<double>(negatives) * 195.0 / 4096.0;
  CHECK(std::abs(occurrences - expect) <= 3.0 * std::sqrt(expect));
  p.motif = std::string(201, 'A');
  CHECK_THROWS_AS(synth_corpus(p, 3), ConfigError);
  p.motif = "TAXA";
  CHECK_THROWS_AS(synth_corpus(p, 3), ConfigError);
}
