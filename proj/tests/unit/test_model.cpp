// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "test_util.hpp"
#include "wisteria/errors.hpp"
#include "wisteria/grad_check.hpp"
#include "wisteria/model.hpp"
#include "wisteria/ops.hpp"

using namespace wisteria;
using wisteria::testing::max_abs_diff;
using wisteria::testing::scale_in_place;

namespace {

ModelConfig tiny(std::size_t layers = 4, std::size_t gcmb = 2) {
  ModelConfig c;
  c.dim = 8;
  c.num_layers = layers;
  c.num_gcmb = gcmb;
  c.heads = 2;
  c.state_dim = 3;
  c.kernel = 3;
  c.train_len = 16;
  c.seed = 42;
  return c;
}

std::vector<std::int32_t> random_ids(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::int32_t> ids(n);
  for (auto& v : ids) v = static_cast<std::int32_t>(rng() % 4);
  return ids;
}

std::size_t count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

bool has_param(const ParamList& params, const std::string& fragment) {
  for (const auto& p : params) {
    if (p.name.find(fragment) != std::string::npos) return true;
  }
  return false;
}

// Parameter count from the declared widths alone.
std::size_t expected_count(const ModelConfig& c, Variant v) {
  const std::size_t d = c.dim, e = c.expand * d, n = c.state_dim, r = (d + 15) / 16, k = c.kernel;
  const std::size_t stream = d * 2 * e + e * c.conv_width + e + e * (r + 2 * n) + r * e + e + e * n + e + e * d;
  const std::size_t bimamba = 2 * stream;
  const std::size_t ln = 2 * d;
  const std::size_t gcmb = bimamba + 2 * (d * k + d) + (d * 2 * d + 2 * d) + (2 * d * d + d) + ln;
  const std::size_t h = c.gmlp_expansion * d;
  const std::size_t gmlp = d * 2 * h + 2 * h + h * d + d;
  const std::size_t dh = d / c.heads;
  const std::size_t attn = 4 * d * d + (c.attn_mode == PositionMode::kFope ? dh / 2 * c.fope_harmonics : 0);
  const std::size_t outer = c.vocab * d + d * c.vocab + c.vocab;

  const bool attention = v != Variant::kNoFourier;
  const std::size_t body = attention ? c.num_layers - 1 : c.num_layers;
  const std::size_t g = (v == Variant::kFull || v == Variant::kNoFourier) ? c.num_gcmb : 0;
  const std::size_t mamba = bimamba + ln + (v == Variant::kNoGcmbNoGmlp ? 0 : gmlp);
  return outer + g * gcmb + (body - g) * mamba + (attention ? attn : 0);
}

}  // namespace

TEST_CASE("default layer composition") {
  ModelConfig c;
  c.dim = 32;
  c.heads = 16;
  c.state_dim = 2;
  const Model m = Model::build(c);
  const auto kinds = m.layer_kinds();
  REQUIRE(kinds.size() == 12);
  for (std::size_t i = 0; i < 5; ++i) CHECK(kinds[i] == LayerKind::kGcmb);
  for (std::size_t i = 5; i < 11; ++i) CHECK(kinds[i] == LayerKind::kMambaMlp);
  CHECK(kinds[11] == LayerKind::kAttention);
  CHECK(m.gcmb_dilations() == std::vector<std::size_t>{1, 1, 3, 9, 27});
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& g = std::get<GcmbBlock>(m.layer(i));
    CHECK(g.dilation_b == gate_dilation(g.dilation_a, 3));
  }
  // the embedding carries no positional parameters
  const auto params = m.parameters();
  CHECK(params.front().name == "embedding");
  CHECK(params.front().tensor.shape() == Shape{7, 32});
  CHECK_FALSE(has_param(params, "pos"));
}

TEST_CASE("zero gcmb blocks give a pure BiMamba stack with final attention") {
  const Model m = Model::build(tiny(4, 0));
  CHECK(m.layer_kinds() ==
        std::vector<LayerKind>{LayerKind::kMambaMlp, LayerKind::kMambaMlp, LayerKind::kMambaMlp, LayerKind::kAttention});
  CHECK(m.gcmb_dilations().empty());
}

TEST_CASE("ablation variants are structurally exact") {
  ModelConfig c = tiny(6, 3);
  const Model full = Model::build_variant(c, Variant::kFull);
  const Model no_fourier = Model::build_variant(c, Variant::kNoFourier);
  const Model no_gcmb = Model::build_variant(c, Variant::kNoGcmb);
  const Model bare = Model::build_variant(c, Variant::kNoGcmbNoGmlp);

  CHECK(no_fourier.num_layers() == 6);
  CHECK(no_fourier.layer_kinds().back() == LayerKind::kMambaMlp);
  CHECK_FALSE(has_param(no_fourier.parameters(), "wq"));
  CHECK_FALSE(has_param(no_fourier.parameters(), "fope"));

  CHECK(no_gcmb.layer_kinds().back() == LayerKind::kAttention);
  CHECK_FALSE(has_param(no_gcmb.parameters(), "conv_a"));
  CHECK_FALSE(has_param(no_gcmb.parameters(), "conv_b_w"));

  for (std::size_t i = 0; i + 1 < 6; ++i) CHECK(bare.layer_kinds()[i] == LayerKind::kMamba);
  CHECK(bare.layer_kinds().back() == LayerKind::kAttention);
  CHECK_FALSE(has_param(bare.parameters(), "mlp"));

  for (const Variant v : {Variant::kFull, Variant::kNoFourier, Variant::kNoGcmb, Variant::kNoGcmbNoGmlp}) {
    CAPTURE(variant_name(v));
    CHECK(count(Model::build_variant(c, v).parameters()) == expected_count(c, v));
  }
  CHECK(count(full.parameters()) > count(bare.parameters()));
  CHECK(count(no_gcmb.parameters()) > count(bare.parameters()));

  for (const Variant v : {Variant::kFull, Variant::kNoFourier, Variant::kNoGcmb, Variant::kNoGcmbNoGmlp}) {
    CHECK(parse_variant(variant_name(v)) == v);
  }
  CHECK_THROWS_AS(parse_variant("tiny"), ConfigError);
}

TEST_CASE("builds are deterministic in the seed") {
  const Model a = Model::build(tiny()), b = Model::build(tiny());
  const auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(max_abs_diff(pa[i].tensor.data(), pb[i].tensor.data()) == 0.0);
  }
  ModelConfig other = tiny();
  other.seed = 43;
  CHECK(max_abs_diff(Model::build(other).parameters()[0].tensor.data(), pa[0].tensor.data()) > 0.0);

  const auto ids = random_ids(2 * 10, 1);
  CHECK(max_abs_diff(a.forward(ids, 2, 10).data(), b.forward(ids, 2, 10).data()) == 0.0);
}

TEST_CASE("forward shapes and input validation") {
  const Model m = Model::build(tiny());
  const std::vector<std::int32_t> one{2};
  const Tensor y = m.forward(one, 1, 1);
  CHECK(y.shape() == Shape{1, 1, 7});
  for (const double v : y.data()) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(m.forward(one, 1, 2), DimensionError);
  const std::vector<std::int32_t> bad{9};
  CHECK_THROWS_AS(m.forward(bad, 1, 1), InputError);
}

TEST_CASE("batch rows do not interact") {
  // row order changes matrix-kernel blocking, so equality holds to rounding
  const Model m = Model::build(tiny());
  const std::size_t len = 9;
  const auto ids = random_ids(3 * len, 2);
  std::vector<std::int32_t> swapped(ids.begin() + 2 * len, ids.end());
  swapped.insert(swapped.end(), ids.begin() + len, ids.begin() + 2 * len);
  swapped.insert(swapped.end(), ids.begin(), ids.begin() + len);
  const Tensor y = m.forward(ids, 3, len), z = m.forward(swapped, 3, len);
  const std::size_t row = len * 7;
  auto sub = [&](const Tensor& t, std::size_t r) { return std::span(t.data()).subspan(r * row, row); };
  CHECK(max_abs_diff(sub(y, 0), sub(z, 2)) < 1e-12);
  CHECK(max_abs_diff(sub(y, 1), sub(z, 1)) < 1e-12);
  CHECK(max_abs_diff(sub(y, 2), sub(z, 0)) < 1e-12);
}

TEST_CASE("inference beyond the training length in every position mode") {
  for (const PositionMode mode : {PositionMode::kFope, PositionMode::kRope, PositionMode::kNone}) {
    ModelConfig c = tiny();
    c.attn_mode = mode;
    const Model m = Model::build(c);
    const auto ids = random_ids(2 * c.train_len, 3);
    const Tensor y = m.forward(ids, 1, 2 * c.train_len);
    CHECK(y.shape() == Shape{1, 32, 7});
    for (const double v : y.data()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("pooled embeddings") {
  const Model m = Model::build(tiny());
  SUBCASE("L = 1 equals the single hidden state") {
    const std::vector<std::int32_t> one{3};
    CHECK(max_abs_diff(m.extract_embeddings(one, 1, 1).data(), m.hidden(one, 1, 1).data()) == 0.0);
  }
  SUBCASE("appending padding leaves the embedding unchanged") {
    const auto ids = random_ids(11, 4);
    std::vector<std::int32_t> padded = ids;
    padded.resize(20, vocab::kPad);
    const Tensor a = m.extract_embeddings(ids, 1, 11);
    const Tensor b = m.extract_embeddings(padded, 1, 20, {11});
    CHECK(b.shape() == Shape{1, 8});
    CHECK(max_abs_diff(a.data(), b.data()) < 1e-9);
  }
  SUBCASE("identical sequences embed identically") {
    auto ids = random_ids(13, 5);
    const auto twice = [&] {
      std::vector<std::int32_t> v = ids;
      v.insert(v.end(), ids.begin(), ids.end());
      return v;
    }();
    const Tensor e = m.extract_embeddings(twice, 2, 13);
    CHECK(max_abs_diff(std::span(e.data()).subspan(0, 8), std::span(e.data()).subspan(8, 8)) < 1e-12);
  }
  SUBCASE("an all-padding row is an input error") {
    const auto ids = random_ids(8, 6);
    CHECK_THROWS_AS(m.extract_embeddings(ids, 2, 4, {4, 0}), InputError);
  }
}

TEST_CASE("two-layer miniature end-to-end gradients") {
  ModelConfig c = tiny(2, 1);
  c.train_len = 4;
  Model m = Model::build(c);
  ParamList params = m.parameters();
  for (auto& p : params) {
    if (p.name.find("proj") != std::string::npos || p.name.ends_with("dt_w")) scale_in_place(p.tensor, 20.0);
    if (p.name.find(".mlp_w") != std::string::npos) scale_in_place(p.tensor, 25.0);
    if (p.name.ends_with(".wq") || p.name.ends_with(".wk") || p.name.ends_with(".wv") || p.name.ends_with(".wo")) {
      scale_in_place(p.tensor, 30.0);
    }
    if (p.name.find("fope") != std::string::npos) scale_in_place(p.tensor, 20.0);
    if (p.name.rfind("head.w", 0) == 0) scale_in_place(p.tensor, 30.0);
  }
  const auto ids = random_ids(2 * 6, 7);
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  for (const auto& p : params) {
    inputs.push_back(p.tensor);
    names.push_back(p.name);
  }
  const auto report = GradChecker(1e-5).check([&] { return m.forward(ids, 2, 6, {6, 4}); }, inputs, names);
  CAPTURE(report.worst_tensor);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "wisteria_test_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.wstr";
  const Model m = Model::build(tiny());
  save_checkpoint(m, path);
  const Model back = load_checkpoint(path);

  CHECK(back.config().canonical_text() == m.config().canonical_text());
  const auto pa = m.parameters(), pb = back.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto a = pa[i].tensor.data(), b = pb[i].tensor.data();
    for (std::size_t j = 0; j < a.size(); ++j) {
      CHECK(b[j] == static_cast<double>(static_cast<float>(a[j])));
    }
  }

  const auto ids = random_ids(2 * 12, 8);
  const Tensor y0 = m.forward(ids, 2, 12), y1 = back.forward(ids, 2, 12);
  double scale = 0.0;
  for (const double v : y0.data()) scale = std::max(scale, std::abs(v));
  CHECK(max_abs_diff(y0.data(), y1.data()) / scale < 1e-6);

  // saving the loaded model reproduces the file byte for byte
  const auto again = dir / "again.wstr";
  save_checkpoint(back, again);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const std::string bytes = slurp(path);
  CHECK(bytes == slurp(again));
  CHECK(bytes.substr(0, 4) == "WSTR");

  SUBCASE("corrupted magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream(dir / "bad.wstr", std::ios::binary) << bad;
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "bad.wstr"), doctest::Contains("magic"), FormatError);
  }
  SUBCASE("unsupported version") {
    std::string bad = bytes;
    bad[4] = 9;
    std::ofstream(dir / "bad.wstr", std::ios::binary) << bad;
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "bad.wstr"), doctest::Contains("version"), FormatError);
  }
  SUBCASE("truncation reports an offset") {
    std::ofstream(dir / "cut.wstr", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "cut.wstr"), doctest::Contains("truncated"), FormatError);
  }
  SUBCASE("missing tensor is named") {
    // drop the final tensor and decrement the count
    CheckpointReader reader(path);
    CheckpointEntry entry, last;
    std::uint64_t last_start = 0, prev_end = 0;
    while (reader.next(entry, nullptr)) {
      last_start = prev_end;
      last = entry;
      prev_end = entry.offset + 4 * std::accumulate(entry.shape.begin(), entry.shape.end(), std::uint64_t{1},
                                                    std::multiplies<>());
    }
    const std::size_t count_at = 16 + reader.config_text().size();
    if (last_start == 0) last_start = count_at + 8;
    std::string bad = bytes.substr(0, last_start);
    std::uint64_t n = 0;
    std::memcpy(&n, bad.data() + count_at, 8);
    --n;
    std::memcpy(bad.data() + count_at, &n, 8);
    std::ofstream(dir / "short.wstr", std::ios::binary) << bad;
    CHECK(last.name == "head.b");
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "short.wstr"), doctest::Contains("head.b"), FormatError);
  }
  SUBCASE("inspect lists every tensor") {
    std::ostringstream out;
    inspect_checkpoint(path, out);
    for (const auto& p : pa) CHECK(out.str().find(p.name) != std::string::npos);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "does_not_exist.wstr"), IoError);
}

TEST_CASE("config validation names the field") {
  ModelConfig c = tiny();
  c.heads = 3;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("heads"), ConfigError);
  c = tiny();
  c.heads = 8;  // head dim 1 is odd
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("heads"), ConfigError);
  c = tiny(4, 4);
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("num_gcmb"), ConfigError);
  c = tiny();
  c.kernel = 4;
  CHECK_THROWS_WITH_AS(Model::build(c), doctest::Contains("kernel"), ConfigError);
}

TEST_CASE("config text round trip") {
  ModelConfig c = tiny();
  c.attn_mode = PositionMode::kRope;
  c.variant = Variant::kNoGcmb;
  const KeyValues kv = KeyValues::parse(c.canonical_text());
  const ModelConfig back = ModelConfig::from_key_values(kv);
  kv.reject_unknown();
  CHECK(back.canonical_text() == c.canonical_text());
  CHECK(back.attn_mode == PositionMode::kRope);
  CHECK(back.variant == Variant::kNoGcmb);
}
