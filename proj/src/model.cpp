// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#include "wisteria/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <ostream>

#include "wisteria/errors.hpp"

namespace wisteria {

Variant parse_variant(const std::string& name) {
  if (name == "full") return Variant::kFull;
  if (name == "no_fourier") return Variant::kNoFourier;
  if (name == "no_gcmb") return Variant::kNoGcmb;
  if (name == "no_gcmb_no_gmlp") return Variant::kNoGcmbNoGmlp;
  throw ConfigError("unknown variant '" + name + "' (expected full, no_fourier, no_gcmb or no_gcmb_no_gmlp)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kFull:
      return "full";
    case Variant::kNoFourier:
      return "no_fourier";
    case Variant::kNoGcmb:
      return "no_gcmb";
    case Variant::kNoGcmbNoGmlp:
      return "no_gcmb_no_gmlp";
  }
  return "full";
}

std::string layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kGcmb:
      return "gcmb";
    case LayerKind::kMambaMlp:
      return "bimamba_gmlp";
    case LayerKind::kMamba:
      return "bimamba";
    case LayerKind::kAttention:
      return "attention";
  }
  return "?";
}

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model config field '" + field + "' " + why);
  };
  if (vocab != vocab::kSize) fail("vocab", "must be " + std::to_string(vocab::kSize));
  if (dim == 0) fail("dim", "must be positive");
  if (num_layers == 0) fail("num_layers", "must be positive");
  if (num_gcmb + 1 > num_layers) fail("num_gcmb", "must be <= num_layers - 1");
  if (dilation_base == 0) fail("dilation_base", "must be >= 1");
  if (kernel == 0 || kernel % 2 == 0) fail("kernel", "must be odd");
  if (heads == 0 || dim % heads != 0) fail("heads", "must divide dim");
  if ((dim / heads) % 2 != 0) fail("heads", "must leave an even head dimension");
  if (train_len == 0) fail("train_len", "must be positive");
  if (expand == 0) fail("expand", "must be positive");
  if (state_dim == 0) fail("state_dim", "must be positive");
  if (conv_width == 0) fail("conv_width", "must be positive");
  if (gmlp_expansion == 0) fail("gmlp_expansion", "must be positive");
}

SsmConfig ModelConfig::ssm() const {
  SsmConfig s;
  s.d_model = dim;
  s.expand = expand;
  s.state_dim = state_dim;
  s.conv_width = conv_width;
  return s;
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  ModelConfig c;
  c.vocab = kv.get_size("vocab", c.vocab);
  c.dim = kv.get_size("dim", c.dim);
  c.num_layers = kv.get_size("num_layers", c.num_layers);
  c.num_gcmb = kv.get_size("num_gcmb", c.num_gcmb);
  c.dilation_base = kv.get_size("dilation_base", c.dilation_base);
  c.kernel = kv.get_size("kernel", c.kernel);
  c.heads = kv.get_size("heads", c.heads);
  c.attn_mode = parse_position_mode(kv.get_string("attn_mode", position_mode_name(c.attn_mode)));
  c.variant = parse_variant(kv.get_string("variant", variant_name(c.variant)));
  c.train_len = kv.get_size("train_len", c.train_len);
  c.expand = kv.get_size("expand", c.expand);
  c.state_dim = kv.get_size("state_dim", c.state_dim);
  c.conv_width = kv.get_size("conv_width", c.conv_width);
  c.fope_harmonics = kv.get_size("fope_harmonics", c.fope_harmonics);
  c.gmlp_expansion = kv.get_size("gmlp_expansion", c.gmlp_expansion);
  c.seed = kv.get_u64("seed", c.seed);
  return c;
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_entries() const {
  auto s = [](std::uint64_t v) { return std::to_string(v); };
  return {{"vocab", s(vocab)},
          {"dim", s(dim)},
          {"num_layers", s(num_layers)},
          {"num_gcmb", s(num_gcmb)},
          {"dilation_base", s(dilation_base)},
          {"kernel", s(kernel)},
          {"heads", s(heads)},
          {"attn_mode", position_mode_name(attn_mode)},
          {"variant", variant_name(variant)},
          {"train_len", s(train_len)},
          {"expand", s(expand)},
          {"state_dim", s(state_dim)},
          {"conv_width", s(conv_width)},
          {"fope_harmonics", s(fope_harmonics)},
          {"gmlp_expansion", s(gmlp_expansion)},
          {"seed", s(seed)}};
}

std::string ModelConfig::canonical_text() const { return format_key_values(to_entries()); }

// ---------------------------------------------------------------- layers

MambaLayer MambaLayer::init(const SsmConfig& ssm, bool with_mlp, std::size_t mlp_hidden, Initializer& init) {
  MambaLayer l;
  l.bimamba = BiMamba::init(ssm, init);
  l.ln_gamma = Tensor::full({ssm.d_model}, 1.0, true);
  l.ln_beta = Tensor::zeros({ssm.d_model}, true);
  l.has_mlp = with_mlp;
  if (with_mlp) l.mlp = GatedMlp::init(ssm.d_model, mlp_hidden, init);
  return l;
}

Tensor MambaLayer::forward(const Tensor& x, const SeqLengths& lengths) const {
  Tensor h = layernorm(add(x, bimamba.forward(x, lengths)), ln_gamma, ln_beta);
  return has_mlp ? mlp.forward(h) : h;
}

void MambaLayer::collect(const std::string& prefix, ParamList& out) const {
  bimamba.collect(prefix + "bimamba.", out);
  out.push_back({prefix + "ln_gamma", ln_gamma, false});
  out.push_back({prefix + "ln_beta", ln_beta, false});
  if (has_mlp) mlp.collect(prefix + "gmlp.", out);
}

Tensor AttentionLayer::forward(const Tensor& x, const SeqLengths& lengths) const {
  return add(x, attn.forward(x, lengths));
}

// ----------------------------------------------------------------- model

Model Model::build(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  Initializer init(cfg.seed);
  const SsmConfig ssm = cfg.ssm();
  const std::size_t hidden = cfg.gmlp_expansion * cfg.dim;
  m.embedding_ = init.normal({cfg.vocab, cfg.dim}, 1.0);

  const bool has_attention = cfg.variant != Variant::kNoFourier;
  const bool has_gcmb = cfg.variant == Variant::kFull || cfg.variant == Variant::kNoFourier;
  const bool has_mlp = cfg.variant != Variant::kNoGcmbNoGmlp;
  const std::size_t body = has_attention ? cfg.num_layers - 1 : cfg.num_layers;
  const std::size_t num_gcmb = has_gcmb ? cfg.num_gcmb : 0;
  const auto schedule = dilation_schedule(cfg.dilation_base, num_gcmb);

  for (std::size_t i = 0; i < body; ++i) {
    if (i < num_gcmb) {
      m.layers_.emplace_back(GcmbBlock::init(ssm, cfg.kernel, schedule[i],
                                             gate_dilation(schedule[i], cfg.dilation_base), init));
    } else {
      m.layers_.emplace_back(MambaLayer::init(ssm, has_mlp, hidden, init));
    }
  }
  if (has_attention) {
    m.layers_.emplace_back(AttentionLayer{
        Attention::init(cfg.dim, cfg.heads, cfg.attn_mode, cfg.train_len, cfg.fope_harmonics, init)});
  }
  m.head_w_ = init.truncated_normal({cfg.dim, cfg.vocab}, kProjectionStd);
  m.head_b_ = Tensor::zeros({cfg.vocab}, true);
  return m;
}

Model Model::build_variant(ModelConfig cfg, Variant variant) {
  cfg.variant = variant;
  return build(cfg);
}

std::vector<LayerKind> Model::layer_kinds() const {
  std::vector<LayerKind> kinds;
  for (const auto& l : layers_) {
    if (std::holds_alternative<GcmbBlock>(l)) {
      kinds.push_back(LayerKind::kGcmb);
    } else if (const auto* m = std::get_if<MambaLayer>(&l)) {
      kinds.push_back(m->has_mlp ? LayerKind::kMambaMlp : LayerKind::kMamba);
    } else {
      kinds.push_back(LayerKind::kAttention);
    }
  }
  return kinds;
}

std::vector<std::size_t> Model::gcmb_dilations() const {
  std::vector<std::size_t> out;
  for (const auto& l : layers_) {
    if (const auto* g = std::get_if<GcmbBlock>(&l)) out.push_back(g->dilation_a);
  }
  return out;
}

Tensor Model::embed(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length) const {
  if (ids.size() != batch * length) throw DimensionError("model input has " + std::to_string(ids.size()) +
                                                         " ids, expected " + std::to_string(batch * length));
  return wisteria::embedding(ids, {batch, length}, embedding_);
}

Tensor Model::run_layers(const Tensor& x, const SeqLengths& lengths, std::size_t begin, std::size_t end) const {
  Tensor h = x;
  for (std::size_t i = begin; i < end && i < layers_.size(); ++i) {
    h = std::visit([&](const auto& layer) { return layer.forward(h, lengths); }, layers_[i]);
  }
  return h;
}

Tensor Model::hidden(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length,
                     const SeqLengths& lengths) const {
  return run_layers(embed(ids, batch, length), lengths, 0, layers_.size());
}

Tensor Model::head(const Tensor& h) const { return linear(h, head_w_, head_b_); }

Tensor Model::forward(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length,
                      const SeqLengths& lengths) const {
  return head(hidden(ids, batch, length, lengths));
}

Tensor Model::extract_embeddings(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length,
                                 const SeqLengths& lengths) const {
  const SeqLengths full = lengths.empty() ? SeqLengths(batch, length) : lengths;
  return masked_mean_pool(hidden(ids, batch, length, lengths), full);
}

ParamList Model::parameters() const {
  ParamList out;
  out.push_back({"embedding", embedding_, true});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".";
    std::visit([&](const auto& layer) { layer.collect(prefix, out); }, layers_[i]);
  }
  out.push_back({"head.w", head_w_, true});
  out.push_back({"head.b", head_b_, false});
  return out;
}

// ------------------------------------------------------------ checkpoint

namespace {

constexpr char kMagic[4] = {'W', 'S', 'T', 'R'};

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

void put_f32(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + tmp.string() + "'");
    const ParamList params = model.parameters();
    const std::string cfg = model.config().canonical_text();
    out.write(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u64(out, cfg.size());
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    put_u64(out, params.size());
    for (const auto& p : params) {
      put_u32(out, static_cast<std::uint32_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
      for (auto d : p.tensor.shape()) put_u64(out, d);
      for (double v : p.tensor.data()) put_f32(out, static_cast<float>(v));
    }
    if (!out) throw IoError("failed while writing checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointReader::Impl {
  std::ifstream in;
  std::string path;
  std::uint64_t offset = 0;
  std::uint64_t size = 0;

  void read_bytes(char* dst, std::size_t n, const char* what) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
      throw FormatError("checkpoint '" + path + "' truncated while reading " + what + " at byte offset " +
                        std::to_string(offset));
    }
    offset += n;
  }
  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    read_bytes(reinterpret_cast<char*>(b), 4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64(const char* what) {
    unsigned char b[8];
    read_bytes(reinterpret_cast<char*>(b), 8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
};

CheckpointReader::CheckpointReader(const std::filesystem::path& path) : impl_(std::make_unique<Impl>()) {
  impl_->path = path.string();
  impl_->in.open(path, std::ios::binary);
  if (!impl_->in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  impl_->size = std::filesystem::file_size(path);
  char magic[4];
  impl_->read_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("checkpoint '" + impl_->path + "' has bad magic at byte offset 0 (expected WSTR)");
  }
  version_ = impl_->u32("version");
  if (version_ != kCheckpointVersion) {
    throw FormatError("checkpoint '" + impl_->path + "' has unsupported version " + std::to_string(version_) +
                      " at byte offset 4");
  }
  const std::uint64_t n = impl_->u64("config length");
  if (n > (1u << 20)) throw FormatError("checkpoint config length implausible at byte offset 8");
  config_.resize(n);
  impl_->read_bytes(config_.data(), n, "config text");
  count_ = impl_->u64("tensor count");
}

CheckpointReader::~CheckpointReader() = default;

bool CheckpointReader::next(CheckpointEntry& entry, std::vector<float>* payload) {
  if (read_ >= count_) return false;
  const std::uint32_t name_len = impl_->u32("tensor name length");
  if (name_len > 4096) {
    throw FormatError("checkpoint tensor name length implausible at byte offset " + std::to_string(impl_->offset - 4));
  }
  entry.name.assign(name_len, '\0');
  impl_->read_bytes(entry.name.data(), name_len, "tensor name");
  const std::uint32_t rank = impl_->u32("tensor rank");
  if (rank > 8) throw FormatError("checkpoint tensor '" + entry.name + "' has implausible rank");
  entry.shape.assign(rank, 0);
  for (auto& d : entry.shape) d = impl_->u64("tensor dims");
  entry.offset = impl_->offset;
  const std::size_t count = shape_numel(entry.shape);
  if (payload) {
    std::vector<char> raw(count * 4);
    impl_->read_bytes(raw.data(), raw.size(), ("payload of tensor '" + entry.name + "'").c_str());
    payload->resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(raw[i * 4 + b]);
      std::memcpy(&(*payload)[i], &bits, 4);
    }
  } else {
    if (impl_->offset + count * 4 > impl_->size) {
      throw FormatError("checkpoint '" + impl_->path + "' truncated in payload of tensor '" + entry.name +
                        "' at byte offset " + std::to_string(impl_->offset));
    }
    impl_->in.seekg(static_cast<std::streamoff>(count * 4), std::ios::cur);
    impl_->offset += count * 4;
  }
  ++read_;
  return true;
}

Model load_checkpoint(const std::filesystem::path& path) {
  CheckpointReader reader(path);
  const KeyValues kv = KeyValues::parse(reader.config_text(), path.string() + " (config)");
  const ModelConfig cfg = ModelConfig::from_key_values(kv);
  kv.reject_unknown();
  Model model = Model::build(cfg);
  std::map<std::string, Tensor> by_name;
  for (auto& p : model.parameters()) by_name.emplace(p.name, p.tensor);

  CheckpointEntry entry;
  std::vector<float> values;
  std::map<std::string, bool> seen;
  while (reader.next(entry, &values)) {
    auto it = by_name.find(entry.name);
    if (it == by_name.end()) throw FormatError("checkpoint contains unexpected tensor '" + entry.name + "'");
    Tensor t = it->second;
    if (t.shape() != entry.shape) {
      throw FormatError("checkpoint tensor '" + entry.name + "' has shape " + shape_to_string(entry.shape) +
                        ", model expects " + shape_to_string(t.shape()));
    }
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(values[i]);
    seen[entry.name] = true;
  }
  for (const auto& [name, t] : by_name) {
    if (!seen.count(name)) throw FormatError("checkpoint is missing tensor '" + name + "'");
  }
  return model;
}

void inspect_checkpoint(const std::filesystem::path& path, std::ostream& out) {
  CheckpointReader reader(path);
  out << "format: WSTR v" << reader.version() << "\n";
  out << "config:\n" << reader.config_text();
  out << "tensors: " << reader.tensor_count() << "\n";
  CheckpointEntry entry;
  std::vector<float> values;
  std::uint64_t total = 0;
  while (reader.next(entry, &values)) {
    double sum = 0.0, lo = 0.0, hi = 0.0;
    if (!values.empty()) {
      lo = hi = values[0];
      for (float v : values) {
        sum += v;
        lo = std::min<double>(lo, v);
        hi = std::max<double>(hi, v);
      }
    }
    total += values.size();
    out << entry.name << "\t" << shape_to_string(entry.shape) << "\t" << values.size() << "\tmean="
        << (values.empty() ? 0.0 : sum / static_cast<double>(values.size())) << "\tmin=" << lo << "\tmax=" << hi
        << "\n";
  }
  out << "parameters: " << total << "\n";
}

}  // namespace wisteria
