// Copyright (c) 2026 The Wisteria Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "wisteria/blocks.hpp"
#include "wisteria/config.hpp"
#include "wisteria/data.hpp"
#include "wisteria/module.hpp"
#include "wisteria/ssm.hpp"

namespace wisteria {

enum class Variant { kFull, kNoFourier, kNoGcmb, kNoGcmbNoGmlp };

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

struct ModelConfig {
  std::size_t vocab = vocab::kSize;
  std::size_t dim = 64;
  std::size_t num_layers = 12;  // excluding the embedding
  std::size_t num_gcmb = 5;
  std::size_t dilation_base = 3;
  std::size_t kernel = 9;
  std::size_t heads = 16;
  PositionMode attn_mode = PositionMode::kFope;
  Variant variant = Variant::kFull;
  std::size_t train_len = 256;
  std::size_t expand = 2;
  std::size_t state_dim = 16;
  std::size_t conv_width = 4;
  std::size_t fope_harmonics = 4;
  std::size_t gmlp_expansion = 4;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending field.
  void validate() const;
  SsmConfig ssm() const;

  // Reads the model keys; others are left for the caller.
  static ModelConfig from_key_values(const KeyValues& kv);
  std::vector<std::pair<std::string, std::string>> to_entries() const;
  std::string canonical_text() const;
};

// Residual BiMamba layer: H = LayerNorm(x + BiMamba(x)), followed by the
// gated MLP unless the layer is bare.
struct MambaLayer {
  BiMamba bimamba;
  Tensor ln_gamma, ln_beta;
  bool has_mlp = true;
  GatedMlp mlp;

  static MambaLayer init(const SsmConfig& ssm, bool with_mlp, std::size_t mlp_hidden, Initializer& init);
  Tensor forward(const Tensor& x, const SeqLengths& lengths) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Final layer: x + Attention(x). No feed-forward sublayer.
struct AttentionLayer {
  Attention attn;

  Tensor forward(const Tensor& x, const SeqLengths& lengths) const;
  void collect(const std::string& prefix, ParamList& out) const { attn.collect(prefix, out); }
};

enum class LayerKind { kGcmb, kMambaMlp, kMamba, kAttention };
std::string layer_kind_name(LayerKind kind);

using Layer = std::variant<GcmbBlock, MambaLayer, AttentionLayer>;

class Model {
 public:
  // Deterministic in cfg (including cfg.seed).
  static Model build(const ModelConfig& cfg);
  static Model build_variant(ModelConfig cfg, Variant variant);

  const ModelConfig& config() const noexcept { return cfg_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::vector<LayerKind> layer_kinds() const;
  std::vector<std::size_t> gcmb_dilations() const;
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  Layer& mutable_layer(std::size_t i) { return layers_.at(i); }
  const Tensor& embedding() const noexcept { return embedding_; }

  // ids laid out [B, L]; lengths are the valid-prefix lengths (empty: none padded).
  Tensor embed(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length) const;
  Tensor run_layers(const Tensor& x, const SeqLengths& lengths, std::size_t begin, std::size_t end) const;
  Tensor hidden(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length,
                const SeqLengths& lengths = {}) const;
  Tensor head(const Tensor& hidden) const;
  // Vocabulary logits [B, L, V].
  Tensor forward(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length,
                 const SeqLengths& lengths = {}) const;
  // Mean of final hidden states over each row's valid prefix -> [B, D].
  Tensor extract_embeddings(std::span<const std::int32_t> ids, std::size_t batch, std::size_t length,
                            const SeqLengths& lengths = {}) const;

  ParamList parameters() const;

 private:
  ModelConfig cfg_;
  Tensor embedding_;  // [V, D]
  std::vector<Layer> layers_;
  Tensor head_w_;  // [D, V]
  Tensor head_b_;  // [V]
};

// Checkpoint file:
//   "WSTR" | u32 version | u64 n | config text (n bytes) | u64 tensor count |
//   per tensor: u32 name length | name | u32 rank | u64 dims[rank] | f32 payload
// All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // byte offset of the payload
};

// Streams a checkpoint one tensor at a time.
class CheckpointReader {
 public:
  explicit CheckpointReader(const std::filesystem::path& path);
  ~CheckpointReader();
  CheckpointReader(const CheckpointReader&) = delete;
  CheckpointReader& operator=(const CheckpointReader&) = delete;

  std::uint32_t version() const noexcept { return version_; }
  const std::string& config_text() const noexcept { return config_; }
  std::uint64_t tensor_count() const noexcept { return count_; }

  // Reads the next entry header. The payload is read into `payload` when it
  // is non-null and skipped otherwise. Returns false after the last tensor.
  bool next(CheckpointEntry& entry, std::vector<float>* payload);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::uint32_t version_ = 0;
  std::string config_;
  std::uint64_t count_ = 0;
  std::uint64_t read_ = 0;
};

// Prints the config and a tensor table (name, shape, count, mean, min, max).
void inspect_checkpoint(const std::filesystem::path& path, std::ostream& out);

}  // namespace wisteria
