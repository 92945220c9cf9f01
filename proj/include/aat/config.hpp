#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "aat/errors.hpp"

namespace aat {

/// Block layout: plain pre-norm blocks, blocks with an MLP Adapter, or blocks
/// with both an MLP Adapter and a Spatial Adapter.
enum class Variant { Vanilla, AatM, AatMS };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Vanilla: return "vanilla";
    case Variant::AatM: return "aat-m";
    case Variant::AatMS: return "aat-ms";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "vanilla") return Variant::Vanilla;
  if (s == "aat-m") return Variant::AatM;
  if (s == "aat-ms") return Variant::AatMS;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

inline bool has_mlp_adapter(Variant v) { return v != Variant::Vanilla; }
inline bool has_spatial_adapter(Variant v) { return v == Variant::AatMS; }

struct ModelConfig {
  std::size_t depth = 2;
  std::size_t embed_dim = 8;
  std::size_t num_heads = 2;
  std::size_t mlp_ratio = 2;
  std::size_t patch_size = 2;
  std::size_t input_time = 8;   // T, frames the positional table was built for
  std::size_t input_freq = 8;   // F, frequency bins
  std::size_t num_classes = 3;
  std::size_t adapter_dim = 2;  // bottleneck width
  std::size_t prompt_length = 0;
  Variant variant = Variant::Vanilla;
  double layernorm_eps = 1e-6;

  std::size_t grid_time() const { return input_time / patch_size; }
  std::size_t grid_freq() const { return input_freq / patch_size; }
  std::size_t num_patches() const { return grid_time() * grid_freq(); }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_hidden() const { return mlp_ratio * embed_dim; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(depth, "depth");
    positive(embed_dim, "embed_dim");
    positive(num_heads, "num_heads");
    positive(mlp_ratio, "mlp_ratio");
    positive(patch_size, "patch_size");
    positive(input_time, "input_time");
    positive(input_freq, "input_freq");
    positive(num_classes, "num_classes");
    if (embed_dim % num_heads != 0) {
      throw ConfigError("num_heads (" + std::to_string(num_heads) +
                        ") must divide embed_dim (" + std::to_string(embed_dim) + ")");
    }
    if (input_time % patch_size != 0 || input_freq % patch_size != 0) {
      throw ConfigError("input_time and input_freq must be multiples of patch_size");
    }
    if (has_mlp_adapter(variant) && (adapter_dim == 0 || adapter_dim >= embed_dim)) {
      throw ConfigError("adapter_dim must satisfy 0 < adapter_dim < embed_dim");
    }
    if (!(layernorm_eps > 0.0)) throw ConfigError("layernorm_eps must be positive");
  }
};

namespace presets {

/// Small enough for finite differences and fast unit tests.
inline ModelConfig tiny() {
  ModelConfig c;
  c.depth = 2;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.patch_size = 2;
  c.input_time = 8;
  c.input_freq = 8;
  c.num_classes = 3;
  c.adapter_dim = 2;
  c.prompt_length = 2;
  return c;
}

/// ViT-Base sized backbone on a 1024x128 spectrogram. Only used for
/// parameter accounting; never allocated.
inline ModelConfig ast_base() {
  ModelConfig c;
  c.depth = 12;
  c.embed_dim = 768;
  c.num_heads = 12;
  c.mlp_ratio = 4;
  c.patch_size = 16;
  c.input_time = 1024;
  c.input_freq = 128;
  c.num_classes = 50;
  c.adapter_dim = 192;
  c.prompt_length = 12;
  return c;
}

/// Mid-sized model for the synthetic transfer experiments.
inline ModelConfig tiny_plus() {
  ModelConfig c;
  c.depth = 4;
  c.embed_dim = 32;
  c.num_heads = 4;
  c.mlp_ratio = 2;
  c.patch_size = 8;
  c.input_time = 64;
  c.input_freq = 64;
  c.num_classes = 4;
  c.adapter_dim = 8;
  c.prompt_length = 12;
  return c;
}

inline ModelConfig by_name(std::string_view name) {
  if (name == "tiny") return tiny();
  if (name == "ast-base") return ast_base();
  if (name == "tiny-plus") return tiny_plus();
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

}  // namespace presets

}  // namespace aat
