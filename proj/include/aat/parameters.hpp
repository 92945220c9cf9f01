#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "aat/config.hpp"
#include "aat/errors.hpp"
#include "aat/tensor.hpp"

namespace aat {

/// Which part of the network a parameter belongs to.
enum class ParamGroup { Embedding, Block, MlpAdapter, SpatialAdapter, Prompt, Head };

/// Name, shape and placement of one parameter tensor.
struct ParamSpec {
  std::string name;
  Shape shape;
  ParamGroup group;
  int layer = -1;  // block index for per-block groups
  bool layernorm = false;

  std::size_t size() const { return shape_size(shape); }
};

namespace detail {

inline void append_adapter(std::vector<ParamSpec>& out, const std::string& prefix,
                           ParamGroup group, int layer, std::size_t d, std::size_t dhat) {
  out.push_back({prefix + ".down.weight", {d, dhat}, group, layer});
  out.push_back({prefix + ".down.bias", {dhat}, group, layer});
  out.push_back({prefix + ".up.weight", {dhat, d}, group, layer});
  out.push_back({prefix + ".up.bias", {d}, group, layer});
}

}  // namespace detail

/// Every parameter a model built from `cfg` owns, in a fixed order. Model
/// construction and parameter accounting both derive from this list.
inline std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim;
  const std::size_t p = cfg.patch_size;
  const std::size_t hidden = cfg.mlp_hidden();
  std::vector<ParamSpec> out;
  out.push_back({"patch_embed.weight", {p * p, d}, ParamGroup::Embedding});
  out.push_back({"patch_embed.bias", {d}, ParamGroup::Embedding});
  out.push_back({"cls_token", {1, d}, ParamGroup::Embedding});
  out.push_back({"pos_embed", {cfg.num_patches() + 1, d}, ParamGroup::Embedding});
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const int layer = static_cast<int>(i);
    const std::string b = "blocks." + std::to_string(i);
    out.push_back({b + ".ln1.gamma", {d}, ParamGroup::Block, layer, true});
    out.push_back({b + ".ln1.beta", {d}, ParamGroup::Block, layer, true});
    out.push_back({b + ".attn.qkv.weight", {d, 3 * d}, ParamGroup::Block, layer});
    out.push_back({b + ".attn.qkv.bias", {3 * d}, ParamGroup::Block, layer});
    out.push_back({b + ".attn.proj.weight", {d, d}, ParamGroup::Block, layer});
    out.push_back({b + ".attn.proj.bias", {d}, ParamGroup::Block, layer});
    out.push_back({b + ".ln2.gamma", {d}, ParamGroup::Block, layer, true});
    out.push_back({b + ".ln2.beta", {d}, ParamGroup::Block, layer, true});
    out.push_back({b + ".mlp.fc1.weight", {d, hidden}, ParamGroup::Block, layer});
    out.push_back({b + ".mlp.fc1.bias", {hidden}, ParamGroup::Block, layer});
    out.push_back({b + ".mlp.fc2.weight", {hidden, d}, ParamGroup::Block, layer});
    out.push_back({b + ".mlp.fc2.bias", {d}, ParamGroup::Block, layer});
    if (has_spatial_adapter(cfg.variant)) {
      detail::append_adapter(out, b + ".spatial_adapter", ParamGroup::SpatialAdapter, layer, d,
                             cfg.adapter_dim);
    }
    if (has_mlp_adapter(cfg.variant)) {
      detail::append_adapter(out, b + ".mlp_adapter", ParamGroup::MlpAdapter, layer, d,
                             cfg.adapter_dim);
    }
  }
  if (cfg.prompt_length > 0) {
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      out.push_back({"prompts." + std::to_string(i), {cfg.prompt_length, d}, ParamGroup::Prompt,
                     static_cast<int>(i)});
    }
  }
  out.push_back({"head.ln.gamma", {d}, ParamGroup::Head, -1, true});
  out.push_back({"head.ln.beta", {d}, ParamGroup::Head, -1, true});
  out.push_back({"head.weight", {d, cfg.num_classes}, ParamGroup::Head});
  out.push_back({"head.bias", {cfg.num_classes}, ParamGroup::Head});
  return out;
}

using ParamId = std::uint32_t;

struct Parameter {
  ParamSpec spec;
  Tensor value;
  bool requires_grad = true;
};

inline std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const ParamSpec& p : parameter_layout(cfg)) n += p.size();
  return n;
}

/// Owns every parameter tensor of a model, addressable by id or name.
class ParameterStore {
 public:
  ParamId add(ParamSpec spec, Tensor value) {
    if (value.shape() != spec.shape) {
      throw DimensionError("parameter " + spec.name + " expects " + shape_str(spec.shape) +
                           ", got " + shape_str(value.shape()));
    }
    if (index_.contains(spec.name)) throw ConfigError("duplicate parameter " + spec.name);
    const auto id = static_cast<ParamId>(params_.size());
    index_.emplace(spec.name, id);
    params_.push_back(Parameter{std::move(spec), std::move(value), true});
    return id;
  }

  ParamId id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Parameter& operator[](ParamId id) { return params_[id]; }
  const Parameter& operator[](ParamId id) const { return params_[id]; }
  Parameter& at(const std::string& name) { return params_[id(name)]; }
  const Parameter& at(const std::string& name) const { return params_[id(name)]; }

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, ParamId> index_;
};

}  // namespace aat
