#pragma once

// Audio spectrogram Transformer: patch embedding, CLS token, positional
// table, pre-norm MHSA/MLP blocks with optional adapters, LN + linear head.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "aat/adapters.hpp"
#include "aat/config.hpp"
#include "aat/errors.hpp"
#include "aat/ops.hpp"
#include "aat/parameters.hpp"
#include "aat/random.hpp"
#include "aat/tape.hpp"
#include "aat/tensor.hpp"

namespace aat {

struct GridSize {
  std::size_t time = 0;
  std::size_t freq = 0;

  std::size_t cells() const { return time * freq; }
  friend bool operator==(const GridSize&, const GridSize&) = default;
};

/// Splits a T x F spectrogram into non-overlapping P x P patches, time-major
/// then frequency, each flattened row-major. Result is N x P^2.
inline Tensor patchify(const Tensor& spectrogram, std::size_t patch) {
  if (spectrogram.rank() != 2) {
    throw DimensionError("spectrogram must be T x F, got " + shape_str(spectrogram.shape()));
  }
  const std::size_t t = spectrogram.dim(0), f = spectrogram.dim(1);
  if (patch == 0 || t % patch != 0 || f % patch != 0) {
    throw DimensionError("spectrogram " + shape_str(spectrogram.shape()) +
                         " is not divisible into " + std::to_string(patch) + "x" +
                         std::to_string(patch) + " patches");
  }
  const std::size_t gt = t / patch, gf = f / patch;
  Tensor out({gt * gf, patch * patch});
  for (std::size_t pt = 0; pt < gt; ++pt)
    for (std::size_t pf = 0; pf < gf; ++pf)
      for (std::size_t i = 0; i < patch; ++i)
        for (std::size_t j = 0; j < patch; ++j)
          out[(pt * gf + pf) * patch * patch + i * patch + j] =
              spectrogram[(pt * patch + i) * f + pf * patch + j];
  return out;
}

namespace detail {

// Sample positions of an n_to-point grid on an n_from-point grid with the end
// points aligned.
inline double grid_source(std::size_t i, std::size_t n_from, std::size_t n_to) {
  if (n_to == 1) return 0.5 * static_cast<double>(n_from - 1);
  return static_cast<double>(i) * static_cast<double>(n_from - 1) /
         static_cast<double>(n_to - 1);
}

}  // namespace detail

/// Linear map from a (N0+1)-row positional table to a (N1+1)-row one: the CLS
/// row passes through, patch rows are bilinearly resampled on the
/// time-frequency grid with corner points aligned.
inline Tensor pos_interpolation_matrix(GridSize from, GridSize to) {
  if (from.cells() == 0 || to.cells() == 0) throw DimensionError("empty positional grid");
  Tensor m({to.cells() + 1, from.cells() + 1});
  const std::size_t cols = from.cells() + 1;
  m[0] = 1.0;
  for (std::size_t it = 0; it < to.time; ++it) {
    const double st = detail::grid_source(it, from.time, to.time);
    const auto t0 = static_cast<std::size_t>(std::floor(st));
    const std::size_t t1 = std::min(t0 + 1, from.time - 1);
    const double wt = st - static_cast<double>(t0);
    for (std::size_t jf = 0; jf < to.freq; ++jf) {
      const double sf = detail::grid_source(jf, from.freq, to.freq);
      const auto f0 = static_cast<std::size_t>(std::floor(sf));
      const std::size_t f1 = std::min(f0 + 1, from.freq - 1);
      const double wf = sf - static_cast<double>(f0);
      double* row = m.data().data() + (1 + it * to.freq + jf) * cols + 1;
      row[t0 * from.freq + f0] += (1.0 - wt) * (1.0 - wf);
      row[t0 * from.freq + f1] += (1.0 - wt) * wf;
      row[t1 * from.freq + f0] += wt * (1.0 - wf);
      row[t1 * from.freq + f1] += wt * wf;
    }
  }
  return m;
}

inline void check_pos_table(const Shape& s, GridSize from) {
  if (s.size() != 2 || s[0] != from.cells() + 1) {
    throw DimensionError("positional table " + shape_str(s) + " does not hold " +
                         std::to_string(from.cells()) + " grid cells plus CLS");
  }
}

/// Differentiable resampling of the positional table.
inline Var interpolate_pos_embed(Var pos, GridSize from, GridSize to) {
  check_pos_table(pos.shape(), from);
  if (from == to) return pos;
  Var m = pos.tape().constant(pos_interpolation_matrix(from, to));
  return matmul(m, pos);
}

inline Tensor interpolate_pos_embed(const Tensor& pos, GridSize from, GridSize to) {
  check_pos_table(pos.shape(), from);
  if (from == to) return pos;
  Tape tape;
  return interpolate_pos_embed(tape.constant(pos), from, to).value();
}

struct AdapterParams {
  ParamId down_weight, down_bias, up_weight, up_bias;
  bool shortcut = false;
};

struct BlockParams {
  ParamId ln1_gamma, ln1_beta, qkv_weight, qkv_bias, proj_weight, proj_bias;
  ParamId ln2_gamma, ln2_beta, fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  std::optional<AdapterParams> mlp_adapter;
  std::optional<AdapterParams> spatial_adapter;
};

struct HeadParams {
  ParamId ln_gamma, ln_beta, weight, bias;
};

/// Seeds for the independently initialised parameter families. Backbone
/// tensors depend only on `backbone` and their names, so models of every
/// variant built from the same backbone seed share identical frozen weights.
struct ModelSeeds {
  std::uint64_t backbone = 0;
  std::uint64_t adapters = 1;
  std::uint64_t prompts = 2;
  std::uint64_t head = 3;
};

class Model {
 public:
  Model(const ModelConfig& config, const ModelSeeds& seeds) : config_(config) {
    for (ParamSpec& spec : parameter_layout(config_)) {
      Tensor value(spec.shape);
      params_.add(std::move(spec), std::move(value));
    }
    resolve_ids();
    initialise(seeds);
  }

  const ModelConfig& config() const noexcept { return config_; }
  ParameterStore& parameters() noexcept { return params_; }
  const ParameterStore& parameters() const noexcept { return params_; }

  ParamId patch_weight() const { return patch_weight_; }
  ParamId patch_bias() const { return patch_bias_; }
  ParamId cls_token() const { return cls_token_; }
  ParamId pos_embed() const { return pos_embed_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }
  const std::vector<ParamId>& prompts() const { return prompts_; }
  const HeadParams& head() const { return head_; }

  GridSize grid() const { return {config_.grid_time(), config_.grid_freq()}; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Parameter& p : params_) n += p.value.size();
    return n;
  }

 private:
  AdapterParams adapter_ids(const std::string& prefix, bool shortcut) const {
    return {params_.id(prefix + ".down.weight"), params_.id(prefix + ".down.bias"),
            params_.id(prefix + ".up.weight"), params_.id(prefix + ".up.bias"), shortcut};
  }

  void resolve_ids() {
    patch_weight_ = params_.id("patch_embed.weight");
    patch_bias_ = params_.id("patch_embed.bias");
    cls_token_ = params_.id("cls_token");
    pos_embed_ = params_.id("pos_embed");
    for (std::size_t i = 0; i < config_.depth; ++i) {
      const std::string b = "blocks." + std::to_string(i);
      BlockParams bp{params_.id(b + ".ln1.gamma"),       params_.id(b + ".ln1.beta"),
                     params_.id(b + ".attn.qkv.weight"), params_.id(b + ".attn.qkv.bias"),
                     params_.id(b + ".attn.proj.weight"), params_.id(b + ".attn.proj.bias"),
                     params_.id(b + ".ln2.gamma"),       params_.id(b + ".ln2.beta"),
                     params_.id(b + ".mlp.fc1.weight"),  params_.id(b + ".mlp.fc1.bias"),
                     params_.id(b + ".mlp.fc2.weight"),  params_.id(b + ".mlp.fc2.bias"),
                     std::nullopt,                       std::nullopt};
      if (has_mlp_adapter(config_.variant)) bp.mlp_adapter = adapter_ids(b + ".mlp_adapter", false);
      if (has_spatial_adapter(config_.variant))
        bp.spatial_adapter = adapter_ids(b + ".spatial_adapter", true);
      blocks_.push_back(bp);
      if (config_.prompt_length > 0) prompts_.push_back(params_.id("prompts." + std::to_string(i)));
    }
    head_ = {params_.id("head.ln.gamma"), params_.id("head.ln.beta"), params_.id("head.weight"),
             params_.id("head.bias")};
  }

  void initialise(const ModelSeeds& seeds) {
    for (Parameter& p : params_) {
      const ParamSpec& s = p.spec;
      switch (s.group) {
        case ParamGroup::Embedding:
        case ParamGroup::Block:
        case ParamGroup::Head: {
          const bool is_gamma = s.layernorm && s.name.ends_with(".gamma");
          if (is_gamma) {
            p.value.fill(1.0);
          } else if (s.shape.size() == 2) {
            const std::uint64_t base = s.group == ParamGroup::Head ? seeds.head : seeds.backbone;
            Rng rng(derive_seed(base, s.name));
            fill_uniform(p.value, rng, xavier_bound(s.shape[0], s.shape[1]));
          }
          break;
        }
        case ParamGroup::MlpAdapter:
        case ParamGroup::SpatialAdapter:
          break;  // filled per adapter below
        case ParamGroup::Prompt: {
          Rng rng(derive_seed(seeds.prompts, s.name));
          fill_uniform(p.value, rng, 0.1);
          break;
        }
      }
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string b = "blocks." + std::to_string(i);
      if (blocks_[i].mlp_adapter) {
        store_adapter(*blocks_[i].mlp_adapter,
                      init_adapter(config_.embed_dim, config_.adapter_dim, false,
                                   derive_seed(seeds.adapters, b + ".mlp_adapter")));
      }
      if (blocks_[i].spatial_adapter) {
        store_adapter(*blocks_[i].spatial_adapter,
                      init_adapter(config_.embed_dim, config_.adapter_dim, true,
                                   derive_seed(seeds.adapters, b + ".spatial_adapter")));
      }
    }
  }

  void store_adapter(const AdapterParams& ids, Adapter a) {
    params_[ids.down_weight].value = std::move(a.down_weight);
    params_[ids.down_bias].value = std::move(a.down_bias);
    params_[ids.up_weight].value = std::move(a.up_weight);
    params_[ids.up_bias].value = std::move(a.up_bias);
  }

  ModelConfig config_;
  ParameterStore params_;
  ParamId patch_weight_{}, patch_bias_{}, cls_token_{}, pos_embed_{};
  std::vector<BlockParams> blocks_;
  std::vector<ParamId> prompts_;
  HeadParams head_{};
};

/// Places a model's parameters on a tape, once each, on first use.
class Binding {
 public:
  /// With `track` false every parameter becomes a constant regardless of its
  /// requires_grad flag.
  Binding(Tape& tape, const ParameterStore& params, bool track = true)
      : tape_(&tape), params_(&params), track_(track), vars_(params.size()) {}

  Var operator()(ParamId id) {
    std::optional<Var>& slot = vars_.at(id);
    if (!slot) {
      const Parameter& p = (*params_)[id];
      slot = tape_->leaf(p.value, track_ && p.requires_grad);
    }
    return *slot;
  }

  AdapterVars adapter(const AdapterParams& a) {
    return {(*this)(a.down_weight), (*this)(a.down_bias), (*this)(a.up_weight),
            (*this)(a.up_bias), a.shortcut};
  }

  Tape& tape() const { return *tape_; }

  /// Parameters that were placed on the tape, with their handles.
  std::vector<std::pair<ParamId, Var>> bound() const {
    std::vector<std::pair<ParamId, Var>> out;
    for (std::size_t i = 0; i < vars_.size(); ++i)
      if (vars_[i]) out.emplace_back(static_cast<ParamId>(i), *vars_[i]);
    return out;
  }

 private:
  Tape* tape_;
  const ParameterStore* params_;
  bool track_;
  std::vector<std::optional<Var>> vars_;
};

/// Hooks for inspecting intermediate activations.
class ForwardObserver {
 public:
  virtual ~ForwardObserver() = default;
  /// Sequence entering block `layer`, before prompt injection.
  virtual void block_input(std::size_t /*layer*/, const Tensor& /*x*/) {}
  /// Sequence the block actually processes (prompts included).
  virtual void block_internal(std::size_t /*layer*/, const Tensor& /*x*/) {}
  /// Sequence leaving block `layer`, after prompt stripping.
  virtual void block_output(std::size_t /*layer*/, const Tensor& /*x*/) {}
  virtual void attention(std::size_t /*layer*/, std::size_t /*head*/, const Tensor& /*w*/) {}
};

/// Block parameters bound to a tape.
struct BlockVars {
  Var ln1_gamma, ln1_beta, qkv_weight, qkv_bias, proj_weight, proj_bias;
  Var ln2_gamma, ln2_beta, fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  std::optional<AdapterVars> mlp_adapter;
  std::optional<AdapterVars> spatial_adapter;
  std::size_t num_heads = 1;
  double eps = 1e-6;
};

inline BlockVars bind_block(Binding& bind, const BlockParams& b, std::size_t heads, double eps) {
  BlockVars v{bind(b.ln1_gamma), bind(b.ln1_beta), bind(b.qkv_weight), bind(b.qkv_bias),
              bind(b.proj_weight), bind(b.proj_bias), bind(b.ln2_gamma), bind(b.ln2_beta),
              bind(b.fc1_weight), bind(b.fc1_bias), bind(b.fc2_weight), bind(b.fc2_bias),
              std::nullopt, std::nullopt, heads, eps};
  if (b.mlp_adapter) v.mlp_adapter = bind.adapter(*b.mlp_adapter);
  if (b.spatial_adapter) v.spatial_adapter = bind.adapter(*b.spatial_adapter);
  return v;
}

/// MHSA(LN1(x)) without the residual add. Scale 1/sqrt(d/h), fused qkv.
inline Var mhsa_forward(Var x, const BlockVars& b, ForwardObserver* observer = nullptr,
                        std::size_t layer = 0) {
  const Shape& s = x.shape();
  if (s.size() != 2 || s[0] == 0) {
    throw DimensionError("mhsa expects a non-empty S x d sequence, got " + shape_str(s));
  }
  const std::size_t d = s[1];
  if (b.num_heads == 0 || d % b.num_heads != 0) {
    throw ConfigError("head count does not divide embedding width");
  }
  const std::size_t dh = d / b.num_heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
  Var h = layernorm(x, b.ln1_gamma, b.ln1_beta, b.eps);
  Var qkv = linear(h, b.qkv_weight, b.qkv_bias);
  std::vector<Var> heads;
  heads.reserve(b.num_heads);
  for (std::size_t j = 0; j < b.num_heads; ++j) {
    Var q = slice(qkv, 1, j * dh, dh);
    Var k = slice(qkv, 1, d + j * dh, dh);
    Var v = slice(qkv, 1, 2 * d + j * dh, dh);
    Var w = softmax(scale(matmul(q, transpose(k)), scale_factor), 1);
    if (observer) observer->attention(layer, j, w.value());
    heads.push_back(matmul(w, v));
  }
  Var merged = b.num_heads == 1 ? heads.front() : concat(heads, 1);
  return linear(merged, b.proj_weight, b.proj_bias);
}

inline Var mlp_forward(Var x, const BlockVars& b) {
  return linear(gelu(linear(x, b.fc1_weight, b.fc1_bias)), b.fc2_weight, b.fc2_bias);
}

/// One Transformer block.
///   vanilla: x' = x + MHSA(LN1 x);  out = x' + MLP(LN2 x')
///   aat-m:   out = x' + MLPAdapter(LN2 x') + MLP(LN2 x')
///   aat-ms:  xs = x + SpatialAdapter(MHSA(LN1 x));
///            out = xs + MLPAdapter(LN2 xs) + MLP(LN2 xs)
inline Var block_forward(Var x, const BlockVars& b, Variant variant,
                         ForwardObserver* observer = nullptr, std::size_t layer = 0) {
  if (has_mlp_adapter(variant) && !b.mlp_adapter) {
    throw ConfigError("variant " + std::string(to_string(variant)) +
                      " needs an MLP adapter the block does not have");
  }
  if (has_spatial_adapter(variant) && !b.spatial_adapter) {
    throw ConfigError("variant " + std::string(to_string(variant)) +
                      " needs a spatial adapter the block does not have");
  }
  Var attn = mhsa_forward(x, b, observer, layer);
  if (has_spatial_adapter(variant)) attn = adapter_forward(attn, *b.spatial_adapter);
  Var xs = add(x, attn);
  Var h = layernorm(xs, b.ln2_gamma, b.ln2_beta, b.eps);
  Var branch = mlp_forward(h, b);
  if (has_mlp_adapter(variant)) {
    return add(add(xs, adapter_forward(h, *b.mlp_adapter)), branch);
  }
  return add(xs, branch);
}

/// Patch projection, CLS prepend and (resampled) positional add: (N+1) x d.
inline Var embed(const Model& model, Binding& bind, const Tensor& spectrogram) {
  const ModelConfig& cfg = model.config();
  const std::size_t p = cfg.patch_size;
  Tensor patches = patchify(spectrogram, p);
  const GridSize grid{spectrogram.dim(0) / p, spectrogram.dim(1) / p};
  Tape& tape = bind.tape();
  Var tokens = linear(tape.constant(std::move(patches)), bind(model.patch_weight()),
                      bind(model.patch_bias()));
  Var seq = concat({bind(model.cls_token()), tokens}, 0);
  Var pos = interpolate_pos_embed(bind(model.pos_embed()), model.grid(), grid);
  return add(seq, pos);
}

struct ForwardOptions {
  /// Block layout to evaluate; defaults to the model's own variant.
  std::optional<Variant> variant;
  /// Inject the prompt bank when the model has one.
  bool use_prompts = true;
  ForwardObserver* observer = nullptr;
};

/// Logits (length C) for one T x F spectrogram.
inline Var model_forward(const Model& model, Binding& bind, const Tensor& spectrogram,
                         const ForwardOptions& opts = {}) {
  const ModelConfig& cfg = model.config();
  const Variant variant = opts.variant.value_or(cfg.variant);
  const bool prompts = opts.use_prompts && !model.prompts().empty();
  Var x = embed(model, bind, spectrogram);
  for (std::size_t i = 0; i < model.blocks().size(); ++i) {
    if (opts.observer) opts.observer->block_input(i, x.value());
    if (prompts) x = prompt_inject(x, bind(model.prompts()[i]));
    if (opts.observer) opts.observer->block_internal(i, x.value());
    const BlockVars bv = bind_block(bind, model.blocks()[i], cfg.num_heads, cfg.layernorm_eps);
    x = block_forward(x, bv, variant, opts.observer, i);
    if (prompts) x = prompt_strip(x, cfg.prompt_length);
    if (opts.observer) opts.observer->block_output(i, x.value());
  }
  const HeadParams& hp = model.head();
  Var cls = slice(x, 0, 0, 1);
  Var h = layernorm(cls, bind(hp.ln_gamma), bind(hp.ln_beta), cfg.layernorm_eps);
  Var logits = linear(h, bind(hp.weight), bind(hp.bias));
  return reshape(logits, {cfg.num_classes});
}

/// Inference without gradient tracking.
inline Tensor predict(const Model& model, const Tensor& spectrogram,
                      const ForwardOptions& opts = {}) {
  Tape tape;
  Binding bind(tape, model.parameters(), false);
  return model_forward(model, bind, spectrogram, opts).value();
}

}  // namespace aat
