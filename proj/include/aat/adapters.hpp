#pragma once

// Bottleneck adapters and per-layer prompt tokens.

#include <cstddef>
#include <cstdint>

#include "aat/errors.hpp"
#include "aat/ops.hpp"
#include "aat/random.hpp"
#include "aat/tape.hpp"
#include "aat/tensor.hpp"

namespace aat {

/// Down projection, GELU, up projection. Without a shortcut it is the MLP
/// Adapter that runs beside the frozen MLP; with one it is the Spatial Adapter
/// applied to the attention output.
struct Adapter {
  Tensor down_weight;  // d x dhat
  Tensor down_bias;    // dhat
  Tensor up_weight;    // dhat x d
  Tensor up_bias;      // d
  bool shortcut = false;

  std::size_t dim() const { return down_weight.dim(0); }
  std::size_t bottleneck() const { return down_weight.dim(1); }
};

/// Fresh adapter: Xavier-uniform down weight, everything on the up path and
/// both biases exactly zero, so a new adapter contributes nothing.
inline Adapter init_adapter(std::size_t dim, std::size_t bottleneck, bool shortcut,
                            std::uint64_t seed) {
  if (bottleneck == 0 || bottleneck >= dim) {
    throw ConfigError("adapter bottleneck must satisfy 0 < dhat < d (d=" + std::to_string(dim) +
                      ", dhat=" + std::to_string(bottleneck) + ")");
  }
  Adapter a{Tensor({dim, bottleneck}), Tensor({bottleneck}), Tensor({bottleneck, dim}),
            Tensor({dim}), shortcut};
  Rng rng(seed);
  fill_uniform(a.down_weight, rng, xavier_bound(dim, bottleneck));
  return a;
}

/// Adapter parameters already bound to a tape.
struct AdapterVars {
  Var down_weight, down_bias, up_weight, up_bias;
  bool shortcut = false;
};

inline Var adapter_forward(Var x, const AdapterVars& a) {
  const std::size_t d = a.down_weight.shape().at(0);
  if (x.shape().empty() || x.shape().back() != d) {
    throw DimensionError("adapter expects last dim " + std::to_string(d) + ", got " +
                         shape_str(x.shape()));
  }
  Var core = linear(gelu(linear(x, a.down_weight, a.down_bias)), a.up_weight, a.up_bias);
  return a.shortcut ? add(x, core) : core;
}

inline AdapterVars bind(Tape& tape, const Adapter& a, bool requires_grad) {
  return AdapterVars{tape.leaf(a.down_weight, requires_grad), tape.leaf(a.down_bias, requires_grad),
                     tape.leaf(a.up_weight, requires_grad), tape.leaf(a.up_bias, requires_grad),
                     a.shortcut};
}

/// Evaluates an adapter outside of any training context.
inline Tensor adapter_forward(const Tensor& x, const Adapter& a) {
  Tape tape;
  return adapter_forward(tape.constant(x), bind(tape, a, false)).value();
}

/// Prepends the layer's prompt tokens: [P...P][CLS][E...E].
inline Var prompt_inject(Var x, Var tokens) {
  const Shape& xs = x.shape();
  const Shape& ps = tokens.shape();
  if (xs.size() != 2 || ps.size() != 2 || xs[1] != ps[1]) {
    throw DimensionError("prompt_inject: tokens " + shape_str(ps) + " do not match input " +
                         shape_str(xs));
  }
  if (ps[0] == 0) return x;
  return concat({tokens, x}, 0);
}

/// Drops the first `count` rows (the prompt positions) after a block.
inline Var prompt_strip(Var x, std::size_t count) {
  const Shape& xs = x.shape();
  if (xs.size() != 2 || xs[0] <= count) {
    throw ContractError("prompt_strip: need more than " + std::to_string(count) + " rows, got " +
                        shape_str(xs));
  }
  if (count == 0) return x;
  return slice(x, 0, count, xs[0] - count);
}

inline Tensor prompt_inject(const Tensor& x, const Tensor& tokens) {
  Tape tape;
  return prompt_inject(tape.constant(x), tape.constant(tokens)).value();
}

inline Tensor prompt_strip(const Tensor& x, std::size_t count) {
  Tape tape;
  return prompt_strip(tape.constant(x), count).value();
}

}  // namespace aat
