#pragma once

// Finite-difference verification of tape gradients over a whole model.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include "aat/errors.hpp"
#include "aat/model.hpp"
#include "aat/random.hpp"
#include "aat/tape.hpp"
#include "aat/training.hpp"

namespace aat {

/// Relative error with a floor on the denominator, so gradients that are
/// zero on both sides do not divide by zero.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

/// Central difference of f with respect to every entry of x (x is restored).
inline Tensor numeric_gradient(const std::function<double()>& f, Tensor& x, double h = 1e-6) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f();
    x[i] = saved - h;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

struct GradcheckOptions {
  std::uint64_t seed = 7;
  double step = 1e-6;
  std::size_t max_params = 5000;
  /// Op tag whose backward rule gets deliberately broken (negative control).
  std::string fault_op;
};

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Perturbs every parameter of `model` away from its initial value so that
/// zero-initialised paths carry signal, then compares tape gradients of a
/// cross-entropy loss against central differences.
inline GradcheckResult gradcheck_model(Model model, const GradcheckOptions& opts = {}) {
  const ModelConfig& cfg = model.config();
  if (model.parameter_count() > opts.max_params) {
    throw ContractError("gradcheck model has " + std::to_string(model.parameter_count()) +
                        " parameters; the cap is " + std::to_string(opts.max_params));
  }
  Rng rng(derive_seed(opts.seed, "gradcheck"));
  std::uniform_real_distribution<double> jitter(-0.3, 0.3);
  for (Parameter& p : model.parameters()) {
    p.requires_grad = true;
    for (double& v : p.value.data()) v += jitter(rng);
  }
  Tensor input({cfg.input_time, cfg.input_freq});
  fill_normal(input, rng, 1.0);
  const std::size_t label = std::uniform_int_distribution<std::size_t>(0, cfg.num_classes - 1)(rng);

  auto loss_of = [&](Binding& bind) {
    Var logits = model_forward(model, bind, input);
    return cross_entropy(reshape(logits, {1, cfg.num_classes}),
                         std::span<const std::size_t>(&label, 1));
  };

  Tape tape;
  if (!opts.fault_op.empty()) tape.inject_fault(opts.fault_op, 1.5);
  Binding bind(tape, model.parameters());
  Var loss = loss_of(bind);
  const Gradients grads = tape.backward(loss);

  auto eval = [&] {
    Tape t;
    Binding b(t, model.parameters(), false);
    return loss_of(b).value().item();
  };

  GradcheckResult result;
  for (const auto& [id, var] : bind.bound()) {
    Parameter& p = model.parameters()[id];
    const Tensor& analytic = grads[var];
    const Tensor numeric = numeric_gradient(eval, p.value, opts.step);
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double err = relative_error(analytic[i], numeric[i]);
      ++result.checked;
      if (err > result.max_relative_error || result.worst_parameter.empty()) {
        result.max_relative_error = err;
        result.worst_parameter = p.spec.name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace aat
