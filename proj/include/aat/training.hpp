#pragma once

// Losses, metrics, Adam, and the mask-respecting fine-tuning loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "aat/csv.hpp"
#include "aat/data.hpp"
#include "aat/errors.hpp"
#include "aat/model.hpp"
#include "aat/ops.hpp"
#include "aat/peft.hpp"
#include "aat/tape.hpp"

namespace aat {

/// Mean over the batch of -log softmax(logits)[label].
inline Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(z.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = z.dim(0), c = z.dim(1);
  for (std::size_t l : labels) {
    if (l >= c) {
      throw ContractError("label " + std::to_string(l) + " outside [0, " + std::to_string(c) +
                          ")");
    }
  }
  Tensor probs({b, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = z.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double log_z = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - log_z);
    loss += log_z - row[labels[i]];
  }
  loss /= static_cast<double>(b);
  std::vector<std::size_t> ls(labels.begin(), labels.end());
  return logits.tape().record(
      "cross_entropy", Tensor::scalar(loss), {logits},
      [probs = std::move(probs), ls = std::move(ls), b, c](const BackwardArgs& ctx) {
        const double g = ctx.grad[0] / static_cast<double>(b);
        Tensor& gz = *ctx.grad_in[0];
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            gz[i * c + j] += g * (probs[i * c + j] - (j == ls[i] ? 1.0 : 0.0));
          }
        }
      });
}

/// Mean elementwise sigmoid binary cross-entropy, computed as
/// max(z,0) - z*t + log(1 + exp(-|z|)).
inline Var bce_multilabel(Var logits, const Tensor& targets) {
  const Tensor& z = logits.value();
  if (z.shape() != targets.shape()) {
    throw DimensionError("bce_multilabel: logits " + shape_str(z.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  }
  for (double t : targets.data()) {
    if (t != 0.0 && t != 1.0) throw ContractError("multi-label targets must be 0 or 1");
  }
  const std::size_t n = z.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    loss += std::max(z[i], 0.0) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  loss /= static_cast<double>(n);
  return logits.tape().record(
      "bce_multilabel", Tensor::scalar(loss), {logits}, [targets, n](const BackwardArgs& ctx) {
        const double g = ctx.grad[0] / static_cast<double>(n);
        const Tensor& z = *ctx.in[0];
        Tensor& gz = *ctx.grad_in[0];
        for (std::size_t i = 0; i < n; ++i) {
          const double s = z[i] >= 0 ? 1.0 / (1.0 + std::exp(-z[i]))
                                     : std::exp(z[i]) / (1.0 + std::exp(z[i]));
          gz[i] += g * (s - targets[i]);
        }
      });
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
inline double accuracy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw DimensionError("accuracy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    hits += best == labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

/// Average precision of one ranking: mean over positives of the precision at
/// the positive's rank. Ranking is by descending score, ties kept in sample
/// order.
inline double average_precision(std::span<const double> scores, std::span<const int> targets) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t positives = 0;
  double sum = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (targets[order[rank]]) {
      ++positives;
      sum += static_cast<double>(positives) / static_cast<double>(rank + 1);
    }
  }
  return positives ? sum / static_cast<double>(positives) : 0.0;
}

/// Macro-averaged AP over the classes that have at least one positive.
inline double mean_average_precision(const Tensor& scores, const std::vector<std::vector<int>>& targets) {
  if (scores.rank() != 2 || scores.dim(0) != targets.size()) {
    throw DimensionError("mAP: scores " + shape_str(scores.shape()) + " vs " +
                         std::to_string(targets.size()) + " target rows");
  }
  const std::size_t b = scores.dim(0), c = scores.dim(1);
  double total = 0.0;
  std::size_t classes = 0;
  std::vector<double> col(b);
  std::vector<int> tcol(b);
  for (std::size_t j = 0; j < c; ++j) {
    bool any = false;
    for (std::size_t i = 0; i < b; ++i) {
      if (targets[i].size() != c) throw DimensionError("mAP: target row width mismatch");
      col[i] = scores.at(i, j);
      tcol[i] = targets[i][j];
      any = any || tcol[i];
    }
    if (!any) continue;
    total += average_precision(col, tcol);
    ++classes;
  }
  if (classes == 0) throw ContractError("mAP: no class has a positive target");
  return total / static_cast<double>(classes);
}

// ---------------------------------------------------------------------------
// Optimiser

using ParamGrads = std::vector<std::optional<Tensor>>;
using ParamMask = std::vector<bool>;

inline ParamMask mask_ids(const ParameterStore& params, const std::set<std::string>& names) {
  ParamMask m(params.size(), false);
  for (const std::string& n : names) m[params.id(n)] = true;
  return m;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::optional<Tensor>> m;  // allocated for trainable parameters only
  std::vector<std::optional<Tensor>> v;
};

/// Bias-corrected Adam update of the masked parameters. Everything outside
/// the mask, including its optimiser state, is left untouched.
inline void adam_step(ParameterStore& params, const ParamGrads& grads, OptimizerState& state,
                      const ParamMask& mask) {
  if (grads.size() != params.size() || mask.size() != params.size()) {
    throw ContractError("adam_step: gradient/mask count does not match parameter count");
  }
  state.m.resize(params.size());
  state.v.resize(params.size());
  ++state.step;
  const AdamConfig& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!mask[i]) continue;
    Tensor& p = params[static_cast<ParamId>(i)].value;
    if (!grads[i]) {
      throw ContractError("adam_step: no gradient for trainable " +
                          params[static_cast<ParamId>(i)].spec.name);
    }
    const Tensor& g = *grads[i];
    if (g.shape() != p.shape()) {
      throw ContractError("adam_step: gradient " + shape_str(g.shape()) + " for parameter " +
                          shape_str(p.shape()));
    }
    if (!state.m[i]) {
      state.m[i] = Tensor(p.shape());
      state.v[i] = Tensor(p.shape());
    }
    Tensor& m = *state.m[i];
    Tensor& v = *state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      p[k] -= c.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + c.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double eval_metric = 0.0;
  double seconds = 0.0;
  std::size_t trainable_params = 0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

inline constexpr std::string_view kHistoryHeader =
    "epoch,train_loss,eval_metric,seconds,trainable_params";

inline std::string to_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << kHistoryHeader << '\n';
  for (const EpochRecord& r : h.epochs) {
    os << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.eval_metric)
       << ',' << format_double(r.seconds) << ',' << r.trainable_params << '\n';
  }
  return os.str();
}

inline TrainHistory parse_history_csv(std::string_view text) {
  const CsvTable t = parse_csv(text);
  const std::size_t e = t.column("epoch"), l = t.column("train_loss"),
                    m = t.column("eval_metric"), s = t.column("seconds"),
                    p = t.column("trainable_params");
  TrainHistory h;
  for (const auto& row : t.rows) {
    h.epochs.push_back({std::stoull(row[e]), std::stod(row[l]), std::stod(row[m]),
                        std::stod(row[s]), std::stoull(row[p])});
  }
  return h;
}

struct TrainOptions {
  std::size_t epochs = 15;
  double lr = 1e-3;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  /// Worker threads for per-sample passes; results do not depend on it.
  std::size_t threads = 1;
  /// When false the seconds column is written as 0 so histories compare
  /// byte for byte.
  bool record_timing = true;
  PeftOptions peft;
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) fn(i);
    });
  }
}

struct SampleResult {
  double loss = 0.0;
  ParamGrads grads;
};

/// Loss and parameter gradients for one sample, loss scaled by `weight`.
inline SampleResult sample_gradients(const Model& model, const SpectrogramSample& s,
                                     TaskKind kind, double weight) {
  Tape tape;
  Binding bind(tape, model.parameters());
  Var logits = model_forward(model, bind, s.spectrogram);
  const std::size_t c = model.config().num_classes;
  Var row = reshape(logits, {1, c});
  Var loss;
  if (kind == TaskKind::SingleLabel) {
    const std::size_t label = s.label;
    loss = cross_entropy(row, std::span<const std::size_t>(&label, 1));
  } else {
    Tensor t({1, c});
    for (std::size_t j = 0; j < c; ++j) t[j] = s.targets.at(j);
    loss = bce_multilabel(row, t);
  }
  SampleResult r;
  r.loss = loss.value().item();
  r.grads.resize(model.parameters().size());
  if (!loss.requires_grad()) return r;
  Var scaled = scale(loss, weight);
  const Gradients g = tape.backward(scaled);
  for (const auto& [id, var] : bind.bound()) {
    if (var.requires_grad()) r.grads[id] = g[var];
  }
  return r;
}

/// Test-set metric: accuracy for single-label data, mAP for multi-label.
inline double evaluate(const Model& model, const Dataset& data, std::size_t threads = 1) {
  if (data.empty()) throw ContractError("evaluate on an empty dataset");
  const std::size_t c = model.config().num_classes;
  Tensor logits({data.size(), c});
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const Tensor z = predict(model, data.samples[i].spectrogram);
    std::copy(z.data().begin(), z.data().end(), logits.data().begin() + i * c);
  });
  if (data.kind == TaskKind::SingleLabel) {
    std::vector<std::size_t> labels;
    for (const auto& s : data.samples) labels.push_back(s.label);
    return accuracy(logits, labels);
  }
  std::vector<std::vector<int>> targets;
  for (const auto& s : data.samples) targets.push_back(s.targets);
  return mean_average_precision(logits, targets);
}

inline std::size_t count_trainable(const Model& model) {
  std::size_t n = 0;
  for (const Parameter& p : model.parameters())
    if (p.requires_grad) n += p.value.size();
  return n;
}

/// Freezes `model` per `strategy`, then runs shuffled mini-batch Adam.
/// Per-sample gradients are summed in sample order, so results are identical
/// for any thread count.
inline TrainHistory train(Model& model, Strategy strategy, const Dataset& train_set,
                          const Dataset& eval_set, const TrainOptions& opts) {
  if (train_set.empty() || eval_set.empty()) throw ContractError("train needs non-empty data");
  if (opts.batch_size == 0) throw ConfigError("batch_size must be positive");
  const auto names = trainable_mask(model, strategy, opts.peft);
  apply_freeze(model, names);
  const ParamMask mask = mask_ids(model.parameters(), names);
  const std::size_t trainable = count_trainable(model);

  TrainHistory history;
  OptimizerState state;
  state.config.lr = opts.lr;
  const std::size_t n = train_set.size();
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const auto order = permutation(n, derive_seed(derive_seed(opts.seed, "shuffle"), epoch));
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < n; begin += opts.batch_size) {
      const std::size_t count = std::min(opts.batch_size, n - begin);
      const double weight = 1.0 / static_cast<double>(count);
      std::vector<SampleResult> results(count);
      parallel_for(count, opts.threads, [&](std::size_t i) {
        results[i] = sample_gradients(model, train_set.samples[order[begin + i]], train_set.kind,
                                      weight);
      });
      ParamGrads total(model.parameters().size());
      for (std::size_t i = 0; i < count; ++i) {
        loss_sum += results[i].loss;
        for (std::size_t k = 0; k < total.size(); ++k) {
          const auto& g = results[i].grads[k];
          if (!g) continue;
          if (!total[k]) {
            total[k] = *g;
          } else {
            for (std::size_t j = 0; j < g->size(); ++j) (*total[k])[j] += (*g)[j];
          }
        }
      }
      for (std::size_t k = 0; k < total.size(); ++k) {
        if (mask[k] && !total[k]) total[k] = Tensor(model.parameters()[static_cast<ParamId>(k)].value.shape());
      }
      adam_step(model.parameters(), total, state, mask);
    }
    const double metric = evaluate(model, eval_set, opts.threads);
    const double seconds =
        opts.record_timing
            ? std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()
            : 0.0;
    history.epochs.push_back(
        {epoch + 1, loss_sum / static_cast<double>(n), metric, seconds, trainable});
  }
  return history;
}

}  // namespace aat
