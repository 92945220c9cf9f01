#pragma once

// Fine-tuning strategies as trainable-parameter masks, and parameter
// accounting.

#include <array>
#include <cstddef>
#include <cstdio>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "aat/config.hpp"
#include "aat/errors.hpp"
#include "aat/model.hpp"
#include "aat/parameters.hpp"

namespace aat {

enum class Strategy { Full, Head, Partial, Prompt, AatM, AatMS, Joint };

inline constexpr std::array<Strategy, 7> kAllStrategies{
    Strategy::Full, Strategy::Head,  Strategy::Partial, Strategy::Prompt,
    Strategy::AatM, Strategy::AatMS, Strategy::Joint};

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::Full: return "Full";
    case Strategy::Head: return "Head";
    case Strategy::Partial: return "Partial";
    case Strategy::Prompt: return "Prompt";
    case Strategy::AatM: return "AatM";
    case Strategy::AatMS: return "AatMS";
    case Strategy::Joint: return "Joint";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view name) {
  for (Strategy s : kAllStrategies)
    if (to_string(s) == name) return s;
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

inline bool uses_prompts(Strategy s) { return s == Strategy::Prompt || s == Strategy::Joint; }

inline Variant required_variant(Strategy s) {
  switch (s) {
    case Strategy::AatM: return Variant::AatM;
    case Strategy::AatMS:
    case Strategy::Joint: return Variant::AatMS;
    default: return Variant::Vanilla;
  }
}

struct PeftOptions {
  /// Also train the LayerNorm affine parameters inside frozen blocks under
  /// Prompt/AatM/AatMS/Joint. Off: the backbone stays entirely frozen.
  bool tune_block_layernorms = false;
};

/// The model a strategy runs on: adapters and prompt bank exist only when the
/// strategy trains them.
inline ModelConfig model_config_for(const ModelConfig& base, Strategy s) {
  ModelConfig cfg = base;
  cfg.variant = required_variant(s);
  if (uses_prompts(s)) {
    if (base.prompt_length == 0) {
      throw ConfigError(std::string(to_string(s)) + " tuning needs prompt_length > 0");
    }
  } else {
    cfg.prompt_length = 0;
  }
  if (has_mlp_adapter(cfg.variant) && base.adapter_dim == 0) {
    throw ConfigError(std::string(to_string(s)) + " tuning needs adapter_dim > 0");
  }
  cfg.validate();
  return cfg;
}

inline void check_consistent(const ModelConfig& cfg, Strategy s) {
  if (uses_prompts(s) && cfg.prompt_length == 0) {
    throw ConfigError(std::string(to_string(s)) + " tuning needs a model with prompt tokens");
  }
  if ((s == Strategy::AatM && !has_mlp_adapter(cfg.variant)) ||
      ((s == Strategy::AatMS || s == Strategy::Joint) && !has_spatial_adapter(cfg.variant))) {
    throw ConfigError(std::string(to_string(s)) + " tuning needs a model of a variant with "
                      "the matching adapters, got " + std::string(to_string(cfg.variant)));
  }
}

inline bool is_trainable(const ParamSpec& p, Strategy s, std::size_t depth,
                         const PeftOptions& opts) {
  const bool head = p.group == ParamGroup::Head;
  const bool ln = opts.tune_block_layernorms && p.group == ParamGroup::Block && p.layernorm;
  switch (s) {
    case Strategy::Full: return true;
    case Strategy::Head: return head;
    case Strategy::Partial: {
      const std::size_t first = depth / 2;  // later ceil(L/2) blocks
      return head || (p.group == ParamGroup::Block && static_cast<std::size_t>(p.layer) >= first);
    }
    case Strategy::Prompt: return head || ln || p.group == ParamGroup::Prompt;
    case Strategy::AatM: return head || ln || p.group == ParamGroup::MlpAdapter;
    case Strategy::AatMS:
      return head || ln || p.group == ParamGroup::MlpAdapter ||
             p.group == ParamGroup::SpatialAdapter;
    case Strategy::Joint:
      return head || ln || p.group == ParamGroup::MlpAdapter ||
             p.group == ParamGroup::SpatialAdapter || p.group == ParamGroup::Prompt;
  }
  return false;
}

/// Names of the parameters `s` trains on a model described by `cfg`.
inline std::set<std::string> trainable_mask(const ModelConfig& cfg, Strategy s,
                                            const PeftOptions& opts = {}) {
  check_consistent(cfg, s);
  std::set<std::string> mask;
  for (const ParamSpec& p : parameter_layout(cfg))
    if (is_trainable(p, s, cfg.depth, opts)) mask.insert(p.name);
  return mask;
}

inline std::set<std::string> trainable_mask(const Model& model, Strategy s,
                                            const PeftOptions& opts = {}) {
  return trainable_mask(model.config(), s, opts);
}

/// Marks exactly the masked parameters as requiring gradients.
inline void apply_freeze(Model& model, const std::set<std::string>& mask) {
  ParameterStore& params = model.parameters();
  for (const std::string& name : mask) {
    if (!params.contains(name)) throw ConfigError("mask names unknown parameter '" + name + "'");
  }
  for (Parameter& p : params) p.requires_grad = mask.contains(p.spec.name);
}

struct ParamReport {
  Strategy strategy = Strategy::Full;
  std::size_t tuning = 0;
  std::size_t total = 0;

  double percentage() const {
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(tuning) / static_cast<double>(total);
  }
};

/// Counts on the model that `cfg` describes: tuning = masked parameters;
/// total = backbone + whatever adapters/prompts the model carries + head.
inline ParamReport count_params(const ModelConfig& cfg, Strategy s, const PeftOptions& opts = {}) {
  check_consistent(cfg, s);
  ParamReport r{s, 0, 0};
  for (const ParamSpec& p : parameter_layout(cfg)) {
    r.total += p.size();
    if (is_trainable(p, s, cfg.depth, opts)) r.tuning += p.size();
  }
  return r;
}

/// Builds the strategy's model description from `base`, then counts.
inline ParamReport strategy_report(const ModelConfig& base, Strategy s,
                                   const PeftOptions& opts = {}) {
  return count_params(model_config_for(base, s), s, opts);
}

inline constexpr std::string_view kParamReportHeader =
    "strategy,tuning_params,total_params,percentage";

inline std::string to_csv_row(const ParamReport& r) {
  char pct[64];
  std::snprintf(pct, sizeof pct, "%.6f", r.percentage());
  std::ostringstream os;
  os << to_string(r.strategy) << ',' << r.tuning << ',' << r.total << ',' << pct;
  return os.str();
}

}  // namespace aat
