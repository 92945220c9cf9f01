#pragma once

// Config-driven experiment runner behind the command line tool.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aat/config.hpp"
#include "aat/csv.hpp"
#include "aat/data.hpp"
#include "aat/errors.hpp"
#include "aat/model.hpp"
#include "aat/peft.hpp"
#include "aat/training.hpp"

namespace aat {

struct ExperimentConfig {
  ModelConfig model = presets::tiny();
  SyntheticTaskSpec task;  // grid follows the model's input_time/input_freq
  std::size_t n_train = 64;
  std::size_t n_test = 32;
  std::vector<Strategy> strategies;
  std::size_t epochs = 15;
  double lr = 1e-3;
  std::size_t batch_size = 8;
  std::vector<std::uint64_t> seeds;
  std::uint64_t backbone_seed = 0;
  std::filesystem::path output_dir = "aat-output";
  std::size_t threads = 1;
  bool record_timing = true;
  PeftOptions peft;

  SyntheticTaskSpec task_spec() const {
    SyntheticTaskSpec t = task;
    t.num_classes = model.num_classes;
    t.time = model.input_time;
    t.freq = model.input_freq;
    return t;
  }

  void validate() const {
    try {
      model.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("model: ") + e.what());
    }
    if (strategies.empty()) throw ConfigError("field 'strategies': at least one strategy needed");
    if (seeds.empty()) throw ConfigError("field 'seeds': at least one seed needed");
    if (batch_size == 0) throw ConfigError("field 'batch_size': must be positive");
    if (n_train == 0) throw ConfigError("field 'n_train': must be positive");
    if (n_test == 0) throw ConfigError("field 'n_test': must be positive");
    if (!(lr > 0)) throw ConfigError("field 'lr': must be positive");
    if (!(task.pattern_energy > 0)) throw ConfigError("field 'pattern_energy': must be positive");
    if (task.noise_sigma < 0) throw ConfigError("field 'noise_sigma': must be non-negative");
    for (std::size_t t : task.length_profile) {
      if (t == 0 || t % model.patch_size != 0) {
        throw ConfigError("field 'length_profile': " + std::to_string(t) +
                          " is not a positive multiple of patch_size");
      }
    }
    for (Strategy s : strategies) {
      try {
        model_config_for(model, s);
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("field 'strategies': ") + e.what());
      }
    }
  }
};

namespace detail {

using Json = nlohmann::json;

template <typename T>
T json_get(const Json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("field '" + key + "': wrong type (" + v.dump() + ")");
  }
}

inline std::size_t json_size(const Json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("field '" + key + "': expected a non-negative integer, got " + v.dump());
  }
  return v.get<std::size_t>();
}

}  // namespace detail

/// Parses a flat JSON experiment description. "preset" (tiny, tiny-plus,
/// ast-base) seeds the model fields; any other key overrides one field.
/// Unknown keys are rejected.
inline ExperimentConfig parse_experiment_config(const std::string& text) {
  using detail::Json;
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");

  ExperimentConfig cfg;
  if (auto it = doc.find("preset"); it != doc.end()) {
    cfg.model = presets::by_name(detail::json_get<std::string>(*it, "preset"));
  }
  using Setter = std::function<void(const Json&, const std::string&)>;
  auto size_field = [](std::size_t& dst) -> Setter {
    return [&dst](const Json& v, const std::string& k) { dst = detail::json_size(v, k); };
  };
  auto double_field = [](double& dst) -> Setter {
    return [&dst](const Json& v, const std::string& k) {
      if (!v.is_number()) throw ConfigError("field '" + k + "': expected a number");
      dst = v.get<double>();
    };
  };
  ModelConfig& m = cfg.model;
  const std::map<std::string, Setter> setters{
      {"preset", [](const Json&, const std::string&) {}},
      {"depth", size_field(m.depth)},
      {"embed_dim", size_field(m.embed_dim)},
      {"num_heads", size_field(m.num_heads)},
      {"mlp_ratio", size_field(m.mlp_ratio)},
      {"patch_size", size_field(m.patch_size)},
      {"input_time", size_field(m.input_time)},
      {"input_freq", size_field(m.input_freq)},
      {"num_classes", size_field(m.num_classes)},
      {"adapter_dim", size_field(m.adapter_dim)},
      {"prompt_length", size_field(m.prompt_length)},
      {"layernorm_eps", double_field(m.layernorm_eps)},
      {"tune_block_layernorms",
       [&](const Json& v, const std::string& k) {
         cfg.peft.tune_block_layernorms = detail::json_get<bool>(v, k);
       }},
      {"task_kind",
       [&](const Json& v, const std::string& k) {
         try {
           cfg.task.kind = parse_task_kind(detail::json_get<std::string>(v, k));
         } catch (const ConfigError& e) {
           throw ConfigError("field 'task_kind': " + std::string(e.what()));
         }
       }},
      {"pattern_energy", double_field(cfg.task.pattern_energy)},
      {"noise_sigma", double_field(cfg.task.noise_sigma)},
      {"length_profile",
       [&](const Json& v, const std::string& k) {
         if (!v.is_array()) throw ConfigError("field '" + k + "': expected an array");
         cfg.task.length_profile.clear();
         for (const Json& e : v) cfg.task.length_profile.push_back(detail::json_size(e, k));
       }},
      {"task_seed",
       [&](const Json& v, const std::string& k) { cfg.task.seed = detail::json_size(v, k); }},
      {"lattice", size_field(cfg.task.lattice)},
      {"n_train", size_field(cfg.n_train)},
      {"n_test", size_field(cfg.n_test)},
      {"strategies",
       [&](const Json& v, const std::string& k) {
         if (!v.is_array()) throw ConfigError("field '" + k + "': expected an array");
         cfg.strategies.clear();
         for (const Json& e : v) {
           try {
             cfg.strategies.push_back(parse_strategy(detail::json_get<std::string>(e, k)));
           } catch (const ConfigError& err) {
             throw ConfigError("field 'strategies': " + std::string(err.what()));
           }
         }
       }},
      {"epochs", size_field(cfg.epochs)},
      {"lr", double_field(cfg.lr)},
      {"batch_size", size_field(cfg.batch_size)},
      {"seeds",
       [&](const Json& v, const std::string& k) {
         if (!v.is_array()) throw ConfigError("field '" + k + "': expected an array");
         cfg.seeds.clear();
         for (const Json& e : v) cfg.seeds.push_back(detail::json_size(e, k));
       }},
      {"backbone_seed",
       [&](const Json& v, const std::string& k) { cfg.backbone_seed = detail::json_size(v, k); }},
      {"output_dir",
       [&](const Json& v, const std::string& k) {
         cfg.output_dir = detail::json_get<std::string>(v, k);
       }},
      {"threads", size_field(cfg.threads)},
      {"record_timing",
       [&](const Json& v, const std::string& k) { cfg.record_timing = detail::json_get<bool>(v, k); }},
  };
  for (const auto& [key, value] : doc.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown key '" + key + "'");
    it->second(value, key);
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return parse_experiment_config(read_text(path));
}

/// Per-run seeds: the backbone is shared, everything trained is per seed.
inline ModelSeeds run_seeds(std::uint64_t backbone, std::uint64_t seed) {
  return {backbone, derive_seed(seed, "adapters"), derive_seed(seed, "prompts"),
          derive_seed(seed, "head")};
}

struct SummaryRow {
  Strategy strategy = Strategy::Full;
  ParamReport params;
  std::vector<double> metrics;  // one per seed
  std::size_t failures = 0;

  double mean() const {
    if (metrics.empty()) return 0.0;
    double s = 0.0;
    for (double m : metrics) s += m;
    return s / static_cast<double>(metrics.size());
  }

  /// Sample standard deviation; 0 for a single run.
  double sd() const {
    if (metrics.size() < 2) return 0.0;
    const double mu = mean();
    double s = 0.0;
    for (double m : metrics) s += (m - mu) * (m - mu);
    return std::sqrt(s / static_cast<double>(metrics.size() - 1));
  }
};

struct ExperimentResult {
  std::vector<SummaryRow> rows;
  std::string metric_name;
  bool ok = true;
};

inline constexpr std::string_view kSummaryHeader =
    "strategy,tuning_params,total_params,percentage,metric,metric_mean,metric_sd,runs";

inline std::string summary_csv(const ExperimentResult& r) {
  std::ostringstream os;
  os << kSummaryHeader << '\n';
  for (const SummaryRow& row : r.rows) {
    os << to_csv_row(row.params) << ',' << r.metric_name << ',' << format_double(row.mean())
       << ',' << format_double(row.sd()) << ',' << row.metrics.size() << '\n';
  }
  return os.str();
}

inline std::string summary_text(const ExperimentResult& r) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-8s %14s %14s %9s  %s (mean +- sd, runs)\n", "strategy",
                "tuning", "total", "percent", r.metric_name.c_str());
  os << line;
  for (const SummaryRow& row : r.rows) {
    std::snprintf(line, sizeof line, "%-8s %14zu %14zu %8.3f%%  %.4f +- %.4f (%zu)\n",
                  std::string(to_string(row.strategy)).c_str(), row.params.tuning,
                  row.params.total, row.params.percentage(), row.mean(), row.sd(),
                  row.metrics.size());
    os << line;
  }
  return os.str();
}

inline std::string tradeoff_csv(const ExperimentResult& r) {
  std::ostringstream os;
  os << "strategy,tuning_params,metric_mean\n";
  for (const SummaryRow& row : r.rows) {
    os << to_string(row.strategy) << ',' << row.params.tuning << ','
       << format_double(row.mean()) << '\n';
  }
  return os.str();
}

inline std::filesystem::path history_path(const std::filesystem::path& dir, Strategy s,
                                          std::uint64_t seed) {
  return dir / ("history_" + std::string(to_string(s)) + "_seed" + std::to_string(seed) + ".csv");
}

/// Trains every (strategy, seed) pair on one shared synthetic task and
/// backbone, writing per-run histories plus summary tables to output_dir.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  std::filesystem::create_directories(cfg.output_dir);
  const auto [train_set, test_set] = generate_dataset(cfg.task_spec(), cfg.n_train, cfg.n_test);

  ExperimentResult result;
  result.metric_name = cfg.task.kind == TaskKind::SingleLabel ? "accuracy" : "mAP";
  for (Strategy s : cfg.strategies) {
    SummaryRow row;
    row.strategy = s;
    row.params = strategy_report(cfg.model, s, cfg.peft);
    for (std::uint64_t seed : cfg.seeds) {
      try {
        Model model(model_config_for(cfg.model, s), run_seeds(cfg.backbone_seed, seed));
        TrainOptions opts;
        opts.epochs = cfg.epochs;
        opts.lr = cfg.lr;
        opts.batch_size = cfg.batch_size;
        opts.seed = seed;
        opts.threads = cfg.threads;
        opts.record_timing = cfg.record_timing;
        opts.peft = cfg.peft;
        const TrainHistory history = train(model, s, train_set, test_set, opts);
        write_text(history_path(cfg.output_dir, s, seed), to_csv(history));
        const double metric = history.epochs.empty() ? evaluate(model, test_set, cfg.threads)
                                                     : history.epochs.back().eval_metric;
        row.metrics.push_back(metric);
        log << to_string(s) << " seed " << seed << ": " << result.metric_name << " "
            << format_double(metric) << '\n';
      } catch (const std::exception& e) {
        ++row.failures;
        result.ok = false;
        log << to_string(s) << " seed " << seed << " failed: " << e.what() << '\n';
      }
    }
    result.rows.push_back(std::move(row));
  }
  write_text(cfg.output_dir / "summary.csv", summary_csv(result));
  write_text(cfg.output_dir / "summary.txt", summary_text(result));
  write_text(cfg.output_dir / "tradeoff.csv", tradeoff_csv(result));
  return result;
}

/// Largest |logit difference| between the vanilla and aat-ms forms of one
/// backbone over `inputs` random spectrograms. With `adapter_steps` > 0 the
/// adapters first take that many Adam steps on random labels.
inline double identity_gap(const ModelConfig& base, std::uint64_t backbone_seed,
                           std::size_t inputs = 16, std::size_t adapter_steps = 0) {
  ModelConfig vcfg = base;
  vcfg.variant = Variant::Vanilla;
  vcfg.prompt_length = 0;
  ModelConfig acfg = vcfg;
  acfg.variant = Variant::AatMS;
  const ModelSeeds seeds = run_seeds(backbone_seed, 0);
  const Model vanilla(vcfg, seeds);
  Model adapted(acfg, seeds);

  Rng rng(derive_seed(backbone_seed, "identity-inputs"));
  Dataset inputs_set{TaskKind::SingleLabel, base.num_classes, {}};
  for (std::size_t i = 0; i < inputs; ++i) {
    SpectrogramSample s;
    s.spectrogram = Tensor({base.input_time, base.input_freq});
    fill_normal(s.spectrogram, rng, 1.0);
    s.label = i % base.num_classes;
    inputs_set.samples.push_back(std::move(s));
  }

  if (adapter_steps > 0) {
    TrainOptions opts;
    opts.epochs = adapter_steps;
    opts.batch_size = inputs;
    opts.record_timing = false;
    train(adapted, Strategy::AatMS, inputs_set, inputs_set, opts);
  }

  double gap = 0.0;
  for (const auto& s : inputs_set.samples) {
    gap = std::max(gap, max_abs_diff(predict(vanilla, s.spectrogram),
                                     predict(adapted, s.spectrogram)));
  }
  return gap;
}

}  // namespace aat
