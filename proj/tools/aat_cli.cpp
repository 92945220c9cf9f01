#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aat/experiment.hpp"
#include "aat/gradcheck.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

aat::ExperimentConfig load_config(const std::string& path) {
  aat::ExperimentConfig cfg = aat::load_experiment_config(path);
  if (const char* dir = std::getenv("AAT_OUTPUT_DIR"); dir && *dir) cfg.output_dir = dir;
  return cfg;
}

int cmd_run(const std::string& path) {
  const aat::ExperimentConfig cfg = load_config(path);
  const aat::ExperimentResult r = aat::run_experiment(cfg, std::cerr);
  std::cout << aat::summary_text(r);
  std::cout << "wrote " << cfg.output_dir.string() << "/summary.csv\n";
  return r.ok ? kOk : kFailed;
}

int cmd_count(const std::string& path, const std::string& preset) {
  aat::ModelConfig model;
  aat::PeftOptions peft;
  std::vector<aat::Strategy> strategies;
  if (!preset.empty()) {
    model = aat::presets::by_name(preset);
    strategies.assign(aat::kAllStrategies.begin(), aat::kAllStrategies.end());
  } else {
    const aat::ExperimentConfig cfg = load_config(path);
    model = cfg.model;
    peft = cfg.peft;
    strategies = cfg.strategies;
  }
  std::cout << aat::kParamReportHeader << '\n';
  for (aat::Strategy s : strategies)
    std::cout << aat::to_csv_row(aat::strategy_report(model, s, peft)) << '\n';
  if (preset == "ast-base") {
    std::cout << "# Prompt: p=12 prompt tokens in each of the 12 layers; the published 0.128M is"
                 " not reproduced by this count\n";
  }
  return kOk;
}

aat::ModelConfig parse_dims(const std::string& text) {
  std::vector<std::size_t> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long n = std::stoll(item, &used);
      if (used != item.size() || n < 0) throw std::invalid_argument(item);
      v.push_back(static_cast<std::size_t>(n));
    } catch (const std::exception&) {
      throw aat::ConfigError("--dims: '" + item + "' is not a non-negative integer");
    }
  }
  if (v.size() != 9) throw aat::ConfigError("--dims expects 9 values L,d,h,r,P,T,F,C,dhat");
  aat::ModelConfig cfg = aat::presets::tiny();
  cfg.depth = v[0];
  cfg.embed_dim = v[1];
  cfg.num_heads = v[2];
  cfg.mlp_ratio = v[3];
  cfg.patch_size = v[4];
  cfg.input_time = v[5];
  cfg.input_freq = v[6];
  cfg.num_classes = v[7];
  cfg.adapter_dim = v[8];
  cfg.prompt_length = 0;
  cfg.variant = aat::Variant::AatMS;
  cfg.validate();
  return cfg;
}

int cmd_gradcheck(const std::string& dims, const std::string& fault) {
  aat::ModelConfig cfg = aat::presets::tiny();
  cfg.variant = aat::Variant::AatMS;
  cfg.prompt_length = 0;
  if (!dims.empty()) cfg = parse_dims(dims);
  aat::GradcheckOptions opts;
  opts.fault_op = fault;
  const std::size_t count = aat::parameter_count(cfg);
  if (count > opts.max_params) {
    std::cerr << "error: model has " << count << " parameters; gradcheck allows at most "
              << opts.max_params << '\n';
    return kUsage;
  }
  const aat::GradcheckResult r = aat::gradcheck_model(aat::Model(cfg, {}), opts);
  std::cout << "checked " << r.checked << " gradients, max relative error "
            << aat::format_double(r.max_relative_error) << '\n';
  if (r.max_relative_error < 1e-4) return kOk;
  std::cout << "worst parameter: " << r.worst_parameter << '[' << r.worst_index << "]\n";
  return kFailed;
}

int cmd_identity(const std::string& path) {
  const aat::ExperimentConfig cfg = load_config(path);
  const double gap = aat::identity_gap(cfg.model, cfg.backbone_seed);
  std::cout << "max abs logit difference (vanilla vs aat-ms, 16 inputs, no prompts): "
            << aat::format_double(gap) << '\n';
  return gap < 1e-10 ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adapter tuning for audio transformers: training runs and parameter accounting"};
  app.require_subcommand(1);

  std::string run_path;
  auto* run = app.add_subcommand("run", "train every configured strategy and seed");
  run->add_option("config", run_path, "experiment JSON")->required();

  std::string count_path, preset;
  auto* count = app.add_subcommand("count", "print tuning/total parameter counts per strategy");
  auto* count_cfg = count->add_option("config", count_path, "experiment JSON");
  auto* count_preset =
      count->add_option("--preset", preset, "tiny, tiny-plus or ast-base (all strategies)");
  count_cfg->excludes(count_preset);

  std::string dims, fault;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of an aat-ms model");
  gradcheck->add_option("--dims", dims, "L,d,h,r,P,T,F,C,dhat");
  gradcheck->add_option("--break-op", fault, "scale the backward rule of this op (self-test)");

  std::string identity_path;
  auto* identity = app.add_subcommand("identity", "compare vanilla and aat-ms logits at init");
  identity->add_option("config", identity_path, "experiment JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*run) return cmd_run(run_path);
    if (*count) {
      if (count_path.empty() && preset.empty()) {
        std::cerr << "error: count needs a config file or --preset\n";
        return kUsage;
      }
      return cmd_count(count_path, preset);
    }
    if (*gradcheck) return cmd_gradcheck(dims, fault);
    if (*identity) return cmd_identity(identity_path);
  } catch (const aat::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailed;
  }
  return kUsage;
}
