#include <gtest/gtest.h>

#include <cmath>

#include "aat/training.hpp"
#include "oracles.hpp"

using namespace aat;
using oracle::random_tensor;

namespace {

long double log_sum_exp(const Tensor& z, std::size_t row, std::size_t c) {
  long double s = 0;
  for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<long double>(z.at(row, j)));
  return std::log(s);
}

double ce_loss(const Tensor& z, const std::vector<std::size_t>& labels) {
  Tape t;
  return cross_entropy(t.constant(z), labels).value().item();
}

double bce_loss(const Tensor& z, const Tensor& targets) {
  Tape t;
  return bce_multilabel(t.constant(z), targets).value().item();
}

SyntheticTaskSpec small_task() {
  SyntheticTaskSpec s;
  s.num_classes = 3;
  s.time = s.freq = 8;
  return s;
}

}  // namespace

TEST(CrossEntropy, UniformLogits) {
  EXPECT_NEAR(ce_loss(Tensor({2, 4}), {0, 3}), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, SaturatesToZero) {
  EXPECT_LT(ce_loss(Tensor::matrix({{0, 800, 0}}), {1}), 1e-300);
}

TEST(CrossEntropy, MatchesScalarEvaluation) {
  const Tensor z = random_tensor({3, 5}, 1, 3.0);
  const std::vector<std::size_t> labels{4, 0, 2};
  long double expected = 0;
  for (std::size_t b = 0; b < 3; ++b) expected += log_sum_exp(z, b, 5) - z.at(b, labels[b]);
  expected /= 3;
  EXPECT_NEAR(ce_loss(z, labels), static_cast<double>(expected), 1e-14);
  const double err = oracle::fd_max_error(
      [&](std::vector<Var>& v) { return cross_entropy(v[0], labels); }, {z});
  EXPECT_LT(err, 1e-6);
}

TEST(CrossEntropy, LabelOutOfRangeThrows) {
  EXPECT_THROW(ce_loss(Tensor({2, 3}), {0, 3}), ContractError);
}

TEST(Bce, KnownValues) {
  EXPECT_NEAR(bce_loss(Tensor::matrix({{0}}), Tensor::matrix({{1}})), std::log(2.0), 1e-15);
  const double sat = bce_loss(Tensor::matrix({{40}}), Tensor::matrix({{1}}));
  EXPECT_GE(sat, 0.0);
  EXPECT_LT(sat, 1e-15);
  EXPECT_NEAR(bce_loss(Tensor::matrix({{-800}}), Tensor::matrix({{1}})), 800.0, 1e-12);
}

TEST(Bce, MatchesDirectEvaluation) {
  const Tensor z = random_tensor({2, 3}, 2, 4.0);
  const Tensor t = Tensor::matrix({{1, 0, 1}, {0, 0, 1}});
  long double expected = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    const long double p = 1.0L / (1.0L + std::exp(-static_cast<long double>(z[i])));
    expected -= t[i] * std::log(p) + (1 - t[i]) * std::log(1 - p);
  }
  expected /= 6;
  EXPECT_NEAR(bce_loss(z, t), static_cast<double>(expected), 1e-14);
  const double err =
      oracle::fd_max_error([&](std::vector<Var>& v) { return bce_multilabel(v[0], t); }, {z});
  EXPECT_LT(err, 1e-6);
}

TEST(Adam, ZeroGradientsLeaveParameters) {
  Model m(presets::tiny(), {});
  const Model before = m;
  ParamGrads grads;
  for (const Parameter& p : m.parameters()) grads.emplace_back(Tensor(p.value.shape()));
  OptimizerState state;
  adam_step(m.parameters(), grads, state, ParamMask(m.parameters().size(), true));
  for (const Parameter& p : m.parameters())
    EXPECT_EQ(p.value, before.parameters().at(p.spec.name).value);
}

TEST(Adam, FirstStepHandComputed) {
  // m = 0.1, v = 0.001; bias corrections 0.1 and 0.001 give m_hat = v_hat = 1,
  // so the step is lr * 1 / (1 + eps).
  ParameterStore params;
  params.add({"w", {1}, ParamGroup::Head}, Tensor::vector({2.0}));
  ParamGrads grads{Tensor::vector({1.0})};
  OptimizerState state;
  state.config.lr = 0.1;
  adam_step(params, grads, state, {true});
  EXPECT_NEAR(params[0].value[0], 2.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, UnmaskedParameterUntouchedAndUnallocated) {
  ParameterStore params;
  params.add({"a", {2}, ParamGroup::Head}, Tensor::vector({1, 2}));
  params.add({"b", {2}, ParamGroup::Block}, Tensor::vector({3, 4}));
  ParamGrads grads{Tensor::vector({0.5, 0.5}), Tensor::vector({7, 7})};
  OptimizerState state;
  adam_step(params, grads, state, {true, false});
  EXPECT_EQ(params[1].value, Tensor::vector({3, 4}));
  EXPECT_NE(params[0].value, Tensor::vector({1, 2}));
  EXPECT_TRUE(state.m[0].has_value());
  EXPECT_FALSE(state.m[1].has_value());
  EXPECT_FALSE(state.v[1].has_value());
}

TEST(Adam, ShapeMismatchThrows) {
  ParameterStore params;
  params.add({"a", {2}, ParamGroup::Head}, Tensor::vector({1, 2}));
  ParamGrads grads{Tensor::vector({1, 2, 3})};
  OptimizerState state;
  EXPECT_THROW(adam_step(params, grads, state, {true}), ContractError);
  ParamGrads missing(1);
  EXPECT_THROW(adam_step(params, missing, state, {true}), ContractError);
}

TEST(Accuracy, Examples) {
  const Tensor z = Tensor::matrix({{1, 1, 0}, {0, 2, 2}, {3, 0, 0}, {0, 0, 1}});
  EXPECT_EQ(accuracy(z, std::vector<std::size_t>{0, 2, 0, 1}), 0.5);
  EXPECT_EQ(accuracy(z, std::vector<std::size_t>{0, 1, 0, 2}), 1.0);
  EXPECT_EQ(accuracy(z, std::vector<std::size_t>{2, 0, 1, 0}), 0.0);
}

TEST(MeanAveragePrecision, Examples) {
  EXPECT_NEAR(mean_average_precision(Tensor::matrix({{0.9}, {0.5}, {0.2}}), {{1}, {0}, {1}}),
              5.0 / 6.0, 1e-15);
  const Tensor perfect = Tensor::matrix({{0.9, 0.1}, {0.2, 0.8}, {0.7, 0.3}});
  EXPECT_EQ(mean_average_precision(perfect, {{1, 0}, {0, 1}, {1, 0}}), 1.0);
  const Tensor random = random_tensor({6, 3}, 3);
  EXPECT_EQ(mean_average_precision(random, std::vector<std::vector<int>>(6, {1, 1, 1})), 1.0);
}

TEST(MeanAveragePrecision, SkipsClassesWithoutPositives) {
  const Tensor z = Tensor::matrix({{0.9, 0.3}, {0.5, 0.2}, {0.2, 0.1}});
  EXPECT_NEAR(mean_average_precision(z, {{1, 0}, {0, 0}, {1, 0}}), 5.0 / 6.0, 1e-15);
  EXPECT_THROW(mean_average_precision(z, {{0, 0}, {0, 0}, {0, 0}}), ContractError);
}

TEST(Metrics, StayInUnitInterval) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor z = random_tensor({10, 4}, 100 + s);
    Rng rng(s);
    std::vector<std::size_t> labels;
    std::vector<std::vector<int>> targets;
    for (int i = 0; i < 10; ++i) {
      labels.push_back(rng() % 4);
      std::vector<int> row;
      for (int j = 0; j < 4; ++j) row.push_back(static_cast<int>(rng() % 2));
      row[0] = 1;
      targets.push_back(row);
    }
    const double a = accuracy(z, labels), m = mean_average_precision(z, targets);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, 1.0);
  }
}

TEST(Train, ZeroEpochs) {
  const auto [tr, te] = generate_dataset(small_task(), 12, 6);
  Model m(model_config_for(presets::tiny(), Strategy::AatMS), {});
  const Model before = m;
  TrainOptions opts;
  opts.epochs = 0;
  EXPECT_TRUE(train(m, Strategy::AatMS, tr, te, opts).epochs.empty());
  for (const Parameter& p : m.parameters())
    EXPECT_EQ(p.value, before.parameters().at(p.spec.name).value);
}

TEST(Train, DeterministicAndThreadIndependent) {
  const auto [tr, te] = generate_dataset(small_task(), 20, 8);
  TrainOptions opts;
  opts.epochs = 3;
  opts.batch_size = 6;
  opts.seed = 11;
  opts.record_timing = false;
  auto run = [&](std::size_t threads) {
    Model m(model_config_for(presets::tiny(), Strategy::Joint), {});
    TrainOptions o = opts;
    o.threads = threads;
    const TrainHistory h = train(m, Strategy::Joint, tr, te, o);
    return std::make_pair(h, m);
  };
  const auto [h1, m1] = run(1);
  const auto [h2, m2] = run(1);
  const auto [h3, m3] = run(3);
  EXPECT_EQ(to_csv(h1), to_csv(h2));
  EXPECT_EQ(to_csv(h1), to_csv(h3));
  ASSERT_EQ(h1.epochs.size(), 3u);
  for (const Parameter& p : m1.parameters()) {
    EXPECT_EQ(p.value, m2.parameters().at(p.spec.name).value);
    EXPECT_EQ(p.value, m3.parameters().at(p.spec.name).value);
  }
}

TEST(Train, HeadLeavesBackboneBitwise) {
  const auto [tr, te] = generate_dataset(small_task(), 50, 6);
  Model m(presets::tiny(), {});
  const Model before = m;
  TrainOptions opts;
  opts.epochs = 1;
  opts.batch_size = 1;
  const TrainHistory h = train(m, Strategy::Head, tr, te, opts);
  EXPECT_EQ(h.epochs.front().trainable_params, strategy_report(presets::tiny(), Strategy::Head).tuning);
  for (const Parameter& p : m.parameters()) {
    const Tensor& old = before.parameters().at(p.spec.name).value;
    if (p.spec.group == ParamGroup::Head) {
      EXPECT_NE(p.value, old) << p.spec.name;
    } else {
      EXPECT_EQ(p.value, old) << p.spec.name;
    }
  }
}

TEST(Train, LossDecreasesForEveryStrategy) {
  const auto [tr, te] = generate_dataset(small_task(), 48, 12);
  for (Strategy s : kAllStrategies) {
    Model m(model_config_for(presets::tiny(), s), {});
    TrainOptions opts;
    opts.epochs = 10;
    opts.record_timing = false;
    const TrainHistory h = train(m, s, tr, te, opts);
    ASSERT_EQ(h.epochs.size(), 10u);
    EXPECT_LT(h.epochs.back().train_loss, h.epochs.front().train_loss) << to_string(s);
    for (const EpochRecord& r : h.epochs) {
      EXPECT_EQ(r.trainable_params, h.epochs.front().trainable_params);
      EXPECT_GE(r.eval_metric, 0.0);
      EXPECT_LE(r.eval_metric, 1.0);
    }
  }
}

TEST(Train, MultiLabelUsesMap) {
  SyntheticTaskSpec spec = small_task();
  spec.kind = TaskKind::MultiLabel;
  const auto [tr, te] = generate_dataset(spec, 24, 12);
  Model m(model_config_for(presets::tiny(), Strategy::AatM), {});
  TrainOptions opts;
  opts.epochs = 2;
  const TrainHistory h = train(m, Strategy::AatM, tr, te, opts);
  std::vector<std::vector<int>> targets;
  for (const auto& s : te.samples) targets.push_back(s.targets);
  Tensor scores({te.size(), 3});
  for (std::size_t i = 0; i < te.size(); ++i) {
    const Tensor z = predict(m, te.samples[i].spectrogram);
    for (std::size_t j = 0; j < 3; ++j) scores.at(i, j) = z[j];
  }
  EXPECT_EQ(h.epochs.back().eval_metric, mean_average_precision(scores, targets));
}

TEST(History, CsvRoundTrip) {
  TrainHistory h;
  h.epochs.push_back({1, 1.0 / 3.0, 0.25, 0.125, 42});
  h.epochs.push_back({2, 0.1 + 0.2, 1.0, 1e-17, 42});
  const std::string csv = to_csv(h);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kHistoryHeader);
  EXPECT_EQ(csv.find('\r'), std::string::npos);
  EXPECT_EQ(parse_history_csv(csv), h);
}
