#include <gtest/gtest.h>

#include "aat/adapters.hpp"
#include "aat/model.hpp"
#include "oracles.hpp"

using namespace aat;
using oracle::random_tensor;

TEST(Adapter, FreshWithoutShortcutIsZero) {
  const Adapter a = init_adapter(8, 3, false, 1);
  const Tensor y = adapter_forward(random_tensor({5, 8}, 2, 4.0), a);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Adapter, FreshWithShortcutIsIdentity) {
  const Adapter a = init_adapter(8, 3, true, 3);
  const Tensor x = random_tensor({5, 8}, 4, 4.0);
  EXPECT_EQ(adapter_forward(x, a), x);
}

TEST(Adapter, HandComputedOnes) {
  Adapter a{Tensor({2, 1}, 1.0), Tensor({1}), Tensor({1, 2}, 1.0), Tensor({2}), false};
  const Tensor y = adapter_forward(Tensor::matrix({{1, 1}}), a);
  const double g2 = 2.0 * oracle::normal_cdf(2.0);
  EXPECT_NEAR(y[0], g2, 1e-12);
  EXPECT_NEAR(y[1], g2, 1e-12);
}

TEST(Adapter, DimensionMismatchThrows) {
  const Adapter a = init_adapter(4, 2, false, 5);
  EXPECT_THROW(adapter_forward(Tensor({3, 5}), a), DimensionError);
}

TEST(InitAdapter, Deterministic) {
  const Adapter a = init_adapter(16, 4, true, 42), b = init_adapter(16, 4, true, 42);
  EXPECT_EQ(a.down_weight, b.down_weight);
  EXPECT_EQ(a.up_weight, b.up_weight);
  EXPECT_NE(a.down_weight, init_adapter(16, 4, true, 43).down_weight);
}

TEST(InitAdapter, UpPathAndBiasesAreZero) {
  const Adapter a = init_adapter(16, 4, false, 6);
  for (const Tensor* t : {&a.up_weight, &a.up_bias, &a.down_bias})
    for (double v : t->data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(a.down_weight.shape(), (Shape{16, 4}));
  EXPECT_EQ(a.up_weight.shape(), (Shape{4, 16}));
}

TEST(InitAdapter, DownWeightsWithinXavierBound) {
  const std::size_t d = 200, dhat = 50;
  const Adapter a = init_adapter(d, dhat, false, 7);
  const double bound = std::sqrt(6.0 / static_cast<double>(d + dhat));
  ASSERT_EQ(a.down_weight.size(), 10000u);
  double lo = 1, hi = -1;
  for (double v : a.down_weight.data()) {
    EXPECT_LT(std::abs(v), bound);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_LT(lo, -0.9 * bound);
  EXPECT_GT(hi, 0.9 * bound);
}

TEST(InitAdapter, BottleneckMustBeNarrower) {
  EXPECT_THROW(init_adapter(4, 4, false, 0), ConfigError);
  EXPECT_THROW(init_adapter(4, 6, false, 0), ConfigError);
  EXPECT_THROW(init_adapter(4, 0, false, 0), ConfigError);
}

TEST(Adapter, FiniteDifferencesOnAllParameters) {
  for (bool shortcut : {false, true}) {
    auto f = [shortcut](std::vector<Var>& v) {
      return adapter_forward(v[0], AdapterVars{v[1], v[2], v[3], v[4], shortcut});
    };
    const double err = oracle::fd_max_error(
        f, {random_tensor({3, 4}, 8), random_tensor({4, 2}, 9), random_tensor({2}, 10),
            random_tensor({2, 4}, 11), random_tensor({4}, 12)});
    EXPECT_LT(err, 1e-5);
  }
}

TEST(Prompt, EmptyPromptIsNoOp) {
  const Tensor x = random_tensor({5, 4}, 13);
  EXPECT_EQ(prompt_inject(x, Tensor({0, 4})), x);
  EXPECT_EQ(prompt_strip(x, 0), x);
}

TEST(Prompt, InjectPrependsTokens) {
  const Tensor x = random_tensor({5, 4}, 14), p = random_tensor({12, 4}, 15);
  const Tensor y = prompt_inject(x, p);
  ASSERT_EQ(y.shape(), (Shape{17, 4}));
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(r, c), p.at(r, c));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(12 + r, c), x.at(r, c));
}

TEST(Prompt, StripInvertsInject) {
  const Tensor x = random_tensor({5, 4}, 16), p = random_tensor({12, 4}, 17);
  const Tensor y = prompt_inject(x, p);
  const Tensor z = prompt_strip(y, 12);
  EXPECT_EQ(z, x);
  EXPECT_EQ(y.dim(0) - z.dim(0), 12u);
}

TEST(Prompt, Errors) {
  EXPECT_THROW(prompt_inject(Tensor({5, 4}), Tensor({2, 3})), DimensionError);
  EXPECT_THROW(prompt_strip(Tensor({3, 4}), 3), ContractError);
  EXPECT_THROW(prompt_strip(Tensor({3, 4}), 7), ContractError);
}

namespace {

struct SequenceRecorder : ForwardObserver {
  std::vector<Tensor> inputs, internals, outputs;
  void block_input(std::size_t, const Tensor& x) override { inputs.push_back(x); }
  void block_internal(std::size_t, const Tensor& x) override { internals.push_back(x); }
  void block_output(std::size_t, const Tensor& x) override { outputs.push_back(x); }
};

ModelConfig prompt_config() {
  ModelConfig c = presets::tiny();
  c.depth = 3;
  c.prompt_length = 5;
  return c;
}

}  // namespace

TEST(Prompt, SequenceLengthsInsideAndBetweenBlocks) {
  Model m(prompt_config(), {});
  SequenceRecorder rec;
  ForwardOptions opts;
  opts.observer = &rec;
  predict(m, random_tensor({8, 8}, 18), opts);
  const std::size_t n = m.config().num_patches() + 1;
  ASSERT_EQ(rec.internals.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(rec.inputs[i].dim(0), n);
    EXPECT_EQ(rec.internals[i].dim(0), n + 5);
    EXPECT_EQ(rec.outputs[i].dim(0), n);
    EXPECT_EQ(prompt_strip(rec.internals[i], 5), rec.inputs[i]);
  }
}

TEST(Prompt, PerLayerIndependence) {
  Model a(prompt_config(), {});
  Model b(prompt_config(), {});
  for (double& v : b.parameters().at("prompts.1").value.data()) v += 0.05;
  SequenceRecorder ra, rb;
  ForwardOptions oa, ob;
  oa.observer = &ra;
  ob.observer = &rb;
  const Tensor x = random_tensor({8, 8}, 19);
  const Tensor za = predict(a, x, oa), zb = predict(b, x, ob);
  EXPECT_EQ(ra.inputs[0], rb.inputs[0]);
  EXPECT_EQ(ra.inputs[1], rb.inputs[1]);
  EXPECT_EQ(ra.outputs[0], rb.outputs[0]);
  EXPECT_NE(ra.outputs[1], rb.outputs[1]);
  EXPECT_NE(za, zb);
}

TEST(Prompt, InitialisedInSmallUniformRange) {
  Model m(prompt_config(), {});
  for (ParamId id : m.prompts()) {
    const Tensor& t = m.parameters()[id].value;
    EXPECT_EQ(t.shape(), (Shape{5, 8}));
    for (double v : t.data()) {
      EXPECT_LT(std::abs(v), 0.1);
    }
  }
  EXPECT_NE(m.parameters()[m.prompts()[0]].value, m.parameters()[m.prompts()[1]].value);
}
