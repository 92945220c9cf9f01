#include <gtest/gtest.h>

#include <cmath>

#include "aat/gradcheck.hpp"
#include "aat/ops.hpp"
#include "oracles.hpp"

using namespace aat;
using oracle::fd_max_error;
using oracle::random_tensor;

TEST(Matmul, IdentityAndProjector) {
  Tape t;
  Var eye = t.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  Var m = t.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  EXPECT_EQ(matmul(eye, m).value(), Tensor::matrix({{1, 2}, {3, 4}}));
  Var proj = t.constant(Tensor::matrix({{1, 0}, {0, 0}}));
  Var n = t.constant(Tensor::matrix({{5, 6}, {7, 8}}));
  EXPECT_EQ(matmul(proj, n).value(), Tensor::matrix({{5, 6}, {0, 0}}));
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  auto f = [](std::vector<Var>& v) { return sum(matmul(v[0], v[1])); };
  Tape tape;
  Tensor a = random_tensor({3, 4}, 1), b = random_tensor({4, 2}, 2);
  std::vector<Var> leaves{tape.leaf(a, true), tape.leaf(b, true)};
  const Var va = leaves[0], vb = leaves[1];
  const Gradients g = tape.backward(f(leaves));
  auto loss = [&] {
    Tape t2;
    std::vector<Var> vs{t2.leaf(a, false), t2.leaf(b, false)};
    return f(vs).value().item();
  };
  for (Tensor* x : {&a, &b}) {
    const Tensor numeric = numeric_gradient(loss, *x, 1e-6);
    const Tensor& analytic = x == &a ? g[va] : g[vb];
    for (std::size_t i = 0; i < numeric.size(); ++i)
      EXPECT_LT(std::abs(analytic[i] - numeric[i]) / std::max(std::abs(numeric[i]), 1e-12), 1e-7);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({4, 5})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Gelu, KnownValues) {
  Tape t;
  Var x = t.constant(Tensor::vector({0.0, 10.0, 1.0}));
  const Tensor y = gelu(x).value();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 10.0, 1e-9);
  EXPECT_NEAR(y[2], 1.0 * oracle::normal_cdf(1.0), 1e-12);
}

TEST(LayerNorm, Examples) {
  Tape t;
  Var ones = t.constant(Tensor::vector({1, 1, 1}));
  Var zeros = t.constant(Tensor::vector({0, 0, 0}));
  const Tensor flat = layernorm(t.constant(Tensor::matrix({{5, 5, 5}})), ones, zeros).value();
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);

  const Tensor ramp = layernorm(t.constant(Tensor::matrix({{1, 2, 3}})), ones, zeros, 0.0).value();
  const double s = std::sqrt(2.0 / 3.0);
  EXPECT_NEAR(ramp[0], -1 / s, 1e-12);
  EXPECT_NEAR(ramp[1], 0.0, 1e-12);
  EXPECT_NEAR(ramp[2], 1 / s, 1e-12);
  EXPECT_NEAR(ramp[2], 1.224745, 1e-6);

  Var beta = t.constant(Tensor::vector({0.5, -1, 2}));
  const Tensor collapsed =
      layernorm(t.constant(random_tensor({4, 3}, 3)), zeros, beta).value();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(collapsed.at(r, c), beta.value()[c]);
}

TEST(LayerNorm, RowStatistics) {
  Tape t;
  const std::size_t d = 7;
  Var x = t.constant(random_tensor({5, d}, 4, 3.0));
  const Tensor y =
      layernorm(x, t.constant(Tensor({d}, 1.0)), t.constant(Tensor({d}, 0.0)), 1e-12).value();
  for (std::size_t r = 0; r < 5; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < d; ++c) mu += y.at(r, c);
    mu /= d;
    for (std::size_t c = 0; c < d; ++c) var += (y.at(r, c) - mu) * (y.at(r, c) - mu);
    var /= d;
    EXPECT_LT(std::abs(mu), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(LayerNorm, EmptyFeatureDimThrows) {
  Tape t;
  EXPECT_THROW(layernorm(t.constant(Tensor({3, 0})), t.constant(Tensor({0})),
                         t.constant(Tensor({0}))),
               DimensionError);
}

TEST(Softmax, Examples) {
  Tape t;
  const Tensor a = softmax(t.constant(Tensor::vector({0, 0})), 0).value();
  EXPECT_EQ(a[0], 0.5);
  EXPECT_EQ(a[1], 0.5);
  const Tensor b = softmax(t.constant(Tensor::vector({1000, 1000})), 0).value();
  EXPECT_EQ(b[0], 0.5);
  EXPECT_EQ(b[1], 0.5);
  const Tensor c = softmax(t.constant(Tensor::vector({1, 2, 3})), 0).value();
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(c[i], static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z), 1e-15);
}

TEST(Softmax, RowsAreDistributions) {
  Tape t;
  const Tensor y = softmax(t.constant(random_tensor({6, 9}, 5, 20.0)), 1).value();
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 9; ++c) {
      EXPECT_GE(y.at(r, c), 0.0);
      EXPECT_LE(y.at(r, c), 1.0);
      s += y.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Backward, SquareSum) {
  Tape t;
  const Tensor xv = random_tensor({2, 3}, 6);
  Var x = t.leaf(xv, true);
  const Gradients g = t.backward(sum(multiply(x, x)));
  for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_EQ(g[x][i], 2 * xv[i]);
}

TEST(Backward, DisconnectedLeafGetsZero) {
  Tape t;
  Var x = t.leaf(random_tensor({3}, 7), true);
  Var w = t.leaf(random_tensor({2, 2}, 8), true);
  const Gradients g = t.backward(sum(x));
  ASSERT_EQ(g[w].shape(), (Shape{2, 2}));
  for (double v : g[w].data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, NonScalarLossThrows) {
  Tape t;
  Var x = t.leaf(random_tensor({3}, 9), true);
  EXPECT_THROW(t.backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, MultipleUsesAccumulate) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1.5, -2}), true);
  const Gradients g = t.backward(sum(add(add(x, x), scale(x, 3.0))));
  EXPECT_EQ(g[x][0], 5.0);
  EXPECT_EQ(g[x][1], 5.0);
}

TEST(Backward, FrozenInputsRecordNoRule) {
  Tape t;
  Var a = t.constant(random_tensor({2, 2}, 10));
  Var b = t.constant(random_tensor({2, 2}, 11));
  Var c = matmul(a, b);
  EXPECT_FALSE(c.requires_grad());
  Var w = t.leaf(random_tensor({2, 2}, 12), true);
  EXPECT_TRUE(matmul(c, w).requires_grad());
}

TEST(FiniteDifferences, EveryOp) {
  const double tol = 1e-5;
  auto u = [](Shape s, std::uint64_t seed) { return random_tensor(std::move(s), seed); };
  EXPECT_LT(fd_max_error([](auto& v) { return matmul(v[0], v[1]); }, {u({3, 4}, 1), u({4, 2}, 2)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return add(v[0], v[1]); }, {u({3, 4}, 3), u({3, 4}, 4)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return add(v[0], v[1]); }, {u({3, 4}, 5), u({4}, 6)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return multiply(v[0], v[1]); }, {u({2, 3}, 7), u({2, 3}, 8)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return scale(v[0], -1.7); }, {u({5}, 9)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return transpose(v[0]); }, {u({2, 5}, 10)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return reshape(v[0], {3, 2}); }, {u({2, 3}, 11)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return concat({v[0], v[1]}, 0); }, {u({2, 3}, 12), u({1, 3}, 13)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return concat({v[0], v[1]}, 1); }, {u({2, 3}, 14), u({2, 2}, 15)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return slice(v[0], 1, 1, 2); }, {u({3, 4}, 16)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return mean(v[0], 0); }, {u({3, 4}, 17)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return mean(v[0], 1); }, {u({3, 4}, 18)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return sum(v[0]); }, {u({3, 4}, 19)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return sigmoid(v[0]); }, {u({3, 4}, 20)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return gelu(v[0]); }, {u({3, 4}, 21)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return softmax(v[0], 1); }, {u({3, 4}, 22)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return softmax(v[0], 0); }, {u({3, 4}, 23)}), tol);
  EXPECT_LT(fd_max_error([](auto& v) { return layernorm(v[0], v[1], v[2]); },
                         {u({3, 5}, 24), u({5}, 25), u({5}, 26)}),
            tol);
  EXPECT_LT(fd_max_error([](auto& v) { return linear(v[0], v[1], v[2]); },
                         {u({3, 4}, 27), u({4, 2}, 28), u({2}, 29)}),
            tol);
}

TEST(ConcatSlice, RoundTrip) {
  Tape t;
  const Tensor a = random_tensor({2, 3}, 30), b = random_tensor({4, 3}, 31);
  Var c = concat({t.constant(a), t.constant(b)}, 0);
  EXPECT_EQ(slice(c, 0, 0, 2).value(), a);
  EXPECT_EQ(slice(c, 0, 2, 4).value(), b);
  Var d = concat({t.constant(a), t.constant(random_tensor({2, 5}, 32))}, 1);
  EXPECT_EQ(slice(d, 1, 0, 3).value(), a);
}

TEST(FiniteDifferences, TwoLayerTransformer) {
  ModelConfig cfg = presets::tiny();
  cfg.prompt_length = 0;
  const GradcheckResult r = gradcheck_model(Model(cfg, {}));
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_parameter;
  EXPECT_EQ(r.checked, parameter_count(cfg));
}

TEST(FiniteDifferences, BrokenRuleIsDetected) {
  ModelConfig cfg = presets::tiny();
  cfg.prompt_length = 0;
  GradcheckOptions opts;
  opts.fault_op = "gelu";
  EXPECT_GT(gradcheck_model(Model(cfg, {}), opts).max_relative_error, 1e-2);
}
