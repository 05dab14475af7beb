#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "skelnet/grad_check.hpp"
#include "test_util.hpp"

namespace {

using namespace skelnet;
using namespace skelnet::ad;
using skelnet::testing::random_tensor;

// Contracts the op output against fixed random weights so every output
// element contributes a distinct amount to the scalar.
std::function<Var(const Var&)> probe(std::function<Var(const Var&)> op, Shape out_shape,
                                     std::uint64_t seed) {
  Tensor w = random_tensor(std::move(out_shape), seed);
  return [op, w](const Var& x) { return sum(mul(op(x), constant(w))); };
}

void expect_grad_ok(const std::function<Var(const Var&)>& op, const Tensor& x, Shape out_shape,
                    double tol = 1e-6) {
  auto r = grad_check(probe(op, std::move(out_shape), 99), x);
  EXPECT_LT(r.max_relative_error, tol) << "worst index " << r.worst_index << " analytic "
                                       << r.analytic_at_worst << " numeric " << r.numeric_at_worst;
}

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), NumericError);
  Tensor t(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.at(1, 2), 6.0);
  EXPECT_THROW((void)t.reshaped(Shape{4}), NumericError);
}

TEST(Autodiff, LeakyReluValuesAndSlope) {
  Var x = parameter(Tensor(Shape{2}, std::vector<double>{-1.0, -2.0}));
  Var y = leaky_relu(x);
  EXPECT_DOUBLE_EQ(y.value()[0], -0.01);
  backward(sum(y));
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.01);
}

TEST(Autodiff, SoftmaxRowsAreStochastic) {
  Var s = row_softmax(constant(Tensor(Shape{1, 2})));
  EXPECT_DOUBLE_EQ(s.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(s.value()[1], 0.5);

  Tensor x = random_tensor(Shape{40, 7}, 1, -30.0, 30.0);
  Var y = row_softmax(constant(x));
  for (std::size_t r = 0; r < 40; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_GT(y.value().at(r, j), 0.0);
      total += y.value().at(r, j);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Autodiff, IdentityMatmulAndSumGradient) {
  Tensor eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Tensor x = random_tensor(Shape{3, 4}, 2);
  Var xv = parameter(x);
  Var y = matmul(constant(eye), xv);
  EXPECT_EQ(y.value(), x);
  backward(sum(xv));
  const Tensor grad = xv.grad();
  for (double g : grad.values()) EXPECT_EQ(g, 1.0);
}

TEST(Autodiff, PrimitiveGradientsMatchFiniteDifferences) {
  const Tensor a23 = random_tensor(Shape{2, 3}, 10);
  const Tensor a234 = random_tensor(Shape{2, 3, 4}, 11);
  const Tensor w34 = random_tensor(Shape{3, 4}, 12);
  const Tensor w245 = random_tensor(Shape{2, 4, 5}, 13);
  const Tensor m53 = random_tensor(Shape{5, 3}, 14);

  expect_grad_ok([&](const Var& x) { return matmul(x, constant(w34)); }, a23, {2, 4});
  expect_grad_ok([&](const Var& x) { return matmul(constant(a23), x); }, w34, {2, 4});
  expect_grad_ok([&](const Var& x) { return matmul(x, constant(random_tensor({4, 2}, 3))); }, a234,
                 {2, 3, 2});
  expect_grad_ok([&](const Var& x) { return matmul(constant(a234), x); }, w245, {2, 3, 5});
  expect_grad_ok([&](const Var& x) { return matmul(x, constant(w245)); }, a234, {2, 3, 5});
  expect_grad_ok([&](const Var& x) { return matmul(constant(m53), x); }, a234, {2, 5, 4});
  expect_grad_ok([&](const Var& x) { return add(x, constant(a23)); }, a23, {2, 3});
  expect_grad_ok([&](const Var& b) { return add(constant(a234), b); },
                 random_tensor(Shape{4}, 4), {2, 3, 4});
  expect_grad_ok([&](const Var& x) { return scale(x, -2.5); }, a23, {2, 3});
  expect_grad_ok([&](const Var& x) { return sub(constant(a23), x); }, a23, {2, 3});
  expect_grad_ok([&](const Var& x) { return mul(x, x); }, a23, {2, 3});
  expect_grad_ok([&](const Var& x) { return concat({x, constant(a234), x}, 1); }, a234, {2, 9, 4});
  expect_grad_ok([&](const Var& x) { return concat({x, x}, 2); }, a234, {2, 3, 8});
  expect_grad_ok([&](const Var& x) { return slice(x, 1, 1, 2); }, a234, {2, 2, 4});
  expect_grad_ok([&](const Var& x) { return slice(x, 2, 3, 1); }, a234, {2, 3, 1});
  expect_grad_ok([&](const Var& x) { return transpose(x); }, a23, {3, 2});
  expect_grad_ok([&](const Var& x) { return transpose(x); }, a234, {2, 4, 3});
  expect_grad_ok([&](const Var& x) { return reshape(x, Shape{6, 4}); }, a234, {6, 4});
  expect_grad_ok([&](const Var& x) { return row_softmax(x); }, a234, {2, 3, 4});
  expect_grad_ok([&](const Var& x) { return leaky_relu(x); }, a234, {2, 3, 4});
  expect_grad_ok([&](const Var& x) { return sigmoid(x); }, a234, {2, 3, 4});
  expect_grad_ok([&](const Var& x) { return tanh(x); }, a234, {2, 3, 4});
  expect_grad_ok([&](const Var& x) { return log(x); }, random_tensor(Shape{2, 3}, 5, 0.1, 2.0),
                 {2, 3});
  expect_grad_ok([&](const Var& x) { return max_over_axis(x, 1); }, a234, {2, 4});
  expect_grad_ok([&](const Var& x) { return mean_over_axis(x, 0); }, a234, {3, 4});
  expect_grad_ok([&](const Var& x) { return mean_over_axis(x, 2); }, a234, {2, 3});
}

TEST(Autodiff, SharedSubexpressionsAccumulate) {
  const Tensor x = random_tensor(Shape{3, 3}, 20);
  auto g = [](const Var& v) { return sum(tanh(matmul(v, v))); };
  Var once = parameter(x);
  backward(g(once));
  Var twice = parameter(x);
  backward(add(g(twice), g(twice)));
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_NEAR(twice.grad()[i], 2.0 * once.grad()[i], 1e-12);
}

TEST(Autodiff, MaxRoutesToLowestArgmaxOnTies) {
  Var x = parameter(Tensor(Shape{3, 2}, std::vector<double>{1, 5, 1, 5, 0, 2}));
  Var m = max_over_axis(x, 0);
  EXPECT_EQ(m.value()[0], 1.0);
  EXPECT_EQ(m.value()[1], 5.0);
  backward(sum(m));
  EXPECT_EQ(x.grad(), Tensor(Shape{3, 2}, std::vector<double>{1, 1, 0, 0, 0, 0}));
}

TEST(Autodiff, ErrorsOnShapeMismatchAndNonFinite) {
  EXPECT_THROW(add(constant(Tensor(Shape{2, 3})), constant(Tensor(Shape{3, 2}))), NumericError);
  EXPECT_THROW(matmul(constant(Tensor(Shape{2, 3})), constant(Tensor(Shape{2, 3}))), NumericError);
  EXPECT_THROW(log(constant(Tensor(Shape{1}, 0.0))), NumericError);
}

TEST(BatchNorm, StandardizedInputIsNearFixedPoint) {
  // Columns with zero mean and unit (biased) variance.
  Tensor x(Shape{4, 2}, std::vector<double>{1, std::sqrt(2.0), -1, 0, 1, 0, -1, -std::sqrt(2.0)});
  for (std::size_t j = 0; j < 2; ++j) {
    double m = 0, v = 0;
    for (std::size_t r = 0; r < 4; ++r) m += x.at(r, j) / 4;
    for (std::size_t r = 0; r < 4; ++r) v += (x.at(r, j) - m) * (x.at(r, j) - m) / 4;
    ASSERT_NEAR(m, 0.0, 1e-15);
    ASSERT_NEAR(v, 1.0, 1e-15);
  }
  Var scale = constant(Tensor(Shape{2}, 1.0)), shift = constant(Tensor(Shape{2}));
  BatchNormState st{Tensor(Shape{2}), Tensor(Shape{2}, 1.0)};
  // With a vanishing epsilon the map is the identity.
  Var tight = batch_norm(constant(x), scale, shift, st, Mode::Train, 0.1, 1e-12);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(tight.value()[i], x[i], 1e-9);
  // At the default epsilon every entry shrinks by exactly 1/sqrt(1 + eps).
  Var dflt = batch_norm(constant(x), scale, shift, st, Mode::Train);
  const double shrink = 1.0 / std::sqrt(1.0 + kBatchNormEpsilon);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(dflt.value()[i], x[i] * shrink, 1e-15);
}

TEST(BatchNorm, ConstantBatchYieldsShift) {
  Var shift = constant(Tensor(Shape{3}, std::vector<double>{0.5, -1, 2}));
  BatchNormState st{Tensor(Shape{3}), Tensor(Shape{3}, 1.0)};
  Var y = batch_norm(constant(Tensor(Shape{5, 3}, 7.0)), constant(Tensor(Shape{3}, 3.0)), shift,
                     st, Mode::Train);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y.value().at(r, j), shift.value()[j]);
}

TEST(BatchNorm, TrainModeRejectsSingleRow) {
  BatchNormState st{Tensor(Shape{2}), Tensor(Shape{2}, 1.0)};
  EXPECT_THROW(batch_norm(constant(Tensor(Shape{1, 2})), constant(Tensor(Shape{2}, 1.0)),
                          constant(Tensor(Shape{2})), st, Mode::Train),
               NumericError);
}

TEST(BatchNorm, RunningStatisticsAndEvalMode) {
  Tensor x(Shape{2, 1}, std::vector<double>{1.0, 3.0});
  BatchNormState st{Tensor(Shape{1}), Tensor(Shape{1}, 1.0)};
  Var one = constant(Tensor(Shape{1}, 1.0)), zero = constant(Tensor(Shape{1}));
  batch_norm(constant(x), one, zero, st, Mode::Train, 0.1);
  // mean 2, biased variance 1, unbiased 2
  EXPECT_NEAR(st.running_mean[0], 0.2, 1e-15);
  EXPECT_NEAR(st.running_var[0], 0.9 * 1.0 + 0.1 * 2.0, 1e-15);
  Var y = batch_norm(constant(x), one, zero, std::as_const(st), 0.0);
  EXPECT_NEAR(y.value()[0], (1.0 - 0.2) / std::sqrt(1.1), 1e-12);
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  const Tensor x = random_tensor(Shape{6, 3}, 30);
  const Tensor scale = random_tensor(Shape{3}, 31);
  const Tensor shift = random_tensor(Shape{3}, 32);
  auto train_x = [&](const Var& v) {
    BatchNormState st{Tensor(Shape{3}), Tensor(Shape{3}, 1.0)};
    return batch_norm(v, constant(scale), constant(shift), st, Mode::Train);
  };
  auto train_scale = [&](const Var& s) {
    BatchNormState st{Tensor(Shape{3}), Tensor(Shape{3}, 1.0)};
    return batch_norm(constant(x), s, constant(shift), st, Mode::Train);
  };
  auto train_shift = [&](const Var& b) {
    BatchNormState st{Tensor(Shape{3}), Tensor(Shape{3}, 1.0)};
    return batch_norm(constant(x), constant(scale), b, st, Mode::Train);
  };
  BatchNormState fixed{random_tensor(Shape{3}, 33), random_tensor(Shape{3}, 34, 0.5, 2.0)};
  auto eval_x = [&](const Var& v) {
    return batch_norm(v, constant(scale), constant(shift), std::as_const(fixed));
  };
  expect_grad_ok(train_x, x, {6, 3});
  expect_grad_ok(train_scale, scale, {6, 3});
  expect_grad_ok(train_shift, shift, {6, 3});
  expect_grad_ok(eval_x, x, {6, 3});
}

TEST(Dropout, EvalAndZeroRateAreIdentity) {
  std::mt19937_64 rng(1);
  Var x = constant(random_tensor(Shape{4, 4}, 40));
  EXPECT_EQ(dropout(x, 0.5, Mode::Eval, rng).value(), x.value());
  EXPECT_EQ(dropout(x, 0.0, Mode::Train, rng).value(), x.value());
  EXPECT_EQ(dropout(x, 0.0, Mode::Eval, rng).value(), x.value());
  EXPECT_THROW(dropout(x, 1.0, Mode::Train, rng), ConfigError);
}

TEST(Dropout, PreservesExpectation) {
  std::mt19937_64 rng(3407);
  Var ones = constant(Tensor(Shape{100000}, 1.0));
  Var y = dropout(ones, 0.2, Mode::Train, rng);
  double mean = 0.0;
  for (double v : y.value().values()) mean += v / 1e5;
  EXPECT_NEAR(mean, 1.0, 0.01);
}

TEST(Dropout, GradientUsesTheSameMask) {
  auto f = [](const Var& x) {
    std::mt19937_64 rng(5);
    return dropout(x, 0.3, Mode::Train, rng);
  };
  expect_grad_ok(f, random_tensor(Shape{5, 4}, 41), {5, 4});
}

TEST(GradCheck, QuadraticIsExact) {
  auto r = grad_check([](const Var& x) { return sum(mul(x, x)); }, random_tensor(Shape{4, 5}, 50));
  EXPECT_LT(r.max_relative_error, 1e-8);
}

TEST(GradCheck, CatchesCorruptedBackwardRule) {
  // tanh whose backward forgets the 1 - y^2 factor.
  auto broken_tanh = [](const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.storage()) v = std::tanh(v);
    return ad::detail::make_result(std::move(out), {x}, [](ad::detail::Node& self) {
      auto& p = self.parent(0);
      if (!p.requires_grad) return;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }, "broken_tanh");
  };
  auto r = grad_check([&](const Var& x) { return sum(broken_tanh(x)); },
                      random_tensor(Shape{3, 3}, 51));
  EXPECT_GT(r.max_relative_error, 1e-2);
}

}  // namespace
