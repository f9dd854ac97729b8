#include <gtest/gtest.h>

#include <cmath>

#include "bnn/autodiff.hpp"
#include "bnn/network.hpp"
#include "bnn/random.hpp"

using namespace bnn;

namespace {

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

// Checks reverse-mode gradients of f against central differences at theta.
void expect_matches_fd(const TapeFunction& f, const Vector& theta, double tol = 1e-4) {
  const Tensor leaf = Tensor::vector(theta);
  const auto r = evaluate_with_gradient(f, std::span<const Tensor>(&leaf, 1));
  const Vector fd = finite_difference_gradient(
      [&](std::span<const double> p) {
        Tape t;
        const Var v = t.constant(Tensor::vector(Vector(p.begin(), p.end())));
        return f(t, std::span<const Var>(&v, 1)).item();
      },
      theta, 1e-5);
  ASSERT_EQ(fd.size(), r.gradients[0].size());
  for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_LT(rel_err(r.gradients[0][i], fd[i]), tol) << "coord " << i;
}

}  // namespace

TEST(Autodiff, SquareOfThree) {
  const Tensor x = Tensor::scalar(3.0);
  const auto r = evaluate_with_gradient([](Tape&, std::span<const Var> v) { return square(v[0]); },
                                        std::span<const Tensor>(&x, 1));
  EXPECT_DOUBLE_EQ(r.value, 9.0);
  EXPECT_DOUBLE_EQ(r.gradients[0].item(), 6.0);
}

TEST(Autodiff, ConstantHasZeroGradient) {
  const std::vector<Tensor> leaves = {Tensor::vector({1, 2, 3}), Tensor::scalar(4)};
  const auto r = evaluate_with_gradient([](Tape& t, std::span<const Var>) { return t.constant(5.0); }, leaves);
  EXPECT_DOUBLE_EQ(r.value, 5.0);
  for (const auto& g : r.gradients)
    for (double v : g.values) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(r.gradients[0].shape, leaves[0].shape);
}

TEST(Autodiff, NonScalarOutputIsContractViolation) {
  const Tensor x = Tensor::vector({1, 2});
  EXPECT_THROW(evaluate_with_gradient([](Tape&, std::span<const Var> v) { return v[0] * 2.0; },
                                      std::span<const Tensor>(&x, 1)),
               ContractViolation);
}

TEST(Autodiff, NonFiniteForwardNamesPrimitive) {
  const Tensor x = Tensor::scalar(-1.0);
  try {
    evaluate_with_gradient([](Tape&, std::span<const Var> v) { return log(v[0]); }, std::span<const Tensor>(&x, 1));
    FAIL() << "expected NumericFailure";
  } catch (const NumericFailure& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
}

TEST(Autodiff, UnsupportedPrimitiveRejectedAtConstruction) {
  Tape t;
  const Var x = t.leaf(Tensor::scalar(1.0));
  EXPECT_THROW(t.unary(Op::Matmul, x), ContractViolation);
  EXPECT_THROW(t.binary(Op::Exp, x, x), ContractViolation);
  const Var m = t.leaf(Tensor::matrix(2, 3, Vector(6, 1.0)));
  EXPECT_THROW(matmul(m, m), ContractViolation);
  EXPECT_THROW(m + t.leaf(Tensor::vector({1, 2})), ContractViolation);
}

TEST(Autodiff, EveryPrimitiveMatchesCentralDifferences) {
  Rng rng(11);
  struct Case {
    const char* name;
    TapeFunction f;
    double lo, hi;
  };
  auto mat = [](Tape& t, Var v) { return t.slice(v, 0, {2, 3}); };
  const std::vector<Case> cases = {
      {"add", [](Tape& t, std::span<const Var> v) { return sum(t.slice(v[0], 0, {3}) + t.slice(v[0], 3, {3})); }, -2, 2},
      {"sub", [](Tape& t, std::span<const Var> v) { return sum(square(t.slice(v[0], 0, {3}) - t.slice(v[0], 3, {3}))); }, -2, 2},
      {"mul", [](Tape& t, std::span<const Var> v) { return sum(t.slice(v[0], 0, {3}) * t.slice(v[0], 3, {3})); }, -2, 2},
      {"div", [](Tape& t, std::span<const Var> v) { return sum(t.slice(v[0], 0, {3}) / t.slice(v[0], 3, {3})); }, 0.5, 2},
      {"row-broadcast", [mat](Tape& t, std::span<const Var> v) { return sum(square(mat(t, v[0]) * t.slice(v[0], 3, {3}))); }, -2, 2},
      {"scalar-broadcast", [mat](Tape& t, std::span<const Var> v) { return sum(square(mat(t, v[0]) + t.slice(v[0], 5, {}))); }, -2, 2},
      {"matmul", [mat](Tape& t, std::span<const Var> v) { return sum(square(matmul(mat(t, v[0]), transpose(mat(t, v[0]))))); }, -1, 1},
      {"sum-rows", [mat](Tape& t, std::span<const Var> v) { return sum(square(sum_rows(mat(t, v[0])))); }, -2, 2},
      {"log-softmax", [mat](Tape& t, std::span<const Var> v) { return sum(log_softmax_rows(mat(t, v[0])) * mat(t, v[0])); }, -2, 2},
      {"log", [](Tape&, std::span<const Var> v) { return sum(log(v[0])); }, 0.2, 3},
      {"exp", [](Tape&, std::span<const Var> v) { return sum(exp(v[0])); }, -2, 2},
      {"square", [](Tape&, std::span<const Var> v) { return sum(square(v[0])); }, -2, 2},
      {"sqrt", [](Tape&, std::span<const Var> v) { return sum(sqrt(v[0])); }, 0.2, 3},
      {"tanh", [](Tape&, std::span<const Var> v) { return sum(tanh(v[0]) * v[0]); }, -2, 2},
      {"relu", [](Tape&, std::span<const Var> v) { return sum(relu(v[0]) * v[0]); }, -2, 2},
      {"leaky-relu", [](Tape&, std::span<const Var> v) { return sum(leaky_relu(v[0], 0.1) * v[0]); }, -2, 2},
      {"softplus", [](Tape&, std::span<const Var> v) { return sum(softplus(v[0])); }, -3, 3},
      {"sigmoid", [](Tape&, std::span<const Var> v) { return sum(sigmoid(v[0])); }, -3, 3},
      {"concat", [](Tape& t, std::span<const Var> v) { return sum(square(concat(t.slice(v[0], 4, {2}), tanh(t.slice(v[0], 0, {4}))))); }, -2, 2},
      {"neg",[](Tape&, std::span<const Var> v) { return sum(-square(v[0])); }, -2, 2},
  };
  for (const auto& c : cases) {
    SCOPED_TRACE(c.name);
    for (int trial = 0; trial < 50; ++trial) {
      Vector theta(6);
      for (double& v : theta) {
        v = rng.uniform(c.lo, c.hi);
        // keep kinks of relu away from the finite-difference stencil
        if (std::abs(v) < 1e-3) v = 0.1;
      }
      expect_matches_fd(c.f, theta);
    }
  }
}

TEST(Autodiff, GradientOfSumIsSumOfGradients) {
  Rng rng(5);
  const TapeFunction f = [](Tape&, std::span<const Var> v) { return sum(tanh(v[0]) * exp(v[0])); };
  const TapeFunction g = [](Tape& t, std::span<const Var> v) {
    return sum(square(log_softmax_rows(t.slice(v[0], 0, {1, 4}))));
  };
  const TapeFunction fg = [&](Tape& t, std::span<const Var> v) { return f(t, v) + g(t, v); };
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = Tensor::vector({rng.normal(), rng.normal(), rng.normal(), rng.normal()});
    const auto a = evaluate_with_gradient(f, std::span<const Tensor>(&x, 1));
    const auto b = evaluate_with_gradient(g, std::span<const Tensor>(&x, 1));
    const auto c = evaluate_with_gradient(fg, std::span<const Tensor>(&x, 1));
    for (std::size_t i = 0; i < 4; ++i)
      EXPECT_NEAR(c.gradients[0][i], a.gradients[0][i] + b.gradients[0][i], 1e-12);
  }
}

TEST(Autodiff, MlpNegativeLogLikelihoodMatchesFiniteDifferences) {
  const MLPSpec spec = MLPSpec::chain({2, 5, 1}, Activation::Tanh);
  Rng rng(3);
  Vector theta = init_params(spec, rng);
  for (double& v : theta) v += 0.1 * rng.normal();
  Vector xs, ys;
  for (int i = 0; i < 8; ++i) {
    xs.push_back(rng.uniform(-1, 1));
    xs.push_back(rng.uniform(-1, 1));
    ys.push_back(rng.normal());
  }
  const TapeFunction nll = [&](Tape& t, std::span<const Var> v) {
    const Var x = t.constant(Tensor::matrix(8, 2, xs));
    const Var y = t.constant(Tensor::matrix(8, 1, ys));
    return sum(square(forward_tape(spec, v[0], x) - y)) * 0.5;
  };
  expect_matches_fd(nll, theta);
}

TEST(Autodiff, Deterministic) {
  const MLPSpec spec = MLPSpec::chain({1, 6, 1}, Activation::Tanh);
  Rng rng(9);
  const Tensor theta = Tensor::vector(init_params(spec, rng));
  const TapeFunction f = [&](Tape& t, std::span<const Var> v) {
    return sum(square(forward_tape(spec, v[0], t.constant(Tensor::matrix(3, 1, {0.1, 0.5, -0.7})))));
  };
  const auto a = evaluate_with_gradient(f, std::span<const Tensor>(&theta, 1));
  const auto b = evaluate_with_gradient(f, std::span<const Tensor>(&theta, 1));
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.gradients[0].values, b.gradients[0].values);
}

TEST(FiniteDifference, QuadraticAndConstant) {
  const Vector theta = {1.0, -2.0};
  const Vector g = finite_difference_gradient(
      [](std::span<const double> p) { return p[0] * p[0] + p[1] * p[1]; }, theta, 1e-5);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], -4.0, 1e-8);
  const Vector z = finite_difference_gradient([](std::span<const double>) { return 3.0; }, theta, 1e-5);
  EXPECT_EQ(z, Vector(2, 0.0));
}

TEST(FiniteDifference, NonFiniteProbeReportsCoordinate) {
  const Vector theta = {1.0, 1e-6};
  try {
    finite_difference_gradient([](std::span<const double> p) { return std::log(p[1]); }, theta, 1e-5);
    FAIL();
  } catch (const NumericFailure& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
  }
  EXPECT_THROW(finite_difference_gradient([](std::span<const double>) { return 0.0; }, theta, 0.0),
               ContractViolation);
}

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ContractViolation);
  EXPECT_EQ(Tensor::scalar(2).size(), 1u);
}
