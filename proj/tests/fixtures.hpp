#pragma once

// Small targets and models shared by the unit tests and the acceptance run.

#include <cmath>

#include "bnn/mcmc.hpp"
#include "bnn/model.hpp"

namespace fixtures {

// Quadratic log density -½ xᵀ P x for a precision matrix P (row-major d×d).
inline bnn::LogTarget gaussian_target(std::vector<double> precision, std::size_t d) {
  bnn::LogTarget t;
  t.dim = d;
  auto grad = [precision, d](std::span<const double> x) {
    bnn::Vector g(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) g[i] -= precision[i * d + j] * x[j];
    return g;
  };
  auto value = [precision, d](std::span<const double> x) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) s += x[i] * precision[i * d + j] * x[j];
    return -0.5 * s;
  };
  t.log_density = value;
  t.value_and_gradient = [value, grad](std::span<const double> x) { return bnn::LogJointGradient{value(x), grad(x)}; };
  t.stochastic_gradient = [grad](std::span<const double> x, bnn::Rng&) { return grad(x); };
  return t;
}

inline bnn::LogTarget standard_normal(std::size_t d = 1) {
  std::vector<double> p(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) p[i * d + i] = 1.0;
  return gaussian_target(p, d);
}

// exp(-(x²-1)²/w): two symmetric modes at ±1.
inline bnn::LogTarget bimodal(double w = 0.02) {
  bnn::LogTarget t;
  t.dim = 1;
  t.log_density = [w](std::span<const double> x) { return -std::pow(x[0] * x[0] - 1, 2) / w; };
  t.value_and_gradient = [w](std::span<const double> x) {
    const double u = x[0] * x[0] - 1;
    return bnn::LogJointGradient{-u * u / w, {-4 * u * x[0] / w}};
  };
  t.stochastic_gradient = [w](std::span<const double> x, bnn::Rng&) {
    return bnn::Vector{-4 * (x[0] * x[0] - 1) * x[0] / w};
  };
  return t;
}

// 1 -> 1 identity network without bias: f_θ(x) = θx.
inline bnn::MLPSpec scalar_identity() {
  bnn::LayerSpec l{1, 1, bnn::Activation::Identity};
  l.bias = false;
  return bnn::MLPSpec({l});
}

// Prior N(0,1), one datum (x=1, y=0), σ_y = 1. Posterior N(0, 1/2).
inline bnn::LogJointModel conjugate_model() {
  bnn::Dataset d;
  d.name = "conjugate-scalar";
  d.inputs = {{1.0}};
  d.targets = {{0.0}};
  return bnn::LogJointModel(scalar_identity(), bnn::Prior::isotropic_gaussian(1.0), bnn::Likelihood::gaussian(1.0), d);
}

}  // namespace fixtures
