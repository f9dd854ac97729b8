#pragma once

// First-order optimizers. step() minimizes: it moves against the gradient.

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "bnn/autodiff.hpp"
#include "bnn/error.hpp"

namespace bnn {

struct OptimizerConfig {
  enum class Kind { SGD, Adam };
  Kind kind = Kind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    detail::require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && epsilon > 0,
                    "optimizer: invalid adam parameters");
  }
};

inline OptimizerConfig optimizer_from_string(const std::string& s) {
  if (s == "adam") return {};
  if (s == "sgd") return {OptimizerConfig::Kind::SGD};
  throw ConfigError("unknown optimizer: " + s);
}

inline std::string to_string(const OptimizerConfig& c) { return c.kind == OptimizerConfig::Kind::Adam ? "adam" : "sgd"; }

class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::size_t dim) : cfg_(cfg), m_(dim, 0.0), v_(dim, 0.0) { cfg_.validate(); }

  void step(Vector& params, const Vector& grad, double lr) {
    detail::require(params.size() == m_.size() && grad.size() == m_.size(), "optimizer: dimension mismatch");
    detail::require(lr >= 0, "optimizer: learning rate must be nonnegative");
    if (cfg_.kind == OptimizerConfig::Kind::SGD) {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
      return;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1 - cfg_.beta2) * grad[i] * grad[i];
      params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.epsilon);
    }
  }

 private:
  OptimizerConfig cfg_;
  Vector m_, v_;
  std::size_t t_ = 0;
};

// Learning rate decayed geometrically from lr to lr·final_scale over n steps.
inline double scheduled_rate(double lr, double final_scale, std::size_t t, std::size_t n) {
  if (n <= 1 || final_scale == 1.0) return lr;
  return lr * std::pow(final_scale, static_cast<double>(t) / static_cast<double>(n - 1));
}

}  // namespace bnn
