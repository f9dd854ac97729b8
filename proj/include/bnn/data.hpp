#pragma once

// Synthetic datasets for desk-scale experiments.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include <nlohmann/json.hpp>

#include "bnn/error.hpp"
#include "bnn/model.hpp"
#include "bnn/random.hpp"

namespace bnn::data {

// y = sin(2πx) + N(0, noise²), x ~ U(x_lo, x_hi) (x fixed when the range is a point).
inline Dataset sinusoid_1d(std::size_t n, double noise, double x_lo, double x_hi, Rng& rng) {
  detail::require(n >= 1, "sinusoid-1d: n must be >= 1");
  detail::require(noise >= 0 && x_hi >= x_lo, "sinusoid-1d: invalid noise or range");
  Dataset d;
  d.name = "sinusoid-1d";
  for (std::size_t i = 0; i < n; ++i) {
    const double x = x_hi > x_lo ? rng.uniform(x_lo, x_hi) : x_lo;
    const double y = std::sin(2 * std::numbers::pi * x) + (noise > 0 ? rng.normal(0.0, noise) : 0.0);
    d.inputs.push_back({x});
    d.targets.push_back({y});
  }
  return d;
}

// Two interleaved half circles; the first n/2 points are class 0.
inline Dataset two_moons(std::size_t n, double noise, Rng& rng) {
  detail::require(n >= 1 && noise >= 0, "two-moons: invalid parameters");
  Dataset d;
  d.name = "two-moons";
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i < n / 2 ? 0 : 1;
    const double t = rng.uniform(0.0, std::numbers::pi);
    double x0 = std::cos(t), x1 = std::sin(t);
    if (label == 1) {
      x0 = 1.0 - x0;
      x1 = 0.5 - x1;
    }
    if (noise > 0) {
      x0 += rng.normal(0.0, noise);
      x1 += rng.normal(0.0, noise);
    }
    d.inputs.push_back({x0, x1});
    d.labels.push_back(label);
  }
  return d;
}

// y = ±cos(πx/2) + N(0, noise²) with the sign drawn uniformly: two branches.
inline Dataset bimodal_regression(std::size_t n, double noise, Rng& rng) {
  detail::require(n >= 1 && noise >= 0, "bimodal-regression: invalid parameters");
  Dataset d;
  d.name = "bimodal-regression";
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    const double s = rng.bernoulli(0.5) ? 1.0 : -1.0;
    d.inputs.push_back({x});
    d.targets.push_back({s * std::cos(0.5 * std::numbers::pi * x) + (noise > 0 ? rng.normal(0.0, noise) : 0.0)});
  }
  return d;
}

// The single datum (x=1, y=0) of the scalar conjugate model.
inline Dataset conjugate_scalar() {
  Dataset d;
  d.name = "conjugate-scalar";
  d.inputs = {{1.0}};
  d.targets = {{0.0}};
  return d;
}

namespace params {

inline void reject_unknown(const nlohmann::json& p, std::initializer_list<const char*> keys, const std::string& what) {
  for (const auto& [k, v] : p.items()) {
    bool ok = false;
    for (const char* a : keys) ok |= k == a;
    if (!ok) throw ConfigError(what + ": unknown parameter " + k);
  }
}

}  // namespace params

// Named generator with JSON parameters, deterministic given the seed.
inline Dataset generate(const std::string& name, const nlohmann::json& options, std::uint64_t seed) {
  const nlohmann::json p = options.is_null() ? nlohmann::json::object() : options;
  Rng rng = Rng(seed).stream("data");
  try {
    if (name == "sinusoid-1d") {
      params::reject_unknown(p, {"n", "noise", "x_range"}, name);
      const auto range = p.value("x_range", std::vector<double>{-0.5, 0.5});
      if (range.size() != 2) throw ConfigError("sinusoid-1d: x_range needs two numbers");
      return sinusoid_1d(p.value("n", std::size_t{20}), p.value("noise", 0.1), range[0], range[1], rng);
    }
    if (name == "two-moons") {
      params::reject_unknown(p, {"n", "noise"}, name);
      return two_moons(p.value("n", std::size_t{200}), p.value("noise", 0.1), rng);
    }
    if (name == "bimodal-regression") {
      params::reject_unknown(p, {"n", "noise"}, name);
      return bimodal_regression(p.value("n", std::size_t{200}), p.value("noise", 0.05), rng);
    }
    if (name == "conjugate-scalar") {
      params::reject_unknown(p, {}, name);
      return conjugate_scalar();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(name + ": " + e.what());
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  throw ConfigError("unknown dataset generator: " + name);
}

}  // namespace bnn::data
