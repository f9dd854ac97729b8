#pragma once

// Posterior predictive by Monte Carlo: draw θ, run the network, then
// summarize (mean and covariance for regression, averaged class
// probabilities and decisions for classification).

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnn/approx.hpp"
#include "bnn/error.hpp"
#include "bnn/network.hpp"
#include "bnn/random.hpp"

namespace bnn {

struct PredictiveSamples {
  std::vector<Vector> outputs;
  std::string source;
  Vector x;
};

// n_draws outputs NN_θ(x), θ drawn from the posterior. Softmax heads return
// probabilities.
inline PredictiveSamples sample_predictive(const Posterior& posterior, const MLPSpec& spec, std::span<const double> x,
                                           std::size_t n_draws, Rng& rng) {
  detail::require(n_draws >= 1, "sample_predictive: n_draws must be >= 1");
  detail::require(posterior_dim(posterior) == spec.param_count(), "sample_predictive: posterior does not match network");
  PredictiveSamples s{{}, posterior_kind(posterior), Vector(x.begin(), x.end())};
  s.outputs.reserve(n_draws);
  for (std::size_t i = 0; i < n_draws; ++i) s.outputs.push_back(forward(spec, draw_theta(posterior, spec, rng), x));
  return s;
}

// Same draws of θ shared across every input.
inline std::vector<PredictiveSamples> sample_predictive(const Posterior& posterior, const MLPSpec& spec,
                                                        const std::vector<Vector>& xs, std::size_t n_draws, Rng& rng) {
  detail::require(n_draws >= 1, "sample_predictive: n_draws must be >= 1");
  detail::require(posterior_dim(posterior) == spec.param_count(), "sample_predictive: posterior does not match network");
  std::vector<PredictiveSamples> out;
  for (const auto& x : xs) out.push_back({{}, posterior_kind(posterior), x});
  for (std::size_t i = 0; i < n_draws; ++i) {
    const Vector theta = draw_theta(posterior, spec, rng);
    for (std::size_t k = 0; k < xs.size(); ++k) out[k].outputs.push_back(forward(spec, theta, xs[k]));
  }
  return out;
}

struct RegressionSummary {
  Vector mean;
  std::vector<Vector> cov;                      // epistemic part, (|Θ|−1) divisor
  std::optional<std::vector<Vector>> total_cov;  // cov + σ_y² I
};

namespace detail {

inline void require_finite_samples(const PredictiveSamples& s) {
  require(!s.outputs.empty(), "predictive: no samples");
  const std::size_t m = s.outputs.front().size();
  for (const auto& o : s.outputs) {
    require(o.size() == m, "predictive: ragged outputs");
    for (double v : o) require(std::isfinite(v), "predictive: non-finite output");
  }
}

}  // namespace detail

// With_cov = false returns only the mean (a single sample is then allowed).
inline RegressionSummary summarize_regression(const PredictiveSamples& s, std::optional<Vector> sigma_y = std::nullopt,
                                              bool with_cov = true) {
  detail::require_finite_samples(s);
  const std::size_t n = s.outputs.size(), m = s.outputs.front().size();
  // Deviations from the first sample, so identical samples give exactly zero.
  const Vector& o0 = s.outputs.front();
  Vector shift(m, 0.0);
  for (const auto& o : s.outputs)
    for (std::size_t j = 0; j < m; ++j) shift[j] += o[j] - o0[j];
  for (double& v : shift) v /= static_cast<double>(n);
  RegressionSummary r;
  r.mean.resize(m);
  for (std::size_t j = 0; j < m; ++j) r.mean[j] = o0[j] + shift[j];
  if (!with_cov) return r;
  detail::require(n >= 2, "summarize_regression: covariance needs at least two samples");
  r.cov.assign(m, Vector(m, 0.0));
  for (const auto& o : s.outputs)
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = a; b < m; ++b) r.cov[a][b] += (o[a] - o0[a] - shift[a]) * (o[b] - o0[b] - shift[b]);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a; b < m; ++b) r.cov[b][a] = r.cov[a][b] /= static_cast<double>(n - 1);
  if (sigma_y) {
    const Vector& sy = *sigma_y;
    detail::require(sy.size() == m || sy.size() == 1, "summarize_regression: sigma_y width mismatch");
    r.total_cov = r.cov;
    for (std::size_t j = 0; j < m; ++j) {
      const double s_j = sy.size() == 1 ? sy[0] : sy[j];
      detail::require(s_j >= 0, "summarize_regression: sigma_y must be nonnegative");
      (*r.total_cov)[j][j] += s_j * s_j;
    }
  }
  return r;
}

struct ClassificationSummary {
  Vector p;
  std::size_t predicted = 0;
  std::optional<Vector> risk;
};

// argmax with ties going to the lowest index.
inline std::size_t argmax_lowest(std::span<const double> v) {
  detail::require(!v.empty(), "argmax: empty vector");
  std::size_t k = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[k]) k = i;
  return k;
}

// cost[k][j]: cost of predicting k when the true class is j. With a cost
// matrix the decision minimizes expected risk, ties to the lowest index.
inline ClassificationSummary summarize_classification(const PredictiveSamples& s,
                                                      const std::optional<std::vector<Vector>>& cost = std::nullopt) {
  detail::require_finite_samples(s);
  const std::size_t k = s.outputs.front().size();
  ClassificationSummary c;
  c.p.assign(k, 0.0);
  for (const auto& o : s.outputs) {
    double sum = 0.0;
    for (double v : o) {
      detail::require(v >= 0, "summarize_classification: negative probability");
      sum += v;
    }
    detail::require(std::abs(sum - 1.0) <= 1e-6, "summarize_classification: member output is not normalized");
    for (std::size_t j = 0; j < k; ++j) c.p[j] += o[j];
  }
  for (double& v : c.p) v /= static_cast<double>(s.outputs.size());
  if (!cost) {
    c.predicted = argmax_lowest(c.p);
    return c;
  }
  detail::require(cost->size() == k, "summarize_classification: cost matrix must be K x K");
  Vector risk(k, 0.0);
  for (std::size_t a = 0; a < k; ++a) {
    detail::require((*cost)[a].size() == k, "summarize_classification: cost matrix must be K x K");
    for (std::size_t j = 0; j < k; ++j) risk[a] += (*cost)[a][j] * c.p[j];
  }
  std::size_t best = 0;
  for (std::size_t a = 1; a < k; ++a)
    if (risk[a] < risk[best]) best = a;
  c.predicted = best;
  c.risk = std::move(risk);
  return c;
}

inline nlohmann::json to_json(const RegressionSummary& r) {
  nlohmann::json j = {{"mean", r.mean}, {"cov", r.cov}};
  if (r.total_cov) j["total_cov"] = *r.total_cov;
  return j;
}

inline nlohmann::json to_json(const ClassificationSummary& c) {
  nlohmann::json j = {{"p", c.p}, {"class", c.predicted}};
  if (c.risk) j["risk"] = *c.risk;
  return j;
}

}  // namespace bnn
