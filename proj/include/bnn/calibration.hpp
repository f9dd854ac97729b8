#pragma once

// Calibration diagnostics: reliability curves for classifiers, χ²-based
// curves for regression, curve summaries (AUC, distance, ECE) and proper
// scoring rules.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>
#include <nlohmann/json.hpp>

#include "bnn/error.hpp"
#include "bnn/io.hpp"
#include "bnn/predictive.hpp"

namespace bnn {

struct CurvePoint {
  double p_hat = 0.0;
  double p_check = 0.0;
  std::size_t n = 0;
  bool operator==(const CurvePoint&) const = default;
};

struct CalibrationCurve {
  std::vector<CurvePoint> points;
  std::string scheme;  // "centered", "tails" or "chi-square"
  double delta = 0.0;
  std::size_t excluded = 0;  // regression: points dropped for singular covariance
  bool degenerate = false;   // every point collapsed to one p̂

  void validate() const {
    for (std::size_t i = 0; i < points.size(); ++i) {
      const auto& p = points[i];
      detail::require(p.p_hat >= 0 && p.p_hat <= 1 && p.p_check >= 0 && p.p_check <= 1,
                      "CalibrationCurve: probabilities must lie in [0,1]");
      if (i) detail::require(p.p_hat > points[i - 1].p_hat, "CalibrationCurve: p_hat must be strictly increasing");
    }
  }
};

enum class EventScheme { Centered, Tails };

namespace detail {

inline void require_binary_inputs(std::span<const double> predicted, std::span<const int> observed) {
  require(!predicted.empty() && predicted.size() == observed.size(), "reliability: lists must match and be nonempty");
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    require(predicted[i] >= 0 && predicted[i] <= 1, "reliability: predicted probability outside [0,1]");
    require(observed[i] == 0 || observed[i] == 1, "reliability: observed labels must be 0 or 1");
  }
}

// Sorts by p̂ and merges equal p̂ (count-weighted).
inline std::vector<CurvePoint> merge_sorted(std::vector<CurvePoint> pts) {
  std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.p_hat < b.p_hat; });
  std::vector<CurvePoint> out;
  for (const auto& p : pts) {
    if (!out.empty() && out.back().p_hat == p.p_hat) {
      auto& q = out.back();
      const double n = static_cast<double>(q.n + p.n);
      q.p_check = (q.p_check * static_cast<double>(q.n) + p.p_check * static_cast<double>(p.n)) / n;
      q.n += p.n;
    } else {
      out.push_back(p);
    }
  }
  return out;
}

}  // namespace detail

// Centered scheme: for every grid center c = kδ in [0,1], p̌ is the observed
// frequency among predictions in the open window (c−δ, c+δ) and p̂ is their
// mean prediction (equal to c away from the ends of [0,1]). Tails scheme
// (small test sets): events [0,c] and [1−c,1] for every grid c, each giving
// (mean prediction, frequency). Empty events are omitted.
inline CalibrationCurve binary_reliability(std::span<const double> predicted, std::span<const int> observed,
                                           double delta = 0.05, EventScheme scheme = EventScheme::Centered) {
  detail::require_binary_inputs(predicted, observed);
  detail::require(delta > 0 && delta <= 0.5, "reliability: delta must lie in (0, 0.5]");
  CalibrationCurve c;
  c.delta = delta;
  c.scheme = scheme == EventScheme::Centered ? "centered" : "tails";
  const auto n_grid = static_cast<std::size_t>(std::floor(1.0 / delta + 1e-9));
  const double half = delta * (1 - 1e-9);
  std::vector<CurvePoint> pts;
  for (std::size_t k = 0; k <= n_grid; ++k) {
    const double center = static_cast<double>(k) * delta;
    if (scheme == EventScheme::Centered) {
      std::size_t n = 0, hits = 0;
      double s = 0.0;
      for (std::size_t i = 0; i < predicted.size(); ++i)
        if (std::abs(predicted[i] - center) < half) {
          ++n;
          hits += static_cast<std::size_t>(observed[i]);
          s += predicted[i];
        }
      // neighbouring windows holding the same points give the same mean
      if (n && (pts.empty() || s / static_cast<double>(n) > pts.back().p_hat))
        pts.push_back({s / static_cast<double>(n), static_cast<double>(hits) / static_cast<double>(n), n});
    } else {
      if (k == 0) continue;
      for (const bool lower : {true, false}) {
        std::size_t n = 0, hits = 0;
        double s = 0.0;
        for (std::size_t i = 0; i < predicted.size(); ++i) {
          const bool in = lower ? predicted[i] <= center + 1e-12 : predicted[i] >= 1 - center - 1e-12;
          if (!in) continue;
          ++n;
          hits += static_cast<std::size_t>(observed[i]);
          s += predicted[i];
        }
        if (n)
          pts.push_back({s / static_cast<double>(n), static_cast<double>(hits) / static_cast<double>(n), n});
      }
    }
  }
  if (pts.empty()) throw EvaluationError("reliability: every bin is empty");
  c.points = scheme == EventScheme::Centered ? std::move(pts) : detail::merge_sorted(std::move(pts));
  c.degenerate = c.points.size() == 1;
  return c;
}

// One-vs-rest reliability curve per class.
inline std::vector<CalibrationCurve> multiclass_reliability(const std::vector<Vector>& probs,
                                                            std::span<const std::size_t> labels, double delta = 0.05,
                                                            EventScheme scheme = EventScheme::Centered) {
  detail::require(!probs.empty() && probs.size() == labels.size(), "reliability: lists must match and be nonempty");
  const std::size_t k = probs.front().size();
  detail::require(k >= 2, "multiclass_reliability: at least two classes required");
  std::vector<CalibrationCurve> out;
  for (std::size_t c = 0; c < k; ++c) {
    Vector p(probs.size());
    std::vector<int> y(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      detail::require(probs[i].size() == k, "multiclass_reliability: ragged probability vectors");
      detail::require(labels[i] < k, "multiclass_reliability: label out of range");
      p[i] = probs[i][c];
      y[i] = labels[i] == c ? 1 : 0;
    }
    out.push_back(binary_reliability(p, y, delta, scheme));
  }
  return out;
}

// Regularized lower incomplete gamma P(k/2, s/2).
inline double chi_square_cdf(double s, unsigned k) {
  detail::require(s >= 0 && k >= 1, "chi_square_cdf: need s >= 0 and k >= 1");
  if (s == 0) return 0.0;
  if (std::isinf(s)) return 1.0;
  return boost::math::gamma_p(0.5 * static_cast<double>(k), 0.5 * s);
}

struct RegressionCalibration {
  CalibrationCurve curve;
  Vector p_hat;  // per retained test point, in input order
};

// p̂ᵢ = χ²_d CDF of the Mahalanobis residual under Σᵢ, p̌ᵢ = fraction of test
// points with p̂ⱼ ≤ p̂ᵢ. Σᵢ that fail Cholesky even after +1e-9·I are skipped
// and counted in curve.excluded.
inline RegressionCalibration regression_calibration(const std::vector<Vector>& means,
                                                    const std::vector<std::vector<Vector>>& covs,
                                                    const std::vector<Vector>& truths) {
  const std::size_t n = means.size();
  detail::require(n >= 2 && covs.size() == n && truths.size() == n,
                  "regression_calibration: need >= 2 points with matching means, covariances and truths");
  const std::size_t d = means.front().size();
  RegressionCalibration r;
  r.curve.scheme = "chi-square";
  for (std::size_t i = 0; i < n; ++i) {
    detail::require(means[i].size() == d && truths[i].size() == d && covs[i].size() == d,
                    "regression_calibration: dimension mismatch");
    Eigen::MatrixXd S(d, d);
    Eigen::VectorXd e(d);
    for (std::size_t a = 0; a < d; ++a) {
      detail::require(covs[i][a].size() == d, "regression_calibration: covariance must be square");
      e(static_cast<Eigen::Index>(a)) = means[i][a] - truths[i][a];
      for (std::size_t b = 0; b < d; ++b) S(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = covs[i][a][b];
    }
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) llt.compute(S + 1e-9 * Eigen::MatrixXd::Identity(d, d));
    if (llt.info() != Eigen::Success || !e.allFinite()) {
      ++r.curve.excluded;
      continue;
    }
    const double m = e.dot(llt.solve(e));
    if (!std::isfinite(m)) {
      ++r.curve.excluded;
      continue;
    }
    r.p_hat.push_back(chi_square_cdf(std::max(0.0, m), static_cast<unsigned>(d)));
  }
  if (r.p_hat.empty()) throw EvaluationError("regression_calibration: every covariance is singular");
  Vector sorted = r.p_hat;
  std::sort(sorted.begin(), sorted.end());
  const double total = static_cast<double>(sorted.size());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    r.curve.points.push_back({sorted[i], static_cast<double>(j) / total, j - i});
    i = j;
  }
  r.curve.degenerate = r.curve.points.size() == 1;
  return r;
}

inline RegressionCalibration regression_calibration(const std::vector<RegressionSummary>& summaries,
                                                    const std::vector<Vector>& truths) {
  std::vector<Vector> means;
  std::vector<std::vector<Vector>> covs;
  for (const auto& s : summaries) {
    detail::require(s.total_cov.has_value(), "regression_calibration: summaries need a total covariance");
    means.push_back(s.mean);
    covs.push_back(*s.total_cov);
  }
  return regression_calibration(means, covs, truths);
}

namespace detail {

// Nodes of the curve extended to p̂ = 0 and 1 with the end values of p̌.
inline std::vector<CurvePoint> extended_nodes(const CalibrationCurve& c) {
  require(c.points.size() >= 2, "curve summary: at least two points required");
  c.validate();
  std::vector<CurvePoint> pts = c.points;
  if (pts.front().p_hat > 0) pts.insert(pts.begin(), {0.0, pts.front().p_check, 0});
  if (pts.back().p_hat < 1) pts.push_back({1.0, pts.back().p_check, 0});
  return pts;
}

}  // namespace detail

// ∫₀¹ p̌ dp̂ by the trapezoid rule over the (extended) nodes.
inline double auc(const CalibrationCurve& c) {
  const auto pts = detail::extended_nodes(c);
  double s = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    s += 0.5 * (pts[i].p_hat - pts[i - 1].p_hat) * (pts[i].p_check + pts[i - 1].p_check);
  return s;
}

// sqrt(∫₀¹ (p̌ − p̂)² dp̂) for the piecewise-linear curve; on each segment the
// gap is linear, so the integral of its square is exact.
inline double curve_distance(const CalibrationCurve& c) {
  const auto pts = detail::extended_nodes(c);
  double s = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double a = pts[i - 1].p_check - pts[i - 1].p_hat, b = pts[i].p_check - pts[i].p_hat;
    s += (pts[i].p_hat - pts[i - 1].p_hat) * (a * a + a * b + b * b) / 3.0;
  }
  return std::sqrt(s);
}

// Count-weighted mean of p̂ − p̌: positive when predictions exceed observed frequencies.
inline double calibration_gap(const CalibrationCurve& c) {
  double s = 0.0, n = 0.0;
  for (const auto& p : c.points) {
    s += static_cast<double>(p.n) * (p.p_hat - p.p_check);
    n += static_cast<double>(p.n);
  }
  return n > 0 ? s / n : 0.0;
}

// Count-weighted mean of how far predictions sit beyond the observed
// frequency, away from ½: positive means overconfident.
inline double overconfidence(const CalibrationCurve& c) {
  double s = 0.0, n = 0.0;
  for (const auto& p : c.points) {
    const double side = p.p_hat > 0.5 ? 1.0 : (p.p_hat < 0.5 ? -1.0 : 0.0);
    s += static_cast<double>(p.n) * side * (p.p_hat - p.p_check);
    n += static_cast<double>(p.n);
  }
  return n > 0 ? s / n : 0.0;
}

// Σ_b (n_b/n)·|mean predicted_b − mean observed_b| over equal-width bins.
inline double ece(std::span<const double> predicted, std::span<const int> observed, std::size_t n_bins = 10) {
  detail::require_binary_inputs(predicted, observed);
  detail::require(n_bins >= 1, "ece: n_bins must be >= 1");
  Vector sp(n_bins, 0.0), so(n_bins, 0.0);
  std::vector<std::size_t> cnt(n_bins, 0);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto b = std::min(n_bins - 1, static_cast<std::size_t>(predicted[i] * static_cast<double>(n_bins)));
    sp[b] += predicted[i];
    so[b] += observed[i];
    ++cnt[b];
  }
  double e = 0.0;
  for (std::size_t b = 0; b < n_bins; ++b) e += std::abs(sp[b] - so[b]);
  return e / static_cast<double>(predicted.size());
}

// Kolmogorov–Smirnov statistic of the sample against U(0,1).
inline double ks_uniform(Vector v) {
  detail::require(!v.empty(), "ks_uniform: empty sample");
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double d = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double u = std::clamp(v[i], 0.0, 1.0);
    d = std::max({d, static_cast<double>(i + 1) / n - u, u - static_cast<double>(i) / n});
  }
  return d;
}

struct ScoreReport {
  double log_score = 0.0;  // mean log p(outcome), higher is better
  double brier = 0.0;      // mean Σ_k (p_k − 𝕀[k=y])², in [0,2], lower is better
  std::size_t n = 0;
  bool zero_probability = false;  // some outcome had probability 0; log_score is −∞

  double oriented_brier() const { return -brier; }
};

inline ScoreReport scoring_rules(const std::vector<Vector>& probs, std::span<const std::size_t> outcomes) {
  detail::require(!probs.empty() && probs.size() == outcomes.size(), "scoring_rules: lists must match and be nonempty");
  ScoreReport r;
  r.n = probs.size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& p = probs[i];
    detail::require(outcomes[i] < p.size(), "scoring_rules: outcome out of range");
    double sum = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      detail::require(p[k] >= 0 && p[k] <= 1, "scoring_rules: probability outside [0,1]");
      sum += p[k];
      const double t = p[k] - (k == outcomes[i] ? 1.0 : 0.0);
      r.brier += t * t;
    }
    detail::require(std::abs(sum - 1.0) <= 1e-6, "scoring_rules: probabilities must sum to 1");
    if (p[outcomes[i]] > 0) r.log_score += std::log(p[outcomes[i]]);
    else r.zero_probability = true;
  }
  r.brier /= static_cast<double>(r.n);
  r.log_score = r.zero_probability ? -std::numeric_limits<double>::infinity() : r.log_score / static_cast<double>(r.n);
  return r;
}

// Mean log N(y; ŷ, Σ_total) of regression predictions.
inline double gaussian_log_score(const std::vector<RegressionSummary>& summaries, const std::vector<Vector>& truths) {
  detail::require(!summaries.empty() && summaries.size() == truths.size(), "gaussian_log_score: lists must match");
  double s = 0.0;
  for (std::size_t i = 0; i < summaries.size(); ++i) {
    const auto& r = summaries[i];
    detail::require(r.total_cov.has_value(), "gaussian_log_score: summaries need a total covariance");
    const std::size_t d = r.mean.size();
    Eigen::MatrixXd S(d, d);
    Eigen::VectorXd e(d);
    for (std::size_t a = 0; a < d; ++a) {
      e(static_cast<Eigen::Index>(a)) = truths[i][a] - r.mean[a];
      for (std::size_t b = 0; b < d; ++b)
        S(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = (*r.total_cov)[a][b];
    }
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) throw EvaluationError("gaussian_log_score: covariance not positive definite");
    const Eigen::MatrixXd L = llt.matrixL();
    s += -0.5 * e.dot(llt.solve(e)) - L.diagonal().array().log().sum() - 0.5 * static_cast<double>(d) * kLog2Pi;
  }
  return s / static_cast<double>(summaries.size());
}

// ---------------------------------------------------------------- output

inline std::string curve_csv(const CalibrationCurve& c) {
  std::string s = "p_hat,p_check,n_bin\n";
  for (const auto& p : c.points) s += io::num(p.p_hat) + "," + io::num(p.p_check) + "," + std::to_string(p.n) + "\n";
  return s;
}

inline nlohmann::json to_json(const CalibrationCurve& c) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : c.points) pts.push_back({p.p_hat, p.p_check, p.n});
  return {{"scheme", c.scheme}, {"delta", c.delta}, {"excluded", c.excluded}, {"degenerate", c.degenerate},
          {"points", pts}};
}

inline nlohmann::json to_json(const ScoreReport& r) {
  nlohmann::json j = {{"brier", r.brier}, {"n", r.n}, {"zero_probability", r.zero_probability}};
  j["log_score"] = r.zero_probability ? nlohmann::json(nullptr) : nlohmann::json(r.log_score);
  return j;
}

// Scalar summary of a curve; AUC and distance need at least two points.
inline nlohmann::json calibration_report(const CalibrationCurve& c) {
  nlohmann::json j = {{"scheme", c.scheme}, {"n_points", c.points.size()}, {"excluded", c.excluded},
                      {"degenerate", c.degenerate}, {"calibration_gap", calibration_gap(c)}};
  if (c.points.size() >= 2) {
    j["auc"] = auc(c);
    j["curve_distance"] = curve_distance(c);
  } else {
    j["auc"] = nullptr;
    j["curve_distance"] = nullptr;
  }
  return j;
}

}  // namespace bnn
