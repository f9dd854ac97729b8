#pragma once

// Mean-field Gaussian variational inference: reparametrized ELBO estimates,
// Bayes by backprop, learnable (empirical Bayes) priors and last-layer VI.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnn/autodiff.hpp"
#include "bnn/error.hpp"
#include "bnn/io.hpp"
#include "bnn/model.hpp"
#include "bnn/network.hpp"
#include "bnn/optim.hpp"
#include "bnn/random.hpp"

namespace bnn {

// q(θ) = Π N(θᵢ; μᵢ, σᵢ²) with σ = softplus(ρ).
struct MeanFieldGaussian {
  Vector mu;
  Vector rho;

  std::size_t dim() const { return mu.size(); }
  Vector sigma() const {
    Vector s(rho.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = softplus(rho[i]);
    return s;
  }
  void validate() const {
    detail::require(mu.size() == rho.size(), "MeanFieldGaussian: mu and rho differ in length");
    for (std::size_t i = 0; i < mu.size(); ++i)
      detail::require(std::isfinite(mu[i]) && std::isfinite(rho[i]), "MeanFieldGaussian: non-finite parameter");
  }
  static MeanFieldGaussian from_sigma(Vector mu, const Vector& sigma) {
    detail::require(mu.size() == sigma.size(), "MeanFieldGaussian: mu and sigma differ in length");
    Vector rho(sigma.size());
    for (std::size_t i = 0; i < rho.size(); ++i) {
      detail::require(sigma[i] > 0, "MeanFieldGaussian: sigma must be positive");
      rho[i] = softplus_inverse(sigma[i]);
    }
    return {std::move(mu), std::move(rho)};
  }
  bool operator==(const MeanFieldGaussian&) const = default;
};

// μ from the fan-in normal initializer, every σ equal to init_sigma.
template <typename R>
MeanFieldGaussian init_mean_field(const MLPSpec& spec, R& rng, double init_sigma = 0.05) {
  return MeanFieldGaussian::from_sigma(init_params(spec, rng), Vector(spec.param_count(), init_sigma));
}

inline Vector reparam_sample(const MeanFieldGaussian& q, std::span<const double> eps) {
  detail::require(eps.size() == q.dim(), "reparam_sample: noise dimension mismatch");
  Vector theta(q.dim());
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = q.mu[i] + softplus(q.rho[i]) * eps[i];
  return theta;
}

inline double log_q(const MeanFieldGaussian& q, std::span<const double> theta) {
  detail::require(theta.size() == q.dim(), "log_q: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double sd = softplus(q.rho[i]);
    const double z = (theta[i] - q.mu[i]) / sd;
    s += -0.5 * z * z - std::log(sd) - 0.5 * kLog2Pi;
  }
  return s;
}

// KL(q ‖ N(0, σ_p² I)).
inline double kl_to_isotropic(const MeanFieldGaussian& q, double sigma_p) {
  double kl = 0.0;
  const Vector s = q.sigma();
  for (std::size_t i = 0; i < s.size(); ++i)
    kl += std::log(sigma_p / s[i]) + (s[i] * s[i] + q.mu[i] * q.mu[i]) / (2 * sigma_p * sigma_p) - 0.5;
  return kl;
}

// ---------------------------------------------------------------- ELBO

struct ElboEstimate {
  double value = 0.0;
  double std_error = 0.0;
  // True when some draw hit a zero-probability label.
  bool flagged = false;
};

inline ElboEstimate elbo_estimate(const LogJointModel& model, const MeanFieldGaussian& q, std::size_t n_mc, Rng& rng) {
  detail::require(n_mc >= 1, "elbo_estimate: need at least one draw");
  detail::require(q.dim() == model.dim(), "elbo_estimate: q dimension does not match the model");
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t k = 0; k < n_mc; ++k) {
    const Vector theta = reparam_sample(q, rng.normal_vector(q.dim()));
    const double lj = log_joint(model, theta, rng());
    if (is_log_zero(lj)) return {kLogZero, 0.0, true};
    const double v = lj - log_q(q, theta);
    s1 += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(n_mc);
  const double mean = s1 / n;
  const double var = n_mc > 1 ? std::max(0.0, (s2 - n * mean * mean) / (n - 1)) : 0.0;
  return {mean, std::sqrt(var / n), false};
}

struct QuadratureElbo {
  double elbo = 0.0;
  double kl = 0.0;          // KL(q ‖ posterior), posterior normalized on the grid
  double log_evidence = 0.0;  // log of the grid integral of exp(log_joint)
};

// One-parameter ELBO, KL and evidence by the trapezoid rule on a uniform grid.
inline QuadratureElbo quadrature_elbo(const std::function<double(double)>& log_joint_1d, double mu, double sigma,
                                      double lo, double hi, std::size_t points) {
  detail::require(points >= 2 && hi > lo && sigma > 0, "quadrature_elbo: invalid grid");
  const double h = (hi - lo) / static_cast<double>(points - 1);
  Vector w(points, h), lj(points), lq(points);
  w.front() = w.back() = 0.5 * h;
  double mx = -INFINITY;
  for (std::size_t i = 0; i < points; ++i) {
    const double t = lo + h * static_cast<double>(i);
    lj[i] = log_joint_1d(t);
    const double z = (t - mu) / sigma;
    lq[i] = -0.5 * z * z - std::log(sigma) - 0.5 * kLog2Pi;
    mx = std::max(mx, lj[i]);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < points; ++i) z += w[i] * std::exp(lj[i] - mx);
  QuadratureElbo out;
  out.log_evidence = mx + std::log(z);
  for (std::size_t i = 0; i < points; ++i) {
    const double qi = std::exp(lq[i]);
    out.elbo += w[i] * qi * (lj[i] - lq[i]);
    out.kl += w[i] * qi * (lq[i] - (lj[i] - out.log_evidence));
  }
  return out;
}

// ---------------------------------------------------------------- gradients

// f(θ, μ, ρ, extra...) on a tape; θ enters as its own leaf.
using PhiObjective = std::function<Var(Tape&, Var theta, Var mu, Var rho, std::span<const Var> extra)>;

struct ReparamGradient {
  double f = 0.0;
  Vector d_mu, d_rho;
  std::vector<Vector> d_extra;
  // d_mu = pathwise_mu + explicit_mu, likewise for ρ.
  Vector pathwise_mu, pathwise_rho, explicit_mu, explicit_rho;
};

// Gradient of f(t(ε,φ), φ) with respect to φ = (μ, ρ): the explicit
// dependence through φ plus the pathwise term ∂f/∂θ · ∂t/∂φ, where
// ∂t/∂μ = 1 and ∂t/∂ρ = sigmoid(ρ)·ε.
inline ReparamGradient reparam_gradient(const PhiObjective& f, const MeanFieldGaussian& q, std::span<const double> eps,
                                        std::span<const Vector> extra = {}) {
  const Vector theta_v = reparam_sample(q, eps);
  Tape tape;
  const Var mu = tape.leaf(Tensor::vector(q.mu));
  const Var rho = tape.leaf(Tensor::vector(q.rho));
  const Var theta = tape.leaf(Tensor::vector(theta_v));
  std::vector<Var> ex;
  for (const auto& e : extra) ex.push_back(tape.leaf(Tensor::vector(e)));
  const Var out = f(tape, theta, mu, rho, ex);
  tape.backward(out);
  ReparamGradient g;
  g.f = out.item();
  g.explicit_mu = tape.grad(mu).values;
  g.explicit_rho = tape.grad(rho).values;
  const Vector dtheta = tape.grad(theta).values;
  const std::size_t d = q.dim();
  g.pathwise_mu = dtheta;
  g.pathwise_rho.resize(d);
  g.d_mu.resize(d);
  g.d_rho.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    g.pathwise_rho[i] = dtheta[i] * sigmoid(q.rho[i]) * eps[i];
    g.d_mu[i] = g.explicit_mu[i] + g.pathwise_mu[i];
    g.d_rho[i] = g.explicit_rho[i] + g.pathwise_rho[i];
  }
  for (const Var& e : ex) g.d_extra.push_back(tape.grad(e).values);
  return g;
}

inline Var log_q_tape(Var theta, Var mu, Var rho) {
  const Var sd = softplus(rho);
  const double d = static_cast<double>(theta.value().size());
  return sum(square((theta - mu) / sd)) * -0.5 - sum(log(sd)) - 0.5 * d * kLog2Pi;
}

// The pieces of log p(D|θ,ξ) p(θ|ξ) a VI trainer needs, on a tape.
struct VIObjective {
  std::size_t dim = 0;
  std::size_t n_data = 0;
  // Σ log p(y|x,θ) over the batch (all data when batch is null).
  std::function<Var(Tape&, Var theta, Var xi, const std::vector<std::size_t>* batch, std::uint64_t seed)>
      log_likelihood;
  std::function<Var(Tape&, Var theta, Var xi)> log_prior;
};

inline VIObjective vi_objective(const LogJointModel& model) {
  VIObjective o;
  o.dim = model.dim();
  o.n_data = model.data().size();
  o.log_likelihood = [&model](Tape&, Var theta, Var, const std::vector<std::size_t>* batch, std::uint64_t seed) {
    if (model.augmentation()) return log_likelihood_tape(model, theta, batch, seed);
    return log_likelihood_tape(model, theta, batch);
  };
  o.log_prior = [&model](Tape&, Var theta, Var) { return log_prior_tape(model.prior(), model.spec(), theta); };
  return o;
}

// Hyperparameters ξ with a differentiable objective and the map back to
// concrete prior and likelihood components.
struct LearnablePrior {
  VIObjective objective;
  Vector xi0;
  std::vector<std::string> names;
  std::function<std::pair<Prior, Likelihood>(const Vector&)> mapping;
};

// ξ = (log σ_prior, log σ_y) for an isotropic Gaussian prior and a Gaussian
// likelihood whose outputs share one noise scale.
inline LearnablePrior gaussian_scale_prior(const LogJointModel& model, double sigma_prior0, double sigma_y0) {
  detail::require(!model.likelihood().is_classification(), "gaussian_scale_prior: needs a gaussian likelihood");
  detail::require(sigma_prior0 > 0 && sigma_y0 > 0, "gaussian_scale_prior: scales must be positive");
  LearnablePrior lp;
  lp.objective.dim = model.dim();
  lp.objective.n_data = model.data().size();
  lp.objective.log_likelihood = [&model](Tape& tape, Var theta, Var xi, const std::vector<std::size_t>* batch,
                                         std::uint64_t) {
    if (model.data().empty()) return tape.constant(0.0);
    const Tensor x = batch ? detail::gather_rows(model.input_tensor(), *batch) : model.input_tensor();
    const Tensor y = batch ? detail::gather_rows(model.label_tensor_cached(), *batch) : model.label_tensor_cached();
    const Var out = forward_tape(model.spec(), theta, tape.constant(x));
    return sum(per_point_log_likelihood(model.likelihood(), out, y, tape.slice(xi, 1, {})));
  };
  lp.objective.log_prior = [](Tape& tape, Var theta, Var xi) {
    const Var log_s = tape.slice(xi, 0, {});
    const double d = static_cast<double>(theta.value().size());
    return sum(square(theta)) * exp(log_s * -2.0) * -0.5 - log_s * d - 0.5 * d * kLog2Pi;
  };
  lp.xi0 = {std::log(sigma_prior0), std::log(sigma_y0)};
  lp.names = {"log_sigma_prior", "log_sigma_y"};
  const std::size_t m = model.likelihood().output_width();
  lp.mapping = [m](const Vector& xi) {
    return std::pair<Prior, Likelihood>(Prior::isotropic_gaussian(std::exp(xi[0])),
                                        Likelihood::gaussian(std::exp(xi[1]), m));
  };
  return lp;
}

// ---------------------------------------------------------------- training

enum class ElboScaling { PerBatch, KlAnnealed };

struct VITrainConfig {
  std::size_t iterations = 2000;
  double lr = 1e-2;
  // Rate for ξ and for deterministic (non-variational) parameters; defaults to lr.
  std::optional<double> lr_hyper;
  // Geometric decay of both rates to lr·lr_final_scale at the last iteration.
  double lr_final_scale = 1.0;
  std::size_t batch_size = 0;  // 0: full batch
  std::size_t mc_samples = 1;
  OptimizerConfig optimizer;
  ElboScaling scaling = ElboScaling::PerBatch;
  // KlAnnealed: weight of log q − log p(θ) ramps linearly to 1 over this many steps.
  std::size_t anneal_iterations = 0;
  std::uint64_t seed = 0;

  double hyper_rate() const { return lr_hyper.value_or(lr); }
  void validate() const {
    detail::require(iterations >= 1 && mc_samples >= 1, "VITrainConfig: iterations and mc_samples must be >= 1");
    detail::require(lr > 0 && hyper_rate() >= 0 && lr_final_scale > 0, "VITrainConfig: rates must be positive");
    optimizer.validate();
  }
};

struct VITrace {
  std::vector<std::size_t> iteration;
  Vector neg_f;
  Vector running_mean;

  void push(std::size_t t, double v) {
    iteration.push_back(t);
    neg_f.push_back(v);
    const std::size_t w = std::min<std::size_t>(100, neg_f.size());
    double s = 0.0;
    for (std::size_t k = neg_f.size() - w; k < neg_f.size(); ++k) s += neg_f[k];
    running_mean.push_back(s / static_cast<double>(w));
  }
};

inline std::string trace_csv(const VITrace& t) {
  std::string s = "iteration,neg_f,elbo_running_mean\n";
  for (std::size_t i = 0; i < t.iteration.size(); ++i)
    s += std::to_string(t.iteration[i]) + "," + io::num(t.neg_f[i]) + "," + io::num(t.running_mean[i]) + "\n";
  return s;
}

struct VIResult {
  MeanFieldGaussian q;
  Vector xi;
  // Deterministic leading parameters (last-layer mode); empty otherwise.
  Vector psi;
  VITrace trace;
  bool diverged = false;
  std::string message;
};

namespace detail {

// θ_full = (ψ, θ_var): ψ deterministic, θ_var ~ q. ξ feeds the objective.
inline VIResult train_vi(const VIObjective& obj, MeanFieldGaussian q, Vector psi, Vector xi, const VITrainConfig& cfg) {
  cfg.validate();
  q.validate();
  require(psi.size() + q.dim() == obj.dim, "VI: parameter dimensions do not match the objective");
  const bool minibatch = cfg.batch_size > 0 && cfg.batch_size < obj.n_data;
  const double lik_scale =
      minibatch ? static_cast<double>(obj.n_data) / static_cast<double>(cfg.batch_size) : 1.0;

  Rng rng = Rng(cfg.seed).stream("vi");
  Optimizer opt_phi(cfg.optimizer, 2 * q.dim());
  Optimizer opt_psi(cfg.optimizer, psi.size());
  Optimizer opt_xi(cfg.optimizer, xi.size());
  VIResult res;

  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    const double kl_w = cfg.scaling == ElboScaling::KlAnnealed && cfg.anneal_iterations > 0
                            ? std::min(1.0, static_cast<double>(t + 1) / static_cast<double>(cfg.anneal_iterations))
                            : 1.0;
    std::vector<std::size_t> batch;
    if (minibatch) batch = sample_batch(obj.n_data, cfg.batch_size, rng);
    const PhiObjective f = [&](Tape& tape, Var theta, Var mu, Var rho, std::span<const Var> ex) {
      const Var full = ex[0].value().size() ? concat(ex[0], theta) : theta;
      const std::uint64_t seed = rng();
      const Var ll = obj.log_likelihood(tape, full, ex[1], minibatch ? &batch : nullptr, seed);
      const Var lp = obj.log_prior(tape, full, ex[1]);
      return (log_q_tape(theta, mu, rho) - lp) * kl_w - ll * lik_scale;
    };
    Vector g_phi(2 * q.dim(), 0.0), g_psi(psi.size(), 0.0), g_xi(xi.size(), 0.0);
    double f_mean = 0.0;
    const Vector extra[2] = {psi, xi};
    try {
      for (std::size_t k = 0; k < cfg.mc_samples; ++k) {
        const Vector eps = rng.normal_vector(q.dim());
        const ReparamGradient g = reparam_gradient(f, q, eps, extra);
        f_mean += g.f;
        for (std::size_t i = 0; i < q.dim(); ++i) {
          g_phi[i] += g.d_mu[i];
          g_phi[q.dim() + i] += g.d_rho[i];
        }
        for (std::size_t i = 0; i < psi.size(); ++i) g_psi[i] += g.d_extra[0][i];
        for (std::size_t i = 0; i < xi.size(); ++i) g_xi[i] += g.d_extra[1][i];
      }
    } catch (const NumericFailure& e) {
      res.diverged = true;
      res.message = std::string("numeric failure at iteration ") + std::to_string(t) + ": " + e.what();
      break;
    }
    const double inv = 1.0 / static_cast<double>(cfg.mc_samples);
    for (double& v : g_phi) v *= inv;
    for (double& v : g_psi) v *= inv;
    for (double& v : g_xi) v *= inv;
    res.trace.push(t, -f_mean * inv);

    const double lr = scheduled_rate(cfg.lr, cfg.lr_final_scale, t, cfg.iterations);
    const double lr_h = scheduled_rate(cfg.hyper_rate(), cfg.lr_final_scale, t, cfg.iterations);
    Vector phi = q.mu;
    phi.insert(phi.end(), q.rho.begin(), q.rho.end());
    opt_phi.step(phi, g_phi, lr);
    std::copy_n(phi.begin(), q.dim(), q.mu.begin());
    std::copy(phi.begin() + static_cast<std::ptrdiff_t>(q.dim()), phi.end(), q.rho.begin());
    if (lr_h > 0) {
      opt_psi.step(psi, g_psi, lr_h);
      opt_xi.step(xi, g_xi, lr_h);
    }

    bool bad = false;
    for (std::size_t i = 0; i < q.dim(); ++i)
      bad |= !(std::abs(q.mu[i]) <= 1e6) || !(softplus(q.rho[i]) <= 1e6) || !std::isfinite(q.rho[i]);
    for (double v : psi) bad |= !std::isfinite(v);
    for (double v : xi) bad |= !std::isfinite(v);
    if (bad) {
      res.diverged = true;
      res.message = "variational parameters diverged at iteration " + std::to_string(t);
      break;
    }
  }
  res.q = std::move(q);
  res.psi = std::move(psi);
  res.xi = std::move(xi);
  return res;
}

}  // namespace detail

inline VIResult bayes_by_backprop(const LogJointModel& model, const MeanFieldGaussian& q0, const VITrainConfig& cfg) {
  detail::require(q0.dim() == model.dim(), "bayes_by_backprop: q dimension does not match the model");
  return detail::train_vi(vi_objective(model), q0, {}, {}, cfg);
}

// Joint updates of φ (rate lr) and ξ (rate lr_hyper).
inline VIResult learn_prior_bbb(const LearnablePrior& lp, const MeanFieldGaussian& q0, const VITrainConfig& cfg) {
  detail::require(q0.dim() == lp.objective.dim, "learn_prior_bbb: q dimension does not match the model");
  return detail::train_vi(lp.objective, q0, {}, lp.xi0, cfg);
}

struct LastLayerPartition {
  std::size_t first_bayes_layer = 0;
  std::size_t n_deterministic = 0;
  std::size_t n_variational = 0;
};

inline LastLayerPartition last_layer_partition(const MLPSpec& spec, std::size_t n_bayes_layers) {
  detail::require(n_bayes_layers >= 1 && n_bayes_layers <= spec.depth(),
                  "last_layer_partition: layer count out of range");
  LastLayerPartition p;
  p.first_bayes_layer = spec.depth() - n_bayes_layers;
  p.n_deterministic = spec.layer_offset(p.first_bayes_layer);
  p.n_variational = spec.param_count() - p.n_deterministic;
  return p;
}

// Trailing layers variational, leading layers point estimates trained with
// rate lr_hyper (0 freezes them at psi0).
inline VIResult last_layer_bbb(const LogJointModel& model, const LastLayerPartition& part, const Vector& psi0,
                               const MeanFieldGaussian& q0, const VITrainConfig& cfg) {
  detail::require(psi0.size() == part.n_deterministic && q0.dim() == part.n_variational,
                  "last_layer_bbb: dimensions do not match the partition");
  return detail::train_vi(vi_objective(model), q0, psi0, {}, cfg);
}

// ---------------------------------------------------------------- checks

struct PathwiseCheckReport {
  Vector estimator;          // mean reparametrized gradient over (μ, ρ)
  Vector std_error;
  Vector finite_difference;  // of the closed-form expected objective
  Vector pathwise;
  Vector explicit_part;
  double max_rel_dev = 0.0;
};

// Compares the averaged reparametrized gradient of E_q[log q − log joint]
// with central differences of a closed-form expected objective over (μ, ρ).
inline PathwiseCheckReport pathwise_gradient_check(const LogJointModel& model, const MeanFieldGaussian& q,
                                                   const std::function<double(const MeanFieldGaussian&)>& expected,
                                                   std::size_t draws, Rng& rng, double h = 1e-5) {
  detail::require(draws >= 2, "pathwise_gradient_check: need at least two draws");
  const std::size_t d = q.dim();
  const PhiObjective f = [&model](Tape&, Var theta, Var mu, Var rho, std::span<const Var>) {
    return log_q_tape(theta, mu, rho) - log_joint_tape(model, theta);
  };
  PathwiseCheckReport r;
  r.estimator.assign(2 * d, 0.0);
  r.pathwise.assign(2 * d, 0.0);
  r.explicit_part.assign(2 * d, 0.0);
  Vector sq(2 * d, 0.0);
  for (std::size_t k = 0; k < draws; ++k) {
    const ReparamGradient g = reparam_gradient(f, q, rng.normal_vector(d));
    for (std::size_t i = 0; i < d; ++i) {
      r.estimator[i] += g.d_mu[i];
      r.estimator[d + i] += g.d_rho[i];
      sq[i] += g.d_mu[i] * g.d_mu[i];
      sq[d + i] += g.d_rho[i] * g.d_rho[i];
      r.pathwise[i] += g.pathwise_mu[i];
      r.pathwise[d + i] += g.pathwise_rho[i];
      r.explicit_part[i] += g.explicit_mu[i];
      r.explicit_part[d + i] += g.explicit_rho[i];
    }
  }
  const double n = static_cast<double>(draws);
  r.std_error.resize(2 * d);
  for (std::size_t i = 0; i < 2 * d; ++i) {
    r.estimator[i] /= n;
    r.pathwise[i] /= n;
    r.explicit_part[i] /= n;
    r.std_error[i] = std::sqrt(std::max(0.0, sq[i] / n - r.estimator[i] * r.estimator[i]) / (n - 1));
  }
  Vector phi = q.mu;
  phi.insert(phi.end(), q.rho.begin(), q.rho.end());
  r.finite_difference = finite_difference_gradient(
      [&](std::span<const double> p) {
        MeanFieldGaussian qq{Vector(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(d)),
                             Vector(p.begin() + static_cast<std::ptrdiff_t>(d), p.end())};
        return expected(qq);
      },
      phi, h);
  for (std::size_t i = 0; i < 2 * d; ++i)
    r.max_rel_dev = std::max(r.max_rel_dev, std::abs(r.estimator[i] - r.finite_difference[i]) /
                                                std::max(1.0, std::abs(r.finite_difference[i])));
  return r;
}

// ---------------------------------------------------------------- persistence

inline nlohmann::json to_json(const MeanFieldGaussian& q, const MLPSpec& spec) {
  return {{"mu", q.mu}, {"rho", q.rho}, {"spec", to_json(spec)}};
}

inline std::pair<MeanFieldGaussian, MLPSpec> mean_field_from_json(const nlohmann::json& j) {
  try {
    for (const auto& [k, v] : j.items())
      if (k != "mu" && k != "rho" && k != "spec" && k != "psi" && k != "xi")
        throw ConfigError("variational posterior: unknown key " + k);
    MeanFieldGaussian q{j.at("mu").get<Vector>(), j.at("rho").get<Vector>()};
    q.validate();
    return {std::move(q), mlp_spec_from_json(j.at("spec"))};
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("variational posterior: ") + e.what());
  }
}

}  // namespace bnn
