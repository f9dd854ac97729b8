#pragma once

// Markov chain samplers over parameter space: Metropolis(-Hastings), HMC with
// the leapfrog integrator, SGLD, warm restarts, and chain diagnostics.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnn/error.hpp"
#include "bnn/io.hpp"
#include "bnn/model.hpp"
#include "bnn/random.hpp"

namespace bnn {

// An unnormalized log density over R^d. Only the members a kernel needs have
// to be set: MH uses log_density, HMC value_and_gradient, SGLD
// stochastic_gradient.
struct LogTarget {
  std::size_t dim = 0;
  // kLogZero outside the support.
  std::function<double(std::span<const double>)> log_density;
  // May throw NumericFailure.
  std::function<LogJointGradient(std::span<const double>)> value_and_gradient;
  // Unbiased estimate of the gradient (e.g. from a minibatch).
  std::function<Vector(std::span<const double>, Rng&)> stochastic_gradient;
};

// batch_size 0 means full-batch gradients for SGLD.
inline LogTarget make_target(const LogJointModel& model, std::size_t batch_size = 0) {
  LogTarget t;
  t.dim = model.dim();
  t.log_density = [&model](std::span<const double> th) { return log_joint(model, th); };
  t.value_and_gradient = [&model](std::span<const double> th) { return log_joint_with_gradient(model, th); };
  const std::size_t n = model.data().size();
  if (batch_size == 0 || batch_size >= n) {
    t.stochastic_gradient = [&model](std::span<const double> th, Rng&) { return grad_log_joint(model, th); };
  } else {
    t.stochastic_gradient = [&model, batch_size, n](std::span<const double> th, Rng& rng) {
      return minibatch_log_joint_with_gradient(model, th, sample_batch(n, batch_size, rng), n).gradient;
    };
  }
  return t;
}

// ---------------------------------------------------------------- kernels

struct Proposal {
  enum class Kind { Gaussian, UniformWindow };
  Kind kind = Kind::Gaussian;
  // One scale per coordinate, or a single scale broadcast to all.
  Vector scale = {1.0};

  static Proposal gaussian(double s) { return {Kind::Gaussian, {s}}; }
  static Proposal uniform_window(double eps) { return {Kind::UniformWindow, {eps}}; }

  void validate(std::size_t dim) const {
    detail::require(scale.size() == 1 || scale.size() == dim, "proposal: scale length must be 1 or d");
    for (double s : scale) detail::require(s > 0, "proposal: scales must be positive");
  }
  Vector propose(std::span<const double> x, Rng& rng) const {
    Vector y(x.begin(), x.end());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double s = scale.size() == 1 ? scale[0] : scale[i];
      y[i] += kind == Kind::Gaussian ? rng.normal(0.0, s) : rng.uniform(-s, s);
    }
    return y;
  }
};

struct ChainState {
  Vector x;
  double log_density = 0.0;
};

struct MHStep {
  ChainState state;
  bool accepted = false;
};

// Symmetric proposals only, so the Hastings correction is 1.
inline MHStep mh_step(const LogTarget& target, const ChainState& current, const Proposal& proposal, Rng& rng) {
  detail::require(!is_log_zero(current.log_density), "mh_step: current log density must be finite");
  Vector y = proposal.propose(current.x, rng);
  const double fy = target.log_density(y);
  const double log_u = std::log(rng.uniform());
  if (is_log_zero(fy) || !(log_u < fy - current.log_density)) return {current, false};
  return {{std::move(y), fy}, true};
}

struct HMCConfig {
  double dt = 0.1;
  std::size_t steps = 10;
  double momentum_scale = 1.0;
  // Burn-in step-size adaptation toward target_accept.
  bool adapt = true;
  double target_accept = 0.8;

  void validate() const {
    detail::require(dt > 0 && steps >= 1 && momentum_scale > 0, "HMCConfig: dt, L and sigma_v must be positive");
    detail::require(target_accept > 0 && target_accept < 1, "HMCConfig: target acceptance must be in (0,1)");
  }
};

struct LeapfrogState {
  Vector x, v;
  double log_density = 0.0;
  bool finite = true;
};

inline double log_momentum_density(std::span<const double> v, double sigma_v) {
  double s = 0;
  for (double e : v) s += e * e;
  return -0.5 * s / (sigma_v * sigma_v);
}

// H = log f(x) + log Q(v). Half kick v -= (dt/2)·∂log f/∂x, drift
// x += dt·∂log Q/∂v = -dt·v/σ_v², half kick.
inline LeapfrogState leapfrog(const LogTarget& target, Vector x, Vector v, double dt, std::size_t steps,
                              double sigma_v) {
  const double inv_var = 1.0 / (sigma_v * sigma_v);
  auto eval = [&](const Vector& at) -> std::optional<LogJointGradient> {
    for (double e : at)
      if (!std::isfinite(e)) return std::nullopt;
    try {
      auto g = target.value_and_gradient(at);
      if (!std::isfinite(g.value) || is_log_zero(g.value)) return std::nullopt;
      for (double e : g.gradient)
        if (!std::isfinite(e)) return std::nullopt;
      return g;
    } catch (const NumericFailure&) {
      return std::nullopt;
    }
  };
  auto g = eval(x);
  if (!g) return {std::move(x), std::move(v), kLogZero, false};
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      v[i] -= 0.5 * dt * g->gradient[i];
      x[i] -= dt * v[i] * inv_var;
    }
    g = eval(x);
    if (!g) return {std::move(x), std::move(v), kLogZero, false};
    for (std::size_t i = 0; i < x.size(); ++i) v[i] -= 0.5 * dt * g->gradient[i];
  }
  for (double e : v)
    if (!std::isfinite(e)) return {std::move(x), std::move(v), kLogZero, false};
  return {std::move(x), std::move(v), g->value, true};
}

struct HMCStep {
  ChainState state;
  bool accepted = false;
  bool divergent = false;
  double delta_h = 0.0;
  double accept_prob = 0.0;
};

inline HMCStep hmc_step(const LogTarget& target, const ChainState& current, const HMCConfig& cfg, Rng& rng) {
  cfg.validate();
  Vector v(current.x.size());
  for (double& e : v) e = rng.normal(0.0, cfg.momentum_scale);
  const double h0 = current.log_density + log_momentum_density(v, cfg.momentum_scale);
  LeapfrogState end = leapfrog(target, current.x, v, cfg.dt, cfg.steps, cfg.momentum_scale);
  const double log_u = std::log(rng.uniform());
  if (!end.finite) return {current, false, true, NAN, 0.0};
  const double dh = end.log_density + log_momentum_density(end.v, cfg.momentum_scale) - h0;
  if (!std::isfinite(dh)) return {current, false, true, dh, 0.0};
  const double p = dh >= 0 ? 1.0 : std::exp(dh);
  if (log_u < dh) return {{std::move(end.x), end.log_density}, true, false, dh, p};
  return {current, false, false, dh, p};
}

// ε_t = max(ε_min, a·(b+t)^-γ).
struct SGLDSchedule {
  double a = 1e-3;
  double b = 1.0;
  double gamma = 0.55;
  double eps_min = 0.0;

  static SGLDSchedule constant(double eps) { return {eps, 1.0, 0.0, 0.0}; }
  double operator()(std::size_t t) const {
    return std::max(eps_min, a * std::pow(b + static_cast<double>(t), -gamma));
  }
  void validate() const {
    detail::require(a > 0 && b > 0 && gamma >= 0 && eps_min >= 0, "SGLDSchedule: invalid parameters");
  }
};

// θ + (ε/2)·ĝ + η with η ~ N(0, ε·I), ĝ the stochastic gradient of the log joint.
inline Vector sgld_step(const LogTarget& target, std::span<const double> theta, double eps, Rng& rng,
                        bool inject_noise = true) {
  detail::require(eps > 0, "sgld_step: learning rate must be positive");
  const Vector g = target.stochastic_gradient(theta, rng);
  Vector out(theta.begin(), theta.end());
  const double sd = std::sqrt(eps);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += 0.5 * eps * g[i];
    if (inject_noise) out[i] += sd * rng.normal();
  }
  return out;
}

inline Vector sgld_step(const LogJointModel& model, std::span<const double> theta, double eps,
                        const std::vector<std::size_t>& batch, std::size_t full_size, Rng& rng,
                        bool inject_noise = true) {
  LogTarget t;
  t.stochastic_gradient = [&](std::span<const double> th, Rng&) {
    return minibatch_log_joint_with_gradient(model, th, batch, full_size).gradient;
  };
  return sgld_step(t, theta, eps, rng, inject_noise);
}

// ---------------------------------------------------------------- chains

struct MHKernel {
  Proposal proposal;
};
struct HMCKernel {
  HMCConfig config;
};
struct SGLDKernel {
  SGLDSchedule schedule;
};
using Kernel = std::variant<MHKernel, HMCKernel, SGLDKernel>;

inline std::string kernel_name(const Kernel& k) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, MHKernel>) return "mh";
        else if constexpr (std::is_same_v<T, HMCKernel>) return "hmc";
        else return "sgld";
      },
      k);
}

inline nlohmann::json to_json(const Kernel& k) {
  nlohmann::json j = {{"kind", kernel_name(k)}};
  if (auto* m = std::get_if<MHKernel>(&k)) {
    j["proposal"] = m->proposal.kind == Proposal::Kind::Gaussian ? "gaussian" : "uniform-window";
    j["scale"] = m->proposal.scale;
  } else if (auto* h = std::get_if<HMCKernel>(&k)) {
    j["dt"] = h->config.dt;
    j["steps"] = h->config.steps;
    j["momentum_scale"] = h->config.momentum_scale;
    j["adapt"] = h->config.adapt;
    j["target_accept"] = h->config.target_accept;
  } else {
    const auto& s = std::get<SGLDKernel>(k).schedule;
    j["a"] = s.a;
    j["b"] = s.b;
    j["gamma"] = s.gamma;
    j["eps_min"] = s.eps_min;
  }
  return j;
}

struct ChainConfig {
  std::size_t n_samples = 1000;
  std::size_t burn_in = 200;
  std::size_t thinning = 1;
  std::uint64_t seed = 0;

  std::size_t stored() const { return n_samples > burn_in ? (n_samples - burn_in) / thinning : 0; }
  void validate() const {
    detail::require(n_samples >= 1 && thinning >= 1, "ChainConfig: n_samples and thinning must be positive");
    if (stored() < 1) throw ConfigError("ChainConfig: burn-in and thinning leave no stored samples");
  }
};

inline nlohmann::json to_json(const ChainConfig& c) {
  return {{"n_samples", c.n_samples}, {"burn_in", c.burn_in}, {"thinning", c.thinning}, {"seed", c.seed}};
}

struct SampleStore {
  std::vector<Vector> samples;
  std::vector<double> log_joint;
  std::size_t proposed = 0;
  std::size_t accepted = 0;
  std::size_t divergences = 0;
  double acceptance_rate = 0.0;
  // HMC step size after burn-in adaptation; 0 for other kernels.
  double final_step_size = 0.0;
  nlohmann::json config;

  bool operator==(const SampleStore&) const = default;
};

// One chain: n_samples transitions, the first burn_in discarded, then the
// last state of every block of `thinning` transitions kept.
inline SampleStore run_chain(const Kernel& kernel, const LogTarget& target, const ChainConfig& cfg,
                             std::span<const double> theta0) {
  cfg.validate();
  detail::require(theta0.size() == target.dim, "run_chain: initial point has the wrong dimension");
  for (double e : theta0) detail::require(std::isfinite(e), "run_chain: initial point must be finite");

  Rng rng = Rng(cfg.seed).stream(kernel_name(kernel));
  SampleStore store;
  store.config = {{"chain", to_json(cfg)}, {"kernel", to_json(kernel)}};

  ChainState state{Vector(theta0.begin(), theta0.end()), 0.0};
  const bool needs_density = !std::holds_alternative<SGLDKernel>(kernel);
  if (needs_density) {
    state.log_density = target.log_density(state.x);
    detail::require(!is_log_zero(state.log_density), "run_chain: log density at the initial point is -inf");
  }

  HMCConfig hmc;
  double log_dt = 0.0, log_dt_bar = 0.0;
  if (auto* h = std::get_if<HMCKernel>(&kernel)) {
    hmc = h->config;
    hmc.validate();
    log_dt = log_dt_bar = std::log(hmc.dt);
  }

  for (std::size_t t = 0; t < cfg.n_samples; ++t) {
    if (auto* m = std::get_if<MHKernel>(&kernel)) {
      MHStep s = mh_step(target, state, m->proposal, rng);
      state = std::move(s.state);
      store.accepted += s.accepted;
    } else if (std::holds_alternative<HMCKernel>(kernel)) {
      HMCStep s = hmc_step(target, state, hmc, rng);
      state = std::move(s.state);
      store.accepted += s.accepted;
      store.divergences += s.divergent;
      if (hmc.adapt && t < cfg.burn_in) {
        // Robbins-Monro on log Δt with averaged iterate used after burn-in.
        const double gain = 1.0 / std::pow(static_cast<double>(t) + 10.0, 0.6);
        log_dt += gain * (s.accept_prob - hmc.target_accept);
        log_dt = std::clamp(log_dt, std::log(hmc.dt) - 10.0, std::log(hmc.dt) + 3.0);
        const double w = 1.0 / (static_cast<double>(t) + 1.0);
        log_dt_bar = (1 - w) * log_dt_bar + w * log_dt;
        hmc.dt = std::exp(t + 1 == cfg.burn_in ? log_dt_bar : log_dt);
      }
    } else {
      const auto& sched = std::get<SGLDKernel>(kernel).schedule;
      state.x = sgld_step(target, state.x, sched(t), rng);
      store.accepted += 1;
    }
    ++store.proposed;
    if (t >= cfg.burn_in && (t - cfg.burn_in + 1) % cfg.thinning == 0) {
      for (double e : state.x)
        if (!std::isfinite(e)) throw NumericFailure("run_chain: sampler produced a non-finite state");
      store.samples.push_back(state.x);
      store.log_joint.push_back(needs_density ? state.log_density : target.log_density(state.x));
    }
  }
  store.acceptance_rate = static_cast<double>(store.accepted) / static_cast<double>(store.proposed);
  if (std::holds_alternative<HMCKernel>(kernel)) store.final_step_size = hmc.dt;
  return store;
}

inline SampleStore run_chain(const Kernel& kernel, const LogJointModel& model, const ChainConfig& cfg,
                             std::span<const double> theta0, std::size_t batch_size = 0) {
  return run_chain(kernel, make_target(model, batch_size), cfg, theta0);
}

// Seed of restart r; restart 0 uses the configured seed unchanged.
inline std::uint64_t restart_seed(std::uint64_t seed, std::size_t r) {
  return r == 0 ? seed : Rng(seed).stream("restart").substream(r)();
}

using InitSampler = std::function<Vector(Rng&)>;

// Independent chains from fresh initial draws; the initial point of restart
// r is drawn from Rng(restart_seed(seed, r)).stream("init").
inline std::vector<SampleStore> warm_restart_schedule(const Kernel& kernel, const LogTarget& target,
                                                      std::size_t n_restarts, const InitSampler& init,
                                                      const ChainConfig& cfg) {
  detail::require(n_restarts >= 1, "warm_restart_schedule: need at least one restart");
  std::vector<SampleStore> out;
  for (std::size_t r = 0; r < n_restarts; ++r) {
    ChainConfig c = cfg;
    c.seed = restart_seed(cfg.seed, r);
    Rng init_rng = Rng(c.seed).stream("init");
    const Vector theta0 = init(init_rng);
    out.push_back(run_chain(kernel, target, c, theta0));
    out.back().config["restart"] = r;
  }
  return out;
}

// ---------------------------------------------------------------- diagnostics

struct ChainDiagnostics {
  double acceptance_rate = 0.0;
  // autocorrelation[i][k] for coordinate i, lags 0..min(50, n-1).
  std::vector<Vector> autocorrelation;
  Vector ess;
  bool degenerate = false;
};

namespace detail {

inline double autocorr_at(const Vector& c, double var_sum, std::size_t k) {
  double s = 0;
  for (std::size_t t = 0; t + k < c.size(); ++t) s += c[t] * c[t + k];
  return s / var_sum;
}

}  // namespace detail

inline ChainDiagnostics diagnostics(const std::vector<Vector>& samples, double acceptance_rate = 1.0,
                                    std::size_t max_lag = 50) {
  detail::require(samples.size() >= 2, "diagnostics: need at least two samples");
  const std::size_t n = samples.size(), d = samples.front().size();
  ChainDiagnostics out;
  out.acceptance_rate = acceptance_rate;
  for (std::size_t i = 0; i < d; ++i) {
    Vector c(n);
    double m = 0;
    for (std::size_t t = 0; t < n; ++t) m += (c[t] = samples[t][i]);
    m /= static_cast<double>(n);
    double var_sum = 0;
    for (double& e : c) {
      e -= m;
      var_sum += e * e;
    }
    Vector rho;
    if (!(var_sum > 0)) {
      out.degenerate = true;
      out.autocorrelation.push_back(Vector(std::min(max_lag, n - 1) + 1, 1.0));
      out.ess.push_back(1.0);
      continue;
    }
    for (std::size_t k = 0; k <= std::min(max_lag, n - 1); ++k) rho.push_back(detail::autocorr_at(c, var_sum, k));
    double tail = 0;
    for (std::size_t k = 1; k <= n / 2; ++k) {
      const double r = k < rho.size() ? rho[k] : detail::autocorr_at(c, var_sum, k);
      if (r < 0) break;
      tail += r;
    }
    out.autocorrelation.push_back(std::move(rho));
    out.ess.push_back(static_cast<double>(n) / (1.0 + 2.0 * tail));
  }
  return out;
}

inline ChainDiagnostics diagnostics(const SampleStore& store, std::size_t max_lag = 50) {
  return diagnostics(store.samples, store.acceptance_rate, max_lag);
}

// ---------------------------------------------------------------- persistence

// dir/header.json (config, acceptance, log joints) + dir/samples.csv.
inline void save_sample_store(const SampleStore& s, const std::filesystem::path& dir) {
  nlohmann::json h = {{"config", s.config},
                      {"proposed", s.proposed},
                      {"accepted", s.accepted},
                      {"divergences", s.divergences},
                      {"acceptance_rate", s.acceptance_rate},
                      {"final_step_size", s.final_step_size},
                      {"n_stored", s.samples.size()},
                      {"log_joint", s.log_joint}};
  std::vector<std::string> header;
  if (!s.samples.empty())
    for (std::size_t i = 0; i < s.samples.front().size(); ++i) header.push_back("theta" + std::to_string(i));
  io::write_file_atomic(dir / "samples.csv", io::matrix_csv(s.samples, header));
  io::write_file_atomic(dir / "header.json", h.dump(2) + "\n");
}

inline SampleStore load_sample_store(const std::filesystem::path& dir) {
  SampleStore s;
  try {
    const auto h = nlohmann::json::parse(io::read_file(dir / "header.json"));
    s.config = h.at("config");
    s.proposed = h.at("proposed");
    s.accepted = h.at("accepted");
    s.divergences = h.at("divergences");
    s.acceptance_rate = h.at("acceptance_rate");
    s.final_step_size = h.at("final_step_size");
    s.log_joint = h.at("log_joint").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sample store header: ") + e.what());
  }
  s.samples = io::parse_matrix_csv(io::read_file(dir / "samples.csv"), true);
  if (s.samples.size() != s.log_joint.size()) throw ConfigError("sample store: row count does not match header");
  return s;
}

}  // namespace bnn
