#pragma once

// Approximately-Bayesian posteriors: MC dropout, deep ensembles (Dirac
// mixtures) and diagonal SWAG, plus a single draw_theta over every posterior
// kind the library produces.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnn/autodiff.hpp"
#include "bnn/error.hpp"
#include "bnn/io.hpp"
#include "bnn/mcmc.hpp"
#include "bnn/model.hpp"
#include "bnn/network.hpp"
#include "bnn/optim.hpp"
#include "bnn/random.hpp"
#include "bnn/vi.hpp"

namespace bnn {

// ---------------------------------------------------------------- dropout

// keep[i] is the probability that an input unit of layer i is kept.
struct DropoutConfig {
  Vector keep;
  double lambda = 0.0;

  void validate(const MLPSpec& spec) const {
    detail::require(keep.size() == spec.depth(), "DropoutConfig: one keep rate per layer required");
    for (double p : keep) detail::require(p > 0 && p <= 1, "DropoutConfig: keep rates must lie in (0,1]");
    detail::require(lambda >= 0 && std::isfinite(lambda), "DropoutConfig: lambda must be nonnegative");
  }
  // Keep rate p on every layer but the first (network inputs are never dropped).
  static DropoutConfig hidden(const MLPSpec& spec, double p, double lambda) {
    DropoutConfig c{Vector(spec.depth(), p), lambda};
    c.keep[0] = 1.0;
    return c;
  }
  bool operator==(const DropoutConfig&) const = default;
};

// λ that matches an isotropic N(0, σ²) prior once the log joint is divided by N.
inline double dropout_lambda_for_prior(double sigma_prior, std::size_t n_data) {
  detail::require(sigma_prior > 0 && n_data >= 1, "dropout_lambda_for_prior: invalid arguments");
  return 1.0 / (2.0 * static_cast<double>(n_data) * sigma_prior * sigma_prior);
}

// z_i ~ Bernoulli(p_i) per input unit of every layer. Layers with p_i = 1 get
// an all-ones mask without consuming randomness.
inline LayerMasks draw_masks(const MLPSpec& spec, const DropoutConfig& cfg, Rng& rng) {
  cfg.validate(spec);
  LayerMasks m(spec.depth());
  for (std::size_t i = 0; i < spec.depth(); ++i) {
    m[i].assign(spec.layer(i).input_width, 1.0);
    if (cfg.keep[i] < 1.0)
      for (double& z : m[i]) z = rng.bernoulli(cfg.keep[i]) ? 1.0 : 0.0;
  }
  return m;
}

// W_i ← M_i·diag(z_i) written back into a dense parameter vector.
inline Vector fold_masks(const MLPSpec& spec, std::span<const double> M, const LayerMasks& masks) {
  detail::require(M.size() == spec.param_count(), "fold_masks: parameter length mismatch");
  Vector theta(M.begin(), M.end());
  for (std::size_t i = 0; i < spec.depth() && i < masks.size(); ++i) {
    if (masks[i].empty()) continue;
    const auto& l = spec.layer(i);
    detail::require(masks[i].size() == l.input_width, "fold_masks: mask width mismatch");
    const std::size_t off = spec.layer_offset(i);
    for (std::size_t r = 0; r < l.output_width; ++r)
      for (std::size_t c = 0; c < l.input_width; ++c) theta[off + r * l.input_width + c] *= masks[i][c];
  }
  return theta;
}

// One stochastic pass with fresh masks. Weights are not rescaled by 1/p, so
// the expected output shrinks relative to the dense network when p < 1.
inline Vector mc_dropout_forward(const MLPSpec& spec, std::span<const double> M, const DropoutConfig& cfg,
                                 std::span<const double> x, Rng& rng) {
  const LayerMasks masks = draw_masks(spec, cfg, rng);
  return forward(spec, M, x, OutputMode::Activated, &masks);
}

// Batched forward with an independent mask per row: (W diag(z)) x = W (z ⊙ x),
// so each layer's input rows are multiplied by their own mask. Softmax heads
// stay as logits.
inline Var dropout_forward_tape(const MLPSpec& spec, Var theta, Var inputs, const std::vector<Tensor>* row_masks) {
  Tape& tape = *theta.tape;
  Var cur = inputs;
  std::size_t off = 0;
  for (std::size_t i = 0; i < spec.depth(); ++i) {
    const auto& l = spec.layer(i);
    if (row_masks && i < row_masks->size() && (*row_masks)[i].size() > 0) cur = cur * tape.constant((*row_masks)[i]);
    const Var w = tape.slice(theta, off, {l.output_width, l.input_width});
    off += l.input_width * l.output_width;
    Var z = matmul(cur, transpose(w));
    if (l.bias) {
      z = z + tape.slice(theta, off, {l.output_width});
      off += l.output_width;
    }
    switch (l.activation) {
      case Activation::Identity: break;
      case Activation::Relu: z = relu(z); break;
      case Activation::LeakyRelu: z = leaky_relu(z, l.slope); break;
      case Activation::Tanh: z = tanh(z); break;
      case Activation::Softmax: break;
    }
    cur = z;
  }
  return cur;
}

// Row masks (n x in_i) for every layer; layers with p = 1 get an empty tensor.
inline std::vector<Tensor> draw_row_masks(const MLPSpec& spec, const DropoutConfig& cfg, std::size_t n, Rng& rng) {
  std::vector<Tensor> out(spec.depth());
  for (std::size_t i = 0; i < spec.depth(); ++i) {
    if (cfg.keep[i] >= 1.0) continue;
    out[i] = Tensor::zeros({n, spec.layer(i).input_width});
    for (double& z : out[i].values) z = rng.bernoulli(cfg.keep[i]) ? 1.0 : 0.0;
  }
  return out;
}

// (1/n)·Σ_batch −log p(y|x,θ) + λ·Σθᵢ² on a tape, under the given row masks
// (nullptr: dense network).
inline Var dropout_objective_tape(const LogJointModel& model, const DropoutConfig& cfg, Var theta,
                                  const std::vector<Tensor>* row_masks,
                                  const std::vector<std::size_t>* batch = nullptr) {
  Tape& tape = *theta.tape;
  const Var penalty = sum(square(theta)) * cfg.lambda;
  if (model.data().empty()) return penalty;
  const Tensor x = batch ? detail::gather_rows(model.input_tensor(), *batch) : model.input_tensor();
  const Tensor y = batch ? detail::gather_rows(model.label_tensor_cached(), *batch) : model.label_tensor_cached();
  const Var out = dropout_forward_tape(model.spec(), theta, tape.constant(x), row_masks);
  const Var ll = sum(per_point_log_likelihood(model.likelihood(), out, y));
  return ll * (-1.0 / static_cast<double>(x.rows())) + penalty;
}

inline double dropout_objective(const LogJointModel& model, const DropoutConfig& cfg, std::span<const double> theta,
                                const std::vector<Tensor>* row_masks = nullptr) {
  cfg.validate(model.spec());
  detail::require_theta(model, theta);
  Tape tape;
  return dropout_objective_tape(model, cfg, detail::theta_constant(tape, theta), row_masks).item();
}

struct DropoutTrainConfig {
  std::size_t iterations = 2000;
  double lr = 1e-2;
  double lr_final_scale = 1.0;
  std::size_t batch_size = 0;  // 0: full batch
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(iterations >= 1, "DropoutTrainConfig: iterations must be >= 1");
    detail::require(lr > 0 && lr_final_scale > 0, "DropoutTrainConfig: rates must be positive");
    optimizer.validate();
  }
};

struct DropoutResult {
  Vector M;
  Vector loss;  // objective value per iteration
  bool diverged = false;
  std::string message;
};

// Minimizes the dropout objective with masks resampled every step.
inline DropoutResult dropout_train(const LogJointModel& model, const DropoutConfig& cfg, const DropoutTrainConfig& tc,
                                   Vector theta0) {
  cfg.validate(model.spec());
  tc.validate();
  detail::require_theta(model, theta0);
  const std::size_t n = model.data().size();
  const bool minibatch = tc.batch_size > 0 && tc.batch_size < n;
  Rng rng = Rng(tc.seed).stream("dropout");
  Optimizer opt(tc.optimizer, theta0.size());
  DropoutResult res;
  res.M = std::move(theta0);
  for (std::size_t t = 0; t < tc.iterations; ++t) {
    std::vector<std::size_t> batch;
    if (minibatch) batch = sample_batch(n, tc.batch_size, rng);
    const std::vector<Tensor> masks = draw_row_masks(model.spec(), cfg, minibatch ? tc.batch_size : n, rng);
    Vector grad;
    try {
      Tape tape;
      const Var th = tape.leaf(Tensor::vector(res.M));
      const Var f = dropout_objective_tape(model, cfg, th, &masks, minibatch ? &batch : nullptr);
      tape.backward(f);
      res.loss.push_back(f.item());
      grad = tape.grad(th).values;
    } catch (const NumericFailure& e) {
      res.diverged = true;
      res.message = "numeric failure at iteration " + std::to_string(t) + ": " + e.what();
      break;
    }
    opt.step(res.M, grad, scheduled_rate(tc.lr, tc.lr_final_scale, t, tc.iterations));
    if (!std::all_of(res.M.begin(), res.M.end(), [](double v) { return std::isfinite(v) && std::abs(v) <= 1e6; })) {
      res.diverged = true;
      res.message = "parameters diverged at iteration " + std::to_string(t);
      break;
    }
  }
  return res;
}

// ---------------------------------------------------------------- ensembles

struct DiracMixture {
  std::vector<Vector> members;
  Vector weights;

  void validate() const {
    detail::require(!members.empty(), "DiracMixture: at least one member required");
    detail::require(weights.size() == members.size(), "DiracMixture: one weight per member required");
    double s = 0.0;
    for (double w : weights) {
      detail::require(w > 0 && std::isfinite(w), "DiracMixture: weights must be positive");
      s += w;
    }
    detail::require(std::abs(s - 1.0) <= 1e-12, "DiracMixture: weights must sum to 1");
    for (const auto& m : members) detail::require(m.size() == members.front().size(), "DiracMixture: ragged members");
  }
  static DiracMixture uniform(std::vector<Vector> members) {
    const std::size_t k = members.size();
    detail::require(k >= 1, "DiracMixture: at least one member required");
    return {std::move(members), Vector(k, 1.0 / static_cast<double>(k))};
  }
  std::size_t dim() const { return members.empty() ? 0 : members.front().size(); }
  bool operator==(const DiracMixture&) const = default;
};

// softmax of the log joints, so α_i ∝ p(θ_i|D).
inline Vector posterior_weights(std::span<const double> log_joints) {
  detail::require(!log_joints.empty(), "posterior_weights: empty input");
  const double mx = *std::max_element(log_joints.begin(), log_joints.end());
  detail::require(!is_log_zero(mx), "posterior_weights: every member has zero density");
  Vector w(log_joints.size());
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] = is_log_zero(log_joints[i]) ? 0.0 : std::exp(log_joints[i] - mx);
  for (double& v : w) v /= s;
  return w;
}

enum class EnsembleWeighting { Uniform, Posterior };

struct EnsembleConfig {
  std::size_t members = 5;
  std::size_t iterations = 2000;
  double lr = 1e-2;
  double lr_final_scale = 1.0;
  OptimizerConfig optimizer;
  EnsembleWeighting weighting = EnsembleWeighting::Uniform;
  // A member whose final gradient norm exceeds this is dropped; 0 disables the check.
  double grad_tol = 0.0;
  std::size_t threads = 0;  // 0: hardware concurrency
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(members >= 1, "EnsembleConfig: at least one member required");
    detail::require(iterations >= 1 && lr > 0 && lr_final_scale > 0 && grad_tol >= 0,
                    "EnsembleConfig: invalid optimization settings");
    optimizer.validate();
  }
};

struct EnsembleResult {
  DiracMixture mixture;
  std::vector<double> log_joint;   // per retained member
  std::vector<std::size_t> index;  // original member index of each retained member
  std::vector<std::string> warnings;
};

namespace detail {

struct MemberFit {
  Vector theta;
  double log_joint = kLogZero;
  std::string failure;
};

inline MemberFit fit_member(const LogTarget& target, const EnsembleConfig& cfg, const InitSampler& init,
                            std::size_t k) {
  MemberFit m;
  const std::uint64_t seed = restart_seed(cfg.seed, k);
  Rng init_rng = Rng(seed).stream("init");
  Rng grad_rng = Rng(seed).stream("ensemble");
  m.theta = init(init_rng);
  require(m.theta.size() == target.dim, "ensemble: initializer returned the wrong dimension");
  Optimizer opt(cfg.optimizer, target.dim);
  Vector g;
  try {
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
      g = target.stochastic_gradient(m.theta, grad_rng);
      for (double& v : g) v = -v;
      opt.step(m.theta, g, scheduled_rate(cfg.lr, cfg.lr_final_scale, t, cfg.iterations));
      if (!std::all_of(m.theta.begin(), m.theta.end(), [](double v) { return std::isfinite(v); })) {
        m.failure = "parameters became non-finite at iteration " + std::to_string(t);
        return m;
      }
    }
  } catch (const NumericFailure& e) {
    m.failure = std::string("numeric failure: ") + e.what();
    return m;
  }
  m.log_joint = target.log_density(m.theta);
  if (is_log_zero(m.log_joint)) {
    m.failure = "final log joint is -infinity";
  } else if (cfg.grad_tol > 0) {
    double norm = 0.0;
    for (double v : target.value_and_gradient(m.theta).gradient) norm += v * v;
    if (!(std::sqrt(norm) <= cfg.grad_tol)) m.failure = "gradient norm " + io::num(std::sqrt(norm)) + " above tolerance";
  }
  return m;
}

}  // namespace detail

// K MAP fits of the target from independent initializations, maximized with
// target.stochastic_gradient. Members run in parallel; each has its own seed
// (restart_seed), so the result does not depend on the thread count.
inline EnsembleResult fit_deep_ensemble(const LogTarget& target, const EnsembleConfig& cfg, const InitSampler& init) {
  cfg.validate();
  std::vector<detail::MemberFit> fits(cfg.members);
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t n_threads = std::min(cfg.members, cfg.threads ? cfg.threads : hw);
  if (n_threads <= 1) {
    for (std::size_t k = 0; k < cfg.members; ++k) fits[k] = detail::fit_member(target, cfg, init, k);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(n_threads);
    for (std::size_t w = 0; w < n_threads; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t k = w; k < cfg.members; k += n_threads) fits[k] = detail::fit_member(target, cfg, init, k);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  EnsembleResult res;
  std::vector<Vector> kept;
  for (std::size_t k = 0; k < fits.size(); ++k) {
    if (!fits[k].failure.empty()) {
      res.warnings.push_back("member " + std::to_string(k) + " excluded: " + fits[k].failure);
      continue;
    }
    kept.push_back(std::move(fits[k].theta));
    res.log_joint.push_back(fits[k].log_joint);
    res.index.push_back(k);
  }
  if (kept.empty()) throw NumericFailure("ensemble: no member converged");
  res.mixture = DiracMixture::uniform(std::move(kept));
  if (cfg.weighting == EnsembleWeighting::Posterior) res.mixture.weights = posterior_weights(res.log_joint);
  return res;
}

// Model version: prior included in the objective, full-batch gradients unless
// batch_size is set, fan-in initialization.
inline EnsembleResult fit_deep_ensemble(const LogJointModel& model, const EnsembleConfig& cfg,
                                        std::size_t batch_size = 0) {
  const LogTarget target = make_target(model, batch_size);
  const MLPSpec& spec = model.spec();
  return fit_deep_ensemble(target, cfg, [&spec](Rng& rng) { return init_params(spec, rng); });
}

// ---------------------------------------------------------------- SWAG

// Running first and second moments of collected SGD iterates.
struct SwagMoments {
  Vector mean;
  Vector second_moment;
  std::size_t count = 0;

  static constexpr double kVarianceFloor = 1e-12;

  void add(std::span<const double> theta) {
    if (count == 0) {
      mean.assign(theta.size(), 0.0);
      second_moment.assign(theta.size(), 0.0);
    }
    detail::require(theta.size() == mean.size(), "SwagMoments: dimension mismatch");
    const double n = static_cast<double>(count);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      mean[i] = (n * mean[i] + theta[i]) / (n + 1);
      second_moment[i] = (n * second_moment[i] + theta[i] * theta[i]) / (n + 1);
    }
    ++count;
  }
  Vector variance() const {
    Vector v(mean.size());
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = std::max(kVarianceFloor, second_moment[i] - mean[i] * mean[i]);
    return v;
  }
  std::size_t dim() const { return mean.size(); }
  void validate() const {
    detail::require(count >= 2, "SwagMoments: at least two collected iterates required");
    detail::require(second_moment.size() == mean.size(), "SwagMoments: vectors differ in length");
  }
  bool operator==(const SwagMoments&) const = default;
};

struct SwagConfig {
  std::size_t iterations = 2000;
  double lr = 1e-3;  // constant SGD rate on −log joint
  double warmup_fraction = 0.5;
  std::size_t collect_every = 10;
  std::uint64_t seed = 0;

  std::size_t warmup() const {
    return static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(iterations)));
  }
  // Iterates are collected after steps warmup + c, warmup + 2c, ...
  std::size_t collected() const { return collect_every ? (iterations - warmup()) / collect_every : 0; }
  void validate() const {
    if (!(lr > 0) || !(warmup_fraction >= 0 && warmup_fraction < 1) || collect_every < 1)
      throw ConfigError("SwagConfig: invalid rate, warmup fraction or collection period");
    if (collected() < 2) throw ConfigError("SwagConfig: fewer than two iterates would be collected");
  }
};

inline SwagMoments fit_swag_diagonal(const LogTarget& target, Vector theta0, const SwagConfig& cfg) {
  cfg.validate();
  detail::require(theta0.size() == target.dim, "fit_swag_diagonal: theta0 has the wrong dimension");
  Rng rng = Rng(cfg.seed).stream("swag");
  SwagMoments m;
  Vector& theta = theta0;
  const std::size_t warm = cfg.warmup();
  for (std::size_t t = 1; t <= cfg.iterations; ++t) {
    const Vector g = target.stochastic_gradient(theta, rng);
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += cfg.lr * g[i];
    if (!std::all_of(theta.begin(), theta.end(), [](double v) { return std::isfinite(v); }))
      throw NumericFailure("swag: SGD iterate became non-finite at step " + std::to_string(t));
    if (t > warm && (t - warm) % cfg.collect_every == 0) m.add(theta);
  }
  return m;
}

inline SwagMoments fit_swag_diagonal(const LogJointModel& model, Vector theta0, const SwagConfig& cfg,
                                     std::size_t batch_size = 0) {
  return fit_swag_diagonal(make_target(model, batch_size), std::move(theta0), cfg);
}

// ---------------------------------------------------------------- draw θ

struct DropoutPosterior {
  DropoutConfig config;
  Vector M;
  bool operator==(const DropoutPosterior&) const = default;
};

// Deterministic leading parameters ψ followed by a mean-field tail.
struct LastLayerPosterior {
  Vector psi;
  MeanFieldGaussian q;
  bool operator==(const LastLayerPosterior&) const = default;
};

using Posterior =
    std::variant<SampleStore, MeanFieldGaussian, DropoutPosterior, DiracMixture, SwagMoments, LastLayerPosterior>;

inline std::string posterior_kind(const Posterior& p) {
  switch (p.index()) {
    case 0: return "samples";
    case 1: return "mean-field";
    case 2: return "dropout";
    case 3: return "dirac-mixture";
    case 4: return "swag-diagonal";
    default: return "last-layer";
  }
}

inline std::size_t posterior_dim(const Posterior& p) {
  return std::visit(
      [](const auto& v) -> std::size_t {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, SampleStore>) return v.samples.empty() ? 0 : v.samples.front().size();
        else if constexpr (std::is_same_v<T, DropoutPosterior>) return v.M.size();
        else if constexpr (std::is_same_v<T, LastLayerPosterior>) return v.psi.size() + v.q.dim();
        else return v.dim();
      },
      p);
}

// A single θ from the posterior; spec is needed for the dropout mask layout.
inline Vector draw_theta(const Posterior& p, const MLPSpec& spec, Rng& rng) {
  return std::visit(
      [&](const auto& v) -> Vector {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, SampleStore>) {
          detail::require(!v.samples.empty(), "draw_theta: empty sample store");
          return v.samples[rng.index(v.samples.size())];
        } else if constexpr (std::is_same_v<T, MeanFieldGaussian>) {
          return reparam_sample(v, rng.normal_vector(v.dim()));
        } else if constexpr (std::is_same_v<T, DropoutPosterior>) {
          return fold_masks(spec, v.M, draw_masks(spec, v.config, rng));
        } else if constexpr (std::is_same_v<T, DiracMixture>) {
          v.validate();
          const double u = rng.uniform();
          double c = 0.0;
          for (std::size_t i = 0; i < v.members.size(); ++i) {
            c += v.weights[i];
            if (u < c) return v.members[i];
          }
          return v.members.back();
        } else if constexpr (std::is_same_v<T, SwagMoments>) {
          v.validate();
          const Vector var = v.variance();
          Vector theta = v.mean;
          for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += std::sqrt(var[i]) * rng.normal();
          return theta;
        } else {
          Vector theta = v.psi;
          const Vector tail = reparam_sample(v.q, rng.normal_vector(v.q.dim()));
          theta.insert(theta.end(), tail.begin(), tail.end());
          return theta;
        }
      },
      p);
}

// ---------------------------------------------------------------- persistence

inline nlohmann::json to_json(const DropoutConfig& c) { return {{"keep", c.keep}, {"lambda", c.lambda}}; }

inline nlohmann::json to_json(const SwagMoments& m) {
  return {{"mean", m.mean}, {"second_moment", m.second_moment}, {"count", m.count}};
}

inline SwagMoments swag_from_json(const nlohmann::json& j) {
  try {
    SwagMoments m{j.at("mean").get<Vector>(), j.at("second_moment").get<Vector>(), j.at("count").get<std::size_t>()};
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("swag moments: ") + e.what());
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
}

namespace detail {

inline std::string member_file(std::size_t i) {
  std::string s = std::to_string(i);
  return "member_" + std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s + ".json";
}

}  // namespace detail

// dir/weights.json plus one dir/member_NNN.json per member.
inline void save_dirac_mixture(const DiracMixture& m, const std::filesystem::path& dir) {
  m.validate();
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < m.members.size(); ++i) {
    files.push_back(detail::member_file(i));
    io::write_file_atomic(dir / detail::member_file(i), nlohmann::json{{"theta", m.members[i]}}.dump() + "\n");
  }
  io::write_file_atomic(dir / "weights.json", nlohmann::json{{"weights", m.weights}, {"members", files}}.dump(2) + "\n");
}

inline DiracMixture load_dirac_mixture(const std::filesystem::path& dir) {
  DiracMixture m;
  try {
    const auto w = nlohmann::json::parse(io::read_file(dir / "weights.json"));
    m.weights = w.at("weights").get<Vector>();
    for (const auto& f : w.at("members"))
      m.members.push_back(nlohmann::json::parse(io::read_file(dir / f.get<std::string>())).at("theta").get<Vector>());
    m.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dirac mixture: ") + e.what());
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  return m;
}

// dir/posterior.json names the kind and carries the network; bulky parts
// (samples, ensemble members) go in sibling files.
inline void save_posterior(const Posterior& p, const MLPSpec& spec, const std::filesystem::path& dir) {
  nlohmann::json j = {{"kind", posterior_kind(p)}, {"spec", to_json(spec)}};
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, SampleStore>) save_sample_store(v, dir);
        else if constexpr (std::is_same_v<T, MeanFieldGaussian>) j["q"] = to_json(v, spec);
        else if constexpr (std::is_same_v<T, DropoutPosterior>) {
          j["dropout"] = to_json(v.config);
          j["M"] = v.M;
        } else if constexpr (std::is_same_v<T, DiracMixture>) save_dirac_mixture(v, dir);
        else if constexpr (std::is_same_v<T, SwagMoments>) j["swag"] = to_json(v);
        else {
          j["psi"] = v.psi;
          j["q"] = {{"mu", v.q.mu}, {"rho", v.q.rho}};
        }
      },
      p);
  io::write_file_atomic(dir / "posterior.json", j.dump(2) + "\n");
}

inline std::pair<Posterior, MLPSpec> load_posterior(const std::filesystem::path& dir) {
  try {
    const auto j = nlohmann::json::parse(io::read_file(dir / "posterior.json"));
    const MLPSpec spec = mlp_spec_from_json(j.at("spec"));
    const std::string kind = j.at("kind");
    auto check_dim = [&](Posterior p) {
      if (posterior_dim(p) != spec.param_count()) throw ConfigError("posterior dimension does not match its network");
      return std::pair<Posterior, MLPSpec>{std::move(p), spec};
    };
    if (kind == "samples") return check_dim(load_sample_store(dir));
    if (kind == "mean-field") return check_dim(mean_field_from_json(j.at("q")).first);
    if (kind == "dropout") {
      DropoutConfig c{j.at("dropout").at("keep").get<Vector>(), j.at("dropout").at("lambda").get<double>()};
      c.validate(spec);
      return check_dim(DropoutPosterior{c, j.at("M").get<Vector>()});
    }
    if (kind == "dirac-mixture") return check_dim(load_dirac_mixture(dir));
    if (kind == "swag-diagonal") return check_dim(swag_from_json(j.at("swag")));
    if (kind == "last-layer") {
      MeanFieldGaussian q{j.at("q").at("mu").get<Vector>(), j.at("q").at("rho").get<Vector>()};
      q.validate();
      return check_dim(LastLayerPosterior{j.at("psi").get<Vector>(), q});
    }
    throw ConfigError("unknown posterior kind: " + kind);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("posterior: ") + e.what());
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace bnn
