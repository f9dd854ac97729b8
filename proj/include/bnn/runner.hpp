#pragma once

// Experiment runner behind the `bnn` CLI: JSON config → data → posterior →
// predictive → calibration metrics (→ optional student) with every artifact
// written atomically into one output directory.
//
// Output layout:
//   config.json       normalized echo of the parsed config
//   data.csv          full dataset
//   posterior/        save_posterior() files
//   trace.csv         method trace (chain log joints, losses, ELBO)
//   predictions.json  per test point summaries
//   curve.csv         calibration curve
//   metrics.json      flat key → number
//   student.json      distilled network (when a distill section is present)

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bnn/approx.hpp"
#include "bnn/calibration.hpp"
#include "bnn/data.hpp"
#include "bnn/distill.hpp"
#include "bnn/io.hpp"
#include "bnn/mcmc.hpp"
#include "bnn/model.hpp"
#include "bnn/network.hpp"
#include "bnn/predictive.hpp"
#include "bnn/random.hpp"
#include "bnn/vi.hpp"

namespace bnn::runner {

using nlohmann::json;

// ---------------------------------------------------------------- config

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names = {"mh",      "hmc",      "sgld", "bbb",       "bbb-prior",
                                                 "dropout", "ensemble", "swag", "last-layer"};
  return names;
}

// Every accepted hyperparameter with its default. A null default accepts a
// number or null.
inline json method_defaults(const std::string& name) {
  const json chain = {{"n_samples", 2000u}, {"burn_in", 500u}, {"thinning", 1u}};
  const json vi = {{"iterations", 2000u}, {"lr", 1e-2},          {"lr_final_scale", 1.0},
                   {"batch_size", 0u},    {"mc_samples", 1u},     {"init_sigma", 0.05},
                   {"optimizer", "adam"}, {"scaling", "per-batch"}, {"anneal_iterations", 0u}};
  json d;
  if (name == "mh") {
    d = chain;
    d["proposal"] = "gaussian";
    d["scale"] = 0.5;
  } else if (name == "hmc") {
    d = chain;
    d.update({{"dt", 0.05}, {"steps", 20u}, {"momentum_scale", 1.0}, {"adapt", true}, {"target_accept", 0.8}});
  } else if (name == "sgld") {
    d = chain;
    d.update({{"a", 1e-3}, {"b", 1.0}, {"gamma", 0.55}, {"eps_min", 0.0}, {"batch_size", 0u}});
  } else if (name == "bbb") {
    d = vi;
  } else if (name == "bbb-prior") {
    d = vi;
    d.update({{"sigma_prior0", 1.0}, {"sigma_y0", 0.5}, {"lr_hyper", nullptr}});
  } else if (name == "last-layer") {
    d = vi;
    d.update({{"bayes_layers", 1u}, {"lr_hyper", nullptr}});
  } else if (name == "dropout") {
    d = {{"iterations", 2000u}, {"lr", 1e-2},   {"lr_final_scale", 1.0}, {"batch_size", 0u},
         {"optimizer", "adam"}, {"keep", 0.9}, {"lambda", nullptr}};
  } else if (name == "ensemble") {
    d = {{"members", 5u},       {"iterations", 2000u},    {"lr", 1e-2},       {"lr_final_scale", 1.0},
         {"optimizer", "adam"}, {"weighting", "uniform"}, {"batch_size", 0u}, {"threads", 0u}};
  } else if (name == "swag") {
    d = {{"iterations", 2000u}, {"lr", 1e-3}, {"warmup_fraction", 0.5}, {"collect_every", 10u}, {"batch_size", 0u}};
  } else {
    throw ConfigError("unknown method '" + name + "'");
  }
  return d;
}

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

inline bool is_count(const json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0); }

// Overlays user values on defaults, checking each value's type against the default's.
inline json merge_checked(const json& defaults, const json& user, const std::string& where,
                          const std::set<std::string>& extra = {}) {
  if (!user.is_object()) throw ConfigError(where + ": expected an object");
  json out = defaults;
  for (const auto& [k, v] : user.items()) {
    if (extra.count(k)) continue;
    if (!defaults.contains(k)) throw ConfigError(where + ": unknown key '" + k + "'");
    const json& d = defaults.at(k);
    bool ok = false;
    if (d.is_null()) ok = v.is_null() || v.is_number();
    else if (d.is_number_unsigned()) ok = is_count(v);
    else if (d.is_number()) ok = v.is_number();
    else if (d.is_string()) ok = v.is_string();
    else if (d.is_boolean()) ok = v.is_boolean();
    else ok = v.type() == d.type();
    if (!ok) throw ConfigError(where + ": key '" + k + "' has the wrong type");
    if (d.is_number_float()) out[k] = v.get<double>();
    else if (d.is_number_unsigned()) out[k] = v.get<std::uint64_t>();
    else out[k] = v;
  }
  return out;
}

template <typename T>
T get_or_throw(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + ": '" + key + "' has the wrong type");
  }
}

}  // namespace detail

struct ExperimentConfig {
  std::uint64_t seed = 0;
  MLPSpec spec = MLPSpec::chain({1, 1}, Activation::Identity);
  json prior;       // {"kind":"gaussian","sigma":s} | {"kind":"flat"}
  json likelihood;  // {"kind":"gaussian","sigma_y":[...]} | {"kind":"categorical","classes":K}
  std::string method;
  json hyper;  // method hyperparameters, defaults filled in
  json data;   // {"generator":name,"params":{...}} | {"csv":path}
  json evaluation;
  std::optional<json> distill;

  Prior make_prior() const {
    if (prior.at("kind") == "flat") return Prior::flat();
    return Prior::isotropic_gaussian(prior.at("sigma").get<double>());
  }
  Likelihood make_likelihood() const {
    if (likelihood.at("kind") == "categorical") return Likelihood::categorical(likelihood.at("classes").get<std::size_t>());
    return Likelihood::gaussian(likelihood.at("sigma_y").get<Vector>());
  }
  std::optional<double> prior_sigma() const {
    if (prior.at("kind") == "gaussian") return prior.at("sigma").get<double>();
    return std::nullopt;
  }
};

inline json evaluation_defaults() {
  return {{"test_fraction", 0.25}, {"n_draws", 200u}, {"delta", 0.05}, {"ece_bins", 10u}};
}

inline json distill_defaults() {
  return {{"student", nullptr}, {"iterations", 1000u}, {"lr", 1e-2}, {"lr_final_scale", 1.0}, {"batch_size", 0u},
          {"draws", 32u},      {"n_inputs", 0u},      {"input_range", nullptr}};
}

inline json to_json(const ExperimentConfig& c) {
  json m = c.hyper;
  m["name"] = c.method;
  json j = {{"seed", c.seed},
            {"model", {{"spec", to_json(c.spec)}, {"prior", c.prior}, {"likelihood", c.likelihood}}},
            {"method", m},
            {"data", c.data},
            {"evaluation", c.evaluation}};
  if (c.distill) j["distill"] = *c.distill;
  return j;
}

inline ExperimentConfig parse_config(const json& j) {
  using detail::get_or_throw;
  detail::reject_unknown(j, {"seed", "model", "method", "data", "evaluation", "distill"}, "config");
  ExperimentConfig c;
  if (!j.contains("seed") || !detail::is_count(j.at("seed"))) throw ConfigError("config: 'seed' (nonnegative integer) is required");
  c.seed = j.at("seed").get<std::uint64_t>();

  if (!j.contains("model")) throw ConfigError("config: missing 'model'");
  const json& model = j.at("model");
  detail::reject_unknown(model, {"spec", "prior", "likelihood"}, "model");
  if (!model.contains("spec")) throw ConfigError("model: missing 'spec'");
  c.spec = mlp_spec_from_json(model.at("spec"));

  const json prior = model.value("prior", json{{"kind", "gaussian"}, {"sigma", 1.0}});
  const std::string pk = get_or_throw<std::string>(prior, "kind", "model.prior");
  if (pk == "gaussian") {
    detail::reject_unknown(prior, {"kind", "sigma"}, "model.prior");
    const double s = prior.contains("sigma") ? get_or_throw<double>(prior, "sigma", "model.prior") : 1.0;
    if (!(s > 0)) throw ConfigError("model.prior: sigma must be positive");
    c.prior = {{"kind", "gaussian"}, {"sigma", s}};
  } else if (pk == "flat") {
    detail::reject_unknown(prior, {"kind"}, "model.prior");
    c.prior = {{"kind", "flat"}};
  } else {
    throw ConfigError("model.prior: unknown kind '" + pk + "'");
  }

  if (!model.contains("likelihood")) throw ConfigError("model: missing 'likelihood'");
  const json& lik = model.at("likelihood");
  const std::string lk = get_or_throw<std::string>(lik, "kind", "model.likelihood");
  if (lk == "gaussian") {
    detail::reject_unknown(lik, {"kind", "sigma_y"}, "model.likelihood");
    Vector sy;
    if (!lik.contains("sigma_y")) sy.assign(c.spec.output_width(), 0.1);
    else if (lik.at("sigma_y").is_number()) sy.assign(c.spec.output_width(), lik.at("sigma_y").get<double>());
    else sy = get_or_throw<Vector>(lik, "sigma_y", "model.likelihood");
    if (sy.size() != c.spec.output_width()) throw ConfigError("model.likelihood: sigma_y needs one value per output");
    for (double s : sy)
      if (!(s > 0)) throw ConfigError("model.likelihood: sigma_y must be positive");
    if (c.spec.softmax_output()) throw ConfigError("model: gaussian likelihood with a softmax head");
    c.likelihood = {{"kind", "gaussian"}, {"sigma_y", sy}};
  } else if (lk == "categorical") {
    detail::reject_unknown(lik, {"kind", "classes"}, "model.likelihood");
    const std::size_t k = lik.contains("classes") ? get_or_throw<std::size_t>(lik, "classes", "model.likelihood")
                                                  : c.spec.output_width();
    if (k < 2 || k != c.spec.output_width()) throw ConfigError("model.likelihood: classes must equal the head width (>= 2)");
    if (!c.spec.softmax_output()) throw ConfigError("model: categorical likelihood needs a softmax head");
    c.likelihood = {{"kind", "categorical"}, {"classes", k}};
  } else {
    throw ConfigError("model.likelihood: unknown kind '" + lk + "'");
  }

  if (!j.contains("method")) throw ConfigError("config: missing 'method'");
  const json& method = j.at("method");
  if (!method.is_object()) throw ConfigError("method: expected an object with a 'name'");
  c.method = get_or_throw<std::string>(method, "name", "method");
  if (std::find(method_names().begin(), method_names().end(), c.method) == method_names().end())
    throw ConfigError("method: unknown method '" + c.method + "'");
  c.hyper = detail::merge_checked(method_defaults(c.method), method, "method " + c.method, {"name"});
  if (c.method == "bbb-prior" && lk != "gaussian") throw ConfigError("method bbb-prior: needs a gaussian likelihood");
  if (c.method == "last-layer" && c.hyper.at("bayes_layers").get<std::size_t>() > c.spec.depth())
    throw ConfigError("method last-layer: bayes_layers exceeds the network depth");

  if (!j.contains("data")) throw ConfigError("config: missing 'data'");
  const json& data = j.at("data");
  if (data.contains("csv") == data.contains("generator"))
    throw ConfigError("data: give exactly one of 'csv' or 'generator'");
  if (data.contains("csv")) {
    detail::reject_unknown(data, {"csv"}, "data");
    c.data = {{"csv", get_or_throw<std::string>(data, "csv", "data")}};
  } else {
    detail::reject_unknown(data, {"generator", "params"}, "data");
    const json params = data.value("params", json::object());
    if (!params.is_object()) throw ConfigError("data.params: expected an object");
    c.data = {{"generator", get_or_throw<std::string>(data, "generator", "data")}, {"params", params}};
  }

  c.evaluation = detail::merge_checked(evaluation_defaults(), j.value("evaluation", json::object()), "evaluation");
  const double tf = c.evaluation.at("test_fraction").get<double>();
  if (!(tf >= 0 && tf < 1)) throw ConfigError("evaluation: test_fraction must lie in [0,1)");
  if (c.evaluation.at("n_draws").get<std::size_t>() < 2) throw ConfigError("evaluation: n_draws must be >= 2");
  const double delta = c.evaluation.at("delta").get<double>();
  if (!(delta > 0 && delta <= 0.5)) throw ConfigError("evaluation: delta must lie in (0, 0.5]");
  if (c.evaluation.at("ece_bins").get<std::size_t>() < 1) throw ConfigError("evaluation: ece_bins must be >= 1");

  if (j.contains("distill")) {
    const json& dj = j.at("distill");
    json d = detail::merge_checked(distill_defaults(), dj, "distill", {"student", "input_range"});
    if (!dj.contains("student")) throw ConfigError("distill: missing 'student'");
    const MLPSpec student = mlp_spec_from_json(dj.at("student"));
    d["student"] = to_json(student);
    d["input_range"] = dj.value("input_range", json(nullptr));
    if (!d["input_range"].is_null()) {
      const auto r = d["input_range"];
      if (!r.is_array() || r.size() != 2 || !r[0].is_number() || !r[1].is_number() || !(r[0].get<double>() < r[1].get<double>()))
        throw ConfigError("distill: input_range must be [lo, hi] with lo < hi");
      d["input_range"] = {r[0].get<double>(), r[1].get<double>()};
    }
    if (d.at("draws").get<std::size_t>() < 1) throw ConfigError("distill: draws must be >= 1");
    c.distill = d;
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------- errors

// A pipeline stage failed; code is the process exit status.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause, int code)
      : std::runtime_error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)), code_(code) {}
  const std::string& stage() const { return stage_; }
  int code() const { return code_; }

 private:
  std::string stage_;
  int code_;
};

inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

template <typename F>
auto run_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError& e) {
    throw StageError(stage, e.what(), kExitConfig);
  } catch (const ContractViolation& e) {
    throw StageError(stage, e.what(), kExitConfig);
  } catch (const json::exception& e) {
    throw StageError(stage, e.what(), kExitConfig);
  } catch (const NumericFailure& e) {
    throw StageError(stage, e.what(), kExitNumeric);
  } catch (const EvaluationError& e) {
    throw StageError(stage, e.what(), kExitNumeric);
  } catch (const std::exception& e) {
    throw StageError(stage, e.what(), 1);
  }
}

// ---------------------------------------------------------------- data

inline Dataset load_data(const ExperimentConfig& c) {
  if (c.data.contains("csv")) return read_dataset_csv(c.data.at("csv").get<std::string>());
  return data::generate(c.data.at("generator").get<std::string>(), c.data.at("params"), c.seed);
}

inline std::uint64_t dataset_hash(const Dataset& d) { return bnn::detail::fnv1a(dataset_csv(d)); }

struct Split {
  Dataset train;
  Dataset test;
  bool test_is_train = false;
};

// Shuffled split from the data stream; with no test points the training set
// is also used for evaluation.
inline Split split_dataset(const Dataset& d, double test_fraction, std::uint64_t seed) {
  const std::size_t n = d.size();
  const auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(n)));
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng = Rng(seed).stream("data").substream(1);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  Split s;
  if (n_test == 0 || n_test >= n) {
    s.train = d;
    s.test = d;
    s.test_is_train = true;
    return s;
  }
  std::vector<std::size_t> te(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> tr(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  std::sort(te.begin(), te.end());
  std::sort(tr.begin(), tr.end());
  s.train = d.subset(tr);
  s.test = d.subset(te);
  return s;
}

// ---------------------------------------------------------------- training

struct Fitted {
  Posterior posterior;
  std::string trace;
  json metrics = json::object();
  std::optional<Vector> sigma_y;  // learned noise scale (bbb-prior)
};

namespace detail {

inline VITrainConfig vi_config(const json& h, std::uint64_t seed) {
  VITrainConfig v;
  v.iterations = h.at("iterations");
  v.lr = h.at("lr");
  v.lr_final_scale = h.at("lr_final_scale");
  v.batch_size = h.at("batch_size");
  v.mc_samples = h.at("mc_samples");
  v.optimizer = optimizer_from_string(h.at("optimizer"));
  const std::string scaling = h.at("scaling");
  if (scaling == "per-batch") v.scaling = ElboScaling::PerBatch;
  else if (scaling == "kl-annealed") v.scaling = ElboScaling::KlAnnealed;
  else throw ConfigError("scaling must be per-batch or kl-annealed");
  v.anneal_iterations = h.at("anneal_iterations");
  if (h.contains("lr_hyper") && !h.at("lr_hyper").is_null()) v.lr_hyper = h.at("lr_hyper").get<double>();
  v.seed = seed;
  return v;
}

inline ChainConfig chain_config(const json& h, std::uint64_t seed) {
  ChainConfig c;
  c.n_samples = h.at("n_samples");
  c.burn_in = h.at("burn_in");
  c.thinning = h.at("thinning");
  c.seed = seed;
  return c;
}

inline std::string chain_trace(const SampleStore& s) {
  std::string out = "sample,log_joint\n";
  for (std::size_t i = 0; i < s.log_joint.size(); ++i) out += std::to_string(i) + "," + io::num(s.log_joint[i]) + "\n";
  return out;
}

inline std::string loss_trace(const Vector& loss) {
  std::string out = "iteration,loss\n";
  for (std::size_t i = 0; i < loss.size(); ++i) out += std::to_string(i) + "," + io::num(loss[i]) + "\n";
  return out;
}

inline void vi_checked(const VIResult& r, Fitted& f) {
  f.trace = trace_csv(r.trace);
  if (r.diverged) throw NumericFailure("variational training diverged: " + r.message);
  if (!r.trace.running_mean.empty()) f.metrics["elbo"] = r.trace.running_mean.back();
}

}  // namespace detail

// Trace CSV is kept in `partial_trace` when training fails after producing one.
inline Fitted fit_method(const ExperimentConfig& c, const LogJointModel& model, std::string* partial_trace = nullptr) {
  const json& h = c.hyper;
  const MLPSpec& spec = model.spec();
  Rng init = Rng(c.seed).stream("init");
  Fitted f;
  try {
    if (c.method == "mh" || c.method == "hmc" || c.method == "sgld") {
      Kernel kernel;
      std::size_t batch = 0;
      if (c.method == "mh") {
        const std::string prop = h.at("proposal");
        if (prop != "gaussian" && prop != "uniform-window") throw ConfigError("mh: proposal must be gaussian or uniform-window");
        kernel = MHKernel{prop == "gaussian" ? Proposal::gaussian(h.at("scale")) : Proposal::uniform_window(h.at("scale"))};
      } else if (c.method == "hmc") {
        HMCConfig hc;
        hc.dt = h.at("dt");
        hc.steps = h.at("steps");
        hc.momentum_scale = h.at("momentum_scale");
        hc.adapt = h.at("adapt");
        hc.target_accept = h.at("target_accept");
        kernel = HMCKernel{hc};
      } else {
        kernel = SGLDKernel{SGLDSchedule{h.at("a"), h.at("b"), h.at("gamma"), h.at("eps_min")}};
        batch = h.at("batch_size");
      }
      const Vector theta0 = init_params(spec, init);
      const SampleStore store = run_chain(kernel, make_target(model, batch), detail::chain_config(h, c.seed), theta0);
      f.trace = detail::chain_trace(store);
      const ChainDiagnostics diag = diagnostics(store);
      f.metrics["acceptance_rate"] = store.acceptance_rate;
      f.metrics["divergences"] = store.divergences;
      f.metrics["ess_min"] = diag.ess.empty() ? 0.0 : *std::min_element(diag.ess.begin(), diag.ess.end());
      if (c.method == "hmc") f.metrics["step_size"] = store.final_step_size;
      f.posterior = store;
    } else if (c.method == "bbb") {
      const auto q0 = init_mean_field(spec, init, h.at("init_sigma"));
      const VIResult r = bayes_by_backprop(model, q0, detail::vi_config(h, c.seed));
      detail::vi_checked(r, f);
      f.posterior = r.q;
    } else if (c.method == "bbb-prior") {
      const auto q0 = init_mean_field(spec, init, h.at("init_sigma"));
      const LearnablePrior lp = gaussian_scale_prior(model, h.at("sigma_prior0"), h.at("sigma_y0"));
      const VIResult r = learn_prior_bbb(lp, q0, detail::vi_config(h, c.seed));
      detail::vi_checked(r, f);
      f.metrics["sigma_prior"] = std::exp(r.xi[0]);
      f.metrics["sigma_y"] = std::exp(r.xi[1]);
      f.sigma_y = Vector{std::exp(r.xi[1])};
      f.posterior = r.q;
    } else if (c.method == "last-layer") {
      const LastLayerPartition part = last_layer_partition(spec, h.at("bayes_layers"));
      const Vector theta0 = init_params(spec, init);
      const Vector psi0(theta0.begin(), theta0.begin() + static_cast<std::ptrdiff_t>(part.n_deterministic));
      const Vector tail(theta0.begin() + static_cast<std::ptrdiff_t>(part.n_deterministic), theta0.end());
      const auto q0 = MeanFieldGaussian::from_sigma(tail, Vector(tail.size(), h.at("init_sigma").get<double>()));
      const VIResult r = last_layer_bbb(model, part, psi0, q0, detail::vi_config(h, c.seed));
      detail::vi_checked(r, f);
      f.posterior = LastLayerPosterior{r.psi, r.q};
    } else if (c.method == "dropout") {
      double lambda = 0.0;
      if (!h.at("lambda").is_null()) lambda = h.at("lambda");
      else if (c.prior_sigma()) lambda = dropout_lambda_for_prior(*c.prior_sigma(), std::max<std::size_t>(1, model.data().size()));
      const DropoutConfig dc = DropoutConfig::hidden(spec, h.at("keep"), lambda);
      DropoutTrainConfig tc;
      tc.iterations = h.at("iterations");
      tc.lr = h.at("lr");
      tc.lr_final_scale = h.at("lr_final_scale");
      tc.batch_size = h.at("batch_size");
      tc.optimizer = optimizer_from_string(h.at("optimizer"));
      tc.seed = c.seed;
      const DropoutResult r = dropout_train(model, dc, tc, init_params(spec, init));
      f.trace = detail::loss_trace(r.loss);
      if (r.diverged) throw NumericFailure("dropout training diverged: " + r.message);
      f.metrics["lambda"] = lambda;
      if (!r.loss.empty()) f.metrics["final_loss"] = r.loss.back();
      f.posterior = DropoutPosterior{dc, r.M};
    } else if (c.method == "ensemble") {
      EnsembleConfig ec;
      ec.members = h.at("members");
      ec.iterations = h.at("iterations");
      ec.lr = h.at("lr");
      ec.lr_final_scale = h.at("lr_final_scale");
      ec.optimizer = optimizer_from_string(h.at("optimizer"));
      const std::string w = h.at("weighting");
      if (w == "uniform") ec.weighting = EnsembleWeighting::Uniform;
      else if (w == "posterior") ec.weighting = EnsembleWeighting::Posterior;
      else throw ConfigError("ensemble: weighting must be uniform or posterior");
      ec.threads = h.at("threads");
      ec.seed = c.seed;
      const EnsembleResult r = fit_deep_ensemble(model, ec, h.at("batch_size"));
      f.trace = "member,log_joint,weight\n";
      for (std::size_t k = 0; k < r.mixture.members.size(); ++k)
        f.trace += std::to_string(r.index[k]) + "," + io::num(r.log_joint[k]) + "," + io::num(r.mixture.weights[k]) + "\n";
      f.metrics["members"] = r.mixture.members.size();
      f.metrics["failed_members"] = ec.members - r.mixture.members.size();
      f.posterior = r.mixture;
    } else if (c.method == "swag") {
      SwagConfig sc;
      sc.iterations = h.at("iterations");
      sc.lr = h.at("lr");
      sc.warmup_fraction = h.at("warmup_fraction");
      sc.collect_every = h.at("collect_every");
      sc.seed = c.seed;
      const SwagMoments m = fit_swag_diagonal(model, init_params(spec, init), sc, h.at("batch_size"));
      const Vector var = m.variance();
      f.trace = "coordinate,mean,variance\n";
      for (std::size_t i = 0; i < m.dim(); ++i)
        f.trace += std::to_string(i) + "," + io::num(m.mean[i]) + "," + io::num(var[i]) + "\n";
      f.metrics["collected"] = m.count;
      f.posterior = m;
    }
  } catch (...) {
    if (partial_trace) *partial_trace = f.trace;
    throw;
  }
  return f;
}

// ---------------------------------------------------------------- evaluation

struct Evaluation {
  json predictions = json::array();
  json metrics = json::object();
  std::string curve = "p_hat,p_check,n_bin\n";
  std::vector<RegressionSummary> regression;
  std::vector<ClassificationSummary> classification;
};

namespace detail {

// Metric failures become null so the remaining metrics and the curve survive.
template <typename F>
void try_metric(json& m, const std::string& key, F&& f) {
  try {
    const double v = f();
    m[key] = std::isfinite(v) ? json(v) : json(nullptr);
  } catch (const EvaluationError&) {
    m[key] = nullptr;
  } catch (const ContractViolation&) {
    m[key] = nullptr;
  }
}

inline void curve_metrics(json& m, const std::optional<CalibrationCurve>& curve) {
  try_metric(m, "auc", [&] {
    if (!curve || curve->points.size() < 2) throw EvaluationError("curve too short");
    return auc(*curve);
  });
  try_metric(m, "curve_distance", [&] {
    if (!curve || curve->points.size() < 2) throw EvaluationError("curve too short");
    return curve_distance(*curve);
  });
}

}  // namespace detail

inline Evaluation evaluate(const ExperimentConfig& c, const Posterior& posterior, const Dataset& test,
                           const Likelihood& lik, const std::optional<Vector>& sigma_y) {
  Evaluation ev;
  const std::size_t n_draws = c.evaluation.at("n_draws");
  const double delta = c.evaluation.at("delta");
  const std::size_t bins = c.evaluation.at("ece_bins");
  Rng rng = Rng(c.seed).stream("eval");
  const auto samples = sample_predictive(posterior, c.spec, test.inputs, n_draws, rng);
  json& m = ev.metrics;
  m["n_test"] = test.size();

  if (lik.is_classification()) {
    std::vector<Vector> probs;
    std::vector<std::size_t> labels;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      ev.classification.push_back(summarize_classification(samples[i]));
      const auto& s = ev.classification.back();
      probs.push_back(s.p);
      const std::size_t y = test.has_hard_labels() ? test.labels[i] : argmax_lowest(test.targets[i]);
      labels.push_back(y);
      correct += s.predicted == y;
      json p = to_json(s);
      p["x"] = test.inputs[i];
      p["label"] = y;
      ev.predictions.push_back(p);
    }
    m["accuracy"] = static_cast<double>(correct) / static_cast<double>(test.size());
    // K = 2: p(class 1) against the label. K > 2: top-label confidence against correctness.
    Vector pred;
    std::vector<int> obs;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (lik.classes == 2) {
        pred.push_back(probs[i][1]);
        obs.push_back(labels[i] == 1);
      } else {
        const std::size_t k = argmax_lowest(probs[i]);
        pred.push_back(probs[i][k]);
        obs.push_back(k == labels[i]);
      }
    }
    std::optional<CalibrationCurve> curve;
    try {
      curve = binary_reliability(pred, obs, delta);
      ev.curve = curve_csv(*curve);
    } catch (const EvaluationError&) {
    }
    detail::curve_metrics(m, curve);
    detail::try_metric(m, "ece", [&] { return ece(pred, obs, bins); });
    const ScoreReport sr = scoring_rules(probs, labels);
    m["brier"] = sr.brier;
    m["log_score"] = sr.zero_probability ? json(nullptr) : json(sr.log_score);
  } else {
    const Vector sy = sigma_y.value_or(lik.sigma_y);
    double se = 0.0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      ev.regression.push_back(summarize_regression(samples[i], sy));
      const auto& s = ev.regression.back();
      for (std::size_t j = 0; j < s.mean.size(); ++j) se += std::pow(s.mean[j] - test.targets[i][j], 2);
      json p = to_json(s);
      p["x"] = test.inputs[i];
      p["y"] = test.targets[i];
      ev.predictions.push_back(p);
    }
    m["mse"] = se / static_cast<double>(test.size() * lik.output_width());
    std::optional<CalibrationCurve> curve;
    try {
      curve = regression_calibration(ev.regression, test.targets).curve;
      ev.curve = curve_csv(*curve);
    } catch (const EvaluationError&) {
    } catch (const ContractViolation&) {
    }
    detail::curve_metrics(m, curve);
    // Regression ECE: count-weighted mean |p̌ − p̂| over curve points.
    detail::try_metric(m, "ece", [&] {
      if (!curve || curve->points.empty()) throw EvaluationError("no curve");
      double s = 0.0, w = 0.0;
      for (const auto& p : curve->points) {
        s += static_cast<double>(p.n) * std::abs(p.p_check - p.p_hat);
        w += static_cast<double>(p.n);
      }
      return s / w;
    });
    detail::try_metric(m, "calibration_gap", [&] {
      if (!curve || curve->points.empty()) throw EvaluationError("no curve");
      return calibration_gap(*curve);
    });
    detail::try_metric(m, "log_score", [&] { return gaussian_log_score(ev.regression, test.targets); });
  }

  // Posterior moments of the first few coordinates of θ.
  Rng trng = Rng(c.seed).stream("eval").substream(2);
  const std::size_t dim = posterior_dim(posterior), shown = std::min<std::size_t>(dim, 4);
  Vector sum(shown, 0.0), sq(shown, 0.0);
  for (std::size_t t = 0; t < n_draws; ++t) {
    const Vector th = draw_theta(posterior, c.spec, trng);
    for (std::size_t i = 0; i < shown; ++i) {
      sum[i] += th[i];
      sq[i] += th[i] * th[i];
    }
  }
  const double nd = static_cast<double>(n_draws);
  for (std::size_t i = 0; i < shown; ++i) {
    const double mu = sum[i] / nd;
    m["theta_mean_" + std::to_string(i)] = mu;
    m["theta_var_" + std::to_string(i)] = std::max(0.0, (sq[i] - nd * mu * mu) / (nd - 1));
  }
  return ev;
}

// ---------------------------------------------------------------- distillation

struct DistillOutcome {
  ParamVector student;
  json metrics = json::object();
};

inline DistillOutcome distill_student(const ExperimentConfig& c, const Posterior& posterior, const Dataset& train,
                                      const Dataset& test, const Likelihood& lik, const Evaluation& ev) {
  const json& d = *c.distill;
  const MLPSpec student = mlp_spec_from_json(d.at("student"));
  const TeacherHandle teacher{posterior, c.spec, lik, d.at("draws")};
  std::vector<Vector> inputs = train.inputs;
  const std::size_t n_inputs = d.at("n_inputs");
  if (n_inputs > 0) {
    Rng rng = Rng(c.seed).stream("data").substream(2);
    double lo = -1.0, hi = 1.0;
    if (!d.at("input_range").is_null()) {
      lo = d.at("input_range")[0];
      hi = d.at("input_range")[1];
    }
    inputs.assign(n_inputs, Vector(c.spec.input_width()));
    for (auto& x : inputs)
      for (double& v : x) v = rng.uniform(lo, hi);
  }
  StudentTrainConfig sc;
  sc.iterations = d.at("iterations");
  sc.lr = d.at("lr");
  sc.lr_final_scale = d.at("lr_final_scale");
  sc.batch_size = d.at("batch_size");
  sc.seed = c.seed;
  Rng init = Rng(c.seed).stream("init").substream(1);
  const StudentResult r = train_student(teacher, student, init_params(student, init), inputs, sc);
  if (r.diverged) throw NumericFailure("student training diverged: " + r.message);
  DistillOutcome out{ParamVector(student, r.omega), json::object()};
  if (!r.loss.empty()) out.metrics["student_final_loss"] = r.loss.back();
  double acc = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (lik.is_classification()) {
      const Vector q = forward(student, r.omega, test.inputs[i]);
      const Vector& p = ev.classification[i].p;
      for (std::size_t k = 0; k < p.size(); ++k)
        if (p[k] > 0) acc += p[k] * (std::log(p[k]) - std::log(std::max(q[k], 1e-300)));
    } else {
      const GaussianHead head = student_gaussian(student, r.omega, test.inputs[i]);
      for (std::size_t j = 0; j < head.mean.size(); ++j) acc += std::pow(head.mean[j] - ev.regression[i].mean[j], 2);
    }
  }
  out.metrics[lik.is_classification() ? "student_kl" : "student_mse"] = acc / static_cast<double>(test.size());
  return out;
}

// ---------------------------------------------------------------- run

struct RunResult {
  json metrics;
  std::filesystem::path out;
};

inline RunResult run(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  auto note = [&](const std::string& s) {
    if (log) *log << s << "\n";
  };
  run_stage("write", [&] {
    fs::create_directories(out);
    io::write_file_atomic(out / "config.json", to_json(c).dump(2) + "\n");
  });

  note("[data] loading");
  const Dataset full = run_stage("data", [&] {
    Dataset d = load_data(c);
    if (d.empty()) throw ConfigError("dataset is empty");
    if (d.input_dim() != c.spec.input_width()) throw ConfigError("dataset input width does not match the network");
    io::write_file_atomic(out / "data.csv", dataset_csv(d));
    return d;
  });
  const Split split = run_stage("data", [&] { return split_dataset(full, c.evaluation.at("test_fraction"), c.seed); });

  json metrics = json::object();
  metrics["dataset_hash"] = dataset_hash(full);
  metrics["n_train"] = split.train.size();
  metrics["test_is_train"] = split.test_is_train ? 1 : 0;

  note("[train] " + c.method + " on " + std::to_string(split.train.size()) + " points");
  const Likelihood lik = run_stage("config", [&] { return c.make_likelihood(); });
  const LogJointModel model = run_stage("train", [&] { return LogJointModel(c.spec, c.make_prior(), lik, split.train); });
  const Fitted fitted = run_stage("train", [&] {
    std::string partial;
    try {
      Fitted f = fit_method(c, model, &partial);
      io::write_file_atomic(out / "trace.csv", f.trace);
      save_posterior(f.posterior, c.spec, out / "posterior");
      return f;
    } catch (...) {
      if (!partial.empty()) io::write_file_atomic(out / "trace.csv", partial);
      throw;
    }
  });
  metrics.update(fitted.metrics);

  note("[predict] " + std::to_string(split.test.size()) + " points");
  const Evaluation ev = run_stage("predict", [&] {
    Evaluation e = evaluate(c, fitted.posterior, split.test, lik, fitted.sigma_y);
    io::write_file_atomic(out / "predictions.json", e.predictions.dump() + "\n");
    io::write_file_atomic(out / "curve.csv", e.curve);
    return e;
  });
  metrics.update(ev.metrics);

  if (c.distill) {
    note("[distill] training student");
    const DistillOutcome d = run_stage("distill", [&] {
      DistillOutcome o = distill_student(c, fitted.posterior, split.train, split.test, lik, ev);
      io::write_file_atomic(out / "student.json", bnn::to_json(o.student).dump() + "\n");
      return o;
    });
    metrics.update(d.metrics);
  }

  run_stage("write", [&] { io::write_file_atomic(out / "metrics.json", metrics.dump(2) + "\n"); });
  note("[done] " + out.string());
  return {metrics, out};
}

// ---------------------------------------------------------------- compare / inspect

// One row per run; columns are the union of metric keys, missing cells empty.
// Unreadable runs keep their row with status "unreadable".
inline std::string compare_runs(const std::vector<std::filesystem::path>& runs) {
  if (runs.size() < 2) throw ConfigError("compare: at least two run directories required");
  std::vector<std::optional<json>> loaded;
  std::set<std::string> keys;
  for (const auto& r : runs) {
    try {
      json m = json::parse(io::read_file(r / "metrics.json"));
      if (!m.is_object()) throw ConfigError("metrics.json is not an object");
      for (const auto& [k, _] : m.items()) keys.insert(k);
      loaded.emplace_back(std::move(m));
    } catch (const std::exception&) {
      loaded.emplace_back(std::nullopt);
    }
  }
  std::string csv = "run,status";
  for (const auto& k : keys) csv += "," + k;
  csv += "\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    csv += runs[i].string() + "," + (loaded[i] ? "ok" : "unreadable");
    for (const auto& k : keys) {
      csv += ",";
      if (!loaded[i] || !loaded[i]->contains(k)) continue;
      const json& v = loaded[i]->at(k);
      if (v.is_number_integer()) csv += v.dump();
      else if (v.is_number()) csv += io::num(v.get<double>());
    }
    csv += "\n";
  }
  return csv;
}

// Summary of a run directory or a bare posterior directory.
inline json inspect(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  json j = json::object();
  const fs::path post_dir = fs::exists(dir / "posterior.json") ? dir : dir / "posterior";
  if (fs::exists(dir / "config.json")) {
    const json cfg = json::parse(io::read_file(dir / "config.json"));
    j["method"] = cfg.at("method").at("name");
    j["seed"] = cfg.at("seed");
  }
  if (fs::exists(post_dir / "posterior.json")) {
    const auto [posterior, spec] = load_posterior(post_dir);
    j["posterior"] = {{"kind", posterior_kind(posterior)}, {"dim", posterior_dim(posterior)}, {"spec", to_json(spec)}};
  }
  if (fs::exists(dir / "metrics.json")) j["metrics"] = json::parse(io::read_file(dir / "metrics.json"));
  if (j.empty()) throw ConfigError("inspect: no run or posterior found in " + dir.string());
  return j;
}

}  // namespace bnn::runner
