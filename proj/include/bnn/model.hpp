#pragma once

// The stochastic model: prior p(θ), likelihood p(y|x,θ) and a dataset,
// combined into the unnormalized log posterior log p(D_y|D_x,θ) + log p(θ).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "bnn/autodiff.hpp"
#include "bnn/error.hpp"
#include "bnn/network.hpp"
#include "bnn/random.hpp"

namespace bnn {

// Stand-in for log(0): large and negative, never fed into a gradient.
inline constexpr double kLogZero = -1e300;
inline bool is_log_zero(double v) { return !(v > kLogZero); }

inline constexpr double kLog2Pi = 1.8378770664093454836;

// ---------------------------------------------------------------- dataset

struct Dataset {
  std::string name;
  std::vector<Vector> inputs;
  // Regression targets, or probability-vector (soft) labels for classification.
  std::vector<Vector> targets;
  // Hard class indices for classification.
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }
  bool has_hard_labels() const { return !labels.empty(); }
  std::size_t input_dim() const { return inputs.empty() ? 0 : inputs.front().size(); }

  void validate() const {
    const std::size_t n = inputs.size();
    detail::require(labels.empty() || targets.empty(), "Dataset: both hard labels and targets given");
    detail::require(n == 0 || labels.size() == n || targets.size() == n,
                    "Dataset: inputs and labels differ in length");
    for (const auto& x : inputs) detail::require(x.size() == input_dim(), "Dataset: ragged inputs");
    for (const auto& y : targets)
      detail::require(y.size() == targets.front().size(), "Dataset: ragged targets");
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    d.name = name;
    for (std::size_t i : idx) {
      detail::require(i < size(), "Dataset::subset: index out of range");
      d.inputs.push_back(inputs[i]);
      if (!targets.empty()) d.targets.push_back(targets[i]);
      if (!labels.empty()) d.labels.push_back(labels[i]);
    }
    return d;
  }
};

// CSV with a header: x0..x{d-1} followed by y0..y{m-1} or a single `label`.
inline Dataset read_dataset_csv(const std::string& path, const std::string& name = "") {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("dataset '" + path + "' has no header row");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) {
      while (!c.empty() && (c.back() == '\r' || c.back() == ' ')) c.pop_back();
      cols.push_back(c);
    }
  }
  std::size_t nx = 0, ny = 0;
  bool label = false;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] == "x" + std::to_string(nx) && ny == 0 && !label) ++nx;
    else if (cols[i] == "y" + std::to_string(ny) && !label) ++ny;
    else if (cols[i] == "label" && ny == 0 && !label) label = true;
    else throw ConfigError("dataset '" + path + "': unexpected column '" + cols[i] + "'");
  }
  if (nx == 0 || (ny == 0 && !label)) throw ConfigError("dataset '" + path + "': need x and y/label columns");
  Dataset d;
  d.name = name.empty() ? path : name;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string c;
    Vector vals;
    while (std::getline(ss, c, ',')) {
      try {
        vals.push_back(std::stod(c));
      } catch (const std::exception&) {
        throw ConfigError("dataset '" + path + "': bad number on row " + std::to_string(row));
      }
    }
    if (vals.size() != cols.size())
      throw ConfigError("dataset '" + path + "': wrong column count on row " + std::to_string(row));
    d.inputs.emplace_back(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(nx));
    if (label) {
      const double l = vals[nx];
      if (l < 0 || l != std::floor(l))
        throw ConfigError("dataset '" + path + "': label must be a nonnegative integer");
      d.labels.push_back(static_cast<std::size_t>(l));
    } else {
      d.targets.emplace_back(vals.begin() + static_cast<std::ptrdiff_t>(nx), vals.end());
    }
  }
  d.validate();
  return d;
}

inline std::string dataset_csv(const Dataset& d) {
  std::ostringstream os;
  os.precision(17);
  const std::size_t nx = d.input_dim();
  for (std::size_t j = 0; j < nx; ++j) os << (j ? "," : "") << "x" << j;
  if (d.has_hard_labels()) {
    os << ",label\n";
  } else {
    const std::size_t ny = d.targets.empty() ? 0 : d.targets.front().size();
    for (std::size_t j = 0; j < ny; ++j) os << ",y" << j;
    os << "\n";
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < nx; ++j) os << (j ? "," : "") << d.inputs[i][j];
    if (d.has_hard_labels()) os << "," << d.labels[i];
    else
      for (double y : d.targets[i]) os << "," << y;
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------- prior

class Prior;

// Σ_x C(θ,x) over the anchor rows (anchors is n x input_dim). May return a
// scalar or a per-anchor vector; the result is summed either way.
using ConsistencyCondition = std::function<Var(Tape&, const MLPSpec&, Var theta, Var anchors)>;
using Regularizer = std::function<Var(Tape&, Var theta)>;

struct IsotropicGaussianPrior {
  double sigma = 1.0;
};
// p(θ) ∝ exp(-reg(θ)); unnormalized.
struct RegularizerPrior {
  Regularizer reg;
};
struct ConsistencyPrior {
  std::shared_ptr<const Prior> base;
  ConsistencyCondition condition;
  std::vector<Vector> anchors;
};

class Prior {
 public:
  using Kind = std::variant<IsotropicGaussianPrior, RegularizerPrior, ConsistencyPrior>;

  static Prior isotropic_gaussian(double sigma) {
    detail::require(sigma > 0, "isotropic-gaussian prior: sigma must be positive");
    return Prior(IsotropicGaussianPrior{sigma});
  }
  static Prior from_regularizer(Regularizer reg) {
    detail::require(static_cast<bool>(reg), "from-regularizer prior: empty regularizer");
    return Prior(RegularizerPrior{std::move(reg)});
  }
  static Prior with_consistency(Prior base, ConsistencyCondition c, std::vector<Vector> anchors) {
    detail::require(!anchors.empty(), "with-consistency prior: anchor set must be nonempty");
    detail::require(static_cast<bool>(c), "with-consistency prior: empty condition");
    return Prior(ConsistencyPrior{std::make_shared<const Prior>(std::move(base)), std::move(c), std::move(anchors)});
  }
  // reg ≡ 0: the improper uniform prior.
  static Prior flat() {
    return from_regularizer([](Tape& t, Var) { return t.constant(0.0); });
  }

  const Kind& kind() const { return kind_; }

 private:
  explicit Prior(Kind k) : kind_(std::move(k)) {}
  Kind kind_;
};

inline Var log_prior_tape(const Prior& prior, const MLPSpec& spec, Var theta) {
  Tape& tape = *theta.tape;
  return std::visit(
      [&](const auto& p) -> Var {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, IsotropicGaussianPrior>) {
          const double d = static_cast<double>(theta.value().size());
          const double c = -0.5 * d * (kLog2Pi + 2.0 * std::log(p.sigma));
          return sum(square(theta)) * (-0.5 / (p.sigma * p.sigma)) + c;
        } else if constexpr (std::is_same_v<T, RegularizerPrior>) {
          return -sum(p.reg(tape, theta));
        } else {
          const Var base = log_prior_tape(*p.base, spec, theta);
          const Var anchors = tape.constant(rows_to_tensor(p.anchors));
          const Var c = sum(p.condition(tape, spec, theta, anchors));
          return base - c * (1.0 / static_cast<double>(p.anchors.size()));
        }
      },
      prior.kind());
}

inline double log_prior(const Prior& prior, const MLPSpec& spec, std::span<const double> theta) {
  Tape tape;
  const Var t = tape.constant(Tensor::vector(Vector(theta.begin(), theta.end())));
  return log_prior_tape(prior, spec, t).item();
}
inline double log_prior(const Prior& prior, const ParamVector& theta) {
  return log_prior(prior, theta.spec(), theta.values());
}

// ---------------------------------------------------------------- likelihood

struct Likelihood {
  enum class Kind { GaussianRegression, Categorical };
  Kind kind = Kind::GaussianRegression;
  Vector sigma_y;           // per output, gaussian only
  std::size_t classes = 0;  // categorical only

  static Likelihood gaussian(Vector sigma_y) {
    for (double s : sigma_y) detail::require(s > 0, "gaussian likelihood: sigma_y must be positive");
    detail::require(!sigma_y.empty(), "gaussian likelihood: at least one output");
    return {Kind::GaussianRegression, std::move(sigma_y), 0};
  }
  static Likelihood gaussian(double sigma_y, std::size_t outputs = 1) {
    return gaussian(Vector(outputs, sigma_y));
  }
  static Likelihood categorical(std::size_t k) {
    detail::require(k >= 2, "categorical likelihood: at least two classes");
    return {Kind::Categorical, {}, k};
  }
  bool is_classification() const { return kind == Kind::Categorical; }
  std::size_t output_width() const { return is_classification() ? classes : sigma_y.size(); }
};

// Label tensor for a dataset: regression targets, or one-hot / soft labels.
inline Tensor label_tensor(const Likelihood& lik, const Dataset& d) {
  const std::size_t n = d.size();
  const std::size_t m = lik.output_width();
  Tensor y = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    if (lik.is_classification() && d.has_hard_labels()) {
      detail::require(d.labels[i] < m, "class index out of range");
      y.at(i, d.labels[i]) = 1.0;
    } else {
      detail::require(i < d.targets.size() && d.targets[i].size() == m, "label width does not match likelihood");
      for (std::size_t j = 0; j < m; ++j) y.at(i, j) = d.targets[i][j];
    }
  }
  return y;
}

// Per-point log p(y|x,θ) as an (n) vector, given network outputs (logits for
// categorical). log_sigma optionally overrides the fixed noise scale.
inline Var per_point_log_likelihood(const Likelihood& lik, Var outputs, const Tensor& labels,
                                    std::optional<Var> log_sigma = std::nullopt) {
  Tape& tape = *outputs.tape;
  const Var y = tape.constant(labels);
  if (lik.is_classification()) return sum_rows(log_softmax_rows(outputs) * y);
  const std::size_t m = lik.sigma_y.size();
  if (log_sigma) {
    const Var inv_var = exp(*log_sigma * -2.0);
    const Var quad = sum_rows(square(outputs - y)) * inv_var * -0.5;
    const double mm = static_cast<double>(m);
    return quad - (*log_sigma * mm + 0.5 * mm * kLog2Pi);
  }
  Vector w(m);
  double c = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    w[j] = -0.5 / (lik.sigma_y[j] * lik.sigma_y[j]);
    c += std::log(lik.sigma_y[j]) + 0.5 * kLog2Pi;
  }
  return sum_rows(square(outputs - y) * tape.constant(Tensor::vector(w))) - c;
}

// ---------------------------------------------------------------- augmentation

struct AugmentationModel {
  std::function<Vector(std::span<const double> x, Rng& rng)> sampler;
  std::size_t samples_per_point = 1;

  static AugmentationModel identity(std::size_t k = 1) {
    return {[](std::span<const double> x, Rng&) { return Vector(x.begin(), x.end()); }, k};
  }
  static AugmentationModel gaussian_jitter(double sd, std::size_t k = 1) {
    return {[sd](std::span<const double> x, Rng& rng) {
              Vector v(x.begin(), x.end());
              for (double& e : v) e += rng.normal(0.0, sd);
              return v;
            },
            k};
  }
};

// ---------------------------------------------------------------- log joint

class LogJointModel {
 public:
  LogJointModel(MLPSpec spec, Prior prior, Likelihood likelihood, Dataset data,
                std::optional<AugmentationModel> augmentation = std::nullopt)
      : spec_(std::make_shared<const MLPSpec>(std::move(spec))),
        prior_(std::move(prior)),
        likelihood_(std::move(likelihood)),
        data_(std::move(data)),
        augmentation_(std::move(augmentation)) {
    data_.validate();
    detail::require(spec_->output_width() == likelihood_.output_width(),
                    "LogJointModel: network output width incompatible with likelihood");
    if (likelihood_.is_classification())
      detail::require(spec_->softmax_output(), "LogJointModel: categorical likelihood needs a softmax head");
    if (!data_.empty()) {
      detail::require(data_.input_dim() == spec_->input_width(), "LogJointModel: input width mismatch");
      inputs_ = rows_to_tensor(data_.inputs);
      labels_ = label_tensor(likelihood_, data_);
    }
    if (augmentation_) detail::require(augmentation_->samples_per_point >= 1, "augmentation: |A_x| must be >= 1");
  }

  const MLPSpec& spec() const { return *spec_; }
  std::shared_ptr<const MLPSpec> spec_ptr() const { return spec_; }
  const Prior& prior() const { return prior_; }
  const Likelihood& likelihood() const { return likelihood_; }
  const Dataset& data() const { return data_; }
  const std::optional<AugmentationModel>& augmentation() const { return augmentation_; }
  std::size_t dim() const { return spec_->param_count(); }
  const Tensor& input_tensor() const { return inputs_; }
  const Tensor& label_tensor_cached() const { return labels_; }

  LogJointModel with_data(Dataset d) const {
    return LogJointModel(*spec_, prior_, likelihood_, std::move(d), augmentation_);
  }
  LogJointModel with_prior(Prior p) const { return LogJointModel(*spec_, std::move(p), likelihood_, data_, augmentation_); }

 private:
  std::shared_ptr<const MLPSpec> spec_;
  Prior prior_;
  Likelihood likelihood_;
  Dataset data_;
  std::optional<AugmentationModel> augmentation_;
  Tensor inputs_;
  Tensor labels_;
};

namespace detail {

inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
  const std::size_t c = t.cols();
  Tensor out = Tensor::zeros({idx.size(), c});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    require(idx[k] < t.rows(), "batch index out of range");
    std::copy_n(t.values.begin() + static_cast<std::ptrdiff_t>(idx[k] * c), c,
                out.values.begin() + static_cast<std::ptrdiff_t>(k * c));
  }
  return out;
}

}  // namespace detail

// Σ log p(y|x,θ) over the dataset (or a batch of it) on a tape. With an
// augmentation model and a seed, each point's density is averaged over
// freshly sampled x' before taking the log.
inline Var log_likelihood_tape(const LogJointModel& model, Var theta,
                               const std::vector<std::size_t>* batch = nullptr,
                               std::optional<std::uint64_t> augmentation_seed = std::nullopt,
                               std::optional<Var> log_sigma = std::nullopt) {
  Tape& tape = *theta.tape;
  if (model.data().empty()) return tape.constant(0.0);
  const Tensor x = batch ? detail::gather_rows(model.input_tensor(), *batch) : model.input_tensor();
  const Tensor y = batch ? detail::gather_rows(model.label_tensor_cached(), *batch) : model.label_tensor_cached();
  const auto& aug = model.augmentation();
  if (!aug || !augmentation_seed) {
    const Var out = forward_tape(model.spec(), theta, tape.constant(x));
    return sum(per_point_log_likelihood(model.likelihood(), out, y, log_sigma));
  }
  Rng rng(*augmentation_seed, 0xA06u);
  const std::size_t n = x.rows(), d = x.cols(), k = aug->samples_per_point;
  std::vector<Var> terms;
  for (std::size_t a = 0; a < k; ++a) {
    Tensor xa = Tensor::zeros({n, d});
    for (std::size_t i = 0; i < n; ++i) {
      const Vector xi = aug->sampler(std::span<const double>(x.values.data() + i * d, d), rng);
      detail::require(xi.size() == d, "augmentation changed the input dimension");
      std::copy(xi.begin(), xi.end(), xa.values.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const Var out = forward_tape(model.spec(), theta, tape.constant(xa));
    terms.push_back(per_point_log_likelihood(model.likelihood(), out, y, log_sigma));
  }
  // log((1/k) Σ_a exp(l_a)) per point, shifted by the per-point max.
  Tensor mx = terms[0].value();
  for (std::size_t a = 1; a < k; ++a)
    for (std::size_t i = 0; i < n; ++i) mx[i] = std::max(mx[i], terms[a].value()[i]);
  const Var shift = tape.constant(mx);
  Var acc = exp(terms[0] - shift);
  for (std::size_t a = 1; a < k; ++a) acc = acc + exp(terms[a] - shift);
  return sum(log(acc) + shift) - static_cast<double>(n) * std::log(static_cast<double>(k));
}

inline Var log_joint_tape(const LogJointModel& model, Var theta, std::optional<std::uint64_t> seed = std::nullopt) {
  return log_likelihood_tape(model, theta, nullptr, seed) + log_prior_tape(model.prior(), model.spec(), theta);
}

namespace detail {

inline void require_theta(const LogJointModel& m, std::span<const double> theta) {
  require(theta.size() == m.dim(), "parameter length does not match the model");
}

template <typename F>
double guarded_value(F&& f) {
  try {
    const double v = f();
    return std::isfinite(v) && v > kLogZero ? v : kLogZero;
  } catch (const NumericFailure&) {
    return kLogZero;
  }
}

inline Var theta_constant(Tape& tape, std::span<const double> theta) {
  return tape.constant(Tensor::vector(Vector(theta.begin(), theta.end())));
}

}  // namespace detail

// Returns kLogZero when some observed label has probability zero.
inline double log_likelihood(const LogJointModel& model, std::span<const double> theta) {
  detail::require_theta(model, theta);
  return detail::guarded_value([&] {
    Tape tape;
    return log_likelihood_tape(model, detail::theta_constant(tape, theta)).item();
  });
}

inline double augmented_log_likelihood(const LogJointModel& model, std::span<const double> theta,
                                       std::uint64_t seed) {
  detail::require_theta(model, theta);
  detail::require(model.augmentation().has_value(), "augmented_log_likelihood: model has no augmentation");
  return detail::guarded_value([&] {
    Tape tape;
    return log_likelihood_tape(model, detail::theta_constant(tape, theta), nullptr, seed).item();
  });
}

inline double log_joint(const LogJointModel& model, std::span<const double> theta,
                        std::optional<std::uint64_t> seed = std::nullopt) {
  detail::require_theta(model, theta);
  const std::optional<std::uint64_t> aug_seed =
      model.augmentation() ? std::optional<std::uint64_t>(seed.value_or(0)) : std::nullopt;
  const double ll = detail::guarded_value([&] {
    Tape tape;
    return log_likelihood_tape(model, detail::theta_constant(tape, theta), nullptr, aug_seed).item();
  });
  if (is_log_zero(ll)) return kLogZero;
  return ll + log_prior(model.prior(), model.spec(), theta);
}

struct LogJointGradient {
  double value = 0.0;
  Vector gradient;
};

namespace detail {

inline LogJointGradient differentiate(const LogJointModel& model, std::span<const double> theta,
                                      const std::function<Var(Tape&, Var)>& build) {
  require_theta(model, theta);
  Tape tape;
  const Var t = tape.leaf(Tensor::vector(Vector(theta.begin(), theta.end())));
  const Var out = build(tape, t);
  if (!(out.item() > kLogZero)) throw NumericFailure("log density is -infinity; gradient undefined");
  tape.backward(out);
  return {out.item(), tape.grad(t).values};
}

}  // namespace detail

inline LogJointGradient log_joint_with_gradient(const LogJointModel& model, std::span<const double> theta,
                                                std::optional<std::uint64_t> seed = std::nullopt) {
  const std::optional<std::uint64_t> aug_seed =
      model.augmentation() ? std::optional<std::uint64_t>(seed.value_or(0)) : std::nullopt;
  return detail::differentiate(model, theta, [&](Tape&, Var t) { return log_joint_tape(model, t, aug_seed); });
}

inline Vector grad_log_joint(const LogJointModel& model, std::span<const double> theta,
                             std::optional<std::uint64_t> seed = std::nullopt) {
  return log_joint_with_gradient(model, theta, seed).gradient;
}

// (N/n)·Σ_batch log p(y|x,θ) + log p(θ) on a tape.
inline Var minibatch_log_joint_tape(const LogJointModel& model, Var theta, const std::vector<std::size_t>& batch,
                                    std::size_t full_size) {
  detail::require(!batch.empty(), "minibatch: batch must be nonempty");
  const double scale = static_cast<double>(full_size) / static_cast<double>(batch.size());
  return log_likelihood_tape(model, theta, &batch) * scale + log_prior_tape(model.prior(), model.spec(), theta);
}

inline double minibatch_log_joint(const LogJointModel& model, std::span<const double> theta,
                                  const std::vector<std::size_t>& batch, std::size_t full_size) {
  detail::require_theta(model, theta);
  Tape tape;
  return minibatch_log_joint_tape(model, detail::theta_constant(tape, theta), batch, full_size).item();
}

inline LogJointGradient minibatch_log_joint_with_gradient(const LogJointModel& model, std::span<const double> theta,
                                                          const std::vector<std::size_t>& batch,
                                                          std::size_t full_size) {
  return detail::differentiate(model, theta,
                               [&](Tape&, Var t) { return minibatch_log_joint_tape(model, t, batch, full_size); });
}

// n indices drawn uniformly without replacement (partial Fisher-Yates).
inline std::vector<std::size_t> sample_batch(std::size_t n_total, std::size_t batch_size, Rng& rng) {
  detail::require(batch_size >= 1 && batch_size <= n_total, "sample_batch: invalid batch size");
  std::vector<std::size_t> idx(n_total);
  for (std::size_t i = 0; i < n_total; ++i) idx[i] = i;
  for (std::size_t i = 0; i < batch_size; ++i) std::swap(idx[i], idx[i + rng.index(n_total - i)]);
  idx.resize(batch_size);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace bnn
