#pragma once

// Distilling a posterior predictive into one deterministic student network.
// The student minimizes the cross-entropy between the teacher's predictive
// and its own q_ω(y|x), estimated with m posterior draws.
//
// Student heads: a softmax over K classes for classification; for regression
// 2d outputs laid out as (mean_0, logvar_0, mean_1, logvar_1, ...).

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "bnn/approx.hpp"
#include "bnn/autodiff.hpp"
#include "bnn/error.hpp"
#include "bnn/model.hpp"
#include "bnn/network.hpp"
#include "bnn/optim.hpp"
#include "bnn/random.hpp"

namespace bnn {

struct TeacherHandle {
  Posterior posterior;
  MLPSpec spec;
  Likelihood likelihood;
  std::size_t draws = 32;

  void validate() const {
    detail::require(draws >= 1, "TeacherHandle: draws must be >= 1");
    detail::require(posterior_dim(posterior) == spec.param_count(), "TeacherHandle: posterior does not match network");
    detail::require(spec.output_width() == likelihood.output_width(),
                    "TeacherHandle: network output width incompatible with likelihood");
    if (likelihood.is_classification())
      detail::require(spec.softmax_output(), "TeacherHandle: classification teacher needs a softmax head");
  }
};

inline void validate_student(const MLPSpec& student, const TeacherHandle& teacher) {
  detail::require(student.input_width() == teacher.spec.input_width(), "student: input width differs from teacher");
  if (teacher.likelihood.is_classification()) {
    detail::require(student.softmax_output(), "student: classification student needs a softmax head");
    detail::require(student.output_width() == teacher.likelihood.classes, "student: head width differs from K");
  } else {
    detail::require(!student.softmax_output(), "student: regression head cannot be softmax");
    detail::require(student.output_width() == 2 * teacher.likelihood.output_width(),
                    "student: regression head needs a (mean, log-variance) pair per output");
  }
}

// Teacher predictive moments on a batch. Classification: mean class
// probabilities (n x K). Regression: mean of NN_θᵢ(x) and the spread
// (1/m)Σ(NN_θᵢ(x) − mean)² + σ_y², each n x d.
struct TeacherTargets {
  bool classification = true;
  Tensor mean;
  Tensor spread;
};

inline TeacherTargets teacher_targets(const TeacherHandle& teacher, const std::vector<Vector>& xs, Rng& rng) {
  teacher.validate();
  detail::require(!xs.empty(), "teacher_targets: empty batch");
  const std::size_t n = xs.size(), d = teacher.spec.output_width();
  const double m = static_cast<double>(teacher.draws);
  TeacherTargets t{teacher.likelihood.is_classification(), Tensor::zeros({n, d}), Tensor::zeros({n, d})};
  for (std::size_t i = 0; i < teacher.draws; ++i) {
    const Vector theta = draw_theta(teacher.posterior, teacher.spec, rng);
    for (std::size_t r = 0; r < n; ++r) {
      const Vector o = forward(teacher.spec, theta, xs[r]);
      for (std::size_t j = 0; j < d; ++j) {
        if (!std::isfinite(o[j])) throw NumericFailure("teacher_targets: non-finite teacher output");
        t.mean.at(r, j) += o[j] / m;
        t.spread.at(r, j) += o[j] * o[j] / m;
      }
    }
  }
  if (t.classification) {
    t.spread = Tensor();
    return t;
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      const double mu = t.mean.at(r, j);
      const double s = teacher.likelihood.sigma_y[j];
      t.spread.at(r, j) = std::max(0.0, t.spread.at(r, j) - mu * mu) + s * s;
    }
  return t;
}

inline TeacherTargets gather_targets(const TeacherTargets& t, std::span<const std::size_t> idx) {
  TeacherTargets out{t.classification, detail::gather_rows(t.mean, idx), Tensor()};
  if (!t.classification) out.spread = detail::gather_rows(t.spread, idx);
  return out;
}

// Mean over the batch of the teacher's predictive entropy (classification).
inline double teacher_mean_entropy(const TeacherTargets& t) {
  detail::require(t.classification, "teacher_mean_entropy: classification targets only");
  const std::size_t n = t.mean.shape[0], k = t.mean.shape[1];
  double h = 0.0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const double p = t.mean.at(r, j);
      if (p > 0) h -= p * std::log(p);
    }
  return h / static_cast<double>(n);
}

// Loss as a tape expression in ω. Classification: −mean_x Σ_k p̄_k log q_k.
// Regression: −mean_x E[log N(y; μ_ω, e^{s_ω})] with y ~ teacher, which only
// needs the teacher mean and spread.
inline Var distillation_loss_tape(const MLPSpec& student, Var omega, const Tensor& inputs,
                                  const TeacherTargets& t) {
  Tape& tape = *omega.tape;
  const std::size_t n = inputs.shape[0];
  const Var out = forward_tape(student, omega, tape.constant(inputs));
  if (t.classification) {
    detail::require(t.mean.shape[1] == student.output_width(), "distillation_loss: class count mismatch");
    return -sum(log_softmax_rows(out) * tape.constant(t.mean)) / static_cast<double>(n);
  }
  const std::size_t d = t.mean.shape[1];
  detail::require(student.output_width() == 2 * d, "distillation_loss: student head width mismatch");
  Tensor pick_mean = Tensor::zeros({2 * d, d}), pick_logvar = Tensor::zeros({2 * d, d});
  for (std::size_t j = 0; j < d; ++j) {
    pick_mean.at(2 * j, j) = 1.0;
    pick_logvar.at(2 * j + 1, j) = 1.0;
  }
  const Var mu = matmul(out, tape.constant(pick_mean));
  const Var s = matmul(out, tape.constant(pick_logvar));
  const Var quad = (square(mu - tape.constant(t.mean)) + tape.constant(t.spread)) * exp(-s);
  const double c = 0.5 * kLog2Pi * static_cast<double>(d);
  return sum(s + quad) * (0.5 / static_cast<double>(n)) + c;
}

struct DistillLoss {
  double value = 0.0;
  bool zero_probability = false;  // q_ω(k|x) underflowed to 0 where the teacher has mass
};

inline DistillLoss distillation_loss(const MLPSpec& student, std::span<const double> omega,
                                     const std::vector<Vector>& xs, const TeacherTargets& t) {
  detail::require(!xs.empty(), "distillation_loss: empty batch");
  detail::require(omega.size() == student.param_count(), "distillation_loss: parameter length mismatch");
  detail::require(t.mean.shape.size() == 2 && t.mean.shape[0] == xs.size(), "distillation_loss: targets do not match batch");
  DistillLoss r;
  Tape tape;
  const Var w = tape.constant(Tensor::vector(Vector(omega.begin(), omega.end())));
  r.value = distillation_loss_tape(student, w, rows_to_tensor(xs), t).item();
  if (t.classification) {
    const double floor = std::log(std::numeric_limits<double>::denorm_min());
    for (std::size_t i = 0; i < xs.size() && !r.zero_probability; ++i) {
      const Vector logits = forward(student, omega, xs[i], OutputMode::Logits);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double v : logits) z += std::exp(v - mx);
      for (std::size_t k = 0; k < logits.size(); ++k)
        if (t.mean.at(i, k) > 0 && logits[k] - mx - std::log(z) < floor) r.zero_probability = true;
    }
  }
  return r;
}

// Fresh teacher draws for this batch.
inline DistillLoss distillation_loss(const TeacherHandle& teacher, const MLPSpec& student,
                                     std::span<const double> omega, const std::vector<Vector>& xs, Rng& rng) {
  validate_student(student, teacher);
  return distillation_loss(student, omega, xs, teacher_targets(teacher, xs, rng));
}

struct StudentTrainConfig {
  std::size_t iterations = 2000;
  double lr = 1e-2;
  double lr_final_scale = 1.0;
  std::size_t batch_size = 0;  // 0: all of D′_x
  bool resample_teacher = true;  // false: one teacher query up front
  double weight_decay = 0.0;     // adds weight_decay·‖ω‖²
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(iterations >= 1, "StudentTrainConfig: iterations must be >= 1");
    detail::require(lr > 0 && lr_final_scale > 0, "StudentTrainConfig: rates must be positive");
    detail::require(weight_decay >= 0, "StudentTrainConfig: weight_decay must be nonnegative");
    optimizer.validate();
  }
};

struct StudentResult {
  Vector omega;
  Vector loss;
  bool diverged = false;
  std::string message;
};

inline StudentResult train_student(const TeacherHandle& teacher, const MLPSpec& student, Vector omega0,
                                   const std::vector<Vector>& inputs, const StudentTrainConfig& cfg) {
  teacher.validate();
  validate_student(student, teacher);
  cfg.validate();
  detail::require(!inputs.empty(), "train_student: no unlabeled inputs");
  detail::require(omega0.size() == student.param_count(), "train_student: parameter length mismatch");
  const std::size_t n = inputs.size();
  const bool minibatch = cfg.batch_size > 0 && cfg.batch_size < n;
  Rng rng = Rng(cfg.seed).stream("distill");
  const Tensor all_inputs = rows_to_tensor(inputs);
  TeacherTargets fixed;
  if (!cfg.resample_teacher) fixed = teacher_targets(teacher, inputs, rng);
  Optimizer opt(cfg.optimizer, omega0.size());
  StudentResult res;
  res.omega = std::move(omega0);
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    std::vector<std::size_t> batch;
    if (minibatch) batch = sample_batch(n, cfg.batch_size, rng);
    Vector grad;
    try {
      TeacherTargets targets;
      Tensor x = minibatch ? detail::gather_rows(all_inputs, batch) : all_inputs;
      if (cfg.resample_teacher) {
        if (minibatch) {
          std::vector<Vector> rows;
          rows.reserve(batch.size());
          for (std::size_t i : batch) rows.push_back(inputs[i]);
          targets = teacher_targets(teacher, rows, rng);
        } else {
          targets = teacher_targets(teacher, inputs, rng);
        }
      } else {
        targets = minibatch ? gather_targets(fixed, batch) : fixed;
      }
      Tape tape;
      const Var w = tape.leaf(Tensor::vector(res.omega));
      Var f = distillation_loss_tape(student, w, x, targets);
      if (cfg.weight_decay > 0) f = f + sum(square(w)) * cfg.weight_decay;
      tape.backward(f);
      res.loss.push_back(f.item());
      grad = tape.grad(w).values;
    } catch (const NumericFailure& e) {
      res.diverged = true;
      res.message = "numeric failure at iteration " + std::to_string(t) + ": " + e.what();
      break;
    }
    opt.step(res.omega, grad, scheduled_rate(cfg.lr, cfg.lr_final_scale, t, cfg.iterations));
    if (!std::all_of(res.omega.begin(), res.omega.end(), [](double v) { return std::isfinite(v) && std::abs(v) <= 1e6; })) {
      res.diverged = true;
      res.message = "parameters diverged at iteration " + std::to_string(t);
      break;
    }
  }
  return res;
}

// Student regression head split into per-output mean and variance.
struct GaussianHead {
  Vector mean;
  Vector variance;
};

inline GaussianHead student_gaussian(const MLPSpec& student, std::span<const double> omega, std::span<const double> x) {
  const Vector o = forward(student, omega, x);
  detail::require(o.size() % 2 == 0, "student_gaussian: head width must be even");
  GaussianHead h;
  for (std::size_t j = 0; j < o.size() / 2; ++j) {
    h.mean.push_back(o[2 * j]);
    h.variance.push_back(std::exp(o[2 * j + 1]));
  }
  return h;
}

// Inputs labelled with the teacher's mean class probabilities.
inline Dataset soft_label_dataset(const TeacherHandle& teacher, const std::vector<Vector>& inputs, Rng& rng) {
  detail::require(teacher.likelihood.is_classification(), "soft_label_dataset: classification teacher required");
  Dataset d;
  d.name = "soft-labels";
  d.inputs = inputs;
  if (inputs.empty()) return d;
  const TeacherTargets t = teacher_targets(teacher, inputs, rng);
  const std::size_t k = t.mean.shape[1];
  d.targets.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Vector p(k);
    for (std::size_t j = 0; j < k; ++j) p[j] = t.mean.at(i, j);
    d.targets.push_back(std::move(p));
  }
  d.validate();
  return d;
}

}  // namespace bnn
