#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "bnn/data.hpp"
#include "bnn/vi.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace bnn;

namespace {

constexpr double kLogEvidence = -0.5 * 2.5310242469692907;  // -½·log(4π)

// E_q[log q − log joint] for the conjugate scalar model, where
// log joint(θ) = −log 2π − θ².
double conjugate_expected_objective(const MeanFieldGaussian& q) {
  const double mu = q.mu[0], s = softplus(q.rho[0]);
  return -0.5 * std::log(2 * std::numbers::pi * std::numbers::e * s * s) + std::log(2 * std::numbers::pi) + mu * mu +
         s * s;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST(Reparam, LocationAndDegenerateScale) {
  const MeanFieldGaussian q{{1.0, -2.0}, {0.3, -0.4}};
  EXPECT_EQ(reparam_sample(q, Vector{0.0, 0.0}), q.mu);
  const MeanFieldGaussian tight{{1.0, -2.0}, {-60.0, -60.0}};
  const Vector t = reparam_sample(tight, Vector{3.0, -5.0});
  EXPECT_NEAR(t[0], 1.0, 1e-20);
  EXPECT_NEAR(t[1], -2.0, 1e-20);
  EXPECT_THROW(reparam_sample(q, Vector{0.0}), ContractViolation);
}

TEST(Reparam, MonteCarloMoments) {
  const MeanFieldGaussian q = MeanFieldGaussian::from_sigma({1.0, -1.0}, {0.5, 2.0});
  Rng rng(1);
  std::vector<double> a, b;
  for (int i = 0; i < 100000; ++i) {
    const Vector t = reparam_sample(q, rng.normal_vector(2));
    a.push_back(t[0]);
    b.push_back(t[1]);
  }
  EXPECT_NEAR(oracle::mean(a), 1.0, 0.01);
  EXPECT_NEAR(oracle::mean(b), -1.0, 0.01);
  EXPECT_NEAR(std::sqrt(oracle::variance(a)), 0.5, 0.005);
  EXPECT_NEAR(std::sqrt(oracle::variance(b)), 2.0, 0.02);
}

TEST(Reparam, EmpiricalCdfMatchesQ) {
  const MeanFieldGaussian q = MeanFieldGaussian::from_sigma({0.7}, {1.3});
  Rng rng(2);
  std::vector<double> s;
  for (int i = 0; i < 100000; ++i) s.push_back(reparam_sample(q, rng.normal_vector(1))[0]);
  std::sort(s.begin(), s.end());
  double ks = 0;
  const double n = static_cast<double>(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double c = normal_cdf((s[i] - 0.7) / 1.3);
    ks = std::max({ks, std::abs(c - i / n), std::abs(c - (i + 1) / n)});
  }
  EXPECT_LT(ks, 0.01);
}

TEST(LogQ, ModeAndTranslationAndOracle) {
  const std::size_t d = 5;
  const MeanFieldGaussian unit = MeanFieldGaussian::from_sigma(Vector(d, 0.3), Vector(d, 1.0));
  EXPECT_NEAR(log_q(unit, unit.mu), -0.5 * d * std::log(2 * std::numbers::pi), 1e-12);
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    MeanFieldGaussian q{rng.normal_vector(d), rng.normal_vector(d)};
    const Vector theta = rng.normal_vector(d);
    double expect = 0;
    for (std::size_t k = 0; k < d; ++k) expect += oracle::normal_logpdf(theta[k], q.mu[k], std::log1p(std::exp(q.rho[k])));
    EXPECT_NEAR(log_q(q, theta), expect, 1e-12);
    Vector shifted = theta;
    MeanFieldGaussian qs = q;
    for (std::size_t k = 0; k < d; ++k) {
      shifted[k] += 2.5;
      qs.mu[k] += 2.5;
    }
    EXPECT_NEAR(log_q(qs, shifted), log_q(q, theta), 1e-12);
  }
}

TEST(Elbo, ExactPosteriorGivesLogEvidence) {
  const auto model = fixtures::conjugate_model();
  const MeanFieldGaussian post = MeanFieldGaussian::from_sigma({0.0}, {std::sqrt(0.5)});
  Rng rng(4);
  const auto e = elbo_estimate(model, post, 50000, rng);
  EXPECT_NEAR(e.value, kLogEvidence, 0.01);
  EXPECT_FALSE(e.flagged);
}

TEST(Elbo, LowerBoundsLogEvidence) {
  const auto model = fixtures::conjugate_model();
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    const MeanFieldGaussian q = MeanFieldGaussian::from_sigma({rng.normal()}, {rng.uniform(0.1, 2.0)});
    const auto e = elbo_estimate(model, q, 2000, rng);
    EXPECT_LE(e.value, kLogEvidence + 3 * e.std_error);
    // closed form: E_q[log joint] + H(q)
    EXPECT_NEAR(e.value, -conjugate_expected_objective(q), 5 * e.std_error + 1e-12);
  }
}

TEST(Elbo, PriorAsQWithoutDataIsZero) {
  const LogJointModel m(fixtures::scalar_identity(), Prior::isotropic_gaussian(1.0), Likelihood::gaussian(1.0), Dataset{});
  const MeanFieldGaussian prior = MeanFieldGaussian::from_sigma({0.0}, {1.0});
  Rng rng(6);
  EXPECT_NEAR(elbo_estimate(m, prior, 1000, rng).value, 0.0, 1e-12);
}

TEST(Elbo, ZeroProbabilityIsFlagged) {
  const MLPSpec spec = MLPSpec::chain({1, 2}, Activation::Identity, Activation::Softmax);
  Dataset d;
  d.inputs = {{1.0}};
  d.labels = {1};
  const LogJointModel m(spec, Prior::isotropic_gaussian(1.0), Likelihood::categorical(2), d);
  const MeanFieldGaussian q = MeanFieldGaussian::from_sigma({1e308, -1e308, 1e308, -1e308}, Vector(4, 1e-3));
  Rng rng(7);
  const auto e = elbo_estimate(m, q, 10, rng);
  EXPECT_TRUE(e.flagged);
  EXPECT_TRUE(is_log_zero(e.value));
}

TEST(Elbo, QuadratureIdentity) {
  const auto model = fixtures::conjugate_model();
  const auto lj = [&](double t) { return log_joint(model, Vector{t}); };
  for (const auto& [mu, s] : std::vector<std::pair<double, double>>{{0.0, std::sqrt(0.5)}, {0.3, 0.5}, {-0.2, 0.9}}) {
    const auto r = quadrature_elbo(lj, mu, s, -5.0, 5.0, 41);
    EXPECT_NEAR(r.elbo + r.kl, kLogEvidence, 1e-3);
    const MeanFieldGaussian q = MeanFieldGaussian::from_sigma({mu}, {s});
    EXPECT_NEAR(r.elbo, -conjugate_expected_objective(q), 1e-3);
    // KL between two Gaussians in closed form
    const double v = 0.5;
    const double kl = std::log(std::sqrt(v) / s) + (s * s + mu * mu) / (2 * v) - 0.5;
    EXPECT_NEAR(r.kl, kl, 1e-3);
  }
}

TEST(Pathwise, ConjugateGradientMatchesClosedForm) {
  const auto model = fixtures::conjugate_model();
  const MeanFieldGaussian q = MeanFieldGaussian::from_sigma({0.1}, {0.5});
  Rng rng(8);
  const auto r = pathwise_gradient_check(model, q, conjugate_expected_objective, 100000, rng);
  EXPECT_LT(r.max_rel_dev, 1e-2);
  // closed-form derivatives: ∂/∂μ = 2μ, ∂/∂ρ = (2σ − 1/σ)·sigmoid(ρ)
  EXPECT_NEAR(r.finite_difference[0], 0.2, 1e-8);
  EXPECT_NEAR(r.finite_difference[1], (2 * 0.5 - 1 / 0.5) * sigmoid(q.rho[0]), 1e-8);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(r.pathwise[i] + r.explicit_part[i], r.estimator[i], 1e-12);
}

TEST(Pathwise, ThetaIndependentObjectiveHasNoPathwiseTerm) {
  const MeanFieldGaussian q{{0.3, -0.2}, {0.1, 0.5}};
  const PhiObjective f = [](Tape&, Var, Var mu, Var rho, std::span<const Var>) {
    return sum(square(mu)) + sum(softplus(rho));
  };
  Rng rng(9);
  const auto g = reparam_gradient(f, q, rng.normal_vector(2));
  EXPECT_EQ(g.pathwise_mu, Vector(2, 0.0));
  EXPECT_EQ(g.pathwise_rho, Vector(2, 0.0));
  EXPECT_NEAR(g.d_mu[0], 0.6, 1e-15);
  EXPECT_NEAR(g.d_rho[1], sigmoid(0.5), 1e-15);
}

TEST(Pathwise, ScaleGradientVanishesAtOptimum) {
  const auto model = fixtures::conjugate_model();
  const MeanFieldGaussian q = MeanFieldGaussian::from_sigma({0.0}, {std::sqrt(0.5)});
  Rng rng(10);
  const auto r = pathwise_gradient_check(model, q, conjugate_expected_objective, 100000, rng);
  EXPECT_LT(std::abs(r.estimator[1]), 3 * r.std_error[1]);
  EXPECT_LT(std::abs(r.estimator[0]), 3 * r.std_error[0]);
}

TEST(Pathwise, SingleSampleEstimatorIsUnbiased) {
  Rng drng(11);
  const Dataset d = data::sinusoid_1d(8, 0.1, -0.5, 0.5, drng);
  const MLPSpec spec = MLPSpec::chain({1, 3, 1}, Activation::Tanh);
  const LogJointModel m(spec, Prior::isotropic_gaussian(1.0), Likelihood::gaussian(0.3), d);
  Rng irng(12);
  const MeanFieldGaussian q = init_mean_field(spec, irng, 0.3);
  const PhiObjective f = [&](Tape&, Var theta, Var mu, Var rho, std::span<const Var>) {
    return log_q_tape(theta, mu, rho) - log_joint_tape(m, theta);
  };
  auto run = [&](std::uint64_t seed, Vector& mean, Vector& se) {
    Rng rng(seed);
    const std::size_t n = 20000, p = 2 * q.dim();
    Vector s1(p, 0), s2(p, 0);
    for (std::size_t k = 0; k < n; ++k) {
      const auto g = reparam_gradient(f, q, rng.normal_vector(q.dim()));
      for (std::size_t i = 0; i < q.dim(); ++i) {
        s1[i] += g.d_mu[i], s2[i] += g.d_mu[i] * g.d_mu[i];
        s1[q.dim() + i] += g.d_rho[i], s2[q.dim() + i] += g.d_rho[i] * g.d_rho[i];
      }
    }
    mean.resize(p);
    se.resize(p);
    for (std::size_t i = 0; i < p; ++i) {
      mean[i] = s1[i] / n;
      se[i] = std::sqrt((s2[i] / n - mean[i] * mean[i]) / (n - 1));
    }
  };
  Vector ma, sa, mb, sb;
  run(13, ma, sa);
  run(14, mb, sb);
  int outside = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) outside += std::abs(ma[i] - mb[i]) > 3 * std::hypot(sa[i], sb[i]);
  EXPECT_LE(outside, 1);
}

TEST(BayesByBackprop, ConjugatePosterior) {
  const auto model = fixtures::conjugate_model();
  VITrainConfig cfg;
  cfg.iterations = 10000;
  cfg.lr = 0.02;
  cfg.lr_final_scale = 0.01;
  cfg.seed = 1;
  const auto r = bayes_by_backprop(model, MeanFieldGaussian::from_sigma({1.0}, {0.05}), cfg);
  ASSERT_FALSE(r.diverged) << r.message;
  EXPECT_LT(std::abs(r.q.mu[0]), 0.02);
  EXPECT_LT(std::abs(r.q.sigma()[0] - std::sqrt(0.5)), 0.02);
  EXPECT_EQ(r.trace.neg_f.size(), 10000u);
}

TEST(BayesByBackprop, NoDataRecoversPrior) {
  const MLPSpec spec = MLPSpec::chain({1, 3, 1}, Activation::Tanh);
  const LogJointModel m(spec, Prior::isotropic_gaussian(1.0), Likelihood::gaussian(0.5), Dataset{});
  Rng irng(2);
  VITrainConfig cfg;
  cfg.iterations = 8000;
  cfg.lr = 0.03;
  cfg.lr_final_scale = 0.01;
  cfg.mc_samples = 4;
  const auto r = bayes_by_backprop(m, init_mean_field(spec, irng), cfg);
  EXPECT_LT(kl_to_isotropic(r.q, 1.0), 0.01);
}

TEST(BayesByBackprop, DeterministicGivenSeed) {
  Rng drng(3);
  const LogJointModel m(MLPSpec::chain({1, 4, 1}, Activation::Tanh), Prior::isotropic_gaussian(1.0),
                        Likelihood::gaussian(0.2), data::sinusoid_1d(10, 0.1, -0.5, 0.5, drng));
  Rng irng(4);
  const MeanFieldGaussian q0 = init_mean_field(m.spec(), irng);
  VITrainConfig cfg;
  cfg.iterations = 200;
  cfg.batch_size = 4;
  cfg.seed = 9;
  const auto a = bayes_by_backprop(m, q0, cfg);
  const auto b = bayes_by_backprop(m, q0, cfg);
  EXPECT_TRUE(a.q == b.q);
  EXPECT_EQ(a.trace.neg_f, b.trace.neg_f);
  cfg.seed = 10;
  EXPECT_FALSE(bayes_by_backprop(m, q0, cfg).q == a.q);
}

TEST(BayesByBackprop, EpistemicUncertaintyGrowsOutOfRange) {
  Rng drng(5);
  const Dataset d = data::sinusoid_1d(20, 0.1, -0.5, 0.5, drng);
  const MLPSpec spec = MLPSpec::chain({1, 16, 1}, Activation::Tanh);
  const LogJointModel m(spec, Prior::isotropic_gaussian(1.0), Likelihood::gaussian(0.1), d);
  Rng irng(6);
  VITrainConfig cfg;
  cfg.iterations = 20000;
  cfg.lr = 0.01;
  cfg.lr_final_scale = 0.1;
  cfg.seed = 7;
  const auto r = bayes_by_backprop(m, init_mean_field(spec, irng), cfg);
  ASSERT_FALSE(r.diverged);
  Rng rng(8);
  auto stdev_at = [&](double x) {
    std::vector<double> y;
    Rng local = rng;
    for (int k = 0; k < 300; ++k) y.push_back(forward(spec, reparam_sample(r.q, local.normal_vector(r.q.dim())), Vector{x})[0]);
    return std::sqrt(oracle::variance(y));
  };
  double in = 0, out = 0;
  for (double x : {-0.4, -0.2, 0.0, 0.2, 0.4}) in += stdev_at(x) / 5;
  for (double x : {-2.0, -1.5, 1.5, 2.0}) out += stdev_at(x) / 4;
  EXPECT_LT(in, out);
}

TEST(BayesByBackprop, DivergenceAbortsWithTrace) {
  const auto model = fixtures::conjugate_model();
  VITrainConfig cfg;
  cfg.iterations = 1000;
  cfg.lr = 1e5;
  cfg.optimizer = OptimizerConfig{OptimizerConfig::Kind::SGD};
  const auto r = bayes_by_backprop(model, MeanFieldGaussian::from_sigma({1.0}, {0.5}), cfg);
  EXPECT_TRUE(r.diverged);
  EXPECT_FALSE(r.trace.neg_f.empty());
  EXPECT_LT(r.trace.neg_f.size(), 1000u);
}

TEST(BayesByBackprop, MinibatchAndAnnealedModesRun) {
  Rng drng(6);
  const LogJointModel m(MLPSpec::chain({1, 1}, Activation::Identity), Prior::isotropic_gaussian(1.0),
                        Likelihood::gaussian(0.3), data::sinusoid_1d(40, 0.1, -0.2, 0.2, drng));
  VITrainConfig cfg;
  cfg.iterations = 3000;
  cfg.lr = 0.02;
  cfg.lr_final_scale = 0.05;
  cfg.batch_size = 10;
  const auto a = bayes_by_backprop(m, MeanFieldGaussian::from_sigma({0, 0}, {0.1, 0.1}), cfg);
  cfg.scaling = ElboScaling::KlAnnealed;
  cfg.anneal_iterations = 1000;
  const auto b = bayes_by_backprop(m, MeanFieldGaussian::from_sigma({0, 0}, {0.1, 0.1}), cfg);
  // Both end near the full-batch Gaussian posterior mean of the slope.
  Eigen::MatrixXd X(40, 2);
  Eigen::VectorXd y(40);
  for (int i = 0; i < 40; ++i) {
    X.row(i) << m.data().inputs[i][0], 1.0;
    y(i) = m.data().targets[i][0];
  }
  const Eigen::MatrixXd prec = X.transpose() * X / 0.09 + Eigen::MatrixXd::Identity(2, 2);
  const Eigen::VectorXd mean = prec.ldlt().solve(X.transpose() * y / 0.09);
  EXPECT_NEAR(a.q.mu[0], mean(0), 0.1);
  EXPECT_NEAR(b.q.mu[0], mean(0), 0.1);
}

TEST(LearnablePrior, RecoversObservationNoise) {
  Rng drng(7);
  Dataset d;
  for (int i = 0; i < 200; ++i) {
    const double x = drng.uniform(-1, 1);
    d.inputs.push_back({x});
    d.targets.push_back({2 * x - 1 + drng.normal(0, 0.3)});
  }
  const LogJointModel m(MLPSpec::chain({1, 1}, Activation::Identity), Prior::isotropic_gaussian(1.0),
                        Likelihood::gaussian(1.0), d);
  const LearnablePrior lp = gaussian_scale_prior(m, 1.0, 1.0);
  VITrainConfig cfg;
  cfg.iterations = 5000;
  cfg.lr = 0.02;
  cfg.lr_final_scale = 0.05;
  cfg.seed = 3;
  const auto r = learn_prior_bbb(lp, MeanFieldGaussian::from_sigma({0, 0}, {0.1, 0.1}), cfg);
  ASSERT_FALSE(r.diverged) << r.message;
  const double sy = std::exp(r.xi[1]);
  EXPECT_GE(sy, 0.25);
  EXPECT_LE(sy, 0.36);
}

TEST(LearnablePrior, FrozenHyperparametersReduceToBayesByBackprop) {
  Rng drng(8);
  const Dataset d = data::sinusoid_1d(15, 0.1, -0.5, 0.5, drng);
  const MLPSpec spec = MLPSpec::chain({1, 3, 1}, Activation::Tanh);
  const LogJointModel base(spec, Prior::isotropic_gaussian(1.0), Likelihood::gaussian(1.0), d);
  const LearnablePrior lp = gaussian_scale_prior(base, 0.8, 0.25);
  const auto [prior, lik] = lp.mapping(lp.xi0);
  const LogJointModel fixed(spec, prior, lik, d);
  Rng irng(9);
  const MeanFieldGaussian q0 = init_mean_field(spec, irng, 0.1);
  VITrainConfig cfg;
  cfg.iterations = 300;
  cfg.lr_hyper = 0.0;
  const auto a = learn_prior_bbb(lp, q0, cfg);
  const auto b = bayes_by_backprop(fixed, q0, cfg);
  EXPECT_EQ(a.xi, lp.xi0);
  for (std::size_t i = 0; i < q0.dim(); ++i) {
    EXPECT_NEAR(a.q.mu[i], b.q.mu[i], 1e-8);
    EXPECT_NEAR(a.q.rho[i], b.q.rho[i], 1e-8);
  }
}

TEST(LearnablePrior, LearnedScaleDoesNotLowerElbo) {
  Rng drng(10);
  const Dataset d = data::sinusoid_1d(30, 0.1, -0.5, 0.5, drng);
  const MLPSpec spec = MLPSpec::chain({1, 4, 1}, Activation::Tanh);
  const LogJointModel base(spec, Prior::isotropic_gaussian(1.0), Likelihood::gaussian(0.1), d);
  const LearnablePrior lp = gaussian_scale_prior(base, 3.0, 0.1);
  Rng irng(11);
  const MeanFieldGaussian q0 = init_mean_field(spec, irng);
  VITrainConfig cfg;
  cfg.iterations = 4000;
  cfg.lr = 0.01;
  cfg.lr_final_scale = 0.1;
  const auto learned = learn_prior_bbb(lp, q0, cfg);
  cfg.lr_hyper = 0.0;
  const auto frozen = learn_prior_bbb(lp, q0, cfg);
  auto elbo = [&](const VIResult& r) {
    const auto [p, l] = lp.mapping(r.xi);
    const LogJointModel mm(spec, p, l, d);
    Rng rng(12);
    return elbo_estimate(mm, r.q, 4000, rng);
  };
  const auto el = elbo(learned), ef = elbo(frozen);
  EXPECT_GE(el.value, ef.value - 3 * std::hypot(el.std_error, ef.std_error));
}

TEST(LastLayer, PartitionCounts) {
  const MLPSpec spec = MLPSpec::chain({1, 16, 1}, Activation::Tanh);
  const auto one = last_layer_partition(spec, 1);
  EXPECT_EQ(one.n_variational, 17u);
  EXPECT_EQ(one.n_deterministic, 32u);
  const auto all = last_layer_partition(spec, 2);
  EXPECT_EQ(all.n_deterministic, 0u);
  EXPECT_EQ(all.n_variational, spec.param_count());
  EXPECT_THROW(last_layer_partition(spec, 0), ContractViolation);
  EXPECT_THROW(last_layer_partition(spec, 3), ContractViolation);
}

TEST(LastLayer, AllLayersIsFullBayesByBackprop) {
  Rng drng(13);
  const LogJointModel m(MLPSpec::chain({1, 3, 1}, Activation::Tanh), Prior::isotropic_gaussian(1.0),
                        Likelihood::gaussian(0.2), data::sinusoid_1d(10, 0.1, -0.5, 0.5, drng));
  Rng irng(14);
  const MeanFieldGaussian q0 = init_mean_field(m.spec(), irng);
  VITrainConfig cfg;
  cfg.iterations = 200;
  const auto a = last_layer_bbb(m, last_layer_partition(m.spec(), 2), {}, q0, cfg);
  const auto b = bayes_by_backprop(m, q0, cfg);
  EXPECT_TRUE(a.q == b.q);
}

TEST(LastLayer, FrozenFeaturesMatchBayesianLinearRegression) {
  Rng drng(15);
  const Dataset d = data::sinusoid_1d(30, 0.1, -0.5, 0.5, drng);
  const MLPSpec spec = MLPSpec::chain({1, 4, 1}, Activation::Tanh);
  const double sy = 0.2;
  const LogJointModel m(spec, Prior::isotropic_gaussian(1.0), Likelihood::gaussian(sy), d);
  const auto part = last_layer_partition(spec, 1);
  // Fixed, well-separated hidden units so the features are not collinear.
  const Vector psi = {4.0, -3.0, 6.0, 2.0, 0.5, -1.0, 0.0, 1.5};

  // Features of the frozen hidden layer plus a bias column.
  const std::size_t h = 4;
  Eigen::MatrixXd Phi(d.size(), h + 1);
  Eigen::VectorXd y(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < h; ++j) Phi(i, j) = std::tanh(psi[j] * d.inputs[i][0] + psi[h + j]);
    Phi(i, h) = 1.0;
    y(i) = d.targets[i][0];
  }
  const Eigen::MatrixXd prec = Phi.transpose() * Phi / (sy * sy) + Eigen::MatrixXd::Identity(h + 1, h + 1);
  const Eigen::VectorXd mean = prec.ldlt().solve(Phi.transpose() * y / (sy * sy));

  VITrainConfig cfg;
  cfg.iterations = 15000;
  cfg.lr = 0.02;
  cfg.lr_final_scale = 0.01;
  cfg.lr_hyper = 0.0;
  cfg.mc_samples = 2;
  const auto r = last_layer_bbb(m, part, psi, MeanFieldGaussian::from_sigma(Vector(h + 1, 0.0), Vector(h + 1, 0.1)), cfg);
  ASSERT_FALSE(r.diverged);
  EXPECT_EQ(r.psi, psi);
  const Vector s = r.q.sigma();
  for (std::size_t j = 0; j <= h; ++j) {
    EXPECT_NEAR(r.q.mu[j], mean(j), 0.05) << j;
    // mean-field optimum: σ_j = 1/√Λ_jj
    EXPECT_NEAR(s[j], 1 / std::sqrt(prec(j, j)), 0.05) << j;
  }
}

TEST(Persistence, JsonAndTrace) {
  const MLPSpec spec = MLPSpec::chain({1, 2, 1}, Activation::Relu);
  Rng rng(17);
  const MeanFieldGaussian q = init_mean_field(spec, rng);
  const auto [q2, s2] = mean_field_from_json(nlohmann::json::parse(to_json(q, spec).dump()));
  EXPECT_TRUE(q2 == q);
  EXPECT_TRUE(s2 == spec);
  VITrace t;
  t.push(0, -1.0);
  t.push(1, -3.0);
  EXPECT_EQ(trace_csv(t), "iteration,neg_f,elbo_running_mean\n0,-1,-1\n1,-3,-2\n");
  EXPECT_THROW(mean_field_from_json(nlohmann::json::parse(R"({"mu":[0],"rho":[0]})")), ConfigError);
}
