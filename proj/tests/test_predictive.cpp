#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "bnn/predictive.hpp"
#include "fixtures.hpp"

using namespace bnn;

namespace {

PredictiveSamples samples_of(std::vector<Vector> outs) { return {std::move(outs), "test", {}}; }

double min_eigenvalue(const std::vector<Vector>& c) {
  const auto m = static_cast<Eigen::Index>(c.size());
  Eigen::MatrixXd a(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) a(i, j) = c[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a).eigenvalues().minCoeff();
}

}  // namespace

TEST(SamplePredictive, PointMassGivesIdenticalOutputs) {
  const MLPSpec spec = MLPSpec::chain({2, 4, 1}, Activation::Tanh);
  Rng rng(1);
  const Vector theta = init_params(spec, rng);
  const auto s = sample_predictive(Posterior(DiracMixture::uniform({theta})), spec, Vector{0.5, -0.1}, 25, rng);
  ASSERT_EQ(s.outputs.size(), 25u);
  for (const auto& o : s.outputs) EXPECT_EQ(o, forward(spec, theta, Vector{0.5, -0.1}));
  EXPECT_EQ(s.source, "dirac-mixture");
  EXPECT_EQ(s.x, (Vector{0.5, -0.1}));
  const auto r = summarize_regression(s);
  EXPECT_EQ(r.cov[0][0], 0.0);
}

TEST(SamplePredictive, SingleDrawIsOneForwardPass) {
  const MLPSpec spec = MLPSpec::chain({1, 3, 2}, Activation::Relu);
  Rng init(2);
  const MeanFieldGaussian q = init_mean_field(spec, init, 0.5);
  Rng a(3), b(3);
  const auto s = sample_predictive(Posterior(q), spec, Vector{0.7}, 1, a);
  ASSERT_EQ(s.outputs.size(), 1u);
  EXPECT_EQ(s.outputs[0], forward(spec, draw_theta(Posterior(q), spec, b), Vector{0.7}));
  EXPECT_THROW(sample_predictive(Posterior(q), spec, Vector{0.7}, 0, a), ContractViolation);
  EXPECT_NO_THROW(summarize_regression(s, std::nullopt, false));
  EXPECT_THROW(summarize_regression(s), ContractViolation);
}

TEST(SamplePredictive, SharedDrawsAcrossInputs) {
  const MLPSpec spec = MLPSpec::chain({1, 3, 1}, Activation::Tanh);
  Rng init(4);
  const Posterior p = init_mean_field(spec, init, 0.3);
  Rng a(5), b(5);
  const auto many = sample_predictive(p, spec, std::vector<Vector>{{0.1}, {0.9}}, 10, a);
  for (std::size_t i = 0; i < 10; ++i) {
    const Vector th = draw_theta(p, spec, b);
    EXPECT_EQ(many[0].outputs[i], forward(spec, th, Vector{0.1}));
    EXPECT_EQ(many[1].outputs[i], forward(spec, th, Vector{0.9}));
  }
}

TEST(SamplePredictive, ConjugateLastLayerMeanMatchesClosedForm) {
  // Fixed tanh features, Gaussian last layer: y = wᵀφ(x) + b + ε. The exact
  // posterior over (w,b) is drawn via Cholesky and fed in as samples.
  const MLPSpec spec = MLPSpec::chain({1, 4, 1}, Activation::Tanh);
  const auto part = last_layer_partition(spec, 1);
  const Vector psi = {1.5, -2.0, 0.7, 3.0, 0.0, 0.5, -0.3, 1.0};
  ASSERT_EQ(psi.size(), part.n_deterministic);
  const double sigma_y = 0.2, sigma_p = 1.0;
  Rng data_rng(6);
  const std::size_t n = 30;
  Eigen::MatrixXd Phi(n, 5);
  Eigen::VectorXd y(n);
  auto features = [&](double x) {
    Eigen::VectorXd f(5);
    for (int j = 0; j < 4; ++j) f(j) = std::tanh(psi[static_cast<std::size_t>(j)] * x + psi[4 + static_cast<std::size_t>(j)]);
    f(4) = 1.0;
    return f;
  };
  for (std::size_t i = 0; i < n; ++i) {
    const double x = data_rng.uniform(-1, 1);
    Phi.row(static_cast<Eigen::Index>(i)) = features(x).transpose();
    y(static_cast<Eigen::Index>(i)) = std::sin(3 * x) + data_rng.normal(0, sigma_y);
  }
  const Eigen::MatrixXd precision =
      Phi.transpose() * Phi / (sigma_y * sigma_y) + Eigen::MatrixXd::Identity(5, 5) / (sigma_p * sigma_p);
  const Eigen::MatrixXd cov = precision.inverse();
  const Eigen::VectorXd mean = cov * Phi.transpose() * y / (sigma_y * sigma_y);
  const Eigen::MatrixXd L = cov.llt().matrixL();
  SampleStore store;
  Rng post(7);
  for (int k = 0; k < 20000; ++k) {
    Eigen::VectorXd z(5);
    for (int j = 0; j < 5; ++j) z(j) = post.normal();
    const Eigen::VectorXd w = mean + L * z;
    Vector th = psi;
    for (int j = 0; j < 5; ++j) th.push_back(w(j));
    store.samples.push_back(th);
    store.log_joint.push_back(0.0);
  }
  Rng rng(8);
  for (double x : {-0.8, 0.0, 0.6, 2.0}) {
    const auto s = sample_predictive(Posterior(store), spec, Vector{x}, 20000, rng);
    const auto r = summarize_regression(s);
    const Eigen::VectorXd f = features(x);
    const double closed = f.dot(mean);
    // resampling from a finite store: both the store and the draws contribute
    const double se = std::sqrt(f.dot(cov * f) * (1.0 / 20000.0 + 1.0 / 20000.0));
    EXPECT_NEAR(r.mean[0], closed, 3 * se) << "x = " << x;
  }
}

TEST(SummarizeRegression, TwoScalarSamples) {
  const auto r = summarize_regression(samples_of({{0.0}, {2.0}}));
  EXPECT_EQ(r.mean[0], 1.0);
  EXPECT_EQ(r.cov[0][0], 2.0);
  EXPECT_FALSE(r.total_cov.has_value());
}

TEST(SummarizeRegression, IdenticalSamplesZeroCovariance) {
  const auto r = summarize_regression(samples_of({{1.0, -3.0}, {1.0, -3.0}, {1.0, -3.0}}));
  for (const auto& row : r.cov)
    for (double v : row) EXPECT_EQ(v, 0.0);
}

TEST(SummarizeRegression, TotalCovarianceAddsNoise) {
  const auto r = summarize_regression(samples_of({{0.0, 1.0}, {2.0, 0.0}, {1.0, 2.0}}), Vector{0.5, 2.0});
  ASSERT_TRUE(r.total_cov.has_value());
  EXPECT_DOUBLE_EQ((*r.total_cov)[0][0], r.cov[0][0] + 0.25);
  EXPECT_DOUBLE_EQ((*r.total_cov)[1][1], r.cov[1][1] + 4.0);
  EXPECT_EQ((*r.total_cov)[0][1], r.cov[0][1]);
}

TEST(SummarizeRegression, GaussianMomentsRecovered) {
  const Vector m = {1.0, -2.0, 0.5};
  Eigen::Matrix3d S;
  S << 2.0, 0.6, -0.4, 0.6, 1.0, 0.3, -0.4, 0.3, 0.5;
  const Eigen::Matrix3d L = S.llt().matrixL();
  Rng rng(9);
  std::vector<Vector> outs;
  for (int k = 0; k < 100000; ++k) {
    const Eigen::Vector3d z(rng.normal(), rng.normal(), rng.normal());
    const Eigen::Vector3d v = L * z;
    outs.push_back({m[0] + v(0), m[1] + v(1), m[2] + v(2)});
  }
  const auto r = summarize_regression(samples_of(outs));
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(r.mean[static_cast<std::size_t>(i)], m[static_cast<std::size_t>(i)], 0.02 * std::sqrt(S(i, i)));
    for (int j = 0; j < 3; ++j)
      EXPECT_NEAR(r.cov[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], S(i, j),
                  0.02 * std::sqrt(S(i, i) * S(j, j)));
  }
}

TEST(SummarizeRegression, SymmetricPsdAndOrderInvariant) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vector> outs;
    const std::size_t n = 2 + rng.index(6);  // often fewer samples than dimensions
    for (std::size_t k = 0; k < n; ++k) outs.push_back(rng.normal_vector(4));
    const auto a = summarize_regression(samples_of(outs));
    std::reverse(outs.begin(), outs.end());
    std::swap(outs.front(), outs[n / 2]);
    const auto b = summarize_regression(samples_of(outs));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(a.cov[i][j], a.cov[j][i]);
        EXPECT_NEAR(a.cov[i][j], b.cov[i][j], 1e-12);
      }
    EXPECT_GE(min_eigenvalue(a.cov), -1e-10);
  }
}

TEST(SummarizeRegression, NonFiniteRejected) {
  EXPECT_THROW(summarize_regression(samples_of({{1.0}, {NAN}})), ContractViolation);
  EXPECT_THROW(summarize_regression(samples_of({})), ContractViolation);
}

TEST(SummarizeClassification, Argmax) {
  const auto c = summarize_classification(samples_of({{0.2, 0.5, 0.3}}));
  EXPECT_EQ(c.predicted, 1u);
  EXPECT_FALSE(c.risk.has_value());
  const auto avg = summarize_classification(samples_of({{0.9, 0.1, 0.0}, {0.1, 0.3, 0.6}}));
  EXPECT_NEAR(avg.p[0], 0.5, 1e-15);
  EXPECT_NEAR(avg.p[1], 0.2, 1e-15);
  EXPECT_NEAR(avg.p[2], 0.3, 1e-15);
  EXPECT_EQ(avg.predicted, 0u);
}

TEST(SummarizeClassification, UniformWithZeroOneCostPicksIndexZero) {
  const std::vector<Vector> zero_one = {{0, 1, 1}, {1, 0, 1}, {1, 1, 0}};
  const auto c = summarize_classification(samples_of({{1.0 / 3, 1.0 / 3, 1.0 / 3}}), zero_one);
  EXPECT_EQ(c.predicted, 0u);
  EXPECT_EQ(summarize_classification(samples_of({{0.25, 0.25, 0.25, 0.25}})).predicted, 0u);
  const auto z = summarize_classification(samples_of({{0.1, 0.7, 0.2}}), std::vector<Vector>(3, Vector(3, 0.0)));
  EXPECT_EQ(z.predicted, 0u);
}

TEST(SummarizeClassification, CostMatrixOverridesProbability) {
  const std::vector<Vector> cost = {{0, 10}, {1, 0}};
  const auto c = summarize_classification(samples_of({{0.6, 0.4}}), cost);
  ASSERT_TRUE(c.risk.has_value());
  EXPECT_NEAR((*c.risk)[0], 4.0, 1e-12);
  EXPECT_NEAR((*c.risk)[1], 0.6, 1e-12);
  EXPECT_EQ(c.predicted, 1u);
  EXPECT_EQ(summarize_classification(samples_of({{0.6, 0.4}})).predicted, 0u);
}

TEST(SummarizeClassification, NormalizationChecked) {
  EXPECT_THROW(summarize_classification(samples_of({{0.5, 0.6}})), ContractViolation);
  EXPECT_NO_THROW(summarize_classification(samples_of({{0.5, 0.5 + 5e-7}})));
  EXPECT_THROW(summarize_classification(samples_of({{0.5, 0.5}}), std::vector<Vector>{{0, 1}}), ContractViolation);
}

TEST(SummarizeClassification, ArgmaxInvariantToCommonScaling) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Vector> raw;
    for (int k = 0; k < 5; ++k) {
      Vector v(4);
      for (double& e : v) e = rng.uniform(0.01, 1.0);
      raw.push_back(v);
    }
    const double scale = rng.uniform(0.1, 100.0);
    auto normalized = [](std::vector<Vector> r, double s) {
      for (auto& v : r) {
        double z = 0;
        for (double& e : v) z += (e *= s);
        for (double& e : v) e /= z;
      }
      return r;
    };
    EXPECT_EQ(summarize_classification(samples_of(normalized(raw, 1.0))).predicted,
              summarize_classification(samples_of(normalized(raw, scale))).predicted);
  }
}

TEST(SummarizeClassification, SimplexInvariant) {
  const MLPSpec spec = MLPSpec::chain({2, 5, 3}, Activation::Relu, Activation::Softmax);
  Rng init(12);
  const Posterior p = init_mean_field(spec, init, 1.0);
  Rng rng(13);
  for (int i = 0; i < 20; ++i) {
    const auto c = summarize_classification(sample_predictive(p, spec, rng.normal_vector(2), 30, rng));
    double s = 0;
    for (double v : c.p) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-10);
  }
}

TEST(PredictionJson, Fields) {
  const auto r = summarize_regression(samples_of({{0.0}, {2.0}}), Vector{1.0});
  const auto j = to_json(r);
  EXPECT_EQ(j.at("mean"), nlohmann::json::array({1.0}));
  EXPECT_EQ(j.at("cov"), nlohmann::json::parse("[[2.0]]"));
  EXPECT_EQ(j.at("total_cov"), nlohmann::json::parse("[[3.0]]"));
  const auto c = to_json(summarize_classification(samples_of({{0.2, 0.8}})));
  EXPECT_EQ(c.at("class"), 1);
  EXPECT_EQ(c.at("p").size(), 2u);
}
