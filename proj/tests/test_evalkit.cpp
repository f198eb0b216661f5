#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <numeric>

#include "etk/evalkit.hpp"
#include "etk/rng.hpp"

using namespace etk;
using namespace etk::eval;

namespace {

Tensor randn(std::size_t n, std::size_t d, Rng& rng, double sigma = 1.0) {
  return Tensor({n, d}, rng.normals(n * d, sigma));
}

Eigen::MatrixXd random_spd(int d, Rng& rng) {
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
  return a * a.transpose() / d + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

// Tr sqrt(Sa Sb) from the (real, non-negative) eigenvalues of the non-symmetric product.
double frechet_oracle(const FeatureSet& a, const FeatureSet& b) {
  const auto d = a.mean.size();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd sa = a.cov + kCovRegularization * I, sb = b.cov + kCovRegularization * I;
  Eigen::EigenSolver<Eigen::MatrixXd> es(sa * sb);
  double tr = 0;
  for (int i = 0; i < d; ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
  return (a.mean - b.mean).squaredNorm() + sa.trace() + sb.trace() - 2 * tr;
}

}  // namespace

TEST(Frechet, IdenticalSetIsZero) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Tensor x = randn(200, 6, rng);
    EXPECT_NEAR(frechet_distance(x, x), 0.0, 1e-8);
  }
}

TEST(Frechet, UnitMeanShiftIsOne) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(4), nu = Eigen::VectorXd::Zero(4);
  nu(2) = 1.0;
  Eigen::MatrixXd I = Eigen::MatrixXd::Identity(4, 4);
  EXPECT_NEAR(frechet_distance(FeatureSet::from_moments(mu, I), FeatureSet::from_moments(nu, I)), 1.0, 1e-6);
}

TEST(Frechet, DiagonalCovariancesClosedForm) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(3);
  Eigen::MatrixXd a = Eigen::Vector3d(1.0, 4.0, 9.0).asDiagonal(), b = Eigen::Vector3d(4.0, 1.0, 9.0).asDiagonal();
  // sum (sqrt(a_i) - sqrt(b_i))^2 = 1 + 1 + 0, up to the regularizer
  EXPECT_NEAR(frechet_distance(FeatureSet::from_moments(mu, a), FeatureSet::from_moments(mu, b)), 2.0, 1e-6);
}

TEST(Frechet, MatchesNonSymmetricEigenOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const int d = 2 + static_cast<int>(seed % 6);
    Eigen::VectorXd ma(d), mb(d);
    for (int i = 0; i < d; ++i) {
      ma(i) = rng.normal();
      mb(i) = rng.normal();
    }
    auto a = FeatureSet::from_moments(ma, random_spd(d, rng));
    auto b = FeatureSet::from_moments(mb, random_spd(d, rng));
    const double f = frechet_distance(a, b);
    EXPECT_NEAR(f, frechet_oracle(a, b), 1e-8 * std::max(1.0, f));
    EXPECT_NEAR(f, frechet_distance(b, a), 1e-9 * std::max(1.0, f));
  }
}

TEST(Frechet, SampleMomentsAreUnbiased) {
  Tensor x({3, 1}, {1.0, 2.0, 6.0});
  auto f = FeatureSet::from_samples(x);
  EXPECT_DOUBLE_EQ(f.mean(0), 3.0);
  EXPECT_DOUBLE_EQ(f.cov(0, 0), (4.0 + 1.0 + 9.0) / 2.0);
}

TEST(Frechet, RejectsBadInput) {
  Rng rng(1);
  EXPECT_THROW(frechet_distance(randn(10, 3, rng), randn(10, 4, rng)), ShapeError);
  EXPECT_THROW(FeatureSet::from_samples(randn(1, 3, rng)), std::invalid_argument);
  EXPECT_THROW(FeatureSet::from_samples(Tensor::zeros({4})), ShapeError);
}

TEST(Retrieval, IdentityAndPermutationFixedPoints) {
  Rng rng(2);
  Tensor a = randn(64, 8, rng);
  EXPECT_EQ(retrieval_sync_accuracy(a, a), 1.0);
  // Row i of b is row perm[i] of a; hits are exactly the fixed points.
  std::vector<std::size_t> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<double> bv(64 * 8);
  std::size_t fixed = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    fixed += perm[i] == i;
    for (std::size_t k = 0; k < 8; ++k) bv[i * 8 + k] = a.data()[perm[i] * 8 + k];
  }
  // retrieval compares row i of l_a against all rows of l_v
  EXPECT_DOUBLE_EQ(retrieval_sync_accuracy(Tensor({64, 8}, bv), a), static_cast<double>(fixed) / 64.0);
}

TEST(Retrieval, ScaleInvariantAndChanceForIndependentRows) {
  Rng rng(3);
  Tensor a = randn(64, 8, rng);
  Tensor noisy = add(a, randn(64, 8, rng, 0.05));
  EXPECT_EQ(retrieval_sync_accuracy(scale(a, 7.5), noisy), retrieval_sync_accuracy(a, noisy));
  double acc = 0;
  for (int s = 0; s < 50; ++s) acc += retrieval_sync_accuracy(randn(64, 8, rng), randn(64, 8, rng)) / 50.0;
  EXPECT_LE(acc, 0.05);
  EXPECT_THROW(retrieval_sync_accuracy(Tensor::zeros({4, 8}), a), ShapeError);
  EXPECT_THROW(retrieval_sync_accuracy(Tensor::zeros({2, 2}), Tensor::zeros({2, 2})), std::domain_error);
}

TEST(Drift, ConstantSequenceIsZero) {
  Tensor x = Tensor::full({300, 4}, 2.5);
  for (auto ref : {DriftReference::global_mean, DriftReference::leading_window}) {
    auto r = drift_metric(x, 50, ref);
    ASSERT_EQ(r.window_rms.size(), 6u);
    for (double v : r.window_rms) EXPECT_NEAR(v, 0.0, 1e-12);
    EXPECT_NEAR(r.slope, 0.0, 1e-12);
  }
}

TEST(Drift, RampIncreasesAgainstLeadingWindow) {
  std::vector<double> v(400 * 2);
  for (std::size_t t = 0; t < 400; ++t) v[t * 2] = v[t * 2 + 1] = 0.01 * static_cast<double>(t);
  auto r = drift_metric(Tensor({400, 2}, v), 40, DriftReference::leading_window);
  for (std::size_t i = 1; i < r.window_rms.size(); ++i) EXPECT_GT(r.window_rms[i], r.window_rms[i - 1]);
  // Past the first window every frame sits above the leading mean, so window w averages 0.4 w.
  for (std::size_t w = 1; w < r.window_rms.size(); ++w) EXPECT_NEAR(r.window_rms[w], 0.4 * static_cast<double>(w), 1e-9);
  EXPECT_NEAR(r.window_rms[0], 0.1, 1e-9);
  EXPECT_GT(r.slope, 10.0 * r.slope_stderr);
}

TEST(Drift, StationaryNoiseSlopeWithinThreeStandardErrors) {
  int outside = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    auto r = drift_metric(randn(1500, 8, rng), 100);
    ASSERT_GT(r.slope_stderr, 0.0);
    outside += std::abs(r.slope) > 3.0 * r.slope_stderr;
  }
  // |t| > 3 with 13 dof happens ~1% of the time.
  EXPECT_LE(outside, 4);
}

TEST(Drift, RejectsBadWindow) {
  Tensor x = Tensor::zeros({10, 2});
  EXPECT_THROW(drift_metric(x, 0), std::invalid_argument);
  EXPECT_THROW(drift_metric(x, 11), std::invalid_argument);
  EXPECT_THROW(drift_metric(Tensor::zeros({10}), 2), ShapeError);
}

TEST(SegmentRms, MatchesLoop) {
  Rng rng(4);
  Tensor x = randn(50, 3, rng);
  double mu[3] = {0, 0, 0};
  for (std::size_t t = 0; t < 50; ++t)
    for (int k = 0; k < 3; ++k) mu[k] += x.data()[t * 3 + k] / 50.0;
  double acc = 0;
  for (std::size_t t = 10; t < 30; ++t) {
    double s = 0;
    for (int k = 0; k < 3; ++k) s += std::pow(x.data()[t * 3 + k] - mu[k], 2);
    acc += std::sqrt(s / 3.0);
  }
  EXPECT_NEAR(segment_rms(x, 10, 30), acc / 20.0, 1e-12);
  EXPECT_THROW(segment_rms(x, 30, 30), std::invalid_argument);
}
