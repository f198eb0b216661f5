#pragma once

// Desk-scale metrics: Gaussian Frechet distance between feature sets, a
// lip-sync retrieval proxy and a long-generation drift statistic.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "etk/tensor.hpp"

namespace etk::eval {

struct FeatureSet {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }

  /// Sample mean and unbiased covariance of the rows of x [n, d], n >= 2.
  static FeatureSet from_samples(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("FeatureSet needs [n, d] features, got " + shape_str(x.shape()));
    const auto n = static_cast<Eigen::Index>(x.dim(0)), d = static_cast<Eigen::Index>(x.dim(1));
    if (n < 2) throw std::invalid_argument("FeatureSet needs at least 2 samples");
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(x.data().data(), n, d);
    FeatureSet f;
    f.mean = X.colwise().mean().transpose();
    Eigen::MatrixXd C = X.rowwise() - f.mean.transpose();
    f.cov = C.transpose() * C / static_cast<double>(n - 1);
    return f;
  }

  static FeatureSet from_moments(Eigen::VectorXd mu, Eigen::MatrixXd sigma) {
    if (sigma.rows() != mu.size() || sigma.cols() != mu.size()) throw ShapeError("FeatureSet moments: dim mismatch");
    return {std::move(mu), std::move(sigma)};
  }
};

namespace detail {

inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const double tol = 1e-9 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -tol) throw std::domain_error("frechet_distance: covariance is not PSD");
  Eigen::VectorXd s = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

inline constexpr double kCovRegularization = 1e-6;

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) with S = cov + 1e-6 I.
/// The trace of the product root is taken as Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}),
/// which has the same eigenvalues and is symmetric.
inline double frechet_distance(const FeatureSet& a, const FeatureSet& b) {
  if (a.dim() != b.dim())
    throw ShapeError("frechet_distance: dims " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  const auto d = static_cast<Eigen::Index>(a.dim());
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd sa = a.cov + kCovRegularization * I, sb = b.cov + kCovRegularization * I;
  const Eigen::MatrixXd ra = detail::sqrt_psd(sa);
  const Eigen::MatrixXd m = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const double tol = 1e-9 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -tol) throw std::domain_error("frechet_distance: product is not PSD");
  const double tr_root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double dist = (a.mean - b.mean).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_root;
  return std::max(0.0, dist);
}

inline double frechet_distance(const Tensor& a, const Tensor& b) {
  return frechet_distance(FeatureSet::from_samples(a), FeatureSet::from_samples(b));
}

/// Fraction of rows i whose most cosine-similar l_v row is row i.
inline double retrieval_sync_accuracy(const Tensor& l_a, const Tensor& l_v) {
  if (l_a.rank() != 2 || l_a.shape() != l_v.shape())
    throw ShapeError("retrieval_sync_accuracy: " + shape_str(l_a.shape()) + " vs " + shape_str(l_v.shape()));
  const std::size_t n = l_a.dim(0), d = l_a.dim(1);
  if (n < 2) throw std::invalid_argument("retrieval_sync_accuracy needs N >= 2");
  auto norms = [&](const Tensor& x) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += x.data()[i * d + k] * x.data()[i * d + k];
      if (!(s > 0.0)) throw std::domain_error("retrieval_sync_accuracy: zero row");
      r[i] = std::sqrt(s);
    }
    return r;
  };
  const auto na = norms(l_a), nv = norms(l_v);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_sim = -2.0;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += l_a.data()[i * d + k] * l_v.data()[j * d + k];
      const double sim = dot / (na[i] * nv[j]);
      if (sim > best_sim) {
        best_sim = sim;
        best = j;
      }
    }
    hits += best == i;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

enum class DriftReference {
  global_mean,     // per-dimension mean over the whole sequence
  leading_window,  // per-dimension mean over the first window
};

struct DriftReport {
  std::vector<double> window_rms;  // mean per-frame RMS deviation in each consecutive window
  double slope = 0.0;              // least-squares slope over window index
  double slope_stderr = 0.0;
};

/// Per-frame RMS distance of seq [L, d] to a reference mean, averaged over
/// consecutive non-overlapping windows (a trailing partial window is dropped).
inline DriftReport drift_metric(const Tensor& seq, std::size_t window,
                                DriftReference ref = DriftReference::global_mean) {
  if (seq.rank() != 2) throw ShapeError("drift_metric needs [L, d], got " + shape_str(seq.shape()));
  const std::size_t L = seq.dim(0), d = seq.dim(1);
  if (window < 1 || window > L) throw std::invalid_argument("drift_metric: window must be in [1, length]");
  const std::size_t ref_rows = ref == DriftReference::global_mean ? L : window;
  std::vector<double> mu(d, 0.0);
  for (std::size_t t = 0; t < ref_rows; ++t)
    for (std::size_t k = 0; k < d; ++k) mu[k] += seq.data()[t * d + k] / static_cast<double>(ref_rows);
  DriftReport r;
  const std::size_t nw = L / window;
  for (std::size_t w = 0; w < nw; ++w) {
    double acc = 0;
    for (std::size_t t = w * window; t < (w + 1) * window; ++t) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += std::pow(seq.data()[t * d + k] - mu[k], 2);
      acc += std::sqrt(s / static_cast<double>(d));
    }
    r.window_rms.push_back(acc / static_cast<double>(window));
  }
  if (nw >= 2) {
    const double n = static_cast<double>(nw);
    double xm = (n - 1.0) / 2.0, ym = 0;
    for (double v : r.window_rms) ym += v / n;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < nw; ++i) {
      sxx += (static_cast<double>(i) - xm) * (static_cast<double>(i) - xm);
      sxy += (static_cast<double>(i) - xm) * (r.window_rms[i] - ym);
    }
    r.slope = sxy / sxx;
    if (nw >= 3) {
      double sse = 0;
      for (std::size_t i = 0; i < nw; ++i) {
        const double fit = ym + r.slope * (static_cast<double>(i) - xm);
        sse += std::pow(r.window_rms[i] - fit, 2);
      }
      r.slope_stderr = std::sqrt(sse / (n - 2.0) / sxx);
    }
  }
  return r;
}

/// Mean per-frame RMS of rows [begin, end) of seq [L, d] around the whole-sequence mean.
inline double segment_rms(const Tensor& seq, std::size_t begin, std::size_t end) {
  const std::size_t L = seq.dim(0), d = seq.dim(1);
  if (begin >= end || end > L) throw std::invalid_argument("segment_rms: bad range");
  std::vector<double> mu(d, 0.0);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t k = 0; k < d; ++k) mu[k] += seq.data()[t * d + k] / static_cast<double>(L);
  double acc = 0;
  for (std::size_t t = begin; t < end; ++t) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += std::pow(seq.data()[t * d + k] - mu[k], 2);
    acc += std::sqrt(s / static_cast<double>(d));
  }
  return acc / static_cast<double>(end - begin);
}

}  // namespace etk::eval
