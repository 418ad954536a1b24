#pragma once

// Evaluation metrics:
//  - dsc / iou: per-class overlap between two class maps.
//  - feature_stats: streaming mean/covariance accumulator (double).
//  - proxy_fid: Frechet distance between two Gaussian feature summaries,
//    computed via the symmetrized product S^(1/2) Sg S^(1/2) so only
//    self-adjoint eigensolves are needed.
//  - proxy_is: exp(mean KL(p_i || p_mean)) over per-sample class posteriors.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "duodiff/phantom.hpp"

namespace duodiff {

// Dice coefficient for class `cls`. Both maps empty of the class -> 1.0.
inline double dsc(const label_map& a, const label_map& b, int cls) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("dsc: shape mismatch");
  int64_t na = 0, nb = 0, inter = 0;
  for (size_t i = 0; i < a.ids.size(); ++i) {
    bool ia = a.ids[i] == cls, ib = b.ids[i] == cls;
    na += ia;
    nb += ib;
    inter += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

// Jaccard index for class `cls`. Both maps empty of the class -> 1.0.
inline double iou(const label_map& a, const label_map& b, int cls) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("iou: shape mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.ids.size(); ++i) {
    bool ia = a.ids[i] == cls, ib = b.ids[i] == cls;
    inter += ia && ib;
    uni += ia || ib;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Streaming Gaussian summary of feature vectors. Covariance is the sample
// covariance (divisor n-1); the accumulated outer-product matrix keeps the
// summary symmetric by construction.
class feature_stats {
 public:
  explicit feature_stats(int dim)
      : d_(dim), sum_(Eigen::VectorXd::Zero(dim)),
        outer_(Eigen::MatrixXd::Zero(dim, dim)) {
    if (dim < 1) throw std::invalid_argument("feature_stats: dim must be >= 1");
  }

  void add(std::span<const float> row) {
    if (static_cast<int>(row.size()) != d_)
      throw std::invalid_argument("feature_stats: row has wrong dimension");
    Eigen::VectorXd x(d_);
    for (int i = 0; i < d_; ++i) {
      if (!std::isfinite(row[static_cast<size_t>(i)]))
        throw std::invalid_argument("feature_stats: non-finite feature value");
      x[i] = row[static_cast<size_t>(i)];
    }
    sum_ += x;
    outer_ += x * x.transpose();
    ++n_;
  }

  int dim() const { return d_; }
  int64_t count() const { return n_; }

  Eigen::VectorXd mean() const {
    if (n_ < 1) throw std::runtime_error("feature_stats: no rows accumulated");
    return sum_ / static_cast<double>(n_);
  }

  Eigen::MatrixXd covariance() const {
    if (n_ < 2) throw std::runtime_error("feature_stats: need >= 2 rows for covariance");
    if (n_ < d_ + 1)
      std::fprintf(stderr,
                   "warning: feature_stats: %lld rows for %d dims; covariance is rank "
                   "deficient\n",
                   static_cast<long long>(n_), d_);
    Eigen::VectorXd mu = mean();
    Eigen::MatrixXd c =
        (outer_ - static_cast<double>(n_) * mu * mu.transpose()) / static_cast<double>(n_ - 1);
    return 0.5 * (c + c.transpose());  // kill rounding asymmetry
  }

 private:
  int d_;
  int64_t n_ = 0;
  Eigen::VectorXd sum_;
  Eigen::MatrixXd outer_;
};

namespace metricdetail {

// Eigenvalue clamp shared by the matrix square roots: tiny negatives from
// rounding are flushed to zero, anything clearly negative is an input error.
inline double clamp_eig(double ev, const char* what) {
  if (ev >= 0.0) return ev;
  if (ev >= -1e-6) return 0.0;
  throw std::runtime_error(std::string(what) + ": matrix has eigenvalue " +
                           std::to_string(ev) + " < -1e-6 (not a covariance)");
}

inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success)
    throw std::runtime_error(std::string(what) + ": eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) ev[i] = std::sqrt(clamp_eig(ev[i], what));
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace metricdetail

// Frechet distance between Gaussian summaries:
//   |mu_r - mu_g|^2 + tr(S_r + S_g - 2 (S_r S_g)^(1/2)).
// tr((S_r S_g)^(1/2)) equals tr((S_r^(1/2) S_g S_r^(1/2))^(1/2)), and the
// congruence-symmetrized product is self-adjoint PSD, so the whole
// computation stays in symmetric eigensolves.
inline double proxy_fid(const Eigen::VectorXd& mu_r, const Eigen::MatrixXd& cov_r,
                        const Eigen::VectorXd& mu_g, const Eigen::MatrixXd& cov_g) {
  int d = static_cast<int>(mu_r.size());
  if (mu_g.size() != d || cov_r.rows() != d || cov_r.cols() != d || cov_g.rows() != d ||
      cov_g.cols() != d)
    throw std::invalid_argument("proxy_fid: dimension mismatch");
  if (!mu_r.allFinite() || !mu_g.allFinite() || !cov_r.allFinite() || !cov_g.allFinite())
    throw std::invalid_argument("proxy_fid: non-finite inputs");
  if ((cov_r - cov_r.transpose()).cwiseAbs().maxCoeff() > 1e-8 ||
      (cov_g - cov_g.transpose()).cwiseAbs().maxCoeff() > 1e-8)
    throw std::invalid_argument("proxy_fid: covariance not symmetric within 1e-8");

  Eigen::MatrixXd sr = metricdetail::sqrt_psd(cov_r, "proxy_fid");
  Eigen::MatrixXd inner = sr * cov_g * sr;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("proxy_fid: eigendecomposition failed");
  double tr_sqrt = 0.0;
  for (int i = 0; i < d; ++i)
    tr_sqrt += std::sqrt(metricdetail::clamp_eig(es.eigenvalues()[i], "proxy_fid"));

  return (mu_r - mu_g).squaredNorm() + cov_r.trace() + cov_g.trace() - 2.0 * tr_sqrt;
}

inline double proxy_fid(const feature_stats& real, const feature_stats& gen) {
  return proxy_fid(real.mean(), real.covariance(), gen.mean(), gen.covariance());
}

// Image/mask agreement of one pair: segment the image with the intensity
// oracle and compare against the pair's own mask at the prompt's class.
inline double alignment_dsc(const paired_sample& ps, int classes) {
  if (!ps.prompt.label)
    throw std::invalid_argument("alignment_dsc: prompt has no target label");
  int label_idx =
      vocabulary::index_of(vocabulary::instance().labels, *ps.prompt.label, "label");
  int cls = class_of_label(label_idx, classes);
  return dsc(oracle_segment(ps.image, classes), ps.mask, cls);
}

// exp(mean_i KL(p_i || p_mean)) over rows of per-sample class posteriors.
// Rows must be proper distributions: nonnegative, sum within 1e-6 of 1.
// 0 * log 0 is taken as 0.
inline double proxy_is(const std::vector<std::vector<float>>& probs) {
  if (probs.empty()) throw std::invalid_argument("proxy_is: no rows");
  size_t k = probs[0].size();
  if (k == 0) throw std::invalid_argument("proxy_is: empty rows");
  std::vector<double> pbar(k, 0.0);
  for (const auto& row : probs) {
    if (row.size() != k) throw std::invalid_argument("proxy_is: ragged rows");
    double sum = 0.0;
    for (float v : row) {
      if (!std::isfinite(v) || v < -1e-9)
        throw std::invalid_argument("proxy_is: row is not a distribution (negative entry)");
      sum += std::max(0.0, static_cast<double>(v));
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw std::invalid_argument("proxy_is: row sums to " + std::to_string(sum) +
                                  ", expected 1 within 1e-6");
    for (size_t j = 0; j < k; ++j)
      pbar[j] += std::max(0.0, static_cast<double>(row[j])) / probs.size();
  }
  double mean_kl = 0.0;
  for (const auto& row : probs) {
    double kl = 0.0;
    for (size_t j = 0; j < k; ++j) {
      double p = std::max(0.0, static_cast<double>(row[j]));
      if (p > 0.0) kl += p * std::log(p / pbar[j]);
    }
    mean_kl += kl / probs.size();
  }
  return std::exp(mean_kl);
}

}  // namespace duodiff
