#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "dda/tensor.hpp"

namespace dda {

enum class LidEstimator { MoM, MLE };
enum class LidDistance { Euclidean, EuclideanOnL2Normalized };

struct LidConfig {
  int64_t k = 16;
  LidEstimator estimator = LidEstimator::MoM;
  LidDistance distance = LidDistance::Euclidean;
  double epsilon = 1e-8;
  double max_estimate = 1e6;
};

struct LidEstimate {
  int64_t query = 0;
  double estimate = 0.0;
  std::vector<double> neighbor_distances;  // sorted ascending, length k
  bool collapsed = false;
};

// ---------------------------------------------------------------------------
// Differentiable distance machinery.
// ---------------------------------------------------------------------------

// M x M Euclidean distance matrix: symmetric, zero diagonal, differentiable.
// The diagonal is masked before the square root so no gradient ever flows
// through sqrt at zero.
template <typename T>
Tensor<T> pairwise_distances(const Tensor<T>& z,
                             LidDistance mode = LidDistance::Euclidean) {
  require(z.ndim() == 2, "pairwise_distances: expected [M,d], got " + shape_str(z.shape()));
  require(z.dim(1) >= 1, "pairwise_distances: zero-dimensional representations");
  require(z.dim(0) >= 2, "pairwise_distances: need at least 2 points");
  Tensor<T> pts = mode == LidDistance::EuclideanOnL2Normalized ? l2_normalize(z, 1) : z;
  const int64_t m = z.dim(0);
  Tensor<T> d2 = pairwise_sq_dist(pts);
  std::vector<T> eye(static_cast<size_t>(m * m), T(0));
  for (int64_t i = 0; i < m; ++i) eye[static_cast<size_t>(i * m + i)] = T(1);
  Tensor<T> I(Shape{m, m}, std::move(eye));
  Tensor<T> dist = sqrt(d2 + I);
  return mul(dist, 1.0 - I);
}

// Per row, the k smallest off-diagonal entries sorted ascending. Ties break
// toward the lower column index; gradients flow through the selected entries
// only.
template <typename T>
Tensor<T> knn_distances(const Tensor<T>& d, int64_t k) {
  require(d.ndim() == 2 && d.dim(0) == d.dim(1),
          "knn_distances: expected square matrix, got " + shape_str(d.shape()));
  const int64_t m = d.dim(0);
  require(k >= 1 && k < m, "knn_distances: need 1 <= k < M, got k=" + std::to_string(k) +
                               " M=" + std::to_string(m));
  std::vector<int64_t> flat;
  flat.reserve(static_cast<size_t>(m * k));
  std::vector<std::pair<T, int64_t>> row(static_cast<size_t>(m - 1));
  for (int64_t i = 0; i < m; ++i) {
    size_t n = 0;
    for (int64_t j = 0; j < m; ++j)
      if (j != i) row[n++] = {d[i * m + j], j};
    std::stable_sort(row.begin(), row.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      return a.second < b.second;
    });
    for (int64_t j = 0; j < k; ++j)
      flat.push_back(i * m + row[static_cast<size_t>(j)].second);
  }
  Tensor<T> sel = index_select(reshape(d, Shape{m * m}), 0, flat);
  return reshape(sel, Shape{m, k});
}

// ---------------------------------------------------------------------------
// Scalar estimators (diagnostics, CLI, oracle checks).
// Both work on distance ratios r_i / r_k, which makes them scale-free.
// ---------------------------------------------------------------------------

inline LidEstimate lid_mom(const std::vector<double>& neighbor_distances,
                           double epsilon = 1e-8, double max_estimate = 1e6) {
  LidEstimate e;
  e.neighbor_distances = neighbor_distances;
  const size_t k = neighbor_distances.size();
  require(k >= 1, "lid_mom: empty neighbor list");
  const double w = neighbor_distances.back();
  if (!(w > epsilon)) {  // collapsed neighborhood
    e.estimate = epsilon;
    e.collapsed = true;
    return e;
  }
  double mu_rho = 0.0, mu = 0.0;
  for (double r : neighbor_distances) {
    mu_rho += r / w;
    mu += r;
  }
  mu_rho /= static_cast<double>(k);
  mu /= static_cast<double>(k);
  const double denom = 1.0 - mu_rho;
  if (denom < epsilon) {
    e.estimate = std::min(mu / epsilon, max_estimate);
    e.collapsed = true;
    return e;
  }
  e.estimate = std::clamp(mu_rho / denom, epsilon, max_estimate);
  return e;
}

inline LidEstimate lid_mle(const std::vector<double>& neighbor_distances,
                           double epsilon = 1e-8, double max_estimate = 1e6) {
  LidEstimate e;
  e.neighbor_distances = neighbor_distances;
  const size_t k = neighbor_distances.size();
  require(k >= 1, "lid_mle: empty neighbor list");
  const double w = neighbor_distances.back();
  if (!(w > epsilon)) {
    e.estimate = epsilon;
    e.collapsed = true;
    return e;
  }
  double mean_log = 0.0;
  for (double r : neighbor_distances) {
    const double rho = std::max(r / w, epsilon);
    mean_log += std::log(rho);  // the i = k term contributes ln(1) = 0
  }
  mean_log /= static_cast<double>(k);
  if (mean_log >= -epsilon) {
    e.estimate = std::min(1.0 / epsilon, max_estimate);
    e.collapsed = true;
    return e;
  }
  e.estimate = std::clamp(-1.0 / mean_log, epsilon, max_estimate);
  return e;
}

inline LidEstimate lid_estimate_row(const std::vector<double>& distances,
                                    const LidConfig& cfg) {
  return cfg.estimator == LidEstimator::MoM
             ? lid_mom(distances, cfg.epsilon, cfg.max_estimate)
             : lid_mle(distances, cfg.epsilon, cfg.max_estimate);
}

// Non-differentiable batch estimation over a point matrix (row per point).
inline std::vector<LidEstimate> lid_estimates(const std::vector<std::vector<double>>& pts,
                                              const LidConfig& cfg) {
  const int64_t m = static_cast<int64_t>(pts.size());
  require(m >= 2, "lid_estimates: need at least 2 points");
  require(cfg.k >= 2 && cfg.k < m,
          "lid_estimates: need 2 <= k < M, got k=" + std::to_string(cfg.k) +
              " M=" + std::to_string(m));
  const size_t d = pts[0].size();
  require(d >= 1, "lid_estimates: zero-dimensional points");
  std::vector<std::vector<double>> p = pts;
  if (cfg.distance == LidDistance::EuclideanOnL2Normalized) {
    for (auto& row : p) {
      double n2 = 0.0;
      for (double v : row) n2 += v * v;
      const double n = std::sqrt(std::max(n2, 1e-24));
      for (double& v : row) v /= n;
    }
  }
  std::vector<LidEstimate> out(static_cast<size_t>(m));
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    std::vector<double> dist;
    dist.reserve(static_cast<size_t>(m - 1));
    for (int64_t j = 0; j < m; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (size_t t = 0; t < d; ++t) {
        const double df = p[static_cast<size_t>(i)][t] - p[static_cast<size_t>(j)][t];
        s += df * df;
      }
      dist.push_back(std::sqrt(s));
    }
    std::nth_element(dist.begin(), dist.begin() + cfg.k - 1, dist.end());
    dist.resize(static_cast<size_t>(cfg.k));
    std::sort(dist.begin(), dist.end());
    out[static_cast<size_t>(i)] = lid_estimate_row(dist, cfg);
    out[static_cast<size_t>(i)].query = i;
  }
  return out;
}

// ---------------------------------------------------------------------------
// The differentiable proxy loss: L = -(1/M) sum_i ln(estimate_i).
// ---------------------------------------------------------------------------

template <typename T>
struct LidLossResult {
  Tensor<T> loss;                   // scalar, on the caller's tape
  std::vector<double> estimates;    // per-query forward values
  std::vector<char> collapse_flags; // per-query guard hits
  bool any_collapse = false;
};

template <typename T>
LidLossResult<T> dda_loss(const Tensor<T>& z, const LidConfig& cfg) {
  require(z.ndim() == 2, "dda_loss: expected [M,d] representations");
  const int64_t m = z.dim(0);
  require(m > cfg.k, "dda_loss: batch size " + std::to_string(m) +
                         " must exceed k=" + std::to_string(cfg.k));
  Tensor<T> dist = pairwise_distances(z, cfg.distance);
  Tensor<T> knn = knn_distances(dist, cfg.k);  // [M,k]
  Tensor<T> w = index_select(knn, 1, {cfg.k - 1});
  Tensor<T> rho = divide(knn, w);
  const T eps = static_cast<T>(cfg.epsilon);
  Tensor<T> ln_est;
  if (cfg.estimator == LidEstimator::MoM) {
    Tensor<T> mu = mean(rho, {1});                         // [M]
    Tensor<T> denom = clamp_min(1.0 - mu, eps);
    Tensor<T> est = clamp(divide(mu, denom), eps, static_cast<T>(cfg.max_estimate));
    ln_est = log(est);
  } else {
    Tensor<T> lr = log(clamp_min(rho, eps));
    Tensor<T> neg_mean = clamp_min(neg(mean(lr, {1})), eps);  // [M]
    Tensor<T> est = clamp(divide(Tensor<T>::scalar(T(1)), neg_mean), eps,
                          static_cast<T>(cfg.max_estimate));
    ln_est = log(est);
  }
  LidLossResult<T> res;
  res.loss = neg(mean(ln_est, {}));
  res.estimates.resize(static_cast<size_t>(m));
  res.collapse_flags.assign(static_cast<size_t>(m), 0);
  for (int64_t i = 0; i < m; ++i) {
    std::vector<double> nd(static_cast<size_t>(cfg.k));
    for (int64_t j = 0; j < cfg.k; ++j)
      nd[static_cast<size_t>(j)] = static_cast<double>(knn[i * cfg.k + j]);
    LidEstimate e = lid_estimate_row(nd, cfg);
    res.estimates[static_cast<size_t>(i)] = e.estimate;
    res.collapse_flags[static_cast<size_t>(i)] = e.collapsed ? 1 : 0;
    res.any_collapse = res.any_collapse || e.collapsed;
  }
  return res;
}

inline double median_of(std::vector<double> v) {
  require(!v.empty(), "median: empty");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace dda
