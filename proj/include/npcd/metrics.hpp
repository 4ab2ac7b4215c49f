// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// Point set and image metrics: Chamfer distance (squared), exact Earth
// Mover's Distance (unsquared, equal sizes), 1-NN two-sample accuracy, PSNR
// and pixel-space nearest-neighbour retrieval.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "npcd/core/error.hpp"
#include "npcd/image.hpp"
#include "npcd/point_cloud.hpp"

namespace npcd {

inline constexpr const char* kChamferConvention = "chamfer:mean-min-squared-l2:sum-both-directions";
inline constexpr const char* kEmdConvention = "emd:exact-assignment:mean-l2";
inline constexpr Eigen::Index kEmdExactCap = 256;

namespace detail {
inline void check_point_set(const MatrixXd& a, const char* what) {
  if (a.rows() < 1) throw ArgumentError(std::string(what) + ": empty point set");
  if (a.cols() != 3) throw DimensionError(std::string(what) + ": point sets must be M x 3");
}
}  // namespace detail

inline double chamfer(const MatrixXd& a, const MatrixXd& b) {
  detail::check_point_set(a, "chamfer");
  detail::check_point_set(b, "chamfer");
  std::vector<double> best_b(static_cast<std::size_t>(b.rows()), std::numeric_limits<double>::infinity());
  double sum_a = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      const double d = (a.row(i) - b.row(j)).squaredNorm();
      best = std::min(best, d);
      best_b[static_cast<std::size_t>(j)] = std::min(best_b[static_cast<std::size_t>(j)], d);
    }
    sum_a += best;
  }
  double sum_b = 0.0;
  for (double v : best_b) sum_b += v;
  return sum_a / static_cast<double>(a.rows()) + sum_b / static_cast<double>(b.rows());
}

/// Minimum-cost perfect matching of a square cost matrix (Hungarian method
/// with row/column potentials, O(n^3)). Returns the column assigned to each row.
inline std::vector<Eigen::Index> solve_assignment(const MatrixXd& cost) {
  const Eigen::Index n = cost.rows();
  if (cost.cols() != n) throw DimensionError("solve_assignment: cost matrix must be square");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is a virtual start.
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<double> v(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<Eigen::Index> match(static_cast<std::size_t>(n + 1), 0);  // row matched to column j
  std::vector<Eigen::Index> way(static_cast<std::size_t>(n + 1), 0);
  for (Eigen::Index i = 1; i <= n; ++i) {
    match[0] = i;
    Eigen::Index j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const Eigen::Index i0 = match[static_cast<std::size_t>(j0)];
      double delta = inf;
      Eigen::Index j1 = 0;
      for (Eigen::Index j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)] != 0) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (Eigen::Index j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)] != 0) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const Eigen::Index j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Eigen::Index> row_to_col(static_cast<std::size_t>(n));
  for (Eigen::Index j = 1; j <= n; ++j) row_to_col[static_cast<std::size_t>(match[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

/// Mean Euclidean distance under the optimal bijection.
inline double emd(const MatrixXd& a, const MatrixXd& b) {
  detail::check_point_set(a, "emd");
  detail::check_point_set(b, "emd");
  if (a.rows() != b.rows()) throw ArgumentError("emd: point sets must have equal size");
  if (a.rows() > kEmdExactCap) {
    throw CapabilityError("emd: exact mode supports at most " + std::to_string(kEmdExactCap) + " points");
  }
  const Eigen::Index n = a.rows();
  MatrixXd cost(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) cost(i, j) = (a.row(i) - b.row(j)).norm();
  }
  const auto assign = solve_assignment(cost);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) total += cost(i, assign[static_cast<std::size_t>(i)]);
  return total / static_cast<double>(n);
}

enum class SetDistance { kChamfer, kEmd };

inline double set_distance(const MatrixXd& a, const MatrixXd& b, SetDistance d) {
  return d == SetDistance::kChamfer ? chamfer(a, b) : emd(a, b);
}

/// Leave-one-out 1-NN classification accuracy over generated (label 0)
/// followed by reference (label 1) sets; ties go to the lowest union index.
inline double one_nn_accuracy(const std::vector<MatrixXd>& generated, const std::vector<MatrixXd>& reference,
                              SetDistance distance) {
  if (generated.empty() || reference.empty()) throw ArgumentError("one_nn_accuracy: both lists must be non-empty");
  std::vector<const MatrixXd*> all;
  for (const auto& g : generated) all.push_back(&g);
  for (const auto& r : reference) all.push_back(&r);
  const std::size_t n = all.size();
  MatrixXd dist(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = set_distance(*all[i], *all[j], distance);
      dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d;
      dist(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = d;
    }
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = n;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (best == n || d < best_d) {
        best = j;
        best_d = d;
      }
    }
    if (best == n) continue;  // a single element overall has no neighbour
    const bool own = i < generated.size();
    const bool nb = best < generated.size();
    if (own == nb) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

/// Peak signal-to-noise ratio for images in [0, 1]; +infinity when identical.
inline double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw ArgumentError("psnr: image sizes differ");
  if (a.pixel_count() == 0) throw ArgumentError("psnr: empty image");
  const double mse = (a.rgb - b.rgb).squaredNorm() / static_cast<double>(a.rgb.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

/// Index of the corpus image closest to the query in pixel L2; ties go to the
/// lowest index.
inline std::size_t pixel_retrieval(const Image& query, const std::vector<std::pair<std::string, Image>>& corpus,
                                   std::string* best_id = nullptr) {
  if (corpus.empty()) throw ArgumentError("pixel_retrieval: empty corpus");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Image& img = corpus[i].second;
    if (img.width != query.width || img.height != query.height) throw ArgumentError("pixel_retrieval: image sizes differ");
    const double d = (img.rgb - query.rgb).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  if (best_id != nullptr) *best_id = corpus[best].first;
  return best;
}

struct MetricReport {
  std::string metric;
  double value = 0.0;
  std::size_t generated_count = 0;
  std::size_t reference_count = 0;
  std::string convention;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j = {{"metric", metric},
                        {"generated_count", generated_count},
                        {"reference_count", reference_count},
                        {"convention", convention}};
    if (std::isinf(value)) {
      j["value"] = nullptr;
      j["infinite"] = true;
    } else {
      j["value"] = value;
    }
    return j;
  }
};

}  // namespace npcd
