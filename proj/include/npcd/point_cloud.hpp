// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// Neural point clouds: M positions in 3-space with an M x D feature matrix.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "npcd/core/binary_io.hpp"
#include "npcd/core/error.hpp"
#include "npcd/core/random.hpp"
#include "npcd/core/tape.hpp"

namespace npcd {

struct NeuralPointCloud {
  MatrixXd positions;  // M x 3
  MatrixXd features;   // M x D

  [[nodiscard]] Eigen::Index size() const { return positions.rows(); }
  [[nodiscard]] Eigen::Index feature_dim() const { return features.cols(); }

  void validate() const {
    if (positions.rows() < 1) throw ArgumentError("neural point cloud needs at least one point");
    if (positions.cols() != 3) throw DimensionError("positions must be M x 3");
    if (features.cols() < 1) throw ArgumentError("feature dimension must be at least 1");
    if (features.rows() != positions.rows()) throw DimensionError("positions and features must be row-aligned");
    if (!positions.allFinite() || !features.allFinite()) throw NumericalError("neural point cloud has non-finite entries");
  }
};

/// Per-point Gaussian features. Log-variances are diagonal (M x D) by default;
/// with scalar variance the same value is repeated across a row.
struct VariationalNeuralPointCloud {
  MatrixXd positions;
  MatrixXd means;
  MatrixXd log_variances;
};

struct NormalizationStats {
  Eigen::RowVector3d position_mean = Eigen::RowVector3d::Zero();
  double position_scale = 1.0;
  std::vector<double> feature_min;
  std::vector<double> feature_max;

  [[nodiscard]] std::size_t feature_dim() const { return feature_min.size(); }
};

inline NeuralPointCloud new_zero_init(const MatrixXd& positions, Eigen::Index feature_dim) {
  if (positions.rows() < 1) throw ArgumentError("new_zero_init: empty positions");
  if (feature_dim < 1) throw ArgumentError("new_zero_init: feature dimension must be at least 1");
  NeuralPointCloud pc{positions, MatrixXd::Zero(positions.rows(), feature_dim)};
  pc.validate();
  return pc;
}

inline NeuralPointCloud new_random_init(const MatrixXd& positions, Eigen::Index feature_dim, std::uint64_t seed) {
  if (positions.rows() < 1) throw ArgumentError("new_random_init: empty positions");
  if (feature_dim < 1) throw ArgumentError("new_random_init: feature dimension must be at least 1");
  Rng rng(seed);
  NeuralPointCloud pc{positions, rng.normal_matrix(positions.rows(), feature_dim)};
  pc.validate();
  return pc;
}

/// Greedy max-min subset of `k` rows of `points` (N x 3), starting from
/// `start_index`. Ties go to the lowest index.
inline std::vector<Eigen::Index> farthest_point_sample(const MatrixXd& points, Eigen::Index k,
                                                       Eigen::Index start_index = 0) {
  const Eigen::Index n = points.rows();
  if (points.cols() != 3) throw DimensionError("farthest_point_sample: points must be N x 3");
  if (k < 1 || k > n) throw ArgumentError("farthest_point_sample: need 1 <= k <= N");
  if (start_index < 0 || start_index >= n) throw ArgumentError("farthest_point_sample: start index out of range");
  std::vector<Eigen::Index> chosen;
  chosen.reserve(static_cast<std::size_t>(k));
  std::vector<double> min_dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Eigen::Index current = start_index;
  for (Eigen::Index step = 0; step < k; ++step) {
    chosen.push_back(current);
    min_dist[static_cast<std::size_t>(current)] = -1.0;
    Eigen::Index best = -1;
    double best_d = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double& md = min_dist[static_cast<std::size_t>(i)];
      if (md < 0.0) continue;
      md = std::min(md, (points.row(i) - points.row(current)).squaredNorm());
      if (md > best_d) {
        best_d = md;
        best = i;
      }
    }
    if (best < 0) break;
    current = best;
  }
  return chosen;
}

inline NormalizationStats compute_normalization(const std::vector<NeuralPointCloud>& dataset) {
  if (dataset.empty()) throw ArgumentError("compute_normalization: empty dataset");
  const Eigen::Index d = dataset.front().feature_dim();
  NormalizationStats stats;
  stats.feature_min.assign(static_cast<std::size_t>(d), std::numeric_limits<double>::infinity());
  stats.feature_max.assign(static_cast<std::size_t>(d), -std::numeric_limits<double>::infinity());
  Eigen::RowVector3d sum = Eigen::RowVector3d::Zero();
  double count = 0.0;
  for (const auto& pc : dataset) {
    pc.validate();
    if (pc.feature_dim() != d) throw DimensionError("compute_normalization: feature dimensions differ across dataset");
    sum += pc.positions.colwise().sum();
    count += static_cast<double>(pc.size());
    for (Eigen::Index j = 0; j < d; ++j) {
      auto& lo = stats.feature_min[static_cast<std::size_t>(j)];
      auto& hi = stats.feature_max[static_cast<std::size_t>(j)];
      lo = std::min(lo, pc.features.col(j).minCoeff());
      hi = std::max(hi, pc.features.col(j).maxCoeff());
    }
  }
  stats.position_mean = sum / count;
  double sq = 0.0;
  for (const auto& pc : dataset) {
    sq += (pc.positions.rowwise() - stats.position_mean).squaredNorm();
  }
  const double var = sq / (3.0 * count);
  if (!(var > 0.0)) throw DegenerateError("compute_normalization: positions have zero variance");
  stats.position_scale = std::sqrt(var);
  return stats;
}

namespace detail {
inline void check_stats(const NeuralPointCloud& pc, const NormalizationStats& stats) {
  if (static_cast<std::size_t>(pc.feature_dim()) != stats.feature_dim()) {
    throw ArgumentError("normalization stats have feature dimension " + std::to_string(stats.feature_dim()) +
                        ", cloud has " + std::to_string(pc.feature_dim()));
  }
  if (!(stats.position_scale > 0.0)) throw ArgumentError("normalization stats: position scale must be positive");
}
}  // namespace detail

inline MatrixXd normalize_positions(const MatrixXd& positions, const NormalizationStats& stats) {
  return (positions.rowwise() - stats.position_mean) / stats.position_scale;
}

inline MatrixXd denormalize_positions(const MatrixXd& positions, const NormalizationStats& stats) {
  return (positions * stats.position_scale).rowwise() + stats.position_mean;
}

/// Per-dimension affine map taking [min, max] to [-1, 1]; constant dimensions map to 0.
inline MatrixXd normalize_features(const MatrixXd& features, const NormalizationStats& stats) {
  MatrixXd out(features.rows(), features.cols());
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    const double lo = stats.feature_min[static_cast<std::size_t>(j)];
    const double hi = stats.feature_max[static_cast<std::size_t>(j)];
    if (hi == lo) {
      out.col(j).setZero();
    } else {
      out.col(j).array() = 2.0 * ((features.col(j).array() - lo) / (hi - lo)) - 1.0;
    }
  }
  return out;
}

inline MatrixXd denormalize_features(const MatrixXd& features, const NormalizationStats& stats) {
  MatrixXd out(features.rows(), features.cols());
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    const double lo = stats.feature_min[static_cast<std::size_t>(j)];
    const double hi = stats.feature_max[static_cast<std::size_t>(j)];
    if (hi == lo) {
      out.col(j).setConstant(lo);
    } else {
      out.col(j).array() = 0.5 * (features.col(j).array() + 1.0) * (hi - lo) + lo;
    }
  }
  return out;
}

inline NeuralPointCloud normalize(const NeuralPointCloud& pc, const NormalizationStats& stats) {
  detail::check_stats(pc, stats);
  return {normalize_positions(pc.positions, stats), normalize_features(pc.features, stats)};
}

inline NeuralPointCloud denormalize(const NeuralPointCloud& pc, const NormalizationStats& stats) {
  detail::check_stats(pc, stats);
  return {denormalize_positions(pc.positions, stats), denormalize_features(pc.features, stats)};
}

inline nlohmann::json stats_to_json(const NormalizationStats& s) {
  return {{"position_mean", {s.position_mean(0), s.position_mean(1), s.position_mean(2)}},
          {"position_scale", s.position_scale},
          {"feature_min", s.feature_min},
          {"feature_max", s.feature_max}};
}

inline NormalizationStats stats_from_json(const nlohmann::json& j) {
  try {
    NormalizationStats s;
    const auto mean = j.at("position_mean").get<std::vector<double>>();
    if (mean.size() != 3) throw FormatError("position_mean must have 3 entries");
    s.position_mean = Eigen::RowVector3d(mean[0], mean[1], mean[2]);
    s.position_scale = j.at("position_scale").get<double>();
    s.feature_min = j.at("feature_min").get<std::vector<double>>();
    s.feature_max = j.at("feature_max").get<std::vector<double>>();
    if (s.feature_min.size() != s.feature_max.size()) throw FormatError("feature_min/feature_max lengths differ");
    if (!(s.position_scale > 0.0)) throw FormatError("position_scale must be positive");
    for (std::size_t i = 0; i < s.feature_min.size(); ++i) {
      if (s.feature_max[i] < s.feature_min[i]) throw FormatError("feature_max < feature_min");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("normalization stats: ") + e.what());
  }
}

// NPCD file: "NPCD" | u32 version | u32 M | u32 D | M*3 f32 positions | M*D f32 features.
inline constexpr char kCloudMagic[] = "NPCD";
inline constexpr std::uint32_t kCloudVersion = 1;

inline void save_cloud(const NeuralPointCloud& pc, const std::string& path) {
  pc.validate();
  auto out = binary::open_for_write(path);
  binary::write_bytes(out, std::string_view(kCloudMagic, 4));
  binary::write_le<std::uint32_t>(out, kCloudVersion);
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(pc.size()));
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(pc.feature_dim()));
  for (Eigen::Index i = 0; i < pc.positions.size(); ++i) binary::write_le<float>(out, static_cast<float>(pc.positions.data()[i]));
  for (Eigen::Index i = 0; i < pc.features.size(); ++i) binary::write_le<float>(out, static_cast<float>(pc.features.data()[i]));
  binary::finish_write(out, path);
}

inline NeuralPointCloud load_cloud(const std::string& path) {
  auto in = binary::open_for_read(path);
  if (binary::read_bytes(in, 4, "magic") != std::string_view(kCloudMagic, 4)) throw FormatError("bad NPCD magic: " + path);
  const auto version = binary::read_le<std::uint32_t>(in, "version");
  if (version != kCloudVersion) throw FormatError("unsupported NPCD version " + std::to_string(version));
  const auto m = binary::read_le<std::uint32_t>(in, "point count");
  const auto d = binary::read_le<std::uint32_t>(in, "feature dimension");
  if (m == 0) throw FormatError("NPCD file has no points: " + path);
  if (d == 0) throw FormatError("NPCD file has zero feature dimension: " + path);
  constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 31;
  if (static_cast<std::uint64_t>(m) * (3ull + d) > kMaxElements) throw FormatError("NPCD dimensions overflow: " + path);
  NeuralPointCloud pc{MatrixXd(m, 3), MatrixXd(m, d)};
  for (Eigen::Index i = 0; i < pc.positions.size(); ++i) pc.positions.data()[i] = binary::read_le<float>(in, "positions");
  for (Eigen::Index i = 0; i < pc.features.size(); ++i) pc.features.data()[i] = binary::read_le<float>(in, "features");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in NPCD file: " + path);
  if (!pc.positions.allFinite() || !pc.features.allFinite()) throw FormatError("non-finite values in NPCD file: " + path);
  return pc;
}

}  // namespace npcd
