// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable point-based volume rendering.
//
// A shading point q on a ray gathers up to k neighbouring cloud points within
// a radius. Each neighbour's feature and offset q - p_i go through the
// aggregation MLP; outputs are blended with normalized inverse-distance
// weights, decoded to color (sigmoid) and density (softplus), and composited
// front to back onto the background. Shading points without neighbours have
// zero density and are dropped from the compositing sequence.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "npcd/camera.hpp"
#include "npcd/core/mlp.hpp"
#include "npcd/core/ops.hpp"
#include "npcd/image.hpp"
#include "npcd/point_cloud.hpp"

namespace npcd {

struct View {
  Image image;
  Camera camera;
};

struct RenderConfig {
  int shading_points_per_ray = 128;
  int neighbors_k = 8;
  double neighbor_radius = 0.1;
  Eigen::Vector3d background = Eigen::Vector3d::Ones();
  double distance_epsilon = 1e-8;
  /// Bin midpoints instead of jittered stratified depths.
  bool deterministic = true;

  void validate() const {
    if (shading_points_per_ray < 1) throw ConfigError("shading_points_per_ray must be >= 1");
    if (neighbors_k < 1) throw ConfigError("neighbors_k must be >= 1");
    if (!(neighbor_radius > 0.0)) throw ConfigError("neighbor_radius must be positive");
    if (!(distance_epsilon > 0.0)) throw ConfigError("distance_epsilon must be positive");
  }
};

// ---------------------------------------------------------------------------
// Shading point sampling

struct DepthSamples {
  std::vector<double> depths;
  std::vector<double> deltas;  // gap to the next depth; the last one runs to `far`
};

/// One depth per equal-width bin of [near, far]: the midpoint in
/// deterministic mode, uniform within the bin otherwise.
inline DepthSamples sample_shading_depths(double near, double far, int count, Rng* rng) {
  if (!(near < far)) throw ArgumentError("sample_shading_depths: need near < far");
  if (count < 1) throw ArgumentError("sample_shading_depths: need at least one sample");
  DepthSamples s;
  s.depths.resize(static_cast<std::size_t>(count));
  s.deltas.resize(static_cast<std::size_t>(count));
  const double width = (far - near) / count;
  for (int i = 0; i < count; ++i) {
    const double u = rng == nullptr ? 0.5 : rng->uniform();
    s.depths[static_cast<std::size_t>(i)] = near + (i + u) * width;
  }
  for (int i = 0; i < count; ++i) {
    const double next = i + 1 < count ? s.depths[static_cast<std::size_t>(i + 1)] : far;
    s.deltas[static_cast<std::size_t>(i)] = next - s.depths[static_cast<std::size_t>(i)];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Neighbour queries

struct Neighbor {
  Eigen::Index index = 0;
  double distance = 0.0;
  Eigen::Vector3d offset;  // q - p_index
};

/// Uniform grid over the cloud with cells at least as wide as the radius.
class NeighborIndex {
 public:
  NeighborIndex(const MatrixXd& positions, double radius) : positions_(positions), radius_(radius) {
    if (positions.rows() < 1) throw ArgumentError("NeighborIndex: empty cloud");
    if (!(radius > 0.0)) throw ArgumentError("NeighborIndex: radius must be positive");
    cell_ = radius * (1.0 + 1e-9);
    lo_ = positions.colwise().minCoeff().transpose();
    const Eigen::Vector3d extent = positions.colwise().maxCoeff().transpose() - lo_;
    for (int a = 0; a < 3; ++a) dims_[a] = static_cast<std::int64_t>(std::floor(extent[a] / cell_)) + 1;
    cells_.resize(static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]));
    for (Eigen::Index i = 0; i < positions.rows(); ++i) {
      const auto c = cell_of(positions.row(i).transpose());
      cells_[flat(c[0], c[1], c[2])].push_back(i);
    }
  }

  [[nodiscard]] double radius() const { return radius_; }
  [[nodiscard]] const MatrixXd& positions() const { return positions_; }

  /// Up to k nearest points within the radius, ascending by (distance, index).
  /// `relative` maps a point index to q - p_i; `q` locates the grid cells.
  template <typename RelativeFn>
  std::vector<Neighbor> query(const Eigen::Vector3d& q, int k, RelativeFn&& relative) const {
    std::vector<Neighbor> found;
    const auto c = cell_of(q);
    for (std::int64_t x = std::max<std::int64_t>(c[0] - 1, 0); x <= std::min(c[0] + 1, dims_[0] - 1); ++x) {
      for (std::int64_t y = std::max<std::int64_t>(c[1] - 1, 0); y <= std::min(c[1] + 1, dims_[1] - 1); ++y) {
        for (std::int64_t z = std::max<std::int64_t>(c[2] - 1, 0); z <= std::min(c[2] + 1, dims_[2] - 1); ++z) {
          for (Eigen::Index i : cells_[flat(x, y, z)]) {
            const Eigen::Vector3d off = relative(i);
            const double d = off.norm();
            if (d <= radius_) found.push_back({i, d, off});
          }
        }
      }
    }
    std::sort(found.begin(), found.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
    });
    if (found.size() > static_cast<std::size_t>(k)) found.resize(static_cast<std::size_t>(k));
    return found;
  }

  std::vector<Neighbor> query(const Eigen::Vector3d& q, int k) const {
    return query(q, k, [&](Eigen::Index i) -> Eigen::Vector3d { return q - positions_.row(i).transpose(); });
  }

  /// Shading point origin + depth * direction. Offsets are formed as
  /// (origin - p_i) + depth * direction so a joint translation of cloud and
  /// camera by an exactly representable vector leaves them bit-identical.
  std::vector<Neighbor> query_ray(const Eigen::Vector3d& origin, const Eigen::Vector3d& direction, double depth,
                                  int k) const {
    const Eigen::Vector3d q = origin + depth * direction;
    return query(q, k, [&](Eigen::Index i) -> Eigen::Vector3d {
      return (origin - positions_.row(i).transpose()) + depth * direction;
    });
  }

 private:
  [[nodiscard]] std::array<std::int64_t, 3> cell_of(const Eigen::Vector3d& p) const {
    std::array<std::int64_t, 3> c{};
    for (int a = 0; a < 3; ++a) {
      const double v = std::floor((p[a] - lo_[a]) / cell_);
      c[static_cast<std::size_t>(a)] = static_cast<std::int64_t>(std::clamp(v, -2.0, static_cast<double>(dims_[a] + 1)));
    }
    return c;
  }
  [[nodiscard]] std::size_t flat(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return static_cast<std::size_t>((x * dims_[1] + y) * dims_[2] + z);
  }

  MatrixXd positions_;
  double radius_;
  double cell_;
  Eigen::Vector3d lo_;
  std::array<std::int64_t, 3> dims_{};
  std::vector<std::vector<Eigen::Index>> cells_;
};

/// Median over all points of the distance to their nearest other point,
/// pooled across clouds.
inline double median_nearest_neighbor_spacing(const std::vector<MatrixXd>& clouds) {
  std::vector<double> d;
  for (const auto& pts : clouds) {
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < pts.rows(); ++j) {
        if (j != i) best = std::min(best, (pts.row(i) - pts.row(j)).norm());
      }
      if (std::isfinite(best)) d.push_back(best);
    }
  }
  if (d.empty()) throw DegenerateError("median_nearest_neighbor_spacing: need clouds with at least two points");
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  return d[d.size() / 2];
}

// ---------------------------------------------------------------------------
// Decoder

struct DecoderConfig {
  int feature_dim = 32;
  std::vector<std::size_t> aggregation_hidden{256, 256, 256, 256};
  std::size_t shading_feature_dim = 256;
  std::vector<std::size_t> color_hidden{256, 256, 256, 256};
  std::vector<std::size_t> density_hidden{256};
  double negative_slope = 0.01;
};

/// Aggregation MLP F (feature + offset -> shading feature), color MLP G and
/// density MLP H, shared across all objects.
template <typename Real>
struct Decoder {
  DecoderConfig config;
  MlpSpec aggregation;
  MlpSpec color;
  MlpSpec density;
  ParamStore<Real> params;

  static MlpSpec make_spec(const char* name, std::size_t in, std::vector<std::size_t> hidden, std::size_t out,
                           double slope) {
    MlpSpec s;
    s.name = name;
    s.input_width = in;
    s.hidden = std::move(hidden);
    s.output_width = out;
    s.negative_slope = slope;
    s.validate();
    return s;
  }

  static Decoder specs_only(const DecoderConfig& cfg) {
    if (cfg.feature_dim < 1) throw ConfigError("decoder feature_dim must be >= 1");
    Decoder d;
    d.config = cfg;
    d.aggregation = make_spec("aggregation", static_cast<std::size_t>(cfg.feature_dim) + 3, cfg.aggregation_hidden,
                              cfg.shading_feature_dim, cfg.negative_slope);
    d.color = make_spec("color", cfg.shading_feature_dim, cfg.color_hidden, 3, cfg.negative_slope);
    d.density = make_spec("density", cfg.shading_feature_dim, cfg.density_hidden, 1, cfg.negative_slope);
    return d;
  }

  static Decoder create(const DecoderConfig& cfg, std::uint64_t seed) {
    Decoder d = specs_only(cfg);
    Rng rng(seed, 0x646563);
    init_mlp(d.aggregation, d.params, rng);
    init_mlp(d.color, d.params, rng);
    init_mlp(d.density, d.params, rng);
    return d;
  }

  template <typename Other>
  [[nodiscard]] Decoder<Other> cast() const {
    Decoder<Other> d;
    d.config = config;
    d.aggregation = aggregation;
    d.color = color;
    d.density = density;
    d.params = params.template cast<Other>();
    return d;
  }
};

// ---------------------------------------------------------------------------
// Quadrature

struct QuadratureWeights {
  std::vector<double> weights;       // T_s * alpha_s
  std::vector<double> alphas;        // 1 - exp(-sigma_s * delta_s)
  double residual_transmittance = 1.0;
};

/// Front-to-back compositing weights for one ray.
inline QuadratureWeights quadrature_weights(const std::vector<double>& densities, const std::vector<double>& deltas) {
  if (densities.size() != deltas.size()) throw DimensionError("quadrature_weights: one delta per density required");
  QuadratureWeights q;
  q.weights.resize(densities.size());
  q.alphas.resize(densities.size());
  double transmittance = 1.0;
  for (std::size_t s = 0; s < densities.size(); ++s) {
    if (densities[s] < 0.0) throw Error("quadrature_weights: negative density");
    const double alpha = -std::expm1(-densities[s] * deltas[s]);
    q.alphas[s] = alpha;
    q.weights[s] = transmittance * alpha;
    transmittance *= 1.0 - alpha;
  }
  q.residual_transmittance = transmittance;
  return q;
}

struct RadianceSample {
  Eigen::Vector3d color;
  double density = 0.0;
  double delta = 0.0;
};

/// Composites samples (already in depth order) onto `background`.
inline Eigen::Vector3d integrate_ray(const std::vector<RadianceSample>& samples, const Eigen::Vector3d& background) {
  std::vector<double> sig;
  std::vector<double> del;
  for (const auto& s : samples) {
    sig.push_back(s.density);
    del.push_back(s.delta);
  }
  const auto q = quadrature_weights(sig, del);
  Eigen::Vector3d pixel = Eigen::Vector3d::Zero();
  for (std::size_t s = 0; s < samples.size(); ++s) pixel += q.weights[s] * samples[s].color;
  return pixel + q.residual_transmittance * background;
}

/// Differentiable compositing. `colors` is Q x 3, `densities` Q x 1, where the
/// active samples of ray r occupy rows [ray_offsets[r], ray_offsets[r+1]).
/// Returns R x 3 pixel colors.
template <typename Real>
Var<Real> composite(Var<Real> colors, Var<Real> densities, std::vector<Eigen::Index> ray_offsets,
                    std::vector<Real> deltas, Eigen::Vector3d background) {
  if (colors.cols() != 3 || densities.cols() != 1 || colors.rows() != densities.rows() ||
      static_cast<std::size_t>(colors.rows()) != deltas.size() || ray_offsets.empty() ||
      ray_offsets.back() != colors.rows()) {
    throw DimensionError("composite: inconsistent inputs");
  }
  Tape<Real>& tape = *colors.tape();
  const Eigen::Index rays = static_cast<Eigen::Index>(ray_offsets.size()) - 1;
  const auto& c = colors.value();
  const auto& sigma = densities.value();
  const Eigen::Matrix<Real, 1, 3> bg = background.cast<Real>().transpose();
  Matrix<Real> out(rays, 3);
  // Per-sample transmittance before the sample and alpha, kept for backward.
  std::vector<Real> trans(deltas.size());
  std::vector<Real> alpha(deltas.size());
  std::vector<Real> final_trans(static_cast<std::size_t>(rays));
  for (Eigen::Index r = 0; r < rays; ++r) {
    Real t = Real(1);
    Eigen::Matrix<Real, 1, 3> acc = Eigen::Matrix<Real, 1, 3>::Zero();
    for (Eigen::Index s = ray_offsets[r]; s < ray_offsets[r + 1]; ++s) {
      if (sigma(s, 0) < Real(0)) throw Error("composite: negative density");
      const Real a = -std::expm1(-sigma(s, 0) * deltas[s]);
      trans[s] = t;
      alpha[s] = a;
      acc += (t * a) * c.row(s);
      t *= Real(1) - a;
    }
    final_trans[r] = t;
    out.row(r) = acc + t * bg;
  }
  return tape.record(std::move(out), {colors, densities},
                     [colors, densities, off = std::move(ray_offsets), del = std::move(deltas), trans = std::move(trans),
                      alpha = std::move(alpha), final_trans = std::move(final_trans), bg](Tape<Real>& tp,
                                                                                          std::size_t self) {
                       const auto& g = tp.out_grad(self);
                       const auto& cv = colors.value();
                       const bool want_c = tp.wants(colors);
                       const bool want_s = tp.wants(densities);
                       Matrix<Real>* gc = want_c ? &tp.grad_buffer(colors) : nullptr;
                       Matrix<Real>* gs = want_s ? &tp.grad_buffer(densities) : nullptr;
                       for (std::size_t r = 0; r + 1 < off.size(); ++r) {
                         const auto gr = g.row(static_cast<Eigen::Index>(r));
                         // rest = sum_{u > s} w_u c_u + T_final * bg, dotted with the pixel gradient.
                         Real rest = final_trans[r] * bg.dot(gr);
                         for (Eigen::Index s = off[r + 1]; s-- > off[r];) {
                           const Real w = trans[s] * alpha[s];
                           const Real cg = cv.row(s).dot(gr);
                           if (gc != nullptr) gc->row(s) += w * gr;
                           if (gs != nullptr) {
                             const Real t_next = trans[s] * (Real(1) - alpha[s]);
                             (*gs)(s, 0) += del[s] * (t_next * cg - rest);
                           }
                           rest += w * cg;
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Batched shading

/// Geometry of a batch of rays: which cloud points feed which shading points,
/// with normalized inverse-distance weights. Independent of features and
/// decoder weights, so it can be built once and reused.
struct ShadingBatch {
  std::vector<Eigen::Index> pair_point;    // cloud index per (shading point, neighbour) pair
  MatrixXd pair_offset;                    // P x 3, q - p_i
  std::vector<double> pair_weight;         // w_i / sum w over the shading point
  std::vector<Eigen::Index> pair_offsets;  // Q + 1 bounds into pairs
  std::vector<double> sample_delta;        // Q depth gaps
  std::vector<Eigen::Index> ray_offsets;   // R + 1 bounds into active shading points

  [[nodiscard]] Eigen::Index ray_count() const { return static_cast<Eigen::Index>(ray_offsets.size()) - 1; }
  [[nodiscard]] Eigen::Index shading_count() const { return static_cast<Eigen::Index>(sample_delta.size()); }
};

/// Inverse-distance weights w_i = 1 / max(d_i, eps), normalized to sum to one.
inline std::vector<double> aggregation_weights(const std::vector<Neighbor>& neighbors, double distance_epsilon) {
  std::vector<double> w(neighbors.size());
  double total = 0.0;
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    w[i] = 1.0 / std::max(neighbors[i].distance, distance_epsilon);
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

inline ShadingBatch build_shading_batch(const NeighborIndex& index, const std::vector<Ray>& rays,
                                        const RenderConfig& config, Rng* rng) {
  config.validate();
  ShadingBatch b;
  b.ray_offsets.push_back(0);
  b.pair_offsets.push_back(0);
  std::vector<Eigen::Vector3d> offsets;
  for (const Ray& ray : rays) {
    const DepthSamples ds = sample_shading_depths(ray.near, ray.far, config.shading_points_per_ray,
                                                  config.deterministic ? nullptr : rng);
    for (std::size_t s = 0; s < ds.depths.size(); ++s) {
      const auto nb = index.query_ray(ray.origin, ray.direction, ds.depths[s], config.neighbors_k);
      if (nb.empty()) continue;
      const auto w = aggregation_weights(nb, config.distance_epsilon);
      for (std::size_t i = 0; i < nb.size(); ++i) {
        b.pair_point.push_back(nb[i].index);
        offsets.push_back(nb[i].offset);
        b.pair_weight.push_back(w[i]);
      }
      b.pair_offsets.push_back(static_cast<Eigen::Index>(b.pair_point.size()));
      b.sample_delta.push_back(ds.deltas[s]);
    }
    b.ray_offsets.push_back(static_cast<Eigen::Index>(b.sample_delta.size()));
  }
  b.pair_offset.resize(static_cast<Eigen::Index>(offsets.size()), 3);
  for (std::size_t i = 0; i < offsets.size(); ++i) b.pair_offset.row(static_cast<Eigen::Index>(i)) = offsets[i].transpose();
  return b;
}

/// Shading feature per active shading point (Q x shading_feature_dim).
template <typename Real>
Var<Real> aggregate_features(Decoder<Real>& decoder, Var<Real> features, const ShadingBatch& batch) {
  Tape<Real>& tape = *features.tape();
  if (features.cols() != decoder.config.feature_dim) {
    throw DimensionError("aggregate_features: cloud feature dimension " + std::to_string(features.cols()) +
                         " does not match decoder " + std::to_string(decoder.config.feature_dim));
  }
  Var<Real> gathered = gather_rows(features, batch.pair_point);
  Var<Real> input = concat_cols(gathered, tape.constant(batch.pair_offset.cast<Real>()));
  Var<Real> per_pair = mlp_forward(decoder.aggregation, decoder.params, input);
  std::vector<Real> w(batch.pair_weight.begin(), batch.pair_weight.end());
  return segment_weighted_sum(per_pair, batch.pair_offsets, std::move(w));
}

template <typename Real>
std::pair<Var<Real>, Var<Real>> decode(Decoder<Real>& decoder, Var<Real> shading_features) {
  Var<Real> color = sigmoid(mlp_forward(decoder.color, decoder.params, shading_features));
  Var<Real> density = softplus(mlp_forward(decoder.density, decoder.params, shading_features));
  return {color, density};
}

/// Pixel colors (R x 3) for every ray of the batch.
template <typename Real>
Var<Real> render_batch(Decoder<Real>& decoder, Var<Real> features, const ShadingBatch& batch,
                       const RenderConfig& config) {
  Tape<Real>& tape = *features.tape();
  if (batch.shading_count() == 0) {
    Matrix<Real> bg(batch.ray_count(), 3);
    bg.rowwise() = config.background.cast<Real>().transpose();
    return tape.constant(std::move(bg));
  }
  Var<Real> fq = aggregate_features(decoder, features, batch);
  auto [color, density] = decode(decoder, fq);
  std::vector<Real> deltas(batch.sample_delta.begin(), batch.sample_delta.end());
  return composite(color, density, batch.ray_offsets, std::move(deltas), config.background);
}

/// Shading feature for a single query point with a given neighbour set; the
/// neighbour set must be non-empty.
template <typename Real>
Matrix<Real> aggregate_feature(const NeuralPointCloud& pc, const std::vector<Neighbor>& neighbors,
                               Decoder<Real>& decoder, double distance_epsilon) {
  if (neighbors.empty()) throw ArgumentError("aggregate_feature: empty neighbour set");
  ShadingBatch b;
  b.pair_offsets = {0};
  const auto w = aggregation_weights(neighbors, distance_epsilon);
  b.pair_offset.resize(static_cast<Eigen::Index>(neighbors.size()), 3);
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    b.pair_point.push_back(neighbors[i].index);
    b.pair_offset.row(static_cast<Eigen::Index>(i)) = neighbors[i].offset.transpose();
    b.pair_weight.push_back(w[i]);
  }
  b.pair_offsets.push_back(static_cast<Eigen::Index>(neighbors.size()));
  Tape<Real> tape;
  tape.set_grad_enabled(false);
  return aggregate_features(decoder, tape.constant(pc.features.cast<Real>()), b).value();
}

struct DecodedRadiance {
  Eigen::Vector3d color;
  double density = 0.0;
};

/// Color and density for one shading feature; no feature means no
/// neighbours, which yields the background color with zero density.
template <typename Real>
DecodedRadiance decode_radiance(const std::optional<Matrix<Real>>& shading_feature, Decoder<Real>& decoder,
                                const RenderConfig& config) {
  if (!shading_feature) return {config.background, 0.0};
  Tape<Real> tape;
  tape.set_grad_enabled(false);
  auto [c, s] = decode(decoder, tape.constant(*shading_feature));
  return {c.value().row(0).transpose().template cast<double>(), static_cast<double>(s.value()(0, 0))};
}

/// Full image render in evaluation mode, processed in ray chunks.
template <typename Real>
Image render_image(const NeuralPointCloud& pc, Decoder<Real>& decoder, const Camera& camera,
                   const RenderConfig& config, Rng* rng = nullptr, Eigen::Index chunk = 1024) {
  pc.validate();
  camera.validate();
  const NeighborIndex index(pc.positions, config.neighbor_radius);
  const auto rays = generate_rays(camera);
  Image img(camera.width, camera.height);
  const Matrix<Real> feats = pc.features.cast<Real>();
  for (std::size_t start = 0; start < rays.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(rays.size(), start + static_cast<std::size_t>(chunk));
    const std::vector<Ray> sub(rays.begin() + static_cast<std::ptrdiff_t>(start),
                               rays.begin() + static_cast<std::ptrdiff_t>(end));
    const ShadingBatch batch = build_shading_batch(index, sub, config, rng);
    Tape<Real> tape;
    tape.set_grad_enabled(false);
    Var<Real> px = render_batch(decoder, tape.constant(feats), batch, config);
    img.rgb.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) =
        px.value().template cast<double>();
  }
  return img;
}

}  // namespace npcd
