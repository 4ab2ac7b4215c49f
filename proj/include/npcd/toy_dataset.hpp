// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// Procedural stand-in for a shape category: colored boxes and ellipsoids
// arranged as chair-like or car-like objects, an analytic flat-albedo
// renderer for ground-truth views, surface point extraction, and camera
// pose sampling.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "npcd/autodecoder.hpp"
#include "npcd/camera.hpp"
#include "npcd/image.hpp"
#include "npcd/point_cloud.hpp"

namespace npcd {

enum class PrimitiveKind { kBox, kEllipsoid };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kBox;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half = Eigen::Vector3d::Constant(0.1);  // half-extents or radii
  Eigen::Vector3d color = Eigen::Vector3d::Constant(0.5);
};

struct ToyObject {
  std::string id;
  std::string category;
  std::vector<Primitive> primitives;

  void validate() const {
    if (primitives.empty()) throw ArgumentError("toy object " + id + " has no primitives");
    for (const auto& p : primitives) {
      if ((p.half.array() <= 0.0).any()) throw ArgumentError("toy object " + id + ": non-positive extent");
      if ((p.color.array() < 0.0).any() || (p.color.array() > 1.0).any()) {
        throw ArgumentError("toy object " + id + ": color outside [0, 1]");
      }
    }
  }

  /// Radius of the origin-centred sphere enclosing every primitive.
  [[nodiscard]] double bounding_radius() const {
    double r = 0.0;
    for (const auto& p : primitives) r = std::max(r, p.center.norm() + p.half.norm());
    return r;
  }
};

// ---------------------------------------------------------------------------
// Geometry

/// Entry distance of a ray into a primitive (nullopt on a miss or when the
/// primitive lies behind the origin). Rays starting inside report t = 0.
inline std::optional<double> intersect(const Primitive& p, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir) {
  if (p.kind == PrimitiveKind::kBox) {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      const double lo = p.center[a] - p.half[a];
      const double hi = p.center[a] + p.half[a];
      if (dir[a] == 0.0) {
        if (origin[a] < lo || origin[a] > hi) return std::nullopt;
        continue;
      }
      double ta = (lo - origin[a]) / dir[a];
      double tb = (hi - origin[a]) / dir[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    if (t0 > t1 || t1 < 0.0) return std::nullopt;
    return std::max(t0, 0.0);
  }
  const Eigen::Vector3d o = (origin - p.center).cwiseQuotient(p.half);
  const Eigen::Vector3d d = dir.cwiseQuotient(p.half);
  const double a = d.squaredNorm();
  const double b = o.dot(d);
  const double c = o.squaredNorm() - 1.0;
  const double disc = b * b - a * c;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  const double t0 = (-b - sq) / a;
  const double t1 = (-b + sq) / a;
  if (t1 < 0.0) return std::nullopt;
  return std::max(t0, 0.0);
}

/// Signed distance for boxes; for ellipsoids the implicit value
/// |(x - c) / r| - 1, which shares its sign and zero set.
inline double signed_distance(const Primitive& p, const Eigen::Vector3d& x) {
  if (p.kind == PrimitiveKind::kBox) {
    const Eigen::Vector3d q = (x - p.center).cwiseAbs() - p.half;
    return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
  }
  return (x - p.center).cwiseQuotient(p.half).norm() - 1.0;
}

inline double surface_area(const Primitive& p) {
  const Eigen::Vector3d e = p.half;
  if (p.kind == PrimitiveKind::kBox) return 8.0 * (e.x() * e.y() + e.y() * e.z() + e.x() * e.z());
  // Knud Thomsen's approximation, relative error below 1.1%.
  constexpr double kP = 1.6075;
  const double ab = std::pow(e.x() * e.y(), kP);
  const double bc = std::pow(e.y() * e.z(), kP);
  const double ac = std::pow(e.x() * e.z(), kP);
  return 4.0 * M_PI * std::pow((ab + bc + ac) / 3.0, 1.0 / kP);
}

/// Uniformly distributed point on the surface of one primitive.
inline Eigen::Vector3d sample_surface(const Primitive& p, Rng& rng) {
  const Eigen::Vector3d e = p.half;
  if (p.kind == PrimitiveKind::kBox) {
    // Face pairs by area: normal x (yz), normal y (xz), normal z (xy).
    const double areas[3] = {e.y() * e.z(), e.x() * e.z(), e.x() * e.y()};
    const double u = rng.uniform() * (areas[0] + areas[1] + areas[2]);
    const int axis = u < areas[0] ? 0 : (u < areas[0] + areas[1] ? 1 : 2);
    Eigen::Vector3d local;
    for (int a = 0; a < 3; ++a) local[a] = (2.0 * rng.uniform() - 1.0) * e[a];
    local[axis] = rng.uniform() < 0.5 ? -e[axis] : e[axis];
    return p.center + local;
  }
  // Sphere directions reweighted by the local area stretch of the map to the ellipsoid.
  const double max_stretch = 1.0 / e.minCoeff();
  for (;;) {
    Eigen::Vector3d u(rng.normal(), rng.normal(), rng.normal());
    const double n = u.norm();
    if (n == 0.0) continue;
    u /= n;
    const double stretch = u.cwiseQuotient(e).norm();
    if (rng.uniform() * max_stretch <= stretch) return p.center + u.cwiseProduct(e);
  }
}

// ---------------------------------------------------------------------------
// Object generation

/// Deterministic object of the given category ("chair" or "car").
inline ToyObject generate_toy_object(std::uint64_t seed, const std::string& category) {
  Rng rng(seed, 0x746f79);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };
  // Colors sit on the 8-bit grid so PPM round trips are exact.
  auto channel = [&]() { return std::round(uni(0.05, 0.95) * 255.0) / 255.0; };
  auto color = [&]() { return Eigen::Vector3d(channel(), channel(), channel()); };
  ToyObject obj;
  obj.category = category;
  obj.id = category + "-" + std::to_string(seed);
  auto box = [](Eigen::Vector3d c, Eigen::Vector3d h, Eigen::Vector3d col) {
    return Primitive{PrimitiveKind::kBox, c, h, col};
  };
  if (category == "chair") {
    const double w = uni(0.25, 0.4);       // seat half-width (x)
    const double d = uni(0.22, 0.38);      // seat half-depth (z)
    const double t = uni(0.03, 0.06);      // seat half-thickness
    const double seat_y = uni(-0.1, 0.05);
    const double leg = uni(0.025, 0.05);
    const double back_h = uni(0.15, 0.5 - seat_y - 2.0 * t) / 2.0;
    const Eigen::Vector3d seat_c = color();
    const Eigen::Vector3d leg_c = color();
    const Eigen::Vector3d back_c = color();
    obj.primitives.push_back(box({0.0, seat_y, 0.0}, {w, t, d}, seat_c));
    const double leg_half = (seat_y - t + 0.5) / 2.0;
    const double leg_y = -0.5 + leg_half;
    for (int sx : {-1, 1}) {
      for (int sz : {-1, 1}) {
        obj.primitives.push_back(box({sx * (w - leg), leg_y, sz * (d - leg)}, {leg, leg_half, leg}, leg_c));
      }
    }
    const double back_t = uni(0.025, 0.05);
    obj.primitives.push_back(box({0.0, seat_y + t + back_h, -d + back_t}, {w, back_h, back_t}, back_c));
  } else if (category == "car") {
    const double l = uni(0.38, 0.48);   // half-length (x)
    const double w = uni(0.2, 0.3);     // half-width (z)
    const double h = uni(0.08, 0.13);   // body half-height
    const double wheel = uni(0.08, 0.11);
    const double body_y = -0.5 + wheel * 1.2 + h;
    const Eigen::Vector3d body_c = color();
    obj.primitives.push_back(box({0.0, body_y, 0.0}, {l, h, w}, body_c));
    const double cabin_l = l * uni(0.4, 0.6);
    const double cabin_h = uni(0.06, 0.12);
    obj.primitives.push_back(
        box({uni(-0.1, 0.05), body_y + h + cabin_h, 0.0}, {cabin_l, cabin_h, w * uni(0.8, 0.95)}, color()));
    const Eigen::Vector3d wheel_c(26.0 / 255.0, 26.0 / 255.0, 31.0 / 255.0);
    for (int sx : {-1, 1}) {
      for (int sz : {-1, 1}) {
        obj.primitives.push_back(Primitive{PrimitiveKind::kEllipsoid,
                                           {sx * (l - wheel * 1.3), -0.5 + wheel, sz * (w + 0.01)},
                                           {wheel, wheel, 0.04},
                                           wheel_c});
      }
    }
  } else {
    throw ConfigError("unknown toy category: " + category + " (expected chair or car)");
  }
  obj.validate();
  return obj;
}

// ---------------------------------------------------------------------------
// Rendering

/// Color of the first primitive hit, or nullopt on a miss.
inline std::optional<Eigen::Vector3d> trace(const ToyObject& obj, const Ray& ray) {
  double best = std::numeric_limits<double>::infinity();
  const Primitive* hit = nullptr;
  for (const auto& p : obj.primitives) {
    const auto t = intersect(p, ray.origin, ray.direction);
    if (t && *t < best) {
      best = *t;
      hit = &p;
    }
  }
  if (hit == nullptr) return std::nullopt;
  return hit->color;
}

/// Flat-albedo render on a white background.
inline Image reference_render(const ToyObject& obj, const Camera& camera) {
  const auto rays = generate_rays(camera);
  Image img(camera.width, camera.height);
  for (std::size_t i = 0; i < rays.size(); ++i) {
    const auto c = trace(obj, rays[i]);
    img.rgb.row(static_cast<Eigen::Index>(i)) = c ? Eigen::RowVector3d(c->transpose()) : Eigen::RowVector3d::Ones();
  }
  return img;
}

// ---------------------------------------------------------------------------
// Point extraction

/// `n_dense` area-weighted surface samples, dropping points buried inside
/// another primitive.
inline MatrixXd sample_dense_surface(const ToyObject& obj, Eigen::Index n_dense, std::uint64_t seed) {
  obj.validate();
  if (n_dense < 1) throw ArgumentError("extract_points: n_dense must be >= 1");
  Rng rng(seed, 0x707473);
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& p : obj.primitives) {
    total += surface_area(p);
    cumulative.push_back(total);
  }
  MatrixXd pts(n_dense, 3);
  Eigen::Index n = 0;
  std::size_t attempts = 0;
  while (n < n_dense) {
    if (++attempts > static_cast<std::size_t>(n_dense) * 1000) {
      throw DegenerateError("extract_points: object " + obj.id + " has almost no exposed surface");
    }
    const double u = rng.uniform() * total;
    const auto k = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    const std::size_t idx = std::min(k, obj.primitives.size() - 1);
    const Eigen::Vector3d x = sample_surface(obj.primitives[idx], rng);
    bool buried = false;
    for (std::size_t o = 0; o < obj.primitives.size() && !buried; ++o) {
      buried = o != idx && signed_distance(obj.primitives[o], x) < -1e-9;
    }
    if (buried) continue;
    pts.row(n++) = x.transpose();
  }
  return pts;
}

/// Dense surface sampling followed by farthest point sampling down to `m`.
inline MatrixXd extract_points(const ToyObject& obj, Eigen::Index n_dense, Eigen::Index m, std::uint64_t seed) {
  if (m < 1 || m > n_dense) throw ArgumentError("extract_points: need 1 <= m <= n_dense");
  const MatrixXd dense = sample_dense_surface(obj, n_dense, seed);
  const auto idx = farthest_point_sample(dense, m, 0);
  MatrixXd out(m, 3);
  for (Eigen::Index i = 0; i < m; ++i) out.row(i) = dense.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

// ---------------------------------------------------------------------------
// Cameras

enum class PoseMode { kTrain, kTest };

struct PoseConfig {
  int width = 32;
  int height = 32;
  /// Focal length in pixels; 0 frames the bounding sphere.
  double focal = 0.0;
  /// Radius of the sphere assumed to enclose the object.
  double bound = 0.8660254037844386;
};

/// Near/far planes at radius -/+ margin, the margin being the bound rounded
/// up to the next multiple of 0.2.
inline std::pair<double, double> near_far(double radius, double bound) {
  const double margin = std::ceil(bound / 0.2 - 1e-9) * 0.2;
  return {radius - margin, radius + margin};
}

inline std::vector<Camera> sample_camera_poses(int n, double radius, std::uint64_t seed, PoseMode mode,
                                               const PoseConfig& pc = {}) {
  if (n < 1) throw ArgumentError("sample_camera_poses: n must be >= 1");
  if (!(radius > pc.bound)) throw ArgumentError("sample_camera_poses: radius must exceed the object bound");
  const auto [near, far] = near_far(radius, pc.bound);
  if (!(near > 0.0)) throw ArgumentError("sample_camera_poses: radius too small for the near-plane rule");
  const double focal =
      pc.focal > 0.0 ? pc.focal : 0.5 * std::min(pc.width, pc.height) * std::sqrt(radius * radius - pc.bound * pc.bound) / pc.bound;
  Rng rng(seed, 0x706f7365);
  std::vector<Camera> cams;
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d dir;
    if (mode == PoseMode::kTrain) {
      do {
        dir = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
      } while (dir.norm() < 1e-12);
      dir.normalize();
    } else {
      const double h = 0.1 + 0.8 * (i + 0.5) / n;
      const double az = 4.0 * M_PI * i / n;
      const double rxz = std::sqrt(1.0 - h * h);
      dir = Eigen::Vector3d(rxz * std::cos(az), h, rxz * std::sin(az));
    }
    cams.push_back(look_at(radius * dir, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitY(), focal, pc.width,
                           pc.height, near, far));
  }
  return cams;
}

// ---------------------------------------------------------------------------
// Dataset

struct DatasetConfig {
  int n_objects = 8;
  int views_per_object = 16;
  int m_points = 64;
  int n_dense = 4096;
  int image_size = 32;
  double camera_radius = 2.0;
  std::vector<std::string> categories{"chair"};
  std::uint64_t seed = 0;

  void validate() const {
    if (n_objects < 1 || views_per_object < 1 || m_points < 1 || image_size < 1) {
      throw ConfigError("dataset counts must be positive");
    }
    if (n_dense < m_points) throw ConfigError("dataset n_dense must be >= m_points");
    if (categories.empty()) throw ConfigError("dataset needs at least one category");
  }
};

struct ToyDataset {
  std::vector<ToyObject> objects;
  std::vector<ObjectRecord> records;
};

/// Pure function of the config: objects, training views and point clouds.
inline ToyDataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  ToyDataset ds;
  PoseConfig pc;
  pc.width = cfg.image_size;
  pc.height = cfg.image_size;
  for (int j = 0; j < cfg.n_objects; ++j) {
    const std::uint64_t obj_seed = cfg.seed * 10007u + static_cast<std::uint64_t>(j);
    const std::string& cat = cfg.categories[static_cast<std::size_t>(j) % cfg.categories.size()];
    ToyObject obj = generate_toy_object(obj_seed, cat);
    obj.id = cat + "-" + std::to_string(j);
    ObjectRecord rec;
    rec.id = obj.id;
    // Rounded to f32 so the in-memory dataset equals its on-disk copy.
    rec.positions = extract_points(obj, cfg.n_dense, cfg.m_points, obj_seed).cast<float>().cast<double>();
    for (const Camera& cam : sample_camera_poses(cfg.views_per_object, cfg.camera_radius, obj_seed, PoseMode::kTrain, pc)) {
      rec.views.push_back({reference_render(obj, cam), cam});
    }
    ds.objects.push_back(std::move(obj));
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

inline nlohmann::json dataset_config_to_json(const DatasetConfig& c) {
  return {{"n_objects", c.n_objects},   {"views_per_object", c.views_per_object}, {"m_points", c.m_points},
          {"n_dense", c.n_dense},       {"image_size", c.image_size},             {"camera_radius", c.camera_radius},
          {"categories", c.categories}, {"seed", c.seed}};
}

/// Writes objects/<id>/{points.npcd, cameras.json, views/<k>.ppm} and manifest.json.
/// Stored clouds carry zero features of dimension `feature_dim`.
inline void write_dataset(const ToyDataset& ds, const DatasetConfig& cfg, const std::string& dir, int feature_dim,
                          const std::string& config_hash = "") {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "objects", ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  nlohmann::json ids = nlohmann::json::array();
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& rec : ds.records) {
    const fs::path od = fs::path(dir) / "objects" / rec.id;
    fs::create_directories(od / "views", ec);
    if (ec) throw IoError("cannot create " + od.string() + ": " + ec.message());
    save_cloud(new_zero_init(rec.positions, feature_dim), (od / "points.npcd").string());
    std::vector<Camera> cams;
    for (std::size_t k = 0; k < rec.views.size(); ++k) {
      write_ppm(rec.views[k].image, (od / "views" / (std::to_string(k) + ".ppm")).string());
      cams.push_back(rec.views[k].camera);
    }
    std::ofstream cf(od / "cameras.json");
    if (!cf) throw IoError("cannot write " + (od / "cameras.json").string());
    cf << cameras_to_json(cams).dump(2) << '\n';
    ids.push_back(rec.id);
    splits[rec.id] = "train";
  }
  nlohmann::json manifest = {{"objects", ids}, {"splits", splits}, {"config", dataset_config_to_json(cfg)},
                             {"seed", cfg.seed}, {"feature_dim", feature_dim}};
  if (!config_hash.empty()) manifest["config_hash"] = config_hash;
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw IoError("cannot write " + (fs::path(dir) / "manifest.json").string());
  mf << manifest.dump(2) << '\n';
  if (!mf) throw IoError("write failed: manifest.json");
}

inline ToyDataset build_dataset(const DatasetConfig& cfg, const std::string& dir, int feature_dim,
                                const std::string& config_hash = "") {
  ToyDataset ds = generate_dataset(cfg);
  write_dataset(ds, cfg, dir, feature_dim, config_hash);
  return ds;
}

/// Reads the records written by write_dataset. Views are 8-bit quantized.
inline std::vector<ObjectRecord> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw IoError("dataset manifest not found: " + mpath.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad manifest " + mpath.string() + ": " + e.what());
  }
  std::vector<ObjectRecord> records;
  for (const auto& id_json : manifest.at("objects")) {
    const std::string id = id_json.get<std::string>();
    const fs::path od = fs::path(dir) / "objects" / id;
    ObjectRecord rec;
    rec.id = id;
    rec.positions = load_cloud((od / "points.npcd").string()).positions;
    std::ifstream cf(od / "cameras.json");
    if (!cf) throw IoError("missing " + (od / "cameras.json").string());
    nlohmann::json cj;
    try {
      cf >> cj;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("bad cameras.json for " + id + ": " + e.what());
    }
    const auto cams = cameras_from_json(cj);
    for (std::size_t k = 0; k < cams.size(); ++k) {
      rec.views.push_back({read_ppm((od / "views" / (std::to_string(k) + ".ppm")).string()), cams[k]});
    }
    rec.validate();
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw FormatError("dataset " + dir + " lists no objects");
  return records;
}

}  // namespace npcd
