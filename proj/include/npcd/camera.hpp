// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include "npcd/core/error.hpp"

namespace npcd {

/// Pinhole camera. `rotation` maps camera axes to world axes (columns are the
/// camera x-right, y-down, z-forward axes); `translation` is the camera centre.
struct Camera {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double focal = 1.0;
  Eigen::Vector2d principal_point = Eigen::Vector2d::Zero();
  int width = 1;
  int height = 1;
  double near = 0.1;
  double far = 10.0;

  void validate() const {
    if ((rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6) {
      throw ArgumentError("camera rotation is not orthonormal");
    }
    if (!(near > 0.0 && near < far)) throw ArgumentError("camera needs 0 < near < far");
    if (!(focal > 0.0)) throw ArgumentError("camera focal length must be positive");
    if (width < 1 || height < 1) throw ArgumentError("camera image size must be positive");
  }
};

struct Ray {
  Eigen::Vector3d origin;
  Eigen::Vector3d direction;  // unit length
  double near = 0.0;
  double far = 1.0;
};

/// Ray through the centre of pixel (x, y).
inline Ray camera_ray(const Camera& cam, int x, int y) {
  const Eigen::Vector3d local((x + 0.5 - cam.principal_point.x()) / cam.focal,
                              (y + 0.5 - cam.principal_point.y()) / cam.focal, 1.0);
  Ray r;
  r.origin = cam.translation;
  r.direction = (cam.rotation * local).normalized();
  r.near = cam.near;
  r.far = cam.far;
  return r;
}

/// One ray per pixel in row-major pixel order.
inline std::vector<Ray> generate_rays(const Camera& cam) {
  cam.validate();
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(cam.width) * cam.height);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) rays.push_back(camera_ray(cam, x, y));
  }
  return rays;
}

/// Camera at `eye` looking at `target`; `up` fixes the roll.
inline Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, Eigen::Vector3d up, double focal,
                      int width, int height, double near, double far) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  if (std::abs(forward.dot(up.normalized())) > 0.999) up = std::abs(forward.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitZ();
  const Eigen::Vector3d right = forward.cross(up).normalized();
  const Eigen::Vector3d down = forward.cross(right).normalized();
  Camera cam;
  cam.rotation.col(0) = right;
  cam.rotation.col(1) = down;
  cam.rotation.col(2) = forward;
  cam.translation = eye;
  cam.focal = focal;
  cam.principal_point = Eigen::Vector2d(width / 2.0, height / 2.0);
  cam.width = width;
  cam.height = height;
  cam.near = near;
  cam.far = far;
  return cam;
}

/// Projects a world point to continuous pixel coordinates; returns false if
/// the point is behind the camera.
inline bool project(const Camera& cam, const Eigen::Vector3d& p, Eigen::Vector2d& pixel) {
  const Eigen::Vector3d local = cam.rotation.transpose() * (p - cam.translation);
  if (local.z() <= 0.0) return false;
  pixel = Eigen::Vector2d(cam.focal * local.x() / local.z() + cam.principal_point.x(),
                          cam.focal * local.y() / local.z() + cam.principal_point.y());
  return true;
}

inline nlohmann::json camera_to_json(const Camera& c) {
  std::vector<double> rot;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) rot.push_back(c.rotation(i, j));
  }
  return {{"rotation", rot},
          {"translation", {c.translation.x(), c.translation.y(), c.translation.z()}},
          {"focal", c.focal},
          {"principal_point", {c.principal_point.x(), c.principal_point.y()}},
          {"width", c.width},
          {"height", c.height},
          {"near", c.near},
          {"far", c.far}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
  try {
    Camera c;
    const auto rot = j.at("rotation").get<std::vector<double>>();
    const auto tr = j.at("translation").get<std::vector<double>>();
    const auto pp = j.at("principal_point").get<std::vector<double>>();
    if (rot.size() != 9 || tr.size() != 3 || pp.size() != 2) throw FormatError("camera: wrong array lengths");
    for (int i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k) c.rotation(i, k) = rot[static_cast<std::size_t>(i * 3 + k)];
    }
    c.translation = Eigen::Vector3d(tr[0], tr[1], tr[2]);
    c.principal_point = Eigen::Vector2d(pp[0], pp[1]);
    c.focal = j.at("focal").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.near = j.at("near").get<double>();
    c.far = j.at("far").get<double>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("camera: ") + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("camera: ") + e.what());
  }
}

/// Camera set file: {"cameras": [ ... ]}.
inline nlohmann::json cameras_to_json(const std::vector<Camera>& cams) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cams) arr.push_back(camera_to_json(c));
  return {{"cameras", arr}};
}

inline std::vector<Camera> cameras_from_json(const nlohmann::json& j) {
  std::vector<Camera> cams;
  const auto& arr = j.contains("cameras") ? j.at("cameras") : j;
  if (!arr.is_array()) throw FormatError("camera set must be an array or {\"cameras\": [...]}");
  for (const auto& c : arr) cams.push_back(camera_from_json(c));
  return cams;
}

}  // namespace npcd
