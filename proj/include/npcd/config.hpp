// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON document with sections dataset, decoder,
// render, autodecoder, diffusion, sampler and eval. Every field has a
// default, unknown keys are rejected, and the content hash is independent of
// key order.
#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "npcd/autodecoder.hpp"
#include "npcd/diffusion.hpp"
#include "npcd/disentangled_sampler.hpp"
#include "npcd/toy_dataset.hpp"

namespace npcd {

struct EvalConfig {
  bool chamfer = true;
  bool emd = true;
  bool psnr = false;
};

struct RunConfig {
  DatasetConfig dataset;
  DecoderConfig decoder;
  AutodecoderConfig autodecoder;
  DenoiserConfig denoiser;
  DiffusionTrainConfig diffusion;
  SamplerConfig sampler;
  EvalConfig eval;
  /// Neighbour radius as a multiple of the dataset's median nearest-neighbour
  /// spacing; used when render.neighbor_radius is not given explicitly.
  double neighbor_radius_factor = 3.0;
  bool explicit_neighbor_radius = false;
  /// "float" for training runs, "double" for reference runs.
  std::string precision = "float";
  /// Seed for training and sampling; the dataset has its own.
  std::uint64_t seed = 0;
};

/// Desk-scale defaults for the toy dataset.
inline RunConfig default_run_config() {
  RunConfig c;
  c.decoder.feature_dim = 8;
  c.decoder.aggregation_hidden = {64, 64};
  c.decoder.shading_feature_dim = 64;
  c.decoder.color_hidden = {64};
  c.decoder.density_hidden = {64};
  c.autodecoder.lr = 3e-3;
  c.autodecoder.rays_per_view_per_step = 64;
  c.autodecoder.views_per_step = 2;
  c.autodecoder.render.shading_points_per_ray = 32;
  c.autodecoder.render.neighbors_k = 8;
  c.autodecoder.render.deterministic = false;
  c.denoiser.points = c.dataset.m_points;
  c.denoiser.feature_dim = c.decoder.feature_dim;
  return c;
}

namespace detail {

class SectionReader {
 public:
  SectionReader(const nlohmann::json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + section_ + "." + key + "' has the wrong type: " + e.what());
    }
  }

  [[nodiscard]] bool has(const char* key) const { return j_.contains(key); }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (seen_.count(k) == 0) throw ConfigError("unknown config key '" + (section_.empty() ? k : section_ + "." + k) + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

inline const nlohmann::json& section(const nlohmann::json& root, const char* name) {
  static const nlohmann::json empty = nlohmann::json::object();
  return root.contains(name) ? root.at(name) : empty;
}

}  // namespace detail

/// Parses a config document on top of the desk-scale defaults.
inline RunConfig run_config_from_json(const nlohmann::json& root) {
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c = default_run_config();
  detail::SectionReader top(root, "");
  nlohmann::json ignored;
  for (const char* s : {"dataset", "decoder", "render", "autodecoder", "diffusion", "sampler", "eval"}) top.read(s, ignored);
  top.read("precision", c.precision);
  top.read("seed", c.seed);
  top.finish();
  if (c.precision != "float" && c.precision != "double") throw ConfigError("precision must be 'float' or 'double'");

  {
    detail::SectionReader r(detail::section(root, "dataset"), "dataset");
    r.read("n_objects", c.dataset.n_objects);
    r.read("views_per_object", c.dataset.views_per_object);
    r.read("m_points", c.dataset.m_points);
    r.read("n_dense", c.dataset.n_dense);
    r.read("image_size", c.dataset.image_size);
    r.read("camera_radius", c.dataset.camera_radius);
    r.read("categories", c.dataset.categories);
    r.read("seed", c.dataset.seed);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "decoder"), "decoder");
    r.read("feature_dim", c.decoder.feature_dim);
    r.read("aggregation_hidden", c.decoder.aggregation_hidden);
    r.read("shading_feature_dim", c.decoder.shading_feature_dim);
    r.read("color_hidden", c.decoder.color_hidden);
    r.read("density_hidden", c.decoder.density_hidden);
    r.read("negative_slope", c.decoder.negative_slope);
    r.finish();
  }
  {
    RenderConfig& rc = c.autodecoder.render;
    detail::SectionReader r(detail::section(root, "render"), "render");
    r.read("shading_points_per_ray", rc.shading_points_per_ray);
    r.read("neighbors_k", rc.neighbors_k);
    c.explicit_neighbor_radius = r.has("neighbor_radius");
    r.read("neighbor_radius", rc.neighbor_radius);
    r.read("neighbor_radius_factor", c.neighbor_radius_factor);
    std::vector<double> bg{rc.background.x(), rc.background.y(), rc.background.z()};
    r.read("background", bg);
    if (bg.size() != 3) throw ConfigError("render.background needs 3 entries");
    rc.background = Eigen::Vector3d(bg[0], bg[1], bg[2]);
    r.read("distance_epsilon", rc.distance_epsilon);
    r.read("deterministic", rc.deterministic);
    r.finish();
  }
  {
    AutodecoderConfig& a = c.autodecoder;
    detail::SectionReader r(detail::section(root, "autodecoder"), "autodecoder");
    r.read("lr", a.lr);
    r.read("lambda_tv", a.lambda_tv);
    r.read("lambda_kl", a.lambda_kl);
    r.read("tv_neighborhood_k", a.tv_neighborhood_k);
    r.read("rays_per_view_per_step", a.rays_per_view_per_step);
    r.read("views_per_step", a.views_per_step);
    r.read("objects_per_step", a.objects_per_step);
    r.read("steps", a.steps);
    std::string init = a.init_mode == InitMode::kZero ? "zero" : "random";
    r.read("init_mode", init);
    if (init == "zero") {
      a.init_mode = InitMode::kZero;
    } else if (init == "random") {
      a.init_mode = InitMode::kRandom;
    } else {
      throw ConfigError("autodecoder.init_mode must be 'zero' or 'random'");
    }
    r.read("variational", a.variational);
    r.read("scalar_variance", a.scalar_variance);
    r.read("initial_log_variance", a.initial_log_variance);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "diffusion"), "diffusion");
    r.read("T", c.diffusion.T);
    r.read("beta_start", c.diffusion.beta_start);
    r.read("beta_end", c.diffusion.beta_end);
    r.read("steps", c.diffusion.steps);
    r.read("batch_size", c.diffusion.batch_size);
    r.read("lr", c.diffusion.lr);
    r.read("weight_decay", c.diffusion.weight_decay);
    r.read("ema_decay", c.diffusion.ema_decay);
    r.read("layers", c.denoiser.layers);
    r.read("model_dim", c.denoiser.model_dim);
    r.read("heads", c.denoiser.heads);
    r.read("time_embedding_dim", c.denoiser.time_embedding_dim);
    r.read("mlp_ratio", c.denoiser.mlp_ratio);
    r.read("sinusoidal_time", c.denoiser.sinusoidal_time);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "sampler"), "sampler");
    r.read("n_rev", c.sampler.n_rev);
    r.read("n_repaint", c.sampler.n_repaint);
    r.read("n_resample", c.sampler.n_resample);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "eval"), "eval");
    r.read("chamfer", c.eval.chamfer);
    r.read("emd", c.eval.emd);
    r.read("psnr", c.eval.psnr);
    r.finish();
  }
  c.denoiser.points = c.dataset.m_points;
  c.denoiser.feature_dim = c.decoder.feature_dim;
  c.dataset.validate();
  c.autodecoder.validate();
  c.denoiser.validate();
  c.diffusion.validate();
  c.sampler.validate(c.diffusion.T);
  if (c.decoder.feature_dim < 1) throw ConfigError("decoder.feature_dim must be >= 1");
  if (!(c.neighbor_radius_factor > 0.0)) throw ConfigError("render.neighbor_radius_factor must be positive");
  return c;
}

/// The fully resolved configuration, every field present.
inline nlohmann::json run_config_to_json(const RunConfig& c) {
  const auto& a = c.autodecoder;
  const auto& rc = a.render;
  nlohmann::json render = {{"shading_points_per_ray", rc.shading_points_per_ray},
                           {"neighbors_k", rc.neighbors_k},
                           {"neighbor_radius_factor", c.neighbor_radius_factor},
                           {"background", {rc.background.x(), rc.background.y(), rc.background.z()}},
                           {"distance_epsilon", rc.distance_epsilon},
                           {"deterministic", rc.deterministic}};
  if (c.explicit_neighbor_radius) render["neighbor_radius"] = rc.neighbor_radius;
  return {
      {"precision", c.precision},
      {"seed", c.seed},
      {"dataset", dataset_config_to_json(c.dataset)},
      {"decoder",
       {{"feature_dim", c.decoder.feature_dim},
        {"aggregation_hidden", c.decoder.aggregation_hidden},
        {"shading_feature_dim", c.decoder.shading_feature_dim},
        {"color_hidden", c.decoder.color_hidden},
        {"density_hidden", c.decoder.density_hidden},
        {"negative_slope", c.decoder.negative_slope}}},
      {"render", render},
      {"autodecoder",
       {{"lr", a.lr},
        {"lambda_tv", a.lambda_tv},
        {"lambda_kl", a.lambda_kl},
        {"tv_neighborhood_k", a.tv_neighborhood_k},
        {"rays_per_view_per_step", a.rays_per_view_per_step},
        {"views_per_step", a.views_per_step},
        {"objects_per_step", a.objects_per_step},
        {"steps", a.steps},
        {"init_mode", a.init_mode == InitMode::kZero ? "zero" : "random"},
        {"variational", a.variational},
        {"scalar_variance", a.scalar_variance},
        {"initial_log_variance", a.initial_log_variance}}},
      {"diffusion",
       {{"T", c.diffusion.T},
        {"beta_start", c.diffusion.beta_start},
        {"beta_end", c.diffusion.beta_end},
        {"steps", c.diffusion.steps},
        {"batch_size", c.diffusion.batch_size},
        {"lr", c.diffusion.lr},
        {"weight_decay", c.diffusion.weight_decay},
        {"ema_decay", c.diffusion.ema_decay},
        {"layers", c.denoiser.layers},
        {"model_dim", c.denoiser.model_dim},
        {"heads", c.denoiser.heads},
        {"time_embedding_dim", c.denoiser.time_embedding_dim},
        {"mlp_ratio", c.denoiser.mlp_ratio},
        {"sinusoidal_time", c.denoiser.sinusoidal_time}}},
      {"sampler", {{"n_rev", c.sampler.n_rev}, {"n_repaint", c.sampler.n_repaint}, {"n_resample", c.sampler.n_resample}}},
      {"eval", {{"chamfer", c.eval.chamfer}, {"emd", c.eval.emd}, {"psnr", c.eval.psnr}}},
  };
}

/// FNV-1a 64 over the canonical dump (nlohmann::json objects keep keys
/// sorted, so the dump is independent of input key order).
inline std::string config_hash(const nlohmann::json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_hash(const RunConfig& c) { return config_hash(run_config_to_json(c)); }

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid JSON in " + path + ": " + e.what());
  }
}

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace npcd
