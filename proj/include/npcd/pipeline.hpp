// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// On-disk pipeline stages behind the command-line tool: dataset generation,
// autodecoder and diffusion training with resumable checkpoints, sampling,
// rendering and evaluation. Every output directory gets a meta.json carrying
// the config hash and is guarded by a lockfile while a stage writes to it.
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "npcd/config.hpp"
#include "npcd/metrics.hpp"

namespace npcd {

namespace fs = std::filesystem;

/// Exclusive ownership of an output directory for the lifetime of a stage.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::string& dir) : path_((fs::path(dir) / ".lock").string()) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) throw IoError("output directory is locked (remove " + path_ + " if no other run owns it)");
    std::fclose(f);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  std::string path_;
};

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

inline void require_dir(const std::string& dir, const char* what) {
  if (!fs::is_directory(dir)) throw IoError(std::string(what) + " not found: " + dir);
}

inline void write_meta(const std::string& dir, const std::string& command, const RunConfig& cfg,
                       nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json meta = {{"command", command}, {"config_hash", config_hash(cfg)}, {"config", run_config_to_json(cfg)}};
  for (auto& [k, v] : extra.items()) meta[k] = v;
  write_json_file(meta, (fs::path(dir) / "meta.json").string());
}

/// Sorted list of *.npcd files directly inside `dir`.
inline std::vector<fs::path> list_clouds(const std::string& dir) {
  require_dir(dir, "cloud directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".npcd") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<fs::path> list_images(const std::string& dir) {
  require_dir(dir, "image directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Decoder and denoiser bundles

inline nlohmann::json decoder_config_to_json(const DecoderConfig& d) {
  return {{"feature_dim", d.feature_dim},
          {"aggregation_hidden", d.aggregation_hidden},
          {"shading_feature_dim", d.shading_feature_dim},
          {"color_hidden", d.color_hidden},
          {"density_hidden", d.density_hidden},
          {"negative_slope", d.negative_slope}};
}

inline DecoderConfig decoder_config_from_json(const nlohmann::json& j) {
  try {
    DecoderConfig d;
    d.feature_dim = j.at("feature_dim").get<int>();
    d.aggregation_hidden = j.at("aggregation_hidden").get<std::vector<std::size_t>>();
    d.shading_feature_dim = j.at("shading_feature_dim").get<std::size_t>();
    d.color_hidden = j.at("color_hidden").get<std::vector<std::size_t>>();
    d.density_hidden = j.at("density_hidden").get<std::vector<std::size_t>>();
    d.negative_slope = j.at("negative_slope").get<double>();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("decoder config: ") + e.what());
  }
}

inline nlohmann::json render_config_to_json(const RenderConfig& r) {
  return {{"shading_points_per_ray", r.shading_points_per_ray},
          {"neighbors_k", r.neighbors_k},
          {"neighbor_radius", r.neighbor_radius},
          {"background", {r.background.x(), r.background.y(), r.background.z()}},
          {"distance_epsilon", r.distance_epsilon},
          {"deterministic", r.deterministic}};
}

inline RenderConfig render_config_from_json(const nlohmann::json& j) {
  try {
    RenderConfig r;
    r.shading_points_per_ray = j.at("shading_points_per_ray").get<int>();
    r.neighbors_k = j.at("neighbors_k").get<int>();
    r.neighbor_radius = j.at("neighbor_radius").get<double>();
    const auto bg = j.at("background").get<std::vector<double>>();
    if (bg.size() != 3) throw FormatError("render config: background needs 3 entries");
    r.background = Eigen::Vector3d(bg[0], bg[1], bg[2]);
    r.distance_epsilon = j.at("distance_epsilon").get<double>();
    r.deterministic = j.at("deterministic").get<bool>();
    r.validate();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("render config: ") + e.what());
  }
}

/// A trained decoder plus the render settings it was fitted with.
struct DecoderBundle {
  Decoder<double> decoder;
  RenderConfig render;
};

inline void save_decoder_bundle(const Decoder<double>& d, const RenderConfig& r, const std::string& dir) {
  save_params(d.params.template cast<float>(), (fs::path(dir) / "decoder.params").string());
  write_json_file({{"decoder", decoder_config_to_json(d.config)}, {"render", render_config_to_json(r)}},
                  (fs::path(dir) / "decoder.json").string());
}

inline DecoderBundle load_decoder_bundle(const std::string& dir) {
  require_dir(dir, "decoder directory");
  const auto j = read_json_file((fs::path(dir) / "decoder.json").string());
  DecoderBundle b;
  b.decoder = Decoder<double>::specs_only(decoder_config_from_json(j.at("decoder")));
  b.decoder.params = load_params<double>((fs::path(dir) / "decoder.params").string());
  b.render = render_config_from_json(j.at("render"));
  return b;
}

inline nlohmann::json denoiser_config_to_json(const DenoiserConfig& d) {
  return {{"layers", d.layers},
          {"model_dim", d.model_dim},
          {"heads", d.heads},
          {"points", d.points},
          {"feature_dim", d.feature_dim},
          {"time_embedding_dim", d.time_embedding_dim},
          {"mlp_ratio", d.mlp_ratio},
          {"sinusoidal_time", d.sinusoidal_time}};
}

inline DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  try {
    DenoiserConfig d;
    d.layers = j.at("layers").get<int>();
    d.model_dim = j.at("model_dim").get<int>();
    d.heads = j.at("heads").get<int>();
    d.points = j.at("points").get<int>();
    d.feature_dim = j.at("feature_dim").get<int>();
    d.time_embedding_dim = j.at("time_embedding_dim").get<int>();
    d.mlp_ratio = j.at("mlp_ratio").get<int>();
    d.sinusoidal_time = j.at("sinusoidal_time").get<bool>();
    d.validate();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("denoiser config: ") + e.what());
  }
}

/// A trained denoiser with everything sampling needs.
struct DenoiserBundle {
  Denoiser<double> model;
  NoiseSchedule schedule;
  NormalizationStats stats;
  ClipBounds clip;
};

inline DenoiserBundle load_denoiser_bundle(const std::string& dir, bool use_ema = true) {
  require_dir(dir, "diffusion checkpoint directory");
  const auto j = read_json_file((fs::path(dir) / "denoiser.json").string());
  DenoiserBundle b;
  try {
    b.model.config = denoiser_config_from_json(j.at("denoiser"));
    b.model.T = j.at("T").get<int>();
    b.schedule = linear_schedule(b.model.T, j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("denoiser.json: ") + e.what());
  }
  b.model.params = load_params<double>((fs::path(dir) / (use_ema ? "ema.params" : "model.params")).string());
  const auto reference = Denoiser<double>::create(b.model.config, b.model.T, 0);
  if (!b.model.params.same_structure(reference.params)) throw FormatError("denoiser parameters do not match denoiser.json");
  b.stats = stats_from_json(read_json_file((fs::path(dir) / "stats.json").string()));
  b.clip = clip_bounds_from_json(read_json_file((fs::path(dir) / "clip.json").string()));
  return b;
}

// ---------------------------------------------------------------------------
// gen-data

inline nlohmann::json run_gen_data(const RunConfig& cfg, const std::string& out) {
  DirectoryLock lock(out);
  const ToyDataset ds = build_dataset(cfg.dataset, out, cfg.decoder.feature_dim, config_hash(cfg));
  write_meta(out, "gen-data", cfg);
  std::size_t views = 0;
  for (const auto& r : ds.records) views += r.views.size();
  return {{"objects", ds.records.size()},
          {"views", views},
          {"points_per_object", cfg.dataset.m_points},
          {"image_size", cfg.dataset.image_size},
          {"config_hash", config_hash(cfg)}};
}

// ---------------------------------------------------------------------------
// train-autodecoder

struct TrainOptions {
  /// Checkpoint cadence in steps.
  std::uint64_t checkpoint_every = 500;
  /// Stop once this many total steps are done (leaves a resumable checkpoint).
  std::optional<std::uint64_t> stop_after;
};

inline std::vector<LossRecord> read_loss_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  std::getline(in, line);
  std::vector<LossRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    LossRecord r;
    char c = 0;
    if (!(ss >> r.step >> c >> r.recon >> c >> r.tv >> c >> r.kl >> c >> r.total)) {
      throw FormatError("bad loss CSV line in " + path + ": " + line);
    }
    out.push_back(r);
  }
  return out;
}

/// Neighbour radius for a dataset: the configured value, or the configured
/// multiple of the median nearest-neighbour spacing.
inline double resolve_neighbor_radius(const RunConfig& cfg, const std::vector<ObjectRecord>& records) {
  if (cfg.explicit_neighbor_radius) return cfg.autodecoder.render.neighbor_radius;
  std::vector<MatrixXd> pos;
  for (const auto& r : records) pos.push_back(r.positions);
  return cfg.neighbor_radius_factor * median_nearest_neighbor_spacing(pos);
}

namespace detail {

template <typename Real>
void save_autodecoder_checkpoint(const AutodecoderState<Real>& st, const std::vector<ObjectRecord>& records,
                                 const std::string& hash, const fs::path& dir) {
  ensure_dir(dir / "objects");
  save_params(st.decoder.params, (dir / "decoder.params").string(), true);
  for (std::size_t j = 0; j < records.size(); ++j) {
    save_params(st.objects[j], (dir / "objects" / (records[j].id + ".params")).string(), true);
  }
  write_loss_csv(st.history, (dir / "loss.csv").string());
  write_json_file({{"step", st.step}, {"config_hash", hash}}, (dir / "state.json").string());
}

template <typename Real>
nlohmann::json train_autodecoder_impl(const RunConfig& cfg_in, const std::string& data_dir, const std::string& out,
                                      const TrainOptions& opt) {
  require_dir(data_dir, "dataset");
  const auto records = load_dataset(data_dir);
  RunConfig cfg = cfg_in;
  AutodecoderConfig acfg = cfg.autodecoder;
  acfg.render.neighbor_radius = resolve_neighbor_radius(cfg, records);
  const std::string hash = config_hash(cfg);
  DirectoryLock lock(out);
  const fs::path ckpt = fs::path(out) / "checkpoint";

  AutodecoderState<Real> st;
  if (fs::exists(ckpt / "state.json")) {
    const auto state = read_json_file((ckpt / "state.json").string());
    if (state.at("config_hash").get<std::string>() != hash) {
      throw ConfigError("checkpoint in " + out + " was written with a different config");
    }
    st.decoder = Decoder<Real>::specs_only(cfg.decoder);
    st.decoder.params = load_params<Real>((ckpt / "decoder.params").string());
    for (const auto& r : records) st.objects.push_back(load_params<Real>((ckpt / "objects" / (r.id + ".params")).string()));
    st.history = read_loss_csv((ckpt / "loss.csv").string());
    st.step = state.at("step").get<std::uint64_t>();
  } else {
    st = init_autodecoder<Real>(records, acfg, cfg.decoder, cfg.seed);
  }

  const ObjectGeometry geom = prepare_geometry(records, acfg);
  const std::uint64_t target = opt.stop_after ? std::min(*opt.stop_after, acfg.steps) : acfg.steps;
  const std::uint64_t every = std::max<std::uint64_t>(1, opt.checkpoint_every);
  while (st.step < target) {
    const std::uint64_t n = std::min(every - st.step % every, target - st.step);
    train_steps(st, records, geom, acfg, n, cfg.seed);
    save_autodecoder_checkpoint(st, records, hash, ckpt);
  }
  write_loss_csv(st.history, (fs::path(out) / "loss.csv").string());
  nlohmann::json summary = {{"step", st.step}, {"config_hash", hash}, {"neighbor_radius", acfg.render.neighbor_radius}};
  if (!st.history.empty()) {
    summary["initial_loss"] = st.history.front().total;
    summary["final_loss"] = st.history.back().total;
  }
  if (st.step < acfg.steps) {
    summary["complete"] = false;
    return summary;
  }

  // Final artifacts: decoder bundle, per-object parameters, fitted clouds
  // (raw feature scale) and their normalization stats.
  st.decoder.params.set_frozen(false);
  save_decoder_bundle(st.decoder.template cast<double>(), acfg.render, out);
  ensure_dir(fs::path(out) / "objects");
  ensure_dir(fs::path(out) / "clouds");
  std::vector<NeuralPointCloud> clouds;
  for (std::size_t j = 0; j < records.size(); ++j) {
    save_params(st.objects[j], (fs::path(out) / "objects" / (records[j].id + ".params")).string());
    clouds.push_back(fitted_cloud(st, records[j], j));
    save_cloud(clouds.back(), (fs::path(out) / "clouds" / (records[j].id + ".npcd")).string());
  }
  write_json_file(stats_to_json(compute_normalization(clouds)), (fs::path(out) / "clouds" / "stats.json").string());
  write_json_file({{"config_hash", hash}}, (fs::path(out) / "clouds" / "meta.json").string());
  write_meta(out, "train-autodecoder", cfg, {{"neighbor_radius", acfg.render.neighbor_radius}});
  summary["complete"] = true;
  return summary;
}

}  // namespace detail

inline nlohmann::json run_train_autodecoder(const RunConfig& cfg, const std::string& data_dir, const std::string& out,
                                            const TrainOptions& opt = {}) {
  return cfg.precision == "double" ? detail::train_autodecoder_impl<double>(cfg, data_dir, out, opt)
                                   : detail::train_autodecoder_impl<float>(cfg, data_dir, out, opt);
}

// ---------------------------------------------------------------------------
// train-diffusion

inline std::vector<NeuralPointCloud> load_cloud_dir(const std::string& dir) {
  std::vector<NeuralPointCloud> out;
  for (const auto& p : list_clouds(dir)) out.push_back(load_cloud(p.string()));
  return out;
}

namespace detail {

inline void write_scalar_loss_csv(const std::vector<double>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(9);
  out << "step,loss\n";
  for (std::size_t i = 0; i < history.size(); ++i) out << i << ',' << history[i] << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<double> read_scalar_loss_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  std::getline(in, line);
  std::vector<double> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("bad loss CSV line in " + path);
    out.push_back(std::stod(line.substr(comma + 1)));
  }
  return out;
}

template <typename Real>
nlohmann::json train_diffusion_impl(const RunConfig& cfg, const std::string& clouds_dir, const std::string& out,
                                    const TrainOptions& opt) {
  const auto raw = load_cloud_dir(clouds_dir);
  if (raw.empty()) throw IoError("no .npcd clouds in " + clouds_dir);
  const fs::path stats_path = fs::path(clouds_dir) / "stats.json";
  if (!fs::exists(stats_path)) throw IoError("normalization stats not found: " + stats_path.string());
  const NormalizationStats stats = stats_from_json(read_json_file(stats_path.string()));
  std::vector<NeuralPointCloud> data;
  for (const auto& pc : raw) {
    if (pc.size() != raw.front().size() || pc.feature_dim() != raw.front().feature_dim()) {
      throw DimensionError("training clouds must share point count and feature dimension");
    }
    data.push_back(normalize(pc, stats));
  }
  DenoiserConfig dcfg = cfg.denoiser;
  dcfg.points = static_cast<int>(raw.front().size());
  dcfg.feature_dim = static_cast<int>(raw.front().feature_dim());
  const std::string hash = config_hash(cfg);
  DirectoryLock lock(out);
  const fs::path ckpt = fs::path(out) / "checkpoint";

  DiffusionState<Real> st;
  if (fs::exists(ckpt / "state.json")) {
    const auto state = read_json_file((ckpt / "state.json").string());
    if (state.at("config_hash").get<std::string>() != hash) {
      throw ConfigError("checkpoint in " + out + " was written with a different config");
    }
    st.model.config = dcfg;
    st.model.T = cfg.diffusion.T;
    st.ema = st.model;
    st.model.params = load_params<Real>((ckpt / "model.params").string());
    st.ema.params = load_params<Real>((ckpt / "ema.params").string());
    st.history = read_scalar_loss_csv((ckpt / "loss.csv").string());
    st.step = state.at("step").get<std::uint64_t>();
  } else {
    st = init_diffusion<Real>(dcfg, cfg.diffusion, cfg.seed);
  }
  const std::uint64_t target = opt.stop_after ? std::min(*opt.stop_after, cfg.diffusion.steps) : cfg.diffusion.steps;
  const std::uint64_t every = std::max<std::uint64_t>(1, opt.checkpoint_every);
  while (st.step < target) {
    const std::uint64_t n = std::min(every - st.step % every, target - st.step);
    train_diffusion_steps(st, data, cfg.diffusion, n, cfg.seed);
    ensure_dir(ckpt);
    save_params(st.model.params, (ckpt / "model.params").string(), true);
    save_params(st.ema.params, (ckpt / "ema.params").string());
    write_scalar_loss_csv(st.history, (ckpt / "loss.csv").string());
    write_json_file({{"step", st.step}, {"config_hash", hash}}, (ckpt / "state.json").string());
  }
  write_scalar_loss_csv(st.history, (fs::path(out) / "loss.csv").string());
  nlohmann::json summary = {{"step", st.step}, {"config_hash", hash}};
  if (!st.history.empty()) {
    const std::size_t tail = std::min<std::size_t>(100, st.history.size());
    double acc = 0.0;
    for (std::size_t i = st.history.size() - tail; i < st.history.size(); ++i) acc += st.history[i];
    summary["final_loss_mean_last_100"] = acc / static_cast<double>(tail);
  }
  if (st.step < cfg.diffusion.steps) {
    summary["complete"] = false;
    return summary;
  }
  save_params(st.model.params, (fs::path(out) / "model.params").string());
  save_params(st.ema.params, (fs::path(out) / "ema.params").string());
  write_json_file({{"denoiser", denoiser_config_to_json(dcfg)},
                   {"T", cfg.diffusion.T},
                   {"beta_start", cfg.diffusion.beta_start},
                   {"beta_end", cfg.diffusion.beta_end}},
                  (fs::path(out) / "denoiser.json").string());
  write_json_file(stats_to_json(stats), (fs::path(out) / "stats.json").string());
  write_json_file(clip_bounds_to_json(compute_clip_bounds(data)), (fs::path(out) / "clip.json").string());
  write_meta(out, "train-diffusion", cfg);
  summary["complete"] = true;
  return summary;
}

}  // namespace detail

inline nlohmann::json run_train_diffusion(const RunConfig& cfg, const std::string& clouds_dir, const std::string& out,
                                          const TrainOptions& opt = {}) {
  return cfg.precision == "double" ? detail::train_diffusion_impl<double>(cfg, clouds_dir, out, opt)
                                   : detail::train_diffusion_impl<float>(cfg, clouds_dir, out, opt);
}

// ---------------------------------------------------------------------------
// render

/// Cameras from a cameras.json file, or `n` spiral test poses at the dataset
/// camera radius.
inline std::vector<Camera> resolve_cameras(const RunConfig& cfg, const std::optional<std::string>& cameras_file,
                                           int n) {
  if (cameras_file) return cameras_from_json(read_json_file(*cameras_file));
  if (n < 1) throw ConfigError("need at least one view to render");
  PoseConfig pc;
  pc.width = cfg.dataset.image_size;
  pc.height = cfg.dataset.image_size;
  return sample_camera_poses(n, cfg.dataset.camera_radius, cfg.seed, PoseMode::kTest, pc);
}

inline void render_views(const NeuralPointCloud& pc, DecoderBundle& bundle, const std::vector<Camera>& cams,
                         const fs::path& dir, const std::string& prefix) {
  ensure_dir(dir);
  RenderConfig rc = bundle.render;
  rc.deterministic = true;
  for (std::size_t v = 0; v < cams.size(); ++v) {
    write_ppm(render_image(pc, bundle.decoder, cams[v], rc),
              (dir / (prefix + std::to_string(v) + ".ppm")).string());
  }
}

inline nlohmann::json run_render(const RunConfig& cfg, const std::string& decoder_dir, const std::string& cloud_file,
                                 const std::string& out, const std::optional<std::string>& cameras_file, int views) {
  DecoderBundle bundle = load_decoder_bundle(decoder_dir);
  const NeuralPointCloud pc = load_cloud(cloud_file);
  if (pc.feature_dim() != bundle.decoder.config.feature_dim) {
    throw DimensionError("cloud feature dimension does not match the decoder");
  }
  const auto cams = resolve_cameras(cfg, cameras_file, views);
  DirectoryLock lock(out);
  render_views(pc, bundle, cams, out, "");
  write_json_file(cameras_to_json(cams), (fs::path(out) / "cameras.json").string());
  write_meta(out, "render", cfg, {{"cloud", cloud_file}});
  return {{"views", cams.size()}, {"config_hash", config_hash(cfg)}};
}

// ---------------------------------------------------------------------------
// sample

enum class SampleMode { kUnconditional, kAppearanceOnly, kShapeOnly };

inline SampleMode parse_sample_mode(const std::string& s) {
  if (s == "unconditional") return SampleMode::kUnconditional;
  if (s == "appearance-only") return SampleMode::kAppearanceOnly;
  if (s == "shape-only") return SampleMode::kShapeOnly;
  throw ConfigError("unknown sampling mode '" + s + "' (unconditional, appearance-only, shape-only)");
}

struct SampleOptions {
  SampleMode mode = SampleMode::kUnconditional;
  std::optional<std::string> input;  // NPCD file with the conditioning modality
  int count = 1;
  bool trajectory = false;
  bool use_ema = true;
  std::optional<std::string> decoder_dir;  // renders when given
  std::optional<std::string> cameras_file;
  int views = 4;
};

inline constexpr int kTrajectoryCadence = 100;

/// Seed of the k-th sample of a run.
inline std::uint64_t sample_seed(std::uint64_t seed, int k) {
  Rng r(seed, 0x736d706c00000000ull + static_cast<std::uint64_t>(k));
  return r.next_u64();
}

inline nlohmann::json run_sample(const RunConfig& cfg, const std::string& checkpoint_dir, const std::string& out,
                                 const SampleOptions& opt) {
  if (opt.count < 1) throw ConfigError("sample count must be >= 1");
  if (opt.mode != SampleMode::kUnconditional && !opt.input) {
    throw ConfigError("conditional sampling needs --input with the conditioning point cloud");
  }
  DenoiserBundle b = load_denoiser_bundle(checkpoint_dir, opt.use_ema);
  const SamplerConfig sc = cfg.sampler;
  sc.validate(b.model.T);
  const Eigen::Index m = b.model.config.points;
  const Eigen::Index d = b.model.config.feature_dim;
  std::optional<NeuralPointCloud> cond;
  if (opt.input) {
    cond = load_cloud(*opt.input);
    if (cond->size() != m) throw DimensionError("conditioning cloud has the wrong point count for this denoiser");
    if (cond->feature_dim() != d) throw DimensionError("conditioning cloud has the wrong feature dimension");
  }
  std::optional<DecoderBundle> decoder;
  if (opt.decoder_dir) decoder = load_decoder_bundle(*opt.decoder_dir);

  DirectoryLock lock(out);
  ensure_dir(fs::path(out) / "samples");
  const NoisePredictor predictor = b.model.predictor();
  nlohmann::json calls = nlohmann::json::array();
  std::vector<Camera> cams;
  for (int k = 0; k < opt.count; ++k) {
    const std::uint64_t seed = sample_seed(cfg.seed, k);
    TrajectoryHook hook;
    if (opt.trajectory) {
      const fs::path tdir = fs::path(out) / "trajectory" / std::to_string(k);
      ensure_dir(tdir);
      hook = [&, tdir](int t, const MatrixXd& p, const MatrixXd& f) {
        if (t % kTrajectoryCadence != 0) return;
        std::ostringstream name;
        name << 't' << std::setw(5) << std::setfill('0') << t << ".npcd";
        save_cloud(denormalize(NeuralPointCloud{p, f}, b.stats), (tdir / name.str()).string());
      };
    }
    NeuralPointCloud result;
    long long n_calls = 0;
    if (opt.mode == SampleMode::kUnconditional) {
      const NoisePredictor counted = counting_predictor(predictor, n_calls);
      result = denormalize(sample_unconditional(counted, b.schedule, m, d, b.clip, seed, hook), b.stats);
    } else {
      const bool pin_p = opt.mode == SampleMode::kAppearanceOnly;
      const NeuralPointCloud normalized = normalize(*cond, b.stats);
      const auto res = pin_p ? appearance_only_sample(normalized.positions, d, predictor, b.schedule, sc, b.clip, seed, hook)
                             : shape_only_sample(normalized.features, predictor, b.schedule, sc, b.clip, seed, hook);
      n_calls = res.denoiser_calls;
      result = denormalize(res.cloud, b.stats);
      // With no reverse takeover the pinned modality is returned exactly as given.
      if (sc.n_rev == 0) (pin_p ? result.positions : result.features) = pin_p ? cond->positions : cond->features;
    }
    calls.push_back(n_calls);
    save_cloud(result, (fs::path(out) / "samples" / (std::to_string(k) + ".npcd")).string());
    if (decoder) {
      if (cams.empty()) cams = resolve_cameras(cfg, opt.cameras_file, opt.views);
      render_views(result, *decoder, cams, fs::path(out) / "renders", std::to_string(k) + "_");
    }
  }
  write_json_file(stats_to_json(b.stats), (fs::path(out) / "samples" / "stats.json").string());
  if (decoder) write_json_file(cameras_to_json(cams), (fs::path(out) / "renders" / "cameras.json").string());
  const char* mode = opt.mode == SampleMode::kUnconditional ? "unconditional"
                     : opt.mode == SampleMode::kAppearanceOnly ? "appearance-only"
                                                               : "shape-only";
  write_meta(out, "sample", cfg,
             {{"mode", mode}, {"count", opt.count}, {"denoiser_calls", calls}, {"checkpoint", checkpoint_dir}});
  return {{"samples", opt.count}, {"mode", mode}, {"denoiser_calls", calls}, {"config_hash", config_hash(cfg)}};
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::optional<std::string> generated_renders;
  std::optional<std::string> reference_renders;
};

inline std::vector<std::pair<std::string, Image>> load_image_dir(const std::string& dir) {
  std::vector<std::pair<std::string, Image>> out;
  for (const auto& p : list_images(dir)) out.emplace_back(p.filename().string(), read_ppm(p.string()));
  return out;
}

inline nlohmann::json run_eval(const RunConfig& cfg, const std::string& generated_dir, const std::string& reference_dir,
                               const std::optional<std::string>& out, const EvalOptions& opt = {}) {
  const auto gen_files = list_clouds(generated_dir);
  const auto ref_files = list_clouds(reference_dir);
  if (gen_files.empty()) throw ConfigError("no .npcd files in " + generated_dir);
  if (ref_files.empty()) throw ConfigError("no .npcd files in " + reference_dir);
  const fs::path gs = fs::path(generated_dir) / "stats.json";
  const fs::path rs = fs::path(reference_dir) / "stats.json";
  if (fs::exists(gs) && fs::exists(rs) && read_json_file(gs.string()) != read_json_file(rs.string())) {
    throw ConfigError("generated and reference clouds use different normalization stats");
  }
  std::vector<MatrixXd> gen;
  std::vector<MatrixXd> ref;
  for (const auto& p : gen_files) gen.push_back(load_cloud(p.string()).positions);
  for (const auto& p : ref_files) ref.push_back(load_cloud(p.string()).positions);

  nlohmann::json metrics = nlohmann::json::array();
  auto nna = [&](SetDistance dist, const char* name, const char* convention) {
    MetricReport r{name, one_nn_accuracy(gen, ref, dist), gen.size(), ref.size(), convention};
    metrics.push_back(r.to_json());
  };
  if (cfg.eval.chamfer) nna(SetDistance::kChamfer, "1-nna-cd", kChamferConvention);
  if (cfg.eval.emd) nna(SetDistance::kEmd, "1-nna-emd", kEmdConvention);

  nlohmann::json report = {{"config_hash", config_hash(cfg)},
                           {"generated", generated_dir},
                           {"reference", reference_dir},
                           {"conventions", {{"chamfer", kChamferConvention}, {"emd", kEmdConvention}}},
                           {"metrics", metrics}};
  if (cfg.eval.psnr) {
    if (!opt.generated_renders || !opt.reference_renders) {
      throw ConfigError("psnr evaluation needs --generated-renders and --reference-renders");
    }
    const auto g = load_image_dir(*opt.generated_renders);
    const auto r = load_image_dir(*opt.reference_renders);
    if (g.empty() || r.empty()) throw ConfigError("psnr evaluation needs non-empty render directories");
    nlohmann::json matches = nlohmann::json::array();
    double total = 0.0;
    bool infinite = false;
    for (const auto& [name, img] : g) {
      std::string best;
      const std::size_t idx = pixel_retrieval(img, r, &best);
      const double p = psnr(img, r[idx].second);
      infinite = infinite || std::isinf(p);
      total += p;
      nlohmann::json m = {{"generated", name}, {"retrieved", best}};
      m["psnr"] = std::isinf(p) ? nlohmann::json(nullptr) : nlohmann::json(p);
      matches.push_back(m);
    }
    MetricReport pr{"psnr-retrieval", infinite ? std::numeric_limits<double>::infinity() : total / static_cast<double>(g.size()),
                    g.size(), r.size(), "psnr:mean-over-generated:nearest-pixel-l2"};
    report["metrics"].push_back(pr.to_json());
    report["retrieval"] = matches;
  }
  if (out) {
    DirectoryLock lock(*out);
    write_json_file(report, (fs::path(*out) / "report.json").string());
    write_meta(*out, "eval", cfg);
  }
  return report;
}

}  // namespace npcd
