// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// Denoising diffusion over neural point clouds: linear schedule, forward and
// reverse processes, an epsilon-predicting transformer over M point tokens
// plus one time token, training loss, EMA and unconditional sampling.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "npcd/core/mlp.hpp"
#include "npcd/core/ops.hpp"
#include "npcd/core/param_store.hpp"
#include "npcd/core/random.hpp"
#include "npcd/point_cloud.hpp"

namespace npcd {

// ---------------------------------------------------------------------------
// Schedule

/// Tables are indexed by timestep t in [1, T]; alpha_bar(0) = 1.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  [[nodiscard]] int T() const { return static_cast<int>(betas.size()); }
  [[nodiscard]] double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
  [[nodiscard]] double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t - 1)); }
  [[nodiscard]] double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars.at(static_cast<std::size_t>(t - 1)); }

  /// Standard deviation of the reverse-step noise; zero at t = 1.
  [[nodiscard]] double sigma(int t) const {
    if (t <= 1) return 0.0;
    return std::sqrt((1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * beta(t));
  }

  void check_t(int t) const {
    if (t < 1 || t > T()) throw ArgumentError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T()) + "]");
  }
};

/// Schedule from explicit betas (each in [0, 1)).
inline NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("noise schedule needs at least one step");
  NoiseSchedule s;
  double ab = 1.0;
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) throw ConfigError("noise schedule betas must lie in [0, 1)");
    s.alphas.push_back(1.0 - b);
    ab *= 1.0 - b;
    s.alpha_bars.push_back(ab);
  }
  s.betas = std::move(betas);
  return s;
}

inline NoiseSchedule linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("linear_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    betas[static_cast<std::size_t>(i)] =
        T == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
  }
  betas.back() = beta_end;
  return schedule_from_betas(std::move(betas));
}

/// x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise
inline MatrixXd forward_step(const MatrixXd& x_prev, const NoiseSchedule& s, int t, const MatrixXd& noise) {
  s.check_t(t);
  return std::sqrt(1.0 - s.beta(t)) * x_prev + std::sqrt(s.beta(t)) * noise;
}

/// x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) noise
inline MatrixXd forward_jump(const MatrixXd& x0, const NoiseSchedule& s, int t, const MatrixXd& noise) {
  s.check_t(t);
  return std::sqrt(s.alpha_bar(t)) * x0 + std::sqrt(1.0 - s.alpha_bar(t)) * noise;
}

/// x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t) + sigma_t noise
inline MatrixXd reverse_step(const MatrixXd& x_t, const MatrixXd& eps_pred, const NoiseSchedule& s, int t,
                             const MatrixXd& noise) {
  s.check_t(t);
  MatrixXd mean = (x_t - (s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t))) * eps_pred) / std::sqrt(s.alpha(t));
  if (t == 1) return mean;
  return mean + s.sigma(t) * noise;
}

// ---------------------------------------------------------------------------
// Denoiser

struct NoisePair {
  MatrixXd eps_positions;  // M x 3
  MatrixXd eps_features;   // M x D
};

/// Any epsilon predictor: (P_t, F_t, t) -> (eps^P, eps^F).
using NoisePredictor = std::function<NoisePair(const MatrixXd&, const MatrixXd&, int)>;

struct DenoiserConfig {
  int layers = 4;
  int model_dim = 64;
  int heads = 4;
  int points = 64;
  int feature_dim = 8;
  int time_embedding_dim = 32;
  int mlp_ratio = 4;
  /// Sinusoidal time features; otherwise the raw scalar t / T is projected.
  bool sinusoidal_time = true;

  void validate() const {
    if (layers < 0 || model_dim < 1 || heads < 1 || points < 1 || feature_dim < 1 || time_embedding_dim < 2 ||
        mlp_ratio < 1) {
      throw ConfigError("denoiser config: sizes must be positive");
    }
    if (model_dim % heads != 0) throw ConfigError("denoiser config: model_dim must be divisible by heads");
    if (time_embedding_dim % 2 != 0) throw ConfigError("denoiser config: time_embedding_dim must be even");
  }
};

/// Sinusoidal features of t: [sin(t w_i), cos(t w_i)] with w_i = 10000^(-i / (E/2)).
inline Eigen::RowVectorXd time_features(int t, int dim, bool sinusoidal, int T) {
  Eigen::RowVectorXd e(dim);
  if (!sinusoidal) {
    e.setZero();
    e(0) = static_cast<double>(t) / static_cast<double>(std::max(T, 1));
    return e;
  }
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e(i) = std::sin(t * w);
    e(half + i) = std::cos(t * w);
  }
  return e;
}

namespace detail {
template <typename Real>
Var<Real> linear(ParamStore<Real>& p, Var<Real> x, const std::string& name) {
  return add_row(matmul(x, p.var(*x.tape(), name + ".weight")), p.var(*x.tape(), name + ".bias"));
}

template <typename Real>
void add_linear(ParamStore<Real>& p, const std::string& name, int in, int out, Rng& rng, bool zero = false) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Matrix<Real> w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = zero ? Real(0) : static_cast<Real>((2.0 * rng.uniform() - 1.0) * bound);
  p.add(name + ".weight", std::move(w));
  p.add(name + ".bias", Matrix<Real>::Zero(1, out), {static_cast<std::uint32_t>(out)});
}

template <typename Real>
void add_norm(ParamStore<Real>& p, const std::string& name, int dim) {
  p.add(name + ".gain", Matrix<Real>::Ones(1, dim), {static_cast<std::uint32_t>(dim)});
  p.add(name + ".bias", Matrix<Real>::Zero(1, dim), {static_cast<std::uint32_t>(dim)});
}

template <typename Real>
Var<Real> norm(ParamStore<Real>& p, Var<Real> x, const std::string& name) {
  return layer_norm(x, p.var(*x.tape(), name + ".gain"), p.var(*x.tape(), name + ".bias"));
}

/// Lexicographic order of the rows; identical rows keep index order.
inline std::vector<Eigen::Index> canonical_row_order(const MatrixXd& x) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (x(a, c) != x(b, c)) return x(a, c) < x(b, c);
    }
    return a < b;
  });
  return idx;
}
}  // namespace detail

/// Pre-norm transformer over point tokens linear(concat(p, f)) plus one time
/// token linear(time_features(t)). There is no positional encoding over
/// points, so the network is permutation equivariant. Tokens are processed
/// in a canonical (lexicographic) order and mapped back, which makes the
/// equivariance exact in floating point too.
template <typename Real>
struct Denoiser {
  DenoiserConfig config;
  ParamStore<Real> params;
  int T = 1000;

  static Denoiser create(const DenoiserConfig& cfg, int T, std::uint64_t seed) {
    cfg.validate();
    Denoiser d;
    d.config = cfg;
    d.T = T;
    Rng rng(seed, 0x64656e6f);
    const int c = cfg.model_dim;
    const int io = 3 + cfg.feature_dim;
    detail::add_linear(d.params, "in", io, c, rng);
    detail::add_linear(d.params, "time", cfg.time_embedding_dim, c, rng);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string b = "blk" + std::to_string(l);
      detail::add_norm(d.params, b + ".ln1", c);
      detail::add_linear(d.params, b + ".qkv", c, 3 * c, rng);
      detail::add_linear(d.params, b + ".proj", c, c, rng);
      detail::add_norm(d.params, b + ".ln2", c);
      detail::add_linear(d.params, b + ".mlp1", c, cfg.mlp_ratio * c, rng);
      detail::add_linear(d.params, b + ".mlp2", cfg.mlp_ratio * c, c, rng);
    }
    detail::add_norm(d.params, "final", c);
    detail::add_linear(d.params, "out", c, io, rng, true);
    return d;
  }

  /// Predicted noise (M x (3 + D)) for one noisy cloud, recorded on `tape`.
  Var<Real> forward(Tape<Real>& tape, const MatrixXd& positions, const MatrixXd& features, int t) {
    if (positions.rows() != config.points || positions.cols() != 3 || features.rows() != config.points ||
        features.cols() != config.feature_dim) {
      throw DimensionError("denoiser expects " + std::to_string(config.points) + " x 3 positions and " +
                           std::to_string(config.points) + " x " + std::to_string(config.feature_dim) +
                           " features, got " + std::to_string(positions.rows()) + " x " +
                           std::to_string(positions.cols()) + " and " + std::to_string(features.rows()) + " x " +
                           std::to_string(features.cols()));
    }
    const Eigen::Index m = positions.rows();
    MatrixXd x(m, 3 + features.cols());
    x << positions, features;
    const auto order = detail::canonical_row_order(x);
    Matrix<Real> xs(m, x.cols());
    for (Eigen::Index i = 0; i < m; ++i) xs.row(i) = x.row(order[static_cast<std::size_t>(i)]).template cast<Real>();
    std::vector<Eigen::Index> inverse(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) inverse[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = i;

    const int c = config.model_dim;
    const int hd = c / config.heads;
    Var<Real> tokens = detail::linear(params, tape.constant(std::move(xs)), "in");
    const Matrix<Real> tf = time_features(t, config.time_embedding_dim, config.sinusoidal_time, T).template cast<Real>();
    Var<Real> h = concat_rows(tokens, detail::linear(params, tape.constant(tf), "time"));
    const Real att_scale = Real(1) / std::sqrt(static_cast<Real>(hd));
    for (int l = 0; l < config.layers; ++l) {
      const std::string b = "blk" + std::to_string(l);
      Var<Real> qkv = detail::linear(params, detail::norm(params, h, b + ".ln1"), b + ".qkv");
      Var<Real> heads;
      for (int k = 0; k < config.heads; ++k) {
        Var<Real> q = slice_cols(qkv, k * hd, hd);
        Var<Real> kk = slice_cols(qkv, c + k * hd, hd);
        Var<Real> v = slice_cols(qkv, 2 * c + k * hd, hd);
        Var<Real> o = matmul(softmax_rows(scale(matmul_nt(q, kk), att_scale)), v);
        heads = heads.valid() ? concat_cols(heads, o) : o;
      }
      h = add(h, detail::linear(params, heads, b + ".proj"));
      Var<Real> u = gelu(detail::linear(params, detail::norm(params, h, b + ".ln2"), b + ".mlp1"));
      h = add(h, detail::linear(params, u, b + ".mlp2"));
    }
    Var<Real> out = detail::linear(params, detail::norm(params, slice_rows(h, 0, m), "final"), "out");
    return gather_rows(out, std::move(inverse));
  }

  NoisePair predict(const MatrixXd& positions, const MatrixXd& features, int t) {
    Tape<Real> tape;
    tape.set_grad_enabled(false);
    const auto out = forward(tape, positions, features, t).value().template cast<double>();
    return {out.leftCols(3), out.rightCols(out.cols() - 3)};
  }

  NoisePredictor predictor() {
    return [this](const MatrixXd& p, const MatrixXd& f, int t) { return predict(p, f, t); };
  }

  template <typename Other>
  [[nodiscard]] Denoiser<Other> cast() const {
    Denoiser<Other> d;
    d.config = config;
    d.T = T;
    d.params = params.template cast<Other>();
    return d;
  }
};

template <typename Real>
NoisePair denoiser_forward(Denoiser<Real>& d, const MatrixXd& positions, const MatrixXd& features, int t) {
  return d.predict(positions, features, t);
}

// ---------------------------------------------------------------------------
// Training

/// Noise draws for one training sample: t, then eps^P, then eps^F.
struct TrainingDraw {
  int t = 1;
  MatrixXd eps_positions;
  MatrixXd eps_features;
};

inline TrainingDraw draw_training_noise(Rng& rng, const NoiseSchedule& s, Eigen::Index m, Eigen::Index d) {
  TrainingDraw draw;
  draw.t = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(s.T())));
  draw.eps_positions = rng.normal_matrix(m, 3);
  draw.eps_features = rng.normal_matrix(m, d);
  return draw;
}

namespace detail {
inline void warn_if_unnormalized(const NeuralPointCloud& pc) {
  if (pc.positions.cwiseAbs().maxCoeff() > 10.0 || pc.features.cwiseAbs().maxCoeff() > 10.0) {
    std::cerr << "warning: diffusion input has entries above 10 in magnitude; was it normalized?\n";
  }
}
constexpr std::uint64_t kTrainStream = 0x74726e0000000000ull;
}  // namespace detail

/// Loss of an arbitrary predictor: mean over the batch of
/// (MSE(eps^P_pred, eps^P) + MSE(eps^F_pred, eps^F)) / 2.
inline double training_loss(const std::vector<NeuralPointCloud>& batch, const NoiseSchedule& s,
                            const NoisePredictor& predictor, std::uint64_t seed) {
  if (batch.empty()) throw ArgumentError("training_loss: empty batch");
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& pc = batch[b];
    detail::warn_if_unnormalized(pc);
    Rng rng(seed, detail::kTrainStream + b);
    const TrainingDraw draw = draw_training_noise(rng, s, pc.size(), pc.feature_dim());
    const NoisePair pred = predictor(forward_jump(pc.positions, s, draw.t, draw.eps_positions),
                                     forward_jump(pc.features, s, draw.t, draw.eps_features), draw.t);
    total += 0.5 * ((pred.eps_positions - draw.eps_positions).squaredNorm() / static_cast<double>(draw.eps_positions.size()) +
                    (pred.eps_features - draw.eps_features).squaredNorm() / static_cast<double>(draw.eps_features.size()));
  }
  return total / static_cast<double>(batch.size());
}

/// Differentiable loss of the transformer with the same draws as the
/// predictor version.
template <typename Real>
Var<Real> training_loss(Tape<Real>& tape, Denoiser<Real>& d, const std::vector<NeuralPointCloud>& batch,
                        const NoiseSchedule& s, std::uint64_t seed) {
  if (batch.empty()) throw ArgumentError("training_loss: empty batch");
  Var<Real> total;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& pc = batch[b];
    detail::warn_if_unnormalized(pc);
    Rng rng(seed, detail::kTrainStream + b);
    const TrainingDraw draw = draw_training_noise(rng, s, pc.size(), pc.feature_dim());
    Var<Real> out = d.forward(tape, forward_jump(pc.positions, s, draw.t, draw.eps_positions),
                              forward_jump(pc.features, s, draw.t, draw.eps_features), draw.t);
    Var<Real> lp = mse(slice_cols(out, 0, 3), Matrix<Real>(draw.eps_positions.template cast<Real>()));
    Var<Real> lf = mse(slice_cols(out, 3, out.cols() - 3), Matrix<Real>(draw.eps_features.template cast<Real>()));
    Var<Real> l = scale(add(lp, lf), static_cast<Real>(0.5 / static_cast<double>(batch.size())));
    total = total.valid() ? add(total, l) : l;
  }
  return total;
}

struct DiffusionTrainConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::uint64_t steps = 2000;
  int batch_size = 4;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double ema_decay = 0.995;

  void validate() const {
    if (batch_size < 1) throw ConfigError("diffusion batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("diffusion lr must be positive");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("ema_decay must lie in [0, 1]");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  }
};

template <typename Real>
struct DiffusionState {
  Denoiser<Real> model;
  Denoiser<Real> ema;
  std::vector<double> history;
  std::uint64_t step = 0;
};

template <typename Real>
DiffusionState<Real> init_diffusion(const DenoiserConfig& dcfg, const DiffusionTrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DiffusionState<Real> st;
  st.model = Denoiser<double>::create(dcfg, cfg.T, seed).template cast<Real>();
  st.ema = st.model;
  return st;
}

/// Runs `n_steps` steps; step s draws its batch and noise from streams keyed
/// by (seed, s), so training resumes deterministically.
template <typename Real>
void train_diffusion_steps(DiffusionState<Real>& st, const std::vector<NeuralPointCloud>& dataset,
                           const DiffusionTrainConfig& cfg, std::uint64_t n_steps, std::uint64_t seed) {
  cfg.validate();
  if (dataset.empty()) throw ArgumentError("train_diffusion: empty dataset");
  const NoiseSchedule sched = linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  AdamOptions adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  for (std::uint64_t s = 0; s < n_steps; ++s, ++st.step) {
    Rng rng(seed, 0x6466000000000000ull + st.step);
    std::vector<NeuralPointCloud> batch;
    for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(dataset[rng.index(dataset.size())]);
    Tape<Real> tape;
    Var<Real> loss = training_loss(tape, st.model, batch, sched, rng.next_u64());
    const double lv = static_cast<double>(loss.scalar());
    if (!std::isfinite(lv)) throw NumericalError("non-finite diffusion loss at step " + std::to_string(st.step));
    tape.backward(loss);
    st.model.params.adam_step(adam);
    ema_update(st.ema.params, st.model.params, cfg.ema_decay);
    st.history.push_back(lv);
  }
}

template <typename Real>
DiffusionState<Real> train_diffusion(const std::vector<NeuralPointCloud>& dataset, const DenoiserConfig& dcfg,
                                     const DiffusionTrainConfig& cfg, std::uint64_t seed) {
  DiffusionState<Real> st = init_diffusion<Real>(dcfg, cfg, seed);
  train_diffusion_steps(st, dataset, cfg, cfg.steps, seed);
  return st;
}

// ---------------------------------------------------------------------------
// Sampling

/// Per-coordinate bounds in normalized space.
struct ClipBounds {
  Eigen::RowVectorXd position_lo;
  Eigen::RowVectorXd position_hi;
  Eigen::RowVectorXd feature_lo;
  Eigen::RowVectorXd feature_hi;

  [[nodiscard]] MatrixXd clip_positions(const MatrixXd& p) const {
    return p.cwiseMax(position_lo.replicate(p.rows(), 1)).cwiseMin(position_hi.replicate(p.rows(), 1));
  }
  [[nodiscard]] MatrixXd clip_features(const MatrixXd& f) const {
    return f.cwiseMax(feature_lo.replicate(f.rows(), 1)).cwiseMin(feature_hi.replicate(f.rows(), 1));
  }
};

/// Dataset minimum and maximum per coordinate of normalized clouds.
inline ClipBounds compute_clip_bounds(const std::vector<NeuralPointCloud>& normalized) {
  if (normalized.empty()) throw ArgumentError("compute_clip_bounds: empty dataset");
  ClipBounds b;
  b.position_lo = normalized.front().positions.colwise().minCoeff();
  b.position_hi = normalized.front().positions.colwise().maxCoeff();
  b.feature_lo = normalized.front().features.colwise().minCoeff();
  b.feature_hi = normalized.front().features.colwise().maxCoeff();
  for (const auto& pc : normalized) {
    b.position_lo = b.position_lo.cwiseMin(pc.positions.colwise().minCoeff());
    b.position_hi = b.position_hi.cwiseMax(pc.positions.colwise().maxCoeff());
    b.feature_lo = b.feature_lo.cwiseMin(pc.features.colwise().minCoeff());
    b.feature_hi = b.feature_hi.cwiseMax(pc.features.colwise().maxCoeff());
  }
  return b;
}

inline nlohmann::json clip_bounds_to_json(const ClipBounds& b) {
  auto vec = [](const Eigen::RowVectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return {{"position_lo", vec(b.position_lo)}, {"position_hi", vec(b.position_hi)},
          {"feature_lo", vec(b.feature_lo)},   {"feature_hi", vec(b.feature_hi)}};
}

inline ClipBounds clip_bounds_from_json(const nlohmann::json& j) {
  try {
    auto vec = [&](const char* k) {
      const auto v = j.at(k).get<std::vector<double>>();
      return Eigen::RowVectorXd(Eigen::Map<const Eigen::RowVectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    ClipBounds b{vec("position_lo"), vec("position_hi"), vec("feature_lo"), vec("feature_hi")};
    if (b.position_lo.size() != 3 || b.position_hi.size() != 3 || b.feature_lo.size() != b.feature_hi.size()) {
      throw FormatError("clip bounds have inconsistent lengths");
    }
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("clip bounds: ") + e.what());
  }
}

/// Seed substreams shared by unconditional and conditional sampling: the
/// initial draws (positions noise, then features noise), the per-step reverse
/// noise (positions, then features, drawn every step), and resampling noise.
namespace sampling_streams {
inline constexpr std::uint64_t kInit = 0x696e6974;
inline constexpr std::uint64_t kReverse = 0x72657673;
inline constexpr std::uint64_t kResample = 0x72737070;
}  // namespace sampling_streams

/// Called with (t, P_t, F_t) for t = T..0 in normalized space.
using TrajectoryHook = std::function<void(int, const MatrixXd&, const MatrixXd&)>;

/// Unconditional sample in normalized space.
inline NeuralPointCloud sample_unconditional(const NoisePredictor& predictor, const NoiseSchedule& s, Eigen::Index m,
                                             Eigen::Index d, const ClipBounds& clip, std::uint64_t seed,
                                             const TrajectoryHook& hook = nullptr) {
  if (clip.feature_lo.size() != d) throw DimensionError("clip bounds do not match the feature dimension");
  Rng init(seed, sampling_streams::kInit);
  Rng rev(seed, sampling_streams::kReverse);
  MatrixXd p = init.normal_matrix(m, 3);
  MatrixXd f = init.normal_matrix(m, d);
  for (int t = s.T(); t >= 1; --t) {
    if (hook) hook(t, p, f);
    const NoisePair eps = predictor(p, f, t);
    const MatrixXd zp = rev.normal_matrix(m, 3);
    const MatrixXd zf = rev.normal_matrix(m, d);
    p = clip.clip_positions(reverse_step(p, eps.eps_positions, s, t, zp));
    f = clip.clip_features(reverse_step(f, eps.eps_features, s, t, zf));
  }
  if (hook) hook(0, p, f);
  return {p, f};
}

}  // namespace npcd
