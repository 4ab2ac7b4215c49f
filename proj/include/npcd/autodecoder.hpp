// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// Category-level autodecoder: one shared decoder, one feature matrix per
// object, fitted jointly against multi-view reconstruction with optional
// total-variation and variational (KL) regularization. Positions are given
// and never updated.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "npcd/renderer.hpp"

namespace npcd {

struct ObjectRecord {
  std::string id;
  MatrixXd positions;  // M x 3, fixed
  std::vector<View> views;

  void validate() const {
    if (positions.rows() < 1 || positions.cols() != 3) throw ArgumentError("object " + id + ": positions must be M x 3");
    if (views.empty()) throw ArgumentError("object " + id + ": needs at least one view");
    for (const auto& v : views) {
      v.camera.validate();
      if (v.image.width != v.camera.width || v.image.height != v.camera.height) {
        throw DimensionError("object " + id + ": image size does not match its camera");
      }
      if (v.image.width != views.front().image.width || v.image.height != views.front().image.height) {
        throw DimensionError("object " + id + ": views differ in image size");
      }
    }
  }
};

enum class InitMode { kZero, kRandom };

struct AutodecoderConfig {
  double lr = 1e-3;
  double lambda_tv = 0.0;
  double lambda_kl = 0.0;
  int tv_neighborhood_k = 3;
  int rays_per_view_per_step = 64;
  int views_per_step = 2;
  int objects_per_step = 1;
  std::uint64_t steps = 2000;
  InitMode init_mode = InitMode::kZero;
  bool variational = false;
  /// One log-variance per point instead of one per feature dimension.
  bool scalar_variance = false;
  double initial_log_variance = -4.0;
  /// Decoder weights stay fixed; only features are optimized.
  bool freeze_decoder = false;
  RenderConfig render;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("autodecoder lr must be positive");
    if (lambda_tv < 0.0 || lambda_kl < 0.0) throw ConfigError("regularization weights must be non-negative");
    if (tv_neighborhood_k < 1) throw ConfigError("tv_neighborhood_k must be >= 1");
    if (rays_per_view_per_step < 1) throw ConfigError("rays_per_view_per_step must be >= 1");
    if (views_per_step < 1) throw ConfigError("views_per_step must be >= 1");
    if (objects_per_step < 1) throw ConfigError("objects_per_step must be >= 1");
    render.validate();
  }
};

inline constexpr double kMinLogVariance = -20.0;
inline constexpr double kMaxLogVariance = 10.0;

// ---------------------------------------------------------------------------
// Losses

struct PixelSample {
  int view = 0;
  int x = 0;
  int y = 0;
};

/// Renders the given pixels of an object and returns (prediction R x 3,
/// target R x 3). `jitter` selects stratified depths; nullptr follows the
/// render config.
template <typename Real>
std::pair<Var<Real>, Matrix<Real>> render_pixels(Decoder<Real>& decoder, Var<Real> features, const NeighborIndex& index,
                                                 const ObjectRecord& rec, const std::vector<PixelSample>& pixels,
                                                 const RenderConfig& config, Rng* jitter) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  Matrix<Real> target(static_cast<Eigen::Index>(pixels.size()), 3);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const auto& p = pixels[i];
    if (p.view < 0 || static_cast<std::size_t>(p.view) >= rec.views.size()) {
      throw ArgumentError("pixel sample refers to missing view " + std::to_string(p.view));
    }
    const View& v = rec.views[static_cast<std::size_t>(p.view)];
    if (p.x < 0 || p.y < 0 || p.x >= v.image.width || p.y >= v.image.height) {
      throw ArgumentError("pixel (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ") outside view " +
                          std::to_string(p.view));
    }
    rays.push_back(camera_ray(v.camera, p.x, p.y));
    target.row(static_cast<Eigen::Index>(i)) = v.image.rgb.row(v.image.pixel_index(p.x, p.y)).template cast<Real>();
  }
  const ShadingBatch batch = build_shading_batch(index, rays, config, jitter);
  return {render_batch(decoder, features, batch, config), std::move(target)};
}

/// Mean squared error between rendered and ground-truth colors over the
/// sampled pixels.
template <typename Real>
Var<Real> reconstruction_loss(Decoder<Real>& decoder, Var<Real> features, const NeighborIndex& index,
                              const ObjectRecord& rec, const std::vector<PixelSample>& pixels,
                              const RenderConfig& config, Rng* jitter = nullptr) {
  if (pixels.empty()) throw ArgumentError("reconstruction_loss: no pixels sampled");
  auto [pred, target] = render_pixels(decoder, features, index, rec, pixels, config, jitter);
  return mse(pred, target);
}

/// Directed k-nearest-neighbour graph used by the TV regularizer.
struct TvGraph {
  std::vector<Eigen::Index> from;
  std::vector<Eigen::Index> to;
  std::vector<double> inverse_distance;
};

inline TvGraph build_tv_graph(const MatrixXd& positions, int k, double distance_epsilon = 1e-8) {
  const Eigen::Index m = positions.rows();
  if (m < 2) throw ArgumentError("tv_loss: need at least two points");
  if (k < 1) throw ArgumentError("tv_loss: k must be >= 1");
  const auto kk = static_cast<std::size_t>(std::min<Eigen::Index>(k, m - 1));
  TvGraph g;
  std::vector<std::pair<double, Eigen::Index>> cand;
  for (Eigen::Index i = 0; i < m; ++i) {
    cand.clear();
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j != i) cand.emplace_back((positions.row(i) - positions.row(j)).norm(), j);
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(kk), cand.end());
    for (std::size_t n = 0; n < kk; ++n) {
      if (cand[n].first < distance_epsilon) {
        throw DegenerateError("tv_loss: points " + std::to_string(i) + " and " + std::to_string(cand[n].second) +
                              " coincide");
      }
      g.from.push_back(i);
      g.to.push_back(cand[n].second);
      g.inverse_distance.push_back(1.0 / cand[n].first);
    }
  }
  return g;
}

/// lambda * sum_i sum_{n in N(i)} |f_i - f_n|_1 / |p_i - p_n|_2
template <typename Real>
Var<Real> tv_loss(Var<Real> features, const TvGraph& graph, double lambda) {
  Var<Real> diff = sub(gather_rows(features, graph.from), gather_rows(features, graph.to));
  Matrix<Real> w(static_cast<Eigen::Index>(graph.inverse_distance.size()), 1);
  for (std::size_t i = 0; i < graph.inverse_distance.size(); ++i) {
    w(static_cast<Eigen::Index>(i), 0) = static_cast<Real>(lambda * graph.inverse_distance[i]);
  }
  return sum(scale_rows(abs(diff), w));
}

inline double tv_loss(const NeuralPointCloud& pc, double lambda, int k) {
  pc.validate();
  const TvGraph g = build_tv_graph(pc.positions, k);
  Tape<double> tape;
  tape.set_grad_enabled(false);
  return tv_loss(tape.constant(pc.features), g, lambda).scalar();
}

namespace detail {
/// Expands an M x 1 column to M x D; other shapes pass through.
template <typename Real>
Var<Real> broadcast_cols(Var<Real> a, Eigen::Index d) {
  if (a.cols() == d) return a;
  if (a.cols() != 1) throw DimensionError("log-variances must be M x D or M x 1");
  return matmul(a, a.tape()->constant(Matrix<Real>::Ones(1, d)));
}
}  // namespace detail

/// lambda * sum_i KL(N(mu_i, diag(exp(lv_i))) || N(0, I)).
template <typename Real>
Var<Real> kl_loss(Var<Real> means, Var<Real> log_variances, double lambda) {
  Var<Real> lv = detail::broadcast_cols(log_variances, means.cols());
  Var<Real> terms = add_scalar(sub(add(square(means), exp(lv)), lv), Real(-1));
  return scale(sum(terms), static_cast<Real>(0.5 * lambda));
}

inline double kl_loss(const VariationalNeuralPointCloud& vpc, double lambda) {
  Tape<double> tape;
  tape.set_grad_enabled(false);
  return kl_loss(tape.constant(vpc.means), tape.constant(vpc.log_variances), lambda).scalar();
}

/// f = mu + exp(lv / 2) * eps for a given standard normal eps.
template <typename Real>
Var<Real> reparameterize(Var<Real> means, Var<Real> log_variances, const Matrix<Real>& eps) {
  Var<Real> lv = detail::broadcast_cols(log_variances, means.cols());
  return add(means, mul(exp(scale(lv, Real(0.5))), means.tape()->constant(eps)));
}

inline NeuralPointCloud reparameterize_sample(const VariationalNeuralPointCloud& vpc, std::uint64_t seed) {
  Rng rng(seed, 0x72657061);
  const MatrixXd eps = rng.normal_matrix(vpc.means.rows(), vpc.means.cols());
  Tape<double> tape;
  tape.set_grad_enabled(false);
  NeuralPointCloud pc{vpc.positions,
                      reparameterize(tape.constant(vpc.means), tape.constant(vpc.log_variances), eps).value()};
  pc.validate();
  return pc;
}

// ---------------------------------------------------------------------------
// Training

struct LossRecord {
  std::uint64_t step = 0;
  double recon = 0.0;
  double tv = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

inline void write_loss_csv(const std::vector<LossRecord>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(9);
  out << "step,recon,tv,kl,total\n";
  for (const auto& r : history) out << r.step << ',' << r.recon << ',' << r.tv << ',' << r.kl << ',' << r.total << '\n';
  if (!out) throw IoError("write failed: " + path);
}

/// Mutable training state. Object stores hold "features", or "means" and
/// "log_variances" in variational mode.
template <typename Real>
struct AutodecoderState {
  Decoder<Real> decoder;
  std::vector<ParamStore<Real>> objects;
  std::vector<LossRecord> history;
  std::uint64_t step = 0;
};

template <typename Real>
ParamStore<Real> init_object_params(const ObjectRecord& rec, const AutodecoderConfig& cfg, int feature_dim,
                                    std::uint64_t seed) {
  const Eigen::Index m = rec.positions.rows();
  ParamStore<Real> store;
  const MatrixXd init = cfg.init_mode == InitMode::kZero ? MatrixXd::Zero(m, feature_dim)
                                                         : new_random_init(rec.positions, feature_dim, seed).features;
  if (cfg.variational) {
    store.add("means", init.cast<Real>());
    const Eigen::Index cols = cfg.scalar_variance ? 1 : feature_dim;
    store.add("log_variances", Matrix<Real>::Constant(m, cols, static_cast<Real>(cfg.initial_log_variance)));
  } else {
    store.add("features", init.cast<Real>());
  }
  return store;
}

template <typename Real>
AutodecoderState<Real> init_autodecoder(const std::vector<ObjectRecord>& records, const AutodecoderConfig& cfg,
                                        const DecoderConfig& dcfg, std::uint64_t seed) {
  cfg.validate();
  if (records.empty()) throw ArgumentError("autodecoder: empty dataset");
  AutodecoderState<Real> st;
  st.decoder = Decoder<double>::create(dcfg, seed).template cast<Real>();
  for (std::size_t j = 0; j < records.size(); ++j) {
    records[j].validate();
    st.objects.push_back(init_object_params<Real>(records[j], cfg, dcfg.feature_dim, seed * 1000003u + j));
  }
  return st;
}

/// Fitted features of object j (the means in variational mode).
template <typename Real>
NeuralPointCloud fitted_cloud(const AutodecoderState<Real>& st, const ObjectRecord& rec, std::size_t j) {
  const auto& store = st.objects.at(j);
  const auto& f = store.contains("means") ? store.value("means") : store.value("features");
  return {rec.positions, f.template cast<double>()};
}

template <typename Real>
VariationalNeuralPointCloud fitted_variational(const AutodecoderState<Real>& st, const ObjectRecord& rec,
                                               std::size_t j) {
  const auto& store = st.objects.at(j);
  if (!store.contains("log_variances")) throw StateError("object was not fitted in variational mode");
  return {rec.positions, store.value("means").template cast<double>(),
          store.value("log_variances").template cast<double>()};
}

/// Precomputed per-object geometry (neighbour grid, TV graph).
struct ObjectGeometry {
  std::vector<NeighborIndex> index;
  std::vector<TvGraph> tv;
};

inline ObjectGeometry prepare_geometry(const std::vector<ObjectRecord>& records, const AutodecoderConfig& cfg) {
  ObjectGeometry g;
  for (const auto& r : records) {
    g.index.emplace_back(r.positions, cfg.render.neighbor_radius);
    g.tv.push_back(cfg.lambda_tv > 0.0 ? build_tv_graph(r.positions, cfg.tv_neighborhood_k, cfg.render.distance_epsilon)
                                       : TvGraph{});
  }
  return g;
}

/// Runs `n_steps` optimization steps. Each step draws from a stream keyed by
/// (seed, step), so resuming from a checkpoint continues the same trajectory.
template <typename Real>
void train_steps(AutodecoderState<Real>& st, const std::vector<ObjectRecord>& records, const ObjectGeometry& geom,
                 const AutodecoderConfig& cfg, std::uint64_t n_steps, std::uint64_t seed) {
  cfg.validate();
  if (st.objects.size() != records.size()) throw StateError("autodecoder state does not match the dataset");
  const AdamOptions adam{cfg.lr};
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.objects_per_step), records.size());
  st.decoder.params.set_frozen(cfg.freeze_decoder);
  std::vector<std::size_t> order(records.size());
  for (std::uint64_t s = 0; s < n_steps; ++s, ++st.step) {
    Rng rng(seed, 0x7472000000000000ull + st.step);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng.engine());
    Tape<Real> tape;
    tape.set_grad_enabled(true);
    Var<Real> preds;
    Matrix<Real> targets;
    Var<Real> reg;
    double tv_total = 0.0;
    double kl_total = 0.0;
    std::vector<Var<Real>> pred_parts;
    std::vector<Matrix<Real>> target_parts;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t j = order[b];
      const ObjectRecord& rec = records[j];
      auto& store = st.objects[j];
      Var<Real> features;
      if (cfg.variational) {
        Var<Real> mu = store.var(tape, "means");
        Var<Real> lv = store.var(tape, "log_variances");
        features = reparameterize(mu, lv, rng.normal_matrix<Real>(mu.rows(), mu.cols()));
        if (cfg.lambda_kl > 0.0) {
          Var<Real> kl = scale(kl_loss(mu, lv, cfg.lambda_kl), static_cast<Real>(1.0 / batch));
          kl_total += static_cast<double>(kl.scalar());
          reg = reg.valid() ? add(reg, kl) : kl;
        }
      } else {
        features = store.var(tape, "features");
      }
      if (cfg.lambda_tv > 0.0) {
        Var<Real> tv = scale(tv_loss(features, geom.tv[j], cfg.lambda_tv), static_cast<Real>(1.0 / batch));
        tv_total += static_cast<double>(tv.scalar());
        reg = reg.valid() ? add(reg, tv) : tv;
      }
      const int views = std::min<int>(cfg.views_per_step, static_cast<int>(rec.views.size()));
      std::vector<int> view_ids(rec.views.size());
      for (std::size_t v = 0; v < view_ids.size(); ++v) view_ids[v] = static_cast<int>(v);
      std::shuffle(view_ids.begin(), view_ids.end(), rng.engine());
      std::vector<PixelSample> pixels;
      for (int v = 0; v < views; ++v) {
        const Image& img = rec.views[static_cast<std::size_t>(view_ids[static_cast<std::size_t>(v)])].image;
        for (int r = 0; r < cfg.rays_per_view_per_step; ++r) {
          const auto px = static_cast<int>(rng.index(static_cast<std::size_t>(img.pixel_count())));
          pixels.push_back({view_ids[static_cast<std::size_t>(v)], px % img.width, px / img.width});
        }
      }
      auto [pred, target] = render_pixels(st.decoder, features, geom.index[j], rec, pixels, cfg.render,
                                          cfg.render.deterministic ? nullptr : &rng);
      pred_parts.push_back(pred);
      target_parts.push_back(std::move(target));
    }
    preds = pred_parts.front();
    targets = target_parts.front();
    for (std::size_t b = 1; b < pred_parts.size(); ++b) {
      preds = concat_rows(preds, pred_parts[b]);
      Matrix<Real> stacked(targets.rows() + target_parts[b].rows(), 3);
      stacked << targets, target_parts[b];
      targets = std::move(stacked);
    }
    Var<Real> recon = mse(preds, targets);
    Var<Real> total = reg.valid() ? add(recon, reg) : recon;
    LossRecord rec{st.step, static_cast<double>(recon.scalar()), tv_total, kl_total, static_cast<double>(total.scalar())};
    if (!std::isfinite(rec.recon)) throw NumericalError("non-finite reconstruction loss at step " + std::to_string(st.step));
    if (!std::isfinite(rec.tv)) throw NumericalError("non-finite TV loss at step " + std::to_string(st.step));
    if (!std::isfinite(rec.kl)) throw NumericalError("non-finite KL loss at step " + std::to_string(st.step));
    tape.backward(total);
    if (!cfg.freeze_decoder) st.decoder.params.adam_step(adam);
    for (std::size_t b = 0; b < batch; ++b) {
      auto& store = st.objects[order[b]];
      store.adam_step(adam);
      if (cfg.variational) {
        auto& lv = store.at("log_variances").value;
        lv = lv.cwiseMax(static_cast<Real>(kMinLogVariance)).cwiseMin(static_cast<Real>(kMaxLogVariance));
      }
    }
    st.history.push_back(rec);
  }
}

template <typename Real>
AutodecoderState<Real> train(const std::vector<ObjectRecord>& records, const AutodecoderConfig& cfg,
                             const DecoderConfig& dcfg, std::uint64_t seed) {
  AutodecoderState<Real> st = init_autodecoder<Real>(records, cfg, dcfg, seed);
  train_steps(st, records, prepare_geometry(records, cfg), cfg, cfg.steps, seed);
  return st;
}

// ---------------------------------------------------------------------------
// Many-to-one analysis

/// Cosine similarity; two zero vectors count as identical, a zero vector
/// against a non-zero one as orthogonal.
inline double cosine_similarity(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return na == nb ? 1.0 : 0.0;
  return a.dot(b) / (na * nb);
}

/// Mean over objects and points of the mean pairwise cosine similarity of a
/// point's feature across independently optimized feature sets.
inline double mean_pairwise_cosine(const std::vector<std::vector<MatrixXd>>& per_seed_features) {
  if (per_seed_features.size() < 2) throw ArgumentError("cosine similarity analysis needs at least two seeds");
  const std::size_t objects = per_seed_features.front().size();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t j = 0; j < objects; ++j) {
    const Eigen::Index m = per_seed_features.front()[j].rows();
    for (Eigen::Index i = 0; i < m; ++i) {
      double acc = 0.0;
      std::size_t pairs = 0;
      for (std::size_t a = 0; a < per_seed_features.size(); ++a) {
        for (std::size_t b = a + 1; b < per_seed_features.size(); ++b) {
          acc += cosine_similarity(per_seed_features[a][j].row(i), per_seed_features[b][j].row(i));
          ++pairs;
        }
      }
      total += acc / static_cast<double>(pairs);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

/// Re-optimizes all features from scratch once per seed with the decoder
/// frozen, then reports the mean pairwise cosine similarity.
template <typename Real>
double cosine_similarity_analysis(const std::vector<ObjectRecord>& records, AutodecoderConfig cfg, int n_seeds,
                                  const Decoder<Real>& frozen_decoder, std::uint64_t base_seed = 0) {
  if (n_seeds < 2) throw ArgumentError("cosine similarity analysis needs at least two seeds");
  cfg.freeze_decoder = true;
  const ObjectGeometry geom = prepare_geometry(records, cfg);
  std::vector<std::vector<MatrixXd>> per_seed;
  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(s) + 1;
    AutodecoderState<Real> st;
    st.decoder = frozen_decoder;
    for (std::size_t j = 0; j < records.size(); ++j) {
      st.objects.push_back(init_object_params<Real>(records[j], cfg, frozen_decoder.config.feature_dim,
                                                    seed * 1000003u + j));
    }
    train_steps(st, records, geom, cfg, cfg.steps, seed);
    st.decoder.params.set_frozen(false);
    std::vector<MatrixXd> feats;
    for (std::size_t j = 0; j < records.size(); ++j) feats.push_back(fitted_cloud(st, records[j], j).features);
    per_seed.push_back(std::move(feats));
  }
  return mean_pairwise_cosine(per_seed);
}

}  // namespace npcd
