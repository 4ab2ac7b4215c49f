// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// Conditional sampling with one modality pinned: appearance-only sampling
// keeps the positions on their forward-process trajectory from a given P_0
// while the features are denoised, shape-only sampling swaps the roles.
// The last n_rev steps hand the pinned modality to the reverse process, and
// steps n_rev..n_repaint repeat n_resample re-noise/re-denoise loops on the
// free modality.
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "npcd/diffusion.hpp"

namespace npcd {

struct SamplerConfig {
  int n_rev = 0;
  int n_repaint = 0;
  int n_resample = 0;

  void validate(int T) const {
    if (n_rev < 0 || n_rev > T) throw ConfigError("sampler: n_rev must lie in [0, T]");
    if (n_repaint < 0 || n_repaint > T) throw ConfigError("sampler: n_repaint must lie in [0, T]");
    if (n_resample < 0) throw ConfigError("sampler: n_resample must be >= 0");
  }
};

inline const std::map<std::string, SamplerConfig>& sampler_presets() {
  static const std::map<std::string, SamplerConfig> presets{
      {"srn-chairs-appearance", {15, 50, 10}},
      {"srn-cars-appearance", {15, 80, 40}},
      {"chairs-shape", {50, 100, 2}},
      {"cars-shape", {50, 0, 0}},
  };
  return presets;
}

inline SamplerConfig sampler_preset(const std::string& name) {
  const auto& p = sampler_presets();
  auto it = p.find(name);
  if (it == p.end()) {
    std::string names;
    for (const auto& [k, _] : p) names += (names.empty() ? "" : ", ") + k;
    throw ConfigError("unknown sampler preset '" + name + "' (available: " + names + ")");
  }
  return it->second;
}

/// Number of timesteps that get resampling loops: t in [max(n_rev, 1), min(n_repaint, T)].
/// With n_rev = T nothing is pinned, so there is nothing to harmonize.
inline int resampled_steps(const SamplerConfig& c, int T) {
  if (c.n_rev >= T || c.n_resample == 0) return 0;
  const int lo = std::max(c.n_rev, 1);
  const int hi = std::min(c.n_repaint, T);
  return std::max(0, hi - lo + 1);
}

/// Closed-form denoiser call count.
inline long long expected_denoiser_calls(const SamplerConfig& c, int T) {
  return static_cast<long long>(T) + static_cast<long long>(c.n_resample) * resampled_steps(c, T);
}

enum class PinnedModality { kPositions, kFeatures };

struct ConditionalSampleResult {
  NeuralPointCloud cloud;      // normalized space
  MatrixXd fixed_noise;        // the single forward-process noise of the pinned modality
  long long denoiser_calls = 0;
};

/// Core of both conditional samplers, in normalized space. `pinned` is P_0
/// (M x 3) or F_0 (M x D) depending on `which`; `free_dim` is the width of
/// the other modality.
inline ConditionalSampleResult sample_pinned(PinnedModality which, const MatrixXd& pinned, Eigen::Index free_dim,
                                             const NoisePredictor& predictor, const NoiseSchedule& s,
                                             const SamplerConfig& cfg, const ClipBounds& clip, std::uint64_t seed,
                                             const TrajectoryHook& hook = nullptr) {
  const int T = s.T();
  cfg.validate(T);
  const bool pin_p = which == PinnedModality::kPositions;
  const Eigen::Index m = pinned.rows();
  if (m < 1) throw ArgumentError("conditional sampling needs at least one point");
  if (pin_p && pinned.cols() != 3) throw DimensionError("appearance-only sampling needs M x 3 positions");
  if (!pin_p && free_dim != 3) throw DimensionError("shape-only sampling generates M x 3 positions");
  const Eigen::Index d = pin_p ? free_dim : pinned.cols();
  if (clip.feature_lo.size() != d) throw DimensionError("clip bounds do not match the feature dimension");

  ConditionalSampleResult res;
  Rng init(seed, sampling_streams::kInit);
  Rng rev(seed, sampling_streams::kReverse);
  Rng resample(seed, sampling_streams::kResample);
  // Same draw order as unconditional sampling: positions noise, then features noise.
  const MatrixXd init_p = init.normal_matrix(m, 3);
  const MatrixXd init_f = init.normal_matrix(m, d);
  res.fixed_noise = pin_p ? init_p : init_f;
  const bool takeover_all = cfg.n_rev >= T;

  MatrixXd p;
  MatrixXd f;
  if (pin_p) {
    p = takeover_all ? init_p : forward_jump(pinned, s, T, res.fixed_noise);
    f = init_f;
  } else {
    p = init_p;
    f = takeover_all ? init_f : forward_jump(pinned, s, T, res.fixed_noise);
  }
  MatrixXd& pin = pin_p ? p : f;
  MatrixXd& free = pin_p ? f : p;
  auto clip_free = [&](const MatrixXd& x) { return pin_p ? clip.clip_features(x) : clip.clip_positions(x); };
  auto clip_pin = [&](const MatrixXd& x) { return pin_p ? clip.clip_positions(x) : clip.clip_features(x); };
  auto eps_free = [&](const NoisePair& e) -> const MatrixXd& { return pin_p ? e.eps_features : e.eps_positions; };
  auto eps_pin = [&](const NoisePair& e) -> const MatrixXd& { return pin_p ? e.eps_positions : e.eps_features; };
  const Eigen::Index free_cols = pin_p ? d : 3;

  const int rs_lo = std::max(cfg.n_rev, 1);
  const int rs_hi = std::min(cfg.n_repaint, T);
  const bool resampling = !takeover_all && cfg.n_resample > 0;

  for (int t = T; t >= 1; --t) {
    if (hook) hook(t, p, f);
    const NoisePair eps = predictor(p, f, t);
    ++res.denoiser_calls;
    const MatrixXd zp = rev.normal_matrix(m, 3);
    const MatrixXd zf = rev.normal_matrix(m, d);
    const MatrixXd& z_free = pin_p ? zf : zp;
    const MatrixXd& z_pin = pin_p ? zp : zf;

    const MatrixXd pin_t = pin;
    MatrixXd free_next = clip_free(reverse_step(free, eps_free(eps), s, t, z_free));
    MatrixXd pin_next;
    if (t > cfg.n_rev) {
      pin_next = t == 1 ? pinned : forward_jump(pinned, s, t - 1, res.fixed_noise);
    } else {
      pin_next = clip_pin(reverse_step(pin, eps_pin(eps), s, t, z_pin));
    }

    if (resampling && t >= rs_lo && t <= rs_hi) {
      for (int r = 0; r < cfg.n_resample; ++r) {
        // Re-noise the free modality by one forward step, then denoise again
        // next to the pinned modality at time t.
        MatrixXd free_t = forward_step(free_next, s, t, resample.normal_matrix(m, free_cols));
        const NoisePair e2 = pin_p ? predictor(pin_t, free_t, t) : predictor(free_t, pin_t, t);
        ++res.denoiser_calls;
        free_next = clip_free(reverse_step(free_t, eps_free(e2), s, t, resample.normal_matrix(m, free_cols)));
      }
    }
    free = std::move(free_next);
    pin = std::move(pin_next);
  }
  if (hook) hook(0, p, f);
  res.cloud = {p, f};
  return res;
}

/// p(F | P): positions pinned to P_0 (normalized), features generated.
inline ConditionalSampleResult appearance_only_sample(const MatrixXd& p0, Eigen::Index feature_dim,
                                                      const NoisePredictor& predictor, const NoiseSchedule& s,
                                                      const SamplerConfig& cfg, const ClipBounds& clip,
                                                      std::uint64_t seed, const TrajectoryHook& hook = nullptr) {
  return sample_pinned(PinnedModality::kPositions, p0, feature_dim, predictor, s, cfg, clip, seed, hook);
}

/// p(P | F): features pinned to F_0 (normalized), positions generated.
inline ConditionalSampleResult shape_only_sample(const MatrixXd& f0, const NoisePredictor& predictor,
                                                 const NoiseSchedule& s, const SamplerConfig& cfg,
                                                 const ClipBounds& clip, std::uint64_t seed,
                                                 const TrajectoryHook& hook = nullptr) {
  return sample_pinned(PinnedModality::kFeatures, f0, 3, predictor, s, cfg, clip, seed, hook);
}

/// Exactly one of `p0`, `f0` must be given; it selects the mode.
inline ConditionalSampleResult sample_conditional(const std::optional<MatrixXd>& p0, const std::optional<MatrixXd>& f0,
                                                  Eigen::Index feature_dim, const NoisePredictor& predictor,
                                                  const NoiseSchedule& s, const SamplerConfig& cfg,
                                                  const ClipBounds& clip, std::uint64_t seed,
                                                  const TrajectoryHook& hook = nullptr) {
  if (p0.has_value() == f0.has_value()) {
    throw ArgumentError("conditional sampling pins exactly one modality (positions or features)");
  }
  if (p0) return appearance_only_sample(*p0, feature_dim, predictor, s, cfg, clip, seed, hook);
  return shape_only_sample(*f0, predictor, s, cfg, clip, seed, hook);
}

/// Wraps a predictor with an invocation counter.
inline NoisePredictor counting_predictor(NoisePredictor inner, long long& counter) {
  return [inner = std::move(inner), &counter](const MatrixXd& p, const MatrixXd& f, int t) {
    ++counter;
    return inner(p, f, t);
  };
}

}  // namespace npcd
