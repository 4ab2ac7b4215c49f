// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "npcd/core/grad_check.hpp"
#include "npcd/diffusion.hpp"

namespace npcd {
namespace {

// 50-digit decimal product of (1 - beta_t) over the default linear schedule.
constexpr double kGoldenAlphaBar1000 = 4.0358297653756833148e-05;

DenoiserConfig tiny_denoiser(int m = 6, int d = 2) {
  DenoiserConfig c;
  c.layers = 2;
  c.model_dim = 8;
  c.heads = 2;
  c.points = m;
  c.feature_dim = d;
  c.time_embedding_dim = 8;
  c.mlp_ratio = 2;
  return c;
}

// Denoiser whose output projection is randomized, so predictions are non-zero.
Denoiser<double> random_denoiser(const DenoiserConfig& c, int T, std::uint64_t seed) {
  Denoiser<double> d = Denoiser<double>::create(c, T, seed);
  Rng rng(seed + 100);
  auto& w = d.params.at("out.weight").value;
  w = rng.normal_matrix(w.rows(), w.cols()) * 0.3;
  return d;
}

TEST(Schedule, EndpointsAndFirstAlpha) {
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  EXPECT_EQ(s.T(), 1000);
  EXPECT_EQ(s.beta(1), 1e-4);
  EXPECT_EQ(s.beta(1000), 0.02);
  EXPECT_EQ(s.alpha(1), 0.9999);
}

TEST(Schedule, AlphaBarGolden) {
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  EXPECT_NEAR(s.alpha_bar(1000), kGoldenAlphaBar1000, 1e-12 * kGoldenAlphaBar1000 * 1e3);
  // Independent accumulation in extended precision, log domain.
  long double log_sum = 0.0L;
  for (int i = 0; i < 1000; ++i) {
    const long double b = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(i) / 999.0L;
    log_sum += std::log1p(-b);
  }
  EXPECT_NEAR(s.alpha_bar(1000), static_cast<double>(std::exp(log_sum)), 1e-15);
}

TEST(Schedule, MonotoneAndRecursive) {
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  for (int t = 2; t <= 1000; ++t) {
    EXPECT_GE(s.beta(t), s.beta(t - 1));
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    EXPECT_EQ(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
    EXPECT_GT(s.beta(t), 0.0);
    EXPECT_LT(s.beta(t), 1.0);
  }
}

TEST(Schedule, InvalidRangesRejected) {
  EXPECT_THROW(linear_schedule(1000, 0.0, 0.02), ConfigError);
  EXPECT_THROW(linear_schedule(1000, 0.03, 0.02), ConfigError);
  EXPECT_THROW(linear_schedule(1000, 1e-4, 1.0), ConfigError);
  EXPECT_THROW(linear_schedule(0, 1e-4, 0.02), ConfigError);
}

TEST(Forward, StepExamples) {
  const NoiseSchedule s = schedule_from_betas({0.02, 0.0});
  const MatrixXd one = MatrixXd::Ones(1, 1);
  EXPECT_NEAR(forward_step(one, s, 1, one)(0, 0), std::sqrt(0.98) + std::sqrt(0.02), 1e-15);
  EXPECT_NEAR(forward_step(one, s, 1, one)(0, 0), 1.131, 5e-4);
  EXPECT_EQ(forward_step(one * 3.0, s, 1, MatrixXd::Zero(1, 1))(0, 0), std::sqrt(0.98) * 3.0);
  EXPECT_EQ(forward_step(one * 3.0, s, 2, one * 5.0)(0, 0), 3.0);
}

TEST(Forward, JumpExamples) {
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  const MatrixXd one = MatrixXd::Ones(1, 1);
  EXPECT_NEAR(forward_jump(one, s, 1, one)(0, 0), 1.00995, 1e-5);
  EXPECT_EQ(forward_jump(one * 2.0, s, 500, MatrixXd::Zero(1, 1))(0, 0), std::sqrt(s.alpha_bar(500)) * 2.0);
  EXPECT_THROW(forward_jump(one, s, 0, one), ArgumentError);
  EXPECT_THROW(forward_jump(one, s, 1001, one), ArgumentError);
}

TEST(Forward, IteratedAndJumpMarginalsAgree) {
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  const Eigen::Index n = 10000;
  const MatrixXd x0 = MatrixXd::Constant(n, 1, 0.7);
  for (int t : {1, 10, 100, 1000}) {
    Rng a(1, static_cast<std::uint64_t>(t));
    Rng b(2, static_cast<std::uint64_t>(t));
    MatrixXd iter = x0;
    for (int k = 1; k <= t; ++k) iter = forward_step(iter, s, k, a.normal_matrix(n, 1));
    const MatrixXd jump = forward_jump(x0, s, t, b.normal_matrix(n, 1));
    auto moments = [](const MatrixXd& x) {
      const double m = x.mean();
      return std::pair<double, double>{m, (x.array() - m).square().sum() / static_cast<double>(x.size() - 1)};
    };
    const auto [m1, v1] = moments(iter);
    const auto [m2, v2] = moments(jump);
    const double nd = static_cast<double>(n);
    EXPECT_LT(std::abs(m1 - m2), 5.0 * std::sqrt(v1 / nd + v2 / nd)) << "t=" << t;
    EXPECT_LT(std::abs(v1 - v2), 5.0 * std::sqrt(2.0 * v1 * v1 / nd + 2.0 * v2 * v2 / nd)) << "t=" << t;
  }
}

TEST(Reverse, ZeroBetaIsIdentity) {
  const NoiseSchedule s = schedule_from_betas({0.01, 0.0, 0.0});
  const MatrixXd x = Rng(1).normal_matrix(3, 2);
  EXPECT_EQ(reverse_step(x, Rng(2).normal_matrix(3, 2), s, 3, MatrixXd::Zero(3, 2)), x);
}

TEST(Reverse, FinalStepIgnoresNoise) {
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  const MatrixXd x = Rng(1).normal_matrix(3, 2);
  const MatrixXd e = Rng(2).normal_matrix(3, 2);
  EXPECT_EQ(reverse_step(x, e, s, 1, MatrixXd::Constant(3, 2, 100.0)), reverse_step(x, e, s, 1, MatrixXd::Zero(3, 2)));
  EXPECT_EQ(s.sigma(1), 0.0);
}

TEST(Reverse, SecondStepMatchesIndependentFormula) {
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  const double b1 = 1e-4;
  const double b2 = 1e-4 + (0.02 - 1e-4) / 999.0;
  const double ab1 = 1.0 - b1;
  const double ab2 = ab1 * (1.0 - b2);
  const double var = (1.0 - ab1) / (1.0 - ab2) * b2;
  const double z = 0.37;
  const double expected = 1.0 / std::sqrt(1.0 - b2) + std::sqrt(var) * z;
  const double got = reverse_step(MatrixXd::Ones(1, 1), MatrixXd::Zero(1, 1), s, 2, MatrixXd::Constant(1, 1, z))(0, 0);
  EXPECT_NEAR(got, expected, 1e-15);
}

TEST(Denoiser, OutputShapesAndZeroInitProjection) {
  Denoiser<double> d = Denoiser<double>::create(tiny_denoiser(5, 3), 100, 1);
  const NoisePair out = d.predict(Rng(1).normal_matrix(5, 3), Rng(2).normal_matrix(5, 3), 17);
  EXPECT_EQ(out.eps_positions.rows(), 5);
  EXPECT_EQ(out.eps_positions.cols(), 3);
  EXPECT_EQ(out.eps_features.cols(), 3);
  EXPECT_EQ(out.eps_positions.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(out.eps_features.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Denoiser, ShapeMismatchIsDimensionError) {
  Denoiser<double> d = Denoiser<double>::create(tiny_denoiser(5, 3), 100, 1);
  EXPECT_THROW(d.predict(MatrixXd::Zero(4, 3), MatrixXd::Zero(4, 3), 1), DimensionError);
  EXPECT_THROW(d.predict(MatrixXd::Zero(5, 3), MatrixXd::Zero(5, 2), 1), DimensionError);
}

TEST(Denoiser, ConfigValidation) {
  DenoiserConfig c = tiny_denoiser();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Denoiser, PermutationEquivariantBitExact) {
  const DenoiserConfig c = tiny_denoiser(7, 2);
  Denoiser<double> d = random_denoiser(c, 1000, 3);
  Rng rng(4);
  const MatrixXd p = rng.normal_matrix(7, 3);
  const MatrixXd f = rng.normal_matrix(7, 2);
  const NoisePair base = d.predict(p, f, 321);
  EXPECT_GT(base.eps_positions.cwiseAbs().maxCoeff(), 0.0);
  std::vector<Eigen::Index> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    MatrixXd pp(7, 3);
    MatrixXd fp(7, 2);
    for (Eigen::Index i = 0; i < 7; ++i) {
      pp.row(i) = p.row(perm[static_cast<std::size_t>(i)]);
      fp.row(i) = f.row(perm[static_cast<std::size_t>(i)]);
    }
    const NoisePair out = d.predict(pp, fp, 321);
    for (Eigen::Index i = 0; i < 7; ++i) {
      EXPECT_EQ(out.eps_positions.row(i), base.eps_positions.row(perm[static_cast<std::size_t>(i)]));
      EXPECT_EQ(out.eps_features.row(i), base.eps_features.row(perm[static_cast<std::size_t>(i)]));
    }
  }
}

TEST(Denoiser, TimestepChangesPrediction) {
  Denoiser<double> d = random_denoiser(tiny_denoiser(), 1000, 5);
  const MatrixXd p = Rng(1).normal_matrix(6, 3);
  const MatrixXd f = Rng(2).normal_matrix(6, 2);
  EXPECT_NE(d.predict(p, f, 10).eps_positions, d.predict(p, f, 900).eps_positions);
}

TEST(Denoiser, ParameterGradientsMatchFiniteDifferences) {
  const DenoiserConfig c = tiny_denoiser(4, 2);
  Denoiser<double> d = random_denoiser(c, 1000, 6);
  const NeuralPointCloud pc{Rng(7).normal_matrix(4, 3), Rng(8).normal_matrix(4, 2)};
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  auto fn = [&](Tape<double>& tape) { return training_loss(tape, d, {pc, pc}, s, 42); };
  const auto r = grad_check_params(fn, d.params, 1e-5, 1e-5, 4);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

TEST(TrainingLoss, OracleGivesZero) {
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  const NeuralPointCloud pc{Rng(1).normal_matrix(5, 3), Rng(2).normal_matrix(5, 2)};
  const std::uint64_t seed = 77;
  std::size_t b = 0;
  const NoisePredictor oracle = [&](const MatrixXd&, const MatrixXd&, int t) {
    Rng rng(seed, detail::kTrainStream + b++);
    const TrainingDraw draw = draw_training_noise(rng, s, 5, 2);
    EXPECT_EQ(draw.t, t);
    return NoisePair{draw.eps_positions, draw.eps_features};
  };
  EXPECT_EQ(training_loss({pc, pc, pc}, s, oracle, seed), 0.0);
}

TEST(TrainingLoss, ZeroPredictorExpectsUnitLoss) {
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  const NeuralPointCloud pc{Rng(1).normal_matrix(4, 3), Rng(2).normal_matrix(4, 2)};
  const NoisePredictor zero = [](const MatrixXd& p, const MatrixXd& f, int) {
    return NoisePair{MatrixXd::Zero(p.rows(), p.cols()), MatrixXd::Zero(f.rows(), f.cols())};
  };
  const int n = 10000;
  std::vector<double> v(n);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = training_loss({pc}, s, zero, static_cast<std::uint64_t>(i));
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n - 1;
  EXPECT_LT(std::abs(mean - 1.0), 5.0 * std::sqrt(var / n));
}

TEST(TrainingLoss, DeterministicGivenSeed) {
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  Denoiser<double> d = random_denoiser(tiny_denoiser(), 1000, 9);
  const NeuralPointCloud pc{Rng(1).normal_matrix(6, 3), Rng(2).normal_matrix(6, 2)};
  EXPECT_EQ(training_loss({pc}, s, d.predictor(), 5), training_loss({pc}, s, d.predictor(), 5));
  Tape<double> tape;
  EXPECT_NEAR(training_loss(tape, d, {pc}, s, 5).scalar(), training_loss({pc}, s, d.predictor(), 5), 1e-12);
}

TEST(Ema, ClosedForms) {
  ParamStore<double> p;
  p.add("w", MatrixXd::Constant(2, 2, 3.0));
  ParamStore<double> e;
  e.add("w", MatrixXd::Constant(2, 2, -1.0));
  ParamStore<double> e0 = e;
  ema_update(e0, p, 0.0);
  EXPECT_EQ(e0.value("w"), p.value("w"));
  ParamStore<double> e1 = e;
  ema_update(e1, p, 1.0);
  EXPECT_EQ(e1.value("w"), e.value("w"));
  for (int k = 1; k <= 50; ++k) {
    ema_update(e, p, 0.9);
    EXPECT_NEAR(e.value("w")(0, 0), 3.0 + (-1.0 - 3.0) * std::pow(0.9, k), 1e-12);
  }
  ParamStore<double> other;
  other.add("v", MatrixXd::Zero(2, 2));
  EXPECT_THROW(ema_update(other, p, 0.5), DimensionError);
}

TEST(Training, ResumeDeterminismAndEmaDivergence) {
  const DenoiserConfig c = tiny_denoiser();
  DiffusionTrainConfig tc;
  tc.T = 100;
  tc.batch_size = 2;
  tc.ema_decay = 0.9;
  const std::vector<NeuralPointCloud> data{{Rng(1).normal_matrix(6, 3), Rng(2).normal_matrix(6, 2)},
                                           {Rng(3).normal_matrix(6, 3), Rng(4).normal_matrix(6, 2)}};
  auto full = init_diffusion<double>(c, tc, 1);
  train_diffusion_steps(full, data, tc, 10, 1);
  auto split = init_diffusion<double>(c, tc, 1);
  train_diffusion_steps(split, data, tc, 4, 1);
  train_diffusion_steps(split, data, tc, 6, 1);
  EXPECT_EQ(full.history, split.history);
  for (const auto& [name, e] : full.model.params.entries()) {
    EXPECT_EQ(e.value, split.model.params.value(name));
    EXPECT_EQ(full.ema.params.value(name), split.ema.params.value(name));
  }
  EXPECT_NE(full.model.params.value("out.weight"), full.ema.params.value("out.weight"));
}

TEST(Training, LossDecreasesOnFixedCloud) {
  const DenoiserConfig c = tiny_denoiser();
  DiffusionTrainConfig tc;
  tc.T = 100;
  tc.batch_size = 4;
  tc.lr = 3e-3;
  const std::vector<NeuralPointCloud> data{{Rng(1).normal_matrix(6, 3), Rng(2).normal_matrix(6, 2)}};
  auto st = train_diffusion<double>(data, c, [&] { auto t = tc; t.steps = 300; return t; }(), 2);
  const double first = std::accumulate(st.history.begin(), st.history.begin() + 50, 0.0) / 50.0;
  const double last = std::accumulate(st.history.end() - 50, st.history.end(), 0.0) / 50.0;
  EXPECT_LT(last, first);
}

TEST(Sampling, ReproducibleAndClipped) {
  const DenoiserConfig c = tiny_denoiser();
  Denoiser<double> d = random_denoiser(c, 50, 11);
  const NoiseSchedule s = linear_schedule(50, 1e-4, 0.2);
  const NeuralPointCloud ref{Rng(1).normal_matrix(6, 3), Rng(2).normal_matrix(6, 2)};
  const ClipBounds clip = compute_clip_bounds({ref});
  int calls = 0;
  std::vector<int> seen;
  const TrajectoryHook hook = [&](int t, const MatrixXd& p, const MatrixXd& f) {
    seen.push_back(t);
    if (t < 50) {
      EXPECT_EQ(clip.clip_positions(p), p);
      EXPECT_EQ(clip.clip_features(f), f);
    }
  };
  const NoisePredictor counted = [&](const MatrixXd& p, const MatrixXd& f, int t) {
    ++calls;
    return d.predict(p, f, t);
  };
  const auto a = sample_unconditional(counted, s, 6, 2, clip, 9, hook);
  const auto b = sample_unconditional(d.predictor(), s, 6, 2, clip, 9);
  const auto other = sample_unconditional(d.predictor(), s, 6, 2, clip, 10);
  EXPECT_EQ(a.positions, b.positions);
  EXPECT_EQ(a.features, b.features);
  EXPECT_NE(a.positions, other.positions);
  EXPECT_EQ(calls, 50);
  ASSERT_EQ(seen.size(), 51u);
  EXPECT_EQ(seen.front(), 50);
  EXPECT_EQ(seen.back(), 0);
}

TEST(Sampling, ClipBoundsJsonRoundTrip) {
  const ClipBounds b = compute_clip_bounds({{Rng(1).normal_matrix(6, 3), Rng(2).normal_matrix(6, 2)}});
  const ClipBounds r = clip_bounds_from_json(nlohmann::json::parse(clip_bounds_to_json(b).dump()));
  EXPECT_EQ(r.position_lo, b.position_lo);
  EXPECT_EQ(r.feature_hi, b.feature_hi);
  EXPECT_THROW(clip_bounds_from_json(nlohmann::json::object()), FormatError);
}

}  // namespace
}  // namespace npcd
