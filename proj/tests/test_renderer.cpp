// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

#include "npcd/core/grad_check.hpp"
#include "npcd/renderer.hpp"

namespace npcd {
namespace {

DecoderConfig small_decoder(int d = 4) {
  DecoderConfig c;
  c.feature_dim = d;
  c.aggregation_hidden = {8, 8};
  c.shading_feature_dim = 6;
  c.color_hidden = {8};
  c.density_hidden = {8};
  return c;
}

Camera axis_camera(int w, int h, double focal) {
  Camera c;
  c.focal = focal;
  c.width = w;
  c.height = h;
  c.principal_point = Eigen::Vector2d(w / 2.0, h / 2.0);
  c.near = 0.5;
  c.far = 3.0;
  c.translation = Eigen::Vector3d(0, 0, -2);
  return c;
}

TEST(Rays, PrincipalPixelLooksAlongAxis) {
  const Camera c = axis_camera(5, 5, 10.0);
  // Pixel (2, 2) has its centre at (2.5, 2.5) = principal point.
  const Ray r = camera_ray(c, 2, 2);
  EXPECT_NEAR((r.direction - Eigen::Vector3d::UnitZ()).norm(), 0.0, 1e-15);
}

TEST(Rays, OneFocalOffCentreIsFortyFiveDegrees) {
  Camera c = axis_camera(21, 1, 10.0);
  c.principal_point = Eigen::Vector2d(0.5, 0.5);
  const Ray r = camera_ray(c, 10, 0);  // centre x = 10.5, offset 10 = focal
  EXPECT_NEAR(std::acos(r.direction.dot(Eigen::Vector3d::UnitZ())), M_PI / 4.0, 1e-12);
}

TEST(Rays, AllDirectionsUnitNorm) {
  const Camera c = look_at(Eigen::Vector3d(1.0, 2.0, -1.5), Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitY(), 7.0, 9, 6,
                           0.5, 5.0);
  for (const auto& r : generate_rays(c)) EXPECT_NEAR(r.direction.norm(), 1.0, 1e-9);
}

TEST(Camera, JsonRoundTripAndValidation) {
  const Camera c = look_at(Eigen::Vector3d(0.3, -2.0, 1.0), Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitY(), 12.0, 8,
                           6, 1.0, 3.0);
  const auto back = cameras_from_json(nlohmann::json::parse(cameras_to_json({c}).dump()));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_LT((back[0].rotation - c.rotation).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(back[0].width, 8);
  Camera bad = c;
  bad.near = 4.0;
  EXPECT_THROW(bad.validate(), ArgumentError);
}

TEST(ShadingDepths, DeterministicMidpoints) {
  const auto s = sample_shading_depths(0.0, 1.0, 2, nullptr);
  EXPECT_EQ(s.depths, (std::vector<double>{0.25, 0.75}));
  EXPECT_EQ(s.deltas, (std::vector<double>{0.5, 0.25}));
}

TEST(ShadingDepths, StratifiedStrictlyIncreasingWithinRange) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto s = sample_shading_depths(0.7, 2.9, 16, &rng);
    for (std::size_t i = 0; i < s.depths.size(); ++i) {
      EXPECT_GE(s.depths[i], 0.7);
      EXPECT_LE(s.depths[i], 2.9);
      if (i > 0) EXPECT_GT(s.depths[i], s.depths[i - 1]);
    }
  }
}

TEST(Neighbors, CoincidentPointComesFirst) {
  const MatrixXd p = Rng(3).normal_matrix(12, 3);
  const NeighborIndex idx(p, 5.0);
  const auto nb = idx.query(p.row(7).transpose(), 3);
  ASSERT_FALSE(nb.empty());
  EXPECT_EQ(nb[0].index, 7);
  EXPECT_EQ(nb[0].distance, 0.0);
}

TEST(Neighbors, HandComputedOneDimensionalLayout) {
  MatrixXd p(3, 3);
  p << 0, 0, 0, 1, 0, 0, 5, 0, 0;
  const NeighborIndex idx(p, 2.0);
  const auto nb = idx.query(Eigen::Vector3d(0.4, 0, 0), 2);
  ASSERT_EQ(nb.size(), 2u);
  EXPECT_EQ(nb[0].index, 0);
  EXPECT_EQ(nb[1].index, 1);
  EXPECT_NEAR(nb[0].distance, 0.4, 1e-15);
  EXPECT_NEAR(nb[1].distance, 0.6, 1e-15);
}

TEST(Neighbors, RadiusSmallerThanAllDistancesIsEmpty) {
  MatrixXd p(2, 3);
  p << 0, 0, 0, 1, 0, 0;
  const NeighborIndex idx(p, 0.1);
  EXPECT_TRUE(idx.query(Eigen::Vector3d(0.5, 0, 0), 4).empty());
}

TEST(Neighbors, GridMatchesBruteForce) {
  Rng rng(77);
  const MatrixXd p = rng.normal_matrix(200, 3);
  const NeighborIndex idx(p, 0.45);
  for (int q = 0; q < 300; ++q) {
    const Eigen::Vector3d x(rng.normal() * 1.5, rng.normal() * 1.5, rng.normal() * 1.5);
    std::vector<std::pair<double, Eigen::Index>> all;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double d = (x - p.row(i).transpose()).norm();
      if (d <= 0.45) all.emplace_back(d, i);
    }
    std::sort(all.begin(), all.end());
    if (all.size() > 5) all.resize(5);
    const auto nb = idx.query(x, 5);
    ASSERT_EQ(nb.size(), all.size());
    for (std::size_t i = 0; i < nb.size(); ++i) EXPECT_EQ(nb[i].index, all[i].second);
  }
}

TEST(Aggregation, WeightsSumToOne) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<Neighbor> nb(1 + rng.index(8));
    for (auto& n : nb) n.distance = rng.uniform() * 0.3;
    if (t % 10 == 0) nb[0].distance = 0.0;
    const auto w = aggregation_weights(nb, 1e-8);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
    for (double v : w) EXPECT_TRUE(std::isfinite(v));
  }
}

// Decoder whose aggregation MLP copies the feature columns through.
Decoder<double> passthrough_decoder(int d) {
  DecoderConfig c;
  c.feature_dim = d;
  c.aggregation_hidden = {};
  c.shading_feature_dim = static_cast<std::size_t>(d);
  c.color_hidden = {4};
  c.density_hidden = {4};
  Decoder<double> dec = Decoder<double>::create(c, 1);
  MatrixXd w = MatrixXd::Zero(d + 3, d);
  w.topRows(d).setIdentity();
  dec.params.at(dec.aggregation.weight_name(0)).value = w;
  dec.params.at(dec.aggregation.bias_name(0)).value.setZero();
  return dec;
}

TEST(Aggregation, SingleNeighbourIgnoresDistance) {
  Decoder<double> dec = Decoder<double>::create(small_decoder(3), 2);
  NeuralPointCloud pc{Rng(1).normal_matrix(2, 3), Rng(2).normal_matrix(2, 3)};
  const Eigen::Vector3d off(0.1, -0.2, 0.05);
  const auto fq = aggregate_feature(pc, {{1, off.norm(), off}}, dec, 1e-8);
  Tape<double> tape;
  MatrixXd in(1, 6);
  in << pc.features.row(1), off.transpose();
  const MatrixXd direct = mlp_forward(dec.aggregation, dec.params, tape.constant(in)).value();
  EXPECT_LT((fq - direct).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Aggregation, InverseDistanceBlendByHand) {
  Decoder<double> dec = passthrough_decoder(2);
  NeuralPointCloud pc{MatrixXd::Zero(2, 3), MatrixXd(2, 2)};
  pc.features << 3.0, -1.0, 0.0, 6.0;
  const std::vector<Neighbor> nb{{0, 1.0, Eigen::Vector3d(1, 0, 0)}, {1, 2.0, Eigen::Vector3d(0, 2, 0)}};
  const auto fq = aggregate_feature(pc, nb, dec, 1e-8);
  EXPECT_NEAR(fq(0, 0), 2.0 / 3.0 * 3.0, 1e-14);
  EXPECT_NEAR(fq(0, 1), 2.0 / 3.0 * -1.0 + 1.0 / 3.0 * 6.0, 1e-14);
}

TEST(Aggregation, ZeroDistanceIsFinite) {
  Decoder<double> dec = passthrough_decoder(2);
  NeuralPointCloud pc{MatrixXd::Zero(2, 3), MatrixXd::Ones(2, 2)};
  const std::vector<Neighbor> nb{{0, 0.0, Eigen::Vector3d::Zero()}, {1, 0.5, Eigen::Vector3d(0.5, 0, 0)}};
  EXPECT_TRUE(aggregate_feature(pc, nb, dec, 1e-8).allFinite());
}

TEST(Radiance, NoNeighboursGivesBackgroundAndZeroDensity) {
  Decoder<double> dec = Decoder<double>::create(small_decoder(), 3);
  RenderConfig rc;
  rc.background = Eigen::Vector3d(0.2, 0.4, 0.6);
  const auto r = decode_radiance<double>(std::nullopt, dec, rc);
  EXPECT_EQ(r.color, rc.background);
  EXPECT_EQ(r.density, 0.0);
}

TEST(Radiance, ZeroLogitsGiveHalfGrey) {
  Decoder<double> dec = Decoder<double>::create(small_decoder(), 3);
  for (auto& [name, e] : dec.params.entries()) {
    if (name.rfind("color.l1", 0) == 0) e.value.setZero();
  }
  const auto r = decode_radiance<double>(MatrixXd(Rng(1).normal_matrix(1, 6)), dec, RenderConfig{});
  EXPECT_EQ(r.color, Eigen::Vector3d::Constant(0.5));
}

TEST(Radiance, DensityNonNegativeOnRandomInputs) {
  Decoder<double> dec = Decoder<double>::create(small_decoder(), 4);
  Tape<double> tape;
  auto [c, s] = decode(dec, tape.constant(Rng(9).normal_matrix(10000, 6) * 5.0));
  EXPECT_GE(s.value().minCoeff(), 0.0);
  EXPECT_GE(c.value().minCoeff(), 0.0);
  EXPECT_LE(c.value().maxCoeff(), 1.0);
}

TEST(Quadrature, ZeroDensityIsExactBackground) {
  const Eigen::Vector3d bg(0.3, 0.7, 0.1);
  std::vector<RadianceSample> s(5, {Eigen::Vector3d(0.9, 0.2, 0.4), 0.0, 0.1});
  EXPECT_EQ(integrate_ray(s, bg), bg);
}

TEST(Quadrature, LnTwoGivesEvenBlend) {
  const Eigen::Vector3d c(0.8, 0.2, 0.4);
  const Eigen::Vector3d bg(0.0, 1.0, 0.5);
  const auto px = integrate_ray({{c, std::log(2.0), 1.0}}, bg);
  EXPECT_LT((px - (0.5 * c + 0.5 * bg)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Quadrature, OpaqueFirstSample) {
  const Eigen::Vector3d c1(0.1, 0.2, 0.3);
  const auto px = integrate_ray({{c1, 1e6, 1.0}, {Eigen::Vector3d::Ones(), 5.0, 1.0}}, Eigen::Vector3d::Zero());
  EXPECT_EQ(px, c1);
}

TEST(Quadrature, WeightsPlusResidualSumToOne) {
  Rng rng(8);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> sig(1 + rng.index(64));
    std::vector<double> del(sig.size());
    for (std::size_t i = 0; i < sig.size(); ++i) {
      sig[i] = rng.uniform() < 0.3 ? 0.0 : -std::log(rng.uniform()) * 20.0;
      del[i] = rng.uniform() * 0.1;
    }
    const auto q = quadrature_weights(sig, del);
    const double total = std::accumulate(q.weights.begin(), q.weights.end(), 0.0) + q.residual_transmittance;
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Quadrature, CompositeMatchesScalarIntegrator) {
  Rng rng(12);
  const MatrixXd colors = (rng.normal_matrix(5, 3).array() * 0.2 + 0.5).matrix();
  const MatrixXd sig = rng.normal_matrix(5, 1).cwiseAbs() * 3.0;
  const std::vector<double> del{0.1, 0.2, 0.05, 0.3, 0.15};
  Tape<double> tape;
  const Eigen::Vector3d bg(1.0, 0.5, 0.0);
  const auto px = composite(tape.constant(colors), tape.constant(sig), {0, 2, 5}, del, bg).value();
  std::vector<RadianceSample> a;
  std::vector<RadianceSample> b;
  for (int i = 0; i < 5; ++i) (i < 2 ? a : b).push_back({colors.row(i).transpose(), sig(i, 0), del[i]});
  EXPECT_LT((px.row(0).transpose() - integrate_ray(a, bg)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((px.row(1).transpose() - integrate_ray(b, bg)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Quadrature, CompositeGradientMatchesFiniteDifferences) {
  Rng rng(13);
  const MatrixXd sig = rng.normal_matrix(6, 1).cwiseAbs() * 2.0 + MatrixXd::Constant(6, 1, 0.1);
  const std::vector<double> del{0.1, 0.2, 0.05, 0.3, 0.15, 0.2};
  const MatrixXd probe = rng.normal_matrix(2, 3);
  auto fn_c = [&](Tape<double>& t, Var<double> c) {
    return sum(mul(composite(c, t.constant(sig), {0, 3, 6}, del, Eigen::Vector3d(1, 1, 1)), t.constant(probe)));
  };
  EXPECT_TRUE(grad_check(fn_c, rng.normal_matrix(6, 3), 1e-6).passed);
  const MatrixXd colors = rng.normal_matrix(6, 3);
  auto fn_s = [&](Tape<double>& t, Var<double> s) {
    return sum(mul(composite(t.constant(colors), s, {0, 3, 6}, del, Eigen::Vector3d(1, 0.5, 0)), t.constant(probe)));
  };
  const auto r = grad_check(fn_s, sig, 1e-6);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

NeuralPointCloud two_point_cloud(int d) {
  MatrixXd p(2, 3);
  p << 0.05, -0.02, 0.0, -0.04, 0.03, 0.06;
  return {p, Rng(31).normal_matrix(2, d)};
}

TEST(RenderImage, EmptyDensitySceneIsBackground) {
  Decoder<double> dec = Decoder<double>::create(small_decoder(), 5);
  RenderConfig rc;
  rc.shading_points_per_ray = 16;
  rc.neighbor_radius = 0.2;
  rc.background = Eigen::Vector3d(0.25, 0.5, 0.75);
  // Cloud far outside the view frustum: no shading point finds a neighbour.
  NeuralPointCloud pc{MatrixXd::Constant(3, 3, 50.0), Rng(1).normal_matrix(3, 4)};
  const Image img = render_image(pc, dec, axis_camera(4, 4, 4.0), rc);
  for (Eigen::Index i = 0; i < img.pixel_count(); ++i) EXPECT_EQ(img.rgb.row(i), rc.background.transpose());
}

TEST(RenderImage, JointTranslationIsBitIdentical) {
  Decoder<double> dec = Decoder<double>::create(small_decoder(), 6);
  RenderConfig rc;
  rc.shading_points_per_ray = 32;
  rc.neighbor_radius = 0.3;
  NeuralPointCloud pc{MatrixXd(4, 3), Rng(2).normal_matrix(4, 4)};
  pc.positions << 0.125, 0.0, 0.0, -0.125, 0.0625, 0.0, 0.0, -0.125, 0.25, 0.0, 0.125, -0.0625;
  const Camera cam = axis_camera(6, 6, 6.0);
  const Image a = render_image(pc, dec, cam, rc);
  const Eigen::RowVector3d shift(2.0, -1.0, 4.0);
  NeuralPointCloud moved = pc;
  moved.positions.rowwise() += shift;
  Camera cam2 = cam;
  cam2.translation += shift.transpose();
  const Image b = render_image(moved, dec, cam2, rc);
  EXPECT_EQ(a.rgb, b.rgb);
  EXPECT_GT((a.rgb.array() != 1.0).count(), 0);
}

TEST(RenderImage, PointPermutationIsBitIdentical) {
  Decoder<double> dec = Decoder<double>::create(small_decoder(), 7);
  RenderConfig rc;
  rc.shading_points_per_ray = 32;
  rc.neighbor_radius = 0.4;
  NeuralPointCloud pc{Rng(3).normal_matrix(10, 3) * 0.2, Rng(4).normal_matrix(10, 4)};
  const Camera cam = axis_camera(5, 5, 5.0);
  const Image a = render_image(pc, dec, cam, rc);
  std::vector<Eigen::Index> perm{3, 7, 1, 0, 9, 2, 8, 4, 6, 5};
  NeuralPointCloud q = pc;
  for (Eigen::Index i = 0; i < 10; ++i) {
    q.positions.row(i) = pc.positions.row(perm[static_cast<std::size_t>(i)]);
    q.features.row(i) = pc.features.row(perm[static_cast<std::size_t>(i)]);
  }
  EXPECT_EQ(render_image(q, dec, cam, rc).rgb, a.rgb);
}

TEST(RenderImage, FeatureGradientOfMseMatchesFiniteDifferences) {
  Decoder<double> dec = Decoder<double>::create(small_decoder(), 8);
  RenderConfig rc;
  rc.shading_points_per_ray = 24;
  rc.neighbor_radius = 0.25;
  const NeuralPointCloud pc = two_point_cloud(4);
  const Camera cam = axis_camera(4, 4, 12.0);
  const NeighborIndex index(pc.positions, rc.neighbor_radius);
  const ShadingBatch batch = build_shading_batch(index, generate_rays(cam), rc, nullptr);
  ASSERT_GT(batch.shading_count(), 0);
  const MatrixXd target = (Rng(5).normal_matrix(16, 3).array() * 0.1 + 0.5).matrix();
  auto fn = [&](Tape<double>&, Var<double> f) { return mse(render_batch(dec, f, batch, rc), target); };
  const auto r = grad_check(fn, pc.features, 1e-4);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

TEST(RenderImage, DecoderGradientOfMseMatchesFiniteDifferences) {
  Decoder<double> dec = Decoder<double>::create(small_decoder(), 9);
  RenderConfig rc;
  rc.shading_points_per_ray = 16;
  rc.neighbor_radius = 0.25;
  const NeuralPointCloud pc = two_point_cloud(4);
  const NeighborIndex index(pc.positions, rc.neighbor_radius);
  const Camera cam = axis_camera(1, 1, 3.0);
  const ShadingBatch batch = build_shading_batch(index, generate_rays(cam), rc, nullptr);
  ASSERT_GT(batch.shading_count(), 0);
  const MatrixXd target = MatrixXd::Constant(1, 3, 0.3);
  auto fn = [&](Tape<double>& tape) { return mse(render_batch(dec, tape.constant(pc.features), batch, rc), target); };
  const auto r = grad_check_params(fn, dec.params, 1e-4);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

TEST(Image, PpmRoundTripQuantized) {
  Image img(3, 2);
  img.rgb = (Rng(1).normal_matrix(6, 3).array() * 0.3 + 0.5).matrix().cwiseMax(0.0).cwiseMin(1.0);
  const auto path = (std::filesystem::temp_directory_path() / "npcd_img.ppm").string();
  write_ppm(img, path);
  const Image back = read_ppm(path);
  EXPECT_EQ(back.rgb, quantize_8bit(img).rgb);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace npcd
