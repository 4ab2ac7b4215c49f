// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "npcd/metrics.hpp"

namespace npcd {
namespace {

MatrixXd points(std::initializer_list<std::array<double, 3>> rows) {
  MatrixXd m(static_cast<Eigen::Index>(rows.size()), 3);
  Eigen::Index i = 0;
  for (const auto& r : rows) m.row(i++) << r[0], r[1], r[2];
  return m;
}

double brute_force_emd(const MatrixXd& a, const MatrixXd& b) {
  std::vector<int> perm(static_cast<std::size_t>(a.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) s += (a.row(i) - b.row(perm[static_cast<std::size_t>(i)])).norm();
    best = std::min(best, s / static_cast<double>(a.rows()));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Leave-one-out nearest neighbour over the union, written out directly.
double brute_force_1nna(const std::vector<MatrixXd>& g, const std::vector<MatrixXd>& r, bool use_emd) {
  std::vector<std::pair<MatrixXd, int>> all;
  for (const auto& x : g) all.emplace_back(x, 0);
  for (const auto& x : r) all.emplace_back(x, 1);
  int correct = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int label = -1;
    for (std::size_t j = 0; j < all.size(); ++j) {
      if (i == j) continue;
      const MatrixXd& a = all[i].first;
      const MatrixXd& b = all[j].first;
      double d = 0.0;
      if (use_emd) {
        d = brute_force_emd(a, b);
      } else {
        for (Eigen::Index p = 0; p < a.rows(); ++p) d += ((b.rowwise() - a.row(p)).rowwise().squaredNorm()).minCoeff() / a.rows();
        for (Eigen::Index q = 0; q < b.rows(); ++q) d += ((a.rowwise() - b.row(q)).rowwise().squaredNorm()).minCoeff() / b.rows();
      }
      if (d < best) {
        best = d;
        label = all[j].second;
      }
    }
    if (label == all[i].second) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(all.size());
}

TEST(Chamfer, HandValues) {
  EXPECT_EQ(chamfer(points({{0, 0, 0}}), points({{1, 0, 0}})), 2.0);
  const MatrixXd a = Rng(1).normal_matrix(7, 3);
  EXPECT_EQ(chamfer(a, a), 0.0);
  const MatrixXd b = Rng(2).normal_matrix(5, 3);
  EXPECT_EQ(chamfer(a, b), chamfer(b, a));
  EXPECT_THROW(chamfer(MatrixXd(0, 3), a), ArgumentError);
}

TEST(Chamfer, PermutationInvariant) {
  const MatrixXd a = Rng(3).normal_matrix(6, 3);
  const MatrixXd b = Rng(4).normal_matrix(6, 3);
  const MatrixXd a_rev = a.colwise().reverse();
  EXPECT_NEAR(chamfer(a_rev, b), chamfer(a, b), 1e-15);
}

TEST(Emd, CrossingMatching) {
  EXPECT_EQ(emd(points({{0, 0, 0}, {2, 0, 0}}), points({{2, 0, 0}, {0, 0, 0}})), 0.0);
  EXPECT_THROW(emd(points({{0, 0, 0}}), points({{0, 0, 0}, {1, 0, 0}})), ArgumentError);
  EXPECT_THROW(emd(MatrixXd::Zero(257, 3), MatrixXd::Zero(257, 3)), CapabilityError);
}

TEST(Emd, MatchesFactorialBruteForce) {
  Rng rng(5);
  for (int n = 1; n <= 6; ++n) {
    for (int trial = 0; trial < 20; ++trial) {
      const MatrixXd a = rng.normal_matrix(n, 3);
      const MatrixXd b = rng.normal_matrix(n, 3);
      EXPECT_NEAR(emd(a, b), brute_force_emd(a, b), 1e-12) << "n=" << n;
    }
  }
}

TEST(Emd, AssignmentIsPermutation) {
  const MatrixXd cost = Rng(6).normal_matrix(9, 9).cwiseAbs();
  auto assign = solve_assignment(cost);
  std::sort(assign.begin(), assign.end());
  for (Eigen::Index i = 0; i < 9; ++i) EXPECT_EQ(assign[static_cast<std::size_t>(i)], i);
}

TEST(OneNna, SeparatedPairIsZero) {
  const MatrixXd g = points({{0, 0, 0}, {0.1, 0, 0}});
  const MatrixXd r = points({{10, 0, 0}, {10.1, 0, 0}});
  EXPECT_EQ(one_nn_accuracy({g}, {r}, SetDistance::kChamfer), 0.0);
}

TEST(OneNna, TwinMatchingIsZero) {
  Rng rng(7);
  std::vector<MatrixXd> g;
  for (int i = 0; i < 4; ++i) g.push_back(rng.normal_matrix(5, 3));
  EXPECT_EQ(one_nn_accuracy(g, g, SetDistance::kChamfer), 0.0);
  EXPECT_EQ(one_nn_accuracy(g, g, SetDistance::kEmd), 0.0);
  EXPECT_EQ(brute_force_1nna(g, g, false), 0.0);
}

TEST(OneNna, MatchesBruteForceOnSmallLists) {
  Rng rng(8);
  for (int ng = 1; ng <= 4; ++ng) {
    for (int nr = 1; nr <= 4; ++nr) {
      std::vector<MatrixXd> g;
      std::vector<MatrixXd> r;
      for (int i = 0; i < ng; ++i) g.push_back(rng.normal_matrix(4, 3));
      for (int i = 0; i < nr; ++i) r.push_back((rng.normal_matrix(4, 3).array() + 0.5 * (i % 2)).matrix());
      for (bool use_emd : {false, true}) {
        const double v = one_nn_accuracy(g, r, use_emd ? SetDistance::kEmd : SetDistance::kChamfer);
        EXPECT_NEAR(v, brute_force_1nna(g, r, use_emd), 1e-15) << ng << " " << nr << " " << use_emd;
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(OneNna, EmptyListRejected) {
  EXPECT_THROW(one_nn_accuracy({}, {MatrixXd::Zero(1, 3)}, SetDistance::kChamfer), ArgumentError);
}

TEST(Psnr, ClosedForms) {
  Image a(2, 2);
  a.rgb.setConstant(0.5);
  Image b = a;
  EXPECT_TRUE(std::isinf(psnr(a, b)));
  b.rgb.array() += 0.1;
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
  EXPECT_EQ(psnr(a, b), psnr(b, a));
  EXPECT_THROW(psnr(a, Image(3, 2)), ArgumentError);
}

TEST(Retrieval, HandOrdering) {
  Image q(1, 1);
  q.rgb << 0.5, 0.5, 0.5;
  Image c0(1, 1);
  c0.rgb << 0.0, 0.0, 0.0;
  Image c1(1, 1);
  c1.rgb << 0.6, 0.5, 0.5;
  Image c2(1, 1);
  c2.rgb << 0.5, 0.3, 0.5;
  std::string id;
  EXPECT_EQ(pixel_retrieval(q, {{"a", c0}, {"b", c1}, {"c", c2}}, &id), 1u);
  EXPECT_EQ(id, "b");
  EXPECT_EQ(pixel_retrieval(q, {{"only", c0}}, &id), 0u);
  EXPECT_EQ(pixel_retrieval(c2, {{"a", c0}, {"b", c1}, {"c", c2}}), 2u);
  EXPECT_EQ(pixel_retrieval(q, {{"x", c1}, {"y", c1}}), 0u);
  EXPECT_THROW(pixel_retrieval(q, {}), ArgumentError);
}

TEST(Report, InfiniteValueSerialized) {
  MetricReport r{"psnr", std::numeric_limits<double>::infinity(), 1, 1, "psnr:db"};
  const auto j = r.to_json();
  EXPECT_TRUE(j.at("infinite").get<bool>());
}

}  // namespace
}  // namespace npcd
