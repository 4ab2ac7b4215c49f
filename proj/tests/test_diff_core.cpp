// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "npcd/core/grad_check.hpp"
#include "npcd/core/mlp.hpp"

namespace npcd {
namespace {

MlpSpec linear_spec(std::size_t in, std::size_t out) {
  MlpSpec s;
  s.name = "lin";
  s.input_width = in;
  s.output_width = out;
  s.hidden_activation = Activation::kLinear;
  return s;
}

TEST(Mlp, IdentityWeightsReturnInput) {
  MlpSpec s = linear_spec(3, 3);
  ParamStore<double> store;
  store.add(s.weight_name(0), MatrixXd::Identity(3, 3));
  store.add(s.bias_name(0), MatrixXd::Zero(1, 3), {3});
  Tape<double> tape;
  MatrixXd x(2, 3);
  x << 1.5, -2.0, 0.25, 3.0, 4.0, -5.0;
  EXPECT_EQ(mlp_forward(s, store, tape.constant(x)).value(), x);
}

TEST(Mlp, SingleLinearLayerDoubles) {
  MlpSpec s = linear_spec(1, 1);
  ParamStore<double> store;
  store.add(s.weight_name(0), MatrixXd::Constant(1, 1, 2.0));
  store.add(s.bias_name(0), MatrixXd::Zero(1, 1), {1});
  Tape<double> tape;
  EXPECT_EQ(mlp_forward(s, store, tape.constant(MatrixXd::Constant(1, 1, 3.0))).scalar(), 6.0);
}

TEST(Mlp, WrongInputWidthNamesLayer) {
  MlpSpec s = linear_spec(4, 2);
  ParamStore<double> store;
  Rng rng(1);
  init_mlp(s, store, rng);
  Tape<double> tape;
  try {
    mlp_forward(s, store, tape.constant(MatrixXd::Zero(1, 3)));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
}

TEST(Mlp, InputGradientMatchesFiniteDifferences) {
  MlpSpec s;
  s.name = "net";
  s.input_width = 4;
  s.hidden = {6};
  s.output_width = 3;
  ParamStore<double> store;
  Rng rng(7);
  init_mlp(s, store, rng);
  const MatrixXd probe = Rng(8).normal_matrix(3, 3);
  auto fn = [&](Tape<double>&, Var<double> x) {
    Var<double> y = mlp_forward(s, store, x);
    return sum(mul(y, x.tape()->constant(probe)));
  };
  const auto report = grad_check(fn, Rng(9).normal_matrix(3, 4), 1e-6);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(Mlp, ParameterGradientsMatchFiniteDifferences) {
  MlpSpec s;
  s.name = "net";
  s.input_width = 3;
  s.hidden = {5, 4};
  s.output_width = 2;
  ParamStore<double> store;
  Rng rng(3);
  init_mlp(s, store, rng);
  const MatrixXd x = Rng(4).normal_matrix(5, 3);
  auto fn = [&](Tape<double>& tape) { return sum(square(mlp_forward(s, store, tape.constant(x)))); };
  const auto report = grad_check_params(fn, store, 1e-6);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(Mlp, ForwardIsDeterministic) {
  MlpSpec s;
  s.name = "net";
  s.input_width = 3;
  s.hidden = {8};
  s.output_width = 2;
  auto run = [&] {
    ParamStore<double> store;
    Rng rng(11);
    init_mlp(s, store, rng);
    Tape<double> tape;
    return mlp_forward(s, store, tape.constant(Rng(12).normal_matrix(4, 3))).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, ConstantLossGivesZeroGradients) {
  ParamStore<double> store;
  store.add("w", MatrixXd::Constant(2, 2, 1.5));
  Tape<double> tape;
  Var<double> w = store.var(tape, "w");
  (void)w;
  Var<double> c = tape.constant(MatrixXd::Constant(1, 1, 4.0));
  tape.backward(c);
  EXPECT_TRUE(store.at("w").grad.isZero(0.0));
}

TEST(Backward, BilinearFormGradientIsExact) {
  ParamStore<double> store;
  MatrixXd x(1, 4);
  x << 0.5, -1.25, 3.0, 7.75;
  store.add("w", MatrixXd::Constant(1, 4, 0.3));
  Tape<double> tape;
  tape.backward(sum(mul(store.var(tape, "w"), tape.constant(x))));
  EXPECT_EQ(store.at("w").grad, x);
}

TEST(Backward, BeforeForwardIsStateError) {
  Tape<double> tape;
  EXPECT_THROW(tape.backward(Var<double>()), StateError);
}

TEST(Backward, AccumulationIsAdditive) {
  auto grads = [](int repeats) {
    ParamStore<double> store;
    store.add("w", Rng(2).normal_matrix(3, 2));
    const MatrixXd x = Rng(3).normal_matrix(4, 3);
    for (int r = 0; r < repeats; ++r) {
      Tape<double> tape;
      tape.backward(sum(square(matmul(tape.constant(x), store.var(tape, "w")))));
    }
    return MatrixXd(store.at("w").grad);
  };
  const MatrixXd once = grads(1);
  const MatrixXd twice = grads(2);
  EXPECT_TRUE(twice.isApprox(2.0 * once, 1e-15));
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParamStore<double> store;
  const MatrixXd w0 = Rng(5).normal_matrix(3, 3);
  store.add("w", w0);
  store.adam_step({});
  EXPECT_EQ(store.value("w"), w0);
}

TEST(Adam, FirstStepClosedForm) {
  ParamStore<double> store;
  store.add("p", MatrixXd::Zero(1, 1));
  store.at("p").grad(0, 0) = 1.0;
  AdamOptions opt;
  opt.lr = 1e-3;
  store.adam_step(opt);
  // m_hat = 1, v_hat = 1 after bias correction.
  EXPECT_NEAR(store.value("p")(0, 0), -1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_TRUE(store.at("p").grad.isZero(0.0));
}

TEST(Adam, HundredConstantStepsDescendByPointOne) {
  ParamStore<double> store;
  store.add("p", MatrixXd::Zero(1, 1));
  double m = 0.0;
  double v = 0.0;
  double oracle = 0.0;
  double prev = 0.0;
  for (int k = 1; k <= 100; ++k) {
    store.at("p").grad(0, 0) = 1.0;
    store.adam_step({});
    m = 0.9 * m + 0.1;
    v = 0.999 * v + 0.001;
    oracle -= 1e-3 * (m / (1.0 - std::pow(0.9, k))) / (std::sqrt(v / (1.0 - std::pow(0.999, k))) + 1e-8);
    EXPECT_LT(store.value("p")(0, 0), prev);
    prev = store.value("p")(0, 0);
  }
  EXPECT_NEAR(store.value("p")(0, 0), oracle, 1e-12);
  EXPECT_NEAR(store.value("p")(0, 0), -0.1, 1e-6);
}

TEST(Adam, NonPositiveLearningRateIsConfigError) {
  ParamStore<double> store;
  store.add("p", MatrixXd::Zero(1, 1));
  AdamOptions opt;
  opt.lr = 0.0;
  EXPECT_THROW(store.adam_step(opt), ConfigError);
  opt.lr = -1.0;
  EXPECT_THROW(store.adam_step(opt), ConfigError);
}

TEST(GradCheck, SquareAtThree) {
  auto fn = [](Tape<double>&, Var<double> x) { return sum(square(x)); };
  Tape<double> tape;
  Var<double> x = tape.leaf(MatrixXd::Constant(1, 1, 3.0));
  tape.backward(fn(tape, x));
  EXPECT_EQ(x.grad()(0, 0), 6.0);
  const auto report = grad_check(fn, MatrixXd::Constant(1, 1, 3.0), 1e-8);
  EXPECT_TRUE(report.passed);
  EXPECT_LT(report.max_relative_error, 1e-9);
}

TEST(GradCheck, ElementwiseOpsMatchFiniteDifferences) {
  const MatrixXd point = Rng(21).normal_matrix(3, 4);
  const MatrixXd other = Rng(22).normal_matrix(4, 4);
  const std::vector<std::pair<const char*, ScalarFn>> cases = {
      {"sigmoid", [](Tape<double>&, Var<double> x) { return sum(sigmoid(x)); }},
      {"softplus", [](Tape<double>&, Var<double> x) { return sum(softplus(x)); }},
      {"exp", [](Tape<double>&, Var<double> x) { return sum(exp(scale(x, 0.5))); }},
      {"gelu", [](Tape<double>&, Var<double> x) { return sum(gelu(x)); }},
      {"softmax", [&](Tape<double>& t, Var<double> x) {
         return sum(mul(softmax_rows(x), t.constant(other.topRows(3))));
       }},
      {"layer_norm", [&](Tape<double>& t, Var<double> x) {
         Var<double> y = layer_norm(x, t.constant(MatrixXd::Constant(1, 4, 1.3)), t.constant(MatrixXd::Constant(1, 4, 0.2)));
         return sum(mul(y, t.constant(other.topRows(3))));
       }},
      {"matmul_nt", [&](Tape<double>& t, Var<double> x) { return sum(square(matmul_nt(x, t.constant(other)))); }},
      {"concat_slice", [](Tape<double>&, Var<double> x) {
         return sum(square(concat_cols(slice_cols(x, 1, 2), slice_rows(x, 0, 3))));
       }},
      {"gather", [](Tape<double>&, Var<double> x) { return sum(square(gather_rows(x, {2, 0, 2, 1}))); }},
      {"segment", [](Tape<double>&, Var<double> x) {
         return sum(square(segment_weighted_sum(x, {0, 1, 3}, {0.5, 2.0, -1.0})));
       }},
  };
  for (const auto& [name, fn] : cases) {
    const auto report = grad_check(fn, point, 1e-6);
    EXPECT_TRUE(report.passed) << name << ": " << report.max_relative_error;
  }
}

TEST(ParamStore, CheckpointRoundTripWithMoments) {
  ParamStore<float> store;
  store.add("a", Rng(1).normal_matrix<float>(2, 3));
  store.add("b", Rng(2).normal_matrix<float>(1, 4), {4});
  store.at("a").grad.setOnes();
  store.adam_step({});
  const auto path = (std::filesystem::temp_directory_path() / "npcd_params_roundtrip.bin").string();
  save_params(store, path, true);
  const auto loaded = load_params<float>(path);
  ASSERT_TRUE(loaded.same_structure(store));
  EXPECT_EQ(loaded.step_count(), 1u);
  EXPECT_EQ(loaded.value("a"), store.value("a"));
  EXPECT_EQ(loaded.at("a").m, store.at("a").m);
  EXPECT_EQ(loaded.at("a").v, store.at("a").v);
  EXPECT_EQ(loaded.at("b").shape, std::vector<std::uint32_t>{4});
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "NPCDPARM");
  std::filesystem::remove(path);
}

TEST(ParamStore, TruncatedCheckpointIsFormatError) {
  ParamStore<float> store;
  store.add("a", Rng(1).normal_matrix<float>(4, 4));
  const auto path = (std::filesystem::temp_directory_path() / "npcd_params_trunc.bin").string();
  save_params(store, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
  EXPECT_THROW(load_params<float>(path), FormatError);
  std::filesystem::remove(path);
}

TEST(ParamStore, EmaUpdateInterpolates) {
  ParamStore<double> ema;
  ParamStore<double> p;
  ema.add("w", MatrixXd::Zero(1, 2));
  p.add("w", MatrixXd::Constant(1, 2, 4.0));
  ema_update(ema, p, 0.75);
  EXPECT_EQ(ema.value("w"), MatrixXd::Constant(1, 2, 1.0));
}

TEST(ParamStore, FrozenStoreRecordsConstants) {
  ParamStore<double> store;
  store.add("w", MatrixXd::Constant(1, 1, 2.0));
  store.set_frozen(true);
  Tape<double> tape;
  Var<double> w = store.var(tape, "w");
  EXPECT_FALSE(w.requires_grad());
}

}  // namespace
}  // namespace npcd
