// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "npcd/core/ops.hpp"
#include "npcd/core/param_store.hpp"
#include "npcd/core/random.hpp"

namespace npcd {

enum class Activation { kLinear, kLeakyRelu };

/// Fully connected stack: input -> hidden... -> output. Hidden layers use
/// `hidden_activation`; the output layer is always linear.
struct MlpSpec {
  std::string name;
  std::size_t input_width = 1;
  std::vector<std::size_t> hidden;
  std::size_t output_width = 1;
  Activation hidden_activation = Activation::kLeakyRelu;
  double negative_slope = 0.01;

  [[nodiscard]] std::size_t layer_count() const { return hidden.size() + 1; }
  [[nodiscard]] std::size_t layer_in(std::size_t l) const { return l == 0 ? input_width : hidden[l - 1]; }
  [[nodiscard]] std::size_t layer_out(std::size_t l) const { return l == hidden.size() ? output_width : hidden[l]; }
  [[nodiscard]] std::string weight_name(std::size_t l) const { return name + ".l" + std::to_string(l) + ".weight"; }
  [[nodiscard]] std::string bias_name(std::size_t l) const { return name + ".l" + std::to_string(l) + ".bias"; }

  void validate() const {
    if (name.empty()) throw ConfigError("mlp spec needs a name");
    if (input_width == 0 || output_width == 0) throw ConfigError("mlp " + name + ": widths must be positive");
    for (auto h : hidden) {
      if (h == 0) throw ConfigError("mlp " + name + ": widths must be positive");
    }
  }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
template <typename Real>
void init_mlp(const MlpSpec& spec, ParamStore<Real>& store, Rng& rng) {
  spec.validate();
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const auto in = static_cast<Eigen::Index>(spec.layer_in(l));
    const auto out = static_cast<Eigen::Index>(spec.layer_out(l));
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Matrix<Real> w(in, out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Real>((2.0 * rng.uniform() - 1.0) * bound);
    Matrix<Real> b(1, out);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<Real>((2.0 * rng.uniform() - 1.0) * bound);
    store.add(spec.weight_name(l), std::move(w));
    store.add(spec.bias_name(l), std::move(b), {static_cast<std::uint32_t>(out)});
  }
}

/// Evaluates the MLP row-wise on `input` (N x input_width).
template <typename Real>
Var<Real> mlp_forward(const MlpSpec& spec, ParamStore<Real>& store, Var<Real> input) {
  if (static_cast<std::size_t>(input.cols()) != spec.input_width) {
    throw DimensionError("mlp " + spec.name + " layer 0: expected input width " + std::to_string(spec.input_width) +
                         ", got " + std::to_string(input.cols()));
  }
  Tape<Real>& tape = *input.tape();
  Var<Real> x = input;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    Var<Real> w = store.var(tape, spec.weight_name(l));
    Var<Real> b = store.var(tape, spec.bias_name(l));
    if (static_cast<std::size_t>(w.rows()) != spec.layer_in(l) || static_cast<std::size_t>(w.cols()) != spec.layer_out(l)) {
      throw DimensionError("mlp " + spec.name + " layer " + std::to_string(l) + ": stored weight has wrong shape");
    }
    x = add_row(matmul(x, w), b);
    if (l + 1 < spec.layer_count() && spec.hidden_activation == Activation::kLeakyRelu) {
      x = leaky_relu(x, static_cast<Real>(spec.negative_slope));
    }
  }
  return x;
}

}  // namespace npcd
