// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations recorded on a Tape.
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "npcd/core/tape.hpp"

namespace npcd {

namespace detail {

template <typename Real>
void require_same_shape(const Var<Real>& a, const Var<Real>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

template <typename Real>
Real softplus(Real x) {
  return x > Real(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename Real>
Real sigmoid(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

}  // namespace detail

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                         std::to_string(b.rows()) + " differ");
  }
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape<Real>& tape, std::size_t self) {
    const auto& g = tape.out_grad(self);
    if (tape.wants(a)) tape.grad_buffer(a).noalias() += g * b.value().transpose();
    if (tape.wants(b)) tape.grad_buffer(b).noalias() += a.value().transpose() * g;
  });
}

/// a * b^T
template <typename Real>
Var<Real> matmul_nt(Var<Real> a, Var<Real> b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt: column counts differ");
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value() * b.value().transpose();
  return t.record(std::move(out), {a, b}, [a, b](Tape<Real>& tape, std::size_t self) {
    const auto& g = tape.out_grad(self);
    if (tape.wants(a)) tape.grad_buffer(a).noalias() += g * b.value();
    if (tape.wants(b)) tape.grad_buffer(b).noalias() += g.transpose() * a.value();
  });
}

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  detail::require_same_shape(a, b, "add");
  Tape<Real>& t = *a.tape();
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape<Real>& tape, std::size_t self) {
    const auto& g = tape.out_grad(self);
    if (tape.wants(a)) tape.grad_buffer(a) += g;
    if (tape.wants(b)) tape.grad_buffer(b) += g;
  });
}

template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
  detail::require_same_shape(a, b, "sub");
  Tape<Real>& t = *a.tape();
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape<Real>& tape, std::size_t self) {
    const auto& g = tape.out_grad(self);
    if (tape.wants(a)) tape.grad_buffer(a) += g;
    if (tape.wants(b)) tape.grad_buffer(b) -= g;
  });
}

/// Elementwise product.
template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  detail::require_same_shape(a, b, "mul");
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value().cwiseProduct(b.value());
  return t.record(std::move(out), {a, b}, [a, b](Tape<Real>& tape, std::size_t self) {
    const auto& g = tape.out_grad(self);
    if (tape.wants(a)) tape.grad_buffer(a) += g.cwiseProduct(b.value());
    if (tape.wants(b)) tape.grad_buffer(b) += g.cwiseProduct(a.value());
  });
}

template <typename Real>
Var<Real> scale(Var<Real> a, Real s) {
  Tape<Real>& t = *a.tape();
  return t.record(a.value() * s, {a}, [a, s](Tape<Real>& tape, std::size_t self) {
    tape.grad_buffer(a) += tape.out_grad(self) * s;
  });
}

template <typename Real>
Var<Real> add_scalar(Var<Real> a, Real s) {
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value().array() + s;
  return t.record(std::move(out), {a}, [a](Tape<Real>& tape, std::size_t self) {
    tape.grad_buffer(a) += tape.out_grad(self);
  });
}

/// Adds a 1xN row vector to every row of an MxN matrix.
template <typename Real>
Var<Real> add_row(Var<Real> a, Var<Real> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: bias must be 1xN");
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape<Real>& tape, std::size_t self) {
    const auto& g = tape.out_grad(self);
    if (tape.wants(a)) tape.grad_buffer(a) += g;
    if (tape.wants(row)) tape.grad_buffer(row) += g.colwise().sum();
  });
}

/// Multiplies row r of `a` by the constant weights[r].
template <typename Real>
Var<Real> scale_rows(Var<Real> a, const Matrix<Real>& weights) {
  if (weights.size() != a.rows()) throw DimensionError("scale_rows: one weight per row required");
  Tape<Real>& t = *a.tape();
  Eigen::Matrix<Real, Eigen::Dynamic, 1> w = Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>>(
      weights.data(), weights.size());
  Matrix<Real> out = w.asDiagonal() * a.value();
  return t.record(std::move(out), {a}, [a, w](Tape<Real>& tape, std::size_t self) {
    tape.grad_buffer(a) += w.asDiagonal() * tape.out_grad(self);
  });
}

template <typename Real>
Var<Real> leaky_relu(Var<Real> a, Real negative_slope) {
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value().unaryExpr([negative_slope](Real x) { return x > Real(0) ? x : x * negative_slope; });
  return t.record(std::move(out), {a}, [a, negative_slope](Tape<Real>& tape, std::size_t self) {
    const auto& g = tape.out_grad(self);
    tape.grad_buffer(a) += g.binaryExpr(a.value(), [negative_slope](Real gi, Real x) {
      return x > Real(0) ? gi : gi * negative_slope;
    });
  });
}

template <typename Real>
Var<Real> sigmoid(Var<Real> a) {
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value().unaryExpr([](Real x) { return detail::sigmoid(x); });
  return t.record(std::move(out), {a}, [a](Tape<Real>& tape, std::size_t self) {
    const auto& y = tape.value(self);
    tape.grad_buffer(a) += tape.out_grad(self).cwiseProduct(y.cwiseProduct((Real(1) - y.array()).matrix()));
  });
}

template <typename Real>
Var<Real> softplus(Var<Real> a) {
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value().unaryExpr([](Real x) { return detail::softplus(x); });
  return t.record(std::move(out), {a}, [a](Tape<Real>& tape, std::size_t self) {
    tape.grad_buffer(a) +=
        tape.out_grad(self).binaryExpr(a.value(), [](Real gi, Real x) { return gi * detail::sigmoid(x); });
  });
}

template <typename Real>
Var<Real> exp(Var<Real> a) {
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value().array().exp();
  return t.record(std::move(out), {a}, [a](Tape<Real>& tape, std::size_t self) {
    tape.grad_buffer(a) += tape.out_grad(self).cwiseProduct(tape.value(self));
  });
}

template <typename Real>
Var<Real> square(Var<Real> a) {
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value().array().square();
  return t.record(std::move(out), {a}, [a](Tape<Real>& tape, std::size_t self) {
    tape.grad_buffer(a) += Real(2) * tape.out_grad(self).cwiseProduct(a.value());
  });
}

/// |x| with subgradient 0 at x = 0.
template <typename Real>
Var<Real> abs(Var<Real> a) {
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value().cwiseAbs();
  return t.record(std::move(out), {a}, [a](Tape<Real>& tape, std::size_t self) {
    tape.grad_buffer(a) += tape.out_grad(self).binaryExpr(a.value(), [](Real gi, Real x) {
      return x > Real(0) ? gi : (x < Real(0) ? -gi : Real(0));
    });
  });
}

/// Tanh-approximated GELU.
template <typename Real>
Var<Real> gelu(Var<Real> a) {
  Tape<Real>& t = *a.tape();
  constexpr Real k = Real(0.7978845608028654);  // sqrt(2/pi)
  constexpr Real c = Real(0.044715);
  Matrix<Real> out = a.value().unaryExpr([](Real x) {
    return Real(0.5) * x * (Real(1) + std::tanh(k * (x + c * x * x * x)));
  });
  return t.record(std::move(out), {a}, [a](Tape<Real>& tape, std::size_t self) {
    tape.grad_buffer(a) += tape.out_grad(self).binaryExpr(a.value(), [](Real gi, Real x) {
      const Real u = k * (x + c * x * x * x);
      const Real th = std::tanh(u);
      const Real du = k * (Real(1) + Real(3) * c * x * x);
      return gi * (Real(0.5) * (Real(1) + th) + Real(0.5) * x * (Real(1) - th * th) * du);
    });
  });
}

template <typename Real>
Var<Real> sum(Var<Real> a) {
  Tape<Real>& t = *a.tape();
  Matrix<Real> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a}, [a](Tape<Real>& tape, std::size_t self) {
    tape.grad_buffer(a).array() += tape.out_grad(self)(0, 0);
  });
}

template <typename Real>
Var<Real> mean(Var<Real> a) {
  if (a.value().size() == 0) throw DimensionError("mean: empty input");
  return scale(sum(a), Real(1) / static_cast<Real>(a.value().size()));
}

/// Mean squared error against a constant target.
template <typename Real>
Var<Real> mse(Var<Real> a, const Matrix<Real>& target) {
  if (a.rows() != target.rows() || a.cols() != target.cols()) throw DimensionError("mse: target shape mismatch");
  Tape<Real>& t = *a.tape();
  return mean(square(sub(a, t.constant(target))));
}

/// out[r] = a[indices[r]]
template <typename Real>
Var<Real> gather_rows(Var<Real> a, std::vector<Eigen::Index> indices) {
  Tape<Real>& t = *a.tape();
  const auto& v = a.value();
  Matrix<Real> out(static_cast<Eigen::Index>(indices.size()), v.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] < 0 || indices[r] >= v.rows()) throw DimensionError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(r)) = v.row(indices[r]);
  }
  return t.record(std::move(out), {a}, [a, idx = std::move(indices)](Tape<Real>& tape, std::size_t self) {
    const auto& g = tape.out_grad(self);
    auto& ga = tape.grad_buffer(a);
    for (std::size_t r = 0; r < idx.size(); ++r) ga.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

template <typename Real>
Var<Real> concat_cols(Var<Real> a, Var<Real> b) {
  if (a.rows() != b.rows()) throw DimensionError("concat_cols: row counts differ");
  Tape<Real>& t = *a.tape();
  Matrix<Real> out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a.value();
  out.rightCols(b.cols()) = b.value();
  const Eigen::Index ac = a.cols();
  const Eigen::Index bc = b.cols();
  return t.record(std::move(out), {a, b}, [a, b, ac, bc](Tape<Real>& tape, std::size_t self) {
    const auto& g = tape.out_grad(self);
    if (tape.wants(a)) tape.grad_buffer(a) += g.leftCols(ac);
    if (tape.wants(b)) tape.grad_buffer(b) += g.rightCols(bc);
  });
}

template <typename Real>
Var<Real> concat_rows(Var<Real> a, Var<Real> b) {
  if (a.cols() != b.cols()) throw DimensionError("concat_rows: column counts differ");
  Tape<Real>& t = *a.tape();
  Matrix<Real> out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a.value();
  out.bottomRows(b.rows()) = b.value();
  const Eigen::Index ar = a.rows();
  const Eigen::Index br = b.rows();
  return t.record(std::move(out), {a, b}, [a, b, ar, br](Tape<Real>& tape, std::size_t self) {
    const auto& g = tape.out_grad(self);
    if (tape.wants(a)) tape.grad_buffer(a) += g.topRows(ar);
    if (tape.wants(b)) tape.grad_buffer(b) += g.bottomRows(br);
  });
}

template <typename Real>
Var<Real> slice_cols(Var<Real> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw DimensionError("slice_cols: out of range");
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value().middleCols(start, count);
  return t.record(std::move(out), {a}, [a, start, count](Tape<Real>& tape, std::size_t self) {
    tape.grad_buffer(a).middleCols(start, count) += tape.out_grad(self);
  });
}

template <typename Real>
Var<Real> slice_rows(Var<Real> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw DimensionError("slice_rows: out of range");
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value().middleRows(start, count);
  return t.record(std::move(out), {a}, [a, start, count](Tape<Real>& tape, std::size_t self) {
    tape.grad_buffer(a).middleRows(start, count) += tape.out_grad(self);
  });
}

/// Segmented weighted row sum: out[s] = sum_{r in [offsets[s], offsets[s+1])} weights[r] * a[r].
template <typename Real>
Var<Real> segment_weighted_sum(Var<Real> a, std::vector<Eigen::Index> offsets, std::vector<Real> weights) {
  if (offsets.empty() || offsets.back() != a.rows() || weights.size() != static_cast<std::size_t>(a.rows())) {
    throw DimensionError("segment_weighted_sum: offsets/weights inconsistent with input rows");
  }
  Tape<Real>& t = *a.tape();
  const Eigen::Index segments = static_cast<Eigen::Index>(offsets.size()) - 1;
  Matrix<Real> out = Matrix<Real>::Zero(segments, a.cols());
  const auto& v = a.value();
  for (Eigen::Index s = 0; s < segments; ++s) {
    for (Eigen::Index r = offsets[s]; r < offsets[s + 1]; ++r) out.row(s) += weights[r] * v.row(r);
  }
  return t.record(std::move(out), {a}, [a, off = std::move(offsets), w = std::move(weights)](Tape<Real>& tape,
                                                                                              std::size_t self) {
    const auto& g = tape.out_grad(self);
    auto& ga = tape.grad_buffer(a);
    for (std::size_t s = 0; s + 1 < off.size(); ++s) {
      for (Eigen::Index r = off[s]; r < off[s + 1]; ++r) ga.row(r) += w[r] * g.row(static_cast<Eigen::Index>(s));
    }
  });
}

/// Row-wise softmax.
template <typename Real>
Var<Real> softmax_rows(Var<Real> a) {
  Tape<Real>& t = *a.tape();
  Matrix<Real> out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const Real mx = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return t.record(std::move(out), {a}, [a](Tape<Real>& tape, std::size_t self) {
    const auto& y = tape.value(self);
    const auto& g = tape.out_grad(self);
    auto& ga = tape.grad_buffer(a);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const Real dot = g.row(r).dot(y.row(r));
      ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

/// Row-wise layer normalization with learned affine (gain and bias are 1xN).
template <typename Real>
Var<Real> layer_norm(Var<Real> a, Var<Real> gain, Var<Real> bias, Real eps = Real(1e-5)) {
  const Eigen::Index n = a.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw DimensionError("layer_norm: gain/bias must be 1xN");
  }
  Tape<Real>& t = *a.tape();
  const auto& x = a.value();
  Matrix<Real> xhat(x.rows(), n);
  Eigen::Matrix<Real, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real mu = x.row(r).mean();
    const Real var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = Real(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Matrix<Real> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return t.record(std::move(out), {a, gain, bias},
                  [a, gain, bias, xhat, inv_std](Tape<Real>& tape, std::size_t self) {
                    const auto& g = tape.out_grad(self);
                    if (tape.wants(gain)) tape.grad_buffer(gain) += g.cwiseProduct(xhat).colwise().sum();
                    if (tape.wants(bias)) tape.grad_buffer(bias) += g.colwise().sum();
                    if (tape.wants(a)) {
                      auto& ga = tape.grad_buffer(a);
                      const auto& gv = gain.value();
                      for (Eigen::Index r = 0; r < g.rows(); ++r) {
                        const auto dxhat = (g.row(r).array() * gv.row(0).array()).eval();
                        const Real m1 = dxhat.mean();
                        const Real m2 = (dxhat * xhat.row(r).array()).mean();
                        ga.row(r).array() += inv_std(r) * (dxhat - m1 - xhat.row(r).array() * m2);
                      }
                    }
                  });
}

}  // namespace npcd
