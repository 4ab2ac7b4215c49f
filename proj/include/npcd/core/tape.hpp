// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// Every recorded node stores its forward value and a closure that pushes the
// node's output gradient into the gradients of its inputs. Nodes are appended
// in evaluation order, so a single reverse sweep is a valid topological order.
// Leaves may carry a gradient sink (usually a ParamStore gradient buffer) into
// which their gradient is added after each backward sweep.
#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "npcd/core/error.hpp"

namespace npcd {

template <typename Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixXd = Matrix<double>;

template <typename Real>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives
/// and has not been cleared.
template <typename Real>
class Var {
 public:
  Var() = default;

  [[nodiscard]] const Matrix<Real>& value() const { return tape_->value(index_); }
  [[nodiscard]] const Matrix<Real>& grad() const { return tape_->grad(index_); }
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] Real scalar() const { return value()(0, 0); }
  [[nodiscard]] Tape<Real>* tape() const { return tape_; }
  [[nodiscard]] std::size_t index() const { return index_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }
  [[nodiscard]] bool requires_grad() const { return tape_->requires_grad(index_); }

 private:
  friend class Tape<Real>;
  Var(Tape<Real>* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape<Real>* tape_ = nullptr;
  std::size_t index_ = 0;
};

template <typename Real>
class Tape {
 public:
  using Mat = Matrix<Real>;
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When disabled, leaves and parameters are recorded as constants and no
  /// closures are kept. Used for evaluation-only rendering.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  [[nodiscard]] bool grad_enabled() const { return grad_enabled_; }

  Var<Real> constant(Mat value) {
    nodes_.push_back(Node{std::move(value), Mat(), Mat(), false, nullptr, nullptr});
    return Var<Real>(this, nodes_.size() - 1);
  }

  /// A differentiable input. Its gradient accumulates across backward sweeps
  /// and, when `sink` is non-null, is also added into `*sink`.
  Var<Real> leaf(Mat value, Mat* sink = nullptr) {
    if (!grad_enabled_) return constant(std::move(value));
    nodes_.push_back(Node{std::move(value), Mat(), Mat(), true, nullptr, sink});
    leaves_.push_back(nodes_.size() - 1);
    return Var<Real>(this, nodes_.size() - 1);
  }

  /// Records the result of an operation. The node requires a gradient iff any
  /// input does; otherwise `fn` is dropped.
  Var<Real> record(Mat value, std::initializer_list<Var<Real>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.index()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), Mat(), Mat(), needs, needs ? std::move(fn) : nullptr, nullptr});
    return Var<Real>(this, nodes_.size() - 1);
  }

  /// Reverse sweep from a scalar output, seeded with d(out)/d(out) = 1.
  void backward(Var<Real> out) {
    check_owner(out);
    if (nodes_[out.index()].value.size() != 1) {
      throw DimensionError("backward: output must be a 1x1 scalar, use the seeded overload otherwise");
    }
    backward(out, Mat::Ones(1, 1));
  }

  /// Reverse sweep seeded with an explicit output gradient.
  void backward(Var<Real> out, const Mat& seed) {
    if (nodes_.empty()) throw StateError("backward called before any forward computation");
    check_owner(out);
    const std::size_t root = out.index();
    if (seed.rows() != nodes_[root].value.rows() || seed.cols() != nodes_[root].value.cols()) {
      throw DimensionError("backward: seed shape does not match output");
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!nodes_[root].requires_grad) {
      // Output does not depend on any leaf; all gradients are zero.
      return;
    }
    nodes_[root].grad = seed;
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
    for (std::size_t i : leaves_) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.accumulated.size() == 0) n.accumulated = Mat::Zero(n.value.rows(), n.value.cols());
      n.accumulated += n.grad;
      if (n.sink != nullptr) *n.sink += n.grad;
    }
  }

  void clear() {
    nodes_.clear();
    leaves_.clear();
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] const Mat& value(std::size_t i) const { return nodes_.at(i).value; }
  [[nodiscard]] bool requires_grad(std::size_t i) const { return nodes_.at(i).requires_grad; }

  /// Accumulated gradient of a leaf (zero matrix if never reached); for
  /// interior nodes, the gradient from the most recent sweep.
  [[nodiscard]] const Mat& grad(std::size_t i) const {
    const Node& n = nodes_.at(i);
    const Mat& g = n.backward || !n.requires_grad ? n.grad : n.accumulated;
    if (g.size() == 0) {
      zero_cache_ = Mat::Zero(n.value.rows(), n.value.cols());
      return zero_cache_;
    }
    return g;
  }

  // Accessors used inside backward closures.
  [[nodiscard]] const Mat& out_grad(std::size_t i) const { return nodes_[i].grad; }
  [[nodiscard]] bool wants(const Var<Real>& v) const { return nodes_[v.index()].requires_grad; }
  Mat& grad_buffer(const Var<Real>& v) {
    Node& n = nodes_[v.index()];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Mat accumulated;
    bool requires_grad = false;
    BackwardFn backward;
    Mat* sink = nullptr;
  };

  void check_owner(const Var<Real>& v) const {
    if (v.tape() != this) throw StateError("variable belongs to a different or cleared tape");
    if (v.index() >= nodes_.size()) throw StateError("variable refers to a cleared tape entry");
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> leaves_;
  bool grad_enabled_ = true;
  mutable Mat zero_cache_;
};

}  // namespace npcd
