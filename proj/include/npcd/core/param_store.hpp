// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "npcd/core/binary_io.hpp"
#include "npcd/core/error.hpp"
#include "npcd/core/tape.hpp"

namespace npcd {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled (AdamW-style) weight decay; 0 disables it.
  double weight_decay = 0.0;
};

template <typename Real>
struct ParamEntry {
  Matrix<Real> value;
  Matrix<Real> grad;
  Matrix<Real> m;
  Matrix<Real> v;
  /// Logical shape for serialization: rank 1 for biases, rank 2 otherwise.
  std::vector<std::uint32_t> shape;
};

/// Named parameters with gradient accumulators and Adam moments.
template <typename Real>
class ParamStore {
 public:
  using Mat = Matrix<Real>;

  ParamEntry<Real>& add(const std::string& name, Mat value, std::vector<std::uint32_t> shape = {}) {
    if (entries_.count(name) != 0) throw ArgumentError("duplicate parameter name: " + name);
    if (shape.empty()) {
      shape = {static_cast<std::uint32_t>(value.rows()), static_cast<std::uint32_t>(value.cols())};
    }
    std::uint64_t n = 1;
    for (auto s : shape) n *= s;
    if (n != static_cast<std::uint64_t>(value.size())) throw DimensionError("parameter " + name + ": shape/data mismatch");
    ParamEntry<Real> e;
    e.grad = Mat::Zero(value.rows(), value.cols());
    e.m = Mat::Zero(value.rows(), value.cols());
    e.v = Mat::Zero(value.rows(), value.cols());
    e.value = std::move(value);
    e.shape = std::move(shape);
    return entries_.emplace(name, std::move(e)).first->second;
  }

  [[nodiscard]] bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  ParamEntry<Real>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArgumentError("unknown parameter: " + name);
    return it->second;
  }
  const ParamEntry<Real>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArgumentError("unknown parameter: " + name);
    return it->second;
  }

  const Mat& value(const std::string& name) const { return at(name).value; }

  /// Records the parameter as a tape leaf whose gradient flows into this store.
  /// A frozen store records constants instead.
  Var<Real> var(Tape<Real>& tape, const std::string& name) {
    auto& e = at(name);
    return frozen_ ? tape.constant(e.value) : tape.leaf(e.value, &e.grad);
  }

  void set_frozen(bool frozen) { frozen_ = frozen; }
  [[nodiscard]] bool frozen() const { return frozen_; }

  [[nodiscard]] const std::map<std::string, ParamEntry<Real>>& entries() const { return entries_; }
  std::map<std::string, ParamEntry<Real>>& entries() { return entries_; }
  [[nodiscard]] std::uint64_t step_count() const { return step_; }
  void set_step_count(std::uint64_t s) { step_ = s; }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& [_, e] : entries_) e.grad.setZero();
  }

  /// One Adam update with bias correction; gradients are zeroed afterwards.
  void adam_step(const AdamOptions& opt) {
    if (!(opt.lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
    if (!(opt.beta1 >= 0.0 && opt.beta1 < 1.0 && opt.beta2 >= 0.0 && opt.beta2 < 1.0)) {
      throw ConfigError("adam: betas must lie in [0, 1)");
    }
    ++step_;
    const Real b1 = static_cast<Real>(opt.beta1);
    const Real b2 = static_cast<Real>(opt.beta2);
    const Real c1 = static_cast<Real>(1.0 - std::pow(opt.beta1, static_cast<double>(step_)));
    const Real c2 = static_cast<Real>(1.0 - std::pow(opt.beta2, static_cast<double>(step_)));
    const Real lr = static_cast<Real>(opt.lr);
    const Real eps = static_cast<Real>(opt.eps);
    const Real decay = static_cast<Real>(1.0 - opt.lr * opt.weight_decay);
    for (auto& [_, e] : entries_) {
      e.m = b1 * e.m + (Real(1) - b1) * e.grad;
      e.v = b2 * e.v + (Real(1) - b2) * e.grad.cwiseAbs2();
      if (opt.weight_decay != 0.0) e.value *= decay;
      e.value.array() -= lr * (e.m.array() / c1) / ((e.v.array() / c2).sqrt() + eps);
      e.grad.setZero();
    }
  }

  /// Value-only copy in another precision (moments and gradients reset).
  template <typename Other>
  [[nodiscard]] ParamStore<Other> cast() const {
    ParamStore<Other> out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<Other>(), e.shape);
    return out;
  }

  /// Checks that another store has the same names and shapes.
  template <typename Other>
  [[nodiscard]] bool same_structure(const ParamStore<Other>& other) const {
    if (entries_.size() != other.entries().size()) return false;
    auto it = other.entries().begin();
    for (const auto& [name, e] : entries_) {
      if (it->first != name || it->second.shape != e.shape) return false;
      ++it;
    }
    return true;
  }

 private:
  std::map<std::string, ParamEntry<Real>> entries_;
  std::uint64_t step_ = 0;
  bool frozen_ = false;
};

/// ema <- decay * ema + (1 - decay) * params, elementwise.
template <typename Real>
void ema_update(ParamStore<Real>& ema, const ParamStore<Real>& params, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("ema decay must lie in [0, 1]");
  if (!ema.same_structure(params)) throw DimensionError("ema_update: parameter structures differ");
  const Real d = static_cast<Real>(decay);
  auto it = params.entries().begin();
  for (auto& [_, e] : ema.entries()) {
    if (decay == 0.0) {
      e.value = it->second.value;
    } else if (decay != 1.0) {
      e.value = d * e.value + (Real(1) - d) * it->second.value;
    }
    ++it;
  }
}

// Checkpoint layout (little endian):
//   "NPCDPARM" | u32 version | u8 flags | [u64 adam step if flags & 1] | u32 entry count |
//   per entry: u32 name length, name bytes, u32 rank, rank x u32 extents, data,
//              [m, v if flags & 1]
// Data is f32, or f64 when flags & 2.
inline constexpr char kParamMagic[] = "NPCDPARM";
inline constexpr std::uint32_t kParamVersion = 1;
inline constexpr std::uint8_t kParamFlagMoments = 1;
inline constexpr std::uint8_t kParamFlagF64 = 2;

template <typename Real>
void save_params(const ParamStore<Real>& store, const std::string& path, bool include_moments = false) {
  constexpr bool wide = sizeof(Real) > sizeof(float);
  auto out = binary::open_for_write(path);
  binary::write_bytes(out, std::string_view(kParamMagic, 8));
  binary::write_le<std::uint32_t>(out, kParamVersion);
  binary::write_le<std::uint8_t>(out, static_cast<std::uint8_t>((include_moments ? kParamFlagMoments : 0) |
                                                                 (wide ? kParamFlagF64 : 0)));
  if (include_moments) binary::write_le<std::uint64_t>(out, store.step_count());
  binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.entries().size()));
  auto write_data = [&](const Matrix<Real>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if constexpr (wide) {
        binary::write_le<double>(out, static_cast<double>(m.data()[i]));
      } else {
        binary::write_le<float>(out, static_cast<float>(m.data()[i]));
      }
    }
  };
  for (const auto& [name, e] : store.entries()) {
    binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    binary::write_bytes(out, name);
    binary::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto s : e.shape) binary::write_le<std::uint32_t>(out, s);
    write_data(e.value);
    if (include_moments) {
      write_data(e.m);
      write_data(e.v);
    }
  }
  binary::finish_write(out, path);
}

template <typename Real>
ParamStore<Real> load_params(const std::string& path) {
  auto in = binary::open_for_read(path);
  if (binary::read_bytes(in, 8, "magic") != std::string_view(kParamMagic, 8)) {
    throw FormatError("bad parameter checkpoint magic: " + path);
  }
  const auto version = binary::read_le<std::uint32_t>(in, "version");
  if (version != kParamVersion) throw FormatError("unsupported parameter checkpoint version " + std::to_string(version));
  const auto flags = binary::read_le<std::uint8_t>(in, "flags");
  if ((flags & ~(kParamFlagMoments | kParamFlagF64)) != 0) throw FormatError("unknown checkpoint flags");
  const bool moments = (flags & kParamFlagMoments) != 0;
  const bool wide = (flags & kParamFlagF64) != 0;
  ParamStore<Real> store;
  if (moments) store.set_step_count(binary::read_le<std::uint64_t>(in, "adam step"));
  const auto count = binary::read_le<std::uint32_t>(in, "entry count");
  constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 31;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = binary::read_le<std::uint32_t>(in, "name length");
    if (name_len > 4096) throw FormatError("parameter name too long");
    std::string name = binary::read_bytes(in, name_len, "name");
    const auto rank = binary::read_le<std::uint32_t>(in, "rank");
    if (rank == 0 || rank > 2) throw FormatError("parameter " + name + ": unsupported rank " + std::to_string(rank));
    std::vector<std::uint32_t> shape(rank);
    std::uint64_t n = 1;
    for (auto& s : shape) {
      s = binary::read_le<std::uint32_t>(in, "extent");
      n *= s;
      if (n > kMaxElements) throw FormatError("parameter " + name + ": dimension overflow");
    }
    const Eigen::Index rows = rank == 1 ? 1 : shape[0];
    const Eigen::Index cols = rank == 1 ? shape[0] : shape[1];
    auto read_data = [&]() {
      Matrix<Real> m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = wide ? static_cast<Real>(binary::read_le<double>(in, "data"))
                           : static_cast<Real>(binary::read_le<float>(in, "data"));
      }
      return m;
    };
    auto& e = store.add(name, read_data(), shape);
    if (moments) {
      e.m = read_data();
      e.v = read_data();
    }
  }
  return store;
}

}  // namespace npcd
