// Copyright Contributors to the NPCD Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "npcd/core/param_store.hpp"
#include "npcd/core/tape.hpp"

namespace npcd {

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  Eigen::Index worst_index = -1;
  bool passed = false;
};

/// A scalar function built on a tape from a single leaf input.
using ScalarFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

/// Compares the reverse-mode gradient of `fn` at `point` with central
/// differences of step `h`. Per-entry relative error is
/// |a - n| / max(|a|, |n|, floor); the floor keeps structurally zero entries
/// from dividing roundoff by zero.
inline GradCheckReport grad_check(const ScalarFn& fn, const Matrix<double>& point, double tol, double h = 1e-5,
                                  double floor = 1e-6) {
  GradCheckReport report;
  Matrix<double> analytic;
  {
    Tape<double> tape;
    Var<double> x = tape.leaf(point);
    Var<double> y = fn(tape, x);
    tape.backward(y);
    analytic = x.grad();
  }
  auto eval = [&](const Matrix<double>& p) {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    return fn(tape, tape.constant(p)).scalar();
  };
  Matrix<double> probe = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double fp = eval(probe);
    probe.data()[i] = orig - h;
    const double fm = eval(probe);
    probe.data()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic.data()[i];
    const double abs_err = std::abs(a - numeric);
    const double rel_err = abs_err / std::max({floor, std::abs(a), std::abs(numeric)});
    report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
    if (rel_err > report.max_relative_error || report.worst_index < 0) {
      report.max_relative_error = std::max(report.max_relative_error, rel_err);
      report.worst_index = i;
    }
  }
  report.passed = report.max_relative_error < tol;
  return report;
}

/// Same comparison for every parameter of a store. `fn` must read the
/// parameters through `store.var`. At most `max_probes_per_entry` evenly
/// strided elements are probed per named parameter.
inline GradCheckReport grad_check_params(const std::function<Var<double>(Tape<double>&)>& fn,
                                         ParamStore<double>& store, double tol, double h = 1e-5,
                                         Eigen::Index max_probes_per_entry = 16, double floor = 1e-6) {
  GradCheckReport report;
  store.zero_grad();
  {
    Tape<double> tape;
    tape.backward(fn(tape));
  }
  auto eval = [&]() {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    return fn(tape).scalar();
  };
  Eigen::Index flat = 0;
  for (auto& [name, e] : store.entries()) {
    const Eigen::Index n = e.value.size();
    const Eigen::Index stride = std::max<Eigen::Index>(1, n / std::max<Eigen::Index>(1, max_probes_per_entry));
    for (Eigen::Index i = 0; i < n; i += stride) {
      double& slot = e.value.data()[i];
      const double orig = slot;
      slot = orig + h;
      const double fp = eval();
      slot = orig - h;
      const double fm = eval();
      slot = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = e.grad.data()[i];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({floor, std::abs(a), std::abs(numeric)});
      report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
      if (rel_err > report.max_relative_error || report.worst_index < 0) {
        report.max_relative_error = std::max(report.max_relative_error, rel_err);
        report.worst_index = flat + i;
      }
    }
    flat += n;
  }
  store.zero_grad();
  report.passed = report.max_relative_error < tol;
  return report;
}

}  // namespace npcd
