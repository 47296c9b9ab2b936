// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "emofuse/ops.hpp"
#include "emofuse/tape.hpp"
#include "emofuse/tensor.hpp"

namespace emofuse {

template <class T>
struct GradCheckReport {
  T max_rel_err = T(0);
  size_t coords_checked = 0;
  std::string worst;  // "input#i[j]" of the worst coordinate

  bool pass(T tol) const { return max_rel_err <= tol; }
};

// Compares tape gradients against central finite differences
// (f(x+h) - f(x-h)) / 2h, coordinate by coordinate, for a scalar-valued
// function of the given inputs. Relative error is |a-n| / max(|a|,|n|,1).
// The function must be pure: it may only read the inputs and must build its
// whole computation on the tape it is handed.
template <class T>
GradCheckReport<T> grad_check(
    const std::function<TensorPtr<T>(Tape<T>&, const std::vector<TensorPtr<T>>&)>& f,
    const std::vector<TensorPtr<T>>& inputs, T h) {
  // Analytic pass.
  for (const auto& in : inputs) in->zero_grad();
  Tape<T> tape;
  auto y = f(tape, inputs);
  if (y->size() != 1) throw ShapeError("grad_check: function under test must return a scalar");
  if (!y->all_finite()) throw ValueError("grad_check: non-finite function value");
  tape.backward(y);

  std::vector<std::vector<T>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (!in->requires_grad()) {
      analytic.emplace_back();
      continue;
    }
    analytic.emplace_back(in->grad().begin(), in->grad().end());
  }

  auto eval = [&]() -> T {
    Tape<T> t;
    auto out = f(t, inputs);
    if (!out->all_finite()) throw ValueError("grad_check: non-finite function value");
    return out->values()[0];
  };

  GradCheckReport<T> report;
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i]->requires_grad()) continue;
    auto xv = inputs[i]->values();
    for (size_t j = 0; j < xv.size(); ++j) {
      const T saved = xv[j];
      xv[j] = saved + h;
      const T fp = eval();
      xv[j] = saved - h;
      const T fm = eval();
      xv[j] = saved;
      const T numeric = (fp - fm) / (T(2) * h);
      const T a = analytic[i][j];
      const T denom = std::max({std::abs(a), std::abs(numeric), T(1)});
      const T rel = std::abs(a - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = "input#" + std::to_string(i) + "[" + std::to_string(j) + "]";
      }
    }
  }
  return report;
}

// Scalar projection helper: sum(x * weights) with fixed weights, used to
// reduce a tensor-valued op to a scalar without degenerate cancellation.
template <class T>
TensorPtr<T> project(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& weights) {
  return sum_all(tape, mul(tape, x, weights->reshaped(x->shape())));
}

}  // namespace emofuse
