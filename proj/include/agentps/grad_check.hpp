// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "agentps/autodiff.hpp"

namespace agentps {

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "<tensor>[<index>]"
};

/// Relative error with a floor on the denominator so coordinates whose true
/// derivative is (near) zero are judged on absolute error.
inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares analytic gradients of a scalar function of several tensors with
/// central differences (f(x + eps e_j) - f(x - eps e_j)) / (2 eps).
///
/// `f(tape)` must rebuild the computation from the current contents of
/// `inputs` (bound as parameters) and return the scalar loss. It must be
/// deterministic.
template <class T, class F>
GradCheckResult grad_check_tensors(F&& f, const std::vector<Tensor<T>*>& inputs,
                                   const std::vector<std::string>& names, T eps,
                                   double floor = 1e-8) {
  for (auto* x : inputs) x->clear_grad();
  {
    Tape<T> tape;
    Var<T> loss = f(tape);
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape<T> tape;
    return static_cast<double>(f(tape).value()[0]);
  };
  GradCheckResult result;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor<T>& x = *inputs[t];
    const std::vector<T> analytic = x.has_grad() ? x.grad() : std::vector<T>(x.size(), T{0});
    for (std::size_t j = 0; j < x.size(); ++j) {
      const T saved = x[j];
      x[j] = saved + eps;
      const double up = eval();
      x[j] = saved - eps;
      const double down = eval();
      x[j] = saved;
      const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
      const double rel = relative_error(static_cast<double>(analytic[j]), numeric, floor);
      result.max_absolute_error =
          std::max(result.max_absolute_error, std::abs(static_cast<double>(analytic[j]) - numeric));
      if (rel > result.max_relative_error || result.coordinates == 0) {
        result.max_relative_error = rel;
        result.worst =
            (t < names.size() ? names[t] : std::to_string(t)) + "[" + std::to_string(j) + "]";
      }
      ++result.coordinates;
    }
  }
  return result;
}

/// Single-input form: `f(tape, x)` maps a leaf bound to `x` to a scalar.
template <class T, class F>
double grad_check(F&& f, Tensor<T> x, T eps, double floor = 1e-8) {
  auto wrapped = [&](Tape<T>& tape) { return f(tape, tape.parameter(x)); };
  return grad_check_tensors<T>(wrapped, {&x}, {"x"}, eps, floor).max_relative_error;
}

}  // namespace agentps
