// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite-difference checks against the tape's reverse pass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sublab/autodiff.hpp"
#include "sublab/model.hpp"
#include "sublab/rng.hpp"
#include "sublab/tensor.hpp"

namespace sublab::testing {

using LossFn = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

struct GradCheck {
  /// max |analytic - numeric| / max(max |numeric|, 1e-8), per input, worst
  /// over inputs.
  double rel_err = 0.0;
  double abs_err = 0.0;
};

inline double evaluate(const LossFn& f, const std::vector<Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

/// `grad_scale` multiplies the numeric derivative before comparison; -lambda
/// for gradient reversal, 1 otherwise.
inline GradCheck gradcheck(const LossFn& f, std::vector<Tensor> inputs, double h = 1e-5,
                           double grad_scale = 1.0) {
  std::vector<Tensor> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    tape.backward(f(tape, vars));
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  GradCheck out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    double max_num = 0.0, max_diff = 0.0;
    auto data = inputs[k].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x0 = data[i];
      data[i] = x0 + h;
      const double fp = evaluate(f, inputs);
      data[i] = x0 - h;
      const double fm = evaluate(f, inputs);
      data[i] = x0;
      const double num = grad_scale * (fp - fm) / (2.0 * h);
      max_num = std::max(max_num, std::abs(num));
      max_diff = std::max(max_diff, std::abs(num - analytic[k].data()[i]));
    }
    out.abs_err = std::max(out.abs_err, max_diff);
    out.rel_err = std::max(out.rel_err, max_diff / std::max(max_num, 1e-8));
  }
  return out;
}

inline Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Tensor t(Shape{rows, cols});
  for (auto& x : t.data()) x = scale * rng.normal();
  return t;
}

inline Tensor random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
  Tensor t(Shape{n});
  for (auto& x : t.data()) x = scale * rng.normal();
  return t;
}

/// Perturbs every parameter of `params` and compares with the tape gradient
/// of `loss(tape, vars)`.
inline double model_gradcheck(ModelParams params,
                              const std::function<ad::Var(ad::Tape&, const ModelVars&)>& loss,
                              double h = 1e-5) {
  const auto value_at = [&](const ModelParams& p) {
    ad::Tape tape;
    const ModelVars v = bind(tape, p, false);
    return loss(tape, v).value().item();
  };
  std::vector<Tensor> analytic;
  {
    ad::Tape tape;
    const ModelVars v = bind(tape, params, true);
    tape.backward(loss(tape, v));
    analytic = collect_grads(tape, v);
  }
  double worst = 0.0;
  auto ptrs = params.parameters();
  for (std::size_t k = 0; k < ptrs.size(); ++k) {
    auto data = ptrs[k]->data();
    double max_num = 0.0, max_diff = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x0 = data[i];
      data[i] = x0 + h;
      const double fp = value_at(params);
      data[i] = x0 - h;
      const double fm = value_at(params);
      data[i] = x0;
      const double num = (fp - fm) / (2.0 * h);
      max_num = std::max(max_num, std::abs(num));
      max_diff = std::max(max_diff, std::abs(num - analytic[k].data()[i]));
    }
    worst = std::max(worst, max_diff / std::max(max_num, 1e-8));
  }
  return worst;
}

}  // namespace sublab::testing
