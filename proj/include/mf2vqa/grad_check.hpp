#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mf2vqa/tensor.hpp"

namespace mf2 {

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor: errors on gradients smaller than this are measured
  // relative to the floor instead of the (tiny) gradient itself.
  double abs_floor = 1e-4;
  // Test hook applied to each input's analytic gradient before comparison.
  std::function<void(std::size_t input, std::vector<double>& grad)> tamper;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> per_input;  // max relative error per input tensor
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences (f(x+h) - f(x-h)) / 2h, element by element.
template <class F>
GradCheckResult grad_check(F&& f, std::vector<Tensor<double>>& inputs, const GradCheckOptions& opts = {}) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor<double> loss = f(inputs);
  backward(loss);

  GradCheckResult result;
  result.per_input.assign(inputs.size(), 0.0);
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> analytic(inputs[k].grad().begin(), inputs[k].grad().end());
    if (opts.tamper) opts.tamper(k, analytic);
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + opts.step;
      const double plus = f(inputs).item();
      values[i] = saved - opts.step;
      const double minus = f(inputs).item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * opts.step);
      result.per_input[k] = std::max(result.per_input[k], relative_error(analytic[i], numeric, opts.abs_floor));
    }
    result.max_rel_error = std::max(result.max_rel_error, result.per_input[k]);
  }
  return result;
}

}  // namespace mf2
