#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "sat/tensor.hpp"

namespace sat {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares backward() against central finite differences of a scalar
// function. The per-element error is |a - n| / (|a| + |n| + 1e-8).
template <typename T, typename F>
GradCheckResult grad_check_detailed(F&& f, const std::vector<BasicTensor<T>>& inputs, double h) {
  std::vector<BasicTensor<T>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& x : inputs) leaves.emplace_back(x.shape(), std::vector<T>(x.data().begin(), x.data().end()), true);

  const BasicTensor<T> loss = f(leaves);
  if (loss.numel() != 1) throw ShapeError("grad_check: function is not scalar-valued");
  backward(loss);

  GradCheckResult result;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    std::vector<T> analytic(leaves[k].numel(), T(0));
    if (leaves[k].has_grad()) std::copy(leaves[k].grad().begin(), leaves[k].grad().end(), analytic.begin());
    for (std::int64_t i = 0; i < leaves[k].numel(); ++i) {
      auto eval_at = [&](double delta) {
        autograd::NoGradGuard guard;
        std::vector<BasicTensor<T>> probe;
        for (std::size_t j = 0; j < leaves.size(); ++j) {
          std::vector<T> d(leaves[j].data().begin(), leaves[j].data().end());
          if (j == k) d[static_cast<std::size_t>(i)] += static_cast<T>(delta);
          probe.emplace_back(leaves[j].shape(), std::move(d), false);
        }
        return static_cast<double>(f(probe).item());
      };
      const double numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
      const double a = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
      const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8);
      if (err > result.max_rel_error) {
        result = {err, k, static_cast<std::size_t>(i), a, numeric};
      }
    }
  }
  return result;
}

template <typename T, typename F>
double grad_check(F&& f, const std::vector<BasicTensor<T>>& inputs, double h) {
  return grad_check_detailed<T>(std::forward<F>(f), inputs, h).max_rel_error;
}

}  // namespace sat
