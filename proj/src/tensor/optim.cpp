#include "sat/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace sat {

OptimizerState make_optimizer_state(const std::vector<NamedParam>& params, const AdamWConfig& config) {
  OptimizerState state;
  state.config = config;
  for (const auto& p : params) {
    state.first_moment.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
    state.second_moment.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
  }
  return state;
}

void adamw_step(std::vector<NamedParam>& params, OptimizerState& state) {
  if (state.first_moment.size() != params.size()) {
    throw std::logic_error("optimizer state does not match the parameter list");
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw std::logic_error("adamw_step: parameter '" + p.name + "' has no gradient");
  }
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(static_cast<double>(c.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(c.beta2), static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != static_cast<std::size_t>(params[k].tensor.numel())) {
      throw std::logic_error("optimizer moment shape mismatch for '" + params[k].name + "'");
    }
    auto w = params[k].tensor.mutable_data();
    const auto g = params[k].tensor.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= c.lr * c.weight_decay * w[i];
      m[i] = c.beta1 * m[i] + (1.0f - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0f - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= static_cast<float>(c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

void zero_grads(std::vector<NamedParam>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace sat
