#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sat/tensor.hpp"

namespace sat {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct AdamWConfig {
  float lr = 5e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

// Moment buffers are index-aligned with the parameter list they were
// created for.
struct OptimizerState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
};

OptimizerState make_optimizer_state(const std::vector<NamedParam>& params, const AdamWConfig& config);

// Decoupled weight decay Adam update with bias correction. Every parameter
// must carry a populated gradient; throws std::logic_error otherwise.
void adamw_step(std::vector<NamedParam>& params, OptimizerState& state);

void zero_grads(std::vector<NamedParam>& params);

}  // namespace sat
