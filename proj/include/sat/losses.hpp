#pragma once

#include <vector>

#include "sat/tensor.hpp"

namespace sat {

// One supervised view: predicted [4, H, W] (rgb + alpha) against a GT
// colour [3, H, W] and mask [1, H, W].
template <typename T>
struct RenderPair {
  BasicTensor<T> pred;
  BasicTensor<T> gt_color;
  BasicTensor<T> gt_mask;
};

// Fixed random conv pyramid standing in for a learned perceptual metric:
// 3x3 filters, 8/16/32 channels, stride 2 between levels, weights drawn once
// from seed 0xC0FFEE. Features are normalized over channels at each pixel;
// the loss is the mean squared feature difference averaged over levels.
// Inputs are [3, H, W] or [N, 3, H, W].
template <typename T>
BasicTensor<T> perceptual(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Sum over views of mse(colour) + mse(alpha, mask) + perceptual(colour).
template <typename T>
BasicTensor<T> render_loss(const std::vector<RenderPair<T>>& pairs);

// L1 + alpha * L_SFR.
template <typename T>
BasicTensor<T> ugl_total_loss(const BasicTensor<T>& l1, const BasicTensor<T>& l_sfr, T alpha);

inline constexpr float kDefaultSfrAlpha = 0.01f;

}  // namespace sat
