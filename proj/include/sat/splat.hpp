#pragma once

// 3D Gaussians and a differentiable front-to-back splatting renderer.
//
// Each Gaussian has 14 parameters laid out as
//   x[3] scale[3] q[4] (w, x, y, z) opacity color[3]
// The quaternion is normalized inside the renderer, so raw values are fine.

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "sat/camera.hpp"
#include "sat/image.hpp"
#include "sat/tensor.hpp"

namespace sat {

inline constexpr int kGaussianParams = 14;

struct Gaussian {
  Eigen::Vector3f x = Eigen::Vector3f::Zero();
  Eigen::Vector3f scale = Eigen::Vector3f::Constant(0.01f);
  Eigen::Vector4f q = Eigen::Vector4f(1, 0, 0, 0);  // w, x, y, z
  float opacity = 1.0f;
  Eigen::Vector3f color = Eigen::Vector3f::Constant(0.5f);

  std::array<float, kGaussianParams> pack() const;
  static Gaussian unpack(std::span<const float> p);
};

using GaussianSet = std::vector<Gaussian>;

// [N, 14] tensor data and back.
std::vector<float> pack_gaussians(const GaussianSet& set);
GaussianSet unpack_gaussians(std::span<const float> params);

// Sigma = R diag(s^2) R^T with R from the normalized quaternion. Throws
// std::invalid_argument for a zero quaternion.
Eigen::Matrix3f covariance_3d(const Gaussian& g);

struct ProjectedGaussian {
  Eigen::Vector2f mean;  // pixels
  Eigen::Matrix2f cov;   // pixels^2, regularized
  float depth;
};

struct SplatSettings {
  float min_weight = 1.0f / 255.0f;   // contributions below are skipped
  float min_transmittance = 1e-4f;    // a pixel stops compositing once T drops below
  float cov_regularizer = 0.3f;       // added to the 2D covariance diagonal, px^2
  float near = 0.01f;
};

// Throws std::domain_error if the Gaussian is not in front of the near plane.
ProjectedGaussian project(const Gaussian& g, const CameraPose& cam, const SplatSettings& settings = {});

struct SplatImage {
  Image color;  // H x W x 3
  Image alpha;  // H x W x 1
  CameraPose camera;
};

SplatImage splat_render(const GaussianSet& set, const CameraPose& cam, const Eigen::Vector3f& background,
                        const SplatSettings& settings = {});

// Differentiable renderer over an [N, 14] parameter tensor. Returns [4, H, W]
// holding r, g, b and alpha. Throws NumericError on non-finite parameters.
template <typename T>
BasicTensor<T> splat_render(const BasicTensor<T>& params, const CameraPose& cam, const std::array<T, 3>& background,
                            const SplatSettings& settings = {});

struct SplatGradCheck {
  double max_rel_error = 0.0;
  int worst_gaussian = -1;
  int worst_slot = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central differences of a fixed random per-pixel weighting of all four
// output channels against the analytic gradient, in double precision. The
// 1/255 cutoff makes the render piecewise smooth; a step much larger than
// 1e-5 regularly straddles it somewhere in the image.
SplatGradCheck splat_gradcheck(const GaussianSet& set, const CameraPose& cam, double h = 1e-5,
                               std::uint64_t weight_seed = 17, const SplatSettings& settings = {});

// "SATGS1\0\0", u32 count, count x 14 f32.
void save_gaussians(const std::filesystem::path& path, const GaussianSet& set);
GaussianSet load_gaussians(const std::filesystem::path& path);
std::vector<char> encode_gaussians(const GaussianSet& set);
GaussianSet decode_gaussians(const std::vector<char>& bytes);

}  // namespace sat
