#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sat/camera.hpp"
#include "sat/image.hpp"
#include "sat/mesh.hpp"
#include "sat/splat.hpp"

namespace sat {

inline constexpr double kCmPerUnit = 100.0;

class EmptyPrediction : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exact nearest neighbour of each query in `targets` (brute force; ties go
// to the lower index). Returns (index, distance in scene units).
std::vector<std::pair<int, double>> nearest_neighbors(std::span<const Vec3> queries, std::span<const Vec3> targets);

struct Chamfer {
  double p2s = 0.0;  // cm, mean over predicted points
  double s2p = 0.0;  // cm, mean over GT points
};
// Throws std::invalid_argument when either set is empty.
Chamfer chamfer(std::span<const Vec3> pred, std::span<const Vec3> gt);

// Symmetric mean |n_a . n_b| over nearest neighbours. Throws on zero normals.
double normal_consistency(const PointCloud& pred, const PointCloud& gt);

// Percentage; a point counts when its nearest neighbour is closer than tau.
double fscore(std::span<const Vec3> pred, std::span<const Vec3> gt, double tau_cm = 1.0);

inline constexpr double kPsnrCap = 99.0;
// Images of equal shape with values in [0,1].
double psnr(const Image& a, const Image& b);
// 11x11 Gaussian window (sigma 1.5, truncated and renormalized at borders),
// K1 = 0.01, K2 = 0.03, averaged over pixels and channels.
double ssim(const Image& a, const Image& b);
// Perceptual proxy distance between two RGB images.
double perceptual_distance(const Image& a, const Image& b);

struct MetricsReport {
  double cd_p2s = 0, cd_s2p = 0, nc = 0, fscore = 0;
  double psnr_front = 0, psnr_back = 0, ssim_front = 0, ssim_back = 0;
  double perceptual_front = 0, perceptual_back = 0;
  double fscore_tau_cm = 1.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  int samples = 1;  // number of scans averaged into this report

  bool all_finite() const;
  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
  // Running mean with another report; metadata is kept from *this.
  void accumulate(const MetricsReport& other);
  // Aligned text table with the CD / NC / f-score and PSNR / SSIM columns.
  std::string table() const;
};

struct EvalSettings {
  std::size_t gt_samples = 2000;
  std::uint64_t sample_seed = 1;
  float opacity_threshold = 0.5f;
  double tau_cm = 1.0;
  int width = 64, height = 64;
  float radius = 1.5f, fov = 49.0f;
  float background = 0.0f;
};

// 3D metrics between GT surface samples and the centres of Gaussians with
// opacity above the threshold (each centre borrows the normal of its nearest
// GT sample for NC); 2D metrics on azimuth 0 / 180 renders against the GT
// rasterization. Throws EmptyPrediction when no Gaussian survives the filter.
// The 3D half alone: cd_p2s, cd_s2p, nc and fscore.
MetricsReport evaluate_geometry(const GaussianSet& pred, const TriangleMesh& gt, const EvalSettings& settings);
MetricsReport evaluate_reconstruction(const GaussianSet& pred, const TriangleMesh& gt, const EvalSettings& settings);

}  // namespace sat
