#pragma once

// Multi-view U-Net with cross-view self-attention and a pixel-aligned
// Gaussian head. One architecture serves every stage; only the number of
// input views and their roles change.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sat/camera.hpp"
#include "sat/checkpoint.hpp"
#include "sat/optim.hpp"
#include "sat/splat.hpp"
#include "sat/tensor.hpp"

namespace sat {

enum class ViewRole : int { front, back, left, right, input_image, source, template_mesh };
inline constexpr int kRoleCount = 7;
const char* view_role_name(ViewRole role);

struct ReconNetConfig {
  int views = 4;
  int in_channels = 3;
  int width = 32;  // channels after conv_in; deeper levels use 2x and 4x
  int levels = 3;  // down blocks; up blocks mirror them
  int out_channels = kGaussianParams;
  // Head: centres sit on the pixel ray between these distances.
  float depth_near = 0.6f;
  float depth_far = 2.4f;
  float offset_range = 0.1f;
  float scale_unit = 0.02f;

  std::string to_json() const;
  static ReconNetConfig from_json(const std::string& text);
  // Throws std::invalid_argument on unusable values.
  void validate() const;
};

struct ViewBundle {
  Tensor images;  // [V, C, H, W]
  std::vector<CameraPose> cameras;
  std::vector<ViewRole> roles;

  // Throws ShapeError when the bundle does not fit the config.
  void validate(const ReconNetConfig& cfg) const;
};

// Block name -> activation captured right after that block.
using FeatureTaps = std::map<std::string, Tensor>;

struct NetOutput {
  Tensor grids;  // [V, 14, H, W] raw head values
  FeatureTaps taps;
};

class ReconNet {
 public:
  // Same (config, seed) gives bit-identical parameters.
  ReconNet(const ReconNetConfig& config, std::uint64_t seed);

  // Taps hold {mid, up1..upK}; encoder taps (down1..downK) are added only
  // when asked for.
  NetOutput forward(const ViewBundle& bundle, bool encoder_taps = false) const;

  const ReconNetConfig& config() const { return config_; }
  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<std::string> tap_names(bool encoder_taps = false) const;

  // Header is a JSON object {"net": config, "meta": meta}.
  Checkpoint to_checkpoint(const std::string& meta_json = "{}") const;
  static ReconNet from_checkpoint(const Checkpoint& ckpt);

 private:
  struct Conv {
    Tensor w, b;
    int stride = 1, pad = 1;
  };
  struct Norm {
    Tensor gamma, beta;
    int groups = 1;
  };
  struct ResBlock {
    Norm n1, n2;
    Conv c1, c2;
    Conv skip;  // 1x1, only when channels change
    bool has_skip = false;
  };
  struct Attention {
    Norm norm;
    Tensor wq, wk, wv, wo;
    Tensor embed;  // [kRoleCount + 4, D]: role rows, then direction rows
  };

  Tensor add_param(const std::string& name, Shape shape, double stddev, double fill = 0.0);
  Conv make_conv(const std::string& name, int cin, int cout, int k);
  Norm make_norm(const std::string& name, int c);
  ResBlock make_block(const std::string& name, int cin, int cout);
  Attention make_attention(const std::string& name, int c);

  Tensor run(const Conv& c, const Tensor& x) const;
  Tensor run(const Norm& n, const Tensor& x) const;
  Tensor run(const ResBlock& b, const Tensor& x) const;
  Tensor run(const Attention& a, const Tensor& x, const Tensor& token_embed_onehot) const;

  ReconNetConfig config_;
  std::uint64_t seed_;
  std::vector<NamedParam> params_;
  Conv conv_in_, conv_out_;
  Norm norm_out_;
  std::vector<ResBlock> down_, up_;
  ResBlock mid_;
  Attention mid_attn_;
  std::vector<Attention> up_attn_;  // for up1, up2
};

// Index of the orthogonal direction nearest to the camera azimuth:
// 0 front, 1 back, 2 left, 3 right.
int view_direction(const CameraPose& cam);

// Differentiable head: [V, 14, H, W] raw values -> [V*H*W, 14] Gaussian
// parameters, pixel-major within each view.
//   centre  = o + d * (near + sigmoid(r0) * (far - near))
//             + offset_range * (tanh(r1) * right + tanh(r2) * up)
//   scale   = softplus(r3..5) * scale_unit + 1e-4
//   q       = r6..9 + (1, 0, 0, 0)
//   opacity = sigmoid(r10), colour = sigmoid(r11..13)
Tensor head_to_params(const Tensor& grids, const std::vector<CameraPose>& cameras, const ReconNetConfig& cfg);
GaussianSet head_to_gaussians(const Tensor& grids, const std::vector<CameraPose>& cameras,
                              const ReconNetConfig& cfg);

// Sum over `subset` of ||a_k - b_k||_2. b is detached, so no gradient ever
// reaches it.
Tensor tap_distance(const FeatureTaps& a, const FeatureTaps& b, const std::vector<std::string>& subset);

}  // namespace sat
