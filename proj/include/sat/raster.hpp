#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sat/camera.hpp"
#include "sat/image.hpp"
#include "sat/mesh.hpp"

namespace sat {

enum class RenderMode {
  rgb,           // interpolated vertex colours, 3 channels
  normal,        // camera-space normals encoded (n+1)/2, 3 channels
  normal_world,  // world-space normals encoded (n+1)/2, 3 channels
  mask,          // coverage, 1 channel
  depth,         // distance along the optical axis, 1 channel
};

const char* render_mode_name(RenderMode mode);
RenderMode parse_render_mode(const std::string& name);
int render_mode_channels(RenderMode mode);

struct RenderTarget {
  RenderMode mode = RenderMode::rgb;
  Image image;
  float background = 0.0f;
  std::vector<std::uint8_t> coverage;  // 1 where the depth buffer was written
};

// Z-buffered rasterization without back-face culling. Pixel (x, y) samples
// its centre (x + 0.5, y + 0.5). At equal depth the lower triangle index wins.
// Uncovered pixels hold `background` in every channel.
RenderTarget rasterize(const TriangleMesh& mesh, const CameraPose& cam, RenderMode mode, float background = 0.0f);

}  // namespace sat
