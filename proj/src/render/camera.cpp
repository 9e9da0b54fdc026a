#include "sat/camera.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Geometry>

namespace sat {

namespace {
constexpr float kDegToRad = static_cast<float>(M_PI / 180.0);

// Exact at multiples of 90 degrees so axis-aligned cameras get exact 0/1
// rotation entries.
std::pair<float, float> sincos_deg(float deg) {
  const double r = std::fmod(static_cast<double>(deg), 360.0);
  const double q = r / 90.0;
  if (q == std::round(q)) {
    static constexpr float s[4] = {0, 1, 0, -1};
    const int k = ((static_cast<int>(std::round(q)) % 4) + 4) % 4;
    return {s[k], s[(k + 1) % 4]};
  }
  const double rad = r * M_PI / 180.0;
  return {static_cast<float>(std::sin(rad)), static_cast<float>(std::cos(rad))};
}
}  // namespace

float CameraPose::focal() const { return 0.5f * static_cast<float>(height) / std::tan(0.5f * fov * kDegToRad); }

Eigen::Vector3f CameraPose::project(const Eigen::Vector3f& world) const {
  const Eigen::Vector3f p = to_camera(world);
  const float depth = -p.z();
  const float f = focal();
  return {cx() + f * p.x() / depth, cy() - f * p.y() / depth, depth};
}

Eigen::Vector3f CameraPose::ray_direction(float u, float v) const {
  const float f = focal();
  const Eigen::Vector3f d((u - cx()) / f, -(v - cy()) / f, -1.0f);
  return rotation.transpose() * d.normalized();
}

CameraPose orbit_camera(float azimuth, float elevation, float radius, float fov, int width, int height) {
  if (!(std::abs(elevation) < 90.0f)) throw std::invalid_argument("camera elevation must be within (-90, 90)");
  if (!(radius > 0.0f)) throw std::invalid_argument("camera radius must be positive");
  if (!(fov > 0.0f && fov < 180.0f)) throw std::invalid_argument("camera fov must be within (0, 180)");
  if (width <= 0 || height <= 0) {
    throw std::invalid_argument("image size " + std::to_string(width) + "x" + std::to_string(height) + " is empty");
  }
  CameraPose cam;
  cam.azimuth = azimuth;
  cam.elevation = elevation;
  cam.radius = radius;
  cam.fov = fov;
  cam.width = width;
  cam.height = height;

  const auto [saz, caz] = sincos_deg(azimuth);
  const auto [sel, cel] = sincos_deg(elevation);
  const Eigen::Vector3f eye = radius * Eigen::Vector3f(cel * saz, sel, cel * caz);
  const Eigen::Vector3f forward = (-eye).normalized();
  const Eigen::Vector3f right = forward.cross(Eigen::Vector3f::UnitY()).normalized();
  const Eigen::Vector3f up = right.cross(forward);
  cam.rotation.row(0) = right;
  cam.rotation.row(1) = up;
  cam.rotation.row(2) = -forward;
  cam.translation = -cam.rotation * eye;
  return cam;
}

std::array<CameraPose, 4> four_orthogonal_views(float radius, float fov, int width, int height) {
  return {orbit_camera(0, 0, radius, fov, width, height), orbit_camera(180, 0, radius, fov, width, height),
          orbit_camera(90, 0, radius, fov, width, height), orbit_camera(270, 0, radius, fov, width, height)};
}

}  // namespace sat
