#pragma once

#include <array>

#include <Eigen/Core>

namespace sat {

// Orbit camera looking at the origin with +Y up.
//
// Camera space follows the OpenGL convention (x right, y up, looking down -z);
// normal maps are expressed in it. Projection uses the equivalent
// x-right/y-down/z-forward frame so pixel rows grow downwards:
//   u = cx + f * x / depth,  v = cy - f * y / depth,  depth = -z.
struct CameraPose {
  float azimuth = 0.0f;    // degrees, 0 on +Z, 90 on +X
  float elevation = 0.0f;  // degrees
  float radius = 1.5f;
  float fov = 49.0f;  // vertical, degrees
  int width = 64;
  int height = 64;

  Eigen::Matrix3f rotation;     // world -> camera
  Eigen::Vector3f translation;  // world -> camera

  Eigen::Vector3f position() const { return -rotation.transpose() * translation; }
  float focal() const;  // pixels
  float cx() const { return 0.5f * static_cast<float>(width); }
  float cy() const { return 0.5f * static_cast<float>(height); }

  Eigen::Vector3f to_camera(const Eigen::Vector3f& world) const { return rotation * world + translation; }
  // (u, v, depth) of a world point.
  Eigen::Vector3f project(const Eigen::Vector3f& world) const;
  // Unit world-space direction of the ray through pixel coordinate (u, v).
  Eigen::Vector3f ray_direction(float u, float v) const;
};

// Throws std::invalid_argument when |elevation| >= 90, radius <= 0, fov is
// outside (0, 180) or the image is empty.
CameraPose orbit_camera(float azimuth, float elevation, float radius, float fov, int width, int height);

// Front, back, left and right: azimuths 0, 180, 90, 270.
std::array<CameraPose, 4> four_orthogonal_views(float radius, float fov, int width, int height);

}  // namespace sat
