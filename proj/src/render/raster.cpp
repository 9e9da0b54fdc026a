#include "sat/raster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Geometry>

namespace sat {

namespace {

constexpr float kNear = 0.01f;

double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

struct Fragment {
  int triangle = -1;
  float b[3] = {0, 0, 0};  // perspective-correct barycentrics
  float depth = std::numeric_limits<float>::infinity();
};

}  // namespace

const char* render_mode_name(RenderMode mode) {
  switch (mode) {
    case RenderMode::rgb: return "rgb";
    case RenderMode::normal: return "normal";
    case RenderMode::normal_world: return "normal_world";
    case RenderMode::mask: return "mask";
    case RenderMode::depth: return "depth";
  }
  return "?";
}

RenderMode parse_render_mode(const std::string& name) {
  for (auto m : {RenderMode::rgb, RenderMode::normal, RenderMode::normal_world, RenderMode::mask, RenderMode::depth})
    if (name == render_mode_name(m)) return m;
  throw std::invalid_argument("unknown render mode '" + name + "'");
}

int render_mode_channels(RenderMode mode) {
  return mode == RenderMode::mask || mode == RenderMode::depth ? 1 : 3;
}

RenderTarget rasterize(const TriangleMesh& mesh, const CameraPose& cam, RenderMode mode, float background) {
  if (cam.width <= 0 || cam.height <= 0) throw std::invalid_argument("rasterize: empty image dimensions");
  if (!cam.rotation.allFinite() || !cam.translation.allFinite() || !std::isfinite(cam.focal()) ||
      !(cam.focal() > 0.0f)) {
    throw std::invalid_argument("rasterize: degenerate camera");
  }
  mesh.validate();

  const int W = cam.width, H = cam.height;
  std::vector<Fragment> frags(static_cast<std::size_t>(W) * H);
  std::vector<Eigen::Vector3f> proj(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) proj[i] = cam.project(mesh.vertices[i]);

  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tri = mesh.triangles[t];
    const Eigen::Vector3f &a = proj[tri[0]], &b = proj[tri[1]], &c = proj[tri[2]];
    if (a.z() < kNear || b.z() < kNear || c.z() < kNear) continue;
    const double area = edge(a.x(), a.y(), b.x(), b.y(), c.x(), c.y());
    if (std::abs(area) < 1e-12) continue;

    const int x0 = std::max(0, static_cast<int>(std::floor(std::min({a.x(), b.x(), c.x()}) - 0.5f)));
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(std::max({a.x(), b.x(), c.x()}) - 0.5f)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min({a.y(), b.y(), c.y()}) - 0.5f)));
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(std::max({a.y(), b.y(), c.y()}) - 0.5f)));
    const double inv_da = 1.0 / a.z(), inv_db = 1.0 / b.z(), inv_dc = 1.0 / c.z();

    for (int y = y0; y <= y1; ++y) {
      const double py = y + 0.5;
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5;
        const double w0 = edge(b.x(), b.y(), c.x(), c.y(), px, py) / area;
        const double w1 = edge(c.x(), c.y(), a.x(), a.y(), px, py) / area;
        const double w2 = 1.0 - w0 - w1;
        if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;
        const double q0 = w0 * inv_da, q1 = w1 * inv_db, q2 = w2 * inv_dc;
        const double qs = q0 + q1 + q2;
        const auto depth = static_cast<float>(1.0 / qs);
        Fragment& f = frags[static_cast<std::size_t>(y) * W + x];
        // Triangles arrive in index order, so strict < keeps the lower index on ties.
        if (depth < f.depth) {
          f.depth = depth;
          f.triangle = static_cast<int>(t);
          f.b[0] = static_cast<float>(q0 / qs);
          f.b[1] = static_cast<float>(q1 / qs);
          f.b[2] = static_cast<float>(q2 / qs);
        }
      }
    }
  }

  RenderTarget out;
  out.mode = mode;
  out.background = background;
  out.image = Image(W, H, render_mode_channels(mode), background);
  out.coverage.assign(frags.size(), 0);
  const bool has_colors = mesh.colors.size() == mesh.vertices.size();
  const bool has_normals = mesh.normals.size() == mesh.vertices.size();

  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t pix = static_cast<std::size_t>(y) * W + x;
      const Fragment& f = frags[pix];
      if (f.triangle < 0) continue;
      out.coverage[pix] = 1;
      const auto& tri = mesh.triangles[static_cast<std::size_t>(f.triangle)];
      switch (mode) {
        case RenderMode::mask: out.image.at(y, x, 0) = 1.0f; break;
        case RenderMode::depth: out.image.at(y, x, 0) = f.depth; break;
        case RenderMode::rgb: {
          Vec3 c(0.8f, 0.8f, 0.8f);
          if (has_colors) c = f.b[0] * mesh.colors[tri[0]] + f.b[1] * mesh.colors[tri[1]] + f.b[2] * mesh.colors[tri[2]];
          for (int k = 0; k < 3; ++k) out.image.at(y, x, k) = c[k];
          break;
        }
        case RenderMode::normal:
        case RenderMode::normal_world: {
          const Vec3 &va = mesh.vertices[tri[0]], &vb = mesh.vertices[tri[1]], &vc = mesh.vertices[tri[2]];
          Vec3 n = has_normals ? Vec3(f.b[0] * mesh.normals[tri[0]] + f.b[1] * mesh.normals[tri[1]] +
                                      f.b[2] * mesh.normals[tri[2]])
                               : Vec3((vb - va).cross(vc - va));
          if (n.norm() < 1e-12f) n = (vb - va).cross(vc - va);
          n.normalize();
          if (mode == RenderMode::normal) n = cam.rotation * n;
          for (int k = 0; k < 3; ++k) out.image.at(y, x, k) = 0.5f * (n[k] + 1.0f);
          break;
        }
      }
    }
  }
  return out;
}

}  // namespace sat
