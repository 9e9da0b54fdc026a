#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace sat {

using Vec3 = Eigen::Vector3f;

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<Vec3> colors;   // per vertex, [0,1]
  std::vector<Vec3> normals;  // per vertex, unit

  std::size_t num_vertices() const { return vertices.size(); }
  bool empty() const { return triangles.empty(); }

  // Throws std::invalid_argument on out-of-range indices, mismatched
  // attribute counts or non-unit normals.
  void validate() const;
  // Area-weighted vertex normals from the current triangles.
  void recompute_normals();
  // Appends another mesh, offsetting its indices.
  void append(const TriangleMesh& other);
};

// Surface samples with their interpolated unit normals.
struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> normals;
  std::size_t size() const { return positions.size(); }
};

// Area-weighted uniform sampling, deterministic for a given seed.
PointCloud sample_surface_points(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed);

// Axis-aligned quad and UV sphere, mostly used as fixtures.
TriangleMesh make_uv_sphere(float radius, int rings, int segments, const Vec3& color = Vec3(0.8f, 0.8f, 0.8f));

// OBJ subset: "v x y z [r g b]", "vn", "f a//na b//nb c//nc". Vertex colours
// use the widespread six-value v line extension.
void write_obj(const std::filesystem::path& path, const TriangleMesh& mesh);
TriangleMesh read_obj(const std::filesystem::path& path);

}  // namespace sat
