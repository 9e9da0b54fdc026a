#include "sat/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include <Eigen/Geometry>

#include "sat/rng.hpp"

namespace sat {

void TriangleMesh::validate() const {
  const auto n = static_cast<int>(vertices.size());
  if (!colors.empty() && colors.size() != vertices.size()) throw std::invalid_argument("mesh colour count mismatch");
  if (!normals.empty() && normals.size() != vertices.size()) throw std::invalid_argument("mesh normal count mismatch");
  for (std::size_t t = 0; t < triangles.size(); ++t) {
    for (int idx : triangles[t]) {
      if (idx < 0 || idx >= n) {
        throw std::invalid_argument("triangle " + std::to_string(t) + " references vertex " + std::to_string(idx) +
                                    " of " + std::to_string(n));
      }
    }
  }
  for (std::size_t i = 0; i < normals.size(); ++i) {
    if (std::abs(normals[i].norm() - 1.0f) > 1e-4f) {
      throw std::invalid_argument("vertex normal " + std::to_string(i) + " is not unit length");
    }
  }
}

void TriangleMesh::recompute_normals() {
  normals.assign(vertices.size(), Vec3::Zero());
  for (const auto& t : triangles) {
    // Cross product magnitude is twice the area, so this is area weighted.
    const Vec3 fn = (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]);
    for (int idx : t) normals[idx] += fn;
  }
  for (auto& nrm : normals) {
    const float len = nrm.norm();
    nrm = len > 1e-12f ? Vec3(nrm / len) : Vec3(0, 0, 1);
  }
}

void TriangleMesh::append(const TriangleMesh& other) {
  const int offset = static_cast<int>(vertices.size());
  const bool keep_colors = colors.size() == vertices.size() && other.colors.size() == other.vertices.size();
  vertices.insert(vertices.end(), other.vertices.begin(), other.vertices.end());
  if (keep_colors) colors.insert(colors.end(), other.colors.begin(), other.colors.end());
  normals.insert(normals.end(), other.normals.begin(), other.normals.end());
  for (auto t : other.triangles) {
    for (int& idx : t) idx += offset;
    triangles.push_back(t);
  }
  if (colors.size() != vertices.size()) colors.clear();
  if (normals.size() != vertices.size()) recompute_normals();
}

PointCloud sample_surface_points(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("sample_surface_points: n must be positive");
  if (mesh.empty()) throw std::invalid_argument("sample_surface_points: mesh is empty");

  std::vector<double> cumulative(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tri = mesh.triangles[t];
    const Vec3& a = mesh.vertices[tri[0]];
    total += 0.5 * static_cast<double>((mesh.vertices[tri[1]] - a).cross(mesh.vertices[tri[2]] - a).norm());
    cumulative[t] = total;
  }
  if (!(total > 0.0)) throw std::invalid_argument("sample_surface_points: mesh has zero area");

  const bool smooth = mesh.normals.size() == mesh.vertices.size();
  Rng rng(seed);
  PointCloud out;
  out.positions.reserve(n);
  out.normals.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pick = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    if (it == cumulative.end()) --it;
    const auto& tri = mesh.triangles[static_cast<std::size_t>(it - cumulative.begin())];
    const float r1 = static_cast<float>(std::sqrt(rng.uniform()));
    const float r2 = static_cast<float>(rng.uniform());
    const float wa = 1.0f - r1, wb = r1 * (1.0f - r2), wc = r1 * r2;
    const Vec3 &a = mesh.vertices[tri[0]], &b = mesh.vertices[tri[1]], &c = mesh.vertices[tri[2]];
    out.positions.push_back(wa * a + wb * b + wc * c);
    Vec3 nrm = smooth ? Vec3(wa * mesh.normals[tri[0]] + wb * mesh.normals[tri[1]] + wc * mesh.normals[tri[2]])
                      : Vec3((b - a).cross(c - a));
    if (nrm.norm() < 1e-12f) nrm = (b - a).cross(c - a);
    out.normals.push_back(nrm.normalized());
  }
  return out;
}

TriangleMesh make_uv_sphere(float radius, int rings, int segments, const Vec3& color) {
  TriangleMesh m;
  auto add = [&](const Vec3& n) {
    m.vertices.push_back(radius * n);
    m.normals.push_back(n.normalized());
    m.colors.push_back(color);
  };
  add(Vec3(0, 1, 0));
  for (int r = 1; r < rings; ++r) {
    const float theta = static_cast<float>(M_PI) * static_cast<float>(r) / static_cast<float>(rings);
    for (int s = 0; s < segments; ++s) {
      const float phi = 2.0f * static_cast<float>(M_PI) * static_cast<float>(s) / static_cast<float>(segments);
      add(Vec3(std::sin(theta) * std::sin(phi), std::cos(theta), std::sin(theta) * std::cos(phi)));
    }
  }
  add(Vec3(0, -1, 0));
  const int bottom = static_cast<int>(m.vertices.size()) - 1;
  auto ring = [&](int r, int s) { return 1 + (r - 1) * segments + (s % segments); };
  for (int s = 0; s < segments; ++s) m.triangles.push_back({0, ring(1, s), ring(1, s + 1)});
  for (int r = 1; r + 1 < rings; ++r) {
    for (int s = 0; s < segments; ++s) {
      m.triangles.push_back({ring(r, s), ring(r + 1, s), ring(r, s + 1)});
      m.triangles.push_back({ring(r, s + 1), ring(r + 1, s), ring(r + 1, s + 1)});
    }
  }
  for (int s = 0; s < segments; ++s) m.triangles.push_back({bottom, ring(rings - 1, s + 1), ring(rings - 1, s)});
  return m;
}

void write_obj(const std::filesystem::path& path, const TriangleMesh& mesh) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.precision(9);  // max_digits10 for float: text round trips exactly
  const bool has_colors = mesh.colors.size() == mesh.vertices.size();
  const bool has_normals = mesh.normals.size() == mesh.vertices.size();
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const auto& v = mesh.vertices[i];
    out << "v " << v.x() << ' ' << v.y() << ' ' << v.z();
    if (has_colors) out << ' ' << mesh.colors[i].x() << ' ' << mesh.colors[i].y() << ' ' << mesh.colors[i].z();
    out << '\n';
  }
  if (has_normals)
    for (const auto& n : mesh.normals) out << "vn " << n.x() << ' ' << n.y() << ' ' << n.z() << '\n';
  for (const auto& t : mesh.triangles) {
    out << 'f';
    for (int idx : t) {
      out << ' ' << idx + 1;
      if (has_normals) out << "//" << idx + 1;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

TriangleMesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  TriangleMesh m;
  std::vector<Vec3> vn;
  std::vector<std::pair<int, int>> vertex_normal;  // (vertex, normal) references
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& what) {
    throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      std::vector<float> vals;
      float x;
      while (ss >> x) vals.push_back(x);
      if (vals.size() != 3 && vals.size() != 6) fail("expected 3 or 6 values on a v line");
      m.vertices.emplace_back(vals[0], vals[1], vals[2]);
      if (vals.size() == 6) m.colors.emplace_back(vals[3], vals[4], vals[5]);
    } else if (tag == "vn") {
      float x, y, z;
      if (!(ss >> x >> y >> z)) fail("bad vn line");
      // Renormalize only foreign normals, so our own files read back bit-exact.
      const Vec3 n(x, y, z);
      vn.push_back(std::abs(n.norm() - 1.0f) < 1e-5f ? n : Vec3(n.normalized()));
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        const auto slash = tok.find('/');
        const int v = std::stoi(tok.substr(0, slash)) - 1;
        idx.push_back(v);
        const auto last = tok.rfind('/');
        if (slash != std::string::npos && last + 1 < tok.size()) {
          vertex_normal.emplace_back(v, std::stoi(tok.substr(last + 1)) - 1);
        }
      }
      if (idx.size() < 3) fail("face with fewer than 3 vertices");
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) m.triangles.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  if (!m.colors.empty() && m.colors.size() != m.vertices.size()) m.colors.clear();
  if (!vn.empty() && !vertex_normal.empty()) {
    m.normals.assign(m.vertices.size(), Vec3::Zero());
    for (auto [v, n] : vertex_normal) {
      if (v < 0 || v >= static_cast<int>(m.vertices.size()) || n < 0 || n >= static_cast<int>(vn.size())) {
        throw std::runtime_error(path.string() + ": face index out of range");
      }
      m.normals[v] = vn[n];
    }
    for (const auto& n : m.normals)
      if (n.squaredNorm() == 0.0f) {
        m.recompute_normals();
        break;
      }
  } else {
    m.recompute_normals();
  }
  m.validate();
  return m;
}

}  // namespace sat
