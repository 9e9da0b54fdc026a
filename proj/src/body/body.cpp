#include "sat/body.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "sat/binary_io.hpp"
#include "sat/checkpoint.hpp"
#include "sat/rng.hpp"

namespace sat {

namespace {

constexpr float kDeg = static_cast<float>(M_PI / 180.0);

float point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const float len2 = ab.squaredNorm();
  const float t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0f, 1.0f) : 0.0f;
  return (p - (a + t * ab)).norm();
}

struct CapsuleStyle {
  int segments;
  float ring_spacing;
  int cap_rings;
};

// Capsule around segment a-b. `t_along` receives each vertex's normalized
// position along the bone (0 at a, 1 at b, clamped) for colouring.
TriangleMesh make_capsule(const Vec3& a, const Vec3& b, float r, const CapsuleStyle& st, std::vector<float>* t_along) {
  TriangleMesh m;
  const Vec3 axis = b - a;
  const float len = axis.norm();
  const Vec3 u = len > 0 ? Vec3(axis / len) : Vec3(0, 1, 0);
  const Vec3 ref = std::abs(u.z()) < 0.9f ? Vec3(0, 0, 1) : Vec3(1, 0, 0);
  const Vec3 e1 = u.cross(ref).normalized();
  const Vec3 e2 = u.cross(e1);

  auto add = [&](const Vec3& p, const Vec3& n, float t) {
    m.vertices.push_back(p);
    m.normals.push_back(n.normalized());
    if (t_along) t_along->push_back(std::clamp(t, 0.0f, 1.0f));
  };
  // Ring profile: (offset along axis from a, radius, normal axial component).
  struct Ring {
    float along, radius, nz, nr;
  };
  std::vector<Ring> rings;
  for (int k = 1; k < st.cap_rings; ++k) {
    const float phi = 0.5f * static_cast<float>(M_PI) * static_cast<float>(k) / static_cast<float>(st.cap_rings);
    rings.push_back({-r * std::cos(phi), r * std::sin(phi), -std::cos(phi), std::sin(phi)});
  }
  const int body = std::max(1, static_cast<int>(std::ceil(len / st.ring_spacing)));
  for (int k = 0; k <= body; ++k) rings.push_back({len * static_cast<float>(k) / static_cast<float>(body), r, 0, 1});
  for (int k = st.cap_rings - 1; k >= 1; --k) {
    const float phi = 0.5f * static_cast<float>(M_PI) * static_cast<float>(k) / static_cast<float>(st.cap_rings);
    rings.push_back({len + r * std::cos(phi), r * std::sin(phi), std::cos(phi), std::sin(phi)});
  }

  const float inv_len = len > 0 ? 1.0f / len : 0.0f;
  add(a - r * u, -u, 0.0f);
  const int S = st.segments;
  for (const auto& ring : rings) {
    for (int s = 0; s < S; ++s) {
      const float th = 2.0f * static_cast<float>(M_PI) * static_cast<float>(s) / static_cast<float>(S);
      const Vec3 radial = std::cos(th) * e1 + std::sin(th) * e2;
      add(a + ring.along * u + ring.radius * radial, ring.nz * u + ring.nr * radial, ring.along * inv_len);
    }
  }
  add(b + r * u, u, 1.0f);
  const int last = static_cast<int>(m.vertices.size()) - 1;
  const int nr = static_cast<int>(rings.size());
  auto idx = [&](int ring, int s) { return 1 + ring * S + (s % S); };
  // Winding chosen so (v1-v0)x(v2-v0) points outwards.
  for (int s = 0; s < S; ++s) m.triangles.push_back({0, idx(0, s + 1), idx(0, s)});
  for (int k = 0; k + 1 < nr; ++k)
    for (int s = 0; s < S; ++s) {
      m.triangles.push_back({idx(k, s), idx(k, s + 1), idx(k + 1, s)});
      m.triangles.push_back({idx(k, s + 1), idx(k + 1, s + 1), idx(k + 1, s)});
    }
  for (int s = 0; s < S; ++s) m.triangles.push_back({last, idx(nr - 1, s), idx(nr - 1, s + 1)});
  return m;
}

Vec3 mix(const Vec3& a, const Vec3& b, float t) { return (1 - t) * a + t * b; }

Vec3 random_color(Rng& rng, float lo, float hi) {
  return Vec3(static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi)),
              static_cast<float>(rng.uniform(lo, hi)));
}

struct Palette {
  Vec3 skin, hair, shirt, shirt_alt, pants, shoes;
  bool stripes;
  float sleeve;  // fraction of the forearm covered by the sleeve
};

Palette make_palette(std::uint64_t seed) {
  Rng rng(seed);
  static const Vec3 skins[] = {{0.96f, 0.80f, 0.69f}, {0.87f, 0.67f, 0.52f}, {0.70f, 0.50f, 0.37f},
                               {0.45f, 0.31f, 0.22f}};
  Palette p;
  p.skin = skins[rng.uniform_int(0, 3)];
  p.hair = random_color(rng, 0.05f, 0.35f);
  p.shirt = random_color(rng, 0.1f, 0.95f);
  p.shirt_alt = mix(p.shirt, random_color(rng, 0.0f, 1.0f), 0.7f);
  p.pants = random_color(rng, 0.05f, 0.6f);
  p.shoes = random_color(rng, 0.0f, 0.3f);
  p.stripes = rng.bernoulli(0.5);
  p.sleeve = static_cast<float>(rng.uniform(0.0, 0.8));
  return p;
}

Vec3 vertex_color(const Palette& pal, int bone, const Vec3& pos, float t, const BoneSpec& spec) {
  switch (bone) {
    case kHead: return pos.y() > spec.head.y() + 0.65f * (spec.tail.y() - spec.head.y()) ? pal.hair : pal.skin;
    case kChest:
    case kSpine:
    case kLeftUpperArm:
    case kRightUpperArm: {
      const bool alt = pal.stripes && (static_cast<int>(std::floor(pos.y() / 0.04f)) & 1);
      return alt ? pal.shirt_alt : pal.shirt;
    }
    case kLeftForearm:
    case kRightForearm: return t < pal.sleeve ? pal.shirt : pal.skin;
    case kLeftShin:
    case kRightShin: return t > 0.85f ? pal.shoes : pal.pants;
    default: return pal.pants;
  }
}

bool inside_capsule(const Vec3& p, const Vec3& a, const Vec3& b, float r, float margin) {
  return point_segment_distance(p, a, b) < r - margin;
}

// Removes unreferenced vertices; `kept` receives the surviving input indices.
TriangleMesh compact(const TriangleMesh& in, const std::vector<std::array<int, 3>>& tris, std::vector<int>* kept) {
  TriangleMesh out;
  if (kept) kept->clear();
  std::vector<int> remap(in.vertices.size(), -1);
  const bool colors = in.colors.size() == in.vertices.size();
  for (auto t : tris) {
    for (int& i : t) {
      if (remap[i] < 0) {
        remap[i] = static_cast<int>(out.vertices.size());
        if (kept) kept->push_back(i);
        out.vertices.push_back(in.vertices[i]);
        out.normals.push_back(in.normals[i]);
        if (colors) out.colors.push_back(in.colors[i]);
      }
      i = remap[i];
    }
    out.triangles.push_back(t);
  }
  return out;
}

}  // namespace

const char* bone_name(int bone) {
  static const char* names[kBoneCount] = {"pelvis",         "spine",         "chest",       "head",
                                          "left_upper_arm", "left_forearm",  "right_upper_arm",
                                          "right_forearm",  "left_thigh",    "left_shin",   "right_thigh",
                                          "right_shin"};
  return bone >= 0 && bone < kBoneCount ? names[bone] : "?";
}

void SkeletonRig::validate() const {
  int roots = 0;
  for (std::size_t j = 0; j < bones.size(); ++j) {
    const int p = bones[j].parent;
    if (p < 0) {
      ++roots;
    } else if (p >= static_cast<int>(j)) {
      throw std::invalid_argument("bone " + std::to_string(j) + " has parent " + std::to_string(p) +
                                  " that does not precede it");
    }
  }
  if (roots != 1) throw std::invalid_argument("rig must have exactly one root, has " + std::to_string(roots));
}

ShapeParams ShapeParams::clamped() const {
  ShapeParams s = *this;
  for (auto& b : s.beta) b = std::clamp(b, -2.0f, 2.0f);
  return s;
}

std::vector<float> PoseParams::flatten() const {
  std::vector<float> v;
  for (const auto& r : rotation) v.insert(v.end(), {r.x(), r.y(), r.z()});
  v.insert(v.end(), {translation.x(), translation.y(), translation.z()});
  return v;
}

PoseParams PoseParams::unflatten(const std::vector<float>& v) {
  if (v.size() != 3 * kBoneCount + 3) throw std::invalid_argument("pose vector must have 39 values");
  PoseParams p;
  for (int j = 0; j < kBoneCount; ++j) p.rotation[j] = Vec3(v[3 * j], v[3 * j + 1], v[3 * j + 2]);
  p.translation = Vec3(v[36], v[37], v[38]);
  return p;
}

bool PoseParams::operator==(const PoseParams& o) const {
  return rotation == o.rotation && translation == o.translation;
}

JointLimits JointLimits::defaults() {
  JointLimits l;
  auto set = [&](int bone, Eigen::Vector3f lo, Eigen::Vector3f hi) {
    l.lo[bone] = lo;
    l.hi[bone] = hi;
  };
  // Right side mirrors the left: (x, y, z) -> (x, -y, -z).
  auto set_pair = [&](int left, int right, Eigen::Vector3f lo, Eigen::Vector3f hi) {
    set(left, lo, hi);
    set(right, {lo.x(), -hi.y(), -hi.z()}, {hi.x(), -lo.y(), -lo.z()});
  };
  set(kPelvis, {-10, -30, -10}, {10, 30, 10});
  set(kSpine, {-15, -20, -10}, {25, 20, 10});
  set(kChest, {-10, -20, -10}, {15, 20, 10});
  set(kHead, {-20, -45, -15}, {25, 45, 15});
  // Wide twist ranges on the arms are deliberate: they are where blended
  // skinning collapses (the candy-wrapper effect).
  set_pair(kLeftUpperArm, kRightUpperArm, {-70, -90, -25}, {60, 90, 60});
  set_pair(kLeftForearm, kRightForearm, {-90, -100, -10}, {0, 100, 10});
  set_pair(kLeftThigh, kRightThigh, {-60, -20, -10}, {20, 20, 30});
  set_pair(kLeftShin, kRightShin, {0, -5, -5}, {90, 5, 5});
  return l;
}

JointLimits JointLimits::zero() {
  JointLimits l;
  l.lo.fill(Eigen::Vector3f::Zero());
  l.hi.fill(Eigen::Vector3f::Zero());
  return l;
}

SkeletonRig make_rig(const ShapeParams& shape_in) {
  const auto b = shape_in.clamped().beta;
  const float height = 1 + 0.04f * b[0], arm = 1 + kArmLengthPerUnit * b[1], leg = 1 + 0.08f * b[2];
  const float shoulder = 1 + 0.1f * b[3], limb = 1 + 0.12f * b[4], torso = 1 + 0.1f * b[5];
  const float head = 1 + 0.1f * b[6], hip = 1 + 0.1f * b[7];

  SkeletonRig rig;
  rig.bones.resize(kBoneCount);
  auto bone = [&](int j, int parent, Vec3 h, Vec3 t, float r) { rig.bones[j] = {parent, h, t, r}; };
  bone(kPelvis, -1, {0, -0.02f, 0}, {0, 0.12f, 0}, 0.12f * hip);
  bone(kSpine, kPelvis, {0, 0.12f, 0}, {0, 0.30f, 0}, 0.11f * torso);
  bone(kChest, kSpine, {0, 0.30f, 0}, {0, 0.48f, 0}, 0.13f * torso);
  bone(kHead, kChest, {0, 0.51f, 0}, {0, 0.51f + 0.17f * head, 0}, 0.10f * head);

  // A-pose: arms 40 degrees out from hanging straight down.
  const Vec3 arm_dir(std::sin(40 * kDeg), -std::cos(40 * kDeg), 0);
  for (int side = 0; side < 2; ++side) {
    const float sx = side == 0 ? 1.0f : -1.0f;
    const Vec3 dir(sx * arm_dir.x(), arm_dir.y(), 0);
    const Vec3 sh(sx * 0.17f * shoulder, 0.45f, 0);
    const Vec3 elbow = sh + 0.27f * arm * dir;
    const Vec3 wrist = elbow + 0.25f * arm * dir;
    const int upper = side == 0 ? kLeftUpperArm : kRightUpperArm;
    bone(upper, kChest, sh, elbow, 0.045f * limb);
    bone(upper + 1, upper, elbow, wrist, 0.038f * limb);

    const Vec3 hj(sx * 0.085f * hip, -0.02f, 0);
    const Vec3 knee = hj - Vec3(0, 0.42f * leg, 0);
    const Vec3 ankle = knee - Vec3(0, 0.38f * leg, 0);
    const int thigh = side == 0 ? kLeftThigh : kRightThigh;
    bone(thigh, kPelvis, hj, knee, 0.065f * limb);
    bone(thigh + 1, thigh, knee, ankle, 0.048f * limb);
  }
  for (auto& bs : rig.bones) {
    bs.head *= height;
    bs.tail *= height;
    bs.radius *= height;
  }
  return rig;
}

void SkinnedMesh::validate() const {
  mesh.validate();
  rig.validate();
  const std::size_t n = mesh.vertices.size();
  if (weights.size() != n * kBoneCount) throw std::invalid_argument("skinning weight table has the wrong size");
  if (part.size() != n) throw std::invalid_argument("part table has the wrong size");
  for (std::size_t i = 0; i < n; ++i) {
    float sum = 0;
    int nonzero = 0;
    for (int j = 0; j < kBoneCount; ++j) {
      const float w = weights[i * kBoneCount + j];
      if (w < 0) throw std::invalid_argument("negative skinning weight");
      sum += w;
      nonzero += w > 0;
    }
    if (std::abs(sum - 1.0f) > 1e-5f || nonzero > 4) {
      throw std::invalid_argument("skinning row " + std::to_string(i) + " is not a normalized top-4 row");
    }
  }
}

SkinnedMesh make_humanoid(const ShapeParams& shape, std::uint64_t palette_seed) {
  SkinnedMesh out;
  out.shape = shape.clamped();
  out.rig = make_rig(out.shape);
  out.palette_seed = palette_seed;
  const Palette pal = make_palette(palette_seed);
  const CapsuleStyle style{16, 0.025f, 5};

  for (int j = 0; j < kBoneCount; ++j) {
    const auto& bs = out.rig.bones[j];
    std::vector<float> t;
    TriangleMesh cap = make_capsule(bs.head, bs.tail, bs.radius, style, &t);
    cap.colors.resize(cap.vertices.size());
    for (std::size_t i = 0; i < cap.vertices.size(); ++i) cap.colors[i] = vertex_color(pal, j, cap.vertices[i], t[i], bs);
    out.part.insert(out.part.end(), cap.vertices.size(), j);
    out.mesh.append(cap);
  }

  // Falloff on the distance to each capsule surface, own bone pinned at 0.
  constexpr float kFalloff = 0.02f;
  const std::size_t n = out.mesh.vertices.size();
  out.weights.assign(n * kBoneCount, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<float, kBoneCount> w{};
    for (int j = 0; j < kBoneCount; ++j) {
      const auto& bs = out.rig.bones[j];
      const float gap =
          j == out.part[i] ? 0.0f
                           : std::max(0.0f, point_segment_distance(out.mesh.vertices[i], bs.head, bs.tail) - bs.radius);
      w[j] = std::exp(-gap / kFalloff);
    }
    std::array<int, kBoneCount> order;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return w[a] > w[b]; });
    float sum = 0;
    for (int k = 0; k < 4; ++k) sum += w[order[k]];
    for (int k = 0; k < 4; ++k) out.weights[i * kBoneCount + order[k]] = w[order[k]] / sum;
  }
  return out;
}

std::vector<Eigen::Isometry3f> forward_kinematics(const SkeletonRig& rig, const PoseParams& pose) {
  rig.validate();
  if (rig.bones.size() != kBoneCount) throw std::invalid_argument("rig must have 12 bones");
  std::vector<Eigen::Isometry3f> g(rig.bones.size());
  for (std::size_t j = 0; j < rig.bones.size(); ++j) {
    const auto& bs = rig.bones[j];
    const Vec3& aa = pose.rotation[j];
    const float angle = aa.norm();
    const Eigen::Matrix3f R =
        angle > 0 ? Eigen::AngleAxisf(angle, aa / angle).toRotationMatrix() : Eigen::Matrix3f::Identity();
    Eigen::Isometry3f local = Eigen::Isometry3f::Identity();
    local.linear() = R;
    local.translation() = bs.head - R * bs.head;
    if (bs.parent < 0) {
      g[j] = Eigen::Translation3f(pose.translation) * local;
    } else {
      g[j] = g[static_cast<std::size_t>(bs.parent)] * local;
    }
  }
  return g;
}

std::vector<Vec3> lbs_apply(const std::vector<Vec3>& vertices, const std::vector<float>& weights,
                            const std::vector<Eigen::Isometry3f>& transforms) {
  const std::size_t m = transforms.size();
  if (weights.size() != vertices.size() * m) throw std::invalid_argument("lbs_apply: weight table size mismatch");
  std::vector<Vec3> out(vertices.size());
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    Eigen::Matrix3f R = Eigen::Matrix3f::Zero();
    Vec3 t = Vec3::Zero();
    for (std::size_t j = 0; j < m; ++j) {
      const float w = weights[i * m + j];
      if (w == 0.0f) continue;
      R += w * transforms[j].linear();
      t += w * transforms[j].translation();
    }
    out[i] = R * vertices[i] + t;
  }
  return out;
}

TriangleMesh lbs_deform(const SkinnedMesh& mesh, const PoseParams& pose) {
  TriangleMesh out = mesh.mesh;
  out.vertices = lbs_apply(mesh.mesh.vertices, mesh.weights, forward_kinematics(mesh.rig, pose));
  out.recompute_normals();
  return out;
}

TriangleMesh pose_scan(const SkinnedMesh& mesh, const PoseParams& pose, std::vector<int>* source_vertex) {
  const auto g = forward_kinematics(mesh.rig, pose);
  TriangleMesh posed = mesh.mesh;
  for (std::size_t i = 0; i < posed.vertices.size(); ++i) {
    const auto& G = g[static_cast<std::size_t>(mesh.part[i])];
    posed.vertices[i] = G * mesh.mesh.vertices[i];
    posed.normals[i] = (G.linear() * mesh.mesh.normals[i]).normalized();
  }
  std::vector<std::pair<Vec3, Vec3>> seg(kBoneCount);
  for (int j = 0; j < kBoneCount; ++j) seg[j] = {g[j] * mesh.rig.bones[j].head, g[j] * mesh.rig.bones[j].tail};

  std::vector<std::array<int, 3>> kept;
  for (const auto& t : mesh.mesh.triangles) {
    const Vec3 c = (posed.vertices[t[0]] + posed.vertices[t[1]] + posed.vertices[t[2]]) / 3.0f;
    const int own = mesh.part[t[0]];
    bool hidden = false;
    for (int j = 0; j < kBoneCount && !hidden; ++j)
      hidden = j != own && inside_capsule(c, seg[j].first, seg[j].second, mesh.rig.bones[j].radius, 0.003f);
    if (!hidden) kept.push_back(t);
  }
  return compact(posed, kept, source_vertex);
}

TriangleMesh skeleton_template_mesh(const SkeletonRig& rig, const PoseParams& pose) {
  const auto g = forward_kinematics(rig, pose);
  const CapsuleStyle style{8, 0.08f, 2};
  TriangleMesh out;
  for (int j = 0; j < kBoneCount; ++j) {
    const auto& bs = rig.bones[j];
    TriangleMesh cap = make_capsule(g[j] * bs.head, g[j] * bs.tail, bs.radius, style, nullptr);
    cap.colors.assign(cap.vertices.size(), Vec3::Constant(0.7f));
    out.append(cap);
  }
  return out;
}

PoseParams sample_pose(std::uint64_t seed, const JointLimits& limits) {
  Rng rng(seed);
  PoseParams p;
  for (int j = 0; j < kBoneCount; ++j)
    for (int k = 0; k < 3; ++k)
      p.rotation[j][k] = static_cast<float>(rng.uniform(limits.lo[j][k], limits.hi[j][k])) * kDeg;
  return p;
}

PoseParams extreme_pose(std::uint64_t seed, const JointLimits& limits) {
  Rng rng(seed);
  PoseParams p;
  for (int j = 0; j < kBoneCount; ++j)
    for (int k = 0; k < 3; ++k) p.rotation[j][k] = (rng.bernoulli(0.5) ? limits.hi[j][k] : limits.lo[j][k]) * kDeg;
  return p;
}

float max_edge_stretch(const TriangleMesh& rest, const TriangleMesh& deformed) {
  if (rest.triangles != deformed.triangles) throw std::invalid_argument("max_edge_stretch: topology differs");
  float worst = 0.0f;
  for (const auto& t : rest.triangles)
    for (int k = 0; k < 3; ++k) {
      const int a = t[k], b = t[(k + 1) % 3];
      const float l0 = (rest.vertices[a] - rest.vertices[b]).norm();
      if (l0 < 1e-6f) continue;
      worst = std::max(worst, (deformed.vertices[a] - deformed.vertices[b]).norm() / l0);
    }
  return worst;
}

ShapeParams sample_shape(std::uint64_t seed) {
  Rng rng(seed);
  ShapeParams s;
  for (auto& b : s.beta) b = static_cast<float>(std::clamp(rng.normal() * 0.8, -2.0, 2.0));
  return s;
}

const Identity& Dataset::identity(int id) const {
  for (const auto& i : identities)
    if (i.id == id) return i;
  throw std::out_of_range("dataset has no identity " + std::to_string(id));
}

Dataset build_dataset(int n_identities, int poses_per_identity, std::uint64_t seed, Split split,
                      const JointLimits& limits) {
  if (n_identities <= 0 || poses_per_identity <= 0) throw std::invalid_argument("build_dataset: counts must be positive");
  Dataset ds;
  const std::uint64_t split_seed = derive_seed(seed, split == Split::train ? 0x7261696eULL : 0x74657374ULL);
  for (int i = 0; i < n_identities; ++i) {
    const std::uint64_t id_seed = derive_seed(split_seed, static_cast<std::uint64_t>(i));
    Identity ident;
    ident.id = i;
    ident.body = make_humanoid(sample_shape(derive_seed(id_seed, 1)), derive_seed(id_seed, 2));
    for (int p = 0; p < poses_per_identity; ++p) {
      ScanSample s;
      s.identity = i;
      s.pose_index = p;
      s.pose = sample_pose(derive_seed(id_seed, 100 + static_cast<std::uint64_t>(p)), limits);
      s.scan = pose_scan(ident.body, s.pose);
      ds.pool.entries.emplace_back(s.pose, ident.body.shape);
      ds.samples.push_back(std::move(s));
    }
    ds.identities.push_back(std::move(ident));
  }
  return ds;
}

Triplet make_triplet(const SkinnedMesh& identity, const PoseParams& pose_src, const PoseParams& pose_tgt) {
  return {pose_scan(identity, pose_src), skeleton_template_mesh(identity.rig, pose_tgt), pose_scan(identity, pose_tgt)};
}

namespace {
constexpr char kSkinMagic[8] = {'S', 'A', 'T', 'S', 'K', 'I', 'N', '1'};
}

void save_skinning(const std::filesystem::path& path, const SkinnedMesh& mesh) {
  ByteWriter w;
  w.raw(kSkinMagic, 8);
  const auto n = static_cast<std::uint32_t>(mesh.mesh.vertices.size());
  w.u32(n);
  w.u32(kBoneCount);
  w.f32s(mesh.weights);
  w.u32(static_cast<std::uint32_t>(mesh.rig.bones.size()));
  for (const auto& b : mesh.rig.bones) {
    w.u32(static_cast<std::uint32_t>(static_cast<std::int32_t>(b.parent)));
    w.f32s(std::span<const float>(b.head.data(), 3));
    w.f32s(std::span<const float>(b.tail.data(), 3));
  }
  for (const auto& b : mesh.rig.bones) w.f32(b.radius);
  for (int p : mesh.part) w.u32(static_cast<std::uint32_t>(p));
  w.f32s(mesh.shape.beta);
  const std::uint64_t seed = mesh.palette_seed;
  w.raw(&seed, 8);
  write_file_bytes(path, w.bytes());
}

SkinnedMesh load_skinning(const std::filesystem::path& path, TriangleMesh rest) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  SkinnedMesh out;
  try {
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, kSkinMagic, 8) != 0) throw FormatError("bad skinning sidecar magic");
    const auto n = r.u32();
    const auto m = r.u32();
    if (n != rest.vertices.size() || m != kBoneCount) throw FormatError("skinning sidecar does not match the mesh");
    if (static_cast<std::size_t>(n) * m * 4 > r.remaining()) throw TruncatedInput();
    out.weights.resize(static_cast<std::size_t>(n) * m);
    r.f32s(out.weights);
    const auto bones = r.u32();
    if (bones != kBoneCount) throw FormatError("skinning sidecar has an unsupported bone count");
    out.rig.bones.resize(bones);
    for (auto& b : out.rig.bones) {
      b.parent = static_cast<std::int32_t>(r.u32());
      r.f32s(std::span<float>(b.head.data(), 3));
      r.f32s(std::span<float>(b.tail.data(), 3));
    }
    for (auto& b : out.rig.bones) b.radius = r.f32();
    out.part.resize(n);
    for (auto& p : out.part) p = static_cast<int>(r.u32());
    r.f32s(out.shape.beta);
    r.raw(&out.palette_seed, 8);
  } catch (const TruncatedInput&) {
    throw FormatError("truncated skinning sidecar");
  }
  out.mesh = std::move(rest);
  out.validate();
  return out;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir / "identities");
  std::filesystem::create_directories(dir / "scans");
  for (const auto& ident : ds.identities) {
    const std::string stem = "i" + std::to_string(ident.id);
    write_obj(dir / "identities" / (stem + ".obj"), ident.body.mesh);
    save_skinning(dir / "identities" / (stem + ".skin"), ident.body);
  }
  std::ofstream man(dir / "manifest.txt");
  man.precision(9);
  man << "# sample_id mesh_path pose[39] shape[8]\n";
  for (const auto& s : ds.samples) {
    const std::string id = "i" + std::to_string(s.identity) + "_p" + std::to_string(s.pose_index);
    const std::string mesh_path = "scans/" + id + ".obj";
    write_obj(dir / mesh_path, s.scan);
    man << id << ' ' << mesh_path;
    for (float v : s.pose.flatten()) man << ' ' << v;
    for (float v : ds.identity(s.identity).body.shape.beta) man << ' ' << v;
    man << '\n';
  }
  if (!man) throw std::runtime_error("failed to write dataset manifest in " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.txt");
  if (!man) throw std::runtime_error("no manifest.txt in '" + dir.string() + "'");
  Dataset ds;
  std::map<int, std::size_t> loaded;
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string id, mesh_path;
    ss >> id >> mesh_path;
    std::vector<float> pose(39);
    ShapeParams shape;
    for (auto& v : pose) ss >> v;
    for (auto& v : shape.beta) ss >> v;
    int ident = 0, pidx = 0;
    if (!ss || std::sscanf(id.c_str(), "i%d_p%d", &ident, &pidx) != 2) {
      throw std::runtime_error("malformed manifest line: " + line);
    }
    if (!loaded.count(ident)) {
      const std::string stem = "i" + std::to_string(ident);
      Identity identity;
      identity.id = ident;
      identity.body = load_skinning(dir / "identities" / (stem + ".skin"), read_obj(dir / "identities" / (stem + ".obj")));
      loaded[ident] = ds.identities.size();
      ds.identities.push_back(std::move(identity));
    }
    ScanSample s;
    s.identity = ident;
    s.pose_index = pidx;
    s.pose = PoseParams::unflatten(pose);
    s.scan = read_obj(dir / mesh_path);
    ds.pool.entries.emplace_back(s.pose, shape);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace sat
