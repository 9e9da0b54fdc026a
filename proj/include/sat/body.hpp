#pragma once

// Capsule humanoid with a 12-bone rig, linear blend skinning and the
// procedural identity/pose dataset used in place of real scans.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "sat/mesh.hpp"

namespace sat {

inline constexpr int kBoneCount = 12;
inline constexpr int kShapeDims = 8;

enum Bone : int {
  kPelvis, kSpine, kChest, kHead,
  kLeftUpperArm, kLeftForearm, kRightUpperArm, kRightForearm,
  kLeftThigh, kLeftShin, kRightThigh, kRightShin,
};

const char* bone_name(int bone);

struct BoneSpec {
  int parent = -1;
  Vec3 head = Vec3::Zero();  // joint position at rest
  Vec3 tail = Vec3::Zero();
  float radius = 0.05f;
};

struct SkeletonRig {
  std::vector<BoneSpec> bones;
  // Throws std::invalid_argument unless there is one root and parents precede children.
  void validate() const;
};

// Shape components, each clamped to [-2, 2]:
//   0 overall height, 1 arm length, 2 leg length, 3 shoulder width,
//   4 limb thickness, 5 torso radius, 6 head size, 7 hip width.
struct ShapeParams {
  std::array<float, kShapeDims> beta{};
  ShapeParams clamped() const;
};

// Arm length scale per unit of beta[1]; +2 vs -2 gives 1.3 / 0.7.
inline constexpr float kArmLengthPerUnit = 0.15f;

struct PoseParams {
  // Axis-angle per bone, about its head, in rest-aligned axes. Eigen vectors
  // are not zero-initialized, hence the explicit fill.
  std::array<Vec3, kBoneCount> rotation = [] {
    std::array<Vec3, kBoneCount> r;
    r.fill(Vec3::Zero());
    return r;
  }();
  Vec3 translation = Vec3::Zero();

  static PoseParams identity() { return {}; }
  std::vector<float> flatten() const;  // 39 values
  static PoseParams unflatten(const std::vector<float>& v);
  bool operator==(const PoseParams& other) const;
};

// Per-bone, per-axis rotation range in degrees.
struct JointLimits {
  std::array<Eigen::Vector3f, kBoneCount> lo;
  std::array<Eigen::Vector3f, kBoneCount> hi;
  static JointLimits defaults();
  static JointLimits zero();
};

SkeletonRig make_rig(const ShapeParams& shape);

struct SkinnedMesh {
  TriangleMesh mesh;  // rest pose
  // Dense N x kBoneCount row-major; rows sum to 1, at most 4 nonzero.
  std::vector<float> weights;
  // Bone whose capsule generated each vertex.
  std::vector<int> part;
  SkeletonRig rig;
  ShapeParams shape;
  std::uint64_t palette_seed = 0;

  void validate() const;
};

// Capsule-per-bone humanoid with distance-falloff skinning weights and a
// seeded clothing palette. Identical arguments give bit-identical meshes.
SkinnedMesh make_humanoid(const ShapeParams& shape, std::uint64_t palette_seed);

// Global bone transforms G_j = G_parent * T(h_j) R_j T(-h_j); the root also
// carries the pose translation. Rest vertices map through G_j directly.
std::vector<Eigen::Isometry3f> forward_kinematics(const SkeletonRig& rig, const PoseParams& pose);

// x' = (sum_j w_ij R_j) x + sum_j w_ij t_j for each vertex.
std::vector<Vec3> lbs_apply(const std::vector<Vec3>& vertices, const std::vector<float>& weights,
                            const std::vector<Eigen::Isometry3f>& transforms);

// Blended-weight LBS of the rest mesh; normals recomputed from the deformed faces.
TriangleMesh lbs_deform(const SkinnedMesh& mesh, const PoseParams& pose);

// One-hot part weights (each vertex follows its own bone rigidly), with
// triangles that end up inside another bone's capsule removed. This is how
// ground-truth scans are posed. `source_vertex`, when given, receives the
// rest-mesh index of every scan vertex.
TriangleMesh pose_scan(const SkinnedMesh& mesh, const PoseParams& pose, std::vector<int>* source_vertex = nullptr);

// Low-poly, uncoloured capsule body over the posed skeleton.
TriangleMesh skeleton_template_mesh(const SkeletonRig& rig, const PoseParams& pose);

PoseParams sample_pose(std::uint64_t seed, const JointLimits& limits = JointLimits::defaults());
// Every joint axis at its lower or upper limit, chosen by the seed.
PoseParams extreme_pose(std::uint64_t seed, const JointLimits& limits = JointLimits::defaults());

// Largest ratio of deformed to rest edge length over all mesh edges.
float max_edge_stretch(const TriangleMesh& rest, const TriangleMesh& deformed);

struct ScanSample {
  int identity = 0;
  int pose_index = 0;
  PoseParams pose;
  TriangleMesh scan;
};

struct Identity {
  int id = 0;
  SkinnedMesh body;
};

struct TemplatePool {
  std::vector<std::pair<PoseParams, ShapeParams>> entries;
  bool empty() const { return entries.empty(); }
};

struct Dataset {
  std::vector<Identity> identities;
  std::vector<ScanSample> samples;
  TemplatePool pool;

  const Identity& identity(int id) const;
};

// Identities are drawn from independent streams keyed by (seed, split,
// index), so train and test identities never coincide.
enum class Split { train, test };
Dataset build_dataset(int n_identities, int poses_per_identity, std::uint64_t seed, Split split = Split::train,
                      const JointLimits& limits = JointLimits::defaults());

ShapeParams sample_shape(std::uint64_t seed);

struct Triplet {
  TriangleMesh source;    // S_o
  TriangleMesh template_mesh;  // M_t
  TriangleMesh target;    // S_t
};

Triplet make_triplet(const SkinnedMesh& identity, const PoseParams& pose_src, const PoseParams& pose_tgt);

// "SATSKIN1", u32 N, u32 m, N*m f32 weights, u32 bone count, per bone
// i32 parent, f32 head[3], f32 tail[3]; then a trailer with per-bone f32
// radius, per-vertex u32 part, f32 beta[8], u64 palette seed.
void save_skinning(const std::filesystem::path& path, const SkinnedMesh& mesh);
// Reads the sidecar and attaches it to `rest` (the OBJ rest mesh).
SkinnedMesh load_skinning(const std::filesystem::path& path, TriangleMesh rest);

// Writes rest meshes, sidecars, posed scans and a manifest with one line per
// sample: "<id> <mesh path> <39 pose values> <8 shape values>".
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace sat
