#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "sat/binary_io.hpp"
#include "sat/body.hpp"
#include "sat/camera.hpp"
#include "sat/raster.hpp"

using namespace sat;

namespace {

constexpr float kDeg = static_cast<float>(M_PI / 180.0);

std::filesystem::path scratch_dir() {
  auto p = std::filesystem::temp_directory_path() / "sat_test_body";
  std::filesystem::create_directories(p);
  return p;
}

Eigen::Isometry3f rigid(const Eigen::Matrix3f& R, const Vec3& t) {
  Eigen::Isometry3f g = Eigen::Isometry3f::Identity();
  g.linear() = R;
  g.translation() = t;
  return g;
}

// Bone-local rotation about its head, written out independently of the FK code.
Eigen::Isometry3f about_head(const Vec3& axis_angle, const Vec3& head) {
  const float a = axis_angle.norm();
  const Eigen::Matrix3f R = a > 0 ? Eigen::AngleAxisf(a, axis_angle / a).toRotationMatrix() : Eigen::Matrix3f::Identity();
  return rigid(R, head - R * head);
}

std::vector<float> one_hot(const std::vector<int>& part) {
  std::vector<float> w(part.size() * kBoneCount, 0.0f);
  for (std::size_t i = 0; i < part.size(); ++i) w[i * kBoneCount + part[i]] = 1.0f;
  return w;
}

double mask_iou(const RenderTarget& a, const RenderTarget& b) {
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.coverage.size(); ++i) {
    inter += a.coverage[i] && b.coverage[i];
    uni += a.coverage[i] || b.coverage[i];
  }
  return uni ? static_cast<double>(inter) / uni : 0.0;
}

// Extent of the arm vertices along the rest arm direction.
float arm_span(const SkinnedMesh& body) {
  const auto& ua = body.rig.bones[kLeftUpperArm];
  const auto& fa = body.rig.bones[kLeftForearm];
  const Vec3 dir = (fa.tail - ua.head).normalized();
  float lo = 1e9f, hi = -1e9f;
  for (std::size_t i = 0; i < body.part.size(); ++i) {
    if (body.part[i] != kLeftUpperArm && body.part[i] != kLeftForearm) continue;
    const float s = body.mesh.vertices[i].dot(dir);
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  return hi - lo;
}

}  // namespace

TEST_CASE("rig structure") {
  const auto rig = make_rig(ShapeParams{});
  REQUIRE(rig.bones.size() == kBoneCount);
  CHECK_NOTHROW(rig.validate());
  for (int j = 0; j < kBoneCount; ++j) CHECK(rig.bones[j].parent < j);

  SkeletonRig bad = rig;
  bad.bones[2].parent = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = rig;
  bad.bones[3].parent = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_THROWS_AS(forward_kinematics(bad, PoseParams{}), std::invalid_argument);
}

TEST_CASE("canonical humanoid") {
  const auto body = make_humanoid(ShapeParams{}, 1);
  CHECK_NOTHROW(body.validate());
  const auto n = body.mesh.vertices.size();
  CHECK(n >= 2000);
  CHECK(n <= 6000);
  float ylo = 1e9f, yhi = -1e9f, rmax = 0;
  for (const auto& v : body.mesh.vertices) {
    ylo = std::min(ylo, v.y());
    yhi = std::max(yhi, v.y());
    rmax = std::max(rmax, v.norm());
  }
  CHECK(yhi - ylo == doctest::Approx(1.7).epsilon(0.06));
  CHECK(rmax < 1.5f);

  // At least four distinct colour regions.
  std::set<std::array<float, 3>> colors;
  for (const auto& c : body.mesh.colors) colors.insert({c.x(), c.y(), c.z()});
  CHECK(colors.size() >= 4);
}

TEST_CASE("shape clamping") {
  ShapeParams s;
  s.beta[0] = 5;
  s.beta[3] = -7;
  const auto c = s.clamped();
  CHECK(c.beta[0] == 2.0f);
  CHECK(c.beta[3] == -2.0f);
  CHECK(make_humanoid(s, 3).mesh.vertices == make_humanoid(c, 3).mesh.vertices);
}

TEST_CASE("arm length component scales the arm span") {
  ShapeParams longer, shorter;
  longer.beta[1] = 2;
  shorter.beta[1] = -2;
  const auto a = make_humanoid(longer, 0);
  const auto b = make_humanoid(shorter, 0);
  const float span_a = arm_span(a), span_b = arm_span(b);
  CHECK(span_a / span_b >= 1.2f);

  // The span is bone length plus two cap radii; the bone part scales by
  // (1 + 2k) / (1 - 2k).
  const auto bone_len = [](const SkinnedMesh& m) {
    return (m.rig.bones[kLeftForearm].tail - m.rig.bones[kLeftUpperArm].head).norm();
  };
  const float r = a.rig.bones[kLeftUpperArm].radius;
  CHECK(bone_len(a) / bone_len(b) ==
        doctest::Approx((1 + 2 * kArmLengthPerUnit) / (1 - 2 * kArmLengthPerUnit)).epsilon(1e-5));
  CHECK(span_a == doctest::Approx(bone_len(a) + 2 * r).epsilon(0.02));
}

TEST_CASE("humanoid determinism") {
  ShapeParams s;
  s.beta = {0.3f, -1.0f, 0.5f, 0.2f, 1.1f, -0.4f, 0.0f, 0.7f};
  const auto a = make_humanoid(s, 42);
  const auto b = make_humanoid(s, 42);
  CHECK(a.mesh.vertices == b.mesh.vertices);
  CHECK(a.mesh.colors == b.mesh.colors);
  CHECK(a.mesh.triangles == b.mesh.triangles);
  CHECK(a.weights == b.weights);
  CHECK(make_humanoid(s, 43).mesh.colors != a.mesh.colors);
}

TEST_CASE("lbs identity pose is a fixed point") {
  const auto body = make_humanoid(sample_shape(5), 5);
  const auto out = lbs_deform(body, PoseParams::identity());
  REQUIRE(out.vertices.size() == body.mesh.vertices.size());
  float worst = 0;
  for (std::size_t i = 0; i < out.vertices.size(); ++i)
    worst = std::max(worst, (out.vertices[i] - body.mesh.vertices[i]).norm());
  CHECK(worst <= 1e-5f);
}

TEST_CASE("lbs rigid rotation of a fully bound vertex") {
  std::vector<Eigen::Isometry3f> g(kBoneCount, Eigen::Isometry3f::Identity());
  g[3] = rigid(Eigen::AngleAxisf(90 * kDeg, Vec3::UnitZ()).toRotationMatrix(), Vec3::Zero());
  std::vector<float> w(kBoneCount, 0.0f);
  w[3] = 1.0f;
  const auto out = lbs_apply({Vec3(1, 0, 0)}, w, g);
  CHECK((out[0] - Vec3(0, 1, 0)).norm() <= 1e-6f);
}

TEST_CASE("lbs half/half blend of two translations") {
  const Vec3 t1(0.2f, -0.4f, 1.0f), t2(-0.6f, 0.3f, 0.1f), x(0.3f, 0.7f, -0.2f);
  std::vector<Eigen::Isometry3f> g(kBoneCount, Eigen::Isometry3f::Identity());
  g[1] = rigid(Eigen::Matrix3f::Identity(), t1);
  g[7] = rigid(Eigen::Matrix3f::Identity(), t2);
  std::vector<float> w(kBoneCount, 0.0f);
  w[1] = 0.5f;
  w[7] = 0.5f;
  const auto out = lbs_apply({x}, w, g);
  CHECK((out[0] - (x + 0.5f * (t1 + t2))).norm() <= 1e-6f);
  CHECK_THROWS_AS(lbs_apply({x, x}, w, g), std::invalid_argument);
}

TEST_CASE("forward kinematics composes local rotations about joint heads") {
  const auto rig = make_rig(ShapeParams{});
  const PoseParams pose = sample_pose(11);
  const auto g = forward_kinematics(rig, pose);
  // Walk each chain explicitly from the root.
  for (int j = 0; j < kBoneCount; ++j) {
    std::vector<int> chain;
    for (int k = j; k >= 0; k = rig.bones[k].parent) chain.push_back(k);
    Eigen::Isometry3f expect = Eigen::Isometry3f::Identity();
    for (auto it = chain.rbegin(); it != chain.rend(); ++it)
      expect = expect * about_head(pose.rotation[*it], rig.bones[*it].head);
    CHECK((expect.matrix() - g[j].matrix()).cwiseAbs().maxCoeff() <= 1e-5f);
  }
  // The child's joint stays attached to the parent's transformed tail.
  for (int j = 0; j < kBoneCount; ++j) {
    const int p = rig.bones[j].parent;
    if (p < 0 || !rig.bones[j].head.isApprox(rig.bones[p].tail)) continue;
    CHECK((g[j] * rig.bones[j].head - g[p] * rig.bones[p].tail).norm() <= 1e-5f);
  }
}

TEST_CASE("all-rigid weights equal per-part rigid transformation") {
  const auto body = make_humanoid(ShapeParams{}, 2);
  const PoseParams pose = sample_pose(3);
  const auto g = forward_kinematics(body.rig, pose);
  const auto out = lbs_apply(body.mesh.vertices, one_hot(body.part), g);
  float worst = 0;
  for (std::size_t i = 0; i < out.size(); ++i)
    worst = std::max(worst, (out[i] - g[body.part[i]] * body.mesh.vertices[i]).norm());
  // Same arithmetic up to Eigen's evaluation order.
  CHECK(worst <= 1e-6f);
}

TEST_CASE("single chain inverse round trip") {
  const auto body = make_humanoid(ShapeParams{}, 4);
  // Chain pelvis -> left thigh -> left shin with small rotations.
  PoseParams pose;
  pose.rotation[kPelvis] = Vec3(0.05f, -0.08f, 0.03f);
  pose.rotation[kLeftThigh] = Vec3(-0.1f, 0.04f, 0.07f);
  pose.rotation[kLeftShin] = Vec3(0.12f, 0.0f, -0.02f);
  const std::vector<int> chain = {kPelvis, kLeftThigh, kLeftShin};

  std::vector<Vec3> rest;
  std::vector<int> part;
  for (std::size_t i = 0; i < body.part.size(); ++i)
    if (std::find(chain.begin(), chain.end(), body.part[i]) != chain.end()) {
      rest.push_back(body.mesh.vertices[i]);
      part.push_back(body.part[i]);
    }
  const auto w = one_hot(part);
  const auto posed = lbs_apply(rest, w, forward_kinematics(body.rig, pose));

  // Negated rotations applied in reverse order undo the chain.
  std::vector<Eigen::Isometry3f> inv(kBoneCount, Eigen::Isometry3f::Identity());
  Eigen::Isometry3f acc = Eigen::Isometry3f::Identity();
  for (int j : chain) {
    acc = about_head(-pose.rotation[j], body.rig.bones[j].head) * acc;
    inv[j] = acc;
  }
  const auto back = lbs_apply(posed, w, inv);
  float worst = 0;
  for (std::size_t i = 0; i < rest.size(); ++i) worst = std::max(worst, (back[i] - rest[i]).norm());
  CHECK(worst <= 1e-4f);
}

TEST_CASE("deformation preserves topology") {
  const auto body = make_humanoid(ShapeParams{}, 6);
  const auto out = lbs_deform(body, sample_pose(6));
  CHECK(out.vertices.size() == body.mesh.vertices.size());
  CHECK(out.triangles == body.mesh.triangles);
  CHECK(out.colors == body.mesh.colors);
  CHECK_NOTHROW(out.validate());
}

TEST_CASE("pose sampling") {
  CHECK(sample_pose(9) == sample_pose(9));
  CHECK(!(sample_pose(9) == sample_pose(10)));

  const auto lim = JointLimits::defaults();
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto p = sample_pose(s, lim);
    for (int j = 0; j < kBoneCount; ++j)
      for (int k = 0; k < 3; ++k) {
        const float deg = p.rotation[j][k] / kDeg;
        REQUIRE(deg >= lim.lo[j][k] - 1e-3f);
        REQUIRE(deg <= lim.hi[j][k] + 1e-3f);
      }
    REQUIRE(p.translation == Vec3::Zero());
  }
  CHECK(sample_pose(77, JointLimits::zero()) == PoseParams::identity());

  const auto v = sample_pose(12).flatten();
  CHECK(v.size() == 39);
  CHECK(PoseParams::unflatten(v) == sample_pose(12));
  CHECK_THROWS_AS(PoseParams::unflatten(std::vector<float>(38)), std::invalid_argument);
}

TEST_CASE("joint limits are left/right mirrored") {
  const auto lim = JointLimits::defaults();
  for (auto [l, r] : {std::pair{kLeftUpperArm, kRightUpperArm}, {kLeftForearm, kRightForearm},
                      {kLeftThigh, kRightThigh}, {kLeftShin, kRightShin}}) {
    CHECK(lim.lo[r].x() == lim.lo[l].x());
    CHECK(lim.hi[r].x() == lim.hi[l].x());
    CHECK(lim.lo[r].y() == -lim.hi[l].y());
    CHECK(lim.hi[r].z() == -lim.lo[l].z());
  }
}

TEST_CASE("dataset") {
  const auto ds = build_dataset(3, 2, 99);
  CHECK(ds.identities.size() == 3);
  CHECK(ds.samples.size() == 6);
  CHECK(ds.pool.entries.size() == 6);
  CHECK(!ds.pool.empty());
  CHECK_THROWS_AS(build_dataset(0, 2, 99), std::invalid_argument);
  CHECK_THROWS_AS(ds.identity(7), std::out_of_range);

  const auto again = build_dataset(3, 2, 99);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(ds.samples[i].pose == again.samples[i].pose);
    CHECK(ds.samples[i].scan.vertices == again.samples[i].scan.vertices);
  }

  // Train and test identities come from separate streams.
  const auto test = build_dataset(3, 2, 99, Split::test);
  for (const auto& a : ds.identities)
    for (const auto& b : test.identities) {
      CHECK(a.body.shape.beta != b.body.shape.beta);
      CHECK(a.body.palette_seed != b.body.palette_seed);
    }

  // Every scan is visible from all four orthogonal views.
  for (const auto& s : ds.samples) {
    CHECK_NOTHROW(s.scan.validate());
    for (const auto& cam : four_orthogonal_views(1.5f, 70.0f, 32, 32)) {
      const auto m = rasterize(s.scan, cam, RenderMode::mask);
      CHECK(std::count(m.coverage.begin(), m.coverage.end(), 1) > 20);
    }
  }
}

TEST_CASE("posed scans drop faces buried in other parts") {
  const auto body = make_humanoid(ShapeParams{}, 8);
  const auto scan = pose_scan(body, PoseParams::identity());
  CHECK(scan.triangles.size() < body.mesh.triangles.size());
  CHECK(scan.triangles.size() > body.mesh.triangles.size() / 2);
  CHECK_NOTHROW(scan.validate());
}

TEST_CASE("triplets") {
  const auto body = make_humanoid(sample_shape(21), 21);
  const auto p = sample_pose(21), q = sample_pose(22);

  const auto same = make_triplet(body, p, p);
  CHECK(same.source.vertices == same.target.vertices);
  CHECK(same.source.triangles == same.target.triangles);

  const auto t = make_triplet(body, p, q);
  std::set<std::array<float, 3>> src, tgt;
  for (const auto& c : t.source.colors) src.insert({c.x(), c.y(), c.z()});
  for (const auto& c : t.target.colors) tgt.insert({c.x(), c.y(), c.z()});
  CHECK(src == tgt);

  CHECK(t.template_mesh.vertices.size() < body.mesh.vertices.size());
  const auto cam = orbit_camera(0, 0, 1.5f, 70, 64, 64);
  const auto tmpl = rasterize(t.template_mesh, cam, RenderMode::normal);
  const auto scan = rasterize(t.target, cam, RenderMode::mask);
  CHECK(mask_iou(tmpl, scan) > 0.6);
}

TEST_CASE("template at rest matches the rig silhouette") {
  const auto body = make_humanoid(ShapeParams{}, 0);
  const auto tmpl = skeleton_template_mesh(body.rig, PoseParams::identity());
  const auto cam = orbit_camera(0, 0, 1.5f, 70, 64, 64);
  CHECK(mask_iou(rasterize(tmpl, cam, RenderMode::mask), rasterize(body.mesh, cam, RenderMode::mask)) > 0.8);
}

TEST_CASE("template normal renders are mirror-consistent") {
  const auto rig = make_rig(ShapeParams{});
  PoseParams pose;  // symmetric: mirrored rotations on both sides
  pose.rotation[kLeftUpperArm] = Vec3(0.3f, 0.2f, 0.5f);
  pose.rotation[kRightUpperArm] = Vec3(0.3f, -0.2f, -0.5f);
  pose.rotation[kLeftShin] = Vec3(0.6f, 0, 0);
  pose.rotation[kRightShin] = Vec3(0.6f, 0, 0);
  const auto mesh = skeleton_template_mesh(rig, pose);
  const auto left = rasterize(mesh, orbit_camera(90, 0, 1.5f, 70, 48, 48), RenderMode::normal);
  const auto right = rasterize(mesh, orbit_camera(270, 0, 1.5f, 70, 48, 48), RenderMode::normal);
  // Mirroring x flips the camera-space x normal; channels store (n + 1) / 2.
  int compared = 0, bad = 0;
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) {
      const int xm = 47 - x;
      const bool a = left.coverage[y * 48 + x], b = right.coverage[y * 48 + xm];
      if (a != b) {
        ++bad;
        continue;
      }
      if (!a) continue;
      ++compared;
      const float dx = left.image.at(y, x, 0) + right.image.at(y, xm, 0) - 1.0f;
      const float dy = left.image.at(y, x, 1) - right.image.at(y, xm, 1);
      const float dz = left.image.at(y, x, 2) - right.image.at(y, xm, 2);
      if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) > 0.05f) ++bad;
    }
  CHECK(compared > 100);
  CHECK(bad <= compared / 50);
}

TEST_CASE("blended LBS distorts at extreme poses") {
  const auto body = make_humanoid(ShapeParams{}, 0);
  float worst = 0;
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto pose = extreme_pose(s);
    worst = std::max(worst, max_edge_stretch(body.mesh, lbs_deform(body, pose)));
    // Rigid per-part posing never stretches an edge.
    TriangleMesh rigid_mesh = body.mesh;
    rigid_mesh.vertices = lbs_apply(body.mesh.vertices, one_hot(body.part), forward_kinematics(body.rig, pose));
    CHECK(max_edge_stretch(body.mesh, rigid_mesh) == doctest::Approx(1.0).epsilon(1e-4));
  }
  CHECK(worst > 1.5f);

  const auto lim = JointLimits::defaults();
  const auto p = extreme_pose(3, lim);
  for (int j = 0; j < kBoneCount; ++j)
    for (int k = 0; k < 3; ++k) {
      const float deg = p.rotation[j][k] / kDeg;
      CHECK((std::abs(deg - lim.lo[j][k]) < 1e-3f || std::abs(deg - lim.hi[j][k]) < 1e-3f));
    }
}

TEST_CASE("skinning sidecar and dataset round trip") {
  const auto dir = scratch_dir();
  const auto body = make_humanoid(sample_shape(31), 31);
  write_obj(dir / "rest.obj", body.mesh);
  save_skinning(dir / "rest.skin", body);
  const auto loaded = load_skinning(dir / "rest.skin", read_obj(dir / "rest.obj"));
  CHECK(loaded.weights == body.weights);
  CHECK(loaded.part == body.part);
  CHECK(loaded.shape.beta == body.shape.beta);
  CHECK(loaded.palette_seed == body.palette_seed);
  for (int j = 0; j < kBoneCount; ++j) {
    CHECK(loaded.rig.bones[j].parent == body.rig.bones[j].parent);
    CHECK(loaded.rig.bones[j].head == body.rig.bones[j].head);
    CHECK(loaded.rig.bones[j].radius == body.rig.bones[j].radius);
  }

  auto bytes = read_file_bytes(dir / "rest.skin");
  bytes.resize(bytes.size() / 2);
  write_file_bytes(dir / "short.skin", bytes);
  CHECK_THROWS_WITH(load_skinning(dir / "short.skin", body.mesh), "truncated skinning sidecar");
  bytes[0] = 'X';
  write_file_bytes(dir / "bad.skin", bytes);
  CHECK_THROWS_WITH(load_skinning(dir / "bad.skin", body.mesh), "bad skinning sidecar magic");

  const auto ds = build_dataset(2, 2, 5);
  save_dataset(dir / "ds", ds);
  const auto back = load_dataset(dir / "ds");
  REQUIRE(back.samples.size() == ds.samples.size());
  REQUIRE(back.identities.size() == 2);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].identity == ds.samples[i].identity);
    for (int j = 0; j < kBoneCount; ++j)
      CHECK((back.samples[i].pose.rotation[j] - ds.samples[i].pose.rotation[j]).norm() <= 1e-6f);
    CHECK(back.samples[i].scan.triangles == ds.samples[i].scan.triangles);
    CHECK(back.pool.entries[i].second.beta == ds.pool.entries[i].second.beta);
  }
}
