#include <algorithm>
#include <cmath>
#include <filesystem>

#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "sat/checkpoint.hpp"
#include "sat/gradcheck.hpp"
#include "sat/rng.hpp"
#include "sat/splat.hpp"

using namespace sat;

namespace {

Gaussian make_gaussian(Eigen::Vector3f x, float scale, float opacity, Eigen::Vector3f color) {
  Gaussian g;
  g.x = x;
  g.scale = Eigen::Vector3f::Constant(scale);
  g.opacity = opacity;
  g.color = color;
  return g;
}

// Random anisotropic Gaussians clustered around the origin.
GaussianSet random_scene(Rng& rng, int n) {
  GaussianSet set;
  for (int i = 0; i < n; ++i) {
    Gaussian g;
    g.x = Eigen::Vector3f(rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(-0.3, 0.3));
    g.scale = Eigen::Vector3f(rng.uniform(0.04, 0.12), rng.uniform(0.04, 0.12), rng.uniform(0.04, 0.12));
    g.q = Eigen::Vector4f(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    g.opacity = static_cast<float>(rng.uniform(0.2, 0.8));
    g.color = Eigen::Vector3f(rng.uniform(), rng.uniform(), rng.uniform());
    set.push_back(g);
  }
  return set;
}

float center_value(const SplatImage& img, int c) { return img.color.at(img.color.height / 2, img.color.width / 2, c); }

}  // namespace

TEST_CASE("3D covariance") {
  Gaussian g;
  g.scale = {1, 2, 3};
  Eigen::Matrix3f expected = Eigen::Vector3f(1, 4, 9).asDiagonal();
  CHECK(covariance_3d(g).isApprox(expected));

  // Hand rotation: Rz(90) maps x to y, so R diag(1,4,1) R^T = diag(4,1,1).
  g.scale = {1, 2, 1};
  g.q = Eigen::Vector4f(std::cos(M_PI / 4), 0, 0, std::sin(M_PI / 4));
  Eigen::Matrix3f rotated = Eigen::Vector3f(4, 1, 1).asDiagonal();
  CHECK((covariance_3d(g) - rotated).norm() < 1e-5f);

  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    Gaussian r;
    r.scale = Eigen::Vector3f(rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2));
    r.q = Eigen::Vector4f(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    const Eigen::Matrix3f s = covariance_3d(r);
    CHECK((s - s.transpose()).norm() < 1e-6f);
    Eigen::Vector3f ev = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3f>(s).eigenvalues();
    Eigen::Vector3f sq = r.scale.cwiseProduct(r.scale);
    std::sort(sq.data(), sq.data() + 3);
    CHECK((ev - sq).norm() < 1e-4f);
  }
  g.q.setZero();
  CHECK_THROWS_AS(covariance_3d(g), std::invalid_argument);
}

TEST_CASE("2D projection") {
  auto g = make_gaussian(Eigen::Vector3f::Zero(), 0.05f, 1, Eigen::Vector3f::Ones());
  auto cam = orbit_camera(0, 0, 1.5f, 49, 64, 64);
  auto p = project(g, cam);
  CHECK(p.mean.x() == doctest::Approx(32.0));
  CHECK(p.mean.y() == doctest::Approx(32.0));
  CHECK(p.depth == doctest::Approx(1.5));
  // Isotropic: equal diagonal, no shear.
  CHECK(p.cov(0, 0) == doctest::Approx(p.cov(1, 1)));
  CHECK(std::abs(p.cov(0, 1)) < 1e-6f);

  // Extent (sd without the regularizer) scales with 1/depth.
  auto far = project(g, orbit_camera(0, 0, 3.0f, 49, 64, 64));
  const float near_sd = std::sqrt(p.cov(0, 0) - 0.3f), far_sd = std::sqrt(far.cov(0, 0) - 0.3f);
  CHECK(near_sd / far_sd == doctest::Approx(2.0).epsilon(0.05));

  auto behind = make_gaussian(Eigen::Vector3f(0, 0, 2.0f), 0.05f, 1, Eigen::Vector3f::Ones());
  CHECK_THROWS_AS(project(behind, cam), std::domain_error);
}

TEST_CASE("compositing examples") {
  auto cam = orbit_camera(0, 0, 1.5f, 49, 16, 16);
  SUBCASE("empty set") {
    auto img = splat_render(GaussianSet{}, cam, Eigen::Vector3f(0.1f, 0.2f, 0.3f));
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        CHECK(img.alpha.at(y, x, 0) == 0.0f);
        CHECK(img.color.at(y, x, 2) == doctest::Approx(0.3));
      }
  }
  SUBCASE("single opaque splat") {
    GaussianSet set{make_gaussian(Eigen::Vector3f::Zero(), 0.5f, 1.0f, Eigen::Vector3f(1, 0, 0))};
    auto img = splat_render(set, cam, Eigen::Vector3f::Zero());
    CHECK(center_value(img, 0) == doctest::Approx(1.0).epsilon(1e-2));
    CHECK(center_value(img, 1) == doctest::Approx(0.0));
    CHECK(img.alpha.at(8, 8, 0) == doctest::Approx(1.0).epsilon(1e-2));
  }
  SUBCASE("two half-transparent splats") {
    // Depths 1 and 2 from the camera at z = 1.5; listed back first to exercise sorting.
    const Eigen::Vector3f a(0.9f, 0.2f, 0.1f), b(0.1f, 0.5f, 0.8f);
    GaussianSet set{make_gaussian(Eigen::Vector3f(0, 0, -0.5f), 0.5f, 0.5f, b),
                    make_gaussian(Eigen::Vector3f(0, 0, 0.5f), 0.5f, 0.5f, a)};
    auto img = splat_render(set, cam, Eigen::Vector3f::Zero());
    for (int c = 0; c < 3; ++c) CHECK(center_value(img, c) == doctest::Approx(0.5 * a[c] + 0.25 * b[c]).epsilon(1e-2));
    CHECK(img.alpha.at(8, 8, 0) == doctest::Approx(0.75).epsilon(1e-2));
  }
  SUBCASE("non-finite parameters") {
    GaussianSet set{make_gaussian(Eigen::Vector3f(NAN, 0, 0), 0.1f, 1, Eigen::Vector3f::Ones())};
    CHECK_THROWS_AS(splat_render(set, cam, Eigen::Vector3f::Zero()), NumericError);
  }
}

TEST_CASE("splat gradients against finite differences") {
  auto cam = orbit_camera(0, 0, 1.5f, 49, 16, 16);
  SUBCASE("one Gaussian") {
    Rng rng(2);
    auto set = random_scene(rng, 1);
    auto r = splat_gradcheck(set, cam);
    CAPTURE(r.worst_slot);
    CAPTURE(r.worst_analytic);
    CAPTURE(r.worst_numeric);
    CHECK(r.max_rel_error < 1e-2);
  }
  SUBCASE("four overlapping Gaussians") {
    Rng rng(3);
    auto set = random_scene(rng, 4);
    auto r = splat_gradcheck(set, cam);
    CAPTURE(r.worst_gaussian);
    CAPTURE(r.worst_slot);
    CHECK(r.max_rel_error < 2e-2);
  }
  SUBCASE("seeded random scenes") {
    for (std::uint64_t seed = 10; seed < 20; ++seed) {
      Rng rng(seed);
      auto set = random_scene(rng, static_cast<int>(rng.uniform_int(1, 8)));
      auto view = orbit_camera(static_cast<float>(rng.uniform(0, 360)), static_cast<float>(rng.uniform(-30, 30)),
                               1.5f, 49, 16, 16);
      auto r = splat_gradcheck(set, view, 1e-5, seed);
      CAPTURE(seed);
      CAPTURE(r.worst_gaussian);
      CAPTURE(r.worst_slot);
      CAPTURE(r.worst_analytic);
      CAPTURE(r.worst_numeric);
      CHECK(r.max_rel_error < 2e-2);
    }
  }
}

TEST_CASE("without the cutoff the render is smooth and gradients are tight") {
  SplatSettings smooth;
  smooth.min_weight = 1e-12f;
  for (std::uint64_t seed = 30; seed < 35; ++seed) {
    Rng rng(seed);
    auto set = random_scene(rng, 6);
    auto r = splat_gradcheck(set, orbit_camera(static_cast<float>(seed * 40), 15, 1.5f, 49, 16, 16), 1e-4, seed, smooth);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("tensor op backward agrees with finite differences") {
  Rng rng(5);
  auto set = random_scene(rng, 3);
  auto pf = pack_gaussians(set);
  TensorD params({3, kGaussianParams}, std::vector<double>(pf.begin(), pf.end()));
  auto cam = orbit_camera(30, 10, 1.5f, 49, 12, 12);
  Rng wr(6);
  std::vector<double> w(4 * 144);
  for (auto& v : w) v = wr.normal();
  TensorD weights({4, 12, 12}, w);
  auto f = [&](const std::vector<TensorD>& in) {
    return sum(mul(splat_render<double>(in[0], cam, {0.2, 0.3, 0.4}), weights));
  };
  auto r = grad_check_detailed<double>(f, {params}, 1e-5);
  CHECK(r.max_rel_error < 2e-2);
}

TEST_CASE("occluded opacity gradient is attenuated by the front transmittance") {
  auto cam = orbit_camera(0, 0, 1.5f, 49, 17, 17);
  const float of = 0.6f, ob = 0.5f;
  GaussianSet set{make_gaussian(Eigen::Vector3f(0, 0, 0.4f), 0.2f, of, Eigen::Vector3f(1, 0, 0)),
                  make_gaussian(Eigen::Vector3f(0, 0, -0.4f), 0.2f, ob, Eigen::Vector3f(0, 0, 1))};
  auto pf = pack_gaussians(set);
  Tensor params({2, kGaussianParams}, pf, true);
  auto out = splat_render<float>(params, cam, {0, 0, 0});
  // Loss: alpha at the centre pixel, which both means project onto exactly.
  std::vector<float> pick(4 * 17 * 17, 0.0f);
  pick[3 * 289 + 8 * 17 + 8] = 1.0f;
  backward(sum(mul(out, Tensor({4, 17, 17}, pick))));
  // alpha = 1 - (1 - wf)(1 - wb), w = opacity at the exact centre.
  const float g_back = params.grad()[kGaussianParams + 10];
  const float g_front = params.grad()[10];
  CHECK(g_back > 0.0f);
  CHECK(g_back == doctest::Approx(1.0 - of).epsilon(1e-4));
  CHECK(g_front == doctest::Approx(1.0 - ob).epsilon(1e-4));
}

TEST_CASE("rendering properties on random scenes") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(100 + seed);
    auto set = random_scene(rng, 6);
    auto cam = orbit_camera(static_cast<float>(rng.uniform(0, 360)), 0, 1.5f, 49, 20, 20);
    const Eigen::Vector3f bg(0.3f, 0.6f, 0.1f);
    auto base = splat_render(set, cam, bg);
    CAPTURE(seed);

    // Permutation invariance.
    auto perm = set;
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[0], perm[3]);
    auto permuted = splat_render(perm, cam, bg);
    CHECK(permuted.color.data == base.color.data);
    CHECK(permuted.alpha.data == base.alpha.data);

    // Colour inside the per-channel hull of Gaussian colours and background.
    for (int c = 0; c < 3; ++c) {
      float lo = bg[c], hi = bg[c];
      for (const auto& g : set) {
        lo = std::min(lo, g.color[c]);
        hi = std::max(hi, g.color[c]);
      }
      for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x) {
          CHECK(base.color.at(y, x, c) >= lo - 1e-5f);
          CHECK(base.color.at(y, x, c) <= hi + 1e-5f);
        }
    }
    for (float a : base.alpha.data) CHECK((a >= 0.0f && a <= 1.0f));

    // Alpha never decreases when one opacity grows.
    for (std::size_t i = 0; i < set.size(); ++i) {
      auto more = set;
      more[i].opacity = std::min(1.0f, more[i].opacity + 0.15f);
      auto brighter = splat_render(more, cam, bg);
      for (std::size_t p = 0; p < base.alpha.data.size(); ++p) CHECK(brighter.alpha.data[p] >= base.alpha.data[p] - 1e-6f);
    }
  }
}

TEST_CASE("Gaussian file round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "sat_test_splat";
  Rng rng(9);
  auto set = random_scene(rng, 5);
  save_gaussians(dir / "g.bin", set);
  auto back = load_gaussians(dir / "g.bin");
  CHECK(pack_gaussians(back) == pack_gaussians(set));

  save_gaussians(dir / "empty.bin", {});
  CHECK(load_gaussians(dir / "empty.bin").empty());

  auto bytes = encode_gaussians(set);
  CHECK(bytes.size() == 8 + 4 + 5 * 14 * 4);
  auto bad = bytes;
  bad[3] = 'X';
  CHECK_THROWS_WITH_AS(decode_gaussians(bad), "bad Gaussian file magic", FormatError);
  bytes.pop_back();
  CHECK_THROWS_WITH_AS(decode_gaussians(bytes), "truncated Gaussian file", FormatError);
}
