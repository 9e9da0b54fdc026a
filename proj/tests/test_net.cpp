#include <cmath>
#include <set>

#include "doctest.h"
#include "sat/recon_net.hpp"
#include "sat/rng.hpp"

using namespace sat;

namespace {

ReconNetConfig small_config(int views = 4) {
  ReconNetConfig c;
  c.views = views;
  c.width = 8;
  return c;
}

ViewBundle random_bundle(const ReconNetConfig& cfg, int res, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> data(static_cast<std::size_t>(cfg.views) * cfg.in_channels * res * res);
  for (auto& v : data) v = static_cast<float>(rng.uniform());
  ViewBundle b;
  b.images = Tensor({cfg.views, cfg.in_channels, res, res}, std::move(data));
  const auto four = four_orthogonal_views(1.5f, 49, res, res);
  for (int v = 0; v < cfg.views; ++v) {
    b.cameras.push_back(four[static_cast<std::size_t>(v % 4)]);
    b.roles.push_back(static_cast<ViewRole>(v % 4));
  }
  return b;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST_CASE("output and tap shapes") {
  const auto cfg = small_config();
  const ReconNet net(cfg, 1);
  const auto out = net.forward(random_bundle(cfg, 16, 2));
  CHECK(out.grids.shape() == Shape{4, 14, 16, 16});

  std::set<std::string> keys;
  for (const auto& [k, v] : out.taps) keys.insert(k);
  CHECK(keys == std::set<std::string>{"mid", "up1", "up2", "up3"});
  CHECK(out.taps.at("mid").shape() == Shape{4, 32, 2, 2});
  CHECK(out.taps.at("up1").shape() == Shape{4, 32, 2, 2});
  CHECK(out.taps.at("up2").shape() == Shape{4, 16, 4, 4});
  CHECK(out.taps.at("up3").shape() == Shape{4, 8, 8, 8});

  const auto all = net.forward(random_bundle(cfg, 16, 2), true);
  CHECK(all.taps.size() == 7);
  CHECK(all.taps.count("down1") == 1);
  CHECK(net.tap_names() == std::vector<std::string>{"mid", "up1", "up2", "up3"});
  CHECK(net.tap_names(true).size() == 7);
}

TEST_CASE("bundle validation") {
  const auto cfg = small_config();
  const ReconNet net(cfg, 1);
  auto b = random_bundle(cfg, 16, 2);
  b.roles.pop_back();
  CHECK_THROWS_AS(net.forward(b), ShapeError);
  CHECK_THROWS_AS(net.forward(random_bundle(small_config(5), 16, 2)), ShapeError);
  CHECK_THROWS_AS(net.forward(random_bundle(cfg, 12, 2)), ShapeError);
}

TEST_CASE("cross-view coupling is live") {
  const auto cfg = small_config();
  const ReconNet net(cfg, 3);
  const auto b = random_bundle(cfg, 16, 4);
  auto zeroed = b;
  std::vector<float> data(b.images.data().begin(), b.images.data().end());
  const std::size_t per_view = data.size() / 4;
  std::fill(data.begin() + 2 * per_view, data.begin() + 3 * per_view, 0.0f);
  zeroed.images = Tensor(b.images.shape(), data);

  const auto y0 = net.forward(b).grids.data(), y1 = net.forward(zeroed).grids.data();
  const std::size_t out_per_view = y0.size() / 4;
  CHECK(max_abs_diff(y0.subspan(out_per_view, out_per_view), y1.subspan(out_per_view, out_per_view)) > 0);
}

TEST_CASE("view roles break permutation invariance") {
  const auto cfg = small_config();
  const ReconNet net(cfg, 3);
  const auto b = random_bundle(cfg, 16, 4);
  auto swapped = b;
  std::swap(swapped.roles[0], swapped.roles[1]);
  CHECK(max_abs_diff(net.forward(b).grids.data(), net.forward(swapped).grids.data()) > 0);
}

TEST_CASE("gradients reach every parameter") {
  const auto cfg = small_config();
  ReconNet net(cfg, 5);
  const auto out = net.forward(random_bundle(cfg, 16, 6));
  backward(sum(out.grids));
  for (const auto& p : net.params()) {
    INFO(p.name);
    REQUIRE(p.tensor.has_grad());
    double m = 0;
    for (float g : p.tensor.grad()) m = std::max(m, std::abs(static_cast<double>(g)));
    CHECK(m > 0);
  }
}

TEST_CASE("initialization and forward are deterministic") {
  const auto cfg = small_config();
  const ReconNet a(cfg, 7), b(cfg, 7), c(cfg, 8);
  REQUIRE(a.params().size() == b.params().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params()[i].name == b.params()[i].name);
    const auto x = a.params()[i].tensor.data(), y = b.params()[i].tensor.data(), z = c.params()[i].tensor.data();
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
    differs = differs || !std::equal(x.begin(), x.end(), z.begin());
  }
  CHECK(differs);

  const auto bundle = random_bundle(cfg, 16, 9);
  const auto o1 = a.forward(bundle), o2 = a.forward(bundle);
  CHECK(max_abs_diff(o1.grids.data(), o2.grids.data()) == 0);
  for (const auto& [k, v] : o1.taps) CHECK(max_abs_diff(v.data(), o2.taps.at(k).data()) == 0);
}

TEST_CASE("checkpoint round trip reproduces outputs") {
  const auto cfg = small_config(5);
  const ReconNet net(cfg, 10);
  const auto ck = decode_checkpoint(encode_checkpoint(net.to_checkpoint(R"({"stage":"test"})")));
  const ReconNet back = ReconNet::from_checkpoint(ck);
  CHECK(back.config().views == 5);
  const auto bundle = random_bundle(cfg, 16, 11);
  CHECK(max_abs_diff(net.forward(bundle).grids.data(), back.forward(bundle).grids.data()) == 0);

  Checkpoint bad = ck;
  bad.header = "not json";
  CHECK_THROWS_AS(ReconNet::from_checkpoint(bad), FormatError);
}

TEST_CASE("head on an all-zero grid") {
  ReconNetConfig cfg = small_config(2);
  const int res = 8;
  const auto four = four_orthogonal_views(1.5f, 49, res, res);
  const std::vector<CameraPose> cams = {four[0], four[2]};
  const Tensor zero = Tensor::zeros({2, 14, res, res});
  const auto set = head_to_gaussians(zero, cams, cfg);
  REQUIRE(set.size() == 2u * res * res);

  const double mid = 0.5 * (cfg.depth_near + cfg.depth_far);
  const double scale = std::log(2.0) * cfg.scale_unit + 1e-4;
  for (int v = 0; v < 2; ++v)
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const auto& g = set[static_cast<std::size_t>((v * res + y) * res + x)];
        const auto& cam = cams[static_cast<std::size_t>(v)];
        const Eigen::Vector3f expect =
            cam.position() + static_cast<float>(mid) * cam.ray_direction(x + 0.5f, y + 0.5f);
        CHECK((g.x - expect).norm() < 1e-5f);
        CHECK(g.opacity == doctest::Approx(0.5));
        for (int k = 0; k < 3; ++k) {
          CHECK(g.scale[k] == doctest::Approx(scale).epsilon(1e-5));
          CHECK(g.color[k] == doctest::Approx(0.5));
        }
        CHECK(g.q == Eigen::Vector4f(1, 0, 0, 0));
      }
  const auto img = splat_render(set, cams[0], Eigen::Vector3f::Zero());
  for (float v : img.color.data) CHECK(std::isfinite(v));
}

TEST_CASE("head produces valid Gaussians from arbitrary raw values") {
  ReconNetConfig cfg = small_config(4);
  const int res = 8;
  const auto four = four_orthogonal_views(1.5f, 49, res, res);
  const std::vector<CameraPose> cams(four.begin(), four.end());
  Rng rng(12);
  std::vector<float> raw(4 * 14 * res * res);
  for (auto& v : raw) v = static_cast<float>(rng.normal() * 4);
  const auto set = head_to_gaussians(Tensor({4, 14, res, res}, raw), cams, cfg);
  CHECK(set.size() == 4u * res * res);
  for (const auto& g : set) {
    const float dist = g.x.norm();
    CHECK(std::isfinite(dist));
    CHECK(g.scale.minCoeff() >= 1e-4f);
    CHECK(g.opacity > 0.0f);
    CHECK(g.opacity < 1.0f);
    CHECK(g.color.minCoeff() >= 0.0f);
    CHECK(g.color.maxCoeff() <= 1.0f);
  }
  CHECK_THROWS_AS(head_to_gaussians(Tensor::zeros({3, 14, res, res}), cams, cfg), ShapeError);
}

TEST_CASE("tap distance") {
  FeatureTaps a, b;
  a["mid"] = Tensor({1}, {4.0f}, true);
  b["mid"] = Tensor({1}, {1.0f}, true);
  CHECK(tap_distance(a, b, {"mid"}).item() == doctest::Approx(3.0));
  CHECK(tap_distance(a, a, {"mid"}).item() == 0.0f);

  a["up1"] = Tensor({2}, {1.0f, 2.0f}, true);
  b["up1"] = Tensor({2}, {1.0f, 0.0f}, true);
  const auto full = tap_distance(a, b, {"mid", "up1"});
  CHECK(full.item() >= tap_distance(a, b, {"mid"}).item());
  CHECK(full.item() == doctest::Approx(5.0));

  // Supervisor taps are detached: no gradient reaches them.
  backward(full);
  CHECK(a["mid"].has_grad());
  CHECK(a["mid"].grad()[0] == doctest::Approx(1.0));
  for (const auto& [k, t] : b) {
    if (!t.has_grad()) continue;
    for (float g : t.grad()) CHECK(g == 0.0f);
  }

  FeatureTaps c;
  c["mid"] = Tensor({2}, {1.0f, 2.0f});
  CHECK_THROWS_AS(tap_distance(a, c, {"mid"}), ShapeError);
  CHECK_THROWS_AS(tap_distance(a, b, {"up3"}), ShapeError);
}

TEST_CASE("view direction from azimuth") {
  const auto four = four_orthogonal_views(1.5f, 49, 8, 8);
  CHECK(view_direction(four[0]) == 0);
  CHECK(view_direction(four[1]) == 1);
  CHECK(view_direction(four[2]) == 2);
  CHECK(view_direction(four[3]) == 3);
  CHECK(view_direction(orbit_camera(-90, 0, 1.5f, 49, 8, 8)) == 3);
}
