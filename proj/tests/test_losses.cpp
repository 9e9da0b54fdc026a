#include <cmath>

#include "doctest.h"
#include "sat/gradcheck.hpp"
#include "sat/losses.hpp"
#include "sat/metrics.hpp"
#include "sat/raster.hpp"
#include "sat/rng.hpp"

using namespace sat;

namespace {

// Independent re-implementation of the perceptual pyramid with plain loops.
struct NaivePyramid {
  std::vector<double> w[3];
  int ch[4] = {3, 8, 16, 32};
  NaivePyramid() {
    Rng rng(0xC0FFEE);
    for (int l = 0; l < 3; ++l) {
      w[l].resize(static_cast<std::size_t>(ch[l + 1]) * ch[l] * 9);
      const double sd = std::sqrt(2.0 / (ch[l] * 9));
      for (auto& v : w[l]) v = static_cast<float>(rng.normal() * sd);
    }
  }
  // x is [C][H][W] flattened.
  std::vector<double> conv_relu(const std::vector<double>& x, int l, int H, int W, int stride, int& Ho, int& Wo) const {
    const int ci = ch[l], co = ch[l + 1];
    Ho = (H + 2 - 3) / stride + 1;
    Wo = (W + 2 - 3) / stride + 1;
    std::vector<double> y(static_cast<std::size_t>(co) * Ho * Wo, 0.0);
    for (int o = 0; o < co; ++o)
      for (int yy = 0; yy < Ho; ++yy)
        for (int xx = 0; xx < Wo; ++xx) {
          double acc = 0;
          for (int c = 0; c < ci; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = yy * stride - 1 + ky, ix = xx * stride - 1 + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += w[l][((static_cast<std::size_t>(o) * ci + c) * 3 + ky) * 3 + kx] *
                       x[(static_cast<std::size_t>(c) * H + iy) * W + ix];
              }
          y[(static_cast<std::size_t>(o) * Ho + yy) * Wo + xx] = std::max(acc, 0.0);
        }
    return y;
  }
  double distance(std::vector<double> a, std::vector<double> b, int H, int W) const {
    double total = 0;
    for (int l = 0; l < 3; ++l) {
      int Ho, Wo;
      a = conv_relu(a, l, H, W, l == 0 ? 1 : 2, Ho, Wo);
      b = conv_relu(b, l, H, W, l == 0 ? 1 : 2, Ho, Wo);
      H = Ho;
      W = Wo;
      const int C = ch[l + 1];
      double acc = 0;
      for (int p = 0; p < H * W; ++p) {
        double na = 1e-6, nb = 1e-6;
        for (int c = 0; c < C; ++c) {
          na += a[static_cast<std::size_t>(c * H * W + p)] * a[static_cast<std::size_t>(c * H * W + p)];
          nb += b[static_cast<std::size_t>(c * H * W + p)] * b[static_cast<std::size_t>(c * H * W + p)];
        }
        for (int c = 0; c < C; ++c) {
          const double d = a[static_cast<std::size_t>(c * H * W + p)] / std::sqrt(na) -
                           b[static_cast<std::size_t>(c * H * W + p)] / std::sqrt(nb);
          acc += d * d;
        }
      }
      total += acc / (C * H * W);
    }
    return total / 3;
  }
};

std::vector<double> textured(int H, int W, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> img(3 * static_cast<std::size_t>(H) * W);
  for (int c = 0; c < 3; ++c) {
    const double fx = rng.uniform(0.3, 1.2), fy = rng.uniform(0.3, 1.2), ph = rng.uniform(0, 6);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        img[(static_cast<std::size_t>(c) * H + y) * W + x] =
            0.5 + 0.3 * std::sin(fx * x + fy * y + ph) + 0.1 * rng.uniform(-1, 1);
  }
  return img;
}

TensorD as_tensor(const std::vector<double>& v, int H, int W) { return TensorD({3, H, W}, v); }

std::vector<Vec3> random_points(std::size_t n, std::uint64_t seed, float spread = 0.05f) {
  Rng rng(seed);
  std::vector<Vec3> p(n);
  for (auto& v : p)
    v = Vec3(static_cast<float>(rng.uniform(-spread, spread)), static_cast<float>(rng.uniform(-spread, spread)),
             static_cast<float>(rng.uniform(-spread, spread)));
  return p;
}

double brute_nn(const Vec3& q, const std::vector<Vec3>& pts, int* arg = nullptr) {
  double best = 1e300;
  for (std::size_t j = 0; j < pts.size(); ++j) {
    const double dx = double(q.x()) - pts[j].x(), dy = double(q.y()) - pts[j].y(), dz = double(q.z()) - pts[j].z();
    const double d = dx * dx + dy * dy + dz * dz;
    if (d < best) {
      best = d;
      if (arg) *arg = static_cast<int>(j);
    }
  }
  return std::sqrt(best);
}

}  // namespace

TEST_CASE("perceptual proxy matches a loop oracle") {
  const NaivePyramid oracle;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto a = textured(9, 11, s), b = textured(9, 11, s + 10);
    const double got = perceptual(as_tensor(a, 9, 11), as_tensor(b, 9, 11)).item();
    CHECK(got == doctest::Approx(oracle.distance(a, b, 9, 11)).epsilon(1e-9));
  }
}

TEST_CASE("perceptual proxy properties") {
  const auto a = textured(16, 16, 1), b = textured(16, 16, 2);
  const auto ta = as_tensor(a, 16, 16), tb = as_tensor(b, 16, 16);
  CHECK(perceptual(ta, ta).item() == 0.0);
  CHECK(perceptual(ta, tb).item() == perceptual(tb, ta).item());
  CHECK(perceptual(Tensor::zeros({3, 4, 4}), Tensor::zeros({3, 4, 4})).item() == 0.0f);
  CHECK_THROWS_AS(perceptual(ta, as_tensor(textured(8, 8, 3), 8, 8)), ShapeError);

  // A smooth low-amplitude shift is closer than a channel permutation.
  std::vector<double> shifted(a), permuted(a.size());
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) shifted[(c * 16 + y) * 16 + x] += 0.03 * std::sin(0.2 * (x + y));
  const std::size_t plane = 256;
  for (int c = 0; c < 3; ++c)
    std::copy(a.begin() + ((c + 1) % 3) * plane, a.begin() + ((c + 1) % 3 + 1) * plane, permuted.begin() + c * plane);
  const double near = perceptual(ta, as_tensor(shifted, 16, 16)).item();
  const double far = perceptual(ta, as_tensor(permuted, 16, 16)).item();
  CHECK(near < far);
}

TEST_CASE("render loss examples") {
  const auto img = textured(8, 8, 4);
  std::vector<double> pred(img);
  std::vector<double> mask(64, 1.0);
  pred.insert(pred.end(), mask.begin(), mask.end());
  const RenderPair<double> same{TensorD({4, 8, 8}, pred), as_tensor(img, 8, 8), TensorD({1, 8, 8}, mask)};
  CHECK(render_loss<double>({same}).item() == 0.0);

  // One pixel, black and transparent against white and covered.
  const RenderPair<double> px{TensorD::zeros({4, 1, 1}), TensorD::full({3, 1, 1}, 1.0), TensorD::full({1, 1, 1}, 1.0)};
  const double perc = NaivePyramid().distance({0, 0, 0}, {1, 1, 1}, 1, 1);
  CHECK(perc >= 0.0);
  CHECK(render_loss<double>({px}).item() == doctest::Approx(2.0 + perc).epsilon(1e-12));
  CHECK(render_loss<double>({px, px}).item() == doctest::Approx(2 * render_loss<double>({px}).item()).epsilon(1e-12));

  CHECK_THROWS_AS(render_loss<double>({}), std::invalid_argument);
  const RenderPair<double> bad{TensorD::zeros({4, 2, 2}), TensorD::zeros({3, 1, 1}), TensorD::zeros({1, 1, 1})};
  CHECK_THROWS_AS(render_loss<double>({bad}), ShapeError);
}

TEST_CASE("render loss is non-negative") {
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> p(4 * 36), c(3 * 36), m(36);
    for (auto& v : p) v = rng.uniform();
    for (auto& v : c) v = rng.uniform();
    for (auto& v : m) v = rng.bernoulli(0.5);
    const RenderPair<double> pair{TensorD({4, 6, 6}, p), TensorD({3, 6, 6}, c), TensorD({1, 6, 6}, m)};
    CHECK(render_loss<double>({pair}).item() > 0.0);
  }
}

TEST_CASE("UGL loss composition") {
  const Tensor l1 = Tensor::scalar(2.0f), sfr = Tensor::scalar(5.0f);
  CHECK(ugl_total_loss(l1, sfr, 0.0f).item() == 2.0f);
  CHECK(ugl_total_loss(l1, sfr, 0.01f).item() == doctest::Approx(2.05));
  CHECK(kDefaultSfrAlpha == 0.01f);
  CHECK_THROWS_AS(ugl_total_loss(l1, sfr, -1.0f), std::invalid_argument);
}

TEST_CASE("render loss gradient through the splat renderer") {
  GaussianSet set;
  Rng rng(6);
  for (int i = 0; i < 4; ++i) {
    Gaussian g;
    g.x = Vec3(static_cast<float>(rng.uniform(-0.2, 0.2)), static_cast<float>(rng.uniform(-0.2, 0.2)),
               static_cast<float>(rng.uniform(-0.2, 0.2)));
    g.scale = Vec3::Constant(static_cast<float>(rng.uniform(0.05, 0.12)));
    g.q = Eigen::Vector4f(1.0f, static_cast<float>(rng.uniform(-0.3, 0.3)), 0.2f, 0.0f);
    g.opacity = static_cast<float>(rng.uniform(0.3, 0.8));
    g.color = Vec3(static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()), 0.5f);
    set.push_back(g);
  }
  const auto packed = pack_gaussians(set);
  const TensorD params({4, 14}, std::vector<double>(packed.begin(), packed.end()));
  const auto cam = orbit_camera(20, 10, 1.5f, 49, 12, 12);
  const auto gt = textured(12, 12, 7);
  std::vector<double> mask(144);
  for (int i = 0; i < 144; ++i) mask[i] = (i / 12 > 3 && i / 12 < 9) ? 1.0 : 0.0;

  auto f = [&](const std::vector<TensorD>& in) {
    const auto pred = splat_render<double>(in[0], cam, {0.0, 0.0, 0.0});
    return render_loss<double>({{pred, as_tensor(gt, 12, 12), TensorD({1, 12, 12}, mask)}});
  };
  const auto r = grad_check_detailed<double>(f, {params}, 1e-5);
  INFO("worst element " << r.worst_element << " analytic " << r.worst_analytic << " numeric " << r.worst_numeric);
  CHECK(r.max_rel_error < 2e-2);
}

TEST_CASE("chamfer") {
  const std::vector<Vec3> pred = {Vec3(0, 0, 0)};
  const std::vector<Vec3> gt = {Vec3(0, 0, 0.01f), Vec3(0, 0, -0.01f)};
  const auto c = chamfer(pred, gt);
  CHECK(c.p2s == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(c.s2p == doctest::Approx(1.0).epsilon(1e-6));

  const auto a = random_points(40, 1), b = random_points(30, 2);
  const auto ab = chamfer(a, b), ba = chamfer(b, a);
  CHECK(ab.p2s == ba.s2p);
  CHECK(ab.s2p == ba.p2s);
  const auto self = chamfer(a, a);
  CHECK(self.p2s == 0.0);
  CHECK(self.s2p == 0.0);
  CHECK_THROWS_AS(chamfer({}, b), std::invalid_argument);
}

TEST_CASE("3D metrics match brute-force all-pairs oracles exactly") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto a = random_points(50, 10 + s), b = random_points(47, 20 + s);
    double p2s = 0, s2p = 0;
    for (const auto& q : a) p2s += brute_nn(q, b);
    for (const auto& q : b) s2p += brute_nn(q, a);
    const auto c = chamfer(a, b);
    CHECK(c.p2s == p2s / 50 * 100.0);
    CHECK(c.s2p == s2p / 47 * 100.0);

    const double tau = 2.0;
    double hp = 0, hr = 0;
    for (const auto& q : a) hp += brute_nn(q, b) < tau / 100.0;
    for (const auto& q : b) hr += brute_nn(q, a) < tau / 100.0;
    hp /= 50;
    hr /= 47;
    CHECK(fscore(a, b, tau) == (hp + hr > 0 ? 200.0 * hp * hr / (hp + hr) : 0.0));

    PointCloud pa{a, {}}, pb{b, {}};
    Rng rng(s);
    for (std::size_t i = 0; i < a.size(); ++i) pa.normals.push_back(Vec3::Random().normalized());
    for (std::size_t i = 0; i < b.size(); ++i) pb.normals.push_back(Vec3::Random().normalized());
    double one = 0, two = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      int j = 0;
      brute_nn(a[i], b, &j);
      one += std::abs(static_cast<double>(pa.normals[i].normalized().dot(pb.normals[j].normalized())));
    }
    for (std::size_t i = 0; i < b.size(); ++i) {
      int j = 0;
      brute_nn(b[i], a, &j);
      two += std::abs(static_cast<double>(pb.normals[i].normalized().dot(pa.normals[j].normalized())));
    }
    CHECK(normal_consistency(pa, pb) == 0.5 * (one / 50 + two / 47));
  }
}

TEST_CASE("normal consistency cases") {
  PointCloud a{{Vec3(0, 0, 0), Vec3(1, 0, 0)}, {Vec3(0, 0, 1), Vec3(0, 1, 0)}};
  CHECK(normal_consistency(a, a) == doctest::Approx(1.0));
  PointCloud flipped = a;
  for (auto& n : flipped.normals) n = -n;
  CHECK(normal_consistency(a, flipped) == doctest::Approx(1.0));
  PointCloud ortho{{Vec3(0, 0, 0)}, {Vec3(1, 0, 0)}}, other{{Vec3(0, 0, 0)}, {Vec3(0, 1, 0)}};
  CHECK(normal_consistency(ortho, other) == doctest::Approx(0.0));
  PointCloud zero{{Vec3(0, 0, 0)}, {Vec3(0, 0, 0)}};
  CHECK_THROWS_AS(normal_consistency(zero, a), std::invalid_argument);
}

TEST_CASE("f-score cases") {
  const auto a = random_points(20, 3);
  CHECK(fscore(a, a) == 100.0);
  std::vector<Vec3> far;
  for (const auto& p : a) far.push_back(p + Vec3(1, 0, 0));
  CHECK(fscore(a, far) == 0.0);
  // One of two predictions is within tau and the single GT point is covered.
  const std::vector<Vec3> pred = {Vec3(0, 0, 0), Vec3(0.5f, 0, 0)}, gt = {Vec3(0.001f, 0, 0)};
  CHECK(fscore(pred, gt, 1.0) == doctest::Approx(200.0 * 0.5 * 1.0 / 1.5));
  CHECK_THROWS_AS(fscore(pred, gt, 0.0), std::invalid_argument);
}

TEST_CASE("PSNR and SSIM cases") {
  Image a(16, 16, 3), b(16, 16, 3, 1.0f);
  Rng rng(8);
  Image t(16, 16, 3);
  for (auto& v : t.data) v = static_cast<float>(rng.uniform());
  CHECK(psnr(t, t) == kPsnrCap);
  CHECK(ssim(t, t) == 1.0);
  CHECK(psnr(a, b) == 0.0);
  Image c(16, 16, 3, 0.4f), d(16, 16, 3, 0.5f);
  CHECK(psnr(c, d) == doctest::Approx(20.0).epsilon(1e-5));
  CHECK(ssim(t, a) < 0.5);
  CHECK_THROWS_AS(psnr(a, Image(8, 8, 3)), std::invalid_argument);
  CHECK_THROWS_AS(ssim(a, Image(16, 16, 1)), std::invalid_argument);
}

TEST_CASE("evaluation on GT-derived Gaussians") {
  TriangleMesh sphere = make_uv_sphere(0.4f, 12, 24, Vec3(0.7f, 0.3f, 0.2f));
  EvalSettings s;
  s.gt_samples = 400;
  s.width = s.height = 32;
  const auto pts = sample_surface_points(sphere, s.gt_samples, s.sample_seed);
  GaussianSet set;
  for (const auto& p : pts.positions) {
    Gaussian g;
    g.x = p;
    g.scale = Vec3::Constant(0.03f);
    g.opacity = 0.95f;
    g.color = Vec3(0.7f, 0.3f, 0.2f);
    set.push_back(g);
  }
  const auto r = evaluate_reconstruction(set, sphere, s);
  CHECK(r.cd_p2s == doctest::Approx(0.0));
  CHECK(r.cd_s2p == doctest::Approx(0.0));
  CHECK(r.fscore == doctest::Approx(100.0));
  CHECK(r.nc == doctest::Approx(1.0));
  CHECK(r.all_finite());
  CHECK(r.psnr_front > 10.0);

  for (auto& g : set) g.opacity = 0.2f;
  CHECK_THROWS_AS(evaluate_reconstruction(set, sphere, s), EmptyPrediction);
}

TEST_CASE("metrics report JSON round trip") {
  MetricsReport r;
  r.cd_p2s = 1.25;
  r.cd_s2p = 2.5;
  r.nc = 0.75;
  r.fscore = 33.3;
  r.psnr_front = 21.5;
  r.ssim_back = 0.5;
  r.seed = 42;
  r.config_hash = "abc";
  const auto back = MetricsReport::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
  CHECK(back.cd_p2s == 1.25);
  CHECK(r.table().find("f-score") != std::string::npos);

  MetricsReport s = r;
  s.cd_p2s = 3.25;
  r.accumulate(s);
  CHECK(r.cd_p2s == doctest::Approx(2.25));
  CHECK(r.samples == 2);
}
