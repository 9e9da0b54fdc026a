#include "sat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "sat/losses.hpp"
#include "sat/raster.hpp"

namespace sat {

namespace {

double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = static_cast<double>(a.x()) - b.x();
  const double dy = static_cast<double>(a.y()) - b.y();
  const double dz = static_cast<double>(a.z()) - b.z();
  return dx * dx + dy * dy + dz * dz;
}

void check_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
    throw std::invalid_argument(std::string(what) + ": image shapes differ");
  }
}

}  // namespace

std::vector<std::pair<int, double>> nearest_neighbors(std::span<const Vec3> queries, std::span<const Vec3> targets) {
  if (targets.empty()) throw std::invalid_argument("nearest_neighbors: empty target set");
  std::vector<std::pair<int, double>> out(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t j = 0; j < targets.size(); ++j) {
      const double d = squared_distance(queries[i], targets[j]);
      if (d < best) {
        best = d;
        arg = static_cast<int>(j);
      }
    }
    out[i] = {arg, std::sqrt(best)};
  }
  return out;
}

Chamfer chamfer(std::span<const Vec3> pred, std::span<const Vec3> gt) {
  if (pred.empty() || gt.empty()) throw std::invalid_argument("chamfer: empty point set");
  Chamfer c;
  for (const auto& [i, d] : nearest_neighbors(pred, gt)) c.p2s += d;
  for (const auto& [i, d] : nearest_neighbors(gt, pred)) c.s2p += d;
  c.p2s = c.p2s / static_cast<double>(pred.size()) * kCmPerUnit;
  c.s2p = c.s2p / static_cast<double>(gt.size()) * kCmPerUnit;
  return c;
}

double normal_consistency(const PointCloud& pred, const PointCloud& gt) {
  if (pred.size() == 0 || gt.size() == 0) throw std::invalid_argument("normal_consistency: empty point set");
  if (pred.normals.size() != pred.size() || gt.normals.size() != gt.size()) {
    throw std::invalid_argument("normal_consistency: every point needs a normal");
  }
  for (const auto* cloud : {&pred, &gt})
    for (const auto& n : cloud->normals)
      if (!(n.norm() > 1e-8f)) throw std::invalid_argument("normal_consistency: zero normal");
  auto one_way = [](const PointCloud& a, const PointCloud& b) {
    double acc = 0;
    const auto nn = nearest_neighbors(a.positions, b.positions);
    for (std::size_t i = 0; i < nn.size(); ++i) {
      const Vec3 na = a.normals[i].normalized(), nb = b.normals[static_cast<std::size_t>(nn[i].first)].normalized();
      acc += std::abs(static_cast<double>(na.dot(nb)));
    }
    return acc / static_cast<double>(a.size());
  };
  return 0.5 * (one_way(pred, gt) + one_way(gt, pred));
}

double fscore(std::span<const Vec3> pred, std::span<const Vec3> gt, double tau_cm) {
  if (!(tau_cm > 0)) throw std::invalid_argument("fscore: tau must be positive");
  if (pred.empty() || gt.empty()) return 0.0;
  const double tau = tau_cm / kCmPerUnit;
  auto fraction = [tau](std::span<const Vec3> a, std::span<const Vec3> b) {
    std::size_t hit = 0;
    for (const auto& [i, d] : nearest_neighbors(a, b)) hit += d < tau;
    return static_cast<double>(hit) / static_cast<double>(a.size());
  };
  const double p = fraction(pred, gt), r = fraction(gt, pred);
  return p + r > 0 ? 200.0 * p * r / (p + r) : 0.0;
}

double psnr(const Image& a, const Image& b) {
  check_same_shape(a, b, "psnr");
  if (a.data.empty()) throw std::invalid_argument("psnr: empty image");
  double acc = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  const double m = acc / static_cast<double>(a.data.size());
  return m < 1e-10 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

double ssim(const Image& a, const Image& b) {
  check_same_shape(a, b, "ssim");
  if (a.data.empty()) throw std::invalid_argument("ssim: empty image");
  constexpr int kRadius = 5;
  constexpr double kSigma = 1.5, C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double g[2 * kRadius + 1];
  for (int i = -kRadius; i <= kRadius; ++i) g[i + kRadius] = std::exp(-(i * i) / (2 * kSigma * kSigma));

  double total = 0;
  for (int c = 0; c < a.channels; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) {
        double wsum = 0, ma = 0, mb = 0, aa = 0, bb = 0, ab = 0;
        for (int dy = -kRadius; dy <= kRadius; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= a.height) continue;
          for (int dx = -kRadius; dx <= kRadius; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= a.width) continue;
            const double w = g[dy + kRadius] * g[dx + kRadius];
            const double va = a.at(yy, xx, c), vb = b.at(yy, xx, c);
            wsum += w;
            ma += w * va;
            mb += w * vb;
            aa += w * va * va;
            bb += w * vb * vb;
            ab += w * va * vb;
          }
        }
        ma /= wsum;
        mb /= wsum;
        const double va = aa / wsum - ma * ma, vb = bb / wsum - mb * mb, cov = ab / wsum - ma * mb;
        total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
      }
  return total / static_cast<double>(a.data.size());
}

double perceptual_distance(const Image& a, const Image& b) {
  check_same_shape(a, b, "perceptual_distance");
  if (a.channels != 3) throw std::invalid_argument("perceptual_distance: RGB images expected");
  autograd::NoGradGuard guard;
  const Tensor ta({3, a.height, a.width}, a.planar()), tb({3, b.height, b.width}, b.planar());
  return perceptual(ta, tb).item();
}

bool MetricsReport::all_finite() const {
  for (double v : {cd_p2s, cd_s2p, nc, fscore, psnr_front, psnr_back, ssim_front, ssim_back, perceptual_front,
                   perceptual_back})
    if (!std::isfinite(v)) return false;
  return true;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["cd_p2s"] = cd_p2s;
  j["cd_s2p"] = cd_s2p;
  j["nc"] = nc;
  j["fscore"] = fscore;
  j["fscore_tau_cm"] = fscore_tau_cm;
  j["psnr_front"] = psnr_front;
  j["psnr_back"] = psnr_back;
  j["ssim_front"] = ssim_front;
  j["ssim_back"] = ssim_back;
  j["perceptual_front"] = perceptual_front;
  j["perceptual_back"] = perceptual_back;
  j["samples"] = samples;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetricsReport r;
  r.cd_p2s = j.at("cd_p2s");
  r.cd_s2p = j.at("cd_s2p");
  r.nc = j.at("nc");
  r.fscore = j.at("fscore");
  r.fscore_tau_cm = j.at("fscore_tau_cm");
  r.psnr_front = j.at("psnr_front");
  r.psnr_back = j.at("psnr_back");
  r.ssim_front = j.at("ssim_front");
  r.ssim_back = j.at("ssim_back");
  r.perceptual_front = j.at("perceptual_front");
  r.perceptual_back = j.at("perceptual_back");
  r.samples = j.at("samples");
  r.seed = j.at("seed");
  r.config_hash = j.at("config_hash");
  return r;
}

void MetricsReport::accumulate(const MetricsReport& o) {
  const double n = samples, m = o.samples, t = n + m;
  auto mix = [&](double& a, double b) { a = (a * n + b * m) / t; };
  mix(cd_p2s, o.cd_p2s);
  mix(cd_s2p, o.cd_s2p);
  mix(nc, o.nc);
  mix(fscore, o.fscore);
  mix(psnr_front, o.psnr_front);
  mix(psnr_back, o.psnr_back);
  mix(ssim_front, o.ssim_front);
  mix(ssim_back, o.ssim_back);
  mix(perceptual_front, o.perceptual_front);
  mix(perceptual_back, o.perceptual_back);
  samples += o.samples;
}

std::string MetricsReport::table() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%-10s %-10s %-8s %-9s | %-11s %-11s %-11s %-11s %-8s %-8s\n"
                "%-10.3f %-10.3f %-8.4f %-9.2f | %-11.3f %-11.3f %-11.4f %-11.4f %-8.4f %-8.4f\n",
                "CD p2s", "CD s2p", "NC", "f-score", "PSNR F", "PSNR B", "SSIM F", "SSIM B", "Perc F", "Perc B", cd_p2s,
                cd_s2p, nc, fscore, psnr_front, psnr_back, ssim_front, ssim_back, perceptual_front, perceptual_back);
  return buf;
}

MetricsReport evaluate_geometry(const GaussianSet& pred, const TriangleMesh& gt, const EvalSettings& s) {
  const PointCloud gt_pts = sample_surface_points(gt, s.gt_samples, s.sample_seed);
  PointCloud pred_pts;
  for (const auto& g : pred)
    if (g.opacity > s.opacity_threshold) pred_pts.positions.push_back(g.x);
  if (pred_pts.size() == 0) throw EmptyPrediction("no Gaussian has opacity above " + std::to_string(s.opacity_threshold));
  for (const auto& [i, d] : nearest_neighbors(pred_pts.positions, gt_pts.positions))
    pred_pts.normals.push_back(gt_pts.normals[static_cast<std::size_t>(i)]);

  MetricsReport r;
  const Chamfer cd = chamfer(pred_pts.positions, gt_pts.positions);
  r.cd_p2s = cd.p2s;
  r.cd_s2p = cd.s2p;
  r.nc = normal_consistency(pred_pts, gt_pts);
  r.fscore = fscore(pred_pts.positions, gt_pts.positions, s.tau_cm);
  r.fscore_tau_cm = s.tau_cm;
  return r;
}

MetricsReport evaluate_reconstruction(const GaussianSet& pred, const TriangleMesh& gt, const EvalSettings& s) {
  MetricsReport r = evaluate_geometry(pred, gt, s);

  const Eigen::Vector3f bg = Eigen::Vector3f::Constant(s.background);
  for (float az : {0.0f, 180.0f}) {
    const CameraPose cam = orbit_camera(az, 0, s.radius, s.fov, s.width, s.height);
    const Image rendered = splat_render(pred, cam, bg).color;
    const Image target = rasterize(gt, cam, RenderMode::rgb, s.background).image;
    const double p = psnr(rendered, target), q = ssim(rendered, target), l = perceptual_distance(rendered, target);
    if (az == 0.0f) {
      r.psnr_front = p;
      r.ssim_front = q;
      r.perceptual_front = l;
    } else {
      r.psnr_back = p;
      r.ssim_back = q;
      r.perceptual_back = l;
    }
  }
  return r;
}

}  // namespace sat
