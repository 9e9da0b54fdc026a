#include "sat/splat.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>

#include "sat/binary_io.hpp"
#include "sat/checkpoint.hpp"
#include "sat/rng.hpp"

namespace sat {

namespace {

template <typename T> using V2 = Eigen::Matrix<T, 2, 1>;
template <typename T> using V3 = Eigen::Matrix<T, 3, 1>;
template <typename T> using V4 = Eigen::Matrix<T, 4, 1>;
template <typename T> using M2 = Eigen::Matrix<T, 2, 2>;
template <typename T> using M3 = Eigen::Matrix<T, 3, 3>;
template <typename T> using M23 = Eigen::Matrix<T, 2, 3>;

// Camera in the x-right, y-down, z-forward frame used for projection.
template <typename T>
struct ProjCamera {
  M3<T> W;
  V3<T> t;
  T f, cx, cy;
  int width, height;

  explicit ProjCamera(const CameraPose& cam) {
    const Eigen::Vector3f flip(1, -1, -1);
    W = (flip.asDiagonal() * cam.rotation).cast<T>();
    t = flip.cwiseProduct(cam.translation).cast<T>();
    f = static_cast<T>(cam.focal());
    cx = static_cast<T>(cam.cx());
    cy = static_cast<T>(cam.cy());
    width = cam.width;
    height = cam.height;
  }
};

template <typename T>
M3<T> rotation_from_unit_quat(const V4<T>& q) {
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  M3<T> R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),  //
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

// d(loss)/d(unit quaternion) from d(loss)/dR.
template <typename T>
V4<T> quat_grad(const V4<T>& q, const M3<T>& g) {
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  V4<T> out;
  out[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  out[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) +
                w * g(2, 1) - 2 * x * g(2, 2));
  out[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
                z * g(2, 1) - 2 * y * g(2, 2));
  out[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
                x * g(2, 0) + y * g(2, 1));
  return out;
}

template <typename T>
struct Projected {
  bool visible = false;
  T qnorm = 0;
  V4<T> qn;
  M3<T> R, M, sigma;
  V3<T> pc;
  M23<T> T2;
  M2<T> conic;
  V2<T> mean;
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
};

template <typename T>
Projected<T> project_one(const T* p, const ProjCamera<T>& cam, const SplatSettings& st) {
  Projected<T> pr;
  const V3<T> x(p[0], p[1], p[2]);
  const V3<T> s(p[3], p[4], p[5]);
  const V4<T> q(p[6], p[7], p[8], p[9]);
  pr.qnorm = q.norm();
  if (!(pr.qnorm > T(0))) throw std::invalid_argument("Gaussian has a zero quaternion");
  pr.qn = q / pr.qnorm;
  pr.R = rotation_from_unit_quat<T>(pr.qn);
  pr.M = pr.R * s.asDiagonal();
  pr.sigma = pr.M * pr.M.transpose();
  pr.pc = cam.W * x + cam.t;
  const T z = pr.pc.z();
  if (z < static_cast<T>(st.near)) return pr;

  M23<T> J;
  J << cam.f / z, 0, -cam.f * pr.pc.x() / (z * z),  //
      0, cam.f / z, -cam.f * pr.pc.y() / (z * z);
  pr.T2 = J * cam.W;
  M2<T> cov = pr.T2 * pr.sigma * pr.T2.transpose();
  cov(0, 0) += static_cast<T>(st.cov_regularizer);
  cov(1, 1) += static_cast<T>(st.cov_regularizer);
  const T det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
  if (!(det > T(0))) return pr;
  pr.conic << cov(1, 1) / det, -cov(0, 1) / det, -cov(1, 0) / det, cov(0, 0) / det;
  pr.mean << cam.cx + cam.f * pr.pc.x() / z, cam.cy + cam.f * pr.pc.y() / z;

  // Outside this radius the weight is below the cutoff even at full opacity
  // along the major axis, so the box never clips a kept contribution.
  const T opacity = p[10];
  if (!(opacity >= static_cast<T>(st.min_weight))) return pr;
  const T mid = T(0.5) * (cov(0, 0) + cov(1, 1));
  const T lambda_max = mid + std::sqrt(std::max(T(0), mid * mid - det));
  const T radius = std::sqrt(T(2) * std::log(opacity / static_cast<T>(st.min_weight)) * lambda_max) + T(1e-3);
  pr.x0 = std::max(0, static_cast<int>(std::ceil(pr.mean.x() - radius - T(0.5))));
  pr.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(pr.mean.x() + radius - T(0.5))));
  pr.y0 = std::max(0, static_cast<int>(std::ceil(pr.mean.y() - radius - T(0.5))));
  pr.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(pr.mean.y() + radius - T(0.5))));
  pr.visible = pr.x0 <= pr.x1 && pr.y0 <= pr.y1;
  return pr;
}

template <typename T>
struct Contribution {
  int pixel;
  int gaussian;
  T G;       // exp(power)
  T w;       // opacity * G
  T before;  // transmittance in front of this contribution
};

template <typename T>
struct SplatForward {
  int n = 0;
  std::vector<T> params;
  std::vector<Projected<T>> proj;
  std::vector<Contribution<T>> contribs;  // Gaussian-major in depth order
  std::vector<T> out;                     // [4, H, W]
};

template <typename T>
void check_finite(std::span<const T> params) {
  for (T v : params)
    if (!std::isfinite(v)) throw NumericError("splat_render: non-finite Gaussian parameter");
}

template <typename T>
SplatForward<T> splat_forward(std::span<const T> params, const CameraPose& camera, const std::array<T, 3>& bg,
                              const SplatSettings& st) {
  if (params.size() % kGaussianParams != 0) throw ShapeError("splat_render: parameter count not a multiple of 14");
  check_finite(params);
  const ProjCamera<T> cam(camera);
  SplatForward<T> fw;
  fw.n = static_cast<int>(params.size() / kGaussianParams);
  fw.params.assign(params.begin(), params.end());
  fw.proj.reserve(fw.n);
  for (int i = 0; i < fw.n; ++i) fw.proj.push_back(project_one<T>(params.data() + i * kGaussianParams, cam, st));

  std::vector<int> order;
  for (int i = 0; i < fw.n; ++i)
    if (fw.proj[i].visible) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return fw.proj[a].pc.z() < fw.proj[b].pc.z(); });

  const int W = cam.width, H = cam.height;
  const std::size_t npix = static_cast<std::size_t>(W) * H;
  std::vector<T> trans(npix, T(1));
  std::vector<std::uint8_t> done(npix, 0);
  fw.out.assign(4 * npix, T(0));
  const T min_w = static_cast<T>(st.min_weight), min_t = static_cast<T>(st.min_transmittance);

  for (int i : order) {
    const auto& pr = fw.proj[i];
    const T* p = params.data() + i * kGaussianParams;
    const T opacity = p[10];
    for (int y = pr.y0; y <= pr.y1; ++y) {
      for (int x = pr.x0; x <= pr.x1; ++x) {
        const std::size_t pix = static_cast<std::size_t>(y) * W + x;
        if (done[pix]) continue;
        const T dx = T(x) + T(0.5) - pr.mean.x(), dy = T(y) + T(0.5) - pr.mean.y();
        const T power =
            T(-0.5) * (pr.conic(0, 0) * dx * dx + T(2) * pr.conic(0, 1) * dx * dy + pr.conic(1, 1) * dy * dy);
        const T G = std::exp(power);
        const T w = opacity * G;
        if (w < min_w) continue;
        const T tb = trans[pix];
        for (int k = 0; k < 3; ++k) fw.out[k * npix + pix] += tb * w * p[11 + k];
        fw.contribs.push_back({static_cast<int>(pix), i, G, w, tb});
        trans[pix] = tb * (T(1) - w);
        if (trans[pix] < min_t) done[pix] = 1;
      }
    }
  }
  for (std::size_t pix = 0; pix < npix; ++pix) {
    for (int k = 0; k < 3; ++k) fw.out[k * npix + pix] += trans[pix] * bg[k];
    fw.out[3 * npix + pix] = T(1) - trans[pix];
  }
  return fw;
}

// Accumulates d(loss)/d(params) given d(loss)/d(out) for out = [r, g, b, alpha].
template <typename T>
void splat_backward(const SplatForward<T>& fw, const CameraPose& camera, const std::array<T, 3>& bg,
                    std::span<const T> grad_out, std::span<T> grad_params) {
  const ProjCamera<T> cam(camera);
  const std::size_t npix = static_cast<std::size_t>(cam.width) * cam.height;

  struct Acc {
    T gu = 0, gv = 0, gk00 = 0, gk01 = 0, gk11 = 0, go = 0;
    T gc[3] = {0, 0, 0};
  };
  std::vector<Acc> acc(static_cast<std::size_t>(fw.n));

  // Walking the contributions backwards visits each pixel back to front.
  // behind[pix] is the colour seen behind the current contribution (starting
  // from the background) and through[pix] the transmittance of everything
  // behind it, so no division by (1 - w) is needed.
  std::vector<T> behind(3 * npix), through(npix, T(1));
  for (std::size_t pix = 0; pix < npix; ++pix)
    for (int k = 0; k < 3; ++k) behind[3 * pix + k] = bg[k];

  for (auto it = fw.contribs.rbegin(); it != fw.contribs.rend(); ++it) {
    const std::size_t pix = static_cast<std::size_t>(it->pixel);
    const T* p = fw.params.data() + it->gaussian * kGaussianParams;
    Acc& a = acc[static_cast<std::size_t>(it->gaussian)];
    T* B = &behind[3 * pix];
    T dw = grad_out[3 * npix + pix] * it->before * through[pix];
    for (int k = 0; k < 3; ++k) {
      const T g = grad_out[k * npix + pix];
      dw += g * it->before * (p[11 + k] - B[k]);
      a.gc[k] += g * it->before * it->w;
    }
    for (int k = 0; k < 3; ++k) B[k] = it->w * p[11 + k] + (T(1) - it->w) * B[k];
    through[pix] *= T(1) - it->w;

    a.go += dw * it->G;
    const T dpower = dw * it->w;
    const auto& pr = fw.proj[static_cast<std::size_t>(it->gaussian)];
    const int x = it->pixel % cam.width, y = it->pixel / cam.width;
    const T dx = T(x) + T(0.5) - pr.mean.x(), dy = T(y) + T(0.5) - pr.mean.y();
    a.gu += dpower * (pr.conic(0, 0) * dx + pr.conic(0, 1) * dy);
    a.gv += dpower * (pr.conic(0, 1) * dx + pr.conic(1, 1) * dy);
    a.gk00 += dpower * T(-0.5) * dx * dx;
    a.gk01 += dpower * -dx * dy;
    a.gk11 += dpower * T(-0.5) * dy * dy;
  }

  for (int i = 0; i < fw.n; ++i) {
    const auto& pr = fw.proj[static_cast<std::size_t>(i)];
    if (!pr.visible) continue;
    const Acc& a = acc[static_cast<std::size_t>(i)];
    const T* p = fw.params.data() + i * kGaussianParams;
    T* g = grad_params.data() + i * kGaussianParams;

    g[10] += a.go;
    for (int k = 0; k < 3; ++k) g[11 + k] += a.gc[k];

    M2<T> gK;
    gK << a.gk00, T(0.5) * a.gk01, T(0.5) * a.gk01, a.gk11;
    const M2<T> gcov = -pr.conic * gK * pr.conic;
    const M23<T> gT2 = T(2) * gcov * pr.T2 * pr.sigma;
    const M3<T> gsigma = pr.T2.transpose() * gcov * pr.T2;
    const M3<T> gM = T(2) * gsigma * pr.M;
    M3<T> gR;
    for (int c = 0; c < 3; ++c) {
      g[3 + c] += gM.col(c).dot(pr.R.col(c));
      gR.col(c) = gM.col(c) * p[3 + c];
    }
    const V4<T> gqn = quat_grad<T>(pr.qn, gR);
    const V4<T> gq = (gqn - pr.qn * pr.qn.dot(gqn)) / pr.qnorm;
    for (int k = 0; k < 4; ++k) g[6 + k] += gq[k];

    const M23<T> gJ = gT2 * cam.W.transpose();
    const T z = pr.pc.z(), px = pr.pc.x(), py = pr.pc.y(), f = cam.f;
    const T z2 = z * z, z3 = z2 * z;
    V3<T> gpc;
    gpc.x() = a.gu * f / z - gJ(0, 2) * f / z2;
    gpc.y() = a.gv * f / z - gJ(1, 2) * f / z2;
    gpc.z() = -a.gu * f * px / z2 - a.gv * f * py / z2 - (gJ(0, 0) + gJ(1, 1)) * f / z2 +
              gJ(0, 2) * T(2) * f * px / z3 + gJ(1, 2) * T(2) * f * py / z3;
    const V3<T> gx = cam.W.transpose() * gpc;
    for (int k = 0; k < 3; ++k) g[k] += gx[k];
  }
}

}  // namespace

std::array<float, kGaussianParams> Gaussian::pack() const {
  return {x[0], x[1], x[2], scale[0], scale[1], scale[2], q[0], q[1], q[2], q[3], opacity, color[0], color[1], color[2]};
}

Gaussian Gaussian::unpack(std::span<const float> p) {
  if (p.size() < kGaussianParams) throw std::invalid_argument("Gaussian::unpack needs 14 values");
  Gaussian g;
  g.x = {p[0], p[1], p[2]};
  g.scale = {p[3], p[4], p[5]};
  g.q = {p[6], p[7], p[8], p[9]};
  g.opacity = p[10];
  g.color = {p[11], p[12], p[13]};
  return g;
}

std::vector<float> pack_gaussians(const GaussianSet& set) {
  std::vector<float> out;
  out.reserve(set.size() * kGaussianParams);
  for (const auto& g : set) {
    const auto p = g.pack();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

GaussianSet unpack_gaussians(std::span<const float> params) {
  if (params.size() % kGaussianParams != 0) throw ShapeError("Gaussian parameter count not a multiple of 14");
  GaussianSet set;
  for (std::size_t i = 0; i < params.size(); i += kGaussianParams)
    set.push_back(Gaussian::unpack(params.subspan(i, kGaussianParams)));
  return set;
}

Eigen::Matrix3f covariance_3d(const Gaussian& g) {
  const float n = g.q.norm();
  if (!(n > 0.0f)) throw std::invalid_argument("Gaussian has a zero quaternion");
  const Eigen::Matrix3f M = rotation_from_unit_quat<float>(g.q / n) * g.scale.asDiagonal();
  return M * M.transpose();
}

ProjectedGaussian project(const Gaussian& g, const CameraPose& cam, const SplatSettings& settings) {
  const auto p = g.pack();
  const ProjCamera<float> pc(cam);
  const auto pr = project_one<float>(p.data(), pc, settings);
  if (pr.pc.z() < settings.near) throw std::domain_error("Gaussian is behind the camera near plane");
  ProjectedGaussian out;
  out.mean = pr.mean;
  out.cov = pr.conic.inverse();
  out.depth = pr.pc.z();
  return out;
}

SplatImage splat_render(const GaussianSet& set, const CameraPose& cam, const Eigen::Vector3f& background,
                        const SplatSettings& settings) {
  const auto params = pack_gaussians(set);
  const auto fw = splat_forward<float>(params, cam, {background[0], background[1], background[2]}, settings);
  const std::span<const float> out(fw.out);
  const std::size_t npix = static_cast<std::size_t>(cam.width) * cam.height;
  SplatImage img;
  img.camera = cam;
  img.color = Image::from_planar(out.subspan(0, 3 * npix), 3, cam.height, cam.width);
  img.alpha = Image::from_planar(out.subspan(3 * npix, npix), 1, cam.height, cam.width);
  return img;
}

template <typename T>
BasicTensor<T> splat_render(const BasicTensor<T>& params, const CameraPose& cam, const std::array<T, 3>& background,
                            const SplatSettings& settings) {
  if (params.rank() != 2 || params.dim(1) != kGaussianParams) {
    throw ShapeError("splat_render expects [N, 14] parameters, got " + shape_str(params.shape()));
  }
  auto fw = std::make_shared<SplatForward<T>>(splat_forward<T>(params.data(), cam, background, settings));
  std::vector<T> out = fw->out;
  return make_op_result<T>(
      "splat", {4, cam.height, cam.width}, std::move(out), {params},
      [fw, cam, background](std::span<const T>, std::span<const T> grad_out, std::span<const std::span<T>> grad_in) {
        if (!grad_in[0].empty()) splat_backward<T>(*fw, cam, background, grad_out, grad_in[0]);
      });
}

template BasicTensor<float> splat_render(const BasicTensor<float>&, const CameraPose&, const std::array<float, 3>&,
                                         const SplatSettings&);
template BasicTensor<double> splat_render(const BasicTensor<double>&, const CameraPose&, const std::array<double, 3>&,
                                          const SplatSettings&);

SplatGradCheck splat_gradcheck(const GaussianSet& set, const CameraPose& cam, double h, std::uint64_t weight_seed,
                               const SplatSettings& settings) {
  const auto pf = pack_gaussians(set);
  const std::vector<double> params(pf.begin(), pf.end());
  const std::array<double, 3> bg{0.0, 0.0, 0.0};
  const std::size_t nout = 4 * static_cast<std::size_t>(cam.width) * cam.height;
  std::vector<double> weights(nout);
  Rng rng(weight_seed);
  for (auto& w : weights) w = rng.normal();

  auto loss = [&](const std::vector<double>& p) {
    const auto fw = splat_forward<double>(p, cam, bg, settings);
    return std::inner_product(fw.out.begin(), fw.out.end(), weights.begin(), 0.0);
  };
  std::vector<double> analytic(params.size(), 0.0);
  splat_backward<double>(splat_forward<double>(params, cam, bg, settings), cam, bg, weights, analytic);

  SplatGradCheck res;
  const double base = loss(params);
  for (std::size_t k = 0; k < params.size(); ++k) {
    // The 1/255 and transmittance cutoffs make the loss piecewise smooth. A central difference whose
    // interval straddles a cutoff measures the jump, not the slope, so when the one-sided differences
    // disagree the step shrinks until they agree or the step floor is reached.
    auto probe = params;
    double numeric = 0.0;
    for (double step = h, floor = h * 1e-2; step >= floor * 0.999; step *= 0.1) {
      probe[k] = params[k] + step;
      const double up = loss(probe);
      probe[k] = params[k] - step;
      const double down = loss(probe);
      probe[k] = params[k];
      numeric = (up - down) / (2 * step);
      const double fwd = (up - base) / step, bwd = (base - down) / step;
      if (std::abs(fwd - bwd) <= 0.1 * (std::abs(fwd) + std::abs(bwd)) + 1e-4) break;
    }
    const double err = std::abs(analytic[k] - numeric) / (std::abs(analytic[k]) + std::abs(numeric) + 1e-8);
    if (err > res.max_rel_error) {
      res = {err, static_cast<int>(k / kGaussianParams), static_cast<int>(k % kGaussianParams), analytic[k], numeric};
    }
  }
  return res;
}

namespace {
constexpr char kGsMagic[8] = {'S', 'A', 'T', 'G', 'S', '1', '\0', '\0'};
}

std::vector<char> encode_gaussians(const GaussianSet& set) {
  ByteWriter w;
  w.raw(kGsMagic, 8);
  w.u32(static_cast<std::uint32_t>(set.size()));
  w.f32s(pack_gaussians(set));
  return w.bytes();
}

GaussianSet decode_gaussians(const std::vector<char>& bytes) {
  ByteReader r(bytes);
  try {
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, kGsMagic, 8) != 0) throw FormatError("bad Gaussian file magic");
    const auto count = r.u32();
    if (static_cast<std::size_t>(count) * kGaussianParams * 4 > r.remaining()) throw TruncatedInput();
    std::vector<float> params(static_cast<std::size_t>(count) * kGaussianParams);
    r.f32s(params);
    return unpack_gaussians(params);
  } catch (const TruncatedInput&) {
    throw FormatError("truncated Gaussian file");
  }
}

void save_gaussians(const std::filesystem::path& path, const GaussianSet& set) {
  write_file_bytes(path, encode_gaussians(set));
}

GaussianSet load_gaussians(const std::filesystem::path& path) { return decode_gaussians(read_file_bytes(path)); }

}  // namespace sat
