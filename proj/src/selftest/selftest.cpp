#include "sat/selftest.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>

#include "sat/binary_io.hpp"
#include "sat/body.hpp"
#include "sat/checkpoint.hpp"
#include "sat/gradcheck.hpp"
#include "sat/metrics.hpp"
#include "sat/pipeline.hpp"
#include "sat/rng.hpp"
#include "sat/splat.hpp"

namespace sat {

namespace {

// Collects failures; the first few are kept as the detail string.
class Tally {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (ok) return;
    ++failed_;
    if (failed_ <= 4) msg_ += (failed_ > 1 ? "; " : "") + what;
  }
  void note(const std::string& s) { notes_ += (notes_.empty() ? "" : "; ") + s; }
  CheckResult finish(std::string name, std::chrono::steady_clock::time_point t0) const {
    CheckResult r;
    r.name = std::move(name);
    r.passed = failed_ == 0;
    std::ostringstream d;
    d << (total_ - failed_) << "/" << total_ << " checks";
    if (!notes_.empty()) d << "; " << notes_;
    if (failed_) d << "; failed: " << msg_;
    r.detail = d.str();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }

 private:
  int total_ = 0, failed_ = 0;
  std::string msg_, notes_;
};

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(3);
  o << v;
  return o.str();
}

TensorD randn(const Shape& shape, Rng& rng, double min_abs) {
  std::vector<double> d(static_cast<std::size_t>(numel(shape)));
  for (auto& v : d) {
    double x = rng.normal();
    while (std::abs(x) < min_abs) x = rng.normal();
    v = x;
  }
  return TensorD(shape, std::move(d));
}

// Random linear functional of the op output, so every output element matters.
TensorD weighted_sum(const TensorD& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, randn(y.shape(), rng, 0.0)));
}

GaussianSet random_scene(Rng& rng, int n) {
  GaussianSet set;
  for (int i = 0; i < n; ++i) {
    Gaussian g;
    g.x = Vec3(static_cast<float>(rng.uniform(-0.15, 0.15)), static_cast<float>(rng.uniform(-0.15, 0.15)),
               static_cast<float>(rng.uniform(-0.3, 0.3)));
    g.scale = Vec3(static_cast<float>(rng.uniform(0.04, 0.12)), static_cast<float>(rng.uniform(0.04, 0.12)),
                   static_cast<float>(rng.uniform(0.04, 0.12)));
    g.q = Eigen::Vector4f(static_cast<float>(rng.normal()), static_cast<float>(rng.normal()),
                          static_cast<float>(rng.normal()), static_cast<float>(rng.normal()));
    g.opacity = static_cast<float>(rng.uniform(0.2, 0.8));
    g.color = Vec3(static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
                   static_cast<float>(rng.uniform()));
    set.push_back(g);
  }
  return set;
}

double brute_nn(const Vec3& q, const std::vector<Vec3>& pts, int* index = nullptr) {
  double best = INFINITY;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double dx = double(q.x()) - pts[i].x(), dy = double(q.y()) - pts[i].y(), dz = double(q.z()) - pts[i].z();
    const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
    if (d < best) {
      best = d;
      if (index) *index = static_cast<int>(i);
    }
  }
  return best;
}

std::vector<float> flat_params(const ReconNet& net) {
  std::vector<float> out;
  for (const auto& p : net.params()) {
    const auto d = p.tensor.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

bool same_bytes(const std::filesystem::path& a, const std::filesystem::path& b) {
  return read_file_bytes(a) == read_file_bytes(b);
}

}  // namespace

CheckResult check_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Tally t;
  using F = std::function<TensorD(const std::vector<TensorD>&)>;
  struct Case {
    std::vector<Shape> shapes;
    F fn;
    double threshold = 1e-3;
    double min_abs = 0.0;
    bool positive = false;
  };
  // Kinked ops (relu, abs) use the 1e-2 bound and keep inputs off the kink.
  std::map<std::string, Case> cases;
  cases["add"] = {{{3, 4}, {4}}, [](const auto& i) { return add(i[0], i[1]); }};
  cases["sub"] = {{{3, 4}, {3, 1}}, [](const auto& i) { return sub(i[0], i[1]); }};
  cases["mul"] = {{{2, 3, 4}, {3, 4}}, [](const auto& i) { return mul(i[0], i[1]); }};
  cases["div"] = {{{3, 4}, {3, 4}}, [](const auto& i) { return div(i[0], i[1]); }, 1e-3, 0.5};
  cases["scalar-mul"] = {{{5}}, [](const auto& i) { return scale(i[0], 1.7); }};
  cases["matmul"] = {{{3, 4}, {4, 2}}, [](const auto& i) { return matmul(i[0], i[1]); }};
  cases["conv2d"] = {{{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}, [](const auto& i) { return conv2d(i[0], i[1], i[2], 2, 1); }};
  cases["transposed-conv2d"] = {{{1, 2, 3, 3}, {2, 3, 4, 4}, {3}},
                                [](const auto& i) { return conv_transpose2d(i[0], i[1], i[2], 2, 1); }};
  cases["relu"] = {{{12}}, [](const auto& i) { return relu(i[0]); }, 1e-2, 1e-2};
  cases["sigmoid"] = {{{12}}, [](const auto& i) { return sigmoid(i[0]); }};
  cases["tanh"] = {{{12}}, [](const auto& i) { return tanh(i[0]); }};
  cases["softplus"] = {{{12}}, [](const auto& i) { return softplus(i[0]); }};
  cases["exp"] = {{{12}}, [](const auto& i) { return exp(i[0]); }};
  cases["log"] = {{{12}}, [](const auto& i) { return log(i[0]); }, 1e-3, 0.2, true};
  cases["sqrt"] = {{{12}}, [](const auto& i) { return sqrt(i[0]); }, 1e-3, 0.2, true};
  cases["abs"] = {{{12}}, [](const auto& i) { return abs(i[0]); }, 1e-2, 1e-2};
  cases["square"] = {{{12}}, [](const auto& i) { return square(i[0]); }};
  cases["silu"] = {{{12}}, [](const auto& i) { return silu(i[0]); }};
  cases["sum"] = {{{3, 4, 2}}, [](const auto& i) { return sum(i[0], 1, false); }};
  cases["mean"] = {{{3, 4, 2}}, [](const auto& i) { return mean(i[0], 2, true); }};
  cases["softmax"] = {{{3, 5}}, [](const auto& i) { return softmax(i[0], 1); }};
  cases["group-norm"] = {{{2, 4, 3, 3}, {4}, {4}},
                         [](const auto& i) { return group_norm(i[0], 2, i[1], i[2], 1e-5); }};
  cases["concat"] = {{{2, 3}, {2, 2}}, [](const auto& i) { return concat<double>({i[0], i[1]}, 1); }};
  cases["slice"] = {{{4, 5}}, [](const auto& i) { return slice(i[0], 1, 1, 4); }};
  cases["reshape"] = {{{4, 6}}, [](const auto& i) { return reshape(i[0], {2, 12}); }};
  cases["permute"] = {{{2, 3, 4}}, [](const auto& i) { return permute(i[0], {2, 0, 1}); }};
  cases["nearest-upsample2x"] = {{{2, 3, 3}}, [](const auto& i) { return upsample_nearest2x(i[0]); }};
  cases["avgpool2x"] = {{{2, 4, 6}}, [](const auto& i) { return avg_pool2x(i[0]); }};
  cases["l2-norm"] = {{{7}}, [](const auto& i) { return l2_norm(i[0]); }};

  double worst_op = 0;
  for (const auto& id : registered_ops()) {
    auto it = cases.find(id);
    t.expect(it != cases.end(), "no gradient case for op " + id);
    if (it == cases.end()) continue;
    const Case& c = it->second;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(derive_seed(seed, std::hash<std::string>{}(id) & 0xffff));
      std::vector<TensorD> inputs;
      for (const auto& s : c.shapes) {
        TensorD x = randn(s, rng, c.min_abs);
        if (c.positive)
          for (auto& v : x.mutable_data()) v = std::abs(v) + 0.2;
        inputs.push_back(x);
      }
      const double err = grad_check<double>(
          [&c, seed](const std::vector<TensorD>& in) { return weighted_sum(c.fn(in), 1000 + seed); }, inputs, 1e-3);
      worst_op = std::max(worst_op, err / c.threshold);
      t.expect(err < c.threshold, id + " rel err " + fmt(err));
    }
  }
  t.note(std::to_string(registered_ops().size()) + " ops, worst err/bound " + fmt(worst_op));

  const auto cam = orbit_camera(0, 0, 1.5f, 49, 16, 16);
  double worst_splat = 0;
  for (int n : {1, 4, 8}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng rng(derive_seed(0x5914, static_cast<std::uint64_t>(n) * 16 + seed));
      const auto r = splat_gradcheck(random_scene(rng, n), cam, 1e-5, seed);
      worst_splat = std::max(worst_splat, r.max_rel_error);
      t.expect(r.max_rel_error < 2e-2, "splat n=" + std::to_string(n) + " rel err " + fmt(r.max_rel_error));
    }
  }
  t.note("splat worst rel err " + fmt(worst_splat));
  return t.finish("gradients", t0);
}

CheckResult check_lbs_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  Tally t;
  const auto body = make_humanoid(sample_shape(5), 5);
  const auto rest = lbs_deform(body, PoseParams::identity());
  float worst = 0;
  for (std::size_t i = 0; i < rest.vertices.size(); ++i)
    worst = std::max(worst, (rest.vertices[i] - body.mesh.vertices[i]).norm());
  t.expect(worst <= 1e-5f, "identity pose moved a vertex by " + fmt(worst));

  auto rigid = [](const Eigen::Matrix3f& r, const Vec3& x) {
    Eigen::Isometry3f g = Eigen::Isometry3f::Identity();
    g.linear() = r;
    g.translation() = x;
    return g;
  };
  std::vector<Eigen::Isometry3f> g(kBoneCount, Eigen::Isometry3f::Identity());
  g[kHead] = rigid(Eigen::AngleAxisf(static_cast<float>(M_PI / 2), Vec3::UnitZ()).toRotationMatrix(), Vec3::Zero());
  std::vector<float> w(kBoneCount, 0.0f);
  w[kHead] = 1.0f;
  const float rot_err = (lbs_apply({Vec3(1, 0, 0)}, w, g)[0] - Vec3(0, 1, 0)).norm();
  t.expect(rot_err <= 1e-6f, "single-bone rotation error " + fmt(rot_err));

  // x' = sum_j w_j (R_j x + t_j) with R = I, w = 1/2 each.
  const Vec3 t1(0.2f, -0.4f, 1.0f), t2(-0.6f, 0.3f, 0.1f), x(0.3f, 0.7f, -0.2f);
  g.assign(kBoneCount, Eigen::Isometry3f::Identity());
  g[kSpine] = rigid(Eigen::Matrix3f::Identity(), t1);
  g[kRightForearm] = rigid(Eigen::Matrix3f::Identity(), t2);
  w.assign(kBoneCount, 0.0f);
  w[kSpine] = w[kRightForearm] = 0.5f;
  const Vec3 expect(x.x() + 0.5f * t1.x() + 0.5f * t2.x(), x.y() + 0.5f * t1.y() + 0.5f * t2.y(),
                    x.z() + 0.5f * t1.z() + 0.5f * t2.z());
  const float blend_err = (lbs_apply({x}, w, g)[0] - expect).norm();
  t.expect(blend_err <= 1e-6f, "two-bone blend error " + fmt(blend_err));
  return t.finish("lbs oracles", t0);
}

CheckResult check_metric_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  Tally t;
  auto random_points = [](int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Vec3> p;
    for (int i = 0; i < n; ++i)
      p.emplace_back(static_cast<float>(rng.uniform(-0.1, 0.1)), static_cast<float>(rng.uniform(-0.1, 0.1)),
                     static_cast<float>(rng.uniform(-0.1, 0.1)));
    return p;
  };
  for (std::uint64_t s = 0; s < 5; ++s) {
    const int na = 50, nb = 37 + static_cast<int>(s);
    const auto a = random_points(na, 10 + s), b = random_points(nb, 20 + s);
    double p2s = 0, s2p = 0;
    for (const auto& q : a) p2s += brute_nn(q, b);
    for (const auto& q : b) s2p += brute_nn(q, a);
    const Chamfer c = chamfer(a, b);
    t.expect(c.p2s == p2s / na * 100.0 && c.s2p == s2p / nb * 100.0, "chamfer differs from all-pairs loop");

    const double tau = 2.0;
    double hp = 0, hr = 0;
    for (const auto& q : a) hp += brute_nn(q, b) < tau / 100.0;
    for (const auto& q : b) hr += brute_nn(q, a) < tau / 100.0;
    hp /= na;
    hr /= nb;
    t.expect(fscore(a, b, tau) == (hp + hr > 0 ? 200.0 * hp * hr / (hp + hr) : 0.0), "f-score differs from loop");

    PointCloud pa{a, {}}, pb{b, {}};
    Rng rng(s);
    auto unit = [&] {
      Vec3 v(static_cast<float>(rng.normal()), static_cast<float>(rng.normal()), static_cast<float>(rng.normal()));
      return Vec3(v.normalized());
    };
    for (int i = 0; i < na; ++i) pa.normals.push_back(unit());
    for (int i = 0; i < nb; ++i) pb.normals.push_back(unit());
    double one = 0, two = 0;
    for (int i = 0; i < na; ++i) {
      int j = 0;
      brute_nn(a[i], b, &j);
      one += std::abs(static_cast<double>(pa.normals[i].normalized().dot(pb.normals[j].normalized())));
    }
    for (int i = 0; i < nb; ++i) {
      int j = 0;
      brute_nn(b[i], a, &j);
      two += std::abs(static_cast<double>(pb.normals[i].normalized().dot(pa.normals[j].normalized())));
    }
    t.expect(normal_consistency(pa, pb) == 0.5 * (one / na + two / nb), "normal consistency differs from loop");
  }

  Rng rng(8);
  Image img(16, 16, 3), zeros(16, 16, 3), ones(16, 16, 3, 1.0f);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  t.expect(psnr(img, img) == kPsnrCap, "psnr(identical) is not the cap");
  t.expect(ssim(img, img) == 1.0, "ssim(identical) is not 1");
  t.expect(psnr(zeros, ones) == 0.0, "psnr(0, 1) is not 0 dB");
  return t.finish("metric oracles", t0);
}

CheckResult check_splat_compositing() {
  const auto t0 = std::chrono::steady_clock::now();
  Tally t;
  const auto cam = orbit_camera(0, 0, 1.5f, 49, 16, 16);
  auto splat = [](Vec3 x, float opacity, Vec3 color) {
    Gaussian g;
    g.x = x;
    g.scale = Vec3::Constant(0.5f);
    g.opacity = opacity;
    g.color = color;
    return g;
  };
  auto centre = [](const SplatImage& img, int c) { return static_cast<double>(img.color.at(8, 8, c)); };

  // One opaque splat covering the centre: C = c, alpha = 1.
  const auto one = splat_render({splat(Vec3::Zero(), 1.0f, Vec3(1, 0, 0))}, cam, Vec3::Zero());
  t.expect(std::abs(centre(one, 0) - 1.0) <= 1e-2 && std::abs(centre(one, 1)) <= 1e-2, "single splat colour");
  t.expect(std::abs(one.alpha.at(8, 8, 0) - 1.0) <= 1e-2, "single splat alpha");

  // Front a over back b, both alpha 0.5: C = 0.5 a + 0.5 * 0.5 b.
  const Vec3 a(0.9f, 0.2f, 0.1f), b(0.1f, 0.5f, 0.8f);
  const auto two = splat_render({splat(Vec3(0, 0, -0.5f), 0.5f, b), splat(Vec3(0, 0, 0.5f), 0.5f, a)}, cam,
                                Vec3::Zero());
  for (int c = 0; c < 3; ++c) {
    const double expect = 0.5 * a[c] + 0.25 * b[c];
    t.expect(std::abs(centre(two, c) - expect) <= 1e-2, "two-splat channel " + std::to_string(c));
  }
  t.expect(std::abs(two.alpha.at(8, 8, 0) - 0.75) <= 1e-2, "two-splat alpha");
  return t.finish("splat compositing", t0);
}

CheckResult check_structural(const std::filesystem::path& scratch) {
  const auto t0 = std::chrono::steady_clock::now();
  Tally t;
  std::filesystem::create_directories(scratch);

  RunConfig cfg;
  cfg.resolution = 16;
  cfg.views = 4;
  cfg.net_width = 8;
  cfg.train_identities = 2;
  cfg.poses_per_identity = 2;
  cfg.test_identities = 1;
  cfg.steps_supervisor = cfg.steps_ugl = cfg.steps_cgt = cfg.steps_anim = 3;
  cfg.eval_samples = 300;
  const Dataset ds = build_dataset(cfg.train_identities, cfg.poses_per_identity, cfg.seed);
  const auto data = make_samples(ds, cfg, 1);

  // Frozen supervisor during UGL.
  const StageResult sup = train_supervisor(data, cfg);
  const auto sup_before = flat_params(sup.net);
  cfg.sfr_taps = TapSubset::all;
  train_ugl(data, sup.net, cfg);
  cfg.sfr_taps = TapSubset::mid_up;
  t.expect(flat_params(sup.net) == sup_before, "supervisor changed during UGL");

  // Frozen, graph-free animation model during augmentation.
  const ReconNet anim(cfg.net_config(8), 3);
  const auto anim_before = flat_params(anim);
  const std::uint64_t nodes = autograd::nodes_created();
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto& smp = ds.samples[s];
    augment_oaa(anim, ds.identity(smp.identity), smp, ds.pool, s, cfg);
  }
  t.expect(autograd::nodes_created() == nodes, "augmentation recorded graph nodes");
  t.expect(flat_params(anim) == anim_before, "animation model changed during augmentation");

  const TrainingSampler sampler(AugMode::oaa, 0.5f, 11);
  int hits = 0;
  for (std::uint64_t i = 0; i < 10000; ++i) hits += sampler.augment(i);
  t.expect(std::abs(hits / 10000.0 - 0.5) <= 0.02, "sampler frequency " + fmt(hits / 10000.0));

  // write -> read -> write reproduces the bytes of every format.
  auto twice = [&](const std::string& name, const std::function<void(const std::filesystem::path&)>& write,
                   const std::function<void(const std::filesystem::path&, const std::filesystem::path&)>& reread) {
    const auto a = scratch / ("a_" + name), b = scratch / ("b_" + name);
    write(a);
    reread(a, b);
    t.expect(same_bytes(a, b), name + " round trip not bit-exact");
  };
  const Checkpoint ck = stage_checkpoint(sup.net, cfg, "supervisor");
  twice("ckpt", [&](const auto& p) { write_checkpoint(p, ck); },
        [](const auto& a, const auto& b) { write_checkpoint(b, read_checkpoint(a)); });
  Rng rng(4);
  const GaussianSet scene = random_scene(rng, 6);
  twice("gs", [&](const auto& p) { save_gaussians(p, scene); },
        [](const auto& a, const auto& b) { save_gaussians(b, load_gaussians(a)); });
  twice("png", [&](const auto& p) { write_png(p, data[0].target_rgb[0]); },
        [](const auto& a, const auto& b) { write_png(b, read_png(a)); });
  twice("pfm", [&](const auto& p) { write_pfm(p, data[0].target_normal[0]); },
        [](const auto& a, const auto& b) { write_pfm(b, read_pfm(a)); });
  twice("obj", [&](const auto& p) { write_obj(p, ds.samples[0].scan); },
        [](const auto& a, const auto& b) { write_obj(b, read_obj(a)); });
  const auto& body = ds.identities[0].body;
  twice("skin", [&](const auto& p) { save_skinning(p, body); },
        [&](const auto& a, const auto& b) { save_skinning(b, load_skinning(a, body.mesh)); });
  t.expect(pack_gaussians(load_gaussians(scratch / "a_gs")) == pack_gaussians(scene), "Gaussian values changed");
  t.expect(read_pfm(scratch / "a_pfm").data == data[0].target_normal[0].data, "PFM values changed");
  {
    const auto da = scratch / "data_a", db = scratch / "data_b";
    std::filesystem::remove_all(da);
    std::filesystem::remove_all(db);
    save_dataset(da, ds);
    save_dataset(db, load_dataset(da));
    t.expect(same_bytes(da / "manifest.txt", db / "manifest.txt"), "dataset manifest round trip");
    t.expect(same_bytes(da / "scans" / "i0_p0.obj", db / "scans" / "i0_p0.obj"), "dataset scan round trip");
  }

  // Full toy pipeline twice from scratch.
  std::string reports[2];
  for (int k = 0; k < 2; ++k) {
    RunConfig run = cfg;
    run.out_dir = (scratch / ("run" + std::to_string(k))).string();
    std::filesystem::remove_all(run.out_dir);
    reports[k] = run_pipeline(run).report.to_json();
  }
  t.expect(reports[0] == reports[1], "pipeline reports differ between identical runs");
  return t.finish("structural contracts", t0);
}

std::vector<CheckResult> run_selftest(const std::filesystem::path& scratch) {
  return {check_gradients(), check_lbs_oracles(), check_metric_oracles(), check_splat_compositing(),
          check_structural(scratch)};
}

}  // namespace sat
