#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "sat/pipeline.hpp"
#include "sat/raster.hpp"

using namespace sat;

namespace {

RunConfig toy_config() {
  RunConfig cfg;
  cfg.resolution = 16;
  cfg.views = 4;
  cfg.net_width = 8;
  cfg.train_identities = 2;
  cfg.poses_per_identity = 2;
  cfg.test_identities = 1;
  cfg.steps_supervisor = cfg.steps_ugl = cfg.steps_cgt = cfg.steps_anim = 3;
  cfg.eval_samples = 300;
  cfg.lr = 1e-3f;
  return cfg;
}

std::vector<float> flat_params(const ReconNet& net) {
  std::vector<float> out;
  for (const auto& p : net.params()) {
    const auto d = p.tensor.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

double mask_iou(const Image& a, const Image& b, float threshold = 0.5f) {
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] > threshold, y = b.data[i] > threshold;
    inter += x && y;
    uni += x || y;
  }
  return uni ? static_cast<double>(inter) / uni : 1.0;
}

std::filesystem::path scratch_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / "sat_test_pipeline" / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

struct ToyWorld {
  RunConfig cfg = toy_config();
  Dataset ds = build_dataset(cfg.train_identities, cfg.poses_per_identity, cfg.seed);
  std::vector<TrainingSample> data = make_samples(ds, cfg, 1);
};

}  // namespace

TEST_CASE("config parses, validates and hashes") {
  const RunConfig cfg = RunConfig::parse("# comment\nresolution = 32\nseed = 7  # trailing\naug_mode = oaa\n\n");
  CHECK(cfg.resolution == 32);
  CHECK(cfg.seed == 7u);
  CHECK(cfg.aug_mode == AugMode::oaa);
  CHECK(cfg.lr == doctest::Approx(5e-5));
  CHECK(RunConfig::parse("lr = 0.003\n").lr == doctest::Approx(3e-3));
  CHECK(RunConfig::parse(cfg.to_text()).to_text() == cfg.to_text());

  CHECK_THROWS_AS(RunConfig::parse("bogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("resolution = abc\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("resolution = 30\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("alpha = -1\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("cascade = sometimes\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("no equals sign\n"), ConfigError);

  RunConfig other = cfg;
  other.out_dir = "elsewhere";
  CHECK(other.hash() == cfg.hash());
  other.seed = 8;
  CHECK(other.hash() != cfg.hash());
  CHECK(cfg.hash().size() == 16);
}

TEST_CASE("supervision cameras alternate elevation") {
  RunConfig cfg = toy_config();
  cfg.views = 8;
  const auto cams = supervision_cameras(cfg);
  REQUIRE(cams.size() == 8);
  for (int k = 0; k < 8; ++k) {
    const float el = std::asin(cams[k].position().y() / cfg.radius) * 180.0f / static_cast<float>(M_PI);
    CHECK(el == doctest::Approx(k % 2 ? 20.0 : 0.0).epsilon(1e-4));
  }
}

TEST_CASE("priors: degenerate case, template source and seeding") {
  ToyWorld w;
  const auto& smp = w.ds.samples[0];
  const auto& body = w.ds.identity(smp.identity).body;
  const auto cams = orthogonal_cameras(w.cfg);

  const auto clean = simulate_priors(smp.scan, smp.scan, cams, {0, 0, 0}, 3);
  for (int v = 0; v < 4; ++v) {
    CHECK(clean[v].data == rasterize(smp.scan, cams[v], RenderMode::normal_world).image.data);
  }

  const TriangleMesh tmpl = skeleton_template_mesh(body.rig, smp.pose);
  const auto a = simulate_priors(smp.scan, tmpl, cams, {}, 3);
  const auto b = simulate_priors(smp.scan, tmpl, cams, {}, 3);
  const auto c = simulate_priors(smp.scan, tmpl, cams, {}, 4);
  for (int v = 0; v < 4; ++v) CHECK(a[v].data == b[v].data);
  CHECK(a[0].data != c[0].data);

  const Image own_left = rasterize(smp.scan, cams[2], RenderMode::normal_world).image;
  double diff = 0;
  for (std::size_t i = 0; i < own_left.data.size(); ++i) diff += std::abs(own_left.data[i] - a[2].data[i]);
  CHECK(diff > 0);
  for (int v = 0; v < 4; ++v)
    for (float x : a[v].data) CHECK((x >= 0 && x <= 1));
}

TEST_CASE("samples carry renders for every supervision view") {
  ToyWorld w;
  REQUIRE(w.data.size() == w.ds.samples.size());
  const auto& s = w.data[0];
  CHECK(s.provenance == Provenance::original);
  CHECK(s.target_rgb.size() == 4);
  CHECK(s.target_mask[0].channels == 1);
  CHECK(s.input_rgb.width == 16);
  CHECK(s.scan.has_value());
}

TEST_CASE("sampler is half and half over 10k draws") {
  const TrainingSampler half(AugMode::lbs, 0.5f, 11);
  int n = 0;
  for (std::uint64_t i = 0; i < 10000; ++i) n += half.augment(i);
  CHECK(std::abs(n / 10000.0 - 0.5) <= 0.02);

  const TrainingSampler none(AugMode::none, 1.0f, 11);
  const TrainingSampler zero(AugMode::oaa, 0.0f, 11);
  const TrainingSampler one(AugMode::oaa, 1.0f, 11);
  for (std::uint64_t i = 0; i < 1000; ++i) {
    CHECK_FALSE(none.augment(i));
    CHECK_FALSE(zero.augment(i));
    CHECK(one.augment(i));
  }
  CHECK_THROWS_AS(TrainingSampler(AugMode::lbs, 1.5f, 0), std::invalid_argument);
}

TEST_CASE("LBS re-pose: identity is exact, translations carry over") {
  ToyWorld w;
  const auto& smp = w.ds.samples[0];
  const auto& body = w.ds.identity(smp.identity).body;
  const TriangleMesh same = lbs_repose_scan(body, smp.pose, smp.pose);
  CHECK(same.vertices == smp.scan.vertices);

  // Weights sum to one, so a pure root translation moves every vertex by it.
  PoseParams moved = smp.pose;
  const Vec3 shift(0.1f, -0.05f, 0.02f);
  moved.translation += shift;
  const TriangleMesh out = lbs_repose_scan(body, smp.pose, moved);
  REQUIRE(out.vertices.size() == smp.scan.vertices.size());
  CHECK(out.triangles == smp.scan.triangles);
  float worst = 0;
  for (std::size_t i = 0; i < out.vertices.size(); ++i)
    worst = std::max(worst, (out.vertices[i] - smp.scan.vertices[i] - shift).norm());
  CHECK(worst < 1e-5f);
}

TEST_CASE("LBS augmentation with the sample's own pose reproduces it") {
  ToyWorld w;
  const auto& smp = w.ds.samples[0];
  const auto& ident = w.ds.identity(smp.identity);
  TemplatePool own;
  own.entries.push_back({smp.pose, ident.body.shape});
  const TrainingSample s = augment_lbs(ident, smp, own, 5, w.cfg);
  CHECK(s.provenance == Provenance::lbs);
  CHECK(s.scan->vertices == smp.scan.vertices);
  for (std::size_t v = 0; v < s.target_rgb.size(); ++v) {
    CHECK(s.target_rgb[v].data == w.data[0].target_rgb[v].data);
    CHECK(s.target_mask[v].data == w.data[0].target_mask[v].data);
  }
  const TrainingSample again = augment_lbs(ident, smp, w.ds.pool, 9, w.cfg);
  CHECK(again.scan->vertices == augment_lbs(ident, smp, w.ds.pool, 9, w.cfg).scan->vertices);
}

TEST_CASE("OAA augmentation is a frozen, graph-free, deterministic pass") {
  ToyWorld w;
  const ReconNet anim(w.cfg.net_config(8), 3);
  const auto before = flat_params(anim);
  const auto& smp = w.ds.samples[1];
  const auto& ident = w.ds.identity(smp.identity);

  const std::uint64_t nodes = autograd::nodes_created();
  const TrainingSample a = augment_oaa(anim, ident, smp, w.ds.pool, 4, w.cfg);
  CHECK(autograd::nodes_created() == nodes);
  const TrainingSample b = augment_oaa(anim, ident, smp, w.ds.pool, 4, w.cfg);
  CHECK(flat_params(anim) == before);

  CHECK(a.provenance == Provenance::oaa);
  CHECK_FALSE(a.scan.has_value());
  REQUIRE(a.gaussians.has_value());
  CHECK(a.gaussians->size() == static_cast<std::size_t>(8 * 16 * 16));
  CHECK(pack_gaussians(*a.gaussians) == pack_gaussians(*b.gaussians));
  CHECK(a.target_rgb[0].data == b.target_rgb[0].data);
  CHECK(a.target_rgb.size() == static_cast<std::size_t>(w.cfg.views));

  TemplatePool empty;
  CHECK_THROWS_AS(augment_oaa(anim, ident, smp, empty, 4, w.cfg), std::invalid_argument);
}

TEST_CASE("trained animation model transfers the template silhouette") {
  RunConfig cfg = toy_config();
  cfg.steps_anim = 150;
  cfg.lr = 3e-3f;
  const Dataset ds = build_dataset(cfg.train_identities, cfg.poses_per_identity, cfg.seed);
  const auto trip = build_triplets(ds, cfg);
  const StageResult anim = train_anim(trip, cfg);
  CHECK(anim.losses.back() < anim.losses.front());

  const auto& smp = ds.samples[0];
  const auto& ident = ds.identity(smp.identity);
  const TrainingSample s = augment_oaa(anim.net, ident, smp, ds.pool, 2, cfg);
  const Image tmpl_front = rasterize(skeleton_template_mesh(ident.body.rig, s.pose), orthogonal_cameras(cfg)[0],
                                     RenderMode::mask)
                               .image;
  const Image aug_front = splat_render(*s.gaussians, orthogonal_cameras(cfg)[0], Eigen::Vector3f::Zero()).alpha;
  CHECK(mask_iou(aug_front, tmpl_front) > 0.5);
}

TEST_CASE("supervisor loss halves and UGL leaves it frozen") {
  ToyWorld w;
  w.cfg.steps_supervisor = 120;
  w.cfg.lr = 3e-3f;
  std::vector<float> logged;
  const StageResult sup = train_supervisor(w.data, w.cfg, [&](int, float l) { logged.push_back(l); });
  CHECK(logged == sup.losses);
  CHECK(sup.losses.size() == 120);
  CHECK(sup.losses.back() < 0.5f * sup.losses.front());

  const auto before = flat_params(sup.net);
  w.cfg.steps_ugl = 4;
  w.cfg.sfr_taps = TapSubset::all;
  const StageResult ugl = train_ugl(w.data, sup.net, w.cfg);
  CHECK(flat_params(sup.net) == before);
  CHECK(ugl.losses.size() == 4);
}

TEST_CASE("alpha = 0 UGL equals training on the render loss alone") {
  ToyWorld w;
  w.cfg.alpha = 0;
  const ReconNet sup(w.cfg.net_config(4), 99);
  const ReconNet other(w.cfg.net_config(4), 123);
  const StageResult a = train_ugl(w.data, sup, w.cfg);
  const StageResult b = train_ugl(w.data, other, w.cfg);
  // With alpha = 0 the supervisor never enters the loss.
  CHECK(a.losses == b.losses);
  CHECK(flat_params(a.net) == flat_params(b.net));

  w.cfg.alpha = 0.5f;
  const StageResult c = train_ugl(w.data, sup, w.cfg);
  CHECK(c.losses != a.losses);
}

TEST_CASE("CGT modes, augmentation and inference") {
  ToyWorld w;
  const ReconNet ugl(w.cfg.net_config(4), 5);
  const auto ugl_before = flat_params(ugl);
  CHECK_THROWS_AS(train_cgt(w.data, nullptr, w.cfg), std::invalid_argument);

  const StageResult cascaded = train_cgt(w.data, &ugl, w.cfg);
  CHECK(flat_params(ugl) == ugl_before);
  w.cfg.cascade = Cascade::separate;
  const StageResult separate = train_cgt(w.data, nullptr, w.cfg);
  CHECK(separate.losses.size() == 3);

  w.cfg.cascade = Cascade::cascaded;
  w.cfg.aug_mode = AugMode::oaa;
  CHECK_THROWS_AS(train_cgt(w.data, &ugl, w.cfg, {&w.ds, nullptr}), std::invalid_argument);
  const ReconNet anim(w.cfg.net_config(8), 6);
  const StageResult oaa = train_cgt(w.data, &ugl, w.cfg, {&w.ds, &anim});
  w.cfg.aug_mode = AugMode::lbs;
  const StageResult lbs = train_cgt(w.data, &ugl, w.cfg, {&w.ds, nullptr});
  CHECK(std::isfinite(oaa.losses.back()));
  CHECK(std::isfinite(lbs.losses.back()));

  const ViewBundle b = cgt_bundle(w.data[0].clean_normals, w.data[0].input_rgb, w.cfg);
  CHECK(std::count(b.roles.begin(), b.roles.end(), ViewRole::input_image) == 1);

  const Reconstruction r = reconstruct(w.data[0], ugl, cascaded.net, w.cfg);
  CHECK(r.normals.size() == static_cast<std::size_t>(4 * 16 * 16));
  CHECK(r.colors.size() == static_cast<std::size_t>(5 * 16 * 16));
  CHECK(pack_gaussians(reconstruct(w.data[0], ugl, cascaded.net, w.cfg).colors) == pack_gaussians(r.colors));
}

TEST_CASE("checkpoints embed the config and refuse mismatches") {
  ToyWorld w;
  const ReconNet net(w.cfg.net_config(4), 1);
  const auto dir = scratch_dir("ckpt");
  write_checkpoint(dir / "ugl.ckpt", stage_checkpoint(net, w.cfg, "ugl"));
  const ReconNet back = load_stage(dir / "ugl.ckpt", w.cfg);
  CHECK(flat_params(back) == flat_params(net));
  CHECK(normal_psnr(back, w.data, false, w.cfg) == normal_psnr(net, w.data, false, w.cfg));

  RunConfig res = w.cfg;
  res.resolution = 32;
  CHECK_THROWS_AS(load_stage(dir / "ugl.ckpt", res), ConfigError);
  RunConfig fov = w.cfg;
  fov.fov = 50;
  CHECK_THROWS_AS(load_stage(dir / "ugl.ckpt", fov), ConfigError);
}

TEST_CASE("toy pipeline is deterministic and writes its artifacts") {
  RunConfig cfg = toy_config();
  cfg.out_dir = scratch_dir("run_a").string();
  const PipelineResult a = run_pipeline(cfg);
  cfg.out_dir = scratch_dir("run_b").string();
  const PipelineResult b = run_pipeline(cfg);
  CHECK(a.report.to_json() == b.report.to_json());
  CHECK(a.report.all_finite());
  CHECK(a.report.config_hash == cfg.hash());
  for (const char* f : {"config.txt", "supervisor.ckpt", "ugl.ckpt", "cgt.ckpt", "ugl_loss.csv", "metrics.json"})
    CHECK(std::filesystem::exists(a.run_dir / f));
  CHECK(a.run_dir.filename() == cfg.hash());
}
