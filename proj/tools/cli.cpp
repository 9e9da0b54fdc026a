#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "sat/checkpoint.hpp"
#include "sat/pipeline.hpp"
#include "sat/raster.hpp"
#include "sat/rng.hpp"
#include "sat/selftest.hpp"

namespace sat::cli {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flags shared by every command.
struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> mode, cascade;
  std::optional<float> alpha;
  std::optional<int> resolution, views, steps;
  std::string data;
  std::string ckpt_supervisor, ckpt_ugl, ckpt_cgt, ckpt_anim;
  std::string split = "test";
  int sample = 0;
  bool extreme = false;
  std::string mesh, gaussians, render_mode = "rgb";
  float azimuth = 0, elevation = 0;
};

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config, "key = value run config");
  app->add_option("--seed", o.seed, "run seed");
  app->add_option("--out", o.out, "output directory (default <out_dir>/<config hash>)");
  app->add_option("--mode", o.mode, "augmentation mode: none, lbs or oaa");
  app->add_option("--cascade", o.cascade, "cascaded or separate");
  app->add_option("--alpha", o.alpha, "SFR weight");
  app->add_option("--resolution", o.resolution, "image resolution in px");
  app->add_option("--views", o.views, "supervision views");
  app->add_option("--steps", o.steps, "training steps of this command's stage");
  app->add_option("--data", o.data, "dataset directory written by gen-data");
}

RunConfig resolve_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.mode) cfg.aug_mode = parse_aug_mode(*o.mode);
  if (o.cascade) cfg.cascade = parse_cascade(*o.cascade);
  if (o.alpha) cfg.alpha = *o.alpha;
  if (o.resolution) cfg.resolution = *o.resolution;
  if (o.views) cfg.views = *o.views;
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Options& o, const RunConfig& cfg) {
  const fs::path dir = o.out.empty() ? fs::path(cfg.out_dir) / cfg.hash() : fs::path(o.out);
  fs::create_directories(dir);
  return dir;
}

// Timestamps go to their own log so every other output stays reproducible.
void log_command(const fs::path& dir, const std::string& command) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ofstream(dir / "cli.log", std::ios::app) << std::put_time(std::gmtime(&now), "%FT%TZ") << ' ' << command
                                                << '\n';
}

Dataset load_split(const Options& o, const RunConfig& cfg, Split split) {
  const bool train = split == Split::train;
  if (!o.data.empty()) return load_dataset(fs::path(o.data) / (train ? "train" : "test"));
  return train ? build_dataset(cfg.train_identities, cfg.poses_per_identity, cfg.seed, Split::train)
               : build_dataset(cfg.test_identities, cfg.test_poses, cfg.seed, Split::test);
}

std::vector<TrainingSample> samples_for(const Dataset& ds, const RunConfig& cfg, Split split) {
  return make_samples(ds, cfg, derive_seed(cfg.seed, split == Split::train ? 1 : 2));
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw UsageError("--split must be train or test");
}

ReconNet require_stage(const std::string& path, const char* flag, const RunConfig& cfg) {
  if (path.empty()) throw UsageError(std::string(flag) + " is required");
  return load_stage(path, cfg);
}

void write_json(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  f << text << '\n';
  if (!f) throw std::runtime_error("failed to write " + path.string());
}

void finish_stage(const fs::path& dir, const std::string& stage, const StageResult& r, const RunConfig& cfg,
                  std::ostream& out) {
  write_checkpoint(dir / (stage + ".ckpt"), stage_checkpoint(r.net, cfg, stage));
  write_loss_csv(dir / (stage + "_loss.csv"), r.losses);
  out << stage << ": " << r.losses.size() << " steps";
  if (!r.losses.empty()) out << ", loss " << r.losses.front() << " -> " << r.losses.back();
  out << "\n";
}

// Metrics are written when the prediction is non-empty; a stage that trained
// too briefly to place any opaque Gaussian only gets a note on stderr.
template <typename F>
void write_stage_metrics(const fs::path& path, F&& compute, std::ostream& out, std::ostream& err) {
  try {
    const MetricsReport r = compute();
    write_json(path, r.to_json());
    out << r.table();
  } catch (const EmptyPrediction& e) {
    err << "note: no metrics for " << path.filename().string() << ": " << e.what() << "\n";
  }
}

// Rows of equally sized RGB images tiled into one image.
Image tile(const std::vector<std::vector<Image>>& rows) {
  const int w = rows.at(0).at(0).width, h = rows[0][0].height;
  const int cols = static_cast<int>(rows[0].size());
  Image out(w * cols, h * static_cast<int>(rows.size()), 3);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const Image& img = rows[r][c];
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int k = 0; k < 3; ++k)
            out.at(static_cast<int>(r) * h + y, static_cast<int>(c) * w + x, k) = img.at(y, x, img.channels == 3 ? k : 0);
    }
  return out;
}

std::vector<Image> mesh_views(const TriangleMesh& mesh, const RunConfig& cfg, RenderMode mode = RenderMode::rgb) {
  std::vector<Image> v;
  for (const auto& cam : orthogonal_cameras(cfg)) v.push_back(rasterize(mesh, cam, mode).image);
  return v;
}

std::vector<Image> splat_views(const GaussianSet& set, const RunConfig& cfg) {
  const auto r = render_orthogonal(set, cfg);
  return {r.begin(), r.end()};
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const fs::path dir = out_dir(o, cfg);
  log_command(dir, "gen-data");
  const Dataset train = build_dataset(cfg.train_identities, cfg.poses_per_identity, cfg.seed, Split::train);
  const Dataset test = build_dataset(cfg.test_identities, cfg.test_poses, cfg.seed, Split::test);
  save_dataset(dir / "data" / "train", train);
  save_dataset(dir / "data" / "test", test);
  write_png(dir / "data" / "preview.png", tile({mesh_views(train.samples.at(0).scan, cfg)}));
  out << "train: " << train.identities.size() << " identities, " << train.samples.size() << " scans\n"
      << "test: " << test.identities.size() << " identities, " << test.samples.size() << " scans\n"
      << "written to " << (dir / "data").string() << "\n";
  return kOk;
}

int cmd_train_supervisor(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve_config(o);
  if (o.steps) cfg.steps_supervisor = *o.steps;
  const fs::path dir = out_dir(o, cfg);
  log_command(dir, "train-supervisor");
  const auto train = samples_for(load_split(o, cfg, Split::train), cfg, Split::train);
  const StageResult r = train_supervisor(train, cfg);
  finish_stage(dir, "supervisor", r, cfg, out);
  const auto test = samples_for(load_split(o, cfg, Split::test), cfg, Split::test);
  write_stage_metrics(dir / "supervisor_metrics.json", [&] { return evaluate_normals(r.net, test, true, cfg); }, out,
                      err);
  return kOk;
}

int cmd_train_ugl(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve_config(o);
  if (o.steps) cfg.steps_ugl = *o.steps;
  const ReconNet sup = require_stage(o.ckpt_supervisor, "--ckpt-supervisor", cfg);
  const fs::path dir = out_dir(o, cfg);
  log_command(dir, "train-ugl");
  const auto train = samples_for(load_split(o, cfg, Split::train), cfg, Split::train);
  const StageResult r = train_ugl(train, sup, cfg);
  finish_stage(dir, "ugl", r, cfg, out);
  const auto test = samples_for(load_split(o, cfg, Split::test), cfg, Split::test);
  write_stage_metrics(dir / "ugl_metrics.json", [&] { return evaluate_normals(r.net, test, false, cfg); }, out, err);
  return kOk;
}

int cmd_train_cgt(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve_config(o);
  if (o.steps) cfg.steps_cgt = *o.steps;
  std::optional<ReconNet> ugl, anim;
  if (cfg.cascade == Cascade::cascaded || !o.ckpt_ugl.empty()) ugl = require_stage(o.ckpt_ugl, "--ckpt-ugl", cfg);
  if (cfg.aug_mode == AugMode::oaa) anim = require_stage(o.ckpt_anim, "--ckpt-anim", cfg);
  const fs::path dir = out_dir(o, cfg);
  log_command(dir, "train-cgt");
  const Dataset train_ds = load_split(o, cfg, Split::train);
  const auto train = samples_for(train_ds, cfg, Split::train);
  const StageResult r = train_cgt(train, ugl ? &*ugl : nullptr, cfg, {&train_ds, anim ? &*anim : nullptr});
  finish_stage(dir, "cgt", r, cfg, out);
  if (!ugl) {
    err << "note: no metrics without --ckpt-ugl (inference runs through the UGL model)\n";
    return kOk;
  }
  const auto test = samples_for(load_split(o, cfg, Split::test), cfg, Split::test);
  write_stage_metrics(dir / "metrics.json", [&] { return evaluate(test, *ugl, r.net, cfg); }, out, err);
  return kOk;
}

int cmd_train_anim(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve_config(o);
  if (o.steps) cfg.steps_anim = *o.steps;
  const fs::path dir = out_dir(o, cfg);
  log_command(dir, "train-anim");
  const StageResult r = train_anim(build_triplets(load_split(o, cfg, Split::train), cfg), cfg);
  finish_stage(dir, "anim", r, cfg, out);
  const auto test = build_triplets(load_split(o, cfg, Split::test), cfg);
  write_stage_metrics(dir / "anim_metrics.json", [&] { return evaluate_anim(r.net, test, cfg); }, out, err);
  return kOk;
}

int cmd_augment_preview(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  if (cfg.aug_mode == AugMode::none) throw UsageError("augment-preview needs --mode lbs or --mode oaa");
  std::optional<ReconNet> anim;
  if (cfg.aug_mode == AugMode::oaa) anim = require_stage(o.ckpt_anim, "--ckpt-anim", cfg);
  const fs::path dir = out_dir(o, cfg);
  log_command(dir, "augment-preview");

  const Dataset ds = load_split(o, cfg, Split::train);
  if (o.sample < 0 || o.sample >= static_cast<int>(ds.samples.size())) throw UsageError("--sample out of range");
  const ScanSample& smp = ds.samples[static_cast<std::size_t>(o.sample)];
  const Identity& ident = ds.identity(smp.identity);
  TemplatePool pool = ds.pool;
  if (o.extreme) pool.entries = {{extreme_pose(cfg.seed), ident.body.shape}};
  const std::uint64_t seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(o.sample));

  const TrainingSample aug = cfg.aug_mode == AugMode::lbs ? augment_lbs(ident, smp, pool, seed, cfg)
                                                          : augment_oaa(*anim, ident, smp, pool, seed, cfg);
  const TriangleMesh tmpl = skeleton_template_mesh(ident.body.rig, aug.pose);
  const std::vector<Image> aug_views = aug.scan ? mesh_views(*aug.scan, cfg) : splat_views(*aug.gaussians, cfg);
  const fs::path png = dir / ("augment_" + std::string(aug_mode_name(cfg.aug_mode)) + ".png");
  write_png(png, tile({mesh_views(smp.scan, cfg), mesh_views(tmpl, cfg, RenderMode::normal_world), aug_views}));
  out << "rows: source scan, driving template, " << aug_mode_name(cfg.aug_mode) << " result\n";
  if (aug.scan) {
    const TriangleMesh dense = lbs_repose_scan(ident.body, smp.pose, aug.pose);
    out << "max edge stretch: " << max_edge_stretch(smp.scan, dense) << "\n";
  }
  out << "written " << png.string() << "\n";
  return kOk;
}

int cmd_reconstruct(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const ReconNet ugl = require_stage(o.ckpt_ugl, "--ckpt-ugl", cfg);
  const ReconNet cgt = require_stage(o.ckpt_cgt, "--ckpt-cgt", cfg);
  const Split split = parse_split(o.split);
  const fs::path dir = out_dir(o, cfg);
  log_command(dir, "reconstruct");
  const auto samples = samples_for(load_split(o, cfg, split), cfg, split);
  if (o.sample < 0 || o.sample >= static_cast<int>(samples.size())) throw UsageError("--sample out of range");
  const TrainingSample& s = samples[static_cast<std::size_t>(o.sample)];
  const Reconstruction r = reconstruct(s, ugl, cgt, cfg);
  save_gaussians(dir / "normals.gs", r.normals);
  save_gaussians(dir / "colors.gs", r.colors);
  write_png(dir / "reconstruction.png", tile({splat_views(r.normals, cfg), splat_views(r.colors, cfg)}));
  out << "normal Gaussians: " << r.normals.size() << ", colour Gaussians: " << r.colors.size() << "\n"
      << "written to " << dir.string() << "\n";
  return kOk;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const ReconNet ugl = require_stage(o.ckpt_ugl, "--ckpt-ugl", cfg);
  const ReconNet cgt = require_stage(o.ckpt_cgt, "--ckpt-cgt", cfg);
  const Split split = parse_split(o.split);
  const fs::path dir = out_dir(o, cfg);
  log_command(dir, "evaluate");
  const MetricsReport r = evaluate(samples_for(load_split(o, cfg, split), cfg, split), ugl, cgt, cfg);
  write_json(dir / ("metrics_" + o.split + ".json"), r.to_json());
  out << r.to_json() << "\n" << r.table();
  return kOk;
}

int cmd_render(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  if (o.mesh.empty() == o.gaussians.empty()) throw UsageError("render needs exactly one of --mesh or --gaussians");
  const RenderMode mode = parse_render_mode(o.render_mode);
  const CameraPose cam = orbit_camera(o.azimuth, o.elevation, cfg.radius, cfg.fov, cfg.resolution, cfg.resolution);
  const fs::path dir = out_dir(o, cfg);
  log_command(dir, "render");
  Image img;
  if (!o.mesh.empty()) {
    img = rasterize(read_obj(o.mesh), cam, mode).image;
  } else {
    if (mode != RenderMode::rgb) throw UsageError("Gaussian sets render in rgb mode only");
    img = splat_render(load_gaussians(o.gaussians), cam, Eigen::Vector3f::Zero()).color;
  }
  const fs::path path = dir / (mode == RenderMode::depth ? "render.pfm" : "render.png");
  if (mode == RenderMode::depth) write_pfm(path, img);
  else write_png(path, img);
  out << "written " << path.string() << "\n";
  return kOk;
}

void print_checks(const std::vector<CheckResult>& results, std::ostream& out) {
  for (const auto& r : results)
    out << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(22) << r.name << std::fixed << std::setprecision(1)
        << std::setw(7) << r.seconds << "s  " << r.detail << "\n";
  out.unsetf(std::ios::floatfield);
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
}

int cmd_grad_check(const Options& o, std::ostream& out) {
  resolve_config(o);
  const std::vector<CheckResult> r = {check_gradients()};
  print_checks(r, out);
  return all_passed(r) ? kOk : kFailure;
}

int cmd_selftest(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const fs::path dir = out_dir(o, cfg);
  log_command(dir, "selftest");
  const auto r = run_selftest(dir / "selftest");
  print_checks(r, out);
  return all_passed(r) ? kOk : kFailure;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-process monocular human reconstruction with Gaussian splats"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "generate the train/test scan datasets");
  auto* sup = app.add_subcommand("train-supervisor", "train the supervisor on clean normal maps");
  auto* ugl = app.add_subcommand("train-ugl", "train the monocular geometry model with SFR");
  auto* cgt = app.add_subcommand("train-cgt", "train the texturing model");
  auto* anim = app.add_subcommand("train-anim", "train the animation model on triplets");
  auto* aug = app.add_subcommand("augment-preview", "write a 4-view strip of one augmented sample");
  auto* rec = app.add_subcommand("reconstruct", "run two-stage inference on one sample");
  auto* eva = app.add_subcommand("evaluate", "metrics of a UGL + CGT checkpoint pair");
  auto* ren = app.add_subcommand("render", "render a mesh or Gaussian file");
  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient checks");
  auto* self = app.add_subcommand("selftest", "oracle suites, PASS/FAIL per group");
  for (auto* sub : {gen, sup, ugl, cgt, anim, aug, rec, eva, ren, grad, self}) add_common(sub, o);

  ugl->add_option("--ckpt-supervisor", o.ckpt_supervisor);
  for (auto* sub : {cgt, rec, eva}) sub->add_option("--ckpt-ugl", o.ckpt_ugl);
  for (auto* sub : {rec, eva}) sub->add_option("--ckpt-cgt", o.ckpt_cgt);
  for (auto* sub : {cgt, aug}) sub->add_option("--ckpt-anim", o.ckpt_anim);
  for (auto* sub : {rec, eva}) sub->add_option("--split", o.split, "train or test");
  for (auto* sub : {aug, rec}) sub->add_option("--sample", o.sample, "sample index");
  aug->add_flag("--extreme", o.extreme, "drive with a joint-limit corner pose instead of a pool pose");
  ren->add_option("--mesh", o.mesh, "OBJ file");
  ren->add_option("--gaussians", o.gaussians, "Gaussian set file");
  ren->add_option("--render-mode", o.render_mode, "rgb, normal, normal_world, mask or depth");
  ren->add_option("--azimuth", o.azimuth);
  ren->add_option("--elevation", o.elevation);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(o, out);
    if (*sup) return cmd_train_supervisor(o, out, err);
    if (*ugl) return cmd_train_ugl(o, out, err);
    if (*cgt) return cmd_train_cgt(o, out, err);
    if (*anim) return cmd_train_anim(o, out, err);
    if (*aug) return cmd_augment_preview(o, out);
    if (*rec) return cmd_reconstruct(o, out);
    if (*eva) return cmd_evaluate(o, out);
    if (*ren) return cmd_render(o, out);
    if (*grad) return cmd_grad_check(o, out);
    if (*self) return cmd_selftest(o, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "failed: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace sat::cli
