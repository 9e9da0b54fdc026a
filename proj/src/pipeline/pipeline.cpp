#include "sat/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "sat/losses.hpp"
#include "sat/optim.hpp"
#include "sat/raster.hpp"
#include "sat/rng.hpp"

namespace sat {

// ------------------------------------------------------------------- enums

const char* aug_mode_name(AugMode m) {
  switch (m) {
    case AugMode::none: return "none";
    case AugMode::lbs: return "lbs";
    case AugMode::oaa: return "oaa";
  }
  return "?";
}
const char* cascade_name(Cascade c) { return c == Cascade::cascaded ? "cascaded" : "separate"; }
const char* tap_subset_name(TapSubset t) { return t == TapSubset::mid_up ? "mid_up" : "all"; }
const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::original: return "original";
    case Provenance::lbs: return "lbs";
    case Provenance::oaa: return "oaa";
  }
  return "?";
}

AugMode parse_aug_mode(const std::string& s) {
  if (s == "none") return AugMode::none;
  if (s == "lbs") return AugMode::lbs;
  if (s == "oaa") return AugMode::oaa;
  throw ConfigError("augmentation mode must be none, lbs or oaa, got '" + s + "'");
}
Cascade parse_cascade(const std::string& s) {
  if (s == "cascaded") return Cascade::cascaded;
  if (s == "separate") return Cascade::separate;
  throw ConfigError("cascade must be cascaded or separate, got '" + s + "'");
}
TapSubset parse_tap_subset(const std::string& s) {
  if (s == "mid_up") return TapSubset::mid_up;
  if (s == "all") return TapSubset::all;
  throw ConfigError("sfr_taps must be mid_up or all, got '" + s + "'");
}

// ------------------------------------------------------------------ config

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream ss(value);
  T out{};
  ss >> out;
  std::string rest;
  if (ss.fail() || (ss >> rest)) throw ConfigError("bad value for '" + key + "': '" + value + "'");
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& v) {
  if (key == "resolution") resolution = parse_number<int>(key, v);
  else if (key == "views") views = parse_number<int>(key, v);
  else if (key == "radius") radius = parse_number<float>(key, v);
  else if (key == "fov") fov = parse_number<float>(key, v);
  else if (key == "alpha") alpha = parse_number<float>(key, v);
  else if (key == "lr") lr = parse_number<float>(key, v);
  else if (key == "net_width") net_width = parse_number<int>(key, v);
  else if (key == "steps_supervisor") steps_supervisor = parse_number<int>(key, v);
  else if (key == "steps_ugl") steps_ugl = parse_number<int>(key, v);
  else if (key == "steps_cgt") steps_cgt = parse_number<int>(key, v);
  else if (key == "steps_anim") steps_anim = parse_number<int>(key, v);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
  else if (key == "train_identities") train_identities = parse_number<int>(key, v);
  else if (key == "poses_per_identity") poses_per_identity = parse_number<int>(key, v);
  else if (key == "test_identities") test_identities = parse_number<int>(key, v);
  else if (key == "test_poses") test_poses = parse_number<int>(key, v);
  else if (key == "aug_mode") aug_mode = parse_aug_mode(v);
  else if (key == "aug_ratio") aug_ratio = parse_number<float>(key, v);
  else if (key == "cascade") cascade = parse_cascade(v);
  else if (key == "sfr_taps") sfr_taps = parse_tap_subset(v);
  else if (key == "prior_blur") prior_blur = parse_number<float>(key, v);
  else if (key == "prior_noise") prior_noise = parse_number<float>(key, v);
  else if (key == "prior_shift") prior_shift = parse_number<int>(key, v);
  else if (key == "fscore_tau_cm") fscore_tau_cm = parse_number<double>(key, v);
  else if (key == "eval_samples") eval_samples = parse_number<int>(key, v);
  else if (key == "out_dir") out_dir = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

void RunConfig::validate() const {
  if (resolution < 8 || resolution % 8 != 0 || resolution > 128) {
    throw ConfigError("resolution must be a multiple of 8 in [8, 128]");
  }
  if (views < 1) throw ConfigError("views must be >= 1");
  if (!(radius > 0)) throw ConfigError("radius must be positive");
  if (!(fov > 0 && fov < 180)) throw ConfigError("fov must be in (0, 180)");
  if (!(alpha >= 0)) throw ConfigError("alpha must be >= 0");
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (net_width < 1) throw ConfigError("net_width must be positive");
  for (int s : {steps_supervisor, steps_ugl, steps_cgt, steps_anim})
    if (s < 0) throw ConfigError("step counts must be >= 0");
  if (train_identities < 1 || poses_per_identity < 1 || test_identities < 1 || test_poses < 1) {
    throw ConfigError("dataset sizes must be positive");
  }
  if (!(aug_ratio >= 0 && aug_ratio <= 1)) throw ConfigError("aug_ratio must be in [0, 1]");
  if (prior_blur < 0 || prior_noise < 0 || prior_shift < 0) throw ConfigError("prior strengths must be >= 0");
  if (!(fscore_tau_cm > 0)) throw ConfigError("fscore_tau_cm must be positive");
  if (eval_samples < 1) throw ConfigError("eval_samples must be positive");
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  o.precision(9);
  o << "resolution = " << resolution << "\nviews = " << views << "\nradius = " << radius << "\nfov = " << fov
    << "\nalpha = " << alpha << "\nlr = " << lr << "\nnet_width = " << net_width
    << "\nsteps_supervisor = " << steps_supervisor << "\nsteps_ugl = " << steps_ugl << "\nsteps_cgt = " << steps_cgt
    << "\nsteps_anim = " << steps_anim << "\nseed = " << seed << "\ntrain_identities = " << train_identities
    << "\nposes_per_identity = " << poses_per_identity << "\ntest_identities = " << test_identities
    << "\ntest_poses = " << test_poses << "\naug_mode = " << aug_mode_name(aug_mode) << "\naug_ratio = " << aug_ratio
    << "\ncascade = " << cascade_name(cascade) << "\nsfr_taps = " << tap_subset_name(sfr_taps)
    << "\nprior_blur = " << prior_blur << "\nprior_noise = " << prior_noise << "\nprior_shift = " << prior_shift
    << "\nfscore_tau_cm = " << fscore_tau_cm << "\neval_samples = " << eval_samples << "\nout_dir = " << out_dir
    << "\n";
  return o.str();
}

std::string RunConfig::hash() const {
  std::string text = to_text();
  text.resize(text.find("out_dir ="));
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ReconNetConfig RunConfig::net_config(int v) const {
  ReconNetConfig c;
  c.views = v;
  c.width = net_width;
  c.depth_near = std::max(0.05f, radius - 0.9f);
  c.depth_far = radius + 0.9f;
  return c;
}

EvalSettings RunConfig::eval_settings() const {
  EvalSettings s;
  s.gt_samples = static_cast<std::size_t>(eval_samples);
  s.tau_cm = fscore_tau_cm;
  s.width = s.height = resolution;
  s.radius = radius;
  s.fov = fov;
  return s;
}

std::vector<CameraPose> supervision_cameras(const RunConfig& cfg) {
  std::vector<CameraPose> cams;
  for (int k = 0; k < cfg.views; ++k) {
    const float az = 360.0f * static_cast<float>(k) / static_cast<float>(cfg.views);
    cams.push_back(orbit_camera(az, k % 2 ? 20.0f : 0.0f, cfg.radius, cfg.fov, cfg.resolution, cfg.resolution));
  }
  return cams;
}

std::array<CameraPose, 4> orthogonal_cameras(const RunConfig& cfg) {
  return four_orthogonal_views(cfg.radius, cfg.fov, cfg.resolution, cfg.resolution);
}

// ------------------------------------------------------------------ priors

namespace {

Image gaussian_blur(const Image& in, float sigma) {
  if (sigma <= 0) return in;
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<float> k(static_cast<std::size_t>(2 * r + 1));
  for (int i = -r; i <= r; ++i) k[static_cast<std::size_t>(i + r)] = std::exp(-0.5f * i * i / (sigma * sigma));
  auto pass = [&](const Image& src, bool horizontal) {
    Image dst(src.width, src.height, src.channels);
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x)
        for (int c = 0; c < src.channels; ++c) {
          float acc = 0, wsum = 0;
          for (int i = -r; i <= r; ++i) {
            const int xx = horizontal ? x + i : x, yy = horizontal ? y : y + i;
            if (xx < 0 || yy < 0 || xx >= src.width || yy >= src.height) continue;
            acc += k[static_cast<std::size_t>(i + r)] * src.at(yy, xx, c);
            wsum += k[static_cast<std::size_t>(i + r)];
          }
          dst.at(y, x, c) = acc / wsum;
        }
    return dst;
  };
  return pass(pass(in, true), false);
}

Image shift_image(const Image& in, int dx, int dy) {
  Image out(in.width, in.height, in.channels);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      const int sx = x - dx, sy = y - dy;
      if (sx < 0 || sy < 0 || sx >= in.width || sy >= in.height) continue;
      for (int c = 0; c < in.channels; ++c) out.at(y, x, c) = in.at(sy, sx, c);
    }
  return out;
}

Image render(const TriangleMesh& mesh, const CameraPose& cam, RenderMode mode) {
  return rasterize(mesh, cam, mode, 0.0f).image;
}

Tensor to_tensor(const Image& img) { return Tensor({img.channels, img.height, img.width}, img.planar()); }

Tensor stack_views(const std::vector<const Image*>& views) {
  std::vector<Tensor> ts;
  for (const Image* v : views) {
    const Tensor t = to_tensor(*v);
    ts.push_back(reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)}));
  }
  return concat(ts, 0);
}

}  // namespace

std::array<Image, 4> simulate_priors(const TriangleMesh& scan, const TriangleMesh& template_mesh,
                                     const std::array<CameraPose, 4>& cams, const PriorStrength& s,
                                     std::uint64_t seed) {
  Rng rng(seed);
  std::array<Image, 4> out;
  for (int v = 0; v < 2; ++v) {
    Image img = gaussian_blur(render(scan, cams[v], RenderMode::normal_world), s.blur_sigma);
    if (s.noise > 0)
      for (auto& x : img.data) x += static_cast<float>(rng.normal() * s.noise);
    if (s.shift > 0) {
      const int dx = static_cast<int>(rng.uniform_int(-s.shift, s.shift));
      const int dy = static_cast<int>(rng.uniform_int(-s.shift, s.shift));
      img = shift_image(img, dx, dy);
    }
    for (auto& x : img.data) x = std::clamp(x, 0.0f, 1.0f);
    out[v] = std::move(img);
  }
  for (int v = 2; v < 4; ++v) out[v] = render(template_mesh, cams[v], RenderMode::normal_world);
  return out;
}

// ----------------------------------------------------------------- samples

TrainingSample make_sample(const TriangleMesh& scan, const TriangleMesh& template_mesh, const RunConfig& cfg,
                           std::uint64_t prior_seed) {
  TrainingSample s;
  s.scan = scan;
  for (const auto& cam : supervision_cameras(cfg)) {
    s.target_rgb.push_back(render(scan, cam, RenderMode::rgb));
    s.target_normal.push_back(render(scan, cam, RenderMode::normal_world));
    s.target_mask.push_back(render(scan, cam, RenderMode::mask));
  }
  const auto ortho = orthogonal_cameras(cfg);
  for (int v = 0; v < 4; ++v) s.clean_normals[v] = render(scan, ortho[v], RenderMode::normal_world);
  s.priors = simulate_priors(scan, template_mesh, ortho, {cfg.prior_blur, cfg.prior_noise, cfg.prior_shift},
                             prior_seed);
  s.input_rgb = render(scan, ortho[0], RenderMode::rgb);
  return s;
}

std::vector<TrainingSample> make_samples(const Dataset& ds, const RunConfig& cfg, std::uint64_t seed) {
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& smp = ds.samples[i];
    const auto& body = ds.identity(smp.identity).body;
    TrainingSample s = make_sample(smp.scan, skeleton_template_mesh(body.rig, smp.pose), cfg, derive_seed(seed, i));
    s.identity = smp.identity;
    s.pose = smp.pose;
    s.shape = body.shape;
    out.push_back(std::move(s));
  }
  return out;
}

// ----------------------------------------------------------------- bundles

ViewBundle normal_bundle(const std::array<Image, 4>& maps, const RunConfig& cfg) {
  ViewBundle b;
  b.images = stack_views({&maps[0], &maps[1], &maps[2], &maps[3]});
  const auto ortho = orthogonal_cameras(cfg);
  b.cameras.assign(ortho.begin(), ortho.end());
  b.roles = {ViewRole::front, ViewRole::back, ViewRole::left, ViewRole::right};
  return b;
}

ViewBundle cgt_bundle(const std::array<Image, 4>& renders, const Image& input_rgb, const RunConfig& cfg) {
  ViewBundle b;
  b.images = stack_views({&renders[0], &renders[1], &renders[2], &renders[3], &input_rgb});
  const auto ortho = orthogonal_cameras(cfg);
  b.cameras.assign(ortho.begin(), ortho.end());
  b.cameras.push_back(ortho[0]);
  b.roles = {ViewRole::front, ViewRole::back, ViewRole::left, ViewRole::right, ViewRole::input_image};
  return b;
}

namespace {

ViewBundle anim_bundle(const std::array<Image, 4>& source_rgb, const std::array<Image, 4>& template_normals,
                       const RunConfig& cfg) {
  ViewBundle b;
  b.images = stack_views({&source_rgb[0], &source_rgb[1], &source_rgb[2], &source_rgb[3], &template_normals[0],
                          &template_normals[1], &template_normals[2], &template_normals[3]});
  const auto ortho = orthogonal_cameras(cfg);
  for (int k = 0; k < 2; ++k) b.cameras.insert(b.cameras.end(), ortho.begin(), ortho.end());
  b.roles.assign(4, ViewRole::source);
  b.roles.insert(b.roles.end(), 4, ViewRole::template_mesh);
  return b;
}

// Sum of render losses of a parameter tensor against per-view targets.
Tensor supervised_loss(const Tensor& params, const std::vector<CameraPose>& cams, const std::vector<Image>& color,
                       const std::vector<Image>& mask) {
  std::vector<RenderPair<float>> pairs;
  for (std::size_t v = 0; v < cams.size(); ++v)
    pairs.push_back({splat_render<float>(params, cams[v], {0.0f, 0.0f, 0.0f}), to_tensor(color[v]), to_tensor(mask[v])});
  return render_loss(pairs);
}

// Runs `steps` AdamW updates; `loss_at(step)` builds the step's loss graph.
void optimize(ReconNet& net, int steps, float lr, const std::string& stage, const std::function<Tensor(int)>& loss_at,
              std::vector<float>& losses, const StepLogger& log) {
  AdamWConfig oc;
  oc.lr = lr;
  OptimizerState state = make_optimizer_state(net.params(), oc);
  for (int step = 0; step < steps; ++step) {
    zero_grads(net.params());
    const Tensor loss = loss_at(step);
    const float value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError(stage + ": loss is not finite at step " + std::to_string(step));
    }
    backward(loss);
    adamw_step(net.params(), state);
    losses.push_back(value);
    if (log) log(step, value);
  }
}

}  // namespace

GaussianSet predict_normals(const ReconNet& net, const std::array<Image, 4>& maps, const RunConfig& cfg) {
  autograd::NoGradGuard guard;
  const ViewBundle b = normal_bundle(maps, cfg);
  return head_to_gaussians(net.forward(b).grids, b.cameras, net.config());
}

std::array<Image, 4> render_orthogonal(const GaussianSet& set, const RunConfig& cfg) {
  std::array<Image, 4> out;
  const auto ortho = orthogonal_cameras(cfg);
  for (int v = 0; v < 4; ++v) out[v] = splat_render(set, ortho[v], Eigen::Vector3f::Zero()).color;
  return out;
}

// ------------------------------------------------------------------ stages

StageResult train_supervisor(const std::vector<TrainingSample>& data, const RunConfig& cfg, const StepLogger& log) {
  if (data.empty()) throw std::invalid_argument("train_supervisor: empty dataset");
  StageResult r{ReconNet(cfg.net_config(4), derive_seed(cfg.seed, 0x5e7)), {}};
  const auto cams = supervision_cameras(cfg);
  Rng rng(derive_seed(cfg.seed, 0x5e8));
  optimize(r.net, cfg.steps_supervisor, cfg.lr, "supervisor",
           [&](int) {
             const auto& s = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
             const ViewBundle b = normal_bundle(s.clean_normals, cfg);
             const Tensor params = head_to_params(r.net.forward(b).grids, b.cameras, r.net.config());
             return supervised_loss(params, cams, s.target_normal, s.target_mask);
           },
           r.losses, log);
  return r;
}

StageResult train_ugl(const std::vector<TrainingSample>& data, const ReconNet& supervisor, const RunConfig& cfg,
                      const StepLogger& log) {
  if (data.empty()) throw std::invalid_argument("train_ugl: empty dataset");
  // Same initialization as the supervisor: both start from one shared backbone.
  StageResult r{ReconNet(cfg.net_config(4), derive_seed(cfg.seed, 0x5e7)), {}};
  const bool encoder = cfg.sfr_taps == TapSubset::all;
  const auto names = r.net.tap_names(encoder);
  const auto cams = supervision_cameras(cfg);
  Rng rng(derive_seed(cfg.seed, 0x5e8));
  optimize(r.net, cfg.steps_ugl, cfg.lr, "ugl",
           [&](int) {
             const auto& s = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
             const ViewBundle b = normal_bundle(s.priors, cfg);
             const NetOutput out = r.net.forward(b, encoder);
             const Tensor l1 = supervised_loss(head_to_params(out.grids, b.cameras, r.net.config()), cams,
                                               s.target_normal, s.target_mask);
             if (cfg.alpha == 0.0f) return l1;
             FeatureTaps teacher;
             {
               autograd::NoGradGuard guard;
               teacher = supervisor.forward(normal_bundle(s.clean_normals, cfg), encoder).taps;
             }
             return ugl_total_loss(l1, tap_distance(out.taps, teacher, names), cfg.alpha);
           },
           r.losses, log);
  return r;
}

AnimTriplet make_anim_triplet(const SkinnedMesh& identity, int identity_id, const PoseParams& src,
                              const PoseParams& tgt, const RunConfig& cfg) {
  AnimTriplet t;
  t.identity = identity_id;
  t.meshes = make_triplet(identity, src, tgt);
  const auto ortho = orthogonal_cameras(cfg);
  for (int v = 0; v < 4; ++v) {
    t.source_rgb[v] = render(t.meshes.source, ortho[v], RenderMode::rgb);
    t.template_normals[v] = render(t.meshes.template_mesh, ortho[v], RenderMode::normal_world);
  }
  for (const auto& cam : supervision_cameras(cfg)) {
    t.target_rgb.push_back(render(t.meshes.target, cam, RenderMode::rgb));
    t.target_mask.push_back(render(t.meshes.target, cam, RenderMode::mask));
  }
  return t;
}

std::vector<AnimTriplet> build_triplets(const Dataset& ds, const RunConfig& cfg) {
  if (ds.pool.empty()) throw std::invalid_argument("build_triplets: empty template pool");
  std::vector<AnimTriplet> out;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    Rng rng(derive_seed(cfg.seed, 0xA000 + i));
    const auto& tgt = ds.pool.entries[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(ds.pool.entries.size()) - 1))].first;
    out.push_back(make_anim_triplet(ds.identity(s.identity).body, s.identity, s.pose, tgt, cfg));
  }
  return out;
}

StageResult train_anim(const std::vector<AnimTriplet>& triplets, const RunConfig& cfg, const StepLogger& log) {
  if (triplets.empty()) throw std::invalid_argument("train_anim: no triplets");
  StageResult r{ReconNet(cfg.net_config(8), derive_seed(cfg.seed, 0xA11)), {}};
  const auto cams = supervision_cameras(cfg);
  Rng rng(derive_seed(cfg.seed, 0xA12));
  optimize(r.net, cfg.steps_anim, cfg.lr, "anim",
           [&](int) {
             const auto& t = triplets[static_cast<std::size_t>(
                 rng.uniform_int(0, static_cast<std::int64_t>(triplets.size()) - 1))];
             const ViewBundle b = anim_bundle(t.source_rgb, t.template_normals, cfg);
             const Tensor params = head_to_params(r.net.forward(b).grids, b.cameras, r.net.config());
             return supervised_loss(params, cams, t.target_rgb, t.target_mask);
           },
           r.losses, log);
  return r;
}

// ------------------------------------------------------------ augmentation

namespace {

const PoseParams& pick_template(const TemplatePool& pool, std::uint64_t seed) {
  if (pool.empty()) throw std::invalid_argument("augmentation needs a non-empty template pool");
  Rng rng(seed);
  return pool.entries[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.entries.size()) - 1))]
      .first;
}

}  // namespace

TrainingSample augment_oaa(const ReconNet& anim, const Identity& identity, const ScanSample& scan,
                           const TemplatePool& pool, std::uint64_t seed, const RunConfig& cfg) {
  const PoseParams& tgt = pick_template(pool, seed);
  const TriangleMesh tmpl = skeleton_template_mesh(identity.body.rig, tgt);
  const auto ortho = orthogonal_cameras(cfg);
  std::array<Image, 4> source_rgb, template_normals;
  for (int v = 0; v < 4; ++v) {
    source_rgb[v] = render(scan.scan, ortho[v], RenderMode::rgb);
    template_normals[v] = render(tmpl, ortho[v], RenderMode::normal_world);
  }

  TrainingSample s;
  const std::uint64_t nodes_before = autograd::nodes_created();
  {
    autograd::NoGradGuard guard;
    const ViewBundle b = anim_bundle(source_rgb, template_normals, cfg);
    s.gaussians = head_to_gaussians(anim.forward(b).grids, b.cameras, anim.config());
  }
  if (autograd::nodes_created() != nodes_before) {
    throw GraphError("augmentation pass recorded a compute graph");
  }

  s.provenance = Provenance::oaa;
  s.identity = identity.id;
  s.pose = tgt;
  s.shape = identity.body.shape;
  const Eigen::Vector3f bg = Eigen::Vector3f::Zero();
  for (const auto& cam : supervision_cameras(cfg)) {
    const SplatImage img = splat_render(*s.gaussians, cam, bg);
    s.target_rgb.push_back(img.color);
    s.target_mask.push_back(img.alpha);
    s.target_normal.push_back(render(tmpl, cam, RenderMode::normal_world));
  }
  s.clean_normals = template_normals;
  s.priors = simulate_priors(tmpl, tmpl, ortho, {cfg.prior_blur, cfg.prior_noise, cfg.prior_shift},
                             derive_seed(seed, 1));
  s.input_rgb = splat_render(*s.gaussians, ortho[0], bg).color;
  return s;
}

TriangleMesh lbs_repose_scan(const SkinnedMesh& identity, const PoseParams& from, const PoseParams& to) {
  std::vector<int> source;
  TriangleMesh scan = pose_scan(identity, from, &source);
  const auto g_from = forward_kinematics(identity.rig, from);
  const auto g_to = forward_kinematics(identity.rig, to);
  std::vector<Eigen::Isometry3f> delta(g_from.size());
  for (std::size_t j = 0; j < g_from.size(); ++j) delta[j] = g_to[j] * g_from[j].inverse();
  std::vector<float> weights;
  weights.reserve(source.size() * kBoneCount);
  for (int i : source) {
    const auto row = identity.weights.begin() + static_cast<std::ptrdiff_t>(i) * kBoneCount;
    weights.insert(weights.end(), row, row + kBoneCount);
  }
  if (from == to) return scan;
  scan.vertices = lbs_apply(scan.vertices, weights, delta);
  scan.recompute_normals();
  return scan;
}

TrainingSample augment_lbs(const Identity& identity, const ScanSample& scan, const TemplatePool& pool,
                           std::uint64_t seed, const RunConfig& cfg) {
  const PoseParams& tgt = pick_template(pool, seed);
  const TriangleMesh mesh = lbs_repose_scan(identity.body, scan.pose, tgt);
  TrainingSample s = make_sample(mesh, skeleton_template_mesh(identity.body.rig, tgt), cfg, derive_seed(seed, 1));
  s.provenance = Provenance::lbs;
  s.identity = identity.id;
  s.pose = tgt;
  s.shape = identity.body.shape;
  return s;
}

TrainingSampler::TrainingSampler(AugMode mode, float ratio, std::uint64_t seed)
    : mode_(mode), ratio_(ratio), seed_(seed) {
  if (!(ratio >= 0 && ratio <= 1)) throw std::invalid_argument("sampler ratio must be in [0, 1]");
}

bool TrainingSampler::augment(std::uint64_t draw) const {
  if (mode_ == AugMode::none) return false;
  return Rng(derive_seed(seed_, draw)).uniform() < ratio_;
}

// --------------------------------------------------------------------- CGT

StageResult train_cgt(const std::vector<TrainingSample>& data, const ReconNet* ugl, const RunConfig& cfg,
                      const CgtContext& ctx, const StepLogger& log) {
  if (data.empty()) throw std::invalid_argument("train_cgt: empty dataset");
  if (cfg.cascade == Cascade::cascaded && !ugl) throw std::invalid_argument("cascaded CGT needs a UGL checkpoint");
  if (cfg.aug_mode != AugMode::none && !ctx.dataset) throw std::invalid_argument("augmentation needs the dataset");
  if (cfg.aug_mode == AugMode::oaa && !ctx.anim) throw std::invalid_argument("OAA needs an animation checkpoint");
  if (ctx.dataset && ctx.dataset->samples.size() != data.size()) {
    throw std::invalid_argument("train_cgt: dataset and samples are not aligned");
  }

  StageResult r{ReconNet(cfg.net_config(5), derive_seed(cfg.seed, 0xC67)), {}};
  const auto cams = supervision_cameras(cfg);
  const TrainingSampler sampler(cfg.aug_mode, cfg.aug_ratio, derive_seed(cfg.seed, 0xC68));
  Rng rng(derive_seed(cfg.seed, 0xC69));
  std::map<std::size_t, std::array<Image, 4>> ugl_cache;

  auto inputs_for = [&](const TrainingSample& s, std::optional<std::size_t> cache_key) {
    if (cfg.cascade == Cascade::separate) return s.clean_normals;
    if (cache_key) {
      auto it = ugl_cache.find(*cache_key);
      if (it != ugl_cache.end()) return it->second;
    }
    auto renders = render_orthogonal(predict_normals(*ugl, s.priors, cfg), cfg);
    if (cache_key) ugl_cache[*cache_key] = renders;
    return renders;
  };

  optimize(r.net, cfg.steps_cgt, cfg.lr, "cgt",
           [&](int step) {
             const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
             std::optional<TrainingSample> aug;
             if (sampler.augment(static_cast<std::uint64_t>(step))) {
               const auto& smp = ctx.dataset->samples[i];
               const auto& ident = ctx.dataset->identity(smp.identity);
               const std::uint64_t aseed = derive_seed(cfg.seed, 0xC6A0000ULL + static_cast<std::uint64_t>(step));
               aug = cfg.aug_mode == AugMode::lbs ? augment_lbs(ident, smp, ctx.dataset->pool, aseed, cfg)
                                                  : augment_oaa(*ctx.anim, ident, smp, ctx.dataset->pool, aseed, cfg);
             }
             const TrainingSample& s = aug ? *aug : data[i];
             const auto renders = inputs_for(s, aug ? std::nullopt : std::optional<std::size_t>(i));
             const ViewBundle b = cgt_bundle(renders, s.input_rgb, cfg);
             const Tensor params = head_to_params(r.net.forward(b).grids, b.cameras, r.net.config());
             return supervised_loss(params, cams, s.target_rgb, s.target_mask);
           },
           r.losses, log);
  return r;
}

// -------------------------------------------------------------- inference

Reconstruction reconstruct(const TrainingSample& sample, const ReconNet& ugl, const ReconNet& cgt,
                           const RunConfig& cfg) {
  Reconstruction out;
  out.normals = predict_normals(ugl, sample.priors, cfg);
  autograd::NoGradGuard guard;
  const ViewBundle b = cgt_bundle(render_orthogonal(out.normals, cfg), sample.input_rgb, cfg);
  out.colors = head_to_gaussians(cgt.forward(b).grids, b.cameras, cgt.config());
  return out;
}

namespace {

template <typename Predict, typename Items>
MetricsReport mean_report(const Items& items, const RunConfig& cfg, Predict&& predict_and_score) {
  if (items.empty()) throw std::invalid_argument("nothing to evaluate");
  std::optional<MetricsReport> total;
  for (const auto& it : items) {
    const MetricsReport r = predict_and_score(it);
    if (total) total->accumulate(r);
    else total = r;
  }
  total->seed = cfg.seed;
  total->config_hash = cfg.hash();
  total->fscore_tau_cm = cfg.fscore_tau_cm;
  return *total;
}

}  // namespace

MetricsReport evaluate(const std::vector<TrainingSample>& test, const ReconNet& ugl, const ReconNet& cgt,
                       const RunConfig& cfg) {
  return mean_report(test, cfg, [&](const TrainingSample& s) {
    if (!s.scan) throw std::invalid_argument("evaluate: test samples need a GT scan");
    return evaluate_reconstruction(reconstruct(s, ugl, cgt, cfg).colors, *s.scan, cfg.eval_settings());
  });
}

MetricsReport evaluate_normals(const ReconNet& net, const std::vector<TrainingSample>& data, bool clean,
                               const RunConfig& cfg) {
  return mean_report(data, cfg, [&](const TrainingSample& s) {
    if (!s.scan) throw std::invalid_argument("evaluate_normals: samples need a GT scan");
    return evaluate_geometry(predict_normals(net, clean ? s.clean_normals : s.priors, cfg), *s.scan,
                             cfg.eval_settings());
  });
}

double normal_psnr(const ReconNet& net, const std::vector<TrainingSample>& data, bool clean, const RunConfig& cfg) {
  double acc = 0;
  int n = 0;
  const auto cams = supervision_cameras(cfg);
  for (const auto& s : data) {
    const GaussianSet set = predict_normals(net, clean ? s.clean_normals : s.priors, cfg);
    for (std::size_t v = 0; v < cams.size(); ++v, ++n)
      acc += psnr(splat_render(set, cams[v], Eigen::Vector3f::Zero()).color, s.target_normal[v]);
  }
  return acc / n;
}

double ugl_chamfer(const ReconNet& net, const std::vector<TrainingSample>& data, const RunConfig& cfg) {
  const MetricsReport r = evaluate_normals(net, data, false, cfg);
  return r.cd_p2s + r.cd_s2p;
}

GaussianSet predict_anim(const ReconNet& anim, const AnimTriplet& t, const RunConfig& cfg) {
  autograd::NoGradGuard guard;
  const ViewBundle b = anim_bundle(t.source_rgb, t.template_normals, cfg);
  return head_to_gaussians(anim.forward(b).grids, b.cameras, anim.config());
}

MetricsReport evaluate_anim(const ReconNet& anim, const std::vector<AnimTriplet>& triplets, const RunConfig& cfg) {
  return mean_report(triplets, cfg, [&](const AnimTriplet& t) {
    return evaluate_reconstruction(predict_anim(anim, t, cfg), t.meshes.target, cfg.eval_settings());
  });
}

// ------------------------------------------------------------- checkpoints

Checkpoint stage_checkpoint(const ReconNet& net, const RunConfig& cfg, const std::string& stage) {
  nlohmann::json meta = {{"stage", stage},        {"config_hash", cfg.hash()}, {"resolution", cfg.resolution},
                         {"fov", cfg.fov},        {"radius", cfg.radius},      {"config", cfg.to_text()}};
  return net.to_checkpoint(meta.dump());
}

ReconNet load_stage(const std::filesystem::path& path, const RunConfig& cfg) {
  const Checkpoint ck = read_checkpoint(path);
  const auto header = nlohmann::json::parse(ck.header, nullptr, false);
  if (header.is_discarded() || !header.contains("meta")) throw FormatError("checkpoint has no run metadata");
  const auto& meta = header["meta"];
  if (meta.value("resolution", -1) != cfg.resolution || meta.value("fov", -1.0f) != cfg.fov) {
    throw ConfigError("checkpoint '" + path.string() + "' was trained at resolution " +
                      std::to_string(meta.value("resolution", -1)) + ", fov " +
                      std::to_string(meta.value("fov", -1.0f)) + "; the config asks for " +
                      std::to_string(cfg.resolution) + ", " + std::to_string(cfg.fov));
  }
  return ReconNet::from_checkpoint(ck);
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<float>& losses) {
  std::ofstream f(path);
  f << "step,loss\n";
  f.precision(9);
  for (std::size_t i = 0; i < losses.size(); ++i) f << i << ',' << losses[i] << '\n';
  if (!f) throw std::runtime_error("failed to write " + path.string());
}

PipelineResult run_pipeline(const RunConfig& cfg, const std::function<void(const std::string&)>& progress) {
  cfg.validate();
  auto say = [&](const std::string& m) {
    if (progress) progress(m);
  };
  PipelineResult res;
  res.run_dir = std::filesystem::path(cfg.out_dir) / cfg.hash();
  std::filesystem::create_directories(res.run_dir);
  {
    std::ofstream f(res.run_dir / "config.txt");
    f << cfg.to_text();
  }

  say("gen-data");
  const Dataset train = build_dataset(cfg.train_identities, cfg.poses_per_identity, cfg.seed, Split::train);
  const Dataset test = build_dataset(cfg.test_identities, cfg.test_poses, cfg.seed, Split::test);
  save_dataset(res.run_dir / "data" / "train", train);
  save_dataset(res.run_dir / "data" / "test", test);
  const auto train_samples = make_samples(train, cfg, derive_seed(cfg.seed, 1));
  const auto test_samples = make_samples(test, cfg, derive_seed(cfg.seed, 2));

  auto finish = [&](const StageResult& r, const std::string& stage) {
    write_checkpoint(res.run_dir / (stage + ".ckpt"), stage_checkpoint(r.net, cfg, stage));
    write_loss_csv(res.run_dir / (stage + "_loss.csv"), r.losses);
  };

  say("train-supervisor");
  const StageResult sup = train_supervisor(train_samples, cfg);
  finish(sup, "supervisor");

  std::optional<StageResult> anim;
  if (cfg.aug_mode == AugMode::oaa) {
    say("train-anim");
    anim = train_anim(build_triplets(train, cfg), cfg);
    finish(*anim, "anim");
  }

  say("train-ugl");
  const StageResult ugl = train_ugl(train_samples, sup.net, cfg);
  finish(ugl, "ugl");

  say("train-cgt");
  const StageResult cgt = train_cgt(train_samples, &ugl.net, cfg, {&train, anim ? &anim->net : nullptr});
  finish(cgt, "cgt");

  say("evaluate");
  res.report = evaluate(test_samples, ugl.net, cgt.net, cfg);
  std::ofstream(res.run_dir / "metrics.json") << res.report.to_json() << '\n';
  return res;
}

}  // namespace sat
