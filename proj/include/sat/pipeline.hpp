#pragma once

// Training stages, augmentation and evaluation.
//
// Stage order is fixed: supervisor -> UGL -> CGT, with the animation model
// trained independently on triplets before any OAA-augmented run.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sat/body.hpp"
#include "sat/camera.hpp"
#include "sat/image.hpp"
#include "sat/metrics.hpp"
#include "sat/recon_net.hpp"

namespace sat {

enum class AugMode { none, lbs, oaa };
enum class Cascade { cascaded, separate };
enum class TapSubset { mid_up, all };
enum class Provenance { original, lbs, oaa };

const char* aug_mode_name(AugMode m);
const char* cascade_name(Cascade c);
const char* tap_subset_name(TapSubset t);
const char* provenance_name(Provenance p);
AugMode parse_aug_mode(const std::string& s);
Cascade parse_cascade(const std::string& s);
TapSubset parse_tap_subset(const std::string& s);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Key-value run configuration ("key = value" lines, '#' comments).
struct RunConfig {
  int resolution = 64;
  int views = 8;  // supervision views
  float radius = 1.5f;
  float fov = 70.0f;
  float alpha = 0.01f;
  float lr = 5e-5f;
  int net_width = 32;
  int steps_supervisor = 2000;
  int steps_ugl = 2000;
  int steps_cgt = 2000;
  int steps_anim = 2000;
  std::uint64_t seed = 0;
  int train_identities = 24;
  int poses_per_identity = 4;
  int test_identities = 6;
  int test_poses = 1;
  AugMode aug_mode = AugMode::none;
  float aug_ratio = 0.5f;
  Cascade cascade = Cascade::cascaded;
  TapSubset sfr_taps = TapSubset::mid_up;
  float prior_blur = 1.0f;    // px
  float prior_noise = 0.05f;  // stddev
  int prior_shift = 2;        // max |translation| in px
  double fscore_tau_cm = 1.0;
  int eval_samples = 2000;
  std::string out_dir = "runs";

  // Throws ConfigError on unknown keys, malformed values or invalid ranges.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  void validate() const;
  // Canonical text, one key per line in a fixed order.
  std::string to_text() const;
  // FNV-1a over to_text() minus out_dir, as 16 hex digits.
  std::string hash() const;
  // Sets one key from its text form; throws ConfigError.
  void set(const std::string& key, const std::string& value);
  ReconNetConfig net_config(int views) const;
  EvalSettings eval_settings() const;
};

// Supervision cameras: azimuths 360 k / V, elevation 0 on even k and 20 on odd k.
std::vector<CameraPose> supervision_cameras(const RunConfig& cfg);
std::array<CameraPose, 4> orthogonal_cameras(const RunConfig& cfg);

struct PriorStrength {
  float blur_sigma = 1.0f;
  float noise = 0.05f;
  int shift = 2;
};

// Front/back: world-normal renders of the scan blurred, noised and shifted
// (seeded); left/right: clean normal renders of the coarse template.
std::array<Image, 4> simulate_priors(const TriangleMesh& scan, const TriangleMesh& template_mesh,
                                     const std::array<CameraPose, 4>& cams, const PriorStrength& strength,
                                     std::uint64_t seed);

struct TrainingSample {
  Provenance provenance = Provenance::original;
  int identity = -1;
  PoseParams pose;
  ShapeParams shape;
  std::optional<TriangleMesh> scan;  // absent for OAA samples
  std::optional<GaussianSet> gaussians;  // present for OAA samples

  // Supervision renders at the V supervision cameras.
  std::vector<Image> target_rgb, target_normal, target_mask;
  // Clean world-normal renders at the four orthogonal cameras.
  std::array<Image, 4> clean_normals;
  std::array<Image, 4> priors;
  Image input_rgb;  // front view
};

// Builds a sample from a mesh: renders, template-driven priors, input image.
TrainingSample make_sample(const TriangleMesh& scan, const TriangleMesh& template_mesh, const RunConfig& cfg,
                           std::uint64_t prior_seed);

struct StageResult {
  ReconNet net;
  std::vector<float> losses;
};

// Called once per step with (step, loss); used for CSV logging.
using StepLogger = std::function<void(int, float)>;

StageResult train_supervisor(const std::vector<TrainingSample>& data, const RunConfig& cfg,
                             const StepLogger& log = {});
StageResult train_ugl(const std::vector<TrainingSample>& data, const ReconNet& supervisor, const RunConfig& cfg,
                      const StepLogger& log = {});

struct AnimTriplet {
  int identity = -1;
  Triplet meshes;
  std::array<Image, 4> source_rgb;         // S_o, orthogonal views
  std::array<Image, 4> template_normals;   // M_t, orthogonal views
  std::vector<Image> target_rgb, target_mask;  // S_t, supervision views
};

AnimTriplet make_anim_triplet(const SkinnedMesh& identity, int identity_id, const PoseParams& src,
                              const PoseParams& tgt, const RunConfig& cfg);
// One triplet per training sample, the target pose drawn from the pool.
std::vector<AnimTriplet> build_triplets(const Dataset& ds, const RunConfig& cfg);
StageResult train_anim(const std::vector<AnimTriplet>& triplets, const RunConfig& cfg, const StepLogger& log = {});

// Single feed-forward pass of the frozen animation model; throws GraphError
// if the pass records any graph node. The pool pose drives the identity's
// own rig. Supervision comes from renders of the predicted Gaussians.
TrainingSample augment_oaa(const ReconNet& anim, const Identity& identity, const ScanSample& scan,
                           const TemplatePool& pool, std::uint64_t seed, const RunConfig& cfg);
// Blended-weight LBS of the scan from its own pose to the pool pose.
TriangleMesh lbs_repose_scan(const SkinnedMesh& identity, const PoseParams& from, const PoseParams& to);
TrainingSample augment_lbs(const Identity& identity, const ScanSample& scan, const TemplatePool& pool,
                           std::uint64_t seed, const RunConfig& cfg);

// Draw i is augmented with probability `ratio` (never when mode is none),
// decided by a per-index seed.
class TrainingSampler {
 public:
  TrainingSampler(AugMode mode, float ratio, std::uint64_t seed);
  bool augment(std::uint64_t draw) const;
  AugMode mode() const { return mode_; }

 private:
  AugMode mode_;
  float ratio_;
  std::uint64_t seed_;
};

struct CgtContext {
  const Dataset* dataset = nullptr;  // needed for augmentation
  const ReconNet* anim = nullptr;    // needed for OAA
};

// Cascaded: inputs are four renders of the frozen UGL output plus the input
// image. Separate: the four renders are replaced by clean GT normal renders.
StageResult train_cgt(const std::vector<TrainingSample>& data, const ReconNet* ugl, const RunConfig& cfg,
                      const CgtContext& ctx = {}, const StepLogger& log = {});

// Bundles (world-normal maps at the orthogonal cameras).
ViewBundle normal_bundle(const std::array<Image, 4>& maps, const RunConfig& cfg);
ViewBundle cgt_bundle(const std::array<Image, 4>& normal_renders, const Image& input_rgb, const RunConfig& cfg);

GaussianSet predict_normals(const ReconNet& net, const std::array<Image, 4>& maps, const RunConfig& cfg);
std::array<Image, 4> render_orthogonal(const GaussianSet& set, const RunConfig& cfg);

struct Reconstruction {
  GaussianSet normals;  // 4 h w
  GaussianSet colors;   // 5 h w
};
Reconstruction reconstruct(const TrainingSample& sample, const ReconNet& ugl, const ReconNet& cgt,
                           const RunConfig& cfg);

// Mean report over the samples (colour set vs scan).
MetricsReport evaluate(const std::vector<TrainingSample>& test, const ReconNet& ugl, const ReconNet& cgt,
                       const RunConfig& cfg);
// Mean PSNR of normal renders over the supervision views. `clean` feeds GT
// normal maps (supervisor), otherwise priors.
double normal_psnr(const ReconNet& net, const std::vector<TrainingSample>& data, bool clean, const RunConfig& cfg);
// Mean CD (p2s + s2p) of the UGL normal Gaussians from priors.
double ugl_chamfer(const ReconNet& net, const std::vector<TrainingSample>& data, const RunConfig& cfg);
// Mean 3D report of a normal network fed clean maps or priors.
MetricsReport evaluate_normals(const ReconNet& net, const std::vector<TrainingSample>& data, bool clean,
                               const RunConfig& cfg);
// Mean report of the animation model's output against each target mesh S_t.
MetricsReport evaluate_anim(const ReconNet& anim, const std::vector<AnimTriplet>& triplets, const RunConfig& cfg);
GaussianSet predict_anim(const ReconNet& anim, const AnimTriplet& triplet, const RunConfig& cfg);

std::vector<TrainingSample> make_samples(const Dataset& ds, const RunConfig& cfg, std::uint64_t seed);

// Checkpoint meta: config text, hash and stage name.
Checkpoint stage_checkpoint(const ReconNet& net, const RunConfig& cfg, const std::string& stage);
// Throws ConfigError when the checkpoint's resolution or fov differs from cfg.
ReconNet load_stage(const std::filesystem::path& path, const RunConfig& cfg);

struct PipelineResult {
  MetricsReport report;
  std::filesystem::path run_dir;
};
// gen-data -> supervisor -> (anim) -> UGL -> CGT -> evaluate, writing
// checkpoints, loss CSVs and metrics.json under out_dir/<hash>.
PipelineResult run_pipeline(const RunConfig& cfg, const std::function<void(const std::string&)>& progress = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<float>& losses);

}  // namespace sat
