#include "sat/recon_net.hpp"

#include <cmath>
#include <numeric>
#include <optional>

#include "json.hpp"
#include "sat/rng.hpp"

namespace sat {

namespace {

int group_count(int channels) { return std::gcd(channels, 8); }

int level_channels(int width, int level) { return width * std::min(1 << level, 4); }

}  // namespace

const char* view_role_name(ViewRole role) {
  static const char* names[kRoleCount] = {"front", "back", "left", "right", "input_image", "source", "template"};
  const int i = static_cast<int>(role);
  return i >= 0 && i < kRoleCount ? names[i] : "?";
}

std::string ReconNetConfig::to_json() const {
  nlohmann::json j = {{"views", views},           {"in_channels", in_channels},   {"width", width},
                      {"levels", levels},         {"out_channels", out_channels}, {"depth_near", depth_near},
                      {"depth_far", depth_far},   {"offset_range", offset_range}, {"scale_unit", scale_unit}};
  return j.dump();
}

ReconNetConfig ReconNetConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ReconNetConfig c;
  c.views = j.at("views");
  c.in_channels = j.at("in_channels");
  c.width = j.at("width");
  c.levels = j.at("levels");
  c.out_channels = j.at("out_channels");
  c.depth_near = j.at("depth_near");
  c.depth_far = j.at("depth_far");
  c.offset_range = j.at("offset_range");
  c.scale_unit = j.at("scale_unit");
  c.validate();
  return c;
}

void ReconNetConfig::validate() const {
  if (views < 1) throw std::invalid_argument("ReconNetConfig: views must be >= 1");
  if (in_channels < 1 || width < 1) throw std::invalid_argument("ReconNetConfig: channel counts must be positive");
  if (levels < 2) throw std::invalid_argument("ReconNetConfig: need at least 2 levels for the up-block attention");
  if (out_channels != kGaussianParams) throw std::invalid_argument("ReconNetConfig: head must emit 14 channels");
  if (!(depth_near > 0 && depth_far > depth_near)) throw std::invalid_argument("ReconNetConfig: bad depth range");
}

void ViewBundle::validate(const ReconNetConfig& cfg) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[0] != cfg.views || s[1] != cfg.in_channels) {
    throw ShapeError("view bundle " + shape_str(s) + " does not match " + std::to_string(cfg.views) + " views of " +
                     std::to_string(cfg.in_channels) + " channels");
  }
  const std::int64_t stride = std::int64_t{1} << cfg.levels;
  if (s[2] % stride != 0 || s[3] % stride != 0) {
    throw ShapeError("view resolution must be divisible by " + std::to_string(stride));
  }
  if (cameras.size() != static_cast<std::size_t>(cfg.views) || roles.size() != cameras.size()) {
    throw ShapeError("view bundle needs one camera and one role per view");
  }
  for (const auto& c : cameras)
    if (c.width != s[3] || c.height != s[2]) throw ShapeError("camera resolution differs from the view images");
}

int view_direction(const CameraPose& cam) {
  const float a = std::fmod(std::fmod(cam.azimuth, 360.0f) + 360.0f, 360.0f);
  const int quadrant = static_cast<int>(std::lround(a / 90.0f)) % 4;
  static constexpr int kByQuadrant[4] = {0, 2, 1, 3};  // 0, 90, 180, 270 degrees
  return kByQuadrant[quadrant];
}

// ------------------------------------------------------------------ network

Tensor ReconNet::add_param(const std::string& name, Shape shape, double stddev, double fill) {
  Rng rng(derive_seed(seed_, params_.size()));
  std::vector<float> data(static_cast<std::size_t>(sat::numel(shape)));
  for (auto& v : data) v = static_cast<float>(stddev > 0 ? rng.normal() * stddev : fill);
  Tensor t(std::move(shape), std::move(data), true);
  params_.push_back({name, t});
  return t;
}

ReconNet::Conv ReconNet::make_conv(const std::string& name, int cin, int cout, int k) {
  Conv c;
  c.w = add_param(name + ".w", {cout, cin, k, k}, std::sqrt(2.0 / (cin * k * k)));
  c.b = add_param(name + ".b", {cout}, 0.0);
  c.pad = k / 2;
  return c;
}

ReconNet::Norm ReconNet::make_norm(const std::string& name, int c) {
  Norm n;
  n.gamma = add_param(name + ".gamma", {c}, 0.0, 1.0);
  n.beta = add_param(name + ".beta", {c}, 0.0);
  n.groups = group_count(c);
  return n;
}

ReconNet::ResBlock ReconNet::make_block(const std::string& name, int cin, int cout) {
  ResBlock b;
  b.n1 = make_norm(name + ".norm1", cin);
  b.c1 = make_conv(name + ".conv1", cin, cout, 3);
  b.n2 = make_norm(name + ".norm2", cout);
  b.c2 = make_conv(name + ".conv2", cout, cout, 3);
  if (cin != cout) {
    b.skip = make_conv(name + ".skip", cin, cout, 1);
    b.has_skip = true;
  }
  return b;
}

ReconNet::Attention ReconNet::make_attention(const std::string& name, int c) {
  Attention a;
  a.norm = make_norm(name + ".norm", c);
  const double s = std::sqrt(1.0 / c);
  a.wq = add_param(name + ".wq", {c, c}, s);
  a.wk = add_param(name + ".wk", {c, c}, s);
  a.wv = add_param(name + ".wv", {c, c}, s);
  a.wo = add_param(name + ".wo", {c, c}, s);
  a.embed = add_param(name + ".embed", {kRoleCount + 4, c}, 0.1);
  return a;
}

ReconNet::ReconNet(const ReconNetConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  const int w = config_.width;
  conv_in_ = make_conv("conv_in", config_.in_channels, w, 3);
  int c = w;
  std::vector<int> skip_channels;
  for (int k = 0; k < config_.levels; ++k) {
    const int out = level_channels(w, k);
    down_.push_back(make_block("down" + std::to_string(k + 1), c, out));
    skip_channels.push_back(out);
    c = out;
  }
  mid_ = make_block("mid", c, c);
  mid_attn_ = make_attention("mid.attn", c);
  for (int k = 0; k < config_.levels; ++k) {
    const int level = config_.levels - 1 - k;
    const int out = level_channels(w, level);
    const std::string name = "up" + std::to_string(k + 1);
    up_.push_back(make_block(name, c + skip_channels[static_cast<std::size_t>(level)], out));
    if (k < 2) up_attn_.push_back(make_attention(name + ".attn", out));
    c = out;
  }
  norm_out_ = make_norm("norm_out", c);
  conv_out_ = make_conv("conv_out", c, config_.out_channels, 3);
  // Start the head near the all-zero raw grid: mid depth, opacity 0.5.
  for (auto& v : conv_out_.w.mutable_data()) v *= 0.1f;
}

Tensor ReconNet::run(const Conv& c, const Tensor& x) const { return conv2d(x, c.w, c.b, c.stride, c.pad); }

Tensor ReconNet::run(const Norm& n, const Tensor& x) const {
  return group_norm(x, n.groups, n.gamma, n.beta, 1e-5f);
}

Tensor ReconNet::run(const ResBlock& b, const Tensor& x) const {
  Tensor h = run(b.c1, silu(run(b.n1, x)));
  h = run(b.c2, silu(run(b.n2, h)));
  return add(h, b.has_skip ? run(b.skip, x) : x);
}

// Single-head attention over the tokens of all views jointly.
Tensor ReconNet::run(const Attention& a, const Tensor& x, const Tensor& onehot) const {
  const auto V = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t tokens_per_view = H * W;
  Tensor t = reshape(permute(run(a.norm, x), {0, 2, 3, 1}), {V * tokens_per_view, C});
  // onehot is [V, R]; expand to one row per token.
  Tensor emb = matmul(onehot, a.embed);                                    // [V, C]
  emb = reshape(add(reshape(emb, {V, 1, C}), Tensor::zeros({1, tokens_per_view, 1})), {V * tokens_per_view, C});
  t = add(t, emb);
  const Tensor q = matmul(t, a.wq), k = matmul(t, a.wk), v = matmul(t, a.wv);
  const Tensor att = softmax(scale(matmul(q, transpose(k)), 1.0f / std::sqrt(static_cast<float>(C))), 1);
  const Tensor o = matmul(matmul(att, v), a.wo);
  return add(x, permute(reshape(o, {V, H, W, C}), {0, 3, 1, 2}));
}

NetOutput ReconNet::forward(const ViewBundle& bundle, bool encoder_taps) const {
  bundle.validate(config_);
  const int V = config_.views;
  std::vector<float> onehot(static_cast<std::size_t>(V) * (kRoleCount + 4), 0.0f);
  for (int v = 0; v < V; ++v) {
    onehot[static_cast<std::size_t>(v) * (kRoleCount + 4) + static_cast<int>(bundle.roles[v])] = 1.0f;
    onehot[static_cast<std::size_t>(v) * (kRoleCount + 4) + kRoleCount + view_direction(bundle.cameras[v])] = 1.0f;
  }
  const Tensor roles({V, kRoleCount + 4}, std::move(onehot));

  NetOutput out;
  Tensor x = run(conv_in_, bundle.images);
  std::vector<Tensor> skips;
  for (std::size_t k = 0; k < down_.size(); ++k) {
    x = run(down_[k], x);
    skips.push_back(x);
    x = avg_pool2x(x);
    if (encoder_taps) out.taps["down" + std::to_string(k + 1)] = x;
  }
  x = run(mid_attn_, run(mid_, x), roles);
  out.taps["mid"] = x;
  for (std::size_t k = 0; k < up_.size(); ++k) {
    // The first up block works at the mid resolution, later ones after an upsample.
    if (k > 0) x = upsample_nearest2x(x);
    const std::size_t level = up_.size() - 1 - k;
    Tensor skip = skips[level];
    if (skip.dim(2) != x.dim(2)) skip = avg_pool2x(skip);
    x = run(up_[k], concat(std::vector<Tensor>{x, skip}, 1));
    if (k < up_attn_.size()) x = run(up_attn_[k], x, roles);
    out.taps["up" + std::to_string(k + 1)] = x;
  }
  x = upsample_nearest2x(x);
  out.grids = run(conv_out_, silu(run(norm_out_, x)));
  return out;
}

std::vector<std::string> ReconNet::tap_names(bool encoder_taps) const {
  std::vector<std::string> names;
  if (encoder_taps)
    for (int k = 1; k <= config_.levels; ++k) names.push_back("down" + std::to_string(k));
  names.push_back("mid");
  for (int k = 1; k <= config_.levels; ++k) names.push_back("up" + std::to_string(k));
  return names;
}

Checkpoint ReconNet::to_checkpoint(const std::string& meta_json) const {
  Checkpoint ck;
  nlohmann::json header = {{"net", nlohmann::json::parse(config_.to_json())},
                           {"seed", seed_},
                           {"meta", nlohmann::json::parse(meta_json)}};
  ck.header = header.dump();
  append_params(ck, params_);
  return ck;
}

ReconNet ReconNet::from_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(ckpt.header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not JSON: ") + e.what());
  }
  if (!header.contains("net")) throw FormatError("checkpoint header has no network config");
  ReconNet net(ReconNetConfig::from_json(header["net"].dump()), header.value("seed", std::uint64_t{0}));
  load_params(ckpt, net.params_);
  return net;
}

// --------------------------------------------------------------------- head

Tensor head_to_params(const Tensor& grids, const std::vector<CameraPose>& cameras, const ReconNetConfig& cfg) {
  const auto& s = grids.shape();
  if (s.size() != 4 || s[1] != kGaussianParams || s[0] != static_cast<std::int64_t>(cameras.size())) {
    throw ShapeError("head expects [V, 14, H, W] with one camera per view, got " + shape_str(s));
  }
  const auto V = s[0], H = s[2], W = s[3];
  const std::size_t plane = static_cast<std::size_t>(H * W);
  // Per-pixel ray origin, direction and the camera's right/up axes, [V, 3, H, W].
  std::vector<float> o(static_cast<std::size_t>(V) * 3 * plane), d(o.size()), r(o.size()), u(o.size());
  for (std::int64_t v = 0; v < V; ++v) {
    const auto& cam = cameras[static_cast<std::size_t>(v)];
    if (cam.width != W || cam.height != H) throw ShapeError("camera resolution differs from the head grid");
    const Eigen::Vector3f pos = cam.position();
    const Eigen::Vector3f right = cam.rotation.row(0).transpose(), up = cam.rotation.row(1).transpose();
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const Eigen::Vector3f dir =
            cam.ray_direction(static_cast<float>(x) + 0.5f, static_cast<float>(y) + 0.5f);
        for (int c = 0; c < 3; ++c) {
          const std::size_t i = (static_cast<std::size_t>(v) * 3 + c) * plane + static_cast<std::size_t>(y * W + x);
          o[i] = pos[c];
          d[i] = dir[c];
          r[i] = right[c];
          u[i] = up[c];
        }
      }
  }
  const Shape s3 = {V, 3, H, W};
  const Tensor O(s3, std::move(o)), D(s3, std::move(d)), R(s3, std::move(r)), U(s3, std::move(u));

  auto ch = [&](int a, int b) { return slice(grids, 1, a, b); };
  const Tensor dist = add_scalar(scale(sigmoid(ch(0, 1)), cfg.depth_far - cfg.depth_near), cfg.depth_near);
  Tensor centre = add(O, mul(D, dist));
  centre = add(centre, scale(add(mul(R, tanh(ch(1, 2))), mul(U, tanh(ch(2, 3)))), cfg.offset_range));
  const Tensor scales = add_scalar(scale(softplus(ch(3, 6)), cfg.scale_unit), 1e-4f);
  const Tensor quat_bias({1, 4, 1, 1}, {1.0f, 0.0f, 0.0f, 0.0f});
  const Tensor quat = add(ch(6, 10), quat_bias);
  const Tensor opacity = sigmoid(ch(10, 11));
  const Tensor color = sigmoid(ch(11, 14));
  const Tensor packed = concat(std::vector<Tensor>{centre, scales, quat, opacity, color}, 1);  // [V,14,H,W]
  return reshape(permute(packed, {0, 2, 3, 1}), {V * H * W, kGaussianParams});
}

GaussianSet head_to_gaussians(const Tensor& grids, const std::vector<CameraPose>& cameras,
                              const ReconNetConfig& cfg) {
  autograd::NoGradGuard guard;
  return unpack_gaussians(head_to_params(grids, cameras, cfg).data());
}

Tensor tap_distance(const FeatureTaps& a, const FeatureTaps& b, const std::vector<std::string>& subset) {
  if (subset.empty()) throw std::invalid_argument("tap_distance: empty tap subset");
  std::optional<Tensor> total;
  for (const auto& name : subset) {
    const auto ia = a.find(name), ib = b.find(name);
    if (ia == a.end() || ib == b.end()) throw ShapeError("tap '" + name + "' missing");
    if (ia->second.shape() != ib->second.shape()) {
      throw ShapeError("tap '" + name + "' shape mismatch: " + shape_str(ia->second.shape()) + " vs " +
                       shape_str(ib->second.shape()));
    }
    const Tensor term = l2_norm(sub(ia->second, ib->second.detach()));
    total = total ? add(*total, term) : term;
  }
  return *total;
}

}  // namespace sat
