#include "sat/losses.hpp"

#include <array>
#include <cmath>

#include "sat/rng.hpp"

namespace sat {

namespace {

constexpr std::uint64_t kPerceptualSeed = 0xC0FFEE;
constexpr std::array<int, 4> kPyramidChannels = {3, 8, 16, 32};

template <typename T>
struct Pyramid {
  std::array<BasicTensor<T>, 3> w, b;

  Pyramid() {
    Rng rng(kPerceptualSeed);
    for (int l = 0; l < 3; ++l) {
      const int cin = kPyramidChannels[l], cout = kPyramidChannels[l + 1];
      std::vector<T> wd(static_cast<std::size_t>(cout) * cin * 9);
      const double sd = std::sqrt(2.0 / (cin * 9));
      for (auto& v : wd) v = static_cast<T>(static_cast<float>(rng.normal() * sd));
      w[l] = BasicTensor<T>({cout, cin, 3, 3}, std::move(wd));
      b[l] = BasicTensor<T>::zeros({cout});
    }
  }
};

template <typename T>
const Pyramid<T>& pyramid() {
  static const Pyramid<T> p;
  return p;
}

template <typename T>
BasicTensor<T> normalize_channels(const BasicTensor<T>& f) {
  const auto norm = sqrt(add_scalar(sum(square(f), 1, true), T(1e-6)));
  return div(f, norm);
}

template <typename T>
BasicTensor<T> as_batch(const BasicTensor<T>& x) {
  if (x.rank() == 3) return reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() == 4) return x;
  throw ShapeError("perceptual expects [3,H,W] or [N,3,H,W], got " + shape_str(x.shape()));
}

}  // namespace

template <typename T>
BasicTensor<T> perceptual(const BasicTensor<T>& a_in, const BasicTensor<T>& b_in) {
  if (a_in.shape() != b_in.shape()) {
    throw ShapeError("perceptual: " + shape_str(a_in.shape()) + " vs " + shape_str(b_in.shape()));
  }
  BasicTensor<T> a = as_batch(a_in), b = as_batch(b_in);
  if (a.dim(1) != 3) throw ShapeError("perceptual expects 3 colour channels");
  const auto& p = pyramid<T>();
  BasicTensor<T> total;
  for (int l = 0; l < 3; ++l) {
    const int stride = l == 0 ? 1 : 2;
    a = relu(conv2d(a, p.w[l], p.b[l], stride, 1));
    b = relu(conv2d(b, p.w[l], p.b[l], stride, 1));
    const auto term = mse(normalize_channels(a), normalize_channels(b));
    total = l == 0 ? term : add(total, term);
  }
  return scale(total, T(1) / T(3));
}

template <typename T>
BasicTensor<T> render_loss(const std::vector<RenderPair<T>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("render_loss needs at least one view");
  BasicTensor<T> total;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    const auto& s = p.pred.shape();
    if (s.size() != 3 || s[0] != 4 || p.gt_color.shape() != Shape{3, s[1], s[2]} ||
        p.gt_mask.shape() != Shape{1, s[1], s[2]}) {
      throw ShapeError("render_loss: prediction " + shape_str(s) + " vs GT " + shape_str(p.gt_color.shape()) + " / " +
                       shape_str(p.gt_mask.shape()));
    }
    const auto color = slice(p.pred, 0, 0, 3);
    const auto alpha = slice(p.pred, 0, 3, 4);
    const auto term = add(add(mse(color, p.gt_color), mse(alpha, p.gt_mask)), perceptual(color, p.gt_color));
    total = i == 0 ? term : add(total, term);
  }
  return total;
}

template <typename T>
BasicTensor<T> ugl_total_loss(const BasicTensor<T>& l1, const BasicTensor<T>& l_sfr, T alpha) {
  if (!(alpha >= T(0))) throw std::invalid_argument("SFR weight must be non-negative");
  if (alpha == T(0)) return l1;
  return add(l1, scale(l_sfr, alpha));
}

#define SAT_INSTANTIATE_LOSSES(T)                                                              \
  template BasicTensor<T> perceptual(const BasicTensor<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> render_loss(const std::vector<RenderPair<T>>&);                      \
  template BasicTensor<T> ugl_total_loss(const BasicTensor<T>&, const BasicTensor<T>&, T);

SAT_INSTANTIATE_LOSSES(float)
SAT_INSTANTIATE_LOSSES(double)

}  // namespace sat
