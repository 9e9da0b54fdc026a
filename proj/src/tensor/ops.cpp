#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "sat/tensor.hpp"

namespace sat {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

std::vector<std::int64_t> strides_of(const Shape& shape) {
  std::vector<std::int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * shape[i + 1];
  return st;
}

// ---------------------------------------------------------------- broadcast

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
  bool same = false;
  bool b_scalar = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  const auto sa = strides_of(a);
  const auto sb = strides_of(b);
  for (std::size_t i = 0; i < r; ++i) {
    const int ia = static_cast<int>(i) - static_cast<int>(r - a.size());
    const int ib = static_cast<int>(i) - static_cast<int>(r - b.size());
    const std::int64_t da = ia >= 0 ? a[ia] : 1;
    const std::int64_t db = ib >= 0 ? b[ib] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(da, db);
    p.stride_a[i] = (ia >= 0 && da != 1) ? sa[ia] : 0;
    p.stride_b[i] = (ib >= 0 && db != 1) ? sb[ib] : 0;
  }
  p.b_scalar = numel(b) == 1;
  return p;
}

// Calls fn(out_index, a_index, b_index) for every output element in order.
template <typename Fn>
void for_each_broadcast(const Broadcast& p, Fn&& fn) {
  const std::int64_t n = numel(p.out);
  if (p.same) {
    for (std::int64_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <typename T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinOp op, const char* name) {
  const Broadcast p = plan_broadcast(a.shape(), b.shape());
  std::vector<T> out(static_cast<std::size_t>(numel(p.out)));
  const auto ad = a.data();
  const auto bd = b.data();
  for_each_broadcast(p, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
    switch (op) {
      case BinOp::kAdd: out[o] = ad[i] + bd[j]; break;
      case BinOp::kSub: out[o] = ad[i] - bd[j]; break;
      case BinOp::kMul: out[o] = ad[i] * bd[j]; break;
      case BinOp::kDiv: out[o] = ad[i] / bd[j]; break;
    }
  });
  return make_op_result<T>(name, p.out, std::move(out), {a, b},
                           [a, b, p, op](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
                             const auto ad = a.data();
                             const auto bd = b.data();
                             auto ga = gi[0];
                             auto gb = gi[1];
                             for_each_broadcast(p, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
                               const T go = g[o];
                               switch (op) {
                                 case BinOp::kAdd:
                                   if (!ga.empty()) ga[i] += go;
                                   if (!gb.empty()) gb[j] += go;
                                   break;
                                 case BinOp::kSub:
                                   if (!ga.empty()) ga[i] += go;
                                   if (!gb.empty()) gb[j] -= go;
                                   break;
                                 case BinOp::kMul:
                                   if (!ga.empty()) ga[i] += go * bd[j];
                                   if (!gb.empty()) gb[j] += go * ad[i];
                                   break;
                                 case BinOp::kDiv:
                                   if (!ga.empty()) ga[i] += go / bd[j];
                                   if (!gb.empty()) gb[j] -= go * ad[i] / (bd[j] * bd[j]);
                                   break;
                               }
                             });
                           });
}

// Elementwise unary op given f(x) and f'(x, y).
template <typename T, typename F, typename D>
BasicTensor<T> unary(const BasicTensor<T>& x, const char* name, F f, D df) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  return make_op_result<T>(name, x.shape(), std::move(out), {x},
                           [x, df](std::span<const T> y, std::span<const T> g, std::span<const std::span<T>> gi) {
                             const auto xd = x.data();
                             auto gx = gi[0];
                             for (std::size_t i = 0; i < xd.size(); ++i) gx[i] += g[i] * df(xd[i], y[i]);
                           });
}

// Splits a shape around an axis into [outer, axis, inner].
struct AxisSplit {
  std::int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit a;
  for (int i = 0; i < axis; ++i) a.outer *= s[i];
  a.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

// ------------------------------------------------------------- im2col

template <typename T>
void im2col(const T* img, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* cols) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + (static_cast<std::int64_t>(ci * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * wo, row + (oy + 1) * wo, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::int64_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* img) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + (static_cast<std::int64_t>(ci * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (static_cast<std::int64_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ================================================================ elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) { return binary(a, b, BinOp::kAdd, "add"); }
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) { return binary(a, b, BinOp::kSub, "sub"); }
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) { return binary(a, b, BinOp::kMul, "mul"); }
template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) { return binary(a, b, BinOp::kDiv, "div"); }

template <typename T>
BasicTensor<T> neg(const BasicTensor<T>& x) { return scale(x, T(-1)); }

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  return unary(x, "scalar-mul", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value) {
  return unary(x, "add-scalar", [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return unary(
      x, "sigmoid",
      [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  return unary(x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
BasicTensor<T> softplus(const BasicTensor<T>& x) {
  return unary(
      x, "softplus", [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
      [](T v, T) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  return unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x) {
  return unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
BasicTensor<T> sqrt(const BasicTensor<T>& x) {
  return unary(x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& x) {
  return unary(x, "abs", [](T v) { return std::abs(v); },
               [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& x) {
  return unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  auto sig = [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); };
  return unary(x, "silu", [sig](T v) { return v * sig(v); },
               [sig](T v, T) {
                 const T s = sig(v);
                 return s * (T(1) + v * (T(1) - s));
               });
}

// ================================================================ reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return make_op_result<T>("sum", Shape{}, {acc}, {x},
                           [](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
                             for (auto& v : gi[0]) v += g[0];
                           });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x, int axis, bool keepdim) {
  const int a = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), a);
  Shape out_shape = x.shape();
  if (keepdim) out_shape[a] = 1; else out_shape.erase(out_shape.begin() + a);
  std::vector<T> out(static_cast<std::size_t>(s.outer * s.inner), T(0));
  const auto xd = x.data();
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t k = 0; k < s.n; ++k)
      for (std::int64_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xd[(o * s.n + k) * s.inner + i];
  return make_op_result<T>("sum", out_shape, std::move(out), {x},
                           [s](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
                             auto gx = gi[0];
                             for (std::int64_t o = 0; o < s.outer; ++o)
                               for (std::int64_t k = 0; k < s.n; ++k)
                                 for (std::int64_t i = 0; i < s.inner; ++i)
                                   gx[(o * s.n + k) * s.inner + i] += g[o * s.inner + i];
                           });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, int axis, bool keepdim) {
  const auto n = x.dim(axis);
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(n));
}

template <typename T>
BasicTensor<T> l2_norm(const BasicTensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v * v;
  const T norm = std::sqrt(acc);
  return make_op_result<T>("l2-norm", Shape{}, {norm}, {x},
                           [x](std::span<const T> y, std::span<const T> g, std::span<const std::span<T>> gi) {
                             if (y[0] <= T(0)) return;
                             const auto xd = x.data();
                             const T f = g[0] / y[0];
                             for (std::size_t i = 0; i < xd.size(); ++i) gi[0][i] += f * xd[i];
                           });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis) {
  const int a = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), a);
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.n * s.inner + i;
      T mx = xd[base];
      for (std::int64_t k = 1; k < s.n; ++k) mx = std::max(mx, xd[base + k * s.inner]);
      T z = T(0);
      for (std::int64_t k = 0; k < s.n; ++k) {
        const T e = std::exp(xd[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::int64_t k = 0; k < s.n; ++k) out[base + k * s.inner] /= z;
    }
  }
  return make_op_result<T>("softmax", x.shape(), std::move(out), {x},
                           [s](std::span<const T> y, std::span<const T> g, std::span<const std::span<T>> gi) {
                             auto gx = gi[0];
                             for (std::int64_t o = 0; o < s.outer; ++o) {
                               for (std::int64_t i = 0; i < s.inner; ++i) {
                                 const std::int64_t base = o * s.n * s.inner + i;
                                 T dot = T(0);
                                 for (std::int64_t k = 0; k < s.n; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
                                 for (std::int64_t k = 0; k < s.n; ++k) {
                                   const auto j = base + k * s.inner;
                                   gx[j] += y[j] * (g[j] - dot);
                                 }
                               }
                             }
                           });
}

// ================================================================ linear algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * n));
  MapMat<T>(out.data(), m, n).noalias() = CMapMat<T>(a.data().data(), m, k) * CMapMat<T>(b.data().data(), k, n);
  return make_op_result<T>("matmul", Shape{m, n}, std::move(out), {a, b},
                           [a, b, m, k, n](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
                             CMapMat<T> G(g.data(), m, n);
                             if (!gi[0].empty())
                               MapMat<T>(gi[0].data(), m, k).noalias() += G * CMapMat<T>(b.data().data(), k, n).transpose();
                             if (!gi[1].empty())
                               MapMat<T>(gi[1].data(), k, n).noalias() += CMapMat<T>(a.data().data(), m, k).transpose() * G;
                           });
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias, int stride,
                      int pad) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d shape mismatch: x " + shape_str(x.shape()) + " w " + shape_str(weight.shape()));
  }
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride/pad");
  const bool has_bias = bias.rank() == 1;
  const int N = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1)), H = static_cast<int>(x.dim(2)),
            W = static_cast<int>(x.dim(3));
  const int O = static_cast<int>(weight.dim(0)), K = static_cast<int>(weight.dim(2));
  if (has_bias && bias.dim(0) != O) throw ShapeError("conv2d bias size mismatch");
  const int Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d output would be empty");
  const std::int64_t ckk = static_cast<std::int64_t>(C) * K * K, hw = static_cast<std::int64_t>(Ho) * Wo;
  std::vector<T> out(static_cast<std::size_t>(N) * O * hw);
  std::vector<T> cols(static_cast<std::size_t>(ckk * hw));
  CMapMat<T> Wm(weight.data().data(), O, ckk);
  for (int n = 0; n < N; ++n) {
    im2col(x.data().data() + static_cast<std::int64_t>(n) * C * H * W, C, H, W, K, stride, pad, Ho, Wo, cols.data());
    MapMat<T> Y(out.data() + static_cast<std::int64_t>(n) * O * hw, O, hw);
    Y.noalias() = Wm * CMapMat<T>(cols.data(), ckk, hw);
    if (has_bias)
      for (int o = 0; o < O; ++o) Y.row(o).array() += bias.data()[o];
  }
  std::vector<BasicTensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op_result<T>(
      "conv2d", Shape{N, O, Ho, Wo}, std::move(out), inputs,
      [=](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
        std::vector<T> cols(static_cast<std::size_t>(ckk * hw));
        std::vector<T> dcols(gi[0].empty() ? 0 : static_cast<std::size_t>(ckk * hw));
        CMapMat<T> Wm(weight.data().data(), O, ckk);
        for (int n = 0; n < N; ++n) {
          CMapMat<T> G(g.data() + static_cast<std::int64_t>(n) * O * hw, O, hw);
          if (!gi[1].empty()) {
            im2col(x.data().data() + static_cast<std::int64_t>(n) * C * H * W, C, H, W, K, stride, pad, Ho, Wo,
                   cols.data());
            MapMat<T>(gi[1].data(), O, ckk).noalias() += G * CMapMat<T>(cols.data(), ckk, hw).transpose();
          }
          if (!gi[0].empty()) {
            MapMat<T>(dcols.data(), ckk, hw).noalias() = Wm.transpose() * G;
            col2im(dcols.data(), C, H, W, K, stride, pad, Ho, Wo, gi[0].data() + static_cast<std::int64_t>(n) * C * H * W);
          }
          if (has_bias && !gi[2].empty())
            for (int o = 0; o < O; ++o) gi[2][o] += G.row(o).sum();
        }
      });
}

template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                                int stride, int pad) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(0) != x.dim(1) || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv_transpose2d shape mismatch: x " + shape_str(x.shape()) + " w " + shape_str(weight.shape()));
  }
  if (stride < 1 || pad < 0) throw ShapeError("conv_transpose2d: invalid stride/pad");
  const bool has_bias = bias.rank() == 1;
  const int N = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1)), H = static_cast<int>(x.dim(2)),
            W = static_cast<int>(x.dim(3));
  const int O = static_cast<int>(weight.dim(1)), K = static_cast<int>(weight.dim(2));
  if (has_bias && bias.dim(0) != O) throw ShapeError("conv_transpose2d bias size mismatch");
  const int Ho = (H - 1) * stride - 2 * pad + K, Wo = (W - 1) * stride - 2 * pad + K;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv_transpose2d output would be empty");
  // The transposed conv maps [C,H,W] -> [O,Ho,Wo]; it is the adjoint of a
  // conv2d from [O,Ho,Wo] to [C,H,W] with the same weights.
  const std::int64_t okk = static_cast<std::int64_t>(O) * K * K, hw = static_cast<std::int64_t>(H) * W,
                     ohw = static_cast<std::int64_t>(Ho) * Wo;
  std::vector<T> out(static_cast<std::size_t>(N) * O * ohw, T(0));
  std::vector<T> cols(static_cast<std::size_t>(okk * hw));
  CMapMat<T> Wm(weight.data().data(), C, okk);
  for (int n = 0; n < N; ++n) {
    MapMat<T>(cols.data(), okk, hw).noalias() =
        Wm.transpose() * CMapMat<T>(x.data().data() + static_cast<std::int64_t>(n) * C * hw, C, hw);
    T* y = out.data() + static_cast<std::int64_t>(n) * O * ohw;
    col2im(cols.data(), O, Ho, Wo, K, stride, pad, H, W, y);
    if (has_bias)
      for (int o = 0; o < O; ++o)
        for (std::int64_t i = 0; i < ohw; ++i) y[o * ohw + i] += bias.data()[o];
  }
  std::vector<BasicTensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_op_result<T>(
      "transposed-conv2d", Shape{N, O, Ho, Wo}, std::move(out), inputs,
      [=](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
        std::vector<T> gcols(static_cast<std::size_t>(okk * hw));
        CMapMat<T> Wm(weight.data().data(), C, okk);
        for (int n = 0; n < N; ++n) {
          const T* gy = g.data() + static_cast<std::int64_t>(n) * O * ohw;
          im2col(gy, O, Ho, Wo, K, stride, pad, H, W, gcols.data());
          CMapMat<T> Gc(gcols.data(), okk, hw);
          if (!gi[0].empty())
            MapMat<T>(gi[0].data() + static_cast<std::int64_t>(n) * C * hw, C, hw).noalias() += Wm * Gc;
          if (!gi[1].empty())
            MapMat<T>(gi[1].data(), C, okk).noalias() +=
                CMapMat<T>(x.data().data() + static_cast<std::int64_t>(n) * C * hw, C, hw) * Gc.transpose();
          if (has_bias && !gi[2].empty())
            for (int o = 0; o < O; ++o)
              for (std::int64_t i = 0; i < ohw; ++i) gi[2][o] += gy[o * ohw + i];
        }
      });
}

template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, int groups, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps) {
  if (x.rank() != 4) throw ShapeError("group_norm expects [N,C,H,W], got " + shape_str(x.shape()));
  const int N = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1));
  const std::int64_t hw = x.dim(2) * x.dim(3);
  if (groups < 1 || C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("group_norm affine size mismatch");
  const int cpg = C / groups;
  const std::int64_t gsize = cpg * hw;
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  auto xhat = std::make_shared<std::vector<T>>(xd.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N * groups));
  for (int n = 0; n < N; ++n) {
    for (int gidx = 0; gidx < groups; ++gidx) {
      const std::int64_t base = (static_cast<std::int64_t>(n) * C + gidx * cpg) * hw;
      T m = T(0);
      for (std::int64_t i = 0; i < gsize; ++i) m += xd[base + i];
      m /= static_cast<T>(gsize);
      T var = T(0);
      for (std::int64_t i = 0; i < gsize; ++i) var += (xd[base + i] - m) * (xd[base + i] - m);
      var /= static_cast<T>(gsize);
      const T is = T(1) / std::sqrt(var + eps);
      (*inv_std)[n * groups + gidx] = is;
      for (int c = 0; c < cpg; ++c) {
        const int ch = gidx * cpg + c;
        for (std::int64_t i = 0; i < hw; ++i) {
          const std::int64_t j = base + c * hw + i;
          (*xhat)[j] = (xd[j] - m) * is;
          out[j] = (*xhat)[j] * gamma.data()[ch] + beta.data()[ch];
        }
      }
    }
  }
  return make_op_result<T>(
      "group-norm", x.shape(), std::move(out), {x, gamma, beta},
      [=](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
        const auto& xh = *xhat;
        for (int n = 0; n < N; ++n) {
          for (int gidx = 0; gidx < groups; ++gidx) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + gidx * cpg) * hw;
            T mean_d = T(0), mean_dx = T(0);
            for (int c = 0; c < cpg; ++c) {
              const int ch = gidx * cpg + c;
              const T gam = gamma.data()[ch];
              for (std::int64_t i = 0; i < hw; ++i) {
                const std::int64_t j = base + c * hw + i;
                const T d = g[j] * gam;
                mean_d += d;
                mean_dx += d * xh[j];
                if (!gi[1].empty()) gi[1][ch] += g[j] * xh[j];
                if (!gi[2].empty()) gi[2][ch] += g[j];
              }
            }
            if (gi[0].empty()) continue;
            mean_d /= static_cast<T>(gsize);
            mean_dx /= static_cast<T>(gsize);
            const T is = (*inv_std)[n * groups + gidx];
            for (int c = 0; c < cpg; ++c) {
              const T gam = gamma.data()[gidx * cpg + c];
              for (std::int64_t i = 0; i < hw; ++i) {
                const std::int64_t j = base + c * hw + i;
                gi[0][j] += is * (g[j] * gam - mean_d - xh[j] * mean_dx);
              }
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("upsample needs rank >= 2");
  const std::int64_t H = x.dim(-2), W = x.dim(-1);
  const std::int64_t planes = x.numel() / (H * W);
  Shape os = x.shape();
  os[os.size() - 2] = 2 * H;
  os[os.size() - 1] = 2 * W;
  const auto xd = x.data();
  std::vector<T> out(static_cast<std::size_t>(planes * 4 * H * W));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < 2 * H; ++y)
      for (std::int64_t xx = 0; xx < 2 * W; ++xx) out[(p * 2 * H + y) * 2 * W + xx] = xd[(p * H + y / 2) * W + xx / 2];
  return make_op_result<T>("nearest-upsample2x", os, std::move(out), {x},
                           [=](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
                             for (std::int64_t p = 0; p < planes; ++p)
                               for (std::int64_t y = 0; y < 2 * H; ++y)
                                 for (std::int64_t xx = 0; xx < 2 * W; ++xx)
                                   gi[0][(p * H + y / 2) * W + xx / 2] += g[(p * 2 * H + y) * 2 * W + xx];
                           });
}

template <typename T>
BasicTensor<T> avg_pool2x(const BasicTensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("avgpool needs rank >= 2");
  const std::int64_t H = x.dim(-2), W = x.dim(-1);
  if (H % 2 || W % 2) throw ShapeError("avgpool2x needs even spatial dims, got " + shape_str(x.shape()));
  const std::int64_t planes = x.numel() / (H * W), Ho = H / 2, Wo = W / 2;
  Shape os = x.shape();
  os[os.size() - 2] = Ho;
  os[os.size() - 1] = Wo;
  const auto xd = x.data();
  std::vector<T> out(static_cast<std::size_t>(planes * Ho * Wo));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xx = 0; xx < Wo; ++xx) {
        const T* r0 = &xd[(p * H + 2 * y) * W + 2 * xx];
        const T* r1 = r0 + W;
        out[(p * Ho + y) * Wo + xx] = T(0.25) * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
  return make_op_result<T>("avgpool2x", os, std::move(out), {x},
                           [=](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
                             for (std::int64_t p = 0; p < planes; ++p)
                               for (std::int64_t y = 0; y < Ho; ++y)
                                 for (std::int64_t xx = 0; xx < Wo; ++xx) {
                                   const T v = T(0.25) * g[(p * Ho + y) * Wo + xx];
                                   T* r0 = &gi[0][(p * H + 2 * y) * W + 2 * xx];
                                   r0[0] += v;
                                   r0[1] += v;
                                   r0[W] += v;
                                   r0[W + 1] += v;
                                 }
                           });
}

// ================================================================ shape

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_op_result<T>("reshape", std::move(shape), std::move(out), {x},
                           [](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
                             for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                           });
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& order) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r) throw ShapeError("permute order rank mismatch");
  std::vector<bool> seen(r, false);
  for (int o : order) {
    if (o < 0 || o >= r || seen[o]) throw ShapeError("permute order is not a permutation");
    seen[o] = true;
  }
  const auto in_st = strides_of(x.shape());
  Shape os(r);
  std::vector<std::int64_t> st(r);
  for (int i = 0; i < r; ++i) {
    os[i] = x.shape()[order[i]];
    st[i] = in_st[order[i]];
  }
  // src[i] = offset into x for output element i
  auto src = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  {
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t off = 0;
    for (std::int64_t o = 0; o < x.numel(); ++o) {
      (*src)[o] = off;
      for (int d = r - 1; d >= 0; --d) {
        ++idx[d];
        off += st[d];
        if (idx[d] < os[d]) break;
        off -= st[d] * os[d];
        idx[d] = 0;
      }
    }
  }
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[(*src)[i]];
  return make_op_result<T>("permute", os, std::move(out), {x},
                           [src](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
                             for (std::size_t i = 0; i < g.size(); ++i) gi[0][(*src)[i]] += g[i];
                           });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects a matrix");
  return permute(x, {1, 0});
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  const int r = xs[0].rank();
  const int a = normalize_axis(axis, r);
  Shape os = xs[0].shape();
  os[a] = 0;
  std::vector<std::int64_t> sizes;
  for (const auto& t : xs) {
    if (t.rank() != r) throw ShapeError("concat rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != a && t.shape()[d] != xs[0].shape()[d])
        throw ShapeError("concat shape mismatch: " + shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
    os[a] += t.shape()[a];
    sizes.push_back(t.shape()[a]);
  }
  const AxisSplit s = split_axis(os, a);
  std::vector<T> out(static_cast<std::size_t>(numel(os)));
  std::int64_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto xd = xs[k].data();
    const std::int64_t chunk = sizes[k] * s.inner;
    for (std::int64_t o = 0; o < s.outer; ++o)
      std::copy(xd.begin() + o * chunk, xd.begin() + (o + 1) * chunk, out.begin() + o * s.n * s.inner + off * s.inner);
    off += sizes[k];
  }
  return make_op_result<T>("concat", os, std::move(out), xs,
                           [s, sizes](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
                             std::int64_t off = 0;
                             for (std::size_t k = 0; k < sizes.size(); ++k) {
                               const std::int64_t chunk = sizes[k] * s.inner;
                               if (!gi[k].empty()) {
                                 for (std::int64_t o = 0; o < s.outer; ++o) {
                                   const T* src = g.data() + o * s.n * s.inner + off * s.inner;
                                   T* dst = gi[k].data() + o * chunk;
                                   for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
                                 }
                               }
                               off += sizes[k];
                             }
                           });
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::int64_t start, std::int64_t end) {
  const int a = normalize_axis(axis, x.rank());
  const std::int64_t n = x.shape()[a];
  if (start < 0 || end > n || start >= end) {
    throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(end) + ") out of range for " +
                     shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), a);
  Shape os = x.shape();
  os[a] = end - start;
  const std::int64_t len = (end - start) * s.inner;
  const auto xd = x.data();
  std::vector<T> out(static_cast<std::size_t>(s.outer * len));
  for (std::int64_t o = 0; o < s.outer; ++o)
    std::copy(xd.begin() + (o * s.n + start) * s.inner, xd.begin() + (o * s.n + start) * s.inner + len,
              out.begin() + o * len);
  return make_op_result<T>("slice", os, std::move(out), {x},
                           [s, start, len](std::span<const T>, std::span<const T> g, std::span<const std::span<T>> gi) {
                             for (std::int64_t o = 0; o < s.outer; ++o)
                               for (std::int64_t i = 0; i < len; ++i) gi[0][(o * s.n + start) * s.inner + i] += g[o * len + i];
                           });
}

template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return mean(square(sub(a, b)));
}

// ================================================================ dispatcher

const std::vector<std::string>& registered_ops() {
  static const std::vector<std::string> ops = {
      "add",     "sub",      "mul",     "div",      "scalar-mul", "matmul",  "conv2d",     "transposed-conv2d",
      "relu",    "sigmoid",  "tanh",    "softplus", "exp",        "log",     "sqrt",       "abs",
      "square",  "silu",     "sum",     "mean",     "softmax",    "group-norm", "concat",  "slice",
      "reshape", "permute",  "nearest-upsample2x",  "avgpool2x",  "l2-norm"};
  return ops;
}

template <typename T>
BasicTensor<T> forward_op(std::string_view op, const std::vector<BasicTensor<T>>& in, const OpAttrs& at) {
  auto need = [&](std::size_t n) {
    if (in.size() < n) throw ShapeError("op '" + std::string(op) + "' needs " + std::to_string(n) + " inputs");
  };
  auto optional_bias = [&](std::size_t i) { return in.size() > i ? in[i] : BasicTensor<T>(); };
  if (op == "add") { need(2); return add(in[0], in[1]); }
  if (op == "sub") { need(2); return sub(in[0], in[1]); }
  if (op == "mul") { need(2); return mul(in[0], in[1]); }
  if (op == "div") { need(2); return div(in[0], in[1]); }
  if (op == "scalar-mul") { need(1); return scale(in[0], static_cast<T>(at.scalar)); }
  if (op == "matmul") { need(2); return matmul(in[0], in[1]); }
  if (op == "conv2d") { need(2); return conv2d(in[0], in[1], optional_bias(2), at.stride, at.pad); }
  if (op == "transposed-conv2d") { need(2); return conv_transpose2d(in[0], in[1], optional_bias(2), at.stride, at.pad); }
  if (op == "relu") { need(1); return relu(in[0]); }
  if (op == "sigmoid") { need(1); return sigmoid(in[0]); }
  if (op == "tanh") { need(1); return tanh(in[0]); }
  if (op == "softplus") { need(1); return softplus(in[0]); }
  if (op == "exp") { need(1); return exp(in[0]); }
  if (op == "log") { need(1); return log(in[0]); }
  if (op == "sqrt") { need(1); return sqrt(in[0]); }
  if (op == "abs") { need(1); return abs(in[0]); }
  if (op == "square") { need(1); return square(in[0]); }
  if (op == "silu") { need(1); return silu(in[0]); }
  if (op == "sum") { need(1); return at.reduce_all ? sum(in[0]) : sum(in[0], at.axis, at.keepdim); }
  if (op == "mean") { need(1); return at.reduce_all ? mean(in[0]) : mean(in[0], at.axis, at.keepdim); }
  if (op == "softmax") { need(1); return softmax(in[0], at.axis); }
  if (op == "group-norm") { need(3); return group_norm(in[0], at.groups, in[1], in[2], static_cast<T>(at.eps)); }
  if (op == "concat") { need(1); return concat(in, at.axis); }
  if (op == "slice") { need(1); return slice(in[0], at.axis, at.start, at.end); }
  if (op == "reshape") { need(1); return reshape(in[0], at.shape); }
  if (op == "permute") { need(1); return permute(in[0], at.order); }
  if (op == "nearest-upsample2x") { need(1); return upsample_nearest2x(in[0]); }
  if (op == "avgpool2x") { need(1); return avg_pool2x(in[0]); }
  if (op == "l2-norm") { need(1); return l2_norm(in[0]); }
  throw std::invalid_argument("unknown op id '" + std::string(op) + "'");
}

#define SAT_INSTANTIATE_OPS(T)                                                                                 \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> div(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> neg(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                     \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                                \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> tanh(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> softplus(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> exp(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> log(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> sqrt(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> abs(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> square(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> silu(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> sum(const BasicTensor<T>&, int, bool);                                               \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> mean(const BasicTensor<T>&, int, bool);                                              \
  template BasicTensor<T> l2_norm(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> softmax(const BasicTensor<T>&, int);                                                 \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, int, int); \
  template BasicTensor<T> conv_transpose2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                           int, int);                                                          \
  template BasicTensor<T> group_norm(const BasicTensor<T>&, int, const BasicTensor<T>&, const BasicTensor<T>&, T); \
  template BasicTensor<T> upsample_nearest2x(const BasicTensor<T>&);                                           \
  template BasicTensor<T> avg_pool2x(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                               \
  template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<int>&);                             \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int);                                     \
  template BasicTensor<T> slice(const BasicTensor<T>&, int, std::int64_t, std::int64_t);                       \
  template BasicTensor<T> mse(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> forward_op(std::string_view, const std::vector<BasicTensor<T>>&, const OpAttrs&);

SAT_INSTANTIATE_OPS(float)
SAT_INSTANTIATE_OPS(double)

}  // namespace sat
