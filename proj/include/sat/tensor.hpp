#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A BasicTensor is a cheap handle to shared, immutable storage. Operations
// record a graph node whenever gradient mode is on and at least one input
// requires a gradient; backward() walks that graph once, in reverse
// topological order, accumulating into the .grad buffers of leaf tensors.
//
// The engine is instantiated for float (training) and double (gradient-check
// oracles).

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sat {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace autograd {

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Monotonic count of graph nodes recorded on this thread. Code paths that
// must not build a graph compare it before and after.
std::uint64_t nodes_created();

}  // namespace autograd

template <typename T>
struct GraphNode;

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<GraphNode<T>> node;
};

// Called during backward with the op output, its incoming gradient, and one
// gradient buffer per input (empty span when that input needs no gradient).
// Implementations accumulate (+=) into the input buffers.
template <typename T>
using BackwardFn = std::function<void(std::span<const T> out, std::span<const T> grad_out,
                                      std::span<const std::span<T>> grad_in)>;

template <typename T>
struct GraphNode {
  std::string op;
  std::vector<std::shared_ptr<TensorStorage<T>>> inputs;
  BackwardFn<T> backward;
  bool consumed = false;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor();
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  const Shape& shape() const { return storage_->shape; }
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(storage_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(storage_->data.size()); }

  std::span<const T> data() const { return storage_->data; }
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  // Only leaves (tensors without a recorded producer) may be mutated.
  std::span<T> mutable_data();

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool value);
  bool is_leaf() const { return storage_->node == nullptr; }
  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const T> grad() const { return storage_->grad; }
  std::span<T> mutable_grad() { return storage_->grad; }
  // Resets the gradient to an allocated zero buffer.
  void zero_grad();

  // Fresh leaf holding a copy of the values, detached from any graph.
  BasicTensor detach() const;

  const std::shared_ptr<TensorStorage<T>>& storage() const { return storage_; }
  explicit BasicTensor(std::shared_ptr<TensorStorage<T>> storage) : storage_(std::move(storage)) {}

 private:
  std::shared_ptr<TensorStorage<T>> storage_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Builds an op output and, if any input requires a gradient while grad mode
// is on, records the graph node. Throws NumericError on non-finite output.
// This is also the extension point for fused ops defined outside the core.
template <typename T>
BasicTensor<T> make_op_result(std::string_view op, Shape shape, std::vector<T> data,
                              const std::vector<BasicTensor<T>>& inputs, BackwardFn<T> backward);

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// The traversed graph is consumed and cannot be replayed.
template <typename T>
void backward(const BasicTensor<T>& loss);

// ---- elementwise with numpy-style broadcasting ----
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> neg(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value);

// ---- unary ----
template <typename T> BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> tanh(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> softplus(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> exp(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> log(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> sqrt(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> abs(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> square(const BasicTensor<T>& x);
// x * sigmoid(x)
template <typename T> BasicTensor<T> silu(const BasicTensor<T>& x);

// ---- reductions ----
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x, int axis, bool keepdim);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x, int axis, bool keepdim);
// Euclidean norm of the whole tensor; the gradient at zero is taken as zero.
template <typename T> BasicTensor<T> l2_norm(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x, int axis);

// ---- linear algebra / convolution ----
// [m,k] x [k,n]
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// x [N,C,H,W], weight [O,C,kh,kw], bias [O] or empty.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      int stride, int pad);
// x [N,C,H,W], weight [C,O,kh,kw], bias [O] or empty.
template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                const BasicTensor<T>& bias, int stride, int pad);
// x [N,C,H,W]; gamma/beta [C].
template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, int groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps);
// Nearest-neighbour x2 and 2x2 average pooling over the last two axes.
template <typename T> BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> avg_pool2x(const BasicTensor<T>& x);

// ---- shape ----
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <typename T> BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& order);
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, int axis);
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::int64_t start, std::int64_t end);

// mean((a - b)^2)
template <typename T> BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Attributes for the string-keyed dispatcher.
struct OpAttrs {
  // sum/mean reduce every element unless reduce_all is false.
  bool reduce_all = true;
  int axis = 0;
  bool keepdim = false;
  int stride = 1;
  int pad = 0;
  int groups = 1;
  double scalar = 1.0;
  double eps = 1e-5;
  std::int64_t start = 0;
  std::int64_t end = 0;
  Shape shape;
  std::vector<int> order;
};

// Runs an op by id. Unknown ids throw std::invalid_argument.
template <typename T>
BasicTensor<T> forward_op(std::string_view op, const std::vector<BasicTensor<T>>& inputs,
                          const OpAttrs& attrs = {});

// Ids accepted by forward_op.
const std::vector<std::string>& registered_ops();

}  // namespace sat
