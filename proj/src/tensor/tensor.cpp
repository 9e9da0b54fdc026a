#include "sat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace sat {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace autograd {
namespace {
thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_nodes_created = 0;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
std::uint64_t nodes_created() { return g_nodes_created; }

void note_node_created() { ++g_nodes_created; }
}  // namespace autograd

namespace {

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor() : storage_(std::make_shared<TensorStorage<T>>()) {
  storage_->data.assign(1, T(0));
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad)
    : storage_(std::make_shared<TensorStorage<T>>()) {
  check_shape(shape);
  if (sat::numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  storage_->shape = std::move(shape);
  storage_->data = std::move(data);
  storage_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  check_shape(shape);
  const auto n = static_cast<std::size_t>(sat::numel(shape));
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::int64_t BasicTensor<T>::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(shape()));
  return storage_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return storage_->data[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::int64_t> index) const {
  if (index.size() != shape().size()) throw ShapeError("index rank mismatch");
  std::int64_t flat = 0;
  std::size_t i = 0;
  for (auto v : index) {
    const auto d = shape()[i++];
    if (v < 0 || v >= d) throw ShapeError("index out of range");
    flat = flat * d + v;
  }
  return storage_->data[static_cast<std::size_t>(flat)];
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
  if (storage_->node) throw GraphError("cannot mutate a tensor produced by a recorded op");
  return storage_->data;
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool value) {
  if (storage_->node) throw GraphError("requires_grad can only be set on leaf tensors");
  storage_->requires_grad = value;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  storage_->grad.assign(storage_->data.size(), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(storage_->shape, storage_->data, false);
}

template <typename T>
BasicTensor<T> make_op_result(std::string_view op, Shape shape, std::vector<T> data,
                              const std::vector<BasicTensor<T>>& inputs, BackwardFn<T> backward_fn) {
  for (const T& v : data) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
  }
  BasicTensor<T> out(std::move(shape), std::move(data), false);
  if (!autograd::grad_enabled()) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const BasicTensor<T>& t) { return t.requires_grad(); });
  if (!needs) return out;
  auto node = std::make_shared<GraphNode<T>>();
  node->op = std::string(op);
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.storage());
  node->backward = std::move(backward_fn);
  out.storage()->node = std::move(node);
  out.storage()->requires_grad = true;
  autograd::note_node_created();
  return out;
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  auto root = loss.storage();
  if (!root->requires_grad) return;
  if (root->node && root->node->consumed) throw GraphError("graph already consumed by a previous backward()");

  // Post-order DFS gives a topological order; reversed, every node is
  // visited after all of its consumers.
  std::vector<TensorStorage<T>*> order;
  std::unordered_set<TensorStorage<T>*> visited;
  std::vector<std::pair<TensorStorage<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [s, next] = stack.back();
    if (s->node && next < s->node->inputs.size()) {
      TensorStorage<T>* child = s->node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        if (child->node && child->node->consumed) {
          throw GraphError("graph already consumed by a previous backward()");
        }
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(s);
      stack.pop_back();
    }
  }

  if (root->grad.size() != root->data.size()) root->grad.assign(root->data.size(), T(0));
  root->grad[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorStorage<T>* s = *it;
    if (!s->node) continue;
    GraphNode<T>& node = *s->node;
    std::vector<std::span<T>> grad_in(node.inputs.size());
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      auto& in = node.inputs[i];
      if (!in->requires_grad) continue;
      if (in->grad.size() != in->data.size()) in->grad.assign(in->data.size(), T(0));
      grad_in[i] = in->grad;
    }
    if (s->grad.size() != s->data.size()) s->grad.assign(s->data.size(), T(0));
    node.backward(s->data, s->grad, grad_in);
    node.consumed = true;
    node.backward = nullptr;
    // Intermediate gradients are not observable; release them.
    std::vector<T>().swap(s->grad);
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<float> make_op_result(std::string_view, Shape, std::vector<float>,
                                           const std::vector<BasicTensor<float>>&, BackwardFn<float>);
template BasicTensor<double> make_op_result(std::string_view, Shape, std::vector<double>,
                                            const std::vector<BasicTensor<double>>&, BackwardFn<double>);
template void backward(const BasicTensor<float>&);
template void backward(const BasicTensor<double>&);

}  // namespace sat
