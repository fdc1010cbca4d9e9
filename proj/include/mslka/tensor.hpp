#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mslka/error.hpp"

namespace mslka {

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

/// Single precision is the production mode; double exists for gradient checks.
enum class Precision { single, double_ };

template <Real T>
constexpr Precision precision_of() {
  return std::same_as<T, float> ? Precision::single : Precision::double_;
}

/// (batch, channel, height, width); row-major storage in that order.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

inline void validate_shape(const Shape& s) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw DimensionError("tensor dimensions must all be >= 1, got " + s.str());
  }
}

/// Allocator with 64-byte alignment. Vectorized kernels pick their loop
/// split from the buffer address, so a fixed alignment keeps float
/// summation order, and therefore results, identical from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

inline thread_local bool grad_mode = true;

template <Real T>
struct Node {
  Shape shape;
  Buffer<T> data;
  // Empty until a backward pass reaches this node.
  Buffer<T> grad;
  bool requires_grad = false;
  // Set once backward has consumed the history recorded behind this node.
  bool released = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  Buffer<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode; }

/// Dense 4-D tensor with optional reverse-mode history.
///
/// A Tensor is a handle: copies share storage and gradient, the way
/// parameters are shared between a layer and the network's parameter list.
/// Use clone() for an independent copy.
template <Real T>
class Tensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<NodeType>()) {
    validate_shape(shape);
    node_->shape = shape;
    node_->data.assign(shape.numel(), fill);
  }

  Tensor(Shape shape, Buffer<T> values) : node_(std::make_shared<NodeType>()) {
    validate_shape(shape);
    if (values.size() != shape.numel()) {
      throw DimensionError("tensor " + shape.str() + " needs " + std::to_string(shape.numel()) +
                           " values, got " + std::to_string(values.size()));
    }
    node_->shape = shape;
    node_->data = std::move(values);
  }

  template <typename Alloc>
    requires(!std::same_as<Alloc, AlignedAllocator<T>>)
  Tensor(Shape shape, const std::vector<T, Alloc>& values) : Tensor(shape, Buffer<T>(values.begin(), values.end())) {}

  static Tensor zeros(Shape shape) { return Tensor(shape, T(0)); }
  static Tensor ones(Shape shape) { return Tensor(shape, T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{1, 1, 1, 1}, value); }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  int n() const { return node_->shape.n; }
  int c() const { return node_->shape.c; }
  int h() const { return node_->shape.h; }
  int w() const { return node_->shape.w; }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const Buffer<T>& values() const { return node_->data; }

  std::size_t offset(int b, int ch, int y, int x) const {
    const Shape& s = node_->shape;
    return ((static_cast<std::size_t>(b) * s.c + ch) * s.h + y) * s.w + x;
  }
  T& at(int b, int ch, int y, int x) { return node_->data[offset(b, ch, y, x)]; }
  T at(int b, int ch, int y, int x) const { return node_->data[offset(b, ch, y, x)]; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape().str());
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag = true) {
    if (!node_->is_leaf()) throw UsageError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw UsageError("tensor has no gradient; run backward() first");
    return node_->grad;
  }
  /// Drops the stored gradient so the next backward pass may populate it.
  void zero_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }

  /// Same values, no history, fresh storage.
  Tensor detach() const { return Tensor(shape(), node_->data); }
  Tensor clone() const { return detach(); }

  void backward() const;

  const std::shared_ptr<NodeType>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<NodeType> node_;
};

namespace detail {

/// Wraps freshly computed values as an op result. History is recorded only
/// when grad mode is on and some input requires a gradient.
template <Real T>
Tensor<T> make_result(Shape shape, Buffer<T> values,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(shape, std::move(values));
  if (!grad_mode) return out;
  bool needs = false;
  for (const auto& in : inputs) {
    if (in->released) throw UsageError("tensor history was already consumed by backward()");
    needs = needs || in->requires_grad;
  }
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.inputs = std::move(inputs);
  node.backward_fn = std::move(backward_fn);
  return out;
}

}  // namespace detail

namespace detail {

/// Runs reverse accumulation from a scalar root and releases the consumed
/// history.
template <Real T>
void backward_pass(const std::shared_ptr<Node<T>>& root, bool reject_populated) {
  using NodeT = Node<T>;
  if (!root || root->shape != Shape{1, 1, 1, 1}) {
    throw UsageError("backward() needs a 1x1x1x1 scalar loss, got " +
                     (root ? root->shape.str() : std::string("undefined")));
  }
  if (root->released) throw UsageError("backward() called twice on the same graph");
  if (!root->requires_grad) throw UsageError("loss has no recorded computation history");

  // Iterative post-order DFS gives inputs before consumers. Shared ownership
  // keeps children alive while consumers drop their history below.
  std::vector<std::shared_ptr<NodeT>> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<std::shared_ptr<NodeT>, std::size_t>> stack{{root, 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    if (next < cur->inputs.size()) {
      std::shared_ptr<NodeT> child = cur->inputs[next++];
      if (child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(cur);
      stack.pop_back();
    }
  }

  if (reject_populated) {
    for (const auto& nd : order) {
      if (nd->is_leaf() && !nd->grad.empty()) {
        throw UsageError("leaf gradient already populated; call zero_grad() before another backward()");
      }
    }
  }

  root->grad_buffer()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* nd = it->get();
    if (nd->is_leaf()) continue;
    if (!nd->grad.empty()) nd->backward_fn(*nd);
    nd->grad.clear();
    nd->grad.shrink_to_fit();
    nd->inputs.clear();
    nd->backward_fn = nullptr;
    nd->released = true;
  }
}

}  // namespace detail

template <Real T>
void Tensor<T>::backward() const {
  detail::backward_pass(node_, true);
}

/// Gradients of a scalar loss with respect to the listed leaves, without
/// touching the stored gradient of any leaf. Leaves unreachable from the
/// loss get zeros.
template <Real T>
std::vector<std::vector<T>> gradients(const Tensor<T>& loss, const std::vector<Tensor<T>>& wrt) {
  if (!loss.defined()) throw UsageError("gradients() of an undefined loss");
  std::vector<std::pair<std::shared_ptr<detail::Node<T>>, Buffer<T>>> stash;
  // Leaves are found by a first pass over the still-intact graph.
  {
    std::unordered_set<detail::Node<T>*> seen{loss.node().get()};
    std::vector<detail::Node<T>*> todo{loss.node().get()};
    while (!todo.empty()) {
      auto* nd = todo.back();
      todo.pop_back();
      for (const auto& in : nd->inputs) {
        if (!seen.insert(in.get()).second) continue;
        if (in->is_leaf()) {
          stash.emplace_back(in, std::move(in->grad));
          in->grad.clear();
        } else {
          todo.push_back(in.get());
        }
      }
    }
  }
  detail::backward_pass(loss.node(), false);
  std::vector<std::vector<T>> out;
  for (const auto& t : wrt) {
    const auto& g = t.node()->grad;
    out.push_back(g.empty() ? std::vector<T>(t.numel(), T(0)) : std::vector<T>(g.begin(), g.end()));
  }
  for (auto& [node, saved] : stash) node->grad = std::move(saved);
  return out;
}

}  // namespace mslka
