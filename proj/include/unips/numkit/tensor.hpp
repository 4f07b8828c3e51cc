#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace unips::nk {

using Shape = std::vector<std::int64_t>;

/// 64-byte aligned storage so vectorized kernels take the same code path
/// (and summation order) for every buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Thrown when operand extents do not conform to what a layer expects.
class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a layer receives or produces NaN/Inf.
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline std::int64_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Counts live activation elements (tensors produced by ops, not parameters or
// inputs). The scalability tests read the peak between reset_peak() and now.
struct ActivationCounter {
  std::int64_t live = 0;
  std::int64_t peak = 0;

  static ActivationCounter& local() {
    thread_local ActivationCounter c;
    return c;
  }
  void reset_peak() { peak = live; }
  void add(std::int64_t n) {
    live += n;
    peak = std::max(peak, live);
  }
  void sub(std::int64_t n) { live -= n; }
};

/// Thread-local switch disabling graph recording (inference).
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  bool counted = false;
  const char* op = "leaf";

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
  ~Node() {
    if (counted) ActivationCounter::local().sub(static_cast<std::int64_t>(value.size()));
  }

  std::span<T> ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share the underlying node; use
/// clone() for a detached deep copy.
template <class T>
class Tensor {
public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

  static Tensor filled(Shape shape, T v) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(static_cast<std::size_t>(numel_of(shape)), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (static_cast<std::int64_t>(values.size()) != numel_of(shape))
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                       " values for shape " + to_string(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value.assign(values.begin(), values.end());
    return Tensor(std::move(n));
  }

  /// Leaf tensor that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int i) const {
    const auto r = static_cast<int>(node_->shape.size());
    return node_->shape.at(static_cast<std::size_t>(i < 0 ? r + i : i));
  }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  std::span<T> grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  Tensor clone() const { return from(shape(), node_->value); }
  Tensor detach() const { return clone(); }

  const NodePtr& node() const { return node_; }

  /// Reverse-mode sweep from a scalar. Nodes are visited once each, in
  /// reverse topological order.
  void backward() {
    if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + to_string(shape()));
    auto order = topo_order(node_.get());
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->grad.size() == n->value.size()) {
        n->backward_fn(*n);
        Buffer<T>().swap(n->grad);
      }
    }
  }

  static std::vector<Node<T>*> topo_order(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> done;
    std::unordered_set<Node<T>*> on_stack;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
    on_stack.insert(root);
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->inputs.size()) {
        Node<T>* child = n->inputs[idx++].get();
        if (done.count(child)) continue;
        if (on_stack.count(child)) throw std::logic_error("cycle in autodiff graph");
        if (!child->requires_grad) continue;
        on_stack.insert(child);
        stack.emplace_back(child, 0);
      } else {
        on_stack.erase(n);
        done.insert(n);
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

private:
  NodePtr node_;
};

namespace detail {

/// True when any operand participates in gradient tracking and recording is on.
template <class T>
bool needs_grad(std::initializer_list<const Tensor<T>*> xs) {
  if (!GradMode::enabled()) return false;
  for (auto* x : xs)
    if (x->defined() && x->requires_grad()) return true;
  return false;
}

/// Allocates an op result. When `track` is set, the result remembers `inputs`
/// and the caller installs a backward closure.
template <class T>
Tensor<T> make_result(Shape shape, const char* op, bool track,
                      std::initializer_list<const Tensor<T>*> inputs) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
  n->shape = std::move(shape);
  n->op = op;
  n->counted = true;
  ActivationCounter::local().add(static_cast<std::int64_t>(n->value.size()));
  if (track) {
    n->requires_grad = true;
    for (auto* x : inputs)
      if (x->defined()) n->inputs.push_back(x->node());
  }
  return Tensor<T>(std::move(n));
}

template <class T>
void check_finite(const Tensor<T>& t, const char* layer) {
  for (T v : t.data())
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string("non-finite value produced in layer '") + layer + "'");
}

}  // namespace detail

}  // namespace unips::nk
