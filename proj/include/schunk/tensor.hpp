#pragma once

// Dense n-dimensional tensor with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto an immutable node. Operations that see at
// least one input with requires_grad() record a backward closure; everything
// else is evaluated eagerly without a graph. Parameters are the only tensors
// whose storage is mutated in place (by the optimizer), through
// mutable_data().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace schunk {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Unlinks long chains iteratively instead of through nested destructors.
  ~Node() {
    std::vector<std::shared_ptr<Node>> pending = std::move(parents);
    while (!pending.empty()) {
      std::shared_ptr<Node> n = std::move(pending.back());
      pending.pop_back();
      if (n.use_count() == 1) {
        for (auto& p : n->parents) pending.push_back(std::move(p));
        n->parents.clear();
      }
    }
  }

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> data) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    std::vector<T> data(numel(shape), value);
    return from(std::move(shape), std::move(data));
  }

  static Tensor scalar(T value) { return from({}, {value}); }

  /// A leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  /// Dimension `i`; negative values count from the back.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(rank());
    const int k = i < 0 ? r + i : i;
    if (k < 0 || k >= r) {
      throw DimensionError("dimension index " + std::to_string(i) +
                           " out of range for shape " + shape_str(shape()));
    }
    return node_->shape[static_cast<std::size_t>(k)];
  }

  std::span<const T> data() const { return node_->data; }
  const T* ptr() const { return node_->data.data(); }

  /// In-place access for leaves (parameter updates, test perturbations).
  std::span<T> mutable_data() {
    if (!node_->parents.empty()) {
      throw UsageError("mutable_data() on a non-leaf tensor");
    }
    return node_->data;
  }

  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->parents.empty()) {
      throw UsageError("set_requires_grad() on a non-leaf tensor");
    }
    node_->requires_grad = on;
  }

  T item() const {
    if (size() != 1) {
      throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  T operator[](std::size_t flat) const { return node_->data[flat]; }

  T at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("at(): rank mismatch");
    std::size_t flat = 0;
    std::size_t i = 0;
    for (std::size_t v : index) {
      if (v >= node_->shape[i]) throw DimensionError("at(): index out of range");
      flat = flat * node_->shape[i] + v;
      ++i;
    }
    return node_->data[flat];
  }

  /// Same values, no graph, no gradient.
  Tensor detach() const { return from(shape(), node_->data); }

  /// Deep copy that is a fresh leaf with the same requires_grad flag.
  Tensor clone() const {
    Tensor t = from(shape(), node_->data);
    t.node_->requires_grad = requires_grad();
    return t;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    Tensor<U> t = Tensor<U>::from(shape(), std::move(out));
    if (requires_grad()) t.set_requires_grad(true);
    return t;
  }

  /// Reverse-mode sweep from a scalar.
  void backward() const {
    if (size() != 1) {
      throw DimensionError("backward() needs a scalar, got shape " +
                           shape_str(shape()));
    }
    if (!node_->requires_grad) return;
    std::vector<detail::Node<T>*> order = topological_order();
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  const NodePtr& node() const { return node_; }
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

 private:
  // Post-order DFS; each node appears exactly once.
  std::vector<detail::Node<T>*> topological_order() const {
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  NodePtr node_;
};

namespace detail {

/// Builds an op result, recording `backward` only when some input needs it.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      Backward&& backward) {
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(data));
  if (!grad_mode()) return out;
  bool any = false;
  for (const Tensor<T>* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const Tensor<T>* in : inputs) node.parents.push_back(in->node());
  node.backward = std::forward<Backward>(backward);
  return out;
}

template <class T>
Tensor<T> make_result_n(Shape shape, std::vector<T> data,
                        const std::vector<Tensor<T>>& inputs,
                        std::function<void(Node<T>&)> backward) {
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(data));
  if (!grad_mode()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

/// Gradient buffer of parent `i`, or nullptr when it does not need one.
template <class T>
T* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.ensure_grad().data();
}

}  // namespace detail

}  // namespace schunk
