#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cpdet/errors.hpp"
#include "cpdet/rng.hpp"

namespace cpdet {

using Shape = std::vector<size_t>;

inline size_t numel_of(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Global gradient-recording flag. Disabled inside NoGradGuard scopes so that
// inference and finite-difference evaluations build no graph.
inline bool& grad_mode_flag() {
  static bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline uint64_t next_node_id() {
  static uint64_t counter = 0;
  return ++counter;
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  uint64_t id = next_node_id();
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Handle over a shared graph node. Copying a Tensor aliases the node.
template <typename T>
class Tensor {
 public:
  std::shared_ptr<TensorNode<T>> node;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node(std::move(n)) {}

  static Tensor from_vector(Shape shape, std::vector<T> data) {
    if (data.size() != numel_of(shape))
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape) {
    size_t n = numel_of(shape);
    return from_vector(std::move(shape), std::vector<T>(n, T(0)));
  }

  static Tensor full(Shape shape, T v) {
    size_t n = numel_of(shape);
    return from_vector(std::move(shape), std::vector<T>(n, v));
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor scalar(T v) { return from_vector({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
    size_t n = numel_of(shape);
    std::vector<T> d(n);
    for (size_t i = 0; i < n; ++i) d[i] = static_cast<T>(rng.normal(static_cast<double>(mean), static_cast<double>(stddev)));
    return from_vector(std::move(shape), std::move(d));
  }

  bool defined() const { return static_cast<bool>(node); }
  const Shape& shape() const { return node->shape; }
  size_t dim(size_t i) const { return node->shape[i]; }
  size_t rank() const { return node->shape.size(); }
  size_t numel() const { return node->value.size(); }
  std::vector<T>& data() { return node->value; }
  const std::vector<T>& data() const { return node->value; }
  bool requires_grad() const { return node && node->requires_grad; }

  Tensor& set_requires_grad(bool rg = true) {
    node->requires_grad = rg;
    return *this;
  }

  std::vector<T>& grad() {
    node->ensure_grad();
    return node->grad;
  }

  void zero_grad() {
    node->ensure_grad();
    std::fill(node->grad.begin(), node->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node->value[0];
  }

  // Reverse-mode sweep from a scalar root. Gradients accumulate into .grad of
  // every reachable node with requires_grad set; leaves untouched by the graph
  // keep (or lazily get) zero gradients.
  void backward() const {
    if (!node) throw ContractError("backward on undefined tensor");
    if (numel() != 1) throw ContractError("backward requires a scalar loss, got shape " + shape_str(shape()));
    if (!node->requires_grad) return;

    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> visited;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    visited.insert(node.get());
    stack.push_back({node.get(), 0});
    while (!stack.empty()) {
      auto& top = stack.back();
      TensorNode<T>* n = top.first;
      if (top.second < n->parents.size()) {
        TensorNode<T>* p = n->parents[top.second++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    node->ensure_grad();
    node->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn();
    }
  }
};

// Wires out as the result of an op over inputs. The backward closure must
// accumulate into the inputs' grad buffers (calling ensure_grad itself).
// Recording is skipped entirely when grads are off or no input needs them.
template <typename T>
void attach_backward(Tensor<T>& out, std::vector<Tensor<T>> inputs, std::function<void()> bw) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& in : inputs)
    if (in.requires_grad()) any = true;
  if (!any) return;
  out.node->requires_grad = true;
  out.node->parents.reserve(inputs.size());
  for (auto& in : inputs) out.node->parents.push_back(in.node);
  out.node->backward_fn = std::move(bw);
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cpdet
