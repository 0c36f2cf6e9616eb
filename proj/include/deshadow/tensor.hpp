#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared Node. Operations on tensors that
// require gradients record their parents and a backward rule on the output
// node; backward() sorts the reachable graph into a GraphTape and replays it
// in reverse. Graphs are single-owner: build, forward and backward on one
// thread. Tensors that do not require gradients never record parents.

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

namespace deshadow {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
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

struct Node {
  Shape shape;
  std::vector<double> data;
  // Empty until the node first receives a gradient contribution.
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents' grads.
  std::function<void(Node& self)> backward;

  bool is_leaf() const { return parents.empty(); }

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// RAII guard that disables graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::Node>()) {}

  Tensor(Shape shape, std::vector<double> data)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor full(Shape shape, double value) {
    std::vector<double> data(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(data));
  }

  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access; meant for parameter updates and fixtures, never for
  // tensors whose values were already consumed by a live graph.
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  double item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  bool is_leaf() const { return node_->is_leaf(); }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }
  const char* op_name() const { return node_->op; }

  /// Gradient as a tensor of this shape (zeros when none accumulated).
  Tensor grad_tensor() const {
    if (!has_grad()) return zeros(shape());
    return Tensor(shape(), node_->grad);
  }

  /// Deep copy of the values as a fresh leaf with the same requires_grad.
  Tensor clone() const {
    Tensor out(shape(), node_->data);
    out.node_->requires_grad = node_->requires_grad;
    return out;
  }

  Tensor reshaped(Shape shape) const;

  /// Stable identity of the underlying node.
  const void* identity() const { return node_.get(); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Creates the result of an operation. The output participates in the graph
  // only if recording is enabled and some input requires gradients.
  static Tensor make_result(Shape shape, std::vector<double> data,
                            const char* op,
                            std::vector<std::shared_ptr<detail::Node>> inputs,
                            std::function<void(detail::Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    out.node_->op = op;
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& n : inputs) any = any || n->requires_grad;
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents = std::move(inputs);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// One operation record in topological order.
struct TapeRecord {
  const detail::Node* output;
  std::vector<const detail::Node*> inputs;
  const char* op;
};

/// Topologically ordered view of the gradient-carrying graph below a root.
class GraphTape {
 public:
  static GraphTape build(const Tensor& root) {
    GraphTape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS: a node is emitted after all of its parents.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* parent = node->parents[next++].get();
        if (parent->requires_grad && seen.insert(parent).second) {
          stack.emplace_back(parent, 0);
        }
        continue;
      }
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
    return tape;
  }

  std::vector<TapeRecord> records() const {
    std::vector<TapeRecord> out;
    out.reserve(nodes_.size());
    for (const detail::Node* n : nodes_) {
      TapeRecord rec{n, {}, n->op};
      for (const auto& p : n->parents) rec.inputs.push_back(p.get());
      out.push_back(std::move(rec));
    }
    return out;
  }

  std::size_t size() const { return nodes_.size(); }

  // Replays backward rules from the root (last record) to the leaves.
  // Interior grads are reset first so that only leaves accumulate across
  // repeated calls.
  void replay(std::size_t* visits = nullptr) const {
    for (detail::Node* n : nodes_) {
      if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
    }
    if (nodes_.empty()) return;
    detail::Node* root = nodes_.back();
    root->ensure_grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node* n = *it;
      if (visits) ++*visits;
      if (n->backward) n->backward(*n);
    }
    for (detail::Node* n : nodes_) {
      if (!n->is_leaf()) {
        n->grad.clear();
        n->grad.shrink_to_fit();
      }
    }
  }

 private:
  std::vector<detail::Node*> nodes_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
/// Repeated calls without zero_grad() accumulate.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " +
                     shape_str(loss.shape()));
  }
  GraphTape::build(loss).replay();
}

inline Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape()) + " to " +
                     shape_str(new_shape));
  }
  auto src = node_;
  return make_result(std::move(new_shape), node_->data, "reshape", {src},
                     [src](detail::Node& self) {
                       if (!src->requires_grad) return;
                       auto& g = src->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         g[i] += self.grad[i];
                       }
                     });
}

}  // namespace deshadow
