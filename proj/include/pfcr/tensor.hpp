#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pfcr/errors.hpp"

namespace pfcr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  std::size_t numel() const { return data.size(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tape;

template <typename T>
struct TapeContext {
  static inline thread_local Tape<T>* current = nullptr;
};

// Handle to a node in the autodiff graph. Copies share storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
    node_->data.assign(numel_of(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node<T>>()) {
    if (numel_of(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& values() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) node_->ensure_grad();
    return *this;
  }
  bool is_leaf() const { return node_->leaf; }

  // Gradient of a leaf; zeros when nothing has flowed in yet.
  std::span<const T> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Deep copy with no graph links.
  Tensor clone() const {
    Tensor t(shape(), node_->data);
    t.node_->requires_grad = node_->requires_grad;
    if (t.node_->requires_grad) t.node_->ensure_grad();
    return t;
  }

  Tensor detach() const { return Tensor(shape(), node_->data); }

  // Same storage, new shape. Not recorded; only valid for leaves / no-grad values.
  Tensor reshaped(Shape s) const {
    if (numel_of(s) != numel())
      throw DimensionError("cannot reshape " + shape_str(shape()) + " to " + shape_str(s));
    return Tensor(std::move(s), node_->data);
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(node_->data.begin(), node_->data.end()));
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Records every differentiable result created while it is installed.
// Nodes are appended at creation, so the order is topological.
template <typename T>
class Tape {
 public:
  Tape() : previous_(TapeContext<T>::current) { TapeContext<T>::current = this; }
  ~Tape() { TapeContext<T>::current = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<Node<T>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<Node<T>>>& nodes() const { return nodes_; }

  static Tape* active() { return TapeContext<T>::current; }

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
  Tape* previous_;
};

// Disables recording for its lifetime.
template <typename T>
class NoGrad {
 public:
  NoGrad() : previous_(TapeContext<T>::current) { TapeContext<T>::current = nullptr; }
  ~NoGrad() { TapeContext<T>::current = previous_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

// Builds an op result. When recording is active and some input needs a
// gradient, the node is linked to its inputs and put on the tape.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->leaf = false;
  Tape<T>* tape = Tape<T>::active();
  if (tape && any_requires_grad<T>(inputs)) {
    node->requires_grad = true;
    for (auto* t : inputs) node->inputs.push_back(t && t->defined() ? t->node() : nullptr);
    node->backward = std::forward<Backward>(backward);
    tape->record(node);
  }
  return Tensor<T>::from_node(std::move(node));
}

// Gradient buffer of input i, or nullptr when it does not take gradients.
template <typename T>
T* grad_of(Node<T>& n, std::size_t i) {
  auto& in = n.inputs[i];
  if (!in || !in->requires_grad) return nullptr;
  in->ensure_grad();
  return in->grad.data();
}

}  // namespace detail

// Reverse sweep over the tape. Intermediate gradients are reset at the start;
// leaf gradients accumulate across calls.
template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  if (loss.numel() != 1)
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  for (auto& n : tape.nodes()) {
    n->grad.assign(n->data.size(), T(0));
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward) n.backward(n);
  }
}

}  // namespace pfcr
