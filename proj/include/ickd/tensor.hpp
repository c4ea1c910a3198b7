#pragma once

// Dense row-major tensors with a reverse-mode autodiff graph.
//
// A Tensor is a cheap handle onto a shared graph node. Ops never mutate their
// inputs; parameters are leaf tensors with requires_grad set, updated in place
// by the optimizer between steps through mutable_data().

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ickd {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Eager mode scans every op output for NaN/Inf and throws NonFiniteError
// naming the op. Lazy mode leaves the check to the caller (the trainer checks
// the loss once per step).
enum class FiniteCheck { eager, lazy };
void set_finite_check(FiniteCheck mode);
FiniteCheck finite_check();

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

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward touches the node
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t serial = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs[i]->grad.
  std::function<void(Node&)> backward;
};

std::uint64_t next_serial();

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, T value);
  static Tensor from_data(const Shape& shape, std::vector<T> data);
  static Tensor scalar(T value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t dim(int axis) const;
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const T> data() const { return node_->value; }
  // Direct write access for initialization and optimizer updates. Any graph
  // already built on top of this tensor becomes stale.
  std::span<T> mutable_data() { return node_->value; }
  std::vector<T> to_vector() const { return node_->value; }

  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  // Only valid on leaves.
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return node_->is_leaf; }

  // Value copy with no graph history.
  Tensor detach() const;

  std::uint64_t id() const { return node_->serial; }
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

// Gradients of one backward pass, keyed by parameter identity.
template <class T>
class GradientTape {
 public:
  bool contains(const Tensor<T>& param) const;
  const Tensor<T>& grad(const Tensor<T>& param) const;
  std::size_t size() const { return grads_.size(); }
  const std::map<std::uint64_t, Tensor<T>>& entries() const { return grads_; }

  void insert(std::uint64_t id, Tensor<T> grad);

 private:
  std::map<std::uint64_t, Tensor<T>> grads_;
};

// Reverse pass from a scalar loss. The returned tape holds one gradient for
// every requires_grad leaf reachable from the loss.
template <class T>
GradientTape<T> backward(const Tensor<T>& loss);

namespace detail {

// Output node for an op over `inputs`; records the graph only when grad mode
// is on and some input needs a gradient.
template <class T>
std::shared_ptr<Node<T>> make_result(const char* op, Shape shape, std::vector<T> value,
                                     std::vector<std::shared_ptr<Node<T>>> inputs);

template <class T>
void attach_backward(const std::shared_ptr<Node<T>>& out, std::function<void(Node<T>&)> fn);

// Grad buffer of `node`, zero-allocated on first touch. Null when the node
// does not require a gradient.
template <class T>
std::vector<T>* grad_buffer(Node<T>& node);

template <class T>
Tensor<T> finish(std::shared_ptr<Node<T>> node);

}  // namespace detail

}  // namespace ickd
