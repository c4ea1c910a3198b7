#include "ickd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

#include "ickd/errors.hpp"

namespace ickd {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

#ifdef NDEBUG
std::atomic<FiniteCheck> g_finite_check{FiniteCheck::lazy};
#else
std::atomic<FiniteCheck> g_finite_check{FiniteCheck::eager};
#endif

thread_local bool t_grad_enabled = true;

std::atomic<std::uint64_t> g_serial{1};

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("dimension sizes must be positive, got " + to_string(shape));
  }
}

}  // namespace

void set_finite_check(FiniteCheck mode) { g_finite_check.store(mode); }
FiniteCheck finite_check() { return g_finite_check.load(); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace detail {

std::uint64_t next_serial() { return g_serial.fetch_add(1, std::memory_order_relaxed); }

template <class T>
std::shared_ptr<Node<T>> make_result(const char* op, Shape shape, std::vector<T> value,
                                     std::vector<std::shared_ptr<Node<T>>> inputs) {
  if (numel(shape) != static_cast<std::int64_t>(value.size())) {
    throw InternalError(std::string(op) + ": value length does not match shape " + to_string(shape));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->is_leaf = false;
  node->op = op;
  node->serial = next_serial();
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || (in && in->requires_grad);
  }
  node->requires_grad = needs;
  if (needs) node->inputs = std::move(inputs);
  return node;
}

template <class T>
void attach_backward(const std::shared_ptr<Node<T>>& out, std::function<void(Node<T>&)> fn) {
  if (out->requires_grad) out->backward = std::move(fn);
}

template <class T>
std::vector<T>* grad_buffer(Node<T>& node) {
  if (!node.requires_grad) return nullptr;
  if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
  return &node.grad;
}

template <class T>
Tensor<T> finish(std::shared_ptr<Node<T>> node) {
  if (g_finite_check.load(std::memory_order_relaxed) == FiniteCheck::eager) {
    for (const T v : node->value) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(std::string("non-finite value produced by ") + node->op);
      }
    }
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

template <class T>
Tensor<T> Tensor<T>::zeros(const Shape& shape) {
  return full(shape, T(0));
}

template <class T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  check_shape(shape);
  return from_data(shape, std::vector<T>(static_cast<std::size_t>(numel(shape)), value));
}

template <class T>
Tensor<T> Tensor<T>::from_data(const Shape& shape, std::vector<T> data) {
  check_shape(shape);
  if (numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     to_string(shape));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = shape;
  node->value = std::move(data);
  node->serial = detail::next_serial();
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from_data({}, {value});
}

template <class T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw ShapeError("undefined tensor");
  return node_->shape;
}

template <class T>
std::int64_t Tensor<T>::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

template <class T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() needs a single-element tensor, got " + to_string(shape()));
  return node_->value[0];
}

template <class T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for shape " + to_string(s));
  std::int64_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[axis]) throw ShapeError("index out of range for shape " + to_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->value[static_cast<std::size_t>(flat)];
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (!node_->is_leaf) throw ShapeError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = flag;
  return *this;
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return from_data(shape(), node_->value);
}

template <class T>
bool GradientTape<T>::contains(const Tensor<T>& param) const {
  return grads_.count(param.id()) != 0;
}

template <class T>
const Tensor<T>& GradientTape<T>::grad(const Tensor<T>& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) throw ShapeError("tensor has no gradient on this tape");
  return it->second;
}

template <class T>
void GradientTape<T>::insert(std::uint64_t id, Tensor<T> grad) {
  grads_.insert_or_assign(id, std::move(grad));
}

template <class T>
GradientTape<T> backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got " + (loss.defined() ? to_string(loss.shape()) : "undefined"));
  }
  GradientTape<T> tape;
  if (!loss.requires_grad()) return tape;

  // Inputs are always created before their consumers, so descending serial
  // order is a valid reverse topological order.
  std::vector<detail::Node<T>*> order;
  std::vector<detail::Node<T>*> stack{loss.node().get()};
  std::vector<std::uint64_t> seen;
  while (!stack.empty()) {
    auto* node = stack.back();
    stack.pop_back();
    auto pos = std::lower_bound(seen.begin(), seen.end(), node->serial);
    if (pos != seen.end() && *pos == node->serial) continue;
    seen.insert(pos, node->serial);
    order.push_back(node);
    for (const auto& in : node->inputs) {
      if (in->requires_grad) {
        if (in->serial >= node->serial) throw InternalError("autodiff graph is not acyclic");
        stack.push_back(in.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->serial > b->serial; });

  auto* root = loss.node().get();
  root->grad.assign(1, T(1));
  for (auto* node : order) {
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (auto* node : order) {
    if (node->is_leaf) {
      if (node->grad.empty()) node->grad.assign(node->value.size(), T(0));
      tape.insert(node->serial, Tensor<T>::from_data(node->shape, std::move(node->grad)));
    }
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
  return tape;
}

#define ICKD_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                   \
  template class GradientTape<T>;                                                             \
  template GradientTape<T> backward<T>(const Tensor<T>&);                                     \
  template std::shared_ptr<detail::Node<T>> detail::make_result<T>(                           \
      const char*, Shape, std::vector<T>, std::vector<std::shared_ptr<detail::Node<T>>>);     \
  template void detail::attach_backward<T>(const std::shared_ptr<detail::Node<T>>&,           \
                                           std::function<void(detail::Node<T>&)>);            \
  template std::vector<T>* detail::grad_buffer<T>(detail::Node<T>&);                          \
  template Tensor<T> detail::finish<T>(std::shared_ptr<detail::Node<T>>);

ICKD_INSTANTIATE(float)
ICKD_INSTANTIATE(double)

}  // namespace ickd
