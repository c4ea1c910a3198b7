#include <algorithm>
#include <array>
#include <cmath>

#include "ickd/errors.hpp"
#include "ickd/ops.hpp"

namespace ickd {

using detail::Node;
using detail::attach_backward;
using detail::finish;
using detail::grad_buffer;
using detail::make_result;

namespace {

constexpr std::array<std::string_view, 30> kOps = {
    "add",          "sub",         "mul",           "scale",           "relu",
    "exp",          "log",         "huber",         "add_bias",        "sum",
    "mean",         "sq_frobenius", "reshape",      "transpose",       "flatten_spatial",
    "select",       "crop",        "channels_last", "matmul",          "gram",
    "pairwise_gaussian", "pairwise_polynomial", "softmax", "log_softmax", "cross_entropy",
    "conv2d",       "avg_pool2d",  "max_pool2d",    "global_avg_pool", "upsample_nearest",
};
constexpr std::array<std::string_view, 2> kNormOps = {"batch_norm_train", "batch_norm_eval"};

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <class T, class F, class G>
Tensor<T> unary(const char* op, const Tensor<T>& x, F forward, G derivative) {
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  auto node = make_result<T>(op, x.shape(), std::move(out), {x.node()});
  attach_backward<T>(node, [derivative](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (auto* g = grad_buffer(src)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        (*g)[i] += self.grad[i] * derivative(src.value[i], self.value[i]);
      }
    }
  });
  return finish(node);
}

// Gradient of a pure index remapping: out[i] = in[map[i]].
template <class T>
Tensor<T> gather(const char* op, const Tensor<T>& x, Shape shape, std::vector<std::int64_t> map) {
  const auto in = x.data();
  std::vector<T> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = in[static_cast<std::size_t>(map[i])];
  auto node = make_result<T>(op, std::move(shape), std::move(out), {x.node()});
  attach_backward<T>(node, [map = std::move(map)](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      for (std::size_t i = 0; i < map.size(); ++i) (*g)[static_cast<std::size_t>(map[i])] += self.grad[i];
    }
  });
  return finish(node);
}

}  // namespace

std::span<const std::string_view> differentiable_ops() {
  static const std::vector<std::string_view> all = [] {
    std::vector<std::string_view> v(kOps.begin(), kOps.end());
    v.insert(v.end(), kNormOps.begin(), kNormOps.end());
    return v;
  }();
  return all;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto node = make_result<T>("add", a.shape(), std::move(out), {a.node(), b.node()});
  attach_backward<T>(node, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (auto* g = grad_buffer(*in)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  auto node = make_result<T>("sub", a.shape(), std::move(out), {a.node(), b.node()});
  attach_backward<T>(node, [](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = grad_buffer(*self.inputs[1])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto node = make_result<T>("mul", a.shape(), std::move(out), {a.node(), b.node()});
  attach_backward<T>(node, [](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (auto* g = grad_buffer(x)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * y.value[i];
    }
    if (auto* g = grad_buffer(y)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * x.value[i];
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary<T>(
      "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T out) { return out; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> huber(const Tensor<T>& x, T delta) {
  if (!(delta > T(0))) throw ConfigError("huber: delta must be positive");
  return unary<T>(
      "huber", x,
      [delta](T v) {
        const T a = std::abs(v);
        return a <= delta ? T(0.5) * v * v : delta * (a - T(0.5) * delta);
      },
      [delta](T v, T) { return std::clamp(v, -delta, delta); });
}

template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw ShapeError("add_bias: bias " + to_string(b.shape()) + " does not match axis 1 of " +
                     to_string(x.shape()));
  }
  const std::int64_t outer = x.dim(0);
  const std::int64_t channels = x.dim(1);
  const std::int64_t inner = x.size() / (outer * channels);
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto bv = b.data();
  for (std::int64_t n = 0; n < outer; ++n)
    for (std::int64_t c = 0; c < channels; ++c) {
      T* p = out.data() + (n * channels + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) p[i] += bv[static_cast<std::size_t>(c)];
    }
  auto node = make_result<T>("add_bias", x.shape(), std::move(out), {x.node(), b.node()});
  attach_backward<T>(node, [outer, channels, inner](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = grad_buffer(*self.inputs[1])) {
      for (std::int64_t n = 0; n < outer; ++n)
        for (std::int64_t c = 0; c < channels; ++c) {
          const T* p = self.grad.data() + (n * channels + c) * inner;
          T acc = 0;
          for (std::int64_t i = 0; i < inner; ++i) acc += p[i];
          (*g)[static_cast<std::size_t>(c)] += acc;
        }
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (const T v : x.data()) acc += v;
  auto node = make_result<T>("sum", {}, {acc}, {x.node()});
  attach_backward<T>(node, [](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  const T n = static_cast<T>(x.size());
  T acc = 0;
  for (const T v : x.data()) acc += v;
  auto node = make_result<T>("mean", {}, {acc / n}, {x.node()});
  attach_backward<T>(node, [n](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      const T share = self.grad[0] / n;
      for (auto& v : *g) v += share;
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> sq_frobenius(const Tensor<T>& x) {
  T acc = 0;
  for (const T v : x.data()) acc += v * v;
  auto node = make_result<T>("sq_frobenius", {}, {acc}, {x.node()});
  attach_backward<T>(node, [](Node<T>& self) {
    auto& src = *self.inputs[0];
    if (auto* g = grad_buffer(src)) {
      const T two_g = T(2) * self.grad[0];
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += two_g * src.value[i];
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("reshape: non-positive dimension in " + to_string(shape));
  }
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  auto node = make_result<T>("reshape", shape, x.to_vector(), {x.node()});
  attach_backward<T>(node, [](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> flatten_spatial(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("flatten_spatial: expected [c,h,w], got " + to_string(x.shape()));
  return reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + to_string(x.shape()));
  const auto rows = x.dim(0), cols = x.dim(1);
  std::vector<std::int64_t> map(static_cast<std::size_t>(rows * cols));
  for (std::int64_t j = 0; j < cols; ++j)
    for (std::int64_t i = 0; i < rows; ++i) map[static_cast<std::size_t>(j * rows + i)] = i * cols + j;
  return gather<T>("transpose", x, {cols, rows}, std::move(map));
}

template <class T>
Tensor<T> select(const Tensor<T>& x, std::int64_t index) {
  if (x.rank() < 1 || index < 0 || index >= x.dim(0)) {
    throw ShapeError("select: index " + std::to_string(index) + " out of range for " + to_string(x.shape()));
  }
  Shape shape(x.shape().begin() + 1, x.shape().end());
  const std::int64_t inner = numel(shape);
  const auto in = x.data();
  std::vector<T> out(in.begin() + index * inner, in.begin() + (index + 1) * inner);
  auto node = make_result<T>("select", std::move(shape), std::move(out), {x.node()});
  attach_backward<T>(node, [index, inner](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      T* dst = g->data() + index * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += self.grad[static_cast<std::size_t>(i)];
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> crop(const Tensor<T>& x, std::int64_t r0, std::int64_t r1, std::int64_t c0, std::int64_t c1) {
  if (x.rank() < 2) throw ShapeError("crop: expected rank >= 2, got " + to_string(x.shape()));
  const auto h = x.dim(-2), w = x.dim(-1);
  if (r0 < 0 || r1 > h || r0 >= r1 || c0 < 0 || c1 > w || c0 >= c1) {
    throw ShapeError("crop: window out of range for " + to_string(x.shape()));
  }
  const std::int64_t planes = x.size() / (h * w);
  const std::int64_t oh = r1 - r0, ow = c1 - c0;
  std::vector<std::int64_t> map;
  map.reserve(static_cast<std::size_t>(planes * oh * ow));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t r = r0; r < r1; ++r)
      for (std::int64_t c = c0; c < c1; ++c) map.push_back((p * h + r) * w + c);
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  return gather<T>("crop", x, std::move(shape), std::move(map));
}

template <class T>
Tensor<T> channels_last(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("channels_last: expected [N,C,H,W], got " + to_string(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<std::int64_t> map(static_cast<std::size_t>(x.size()));
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t p = 0; p < hw; ++p)
      for (std::int64_t k = 0; k < c; ++k)
        map[static_cast<std::size_t>((b * hw + p) * c + k)] = (b * c + k) * hw + p;
  return gather<T>("channels_last", x, {n * hw, c}, std::move(map));
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("log_softmax: expected rank >= 1");
  const std::int64_t k = x.dim(-1);
  const std::int64_t rows = x.size() / k;
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * k;
    T* dst = out.data() + r * k;
    const T peak = *std::max_element(src, src + k);
    T total = 0;
    for (std::int64_t j = 0; j < k; ++j) total += std::exp(src[j] - peak);
    const T lse = peak + std::log(total);
    for (std::int64_t j = 0; j < k; ++j) dst[j] = src[j] - lse;
  }
  auto node = make_result<T>("log_softmax", x.shape(), std::move(out), {x.node()});
  attach_backward<T>(node, [rows, k](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* gy = self.grad.data() + r * k;
        const T* y = self.value.data() + r * k;
        T total = 0;
        for (std::int64_t j = 0; j < k; ++j) total += gy[j];
        for (std::int64_t j = 0; j < k; ++j) (*g)[static_cast<std::size_t>(r * k + j)] += gy[j] - std::exp(y[j]) * total;
      }
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("softmax: expected rank >= 1");
  const std::int64_t k = x.dim(-1);
  const std::int64_t rows = x.size() / k;
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = in.data() + r * k;
    T* dst = out.data() + r * k;
    const T peak = *std::max_element(src, src + k);
    T total = 0;
    for (std::int64_t j = 0; j < k; ++j) total += (dst[j] = std::exp(src[j] - peak));
    for (std::int64_t j = 0; j < k; ++j) dst[j] /= total;
  }
  auto node = make_result<T>("softmax", x.shape(), std::move(out), {x.node()});
  attach_backward<T>(node, [rows, k](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* gy = self.grad.data() + r * k;
        const T* y = self.value.data() + r * k;
        T dot = 0;
        for (std::int64_t j = 0; j < k; ++j) dot += gy[j] * y[j];
        for (std::int64_t j = 0; j < k; ++j) (*g)[static_cast<std::size_t>(r * k + j)] += y[j] * (gy[j] - dot);
      }
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: expected [N,K] logits, got " + to_string(logits.shape()));
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  }
  const auto in = logits.data();
  std::vector<T> probs(in.size());
  T loss = 0;
  for (std::int64_t r = 0; r < n; ++r) {
    const auto t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= k) throw ShapeError("cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(k) + ")");
    const T* src = in.data() + r * k;
    T* p = probs.data() + r * k;
    const T peak = *std::max_element(src, src + k);
    T total = 0;
    for (std::int64_t j = 0; j < k; ++j) total += (p[j] = std::exp(src[j] - peak));
    for (std::int64_t j = 0; j < k; ++j) p[j] /= total;
    loss += peak + std::log(total) - src[t];
  }
  loss /= static_cast<T>(n);
  std::vector<std::int32_t> labels(targets.begin(), targets.end());
  auto node = make_result<T>("cross_entropy", {}, {loss}, {logits.node()});
  attach_backward<T>(node, [probs = std::move(probs), labels = std::move(labels), n, k](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      const T share = self.grad[0] / static_cast<T>(n);
      for (std::int64_t r = 0; r < n; ++r) {
        for (std::int64_t j = 0; j < k; ++j) {
          const auto idx = static_cast<std::size_t>(r * k + j);
          (*g)[idx] += share * (probs[idx] - (j == labels[static_cast<std::size_t>(r)] ? T(1) : T(0)));
        }
      }
    }
  });
  return finish(node);
}

#define ICKD_INSTANTIATE(T)                                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> exp(const Tensor<T>&);                                                     \
  template Tensor<T> log(const Tensor<T>&);                                                     \
  template Tensor<T> huber(const Tensor<T>&, T);                                                \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> sq_frobenius(const Tensor<T>&);                                            \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                   \
  template Tensor<T> flatten_spatial(const Tensor<T>&);                                         \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> select(const Tensor<T>&, std::int64_t);                                    \
  template Tensor<T> crop(const Tensor<T>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t); \
  template Tensor<T> channels_last(const Tensor<T>&);                                           \
  template Tensor<T> log_softmax(const Tensor<T>&);                                             \
  template Tensor<T> softmax(const Tensor<T>&);                                                 \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);

ICKD_INSTANTIATE(float)
ICKD_INSTANTIATE(double)

}  // namespace ickd
