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

struct Layout {
  std::int64_t n, c, inner;
  std::int64_t count() const { return n * inner; }
  std::int64_t offset(std::int64_t b, std::int64_t ch) const { return (b * c + ch) * inner; }
};

template <class T>
Layout check(const char* op, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  if (x.rank() < 2) throw ShapeError(std::string(op) + ": expected rank >= 2, got " + to_string(x.shape()));
  const Layout l{x.dim(0), x.dim(1), x.size() / (x.dim(0) * x.dim(1))};
  const Shape per_channel{l.c};
  if (gamma.shape() != per_channel || beta.shape() != per_channel) {
    throw ShapeError(std::string(op) + ": gamma/beta must have shape " + to_string(per_channel));
  }
  return l;
}

// Shared backward for y = gamma * xhat + beta where xhat is stored.
template <class T>
void affine_param_grads(Node<T>& self, const Layout& l, const std::vector<T>& xhat) {
  auto* gg = grad_buffer(*self.inputs[1]);
  auto* gb = grad_buffer(*self.inputs[2]);
  if (!gg && !gb) return;
  for (std::int64_t ch = 0; ch < l.c; ++ch) {
    T sg = 0, sb = 0;
    for (std::int64_t b = 0; b < l.n; ++b) {
      const auto off = l.offset(b, ch);
      for (std::int64_t i = 0; i < l.inner; ++i) {
        const T dy = self.grad[static_cast<std::size_t>(off + i)];
        sg += dy * xhat[static_cast<std::size_t>(off + i)];
        sb += dy;
      }
    }
    if (gg) (*gg)[static_cast<std::size_t>(ch)] += sg;
    if (gb) (*gb)[static_cast<std::size_t>(ch)] += sb;
  }
}

}  // namespace

template <class T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T epsilon,
                           std::vector<T>* batch_mean, std::vector<T>* batch_var) {
  const Layout l = check("batch_norm_train", x, gamma, beta);
  if (l.count() < 2) {
    throw DegenerateBatchError("batch_norm_train: needs at least 2 values per channel, got " +
                               std::to_string(l.count()));
  }
  const auto in = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  const T m = static_cast<T>(l.count());
  std::vector<T> mu(static_cast<std::size_t>(l.c)), var(mu.size()), inv_std(mu.size());
  std::vector<T> xhat(in.size()), out(in.size());
  for (std::int64_t ch = 0; ch < l.c; ++ch) {
    T acc = 0;
    for (std::int64_t b = 0; b < l.n; ++b)
      for (std::int64_t i = 0; i < l.inner; ++i) acc += in[static_cast<std::size_t>(l.offset(b, ch) + i)];
    const T mean_c = acc / m;
    T sq = 0;
    for (std::int64_t b = 0; b < l.n; ++b)
      for (std::int64_t i = 0; i < l.inner; ++i) {
        const T d = in[static_cast<std::size_t>(l.offset(b, ch) + i)] - mean_c;
        sq += d * d;
      }
    const T var_c = sq / m;
    const T is = T(1) / std::sqrt(var_c + epsilon);
    const auto cu = static_cast<std::size_t>(ch);
    mu[cu] = mean_c;
    var[cu] = var_c;
    inv_std[cu] = is;
    for (std::int64_t b = 0; b < l.n; ++b)
      for (std::int64_t i = 0; i < l.inner; ++i) {
        const auto idx = static_cast<std::size_t>(l.offset(b, ch) + i);
        xhat[idx] = (in[idx] - mean_c) * is;
        out[idx] = gv[cu] * xhat[idx] + bv[cu];
      }
  }
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;

  auto node = make_result<T>("batch_norm_train", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()});
  if (!node->requires_grad) return finish(node);
  attach_backward<T>(node, [l, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    if (auto* gx = grad_buffer(*self.inputs[0])) {
      const auto& gamma_v = self.inputs[1]->value;
      for (std::int64_t ch = 0; ch < l.c; ++ch) {
        const auto cu = static_cast<std::size_t>(ch);
        T sum_d = 0, sum_dx = 0;
        for (std::int64_t b = 0; b < l.n; ++b)
          for (std::int64_t i = 0; i < l.inner; ++i) {
            const auto idx = static_cast<std::size_t>(l.offset(b, ch) + i);
            const T d = self.grad[idx] * gamma_v[cu];
            sum_d += d;
            sum_dx += d * xhat[idx];
          }
        const T k = inv_std[cu] / m;
        for (std::int64_t b = 0; b < l.n; ++b)
          for (std::int64_t i = 0; i < l.inner; ++i) {
            const auto idx = static_cast<std::size_t>(l.offset(b, ch) + i);
            const T d = self.grad[idx] * gamma_v[cu];
            (*gx)[idx] += k * (m * d - sum_d - xhat[idx] * sum_dx);
          }
      }
    }
    affine_param_grads(self, l, xhat);
  });
  return finish(node);
}

template <class T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          std::span<const T> running_mean, std::span<const T> running_var, T epsilon) {
  const Layout l = check("batch_norm_eval", x, gamma, beta);
  if (static_cast<std::int64_t>(running_mean.size()) != l.c || static_cast<std::int64_t>(running_var.size()) != l.c) {
    throw ShapeError("batch_norm_eval: running statistics must have " + std::to_string(l.c) + " entries");
  }
  const auto in = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<T> inv_std(static_cast<std::size_t>(l.c));
  std::vector<T> xhat(in.size()), out(in.size());
  for (std::int64_t ch = 0; ch < l.c; ++ch) {
    const auto cu = static_cast<std::size_t>(ch);
    inv_std[cu] = T(1) / std::sqrt(running_var[cu] + epsilon);
    for (std::int64_t b = 0; b < l.n; ++b)
      for (std::int64_t i = 0; i < l.inner; ++i) {
        const auto idx = static_cast<std::size_t>(l.offset(b, ch) + i);
        xhat[idx] = (in[idx] - running_mean[cu]) * inv_std[cu];
        out[idx] = gv[cu] * xhat[idx] + bv[cu];
      }
  }
  auto node = make_result<T>("batch_norm_eval", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()});
  if (!node->requires_grad) return finish(node);
  attach_backward<T>(node, [l, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    if (auto* gx = grad_buffer(*self.inputs[0])) {
      const auto& gamma_v = self.inputs[1]->value;
      for (std::int64_t ch = 0; ch < l.c; ++ch) {
        const auto cu = static_cast<std::size_t>(ch);
        const T k = gamma_v[cu] * inv_std[cu];
        for (std::int64_t b = 0; b < l.n; ++b)
          for (std::int64_t i = 0; i < l.inner; ++i) {
            const auto idx = static_cast<std::size_t>(l.offset(b, ch) + i);
            (*gx)[idx] += self.grad[idx] * k;
          }
      }
    }
    affine_param_grads(self, l, xhat);
  });
  return finish(node);
}

#define ICKD_INSTANTIATE(T)                                                                              \
  template Tensor<T> batch_norm_train(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T,           \
                                      std::vector<T>*, std::vector<T>*);                                 \
  template Tensor<T> batch_norm_eval(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                     std::span<const T>, std::span<const T>, T);

ICKD_INSTANTIATE(float)
ICKD_INSTANTIATE(double)

}  // namespace ickd
