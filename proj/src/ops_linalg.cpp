#include <cmath>

#include "eigen_maps.hpp"
#include "ickd/errors.hpp"
#include "ickd/ops.hpp"

namespace ickd {

using detail::ConstMatrixMap;
using detail::MatrixMap;
using detail::Node;
using detail::attach_backward;
using detail::finish;
using detail::grad_buffer;
using detail::make_result;

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const auto p = a.dim(0), q = a.dim(1), r = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(p * r));
  MatrixMap<T>(out.data(), p, r).noalias() =
      ConstMatrixMap<T>(a.data().data(), p, q) * ConstMatrixMap<T>(b.data().data(), q, r);
  auto node = make_result<T>("matmul", {p, r}, std::move(out), {a.node(), b.node()});
  attach_backward<T>(node, [p, q, r](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    ConstMatrixMap<T> gc(self.grad.data(), p, r);
    if (auto* g = grad_buffer(x)) {
      MatrixMap<T>(g->data(), p, q).noalias() += gc * ConstMatrixMap<T>(y.value.data(), q, r).transpose();
    }
    if (auto* g = grad_buffer(y)) {
      MatrixMap<T>(g->data(), q, r).noalias() += ConstMatrixMap<T>(x.value.data(), p, q).transpose() * gc;
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> gram(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("gram: expected rank 2, got " + to_string(a.shape()));
  const auto p = a.dim(0), q = a.dim(1);
  ConstMatrixMap<T> am(a.data().data(), p, q);
  std::vector<T> out(static_cast<std::size_t>(p * p));
  MatrixMap<T> g(out.data(), p, p);
  g.noalias() = am * am.transpose();
  // Mirror the upper triangle so G == G^T holds bit for bit.
  for (std::int64_t i = 0; i < p; ++i)
    for (std::int64_t j = 0; j < i; ++j) g(i, j) = g(j, i);
  auto node = make_result<T>("gram", {p, p}, std::move(out), {a.node()});
  attach_backward<T>(node, [p, q](Node<T>& self) {
    auto& x = *self.inputs[0];
    if (auto* g = grad_buffer(x)) {
      ConstMatrixMap<T> gg(self.grad.data(), p, p);
      detail::RowMatrix<T> sym = gg + gg.transpose();
      MatrixMap<T>(g->data(), p, q).noalias() += sym * ConstMatrixMap<T>(x.value.data(), p, q);
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> pairwise_gaussian(const Tensor<T>& a, T sigma) {
  if (a.rank() != 2) throw ShapeError("pairwise_gaussian: expected rank 2, got " + to_string(a.shape()));
  if (!(sigma > T(0))) throw ConfigError("pairwise_gaussian: sigma must be positive");
  const auto p = a.dim(0), q = a.dim(1);
  const auto v = a.data();
  const T inv = T(1) / (T(2) * sigma * sigma);
  std::vector<T> out(static_cast<std::size_t>(p * p));
  for (std::int64_t i = 0; i < p; ++i)
    for (std::int64_t j = 0; j < p; ++j) {
      T d2 = 0;
      for (std::int64_t k = 0; k < q; ++k) {
        const T d = v[static_cast<std::size_t>(i * q + k)] - v[static_cast<std::size_t>(j * q + k)];
        d2 += d * d;
      }
      out[static_cast<std::size_t>(i * p + j)] = std::exp(-d2 * inv);
    }
  auto node = make_result<T>("pairwise_gaussian", {p, p}, std::move(out), {a.node()});
  attach_backward<T>(node, [p, q, sigma](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto* g = grad_buffer(x);
    if (!g) return;
    const T inv_s2 = T(1) / (sigma * sigma);
    for (std::int64_t i = 0; i < p; ++i)
      for (std::int64_t j = 0; j < p; ++j) {
        const auto ij = static_cast<std::size_t>(i * p + j);
        const T w = self.grad[ij] * self.value[ij] * inv_s2;
        for (std::int64_t k = 0; k < q; ++k) {
          const auto ik = static_cast<std::size_t>(i * q + k);
          const auto jk = static_cast<std::size_t>(j * q + k);
          const T d = x.value[ik] - x.value[jk];
          (*g)[ik] -= w * d;
          (*g)[jk] += w * d;
        }
      }
  });
  return finish(node);
}

namespace {

template <class T>
T int_power(T base, int exponent) {
  T out = T(1);
  for (int i = 0; i < exponent; ++i) out *= base;
  return out;
}

}  // namespace

template <class T>
Tensor<T> pairwise_polynomial(const Tensor<T>& a, T offset, int degree) {
  if (a.rank() != 2) throw ShapeError("pairwise_polynomial: expected rank 2, got " + to_string(a.shape()));
  if (degree < 1) throw ConfigError("pairwise_polynomial: degree must be >= 1");
  const auto p = a.dim(0), q = a.dim(1);
  const auto v = a.data();
  std::vector<T> base(static_cast<std::size_t>(p * p));
  std::vector<T> out(base.size());
  for (std::int64_t i = 0; i < p; ++i)
    for (std::int64_t j = 0; j < p; ++j) {
      T dot = 0;
      for (std::int64_t k = 0; k < q; ++k) dot += v[static_cast<std::size_t>(i * q + k)] * v[static_cast<std::size_t>(j * q + k)];
      const auto ij = static_cast<std::size_t>(i * p + j);
      base[ij] = dot + offset;
      out[ij] = int_power(base[ij], degree);
    }
  auto node = make_result<T>("pairwise_polynomial", {p, p}, std::move(out), {a.node()});
  attach_backward<T>(node, [p, q, degree, base = std::move(base)](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto* g = grad_buffer(x);
    if (!g) return;
    for (std::int64_t i = 0; i < p; ++i)
      for (std::int64_t j = 0; j < p; ++j) {
        const auto ij = static_cast<std::size_t>(i * p + j);
        const T w = self.grad[ij] * static_cast<T>(degree) * int_power(base[ij], degree - 1);
        for (std::int64_t k = 0; k < q; ++k) {
          const auto ik = static_cast<std::size_t>(i * q + k);
          const auto jk = static_cast<std::size_t>(j * q + k);
          (*g)[ik] += w * x.value[jk];
          (*g)[jk] += w * x.value[ik];
        }
      }
  });
  return finish(node);
}

#define ICKD_INSTANTIATE(T)                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> gram(const Tensor<T>&);                                \
  template Tensor<T> pairwise_gaussian(const Tensor<T>&, T);                \
  template Tensor<T> pairwise_polynomial(const Tensor<T>&, T, int);

ICKD_INSTANTIATE(float)
ICKD_INSTANTIATE(double)

}  // namespace ickd
