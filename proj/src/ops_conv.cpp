#include <limits>

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

namespace {

struct ConvGeometry {
  std::int64_t n, ci, h, w, co, k, stride, pad, oh, ow;
  std::int64_t rows() const { return ci * k * k; }
  std::int64_t cols() const { return n * oh * ow; }
};

std::int64_t output_extent(const char* op, std::int64_t size, std::int64_t k, std::int64_t stride, std::int64_t pad) {
  const std::int64_t span = size + 2 * pad - k;
  if (span < 0 || span % stride != 0) {
    throw ShapeError(std::string(op) + ": output size (" + std::to_string(size) + " + 2*" + std::to_string(pad) +
                     " - " + std::to_string(k) + ")/" + std::to_string(stride) + " + 1 is not integral");
  }
  return span / stride + 1;
}

// col[(c*k + ky)*k + kx][(b*oh + oy)*ow + ox] = x[b][c][oy*s - p + ky][ox*s - p + kx], zero outside.
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::int64_t cols = g.cols();
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::int64_t b = 0; b < g.n; ++b) {
          const T* plane = x + (b * g.ci + c) * g.h * g.w;
          for (std::int64_t oy = 0; oy < g.oh; ++oy) {
            T* dst = row + (b * g.oh + oy) * g.ow;
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) {
              std::fill(dst, dst + g.ow, T(0));
              continue;
            }
            const T* src = plane + iy * g.w;
            for (std::int64_t ox = 0; ox < g.ow; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
            }
          }
        }
      }
}

template <class T>
void col2im(const ConvGeometry& g, const T* col, T* dx) {
  const std::int64_t cols = g.cols();
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::int64_t b = 0; b < g.n; ++b) {
          T* plane = dx + (b * g.ci + c) * g.h * g.w;
          for (std::int64_t oy = 0; oy < g.oh; ++oy) {
            const std::int64_t iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            const T* src = row + (b * g.oh + oy) * g.ow;
            T* dst = plane + iy * g.w;
            for (std::int64_t ox = 0; ox < g.ow; ++ox) {
              const std::int64_t ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
            }
          }
        }
      }
}

void require_rank4(const char* op, const Shape& s) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + to_string(s));
}

}  // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, int stride, int padding) {
  require_rank4("conv2d", input.shape());
  if (weight.rank() != 4 || weight.dim(1) != input.dim(1) || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d: weight " + to_string(weight.shape()) + " incompatible with input " +
                     to_string(input.shape()));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.ci = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.co = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = padding;
  g.oh = output_extent("conv2d", g.h, g.k, stride, padding);
  g.ow = output_extent("conv2d", g.w, g.k, stride, padding);

  const std::int64_t plane = g.oh * g.ow;
  std::vector<T> col(static_cast<std::size_t>(g.rows() * g.cols()));
  im2col(g, input.data().data(), col.data());
  detail::RowMatrix<T> y = ConstMatrixMap<T>(weight.data().data(), g.co, g.rows()) *
                           ConstMatrixMap<T>(col.data(), g.rows(), g.cols());
  std::vector<T> out(static_cast<std::size_t>(g.n * g.co * plane));
  for (std::int64_t b = 0; b < g.n; ++b)
    for (std::int64_t c = 0; c < g.co; ++c)
      std::copy_n(y.data() + c * g.cols() + b * plane, plane, out.data() + (b * g.co + c) * plane);

  auto node = make_result<T>("conv2d", {g.n, g.co, g.oh, g.ow}, std::move(out), {input.node(), weight.node()});
  if (!node->requires_grad) return finish(node);
  attach_backward<T>(node, [g, plane, col = std::move(col)](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& wt = *self.inputs[1];
    detail::RowMatrix<T> gy(g.co, g.cols());
    for (std::int64_t b = 0; b < g.n; ++b)
      for (std::int64_t c = 0; c < g.co; ++c)
        std::copy_n(self.grad.data() + (b * g.co + c) * plane, plane, gy.data() + c * g.cols() + b * plane);
    if (auto* gw = grad_buffer(wt)) {
      MatrixMap<T>(gw->data(), g.co, g.rows()).noalias() +=
          gy * ConstMatrixMap<T>(col.data(), g.rows(), g.cols()).transpose();
    }
    if (auto* gx = grad_buffer(x)) {
      detail::RowMatrix<T> gcol = ConstMatrixMap<T>(wt.value.data(), g.co, g.rows()).transpose() * gy;
      col2im(g, gcol.data(), gx->data());
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride) {
  require_rank4("avg_pool2d", x.shape());
  if (kernel < 1 || stride < 1) throw ShapeError("avg_pool2d: kernel and stride must be >= 1");
  const auto planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto oh = output_extent("avg_pool2d", h, kernel, stride, 0);
  const auto ow = output_extent("avg_pool2d", w, kernel, stride, 0);
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  const auto in = x.data();
  std::vector<T> out(static_cast<std::size_t>(planes * oh * ow));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        T acc = 0;
        for (int ky = 0; ky < kernel; ++ky)
          for (int kx = 0; kx < kernel; ++kx)
            acc += in[static_cast<std::size_t>((p * h + oy * stride + ky) * w + ox * stride + kx)];
        out[static_cast<std::size_t>((p * oh + oy) * ow + ox)] = acc * inv;
      }
  auto node = make_result<T>("avg_pool2d", {x.dim(0), x.dim(1), oh, ow}, std::move(out), {x.node()});
  attach_backward<T>(node, [=](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t oy = 0; oy < oh; ++oy)
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const T share = self.grad[static_cast<std::size_t>((p * oh + oy) * ow + ox)] * inv;
            for (int ky = 0; ky < kernel; ++ky)
              for (int kx = 0; kx < kernel; ++kx)
                (*g)[static_cast<std::size_t>((p * h + oy * stride + ky) * w + ox * stride + kx)] += share;
          }
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride) {
  require_rank4("max_pool2d", x.shape());
  if (kernel < 1 || stride < 1) throw ShapeError("max_pool2d: kernel and stride must be >= 1");
  const auto planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto oh = output_extent("max_pool2d", h, kernel, stride, 0);
  const auto ow = output_extent("max_pool2d", w, kernel, stride, 0);
  const auto in = x.data();
  std::vector<T> out(static_cast<std::size_t>(planes * oh * ow));
  std::vector<std::int64_t> argmax(out.size());
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t where = -1;
        for (int ky = 0; ky < kernel; ++ky)
          for (int kx = 0; kx < kernel; ++kx) {
            const auto idx = (p * h + oy * stride + ky) * w + ox * stride + kx;
            // First maximum in scan order wins ties.
            if (where < 0 || in[static_cast<std::size_t>(idx)] > best) {
              best = in[static_cast<std::size_t>(idx)];
              where = idx;
            }
          }
        const auto o = static_cast<std::size_t>((p * oh + oy) * ow + ox);
        out[o] = best;
        argmax[o] = where;
      }
  auto node = make_result<T>("max_pool2d", {x.dim(0), x.dim(1), oh, ow}, std::move(out), {x.node()});
  attach_backward<T>(node, [argmax = std::move(argmax)](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      for (std::size_t o = 0; o < argmax.size(); ++o) (*g)[static_cast<std::size_t>(argmax[o])] += self.grad[o];
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank4("global_avg_pool", x.shape());
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const T inv = T(1) / static_cast<T>(hw);
  const auto in = x.data();
  std::vector<T> out(static_cast<std::size_t>(n * c));
  for (std::int64_t p = 0; p < n * c; ++p) {
    T acc = 0;
    for (std::int64_t i = 0; i < hw; ++i) acc += in[static_cast<std::size_t>(p * hw + i)];
    out[static_cast<std::size_t>(p)] = acc * inv;
  }
  auto node = make_result<T>("global_avg_pool", {n, c}, std::move(out), {x.node()});
  attach_backward<T>(node, [hw, inv](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      for (std::size_t p = 0; p < self.grad.size(); ++p) {
        const T share = self.grad[p] * inv;
        T* dst = g->data() + static_cast<std::int64_t>(p) * hw;
        for (std::int64_t i = 0; i < hw; ++i) dst[i] += share;
      }
    }
  });
  return finish(node);
}

template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  require_rank4("upsample_nearest", x.shape());
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  const auto planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto oh = h * factor, ow = w * factor;
  const auto in = x.data();
  std::vector<T> out(static_cast<std::size_t>(planes * oh * ow));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx)
        out[static_cast<std::size_t>((p * oh + y) * ow + xx)] =
            in[static_cast<std::size_t>((p * h + y / factor) * w + xx / factor)];
  auto node = make_result<T>("upsample_nearest", {x.dim(0), x.dim(1), oh, ow}, std::move(out), {x.node()});
  attach_backward<T>(node, [=](Node<T>& self) {
    if (auto* g = grad_buffer(*self.inputs[0])) {
      for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t y = 0; y < oh; ++y)
          for (std::int64_t xx = 0; xx < ow; ++xx)
            (*g)[static_cast<std::size_t>((p * h + y / factor) * w + xx / factor)] +=
                self.grad[static_cast<std::size_t>((p * oh + y) * ow + xx)];
    }
  });
  return finish(node);
}

#define ICKD_INSTANTIATE(T)                                                  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, int, int);   \
  template Tensor<T> avg_pool2d(const Tensor<T>&, int, int);                 \
  template Tensor<T> max_pool2d(const Tensor<T>&, int, int);                 \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                      \
  template Tensor<T> upsample_nearest(const Tensor<T>&, int);

ICKD_INSTANTIATE(float)
ICKD_INSTANTIATE(double)

}  // namespace ickd
