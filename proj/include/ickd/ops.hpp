#pragma once

// Differentiable primitives. Every op here has a backward rule and is covered
// by the finite-difference gradient suite (see differentiable_ops()).

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "ickd/tensor.hpp"

namespace ickd {

// Names of every registered differentiable primitive.
std::span<const std::string_view> differentiable_ops();

// Elementwise, identical shapes.
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <class T> Tensor<T> relu(const Tensor<T>& x);
template <class T> Tensor<T> exp(const Tensor<T>& x);
template <class T> Tensor<T> log(const Tensor<T>& x);
// Huber with threshold delta: 0.5x^2 for |x| <= delta, else delta(|x| - 0.5 delta).
template <class T> Tensor<T> huber(const Tensor<T>& x, T delta);

// b has shape [x.dim(1)] and is broadcast along axis 1 (channels / classes).
template <class T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);

// Reductions to a rank-0 scalar.
template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);
template <class T> Tensor<T> sq_frobenius(const Tensor<T>& x);

// Shape manipulation.
template <class T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <class T> Tensor<T> transpose(const Tensor<T>& x);  // rank 2
// [c,h,w] -> [c, h*w]; row i is the row-major vectorization of channel i.
template <class T> Tensor<T> flatten_spatial(const Tensor<T>& x);
// x[index] along axis 0.
template <class T> Tensor<T> select(const Tensor<T>& x, std::int64_t index);
// Rows [r0, r1) and cols [c0, c1) of the last two axes.
template <class T>
Tensor<T> crop(const Tensor<T>& x, std::int64_t r0, std::int64_t r1, std::int64_t c0, std::int64_t c1);
// [N,C,H,W] -> [N*H*W, C], row index n*H*W + y*W + x.
template <class T> Tensor<T> channels_last(const Tensor<T>& x);

// Linear algebra.
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// A * A^T for A of shape [p,q]; entries are row dot products, so the result
// is bitwise symmetric.
template <class T> Tensor<T> gram(const Tensor<T>& a);
// K[p,q] = exp(-|a_p - a_q|^2 / (2 sigma^2)) over rows of a, pair by pair.
template <class T> Tensor<T> pairwise_gaussian(const Tensor<T>& a, T sigma);
// K[p,q] = (a_p . a_q + offset)^degree over rows of a, pair by pair.
template <class T> Tensor<T> pairwise_polynomial(const Tensor<T>& a, T offset, int degree);

// Last-axis normalizers.
template <class T> Tensor<T> softmax(const Tensor<T>& x);
template <class T> Tensor<T> log_softmax(const Tensor<T>& x);

// Mean cross-entropy of logits [N,K] against integer targets in [0,K).
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets);

// Convolution and pooling on [N,C,H,W]. Output sizes must be integral:
// (H + 2*pad - k) must be a multiple of stride.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, int stride, int padding);
template <class T> Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride);
template <class T> Tensor<T> max_pool2d(const Tensor<T>& x, int kernel, int stride);
template <class T> Tensor<T> global_avg_pool(const Tensor<T>& x);  // -> [N,C]
template <class T> Tensor<T> upsample_nearest(const Tensor<T>& x, int factor);

// Batch normalization over every axis except 1. Train mode normalizes with
// biased batch statistics, reported through batch_mean / batch_var.
template <class T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           T epsilon, std::vector<T>* batch_mean, std::vector<T>* batch_var);
template <class T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          std::span<const T> running_mean, std::span<const T> running_var,
                          T epsilon);

}  // namespace ickd
