#pragma once

// Brute-force references used only by the verification suites. Nothing here
// calls the code paths it validates: ICC and KL are evaluated with explicit
// loops, gradients by central finite differences.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ickd/distill.hpp"
#include "ickd/nn.hpp"
#include "ickd/tensor.hpp"

namespace ickd::oracle {

// G[p,q] = K(v(F_p), v(F_q)) by an explicit double loop over channel pairs.
IccMatrix<double> icc_naive(const Tensor<double>& features, const KernelCfg& cfg = {});

// (1/N) sum_i sum_k p_ik (log p_ik - log q_ik), p = softmax(t/tau), q = softmax(s/tau),
// both built by explicit exponentiation and normalization.
double kl_naive(const Tensor<double>& logits_teacher, const Tensor<double>& logits_student, double temperature,
                bool tau_squared = false);

// Triple-loop product of [p,q] and [q,r].
std::vector<double> matmul_naive(const Tensor<double>& a, const Tensor<double>& b);

// Direct sliding-window cross-correlation, zero padding.
std::vector<double> conv2d_naive(const Tensor<double>& input, const Tensor<double>& weight, int stride,
                                 int padding);

struct ParamError {
  std::string name;
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::int64_t worst_index = -1;
};

struct GradCheckReport {
  std::vector<ParamError> params;
  double max_rel() const;
  double max_abs() const;
};

using LossFn = std::function<Tensor<double>()>;

// Central differences (f(x+eps) - f(x-eps)) / 2eps per coordinate against the
// backward pass. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
// denominator. Throws OracleError if loss_fn is not deterministic.
GradCheckReport grad_check(const LossFn& loss_fn, const std::vector<NamedTensor<double>>& params,
                           double eps = 1e-4);

struct GradCase {
  std::string name;  // registered op name, or a composite loss name
  std::vector<NamedTensor<double>> params;
  LossFn loss;
};

// At least one case per name in differentiable_ops().
std::vector<GradCase> primitive_grad_cases(std::uint64_t seed);
// L_CC through C_l, grid L_CC, L_KD and the full ICKD-C objective on a
// two-stage toy model (batch 2), with BN running statistics frozen.
std::vector<GradCase> composite_grad_cases(std::uint64_t seed);

}  // namespace ickd::oracle
