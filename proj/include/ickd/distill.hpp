#pragma once

// Inter-channel correlation (ICC) distillation losses.
//
// For a feature map F of shape [c,h,w], the ICC matrix G is c x c with
// G[m,n] = K(v(F_m), v(F_n)), v() vectorizing one channel. With the
// inner-product kernel G = f(F) f(F)^T, f flattening the spatial axes. The
// student is pulled towards the teacher's ICC through
//   L_CC = |G(C_l(F_s)) - G(F_t)|_2^2 / c^2
// and the grid variant averages the same loss over an n x m patch tiling.

#include <cstdint>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "ickd/nn.hpp"
#include "ickd/tensor.hpp"

namespace ickd {

enum class KernelKind { inner_product, gaussian, polynomial };
enum class CcLossKind { l2, smooth_l1 };

std::string_view to_string(KernelKind kind);
KernelKind parse_kernel_kind(std::string_view text);
std::string_view to_string(CcLossKind kind);
CcLossKind parse_cc_loss_kind(std::string_view text);

struct KernelCfg {
  KernelKind kind = KernelKind::inner_product;
  double gaussian_sigma = 1.0;
  double poly_offset = 1.0;
  int poly_degree = 2;

  void validate() const;
  bool operator==(const KernelCfg&) const = default;
};

struct GridSpec {
  int rows = 1;
  int cols = 1;

  void validate() const;
  // Throws GridIndivisibleError unless rows | height and cols | width.
  void check_divides(std::int64_t height, std::int64_t width) const;
  bool operator==(const GridSpec&) const = default;
};

struct DistillConfig {
  double temperature = 4.0;
  double beta1 = 1.0;
  double beta2 = 2.5;
  double alpha = 20.0;
  KernelCfg kernel;
  CcLossKind cc_loss = CcLossKind::l2;
  std::vector<int> stages;  // 1-based; empty selects the last stage
  GridSpec grid;
  bool use_transfer_layer = true;
  bool kd_tau_squared = false;

  void validate() const;
  std::vector<int> resolved_stages(int num_stages) const;
  bool operator==(const DistillConfig&) const = default;
};

template <class T>
struct IccMatrix {
  Tensor<T> values;  // [c, c]
  std::int64_t channel_count() const { return values.dim(0); }
};

template <class T>
T icc_kernel(std::span<const T> u, std::span<const T> v, const KernelCfg& cfg);

// F is [c,h,w].
template <class T>
IccMatrix<T> icc_matrix(const Tensor<T>& features, const KernelCfg& cfg = {});

template <class T>
Tensor<T> loss_cc(const IccMatrix<T>& student, const IccMatrix<T>& teacher, CcLossKind kind = CcLossKind::l2);

// Mean over the batch of KL(softmax(t/tau) || softmax(s/tau)), teacher
// distribution first; times tau^2 when tau_squared is set.
template <class T>
Tensor<T> loss_kd(const Tensor<T>& logits_teacher, const Tensor<T>& logits_student, double temperature,
                  bool tau_squared = false);

// Patch (i,j) covers rows [i*h/n, (i+1)*h/n) and cols [j*w/m, (j+1)*w/m).
template <class T>
std::vector<std::vector<Tensor<T>>> grid_partition(const Tensor<T>& features, const GridSpec& grid);

// Mean over the n x m patches of the per-patch loss_cc. Features are [c,h,w].
template <class T>
Tensor<T> loss_cc_grid(const Tensor<T>& student, const Tensor<T>& teacher, const GridSpec& grid,
                       const KernelCfg& cfg = {}, CcLossKind kind = CcLossKind::l2);

// Batch mean of loss_cc_grid over [N,c,h,w] features.
template <class T>
Tensor<T> loss_cc_batch(const Tensor<T>& student, const Tensor<T>& teacher, const GridSpec& grid,
                        const KernelCfg& cfg, CcLossKind kind);

struct LossComponents {
  double task = 0.0;  // L_CE or L_Seg
  double kl = 0.0;
  double cc = 0.0;
  double total = 0.0;
};

template <class T>
struct Objective {
  Tensor<T> total;
  LossComponents components;
};

// Transfer layers keyed by 1-based stage index.
template <class T>
using TransferLayers = std::map<int, TransferLayer<T>>;

// Mean over the selected stages of the batch-mean L_CC between the
// (transferred) student taps and the teacher taps.
template <class T>
Tensor<T> stage_cc_loss(const FeatureTaps<T>& taps_teacher, const FeatureTaps<T>& taps_student,
                        TransferLayers<T>& transfer, const DistillConfig& cfg, Mode transfer_mode);

// L_CE + beta1 * L_KD + beta2 * L_CC.
template <class T>
Objective<T> loss_ickd_c(const Tensor<T>& logits_teacher, const Tensor<T>& logits_student,
                         const FeatureTaps<T>& taps_teacher, const FeatureTaps<T>& taps_student,
                         TransferLayers<T>& transfer, const DistillConfig& cfg,
                         std::span<const std::int32_t> targets, Mode transfer_mode = Mode::train);

// L_Seg + alpha * L_CC^{n x m}; L_Seg is per-pixel cross-entropy over [N,K,H,W]
// logits and [N,H,W] targets.
template <class T>
Objective<T> loss_ickd_s(const Tensor<T>& dense_logits_student, std::span<const std::int32_t> targets,
                         const FeatureTaps<T>& taps_teacher, const FeatureTaps<T>& taps_student,
                         TransferLayers<T>& transfer, const DistillConfig& cfg, Mode transfer_mode = Mode::train);

template <class T>
Tensor<T> pixel_cross_entropy(const Tensor<T>& dense_logits, std::span<const std::int32_t> targets);

}  // namespace ickd
