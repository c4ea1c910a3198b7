#include "ickd/distill.hpp"

#include <algorithm>
#include <cmath>

#include "ickd/errors.hpp"
#include "ickd/ops.hpp"

namespace ickd {

std::string_view to_string(KernelKind kind) {
  switch (kind) {
    case KernelKind::inner_product: return "inner-product";
    case KernelKind::gaussian: return "gaussian";
    case KernelKind::polynomial: return "polynomial";
  }
  return "?";
}

KernelKind parse_kernel_kind(std::string_view text) {
  if (text == "inner-product") return KernelKind::inner_product;
  if (text == "gaussian") return KernelKind::gaussian;
  if (text == "polynomial") return KernelKind::polynomial;
  throw ConfigError("unknown kernel kind '" + std::string(text) + "' (expected inner-product, gaussian or polynomial)");
}

std::string_view to_string(CcLossKind kind) { return kind == CcLossKind::l2 ? "l2" : "smooth-l1"; }

CcLossKind parse_cc_loss_kind(std::string_view text) {
  if (text == "l2") return CcLossKind::l2;
  if (text == "smooth-l1") return CcLossKind::smooth_l1;
  throw ConfigError("unknown cc loss kind '" + std::string(text) + "' (expected l2 or smooth-l1)");
}

void KernelCfg::validate() const {
  if (!(gaussian_sigma > 0.0) || !std::isfinite(gaussian_sigma)) throw ConfigError("kernel.sigma must be positive");
  if (!std::isfinite(poly_offset)) throw ConfigError("kernel.offset must be finite");
  if (poly_degree < 1) throw ConfigError("kernel.degree must be >= 1");
}

void GridSpec::validate() const {
  if (rows < 1 || cols < 1) throw ConfigError("grid dimensions must be >= 1");
}

void GridSpec::check_divides(std::int64_t height, std::int64_t width) const {
  if (height % rows != 0 || width % cols != 0) {
    throw GridIndivisibleError("grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                               " does not evenly divide a " + std::to_string(height) + "x" +
                               std::to_string(width) + " feature");
  }
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("distill.temperature must be > 0");
  if (!(beta1 >= 0.0) || !std::isfinite(beta1)) throw ConfigError("distill.beta1 must be >= 0");
  if (!(beta2 >= 0.0) || !std::isfinite(beta2)) throw ConfigError("distill.beta2 must be >= 0");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("distill.alpha must be >= 0");
  kernel.validate();
  grid.validate();
  for (int s : stages) {
    if (s < 1) throw ConfigError("distill.stages: stage indices are 1-based");
  }
}

std::vector<int> DistillConfig::resolved_stages(int num_stages) const {
  if (stages.empty()) return {num_stages};
  std::vector<int> out = stages;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.back() > num_stages) {
    throw ConfigError("distill.stages: stage " + std::to_string(out.back()) + " does not exist in a " +
                      std::to_string(num_stages) + "-stage model");
  }
  return out;
}

template <class T>
T icc_kernel(std::span<const T> u, std::span<const T> v, const KernelCfg& cfg) {
  if (u.size() != v.size()) {
    throw ShapeError("icc_kernel: vector lengths differ (" + std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()) + ")");
  }
  switch (cfg.kind) {
    case KernelKind::inner_product: {
      T acc = 0;
      for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
      return acc;
    }
    case KernelKind::gaussian: {
      T d2 = 0;
      for (std::size_t i = 0; i < u.size(); ++i) d2 += (u[i] - v[i]) * (u[i] - v[i]);
      const T sigma = static_cast<T>(cfg.gaussian_sigma);
      return std::exp(-d2 / (T(2) * sigma * sigma));
    }
    case KernelKind::polynomial: {
      T acc = 0;
      for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
      return std::pow(acc + static_cast<T>(cfg.poly_offset), cfg.poly_degree);
    }
  }
  throw InternalError("icc_kernel: unhandled kernel kind");
}

template <class T>
IccMatrix<T> icc_matrix(const Tensor<T>& features, const KernelCfg& cfg) {
  if (features.rank() != 3) throw ShapeError("icc_matrix: expected [c,h,w], got " + to_string(features.shape()));
  const auto flat = flatten_spatial(features);
  switch (cfg.kind) {
    case KernelKind::inner_product: return {gram(flat)};
    case KernelKind::gaussian: return {pairwise_gaussian(flat, static_cast<T>(cfg.gaussian_sigma))};
    case KernelKind::polynomial:
      return {pairwise_polynomial(flat, static_cast<T>(cfg.poly_offset), cfg.poly_degree)};
  }
  throw InternalError("icc_matrix: unhandled kernel kind");
}

template <class T>
Tensor<T> loss_cc(const IccMatrix<T>& student, const IccMatrix<T>& teacher, CcLossKind kind) {
  if (student.values.shape() != teacher.values.shape()) {
    throw ShapeError("loss_cc: ICC sizes differ (" + to_string(student.values.shape()) + " vs " +
                     to_string(teacher.values.shape()) + "); is the transfer layer missing?");
  }
  const auto c = static_cast<T>(student.channel_count());
  const auto diff = sub(student.values, teacher.values);
  const auto total = kind == CcLossKind::l2 ? sq_frobenius(diff) : sum(huber(diff, T(1)));
  return scale(total, T(1) / (c * c));
}

template <class T>
Tensor<T> loss_kd(const Tensor<T>& logits_teacher, const Tensor<T>& logits_student, double temperature,
                  bool tau_squared) {
  if (logits_teacher.shape() != logits_student.shape() || logits_teacher.rank() != 2) {
    throw ShapeError("loss_kd: expected matching [N,K] logits, got " + to_string(logits_teacher.shape()) + " and " +
                     to_string(logits_student.shape()));
  }
  if (!(temperature > 0.0)) throw ConfigError("loss_kd: temperature must be > 0");
  const T inv_tau = static_cast<T>(1.0 / temperature);
  const auto log_p = log_softmax(scale(logits_teacher, inv_tau));
  const auto log_q = log_softmax(scale(logits_student, inv_tau));
  const auto kl = sum(mul(exp(log_p), sub(log_p, log_q)));
  T factor = T(1) / static_cast<T>(logits_teacher.dim(0));
  if (tau_squared) factor *= static_cast<T>(temperature * temperature);
  return scale(kl, factor);
}

template <class T>
std::vector<std::vector<Tensor<T>>> grid_partition(const Tensor<T>& features, const GridSpec& grid) {
  if (features.rank() != 3) throw ShapeError("grid_partition: expected [c,h,w], got " + to_string(features.shape()));
  grid.validate();
  const auto h = features.dim(1), w = features.dim(2);
  grid.check_divides(h, w);
  const auto ph = h / grid.rows, pw = w / grid.cols;
  std::vector<std::vector<Tensor<T>>> patches(static_cast<std::size_t>(grid.rows));
  for (int i = 0; i < grid.rows; ++i)
    for (int j = 0; j < grid.cols; ++j)
      patches[static_cast<std::size_t>(i)].push_back(crop(features, i * ph, (i + 1) * ph, j * pw, (j + 1) * pw));
  return patches;
}

template <class T>
Tensor<T> loss_cc_grid(const Tensor<T>& student, const Tensor<T>& teacher, const GridSpec& grid,
                       const KernelCfg& cfg, CcLossKind kind) {
  if (student.rank() != 3 || teacher.rank() != 3) {
    throw ShapeError("loss_cc_grid: expected [c,h,w] features, got " + to_string(student.shape()) + " and " +
                     to_string(teacher.shape()));
  }
  if (student.dim(0) != teacher.dim(0)) {
    throw ShapeError("loss_cc_grid: channel counts differ (" + std::to_string(student.dim(0)) + " vs " +
                     std::to_string(teacher.dim(0)) + ")");
  }
  const auto ps = grid_partition(student, grid);
  const auto pt = grid_partition(teacher, grid);
  Tensor<T> total;
  for (int i = 0; i < grid.rows; ++i)
    for (int j = 0; j < grid.cols; ++j) {
      const auto& s = ps[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      const auto& t = pt[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      auto patch = loss_cc(icc_matrix(s, cfg), icc_matrix(t, cfg), kind);
      total = total.defined() ? add(total, patch) : patch;
    }
  return scale(total, T(1) / static_cast<T>(grid.rows * grid.cols));
}

template <class T>
Tensor<T> loss_cc_batch(const Tensor<T>& student, const Tensor<T>& teacher, const GridSpec& grid,
                        const KernelCfg& cfg, CcLossKind kind) {
  if (student.rank() != 4 || teacher.rank() != 4 || student.dim(0) != teacher.dim(0)) {
    throw ShapeError("loss_cc_batch: expected [N,c,h,w] features with equal N, got " + to_string(student.shape()) +
                     " and " + to_string(teacher.shape()));
  }
  const auto n = student.dim(0);
  Tensor<T> total;
  for (std::int64_t b = 0; b < n; ++b) {
    auto l = loss_cc_grid(select(student, b), select(teacher, b), grid, cfg, kind);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, T(1) / static_cast<T>(n));
}

template <class T>
Tensor<T> stage_cc_loss(const FeatureTaps<T>& taps_teacher, const FeatureTaps<T>& taps_student,
                        TransferLayers<T>& transfer, const DistillConfig& cfg, Mode transfer_mode) {
  if (taps_student.count() == 0) throw ConfigError("no student feature taps");
  const int last = taps_student.stages.rbegin()->first;
  const auto stages = cfg.resolved_stages(last);
  Tensor<T> total;
  for (int s : stages) {
    Tensor<T> fs = taps_student.at(s);
    const Tensor<T>& ft = taps_teacher.at(s);
    if (cfg.use_transfer_layer) {
      auto it = transfer.find(s);
      if (it == transfer.end()) throw ConfigError("no transfer layer for stage " + std::to_string(s));
      fs = it->second.apply(fs, transfer_mode);
    }
    auto l = loss_cc_batch(fs, ft, cfg.grid, cfg.kernel, cfg.cc_loss);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, T(1) / static_cast<T>(stages.size()));
}

template <class T>
Objective<T> loss_ickd_c(const Tensor<T>& logits_teacher, const Tensor<T>& logits_student,
                         const FeatureTaps<T>& taps_teacher, const FeatureTaps<T>& taps_student,
                         TransferLayers<T>& transfer, const DistillConfig& cfg,
                         std::span<const std::int32_t> targets, Mode transfer_mode) {
  const auto ce = cross_entropy(logits_student, targets);
  const auto kd = loss_kd(logits_teacher, logits_student, cfg.temperature, cfg.kd_tau_squared);
  const auto cc = stage_cc_loss(taps_teacher, taps_student, transfer, cfg, transfer_mode);
  Objective<T> out;
  out.total = add(add(ce, scale(kd, static_cast<T>(cfg.beta1))), scale(cc, static_cast<T>(cfg.beta2)));
  out.components = {ce.item(), kd.item(), cc.item(), out.total.item()};
  return out;
}

template <class T>
Tensor<T> pixel_cross_entropy(const Tensor<T>& dense_logits, std::span<const std::int32_t> targets) {
  if (dense_logits.rank() != 4) {
    throw ShapeError("pixel_cross_entropy: expected [N,K,H,W] logits, got " + to_string(dense_logits.shape()));
  }
  return cross_entropy(channels_last(dense_logits), targets);
}

template <class T>
Objective<T> loss_ickd_s(const Tensor<T>& dense_logits_student, std::span<const std::int32_t> targets,
                         const FeatureTaps<T>& taps_teacher, const FeatureTaps<T>& taps_student,
                         TransferLayers<T>& transfer, const DistillConfig& cfg, Mode transfer_mode) {
  const auto seg = pixel_cross_entropy(dense_logits_student, targets);
  const auto cc = stage_cc_loss(taps_teacher, taps_student, transfer, cfg, transfer_mode);
  Objective<T> out;
  out.total = add(seg, scale(cc, static_cast<T>(cfg.alpha)));
  out.components = {seg.item(), 0.0, cc.item(), out.total.item()};
  return out;
}

#define ICKD_INSTANTIATE(T)                                                                                   \
  template T icc_kernel(std::span<const T>, std::span<const T>, const KernelCfg&);                            \
  template IccMatrix<T> icc_matrix(const Tensor<T>&, const KernelCfg&);                                       \
  template Tensor<T> loss_cc(const IccMatrix<T>&, const IccMatrix<T>&, CcLossKind);                           \
  template Tensor<T> loss_kd(const Tensor<T>&, const Tensor<T>&, double, bool);                               \
  template std::vector<std::vector<Tensor<T>>> grid_partition(const Tensor<T>&, const GridSpec&);             \
  template Tensor<T> loss_cc_grid(const Tensor<T>&, const Tensor<T>&, const GridSpec&, const KernelCfg&,      \
                                  CcLossKind);                                                                \
  template Tensor<T> loss_cc_batch(const Tensor<T>&, const Tensor<T>&, const GridSpec&, const KernelCfg&,     \
                                   CcLossKind);                                                               \
  template Tensor<T> stage_cc_loss(const FeatureTaps<T>&, const FeatureTaps<T>&, TransferLayers<T>&,          \
                                   const DistillConfig&, Mode);                                               \
  template Objective<T> loss_ickd_c(const Tensor<T>&, const Tensor<T>&, const FeatureTaps<T>&,                \
                                    const FeatureTaps<T>&, TransferLayers<T>&, const DistillConfig&,          \
                                    std::span<const std::int32_t>, Mode);                                     \
  template Tensor<T> pixel_cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);                    \
  template Objective<T> loss_ickd_s(const Tensor<T>&, std::span<const std::int32_t>, const FeatureTaps<T>&,   \
                                    const FeatureTaps<T>&, TransferLayers<T>&, const DistillConfig&, Mode);

ICKD_INSTANTIATE(float)
ICKD_INSTANTIATE(double)

}  // namespace ickd
