#include "ickd/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ickd/errors.hpp"
#include "ickd/ops.hpp"
#include "ickd/runtime.hpp"

namespace ickd::oracle {

IccMatrix<double> icc_naive(const Tensor<double>& features, const KernelCfg& cfg) {
  if (features.rank() != 3) throw ShapeError("icc_naive: expected [c,h,w], got " + to_string(features.shape()));
  const auto c = features.dim(0);
  const auto n = features.dim(1) * features.dim(2);
  const auto f = features.data();
  std::vector<double> g(static_cast<std::size_t>(c * c));
  for (std::int64_t p = 0; p < c; ++p) {
    for (std::int64_t q = 0; q < c; ++q) {
      double value = 0.0;
      if (cfg.kind == KernelKind::gaussian) {
        double dist = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          const double d = f[p * n + i] - f[q * n + i];
          dist += d * d;
        }
        value = std::exp(-dist / (2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma));
      } else {
        double dot = 0.0;
        for (std::int64_t i = 0; i < n; ++i) dot += f[p * n + i] * f[q * n + i];
        if (cfg.kind == KernelKind::polynomial) {
          const double base = dot + cfg.poly_offset;
          value = 1.0;
          for (int k = 0; k < cfg.poly_degree; ++k) value *= base;
        } else {
          value = dot;
        }
      }
      g[static_cast<std::size_t>(p * c + q)] = value;
    }
  }
  return {Tensor<double>::from_data({c, c}, std::move(g))};
}

double kl_naive(const Tensor<double>& logits_teacher, const Tensor<double>& logits_student, double temperature,
                bool tau_squared) {
  if (logits_teacher.shape() != logits_student.shape() || logits_teacher.rank() != 2) {
    throw ShapeError("kl_naive: expected equal [N,K] logits");
  }
  if (!(temperature > 0.0)) throw ConfigError("kl_naive: temperature must be > 0");
  const auto n = logits_teacher.dim(0), k = logits_teacher.dim(1);
  const auto t = logits_teacher.data(), s = logits_student.data();
  double total = 0.0;
  std::vector<double> p(static_cast<std::size_t>(k)), q(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < n; ++i) {
    double zp = 0.0, zq = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      p[j] = std::exp(t[i * k + j] / temperature);
      q[j] = std::exp(s[i * k + j] / temperature);
      zp += p[j];
      zq += q[j];
    }
    for (std::int64_t j = 0; j < k; ++j) {
      p[j] /= zp;
      q[j] /= zq;
    }
    for (std::int64_t j = 0; j < k; ++j) total += p[j] * (std::log(p[j]) - std::log(q[j]));
  }
  total /= static_cast<double>(n);
  return tau_squared ? total * temperature * temperature : total;
}

std::vector<double> matmul_naive(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw ShapeError("matmul_naive: shape mismatch");
  const auto p = a.dim(0), q = a.dim(1), r = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(p * r), 0.0);
  for (std::int64_t i = 0; i < p; ++i)
    for (std::int64_t j = 0; j < r; ++j) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < q; ++k) acc += a.data()[i * q + k] * b.data()[k * r + j];
      out[i * r + j] = acc;
    }
  return out;
}

std::vector<double> conv2d_naive(const Tensor<double>& input, const Tensor<double>& weight, int stride,
                                 int padding) {
  const auto n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != ci) throw ShapeError("conv2d_naive: channel mismatch");
  const auto ho = (h + 2 * padding - k) / stride + 1, wo = (w + 2 * padding - k) / stride + 1;
  const auto x = input.data(), wt = weight.data();
  std::vector<double> out(static_cast<std::size_t>(n * co * ho * wo), 0.0);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t y = 0; y < ho; ++y)
        for (std::int64_t xx = 0; xx < wo; ++xx) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < ci; ++c)
            for (std::int64_t dy = 0; dy < k; ++dy)
              for (std::int64_t dx = 0; dx < k; ++dx) {
                const auto iy = y * stride + dy - padding, ix = xx * stride + dx - padding;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x[((b * ci + c) * h + iy) * w + ix] * wt[((o * ci + c) * k + dy) * k + dx];
              }
          out[((b * co + o) * ho + y) * wo + xx] = acc;
        }
  return out;
}

double GradCheckReport::max_rel() const {
  double m = 0.0;
  for (const auto& p : params) m = std::max(m, p.max_rel);
  return m;
}

double GradCheckReport::max_abs() const {
  double m = 0.0;
  for (const auto& p : params) m = std::max(m, p.max_abs);
  return m;
}

GradCheckReport grad_check(const LossFn& loss_fn, const std::vector<NamedTensor<double>>& params, double eps) {
  auto eval = [&] {
    NoGradGuard no_grad;
    return loss_fn().item();
  };
  const double f0 = eval();
  for (int repeat = 0; repeat < 2; ++repeat) {
    const double again = eval();
    if (std::memcmp(&again, &f0, sizeof f0) != 0) {
      throw OracleError("grad_check: loss function is not deterministic (" + std::to_string(f0) + " vs " +
                        std::to_string(again) + ")");
    }
  }
  const auto tape = backward(loss_fn());

  GradCheckReport report;
  for (const auto& [name, tensor] : params) {
    Tensor<double> param = tensor;
    ParamError err{name};
    const auto analytic = tape.contains(param) ? tape.grad(param).to_vector()
                                               : std::vector<double>(static_cast<std::size_t>(param.size()), 0.0);
    auto x = param.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + eps;
      const double fp = eval();
      x[i] = orig - eps;
      const double fm = eval();
      x[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double rel = abs_err / std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      if (!std::isfinite(rel)) throw OracleError("grad_check: non-finite error for " + name);
      if (rel > err.max_rel || err.worst_index < 0) {
        err.max_rel = rel;
        err.worst_index = static_cast<std::int64_t>(i);
      }
      err.max_abs = std::max(err.max_abs, abs_err);
    }
    report.params.push_back(err);
  }
  return report;
}

// ---- gradient cases --------------------------------------------------------

namespace {

using TD = Tensor<double>;

TD random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TD::from_data(shape, std::move(v));
}

// Magnitudes uniform in [gap, hi] with a random sign, keeping the relu kink
// outside the difference stencil.
TD away_from(const Shape& shape, Rng& rng, double gap, double hi) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) {
    const double m = rng.uniform(gap, hi);
    x = rng.coin() ? m : -m;
  }
  return TD::from_data(shape, std::move(v));
}

NamedTensor<double> param(const std::string& name, TD t) {
  t.set_requires_grad(true);
  return {name, t};
}

// sum(out * W) for a fixed random W, turning any output into a scalar with
// a generic upstream gradient.
TD project(const TD& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, random_tensor(out.shape(), rng)));
}

// Moves BN affine parameters off their (1, 0) initialization so no gradient
// vanishes by symmetry at the check point.
void randomize_bn(const std::vector<NamedTensor<double>>& params, Rng& rng) {
  auto ends_with = [](const std::string& s, const char* suffix) {
    const std::string x(suffix);
    return s.size() >= x.size() && s.compare(s.size() - x.size(), x.size(), x) == 0;
  };
  for (auto p : params) {
    if (ends_with(p.name, ".bn.gamma"))
      for (auto& v : p.tensor.mutable_data()) v = rng.uniform(0.5, 1.5);
    if (ends_with(p.name, ".bn.beta"))
      for (auto& v : p.tensor.mutable_data()) v = rng.uniform(-0.5, 0.5);
  }
}

}  // namespace

std::vector<GradCase> primitive_grad_cases(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "oracle/primitive-cases"));
  std::vector<GradCase> cases;
  std::uint64_t wseed = derive_seed(seed, "oracle/projection");
  auto unary = [&](const std::string& name, TD x, std::function<TD(const TD&)> f) {
    auto p = param("x", std::move(x));
    const auto ws = wseed++;
    cases.push_back({name, {p}, [p, f, ws] { return project(f(p.tensor), ws); }});
  };
  auto binary = [&](const std::string& name, TD a, TD b, std::function<TD(const TD&, const TD&)> f) {
    auto pa = param("a", std::move(a));
    auto pb = param("b", std::move(b));
    const auto ws = wseed++;
    cases.push_back({name, {pa, pb}, [pa, pb, f, ws] { return project(f(pa.tensor, pb.tensor), ws); }});
  };

  binary("add", random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), [](auto& a, auto& b) { return add(a, b); });
  binary("sub", random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), [](auto& a, auto& b) { return sub(a, b); });
  binary("mul", random_tensor({2, 3, 2}, rng), random_tensor({2, 3, 2}, rng),
         [](auto& a, auto& b) { return mul(a, b); });
  unary("scale", random_tensor({5}, rng), [](auto& x) { return scale(x, -1.7); });
  unary("relu", away_from({4, 5}, rng, 0.05, 1.0), [](auto& x) { return relu(x); });
  unary("exp", random_tensor({3, 3}, rng), [](auto& x) { return exp(x); });
  unary("log", random_tensor({3, 3}, rng, 0.2, 2.0), [](auto& x) { return log(x); });
  {
    // Keep |x| away from the threshold.
    auto x = random_tensor({12}, rng, 0.0, 1.0);
    auto v = x.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i % 2 ? -1.0 : 1.0) * (i % 3 ? 0.2 + 0.6 * v[i] : 1.2 + v[i]);
    unary("huber", x, [](auto& t) { return huber(t, 1.0); });
  }
  binary("add_bias", random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng),
         [](auto& x, auto& b) { return add_bias(x, b); });
  binary("add_bias", random_tensor({4, 3}, rng), random_tensor({3}, rng),
         [](auto& x, auto& b) { return add_bias(x, b); });
  {
    auto p = param("x", random_tensor({3, 4}, rng));
    cases.push_back({"sum", {p}, [p] { return sum(p.tensor); }});
    cases.push_back({"mean", {p}, [p] { return mean(p.tensor); }});
    cases.push_back({"sq_frobenius", {p}, [p] { return sq_frobenius(p.tensor); }});
  }
  unary("reshape", random_tensor({2, 6}, rng), [](auto& x) { return reshape(x, Shape{3, 4}); });
  unary("transpose", random_tensor({2, 5}, rng), [](auto& x) { return transpose(x); });
  unary("flatten_spatial", random_tensor({3, 2, 4}, rng), [](auto& x) { return flatten_spatial(x); });
  unary("select", random_tensor({3, 2, 2}, rng), [](auto& x) { return select(x, 1); });
  unary("crop", random_tensor({2, 4, 5}, rng), [](auto& x) { return crop(x, 1, 3, 2, 5); });
  unary("channels_last", random_tensor({2, 3, 2, 2}, rng), [](auto& x) { return channels_last(x); });
  binary("matmul", random_tensor({3, 4}, rng), random_tensor({4, 2}, rng),
         [](auto& a, auto& b) { return matmul(a, b); });
  unary("gram", random_tensor({4, 6}, rng), [](auto& x) { return gram(x); });
  unary("pairwise_gaussian", random_tensor({4, 5}, rng, -0.5, 0.5), [](auto& x) { return pairwise_gaussian(x, 1.0); });
  unary("pairwise_gaussian", random_tensor({3, 4}, rng), [](auto& x) { return pairwise_gaussian(x, 2.0); });
  unary("pairwise_polynomial", random_tensor({4, 5}, rng),
        [](auto& x) { return pairwise_polynomial(x, 1.0, 2); });
  unary("pairwise_polynomial", random_tensor({3, 4}, rng),
        [](auto& x) { return pairwise_polynomial(x, 0.5, 3); });
  unary("softmax", random_tensor({3, 5}, rng, -2.0, 2.0), [](auto& x) { return softmax(x); });
  unary("log_softmax", random_tensor({3, 5}, rng, -2.0, 2.0), [](auto& x) { return log_softmax(x); });
  {
    auto p = param("logits", random_tensor({4, 5}, rng, -2.0, 2.0));
    const std::vector<std::int32_t> targets{0, 3, 4, 1};
    cases.push_back({"cross_entropy", {p}, [p, targets] { return cross_entropy(p.tensor, targets); }});
  }
  binary("conv2d", random_tensor({2, 3, 5, 5}, rng), random_tensor({4, 3, 3, 3}, rng),
         [](auto& x, auto& w) { return conv2d(x, w, 1, 1); });
  binary("conv2d", random_tensor({1, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng),
         [](auto& x, auto& w) { return conv2d(x, w, 2, 1); });
  binary("conv2d", random_tensor({2, 3, 3, 3}, rng), random_tensor({2, 3, 1, 1}, rng),
         [](auto& x, auto& w) { return conv2d(x, w, 1, 0); });
  unary("avg_pool2d", random_tensor({2, 2, 4, 4}, rng), [](auto& x) { return avg_pool2d(x, 2, 2); });
  {
    // Distinct values spaced well beyond eps keep the argmax fixed.
    auto x = random_tensor({2, 2, 4, 4}, rng);
    auto v = x.mutable_data();
    std::vector<std::size_t> order(v.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t i = 0; i < order.size(); ++i) v[order[i]] = -1.0 + 0.03 * static_cast<double>(i);
    unary("max_pool2d", x, [](auto& t) { return max_pool2d(t, 2, 2); });
  }
  unary("global_avg_pool", random_tensor({2, 3, 3, 3}, rng), [](auto& x) { return global_avg_pool(x); });
  unary("upsample_nearest", random_tensor({1, 2, 2, 3}, rng), [](auto& x) { return upsample_nearest(x, 2); });
  {
    auto x = param("x", random_tensor({3, 2, 2, 2}, rng, -2.0, 2.0));
    auto g = param("gamma", random_tensor({2}, rng, 0.5, 1.5));
    auto b = param("beta", random_tensor({2}, rng));
    const auto ws = wseed++;
    cases.push_back({"batch_norm_train", {x, g, b}, [x, g, b, ws] {
                       return project(batch_norm_train<double>(x.tensor, g.tensor, b.tensor, 1e-5, nullptr, nullptr), ws);
                     }});
    const std::vector<double> rm{0.1, -0.3}, rv{0.8, 1.4};
    const auto ws2 = wseed++;
    cases.push_back({"batch_norm_eval", {x, g, b}, [x, g, b, rm, rv, ws2] {
                       return project(batch_norm_eval<double>(x.tensor, g.tensor, b.tensor, rm, rv, 1e-5), ws2);
                     }});
  }
  return cases;
}

std::vector<GradCase> composite_grad_cases(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "oracle/composite-cases"));
  std::vector<GradCase> cases;

  auto frozen_layer = [&](std::int64_t in, std::int64_t out) {
    TransferLayer<double> layer(in, out, rng);
    layer.bn.update_running_stats = false;
    return layer;
  };

  {
    // L_CC between C_l(F_s) and F_t on [4,3,3] features.
    auto layer = std::make_shared<TransferLayer<double>>(frozen_layer(4, 4));
    auto fs = param("F_s", random_tensor({1, 4, 3, 3}, rng));
    const auto ft = random_tensor({4, 3, 3}, rng);
    std::vector<NamedTensor<double>> params{fs};
    for (auto& p : layer->parameters("C_l")) params.push_back(p);
    randomize_bn(params, rng);
    cases.push_back({"loss_cc", params, [layer, fs, ft] {
                       const auto s = select(layer->apply(fs.tensor, Mode::train), 0);
                       return loss_cc(icc_matrix(s), icc_matrix(ft));
                     }});
  }
  {
    auto fs = param("F_s", random_tensor({4, 3, 3}, rng));
    const auto ft = random_tensor({4, 3, 3}, rng);
    KernelCfg cfg;
    cfg.kind = KernelKind::inner_product;
    cases.push_back({"loss_cc_smooth_l1", {fs}, [fs, ft, cfg] {
                       return loss_cc(icc_matrix(fs.tensor, cfg), icc_matrix(ft, cfg), CcLossKind::smooth_l1);
                     }});
  }
  for (auto kind : {KernelKind::gaussian, KernelKind::polynomial}) {
    auto fs = param("F_s", random_tensor({3, 2, 3}, rng, -0.6, 0.6));
    const auto ft = random_tensor({3, 2, 3}, rng, -0.6, 0.6);
    KernelCfg cfg;
    cfg.kind = kind;
    cases.push_back({"loss_cc_" + std::string(to_string(kind)), {fs},
                     [fs, ft, cfg] { return loss_cc(icc_matrix(fs.tensor, cfg), icc_matrix(ft, cfg)); }});
  }
  {
    // Grid L_CC through C_l, 2x2 grid on [6 -> 4, 4, 4] features.
    auto layer = std::make_shared<TransferLayer<double>>(frozen_layer(6, 4));
    auto fs = param("F_s", random_tensor({1, 6, 4, 4}, rng));
    const auto ft = random_tensor({4, 4, 4}, rng);
    std::vector<NamedTensor<double>> params{fs};
    for (auto& p : layer->parameters("C_l")) params.push_back(p);
    randomize_bn(params, rng);
    cases.push_back({"loss_cc_grid", params, [layer, fs, ft] {
                       const auto s = select(layer->apply(fs.tensor, Mode::train), 0);
                       return loss_cc_grid(s, ft, GridSpec{2, 2});
                     }});
  }
  for (bool tau2 : {false, true}) {
    auto s = param("logits_s", random_tensor({3, 6}, rng, -3.0, 3.0));
    const auto t = random_tensor({3, 6}, rng, -3.0, 3.0);
    cases.push_back({tau2 ? "loss_kd_tau_squared" : "loss_kd", {s},
                     [s, t, tau2] { return loss_kd(t, s.tensor, 4.0, tau2); }});
  }
  {
    // Full ICKD-C on a two-stage toy model, batch 2, both stages distilled.
    ModelSpec sspec{Task::classification, {3, 4}, 1, 5, {3, 8, 8}};
    ModelSpec tspec{Task::classification, {4, 6}, 1, 5, {3, 8, 8}};
    auto student = std::make_shared<Model<double>>(Model<double>::build(sspec, derive_seed(seed, "toy-student")));
    auto teacher = Model<double>::build(tspec, derive_seed(seed, "toy-teacher"));
    student->set_update_running_stats(false);
    const auto images = random_tensor({2, 3, 8, 8}, rng, -1.5, 1.5);
    ForwardResult<double> t_out;
    {
      NoGradGuard no_grad;
      teacher.set_trainable(false);
      t_out = teacher.forward_with_taps(images, Mode::eval);
    }
    auto transfer = std::make_shared<TransferLayers<double>>();
    transfer->emplace(1, frozen_layer(3, 4));
    transfer->emplace(2, frozen_layer(4, 6));
    DistillConfig dcfg;
    dcfg.stages = {1, 2};
    std::vector<NamedTensor<double>> params = student->parameters();
    for (auto& [s, layer] : *transfer) {
      const auto lp = layer.parameters("distill/stage" + std::to_string(s));
      randomize_bn(lp, rng);
      params.insert(params.end(), lp.begin(), lp.end());
    }
    const std::vector<std::int32_t> targets{1, 4};
    cases.push_back({"loss_ickd_c", params, [student, transfer, t_out, images, dcfg, targets] {
                       auto out = student->forward_with_taps(images, Mode::train);
                       return loss_ickd_c(t_out.logits, out.logits, t_out.taps, out.taps, *transfer, dcfg, targets)
                           .total;
                     }});
  }
  return cases;
}

}  // namespace ickd::oracle
