#include "ickd/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <numbers>
#include <set>

#include "ickd/distill.hpp"
#include "ickd/errors.hpp"
#include "ickd/ops.hpp"
#include "ickd/oracle.hpp"
#include "ickd/runtime.hpp"

namespace ickd {

namespace {

using Clock = std::chrono::steady_clock;
using TD = Tensor<double>;

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

TD random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TD::from_data(shape, std::move(v));
}

// Random [c,h,w] with c in [1,8] and h*w in [1,64].
TD random_features(Rng& rng) {
  const auto c = rng.integer(1, 8);
  const auto hw = rng.integer(1, 64);
  std::vector<std::int64_t> divisors;
  for (std::int64_t d = 1; d <= hw; ++d)
    if (hw % d == 0) divisors.push_back(d);
  const auto h = divisors[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(divisors.size()) - 1))];
  return random_tensor({c, h, hw / h}, rng);
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double frobenius(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

}  // namespace

std::vector<CheckResult> verify_icc_oracle(std::uint64_t seed, int cases) {
  const auto t0 = Clock::now();
  Rng rng(derive_seed(seed, "verify/icc"));
  double worst[3] = {0.0, 0.0, 0.0};
  for (int i = 0; i < cases; ++i) {
    KernelCfg cfg;
    cfg.kind = static_cast<KernelKind>(i % 3);
    cfg.gaussian_sigma = rng.uniform(0.5, 2.0);
    cfg.poly_offset = rng.uniform(-1.0, 1.0);
    cfg.poly_degree = static_cast<int>(rng.integer(1, 3));
    const auto f = random_features(rng);
    const auto fast = icc_matrix(f, cfg);
    const auto naive = oracle::icc_naive(f, cfg);
    worst[i % 3] = std::max(worst[i % 3], max_abs_diff(fast.values.data(), naive.values.data()));
  }
  const double all = std::max({worst[0], worst[1], worst[2]});
  CheckResult r{"icc", "icc_matrix_vs_naive", all <= 1e-12,
                "cases=" + std::to_string(cases) + " max_abs_diff inner=" + sci(worst[0]) +
                    " gaussian=" + sci(worst[1]) + " polynomial=" + sci(worst[2]) + " tol=1e-12",
                seconds_since(t0)};
  return {r};
}

std::vector<CheckResult> verify_kl_oracle(std::uint64_t seed, int cases) {
  std::vector<CheckResult> out;
  auto t0 = Clock::now();
  Rng rng(derive_seed(seed, "verify/kl"));
  const double taus[] = {1.0, 2.0, 4.0, 8.0};
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    const auto n = rng.integer(1, 4);
    const auto k = rng.integer(1, 16);
    const double tau = taus[i % 4];
    const bool tau2 = (i / 4) % 2 == 1;
    const auto t = random_tensor({n, k}, rng, -6.0, 6.0);
    const auto s = random_tensor({n, k}, rng, -6.0, 6.0);
    worst = std::max(worst, std::abs(loss_kd(t, s, tau, tau2).item() - oracle::kl_naive(t, s, tau, tau2)));
  }
  out.push_back({"kl", "loss_kd_vs_naive", worst <= 1e-10,
                 "cases=" + std::to_string(cases) + " max_abs_diff=" + sci(worst) + " tol=1e-10", seconds_since(t0)});

  t0 = Clock::now();
  const auto t = TD::from_data({1, 2}, {1.0, 0.0});
  const auto s = TD::from_data({1, 2}, {0.0, 1.0});
  const double expected = (std::numbers::e - 1.0) / (std::numbers::e + 1.0);
  const double fast = loss_kd(t, s, 1.0).item();
  const double naive = oracle::kl_naive(t, s, 1.0);
  const double err = std::max(std::abs(fast - expected), std::abs(naive - expected));
  out.push_back({"kl", "two_class_closed_form", err <= 1e-12,
                 "loss_kd=" + sci(fast) + " expected=(e-1)/(e+1) err=" + sci(err) + " tol=1e-12", seconds_since(t0)});
  return out;
}

std::vector<CheckResult> verify_gradients(std::uint64_t seed, double tolerance) {
  std::vector<CheckResult> out;
  auto cases = oracle::primitive_grad_cases(seed);
  std::set<std::string> covered;
  for (const auto& c : cases) covered.insert(c.name);

  std::vector<std::string> missing;
  for (auto op : differentiable_ops())
    if (!covered.count(std::string(op))) missing.emplace_back(op);
  std::string missing_list;
  for (const auto& m : missing) missing_list += " " + m;
  out.push_back({"grad", "registry_coverage", missing.empty(),
                 "ops=" + std::to_string(differentiable_ops().size()) +
                     (missing.empty() ? std::string(" all covered") : " missing:" + missing_list),
                 0.0});

  for (auto& c : oracle::composite_grad_cases(seed)) cases.push_back(std::move(c));
  std::map<std::string, int> seen;
  for (const auto& c : cases) {
    const auto t0 = Clock::now();
    const int idx = seen[c.name]++;
    const std::string name = idx == 0 ? c.name : c.name + "#" + std::to_string(idx);
    try {
      const auto report = oracle::grad_check(c.loss, c.params, 1e-4);
      std::string detail = "max_rel=" + sci(report.max_rel()) + " max_abs=" + sci(report.max_abs()) +
                           " tol=" + sci(tolerance);
      for (const auto& p : report.params)
        if (p.max_rel > tolerance) detail += " worst=" + p.name + "[" + std::to_string(p.worst_index) + "]";
      out.push_back({"grad", name, report.max_rel() <= tolerance, detail, seconds_since(t0)});
    } catch (const Error& e) {
      out.push_back({"grad", name, false, std::string(e.kind()) + ": " + e.what(), seconds_since(t0)});
    }
  }
  return out;
}

std::vector<CheckResult> verify_structure(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng(derive_seed(seed, "verify/structure"));
  const KernelCfg inner;

  {
    const auto t0 = Clock::now();
    int asym = 0;
    for (int i = 0; i < 100; ++i) {
      const auto g = icc_matrix(random_features(rng), inner).values;
      const auto c = g.dim(0);
      const auto v = g.data();
      for (std::int64_t p = 0; p < c; ++p)
        for (std::int64_t q = 0; q < p; ++q)
          if (std::memcmp(&v[p * c + q], &v[q * c + p], sizeof(double)) != 0) ++asym;
    }
    out.push_back({"structure", "icc_symmetry_bitwise", asym == 0,
                   "matrices=100 asymmetric_entries=" + std::to_string(asym), seconds_since(t0)});
  }
  {
    const auto t0 = Clock::now();
    double worst = INFINITY;
    for (int i = 0; i < 20; ++i) {
      const auto g = icc_matrix(random_features(rng), inner).values;
      const auto c = g.dim(0);
      const auto v = g.data();
      const double gf = frobenius(v);
      for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(static_cast<std::size_t>(c));
        for (auto& e : x) e = rng.normal();
        const double nx = frobenius(x);
        if (nx == 0.0) continue;
        for (auto& e : x) e /= nx;
        double q = 0.0;
        for (std::int64_t a = 0; a < c; ++a)
          for (std::int64_t b = 0; b < c; ++b) q += x[a] * v[a * c + b] * x[b];
        // Unit x: the bound -1e-8 |x| |G|_F equals -1e-8 |x|^2 |G|_F.
        worst = std::min(worst, gf > 0.0 ? q / gf : 0.0);
      }
    }
    out.push_back({"structure", "icc_psd", worst >= -1e-8,
                   "matrices=20 vectors=100 min(x'Gx/|x||G|_F)=" + sci(worst) + " bound=-1e-8", seconds_since(t0)});
  }
  {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
      const auto f = random_features(rng);
      const auto c = f.dim(0), hw = f.dim(1) * f.dim(2);
      std::vector<std::int64_t> perm(static_cast<std::size_t>(c));
      for (std::int64_t k = 0; k < c; ++k) perm[k] = k;
      rng.shuffle(perm);
      std::vector<double> pf(static_cast<std::size_t>(c * hw));
      for (std::int64_t k = 0; k < c; ++k)
        std::copy_n(f.data().begin() + perm[k] * hw, hw, pf.begin() + k * hw);
      const auto g_t = icc_matrix(f, inner).values;
      const auto gp_t = icc_matrix(TD::from_data(f.shape(), pf), inner).values;
      const auto g = g_t.data();
      const auto gp = gp_t.data();
      for (std::int64_t a = 0; a < c; ++a)
        for (std::int64_t b = 0; b < c; ++b)
          worst = std::max(worst, std::abs(gp[a * c + b] - g[perm[a] * c + perm[b]]));
    }
    out.push_back({"structure", "channel_permutation_equivariance", worst <= 1e-12,
                   "cases=50 max_abs_diff=" + sci(worst) + " tol=1e-12", seconds_since(t0)});
  }
  {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
      const auto f = random_features(rng);
      const auto c = f.dim(0), hw = f.dim(1) * f.dim(2);
      std::vector<std::int64_t> perm(static_cast<std::size_t>(hw));
      for (std::int64_t k = 0; k < hw; ++k) perm[k] = k;
      rng.shuffle(perm);
      std::vector<double> pf(static_cast<std::size_t>(c * hw));
      for (std::int64_t k = 0; k < c; ++k)
        for (std::int64_t j = 0; j < hw; ++j) pf[k * hw + j] = f.data()[k * hw + perm[j]];
      // Same permutation, reshaped to a different spatial layout.
      const auto g = icc_matrix(f, inner).values;
      const auto gp = icc_matrix(TD::from_data({c, hw, 1}, pf), inner).values;
      worst = std::max(worst, max_abs_diff(g.data(), gp.data()));
    }
    out.push_back({"structure", "spatial_permutation_invariance", worst <= 1e-12,
                   "cases=50 max_abs_diff=" + sci(worst) + " tol=1e-12", seconds_since(t0)});
  }
  {
    const auto t0 = Clock::now();
    int mismatches = 0;
    for (int i = 0; i < 50; ++i) {
      const auto c = rng.integer(1, 8), h = rng.integer(1, 8), w = rng.integer(1, 8);
      const auto fs = random_tensor({c, h, w}, rng), ft = random_tensor({c, h, w}, rng);
      for (auto kind : {CcLossKind::l2, CcLossKind::smooth_l1}) {
        const double grid = loss_cc_grid(fs, ft, GridSpec{1, 1}, inner, kind).item();
        const double whole = loss_cc(icc_matrix(fs, inner), icc_matrix(ft, inner), kind).item();
        if (std::memcmp(&grid, &whole, sizeof grid) != 0) ++mismatches;
      }
    }
    out.push_back({"structure", "grid_1x1_equals_loss_cc", mismatches == 0,
                   "cases=100 inexact=" + std::to_string(mismatches), seconds_since(t0)});
  }
  {
    const auto t0 = Clock::now();
    int failures = 0;
    const std::pair<Shape, GridSpec> shapes[] = {{{4, 8, 6}, {4, 3}}, {{2, 4, 4}, {2, 2}}, {{3, 6, 6}, {3, 1}},
                                                 {{1, 2, 2}, {2, 2}}, {{5, 9, 4}, {1, 4}}};
    for (const auto& [shape, grid] : shapes) {
      const auto f = random_tensor(shape, rng);
      const auto patches = grid_partition(f, grid);
      const auto c = shape[0], h = shape[1], w = shape[2], ph = h / grid.rows, pw = w / grid.cols;
      std::vector<double> rebuilt(static_cast<std::size_t>(c * h * w), NAN);
      for (int i = 0; i < grid.rows; ++i)
        for (int j = 0; j < grid.cols; ++j) {
          const auto p = patches[i][j].data();
          for (std::int64_t k = 0; k < c; ++k)
            for (std::int64_t y = 0; y < ph; ++y)
              for (std::int64_t x = 0; x < pw; ++x)
                rebuilt[(k * h + i * ph + y) * w + j * pw + x] = p[(k * ph + y) * pw + x];
        }
      if (!bitwise_equal(rebuilt, f.data())) ++failures;
    }
    out.push_back({"structure", "grid_tiling_roundtrip_bitwise", failures == 0,
                   "shapes=5 failures=" + std::to_string(failures), seconds_since(t0)});
  }
  {
    const auto t0 = Clock::now();
    double worst_g = 0.0, worst_l = 0.0;
    for (int i = 0; i < 50; ++i) {
      const auto fs = random_features(rng);
      const auto ft = random_tensor(fs.shape(), rng);
      const double s = rng.uniform(0.25, 4.0);
      const auto sfs = scale(fs, s), sft = scale(ft, s);
      const auto g = icc_matrix(fs, inner).values;
      const auto gs = icc_matrix(sfs, inner).values;
      std::vector<double> expected_g(g.data().begin(), g.data().end()), diff(expected_g.size());
      for (std::size_t k = 0; k < expected_g.size(); ++k) {
        expected_g[k] *= s * s;
        diff[k] = gs.data()[k] - expected_g[k];
      }
      const double norm = frobenius(expected_g);
      if (norm > 0.0) worst_g = std::max(worst_g, frobenius(diff) / norm);
      const double l = loss_cc(icc_matrix(fs, inner), icc_matrix(ft, inner)).item();
      const double ls = loss_cc(icc_matrix(sfs, inner), icc_matrix(sft, inner)).item();
      const double expected = s * s * s * s * l;
      if (expected != 0.0) worst_l = std::max(worst_l, std::abs(ls - expected) / std::abs(expected));
    }
    out.push_back({"structure", "scaling_law", worst_g <= 1e-10 && worst_l <= 1e-10,
                   "cases=50 icc_rel=" + sci(worst_g) + " loss_rel=" + sci(worst_l) + " tol=1e-10",
                   seconds_since(t0)});
  }
  return out;
}

std::vector<CheckResult> verify_all(std::uint64_t seed) {
  std::vector<CheckResult> out;
  for (auto part : {verify_icc_oracle(seed), verify_kl_oracle(seed), verify_gradients(seed), verify_structure(seed)})
    out.insert(out.end(), part.begin(), part.end());
  return out;
}

std::string format_check(const CheckResult& check) {
  char secs[32];
  std::snprintf(secs, sizeof secs, "%.2fs", check.seconds);
  return std::string(check.passed ? "PASS " : "FAIL ") + check.group + "/" + check.name + " " + check.detail + " (" +
         secs + ")";
}

}  // namespace ickd
