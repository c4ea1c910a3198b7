#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "ickd/distill.hpp"
#include "ickd/errors.hpp"
#include "ickd/ops.hpp"
#include "ickd/oracle.hpp"

using namespace ickd;
using test::random_tensor;

namespace {

Tensor<double> t2(std::vector<double> v, std::int64_t rows, std::int64_t cols) {
  return Tensor<double>::from_data({rows, cols}, std::move(v));
}

IccMatrix<double> icc_of(std::vector<double> v, std::int64_t c) {
  return {Tensor<double>::from_data({c, c}, std::move(v))};
}

// Independent recomputation of L_CC from two ICC matrices.
double loss_cc_direct(const IccMatrix<double>& s, const IccMatrix<double>& t) {
  const auto a = s.values.data();
  const auto b = t.values.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  const double c = static_cast<double>(s.channel_count());
  return acc / (c * c);
}

}  // namespace

TEST_SUITE("distill") {

TEST_CASE("kernel values") {
  const double u[] = {1, 0}, v[] = {0, 1}, w[] = {1, 2};
  KernelCfg inner;
  CHECK(icc_kernel<double>(u, v, inner) == 0.0);
  CHECK(icc_kernel<double>(w, w, inner) == 5.0);
  KernelCfg gauss{KernelKind::gaussian, 0.3};
  CHECK(icc_kernel<double>(w, w, gauss) == 1.0);
  KernelCfg poly{KernelKind::polynomial, 1.0, 1.0, 2};
  CHECK(icc_kernel<double>(w, w, poly) == 36.0);
}

TEST_CASE("icc matrix examples") {
  auto ortho = icc_matrix(Tensor<double>::from_data({2, 1, 2}, {1, 0, 0, 1}));
  CHECK(ortho.values.to_vector() == std::vector<double>{1, 0, 0, 1});
  const auto f = Tensor<double>::from_data({2, 1, 2}, {1, 2, 3, 4});
  CHECK(icc_matrix(f).values.to_vector() == std::vector<double>{5, 11, 11, 25});
  CHECK(oracle::icc_naive(f).values.to_vector() == std::vector<double>{5, 11, 11, 25});

  Rng rng(2);
  CHECK(icc_matrix(random_tensor({8, 4, 4}, rng)).values.shape() == Shape{8, 8});
  CHECK(icc_matrix(random_tensor({8, 16, 1}, rng)).values.shape() == Shape{8, 8});
}

TEST_CASE("icc matrix rejects non-rank-3 input") {
  CHECK_THROWS_AS(icc_matrix(Tensor<double>::zeros({1, 2, 2, 2})), ShapeError);
}

TEST_CASE("loss_cc examples") {
  auto g = icc_of({1, 2, 3, 4}, 2);
  CHECK(loss_cc(g, g).item() == 0.0);
  auto h = icc_of({1, 2, 3, 6}, 2);
  CHECK(loss_cc_direct(h, g) == 1.0);
  CHECK(loss_cc(h, g).item() == 1.0);

  Rng rng(3);
  auto a = random_tensor({3, 3}, rng, -0.5, 0.5);
  auto b = random_tensor({3, 3}, rng, -0.5, 0.5);
  const double l2 = loss_cc(IccMatrix<double>{a}, IccMatrix<double>{b}).item();
  const double sl1 = loss_cc(IccMatrix<double>{a}, IccMatrix<double>{b}, CcLossKind::smooth_l1).item();
  CHECK(sl1 == doctest::Approx(0.5 * l2).epsilon(1e-14));

  CHECK_THROWS_AS(loss_cc(g, icc_of({1, 0, 0, 0, 1, 0, 0, 0, 1}, 3)), ShapeError);
}

TEST_CASE("loss_kd examples") {
  Rng rng(4);
  auto l = random_tensor({3, 5}, rng, -2, 2);
  for (double tau : {1.0, 2.0, 4.0}) CHECK(std::abs(loss_kd(l, l, tau).item()) <= 1e-15);

  const auto t = t2({1, 0}, 1, 2), s = t2({0, 1}, 1, 2);
  const double closed = (std::exp(1.0) - 1.0) / (std::exp(1.0) + 1.0);
  CHECK(std::abs(oracle::kl_naive(t, s, 1.0) - closed) <= 1e-15);
  CHECK(std::abs(loss_kd(t, s, 1.0).item() - 0.46211715726000974) <= 1e-12);

  auto a = random_tensor({4, 6}, rng, -3, 3);
  auto b = random_tensor({4, 6}, rng, -3, 3);
  double prev = loss_kd(a, b, 1.0).item();
  for (double tau : {4.0, 16.0, 64.0}) {
    const double cur = loss_kd(a, b, tau).item();
    CHECK(cur < prev);
    prev = cur;
  }
  CHECK(loss_kd(a, b, 4.0, true).item() == doctest::Approx(16.0 * loss_kd(a, b, 4.0).item()).epsilon(1e-14));
  CHECK_THROWS_AS(loss_kd(a, b, 0.0), ConfigError);
  CHECK_THROWS_AS(loss_kd(a, random_tensor({4, 5}, rng), 4.0), ShapeError);
}

TEST_CASE("grid partition") {
  auto f = Tensor<double>::from_data({1, 2, 2}, {1, 2, 3, 4});
  auto p = grid_partition(f, GridSpec{2, 2});
  REQUIRE(p.size() == 2);
  CHECK(p[0][0].to_vector() == std::vector<double>{1});
  CHECK(p[0][1].to_vector() == std::vector<double>{2});
  CHECK(p[1][0].to_vector() == std::vector<double>{3});
  CHECK(p[1][1].to_vector() == std::vector<double>{4});
  CHECK(grid_partition(f, GridSpec{1, 1})[0][0].to_vector() == f.to_vector());

  Rng rng(5);
  auto r = random_tensor({4, 8, 6}, rng);
  auto tiles = grid_partition(r, GridSpec{4, 3});
  std::vector<double> back(r.to_vector().size());
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j)
      for (int c = 0; c < 4; ++c)
        for (int y = 0; y < 2; ++y)
          for (int x = 0; x < 2; ++x) back[(c * 8 + i * 2 + y) * 6 + j * 2 + x] = tiles[i][j].at({c, y, x});
  CHECK(back == r.to_vector());

  CHECK_THROWS_AS(grid_partition(r, GridSpec{3, 3}), GridIndivisibleError);
}

TEST_CASE("grid loss") {
  Rng rng(6);
  auto fs = random_tensor({4, 4, 4}, rng);
  auto ft = random_tensor({4, 4, 4}, rng);
  CHECK(loss_cc_grid(fs, ft, GridSpec{1, 1}).item() == loss_cc(icc_matrix(fs), icc_matrix(ft)).item());
  CHECK(loss_cc_grid(fs, fs, GridSpec{2, 2}).item() == 0.0);

  double acc = 0.0;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      auto ps = crop(fs, i * 2, i * 2 + 2, j * 2, j * 2 + 2);
      auto pt = crop(ft, i * 2, i * 2 + 2, j * 2, j * 2 + 2);
      acc += loss_cc_direct(oracle::icc_naive(ps), oracle::icc_naive(pt));
    }
  CHECK(std::abs(loss_cc_grid(fs, ft, GridSpec{2, 2}).item() - acc / 4.0) <= 1e-12);
}

TEST_CASE("ICKD-C composition") {
  Rng rng(7);
  auto lt = random_tensor({2, 5}, rng, -2, 2);
  auto ls = random_tensor({2, 5}, rng, -2, 2);
  FeatureTaps<double> tt, ts;
  tt.stages[1] = random_tensor({2, 4, 2, 2}, rng);
  ts.stages[1] = random_tensor({2, 4, 2, 2}, rng);
  const std::int32_t y[] = {1, 3};
  const std::span<const std::int32_t> targets(y);
  TransferLayers<double> transfer;
  transfer.emplace(1, TransferLayer<double>::identity(4));
  const double ce = cross_entropy(ls, targets).item();

  DistillConfig off;
  off.beta1 = off.beta2 = 0.0;
  CHECK(loss_ickd_c(lt, ls, tt, ts, transfer, off, targets, Mode::eval).total.item() == ce);

  DistillConfig same;
  CHECK(loss_ickd_c(ls, ls, ts, ts, transfer, same, targets, Mode::eval).total.item() ==
        doctest::Approx(ce).epsilon(1e-12));

  DistillConfig on;
  const auto obj = loss_ickd_c(lt, ls, tt, ts, transfer, on, targets, Mode::eval);
  double cc = 0.0;
  for (int n = 0; n < 2; ++n) {
    auto s = transfer.at(1).apply(ts.stages[1], Mode::eval);
    cc += loss_cc_direct(oracle::icc_naive(select(s, n)), oracle::icc_naive(select(tt.stages[1], n)));
  }
  cc /= 2.0;
  const double expected = ce + oracle::kl_naive(lt, ls, 4.0) + 2.5 * cc;
  CHECK(std::abs(obj.total.item() - expected) <= 1e-10 * std::max(1.0, expected));
  CHECK(obj.components.task == doctest::Approx(ce));
  CHECK(obj.components.cc == doctest::Approx(cc));
}

TEST_CASE("ICKD-S composition") {
  Rng rng(8);
  auto logits = random_tensor({2, 3, 4, 4}, rng);
  std::vector<std::int32_t> y(32);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<std::int32_t>(i % 3);
  FeatureTaps<double> tt, ts;
  tt.stages[2] = random_tensor({2, 4, 4, 4}, rng);
  ts.stages[2] = random_tensor({2, 4, 4, 4}, rng);
  TransferLayers<double> transfer;
  transfer.emplace(2, TransferLayer<double>::identity(4));
  const double seg = pixel_cross_entropy(logits, std::span<const std::int32_t>(y)).item();

  DistillConfig cfg;
  cfg.stages = {2};
  cfg.alpha = 0.0;
  CHECK(loss_ickd_s(logits, y, tt, ts, transfer, cfg, Mode::eval).total.item() == seg);

  cfg.alpha = 20.0;
  double cc = 0.0;
  for (int n = 0; n < 2; ++n)
    cc += loss_cc(icc_matrix(select(ts.stages[2], n)), icc_matrix(select(tt.stages[2], n))).item();
  cc /= 2.0;
  const double a20 = loss_ickd_s(logits, y, tt, ts, transfer, cfg, Mode::eval).total.item();
  CHECK(a20 == doctest::Approx(seg + 20.0 * cc).epsilon(1e-12));

  cfg.alpha = 40.0;
  const double a40 = loss_ickd_s(logits, y, tt, ts, transfer, cfg, Mode::eval).total.item();
  CHECK((a40 - seg) == doctest::Approx(2.0 * (a20 - seg)).epsilon(1e-12));
}

TEST_CASE("stage selection and validation") {
  DistillConfig cfg;
  CHECK(cfg.resolved_stages(4) == std::vector<int>{4});
  cfg.stages = {3, 4};
  CHECK(cfg.resolved_stages(4) == std::vector<int>{3, 4});
  cfg.stages = {5};
  CHECK_THROWS_AS(cfg.resolved_stages(4), ConfigError);
  DistillConfig neg;
  neg.beta1 = -1.0;
  CHECK_THROWS_AS(neg.validate(), ConfigError);
  CHECK(parse_kernel_kind("gaussian") == KernelKind::gaussian);
  CHECK_THROWS_AS(parse_kernel_kind("rbf"), ConfigError);
}

}
