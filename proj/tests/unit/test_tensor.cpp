#include <doctest.h>

#include <cmath>
#include <limits>

#include "helpers.hpp"
#include "ickd/errors.hpp"
#include "ickd/ops.hpp"
#include "ickd/oracle.hpp"

using namespace ickd;
using test::random_tensor;

TEST_SUITE("tensor") {

TEST_CASE("flatten_spatial merges contiguous axes") {
  auto a = flatten_spatial(Tensor<double>::from_data({2, 1, 2}, {1, 2, 3, 4}));
  CHECK(a.shape() == Shape{2, 2});
  CHECK(a.to_vector() == std::vector<double>{1, 2, 3, 4});

  auto b = flatten_spatial(Tensor<double>::from_data({1, 2, 2}, {5, 6, 7, 8}));
  CHECK(b.shape() == Shape{1, 4});

  Rng rng(3);
  auto f = random_tensor({3, 4, 4}, rng);
  auto g = flatten_spatial(f);
  REQUIRE(g.shape() == Shape{3, 16});
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 4; ++j)
      for (std::int64_t k = 0; k < 4; ++k) CHECK(g.at({i, j * 4 + k}) == f.at({i, j, k}));
}

TEST_CASE("flatten_spatial rejects other ranks") {
  CHECK_THROWS_AS(flatten_spatial(Tensor<double>::zeros({2, 3})), ShapeError);
}

TEST_CASE("matmul") {
  auto eye = Tensor<double>::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(5);
  auto m = random_tensor({3, 4}, rng);
  CHECK(matmul(eye, m).to_vector() == m.to_vector());

  auto a = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
  auto ones = Tensor<double>::from_data({2, 1}, {1, 1});
  CHECK(matmul(a, ones).to_vector() == std::vector<double>{3, 7});
  CHECK(oracle::matmul_naive(a, ones) == std::vector<double>{3, 7});

  auto p = random_tensor({5, 7}, rng);
  auto q = random_tensor({7, 2}, rng);
  CHECK(test::max_abs_diff(matmul(p, q).to_vector(), oracle::matmul_naive(p, q)) <= 1e-12);

  CHECK_THROWS_AS(matmul(p, p), ShapeError);
}

TEST_CASE("backward of simple functionals") {
  Rng rng(7);
  auto p = random_tensor({2, 3, 2}, rng);
  p.set_requires_grad(true);
  auto tape = backward(sum(p));
  for (double g : tape.grad(p).data()) CHECK(g == 1.0);

  auto tape2 = backward(scale(sq_frobenius(p), 0.5));
  CHECK(tape2.grad(p).to_vector() == p.to_vector());
}

TEST_CASE("tape holds one gradient per reachable leaf") {
  auto a = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad(true);
  auto b = Tensor<double>::from_data({2}, {3, 4}).set_requires_grad(true);
  auto unused = Tensor<double>::from_data({2}, {0, 0}).set_requires_grad(true);
  auto tape = backward(sum(mul(a, b)));
  CHECK(tape.size() == 2);
  CHECK(tape.grad(a).to_vector() == std::vector<double>{3, 4});
  CHECK(tape.grad(b).to_vector() == std::vector<double>{1, 2});
  CHECK_FALSE(tape.contains(unused));
}

TEST_CASE("a node reused twice accumulates both contributions") {
  auto a = Tensor<double>::from_data({3}, {1, -2, 3}).set_requires_grad(true);
  auto tape = backward(sum(add(a, a)));
  for (double g : tape.grad(a).data()) CHECK(g == 2.0);
}

TEST_CASE("backward requires a scalar") {
  auto a = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad(true);
  CHECK_THROWS_AS(backward(scale(a, 2.0)), ShapeError);
}

TEST_CASE("no-grad guard records no graph") {
  auto a = Tensor<double>::from_data({2}, {1, 2}).set_requires_grad(true);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(sum(a).requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(sum(a).requires_grad());
}

TEST_CASE("eager finite check names the op") {
  set_finite_check(FiniteCheck::eager);
  auto a = Tensor<double>::from_data({1}, {-1.0});
  try {
    (void)log(a);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("log") != std::string::npos);
  }
  set_finite_check(FiniteCheck::lazy);
  CHECK(std::isnan(log(a).item()));
}

TEST_CASE("conv2d") {
  Rng rng(11);
  SUBCASE("identity 1x1 mixing") {
    auto x = random_tensor({2, 3, 4, 5}, rng);
    std::vector<double> w(9, 0.0);
    for (int i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
    auto y = conv2d(x, Tensor<double>::from_data({3, 3, 1, 1}, w), 1, 0);
    CHECK(y.to_vector() == x.to_vector());
  }
  SUBCASE("all-ones 3x3 on a centred one-hot") {
    auto x = Tensor<double>::from_data({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
    auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d(x, w, 1, 1);
    CHECK(y.to_vector() == std::vector<double>(9, 1.0));
    CHECK(oracle::conv2d_naive(x, w, 1, 1) == std::vector<double>(9, 1.0));
  }
  SUBCASE("zero input") {
    auto w = random_tensor({4, 2, 3, 3}, rng);
    auto y = conv2d(Tensor<double>::zeros({1, 2, 5, 5}), w, 2, 1);
    CHECK(y.shape() == Shape{1, 4, 3, 3});
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("matches the sliding-window oracle") {
    auto x = random_tensor({2, 3, 7, 7}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    CHECK(test::max_abs_diff(conv2d(x, w, 2, 1).to_vector(), oracle::conv2d_naive(x, w, 2, 1)) <= 1e-12);
    CHECK(test::max_abs_diff(conv2d(x, w, 1, 0).to_vector(), oracle::conv2d_naive(x, w, 1, 0)) <= 1e-12);
  }
  SUBCASE("non-integral output size") {
    CHECK_THROWS_AS(conv2d(Tensor<double>::zeros({1, 1, 6, 6}), Tensor<double>::zeros({1, 1, 3, 3}), 2, 1),
                    ShapeError);
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(conv2d(Tensor<double>::zeros({1, 2, 4, 4}), Tensor<double>::zeros({1, 3, 3, 3}), 1, 1),
                    ShapeError);
  }
}

TEST_CASE("batch norm") {
  Rng rng(13);
  auto x = random_tensor({4, 3, 5, 5}, rng, -2.0, 3.0);
  auto ones = Tensor<double>::full({3}, 1.0);
  auto zeros = Tensor<double>::zeros({3});

  SUBCASE("train mode standardizes each channel") {
    std::vector<double> mu, var;
    auto y = batch_norm_train(x, ones, zeros, 1e-5, &mu, &var);
    const auto v = y.data();
    for (int c = 0; c < 3; ++c) {
      double s = 0.0, s2 = 0.0;
      int n = 0;
      for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 25; ++k) {
          const double e = v[(i * 3 + c) * 25 + k];
          s += e;
          s2 += e * e;
          ++n;
        }
      CHECK(std::abs(s / n) <= 1e-5);
      CHECK(std::abs(s2 / n - 1.0) <= 1e-4);
    }
  }
  SUBCASE("constant channel maps to beta") {
    auto c = Tensor<double>::full({2, 1, 3, 3}, 4.0);
    auto beta = Tensor<double>::full({1}, 0.25);
    auto y = batch_norm_train<double>(c, Tensor<double>::full({1}, 1.0), beta, 1e-5, nullptr, nullptr);
    for (double v : y.data()) CHECK(v == 0.25);
  }
  SUBCASE("eval mode is affine with unit running stats") {
    const std::vector<double> rm(3, 0.0), rv(3, 1.0);
    auto y = batch_norm_eval(x, Tensor<double>::full({3}, 2.0), ones, std::span<const double>(rm),
                             std::span<const double>(rv), 1e-5);
    const auto xv = x.data();
    const auto yv = y.data();
    for (std::size_t i = 0; i < xv.size(); ++i) CHECK(std::abs(yv[i] - (2.0 * xv[i] + 1.0)) <= 1e-4);
  }
  SUBCASE("single value per channel is degenerate") {
    CHECK_THROWS_AS(batch_norm_train<double>(Tensor<double>::zeros({1, 3, 1, 1}), ones, zeros, 1e-5, nullptr,
                                             nullptr),
                    DegenerateBatchError);
  }
}

TEST_CASE("pooling and upsampling shapes") {
  auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 5, 3, 2});
  CHECK(max_pool2d(x, 2, 2).item() == 5.0);
  CHECK(avg_pool2d(x, 2, 2).item() == 2.75);
  CHECK(global_avg_pool(x).shape() == Shape{1, 1});
  auto u = upsample_nearest(x, 2);
  CHECK(u.shape() == Shape{1, 1, 4, 4});
  CHECK(u.at({0, 0, 1, 1}) == 1.0);
  CHECK(u.at({0, 0, 3, 2}) == 2.0);
}

TEST_CASE("cross entropy of uniform logits is log K") {
  const std::int32_t t[] = {0, 3};
  auto ce = cross_entropy(Tensor<double>::zeros({2, 4}), std::span<const std::int32_t>(t));
  CHECK(ce.item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  const std::int32_t bad[] = {0, 4};
  CHECK_THROWS(cross_entropy(Tensor<double>::zeros({2, 4}), std::span<const std::int32_t>(bad)));
}

TEST_CASE("every registered primitive has a gradient case") {
  const auto cases = oracle::primitive_grad_cases(1);
  for (auto name : differentiable_ops()) {
    bool found = false;
    for (const auto& c : cases) found = found || c.name == name;
    CHECK_MESSAGE(found, name);
  }
}

TEST_CASE("half squared norm passes the gradient check tightly") {
  Rng rng(17);
  auto p = random_tensor({3, 4}, rng);
  p.set_requires_grad(true);
  const std::vector<NamedTensor<double>> params{{"P", p}};
  auto report = oracle::grad_check([p] { return scale(sq_frobenius(p), 0.5); }, params);
  CHECK(report.max_rel() <= 1e-9);
}

TEST_CASE("32-bit and 64-bit forward passes agree") {
  Rng rng(19);
  auto xd = random_tensor<double>({2, 3, 6, 6}, rng);
  auto wd = random_tensor<double>({4, 3, 3, 3}, rng);
  std::vector<float> xf(xd.data().begin(), xd.data().end()), wf(wd.data().begin(), wd.data().end());
  auto yd = conv2d(xd, wd, 1, 1).to_vector();
  auto yf = conv2d(Tensor<float>::from_data({2, 3, 6, 6}, xf), Tensor<float>::from_data({4, 3, 3, 3}, wf), 1, 1);
  CHECK(test::max_abs_diff(yf.to_vector(), yd) <= 1e-5);
}

}
