#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "ickd/errors.hpp"
#include "ickd/ops.hpp"
#include "ickd/oracle.hpp"
#include "ickd/verify.hpp"

using namespace ickd;
using test::random_tensor;

namespace {

// x^3 with a deliberately wrong derivative (2x^2), for testing the checker.
Tensor<double> broken_cube(const Tensor<double>& x) {
  std::vector<double> out;
  for (double v : x.data()) out.push_back(v * v * v);
  auto node = detail::make_result<double>("broken_cube", x.shape(), std::move(out), {x.node()});
  detail::attach_backward<double>(node, [](detail::Node<double>& self) {
    auto& src = *self.inputs[0];
    if (auto* g = detail::grad_buffer(src))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * 2.0 * src.value[i] * src.value[i];
  });
  return detail::finish(node);
}

}  // namespace

TEST_SUITE("oracle") {

TEST_CASE("naive ICC examples") {
  CHECK(oracle::icc_naive(Tensor<double>::from_data({2, 1, 2}, {1, 2, 3, 4})).values.to_vector() ==
        std::vector<double>{5, 11, 11, 25});
  CHECK(oracle::icc_naive(Tensor<double>::from_data({3, 1, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})).values.to_vector() ==
        std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
}

TEST_CASE("naive KL examples") {
  Rng rng(1);
  auto l = random_tensor({2, 4}, rng);
  CHECK(std::abs(oracle::kl_naive(l, l, 2.0)) <= 1e-15);
  const double e = std::exp(1.0);
  CHECK(std::abs(oracle::kl_naive(Tensor<double>::from_data({1, 2}, {1, 0}),
                                  Tensor<double>::from_data({1, 2}, {0, 1}), 1.0) -
                 (e - 1.0) / (e + 1.0)) <= 1e-15);
}

TEST_CASE("gradient checker accepts a correct backward and flags a wrong one") {
  Rng rng(2);
  auto p = random_tensor({4}, rng, 0.5, 1.5);
  p.set_requires_grad(true);
  const std::vector<NamedTensor<double>> params{{"p", p}};
  CHECK(oracle::grad_check([p] { return sum(mul(mul(p, p), p)); }, params).max_rel() <= 1e-8);
  const auto bad = oracle::grad_check([p] { return sum(broken_cube(p)); }, params);
  CHECK(bad.max_rel() > 0.3);
  CHECK(bad.params.at(0).name == "p");
}

TEST_CASE("gradient checker rejects nondeterministic losses") {
  auto p = Tensor<double>::from_data({1}, {1.0}).set_requires_grad(true);
  const std::vector<NamedTensor<double>> params{{"p", p}};
  int calls = 0;
  CHECK_THROWS_AS(oracle::grad_check(
                      [p, &calls] { return scale(sum(p), 1.0 + 1e-3 * static_cast<double>(++calls)); }, params),
                  OracleError);
}

TEST_CASE("verification groups pass") {
  for (const auto& group : {verify_icc_oracle(7, 50), verify_kl_oracle(7, 50), verify_structure(7)})
    for (const auto& check : group) CHECK_MESSAGE(check.passed, format_check(check));
}

}
