#include <doctest.h>

#include "helpers.hpp"
#include "ickd/distill.hpp"
#include "ickd/errors.hpp"
#include "ickd/nn.hpp"
#include "ickd/oracle.hpp"

using namespace ickd;
using test::random_tensor;

namespace {

ModelSpec cls_spec(std::vector<int> widths) {
  ModelSpec s;
  s.stage_widths = std::move(widths);
  return s;
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("identity transfer layer leaves features unchanged") {
  Rng rng(1);
  auto f = random_tensor<float>({2, 5, 3, 3}, rng);
  auto layer = TransferLayer<float>::identity(5);
  auto y = layer.apply(f, Mode::eval);
  CHECK(test::max_abs_diff(y.to_vector(), std::vector<double>(f.data().begin(), f.data().end())) <= 1e-6);
}

TEST_CASE("transfer layer maps channels") {
  Rng rng(2);
  TransferLayer<float> layer(8, 16, rng);
  auto y = layer.apply(random_tensor<float>({2, 8, 4, 4}, rng), Mode::train);
  CHECK(y.shape() == Shape{2, 16, 4, 4});
  CHECK_THROWS_AS(layer.apply(random_tensor<float>({2, 7, 4, 4}, rng), Mode::train), ShapeError);
}

TEST_CASE("L_CC through the transfer layer passes the gradient check") {
  for (const auto& c : oracle::composite_grad_cases(4)) {
    if (c.name != "loss_cc") continue;
    CHECK(oracle::grad_check(c.loss, c.params).max_rel() <= 1e-4);
  }
}

TEST_CASE("model taps and heads") {
  auto spec = cls_spec({8, 16, 32});
  auto model = Model<float>::build(spec, 3);
  Rng rng(3);
  auto x = random_tensor<float>({2, 3, 32, 32}, rng);
  auto out = model.forward_with_taps(x, Mode::eval);
  CHECK(out.logits.shape() == Shape{2, 10});
  CHECK(out.taps.count() == 3);
  CHECK(out.taps.at(1).shape() == Shape{2, 8, 32, 32});
  CHECK(out.taps.at(3).shape() == Shape{2, 32, 8, 8});
  CHECK(spec.tap_extent(3) == std::array<int, 2>{8, 8});
  CHECK(model.forward(x, Mode::eval).to_vector() == out.logits.to_vector());

  ModelSpec dense = cls_spec({8, 16});
  dense.task = Task::dense;
  dense.num_classes = 4;
  auto dm = Model<float>::build(dense, 3);
  CHECK(dm.forward(x, Mode::eval).shape() == Shape{2, 4, 32, 32});
}

TEST_CASE("same seed builds identical parameters") {
  auto a = Model<float>::build(cls_spec({4, 8}), 9);
  auto b = Model<float>::build(cls_spec({4, 8}), 9);
  auto c = Model<float>::build(cls_spec({4, 8}), 10);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].tensor.to_vector() == pb[i].tensor.to_vector());
    differs = differs || pa[i].tensor.to_vector() != pc[i].tensor.to_vector();
  }
  CHECK(differs);
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(cls_spec({}).validate(), ConfigError);
  CHECK_THROWS_AS(cls_spec({8, 0}).validate(), ConfigError);
  CHECK_NOTHROW(cls_spec({8, 8, 8, 8, 8, 8}).validate());
  CHECK_THROWS_AS(cls_spec({8, 8, 8, 8, 8, 8, 8}).validate(), ConfigError);
  auto odd = cls_spec({8, 16});
  odd.input_shape = {3, 31, 31};
  CHECK_THROWS_AS(odd.validate(), ConfigError);
}

TEST_CASE("train-mode forward updates running statistics unless frozen") {
  auto model = Model<float>::build(cls_spec({4}), 1);
  Rng rng(5);
  auto x = random_tensor<float>({4, 3, 32, 32}, rng, 0.0, 2.0);
  auto running = [&model] {
    std::vector<std::vector<float>> out;
    for (const auto& s : model.state())
      if (s.name.find("running_") != std::string::npos) out.push_back(s.tensor.to_vector());
    return out;
  };
  const auto initial = running();
  REQUIRE_FALSE(initial.empty());
  model.set_update_running_stats(false);
  model.forward(x, Mode::train);
  CHECK(running() == initial);
  model.set_update_running_stats(true);
  model.forward(x, Mode::train);
  CHECK(running() != initial);
}

}
