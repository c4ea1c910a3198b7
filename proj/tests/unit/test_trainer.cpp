#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ickd/errors.hpp"
#include "ickd/trainer.hpp"

using namespace ickd;

namespace {

TrainConfig small_config(std::vector<int> widths, int classes, int epochs) {
  TrainConfig cfg;
  cfg.model.stage_widths = std::move(widths);
  cfg.model.num_classes = classes;
  cfg.epochs = epochs;
  cfg.schedule = {0.05, 0.1, {}};
  cfg.seed = 5;
  return cfg;
}

std::pair<Dataset, Dataset> cls_data(int classes, int per_class, double noise) {
  SynthClsParams p{.seed = 11, .classes = classes, .per_class = per_class, .noise = noise};
  auto train = synth_cls(p, Split::train);
  p.per_class = std::max(1, per_class / 5);
  auto test = synth_cls(p, Split::test);
  const auto stats = channel_statistics(train);
  standardize(train, stats);
  standardize(test, stats);
  return {std::move(train), std::move(test)};
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("learning-rate schedule") {
  const auto cifar = preset("cifar");
  CHECK(cifar.epochs == 240);
  CHECK(cifar.batch_size == 64);
  CHECK(lr_at(cifar.schedule, 0) == 0.05);
  CHECK(lr_at(cifar.schedule, 149) == 0.05);
  CHECK(lr_at(cifar.schedule, 150) == doctest::Approx(5e-3).epsilon(1e-12));
  CHECK(lr_at(cifar.schedule, 239) == doctest::Approx(5e-5).epsilon(1e-12));
  const auto desk = preset("desk");
  CHECK(desk.epochs == 40);
  CHECK(desk.schedule.milestones == std::vector<int>{20, 30});
  CHECK_THROWS_AS(preset("imagenet"), ConfigError);
  CHECK_THROWS_AS((LrSchedule{0.1, 0.1, {5, 3}}.validate()), ConfigError);
}

TEST_CASE("sgd update rule") {
  std::vector<double> p{1.0}, g{1.0}, v{0.0};
  sgd_update<double>(p, g, v, 0.1, 0.9, true, 0.0);
  CHECK(v[0] == 1.0);
  CHECK(p[0] == doctest::Approx(0.81).epsilon(1e-15));

  std::vector<double> q{2.0, -1.0}, gq{0.5, 1.0}, vq{0.0, 0.0};
  sgd_update<double>(q, gq, vq, 0.2, 0.0, false, 0.0);
  CHECK(q == std::vector<double>{2.0 - 0.2 * 0.5, -1.0 - 0.2});

  std::vector<double> r{3.0, 4.0}, zero{0.0, 0.0}, vr{0.0, 0.0};
  sgd_update<double>(r, zero, vr, 0.1, 0.9, true, 0.0);
  CHECK(r == std::vector<double>{3.0, 4.0});

  std::vector<double> bad{1.0, 2.0};
  CHECK_THROWS_AS(sgd_update<double>(bad, g, v, 0.1, 0.9, true, 0.0), ShapeError);
}

TEST_CASE("top-1 accuracy") {
  const std::vector<float> onehot{1, 0, 0, 0, 1, 0, 0, 0, 1};
  CHECK(top1_accuracy(onehot, 3, std::vector<std::int32_t>{0, 1, 2}) == 1.0);
  CHECK(top1_accuracy(onehot, 3, std::vector<std::int32_t>{1, 2, 0}) == 0.0);
  const std::vector<float> four{0.9f, 0.1f, 0.2f, 0.8f, 0.7f, 0.3f, 0.4f, 0.6f};
  CHECK(top1_accuracy(four, 2, std::vector<std::int32_t>{0, 1, 0, 0}) == 0.75);
  const std::vector<float> tie{0.5f, 0.5f};
  CHECK(top1_accuracy(tie, 2, std::vector<std::int32_t>{0}) == 1.0);
}

TEST_CASE("mean IoU") {
  SegConfusion perfect(3);
  perfect.add(std::vector<std::int32_t>{0, 1, 1, 2}, std::vector<std::int32_t>{0, 1, 1, 2});
  CHECK(perfect.miou() == 1.0);

  SegConfusion half(2);
  half.add(std::vector<std::int32_t>{0, 0, 0, 0}, std::vector<std::int32_t>{0, 0, 1, 1});
  CHECK(half.iou(0) == 0.5);
  CHECK(half.iou(1) == 0.0);
  CHECK(half.miou() == 0.25);
  half.add(std::vector<std::int32_t>{0, 0, 0, 0}, std::vector<std::int32_t>{0, 0, 1, 1});
  CHECK(half.miou() == 0.25);

  SegConfusion absent(4);
  absent.add(std::vector<std::int32_t>{0, 1}, std::vector<std::int32_t>{0, 1});
  CHECK(absent.miou() == 1.0);

  auto logits = Tensor<float>::from_data({1, 2, 1, 2}, {1.0f, 0.0f, 1.0f, 2.0f});
  CHECK(dense_argmax(logits) == std::vector<std::int32_t>{0, 1});
}

TEST_CASE("evaluation rejects a task mismatch") {
  auto [train, test] = cls_data(2, 2, 0.1);
  ModelSpec dense;
  dense.task = Task::dense;
  dense.stage_widths = {4};
  dense.num_classes = 2;
  auto model = Model<float>::build(dense, 1);
  CHECK_THROWS_AS(evaluate(model, test), ConfigError);
}

TEST_CASE("one epoch on noiseless separable data fits the training set") {
  auto [train, test] = cls_data(4, 500, 0.0);
  const auto cfg = small_config({8, 16}, 4, 1);
  const auto result = train_teacher(cfg, train, test);
  auto model = result.final_checkpoint.restore();
  CHECK(evaluate(model, train) == 1.0);
}

TEST_CASE("teacher training is deterministic and logs plain cross-entropy") {
  auto [train, test] = cls_data(3, 20, 0.3);
  const auto cfg = small_config({4, 8}, 3, 2);
  const auto a = train_teacher(cfg, train, test);
  const auto b = train_teacher(cfg, train, test);
  CHECK(a.log.to_csv() == b.log.to_csv());
  CHECK(a.final_checkpoint.serialize() == b.final_checkpoint.serialize());
  for (const auto& row : a.log.rows) {
    CHECK(std::abs(row.total - row.task_loss) <= 1e-4);
    CHECK(row.kl == 0.0);
    CHECK(row.cc == 0.0);
  }
  CHECK(a.best_eval >= a.final_eval);
}

TEST_CASE("distillation with zero weights follows the vanilla trajectory") {
  auto [train, test] = cls_data(3, 20, 0.3);
  auto tcfg = small_config({8, 8}, 3, 1);
  tcfg.seed = 99;
  const auto teacher = train_teacher(tcfg, train, test).final_checkpoint;

  const auto vcfg = small_config({4, 8}, 3, 2);
  const auto vanilla = train_teacher(vcfg, train, test);
  auto dcfg = vcfg;
  dcfg.distill = DistillConfig{};
  dcfg.distill->beta1 = 0.0;
  dcfg.distill->beta2 = 0.0;
  const auto zero = distill(dcfg, teacher, train, test);
  REQUIRE(zero.log.rows.size() == vanilla.log.rows.size());
  for (std::size_t i = 0; i < zero.log.rows.size(); ++i) {
    CHECK(zero.log.rows[i].task_loss == vanilla.log.rows[i].task_loss);
    CHECK(zero.log.rows[i].total == vanilla.log.rows[i].total);
    CHECK(zero.log.rows[i].eval == vanilla.log.rows[i].eval);
  }
}

TEST_CASE("distillation keeps the teacher fixed and logs the full objective") {
  auto [train, test] = cls_data(3, 20, 0.3);
  auto tcfg = small_config({8, 8}, 3, 1);
  const auto teacher = train_teacher(tcfg, train, test).final_checkpoint;
  const auto before = state_checksum(teacher.restore());

  auto cfg = small_config({4, 8}, 3, 2);
  cfg.distill = DistillConfig{};
  cfg.distill->stages = {1, 2};
  const auto r = distill(cfg, teacher, train, test);
  CHECK(state_checksum(teacher.restore()) == before);
  for (const auto& row : r.log.rows) {
    CHECK(std::abs(row.total - (row.task_loss + row.kl + 2.5 * row.cc)) <= 1e-4);
    CHECK(row.kl > 0.0);
    CHECK(row.cc > 0.0);
  }
  bool has_transfer = false;
  for (const auto& t : r.final_checkpoint.tensors) has_transfer = has_transfer || t.name.rfind("distill/", 0) == 0;
  CHECK(has_transfer);
}

TEST_CASE("distillation configuration errors") {
  auto [train, test] = cls_data(3, 4, 0.3);
  const auto teacher = train_teacher(small_config({8, 8}, 3, 1), train, test).final_checkpoint;
  auto cfg = small_config({4, 8}, 3, 1);
  cfg.distill = DistillConfig{};
  cfg.distill->stages = {3};
  CHECK_THROWS_AS(distill(cfg, teacher, train, test), ConfigError);
  cfg.distill->stages = {1};
  cfg.distill->use_transfer_layer = false;
  CHECK_THROWS_AS(distill(cfg, teacher, train, test), ConfigError);
  auto wrong = small_config({4, 8}, 5, 1);
  wrong.distill = DistillConfig{};
  CHECK_THROWS_AS(distill(wrong, teacher, train, test), ConfigError);
}

TEST_CASE("metrics CSV round trip") {
  MetricsLog log;
  log.rows.push_back({0, 0.05, 1.0 / 3.0, 0.25, 0.1, 0.2, 0.5});
  log.rows.push_back({1, 0.005, 0.1, 0.1, 0.0, 0.0, 0.75});
  const auto csv = log.to_csv();
  CHECK(csv.rfind(MetricsLog::kHeader, 0) == 0);
  CHECK(MetricsLog::parse_csv(csv).rows == log.rows);
  CHECK_THROWS_AS(MetricsLog::parse_csv("epoch,lr\n"), FormatError);
}

TEST_CASE("checkpoint round trip") {
  auto [train, test] = cls_data(3, 10, 0.3);
  const auto r = train_teacher(small_config({4, 8}, 3, 1), train, test);
  const auto bytes = r.final_checkpoint.serialize();
  const auto back = Checkpoint::deserialize(bytes);
  CHECK(back == r.final_checkpoint);
  CHECK(back.serialize() == bytes);
  auto model = back.restore();
  CHECK(evaluate(model, test) == r.final_eval);

  const auto path = std::filesystem::temp_directory_path() / "ickd_unit_ckpt.bin";
  back.save(path);
  CHECK(Checkpoint::load(path).serialize() == bytes);
  std::filesystem::remove(path);

  auto broken = bytes;
  broken[0] = 'X';
  CHECK_THROWS_AS(Checkpoint::deserialize(broken), FormatError);
  broken = bytes;
  broken.resize(broken.size() - 4);
  CHECK_THROWS_AS(Checkpoint::deserialize(broken), FormatError);
}

}
