#pragma once

// SGD training loop, teacher pretraining, distillation runs, evaluation and
// the per-epoch metrics log.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ickd/checkpoint.hpp"
#include "ickd/data.hpp"
#include "ickd/distill.hpp"
#include "ickd/nn.hpp"

namespace ickd {

// Step decay: initial * factor^(number of milestones <= epoch).
struct LrSchedule {
  double initial = 0.05;
  double factor = 0.1;
  std::vector<int> milestones;

  void validate() const;
  bool operator==(const LrSchedule&) const = default;
};

double lr_at(const LrSchedule& schedule, int epoch);

struct TrainPreset {
  std::string name;
  int epochs;
  int batch_size;
  LrSchedule schedule;
};

// "cifar": 240 epochs, batch 64, lr 5e-2 decayed by 0.1 at 150/180/210.
// "desk":  40 epochs, batch 64, lr 5e-2 decayed by 0.1 at 20/30.
TrainPreset preset(std::string_view name);

struct SgdConfig {
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 5e-4;
  bool operator==(const SgdConfig&) const = default;
};

// One SGD step on a single tensor:
//   g <- grad + wd*p;  v <- mu*v + g;  p <- p - lr*(g + mu*v) (Nesterov) or p - lr*v.
template <class T>
void sgd_update(std::span<T> param, std::span<const T> grad, std::span<T> velocity, double lr, double momentum,
                bool nesterov, double weight_decay);

// Optimizer over named parameters; BN gamma/beta are exempt from weight decay.
template <class T>
class Sgd {
 public:
  Sgd(std::vector<NamedTensor<T>> params, SgdConfig config);
  void step(const GradientTape<T>& tape, double lr);

 private:
  struct Slot {
    Tensor<T> param;
    std::vector<T> velocity;
    bool decay;
  };
  std::vector<Slot> slots_;
  SgdConfig config_;
};

struct TrainConfig {
  ModelSpec model;
  int epochs = 40;
  int batch_size = 64;
  LrSchedule schedule{0.05, 0.1, {20, 30}};
  SgdConfig sgd;
  std::uint64_t seed = 0;
  bool augment = false;
  std::optional<DistillConfig> distill;
  // Precompute frozen-teacher outputs once when inputs are not augmented.
  bool cache_teacher = true;
  int eval_batch_size = 256;

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double total = 0.0;
  double task_loss = 0.0;
  double kl = 0.0;
  double cc = 0.0;
  double eval = 0.0;
  bool operator==(const EpochMetrics&) const = default;
};

class MetricsLog {
 public:
  static constexpr const char* kHeader = "epoch,lr,total,task_loss,kl,cc,eval";

  std::vector<EpochMetrics> rows;

  std::string to_csv() const;
  void write(const std::filesystem::path& path) const;
  static MetricsLog parse_csv(const std::string& text);
};

struct TrainResult {
  Checkpoint final_checkpoint;
  Checkpoint best_checkpoint;
  MetricsLog log;
  double final_eval = 0.0;
  double best_eval = 0.0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Cross-entropy (per-pixel for dense models) training of cfg.model.
TrainResult train_teacher(const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                          const EpochCallback& on_epoch = {});

// Trains a fresh student under the ICKD-C (classification) or ICKD-S (dense)
// objective against the frozen teacher in `teacher`.
TrainResult distill(const TrainConfig& cfg, const Checkpoint& teacher, const Dataset& train, const Dataset& test,
                    const EpochCallback& on_epoch = {});

// Fraction of rows whose argmax equals the label; ties go to the lowest index.
double top1_accuracy(std::span<const float> logits, int classes, std::span<const std::int32_t> labels);

// IoU accumulated over a whole split; classes absent from both prediction and
// ground truth are excluded from the mean.
class SegConfusion {
 public:
  explicit SegConfusion(int classes);
  void add(std::span<const std::int32_t> predicted, std::span<const std::int32_t> truth);
  double iou(int k) const;
  double miou() const;

 private:
  int classes_;
  std::vector<std::int64_t> tp_, fp_, fn_;
};

// Per-pixel argmax of [N,K,H,W] logits, ties to the lowest class.
std::vector<std::int32_t> dense_argmax(const Tensor<float>& logits);

double evaluate_cls(Model<float>& model, const Dataset& dataset, int batch_size = 256);
double evaluate_seg(Model<float>& model, const Dataset& dataset, int batch_size = 256);
// Dispatches on the model task; throws ConfigError on a task mismatch.
double evaluate(Model<float>& model, const Dataset& dataset, int batch_size = 256);

}  // namespace ickd
