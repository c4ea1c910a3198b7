#include "ickd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ickd/errors.hpp"
#include "ickd/ops.hpp"

namespace ickd {

void LrSchedule::validate() const {
  if (!(initial > 0.0) || !std::isfinite(initial)) throw ConfigError("train.lr must be > 0");
  if (!(factor > 0.0) || !std::isfinite(factor)) throw ConfigError("train.lr_decay must be > 0");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 0) throw ConfigError("train.milestones must be >= 0");
    if (i > 0 && milestones[i] <= milestones[i - 1]) throw ConfigError("train.milestones must be strictly increasing");
  }
}

double lr_at(const LrSchedule& schedule, int epoch) {
  const auto passed = std::count_if(schedule.milestones.begin(), schedule.milestones.end(),
                                    [epoch](int m) { return m <= epoch; });
  double lr = schedule.initial;
  for (std::ptrdiff_t i = 0; i < passed; ++i) lr *= schedule.factor;
  return lr;
}

TrainPreset preset(std::string_view name) {
  if (name == "cifar") return {"cifar", 240, 64, {0.05, 0.1, {150, 180, 210}}};
  if (name == "desk") return {"desk", 40, 64, {0.05, 0.1, {20, 30}}};
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected cifar or desk)");
}

template <class T>
void sgd_update(std::span<T> param, std::span<const T> grad, std::span<T> velocity, double lr, double momentum,
                bool nesterov, double weight_decay) {
  if (grad.size() != param.size() || velocity.size() != param.size()) {
    throw ShapeError("sgd_update: parameter, gradient and velocity sizes differ (" + std::to_string(param.size()) +
                     ", " + std::to_string(grad.size()) + ", " + std::to_string(velocity.size()) + ")");
  }
  const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), step = static_cast<T>(lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i] + wd * param[i];
    velocity[i] = mu * velocity[i] + g;
    param[i] -= nesterov ? step * (g + mu * velocity[i]) : step * velocity[i];
  }
}

template <class T>
Sgd<T>::Sgd(std::vector<NamedTensor<T>> params, SgdConfig config) : config_(config) {
  for (auto& p : params) {
    const bool decay = p.name.find(".bn.") == std::string::npos;
    slots_.push_back({p.tensor, std::vector<T>(static_cast<std::size_t>(p.tensor.size()), T(0)), decay});
  }
}

template <class T>
void Sgd<T>::step(const GradientTape<T>& tape, double lr) {
  for (auto& slot : slots_) {
    if (!tape.contains(slot.param)) continue;
    sgd_update<T>(slot.param.mutable_data(), tape.grad(slot.param).data(), std::span<T>(slot.velocity), lr,
                  config_.momentum, config_.nesterov, slot.decay ? config_.weight_decay : 0.0);
  }
}

template void sgd_update<float>(std::span<float>, std::span<const float>, std::span<float>, double, double, bool,
                                double);
template void sgd_update<double>(std::span<double>, std::span<const double>, std::span<double>, double, double, bool,
                                 double);
template class Sgd<float>;
template class Sgd<double>;

void TrainConfig::validate() const {
  model.validate();
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (eval_batch_size < 1) throw ConfigError("train.eval_batch_size must be >= 1");
  schedule.validate();
  if (!(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
  if (!(sgd.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (augment && model.task != Task::classification) {
    throw ConfigError("train.augment is only supported for classification");
  }
  if (distill) distill->validate();
}

// ---- metrics log -----------------------------------------------------------

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string MetricsLog::to_csv() const {
  std::string out = std::string(kHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + fmt(r.lr) + "," + fmt(r.total) + "," + fmt(r.task_loss) + "," +
           fmt(r.kl) + "," + fmt(r.cc) + "," + fmt(r.eval) + "\n";
  }
  return out;
}

void MetricsLog::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IOError("cannot write " + path.string());
  out << to_csv();
  if (!out) throw IOError("short write to " + path.string());
}

MetricsLog MetricsLog::parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader) throw FormatError("metrics CSV header mismatch");
  MetricsLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw FormatError("metrics CSV row has " + std::to_string(cells.size()) + " cells");
    try {
      log.rows.push_back({std::stoi(cells[0]), std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3]),
                          std::stod(cells[4]), std::stod(cells[5]), std::stod(cells[6])});
    } catch (const std::logic_error&) {
      throw FormatError("malformed metrics CSV row: " + line);
    }
  }
  return log;
}

// ---- evaluation ------------------------------------------------------------

double top1_accuracy(std::span<const float> logits, int classes, std::span<const std::int32_t> labels) {
  if (classes < 1 || logits.size() != labels.size() * static_cast<std::size_t>(classes)) {
    throw ShapeError("top1_accuracy: logits do not match labels x classes");
  }
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.subspan(i * classes, classes);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

SegConfusion::SegConfusion(int classes) : classes_(classes), tp_(classes, 0), fp_(classes, 0), fn_(classes, 0) {
  if (classes < 1) throw ConfigError("SegConfusion needs at least one class");
}

void SegConfusion::add(std::span<const std::int32_t> predicted, std::span<const std::int32_t> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("SegConfusion: prediction and truth sizes differ");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto p = predicted[i], t = truth[i];
    if (p < 0 || p >= classes_ || t < 0 || t >= classes_) throw ShapeError("SegConfusion: label out of range");
    if (p == t) {
      ++tp_[t];
    } else {
      ++fp_[p];
      ++fn_[t];
    }
  }
}

double SegConfusion::iou(int k) const {
  const auto denom = tp_[k] + fp_[k] + fn_[k];
  return denom == 0 ? 0.0 : static_cast<double>(tp_[k]) / static_cast<double>(denom);
}

double SegConfusion::miou() const {
  double sum = 0.0;
  int present = 0;
  for (int k = 0; k < classes_; ++k) {
    if (tp_[k] + fp_[k] + fn_[k] == 0) continue;
    sum += iou(k);
    ++present;
  }
  return present == 0 ? 0.0 : sum / present;
}

std::vector<std::int32_t> dense_argmax(const Tensor<float>& logits) {
  if (logits.rank() != 4) throw ShapeError("dense_argmax: expected [N,K,H,W], got " + to_string(logits.shape()));
  const auto n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const auto x = logits.data();
  std::vector<std::int32_t> out(static_cast<std::size_t>(n * hw));
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t p = 0; p < hw; ++p) {
      std::int32_t best = 0;
      float best_v = x[b * k * hw + p];
      for (std::int64_t c = 1; c < k; ++c) {
        const float v = x[(b * k + c) * hw + p];
        if (v > best_v) {
          best_v = v;
          best = static_cast<std::int32_t>(c);
        }
      }
      out[b * hw + p] = best;
    }
  }
  return out;
}

namespace {

void check_compatible(const ModelSpec& spec, const Dataset& ds) {
  if (spec.task != ds.task) {
    throw ConfigError("model task '" + std::string(to_string(spec.task)) + "' does not match dataset task '" +
                      std::string(to_string(ds.task)) + "'");
  }
  if (ds.channels != spec.input_shape[0] || ds.height != spec.input_shape[1] || ds.width != spec.input_shape[2]) {
    throw ConfigError("dataset images do not match model.input_shape");
  }
  if (ds.class_count > spec.num_classes) {
    throw ConfigError("dataset has " + std::to_string(ds.class_count) + " classes but model.num_classes is " +
                      std::to_string(spec.num_classes));
  }
  if (ds.count < 1) throw ConfigError("dataset is empty");
}

}  // namespace

double evaluate_cls(Model<float>& model, const Dataset& dataset, int batch_size) {
  if (model.spec().task != Task::classification) throw ConfigError("evaluate_cls needs a classification model");
  check_compatible(model.spec(), dataset);
  NoGradGuard no_grad;
  std::int64_t correct = 0;
  for (const auto& group : batch_plan(dataset.count, batch_size, 0, false)) {
    const auto b = make_batch(dataset, group);
    const auto logits = model.forward(b.images, Mode::eval);
    correct += static_cast<std::int64_t>(
        std::llround(top1_accuracy(logits.data(), model.spec().num_classes, b.labels) * b.labels.size()));
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.count);
}

double evaluate_seg(Model<float>& model, const Dataset& dataset, int batch_size) {
  if (model.spec().task != Task::dense) throw ConfigError("evaluate_seg needs a dense-prediction model");
  check_compatible(model.spec(), dataset);
  NoGradGuard no_grad;
  SegConfusion confusion(model.spec().num_classes);
  for (const auto& group : batch_plan(dataset.count, batch_size, 0, false)) {
    const auto b = make_batch(dataset, group);
    confusion.add(dense_argmax(model.forward(b.images, Mode::eval)), b.labels);
  }
  return confusion.miou();
}

double evaluate(Model<float>& model, const Dataset& dataset, int batch_size) {
  return model.spec().task == Task::classification ? evaluate_cls(model, dataset, batch_size)
                                                   : evaluate_seg(model, dataset, batch_size);
}

// ---- training loops --------------------------------------------------------

namespace {

struct StepLosses {
  LossComponents components;
  std::int64_t samples;
};

// Frozen-teacher outputs for the distillation loss of one batch.
struct TeacherOut {
  Tensor<float> logits;
  FeatureTaps<float> taps;
};

// Teacher logits and selected taps for every training sample, computed once.
class TeacherCache {
 public:
  TeacherCache(Model<float>& teacher, const Dataset& train, const std::vector<int>& stages, int batch_size) {
    NoGradGuard no_grad;
    for (const auto& group : batch_plan(train.count, batch_size, 0, false)) {
      const auto b = make_batch(train, group);
      auto out = teacher.forward_with_taps(b.images, Mode::eval);
      append(logits_, logits_shape_, out.logits);
      for (int s : stages) append(taps_[s], tap_shapes_[s], out.taps.at(s));
    }
  }

  static std::int64_t bytes_needed(const ModelSpec& teacher, const std::vector<int>& stages, std::int64_t count) {
    std::int64_t per = teacher.task == Task::classification
                           ? teacher.num_classes
                           : std::int64_t{teacher.num_classes} * teacher.input_shape[1] * teacher.input_shape[2];
    for (int s : stages) {
      const auto e = teacher.tap_extent(s);
      per += std::int64_t{teacher.stage_widths[s - 1]} * e[0] * e[1];
    }
    return per * count * static_cast<std::int64_t>(sizeof(float));
  }

  TeacherOut gather(std::span<const std::int64_t> indices) const {
    TeacherOut out;
    out.logits = take(logits_, logits_shape_, indices);
    for (const auto& [s, values] : taps_) out.taps.stages.emplace(s, take(values, tap_shapes_.at(s), indices));
    return out;
  }

 private:
  static void append(std::vector<float>& dst, Shape& item_shape, const Tensor<float>& t) {
    item_shape.assign(t.shape().begin() + 1, t.shape().end());
    dst.insert(dst.end(), t.data().begin(), t.data().end());
  }

  static Tensor<float> take(const std::vector<float>& src, const Shape& item_shape,
                            std::span<const std::int64_t> indices) {
    const auto item = numel(item_shape);
    std::vector<float> values(static_cast<std::size_t>(item) * indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy_n(src.begin() + indices[i] * item, item, values.begin() + static_cast<std::ptrdiff_t>(i * item));
    }
    Shape shape{static_cast<std::int64_t>(indices.size())};
    shape.insert(shape.end(), item_shape.begin(), item_shape.end());
    return Tensor<float>::from_data(shape, std::move(values));
  }

  std::vector<float> logits_;
  Shape logits_shape_;
  std::map<int, std::vector<float>> taps_;
  std::map<int, Shape> tap_shapes_;
};

constexpr std::int64_t kTeacherCacheLimit = std::int64_t{1} << 30;

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite ") + what + " during training");
}

// Shared epoch loop. `step` runs forward/backward/update on one batch and
// returns its loss components.
template <class StepFn>
TrainResult run_epochs(const TrainConfig& cfg, Model<float>& model, TransferLayers<float>* transfer,
                       const Dataset& train, const Dataset& test, const EpochCallback& on_epoch, StepFn&& step) {
  TrainResult result;
  result.best_eval = -1.0;
  const double w_kl = cfg.distill ? cfg.distill->beta1 : 0.0;
  const double w_cc =
      cfg.distill ? (cfg.model.task == Task::classification ? cfg.distill->beta2 : cfg.distill->alpha) : 0.0;

  auto stamp = [&](Checkpoint c, int epoch, double eval, const char* kind) {
    c.seed = cfg.seed;
    c.epoch = epoch;
    c.dataset_fingerprint = train.fingerprint();
    c.normalization = train.normalization;
    c.kind = kind;
    c.eval = eval;
    return c;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(cfg.schedule, epoch);
    Rng aug_rng(derive_seed(cfg.seed, "augment/" + std::to_string(epoch)));
    double task = 0.0, kl = 0.0, cc = 0.0;
    std::int64_t seen = 0;
    int step_index = 0;
    for (const auto& group :
         batch_plan(train.count, cfg.batch_size, derive_seed(cfg.seed, "epoch/" + std::to_string(epoch)), true)) {
      auto batch = make_batch(train, group);
      if (cfg.augment) augment_batch(batch, aug_rng);
      LossComponents c;
      try {
        c = step(batch, lr);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(step_index));
      }
      ++step_index;
      const auto n = static_cast<double>(group.size());
      task += c.task * n;
      kl += c.kl * n;
      cc += c.cc * n;
      seen += static_cast<std::int64_t>(group.size());
    }
    EpochMetrics row;
    row.epoch = epoch;
    row.lr = lr;
    row.task_loss = task / static_cast<double>(seen);
    row.kl = kl / static_cast<double>(seen);
    row.cc = cc / static_cast<double>(seen);
    row.total = row.task_loss + w_kl * row.kl + w_cc * row.cc;
    row.eval = evaluate(model, test, cfg.eval_batch_size);
    result.log.rows.push_back(row);
    if (row.eval > result.best_eval) {
      result.best_eval = row.eval;
      result.best_checkpoint = stamp(Checkpoint::capture(model, transfer), epoch, row.eval, "best");
    }
    if (on_epoch) on_epoch(row);
  }
  result.final_eval = result.log.rows.back().eval;
  result.final_checkpoint =
      stamp(Checkpoint::capture(model, transfer), cfg.epochs - 1, result.final_eval, "final");
  return result;
}

}  // namespace

TrainResult train_teacher(const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                          const EpochCallback& on_epoch) {
  if (cfg.distill) throw ConfigError("train_teacher does not take a distill section");
  cfg.validate();
  check_compatible(cfg.model, train);
  check_compatible(cfg.model, test);

  auto model = Model<float>::build(cfg.model, cfg.seed);
  Sgd<float> sgd(model.parameters(), cfg.sgd);
  const bool dense = cfg.model.task == Task::dense;

  return run_epochs(cfg, model, nullptr, train, test, on_epoch, [&](const Batch& b, double lr) {
    const auto logits = model.forward(b.images, Mode::train);
    const auto loss = dense ? pixel_cross_entropy(logits, b.labels) : cross_entropy(logits, b.labels);
    LossComponents c;
    c.task = loss.item();
    c.total = c.task;
    require_finite(c.total, "loss");
    sgd.step(backward(loss), lr);
    return c;
  });
}

TrainResult distill(const TrainConfig& cfg, const Checkpoint& teacher_ckpt, const Dataset& train,
                    const Dataset& test, const EpochCallback& on_epoch) {
  if (!cfg.distill) throw ConfigError("distill needs a distill section");
  cfg.validate();
  const auto& dcfg = *cfg.distill;
  const auto& sspec = cfg.model;
  const auto& tspec = teacher_ckpt.spec;
  check_compatible(sspec, train);
  check_compatible(sspec, test);
  check_compatible(tspec, train);
  if (tspec.task != sspec.task) throw ConfigError("teacher and student tasks differ");
  if (tspec.num_classes != sspec.num_classes) throw ConfigError("teacher and student num_classes differ");

  const int s_stages = sspec.num_stages();
  for (int s : dcfg.stages) {
    if (s < 1 || s > s_stages || s > tspec.num_stages()) {
      throw ConfigError("distill.stages entry " + std::to_string(s) + " is not a stage of both models (student has " +
                        std::to_string(s_stages) + ", teacher has " + std::to_string(tspec.num_stages()) + ")");
    }
  }
  const auto stages = dcfg.resolved_stages(s_stages);
  for (int s : stages) {
    if (s > tspec.num_stages()) {
      throw ConfigError("stage " + std::to_string(s) + " does not exist in the teacher");
    }
    const auto c_t = tspec.stage_widths[s - 1], c_s = sspec.stage_widths[s - 1];
    if (!dcfg.use_transfer_layer && c_t != c_s) {
      throw ConfigError("stage " + std::to_string(s) + ": student has " + std::to_string(c_s) +
                        " channels, teacher " + std::to_string(c_t) + "; enable distill.use_transfer_layer");
    }
    const auto et = tspec.tap_extent(s), es = sspec.tap_extent(s);
    dcfg.grid.check_divides(et[0], et[1]);
    dcfg.grid.check_divides(es[0], es[1]);
  }

  auto teacher = teacher_ckpt.restore();
  teacher.set_trainable(false);
  teacher.set_update_running_stats(false);
  const auto checksum_before = state_checksum(teacher);

  auto student = Model<float>::build(sspec, cfg.seed);
  TransferLayers<float> transfer;
  auto params = student.parameters();
  if (dcfg.use_transfer_layer) {
    Rng rng(derive_seed(cfg.seed, "transfer"));
    for (int s : stages) {
      auto [it, inserted] =
          transfer.emplace(s, TransferLayer<float>(sspec.stage_widths[s - 1], tspec.stage_widths[s - 1], rng));
      for (auto& p : it->second.parameters("distill/stage" + std::to_string(s))) params.push_back(p);
    }
  }
  Sgd<float> sgd(params, cfg.sgd);

  std::optional<TeacherCache> cache;
  if (cfg.cache_teacher && !cfg.augment &&
      TeacherCache::bytes_needed(tspec, stages, train.count) <= kTeacherCacheLimit) {
    cache.emplace(teacher, train, stages, cfg.eval_batch_size);
  }
  const bool dense = sspec.task == Task::dense;

  auto result = run_epochs(cfg, student, &transfer, train, test, on_epoch, [&](const Batch& b, double lr) {
    TeacherOut t;
    if (cache) {
      t = cache->gather(b.indices);
    } else {
      NoGradGuard no_grad;
      auto out = teacher.forward_with_taps(b.images, Mode::eval);
      t.logits = out.logits;
      t.taps = std::move(out.taps);
    }
    auto out = student.forward_with_taps(b.images, Mode::train);
    const auto obj = dense ? loss_ickd_s(out.logits, b.labels, t.taps, out.taps, transfer, dcfg, Mode::train)
                           : loss_ickd_c(t.logits, out.logits, t.taps, out.taps, transfer, dcfg, b.labels,
                                         Mode::train);
    require_finite(obj.components.total, "loss");
    sgd.step(backward(obj.total), lr);
    return obj.components;
  });

  if (state_checksum(teacher) != checksum_before) throw InternalError("teacher state changed during distillation");
  return result;
}

}  // namespace ickd
