#include "ickd/config.hpp"

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "ickd/errors.hpp"

namespace ickd {

using nlohmann::json;

const std::vector<KeyDoc>& config_keys() {
  static const std::vector<KeyDoc> keys = {
      {"seed", "0", "single source of all randomness"},
      {"threads", "1", "threads inside primitives (env ICKD_THREADS)"},
      {"model.task", "\"classification\"", "classification | dense-prediction"},
      {"model.stage_widths", "[8,16,32]", "channels per stage"},
      {"model.blocks_per_stage", "1", "conv-BN-ReLU blocks per stage"},
      {"model.num_classes", "10", "output classes"},
      {"model.input_shape", "[3,32,32]", "channels, height, width"},
      {"teacher_model.*", "(none)", "same keys as model; required by distill"},
      {"data.source", "\"synth-cls\"", "synth-cls | synth-seg | cifar10 | cifar100 | cifar-seg"},
      {"data.seed", "(run seed)", "synthetic dataset identity"},
      {"data.classes", "10", "synthetic class count (cifar-seg: label count)"},
      {"data.per_class", "500", "synth-cls training samples per class"},
      {"data.test_per_class", "100", "synth-cls test samples per class"},
      {"data.count", "2000", "synth-seg training images"},
      {"data.test_count", "500", "synth-seg test images"},
      {"data.noise", "0.35", "synthetic pixel noise std"},
      {"data.contrast", "0.12", "synth-cls prototype amplitude"},
      {"data.train_path", "\"\"", "CIFAR binary training file"},
      {"data.test_path", "\"\"", "CIFAR binary test file"},
      {"data.limit", "0", "keep the first N training records (0 keeps all)"},
      {"data.standardize", "true", "per-channel standardization with training statistics"},
      {"train.preset", "\"desk\"", "desk | cifar; sets epochs, batch_size, lr, milestones"},
      {"train.epochs", "40", "training epochs"},
      {"train.batch_size", "64", "minibatch size"},
      {"train.lr", "0.05", "initial learning rate"},
      {"train.lr_decay", "0.1", "step decay factor"},
      {"train.milestones", "[20,30]", "epochs (0-based) at which the lr decays"},
      {"train.momentum", "0.9", "SGD momentum"},
      {"train.nesterov", "true", "Nesterov momentum"},
      {"train.weight_decay", "0.0005", "L2 decay, not applied to BN gamma/beta"},
      {"train.augment", "false", "random flip and 4-pixel pad-crop (classification)"},
      {"train.cache_teacher", "true", "precompute teacher outputs when not augmenting"},
      {"train.eval_batch_size", "256", "evaluation batch size"},
      {"distill.temperature", "4.0", "KD temperature tau"},
      {"distill.beta1", "1.0", "weight of the KL term"},
      {"distill.beta2", "2.5", "weight of the ICC term (classification)"},
      {"distill.alpha", "20.0", "weight of the grid ICC term (dense)"},
      {"distill.kernel", "\"inner-product\"", "inner-product | gaussian | polynomial"},
      {"distill.gaussian_sigma", "1.0", "gaussian kernel width"},
      {"distill.poly_offset", "1.0", "polynomial kernel offset"},
      {"distill.poly_degree", "2", "polynomial kernel degree"},
      {"distill.cc_loss", "\"l2\"", "l2 | smooth-l1"},
      {"distill.stages", "[] (last stage)", "1-based stages to distill"},
      {"distill.grid", "[1,1]", "rows, cols of the ICC grid"},
      {"distill.use_transfer_layer", "true", "1x1 conv + BN on student features"},
      {"distill.kd_tau_squared", "false", "multiply the KL term by tau^2"},
  };
  return keys;
}

std::string config_help() {
  std::string out = "Config keys (JSON document; flags override config values):\n";
  std::size_t width = 0;
  for (const auto& k : config_keys()) width = std::max(width, k.path.size());
  for (const auto& k : config_keys()) {
    out += "  " + k.path + std::string(width - k.path.size() + 2, ' ') + "default " + k.default_value + "  " +
           k.description + "\n";
  }
  return out;
}

namespace {

const std::set<std::string> kReservedTrainKeys = {"optimizer", "adamw", "betas", "adam_beta1", "adam_beta2",
                                                  "adam_eps", "eps", "warmup_epochs"};

std::set<std::string> section_keys(const std::string& section) {
  std::set<std::string> out;
  const std::string prefix = section + ".";
  for (const auto& k : config_keys()) {
    if (k.path.rfind(prefix, 0) == 0) out.insert(k.path.substr(prefix.size()));
  }
  return out;
}

void check_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
}

void reject_unknown(const json& j, const std::string& section, const std::set<std::string>& allowed) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
  }
}

template <class V>
void read(const json& j, const std::string& section, const char* key, V& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  const std::string name = (section.empty() ? "" : section + ".") + key;
  if constexpr (std::is_integral_v<V> && !std::is_same_v<V, bool>) {
    if (!v.is_number_integer()) throw ConfigError(name + ": expected an integer (" + v.dump() + ")");
    if (std::is_unsigned_v<V> && !v.is_number_unsigned()) {
      throw ConfigError(name + ": expected a non-negative integer (" + v.dump() + ")");
    }
  }
  try {
    out = v.get<V>();
  } catch (const json::exception&) {
    throw ConfigError((section.empty() ? "" : section + ".") + key + ": wrong value type (" + j.at(key).dump() + ")");
  }
}

ModelSpec parse_model(const json& j, const std::string& section) {
  check_object(j, section);
  static const auto allowed = section_keys("model");
  reject_unknown(j, section, allowed);
  ModelSpec spec;
  spec.stage_widths = {8, 16, 32};
  std::string task = "classification";
  read(j, section, "task", task);
  try {
    spec.task = parse_task(task);
  } catch (const Error& e) {
    throw ConfigError(section + ".task: " + e.what());
  }
  read(j, section, "stage_widths", spec.stage_widths);
  read(j, section, "blocks_per_stage", spec.blocks_per_stage);
  read(j, section, "num_classes", spec.num_classes);
  read(j, section, "input_shape", spec.input_shape);
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    if (section != "model" && msg.rfind("model.", 0) == 0) msg = section + msg.substr(5);
    throw ConfigError(msg);
  }
  return spec;
}

DataConfig parse_data(const json& j) {
  check_object(j, "data");
  static const auto allowed = section_keys("data");
  reject_unknown(j, "data", allowed);
  DataConfig d;
  read(j, "data", "source", d.source);
  if (j.contains("seed")) {
    std::uint64_t s = 0;
    read(j, "data", "seed", s);
    d.seed = s;
  }
  read(j, "data", "classes", d.classes);
  read(j, "data", "per_class", d.per_class);
  read(j, "data", "test_per_class", d.test_per_class);
  read(j, "data", "count", d.count);
  read(j, "data", "test_count", d.test_count);
  read(j, "data", "noise", d.noise);
  read(j, "data", "contrast", d.contrast);
  read(j, "data", "train_path", d.train_path);
  read(j, "data", "test_path", d.test_path);
  read(j, "data", "limit", d.limit);
  read(j, "data", "standardize", d.standardize);
  static const std::set<std::string> sources = {"synth-cls", "synth-seg", "cifar10", "cifar100", "cifar-seg"};
  if (!sources.count(d.source)) throw ConfigError("data.source: unknown source '" + d.source + "'");
  if (d.limit < 0) throw ConfigError("data.limit must be >= 0");
  return d;
}

DistillConfig parse_distill(const json& j) {
  check_object(j, "distill");
  static const auto allowed = section_keys("distill");
  reject_unknown(j, "distill", allowed);
  DistillConfig d;
  read(j, "distill", "temperature", d.temperature);
  read(j, "distill", "beta1", d.beta1);
  read(j, "distill", "beta2", d.beta2);
  read(j, "distill", "alpha", d.alpha);
  std::string kernel = "inner-product", loss = "l2";
  read(j, "distill", "kernel", kernel);
  read(j, "distill", "cc_loss", loss);
  try {
    d.kernel.kind = parse_kernel_kind(kernel);
  } catch (const Error& e) {
    throw ConfigError(std::string("distill.kernel: ") + e.what());
  }
  try {
    d.cc_loss = parse_cc_loss_kind(loss);
  } catch (const Error& e) {
    throw ConfigError(std::string("distill.cc_loss: ") + e.what());
  }
  read(j, "distill", "gaussian_sigma", d.kernel.gaussian_sigma);
  read(j, "distill", "poly_offset", d.kernel.poly_offset);
  read(j, "distill", "poly_degree", d.kernel.poly_degree);
  read(j, "distill", "stages", d.stages);
  std::array<int, 2> grid{1, 1};
  read(j, "distill", "grid", grid);
  d.grid = {grid[0], grid[1]};
  read(j, "distill", "use_transfer_layer", d.use_transfer_layer);
  read(j, "distill", "kd_tau_squared", d.kd_tau_squared);
  d.validate();
  return d;
}

void parse_train(const json& j, RunConfig& cfg) {
  check_object(j, "train");
  for (const auto& [key, value] : j.items()) {
    if (kReservedTrainKeys.count(key) && !(key == "optimizer" && value == "sgd")) {
      throw ConfigError("train." + key + ": AdamW and its settings are not supported; only SGD is implemented");
    }
  }
  static auto allowed = [] {
    auto keys = section_keys("train");
    keys.insert("optimizer");
    return keys;
  }();
  reject_unknown(j, "train", allowed);
  read(j, "train", "preset", cfg.preset);
  const auto p = preset(cfg.preset);
  auto& t = cfg.train;
  t.epochs = p.epochs;
  t.batch_size = p.batch_size;
  t.schedule = p.schedule;
  read(j, "train", "epochs", t.epochs);
  read(j, "train", "batch_size", t.batch_size);
  read(j, "train", "lr", t.schedule.initial);
  read(j, "train", "lr_decay", t.schedule.factor);
  read(j, "train", "milestones", t.schedule.milestones);
  read(j, "train", "momentum", t.sgd.momentum);
  read(j, "train", "nesterov", t.sgd.nesterov);
  read(j, "train", "weight_decay", t.sgd.weight_decay);
  read(j, "train", "augment", t.augment);
  read(j, "train", "cache_teacher", t.cache_teacher);
  read(j, "train", "eval_batch_size", t.eval_batch_size);
}

// Grid divisibility and stage existence for every model the config declares.
void precheck_distill(const RunConfig& cfg) {
  const auto& d = cfg.distill;
  std::vector<std::pair<std::string, const ModelSpec*>> models{{"model", &cfg.model}};
  if (cfg.teacher_model) models.emplace_back("teacher_model", &*cfg.teacher_model);
  for (const auto& [name, spec] : models) {
    std::vector<int> stages;
    try {
      stages = d.resolved_stages(spec->num_stages());
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(e.what()) + " (" + name + ")");
    }
    for (int s : stages) {
      const auto e = spec->tap_extent(s);
      try {
        d.grid.check_divides(e[0], e[1]);
      } catch (const GridIndivisibleError& err) {
        throw ConfigError("distill.grid: " + std::string(err.what()) + " (" + name + " stage " + std::to_string(s) +
                          ")");
      }
    }
  }
  if (cfg.teacher_model) {
    if (cfg.teacher_model->task != cfg.model.task) throw ConfigError("teacher_model.task must match model.task");
    if (cfg.teacher_model->num_classes != cfg.model.num_classes) {
      throw ConfigError("teacher_model.num_classes must match model.num_classes");
    }
    if (!d.use_transfer_layer) {
      for (int s : d.resolved_stages(cfg.model.num_stages())) {
        if (cfg.model.stage_widths[s - 1] != cfg.teacher_model->stage_widths[s - 1]) {
          throw ConfigError("distill.use_transfer_layer=false needs equal student/teacher widths at stage " +
                            std::to_string(s));
        }
      }
    }
  }
}

std::pair<std::size_t, std::size_t> line_column(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace

RunConfig parse_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_column(text, e.byte);
    std::string what = e.what();
    const auto colon = what.rfind(": ");
    throw ConfigError("syntax error at line " + std::to_string(line) + ", column " + std::to_string(col) + ": " +
                      (colon == std::string::npos ? what : what.substr(colon + 2)));
  }
  if (!doc.is_object()) throw ConfigError("config document must be a JSON object");

  static const std::set<std::string> sections = {"seed", "threads", "model", "teacher_model",
                                                 "data", "train",   "distill"};
  for (const auto& [key, value] : doc.items()) {
    if (!sections.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }

  RunConfig cfg;
  read(doc, "", "seed", cfg.seed);
  if (doc.contains("threads")) {
    int threads = 1;
    read(doc, "", "threads", threads);
    if (threads < 1) throw ConfigError("threads must be >= 1");
    cfg.threads = threads;
  }
  cfg.model = parse_model(doc.value("model", json::object()), "model");
  if (doc.contains("teacher_model")) cfg.teacher_model = parse_model(doc["teacher_model"], "teacher_model");
  cfg.data = parse_data(doc.value("data", json::object()));
  parse_train(doc.value("train", json::object()), cfg);
  cfg.distill = parse_distill(doc.value("distill", json::object()));

  cfg.train.model = cfg.model;
  cfg.train.seed = cfg.seed;
  cfg.train.validate();
  precheck_distill(cfg);

  const bool seg_source = cfg.data.source == "synth-seg" || cfg.data.source == "cifar-seg";
  if (seg_source != (cfg.model.task == Task::dense)) {
    throw ConfigError("data.source '" + cfg.data.source + "' does not match model.task '" +
                      std::string(to_string(cfg.model.task)) + "'");
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IOError("cannot open config " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

std::pair<Dataset, Dataset> load_datasets(const DataConfig& data, std::uint64_t run_seed, Task task) {
  const auto seed = data.seed.value_or(run_seed);
  Dataset train, test;
  if (data.source == "synth-cls") {
    SynthClsParams p{seed, data.classes, data.per_class, data.noise, data.contrast};
    train = synth_cls(p, Split::train);
    p.per_class = data.test_per_class;
    test = synth_cls(p, Split::test);
  } else if (data.source == "synth-seg") {
    SynthSegParams p;
    p.seed = seed;
    p.classes = data.classes;
    p.count = data.count;
    p.noise = data.noise;
    train = synth_seg(p, Split::train);
    p.count = data.test_count;
    test = synth_seg(p, Split::test);
  } else {
    if (data.train_path.empty() || data.test_path.empty()) {
      throw ConfigError("data.train_path and data.test_path are required for source '" + data.source + "'");
    }
    const auto variant = parse_cifar_variant(data.source == "cifar-seg" ? "seg" : data.source);
    const int classes = data.source == "cifar-seg" ? data.classes : 0;
    train = load_cifar_raw(data.train_path, variant, Split::train, classes);
    test = load_cifar_raw(data.test_path, variant, Split::test, classes);
  }
  if (data.limit > 0 && data.limit < train.count) {
    train.count = data.limit;
    train.images.resize(static_cast<std::size_t>(train.count * train.image_size()));
    train.labels.resize(static_cast<std::size_t>(train.count * train.label_size()));
  }
  if (train.task != task) throw ConfigError("data.source does not produce " + std::string(to_string(task)) + " data");
  if (data.standardize) {
    const auto stats = channel_statistics(train);
    standardize(train, stats);
    standardize(test, stats);
  }
  return {std::move(train), std::move(test)};
}

std::optional<int> env_threads() {
  const char* v = std::getenv("ICKD_THREADS");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("ICKD_THREADS must be a positive integer");
  return static_cast<int>(n);
}

}  // namespace ickd
