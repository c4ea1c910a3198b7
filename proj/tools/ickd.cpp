// ickd command-line tool: teacher training, distillation, evaluation, ICC
// export, synthetic data export and the oracle verification suite.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ickd/checkpoint.hpp"
#include "ickd/config.hpp"
#include "ickd/data.hpp"
#include "ickd/distill.hpp"
#include "ickd/errors.hpp"
#include "ickd/ops.hpp"
#include "ickd/runtime.hpp"
#include "ickd/trainer.hpp"
#include "ickd/verify.hpp"

namespace {

using namespace ickd;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<int> batch_size;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "override the config seed");
  cmd->add_option("--epochs", o.epochs, "override train.epochs");
  cmd->add_option("--batch-size", o.batch_size, "override train.batch_size");
}

RunConfig load_run_config(const std::string& path, const Overrides& o) {
  auto cfg = path == "-" ? parse_config(std::string(std::istreambuf_iterator<char>(std::cin), {}))
                         : load_config(path);
  if (o.seed) cfg.seed = cfg.train.seed = *o.seed;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.batch_size) cfg.train.batch_size = *o.batch_size;
  cfg.train.validate();
  return cfg;
}

void apply_threads(const std::optional<int>& flag, const std::optional<int>& config) {
  int threads = 1;
  if (flag) {
    threads = *flag;
  } else if (config) {
    threads = *config;
  } else if (auto env = env_threads()) {
    threads = *env;
  }
  if (threads < 1) throw ConfigError("threads must be >= 1");
  set_num_threads(threads);
}

void progress(const EpochMetrics& m) {
  std::fprintf(stderr, "epoch %d lr=%.6g total=%.6g task=%.6g kl=%.6g cc=%.6g eval=%.4f\n", m.epoch, m.lr, m.total,
               m.task_loss, m.kl, m.cc, m.eval);
}

const char* metric_name(Task task) { return task == Task::classification ? "acc" : "miou"; }

void write_outputs(const TrainResult& r, const std::string& out, const std::string& best, const std::string& metrics) {
  if (!out.empty()) r.final_checkpoint.save(out);
  if (!best.empty()) r.best_checkpoint.save(best);
  if (!metrics.empty()) r.log.write(metrics);
}

CifarVariant default_variant(const ModelSpec& spec) {
  if (spec.task == Task::dense) return CifarVariant::seg;
  return spec.num_classes <= 10 ? CifarVariant::cifar10 : CifarVariant::cifar100;
}

std::string full_precision(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_icc(const IccMatrix<float>& g, const std::string& csv_path, const std::string& pgm_path) {
  const auto c = g.channel_count();
  const auto v = g.values.data();
  if (!csv_path.empty()) {
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw IOError("cannot write " + csv_path);
    for (std::int64_t i = 0; i < c; ++i) {
      for (std::int64_t j = 0; j < c; ++j) out << (j ? "," : "") << full_precision(v[i * c + j]);
      out << "\n";
    }
  }
  if (!pgm_path.empty()) {
    std::ofstream out(pgm_path, std::ios::binary);
    if (!out) throw IOError("cannot write " + pgm_path);
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
    out << "P2\n" << c << " " << c << "\n255\n";
    for (std::int64_t i = 0; i < c; ++i) {
      for (std::int64_t j = 0; j < c; ++j) {
        const double t = range > 0.0 ? (static_cast<double>(v[i * c + j]) - *lo) / range : 0.0;
        out << (j ? " " : "") << static_cast<int>(std::lround(t * 255.0));
      }
      out << "\n";
    }
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Inter-channel correlation knowledge distillation"};
  app.footer("\n" + config_help());
  app.require_subcommand(1);
  std::optional<int> threads;
  app.add_option("--threads", threads, "threads inside primitives (overrides config and ICKD_THREADS)");

  std::string config, teacher, out, best, metrics, ckpt, data, csv, heatmap, variant;
  std::string out_train, out_test;
  int stage = 0;
  std::int64_t index = 0;
  std::uint64_t verify_seed = 0;
  Overrides o;

  auto* train_cmd = app.add_subcommand("train-teacher", "train a model with cross-entropy only");
  train_cmd->add_option("--config", config, "run config (JSON, '-' for stdin)")->required();
  train_cmd->add_option("--out", out, "final checkpoint");
  train_cmd->add_option("--best", best, "best-eval checkpoint");
  train_cmd->add_option("--metrics", metrics, "metrics CSV");
  add_overrides(train_cmd, o);

  auto* distill_cmd = app.add_subcommand("distill", "train a student against a frozen teacher");
  distill_cmd->add_option("--config", config, "run config (JSON, '-' for stdin)")->required();
  distill_cmd->add_option("--teacher", teacher, "teacher checkpoint")->required();
  distill_cmd->add_option("--out", out, "final student checkpoint");
  distill_cmd->add_option("--best", best, "best-eval student checkpoint");
  distill_cmd->add_option("--metrics", metrics, "metrics CSV");
  add_overrides(distill_cmd, o);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the configured test split");
  eval_cmd->add_option("--config", config, "run config naming the data")->required();
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint")->required();

  auto* icc_cmd = app.add_subcommand("icc", "export the ICC matrix of one sample at one stage");
  icc_cmd->add_option("--ckpt", ckpt, "checkpoint")->required();
  icc_cmd->add_option("--data", data, "CIFAR-layout binary file")->required();
  icc_cmd->add_option("--variant", variant, "cifar10 | cifar100 | seg (default from the checkpoint task)");
  icc_cmd->add_option("--stage", stage, "1-based stage (default: last)");
  icc_cmd->add_option("--index", index, "sample index")->capture_default_str();
  icc_cmd->add_option("--out", csv, "c x c CSV");
  icc_cmd->add_option("--heatmap", heatmap, "min-max normalized 8-bit PGM (P2)");

  auto* synth_cmd = app.add_subcommand("synth-data", "write the configured synthetic splits as CIFAR binaries");
  synth_cmd->add_option("--config", config, "run config with a synth-cls or synth-seg data section")->required();
  synth_cmd->add_option("--out-train", out_train, "training split file")->required();
  synth_cmd->add_option("--out-test", out_test, "test split file")->required();
  synth_cmd->add_option("--seed", o.seed, "override the config seed");

  auto* verify_cmd = app.add_subcommand("verify", "run the oracle suite; exit 0 iff every check passes");
  verify_cmd->add_option("--seed", verify_seed, "seed of the random cases")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  if (train_cmd->parsed() || distill_cmd->parsed()) {
    auto cfg = load_run_config(config, o);
    apply_threads(threads, cfg.threads);
    auto [train, test] = load_datasets(cfg.data, cfg.seed, cfg.model.task);
    TrainResult result;
    Task task = cfg.model.task;
    if (train_cmd->parsed()) {
      if (cfg.teacher_model) cfg.train.model = *cfg.teacher_model;
      result = train_teacher(cfg.train, train, test, progress);
    } else {
      const auto t = Checkpoint::load(teacher);
      if (cfg.teacher_model && !(*cfg.teacher_model == t.spec)) {
        throw ConfigError("teacher_model does not match the teacher checkpoint's model spec");
      }
      cfg.train.distill = cfg.distill;
      result = distill(cfg.train, t, train, test, progress);
    }
    write_outputs(result, out, best, metrics);
    std::printf("%s=%.6f best=%.6f\n", metric_name(task), result.final_eval, result.best_eval);
    return 0;
  }

  if (eval_cmd->parsed()) {
    auto cfg = load_run_config(config, o);
    apply_threads(threads, cfg.threads);
    const auto c = Checkpoint::load(ckpt);
    auto model = c.restore();
    auto [train, test] = load_datasets(cfg.data, cfg.seed, model.spec().task);
    std::printf("%s=%.6f\n", metric_name(model.spec().task), evaluate(model, test));
    return 0;
  }

  if (icc_cmd->parsed()) {
    apply_threads(threads, std::nullopt);
    const auto c = Checkpoint::load(ckpt);
    auto model = c.restore();
    const auto v = variant.empty() ? default_variant(c.spec) : parse_cifar_variant(variant);
    auto ds = load_cifar_raw(data, v, Split::test, v == CifarVariant::seg ? c.spec.num_classes : 0);
    if (c.normalization) standardize(ds, *c.normalization);
    if (index < 0 || index >= ds.count) throw ConfigError("--index out of range for " + std::to_string(ds.count) + " samples");
    const int s = stage == 0 ? c.spec.num_stages() : stage;
    if (s < 1 || s > c.spec.num_stages()) throw ConfigError("--stage " + std::to_string(s) + " does not exist");
    NoGradGuard no_grad;
    const std::int64_t idx[] = {index};
    const auto b = make_batch(ds, idx);
    const auto out_taps = model.forward_with_taps(b.images, Mode::eval);
    const auto g = icc_matrix(ickd::select(out_taps.taps.at(s), 0));
    write_icc(g, csv, heatmap);
    std::printf("channels=%lld stage=%d\n", static_cast<long long>(g.channel_count()), s);
    return 0;
  }

  if (synth_cmd->parsed()) {
    auto cfg = load_run_config(config, o);
    auto d = cfg.data;
    d.standardize = false;
    if (d.source != "synth-cls" && d.source != "synth-seg") {
      throw ConfigError("synth-data needs data.source synth-cls or synth-seg");
    }
    auto [train, test] = load_datasets(d, cfg.seed, cfg.model.task);
    const auto v = d.source == "synth-cls" ? (d.classes <= 10 ? CifarVariant::cifar10 : CifarVariant::cifar100)
                                           : CifarVariant::seg;
    save_cifar(train, out_train, v);
    save_cifar(test, out_test, v);
    std::printf("train=%lld test=%lld fingerprint=%s\n", static_cast<long long>(train.count),
                static_cast<long long>(test.count), train.fingerprint().c_str());
    return 0;
  }

  if (verify_cmd->parsed()) {
    apply_threads(threads, std::nullopt);
    bool ok = true;
    for (const auto& check : verify_all(verify_seed)) {
      std::printf("%s\n", format_check(check).c_str());
      ok = ok && check.passed;
    }
    std::printf("%s\n", ok ? "verify: all checks passed" : "verify: FAILED");
    return ok ? 0 : 1;
  }
  return 2;
}

std::string one_line(std::string s) {
  for (auto& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ickd::Error& e) {
    std::fprintf(stderr, "error kind=%s message=%s\n", e.kind().c_str(), one_line(e.what()).c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error kind=InternalError message=%s\n", one_line(e.what()).c_str());
  }
  return 1;
}
