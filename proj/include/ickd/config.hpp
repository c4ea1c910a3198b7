#pragma once

// Run configuration documents (JSON). Every section is optional; unknown keys
// are rejected with their full key path. A `train.preset` fills epochs, batch
// size and schedule before the explicit train keys are applied.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ickd/data.hpp"
#include "ickd/distill.hpp"
#include "ickd/nn.hpp"
#include "ickd/trainer.hpp"

namespace ickd {

struct DataConfig {
  // synth-cls | synth-seg | cifar10 | cifar100 | cifar-seg
  std::string source = "synth-cls";
  // Dataset identity for the synthetic generators; defaults to the run seed.
  std::optional<std::uint64_t> seed;
  int classes = 10;
  int per_class = 500;
  int test_per_class = 100;
  int count = 2000;
  int test_count = 500;
  double noise = 0.35;
  double contrast = 0.12;
  std::string train_path;
  std::string test_path;
  // Keep only the first `limit` training records (0 keeps all).
  std::int64_t limit = 0;
  bool standardize = true;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::optional<int> threads;
  ModelSpec model;
  std::optional<ModelSpec> teacher_model;
  DataConfig data;
  TrainConfig train;
  std::string preset = "desk";
  // Defaults apply when the section is absent; only `distill` runs use it.
  DistillConfig distill;
};

struct KeyDoc {
  std::string path;
  std::string default_value;
  std::string description;
};

// Every accepted key with its default, in document order.
const std::vector<KeyDoc>& config_keys();
std::string config_help();

// Throws ConfigError on syntax errors (with line and column), unknown keys
// (naming the key path) and semantic violations.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

// Train/test splits described by the data section, standardized with
// training statistics when data.standardize is set.
std::pair<Dataset, Dataset> load_datasets(const DataConfig& data, std::uint64_t run_seed, Task task);

// ICKD_THREADS, when set to a positive integer.
std::optional<int> env_threads();

}  // namespace ickd
