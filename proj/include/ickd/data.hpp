#pragma once

// Datasets: CIFAR binary records and seeded synthetic generators for
// classification and toy dense prediction, plus deterministic batching.
//
// CIFAR record layouts (all bytes, pixels as R plane, G plane, B plane, each
// row-major 32x32):
//   cifar10   label, 3072 pixels
//   cifar100  coarse label, fine label, 3072 pixels (fine label is used)
//   seg       1024 per-pixel labels (row-major), 3072 pixels

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ickd/nn.hpp"
#include "ickd/runtime.hpp"
#include "ickd/tensor.hpp"

namespace ickd {

enum class Split { train, test };
enum class CifarVariant { cifar10, cifar100, seg };

std::string_view to_string(Split split);
CifarVariant parse_cifar_variant(std::string_view text);

struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
  bool operator==(const Normalization&) const = default;
};

struct Dataset {
  Task task = Task::classification;
  Split split = Split::train;
  std::int64_t count = 0;
  std::int64_t channels = 3;
  std::int64_t height = 32;
  std::int64_t width = 32;
  std::vector<float> images;         // [N,C,H,W]
  std::vector<std::int32_t> labels;  // [N] or [N,H,W]
  int class_count = 0;
  // Set once standardization has been applied.
  std::optional<Normalization> normalization;

  std::int64_t image_size() const { return channels * height * width; }
  std::int64_t label_size() const { return task == Task::classification ? 1 : height * width; }
  std::span<const float> image(std::int64_t index) const;
  std::span<const std::int32_t> label(std::int64_t index) const;
  // FNV-1a 64 over image and label bytes, as 16 hex digits.
  std::string fingerprint() const;
  // Throws FormatError when sizes or labels are inconsistent.
  void validate() const;
};

// Dataset-wide per-channel mean and population standard deviation.
Normalization channel_statistics(const Dataset& dataset);
// (x - mean) / std per channel. Throws ConfigError if already standardized.
void standardize(Dataset& dataset, const Normalization& stats);

// Pixels mapped to byte/255, no standardization. `classes` is only consulted
// for the seg variant (cifar10 has 10, cifar100 has 100).
Dataset load_cifar_raw(const std::filesystem::path& path, CifarVariant variant, Split split, int classes = 0);
// load_cifar_raw followed by standardization with `stats`, or with the file's
// own statistics when none are given (the training split).
Dataset load_cifar(const std::filesystem::path& path, CifarVariant variant, Split split,
                   const std::optional<Normalization>& stats = std::nullopt, int classes = 0);
// Writes an unstandardized [0,1] dataset as CIFAR records (values rounded to bytes).
void save_cifar(const Dataset& dataset, const std::filesystem::path& path, CifarVariant variant);

struct SynthClsParams {
  std::uint64_t seed = 0;
  int classes = 10;
  int per_class = 500;
  double noise = 0.35;
  // Amplitude of the class texture around mid-grey.
  double contrast = 0.12;
};

// Class k images are clamp(prototype_k + N(0, noise^2)) in [0,1]; sample i
// has class i % K. Prototypes depend only on the seed, noise on seed and split.
Dataset synth_cls(const SynthClsParams& params, Split split);

struct SynthSegParams {
  std::uint64_t seed = 0;
  int classes = 4;
  int count = 2000;
  int canvas = 32;
  double noise = 0.35;
  // Forces every image to hold exactly this many rectangles.
  std::optional<int> rect_count_override;
};

struct Rect {
  int top, left, height, width, label;
};

// Background class 0 with 1-3 painted rectangles of classes in [1,K); later
// rectangles are painted on top. The rectangles of image i are reported
// through `layout` when non-null.
Dataset synth_seg(const SynthSegParams& params, Split split, std::vector<std::vector<Rect>>* layout = nullptr);

struct Batch {
  std::vector<std::int64_t> indices;
  Tensor<float> images;
  std::vector<std::int32_t> labels;
};

// Index groups of one epoch; the last partial batch is kept.
std::vector<std::vector<std::int64_t>> batch_plan(std::int64_t count, std::int64_t batch_size,
                                                  std::uint64_t epoch_seed, bool shuffle);
Batch make_batch(const Dataset& dataset, std::span<const std::int64_t> indices);
std::vector<Batch> batches(const Dataset& dataset, std::int64_t batch_size, std::uint64_t epoch_seed, bool shuffle);

// Random horizontal flip and 4-pixel zero-pad-and-crop, per sample.
void augment_batch(Batch& batch, Rng& rng);

}  // namespace ickd
