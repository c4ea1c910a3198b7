#include "ickd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "ickd/errors.hpp"

namespace ickd {

namespace {

constexpr std::int64_t kCifarSide = 32;
constexpr std::int64_t kCifarPixels = 3 * kCifarSide * kCifarSide;

struct RecordLayout {
  std::int64_t header;  // label bytes before the pixels
  int classes;
};

RecordLayout record_layout(CifarVariant variant, int classes) {
  switch (variant) {
    case CifarVariant::cifar10: return {1, 10};
    case CifarVariant::cifar100: return {2, 100};
    case CifarVariant::seg:
      if (classes < 2 || classes > 256) throw ConfigError("seg records need a class count in [2, 256]");
      return {kCifarSide * kCifarSide, classes};
  }
  throw InternalError("unhandled CIFAR variant");
}

}  // namespace

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

CifarVariant parse_cifar_variant(std::string_view text) {
  if (text == "cifar10") return CifarVariant::cifar10;
  if (text == "cifar100") return CifarVariant::cifar100;
  if (text == "seg") return CifarVariant::seg;
  throw ConfigError("unknown CIFAR variant '" + std::string(text) + "' (expected cifar10, cifar100 or seg)");
}

std::span<const float> Dataset::image(std::int64_t index) const {
  return std::span<const float>(images).subspan(static_cast<std::size_t>(index * image_size()),
                                                static_cast<std::size_t>(image_size()));
}

std::span<const std::int32_t> Dataset::label(std::int64_t index) const {
  return std::span<const std::int32_t>(labels).subspan(static_cast<std::size_t>(index * label_size()),
                                                       static_cast<std::size_t>(label_size()));
}

std::string Dataset::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  };
  mix(images.data(), images.size() * sizeof(float));
  mix(labels.data(), labels.size() * sizeof(std::int32_t));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void Dataset::validate() const {
  if (count < 1) throw FormatError("dataset is empty");
  if (static_cast<std::int64_t>(images.size()) != count * image_size()) {
    throw FormatError("dataset image buffer does not match its shape");
  }
  if (static_cast<std::int64_t>(labels.size()) != count * label_size()) {
    throw FormatError("dataset label buffer does not match its shape");
  }
  for (auto l : labels) {
    if (l < 0 || l >= class_count) {
      throw FormatError("label " + std::to_string(l) + " outside [0," + std::to_string(class_count) + ")");
    }
  }
}

Normalization channel_statistics(const Dataset& dataset) {
  Normalization stats;
  const std::int64_t plane = dataset.height * dataset.width;
  const double n = static_cast<double>(dataset.count * plane);
  for (std::int64_t c = 0; c < dataset.channels; ++c) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < dataset.count; ++i) {
      const float* p = dataset.images.data() + (i * dataset.channels + c) * plane;
      for (std::int64_t j = 0; j < plane; ++j) acc += p[j];
    }
    const double mu = acc / n;
    double sq = 0.0;
    for (std::int64_t i = 0; i < dataset.count; ++i) {
      const float* p = dataset.images.data() + (i * dataset.channels + c) * plane;
      for (std::int64_t j = 0; j < plane; ++j) sq += (p[j] - mu) * (p[j] - mu);
    }
    stats.mean.push_back(mu);
    stats.stddev.push_back(std::sqrt(sq / n));
  }
  return stats;
}

void standardize(Dataset& dataset, const Normalization& stats) {
  if (dataset.normalization) throw ConfigError("dataset is already standardized");
  if (static_cast<std::int64_t>(stats.mean.size()) != dataset.channels ||
      static_cast<std::int64_t>(stats.stddev.size()) != dataset.channels) {
    throw ConfigError("normalization statistics do not match the channel count");
  }
  const std::int64_t plane = dataset.height * dataset.width;
  for (std::int64_t c = 0; c < dataset.channels; ++c) {
    const double sd = stats.stddev[static_cast<std::size_t>(c)];
    const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
    const double mu = stats.mean[static_cast<std::size_t>(c)];
    for (std::int64_t i = 0; i < dataset.count; ++i) {
      float* p = dataset.images.data() + (i * dataset.channels + c) * plane;
      for (std::int64_t j = 0; j < plane; ++j) p[j] = static_cast<float>((p[j] - mu) * inv);
    }
  }
  dataset.normalization = stats;
}

Dataset load_cifar_raw(const std::filesystem::path& path, CifarVariant variant, Split split, int classes) {
  const RecordLayout layout = record_layout(variant, classes);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IOError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::int64_t record = layout.header + kCifarPixels;
  if (bytes.empty() || static_cast<std::int64_t>(bytes.size()) % record != 0) {
    throw FormatError(path.string() + ": length " + std::to_string(bytes.size()) +
                      " is not a positive multiple of the record size " + std::to_string(record));
  }
  Dataset ds;
  ds.task = variant == CifarVariant::seg ? Task::dense : Task::classification;
  ds.split = split;
  ds.count = static_cast<std::int64_t>(bytes.size()) / record;
  ds.class_count = layout.classes;
  ds.images.resize(static_cast<std::size_t>(ds.count * kCifarPixels));
  ds.labels.reserve(static_cast<std::size_t>(ds.count * ds.label_size()));
  for (std::int64_t i = 0; i < ds.count; ++i) {
    const unsigned char* rec = bytes.data() + i * record;
    if (variant == CifarVariant::seg) {
      for (std::int64_t j = 0; j < layout.header; ++j) ds.labels.push_back(rec[j]);
    } else {
      // cifar100 stores coarse then fine; the fine label is the last header byte.
      ds.labels.push_back(rec[layout.header - 1]);
    }
    const unsigned char* px = rec + layout.header;
    float* dst = ds.images.data() + i * kCifarPixels;
    for (std::int64_t j = 0; j < kCifarPixels; ++j) dst[j] = static_cast<float>(px[j] / 255.0);
  }
  for (auto l : ds.labels) {
    if (l >= ds.class_count) {
      throw FormatError(path.string() + ": label byte " + std::to_string(l) + " >= class count " +
                        std::to_string(ds.class_count));
    }
  }
  return ds;
}

Dataset load_cifar(const std::filesystem::path& path, CifarVariant variant, Split split,
                   const std::optional<Normalization>& stats, int classes) {
  Dataset ds = load_cifar_raw(path, variant, split, classes);
  standardize(ds, stats ? *stats : channel_statistics(ds));
  return ds;
}

void save_cifar(const Dataset& dataset, const std::filesystem::path& path, CifarVariant variant) {
  if (dataset.normalization) throw ConfigError("only unstandardized datasets can be written as CIFAR records");
  if (dataset.channels != 3 || dataset.height != kCifarSide || dataset.width != kCifarSide) {
    throw ConfigError("CIFAR records hold 3x32x32 images");
  }
  const bool dense = variant == CifarVariant::seg;
  if (dense != (dataset.task == Task::dense)) throw ConfigError("record variant does not match the dataset task");
  const RecordLayout layout = record_layout(variant, dense ? dataset.class_count : 0);
  if (dataset.class_count > layout.classes) throw ConfigError("too many classes for the record variant");
  std::vector<unsigned char> bytes;
  bytes.reserve(static_cast<std::size_t>(dataset.count * (layout.header + kCifarPixels)));
  for (std::int64_t i = 0; i < dataset.count; ++i) {
    const auto labels = dataset.label(i);
    if (variant == CifarVariant::cifar100) bytes.push_back(0);  // coarse label unused
    for (auto l : labels) bytes.push_back(static_cast<unsigned char>(l));
    for (float v : dataset.image(i)) {
      const double clamped = std::clamp(static_cast<double>(v), 0.0, 1.0);
      bytes.push_back(static_cast<unsigned char>(std::lround(clamped * 255.0)));
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IOError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IOError("short write to " + path.string());
}

Dataset synth_cls(const SynthClsParams& params, Split split) {
  if (params.classes < 2) throw ConfigError("synth_cls: classes must be >= 2");
  if (params.per_class < 1) throw ConfigError("synth_cls: per_class must be >= 1");
  if (!(params.noise >= 0.0)) throw ConfigError("synth_cls: noise must be >= 0");
  constexpr int side = 32;
  constexpr int plane = side * side;
  constexpr int waves = 3;

  // Each prototype channel is a sum of a few plane waves around mid-grey.
  Rng proto_rng(derive_seed(params.seed, "synth-cls/prototypes"));
  std::vector<float> prototypes(static_cast<std::size_t>(params.classes * 3 * plane));
  for (int k = 0; k < params.classes; ++k)
    for (int c = 0; c < 3; ++c) {
      double fx[waves], fy[waves], phase[waves];
      for (int j = 0; j < waves; ++j) {
        fx[j] = static_cast<double>(proto_rng.integer(-4, 4));
        fy[j] = static_cast<double>(proto_rng.integer(1, 4));
        phase[j] = proto_rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
      float* dst = prototypes.data() + (k * 3 + c) * plane;
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          double v = 0.0;
          for (int j = 0; j < waves; ++j) {
            v += std::sin(2.0 * std::numbers::pi * (fx[j] * x + fy[j] * y) / side + phase[j]);
          }
          dst[y * side + x] = static_cast<float>(0.5 + params.contrast * v / std::sqrt(double(waves)));
        }
    }

  Dataset ds;
  ds.task = Task::classification;
  ds.split = split;
  ds.class_count = params.classes;
  ds.count = static_cast<std::int64_t>(params.classes) * params.per_class;
  ds.images.resize(static_cast<std::size_t>(ds.count * 3 * plane));
  ds.labels.resize(static_cast<std::size_t>(ds.count));
  Rng noise_rng(derive_seed(params.seed, std::string("synth-cls/noise/") + std::string(to_string(split))));
  for (std::int64_t i = 0; i < ds.count; ++i) {
    const int k = static_cast<int>(i % params.classes);
    ds.labels[static_cast<std::size_t>(i)] = k;
    const float* proto = prototypes.data() + k * 3 * plane;
    float* dst = ds.images.data() + i * 3 * plane;
    for (int j = 0; j < 3 * plane; ++j) {
      const double v = proto[j] + (params.noise > 0.0 ? noise_rng.normal(0.0, params.noise) : 0.0);
      dst[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return ds;
}

Dataset synth_seg(const SynthSegParams& params, Split split, std::vector<std::vector<Rect>>* layout) {
  if (params.classes < 2) throw ConfigError("synth_seg: classes must be >= 2");
  if (params.count < 1) throw ConfigError("synth_seg: count must be >= 1");
  if (params.canvas < 8) throw ConfigError("synth_seg: canvas must be >= 8");
  if (!(params.noise >= 0.0)) throw ConfigError("synth_seg: noise must be >= 0");
  if (params.rect_count_override && *params.rect_count_override < 0) {
    throw ConfigError("synth_seg: rectangle count override must be >= 0");
  }
  const int side = params.canvas;
  const int plane = side * side;

  // Class 0 is the background colour; classes 1.. own the rectangle colours.
  Rng palette_rng(derive_seed(params.seed, "synth-seg/palette"));
  std::vector<double> palette(static_cast<std::size_t>(params.classes * 3));
  for (auto& v : palette) v = palette_rng.uniform(0.3, 0.7);

  Dataset ds;
  ds.task = Task::dense;
  ds.split = split;
  ds.class_count = params.classes;
  ds.count = params.count;
  ds.height = side;
  ds.width = side;
  ds.images.resize(static_cast<std::size_t>(ds.count * 3 * plane));
  ds.labels.assign(static_cast<std::size_t>(ds.count * plane), 0);
  if (layout) layout->assign(static_cast<std::size_t>(ds.count), {});

  Rng rng(derive_seed(params.seed, std::string("synth-seg/images/") + std::string(to_string(split))));
  const int min_side = std::max(4, side / 5);
  const int max_side = std::max(min_side, side / 2);
  for (std::int64_t i = 0; i < ds.count; ++i) {
    const int rects = params.rect_count_override ? *params.rect_count_override : static_cast<int>(rng.integer(1, 3));
    std::int32_t* labels = ds.labels.data() + i * plane;
    for (int r = 0; r < rects; ++r) {
      Rect rect{};
      rect.height = static_cast<int>(rng.integer(min_side, max_side));
      rect.width = static_cast<int>(rng.integer(min_side, max_side));
      rect.top = static_cast<int>(rng.integer(0, side - rect.height));
      rect.left = static_cast<int>(rng.integer(0, side - rect.width));
      rect.label = static_cast<int>(rng.integer(1, params.classes - 1));
      for (int y = rect.top; y < rect.top + rect.height; ++y)
        for (int x = rect.left; x < rect.left + rect.width; ++x) labels[y * side + x] = rect.label;
      if (layout) (*layout)[static_cast<std::size_t>(i)].push_back(rect);
    }
    float* img = ds.images.data() + i * 3 * plane;
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < plane; ++p) {
        const double base = palette[static_cast<std::size_t>(labels[p] * 3 + c)];
        const double v = base + (params.noise > 0.0 ? rng.normal(0.0, params.noise) : 0.0);
        img[c * plane + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  return ds;
}

std::vector<std::vector<std::int64_t>> batch_plan(std::int64_t count, std::int64_t batch_size,
                                                  std::uint64_t epoch_seed, bool shuffle) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<std::int64_t> order(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  if (shuffle) {
    Rng rng(derive_seed(epoch_seed, "batch-order"));
    rng.shuffle(order);
  }
  std::vector<std::vector<std::int64_t>> plan;
  for (std::int64_t start = 0; start < count; start += batch_size) {
    const auto end = std::min(count, start + batch_size);
    plan.emplace_back(order.begin() + start, order.begin() + end);
  }
  return plan;
}

Batch make_batch(const Dataset& dataset, std::span<const std::int64_t> indices) {
  Batch batch;
  batch.indices.assign(indices.begin(), indices.end());
  const auto n = static_cast<std::int64_t>(indices.size());
  std::vector<float> images;
  images.reserve(static_cast<std::size_t>(n * dataset.image_size()));
  batch.labels.reserve(static_cast<std::size_t>(n * dataset.label_size()));
  for (auto idx : indices) {
    if (idx < 0 || idx >= dataset.count) throw ShapeError("batch index out of range");
    const auto img = dataset.image(idx);
    images.insert(images.end(), img.begin(), img.end());
    const auto lab = dataset.label(idx);
    batch.labels.insert(batch.labels.end(), lab.begin(), lab.end());
  }
  batch.images = Tensor<float>::from_data({n, dataset.channels, dataset.height, dataset.width}, std::move(images));
  return batch;
}

std::vector<Batch> batches(const Dataset& dataset, std::int64_t batch_size, std::uint64_t epoch_seed, bool shuffle) {
  std::vector<Batch> out;
  for (const auto& group : batch_plan(dataset.count, batch_size, epoch_seed, shuffle)) {
    out.push_back(make_batch(dataset, group));
  }
  return out;
}

void augment_batch(Batch& batch, Rng& rng) {
  constexpr int pad = 4;
  const auto& shape = batch.images.shape();
  const auto n = shape[0], c = shape[1], h = shape[2], w = shape[3];
  auto data = batch.images.mutable_data();
  std::vector<float> sample(static_cast<std::size_t>(c * h * w));
  for (std::int64_t i = 0; i < n; ++i) {
    const bool flip = rng.coin();
    const auto dy = rng.integer(-pad, pad);
    const auto dx = rng.integer(-pad, pad);
    float* img = data.data() + i * c * h * w;
    std::copy_n(img, sample.size(), sample.begin());
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          const auto sy = y + dy;
          const auto sx0 = x + dx;
          const auto sx = flip ? (w - 1 - sx0) : sx0;
          const bool inside = sy >= 0 && sy < h && sx0 >= 0 && sx0 < w;
          img[(ch * h + y) * w + x] = inside ? sample[static_cast<std::size_t>((ch * h + sy) * w + sx)] : 0.0f;
        }
  }
}

}  // namespace ickd
