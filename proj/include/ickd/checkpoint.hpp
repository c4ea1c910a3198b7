#pragma once

// Checkpoint file layout (all integers little-endian):
//   bytes 0-3    magic "ICKD"
//   bytes 4-7    format version (uint32)
//   bytes 8-15   metadata length L (uint64)
//   L bytes      UTF-8 JSON metadata: model spec, seed, epoch, dataset
//                fingerprint, normalization, and the tensor index
//                (name, shape, offset in floats, dtype "f32")
//   payload      float32 values of every indexed tensor, in index order
//
// Transfer-layer tensors live under the "distill/" name prefix and are
// ignored when a model is restored for evaluation.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ickd/data.hpp"
#include "ickd/distill.hpp"
#include "ickd/nn.hpp"

namespace ickd {

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
  bool operator==(const NamedArray&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelSpec spec;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string dataset_fingerprint;
  std::optional<Normalization> normalization;
  std::string kind = "final";
  double eval = 0.0;
  std::vector<NamedArray> tensors;

  static Checkpoint capture(const Model<float>& model, const TransferLayers<float>* transfer = nullptr);
  // Builds a model from `spec` and loads every non-"distill/" tensor.
  Model<float> restore() const;
  void load_into(Model<float>& model) const;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  bool operator==(const Checkpoint&) const = default;
};

// FNV-1a 64 over every state tensor of the model (names, shapes, values).
std::uint64_t state_checksum(const Model<float>& model);

}  // namespace ickd
