#include "ickd/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "ickd/errors.hpp"

namespace ickd {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

json to_json(const ModelSpec& spec) {
  return json{{"task", std::string(to_string(spec.task))},
              {"stage_widths", spec.stage_widths},
              {"blocks_per_stage", spec.blocks_per_stage},
              {"num_classes", spec.num_classes},
              {"input_shape", spec.input_shape}};
}

ModelSpec model_spec_from_json(const json& j) {
  ModelSpec spec;
  spec.task = parse_task(j.at("task").get<std::string>());
  spec.stage_widths = j.at("stage_widths").get<std::vector<int>>();
  spec.blocks_per_stage = j.at("blocks_per_stage").get<int>();
  spec.num_classes = j.at("num_classes").get<int>();
  spec.input_shape = j.at("input_shape").get<std::array<int, 3>>();
  spec.validate();
  return spec;
}

Checkpoint Checkpoint::capture(const Model<float>& model, const TransferLayers<float>* transfer) {
  Checkpoint ckpt;
  ckpt.spec = model.spec();
  for (const auto& [name, t] : model.state()) ckpt.tensors.push_back({name, t.shape(), t.to_vector()});
  if (transfer) {
    for (const auto& [stage, layer] : *transfer) {
      for (const auto& [name, t] : layer.state("distill/stage" + std::to_string(stage))) {
        ckpt.tensors.push_back({name, t.shape(), t.to_vector()});
      }
    }
  }
  return ckpt;
}

void Checkpoint::load_into(Model<float>& model) const {
  if (!(model.spec() == spec)) throw ConfigError("checkpoint model spec does not match the target model");
  for (auto& [name, t] : model.state()) {
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedArray& a) { return a.name == name; });
    if (it == tensors.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (it->shape != t.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + to_string(it->shape) + ", expected " +
                        to_string(t.shape()));
    }
    auto dst = t.mutable_data();
    std::copy(it->values.begin(), it->values.end(), dst.begin());
  }
}

Model<float> Checkpoint::restore() const {
  auto model = Model<float>::build(spec, 0);
  load_into(model);
  return model;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    if (numel(t.shape) != static_cast<std::int64_t>(t.values.size())) {
      throw FormatError("tensor '" + t.name + "' values do not match its shape");
    }
    index.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"dtype", "f32"}});
    offset += t.values.size();
  }
  json meta{{"model", to_json(spec)},
            {"seed", seed},
            {"epoch", epoch},
            {"dataset", dataset_fingerprint},
            {"kind", kind},
            {"eval", eval},
            {"tensors", std::move(index)}};
  if (normalization) {
    meta["normalization"] = {{"mean", normalization->mean}, {"std", normalization->stddev}};
  } else {
    meta["normalization"] = nullptr;
  }
  const std::string text = meta.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + text.size() + offset * 4);
  auto put = [&out](const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  };
  put("ICKD", 4);
  const std::uint32_t version = kVersion;
  put(&version, sizeof version);
  const std::uint64_t meta_len = text.size();
  put(&meta_len, sizeof meta_len);
  put(text.data(), text.size());
  for (const auto& t : tensors) put(t.values.data(), t.values.size() * sizeof(float));
  return out;
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "ICKD", 4) != 0) throw FormatError("not an ICKD checkpoint");
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, sizeof version);
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  std::uint64_t meta_len = 0;
  std::memcpy(&meta_len, bytes.data() + 8, sizeof meta_len);
  if (meta_len > bytes.size() - 16) throw FormatError("truncated checkpoint metadata");
  const std::string text(reinterpret_cast<const char*>(bytes.data() + 16), meta_len);
  const auto payload = bytes.subspan(16 + meta_len);

  Checkpoint ckpt;
  try {
    const json meta = json::parse(text);
    ckpt.spec = model_spec_from_json(meta.at("model"));
    ckpt.seed = meta.at("seed").get<std::uint64_t>();
    ckpt.epoch = meta.at("epoch").get<int>();
    ckpt.dataset_fingerprint = meta.at("dataset").get<std::string>();
    ckpt.kind = meta.at("kind").get<std::string>();
    ckpt.eval = meta.at("eval").get<double>();
    if (!meta.at("normalization").is_null()) {
      ckpt.normalization = Normalization{meta["normalization"].at("mean").get<std::vector<double>>(),
                                         meta["normalization"].at("std").get<std::vector<double>>()};
    }
    std::uint64_t expected = 0;
    for (const auto& entry : meta.at("tensors")) {
      NamedArray t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      if (entry.at("dtype").get<std::string>() != "f32") throw FormatError("unsupported dtype for '" + t.name + "'");
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (offset != expected) throw FormatError("tensor '" + t.name + "' is not stored in index order");
      const auto n = static_cast<std::uint64_t>(numel(t.shape));
      if ((offset + n) * sizeof(float) > payload.size()) throw FormatError("truncated payload for '" + t.name + "'");
      t.values.resize(n);
      std::memcpy(t.values.data(), payload.data() + offset * sizeof(float), n * sizeof(float));
      expected = offset + n;
      ckpt.tensors.push_back(std::move(t));
    }
    if (expected * sizeof(float) != payload.size()) throw FormatError("payload length does not match the tensor index");
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
  }
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IOError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IOError("short write to " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IOError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::uint64_t state_checksum(const Model<float>& model) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& [name, t] : model.state()) {
    mix(name.data(), name.size());
    mix(t.shape().data(), t.shape().size() * sizeof(std::int64_t));
    mix(t.data().data(), t.data().size() * sizeof(float));
  }
  return h;
}

}  // namespace ickd
