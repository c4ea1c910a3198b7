#pragma once

// Layers, the 1x1-conv + BN transfer layer, and the plain conv-BN-ReLU model
// family whose per-stage outputs are exposed as feature taps.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ickd/runtime.hpp"
#include "ickd/tensor.hpp"

namespace ickd {

enum class Mode { train, eval };
enum class Task { classification, dense };

std::string_view to_string(Task task);
Task parse_task(std::string_view text);

struct ModelSpec {
  Task task = Task::classification;
  std::vector<int> stage_widths;
  int blocks_per_stage = 1;
  int num_classes = 10;
  std::array<int, 3> input_shape{3, 32, 32};  // channels, height, width

  // Throws ConfigError naming the violated constraint.
  void validate() const;
  int num_stages() const { return static_cast<int>(stage_widths.size()); }
  // Spatial extent {h, w} of the 1-based stage output.
  std::array<int, 2> tap_extent(int stage) const;
  bool operator==(const ModelSpec&) const = default;
};

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::int64_t channels, T momentum = T(0.1), T epsilon = T(1e-5));

  // Train mode normalizes with batch statistics and, unless frozen, folds
  // them into the running estimates (unbiased variance). Eval mode uses the
  // running estimates.
  Tensor<T> forward(const Tensor<T>& x, Mode mode);

  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);
  bool update_running_stats = true;
};

// C_l: 1x1 convolution followed by BN, no activation. Maps c' student
// channels to c teacher channels and leaves the spatial extent unchanged.
template <class T>
class TransferLayer {
 public:
  TransferLayer() = default;
  TransferLayer(std::int64_t in_channels, std::int64_t out_channels, Rng& rng);
  // Identity channel mixing, gamma 1, beta 0, running stats (0, 1) and BN
  // epsilon 0, so eval mode reproduces its input exactly.
  static TransferLayer identity(std::int64_t channels);

  Tensor<T> apply(const Tensor<T>& features, Mode mode);

  std::int64_t in_channels() const { return conv_weight.dim(1); }
  std::int64_t out_channels() const { return conv_weight.dim(0); }
  std::vector<NamedTensor<T>> parameters(const std::string& prefix) const;
  std::vector<NamedTensor<T>> state(const std::string& prefix) const;

  Tensor<T> conv_weight;  // [c, c', 1, 1]
  BatchNorm<T> bn;
};

template <class T>
Tensor<T> transfer_apply(TransferLayer<T>& layer, const Tensor<T>& features, Mode mode) {
  return layer.apply(features, mode);
}

// Stage outputs keyed by 1-based stage index.
template <class T>
struct FeatureTaps {
  std::map<int, Tensor<T>> stages;

  bool has(int stage) const { return stages.count(stage) != 0; }
  const Tensor<T>& at(int stage) const;
  int count() const { return static_cast<int>(stages.size()); }
};

template <class T>
struct ForwardResult {
  Tensor<T> logits;
  FeatureTaps<T> taps;
};

template <class T>
class Model {
 public:
  // He fan-in normal init for convs, gamma 1 / beta 0 for BN, zero biases.
  static Model build(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }

  // Classification logits are [N, classes]; dense logits [N, classes, H, W]
  // at input resolution. Tap s is the output of stage s; the last tap feeds
  // the global average pool of a classification head.
  ForwardResult<T> forward_with_taps(const Tensor<T>& batch, Mode mode);
  Tensor<T> forward(const Tensor<T>& batch, Mode mode) { return forward_with_taps(batch, mode).logits; }

  std::vector<NamedTensor<T>> parameters() const;
  // Parameters and BN running statistics, in checkpoint order.
  std::vector<NamedTensor<T>> state() const;

  void set_trainable(bool trainable);
  void set_update_running_stats(bool update);

 private:
  struct Block {
    Tensor<T> weight;
    BatchNorm<T> bn;
  };

  ModelSpec spec_;
  std::vector<std::vector<Block>> stages_;
  Tensor<T> head_weight_;
  Tensor<T> head_bias_;
};

}  // namespace ickd
