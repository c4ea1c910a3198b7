#include "ickd/nn.hpp"

#include <cmath>

#include "ickd/errors.hpp"
#include "ickd/ops.hpp"

namespace ickd {

std::string_view to_string(Task task) {
  return task == Task::classification ? "classification" : "dense";
}

Task parse_task(std::string_view text) {
  if (text == "classification") return Task::classification;
  if (text == "dense" || text == "dense-prediction") return Task::dense;
  throw ConfigError("unknown task '" + std::string(text) + "' (expected classification or dense)");
}

void ModelSpec::validate() const {
  if (stage_widths.empty()) throw ConfigError("model.stage_widths: at least one stage is required");
  for (int w : stage_widths) {
    if (w < 1) throw ConfigError("model.stage_widths: every width must be >= 1");
  }
  if (blocks_per_stage < 1) throw ConfigError("model.blocks_per_stage: must be >= 1");
  if (num_classes < 1) throw ConfigError("model.num_classes: must be >= 1");
  for (int d : input_shape) {
    if (d < 1) throw ConfigError("model.input_shape: every dimension must be >= 1");
  }
  const int factor = 1 << (num_stages() - 1);
  if (input_shape[1] % factor != 0 || input_shape[2] % factor != 0) {
    throw ConfigError("model.input_shape: height and width must be divisible by " + std::to_string(factor) +
                      " for " + std::to_string(num_stages()) + " stages");
  }
}

std::array<int, 2> ModelSpec::tap_extent(int stage) const {
  if (stage < 1 || stage > num_stages()) {
    throw ConfigError("stage " + std::to_string(stage) + " does not exist in a " + std::to_string(num_stages()) +
                      "-stage model");
  }
  const int factor = 1 << (stage - 1);
  return {input_shape[1] / factor, input_shape[2] / factor};
}

template <class T>
BatchNorm<T>::BatchNorm(std::int64_t channels, T momentum_, T epsilon_)
    : gamma(Tensor<T>::full({channels}, T(1))),
      beta(Tensor<T>::zeros({channels})),
      running_mean(Tensor<T>::zeros({channels})),
      running_var(Tensor<T>::full({channels}, T(1))),
      momentum(momentum_),
      epsilon(epsilon_) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <class T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  if (mode == Mode::eval) {
    return batch_norm_eval(x, gamma, beta, running_mean.data(), running_var.data(), epsilon);
  }
  std::vector<T> mu, var;
  auto y = batch_norm_train(x, gamma, beta, epsilon, &mu, &var);
  if (update_running_stats) {
    const T count = static_cast<T>(x.size() / x.dim(1));
    const T unbias = count / (count - T(1));
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < mu.size(); ++c) {
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mu[c];
      rv[c] = (T(1) - momentum) * rv[c] + momentum * var[c] * unbias;
    }
  }
  return y;
}

namespace {

template <class T>
Tensor<T> he_normal(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> values(static_cast<std::size_t>(numel(shape)));
  for (auto& v : values) v = static_cast<T>(rng.normal(0.0, stddev));
  auto t = Tensor<T>::from_data(shape, std::move(values));
  t.set_requires_grad(true);
  return t;
}

template <class T>
void append_bn(std::vector<NamedTensor<T>>& out, const std::string& prefix, const BatchNorm<T>& bn, bool buffers) {
  out.push_back({prefix + ".gamma", bn.gamma});
  out.push_back({prefix + ".beta", bn.beta});
  if (buffers) {
    out.push_back({prefix + ".running_mean", bn.running_mean});
    out.push_back({prefix + ".running_var", bn.running_var});
  }
}

}  // namespace

template <class T>
TransferLayer<T>::TransferLayer(std::int64_t in_channels, std::int64_t out_channels, Rng& rng)
    : conv_weight(he_normal<T>({out_channels, in_channels, 1, 1}, in_channels, rng)), bn(out_channels) {}

template <class T>
TransferLayer<T> TransferLayer<T>::identity(std::int64_t channels) {
  TransferLayer layer;
  std::vector<T> w(static_cast<std::size_t>(channels * channels), T(0));
  for (std::int64_t c = 0; c < channels; ++c) w[static_cast<std::size_t>(c * channels + c)] = T(1);
  layer.conv_weight = Tensor<T>::from_data({channels, channels, 1, 1}, std::move(w));
  layer.conv_weight.set_requires_grad(true);
  layer.bn = BatchNorm<T>(channels, T(0.1), T(0));
  return layer;
}

template <class T>
Tensor<T> TransferLayer<T>::apply(const Tensor<T>& features, Mode mode) {
  if (features.rank() != 4) {
    throw ShapeError("transfer layer: expected [N,c',h',w'] features, got " + to_string(features.shape()));
  }
  if (features.dim(1) != in_channels()) {
    throw ShapeError("transfer layer: expects " + std::to_string(in_channels()) + " input channels, got " +
                     std::to_string(features.dim(1)));
  }
  return bn.forward(conv2d(features, conv_weight, 1, 0), mode);
}

template <class T>
std::vector<NamedTensor<T>> TransferLayer<T>::parameters(const std::string& prefix) const {
  std::vector<NamedTensor<T>> out{{prefix + ".conv.weight", conv_weight}};
  append_bn(out, prefix + ".bn", bn, false);
  return out;
}

template <class T>
std::vector<NamedTensor<T>> TransferLayer<T>::state(const std::string& prefix) const {
  std::vector<NamedTensor<T>> out{{prefix + ".conv.weight", conv_weight}};
  append_bn(out, prefix + ".bn", bn, true);
  return out;
}

template <class T>
const Tensor<T>& FeatureTaps<T>::at(int stage) const {
  auto it = stages.find(stage);
  if (it == stages.end()) throw ConfigError("no feature tap for stage " + std::to_string(stage));
  return it->second;
}

template <class T>
Model<T> Model<T>::build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model model;
  model.spec_ = spec;
  Rng rng(derive_seed(seed, "model-init"));
  std::int64_t in_channels = spec.input_shape[0];
  for (int s = 0; s < spec.num_stages(); ++s) {
    const std::int64_t width = spec.stage_widths[static_cast<std::size_t>(s)];
    std::vector<Block> blocks;
    for (int b = 0; b < spec.blocks_per_stage; ++b) {
      blocks.push_back({he_normal<T>({width, in_channels, 3, 3}, in_channels * 9, rng), BatchNorm<T>(width)});
      in_channels = width;
    }
    model.stages_.push_back(std::move(blocks));
  }
  const std::int64_t k = spec.num_classes;
  if (spec.task == Task::classification) {
    model.head_weight_ = he_normal<T>({k, in_channels}, in_channels, rng);
  } else {
    model.head_weight_ = he_normal<T>({k, in_channels, 1, 1}, in_channels, rng);
  }
  model.head_bias_ = Tensor<T>::zeros({k});
  model.head_bias_.set_requires_grad(true);
  return model;
}

template <class T>
ForwardResult<T> Model<T>::forward_with_taps(const Tensor<T>& batch, Mode mode) {
  const auto& in = spec_.input_shape;
  if (batch.rank() != 4 || batch.dim(1) != in[0] || batch.dim(2) != in[1] || batch.dim(3) != in[2]) {
    throw ShapeError("model expects [N," + std::to_string(in[0]) + "," + std::to_string(in[1]) + "," +
                     std::to_string(in[2]) + "] input, got " + to_string(batch.shape()));
  }
  ForwardResult<T> result;
  Tensor<T> x = batch;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    if (s > 0) x = max_pool2d(x, 2, 2);
    for (auto& block : stages_[s]) x = relu(block.bn.forward(conv2d(x, block.weight, 1, 1), mode));
    result.taps.stages.emplace(static_cast<int>(s) + 1, x);
  }
  if (spec_.task == Task::classification) {
    result.logits = add_bias(matmul(global_avg_pool(x), transpose(head_weight_)), head_bias_);
  } else {
    auto per_pixel = add_bias(conv2d(x, head_weight_, 1, 0), head_bias_);
    result.logits = upsample_nearest(per_pixel, static_cast<int>(in[1] / x.dim(2)));
  }
  return result;
}

template <class T>
std::vector<NamedTensor<T>> Model<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t s = 0; s < stages_.size(); ++s)
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      const std::string prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      out.push_back({prefix + ".conv.weight", stages_[s][b].weight});
      append_bn(out, prefix + ".bn", stages_[s][b].bn, false);
    }
  out.push_back({"head.weight", head_weight_});
  out.push_back({"head.bias", head_bias_});
  return out;
}

template <class T>
std::vector<NamedTensor<T>> Model<T>::state() const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t s = 0; s < stages_.size(); ++s)
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      const std::string prefix = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      out.push_back({prefix + ".conv.weight", stages_[s][b].weight});
      append_bn(out, prefix + ".bn", stages_[s][b].bn, true);
    }
  out.push_back({"head.weight", head_weight_});
  out.push_back({"head.bias", head_bias_});
  return out;
}

template <class T>
void Model<T>::set_trainable(bool trainable) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(trainable);
}

template <class T>
void Model<T>::set_update_running_stats(bool update) {
  for (auto& stage : stages_)
    for (auto& block : stage) block.bn.update_running_stats = update;
}

template class BatchNorm<float>;
template class BatchNorm<double>;
template class TransferLayer<float>;
template class TransferLayer<double>;
template struct FeatureTaps<float>;
template struct FeatureTaps<double>;
template class Model<float>;
template class Model<double>;

}  // namespace ickd
