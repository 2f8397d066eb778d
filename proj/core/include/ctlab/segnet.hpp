#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctlab/grid.hpp"
#include "ctlab/preprocess.hpp"

namespace ctlab {

/// Topology of the encoder/decoder network. Level l has base_width * 2^l
/// filters; the bottleneck sits at level `depth`.
struct UNetConfig {
  int input_channels = 4;
  int output_channels = 2;
  int depth = 4;
  int base_width = 16;
  int image_side = 320;

  void validate() const;
  int width_at(int level) const { return base_width << level; }
  int layer_count() const { return 5 * depth + 3; }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// Dense NCHW tensor.
template <class T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T{})
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
  T* sample(int i) { return data.data() + i * sample_size(); }
  const T* sample(int i) const { return data.data() + i * sample_size(); }
  T& at(int i, int ch, int y, int x) { return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }
  T at(int i, int ch, int y, int x) const { return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Square convolution, weights laid out [out][in][ky][kx].
template <class T>
struct ConvLayer {
  std::string name;
  int out_channels = 0;
  int in_channels = 0;
  int kernel = 3;
  std::vector<T> weight;
  std::vector<T> bias;

  std::size_t fan_in() const { return static_cast<std::size_t>(in_channels) * kernel * kernel; }
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

/// Every learnable tensor of one network.
template <class T>
struct ParamSet {
  UNetConfig config;
  std::uint64_t init_seed = 0;
  std::vector<ConvLayer<T>> layers;

  std::size_t parameter_count() const;
  bool all_finite() const;
  /// Flat view across layers: each layer's weights, then its biases.
  T& flat(std::size_t index);
  T flat(std::size_t index) const;
  /// Throws ShapeError unless layer shapes follow `config`.
  void validate() const;

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    out.config = config;
    out.init_seed = init_seed;
    for (const auto& l : layers) {
      out.layers.push_back({l.name, l.out_channels, l.in_channels, l.kernel,
                            std::vector<U>(l.weight.begin(), l.weight.end()),
                            std::vector<U>(l.bias.begin(), l.bias.end())});
    }
    return out;
  }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

/// Same shapes as `p`, every value zero.
template <class T>
ParamSet<T> zeros_like(const ParamSet<T>& p);

/// He-uniform weights (limit sqrt(6 / fan_in)), zero biases. Deterministic in seed.
template <class T>
ParamSet<T> init_unet(const UNetConfig& config, std::uint64_t seed);

/// Probabilities strictly inside (0, 1), shape B x output_channels x S x S.
template <class T>
Tensor<T> forward(const ParamSet<T>& params, const Tensor<T>& batch, int jobs = 1);

/// Probability clamp used by the loss.
inline constexpr double kLossEpsilon = 1e-7;

/// Mean binary cross-entropy over every element; target must be one-hot
/// across channels.
template <class T>
double bce_loss(const Tensor<T>& pred, const Tensor<T>& target);

template <class T>
struct Gradient {
  double loss = 0.0;
  ParamSet<T> grad;
};

/// Loss and its gradient with respect to every parameter.
template <class T>
Gradient<T> backward(const ParamSet<T>& params, const Tensor<T>& batch, const Tensor<T>& target,
                     int jobs = 1);

enum class OptimizerKind { adam, sgd };
const char* to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

template <class T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {}

  void step(ParamSet<T>& params, const ParamSet<T>& grad);

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-7;

 private:
  OptimizerKind kind_;
  double lr_;
  long steps_ = 0;
  std::vector<double> m_, v_;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 45;
  int max_epochs = 200;
  int patience = 10;
  bool shuffle = true;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  int jobs = 1;

  void validate() const;
};

enum class StopReason { early_stop, max_epochs };
const char* to_string(StopReason r);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int stopped_epoch = 0;
  int best_epoch = 0;
  StopReason stop_reason = StopReason::max_epochs;

  /// "epoch,train_loss,val_loss" with one row per epoch.
  std::string csv() const;
  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

template <class T>
struct TrainResult {
  ParamSet<T> params;
  TrainLog log;
};

/// Mini-batch training with validation-loss early stopping. Returns the
/// parameters of the best validation epoch.
template <class T>
TrainResult<T> train(ParamSet<T> params, std::span<const Sample> train_set,
                     std::span<const Sample> val_set, const TrainConfig& cfg);

/// Stacks sample inputs (or targets) into a batch tensor.
template <class T>
Tensor<T> stack_inputs(std::span<const Sample* const> samples);
template <class T>
Tensor<T> stack_targets(std::span<const Sample* const> samples);

/// Mean loss over a whole set, evaluated in chunks of `chunk` samples.
template <class T>
double dataset_loss(const ParamSet<T>& params, std::span<const Sample> set, int chunk = 32,
                    int jobs = 1);

/// Channel 0 of the network output, thresholded with >=.
BinaryGrid predict_mask(const ParamSet<float>& params, const Sample& sample, double threshold = 0.5);
std::vector<BinaryGrid> predict_masks(const ParamSet<float>& params, std::span<const Sample> samples,
                                      double threshold = 0.5, int chunk = 32, int jobs = 1);

}  // namespace ctlab
