#pragma once

#include "trapnet/autodiff.hpp"
#include "trapnet/dataset.hpp"
#include "trapnet/optim.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace trapnet {

enum class LayerKind { Conv2d, MaxPool2d, AvgPool2d, Dense };
enum class Activation { None, Relu };

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  Index units = 0;   // output channels (conv) or width (dense)
  Index kernel = 0;  // conv kernel or pooling window
  Index stride = 1;
  Padding padding = Padding::Valid;
  Activation activation = Activation::None;

  static LayerSpec conv(Index channels, Index kernel, Activation act = Activation::Relu, Index stride = 1,
                        Padding padding = Padding::Valid) {
    return {LayerKind::Conv2d, channels, kernel, stride, padding, act};
  }
  static LayerSpec maxpool(Index window, Index stride) {
    return {LayerKind::MaxPool2d, 0, window, stride, Padding::Valid, Activation::None};
  }
  static LayerSpec avgpool(Index window, Index stride) {
    return {LayerKind::AvgPool2d, 0, window, stride, Padding::Valid, Activation::None};
  }
  static LayerSpec dense(Index units, Activation act = Activation::Relu) {
    return {LayerKind::Dense, units, 0, 1, Padding::Valid, act};
  }

  bool has_weights() const { return kind == LayerKind::Conv2d || kind == LayerKind::Dense; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
  std::string name;
  Shape input_shape;  // per sample: [C, H, W] or [D]
  int num_classes = 0;
  std::vector<LayerSpec> layers;

  /// Per-sample output shape of every layer. Throws ShapeError when
  /// consecutive layers do not compose or the last width != num_classes.
  std::vector<Shape> output_shapes() const;
  void validate() const { (void)output_shapes(); }
  /// Weight and bias shapes keyed by parameter name.
  std::map<std::string, Shape> parameter_shapes() const;
  Index parameter_count() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

std::string weight_name(std::size_t layer);
std::string bias_name(std::size_t layer);

/// Sequential classifier F(x) producing logits; softmax is applied by the loss.
class Model {
 public:
  using ParamMap = std::map<std::string, Parameter<float>>;

  /// Kaiming-uniform weights, zero biases.
  Model(ModelSpec spec, std::uint64_t init_seed);
  Model(ModelSpec spec, ParamMap params);

  const ModelSpec& spec() const { return spec_; }
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }
  int trained_epochs() const { return trained_epochs_; }
  void add_trained_epochs(int n) { trained_epochs_ += n; }
  void set_trained_epochs(int n) { trained_epochs_ = n; }

  Index num_layers() const { return Index(spec_.layers.size()); }
  /// The activation fed to the final dense layer (g(x) by default).
  Index default_feature_layer() const;
  /// Flattened width of a layer's output; throws on an invalid index.
  Index layer_width(Index layer) const;

  struct Trace {
    std::vector<Var<float>> layers;
    std::map<std::string, Var<float>> params;
    Var<float> logits() const { return layers.back(); }
  };

  /// Records a forward pass. Parameters are bound as leaves that require
  /// gradients only when `trainable` is set.
  Trace forward(Tape<float>& tape, Var<float> x, bool trainable = false) const;

 private:
  ModelSpec spec_;
  ParamMap params_;
  int trained_epochs_ = 0;
};

Model build_mnist_cnn(std::uint64_t init_seed = 0);
Model build_mlp(Index input_dim, const std::vector<Index>& hidden, int num_classes, std::uint64_t init_seed = 0);

/// Logits for a batch, evaluated in chunks without recording gradients.
Tensor logits(const Model& model, const Tensor& x);
/// Softmax confidences, rows sum to one.
Tensor probabilities(const Model& model, const Tensor& x);
std::vector<int> predict(const Model& model, const Tensor& x);
double accuracy(const Model& model, const Dataset& data);

/// Concatenated, flattened activations of `layers` ([N, width]); an empty
/// layer list selects default_feature_layer().
Tensor feature_representation(const Model& model, const Tensor& x, std::span<const Index> layers = {});
Index feature_width(const Model& model, std::span<const Index> layers);

struct TrainConfig {
  int epochs = 5;
  Index batch = 32;
  OptimizerConfig optimizer{};
  std::uint64_t seed = 0;
};

struct EpochStats {
  double loss = 0;
  double accuracy = 0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
};

/// Mini-batch cross-entropy training, reshuffled every epoch from `seed`.
TrainLog train(Model& model, const Dataset& data, const TrainConfig& config);

/// As above, but epoch k trains on epoch_data(k); optimizer state carries
/// across epochs.
TrainLog train(Model& model, const std::function<Dataset(int epoch)>& epoch_data, const TrainConfig& config);

}  // namespace trapnet
