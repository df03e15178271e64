#include "trapnet/model.hpp"

#include "trapnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace trapnet {

namespace {

constexpr Index kInferenceChunk = 32;

void check_input(const ModelSpec& spec, const Shape& batch_shape) {
  Shape sample(batch_shape.begin() + std::min<std::size_t>(1, batch_shape.size()), batch_shape.end());
  if (batch_shape.size() < 2 || sample != spec.input_shape)
    throw ShapeError("model '" + spec.name + "': input " + to_string(batch_shape) + " does not match [N]+" +
                     to_string(spec.input_shape));
}

}  // namespace

std::string weight_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".weight"; }
std::string bias_name(std::size_t layer) { return "layer" + std::to_string(layer) + ".bias"; }

std::vector<Shape> ModelSpec::output_shapes() const {
  if (num_classes <= 0) throw ShapeError("model spec: num_classes must be positive");
  if (layers.empty()) throw ShapeError("model spec: no layers");
  for (Index d : input_shape)
    if (d <= 0) throw ShapeError("model spec: bad input shape " + to_string(input_shape));
  std::vector<Shape> shapes;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "model spec layer " + std::to_string(i) + ": ";
    switch (l.kind) {
      case LayerKind::Conv2d: {
        if (cur.size() != 3) throw ShapeError(where + "conv needs [C,H,W] input, got " + to_string(cur));
        if (l.units <= 0 || l.kernel <= 0 || l.stride <= 0) throw ShapeError(where + "zero-width conv");
        Index oh, ow;
        if (l.padding == Padding::Valid) {
          if (l.kernel > cur[1] || l.kernel > cur[2]) throw ShapeError(where + "kernel larger than input " + to_string(cur));
          oh = (cur[1] - l.kernel) / l.stride + 1;
          ow = (cur[2] - l.kernel) / l.stride + 1;
        } else {
          oh = (cur[1] + l.stride - 1) / l.stride;
          ow = (cur[2] + l.stride - 1) / l.stride;
        }
        cur = {l.units, oh, ow};
        break;
      }
      case LayerKind::MaxPool2d:
      case LayerKind::AvgPool2d:
        if (cur.size() != 3) throw ShapeError(where + "pooling needs [C,H,W] input, got " + to_string(cur));
        if (l.kernel <= 0 || l.stride <= 0 || l.kernel > cur[1] || l.kernel > cur[2])
          throw ShapeError(where + "pooling window invalid for " + to_string(cur));
        cur = {cur[0], (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
        break;
      case LayerKind::Dense:
        if (l.units <= 0) throw ShapeError(where + "zero-width dense layer");
        cur = {l.units};
        break;
    }
    shapes.push_back(cur);
  }
  if (layers.back().kind != LayerKind::Dense || layers.back().units != num_classes)
    throw ShapeError("model spec: final layer width must equal num_classes (" + std::to_string(num_classes) + ")");
  return shapes;
}

std::map<std::string, Shape> ModelSpec::parameter_shapes() const {
  const auto shapes = output_shapes();
  std::map<std::string, Shape> out;
  Shape in = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (l.kind == LayerKind::Conv2d) {
      out[weight_name(i)] = {l.units, in[0], l.kernel, l.kernel};
      out[bias_name(i)] = {l.units};
    } else if (l.kind == LayerKind::Dense) {
      out[weight_name(i)] = {l.units, numel(in)};
      out[bias_name(i)] = {l.units};
    }
    in = shapes[i];
  }
  return out;
}

Index ModelSpec::parameter_count() const {
  Index total = 0;
  for (const auto& [name, shape] : parameter_shapes()) total += numel(shape);
  return total;
}

Model::Model(ModelSpec spec, std::uint64_t init_seed) : spec_(std::move(spec)) {
  Rng rng(init_seed);
  for (const auto& [name, shape] : spec_.parameter_shapes()) {
    Parameter<float> p;
    if (name.ends_with(".bias")) {
      p.value = Tensor::zeros(shape);
    } else {
      const Index fan_in = numel(shape) / shape[0];
      const float bound = float(std::sqrt(6.0 / double(fan_in)));
      p.value = Tensor::uniform(shape, -bound, bound, rng);
    }
    params_.emplace(name, std::move(p));
  }
}

Model::Model(ModelSpec spec, ParamMap params) : spec_(std::move(spec)), params_(std::move(params)) {
  const auto expected = spec_.parameter_shapes();
  if (expected.size() != params_.size()) throw ShapeError("model: parameter set does not match spec");
  for (const auto& [name, shape] : expected) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("model: missing parameter " + name);
    if (it->second.value.shape() != shape)
      throw ShapeError("model: parameter " + name + " has shape " + to_string(it->second.value.shape()) + ", expected " +
                       to_string(shape));
  }
}

Index Model::default_feature_layer() const {
  if (spec_.layers.size() < 2) throw PreconditionError("model: no hidden layer before the output layer");
  return Index(spec_.layers.size()) - 2;
}

Index Model::layer_width(Index layer) const {
  if (layer < 0 || layer >= num_layers())
    throw PreconditionError("model: invalid layer index " + std::to_string(layer) + " (model has " +
                            std::to_string(num_layers()) + " layers)");
  return numel(spec_.output_shapes()[std::size_t(layer)]);
}

Model::Trace Model::forward(Tape<float>& tape, Var<float> x, bool trainable) const {
  check_input(spec_, x.shape());
  Trace trace;
  for (const auto& [name, p] : params_) trace.params[name] = tape.leaf(p.value, trainable);
  Var<float> h = x;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerSpec& l = spec_.layers[i];
    switch (l.kind) {
      case LayerKind::Conv2d:
        h = conv2d(h, trace.params.at(weight_name(i)), trace.params.at(bias_name(i)), {l.stride, l.padding});
        break;
      case LayerKind::MaxPool2d: h = maxpool2d(h, l.kernel, l.stride); break;
      case LayerKind::AvgPool2d: h = avgpool2d(h, l.kernel, l.stride); break;
      case LayerKind::Dense: h = linear(h, trace.params.at(weight_name(i)), trace.params.at(bias_name(i))); break;
    }
    if (l.activation == Activation::Relu) h = relu(h);
    trace.layers.push_back(h);
  }
  return trace;
}

Model build_mnist_cnn(std::uint64_t init_seed) {
  ModelSpec spec;
  spec.name = "mnist_cnn";
  spec.input_shape = {1, 28, 28};
  spec.num_classes = 10;
  spec.layers = {LayerSpec::conv(16, 5), LayerSpec::maxpool(2, 2), LayerSpec::conv(32, 5), LayerSpec::maxpool(2, 2),
                 LayerSpec::dense(512), LayerSpec::dense(10, Activation::None)};
  return Model(std::move(spec), init_seed);
}

Model build_mlp(Index input_dim, const std::vector<Index>& hidden, int num_classes, std::uint64_t init_seed) {
  if (hidden.empty()) throw PreconditionError("build_mlp: need at least one hidden layer");
  ModelSpec spec;
  spec.name = "mlp";
  spec.input_shape = {input_dim};
  spec.num_classes = num_classes;
  for (Index w : hidden) spec.layers.push_back(LayerSpec::dense(w));
  spec.layers.push_back(LayerSpec::dense(num_classes, Activation::None));
  return Model(std::move(spec), init_seed);
}

namespace {

template <typename Fn>
Tensor map_chunks(const Model& model, const Tensor& x, Index width, Fn&& fn) {
  check_input(model.spec(), x.shape());
  const Index n = x.dim(0);
  Tensor out(Shape{n, width});
  for (Index b = 0; b < n; b += kInferenceChunk) {
    const Index cnt = std::min(kInferenceChunk, n - b);
    Tape<float> tape;
    auto trace = model.forward(tape, tape.constant(x.rows(b, cnt)));
    out.matrix().middleRows(b, cnt) = fn(trace).matrix();
  }
  return out;
}

}  // namespace

Tensor logits(const Model& model, const Tensor& x) {
  return map_chunks(model, x, model.spec().num_classes,
                    [](const Model::Trace& t) -> const Tensor& { return t.logits().value(); });
}

Tensor probabilities(const Model& model, const Tensor& x) {
  Tensor z = logits(model, x);
  z.matrix() = detail::softmax_rows(z);
  return z;
}

std::vector<int> predict(const Model& model, const Tensor& x) {
  const Tensor z = logits(model, x);
  std::vector<int> out(std::size_t(z.dim(0)));
  auto m = z.matrix();
  for (Index i = 0; i < z.dim(0); ++i) {
    Index best;
    m.row(i).maxCoeff(&best);
    out[std::size_t(i)] = int(best);
  }
  return out;
}

double accuracy(const Model& model, const Dataset& data) {
  if (data.empty()) throw PreconditionError("accuracy: empty dataset");
  const auto pred = predict(model, data.inputs);
  Index hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return double(hits) / double(pred.size());
}

Index feature_width(const Model& model, std::span<const Index> layers) {
  if (layers.empty()) return model.layer_width(model.default_feature_layer());
  Index w = 0;
  for (Index l : layers) w += model.layer_width(l);
  return w;
}

Tensor feature_representation(const Model& model, const Tensor& x, std::span<const Index> layers) {
  std::vector<Index> sel(layers.begin(), layers.end());
  if (sel.empty()) sel.push_back(model.default_feature_layer());
  const Index width = feature_width(model, sel);
  return map_chunks(model, x, width, [&](const Model::Trace& t) {
    std::vector<Var<float>> parts;
    for (Index l : sel) parts.push_back(t.layers[std::size_t(l)]);
    return parts.size() == 1 ? flatten(parts[0]).value() : concat_columns(parts).value();
  });
}

TrainLog train(Model& model, const Dataset& data, const TrainConfig& config) {
  if (data.empty()) throw PreconditionError("train: empty dataset");
  return train(model, [&data](int) -> Dataset { return data; }, config);
}

TrainLog train(Model& model, const std::function<Dataset(int epoch)>& epoch_data, const TrainConfig& config) {
  TrainLog log;
  if (config.epochs <= 0) return log;

  Optimizer<float> opt(config.optimizer);
  std::vector<Parameter<float>*> order;
  for (auto& [name, p] : model.params()) order.push_back(&p);

  Rng rng(config.seed);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const Dataset data = epoch_data(epoch);
    if (data.empty()) throw PreconditionError("train: empty dataset");
    if (config.batch <= 0 || config.batch > data.size())
      throw PreconditionError("train: batch " + std::to_string(config.batch) + " larger than dataset of " +
                              std::to_string(data.size()));
    check_input(model.spec(), data.inputs.shape());
    std::vector<Index> perm(std::size_t(data.size()));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    double loss_sum = 0;
    Index hits = 0;
    for (Index b = 0; b < data.size(); b += config.batch) {
      const Index cnt = std::min(config.batch, data.size() - b);
      std::span<const Index> idx(perm.data() + b, std::size_t(cnt));
      Tensor xb = data.inputs.gather_rows(idx);
      std::vector<int> yb;
      yb.reserve(std::size_t(cnt));
      for (Index i : idx) yb.push_back(data.labels[std::size_t(i)]);

      Tape<float> tape;
      auto trace = model.forward(tape, tape.constant(std::move(xb)), true);
      Var<float> loss = cross_entropy(trace.logits(), std::span<const int>(yb));
      tape.backward(loss);
      loss_sum += double(loss.value()[0]) * double(cnt);
      auto z = trace.logits().value().matrix();
      for (Index i = 0; i < cnt; ++i) {
        Index best;
        z.row(i).maxCoeff(&best);
        hits += best == yb[std::size_t(i)];
      }
      for (auto& [name, p] : model.params()) p.grad = trace.params.at(name).grad();
      opt.step(order);
    }
    log.epochs.push_back({loss_sum / double(data.size()), double(hits) / double(data.size())});
    model.add_trained_epochs(1);
  }
  return log;
}

}  // namespace trapnet
