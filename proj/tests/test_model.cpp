#include <doctest.h>

#include "support.hpp"

#include "trapnet/model.hpp"
#include "trapnet/rng.hpp"

using namespace trapnet;

TEST_CASE("MNIST CNN shapes and parameter count") {
  const Model m = build_mnist_cnn(1);
  Rng rng(0);
  const Tensor x = Tensor::uniform({4, 1, 28, 28}, 0.f, 1.f, rng);
  CHECK(logits(m, x).shape() == Shape{4, 10});
  CHECK(m.spec().parameter_count() == 416 + 12832 + 262656 + 5130);
  CHECK(m.layer_width(0) == 16 * 24 * 24);
  CHECK(m.layer_width(1) == 2304);
  CHECK(m.layer_width(3) == 512);
  CHECK(m.default_feature_layer() == 4);
  CHECK(m.layer_width(m.default_feature_layer()) == 512);
  const std::vector<Index> layers{1, 4};
  CHECK(feature_representation(m, x, layers).shape() == Shape{4, 2304 + 512});
  CHECK_THROWS(m.layer_width(6));
}

TEST_CASE("probabilities sum to one") {
  const Model m = build_mlp(16, {8}, 3, 4);
  const auto data = test_support::blobs();
  const Tensor p = probabilities(m, data.inputs);
  CHECK((p.matrix().rowwise().sum().array() - 1.f).abs().maxCoeff() < 1e-5f);
}

TEST_CASE("inconsistent model specs are rejected") {
  ModelSpec spec;
  spec.input_shape = {16};
  spec.num_classes = 3;
  spec.layers = {LayerSpec::dense(8), LayerSpec::dense(4, Activation::None)};
  CHECK_THROWS_AS(spec.validate(), ShapeError);
  spec.layers = {LayerSpec::conv(4, 3), LayerSpec::dense(3)};
  CHECK_THROWS_AS(spec.validate(), ShapeError);
}

TEST_CASE("MLP learns separated blobs in 200 steps") {
  const auto all = synth_blobs(3, 16, 200, 11);
  std::vector<Index> even, odd;
  for (Index i = 0; i < all.size(); ++i) (i % 2 ? odd : even).push_back(i);
  Model m = build_mlp(16, {32}, 3, 5);
  TrainConfig cfg;
  cfg.epochs = 20;  // 300 rows / 32 per batch: 10 steps an epoch
  cfg.optimizer.lr = 1e-2;
  cfg.seed = 6;
  const auto log = train(m, all.subset(even), cfg);
  CHECK(log.epochs.size() == 20);
  CHECK(log.epochs.back().loss < log.epochs.front().loss);
  CHECK(accuracy(m, all.subset(odd)) >= 0.95);
  CHECK(m.trained_epochs() == 20);
}

TEST_CASE("synthetic blobs are deterministic and class ordered") {
  const auto a = synth_blobs(4, 8, 10, 3);
  const auto b = synth_blobs(4, 8, 10, 3);
  CHECK(a.inputs == b.inputs);
  CHECK(a.labels == b.labels);
  CHECK(a.labels[0] == 0);
  CHECK(a.labels[39] == 3);
  CHECK(a.inputs.array().minCoeff() >= 0.f);
  CHECK(a.inputs.array().maxCoeff() <= 1.f);
  CHECK_FALSE(synth_blobs(4, 8, 10, 4).inputs == a.inputs);
  CHECK_THROWS(synth_blobs(5, 2, 10, 3));
}
