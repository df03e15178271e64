// Small closed-form and degenerate cases for each module.

#include <doctest.h>

#include "support.hpp"

#include "trapnet/attacks.hpp"
#include "trapnet/detection.hpp"
#include "trapnet/eval.hpp"
#include "trapnet/idx.hpp"
#include "trapnet/rng.hpp"

#include <fstream>
#include <numeric>
#include <set>

using namespace trapnet;

namespace {

// Two-class linear model: z0 = 0, z1 = x0 + x1 - 1.
Model linear_toy() {
  ModelSpec spec;
  spec.name = "toy";
  spec.input_shape = {2};
  spec.num_classes = 2;
  spec.layers = {LayerSpec::dense(2, Activation::None)};
  Model::ParamMap p;
  p[weight_name(0)].value = Tensor({2, 2}, {0.f, 0.f, 1.f, 1.f});
  p[bias_name(0)].value = Tensor({2}, {0.f, -1.f});
  return Model(spec, p);
}

AdversarialBatch as_attack(const Tensor& x, int target) {
  AdversarialBatch b;
  b.x_adv = x;
  b.targets.assign(std::size_t(x.dim(0)), target);
  b.success.assign(std::size_t(x.dim(0)), true);
  return b;
}

}  // namespace

TEST_CASE("matmul with the identity") {
  Tape<float> tape;
  auto i2 = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  auto a = tape.constant(Tensor({2, 2}, {3, -1, 2, 5}));
  const Tensor out = matmul(i2, a).value();
  CHECK(out == a.value());
}

TEST_CASE("SGD oracle and zero gradient") {
  Parameter<float> p{Tensor({1}, 1.f), Tensor({1}, 1.f)};
  Optimizer<float> opt({OptimizerConfig::Method::Sgd, 0.1});
  Parameter<float>* ps[] = {&p};
  opt.step(ps);
  CHECK(p.value[0] == doctest::Approx(0.9f));
  opt.step(ps);  // gradient was zeroed by the previous step
  CHECK(p.value[0] == doctest::Approx(0.9f));
}

TEST_CASE("MLP forward shape and zero-weight uniform output") {
  Model m = build_mlp(2, {8}, 3);
  Rng rng(1);
  CHECK(logits(m, Tensor::uniform({5, 2}, 0.f, 1.f, rng)).shape() == Shape{5, 3});

  Model z = build_mlp(2, {1}, 3);
  for (auto& [name, p] : z.params()) p.value.array().setZero();
  const Tensor probs = probabilities(z, Tensor::uniform({4, 2}, 0.f, 1.f, rng));
  CHECK((probs.array() - 1.f / 3).abs().maxCoeff() < 1e-6f);
}

TEST_CASE("features are deterministic and zero epochs leave parameters alone") {
  const auto data = test_support::blobs();
  Model m = build_mlp(16, {8}, 3, 2);
  const Tensor x = concat_rows(data.inputs.rows(0, 1), data.inputs.rows(0, 1));
  const Tensor f = feature_representation(m, x);
  CHECK(f.rows(0, 1) == f.rows(1, 1));

  const Model before = m;
  TrainConfig cfg;
  cfg.epochs = 0;
  train(m, data, cfg);
  for (const auto& [name, p] : before.params()) CHECK(p.value == m.params().at(name).value);
}

TEST_CASE("accuracy against the model's own predictions is 1") {
  auto data = test_support::blobs();
  const Model m = build_mlp(16, {8}, 3, 2);
  data.labels = predict(m, data.inputs);
  CHECK(accuracy(m, data) == 1.0);
}

TEST_CASE("full-width square masks the whole image") {
  CHECK(make_single_square({1, 28, 28}, 0, 1, 28).masked_count() == 784);
  CHECK(make_single_square({1, 28, 28}, 0, 4).pattern == make_single_square({1, 28, 28}, 0, 4).pattern);
}

TEST_CASE("zero intensity spread fills squares with the mean") {
  MultiSquareOptions o;
  o.intensity = {0.3f, 0.f};
  const Trapdoor t = make_multi_square({1, 28, 28}, 0, 2, o);
  for (Index i = 0; i < t.mask.size(); ++i)
    if (t.mask[i] != 0.f) CHECK(t.pattern[i] == doctest::Approx(0.3f));
}

TEST_CASE("distinct seeds place squares differently") {
  std::set<std::vector<float>> masks;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Trapdoor t = make_multi_square({1, 28, 28}, 0, s);
    masks.insert(std::vector<float>(t.mask.data(), t.mask.data() + t.mask.size()));
  }
  CHECK(masks.size() == 100);
}

TEST_CASE("a singleton set is the base trapdoor") {
  TrapdoorRecipe r;
  const auto set = make_trapdoor_set({1, 28, 28}, r, 1, SetVariant::Locations, 8);
  REQUIRE(set.size() == 1);
  const Trapdoor base = make_trapdoor({1, 28, 28}, r, derive_seed(8, "trapdoor", "base"));
  CHECK(set.trapdoors[0].mask == base.mask);
  CHECK(set.trapdoors[0].pattern == base.pattern);
}

TEST_CASE("poison counts use the ceiling") {
  const auto& fx = test_support::blob_trapdoor();
  CHECK(poison_dataset(fx.train.slice(200, 100), fx.registry, 0.5, 1).size() == 150);
  CHECK(poison_dataset(fx.train.slice(200, 10), fx.registry, 0.01, 1).size() == 11);
}

TEST_CASE("signature of identical samples is their activation") {
  const auto& fx = test_support::blob_trapdoor();
  const auto& t = fx.registry.at(0).trapdoors[0];
  std::vector<Index> rows(40, 250);  // a class-1 row
  const Dataset same = fx.held.subset(rows);
  const auto sig = compute_signature(fx.model, t, same);
  const Tensor g = feature_representation(fx.model, inject(same.inputs.rows(0, 1), t));
  for (std::size_t i = 0; i < sig.vector.size(); ++i) CHECK(sig.vector[i] == doctest::Approx(g[Index(i)]));
  CHECK(similarity(sig, fx.model, inject(same.inputs.row(0), t)) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("percentile thresholds on degenerate pools") {
  std::vector<double> grid(100);
  for (int i = 0; i < 100; ++i) grid[std::size_t(i)] = i / 100.0;
  const double phi = percentile_threshold(grid, 0.05);
  CHECK(phi >= 0.94);
  CHECK(phi <= 0.95);
  std::vector<double> sym(101);
  for (int i = 0; i < 101; ++i) sym[std::size_t(i)] = i / 100.0;
  CHECK(percentile_threshold(sym, 0.5) == doctest::Approx(0.5).epsilon(0.02));
  const std::vector<double> flat(50, 0.7);
  CHECK(percentile_threshold(flat, 0.05) == 0.7);
}

TEST_CASE("neuron subset sizes use the ceiling") {
  const Model m = build_mnist_cnn(1);
  const std::vector<Index> layer{4};
  CHECK(sample_neuron_subset(m, layer, 0.05, 1).size() == 26);
  CHECK(sample_neuron_subset(m, layer, 1.0, 1).size() == 512);
}

TEST_CASE("attack degenerate cases") {
  const auto& fx = test_support::blob_trapdoor();
  const Tensor x = fx.held.inputs.rows(250, 10);
  const std::vector<int> targets(10, 2);

  CHECK(fgsm(fx.model, x, targets, 0.0).x_adv == x);

  AttackConfig one;
  one.iterations = 1;
  one.random_start = false;
  one.eps = 0.1;
  one.step_size = 0.05;
  CHECK(pgd(fx.model, x, targets, one).x_adv == fgsm(fx.model, x, targets, 0.05).x_adv);

  AttackConfig s;
  s.method = AttackMethod::Spsa;
  s.spsa.iterations = 0;
  s.random_start = false;
  CHECK(spsa(fx.model, x, targets, s).x_adv == x);

  AttackConfig v;
  v.method = AttackMethod::Vault;
  v.adaptive.probe_count = 0;
  CHECK_THROWS(vault_attack(fx.model, fx.held, x, targets, v));
}

TEST_CASE("oracle attack with zero weight is PGD") {
  const auto& fx = test_support::blob_trapdoor();
  const Detector det = build_detector(fx.model, fx.registry, fx.held);
  const Tensor x = fx.held.inputs.rows(250, 10);
  const std::vector<int> targets(10, 0);
  AttackConfig c;
  c.eps = 0.2;
  c.iterations = 10;
  c.seed = 4;
  c.adaptive.distance_weight = 0;
  const auto oracle = oracle_signature_attack(fx.model, x, targets, det.signatures, c);
  CHECK(oracle.x_adv == pgd(fx.model, x, targets, c).x_adv);
}

TEST_CASE("CW finds the distance to a linear boundary") {
  const Model m = linear_toy();
  const Tensor x({1, 2}, {0.3f, 0.3f});
  const std::vector<int> target{1};
  AttackConfig c;
  c.method = AttackMethod::Cw;
  const auto adv = cw_l2(m, x, target, c);
  REQUIRE(adv.success[0]);
  const double analytic = 0.4 / std::sqrt(2.0);
  CHECK(adv.norms[0].l2 == doctest::Approx(analytic).epsilon(0.1));
}

TEST_CASE("elastic-net with a large beta gives sparser perturbations") {
  const auto& fx = test_support::blob_trapdoor();
  const Tensor x = fx.held.inputs.rows(250, 10);
  const std::vector<int> targets(10, 2);
  AttackConfig c;
  c.method = AttackMethod::ElasticNet;
  c.en.binary_steps = 5;
  c.en.iterations = 200;
  c.en.lr = 0.01;
  auto l0 = [&](double beta) {
    c.en.beta = beta;
    const Tensor d = Tensor(x.shape(), Tensor::Array(elastic_net(fx.model, x, targets, c).x_adv.array() - x.array()));
    return (d.array().abs() > 1e-6f).count();
  };
  CHECK(l0(0.05) < l0(0.0));
}

TEST_CASE("AUC and summary oracles") {
  const std::vector<double> b{0.1, 0.2}, a{0.15, 0.3};
  CHECK(roc_auc(b, a) == 0.75);
  CHECK(roc_auc(b, b) == 0.5);
  const std::vector<double> far{5, 6};
  CHECK(roc_auc(b, far) == 1.0);

  const auto flat = summarize(std::vector<double>(30, 0.4), "flat");
  for (int p : kSummaryPercentiles) CHECK(flat.percentile(p) == 0.4);
  std::vector<double> grid(101);
  for (int i = 0; i <= 100; ++i) grid[std::size_t(i)] = i / 100.0;
  const auto s = summarize(grid, "grid");
  CHECK(s.percentile(5) == doctest::Approx(0.05).epsilon(0.2));
  CHECK(s.percentile(50) == doctest::Approx(0.50).epsilon(0.02));
  CHECK(s.percentile(95) == doctest::Approx(0.95).epsilon(0.02));
}

TEST_CASE("detection rate controls") {
  const auto& fx = test_support::blob_trapdoor();
  const Detector det = calibrate(build_detector(fx.model, fx.registry, fx.held), fx.model, fx.held, 0.05);
  const Tensor trapped = inject(fx.held.inputs.rows(200, 200), fx.registry.at(0).trapdoors[0]);
  CHECK(detection_rate_at_fpr(det, fx.model, as_attack(trapped, 0), fx.held, 0.05) >= 0.9);

  std::vector<Index> zeros;
  const auto pred = predict(fx.model, fx.held.inputs);
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == 0) zeros.push_back(Index(i));
  const Tensor benign = fx.held.inputs.gather_rows(zeros);
  CHECK(detection_rate_at_fpr(det, fx.model, as_attack(benign, 0), fx.held, 0.05) <= 0.05 + 1.0 / double(zeros.size()));
}

TEST_CASE("theorem check on the trapdoor itself") {
  const auto& fx = test_support::blob_trapdoor();
  const Detector det = build_detector(fx.model, fx.registry, fx.held);
  const Tensor src = fx.held.inputs.rows(200, 200);
  const Tensor trapped = inject(src, fx.registry.at(0).trapdoors[0]);
  auto attack = as_attack(trapped, 0);
  const auto pred = predict(fx.model, trapped);
  for (std::size_t i = 0; i < pred.size(); ++i) attack.success[i] = pred[i] == 0;
  const auto r = theorem_check(fx.model, fx.registry, det, src, attack, fx.held.slice(200, 200));
  CHECK(r.sigma_hat == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(r.nu_hat == doctest::Approx(r.mu_hat).epsilon(0.05));
  CHECK(r.holds);
}

TEST_CASE("unlearning removes the blob trapdoor") {
  const auto& fx = test_support::blob_trapdoor();
  UnlearnConfig u;
  u.lr = 1e-2;
  u.max_epochs = 10;
  TrainConfig t;
  t.seed = 5;
  const auto r = unlearn_trapdoor(fx.model, fx.registry, fx.train, fx.held, u, t, 6);
  CHECK(r.injection_success.at(0) <= 0.10);
  CHECK(accuracy(r.model, fx.held) >= 0.9);
}

TEST_CASE("IDX with two images and count mismatch") {
  test_support::TempDir dir;
  auto put = [&](const char* name, const std::vector<unsigned char>& b) {
    std::ofstream(dir.path / name, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
  };
  put("img", {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 51, 102, 255, 0, 0, 204});
  put("lab", {0, 0, 8, 1, 0, 0, 0, 2, 4, 9});
  put("lab1", {0, 0, 8, 1, 0, 0, 0, 1, 4});
  put("badmagic", {0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 51, 102, 255, 0, 0, 204});
  const Dataset d = load_idx(dir.path / "img", dir.path / "lab");
  CHECK(d.size() == 2);
  CHECK(d.inputs.at({1, 0, 0, 0}) == 1.f);
  CHECK(d.inputs.at({1, 0, 1, 1}) == doctest::Approx(0.8f));
  CHECK(d.labels == std::vector<int>{4, 9});
  CHECK_THROWS_AS(load_idx(dir.path / "img", dir.path / "lab1"), FormatError);
  CHECK_THROWS_WITH(load_idx(dir.path / "badmagic", dir.path / "lab"), doctest::Contains("offset 0"));
}

TEST_CASE("one blob per class") {
  const auto d = synth_blobs(3, 4, 1, 1);
  CHECK(d.size() == 3);
  CHECK(d.labels == std::vector<int>{0, 1, 2});
}
