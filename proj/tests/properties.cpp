// Fast property suite: no training beyond a few steps on synthetic data.
// Linked into unit_tests and into the acceptance binary (criterion 9).

#include <doctest.h>

#include "support.hpp"

#include "trapnet/attacks.hpp"
#include "trapnet/bundle.hpp"
#include "trapnet/eval.hpp"
#include "trapnet/idx.hpp"
#include "trapnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>

using namespace trapnet;
using T = BasicTensor<double>;

namespace {

using LossFn = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

// Relative error (vector norm) between tape gradients and central
// differences, worst over the leaves.
double finite_difference_error(std::vector<T> leaves, const LossFn& f, double h = 1e-3) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (auto& l : leaves) vars.push_back(tape.variable(l));
  tape.backward(f(tape, vars));
  double worst = 0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const T analytic = vars[k].grad();
    T numeric(leaves[k].shape());
    for (Index i = 0; i < leaves[k].size(); ++i) {
      auto eval = [&](double delta) {
        auto moved = leaves;
        moved[k][i] += delta;
        Tape<double> t2;
        std::vector<Var<double>> v2;
        for (auto& l : moved) v2.push_back(t2.constant(l));
        return f(t2, v2).value().item();
      };
      numeric[i] = (eval(h) - eval(-h)) / (2 * h);
    }
    const double diff = (analytic.array() - numeric.array()).matrix().norm();
    const double scale = std::max({analytic.array().matrix().norm(), numeric.array().matrix().norm(), 1e-8});
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

T randn(Shape s, Rng& rng, double sd = 1.0) {
  T t(std::move(s));
  std::normal_distribution<double> d(0, sd);
  for (Index i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

}  // namespace

TEST_SUITE("property") {

TEST_CASE("finite differences: three-layer MLP with cross-entropy") {
  Rng rng(1);
  const std::vector<int> labels{0, 2, 1, 2, 0};
  auto f = [&](Tape<double>&, std::vector<Var<double>>& v) {
    auto h1 = relu(linear(v[0], v[1], v[2]));
    auto h2 = relu(linear(h1, v[3], v[4]));
    return cross_entropy(linear(h2, v[5], v[6]), std::span<const int>(labels));
  };
  const double err = finite_difference_error({randn({5, 4}, rng), randn({6, 4}, rng, 0.5), randn({6}, rng, 0.1),
                                              randn({5, 6}, rng, 0.5), randn({5}, rng, 0.1), randn({3, 5}, rng, 0.5),
                                              randn({3}, rng, 0.1)},
                                             f);
  CHECK(err <= 1e-2);
}

TEST_CASE("finite differences: conv, pooling and tanh") {
  Rng rng(2);
  auto f = [](Tape<double>&, std::vector<Var<double>>& v) {
    auto c = tanh(conv2d(v[0], v[1], v[2]));
    auto p = maxpool2d(c, 2, 2);
    auto q = avgpool2d(relu(conv2d(v[0], v[1], v[2], {1, Padding::Same})), 2, 2);
    return sum(mul(flatten(p), flatten(p))) + mean(q);
  };
  CHECK(finite_difference_error({randn({2, 2, 6, 6}, rng), randn({3, 2, 3, 3}, rng, 0.5), randn({3}, rng, 0.1)}, f) <=
        1e-2);
}

TEST_CASE("finite differences: margin loss and cosine similarity") {
  Rng rng(3);
  const std::vector<int> targets{1, 0, 3};
  auto f = [&](Tape<double>&, std::vector<Var<double>>& v) {
    return sum(margin_loss(v[0], std::span<const int>(targets), 0.5)) + sum(cosine_similarity(v[1], v[2]));
  };
  CHECK(finite_difference_error({randn({3, 4}, rng), randn({3, 5}, rng), randn({5}, rng)}, f) <= 1e-2);
}

TEST_CASE("attack outputs stay in the box and within the L-inf budget") {
  const auto data = test_support::blobs();
  const Model model = build_mlp(data.inputs.dim(1), {16}, data.num_classes, 5);
  const Tensor x = data.inputs.rows(0, 12);
  std::vector<int> targets;
  for (Index i = 0; i < 12; ++i) targets.push_back((data.labels[std::size_t(i)] + 1) % data.num_classes);

  for (auto m : {AttackMethod::Fgsm, AttackMethod::Pgd, AttackMethod::Bpda, AttackMethod::Spsa, AttackMethod::Cw,
                 AttackMethod::ElasticNet}) {
    CAPTURE(to_string(m));
    AttackConfig cfg;
    cfg.method = m;
    cfg.eps = 6 * kPixel;
    cfg.iterations = 10;
    cfg.spsa.iterations = 5;
    cfg.spsa.samples = 4;
    cfg.cw.binary_steps = cfg.en.binary_steps = 2;
    cfg.cw.iterations = cfg.en.iterations = 20;
    cfg.seed = 9;
    const auto adv = run_attack(model, x, targets, cfg);
    REQUIRE(adv.x_adv.shape() == x.shape());
    CHECK(adv.x_adv.array().minCoeff() >= 0.f);
    CHECK(adv.x_adv.array().maxCoeff() <= 1.f);
    if (m != AttackMethod::Cw && m != AttackMethod::ElasticNet) {
      const float linf = (adv.x_adv.array() - x.array()).abs().maxCoeff();
      CHECK(linf <= float(cfg.eps) + 1e-6f);
    }
  }
}

TEST_CASE("percentile threshold equals a brute-force oracle") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<int> size(1, 300);
    std::uniform_int_distribution<int> level(0, 40);  // coarse values force ties
    std::vector<double> pool(static_cast<std::size_t>(size(rng)));
    for (auto& v : pool) v = level(rng) / 40.0;
    const double fpr = std::uniform_real_distribution<double>(0.001, 0.999)(rng);
    // Oracle: the smallest pool value with at least (1 - fpr) n values at or below it.
    double oracle = std::numeric_limits<double>::infinity();
    for (double c : pool) {
      const auto at_or_below = std::count_if(pool.begin(), pool.end(), [&](double v) { return v <= c; });
      const auto needed = std::ceil((1 - fpr) * double(pool.size()) - 1e-9);
      if (double(at_or_below) >= needed) oracle = std::min(oracle, c);
      if (needed <= 0) oracle = -std::numeric_limits<double>::infinity();
    }
    CHECK(percentile_threshold(pool, fpr) == oracle);
  }
}

TEST_CASE("AUC equals the pairwise oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> size(1, 200);
    std::uniform_int_distribution<int> level(0, 25);
    std::vector<double> b(static_cast<std::size_t>(size(rng))), a(static_cast<std::size_t>(size(rng)));
    for (auto& v : b) v = level(rng) / 25.0;
    for (auto& v : a) v = level(rng) / 25.0 + 0.1;
    double wins = 0;
    for (double x : a)
      for (double y : b) wins += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
    CHECK(roc_auc(b, a) == wins / (double(a.size()) * double(b.size())));
  }
}

TEST_CASE("injection algebra") {
  Trapdoor t;
  t.kappa = 0.1f;
  t.mask = Tensor({1, 2, 2}, {0.1f, 0.f, 0.f, 0.1f});
  t.pattern = Tensor({1, 2, 2}, {1.f, 1.f, 0.f, 0.f});
  const Tensor x({1, 2, 2}, {0.5f, 0.5f, 0.5f, 0.5f});
  const Tensor y = inject(x, t);
  CHECK(y[0] == doctest::Approx(0.55).epsilon(1e-6));
  CHECK(y[1] == 0.5f);
  CHECK(y[3] == doctest::Approx(0.45).epsilon(1e-6));

  t.mask = Tensor({1, 2, 2}, 0.f);
  CHECK((inject(x, t).array() == x.array()).all());

  t.kappa = 1.f;
  t.mask = Tensor({1, 2, 2}, 1.f);
  CHECK((inject(x, t).array() == t.pattern.array()).all());
}

TEST_CASE("IDX files round-trip byte for byte") {
  test_support::TempDir dir;
  Rng rng(6);
  const Tensor images = Tensor::uniform({3, 2, 2}, 0.f, 1.f, rng);
  const Tensor bytes = Tensor(images.shape(), Tensor::Array((images.array() * 255.f).round() / 255.f));
  write_idx_tensor(dir.path / "a.idx", bytes);
  const Tensor back = read_idx_tensor(dir.path / "a.idx");
  CHECK((back.array() == bytes.array()).all());
  write_idx_tensor(dir.path / "b.idx", back);
  CHECK(read_file_bytes(dir.path / "a.idx") == read_file_bytes(dir.path / "b.idx"));

  write_idx_tensor(dir.path / "f.idx.gz", images, IdxType::Float32);
  CHECK((read_idx_tensor(dir.path / "f.idx.gz").array() == images.array()).all());
}

TEST_CASE("bundles round-trip with identical hash and forward outputs") {
  test_support::TempDir dir;
  const auto data = test_support::blobs();
  ArtifactBundle b;
  b.model = build_mlp(data.inputs.dim(1), {8}, data.num_classes, 3);
  b.config_text = "[experiment]\nseed = 1\n";
  save_bundle(b, dir.path / "m.bundle");
  const auto back = load_bundle(dir.path / "m.bundle");
  CHECK(hex(bundle_hash(back)) == hex(bundle_hash(b)));
  CHECK((logits(*back.model, data.inputs).array() == logits(*b.model, data.inputs).array()).all());
}

TEST_CASE("fixed seeds reproduce bit for bit") {
  CHECK(derive_seed(7, "attacks", "pgd") == derive_seed(7, "attacks", "pgd"));
  CHECK(derive_seed(7, "attacks", "pgd") != derive_seed(7, "attacks", "fgsm"));

  const auto data = test_support::blobs();
  auto run = [&] {
    Model m = build_mlp(data.inputs.dim(1), {8}, data.num_classes, 11);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch = 16;
    cfg.seed = 12;
    train(m, data, cfg);
    AttackConfig a;
    a.seed = 13;
    a.iterations = 5;
    std::vector<int> targets(8, 0);
    return std::pair{m, pgd(m, data.inputs.rows(0, 8), targets, a).x_adv};
  };
  const auto [m1, x1] = run();
  const auto [m2, x2] = run();
  for (const auto& [name, p] : m1.params()) CHECK((p.value.array() == m2.params().at(name).value.array()).all());
  CHECK((x1.array() == x2.array()).all());
}

}  // TEST_SUITE
