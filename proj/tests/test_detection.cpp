#include <doctest.h>

#include "support.hpp"

#include "trapnet/attacks.hpp"
#include "trapnet/detection.hpp"
#include "trapnet/eval.hpp"

#include <cmath>
#include <numeric>

using namespace trapnet;

namespace {

const Detector& blob_detector() {
  static const Detector det = [] {
    const auto& fx = test_support::blob_trapdoor();
    return calibrate(build_detector(fx.model, fx.registry, fx.held), fx.model, fx.held, 0.05);
  }();
  return det;
}

}  // namespace

TEST_CASE("nearest-rank percentile threshold") {
  std::vector<double> pool(100);
  std::iota(pool.begin(), pool.end(), 1.0);
  for (auto& v : pool) v /= 100.0;
  CHECK(percentile_threshold(pool, 0.06) == 0.94);
  CHECK(percentile_threshold(pool, 0.05) == 0.95);
  CHECK(std::isinf(percentile_threshold(pool, 1.0)));
  CHECK_THROWS_AS(percentile_threshold({}, 0.05), PreconditionError);
  CHECK_THROWS_AS(percentile_threshold(pool, 0.0), PreconditionError);
}

TEST_CASE("nearest rank over a grid") {
  const std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  CHECK(nearest_rank(v, 25) == 3);
  CHECK(nearest_rank(v, 50) == 5);
  CHECK(nearest_rank(v, 95) == 10);
  CHECK(nearest_rank(v, 100) == 10);
  CHECK(nearest_rank(v, 1) == 1);
}

TEST_CASE("AUC small cases") {
  const std::vector<double> b{0.1, 0.4}, a{0.35, 0.8};
  CHECK(roc_auc(b, a) == 0.75);
  CHECK(roc_auc(a, a) == 0.5);
  const std::vector<double> hi{2, 3};
  CHECK(roc_auc(b, hi) == 1.0);
}

TEST_CASE("cosine") {
  const std::vector<float> a{1, 0}, b{0, 2}, c{3, 0}, z{0, 0};
  CHECK(cosine(a, b) == 0.0);
  CHECK(cosine(a, c) == doctest::Approx(1.0));
  CHECK_THROWS_AS(cosine(a, z), Error);
}

TEST_CASE("signatures cover the requested neurons") {
  const auto& fx = test_support::blob_trapdoor();
  const auto sig = compute_signature(fx.model, fx.registry.at(0).trapdoors[0], fx.held);
  CHECK(sig.vector.size() == 32);
  CHECK(sig.n_samples > 350);
  CHECK(sig.n_samples <= 400);
  const auto subset = sample_neuron_subset(fx.model, std::vector<Index>{0}, 0.25, 9);
  CHECK(subset.size() == 8);
  CHECK(std::is_sorted(subset.begin(), subset.end()));
  CHECK(subset == sample_neuron_subset(fx.model, std::vector<Index>{0}, 0.25, 9));
  const auto sub = compute_signature(fx.model, fx.registry.at(0).trapdoors[0], fx.held, {0}, subset);
  CHECK(sub.vector.size() == 8);
}

TEST_CASE("calibrated detector flags trapdoored inputs and bounds benign flags") {
  const auto& fx = test_support::blob_trapdoor();
  const Detector& det = blob_detector();
  CHECK(det.calibrated());
  CHECK_NOTHROW(det.validate(fx.model));

  const auto benign = detect_batch(det, fx.model, fx.held.inputs);
  const auto pred = predict(fx.model, fx.held.inputs);
  Index pool = 0, flagged = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == 0) {
      ++pool;
      flagged += benign[i].flag;
    }
  CHECK(pool >= kMinCalibrationPool);
  CHECK(double(flagged) / double(pool) <= 0.05);

  const Tensor trapped = inject(fx.held.inputs, fx.registry.at(0).trapdoors[0]);
  const auto hits = detect_batch(det, fx.model, trapped);
  const auto n = std::count_if(hits.begin(), hits.end(), [](const Detection& d) { return d.flag; });
  CHECK(double(n) / double(hits.size()) >= 0.9);
}

TEST_CASE("uncalibrated or starved detectors are refused") {
  const auto& fx = test_support::blob_trapdoor();
  const Detector raw = build_detector(fx.model, fx.registry, fx.held);
  CHECK_FALSE(raw.calibrated());
  CHECK_THROWS_AS(detect_batch(raw, fx.model, fx.held.inputs), PreconditionError);
  CHECK_THROWS(calibrate(raw, fx.model, fx.held.slice(0, 50), 0.05));
}

TEST_CASE("detection rate is 1 at fpr 1 and monotone in fpr") {
  const auto& fx = test_support::blob_trapdoor();
  const Detector& det = blob_detector();
  const Tensor x = fx.held.inputs.rows(250, 60);
  std::vector<int> targets(60, 0);
  AttackConfig cfg;
  cfg.eps = 0.3;
  cfg.iterations = 40;
  cfg.seed = 2;
  const auto adv = pgd(fx.model, x, targets, cfg);
  REQUIRE(adv.successes() > 0);
  CHECK(detection_rate_at_fpr(det, fx.model, adv, fx.held, 1.0) == 1.0);
  double prev = 0;
  for (double f : {0.01, 0.05, 0.1, 0.3, 0.6, 1.0}) {
    const double r = detection_rate_at_fpr(det, fx.model, adv, fx.held, f);
    CHECK(r >= prev);
    prev = r;
  }
}

TEST_CASE("an attack replayed on its own model transfers at its success rate") {
  const auto& fx = test_support::blob_trapdoor();
  const Tensor x = fx.held.inputs.rows(250, 40);
  std::vector<int> targets(40, 0);
  AttackConfig cfg;
  cfg.eps = 0.2;
  cfg.iterations = 20;
  const std::vector<AttackConfig> attacks{cfg};
  const auto res = transfer_experiment(fx.model, fx.model, attacks, x, targets);
  REQUIRE(res.size() == 1);
  CHECK(res[0].transfer_rate == doctest::Approx(res[0].source_success));
}

TEST_CASE("similarity summaries") {
  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 1.0);
  const auto s = summarize(v, "benign");
  CHECK(s.count == 100);
  CHECK(s.percentile(5) == 5);
  CHECK(s.percentile(95) == 95);
  CHECK_THROWS(summarize(std::vector<double>(5, 0.0), "few"));
}
