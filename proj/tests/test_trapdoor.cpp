#include <doctest.h>

#include "support.hpp"

#include "trapnet/trapdoor.hpp"

#include <set>

using namespace trapnet;

namespace {
const Shape kMnist{1, 28, 28};
}

TEST_CASE("single square covers side^2 bottom-right pixels") {
  const Trapdoor t = make_single_square(kMnist, 3, 1);
  CHECK(t.masked_count() == 36);
  CHECK(t.target_label == 3);
  CHECK(t.mask.at({0, 27, 27}) == t.kappa);
  CHECK(t.mask.at({0, 22, 22}) == t.kappa);
  CHECK(t.mask.at({0, 21, 27}) == 0.f);
  CHECK_NOTHROW(t.validate());
  CHECK_THROWS_AS(make_single_square(kMnist, 3, 1, 29), PreconditionError);
  CHECK_THROWS_AS(make_single_square({784}, 3, 1), ShapeError);
}

TEST_CASE("five 3x3 squares mask 45 pixels") {
  const Trapdoor t = make_multi_square(kMnist, 2, 9);
  CHECK(t.masked_count() == 45);
  CHECK(make_multi_square(kMnist, 2, 9).mask == t.mask);
}

TEST_CASE("trapdoor validation") {
  Trapdoor t = make_single_square(kMnist, 0, 1);
  t.mask[0] = 0.05f;
  CHECK_THROWS_AS(t.validate(), PreconditionError);
  t = make_single_square(kMnist, 0, 1);
  t.pattern[0] = 1.5f;
  CHECK_THROWS_AS(t.validate(), PreconditionError);
  t.kappa = 0.f;
  CHECK_THROWS_AS(t.validate(), PreconditionError);
}

TEST_CASE("inject works on batches and checks shapes") {
  const Trapdoor t = make_single_square(kMnist, 0, 1);
  const Tensor x({2, 1, 28, 28}, 0.5f);
  const Tensor y = inject(x, t);
  CHECK(y.shape() == x.shape());
  CHECK(y.row(0) == y.row(1));
  CHECK(y.at({0, 0, 0, 0}) == 0.5f);
  CHECK_THROWS_AS(inject(Tensor({2, 1, 27, 28}, 0.f), t), ShapeError);
}

TEST_CASE("location sets do not overlap") {
  TrapdoorRecipe r;
  r.kind = TrapdoorKind::MultiSquare;
  r.target_label = 5;
  const auto set = make_trapdoor_set(kMnist, r, 4, SetVariant::Locations, 3);
  REQUIRE(set.size() == 4);
  CHECK(set.target_label() == 5);
  for (Index i = 0; i < kMnist[1] * kMnist[2]; ++i) {
    int covering = 0;
    for (const auto& t : set.trapdoors) covering += t.mask[i] != 0.f;
    CHECK(covering <= 1);
  }
}

TEST_CASE("intensity sets share the base mask") {
  TrapdoorRecipe r;
  r.kind = TrapdoorKind::MultiSquare;
  const auto set = make_trapdoor_set(kMnist, r, 3, SetVariant::Intensities, 3);
  REQUIRE(set.size() == 3);
  CHECK(set.trapdoors[1].mask == set.trapdoors[0].mask);
  CHECK_FALSE(set.trapdoors[1].pattern == set.trapdoors[0].pattern);
}

TEST_CASE("all-label registry") {
  const auto reg = make_all_label_registry(kMnist, 10, 4);
  CHECK(reg.labels().size() == 10);
  for (const auto& [label, params] : reg.intensity) {
    REQUIRE(params.size() == 1);
    CHECK_FALSE((params[0].mu == 0.f && params[0].sigma == 0.f));
  }
  TrapdoorRegistry dup = reg;
  CHECK_THROWS(dup.add(reg.at(0)));
}

TEST_CASE("poisoning appends ratio * |clean| rows per label") {
  const auto& fx = test_support::blob_trapdoor();
  const Dataset clean = fx.train.slice(0, 300);
  const Dataset p = poison_dataset(clean, fx.registry, 0.5, 1);
  REQUIRE(p.size() == 450);
  for (Index i = 300; i < 450; ++i) CHECK(p.labels[std::size_t(i)] == 0);
  for (Index i = 300; i < 450; ++i) CHECK(p.inputs.row(i).array().tail(4).minCoeff() == 1.f);
  CHECK(poison_dataset(clean, fx.registry, 0.5, 1).inputs == p.inputs);
}

TEST_CASE("trapdoored blob model learns the trapdoor and the task") {
  const auto& fx = test_support::blob_trapdoor();
  CHECK(injection_success_rate(fx.model, fx.held, fx.registry).at(0) >= 0.95);
  CHECK(accuracy(fx.model, fx.held) >= 0.95);
}
