#pragma once

#include "trapnet/model.hpp"

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

namespace trapnet {

/// One honeypot perturbation: x' = (1 - m) * x + m * pattern, with every
/// mask entry either 0 or kappa.
struct Trapdoor {
  Tensor mask;
  Tensor pattern;
  float kappa = 0.1f;
  int target_label = 0;

  void validate() const;
  /// Number of mask entries equal to kappa.
  Index masked_count() const;
};

/// Applies the trapdoor to one sample (shape == mask shape) or to every
/// sample of a batch ([N] + mask shape). Output stays in [0,1].
Tensor inject(const Tensor& x, const Trapdoor& trapdoor);

/// Parameters of the normal distribution square intensities are drawn from,
/// on the [0,1] pixel scale.
struct IntensityParams {
  float mu = 0.f;
  float sigma = 0.f;
  friend bool operator==(const IntensityParams&, const IntensityParams&) = default;
};

/// side x side square in the bottom-right corner (all channels), filled with
/// seeded uniform noise.
Trapdoor make_single_square(const Shape& sample_shape, int target_label, std::uint64_t seed, Index side = 6,
                            float kappa = 0.1f);

struct MultiSquareOptions {
  Index n_squares = 5;
  Index square = 3;
  float kappa = 0.1f;
  IntensityParams intensity{1.f, 0.f};
};

/// n_squares non-overlapping squares at random positions, each with one
/// intensity drawn from Normal(mu, sigma) and clipped to [0,1].
Trapdoor make_multi_square(const Shape& sample_shape, int target_label, std::uint64_t seed,
                           const MultiSquareOptions& options = {});

/// Trapdoors that all map to the same target label.
struct TrapdoorSet {
  std::vector<Trapdoor> trapdoors;

  int target_label() const;
  Index size() const { return Index(trapdoors.size()); }
  void validate() const;
};

enum class TrapdoorKind { SingleSquare, MultiSquare };
enum class SetVariant { Locations, Intensities };

/// Describes a base trapdoor. `kappa` applies to both kinds and overrides
/// multi.kappa.
struct TrapdoorRecipe {
  TrapdoorKind kind = TrapdoorKind::SingleSquare;
  Index side = 6;
  float kappa = 0.1f;
  MultiSquareOptions multi{};
  int target_label = 0;
};

/// The trapdoor a recipe describes, before any set variation.
Trapdoor make_trapdoor(const Shape& sample_shape, const TrapdoorRecipe& recipe, std::uint64_t seed);

/// n trapdoors for recipe.target_label. Member 0 is the base trapdoor.
/// Locations: remaining members keep the pattern statistics and move to
/// positions disjoint from every earlier member. Intensities: remaining
/// members keep the base mask; member k draws its own mean mu_k ~ U[0,1] and
/// fills each square with one Normal(mu_k, multi.intensity.sigma) draw.
TrapdoorSet make_trapdoor_set(const Shape& sample_shape, const TrapdoorRecipe& recipe, int n, SetVariant variant,
                              std::uint64_t seed);

struct TrapdoorRegistry {
  std::map<int, TrapdoorSet> sets;
  std::map<int, std::vector<IntensityParams>> intensity;
  std::uint64_t seed = 0;

  /// Throws if the label already has a set.
  void add(TrapdoorSet set, std::vector<IntensityParams> params = {});
  std::vector<int> labels() const;
  bool empty() const { return sets.empty(); }
  const TrapdoorSet& at(int label) const;
};

/// Single defended label with an n-member set.
TrapdoorRegistry make_single_label_registry(const Shape& sample_shape, const TrapdoorRecipe& recipe, int n,
                                            SetVariant variant, std::uint64_t seed);

/// One multi-square trapdoor per label; each label's (mu, sigma) is drawn
/// from {0, 1} x {0, 1}, excluding the all-zero pair which would leave a
/// dark background unchanged.
TrapdoorRegistry make_all_label_registry(const Shape& sample_shape, int num_classes, std::uint64_t seed,
                                         MultiSquareOptions options = {});

/// clean followed by ceil(ratio * |clean|) poisoned samples per defended
/// label. Poison sources never carry the target label; members of a set are
/// picked uniformly per sample.
Dataset poison_dataset(const Dataset& clean, const TrapdoorRegistry& registry, double injection_ratio,
                       std::uint64_t seed);

struct TrapdoorTrainingConfig {
  /// Poisoned-to-clean ratio per defended label. It plays the role of the
  /// loss weight lambda on the trapdoor term of the joint objective.
  double injection_ratio = 0.5;
  /// Draw a fresh poisoned set every epoch instead of once up front.
  bool resample_each_epoch = true;
  TrainConfig train{};

  double lambda() const { return injection_ratio; }
};

std::pair<Model, TrainLog> train_trapdoored(Model model, const Dataset& clean, const TrapdoorRegistry& registry,
                                            const TrapdoorTrainingConfig& config);

/// Fraction of trapdoored inputs classified as each defended label, over
/// test samples whose true label is not that label (averaged over set members).
std::map<int, double> injection_success_rate(const Model& model, const Dataset& test,
                                             const TrapdoorRegistry& registry);

}  // namespace trapnet
