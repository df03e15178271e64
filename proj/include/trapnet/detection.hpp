#pragma once

#include "trapnet/model.hpp"
#include "trapnet/trapdoor.hpp"

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

namespace trapnet {

inline constexpr Index kMinSignatureSamples = 30;
inline constexpr Index kMinCalibrationPool = 100;

/// Mean activation of trapdoored inputs over a set of neurons.
struct TrapdoorSignature {
  int label = -1;
  /// Layers whose flattened activations are concatenated before indexing.
  std::vector<Index> layers;
  /// Strictly increasing indices into the concatenated activations.
  std::vector<Index> neuron_indices;
  std::vector<float> vector;
  Index n_samples = 0;

  /// Throws PreconditionError if the invariants fail against `width`.
  void validate(Index width) const;
};

struct Detection {
  bool flag = false;
  int label = -1;
  /// NaN when the predicted label has no signature.
  double best_similarity = std::numeric_limits<double>::quiet_NaN();
};

class Detector {
 public:
  std::map<int, std::vector<TrapdoorSignature>> signatures;
  std::map<int, double> thresholds;
  double fpr_target = 0.05;
  /// Sorted benign statistic used for each threshold.
  std::map<int, std::vector<double>> calibration_similarities;
  /// Provenance of the neuron subset.
  double neuron_fraction = 1.0;
  std::uint64_t subset_seed = 0;

  bool calibrated() const;
  bool defends(int label) const { return signatures.count(label) != 0; }
  std::vector<int> labels() const;
  void validate(const Model& model) const;
};

/// Cosine similarity of two equal-length vectors; throws Error when
/// either has zero norm.
double cosine(std::span<const float> a, std::span<const float> b);

/// Nearest-rank percentile threshold: the ceil((1 - fpr) n)-th smallest
/// value. fpr == 1 gives -inf (everything flagged under strict >).
double percentile_threshold(std::vector<double> pool, double fpr);

/// Signature over `samples` whose true label and prediction both differ
/// from the trapdoor target. An empty `neuron_indices` keeps every neuron;
/// an empty `layers` selects the default feature layer.
TrapdoorSignature compute_signature(const Model& model, const Trapdoor& trapdoor, const Dataset& samples,
                                    std::vector<Index> layers = {}, std::vector<Index> neuron_indices = {});

/// Cosine between a single input's restricted activation and the signature.
double similarity(const TrapdoorSignature& sig, const Model& model, const Tensor& x);

/// Uniform sample without replacement of ceil(p * width) indices into
/// the concatenated activations of `layers`, sorted.
std::vector<Index> sample_neuron_subset(const Model& model, std::span<const Index> layers, double fraction,
                                        std::uint64_t seed);

struct SignatureOptions {
  std::vector<Index> layers;  // empty: default feature layer
  double neuron_fraction = 1.0;
  std::uint64_t subset_seed = 0;
};

/// One signature per trapdoor in every set of the registry; uncalibrated.
Detector build_detector(const Model& model, const TrapdoorRegistry& registry, const Dataset& samples,
                        const SignatureOptions& options = {});

/// Per-label max-over-signatures similarity for every row of x.
std::map<int, std::vector<double>> signature_scores(const Detector& detector, const Model& model, const Tensor& x);

/// Returns a copy of `detector` with thresholds set from `benign`. The
/// pool for label t is the benign inputs the model assigns to t, since only
/// those reach t's test.
Detector calibrate(Detector detector, const Model& model, const Dataset& benign, double fpr_target);

Detection detect(const Detector& detector, const Model& model, const Tensor& x);
std::vector<Detection> detect_batch(const Detector& detector, const Model& model, const Tensor& x);
/// As detect_batch, with predictions already known (e.g. after input
/// preprocessing that the detector should not see twice).
std::vector<Detection> detect_batch(const Detector& detector, const Model& model, const Tensor& x,
                                    std::span<const int> predicted);

}  // namespace trapnet
