#include "trapnet/detection.hpp"

#include "trapnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace trapnet {

namespace {

std::vector<Index> resolve_layers(const Model& model, std::vector<Index> layers) {
  if (layers.empty()) layers.push_back(model.default_feature_layer());
  for (Index l : layers) (void)model.layer_width(l);
  return layers;
}

// Restricted cosine with a zero-norm activation mapped to 0: ReLU features
// are non-negative, so 0 is the floor of the statistic.
double restricted_cosine(const float* row, const TrapdoorSignature& sig) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < sig.neuron_indices.size(); ++k) {
    const double a = row[sig.neuron_indices[k]];
    const double b = sig.vector[k];
    dot += a * b;
    na += a * a;
    nb += b * b;
  }
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

// Features of `layers` plus the logits in one pass.
struct FeaturePass {
  Tensor features;
  std::vector<int> predicted;
  Index width = 0;
};

FeaturePass feature_pass(const Model& model, const Tensor& x, const std::vector<Index>& layers) {
  std::vector<Index> sel = layers;
  sel.push_back(model.num_layers() - 1);
  FeaturePass out;
  out.features = feature_representation(model, x, sel);
  out.width = feature_width(model, layers);
  const Index classes = model.spec().num_classes;
  auto m = out.features.matrix();
  out.predicted.resize(std::size_t(x.dim(0)));
  for (Index i = 0; i < x.dim(0); ++i) {
    Index best;
    m.row(i).segment(out.width, classes).maxCoeff(&best);
    out.predicted[std::size_t(i)] = int(best);
  }
  return out;
}

Tensor as_batch(const Model& model, const Tensor& x, const char* who) {
  if (x.rank() != Index(model.spec().input_shape.size())) {
    if (x.dim(0) != 1) throw ShapeError(std::string(who) + ": expected a single input");
    return x;
  }
  Shape s{1};
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  return x.reshaped(s);
}

std::vector<Detection> score_rows(const Detector& detector, const Tensor& feats, std::span<const int> predicted) {
  std::vector<Detection> out(predicted.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& d = out[i];
    d.label = predicted[i];
    auto it = detector.signatures.find(d.label);
    if (it == detector.signatures.end()) continue;
    const float* row = feats.data() + Index(i) * feats.row_size();
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& s : it->second) best = std::max(best, restricted_cosine(row, s));
    d.best_similarity = best;
    d.flag = best > detector.thresholds.at(d.label);
  }
  return out;
}

const std::vector<Index>& detector_layers(const Detector& d) {
  if (d.signatures.empty() || d.signatures.begin()->second.empty())
    throw PreconditionError("detector has no signatures");
  return d.signatures.begin()->second.front().layers;
}

}  // namespace

void TrapdoorSignature::validate(Index width) const {
  if (vector.size() != neuron_indices.size())
    throw PreconditionError("signature: vector and neuron index lengths differ");
  if (neuron_indices.empty()) throw PreconditionError("signature: no neurons");
  for (std::size_t k = 0; k < neuron_indices.size(); ++k) {
    if (neuron_indices[k] < 0 || neuron_indices[k] >= width)
      throw PreconditionError("signature: neuron index " + std::to_string(neuron_indices[k]) + " outside width " +
                              std::to_string(width));
    if (k > 0 && neuron_indices[k] <= neuron_indices[k - 1])
      throw PreconditionError("signature: neuron indices not strictly increasing");
  }
}

bool Detector::calibrated() const {
  if (signatures.empty()) return false;
  for (const auto& [label, sigs] : signatures)
    if (!thresholds.count(label)) return false;
  return true;
}

std::vector<int> Detector::labels() const {
  std::vector<int> out;
  for (const auto& [label, sigs] : signatures) out.push_back(label);
  return out;
}

void Detector::validate(const Model& model) const {
  if (!(fpr_target > 0 && fpr_target <= 1)) throw PreconditionError("detector: fpr target outside (0,1]");
  const auto& layers = detector_layers(*this);
  const Index width = feature_width(model, layers);
  for (const auto& [label, sigs] : signatures) {
    if (sigs.empty()) throw PreconditionError("detector: label " + std::to_string(label) + " has no signature");
    for (const auto& s : sigs) {
      if (s.layers != layers) throw PreconditionError("detector: signatures use different layers");
      if (s.label != label) throw PreconditionError("detector: signature filed under the wrong label");
      s.validate(width);
    }
  }
}

double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  if (na == 0 || nb == 0) throw Error("cosine: zero-norm vector");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

double percentile_threshold(std::vector<double> pool, double fpr) {
  if (pool.empty()) throw PreconditionError("percentile_threshold: empty pool");
  if (!(fpr > 0 && fpr <= 1)) throw PreconditionError("percentile_threshold: fpr outside (0,1]");
  std::sort(pool.begin(), pool.end());
  const double n = double(pool.size());
  const auto rank = Index(std::ceil((1.0 - fpr) * n - 1e-9));
  if (rank <= 0) return -std::numeric_limits<double>::infinity();
  return pool[std::size_t(rank - 1)];
}

TrapdoorSignature compute_signature(const Model& model, const Trapdoor& trapdoor, const Dataset& samples,
                                    std::vector<Index> layers, std::vector<Index> neuron_indices) {
  layers = resolve_layers(model, std::move(layers));
  const Index width = feature_width(model, layers);
  if (neuron_indices.empty()) {
    neuron_indices.resize(std::size_t(width));
    std::iota(neuron_indices.begin(), neuron_indices.end(), Index{0});
  }

  std::vector<Index> keep;
  if (!samples.empty()) {
    const auto pred = predict(model, samples.inputs);
    for (Index i = 0; i < samples.size(); ++i)
      if (samples.labels[std::size_t(i)] != trapdoor.target_label && pred[std::size_t(i)] != trapdoor.target_label)
        keep.push_back(i);
  }
  if (Index(keep.size()) < kMinSignatureSamples)
    throw PreconditionError("compute_signature: " + std::to_string(keep.size()) + " eligible samples, need " +
                            std::to_string(kMinSignatureSamples));

  const Tensor feats = feature_representation(model, inject(samples.inputs.gather_rows(keep), trapdoor), layers);
  const Eigen::RowVectorXd mean = feats.matrix().cast<double>().colwise().mean();

  TrapdoorSignature sig;
  sig.label = trapdoor.target_label;
  sig.layers = std::move(layers);
  sig.n_samples = Index(keep.size());
  sig.vector.reserve(neuron_indices.size());
  for (Index j : neuron_indices) {
    if (j < 0 || j >= width) throw PreconditionError("compute_signature: neuron index outside layer width");
    sig.vector.push_back(float(mean[j]));
  }
  sig.neuron_indices = std::move(neuron_indices);
  sig.validate(width);
  return sig;
}

double similarity(const TrapdoorSignature& sig, const Model& model, const Tensor& x) {
  const Tensor feats = feature_representation(model, as_batch(model, x, "similarity"), sig.layers);
  std::vector<float> restricted;
  restricted.reserve(sig.neuron_indices.size());
  for (Index j : sig.neuron_indices) restricted.push_back(feats[j]);
  return cosine(restricted, sig.vector);
}

std::vector<Index> sample_neuron_subset(const Model& model, std::span<const Index> layers, double fraction,
                                        std::uint64_t seed) {
  if (layers.empty()) throw PreconditionError("sample_neuron_subset: empty layer pool");
  if (!(fraction > 0 && fraction <= 1)) throw PreconditionError("sample_neuron_subset: fraction outside (0,1]");
  const Index width = feature_width(model, layers);
  const auto count = std::min(width, Index(std::ceil(fraction * double(width) - 1e-9)));
  std::vector<Index> all(static_cast<std::size_t>(width));
  std::iota(all.begin(), all.end(), Index{0});
  if (count == width) return all;
  Rng rng(seed);
  // partial Fisher-Yates
  for (Index i = 0; i < count; ++i) {
    std::uniform_int_distribution<Index> pick(i, width - 1);
    std::swap(all[std::size_t(i)], all[std::size_t(pick(rng))]);
  }
  all.resize(std::size_t(count));
  std::sort(all.begin(), all.end());
  return all;
}

Detector build_detector(const Model& model, const TrapdoorRegistry& registry, const Dataset& samples,
                        const SignatureOptions& options) {
  if (registry.empty()) throw PreconditionError("build_detector: empty registry");
  const auto layers = resolve_layers(model, options.layers);
  std::vector<Index> subset;
  if (options.neuron_fraction < 1.0) subset = sample_neuron_subset(model, layers, options.neuron_fraction, options.subset_seed);

  Detector d;
  d.neuron_fraction = options.neuron_fraction;
  d.subset_seed = options.subset_seed;
  for (const auto& [label, set] : registry.sets) {
    auto& sigs = d.signatures[label];
    for (const auto& t : set.trapdoors) sigs.push_back(compute_signature(model, t, samples, layers, subset));
  }
  return d;
}

std::map<int, std::vector<double>> signature_scores(const Detector& detector, const Model& model, const Tensor& x) {
  const Tensor feats = feature_representation(model, x, detector_layers(detector));
  std::map<int, std::vector<double>> out;
  for (const auto& [label, sigs] : detector.signatures) {
    auto& col = out[label];
    col.resize(std::size_t(x.dim(0)));
    for (Index i = 0; i < x.dim(0); ++i) {
      const float* row = feats.data() + i * feats.row_size();
      double best = -std::numeric_limits<double>::infinity();
      for (const auto& s : sigs) best = std::max(best, restricted_cosine(row, s));
      col[std::size_t(i)] = best;
    }
  }
  return out;
}

Detector calibrate(Detector detector, const Model& model, const Dataset& benign, double fpr_target) {
  if (!(fpr_target > 0 && fpr_target < 1)) throw PreconditionError("calibrate: fpr target outside (0,1)");
  detector.validate(model);
  detector.fpr_target = fpr_target;
  detector.thresholds.clear();
  detector.calibration_similarities.clear();
  if (benign.empty()) throw PreconditionError("calibrate: empty calibration set");
  const FeaturePass pass = feature_pass(model, benign.inputs, detector_layers(detector));
  for (const auto& [label, sigs] : detector.signatures) {
    auto& pool = detector.calibration_similarities[label];
    for (Index i = 0; i < benign.size(); ++i) {
      if (pass.predicted[std::size_t(i)] != label) continue;
      const float* row = pass.features.data() + i * pass.features.row_size();
      double best = -std::numeric_limits<double>::infinity();
      for (const auto& s : sigs) best = std::max(best, restricted_cosine(row, s));
      pool.push_back(best);
    }
    if (Index(pool.size()) < kMinCalibrationPool)
      throw PreconditionError("calibrate: label " + std::to_string(label) + " has a calibration pool of " +
                              std::to_string(pool.size()) + ", need " + std::to_string(kMinCalibrationPool));
    std::sort(pool.begin(), pool.end());
    detector.thresholds[label] = percentile_threshold(pool, fpr_target);
  }
  return detector;
}

std::vector<Detection> detect_batch(const Detector& detector, const Model& model, const Tensor& x,
                                    std::span<const int> predicted) {
  if (!detector.calibrated()) throw PreconditionError("detector not calibrated");
  if (Index(predicted.size()) != x.dim(0)) throw ShapeError("detect_batch: prediction count mismatch");
  return score_rows(detector, feature_representation(model, x, detector_layers(detector)), predicted);
}

std::vector<Detection> detect_batch(const Detector& detector, const Model& model, const Tensor& x) {
  if (!detector.calibrated()) throw PreconditionError("detector not calibrated");
  const FeaturePass pass = feature_pass(model, x, detector_layers(detector));
  return score_rows(detector, pass.features, pass.predicted);
}

Detection detect(const Detector& detector, const Model& model, const Tensor& x) {
  return detect_batch(detector, model, as_batch(model, x, "detect")).front();
}

}  // namespace trapnet
