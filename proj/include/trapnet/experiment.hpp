#pragma once

#include "trapnet/config.hpp"
#include "trapnet/eval.hpp"

#include <string>
#include <vector>

namespace trapnet {

/// Training data plus the held-out split cut into a calibration half
/// (signatures and thresholds) and an evaluation half (benign FPR and
/// attack sources).
struct Splits {
  Dataset train;
  Dataset calibration;
  Dataset evaluation;
};

Splits load_splits(const ExperimentConfig& config);

/// Freshly initialised model for the configured architecture.
Model initial_model(const ExperimentConfig& config, const Dataset& data);
TrainConfig train_config(const ExperimentConfig& config);

Model train_clean_model(const ExperimentConfig& config, const Splits& splits);
TrapdoorRegistry build_registry(const ExperimentConfig& config, const Shape& sample_shape, int num_classes);
Model train_trapdoor_model(const ExperimentConfig& config, const Splits& splits, const TrapdoorRegistry& registry);

SignatureOptions signature_options(const ExperimentConfig& config);
/// Signatures and thresholds, both from the calibration split.
Detector make_detector(const ExperimentConfig& config, const Model& model, const TrapdoorRegistry& registry,
                       const Splits& splits);

struct AttackSources {
  Tensor x;
  std::vector<int> targets;
  /// Rows of the evaluation split.
  std::vector<Index> rows;
};

/// Up to `count` evaluation rows the model classifies correctly, each aimed
/// at a defended label other than its own (labels taken in turn).
AttackSources attack_sources(const Model& model, const Dataset& evaluation, const std::vector<int>& labels,
                             Index count);

struct AttackRun {
  AttackConfig config;
  AdversarialBatch batch;
  /// What the defended system feeds the model (quantized for BPDA).
  AdversarialBatch seen;
};

AttackRun run_configured_attack(const Model& model, const AttackSources& sources, const AttackConfig& config,
                                const Detector* detector, const Dataset* probes);

/// Detection, AUC and post-detection success of one run. Thresholds come
/// from `calibration`; AUC compares against `benign`.
AttackCell score_attack(const AttackRun& run, const Detector& detector, const Model& model,
                        const Dataset& calibration, const Dataset& benign);

/// Runs every configured attack against the trapdoored model and fills a
/// report. clean / unlearned models add accuracy and transfer columns.
EvalReport evaluate_experiment(const ExperimentConfig& config, const std::string& config_text,
                               const Model& trapdoored, const TrapdoorRegistry& registry, const Detector& detector,
                               const Splits& splits, const Model* clean = nullptr,
                               const Model* unlearned = nullptr);

enum class SweepKind { InjectionRatio, TrapdoorCountLocations, TrapdoorCountIntensities, SignatureLayer, NeuronFraction };

SweepKind parse_sweep_kind(const std::string& name);
std::string to_string(SweepKind k);

/// The config with one grid value applied.
ExperimentConfig sweep_point(const ExperimentConfig& base, SweepKind kind, double value);

/// One train, attack and detect cycle per grid value. Kinds that leave
/// training untouched (signature layer, neuron fraction) reuse one
/// trapdoored model, which is identical under the shared seeds.
std::vector<EvalReport> sweep(SweepKind kind, const std::vector<double>& grid, const ExperimentConfig& base,
                              const std::string& config_text, const Splits& splits);

}  // namespace trapnet
