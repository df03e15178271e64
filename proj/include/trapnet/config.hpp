#pragma once

#include "trapnet/attacks.hpp"
#include "trapnet/model.hpp"
#include "trapnet/trapdoor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace trapnet {

/// Malformed or inconsistent experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct DataConfig {
  /// "mnist" (IDX files under dir) or "blobs" (synthetic clusters).
  std::string source = "mnist";
  std::string dir;
  /// Leading rows kept from each split; 0 keeps everything.
  Index train_count = 0;
  Index test_count = 0;
  /// Leading share of the held-out split used for calibration and
  /// signatures; the rest is the benign/attack evaluation half.
  double calibration_fraction = 0.7;
  int blob_classes = 3;
  Index blob_dim = 16;
  Index blob_per_class = 200;
};

struct DefenseConfig {
  /// Defended labels; all_labels overrides the list.
  std::vector<int> labels{3};
  bool all_labels = false;
  TrapdoorRecipe recipe{};
  int n = 1;
  SetVariant variant = SetVariant::Locations;
  double injection_ratio = 0.5;
  bool resample_each_epoch = true;
};

struct DetectorConfig {
  std::vector<Index> layers;  // empty: default feature layer
  double neuron_fraction = 1.0;
  double fpr = 0.05;
  /// Layers subset sampling draws from when neuron_fraction < 1.
  std::vector<Index> sampling_layers;
};

struct UnlearnConfig {
  int max_epochs = 5;
  double injection_ratio = 0.5;
  double target_injection = 0.10;
  double lr = 1e-3;
};

struct ExperimentConfig {
  std::string name = "experiment";
  /// "mnist_cnn" or "mlp".
  std::string model = "mnist_cnn";
  std::vector<Index> mlp_hidden{64};
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string output_dir = "out";
  DataConfig data{};
  DefenseConfig defense{};
  TrainConfig train{};
  DetectorConfig detector{};
  UnlearnConfig unlearn{};
  /// Source inputs per attack.
  Index attack_count = 128;
  /// Settings from [attack] that [attack:<method>] sections start from.
  AttackConfig attack_defaults{};
  /// Attacks `evaluate` runs, in order.
  std::vector<AttackMethod> methods;
  /// Every configured attack: the listed methods plus any with a section.
  std::vector<AttackConfig> attacks;

  /// Throws ConfigError; num_classes is checked once data is known.
  void validate(int num_classes = 10) const;
  std::vector<int> defended_labels(int num_classes) const;
  /// The configured attack, or the [attack] defaults for an unlisted method.
  AttackConfig attack(AttackMethod m) const;
  std::vector<AttackConfig> evaluated_attacks() const;
};

/// Parses the INI text; unknown sections or keys are errors.
ExperimentConfig parse_config(const std::string& text);
/// Reads the file and parses it; the text is kept by the caller for provenance.
ExperimentConfig load_config(const std::filesystem::path& path, std::string* text = nullptr);

/// Per-stream seed under the experiment's master seed.
std::uint64_t stream_seed(const ExperimentConfig& config, std::string_view module, std::string_view purpose);

}  // namespace trapnet
