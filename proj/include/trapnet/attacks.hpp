#pragma once

#include "trapnet/detection.hpp"
#include "trapnet/model.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace trapnet {

enum class AttackMethod { Fgsm, Pgd, Cw, ElasticNet, Spsa, Bpda, OracleSignature, Vault };

std::string to_string(AttackMethod m);
/// Accepts the names produced by to_string, case-insensitively.
AttackMethod parse_attack_method(const std::string& name);
/// The six attacks from the literature (adaptive ones excluded).
std::vector<AttackMethod> standard_attacks();

inline constexpr double kPixel = 1.0 / 255.0;

struct CwOptions {
  int binary_steps = 9;
  int iterations = 1000;
  double lr = 0.05;
  double confidence = 0;
  double initial_const = 1e-2;
  bool abort_early = true;
};

struct ElasticNetOptions {
  int binary_steps = 20;
  int iterations = 1000;
  double lr = 0.5;
  double beta = 1e-2;
  double confidence = 0;
  double initial_const = 1e-2;
  bool abort_early = true;
};

struct SpsaOptions {
  int iterations = 500;
  double lr = 0.1;
  double perturbation_size = 0.01;
  /// Rademacher probe pairs per gradient estimate.
  int samples = 64;
  /// Freeze a row once it is classified as the target.
  bool early_stop = false;
};

struct BpdaOptions {
  int levels = 8;
};

struct AdaptiveOptions {
  /// Weight w on the summed cosine penalty.
  double distance_weight = 1.0;
  /// Probe inputs used by the vault attack to estimate signatures.
  int probe_count = 50;
  /// Trapdoors the vault attacker assumes per label.
  int known_trapdoors = 1;
  int kmeans_restarts = 10;
  int kmeans_iterations = 100;
};

struct AttackConfig {
  AttackMethod method = AttackMethod::Pgd;
  double eps = 8 * kPixel;
  int iterations = 100;
  /// Per-step size; non-positive means 0.1 * eps.
  double step_size = 0;
  bool random_start = true;
  CwOptions cw{};
  ElasticNetOptions en{};
  SpsaOptions spsa{};
  BpdaOptions bpda{};
  AdaptiveOptions adaptive{};
  std::uint64_t seed = 0;

  double alpha() const { return step_size > 0 ? step_size : 0.1 * eps; }
  /// Throws PreconditionError on out-of-range fields.
  void validate() const;
};

struct PerturbationNorms {
  double l1 = 0, l2 = 0, linf = 0;
};

/// One crafted input.
struct AdversarialResult {
  Tensor x_adv;
  bool success = false;
  Index query_count = 0;
  double final_loss = 0;
  PerturbationNorms norms;
};

/// A batch of crafted inputs, one row per source input.
struct AdversarialBatch {
  Tensor x_adv;
  std::vector<int> targets;
  std::vector<bool> success;
  std::vector<Index> query_count;
  std::vector<double> final_loss;
  std::vector<PerturbationNorms> norms;
  /// Vault attack only: signatures estimated by clustering.
  std::map<int, std::vector<TrapdoorSignature>> estimated_signatures;

  Index size() const { return Index(success.size()); }
  Index successes() const;
  double success_rate() const;
  AdversarialResult at(Index i) const;
  /// Rows where success is set.
  std::vector<Index> successful_indices() const;
};

/// Quantization front end applied before the model (BPDA victim).
Tensor quantize_input(const Tensor& x, int levels);

/// Predictions of the system the attack targets: quantized first for BPDA.
std::vector<int> system_predict(const Model& model, const Tensor& x, const AttackConfig& config);
/// Input as the model sees it (quantized for BPDA, unchanged otherwise).
Tensor system_input(const Tensor& x, const AttackConfig& config);

AdversarialBatch fgsm(const Model& model, const Tensor& x, std::span<const int> targets, double eps);
AdversarialBatch pgd(const Model& model, const Tensor& x, std::span<const int> targets, const AttackConfig& config);
AdversarialBatch cw_l2(const Model& model, const Tensor& x, std::span<const int> targets, const AttackConfig& config);
AdversarialBatch elastic_net(const Model& model, const Tensor& x, std::span<const int> targets,
                             const AttackConfig& config);
AdversarialBatch spsa(const Model& model, const Tensor& x, std::span<const int> targets, const AttackConfig& config);
/// PGD through an 8-level (config.bpda.levels) quantizer with a straight-through backward pass.
AdversarialBatch bpda(const Model& model, const Tensor& x, std::span<const int> targets, const AttackConfig& config);

/// PGD on CE(F(x'), t) + w * sum_k cos(g(x'), S_k) with the attacker holding
/// `known` signatures for each target. All signatures must share neurons.
AdversarialBatch oracle_signature_attack(const Model& model, const Tensor& x, std::span<const int> targets,
                                         const std::map<int, std::vector<TrapdoorSignature>>& known,
                                         const AttackConfig& config);

/// k-means with k-means++ seeding and `restarts` restarts; returns the
/// lowest-inertia centroids. Throws PreconditionError when there are fewer
/// distinct rows than clusters.
std::vector<std::vector<float>> kmeans(const Tensor& points, int k, int restarts, int iterations, std::uint64_t seed);

/// Estimate signatures by attacking `probes` towards each target, cluster
/// g(.) of the results, then run the oracle attack against the centroids.
AdversarialBatch vault_attack(const Model& model, const Dataset& probes, const Tensor& x, std::span<const int> targets,
                              const AttackConfig& config);

/// Dispatch on config.method. `detector` is required for OracleSignature
/// and `probes` for Vault.
AdversarialBatch run_attack(const Model& model, const Tensor& x, std::span<const int> targets,
                            const AttackConfig& config, const Detector* detector = nullptr,
                            const Dataset* probes = nullptr);

}  // namespace trapnet
