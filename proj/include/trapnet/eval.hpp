#pragma once

#include "trapnet/attacks.hpp"
#include "trapnet/config.hpp"
#include "trapnet/detection.hpp"
#include "trapnet/trapdoor.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace trapnet {

inline constexpr std::array<int, 5> kSummaryPercentiles{5, 25, 50, 75, 95};
inline constexpr Index kMinSummaryInputs = 20;
inline constexpr double kTheoremSlack = 0.15;

/// Nearest-rank percentile of an ascending list, q in (0, 100].
double nearest_rank(std::span<const double> sorted, double q);

/// Area under the ROC curve of adv scores against benign scores
/// (Mann-Whitney U / (n_b n_a), ties count one half).
double roc_auc(std::span<const double> benign, std::span<const double> adv);

struct SimilaritySummary {
  std::string tag;
  Index count = 0;
  /// Values at kSummaryPercentiles.
  std::array<double, 5> values{};

  double percentile(int p) const;
};

/// Summary of raw values; needs at least kMinSummaryInputs of them.
SimilaritySummary summarize(std::vector<double> values, std::string tag);

/// Max-over-signatures similarity for the label the model assigns each row.
/// Rows assigned to undefended labels are skipped.
std::vector<double> assigned_similarities(const Detector& detector, const Model& model, const Tensor& x);

SimilaritySummary similarity_distribution(const Detector& detector, const Model& model, const Tensor& inputs,
                                          std::string tag);

struct DetectionRate {
  double rate = 0;
  Index successes = 0;
  Index flagged = 0;
  std::map<int, double> thresholds;
};

/// Fraction of the successful rows of `adversarial` flagged under thresholds
/// set at `fpr` on `benign` (per label, over the benign rows assigned to it).
/// fpr == 1 flags every row that lands on a defended label.
DetectionRate detection_at_fpr(const Detector& detector, const Model& model, const AdversarialBatch& adversarial,
                               const Dataset& benign, double fpr);
double detection_rate_at_fpr(const Detector& detector, const Model& model, const AdversarialBatch& adversarial,
                             const Dataset& benign, double fpr);

/// Rows of x the detector flags.
std::vector<bool> flags(const Detector& detector, const Model& model, const Tensor& x);

/// Copies of clean inputs carrying a registry trapdoor, labelled with their
/// true label; ratio * |clean| rows per defended label.
Dataset relabeled_trapdoor_data(const Dataset& clean, const TrapdoorRegistry& registry, double ratio,
                                std::uint64_t seed);

struct UnlearnResult {
  Model model;
  int epochs = 0;
  std::map<int, double> injection_success;
};

/// Fine-tunes on clean plus trapdoored inputs at their true labels, one
/// epoch at a time, until every defended label's injection success on
/// `check` is at most config.target_injection. Throws Error when the epoch
/// budget runs out.
UnlearnResult unlearn_trapdoor(const Model& trapdoored, const TrapdoorRegistry& registry, const Dataset& clean,
                               const Dataset& check, const UnlearnConfig& config, TrainConfig train,
                               std::uint64_t seed);

struct TransferResult {
  AttackMethod method{};
  /// Targeted success on the source model.
  double source_success = 0;
  /// Fraction of all crafted rows the target model assigns to the target label.
  double transfer_rate = 0;
};

/// Crafts each attack on `source` and replays it against `target`.
std::vector<TransferResult> transfer_experiment(const Model& source, const Model& target,
                                                std::span<const AttackConfig> attacks, const Tensor& x,
                                                std::span<const int> targets);

struct TheoremCheckReport {
  double mu_hat = 0;
  double nu_hat = 0;
  double sigma_hat = 0;
  std::string rho_note;
  /// nu_hat <= mu_hat + slack whenever sigma_hat >= 0.8.
  bool holds = true;
};

/// mu from injection success on `samples`, nu from the attack, sigma as the
/// mean cosine between g(A(x)) and g(x + trapdoor) over successful rows,
/// taking the best trapdoor of the target label.
TheoremCheckReport theorem_check(const Model& model, const TrapdoorRegistry& registry, const Detector& detector,
                                 const Tensor& sources, const AdversarialBatch& attack, const Dataset& samples,
                                 double slack = kTheoremSlack);

struct AttackCell {
  std::string attack;
  /// Target of every row, or -1 when rows target several labels.
  int target_label = -1;
  Index attempted = 0;
  Index successes = 0;
  double attack_success = 0;
  double detection_rate = 0;
  double auc = 0;
  /// Successful and unflagged, over attempted.
  double post_detection_success = 0;
  std::optional<double> transfer_from_clean;
  std::optional<double> transfer_from_unlearned;
};

struct EvalReport {
  std::string task;
  std::string clean_hash, trapdoored_hash, unlearned_hash;
  std::vector<AttackCell> attacks;
  std::optional<double> clean_accuracy;
  double trapdoored_accuracy = 0;
  std::map<int, double> injection_success;
  double fpr_target = 0.05;
  /// Flagged share of all held-out benign inputs.
  double empirical_fpr = 0;
  /// Flagged share of held-out benign inputs assigned to each label.
  std::map<int, double> label_fpr;
  std::uint64_t master_seed = 0;
  std::map<std::string, std::uint64_t> seeds;
  double runtime_seconds = 0;
  std::string config_text;
  std::vector<SimilaritySummary> similarity;

  /// Throws PreconditionError when a rate leaves [0,1].
  void validate() const;
  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  /// One row per attack cell.
  std::string to_csv() const;
  /// input_class,attack,percentile,value
  std::string similarity_csv() const;
};

inline const char* kReportCsvHeader =
    "task,attack,target_label,attempted,successes,attack_success,detection_rate,auc,post_detection_success,"
    "transfer_from_clean,transfer_from_unlearned,fpr_target,empirical_fpr,clean_accuracy,trapdoored_accuracy,"
    "master_seed";

/// Hex SHA-256 of a model's bundle encoding.
std::string model_hash(const Model& model);

}  // namespace trapnet
