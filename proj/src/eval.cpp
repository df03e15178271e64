#include "trapnet/eval.hpp"

#include "trapnet/bundle.hpp"
#include "trapnet/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace trapnet {

using json = nlohmann::json;

double nearest_rank(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw PreconditionError("nearest_rank: empty list");
  if (!(q > 0 && q <= 100)) throw PreconditionError("nearest_rank: q outside (0,100]");
  const auto n = double(sorted.size());
  const auto rank = std::max<Index>(1, Index(std::ceil(q / 100.0 * n - 1e-9)));
  return sorted[std::size_t(rank - 1)];
}

double roc_auc(std::span<const double> benign, std::span<const double> adv) {
  if (benign.empty() || adv.empty()) throw PreconditionError("roc_auc: empty pool");
  std::vector<double> b(benign.begin(), benign.end());
  std::sort(b.begin(), b.end());
  // For each adversarial score: benign strictly below, plus half the ties.
  double u = 0;
  for (double a : adv) {
    auto lo = std::lower_bound(b.begin(), b.end(), a);
    auto hi = std::upper_bound(lo, b.end(), a);
    u += double(lo - b.begin()) + 0.5 * double(hi - lo);
  }
  return u / (double(b.size()) * double(adv.size()));
}

double SimilaritySummary::percentile(int p) const {
  for (std::size_t k = 0; k < kSummaryPercentiles.size(); ++k)
    if (kSummaryPercentiles[k] == p) return values[k];
  throw PreconditionError("similarity summary: no " + std::to_string(p) + "th percentile");
}

SimilaritySummary summarize(std::vector<double> values, std::string tag) {
  if (Index(values.size()) < kMinSummaryInputs)
    throw PreconditionError("similarity_distribution: " + tag + " has " + std::to_string(values.size()) +
                            " inputs, need " + std::to_string(kMinSummaryInputs));
  std::sort(values.begin(), values.end());
  SimilaritySummary s;
  s.tag = std::move(tag);
  s.count = Index(values.size());
  for (std::size_t k = 0; k < kSummaryPercentiles.size(); ++k) s.values[k] = nearest_rank(values, kSummaryPercentiles[k]);
  return s;
}

std::vector<double> assigned_similarities(const Detector& detector, const Model& model, const Tensor& x) {
  if (x.is_null() || x.dim(0) == 0) return {};
  auto scores = signature_scores(detector, model, x);
  auto pred = predict(model, x);
  std::vector<double> out;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto it = scores.find(pred[i]);
    if (it != scores.end()) out.push_back(it->second[i]);
  }
  return out;
}

SimilaritySummary similarity_distribution(const Detector& detector, const Model& model, const Tensor& inputs,
                                          std::string tag) {
  return summarize(assigned_similarities(detector, model, inputs), std::move(tag));
}

DetectionRate detection_at_fpr(const Detector& detector, const Model& model, const AdversarialBatch& adversarial,
                               const Dataset& benign, double fpr) {
  const auto ok = adversarial.successful_indices();
  if (ok.empty()) throw PreconditionError("detection_rate_at_fpr: no successful adversarial examples");
  if (!(fpr > 0 && fpr <= 1)) throw PreconditionError("detection_rate_at_fpr: fpr outside (0,1]");

  DetectionRate out;
  const auto benign_scores = signature_scores(detector, model, benign.inputs);
  const auto benign_pred = predict(model, benign.inputs);
  for (const auto& [label, col] : benign_scores) {
    std::vector<double> pool;
    for (std::size_t i = 0; i < col.size(); ++i)
      if (benign_pred[i] == label) pool.push_back(col[i]);
    if (pool.empty() && fpr < 1) continue;
    out.thresholds[label] = pool.empty() ? -std::numeric_limits<double>::infinity() : percentile_threshold(pool, fpr);
  }

  const Tensor x = adversarial.x_adv.gather_rows(ok);
  const auto scores = signature_scores(detector, model, x);
  const auto pred = predict(model, x);
  for (std::size_t i = 0; i < ok.size(); ++i) {
    auto t = out.thresholds.find(pred[i]);
    if (t == out.thresholds.end()) {
      if (detector.defends(pred[i]))
        throw PreconditionError("detection_rate_at_fpr: no benign inputs assigned to label " +
                                std::to_string(pred[i]));
      continue;
    }
    if (scores.at(pred[i])[i] > t->second) ++out.flagged;
  }
  out.successes = Index(ok.size());
  out.rate = double(out.flagged) / double(out.successes);
  return out;
}

double detection_rate_at_fpr(const Detector& detector, const Model& model, const AdversarialBatch& adversarial,
                             const Dataset& benign, double fpr) {
  return detection_at_fpr(detector, model, adversarial, benign, fpr).rate;
}

std::vector<bool> flags(const Detector& detector, const Model& model, const Tensor& x) {
  std::vector<bool> out;
  for (const auto& d : detect_batch(detector, model, x)) out.push_back(d.flag);
  return out;
}

Dataset relabeled_trapdoor_data(const Dataset& clean, const TrapdoorRegistry& registry, double ratio,
                                std::uint64_t seed) {
  if (clean.empty()) throw PreconditionError("unlearn: empty clean data");
  Rng rng(seed);
  std::uniform_int_distribution<Index> row(0, clean.size() - 1);
  Dataset out = clean;
  for (const auto& [label, set] : registry.sets) {
    const auto count = Index(std::ceil(ratio * double(clean.size())));
    std::uniform_int_distribution<Index> member(0, set.size() - 1);
    std::vector<Index> rows(static_cast<std::size_t>(count));
    std::vector<Index> members(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      rows[k] = row(rng);
      members[k] = member(rng);
    }
    Dataset part = clean.subset(rows);
    for (Index m = 0; m < set.size(); ++m) {
      std::vector<Index> sel;
      for (std::size_t k = 0; k < rows.size(); ++k)
        if (members[k] == m) sel.push_back(Index(k));
      if (sel.empty()) continue;
      const Tensor poisoned = inject(part.inputs.gather_rows(sel), set.trapdoors[std::size_t(m)]);
      auto dst = part.inputs.matrix();
      for (std::size_t j = 0; j < sel.size(); ++j) dst.row(sel[j]) = poisoned.matrix().row(Index(j));
    }
    out = concat(out, part);
  }
  return out;
}

UnlearnResult unlearn_trapdoor(const Model& trapdoored, const TrapdoorRegistry& registry, const Dataset& clean,
                               const Dataset& check, const UnlearnConfig& config, TrainConfig train,
                               std::uint64_t seed) {
  if (config.max_epochs < 1) throw PreconditionError("unlearn: max_epochs must be positive");
  UnlearnResult r{trapdoored, 0, {}};
  train.epochs = 1;
  train.optimizer.lr = config.lr;
  auto converged = [&] {
    r.injection_success = injection_success_rate(r.model, check, registry);
    return std::all_of(r.injection_success.begin(), r.injection_success.end(),
                       [&](const auto& kv) { return kv.second <= config.target_injection; });
  };
  while (!converged()) {
    if (r.epochs == config.max_epochs)
      throw Error("unlearn: injection success still above " + std::to_string(config.target_injection) + " after " +
                  std::to_string(config.max_epochs) + " epochs");
    const auto k = std::to_string(r.epochs);
    train.seed = derive_seed(seed, "eval", "unlearn-shuffle-" + k);
    trapnet::train(r.model,
                   relabeled_trapdoor_data(clean, registry, config.injection_ratio,
                                           derive_seed(seed, "eval", "unlearn-data-" + k)),
                   train);
    r.model.add_trained_epochs(1);
    ++r.epochs;
  }
  return r;
}

std::vector<TransferResult> transfer_experiment(const Model& source, const Model& target,
                                                std::span<const AttackConfig> attacks, const Tensor& x,
                                                std::span<const int> targets) {
  if (source.spec().input_shape != target.spec().input_shape ||
      source.spec().num_classes != target.spec().num_classes)
    throw PreconditionError("transfer_experiment: models disagree on input or output space");
  std::vector<TransferResult> out;
  for (const auto& cfg : attacks) {
    const auto adv = run_attack(source, x, targets, cfg);
    const auto pred = system_predict(target, adv.x_adv, cfg);
    Index hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == targets[i];
    out.push_back({cfg.method, adv.success_rate(), double(hit) / double(pred.size())});
  }
  return out;
}

TheoremCheckReport theorem_check(const Model& model, const TrapdoorRegistry& registry, const Detector& detector,
                                 const Tensor& sources, const AdversarialBatch& attack, const Dataset& samples,
                                 double slack) {
  if (sources.dim(0) != attack.size()) throw ShapeError("theorem_check: source and attack row counts differ");
  TheoremCheckReport r;
  const auto inj = injection_success_rate(model, samples, registry);
  double worst = 1;
  for (const auto& [label, v] : inj) worst = std::min(worst, v);
  r.mu_hat = std::clamp(1 - worst, 0.0, 1.0);
  r.nu_hat = 1 - attack.success_rate();

  const auto ok = attack.successful_indices();
  if (!ok.empty()) {
    const auto& layers = detector.signatures.begin()->second.front().layers;
    const Tensor x = sources.gather_rows(ok);
    const Tensor ga = feature_representation(model, attack.x_adv.gather_rows(ok), layers);
    std::map<int, std::vector<Tensor>> gt;
    for (const auto& [label, set] : registry.sets)
      for (const auto& t : set.trapdoors) gt[label].push_back(feature_representation(model, inject(x, t), layers));
    double sum = 0;
    for (std::size_t i = 0; i < ok.size(); ++i) {
      const int label = attack.targets[std::size_t(ok[i])];
      auto it = gt.find(label);
      if (it == gt.end()) throw PreconditionError("theorem_check: attack target has no trapdoor");
      double best = 0;
      const auto a = ga.matrix().row(Index(i));
      for (const auto& g : it->second) {
        const auto b = g.matrix().row(Index(i));
        const double na = a.norm(), nb = b.norm();
        if (na > 0 && nb > 0) best = std::max(best, double(a.dot(b)) / (na * nb));
      }
      sum += best;
    }
    r.sigma_hat = std::clamp(sum / double(ok.size()), 0.0, 1.0);
  }
  r.rho_note =
      "rho (total variation between trapdoored-training and attack input distributions) is not estimated; "
      "training inputs are clean digits plus the fixed mask pattern, attack inputs are norm-bounded "
      "perturbations of held-out digits";
  r.holds = !(r.sigma_hat >= 0.8) || r.nu_hat <= r.mu_hat + slack;
  return r;
}

std::string model_hash(const Model& model) {
  ArtifactBundle b;
  b.model = model;
  return hex(bundle_hash(b));
}

namespace {

void check_rate(double v, const std::string& what) {
  if (!(v >= 0 && v <= 1)) throw PreconditionError("report: " + what + " = " + std::to_string(v) + " outside [0,1]");
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> opt_from(const json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

std::string csv_num(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

std::string csv_opt(const std::optional<double>& v) { return v ? csv_num(*v) : ""; }

}  // namespace

void EvalReport::validate() const {
  check_rate(trapdoored_accuracy, "trapdoored_accuracy");
  if (clean_accuracy) check_rate(*clean_accuracy, "clean_accuracy");
  check_rate(fpr_target, "fpr_target");
  check_rate(empirical_fpr, "empirical_fpr");
  for (const auto& [l, v] : injection_success) check_rate(v, "injection_success");
  for (const auto& [l, v] : label_fpr) check_rate(v, "label_fpr");
  for (const auto& c : attacks) {
    check_rate(c.attack_success, c.attack + " attack_success");
    check_rate(c.detection_rate, c.attack + " detection_rate");
    check_rate(c.auc, c.attack + " auc");
    check_rate(c.post_detection_success, c.attack + " post_detection_success");
    if (c.transfer_from_clean) check_rate(*c.transfer_from_clean, c.attack + " transfer_from_clean");
    if (c.transfer_from_unlearned) check_rate(*c.transfer_from_unlearned, c.attack + " transfer_from_unlearned");
  }
}

std::string EvalReport::to_json() const {
  json j;
  j["task"] = task;
  j["model_hashes"] = {{"clean", clean_hash}, {"trapdoored", trapdoored_hash}, {"unlearned", unlearned_hash}};
  j["normal_accuracy"] = {{"clean", opt(clean_accuracy)}, {"trapdoored", trapdoored_accuracy}};
  json inj = json::object();
  for (const auto& [l, v] : injection_success) inj[std::to_string(l)] = v;
  j["injection_success"] = inj;
  j["fpr_target"] = fpr_target;
  j["empirical_fpr"] = empirical_fpr;
  json lf = json::object();
  for (const auto& [l, v] : label_fpr) lf[std::to_string(l)] = v;
  j["label_fpr"] = lf;
  j["master_seed"] = master_seed;
  j["seeds"] = seeds;
  j["runtime_seconds"] = runtime_seconds;
  j["config"] = config_text;
  json cells = json::array();
  for (const auto& c : attacks)
    cells.push_back({{"attack", c.attack},
                     {"target_label", c.target_label},
                     {"attempted", c.attempted},
                     {"successes", c.successes},
                     {"attack_success", c.attack_success},
                     {"detection_rate_at_fpr", c.detection_rate},
                     {"auc", c.auc},
                     {"post_detection_success", c.post_detection_success},
                     {"transfer_from_clean", opt(c.transfer_from_clean)},
                     {"transfer_from_unlearned", opt(c.transfer_from_unlearned)}});
  j["attacks"] = cells;
  json sims = json::array();
  for (const auto& s : similarity) {
    json vals = json::object();
    for (std::size_t k = 0; k < kSummaryPercentiles.size(); ++k) vals[std::to_string(kSummaryPercentiles[k])] = s.values[k];
    sims.push_back({{"tag", s.tag}, {"count", s.count}, {"percentiles", vals}});
  }
  j["similarity"] = sims;
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  EvalReport r;
  try {
    const json j = json::parse(text);
    r.task = j.at("task");
    r.clean_hash = j.at("model_hashes").at("clean");
    r.trapdoored_hash = j.at("model_hashes").at("trapdoored");
    r.unlearned_hash = j.at("model_hashes").at("unlearned");
    r.clean_accuracy = opt_from(j.at("normal_accuracy").at("clean"));
    r.trapdoored_accuracy = j.at("normal_accuracy").at("trapdoored");
    for (const auto& [k, v] : j.at("injection_success").items()) r.injection_success[std::stoi(k)] = v;
    r.fpr_target = j.at("fpr_target");
    r.empirical_fpr = j.at("empirical_fpr");
    for (const auto& [k, v] : j.at("label_fpr").items()) r.label_fpr[std::stoi(k)] = v;
    r.master_seed = j.at("master_seed");
    r.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    r.runtime_seconds = j.at("runtime_seconds");
    r.config_text = j.at("config");
    for (const auto& c : j.at("attacks")) {
      AttackCell a;
      a.attack = c.at("attack");
      a.target_label = c.at("target_label");
      a.attempted = c.at("attempted");
      a.successes = c.at("successes");
      a.attack_success = c.at("attack_success");
      a.detection_rate = c.at("detection_rate_at_fpr");
      a.auc = c.at("auc");
      a.post_detection_success = c.at("post_detection_success");
      a.transfer_from_clean = opt_from(c.at("transfer_from_clean"));
      a.transfer_from_unlearned = opt_from(c.at("transfer_from_unlearned"));
      r.attacks.push_back(a);
    }
    for (const auto& s : j.at("similarity")) {
      SimilaritySummary sum;
      sum.tag = s.at("tag");
      sum.count = s.at("count");
      for (std::size_t k = 0; k < kSummaryPercentiles.size(); ++k)
        sum.values[k] = s.at("percentiles").at(std::to_string(kSummaryPercentiles[k]));
      r.similarity.push_back(sum);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  r.validate();
  return r;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << kReportCsvHeader << "\n";
  for (const auto& c : attacks)
    os << task << ',' << c.attack << ',' << c.target_label << ',' << c.attempted << ',' << c.successes << ','
       << csv_num(c.attack_success) << ',' << csv_num(c.detection_rate) << ',' << csv_num(c.auc) << ','
       << csv_num(c.post_detection_success) << ',' << csv_opt(c.transfer_from_clean) << ','
       << csv_opt(c.transfer_from_unlearned) << ',' << csv_num(fpr_target) << ',' << csv_num(empirical_fpr) << ','
       << csv_opt(clean_accuracy) << ',' << csv_num(trapdoored_accuracy) << ',' << master_seed << "\n";
  return os.str();
}

std::string EvalReport::similarity_csv() const {
  std::ostringstream os;
  os << "input_class,attack,percentile,value\n";
  for (const auto& s : similarity) {
    const bool benign = s.tag == "benign";
    for (std::size_t k = 0; k < kSummaryPercentiles.size(); ++k)
      os << (benign ? "benign" : "adversarial") << ',' << (benign ? "none" : s.tag) << ',' << kSummaryPercentiles[k]
         << ',' << csv_num(s.values[k]) << "\n";
  }
  return os.str();
}

}  // namespace trapnet
