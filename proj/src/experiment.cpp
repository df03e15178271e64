#include "trapnet/experiment.hpp"

#include "trapnet/idx.hpp"
#include "trapnet/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <optional>

namespace trapnet {

namespace {

Dataset leading(const Dataset& d, Index count) { return count > 0 && count < d.size() ? d.slice(0, count) : d; }

}  // namespace

Splits load_splits(const ExperimentConfig& config) {
  Dataset train, test;
  if (config.data.source == "mnist") {
    const std::filesystem::path dir = config.data.dir;
    auto pick = [&](const std::string& stem) {
      auto gz = dir / (stem + ".gz");
      return std::filesystem::exists(gz) ? gz : dir / stem;
    };
    train = load_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"));
    test = load_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"));
  } else {
    const auto& d = config.data;
    // Rows come in class order; take them round-robin so leading slices
    // stay balanced, the first half of each class for training.
    const Dataset all = synth_blobs(d.blob_classes, d.blob_dim, 2 * d.blob_per_class,
                                    stream_seed(config, "cli-io", "blobs"));
    std::vector<Index> tr, te;
    for (Index k = 0; k < 2 * d.blob_per_class; ++k)
      for (Index c = 0; c < d.blob_classes; ++c) (k < d.blob_per_class ? tr : te).push_back(c * 2 * d.blob_per_class + k);
    train = all.subset(tr);
    test = all.subset(te);
  }
  config.validate(train.num_classes);
  train = leading(train, config.data.train_count);
  test = leading(test, config.data.test_count);
  const auto cal = Index(std::round(config.data.calibration_fraction * double(test.size())));
  if (cal < 1 || cal >= test.size()) throw ConfigError("config: held-out split too small to divide");
  return {train, test.slice(0, cal), test.slice(cal, test.size() - cal)};
}

Model initial_model(const ExperimentConfig& config, const Dataset& data) {
  const auto seed = stream_seed(config, "model-zoo", "init");
  if (config.model == "mnist_cnn") {
    if (data.sample_shape() != Shape{1, 28, 28}) throw ConfigError("config: mnist_cnn needs 1x28x28 inputs");
    return build_mnist_cnn(seed);
  }
  if (data.sample_shape().size() != 1) throw ConfigError("config: mlp needs flat inputs");
  return build_mlp(data.sample_shape()[0], config.mlp_hidden, data.num_classes, seed);
}

TrainConfig train_config(const ExperimentConfig& config) {
  TrainConfig t = config.train;
  t.seed = stream_seed(config, "model-zoo", "train");
  return t;
}

Model train_clean_model(const ExperimentConfig& config, const Splits& splits) {
  Model m = initial_model(config, splits.train);
  const auto t = train_config(config);
  train(m, splits.train, t);
  m.add_trained_epochs(t.epochs);
  return m;
}

TrapdoorRegistry build_registry(const ExperimentConfig& config, const Shape& sample_shape, int num_classes) {
  const auto seed = stream_seed(config, "trapdoor", "registry");
  if (config.defense.all_labels) {
    auto opts = config.defense.recipe.multi;
    opts.kappa = config.defense.recipe.kappa;
    return make_all_label_registry(sample_shape, num_classes, seed, opts);
  }
  TrapdoorRegistry reg;
  reg.seed = seed;
  for (int label : config.defense.labels) {
    auto recipe = config.defense.recipe;
    recipe.target_label = label;
    const auto one = make_single_label_registry(sample_shape, recipe, config.defense.n, config.defense.variant,
                                                derive_seed(seed, "trapdoor", "label-" + std::to_string(label)));
    reg.add(one.at(label), one.intensity.at(label));
  }
  return reg;
}

Model train_trapdoor_model(const ExperimentConfig& config, const Splits& splits, const TrapdoorRegistry& registry) {
  TrapdoorTrainingConfig t;
  t.injection_ratio = config.defense.injection_ratio;
  t.resample_each_epoch = config.defense.resample_each_epoch;
  t.train = train_config(config);
  auto [m, log] = train_trapdoored(initial_model(config, splits.train), splits.train, registry, t);
  (void)log;
  return m;
}

SignatureOptions signature_options(const ExperimentConfig& config) {
  SignatureOptions so;
  so.layers = config.detector.layers;
  if (config.detector.neuron_fraction < 1 && !config.detector.sampling_layers.empty())
    so.layers = config.detector.sampling_layers;
  so.neuron_fraction = config.detector.neuron_fraction;
  so.subset_seed = stream_seed(config, "detection", "subset");
  return so;
}

Detector make_detector(const ExperimentConfig& config, const Model& model, const TrapdoorRegistry& registry,
                       const Splits& splits) {
  return calibrate(build_detector(model, registry, splits.calibration, signature_options(config)), model,
                   splits.calibration, config.detector.fpr);
}

AttackSources attack_sources(const Model& model, const Dataset& evaluation, const std::vector<int>& labels,
                             Index count) {
  if (labels.empty()) throw PreconditionError("attack_sources: no target labels");
  AttackSources s;
  const auto pred = predict(model, evaluation.inputs);
  std::size_t turn = 0;
  for (Index i = 0; i < evaluation.size() && Index(s.rows.size()) < count; ++i) {
    const int y = evaluation.labels[std::size_t(i)];
    if (pred[std::size_t(i)] != y) continue;
    int target = labels[turn % labels.size()];
    if (target == y) {
      if (labels.size() == 1) continue;
      target = labels[++turn % labels.size()];
    }
    ++turn;
    s.rows.push_back(i);
    s.targets.push_back(target);
  }
  if (s.rows.empty()) throw PreconditionError("attack_sources: no eligible evaluation inputs");
  s.x = evaluation.inputs.gather_rows(s.rows);
  return s;
}

AttackRun run_configured_attack(const Model& model, const AttackSources& sources, const AttackConfig& config,
                                const Detector* detector, const Dataset* probes) {
  AttackRun r{config, run_attack(model, sources.x, sources.targets, config, detector, probes), {}};
  r.seen = r.batch;
  r.seen.x_adv = system_input(r.batch.x_adv, config);
  return r;
}

AttackCell score_attack(const AttackRun& run, const Detector& detector, const Model& model,
                        const Dataset& calibration, const Dataset& benign) {
  AttackCell c;
  c.attack = to_string(run.config.method);
  const auto& t = run.batch.targets;
  c.target_label = std::all_of(t.begin(), t.end(), [&](int v) { return v == t.front(); }) ? t.front() : -1;
  c.attempted = run.batch.size();
  c.successes = run.batch.successes();
  c.attack_success = run.batch.success_rate();
  if (c.successes == 0) return c;

  const auto det = detection_at_fpr(detector, model, run.seen, calibration, detector.fpr_target);
  c.detection_rate = det.rate;
  c.post_detection_success = double(det.successes - det.flagged) / double(c.attempted);

  const auto benign_scores = assigned_similarities(detector, model, benign.inputs);
  const auto adv_scores =
      assigned_similarities(detector, model, run.seen.x_adv.gather_rows(run.seen.successful_indices()));
  if (!benign_scores.empty() && !adv_scores.empty()) c.auc = roc_auc(benign_scores, adv_scores);
  return c;
}

EvalReport evaluate_experiment(const ExperimentConfig& config, const std::string& config_text,
                               const Model& trapdoored, const TrapdoorRegistry& registry, const Detector& detector,
                               const Splits& splits, const Model* clean, const Model* unlearned) {
  if (!detector.calibrated()) throw PreconditionError("detector not calibrated");
  const auto start = std::chrono::steady_clock::now();
  EvalReport r;
  r.task = config.name;
  r.config_text = config_text;
  r.master_seed = config.seed;
  r.fpr_target = detector.fpr_target;
  r.trapdoored_hash = model_hash(trapdoored);
  r.trapdoored_accuracy = accuracy(trapdoored, splits.evaluation);
  if (clean) {
    r.clean_hash = model_hash(*clean);
    r.clean_accuracy = accuracy(*clean, splits.evaluation);
  }
  if (unlearned) r.unlearned_hash = model_hash(*unlearned);
  r.injection_success = injection_success_rate(trapdoored, splits.evaluation, registry);
  r.seeds = {{"init", stream_seed(config, "model-zoo", "init")},
             {"train", stream_seed(config, "model-zoo", "train")},
             {"registry", stream_seed(config, "trapdoor", "registry")},
             {"subset", detector.subset_seed}};

  const auto benign = detect_batch(detector, trapdoored, splits.evaluation.inputs);
  std::map<int, std::pair<Index, Index>> per_label;
  Index flagged = 0;
  for (const auto& d : benign) {
    flagged += d.flag;
    if (detector.defends(d.label)) {
      per_label[d.label].first += d.flag;
      per_label[d.label].second += 1;
    }
  }
  r.empirical_fpr = double(flagged) / double(benign.size());
  for (const auto& [l, fc] : per_label) r.label_fpr[l] = double(fc.first) / double(fc.second);
  auto benign_sims = assigned_similarities(detector, trapdoored, splits.evaluation.inputs);
  if (Index(benign_sims.size()) >= kMinSummaryInputs) r.similarity.push_back(summarize(benign_sims, "benign"));

  const auto labels = detector.labels();
  const auto sources = attack_sources(trapdoored, splits.evaluation, labels, config.attack_count);
  const auto attacks = config.evaluated_attacks();
  for (const auto& a : attacks) {
    const auto run = run_configured_attack(trapdoored, sources, a, &detector, &splits.calibration);
    r.attacks.push_back(score_attack(run, detector, trapdoored, splits.calibration, splits.evaluation));
    r.seeds["attack-" + to_string(a.method)] = a.seed;
    auto adv = assigned_similarities(detector, trapdoored, run.seen.x_adv.gather_rows(run.seen.successful_indices()));
    if (Index(adv.size()) >= kMinSummaryInputs) r.similarity.push_back(summarize(adv, to_string(a.method)));
  }

  std::vector<AttackConfig> transferable;
  std::vector<std::size_t> slots;
  for (std::size_t k = 0; k < attacks.size(); ++k) {
    const auto m = attacks[k].method;
    if (m == AttackMethod::OracleSignature || m == AttackMethod::Vault) continue;
    transferable.push_back(attacks[k]);
    slots.push_back(k);
  }
  if (clean) {
    const auto t = transfer_experiment(*clean, trapdoored, transferable, sources.x, sources.targets);
    for (std::size_t k = 0; k < t.size(); ++k) r.attacks[slots[k]].transfer_from_clean = t[k].transfer_rate;
  }
  if (unlearned) {
    const auto t = transfer_experiment(*unlearned, trapdoored, transferable, sources.x, sources.targets);
    for (std::size_t k = 0; k < t.size(); ++k) r.attacks[slots[k]].transfer_from_unlearned = t[k].transfer_rate;
  }

  r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  r.validate();
  return r;
}

SweepKind parse_sweep_kind(const std::string& name) {
  for (auto k : {SweepKind::InjectionRatio, SweepKind::TrapdoorCountLocations, SweepKind::TrapdoorCountIntensities,
                 SweepKind::SignatureLayer, SweepKind::NeuronFraction})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown sweep kind '" + name + "'");
}

std::string to_string(SweepKind k) {
  switch (k) {
    case SweepKind::InjectionRatio: return "injection_ratio";
    case SweepKind::TrapdoorCountLocations: return "trapdoor_count_locations";
    case SweepKind::TrapdoorCountIntensities: return "trapdoor_count_intensities";
    case SweepKind::SignatureLayer: return "signature_layer";
    case SweepKind::NeuronFraction: return "neuron_fraction";
  }
  return "?";
}

ExperimentConfig sweep_point(const ExperimentConfig& base, SweepKind kind, double value) {
  ExperimentConfig c = base;
  auto whole = [&] {
    if (value < 1 || value != std::floor(value)) throw ConfigError("sweep: " + to_string(kind) + " needs whole values >= 1");
    return int(value);
  };
  switch (kind) {
    case SweepKind::InjectionRatio:
      c.defense.injection_ratio = value;
      break;
    case SweepKind::TrapdoorCountLocations:
      c.defense.n = whole();
      c.defense.variant = SetVariant::Locations;
      break;
    case SweepKind::TrapdoorCountIntensities:
      c.defense.n = whole();
      c.defense.variant = SetVariant::Intensities;
      break;
    case SweepKind::SignatureLayer:
      if (value < 0 || value != std::floor(value)) throw ConfigError("sweep: signature_layer needs layer indices");
      c.detector.layers = {Index(value)};
      c.detector.neuron_fraction = 1;
      break;
    case SweepKind::NeuronFraction:
      c.detector.neuron_fraction = value;
      break;
  }
  c.name = base.name + "/" + to_string(kind) + "=" + std::to_string(value);
  c.validate();
  return c;
}

std::vector<EvalReport> sweep(SweepKind kind, const std::vector<double>& grid, const ExperimentConfig& base,
                              const std::string& config_text, const Splits& splits) {
  if (grid.empty()) throw PreconditionError("sweep: empty grid");
  const bool shared_training = kind == SweepKind::SignatureLayer || kind == SweepKind::NeuronFraction;
  std::optional<Model> shared;
  std::optional<TrapdoorRegistry> shared_registry;
  std::vector<EvalReport> out;
  for (double v : grid) {
    const auto start = std::chrono::steady_clock::now();
    const auto c = sweep_point(base, kind, v);
    const int classes = splits.train.num_classes;
    TrapdoorRegistry reg = shared_registry ? *shared_registry : build_registry(c, splits.train.sample_shape(), classes);
    Model m = shared ? *shared : train_trapdoor_model(c, splits, reg);
    if (shared_training && !shared) {
      shared = m;
      shared_registry = reg;
    }
    const auto det = make_detector(c, m, reg, splits);
    auto r = evaluate_experiment(c, config_text, m, reg, det, splits);
    r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace trapnet
