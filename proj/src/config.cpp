#include "trapnet/config.hpp"

#include "trapnet/rng.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

namespace trapnet {

namespace pt = boost::property_tree;

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return s;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Typed access to one section that remembers which keys were read.
class Section {
 public:
  Section(std::string name, const pt::ptree& tree) : name_(std::move(name)), tree_(tree) {}

  bool has(const std::string& key) {
    seen_.insert(key);
    return tree_.find(key) != tree_.not_found();
  }

  std::string raw(const std::string& key) { return trim(tree_.find(key)->second.data()); }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    out = convert<T>(key, raw(key));
  }

  /// Value in units of 1/255.
  void read_pixels(const std::string& key, double& out) {
    if (!has(key)) return;
    out = convert<double>(key, raw(key)) * kPixel;
  }

  void read_bool(const std::string& key, bool& out) {
    if (!has(key)) return;
    auto v = lower(raw(key));
    if (v == "true" || v == "1" || v == "yes" || v == "on") out = true;
    else if (v == "false" || v == "0" || v == "no" || v == "off") out = false;
    else fail(key, "expected a boolean, got '" + v + "'");
  }

  template <typename T>
  void read_list(const std::string& key, std::vector<T>& out) {
    if (!has(key)) return;
    out.clear();
    for (const auto& item : split_list(raw(key))) out.push_back(convert<T>(key, item));
  }

  void finish() const {
    for (const auto& [key, _] : tree_)
      if (!seen_.count(key)) throw ConfigError("config: unknown key '" + key + "' in [" + name_ + "]");
  }

  [[noreturn]] void fail(const std::string& key, const std::string& why) const {
    throw ConfigError("config: [" + name_ + "] " + key + ": " + why);
  }

 private:
  template <typename T>
  T convert(const std::string& key, const std::string& text) const {
    if constexpr (std::is_same_v<T, std::string>) return text;
    std::istringstream in(text);
    T v{};
    in >> v;
    if (in.fail() || !(in >> std::ws).eof()) fail(key, "cannot parse '" + text + "'");
    return v;
  }

  std::string name_;
  const pt::ptree& tree_;
  std::set<std::string> seen_;
};

void read_attack_common(Section& s, AttackConfig& a) {
  s.read_pixels("eps", a.eps);
  s.read_pixels("step_size", a.step_size);
  s.read_bool("random_start", a.random_start);
}

void read_attack_specific(Section& s, AttackConfig& a) {
  read_attack_common(s, a);
  switch (a.method) {
    case AttackMethod::Cw:
      s.read("iterations", a.cw.iterations);
      s.read("binary_steps", a.cw.binary_steps);
      s.read("lr", a.cw.lr);
      s.read("confidence", a.cw.confidence);
      s.read("initial_const", a.cw.initial_const);
      s.read_bool("abort_early", a.cw.abort_early);
      break;
    case AttackMethod::ElasticNet:
      s.read("iterations", a.en.iterations);
      s.read("binary_steps", a.en.binary_steps);
      s.read("lr", a.en.lr);
      s.read("beta", a.en.beta);
      s.read("confidence", a.en.confidence);
      s.read("initial_const", a.en.initial_const);
      s.read_bool("abort_early", a.en.abort_early);
      break;
    case AttackMethod::Spsa:
      s.read("iterations", a.spsa.iterations);
      s.read("lr", a.spsa.lr);
      s.read("perturbation_size", a.spsa.perturbation_size);
      s.read("samples", a.spsa.samples);
      s.read_bool("early_stop", a.spsa.early_stop);
      break;
    case AttackMethod::Bpda:
      s.read("iterations", a.iterations);
      s.read("levels", a.bpda.levels);
      break;
    case AttackMethod::OracleSignature:
    case AttackMethod::Vault:
      s.read("iterations", a.iterations);
      s.read("weight", a.adaptive.distance_weight);
      s.read("probe_count", a.adaptive.probe_count);
      s.read("known_trapdoors", a.adaptive.known_trapdoors);
      s.read("kmeans_restarts", a.adaptive.kmeans_restarts);
      s.read("kmeans_iterations", a.adaptive.kmeans_iterations);
      break;
    default:
      s.read("iterations", a.iterations);
      break;
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  ExperimentConfig c;
  const pt::ptree empty;
  auto child = [&](const std::string& name) -> const pt::ptree& {
    auto it = tree.find(name);
    return it == tree.not_found() ? empty : it->second;
  };

  for (const auto& [name, sub] : tree) {
    if (sub.empty() && !sub.data().empty()) throw ConfigError("config: key '" + name + "' outside a section");
    static const std::set<std::string> known{"experiment", "data", "defense", "train", "detector", "unlearn", "attack"};
    if (!known.count(name) && name.rfind("attack:", 0) != 0) throw ConfigError("config: unknown section [" + name + "]");
  }

  {
    Section s("experiment", child("experiment"));
    s.read("name", c.name);
    s.read("model", c.model);
    s.read_list("mlp_hidden", c.mlp_hidden);
    if (s.has("seed")) {
      s.read("seed", c.seed);
      c.seed_set = true;
    }
    s.read("output_dir", c.output_dir);
    s.finish();
  }
  {
    Section s("data", child("data"));
    s.read("source", c.data.source);
    s.read("dir", c.data.dir);
    s.read("train_count", c.data.train_count);
    s.read("test_count", c.data.test_count);
    s.read("calibration_fraction", c.data.calibration_fraction);
    s.read("blob_classes", c.data.blob_classes);
    s.read("blob_dim", c.data.blob_dim);
    s.read("blob_per_class", c.data.blob_per_class);
    s.finish();
  }
  {
    Section s("defense", child("defense"));
    if (s.has("labels")) {
      auto v = lower(s.raw("labels"));
      if (v == "all") {
        c.defense.all_labels = true;
        c.defense.labels.clear();
      } else {
        s.read_list("labels", c.defense.labels);
      }
    }
    if (s.has("trapdoor")) {
      auto v = lower(s.raw("trapdoor"));
      if (v == "single_square") c.defense.recipe.kind = TrapdoorKind::SingleSquare;
      else if (v == "multi_square") c.defense.recipe.kind = TrapdoorKind::MultiSquare;
      else s.fail("trapdoor", "expected single_square or multi_square");
    }
    s.read("side", c.defense.recipe.side);
    s.read("kappa", c.defense.recipe.kappa);
    s.read("squares", c.defense.recipe.multi.n_squares);
    s.read("square_side", c.defense.recipe.multi.square);
    s.read("n", c.defense.n);
    if (s.has("variant")) {
      auto v = lower(s.raw("variant"));
      if (v == "locations") c.defense.variant = SetVariant::Locations;
      else if (v == "intensities") c.defense.variant = SetVariant::Intensities;
      else s.fail("variant", "expected locations or intensities");
    }
    s.read("injection_ratio", c.defense.injection_ratio);
    s.read_bool("resample_each_epoch", c.defense.resample_each_epoch);
    s.finish();
  }
  {
    Section s("train", child("train"));
    s.read("epochs", c.train.epochs);
    s.read("batch", c.train.batch);
    s.read("lr", c.train.optimizer.lr);
    s.finish();
  }
  {
    Section s("detector", child("detector"));
    s.read_list("layers", c.detector.layers);
    s.read("neuron_fraction", c.detector.neuron_fraction);
    s.read("fpr", c.detector.fpr);
    s.read_list("sampling_layers", c.detector.sampling_layers);
    s.finish();
  }
  {
    Section s("unlearn", child("unlearn"));
    s.read("max_epochs", c.unlearn.max_epochs);
    s.read("injection_ratio", c.unlearn.injection_ratio);
    s.read("target_injection", c.unlearn.target_injection);
    s.read("lr", c.unlearn.lr);
    s.finish();
  }

  AttackConfig base;
  std::vector<std::string> methods{"pgd", "fgsm", "cw", "elasticnet", "spsa", "bpda"};
  {
    Section s("attack", child("attack"));
    s.read("count", c.attack_count);
    s.read("iterations", base.iterations);
    if (s.has("methods")) methods = split_list(s.raw("methods"));
    read_attack_common(s, base);
    s.finish();
  }
  std::map<AttackMethod, std::size_t> slot;
  auto add_method = [&](AttackMethod m) {
    if (slot.count(m)) return;
    AttackConfig a = base;
    a.method = m;
    slot[m] = c.attacks.size();
    c.attacks.push_back(a);
  };
  c.attack_defaults = base;
  try {
    for (const auto& m : methods) {
      c.methods.push_back(parse_attack_method(m));
      add_method(c.methods.back());
    }
  } catch (const Error& e) {
    throw ConfigError(std::string("config: [attack] methods: ") + e.what());
  }
  for (const auto& [name, sub] : tree) {
    if (name.rfind("attack:", 0) != 0) continue;
    AttackMethod m;
    try {
      m = parse_attack_method(name.substr(7));
    } catch (const Error&) {
      throw ConfigError("config: unknown attack section [" + name + "]");
    }
    // Sections for unlisted methods configure them for callers that name
    // the method, without adding them to `evaluate`.
    add_method(m);
    Section s(name, sub);
    read_attack_specific(s, c.attacks[slot.at(m)]);
    s.finish();
  }
  for (auto& a : c.attacks) a.seed = stream_seed(c, "attacks", to_string(a.method));
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, std::string* text) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  if (text) *text = buf.str();
  return parse_config(buf.str());
}

void ExperimentConfig::validate(int num_classes) const {
  if (!seed_set) throw ConfigError("config: [experiment] seed is required");
  if (model != "mnist_cnn" && model != "mlp") throw ConfigError("config: unknown model '" + model + "'");
  if (data.source != "mnist" && data.source != "blobs")
    throw ConfigError("config: unknown data source '" + data.source + "'");
  if (!(data.calibration_fraction > 0 && data.calibration_fraction < 1))
    throw ConfigError("config: calibration_fraction must lie in (0,1)");
  if (!defense.all_labels && defense.labels.empty()) throw ConfigError("config: no defended labels");
  for (int l : defense.labels)
    if (l < 0 || l >= num_classes)
      throw ConfigError("config: defended label " + std::to_string(l) + " outside [0, " +
                        std::to_string(num_classes) + ")");
  if (defense.n < 1) throw ConfigError("config: defense n must be >= 1");
  if (!(defense.injection_ratio > 0)) throw ConfigError("config: injection_ratio must be positive");
  if (train.epochs < 1 || train.batch < 1) throw ConfigError("config: train epochs and batch must be positive");
  if (!(detector.fpr > 0 && detector.fpr < 1)) throw ConfigError("config: fpr must lie in (0,1)");
  if (!(detector.neuron_fraction > 0 && detector.neuron_fraction <= 1))
    throw ConfigError("config: neuron_fraction must lie in (0,1]");
  if (attack_count < 1) throw ConfigError("config: attack count must be positive");
  for (const auto& a : attacks) {
    try {
      a.validate();
    } catch (const Error& e) {
      throw ConfigError(std::string("config: attack ") + to_string(a.method) + ": " + e.what());
    }
  }
}

std::vector<int> ExperimentConfig::defended_labels(int num_classes) const {
  if (!defense.all_labels) return defense.labels;
  std::vector<int> all(static_cast<std::size_t>(num_classes));
  for (int i = 0; i < num_classes; ++i) all[std::size_t(i)] = i;
  return all;
}

AttackConfig ExperimentConfig::attack(AttackMethod m) const {
  for (const auto& a : attacks)
    if (a.method == m) return a;
  AttackConfig a = attack_defaults;
  a.method = m;
  a.seed = stream_seed(*this, "attacks", to_string(m));
  return a;
}

std::vector<AttackConfig> ExperimentConfig::evaluated_attacks() const {
  std::vector<AttackConfig> out;
  for (auto m : methods) out.push_back(attack(m));
  return out;
}

std::uint64_t stream_seed(const ExperimentConfig& config, std::string_view module, std::string_view purpose) {
  return derive_seed(config.seed, module, purpose);
}

}  // namespace trapnet
