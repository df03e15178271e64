// trapnet: command-line pipeline over the trapnet library.
//
// Every subcommand reads an experiment config (--config) and works inside
// one output directory, resolved as --out, then $TRAPNET_OUT_DIR, then the
// config's output_dir. Exit codes: 0 success, 1 usage or config error,
// 2 runtime error.

#include "trapnet/bundle.hpp"
#include "trapnet/experiment.hpp"
#include "trapnet/idx.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace trapnet;
using json = nlohmann::json;

namespace {

struct Context {
  ExperimentConfig config;
  std::string config_text;
  fs::path out;
};

AttackMethod method_arg(const std::string& name) {
  try {
    return parse_attack_method(name);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

Context open_context(const std::string& config_path, const std::string& out_flag) {
  Context c;
  c.config = load_config(config_path, &c.config_text);
  if (!out_flag.empty()) c.out = out_flag;
  else if (const char* env = std::getenv("TRAPNET_OUT_DIR"); env && *env) c.out = env;
  else c.out = c.config.output_dir;
  fs::create_directories(c.out);
  return c;
}

ArtifactBundle require_bundle(const fs::path& path, const std::string& produced_by) {
  if (!fs::exists(path)) throw Error(path.string() + " not found; run '" + produced_by + "' first");
  return load_bundle(path);
}

ArtifactBundle require_detector(const Context& c) {
  const auto path = c.out / "detector.bundle";
  if (!fs::exists(path)) throw Error("detector not calibrated: " + path.string() + " not found; run 'calibrate' first");
  auto b = load_bundle(path);
  if (!b.model || !b.registry || !b.detector || !b.detector->calibrated())
    throw Error("detector not calibrated: " + path.string() + " lacks a calibrated detector");
  return b;
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100 * v << "%";
  return os.str();
}

void write_adversarial(const fs::path& out, const AttackRun& run, const AttackSources& sources) {
  const auto name = to_string(run.config.method);
  const auto idx = out / ("adv-" + name + ".idx");
  const auto tmp = fs::path(idx.string() + ".tmp");
  write_idx_tensor(tmp, run.batch.x_adv, IdxType::Float32);
  fs::rename(tmp, idx);
  json j;
  j["attack"] = name;
  j["rows"] = sources.rows;
  j["targets"] = run.batch.targets;
  std::vector<int> success(run.batch.success.begin(), run.batch.success.end());
  j["success"] = success;
  j["query_count"] = run.batch.query_count;
  j["final_loss"] = run.batch.final_loss;
  json norms = json::array();
  for (const auto& n : run.batch.norms) norms.push_back({n.l1, n.l2, n.linf});
  j["norms_l1_l2_linf"] = norms;
  write_file_atomic(out / ("adv-" + name + ".json"), j.dump(1));
}

AdversarialBatch read_adversarial(const fs::path& out, AttackMethod m, const AttackConfig& cfg) {
  const auto name = to_string(m);
  const auto idx = out / ("adv-" + name + ".idx");
  const auto meta = out / ("adv-" + name + ".json");
  if (!fs::exists(idx) || !fs::exists(meta)) throw Error("no stored " + name + " attack; run 'attack --method " + name + "' first");
  std::ifstream in(meta);
  const json j = json::parse(in);
  AdversarialBatch b;
  b.x_adv = system_input(read_idx_tensor(idx), cfg);
  b.targets = j.at("targets").get<std::vector<int>>();
  for (int s : j.at("success").get<std::vector<int>>()) b.success.push_back(s != 0);
  b.query_count = j.at("query_count").get<std::vector<Index>>();
  b.final_loss = j.at("final_loss").get<std::vector<double>>();
  b.norms.resize(b.success.size());
  return b;
}

void write_report(const fs::path& dir, const EvalReport& r) {
  fs::create_directories(dir);
  write_file_atomic(dir / "report.json", r.to_json());
  write_file_atomic(dir / "report.csv", r.to_csv());
  write_file_atomic(dir / "similarity.csv", r.similarity_csv());
}

void print_report(const EvalReport& r) {
  std::cout << std::left << std::setw(12) << "attack" << std::setw(10) << "success" << std::setw(11) << "detected"
            << std::setw(8) << "auc" << std::setw(12) << "post-det" << "\n";
  for (const auto& c : r.attacks)
    std::cout << std::setw(12) << c.attack << std::setw(10) << pct(c.attack_success) << std::setw(11)
              << pct(c.detection_rate) << std::setw(8) << std::setprecision(3) << c.auc << std::setw(12)
              << pct(c.post_detection_success) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trapdoor-enabled adversarial detection pipeline"};
  app.require_subcommand(1);
  std::string config_path, out_flag;

  auto add = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "Experiment config file")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out_flag, "Output directory");
    return sub;
  };

  auto* train_clean = add("train-clean", "Train the undefended model");
  auto* train_trap = add("train-trapdoor", "Train the trapdoored model");
  auto* calibrate_cmd = add("calibrate", "Build signatures and thresholds for the trapdoored model");
  auto* attack_cmd = add("attack", "Craft adversarial examples against the trapdoored model");
  std::string method_name = "pgd";
  attack_cmd->add_option("-m,--method", method_name, "Attack name");
  auto* detect_cmd = add("detect", "Run the detector on stored adversarial examples or an IDX file");
  std::string detect_method, detect_input;
  auto* dm = detect_cmd->add_option("-m,--method", detect_method, "Stored attack to check");
  detect_cmd->add_option("-i,--input", detect_input, "IDX tensor of inputs")->excludes(dm);
  auto* evaluate_cmd = add("evaluate", "Run every configured attack and write the report");
  bool with_unlearning = false;
  evaluate_cmd->add_flag("--unlearn", with_unlearning, "Also unlearn the trapdoor and measure transfer");
  auto* sweep_cmd = add("sweep", "Repeat train, attack and detect over a parameter grid");
  std::string sweep_kind;
  std::vector<double> grid;
  sweep_cmd->add_option("-k,--kind", sweep_kind, "Swept parameter")->required();
  sweep_cmd->add_option("-g,--grid", grid, "Grid values")->required()->delimiter(',');
  auto* report_cmd = add("report", "Print and re-export the stored evaluation report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    Context c = open_context(config_path, out_flag);
    auto* sub = app.get_subcommands().front();

    if (sub == train_clean) {
      const auto splits = load_splits(c.config);
      ArtifactBundle b;
      b.model = train_clean_model(c.config, splits);
      b.config_text = c.config_text;
      save_bundle(b, c.out / "clean.bundle");
      std::cout << "train-clean: accuracy " << pct(accuracy(*b.model, splits.evaluation)) << " -> "
                << (c.out / "clean.bundle").string() << "\n";
    } else if (sub == train_trap) {
      const auto splits = load_splits(c.config);
      ArtifactBundle b;
      b.registry = build_registry(c.config, splits.train.sample_shape(), splits.train.num_classes);
      b.model = train_trapdoor_model(c.config, splits, *b.registry);
      b.config_text = c.config_text;
      save_bundle(b, c.out / "trapdoored.bundle");
      double worst = 1;
      for (const auto& [l, v] : injection_success_rate(*b.model, splits.evaluation, *b.registry)) worst = std::min(worst, v);
      std::cout << "train-trapdoor: accuracy " << pct(accuracy(*b.model, splits.evaluation))
                << ", injection success (min over labels) " << pct(worst) << " -> "
                << (c.out / "trapdoored.bundle").string() << "\n";
    } else if (sub == calibrate_cmd) {
      const auto splits = load_splits(c.config);
      auto b = require_bundle(c.out / "trapdoored.bundle", "train-trapdoor");
      b.detector = make_detector(c.config, *b.model, *b.registry, splits);
      save_bundle(b, c.out / "detector.bundle");
      std::cout << "calibrate: " << b.detector->labels().size() << " label(s) at FPR " << pct(c.config.detector.fpr)
                << " -> " << (c.out / "detector.bundle").string() << "\n";
    } else if (sub == attack_cmd) {
      const auto splits = load_splits(c.config);
      const auto method = method_arg(method_name);
      const auto& cfg = c.config.attack(method);
      std::optional<ArtifactBundle> det;
      if (method == AttackMethod::OracleSignature) det = require_detector(c);
      auto b = det ? *det : require_bundle(c.out / "trapdoored.bundle", "train-trapdoor");
      const auto sources = attack_sources(*b.model, splits.evaluation, b.registry->labels(), c.config.attack_count);
      const auto run = run_configured_attack(*b.model, sources, cfg, det ? &*det->detector : nullptr, &splits.calibration);
      write_adversarial(c.out, run, sources);
      std::cout << "attack " << to_string(method) << ": success " << pct(run.batch.success_rate()) << " ("
                << run.batch.successes() << "/" << run.batch.size() << ")\n";
    } else if (sub == detect_cmd) {
      auto b = require_detector(c);
      std::ostringstream csv;
      csv << "row,predicted,similarity,flag\n";
      Tensor x;
      std::vector<Index> rows;
      std::string what;
      if (!detect_input.empty()) {
        x = read_idx_tensor(detect_input);
        what = detect_input;
        for (Index i = 0; i < x.dim(0); ++i) rows.push_back(i);
      } else {
        const auto method = method_arg(detect_method.empty() ? "pgd" : detect_method);
        auto adv = read_adversarial(c.out, method, c.config.attack(method));
        rows = adv.successful_indices();
        if (rows.empty()) throw Error("stored " + to_string(method) + " attack has no successful rows");
        x = adv.x_adv.gather_rows(rows);
        what = to_string(method) + " (successful rows)";
      }
      const auto ds = detect_batch(*b.detector, *b.model, x);
      Index flagged = 0;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        flagged += ds[i].flag;
        csv << rows[i] << ',' << ds[i].label << ',' << ds[i].best_similarity << ',' << int(ds[i].flag) << "\n";
      }
      const auto name = detect_input.empty() ? to_string(method_arg(detect_method.empty() ? "pgd" : detect_method))
                                             : fs::path(detect_input).stem().string();
      write_file_atomic(c.out / ("detect-" + name + ".csv"), csv.str());
      std::cout << "detect " << what << ": flagged " << flagged << "/" << ds.size() << " ("
                << pct(double(flagged) / double(ds.size())) << ")\n";
    } else if (sub == evaluate_cmd) {
      auto b = require_detector(c);
      const auto splits = load_splits(c.config);
      std::optional<Model> clean, unlearned;
      if (fs::exists(c.out / "clean.bundle")) clean = load_bundle(c.out / "clean.bundle").model;
      if (with_unlearning)
        unlearned = unlearn_trapdoor(*b.model, *b.registry, splits.train, splits.calibration, c.config.unlearn,
                                     train_config(c.config), stream_seed(c.config, "eval", "unlearn"))
                        .model;
      const auto r = evaluate_experiment(c.config, c.config_text, *b.model, *b.registry, *b.detector, splits,
                                         clean ? &*clean : nullptr, unlearned ? &*unlearned : nullptr);
      write_report(c.out, r);
      double worst = 1;
      for (const auto& a : r.attacks) worst = std::min(worst, a.detection_rate);
      std::cout << "evaluate: " << r.attacks.size() << " attacks, lowest detection " << pct(worst)
                << ", benign FPR " << pct(r.empirical_fpr) << " -> " << (c.out / "report.json").string() << "\n";
    } else if (sub == sweep_cmd) {
      const auto kind = parse_sweep_kind(sweep_kind);
      const auto splits = load_splits(c.config);
      const auto reports = sweep(kind, grid, c.config, c.config_text, splits);
      const auto dir = c.out / ("sweep-" + to_string(kind));
      std::ostringstream all;
      all << "value," << kReportCsvHeader << "\n";
      for (std::size_t k = 0; k < reports.size(); ++k) {
        write_report(dir / std::to_string(k), reports[k]);
        std::istringstream rows(reports[k].to_csv());
        std::string line;
        std::getline(rows, line);
        while (std::getline(rows, line)) all << grid[k] << ',' << line << "\n";
      }
      write_file_atomic(dir / "sweep.csv", all.str());
      std::cout << "sweep " << to_string(kind) << ": " << reports.size() << " grid points -> "
                << (dir / "sweep.csv").string() << "\n";
    } else if (sub == report_cmd) {
      const auto path = c.out / "report.json";
      if (!fs::exists(path)) throw Error(path.string() + " not found; run 'evaluate' first");
      std::ifstream in(path);
      std::stringstream buf;
      buf << in.rdbuf();
      const auto r = EvalReport::from_json(buf.str());
      print_report(r);
      write_file_atomic(c.out / "report.csv", r.to_csv());
      write_file_atomic(c.out / "similarity.csv", r.similarity_csv());
      std::cout << "report: " << r.task << ", " << r.attacks.size() << " attacks, benign FPR " << pct(r.empirical_fpr)
                << "\n";
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
