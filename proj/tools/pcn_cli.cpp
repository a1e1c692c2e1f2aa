// Command-line driver: dataset generation, staged training, detection,
// evaluation and ablation sweeps.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pcn/pcn.hpp"

#ifndef PCN_VERSION_STRING
#define PCN_VERSION_STRING "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void log_line(const std::string& msg) { std::cerr << "[pcn] " << msg << std::endl; }

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os << text;
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline fs::path manifest_path(const fs::path& out_dir, const std::string& command) {
  return out_dir / (command + ".manifest.json");
}

/// Run record written next to a command's outputs: before the work starts
/// (status "running") and again when it ends.
class RunManifest {
 public:
  RunManifest(const fs::path& out_dir, const std::string& command, const std::vector<std::string>& command_args,
              const pcn::ExperimentConfig& cfg, std::uint64_t seed)
      : path_(manifest_path(out_dir, command)) {
    fs::create_directories(out_dir);
    config_path_ = out_dir / (command + ".config.txt");
    const std::string text = pcn::config_to_text(cfg);
    write_text_atomic(config_path_, text);
    j_["command"] = command;
    j_["command_args"] = command_args;
    j_["seed"] = seed;
    j_["code_version"] = PCN_VERSION_STRING;
    j_["config"] = text;
    j_["config_snapshot"] = config_path_.string();
    j_["outputs"] = json::array({config_path_.string(), path_.string()});
    j_["checkpoints"] = json::array();
    j_["status"] = "running";
  }

  void plan(const fs::path& p) { j_["planned_outputs"].push_back(p.string()); }
  void output(const fs::path& p) { j_["outputs"].push_back(p.string()); }
  void checkpoint(const fs::path& p) {
    j_["checkpoints"].push_back(p.string());
    output(p);
  }
  void set(const std::string& key, json value) { j_[key] = std::move(value); }
  void write() { write_text_atomic(path_, j_.dump(2) + "\n"); }
  void finish(const std::string& status) {
    j_["status"] = status;
    write();
  }

 private:
  fs::path path_, config_path_;
  json j_;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

pcn::ExperimentConfig load_experiment(const Globals& g) {
  return g.config.empty() ? pcn::ExperimentConfig{} : pcn::load_config(g.config);
}

std::vector<int> parse_stages(const std::string& text) {
  std::vector<int> stages;
  for (const auto& item : pcn::detail::split_list(text)) {
    if (item != "1" && item != "2" && item != "3") throw UsageError("--stages takes stage numbers 1, 2, 3; got '" + item + "'");
    stages.push_back(item[0] - '0');
  }
  if (stages.empty()) throw UsageError("--stages is empty");
  for (std::size_t i = 1; i < stages.size(); ++i)
    if (stages[i] != stages[i - 1] + 1) throw UsageError("--stages must list consecutive stages in order");
  return stages;
}

std::array<double, 3> parse_weights(const std::string& text) {
  try {
    return pcn::detail::parse_reals<3>(text);
  } catch (const pcn::ConfigError& e) {
    throw UsageError(std::string("--branch-weights: ") + e.what());
  }
}

/// Rejects a dataset rendered for another grid or image size than `model`.
void check_dataset(const fs::path& data_dir, const pcn::ModelConfig& model) {
  if (!fs::exists(data_dir / "annotations.txt")) throw std::runtime_error("no dataset at '" + data_dir.string() + "'");
  const fs::path snap = data_dir / "gen.config.txt";
  if (!fs::exists(snap)) return;
  const auto data_cfg = pcn::load_config(snap);
  if (data_cfg.scene.part_grid != model.part_grid) {
    throw std::runtime_error("dataset '" + data_dir.string() + "' has part grid K=" + std::to_string(data_cfg.scene.part_grid) +
                             " but the model uses K=" + std::to_string(model.part_grid));
  }
  if (data_cfg.scene.image_height != model.image_height || data_cfg.scene.image_width != model.image_width) {
    throw std::runtime_error("dataset '" + data_dir.string() + "' image size differs from the model config");
  }
}

pcn::Dataset load_split(const fs::path& data_dir, const std::string& split) {
  if (split != "train" && split != "val" && split != "test") throw UsageError("--split must be train, val or test");
  return pcn::load_dataset(data_dir, pcn::read_id_list(data_dir / (split + ".txt")));
}

pcn::ModelConfig apply_variant(const pcn::ExperimentConfig& cfg, const std::string& variant) {
  return variant.empty() ? cfg.model : pcn::ablation_variant(cfg.model, variant).model;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct GenArgs {
  std::optional<std::size_t> n_images;
};

void cmd_gen(const Globals& g, const GenArgs& a, const std::vector<std::string>& raw) {
  auto cfg = load_experiment(g);
  if (a.n_images) {
    if (*a.n_images < 1) throw UsageError("--n-images must be >= 1");
    cfg.n_images = *a.n_images;
  }
  if (g.seed) cfg.data_seed = *g.seed;
  cfg.validate();
  const fs::path out = g.out;
  RunManifest m(out, "gen", raw, cfg, cfg.data_seed);
  m.plan(out / "images");
  m.plan(out / "annotations.txt");
  m.write();
  log_line("rendering " + std::to_string(cfg.n_images) + " images");
  const auto ds = pcn::generate_dataset(cfg.scene, cfg.n_images, cfg.data_seed);
  const auto parts = pcn::split(cfg.n_images, cfg.split_fractions, cfg.data_seed);
  for (const auto& p : pcn::save_dataset(out, ds, parts)) m.output(p);
  m.set("splits", {{"train", parts.train.size()}, {"val", parts.val.size()}, {"test", parts.test.size()}});
  m.finish("complete");
  log_line("wrote " + std::to_string(ds.images.size()) + " images to " + out.string());
}

struct TrainArgs {
  std::string data, stages = "1,2,3", variant, init;
};

void cmd_train(const Globals& g, const TrainArgs& a, const std::vector<std::string>& raw) {
  const auto cfg = load_experiment(g);
  const auto stages = parse_stages(a.stages);
  const auto model_cfg = apply_variant(cfg, a.variant);
  const std::uint64_t seed = g.seed.value_or(1);
  const fs::path out = g.out;

  fs::path init = a.init;
  if (stages.front() > 1) {
    const int need = stages.front() - 1;
    if (init.empty()) init = out / ("stage" + std::to_string(need) + ".ckpt");
    if (!fs::exists(init)) {
      throw pcn::StagePrerequisiteError("stage " + std::to_string(stages.front()) + " requires a completed stage " +
                                        std::to_string(need) + " checkpoint; not found: " + init.string());
    }
  }
  check_dataset(a.data, model_cfg);

  RunManifest m(out, "train", raw, cfg, seed);
  for (int s : stages) {
    m.plan(out / ("stage" + std::to_string(s) + ".ckpt"));
    m.plan(out / ("loss_stage" + std::to_string(s) + ".csv"));
  }
  if (!init.empty()) m.set("init_checkpoint", init.string());
  m.write();

  const auto train = load_split(a.data, "train");
  pcn::PcnModel model(model_cfg, seed);
  if (!init.empty()) {
    model.load(init.string());
    if (model.completed_stage() < stages.front() - 1) {
      throw pcn::StagePrerequisiteError("stage " + std::to_string(stages.front()) + " requires a completed stage " +
                                        std::to_string(stages.front() - 1) + " checkpoint; " + init.string() +
                                        " has completed stage " + std::to_string(model.completed_stage()));
    }
  }
  pcn::TrainConfig tc = cfg.train;
  tc.seed = seed;
  for (int s : stages) {
    log_line("stage " + std::to_string(s) + ": " + std::to_string(tc.iterations[std::size_t(s - 1)]) + " iterations on " +
             std::to_string(train.images.size()) + " images");
    const auto rows = pcn::run_stage(s, model, train, tc);
    const fs::path ckpt = out / ("stage" + std::to_string(s) + ".ckpt");
    const fs::path loss = out / ("loss_stage" + std::to_string(s) + ".csv");
    model.save(ckpt.string());
    pcn::write_loss_csv(loss.string(), rows);
    m.checkpoint(ckpt);
    m.output(loss);
    m.write();
  }
  m.finish("complete");
}

struct DetectArgs {
  std::string data, checkpoint, split = "test", branch_weights, variant;
};

void cmd_detect(const Globals& g, const DetectArgs& a, const std::vector<std::string>& raw) {
  const auto cfg = load_experiment(g);
  auto model_cfg = apply_variant(cfg, a.variant);
  if (!a.branch_weights.empty()) model_cfg.branch_weights = parse_weights(a.branch_weights);
  model_cfg.validate();
  if (!fs::exists(a.checkpoint)) throw std::runtime_error("checkpoint not found: " + a.checkpoint);
  check_dataset(a.data, model_cfg);
  const fs::path out = g.out;
  RunManifest m(out, "detect", raw, cfg, g.seed.value_or(0));
  m.set("checkpoint", a.checkpoint);
  m.plan(out / "detections.txt");
  m.write();

  pcn::PcnModel model(model_cfg, 0);
  model.load(a.checkpoint);
  const auto data = load_split(a.data, a.split);
  log_line("detecting on " + std::to_string(data.images.size()) + " images");
  const auto dets = pcn::detect_all(model, data);
  pcn::write_detections((out / "detections.txt").string(), dets);
  m.output(out / "detections.txt");
  m.finish("complete");
}

struct EvalArgs {
  std::string detections, data, split = "test";
  std::vector<std::string> settings;
};

void cmd_eval(const Globals& g, const EvalArgs& a, const std::vector<std::string>& raw) {
  std::vector<pcn::EvalSetting> settings;
  if (a.settings.empty()) settings = pcn::standard_settings();
  for (const auto& name : a.settings) settings.push_back(pcn::setting_by_name(name));
  const auto cfg = load_experiment(g);
  const fs::path out = g.out;
  RunManifest m(out, "eval", raw, cfg, g.seed.value_or(0));
  m.write();

  const auto dets = pcn::read_detections(a.detections);
  const auto ids = pcn::read_id_list(fs::path(a.data) / (a.split + ".txt"));
  const std::set<std::size_t> idset(ids.begin(), ids.end());
  std::vector<pcn::Annotation> gts;
  for (const auto& ann : pcn::read_annotations((fs::path(a.data) / "annotations.txt").string()))
    if (idset.count(ann.image_id)) gts.push_back(ann);

  std::string header, row;
  for (const auto& s : settings) {
    const auto curve = pcn::evaluate_mr(dets, gts, ids, s);
    const fs::path p = out / ("curve_" + s.name + ".csv");
    pcn::write_curve_csv(p.string(), curve);
    m.output(p);
    header += (header.empty() ? "" : ",") + s.name;
    row += (row.empty() ? "" : ",") + pcn::format_real(curve.log_average);
    log_line(s.name + ": log-average miss rate " + pcn::format_real(curve.log_average));
  }
  write_text_atomic(out / "summary.csv", header + "\n" + row + "\n");
  m.output(out / "summary.csv");
  m.finish("complete");
}

struct AblateArgs {
  std::string data, checkpoints;
  bool train = false;
  std::size_t seeds = 1;
};

void cmd_ablate(const Globals& g, const AblateArgs& a, const std::vector<std::string>& raw) {
  const auto cfg = load_experiment(g);
  const std::uint64_t seed0 = g.seed.value_or(1);
  if (a.seeds < 1) throw UsageError("--seeds must be >= 1");
  const fs::path out = g.out;
  const fs::path ckpt_root = a.checkpoints.empty() ? out / "checkpoints" : fs::path(a.checkpoints);
  auto seed_dir = [&](std::uint64_t s) { return a.seeds == 1 ? ckpt_root : ckpt_root / ("seed" + std::to_string(s)); };
  const auto variants = pcn::ablation_variants(cfg.model);
  check_dataset(a.data, cfg.model);
  if (!a.train) {
    for (std::uint64_t s = seed0; s < seed0 + a.seeds; ++s)
      for (const auto& v : variants) {
        const auto p = pcn::variant_checkpoint(seed_dir(s), v.name);
        if (!fs::exists(p)) throw std::runtime_error("missing checkpoint for variant '" + v.name + "': " + p.string());
      }
  }

  RunManifest m(out, "ablate", raw, cfg, seed0);
  m.plan(out / "ablation.csv");
  m.set("seeds", a.seeds);
  m.write();

  const auto test = load_split(a.data, "test");
  std::optional<pcn::Dataset> train;
  std::string csv = "seed,variant";
  for (const auto& s : pcn::standard_settings()) csv += "," + s.name;
  csv += "\n";
  for (std::uint64_t s = seed0; s < seed0 + a.seeds; ++s) {
    if (a.train) {
      if (!train) train = load_split(a.data, "train");
      log_line("seed " + std::to_string(s) + ": training all variants");
      for (const auto& p : pcn::train_ablation(cfg, *train, s, seed_dir(s), log_line)) {
        if (p.extension() == ".ckpt") m.checkpoint(p);
        else m.output(p);
      }
      m.write();
    }
    for (const auto& v : variants) {
      const auto model = pcn::load_variant(v, seed_dir(s));
      const auto row = pcn::evaluate_variant(model, v.name, test);
      csv += std::to_string(s) + "," + v.name;
      for (double x : row.log_average) csv += "," + pcn::format_real(x);
      csv += "\n";
      log_line("seed " + std::to_string(s) + " " + v.name + ": occ-heavy " +
               pcn::format_real(row.log_average[4]));
    }
  }
  write_text_atomic(out / "ablation.csv", csv);
  m.output(out / "ablation.csv");
  m.finish("complete");
}

int run(std::vector<std::string> args);

/// Re-executes a manifest's command from its recorded config and arguments.
void cmd_replay(const std::string& manifest_path, const Globals& g) {
  const json j = json::parse(read_text(manifest_path));
  const fs::path out = g.out;
  fs::create_directories(out);
  const fs::path cfg_path = out / "replay_config.txt";
  write_text_atomic(cfg_path, j.at("config").get<std::string>());
  std::vector<std::string> args{"pcn", "--config", cfg_path.string(), "--seed", std::to_string(j.at("seed").get<std::uint64_t>()),
                                "--out", out.string(), j.at("command").get<std::string>()};
  for (const auto& s : j.at("command_args")) args.push_back(s.get<std::string>());
  if (run(args) != 0) throw std::runtime_error("replay of " + manifest_path + " failed");
}

/// Subcommand arguments with the global flags removed.
std::vector<std::string> command_args(const std::vector<std::string>& args, const std::string& command) {
  static const std::set<std::string> globals{"--config", "--seed", "--out"};
  std::vector<std::string> out;
  bool after = false;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& t = args[i];
    if (!after) {
      if (t == command) after = true;
      else if (globals.count(t)) ++i;
      continue;
    }
    if (globals.count(t)) {
      ++i;
      continue;
    }
    const auto eq = t.find('=');
    if (eq != std::string::npos && globals.count(t.substr(0, eq))) continue;
    out.push_back(t);
  }
  return out;
}

int run(std::vector<std::string> args) {
  CLI::App app{"Part and context network pedestrian detector on synthetic scenes"};
  app.set_version_flag("--version", PCN_VERSION_STRING);
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "Experiment config file (key = value lines)");
  auto* seed_opt = app.add_option("--seed", seed, "Random seed");
  app.add_option("--out", g.out, "Output directory");

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen", "Render a synthetic dataset");
  std::size_t n_images = 0;
  auto* n_opt = c_gen->add_option("--n-images", n_images, "Number of images (overrides data.n_images)");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train one or more stages");
  c_train->add_option("--data", tr.data, "Dataset directory")->required();
  c_train->add_option("--stages", tr.stages, "Comma-separated stages, e.g. 1,2,3");
  c_train->add_option("--variant", tr.variant, "Ablation variant whose toggles to apply");
  c_train->add_option("--init", tr.init, "Checkpoint to continue from");

  DetectArgs de;
  auto* c_detect = app.add_subcommand("detect", "Run the detector over a dataset split");
  c_detect->add_option("--data", de.data, "Dataset directory")->required();
  c_detect->add_option("--checkpoint", de.checkpoint, "Model checkpoint")->required();
  c_detect->add_option("--split", de.split, "train, val or test");
  c_detect->add_option("--branch-weights", de.branch_weights, "Fusion weights: original,part,context");
  c_detect->add_option("--variant", de.variant, "Ablation variant whose toggles to apply");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Miss rate against FPPI per evaluation setting");
  c_eval->add_option("--detections", ev.detections, "Detection dump")->required();
  c_eval->add_option("--data", ev.data, "Dataset directory")->required();
  c_eval->add_option("--split", ev.split, "train, val or test");
  c_eval->add_option("--setting", ev.settings, "reasonable|all|occ-none|occ-partial|occ-heavy|over75 (repeatable)");

  AblateArgs ab;
  auto* c_ablate = app.add_subcommand("ablate", "Evaluate every ablation variant");
  c_ablate->add_option("--data", ab.data, "Dataset directory")->required();
  c_ablate->add_option("--checkpoints", ab.checkpoints, "Directory of <variant>.ckpt files (default: <out>/checkpoints)");
  c_ablate->add_flag("--train", ab.train, "Train every variant first");
  c_ablate->add_option("--seeds", ab.seeds, "Number of consecutive seeds starting at --seed");

  std::string manifest;
  auto* c_replay = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  c_replay->add_option("manifest", manifest, "manifest.json of an earlier run")->required();

  std::vector<const char*> argv;
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (*seed_opt) g.seed = seed;
  if (*n_opt) gen.n_images = n_images;

  const std::string command = app.get_subcommands().front()->get_name();
  const auto raw = command_args(args, command);
  try {
    if (command == "gen") cmd_gen(g, gen, raw);
    else if (command == "train") cmd_train(g, tr, raw);
    else if (command == "detect") cmd_detect(g, de, raw);
    else if (command == "eval") cmd_eval(g, ev, raw);
    else if (command == "ablate") cmd_ablate(g, ab, raw);
    else cmd_replay(manifest, g);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    const fs::path mpath = manifest_path(g.out, command);
    if (command != "replay" && fs::exists(mpath)) {
      try {
        json j = json::parse(read_text(mpath));
        if (j.value("status", "") == "running") {
          j["status"] = "failed";
          j["error"] = e.what();
          write_text_atomic(mpath, j.dump(2) + "\n");
        }
      } catch (const std::exception&) {
      }
    }
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc)); }
