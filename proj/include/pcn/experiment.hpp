#pragma once

// Ablation variants and the training schedule that produces them.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcn/config.hpp"
#include "pcn/eval.hpp"
#include "pcn/model.hpp"
#include "pcn/training.hpp"

namespace pcn {

struct AblationVariant {
  std::string name;
  ModelConfig model;
  int stage = 1;  // stage whose checkpoint the variant is evaluated from
};

inline std::string context_variant_name(double scale) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "context_s%g", scale);
  return buf;
}

/// base, part_avg, part+lstm, one context_sS per scale, context_maxout, full.
inline std::vector<AblationVariant> ablation_variants(const ModelConfig& base_cfg) {
  std::vector<AblationVariant> out;
  auto with = [&](std::string name, bool part, bool lstm, bool context, std::vector<double> scales, int stage) {
    ModelConfig m = base_cfg;
    m.use_part = part;
    m.use_lstm = lstm;
    m.use_context = context;
    m.context_scales = std::move(scales);
    out.push_back({std::move(name), std::move(m), stage});
  };
  const auto& scales = base_cfg.context_scales;
  with("base", false, false, false, scales, 1);
  with("part_avg", true, false, false, scales, 2);
  with("part+lstm", true, true, false, scales, 3);
  for (double s : scales) with(context_variant_name(s), false, false, true, {s}, 1);
  with("context_maxout", false, false, true, scales, 1);
  with("full", true, true, true, scales, 3);
  return out;
}

inline AblationVariant ablation_variant(const ModelConfig& base_cfg, const std::string& name) {
  std::string known;
  for (auto& v : ablation_variants(base_cfg)) {
    if (v.name == name) return v;
    known += (known.empty() ? "" : ", ") + v.name;
  }
  throw std::invalid_argument("unknown variant '" + name + "' (valid: " + known + ")");
}

inline std::filesystem::path variant_checkpoint(const std::filesystem::path& dir, const std::string& name) {
  return dir / (name + ".ckpt");
}

/// Trains every variant for one seed and writes `<dir>/<variant>.ckpt` plus a
/// loss trace per training run. Stage 1 ignores the part branch, so base and
/// context_maxout are the stage-1 checkpoints of the part+lstm and full runs.
inline std::vector<std::filesystem::path> train_ablation(const ExperimentConfig& cfg, const Dataset& train,
                                                         std::uint64_t seed, const std::filesystem::path& dir,
                                                         const std::function<void(const std::string&)>& log = {}) {
  std::filesystem::create_directories(dir);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  std::vector<std::filesystem::path> written;
  auto save = [&](const PcnModel& m, const std::string& name) {
    const auto path = variant_checkpoint(dir, name);
    m.save(path.string());
    written.push_back(path);
    if (log) log("wrote " + path.string());
  };
  auto run = [&](const std::string& run_name, const ModelConfig& mc, int last_stage,
                 const std::function<void(const PcnModel&, int)>& after_stage) {
    PcnModel model(mc, seed);
    std::vector<LossRow> rows;
    for (int s = 1; s <= last_stage; ++s) {
      if (log) log("training " + run_name + " stage " + std::to_string(s));
      auto r = run_stage(s, model, train, tc);
      rows.insert(rows.end(), r.begin(), r.end());
      after_stage(model, s);
    }
    const auto loss_path = dir / ("loss_" + run_name + ".csv");
    write_loss_csv(loss_path.string(), rows);
    written.push_back(loss_path);
  };

  const auto variants = ablation_variants(cfg.model);
  auto model_of = [&](const std::string& name) { return ablation_variant(cfg.model, name).model; };
  run("part", model_of("part+lstm"), 3, [&](const PcnModel& m, int s) {
    save(m, s == 1 ? "base" : s == 2 ? "part_avg" : "part+lstm");
  });
  for (double s : cfg.model.context_scales) {
    const std::string name = context_variant_name(s);
    run(name, model_of(name), 1, [&](const PcnModel& m, int) { save(m, name); });
  }
  run("full", model_of("full"), 3, [&](const PcnModel& m, int s) {
    if (s == 1) save(m, "context_maxout");
    if (s == 3) save(m, "full");
  });
  return written;
}

struct AblationRow {
  std::string variant;
  std::vector<double> log_average;  // one per standard setting
};

inline PcnModel load_variant(const AblationVariant& v, const std::filesystem::path& dir) {
  const auto path = variant_checkpoint(dir, v.name);
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("missing checkpoint for variant '" + v.name + "': " + path.string());
  }
  PcnModel model(v.model, 0);
  model.load(path.string());
  if (model.completed_stage() < v.stage) {
    throw std::runtime_error("checkpoint for variant '" + v.name + "' completed stage " +
                             std::to_string(model.completed_stage()) + ", needs stage " + std::to_string(v.stage));
  }
  return model;
}

inline AblationRow evaluate_variant(const PcnModel& model, const std::string& name, const Dataset& test) {
  const auto dets = detect_all(model, test);
  const auto ids = image_ids(test);
  AblationRow row{name, {}};
  for (const auto& s : standard_settings()) row.log_average.push_back(evaluate_mr(dets, test.annotations, ids, s).log_average);
  return row;
}

inline void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "variant";
  for (const auto& s : standard_settings()) out << "," << s.name;
  out << "\n";
  for (const auto& r : rows) {
    out << r.variant;
    for (double v : r.log_average) out << "," << format_real(v);
    out << "\n";
  }
}

}  // namespace pcn
