#pragma once

// Flat `key = value` experiment configuration. Blank lines and lines starting
// with '#' are skipped; unknown keys are errors.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "pcn/model.hpp"
#include "pcn/synth.hpp"
#include "pcn/training.hpp"

namespace pcn {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  SceneConfig scene;
  ModelConfig model;
  TrainConfig train;
  std::size_t n_images = 2500;
  std::array<double, 3> split_fractions{0.8, 0.0, 0.2};  // train, val, test
  std::uint64_t data_seed = 1;

  void validate() const {
    scene.validate();
    model.validate();
    if (scene.image_height != model.image_height || scene.image_width != model.image_width) {
      throw ConfigError("scene and model image sizes differ");
    }
    if (scene.part_grid != model.part_grid) throw ConfigError("scene and model part_grid differ");
    if (n_images < 1) throw ConfigError("n_images must be >= 1");
    for (std::size_t s = 0; s < 3; ++s) {
      const double at = train.lr_step_fraction * double(train.iterations[s]);
      if (train.iterations[s] > 0 && !(at > 0 && at < double(train.iterations[s]))) {
        throw ConfigError("lr decay point must fall inside every stage");
      }
    }
    for (double a : train.loss_weights)
      if (a < 0) throw ConfigError("loss weights must be non-negative");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

inline double parse_real(const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

inline std::uint64_t parse_count(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("expected a non-negative integer, got '" + s + "'");
  }
  return std::stoull(s);
}

inline bool parse_flag(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

inline std::string real_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class Seq>
std::string reals_text(const Seq& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : ",") + real_text(x);
  return s;
}

template <std::size_t N>
std::array<double, N> parse_reals(const std::string& s) {
  const auto items = split_list(s);
  if (items.size() != N) throw ConfigError("expected " + std::to_string(N) + " comma-separated numbers, got '" + s + "'");
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = parse_real(items[i]);
  return out;
}

/// Trunk layers as `channels[p][dN]`, comma-separated: `p` adds a 2x2 pool,
/// `dN` sets the dilation.
inline std::vector<TrunkLayer> parse_trunk(const std::string& s) {
  std::vector<TrunkLayer> out;
  for (const auto& item : split_list(s)) {
    std::size_t pos = 0;
    while (pos < item.size() && std::isdigit(static_cast<unsigned char>(item[pos]))) ++pos;
    if (pos == 0) throw ConfigError("bad trunk layer '" + item + "'");
    TrunkLayer l{std::size_t(std::stoull(item.substr(0, pos))), false, 1};
    std::string rest = item.substr(pos);
    if (!rest.empty() && rest[0] == 'p') {
      l.pool = true;
      rest = rest.substr(1);
    }
    if (!rest.empty()) {
      if (rest[0] != 'd') throw ConfigError("bad trunk layer '" + item + "'");
      l.dilation = parse_count(rest.substr(1));
    }
    if (l.channels == 0 || l.dilation == 0) throw ConfigError("bad trunk layer '" + item + "'");
    out.push_back(l);
  }
  return out;
}

inline std::string trunk_text(const std::vector<TrunkLayer>& t) {
  std::string s;
  for (const auto& l : t) {
    s += (s.empty() ? "" : ",") + std::to_string(l.channels) + (l.pool ? "p" : "");
    if (l.dilation != 1) s += "d" + std::to_string(l.dilation);
  }
  return s;
}

struct ConfigKey {
  std::string name;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define PCN_COUNT_KEY(key, field) \
  {key, [](const ExperimentConfig& c) { return std::to_string(c.field); }, \
   [](ExperimentConfig& c, const std::string& v) { c.field = static_cast<std::remove_cvref_t<decltype(c.field)>>(parse_count(v)); }}
#define PCN_REAL_KEY(key, field) \
  {key, [](const ExperimentConfig& c) { return real_text(c.field); }, \
   [](ExperimentConfig& c, const std::string& v) { c.field = parse_real(v); }}
#define PCN_FLAG_KEY(key, field) \
  {key, [](const ExperimentConfig& c) { return std::string(c.field ? "true" : "false"); }, \
   [](ExperimentConfig& c, const std::string& v) { c.field = parse_flag(v); }}
#define PCN_TRIPLE_KEY(key, field) \
  {key, [](const ExperimentConfig& c) { return reals_text(c.field); }, \
   [](ExperimentConfig& c, const std::string& v) { c.field = parse_reals<3>(v); }}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      PCN_COUNT_KEY("data.n_images", n_images),
      PCN_TRIPLE_KEY("data.split", split_fractions),
      PCN_COUNT_KEY("data.seed", data_seed),
      {"image_height", [](const ExperimentConfig& c) { return std::to_string(c.model.image_height); },
       [](ExperimentConfig& c, const std::string& v) { c.model.image_height = c.scene.image_height = parse_count(v); }},
      {"image_width", [](const ExperimentConfig& c) { return std::to_string(c.model.image_width); },
       [](ExperimentConfig& c, const std::string& v) { c.model.image_width = c.scene.image_width = parse_count(v); }},
      {"part_grid", [](const ExperimentConfig& c) { return std::to_string(c.model.part_grid); },
       [](ExperimentConfig& c, const std::string& v) { c.model.part_grid = c.scene.part_grid = parse_count(v); }},

      PCN_COUNT_KEY("scene.instances_min", scene.instances_min),
      PCN_COUNT_KEY("scene.instances_max", scene.instances_max),
      PCN_REAL_KEY("scene.height_min", scene.height_min),
      PCN_REAL_KEY("scene.height_max", scene.height_max),
      PCN_REAL_KEY("scene.aspect_ratio", scene.aspect_ratio),
      PCN_TRIPLE_KEY("scene.occlusion_mix", scene.occlusion_mix),
      PCN_COUNT_KEY("scene.texture_seed", scene.texture_seed),
      PCN_REAL_KEY("scene.noise_std", scene.noise_std),
      PCN_REAL_KEY("scene.distractor_rate", scene.distractor_rate),
      PCN_REAL_KEY("scene.shadow_offset_max", scene.shadow_offset_max),
      PCN_REAL_KEY("scene.clutter_rate", scene.clutter_rate),

      {"model.context_scales", [](const ExperimentConfig& c) { return reals_text(c.model.context_scales); },
       [](ExperimentConfig& c, const std::string& v) {
         c.model.context_scales.clear();
         for (const auto& s : split_list(v)) c.model.context_scales.push_back(parse_real(s));
       }},
      PCN_TRIPLE_KEY("model.branch_weights", model.branch_weights),
      PCN_FLAG_KEY("model.use_part", model.use_part),
      PCN_FLAG_KEY("model.use_lstm", model.use_lstm),
      PCN_FLAG_KEY("model.use_context", model.use_context),
      PCN_REAL_KEY("model.anchor_base_height", model.anchor_base_height),
      PCN_REAL_KEY("model.anchor_scale_stride", model.anchor_scale_stride),
      PCN_COUNT_KEY("model.anchor_count", model.anchor_count),
      PCN_REAL_KEY("model.anchor_aspect_ratio", model.anchor_aspect_ratio),
      PCN_COUNT_KEY("model.proposals_train", model.proposals_train),
      PCN_COUNT_KEY("model.proposals_test", model.proposals_test),
      PCN_REAL_KEY("model.nms_iou", model.nms_iou),
      PCN_REAL_KEY("model.rpn_nms_iou", model.rpn_nms_iou),
      PCN_COUNT_KEY("model.rpn_pre_nms", model.rpn_pre_nms),
      PCN_REAL_KEY("model.min_proposal_size", model.min_proposal_size),
      {"model.trunk", [](const ExperimentConfig& c) { return trunk_text(c.model.trunk); },
       [](ExperimentConfig& c, const std::string& v) { c.model.trunk = parse_trunk(v); }},
      PCN_COUNT_KEY("model.rpn_channels", model.rpn_channels),
      PCN_COUNT_KEY("model.roi_size", model.roi_size),
      PCN_COUNT_KEY("model.fc_hidden", model.fc_hidden),
      PCN_COUNT_KEY("model.context_channels", model.context_channels),
      PCN_COUNT_KEY("model.part_hidden", model.part_hidden),
      PCN_COUNT_KEY("model.lstm_hidden", model.lstm_hidden),

      PCN_COUNT_KEY("train.iterations_stage1", train.iterations[0]),
      PCN_COUNT_KEY("train.iterations_stage2", train.iterations[1]),
      PCN_COUNT_KEY("train.iterations_stage3", train.iterations[2]),
      PCN_REAL_KEY("train.base_lr", train.base_lr),
      PCN_REAL_KEY("train.lr_step_fraction", train.lr_step_fraction),
      PCN_REAL_KEY("train.lr_gamma", train.lr_gamma),
      PCN_REAL_KEY("train.momentum", train.momentum),
      PCN_REAL_KEY("train.weight_decay", train.weight_decay),
      PCN_REAL_KEY("train.clip_norm", train.clip_norm),
      PCN_TRIPLE_KEY("train.loss_weights", train.loss_weights),
      PCN_REAL_KEY("train.rpn_loss_weight", train.rpn_loss_weight),
      PCN_REAL_KEY("train.fg_iou", train.fg_iou),
      PCN_REAL_KEY("train.bg_iou", train.bg_iou),
      PCN_COUNT_KEY("train.rois_per_image", train.rois_per_image),
      PCN_REAL_KEY("train.fg_fraction", train.fg_fraction),
      PCN_COUNT_KEY("train.rpn_batch", train.rpn_batch),
      PCN_FLAG_KEY("train.flip", train.flip),
  };
  return keys;
}

#undef PCN_COUNT_KEY
#undef PCN_REAL_KEY
#undef PCN_FLAG_KEY
#undef PCN_TRIPLE_KEY

}  // namespace detail

/// Applies `key = value` lines on top of `cfg`. `origin` prefixes messages.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = detail::trim(t.substr(0, eq)), value = detail::trim(t.substr(eq + 1));
    const auto& keys = detail::config_keys();
    auto it = std::find_if(keys.begin(), keys.end(), [&](const detail::ConfigKey& k) { return k.name == key; });
    if (it == keys.end()) throw ConfigError(where + "unknown key '" + key + "'");
    try {
      it->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "config") {
  ExperimentConfig cfg;
  apply_config_text(cfg, text, origin);
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

/// Every key with its current value; parses back to the same config.
inline std::string config_to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace pcn
