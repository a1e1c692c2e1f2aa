#pragma once

// Caltech-style miss-rate evaluation.
//
// Ground truth outside a setting's height/occlusion window is "ignored":
// a detection matched to it is neither a true nor a false positive. The
// curve samples miss rate at nine FPPI points log-spaced in [1e-2, 1],
// interpolating linearly between achieved operating points and holding the
// end values beyond them; the summary is the geometric mean of the nine
// samples (each clamped at 1e-10).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcn/geometry.hpp"

namespace pcn {

struct Annotation {
  std::size_t image_id = 0;
  Box box;
  double occlusion = 0;          // fraction of the box hidden, in [0, 1]
  std::vector<bool> visibility;  // K*K part cells, row-major; true = visible
};

struct EvalSetting {
  std::string name;
  double min_height = 0;
  double occlusion_lo = 0;
  double occlusion_hi = 1;
  bool lo_exclusive = false;  // (lo, hi] instead of [lo, hi]
  double iou_threshold = 0.5;

  bool contains(const Annotation& a) const {
    if (a.box.height < min_height) return false;
    if (lo_exclusive ? !(a.occlusion > occlusion_lo) : !(a.occlusion >= occlusion_lo)) return false;
    return a.occlusion <= occlusion_hi;
  }
};

/// The six standard settings, in report column order.
inline const std::vector<EvalSetting>& standard_settings() {
  static const std::vector<EvalSetting> settings = {
      {"reasonable", 50, 0.0, 0.35, false, 0.5},  {"all", 20, 0.0, 1.0, false, 0.5},
      {"occ-none", 50, 0.0, 0.0, false, 0.5},     {"occ-partial", 50, 0.01, 0.35, false, 0.5},
      {"occ-heavy", 50, 0.35, 0.80, true, 0.5},   {"over75", 50, 0.0, 0.35, false, 0.75},
  };
  return settings;
}

inline const EvalSetting& setting_by_name(const std::string& name) {
  for (const auto& s : standard_settings())
    if (s.name == name) return s;
  std::string valid;
  for (const auto& s : standard_settings()) valid += (valid.empty() ? "" : "|") + s.name;
  throw std::invalid_argument("unknown setting '" + name + "' (valid: " + valid + ")");
}

struct SettingSplit {
  std::vector<Annotation> evaluated;
  std::vector<Annotation> ignored;
};

inline SettingSplit filter_setting(const std::vector<Annotation>& annotations, const EvalSetting& setting) {
  SettingSplit out;
  for (const auto& a : annotations) (setting.contains(a) ? out.evaluated : out.ignored).push_back(a);
  return out;
}

inline constexpr std::size_t kFppiPoints = 9;
inline constexpr double kMissRateFloor = 1e-10;

inline std::array<double, kFppiPoints> reference_fppi() {
  std::array<double, kFppiPoints> ref{};
  for (std::size_t i = 0; i < kFppiPoints; ++i) ref[i] = std::pow(10.0, -2.0 + 2.0 * double(i) / 8.0);
  return ref;
}

struct MRCurve {
  std::array<double, kFppiPoints> fppi = reference_fppi();
  std::array<double, kFppiPoints> miss_rates{};
  double log_average = 1.0;
  std::size_t num_gt = 0;
  std::size_t num_images = 0;
  std::vector<std::pair<double, double>> operating_points;  // (fppi, miss), fppi non-decreasing
};

inline double log_average_miss_rate(const std::array<double, kFppiPoints>& miss) {
  double acc = 0;
  for (double m : miss) acc += std::log(std::max(m, kMissRateFloor));
  return std::exp(acc / double(kFppiPoints));
}

enum class MatchResult { TruePositive, FalsePositive, Ignored };

/// Greedy matching of one image's detections (highest score first). Each
/// detection takes the best-overlapping unmatched evaluated GT at IoU >= the
/// threshold; failing that, any ignored GT at the threshold; else it is a
/// false positive. Results are indexed like `dets`.
inline std::vector<MatchResult> match_image(const std::vector<Detection>& dets, const SettingSplit& gt,
                                            double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> taken(gt.evaluated.size(), false);
  std::vector<MatchResult> result(dets.size(), MatchResult::FalsePositive);
  for (std::size_t d : order) {
    double best = iou_threshold;
    long best_gt = -1;
    for (std::size_t g = 0; g < gt.evaluated.size(); ++g) {
      if (taken[g]) continue;
      const double o = iou(dets[d].box, gt.evaluated[g].box);
      if (o >= best) {
        best = o;
        best_gt = long(g);
      }
    }
    if (best_gt >= 0) {
      taken[std::size_t(best_gt)] = true;
      result[d] = MatchResult::TruePositive;
      continue;
    }
    for (const auto& ig : gt.ignored) {
      if (iou(dets[d].box, ig.box) >= iou_threshold) {
        result[d] = MatchResult::Ignored;
        break;
      }
    }
  }
  return result;
}

/// Samples the piecewise-linear curve through `points` (fppi non-decreasing,
/// miss non-increasing) at `x`. Where several points share an FPPI the curve
/// drops vertically there; end values are held outside the covered range.
inline double interpolate_miss(const std::vector<std::pair<double, double>>& points, double x) {
  auto hi = std::upper_bound(points.begin(), points.end(), x,
                             [](double v, const std::pair<double, double>& p) { return v < p.first; });
  if (hi == points.begin()) return points.front().second;
  if (hi == points.end()) return points.back().second;
  auto lo = hi - 1;
  if (lo->first == x) return lo->second;
  const double t = (x - lo->first) / (hi->first - lo->first);
  return lo->second + t * (hi->second - lo->second);
}

inline MRCurve evaluate_mr(const std::vector<Detection>& detections, const std::vector<Annotation>& annotations,
                           const std::vector<std::size_t>& image_ids, const EvalSetting& setting) {
  const std::set<std::size_t> images(image_ids.begin(), image_ids.end());
  std::map<std::size_t, std::vector<Detection>> dets_by_image;
  std::map<std::size_t, std::vector<Annotation>> gt_by_image;
  for (const auto& d : detections) {
    if (!images.count(d.image_id)) {
      throw std::invalid_argument("detection references image " + std::to_string(d.image_id) +
                                  " outside the evaluated image set");
    }
    dets_by_image[d.image_id].push_back(d);
  }
  for (const auto& a : annotations) {
    if (!images.count(a.image_id)) {
      throw std::invalid_argument("annotation references image " + std::to_string(a.image_id) +
                                  " outside the evaluated image set");
    }
    gt_by_image[a.image_id].push_back(a);
  }

  MRCurve curve;
  curve.num_images = images.size();
  // (score, is_true_positive) over every non-ignored detection.
  std::vector<std::pair<double, bool>> scored;
  for (std::size_t id : images) {
    const SettingSplit split = filter_setting(gt_by_image[id], setting);
    curve.num_gt += split.evaluated.size();
    const auto& dets = dets_by_image[id];
    const auto result = match_image(dets, split, setting.iou_threshold);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (result[i] != MatchResult::Ignored) scored.emplace_back(dets[i].score, result[i] == MatchResult::TruePositive);
    }
  }
  if (curve.num_gt == 0 || curve.num_images == 0) {
    curve.miss_rates.fill(std::numeric_limits<double>::quiet_NaN());
    curve.log_average = std::numeric_limits<double>::quiet_NaN();
    return curve;
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  // Operating points after each distinct score threshold, starting from
  // "nothing accepted".
  const double n_img = double(curve.num_images), n_gt = double(curve.num_gt);
  std::vector<std::pair<double, double>> points{{0.0, 1.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < scored.size();) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].first == scored[i].first) {
      (scored[j].second ? tp : fp)++;
      ++j;
    }
    i = j;
    points.emplace_back(double(fp) / n_img, 1.0 - double(tp) / n_gt);
  }
  curve.operating_points = points;
  for (std::size_t k = 0; k < kFppiPoints; ++k) curve.miss_rates[k] = interpolate_miss(points, curve.fppi[k]);
  curve.log_average = log_average_miss_rate(curve.miss_rates);
  return curve;
}

// ---------------------------------------------------------------------------
// Text formats
// ---------------------------------------------------------------------------

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// `image_id x_min y_min width height occlusion mask` where mask is a string
/// of K*K '0'/'1' characters in row-major cell order.
inline std::string format_annotation(const Annotation& a) {
  std::string mask;
  for (bool v : a.visibility) mask += v ? '1' : '0';
  if (mask.empty()) mask = "-";
  return std::to_string(a.image_id) + ' ' + format_real(a.box.x_min) + ' ' + format_real(a.box.y_min) + ' ' +
         format_real(a.box.width) + ' ' + format_real(a.box.height) + ' ' + format_real(a.occlusion) + ' ' + mask;
}

inline Annotation parse_annotation(const std::string& line) {
  std::istringstream is(line);
  Annotation a;
  std::string mask;
  if (!(is >> a.image_id >> a.box.x_min >> a.box.y_min >> a.box.width >> a.box.height >> a.occlusion >> mask)) {
    throw std::runtime_error("malformed annotation line: " + line);
  }
  if (mask != "-") {
    for (char c : mask) {
      if (c != '0' && c != '1') throw std::runtime_error("malformed visibility mask: " + mask);
      a.visibility.push_back(c == '1');
    }
  }
  return a;
}

/// `image_id x_min y_min width height fused original part context`
inline std::string format_detection(const Detection& d) {
  std::string s = std::to_string(d.image_id) + ' ' + format_real(d.box.x_min) + ' ' + format_real(d.box.y_min) + ' ' +
                  format_real(d.box.width) + ' ' + format_real(d.box.height) + ' ' + format_real(d.score);
  for (double b : d.branch_scores) s += ' ' + format_real(b);
  return s;
}

inline Detection parse_detection(const std::string& line) {
  std::istringstream is(line);
  Detection d;
  if (!(is >> d.image_id >> d.box.x_min >> d.box.y_min >> d.box.width >> d.box.height >> d.score >>
        d.branch_scores[0] >> d.branch_scores[1] >> d.branch_scores[2])) {
    throw std::runtime_error("malformed detection line: " + line);
  }
  return d;
}

namespace detail {
template <class T, class Parse>
std::vector<T> read_records(const std::string& path, Parse parse) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<T> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    out.push_back(parse(line));
  }
  return out;
}
template <class T, class Format>
void write_records(const std::string& path, const std::vector<T>& items, Format format) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& item : items) os << format(item) << '\n';
  if (!os) throw std::runtime_error("write failed: " + path);
}
}  // namespace detail

inline std::vector<Annotation> read_annotations(const std::string& path) {
  return detail::read_records<Annotation>(path, parse_annotation);
}
inline void write_annotations(const std::string& path, const std::vector<Annotation>& items) {
  detail::write_records(path, items, format_annotation);
}
inline std::vector<Detection> read_detections(const std::string& path) {
  return detail::read_records<Detection>(path, parse_detection);
}
inline void write_detections(const std::string& path, const std::vector<Detection>& items) {
  detail::write_records(path, items, format_detection);
}

/// `fppi,miss_rate` rows followed by `log_average,<value>`.
inline void write_curve_csv(const std::string& path, const MRCurve& curve) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << "fppi,miss_rate\n";
  for (std::size_t i = 0; i < kFppiPoints; ++i) os << format_real(curve.fppi[i]) << ',' << format_real(curve.miss_rates[i]) << '\n';
  os << "log_average," << format_real(curve.log_average) << '\n';
}

}  // namespace pcn
