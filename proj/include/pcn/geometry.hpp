#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <numeric>
#include <vector>

namespace pcn {

/// Axis-aligned rectangle in pixel coordinates; x grows right, y grows down.
struct Box {
  double x_min = 0, y_min = 0, width = 0, height = 0;

  static Box from_corners(double x0, double y0, double x1, double y1) { return {x0, y0, x1 - x0, y1 - y0}; }
  static Box from_center(double cx, double cy, double w, double h) { return {cx - w / 2, cy - h / 2, w, h}; }

  double x_max() const { return x_min + width; }
  double y_max() const { return y_min + height; }
  double cx() const { return x_min + width / 2; }
  double cy() const { return y_min + height / 2; }
  double area() const { return width * height; }
  bool valid() const { return width > 0 && height > 0; }

  bool operator==(const Box&) const = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x_max(), b.x_max()) - std::max(a.x_min, b.x_min);
  const double h = std::min(a.y_max(), b.y_max()) - std::max(a.y_min, b.y_min);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

/// Intersection over union; 0 for disjoint boxes.
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

/// Clips to [0, width] x [0, height].
inline Box clip_box(const Box& b, double width, double height) {
  const double x0 = std::clamp(b.x_min, 0.0, width), y0 = std::clamp(b.y_min, 0.0, height);
  const double x1 = std::clamp(b.x_max(), 0.0, width), y1 = std::clamp(b.y_max(), 0.0, height);
  return Box::from_corners(x0, y0, x1, y1);
}

inline constexpr std::size_t kNumBranches = 3;
enum Branch : std::size_t { kOriginal = 0, kPart = 1, kContext = 2 };

/// One scored detection. `score` is the fused score; the per-branch scores
/// are kept for ablations and dumps.
struct Detection {
  std::size_t image_id = 0;
  Box box;
  double score = 0;
  std::array<double, kNumBranches> branch_scores{};
  int label = 1;
};

/// Greedy non-maximum suppression over any sequence with a box and a score.
/// Returns kept indices in descending score order; equal scores keep input
/// order. An item is dropped iff its IoU with an already kept item exceeds
/// `threshold`.
template <class T, class BoxOf, class ScoreOf>
std::vector<std::size_t> nms_indices(const std::vector<T>& items, double threshold, BoxOf box_of, ScoreOf score_of) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score_of(items[a]) > score_of(items[b]); });
  std::vector<std::size_t> kept;
  std::vector<Box> kept_boxes;
  for (std::size_t idx : order) {
    const Box& b = box_of(items[idx]);
    bool suppressed = false;
    for (const Box& k : kept_boxes) {
      if (iou(k, b) > threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back(idx);
      kept_boxes.push_back(b);
    }
  }
  return kept;
}

inline std::vector<Detection> nms(const std::vector<Detection>& dets, double threshold) {
  const auto keep = nms_indices(
      dets, threshold, [](const Detection& d) -> const Box& { return d.box; },
      [](const Detection& d) { return d.score; });
  std::vector<Detection> out;
  out.reserve(keep.size());
  for (auto i : keep) out.push_back(dets[i]);
  return out;
}

}  // namespace pcn
