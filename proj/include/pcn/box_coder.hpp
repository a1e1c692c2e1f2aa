#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

#include "pcn/geometry.hpp"

namespace pcn {

/// Regression target (tx, ty, tw, th): center offsets normalised by the
/// reference size, and log size ratios.
using BoxDelta = std::array<double, 4>;

inline BoxDelta encode_bbox(const Box& gt, const Box& ref) {
  if (!(ref.width > 0 && ref.height > 0)) throw std::invalid_argument("encode_bbox: reference box must be positive");
  if (!(gt.width > 0 && gt.height > 0)) throw std::invalid_argument("encode_bbox: target box must be positive");
  return {(gt.cx() - ref.cx()) / ref.width, (gt.cy() - ref.cy()) / ref.height, std::log(gt.width / ref.width),
          std::log(gt.height / ref.height)};
}

inline Box decode_bbox(const BoxDelta& t, const Box& ref) {
  if (!(ref.width > 0 && ref.height > 0)) throw std::invalid_argument("decode_bbox: reference box must be positive");
  const double cx = ref.cx() + t[0] * ref.width;
  const double cy = ref.cy() + t[1] * ref.height;
  return Box::from_center(cx, cy, ref.width * std::exp(t[2]), ref.height * std::exp(t[3]));
}

inline constexpr double kMaxLogRatio = 4.135166556742356;  // log(1000 / 16)

/// Caps the size deltas of a network prediction so exp() cannot overflow.
inline BoxDelta cap_delta(BoxDelta t) {
  t[2] = std::min(t[2], kMaxLogRatio);
  t[3] = std::min(t[3], kMaxLogRatio);
  return t;
}

}  // namespace pcn
