#pragma once

// Synthetic street scenes. Pedestrians are drawn on a K x K cell grid:
// head in the top-middle cell, torso across the middle row, legs in the
// bottom corners, each with its own texture. A soft ground shadow sits a
// random distance below the feet. Occluders are rectangles of background
// texture snapped to whole cells. Look-alike figures without a shadow are
// scattered as unannotated distractors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcn/eval.hpp"
#include "pcn/tensor.hpp"

namespace pcn {

struct SceneConfig {
  std::size_t image_height = 96;
  std::size_t image_width = 160;
  std::size_t instances_min = 1;
  std::size_t instances_max = 3;
  double height_min = 32;
  double height_max = 72;
  double aspect_ratio = 0.41;  // width / height
  std::array<double, 3> occlusion_mix{0.5, 0.25, 0.25};  // none, partial, heavy
  std::uint64_t texture_seed = 1;
  std::size_t part_grid = 3;
  double noise_std = 0.04;
  double distractor_rate = 0.3;   // expected look-alikes per image
  double shadow_offset_max = 0.5;  // gap below the feet, as a fraction of height
  double clutter_rate = 4;        // expected background rectangles per image

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("scene config: " + m); };
    const double mix = occlusion_mix[0] + occlusion_mix[1] + occlusion_mix[2];
    if (std::abs(mix - 1) > 1e-9) fail("occlusion_mix must sum to 1");
    for (double m : occlusion_mix)
      if (m < 0) fail("occlusion_mix entries must be non-negative");
    if (part_grid != 3) fail("the pedestrian renderer supports part_grid = 3 only");
    if (!(height_min > 0 && height_min <= height_max)) fail("height range must satisfy 0 < min <= max");
    if (height_max > double(image_height) || height_max * aspect_ratio > double(image_width)) {
      fail("height range must fit in the image");
    }
    if (instances_min > instances_max) fail("instances_min > instances_max");
  }
};

/// 8-bit grayscale image.
struct Image {
  std::size_t id = 0;
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  /// [1,H,W] with values in [0,1].
  Tensor to_tensor() const {
    RealVector v(pixels.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = Real(pixels[i]) / Real(255);
    return Tensor::from_data({1, height, width}, std::move(v));
  }
};

struct Dataset {
  std::vector<Image> images;
  std::vector<Annotation> annotations;

  std::vector<Annotation> annotations_for(std::size_t image_id) const {
    std::vector<Annotation> out;
    for (const auto& a : annotations)
      if (a.image_id == image_id) out.push_back(a);
    return out;
  }
};

enum class OcclusionLevel { None = 0, Partial = 1, Heavy = 2 };

/// Occluder layouts, as (row0, col0, rows, cols) cell rectangles on the
/// 3x3 grid. Partial ones hide 1 to 3 cells, heavy ones 4 to 6.
inline const std::vector<std::array<int, 4>>& occluder_layouts(OcclusionLevel level) {
  static const std::vector<std::array<int, 4>> partial{
      {2, 0, 1, 1}, {2, 2, 1, 1}, {2, 0, 1, 2}, {2, 1, 1, 2}, {2, 0, 1, 3}, {0, 0, 3, 1}, {0, 2, 3, 1}, {1, 0, 2, 1}};
  static const std::vector<std::array<int, 4>> heavy{
      {1, 0, 2, 3}, {0, 0, 3, 2}, {0, 1, 3, 2}, {1, 0, 2, 2}, {1, 1, 2, 2}, {0, 0, 2, 2}, {0, 1, 2, 2}};
  static const std::vector<std::array<int, 4>> none{};
  switch (level) {
    case OcclusionLevel::Partial: return partial;
    case OcclusionLevel::Heavy: return heavy;
    default: return none;
  }
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Texture parameters shared by every image of a dataset.
struct TextureSet {
  double background = 0.5;
  double head = 0.85;
  double torso = 0.22;
  double legs = 0.62;
  double torso_period = 4;
  double legs_period = 3;
  double stripe_amp = 0.12;

  explicit TextureSet(std::uint64_t seed) {
    std::mt19937_64 rng(splitmix64(seed));
    std::uniform_real_distribution<double> jitter(-0.04, 0.04);
    head += jitter(rng);
    torso += jitter(rng);
    legs += jitter(rng);
    torso_period += std::floor(std::uniform_real_distribution<double>(0, 2)(rng));
    legs_period += std::floor(std::uniform_real_distribution<double>(0, 2)(rng));
  }
};

struct Canvas {
  std::size_t h, w;
  std::vector<double> v;
  std::vector<int> occluder;  // owner instance of an occluder pixel, -1 if none
  Canvas(std::size_t h_, std::size_t w_) : h(h_), w(w_), v(h_ * w_), occluder(h_ * w_, -1) {}
  double& at(long y, long x) { return v[std::size_t(y) * w + std::size_t(x)]; }
  bool inside(long y, long x) const { return y >= 0 && x >= 0 && y < long(h) && x < long(w); }
};

inline double background_value(const TextureSet& tex, long y, long x, double phase) {
  return tex.background + 0.06 * std::sin(0.11 * double(x) + phase) * std::cos(0.07 * double(y) - phase);
}

/// Texture of body cell (row, col) at pixel (y, x): one band per row (head,
/// torso, legs) spanning the box width.
inline double body_value(const TextureSet& tex, std::size_t row, std::size_t /*col*/, long y, long x) {
  constexpr double kPi = 3.14159265358979323846;
  if (row == 0) return tex.head;
  if (row == 1) return tex.torso + tex.stripe_amp * std::sin(2 * kPi * double(y) / tex.torso_period);
  return tex.legs + tex.stripe_amp * std::sin(2 * kPi * double(x) / tex.legs_period);
}

/// Pixel (y,x) lies in cell (row,col) of box b when its centre does.
inline bool cell_of(const Box& b, std::size_t K, long y, long x, std::size_t& row, std::size_t& col) {
  const double fx = (double(x) + 0.5 - b.x_min) / b.width, fy = (double(y) + 0.5 - b.y_min) / b.height;
  if (fx < 0 || fy < 0 || fx >= 1 || fy >= 1) return false;
  col = std::min(K - 1, std::size_t(fx * double(K)));
  row = std::min(K - 1, std::size_t(fy * double(K)));
  return true;
}

inline void draw_figure(Canvas& c, const TextureSet& tex, const Box& b, std::size_t K) {
  for (long y = long(std::floor(b.y_min)); y < long(std::ceil(b.y_max())); ++y)
    for (long x = long(std::floor(b.x_min)); x < long(std::ceil(b.x_max())); ++x) {
      std::size_t row, col;
      if (!c.inside(y, x) || !cell_of(b, K, y, x, row, col)) continue;
      c.at(y, x) = body_value(tex, row, col, y, x);
    }
}

inline void draw_shadow(Canvas& c, const Box& b, double offset) {
  const double cy = b.y_max() + offset + 0.04 * b.height, cx = b.cx();
  const double rx = 0.6 * b.width, ry = std::max(1.5, 0.04 * b.height);
  for (long y = long(std::floor(cy - ry)); y <= long(std::ceil(cy + ry)); ++y)
    for (long x = long(std::floor(cx - rx)); x <= long(std::ceil(cx + rx)); ++x) {
      if (!c.inside(y, x)) continue;
      const double dx = (double(x) + 0.5 - cx) / rx, dy = (double(y) + 0.5 - cy) / ry;
      if (dx * dx + dy * dy <= 1) c.at(y, x) = std::min(c.at(y, x), 0.12);
    }
}

}  // namespace detail

/// Renders image `image_id` of a dataset. Also reports, per annotation, the
/// pixel-counted occluded fraction of its box.
inline std::pair<Image, std::vector<Annotation>> render_scene(const SceneConfig& cfg, std::uint64_t seed,
                                                              std::size_t image_id,
                                                              std::vector<double>* occluded_pixel_fraction = nullptr) {
  const std::size_t K = cfg.part_grid, H = cfg.image_height, W = cfg.image_width;
  const detail::TextureSet tex(cfg.texture_seed);
  std::mt19937_64 rng(detail::splitmix64(seed ^ detail::splitmix64(image_id + 1)));
  std::uniform_real_distribution<double> u01(0, 1);
  detail::Canvas c(H, W);
  const double phase = 6.283185307179586 * u01(rng);
  for (long y = 0; y < long(H); ++y)
    for (long x = 0; x < long(W); ++x) c.at(y, x) = detail::background_value(tex, y, x, phase);

  // Clutter: flat rectangles at assorted intensities.
  std::poisson_distribution<int> n_clutter(cfg.clutter_rate);
  for (int i = n_clutter(rng); i > 0; --i) {
    const double w = 4 + 20 * u01(rng), h = 4 + 30 * u01(rng);
    const double x0 = u01(rng) * (double(W) - w), y0 = u01(rng) * (double(H) - h), val = 0.15 + 0.75 * u01(rng);
    for (long y = long(y0); y < long(y0 + h); ++y)
      for (long x = long(x0); x < long(x0 + w); ++x)
        if (c.inside(y, x)) c.at(y, x) = val;
  }

  // Place instances and distractors without overlap. `below` reserves room
  // under the box (as a fraction of its height) for the shadow.
  std::vector<Box> placed;
  auto try_place = [&](Box& out, double& below) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double h = std::round(cfg.height_min + (cfg.height_max - cfg.height_min) * u01(rng));
      const double w = std::round(h * cfg.aspect_ratio);
      const double room = std::max(0.0, std::min(below * h, double(H) - 1.1 * h));
      const double y_span = std::max(0.0, double(H) - h - room - 0.1 * h);
      const Box b{std::floor(u01(rng) * (double(W) - w)), std::floor(u01(rng) * y_span), w, h};
      bool clear = true;
      for (const auto& p : placed) {
        const Box grown = Box::from_center(p.cx(), p.cy(), p.width + 4, p.height + 4);
        if (intersection_area(grown, b) > 0) clear = false;
      }
      if (clear) {
        placed.push_back(b);
        out = b;
        below = room;
        return true;
      }
    }
    return false;
  };

  std::uniform_int_distribution<std::size_t> n_inst(cfg.instances_min, cfg.instances_max);
  std::discrete_distribution<int> level_dist(cfg.occlusion_mix.begin(), cfg.occlusion_mix.end());
  struct Instance {
    Box box;
    std::array<int, 4> occ{0, 0, 0, 0};
    double shadow_offset = 0;
  };
  std::vector<Instance> instances;
  for (std::size_t i = n_inst(rng); i > 0; --i) {
    Instance inst;
    double below = cfg.shadow_offset_max * u01(rng);
    if (!try_place(inst.box, below)) break;
    inst.shadow_offset = below;
    const auto level = static_cast<OcclusionLevel>(level_dist(rng));
    const auto& layouts = occluder_layouts(level);
    if (!layouts.empty()) inst.occ = layouts[std::size_t(u01(rng) * double(layouts.size())) % layouts.size()];
    instances.push_back(inst);
  }
  std::vector<Box> distractors;
  std::poisson_distribution<int> n_distract(cfg.distractor_rate);
  for (int i = n_distract(rng); i > 0; --i) {
    Box b;
    double below = 0;
    if (try_place(b, below)) distractors.push_back(b);
  }

  for (const auto& inst : instances) detail::draw_shadow(c, inst.box, inst.shadow_offset);
  for (const auto& inst : instances) detail::draw_figure(c, tex, inst.box, K);
  for (const auto& b : distractors) detail::draw_figure(c, tex, b, K);

  // Occluders repaint whole cells with background texture.
  std::vector<Annotation> anns;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    Annotation a;
    a.image_id = image_id;
    a.box = inst.box;
    a.visibility.assign(K * K, true);
    const auto [r0, c0, nr, nc] = inst.occ;
    for (int r = r0; r < r0 + nr; ++r)
      for (int cc = c0; cc < c0 + nc; ++cc) a.visibility[std::size_t(r) * K + std::size_t(cc)] = false;
    const Box& b = inst.box;
    for (long y = long(std::floor(b.y_min)); y < long(std::ceil(b.y_max())); ++y)
      for (long x = long(std::floor(b.x_min)); x < long(std::ceil(b.x_max())); ++x) {
        std::size_t row, col;
        if (!c.inside(y, x) || !detail::cell_of(b, K, y, x, row, col) || a.visibility[row * K + col]) continue;
        c.at(y, x) = detail::background_value(tex, y, x, phase);
        c.occluder[std::size_t(y) * W + std::size_t(x)] = int(i);
      }
    a.occlusion = double(nr * nc) / double(K * K);
    anns.push_back(a);
  }

  if (occluded_pixel_fraction) {
    occluded_pixel_fraction->clear();
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const Box& b = instances[i].box;
      std::size_t inside = 0, hidden = 0;
      for (long y = 0; y < long(H); ++y)
        for (long x = 0; x < long(W); ++x) {
          std::size_t row, col;
          if (!detail::cell_of(b, K, y, x, row, col)) continue;
          ++inside;
          if (c.occluder[std::size_t(y) * W + std::size_t(x)] == int(i)) ++hidden;
        }
      occluded_pixel_fraction->push_back(inside ? double(hidden) / double(inside) : 0.0);
    }
  }

  std::normal_distribution<double> noise(0, cfg.noise_std);
  Image img;
  img.id = image_id;
  img.height = H;
  img.width = W;
  img.pixels.resize(H * W);
  for (std::size_t i = 0; i < H * W; ++i) {
    const double v = std::clamp(c.v[i] + noise(rng), 0.0, 1.0);
    img.pixels[i] = std::uint8_t(std::lround(v * 255));
  }
  return {std::move(img), std::move(anns)};
}

/// Images 0..n_images-1; each is a pure function of (cfg, seed, image id).
inline Dataset generate_dataset(const SceneConfig& cfg, std::size_t n_images, std::uint64_t seed) {
  cfg.validate();
  if (n_images < 1) throw std::invalid_argument("generate_dataset: n_images must be >= 1");
  Dataset ds;
  ds.images.reserve(n_images);
  for (std::size_t i = 0; i < n_images; ++i) {
    auto [img, anns] = render_scene(cfg, seed, i);
    ds.images.push_back(std::move(img));
    ds.annotations.insert(ds.annotations.end(), anns.begin(), anns.end());
  }
  return ds;
}

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Seeded shuffle of 0..n-1 cut into train/val/test by `fractions`.
inline Split split(std::size_t n, const std::array<double, 3>& fractions, std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1) > 1e-9 || fractions[0] < 0 || fractions[1] < 0 || fractions[2] < 0) {
    throw std::invalid_argument("split: fractions must be non-negative and sum to 1");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(detail::splitmix64(seed));
  for (std::size_t i = n; i > 1; --i) {
    std::swap(idx[i - 1], idx[std::size_t(rng() % i)]);
  }
  const std::size_t n_train = std::size_t(std::llround(fractions[0] * double(n)));
  const std::size_t n_val = std::min(n - n_train, std::size_t(std::llround(fractions[1] * double(n))));
  Split s;
  s.train.assign(idx.begin(), idx.begin() + long(n_train));
  s.val.assign(idx.begin() + long(n_train), idx.begin() + long(n_train + n_val));
  s.test.assign(idx.begin() + long(n_train + n_val), idx.end());
  for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

// ---------------------------------------------------------------------------
// On-disk layout: images/NNNNNN.pgm, annotations.txt, and one id list per
// split (train.txt, val.txt, test.txt).
// ---------------------------------------------------------------------------

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Image read_pgm(const std::filesystem::path& path, std::size_t id = 0) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255 || w == 0 || h == 0) throw std::runtime_error("unsupported PGM: " + path.string());
  is.get();
  Image img;
  img.id = id;
  img.width = w;
  img.height = h;
  img.pixels.resize(w * h);
  is.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  if (!is) throw std::runtime_error("truncated PGM: " + path.string());
  return img;
}

inline std::string image_filename(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.pgm", id);
  return buf;
}

inline void write_id_list(const std::filesystem::path& path, const std::vector<std::size_t>& ids) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (auto id : ids) os << id << '\n';
}

inline std::vector<std::size_t> read_id_list(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::size_t> ids;
  std::size_t id;
  while (is >> id) ids.push_back(id);
  return ids;
}

/// Writes a dataset and its split lists; returns every file written.
inline std::vector<std::filesystem::path> save_dataset(const std::filesystem::path& dir, const Dataset& ds,
                                                       const Split& parts) {
  std::filesystem::create_directories(dir / "images");
  std::vector<std::filesystem::path> written;
  for (const auto& img : ds.images) {
    written.push_back(dir / "images" / image_filename(img.id));
    write_pgm(written.back(), img);
  }
  written.push_back(dir / "annotations.txt");
  write_annotations(written.back().string(), ds.annotations);
  const std::pair<const char*, const std::vector<std::size_t>*> lists[] = {
      {"train.txt", &parts.train}, {"val.txt", &parts.val}, {"test.txt", &parts.test}};
  for (const auto& [name, ids] : lists) {
    written.push_back(dir / name);
    write_id_list(written.back(), *ids);
  }
  return written;
}

/// Loads the images listed in `ids` plus their annotations.
inline Dataset load_dataset(const std::filesystem::path& dir, const std::vector<std::size_t>& ids) {
  Dataset ds;
  const auto all = read_annotations((dir / "annotations.txt").string());
  std::vector<bool> wanted;
  for (auto id : ids) {
    ds.images.push_back(read_pgm(dir / "images" / image_filename(id), id));
    if (id >= wanted.size()) wanted.resize(id + 1, false);
    wanted[id] = true;
  }
  for (const auto& a : all)
    if (a.image_id < wanted.size() && wanted[a.image_id]) ds.annotations.push_back(a);
  return ds;
}

}  // namespace pcn
