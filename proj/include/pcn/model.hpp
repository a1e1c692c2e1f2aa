#pragma once

// The three-branch detector: a small dilated conv trunk, an RPN-style
// proposer, and the original / part / context branches whose pedestrian
// probabilities are combined by a weighted sum.

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pcn/box_coder.hpp"
#include "pcn/checkpoint.hpp"
#include "pcn/geometry.hpp"
#include "pcn/nn_blocks.hpp"
#include "pcn/ops.hpp"

namespace pcn {

struct TrunkLayer {
  std::size_t channels = 8;
  bool pool = true;          // 2x2 max pool after the conv
  std::size_t dilation = 1;  // 3x3 conv dilation; padding keeps the size
};

struct ModelConfig {
  std::size_t part_grid = 3;  // K
  std::size_t classes = 2;    // C + 1
  std::vector<double> context_scales{1.5, 1.8, 2.1};
  std::array<double, kNumBranches> branch_weights{1.0 / 3, 1.0 / 3, 1.0 / 3};
  bool use_part = true;
  bool use_lstm = true;
  bool use_context = true;

  double anchor_base_height = 40;
  double anchor_scale_stride = 1.4;
  std::size_t anchor_count = 9;
  double anchor_aspect_ratio = 0.41;  // width / height

  std::size_t proposals_train = 1000;
  std::size_t proposals_test = 50;
  double nms_iou = 0.5;
  double rpn_nms_iou = 0.7;
  std::size_t rpn_pre_nms = 600;
  double min_proposal_size = 4;

  std::size_t image_height = 96;
  std::size_t image_width = 160;
  std::vector<TrunkLayer> trunk{{8, true, 1}, {16, true, 1}, {24, false, 1}, {24, false, 2}};
  std::size_t rpn_channels = 16;
  std::size_t roi_size = 4;
  std::size_t fc_hidden = 64;
  std::size_t context_channels = 24;
  std::size_t part_hidden = 16;
  std::size_t lstm_hidden = 32;

  std::size_t feature_stride() const {
    std::size_t s = 1;
    for (const auto& l : trunk) s *= l.pool ? 2 : 1;
    return s;
  }

  std::size_t part_taps() const { return std::min<std::size_t>(2, trunk.size()); }

  /// Branch weights with inactive branches zeroed and the rest rescaled to
  /// sum to one.
  std::array<double, kNumBranches> effective_branch_weights() const {
    std::array<double, kNumBranches> w = branch_weights;
    if (!use_part) w[kPart] = 0;
    if (!use_context) w[kContext] = 0;
    const double s = w[0] + w[1] + w[2];
    if (!(s > 0)) throw std::invalid_argument("branch weights of the active branches sum to zero");
    for (auto& v : w) v /= s;
    return w;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (part_grid < 1) fail("part_grid must be >= 1");
    if (classes < 2) fail("classes must be >= 2");
    if (context_scales.empty()) fail("context_scales must not be empty");
    for (double s : context_scales)
      if (!(s > 1)) fail("context scale factors must be > 1");
    double sum = 0;
    for (double w : branch_weights) {
      if (w < 0) fail("branch weights must be non-negative");
      sum += w;
    }
    if (std::abs(sum - 1) > 1e-9) fail("branch weights must sum to 1");
    if (anchor_count < 1) fail("anchor_count must be >= 1");
    if (!(anchor_base_height > 0) || !(anchor_scale_stride > 0) || !(anchor_aspect_ratio > 0)) {
      fail("anchor geometry must be positive");
    }
    if (trunk.size() < 2) fail("trunk needs at least two layers");
    if (!(nms_iou > 0 && nms_iou < 1) || !(rpn_nms_iou > 0 && rpn_nms_iou < 1)) fail("nms thresholds must be in (0,1)");
    if (proposals_test < 1 || proposals_train < 1) fail("proposal counts must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Anchors, proposals, context regions
// ---------------------------------------------------------------------------

/// Anchors in (row, column, scale) order. Scale k has height
/// base * stride^k and width height * aspect_ratio, centred on the cell.
inline std::vector<Box> generate_anchors(const ModelConfig& cfg, std::size_t feature_stride, std::size_t feature_h,
                                         std::size_t feature_w) {
  if (feature_stride < 1) throw std::invalid_argument("generate_anchors: feature_stride must be >= 1");
  std::vector<double> heights(cfg.anchor_count);
  for (std::size_t k = 0; k < cfg.anchor_count; ++k) {
    heights[k] = cfg.anchor_base_height * std::pow(cfg.anchor_scale_stride, double(k));
  }
  std::vector<Box> anchors;
  anchors.reserve(feature_h * feature_w * cfg.anchor_count);
  for (std::size_t y = 0; y < feature_h; ++y)
    for (std::size_t x = 0; x < feature_w; ++x) {
      const double cx = (double(x) + 0.5) * double(feature_stride), cy = (double(y) + 0.5) * double(feature_stride);
      for (double h : heights) anchors.push_back(Box::from_center(cx, cy, h * cfg.anchor_aspect_ratio, h));
    }
  return anchors;
}

/// Regression deltas are predicted in units scaled by these factors.
inline constexpr BoxDelta kDeltaScale{0.1, 0.1, 0.2, 0.2};

inline BoxDelta scale_delta(const BoxDelta& t) {
  return {t[0] / kDeltaScale[0], t[1] / kDeltaScale[1], t[2] / kDeltaScale[2], t[3] / kDeltaScale[3]};
}
inline BoxDelta unscale_delta(const BoxDelta& t) {
  return {t[0] * kDeltaScale[0], t[1] * kDeltaScale[1], t[2] * kDeltaScale[2], t[3] * kDeltaScale[3]};
}

struct ProposalOptions {
  std::size_t top_n = 50;
  double nms_iou = 0.7;
  std::size_t pre_nms_top = 0;  // 0 keeps every candidate
  double min_size = 0;
  double image_width = 0, image_height = 0;  // 0 disables clipping
};

/// Decodes `deltas` (raw, unscaled) onto `anchors`, clips, suppresses, and
/// returns at most top_n regions by objectness.
inline std::vector<RoI> propose(const std::vector<double>& objectness, const std::vector<BoxDelta>& deltas,
                                const std::vector<Box>& anchors, const ProposalOptions& opt) {
  if (objectness.size() != anchors.size() || deltas.size() != anchors.size()) {
    throw std::invalid_argument("propose: objectness/deltas do not match the anchor layout");
  }
  struct Candidate {
    Box box;
    double score;
  };
  std::vector<std::size_t> order(anchors.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return objectness[a] > objectness[b]; });
  if (opt.pre_nms_top > 0 && order.size() > opt.pre_nms_top) order.resize(opt.pre_nms_top);
  std::vector<Candidate> cands;
  cands.reserve(order.size());
  for (std::size_t i : order) {
    Box b = decode_bbox(cap_delta(deltas[i]), anchors[i]);
    if (opt.image_width > 0 && opt.image_height > 0) b = clip_box(b, opt.image_width, opt.image_height);
    if (!(b.width > opt.min_size && b.height > opt.min_size) || !b.valid()) continue;
    cands.push_back({b, objectness[i]});
  }
  auto keep = nms_indices(
      cands, opt.nms_iou, [](const Candidate& c) -> const Box& { return c.box; }, [](const Candidate& c) { return c.score; });
  if (keep.size() > opt.top_n) keep.resize(opt.top_n);
  std::vector<RoI> out;
  out.reserve(keep.size());
  for (auto k : keep) out.push_back(RoI::from_box(cands[k].box));
  return out;
}

/// Same centre, width W*S and height H*S. The window is not clipped: RoI
/// pooling outputs 0 for bins beyond the feature map.
inline RoI scale_roi(const RoI& roi, double scale) {
  if (!(scale > 0)) throw std::invalid_argument("scale_roi: scale must be positive");
  return {roi.x_center, roi.y_center, roi.width * scale, roi.height * scale, roi.image};
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct TrunkOutput {
  std::vector<Tensor> layers;  // every layer's activation, [C,h,w]
  const Tensor& top() const { return layers.back(); }
};

struct RpnOutput {
  Tensor probs;   // [anchors, 2]
  Tensor deltas;  // [anchors, 4], scaled units
  std::size_t feature_h = 0, feature_w = 0;
};

struct BranchOutput {
  Tensor probs;   // [R, classes]
  Tensor deltas;  // [R, 4], scaled units
};

class PcnModel {
 public:
  PcnModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Highest training stage completed (0 = untrained).
  int completed_stage() const { return completed_stage_; }
  void set_completed_stage(int s) { completed_stage_ = s; }

  TrunkOutput trunk(const Tensor& image) const {
    TrunkOutput out;
    Tensor x = image;
    for (std::size_t i = 0; i < cfg_.trunk.size(); ++i) {
      const auto& l = cfg_.trunk[i];
      const std::string p = "trunk.conv" + std::to_string(i);
      x = relu(conv2d(x, w(p + ".w"), w(p + ".b"), {1, l.dilation, l.dilation}));
      if (l.pool) x = max_pool2d(x, 2, 2);
      out.layers.push_back(x);
    }
    return out;
  }

  std::vector<Tensor> part_taps(const TrunkOutput& t) const {
    const std::size_t n = cfg_.part_taps();
    return {t.layers.end() - long(n), t.layers.end()};
  }

  RpnOutput rpn(const Tensor& top) const {
    const std::size_t A = cfg_.anchor_count, Hf = top.dim(1), Wf = top.dim(2);
    Tensor h = relu(conv2d(top, w("rpn.conv.w"), w("rpn.conv.b"), {1, 2, 2}));
    Tensor cls = conv2d(h, w("rpn.cls.w"), w("rpn.cls.b"));    // [2A,H,W]
    Tensor box = conv2d(h, w("rpn.bbox.w"), w("rpn.bbox.b"));  // [4A,H,W]
    auto per_anchor = [&](const Tensor& t, std::size_t k) {
      return reshape(permute(reshape(t, {A, k, Hf, Wf}), {2, 3, 0, 1}), {Hf * Wf * A, k});
    };
    return {softmax(per_anchor(cls, 2)), per_anchor(box, 4), Hf, Wf};
  }

  std::vector<RoI> proposals(const RpnOutput& r, std::size_t top_n) const {
    const auto anchors = generate_anchors(cfg_, cfg_.feature_stride(), r.feature_h, r.feature_w);
    std::vector<double> obj(anchors.size());
    std::vector<BoxDelta> deltas(anchors.size());
    auto pv = r.probs.data();
    auto dv = r.deltas.data();
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      obj[i] = double(pv[2 * i + 1]);
      deltas[i] = unscale_delta({double(dv[4 * i]), double(dv[4 * i + 1]), double(dv[4 * i + 2]), double(dv[4 * i + 3])});
    }
    ProposalOptions opt;
    opt.top_n = top_n;
    opt.nms_iou = cfg_.rpn_nms_iou;
    opt.pre_nms_top = cfg_.rpn_pre_nms;
    opt.min_size = cfg_.min_proposal_size;
    opt.image_width = double(cfg_.image_width);
    opt.image_height = double(cfg_.image_height);
    return propose(obj, deltas, anchors, opt);
  }

  BranchOutput original_branch(const Tensor& top, const std::vector<RoI>& rois) const {
    Tensor pooled = roi_pool(top, rois, cfg_.roi_size, spatial_scale());
    return head("orig", reshape(pooled, {rois.size(), pooled.size() / rois.size()}));
  }

  BranchOutput context_branch(const Tensor& top, const std::vector<RoI>& rois) const {
    // One shared conv ahead of every scale's pooling.
    const Tensor features = relu(conv2d(top, w("ctx.conv.w"), w("ctx.conv.b"), {1, 1, 1}));
    std::vector<Tensor> maps;
    for (double s : cfg_.context_scales) {
      std::vector<RoI> scaled;
      scaled.reserve(rois.size());
      for (const auto& r : rois) {
        scaled.push_back(scale_roi(r, s));
      }
      maps.push_back(roi_pool(features, scaled, cfg_.roi_size, spatial_scale()));
    }
    Tensor merged = maps.size() == 1 ? maps[0] : maxout_merge(maps);
    return head("ctx", reshape(merged, {rois.size(), merged.size() / rois.size()}));
  }

  /// Raw per-cell class probabilities [taps,R,K,K,C+1].
  Tensor part_maps(const std::vector<Tensor>& taps, const std::vector<RoI>& rois) const {
    std::vector<Tensor> feats;
    for (const auto& t : taps) feats.push_back(roi_pool(t, rois, 2 * cfg_.part_grid, spatial_scale()));
    return part_score_head(feats, part_heads());
  }

  /// LSTM refinement applied to every tap's maps with shared parameters.
  Tensor refine_part_maps(const Tensor& maps) const {
    const std::size_t taps = maps.dim(0), R = maps.dim(1), K = maps.dim(2), C1 = maps.dim(4);
    Tensor refined = grid_lstm_refine(reshape(maps, {taps * R, K, K, C1}), lstm_params());
    return reshape(refined, {taps, R, K, K, C1});
  }

  /// Full inference for one [channels,H,W] image.
  std::vector<Detection> detect(const Tensor& image, std::size_t image_id) const {
    NoGradGuard no_grad;
    const TrunkOutput t = trunk(image);
    const std::vector<RoI> rois = proposals(rpn(t.top()), cfg_.proposals_test);
    if (rois.empty()) return {};
    const BranchOutput orig = original_branch(t.top(), rois);
    std::vector<double> part(rois.size(), 0.0), ctx(rois.size(), 0.0);
    if (cfg_.use_part) {
      Tensor maps = part_maps(part_taps(t), rois);
      if (cfg_.use_lstm) maps = refine_part_maps(maps);
      auto v = part_branch_aggregate(maps).data();
      part.assign(v.begin(), v.end());
    }
    if (cfg_.use_context) {
      auto p = context_branch(t.top(), rois).probs.data();
      for (std::size_t r = 0; r < rois.size(); ++r) ctx[r] = double(p[r * cfg_.classes + 1]);
    }
    const auto weights = cfg_.effective_branch_weights();
    std::vector<Detection> dets;
    dets.reserve(rois.size());
    auto op = orig.probs.data();
    auto od = orig.deltas.data();
    for (std::size_t r = 0; r < rois.size(); ++r) {
      Detection d;
      d.image_id = image_id;
      d.branch_scores = {double(op[r * cfg_.classes + 1]), part[r], ctx[r]};
      d.score = fuse_scores(d.branch_scores, weights);
      const BoxDelta t4 =
          unscale_delta({double(od[4 * r]), double(od[4 * r + 1]), double(od[4 * r + 2]), double(od[4 * r + 3])});
      d.box = clip_box(decode_bbox(cap_delta(t4), rois[r].box()), double(cfg_.image_width), double(cfg_.image_height));
      if (d.box.valid()) dets.push_back(d);
    }
    return nms(dets, cfg_.nms_iou);
  }

  static double fuse_scores(const std::array<double, kNumBranches>& s, const std::array<double, kNumBranches>& w) {
    return w[0] * s[0] + w[1] * s[1] + w[2] * s[2];
  }

  std::vector<PartHeadParams> part_heads() const {
    std::vector<PartHeadParams> heads;
    for (std::size_t t = 0; t < cfg_.part_taps(); ++t) {
      const std::string p = "part.tap" + std::to_string(t);
      heads.push_back({w(p + ".gamma"), w(p + ".conv.w"), w(p + ".conv.b"), w(p + ".score.w"), w(p + ".score.b")});
    }
    return heads;
  }

  LstmParams lstm_params() const {
    LstmParams lp;
    for (std::size_t d = 0; d < kScanDirections; ++d) {
      const std::string p = "lstm.dir" + std::to_string(d);
      lp.directions[d] = {{w(p + ".wx"), w(p + ".wh"), w(p + ".b")}, w(p + ".proj.w"), w(p + ".proj.b")};
    }
    return lp;
  }

  double spatial_scale() const { return 1.0 / double(cfg_.feature_stride()); }

  // Checkpoint records: parameters plus a few metadata entries describing
  // what produced them.
  std::vector<CheckpointRecord> to_records() const {
    auto records = params_.to_records();
    records.push_back({"meta.stage", {1}, {double(completed_stage_)}});
    records.push_back({"meta.part_grid", {1}, {double(cfg_.part_grid)}});
    records.push_back({"meta.context_scales", {cfg_.context_scales.size()}, cfg_.context_scales});
    return records;
  }

  void load_records(const std::vector<CheckpointRecord>& records) {
    for (const auto& r : records) {
      if (r.name == "meta.part_grid" && std::size_t(r.values.at(0)) != cfg_.part_grid) {
        throw CheckpointError("checkpoint has part grid K=" + std::to_string(std::size_t(r.values.at(0))) +
                              " but the model expects K=" + std::to_string(cfg_.part_grid));
      }
    }
    params_.load_records(records);
    completed_stage_ = int(checkpoint_stage(records));
  }

  static int checkpoint_stage(const std::vector<CheckpointRecord>& records) {
    for (const auto& r : records)
      if (r.name == "meta.stage") return int(r.values.at(0));
    return 0;
  }

  void save(const std::string& path) const { write_checkpoint(path, to_records()); }
  void load(const std::string& path) { load_records(read_checkpoint(path)); }

 private:
  const Tensor& w(const std::string& name) const { return params_.get(name); }

  BranchOutput head(const std::string& p, const Tensor& flat) const {
    Tensor h = relu(linear(flat, w(p + ".fc.w"), w(p + ".fc.b")));
    return {softmax(linear(h, w(p + ".cls.w"), w(p + ".cls.b"))), linear(h, w(p + ".bbox.w"), w(p + ".bbox.b"))};
  }

  static RealVector normal(std::mt19937_64& rng, std::size_t n, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    RealVector v(n);
    for (auto& e : v) e = Real(dist(rng));
    return v;
  }
  static RealVector uniform(std::mt19937_64& rng, std::size_t n, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    RealVector v(n);
    for (auto& e : v) e = Real(dist(rng));
    return v;
  }

  void add_conv(std::mt19937_64& rng, const std::string& name, ParamGroup g, std::size_t out, std::size_t in,
                std::size_t k, double stddev = 0) {
    const double s = stddev > 0 ? stddev : std::sqrt(2.0 / double(in * k * k));
    params_.add(name + ".w", g, {out, in, k, k}, normal(rng, out * in * k * k, s));
    params_.add(name + ".b", g, {out}, RealVector(out, Real(0)));
  }
  void add_linear(std::mt19937_64& rng, const std::string& name, ParamGroup g, std::size_t in, std::size_t out,
                  double stddev = 0) {
    const double s = stddev > 0 ? stddev : std::sqrt(2.0 / double(in));
    params_.add(name + ".w", g, {in, out}, normal(rng, in * out, s));
    params_.add(name + ".b", g, {out}, RealVector(out, Real(0)));
  }

  // Creation order is fixed (trunk, rpn, original, context, part, lstm) so a
  // given seed initialises shared layers identically across variants.
  void build(std::mt19937_64& rng) {
    const auto G1 = ParamGroup::Stage1, G2 = ParamGroup::Stage2, G3 = ParamGroup::Stage3;
    std::size_t in = 1;
    for (std::size_t i = 0; i < cfg_.trunk.size(); ++i) {
      add_conv(rng, "trunk.conv" + std::to_string(i), G1, cfg_.trunk[i].channels, in, 3);
      in = cfg_.trunk[i].channels;
    }
    const std::size_t top_c = in, A = cfg_.anchor_count, m = cfg_.roi_size, C1 = cfg_.classes;
    add_conv(rng, "rpn.conv", G1, cfg_.rpn_channels, top_c, 3);
    add_conv(rng, "rpn.cls", G1, 2 * A, cfg_.rpn_channels, 1, 0.01);
    add_conv(rng, "rpn.bbox", G1, 4 * A, cfg_.rpn_channels, 1, 0.01);

    add_linear(rng, "orig.fc", G1, top_c * m * m, cfg_.fc_hidden);
    add_linear(rng, "orig.cls", G1, cfg_.fc_hidden, C1, 0.01);
    add_linear(rng, "orig.bbox", G1, cfg_.fc_hidden, 4, 0.001);

    if (cfg_.use_context) {
      add_conv(rng, "ctx.conv", G1, cfg_.context_channels, top_c, 3);
      add_linear(rng, "ctx.fc", G1, cfg_.context_channels * m * m, cfg_.fc_hidden);
      add_linear(rng, "ctx.cls", G1, cfg_.fc_hidden, C1, 0.01);
      add_linear(rng, "ctx.bbox", G1, cfg_.fc_hidden, 4, 0.001);
    }

    if (cfg_.use_part) {
      const std::size_t n_taps = cfg_.part_taps();
      for (std::size_t t = 0; t < n_taps; ++t) {
        const std::size_t tap_c = cfg_.trunk[cfg_.trunk.size() - n_taps + t].channels;
        const std::string p = "part.tap" + std::to_string(t);
        params_.add(p + ".gamma", G2, {tap_c}, RealVector(tap_c, Real(kL2NormGammaInit)));
        add_conv(rng, p + ".conv", G2, cfg_.part_hidden, tap_c, 3);
        add_conv(rng, p + ".score", G2, C1, cfg_.part_hidden, 1, 0.01);
      }
      const std::size_t hd = cfg_.lstm_hidden;
      const double bound = 1.0 / std::sqrt(double(hd));
      for (std::size_t d = 0; d < kScanDirections; ++d) {
        const std::string p = "lstm.dir" + std::to_string(d);
        params_.add(p + ".wx", G3, {C1, 4 * hd}, uniform(rng, C1 * 4 * hd, bound));
        params_.add(p + ".wh", G3, {hd, 4 * hd}, uniform(rng, hd * 4 * hd, bound));
        RealVector b(4 * hd, Real(0));
        for (std::size_t j = hd; j < 2 * hd; ++j) b[j] = Real(1);  // forget gate starts open
        params_.add(p + ".b", G3, {4 * hd}, std::move(b));
        add_linear(rng, p + ".proj", G3, hd, C1, bound);
      }
    }
  }

  ModelConfig cfg_;
  ParamStore params_;
  int completed_stage_ = 0;
};

}  // namespace pcn
