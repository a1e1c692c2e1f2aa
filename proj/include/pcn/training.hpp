#pragma once

// Losses, RoI/anchor sampling, momentum SGD with per-stage freezing, and the
// three-stage training schedule.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pcn/box_coder.hpp"
#include "pcn/model.hpp"
#include "pcn/synth.hpp"

namespace pcn {

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline constexpr double kProbFloor = 1e-12;
inline constexpr std::size_t kIgnoreLabel = std::size_t(-1);

/// -log(max(p_label, 1e-12)) for one distribution.
inline double cross_entropy(std::span<const double> probs, std::size_t label) {
  if (label >= probs.size()) throw std::out_of_range("cross_entropy: label out of range");
  return -std::log(std::max(probs[label], kProbFloor));
}

/// Mean cross-entropy over the rows of probs [N,C]; rows labelled
/// kIgnoreLabel are skipped (and not counted in the mean).
inline Tensor cross_entropy(const Tensor& probs, const std::vector<std::size_t>& labels) {
  detail::require(probs.rank() == 2 && probs.dim(0) == labels.size(), "cross_entropy: probs must be [N,C] with N labels");
  const std::size_t C = probs.dim(1);
  auto p = probs.data();
  std::size_t n = 0;
  double loss = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    if (labels[i] >= C) throw std::out_of_range("cross_entropy: label out of range");
    loss -= std::log(std::max(double(p[i * C + labels[i]]), kProbFloor));
    ++n;
  }
  if (n == 0) return Tensor::scalar(0);
  const double inv_n = 1.0 / double(n);
  return detail::make_result({}, {Real(loss * inv_n)}, {probs.node()}, [labels, C, inv_n](detail::Node& self) {
    detail::Node& P = *self.inputs[0];
    Real* g = P.grad_buffer();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == kIgnoreLabel) continue;
      const Real pv = P.value[i * C + labels[i]];
      if (double(pv) > kProbFloor) g[i * C + labels[i]] -= self.grad[0] * Real(inv_n) / pv;
    }
  });
}

inline double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1 ? 0.5 * x * x : a - 0.5;
}

/// Sum over rows with mask[i] of sum_k smooth_l1(pred[i,k] - target[i][k]),
/// divided by `normalizer`.
inline Tensor smooth_l1_loss(const Tensor& pred, const std::vector<BoxDelta>& targets, const std::vector<bool>& mask,
                             double normalizer) {
  detail::require(pred.rank() == 2 && pred.dim(1) == 4 && pred.dim(0) == targets.size() && mask.size() == targets.size(),
                  "smooth_l1_loss: pred must be [N,4] matching targets and mask");
  if (!(normalizer > 0)) throw std::invalid_argument("smooth_l1_loss: normalizer must be positive");
  auto p = pred.data();
  double loss = 0;
  auto residual = std::make_shared<RealVector>(pred.size(), Real(0));
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) continue;
    for (std::size_t k = 0; k < 4; ++k) {
      const double d = double(p[i * 4 + k]) - targets[i][k];
      (*residual)[i * 4 + k] = Real(d);
      loss += smooth_l1(d);
    }
  }
  const double inv = 1.0 / normalizer;
  auto mask_copy = std::make_shared<std::vector<bool>>(mask);
  return detail::make_result({}, {Real(loss * inv)}, {pred.node()}, [residual, mask_copy, inv](detail::Node& self) {
    Real* g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < mask_copy->size(); ++i) {
      if (!(*mask_copy)[i]) continue;
      for (std::size_t k = 0; k < 4; ++k) {
        const Real d = (*residual)[i * 4 + k];
        const Real slope = std::abs(d) < Real(1) ? d : (d > 0 ? Real(1) : Real(-1));
        g[i * 4 + k] += self.grad[0] * Real(inv) * slope;
      }
    }
  });
}

/// sum_m alpha_m * l^m.
inline double total_loss(std::span<const double> branch_losses, std::span<const double> alpha) {
  if (branch_losses.size() != alpha.size()) throw std::invalid_argument("total_loss: one weight per branch loss required");
  double s = 0;
  for (std::size_t m = 0; m < alpha.size(); ++m) s += alpha[m] * branch_losses[m];
  return s;
}

inline Tensor total_loss(const std::vector<Tensor>& branch_losses, std::span<const double> alpha) {
  if (branch_losses.size() != alpha.size()) throw std::invalid_argument("total_loss: one weight per branch loss required");
  Tensor s;
  for (std::size_t m = 0; m < alpha.size(); ++m) {
    Tensor term = branch_losses[m] * Real(alpha[m]);
    s = s.defined() ? s + term : term;
  }
  return s.defined() ? s : Tensor::scalar(0);
}

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

/// v <- momentum * v + lr * (g + weight_decay * w);  w <- w - v, for every
/// parameter accepted by `trainable`. Others are left bit-identical.
inline void sgd_step(ParamStore& store, double lr, double momentum, double weight_decay,
                     const std::function<bool(const Parameter&)>& trainable) {
  for (auto& p : store.params()) {
    if (!trainable(p)) continue;
    auto w = p.value.mutable_data();
    if (p.velocity.size() != w.size()) p.velocity.assign(w.size(), Real(0));
    const RealVector g = p.value.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      p.velocity[i] = Real(momentum) * p.velocity[i] + Real(lr) * (g[i] + Real(weight_decay) * w[i]);
      w[i] -= p.velocity[i];
    }
  }
}

/// Scales every trainable gradient so their joint L2 norm is at most
/// max_norm. Returns the norm before scaling.
inline double clip_grad_norm(ParamStore& store, double max_norm, const std::function<bool(const Parameter&)>& trainable) {
  double sq = 0;
  for (const auto& p : store.params()) {
    if (!trainable(p) || !p.value.has_grad()) continue;
    for (Real g : p.value.node()->grad) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Real s = Real(max_norm / norm);
    for (auto& p : store.params()) {
      if (!trainable(p) || !p.value.has_grad()) continue;
      for (Real& g : p.value.node()->grad) g *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::array<std::size_t, 3> iterations{3000, 1500, 1500};  // per stage
  double base_lr = 0.001;
  double lr_step_fraction = 0.8;  // lr drops by lr_gamma after this fraction of a stage
  double lr_gamma = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double clip_norm = 10;  // 0 disables
  std::array<double, kNumBranches> loss_weights{1, 1, 1};  // alpha_m
  double rpn_loss_weight = 1;
  double fg_iou = 0.5;
  double bg_iou = 0.3;
  std::size_t rois_per_image = 32;
  double fg_fraction = 0.25;
  std::size_t rpn_batch = 64;
  bool flip = true;
  std::uint64_t seed = 0;

  double lr_at(std::size_t stage, std::size_t iteration) const {
    const std::size_t n = iterations.at(stage - 1);
    return double(iteration) < lr_step_fraction * double(n) ? base_lr : base_lr * lr_gamma;
  }
};

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
void seeded_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[std::size_t(rng() % i)]);
}
}  // namespace detail

struct RoiBatch {
  std::vector<RoI> rois;
  std::vector<std::size_t> labels;  // 1 = pedestrian, 0 = background
  std::vector<long> matched;        // GT index for positives, -1 otherwise
  std::vector<BoxDelta> targets;    // scaled regression targets (positives)
  std::vector<bool> positive;

  std::size_t size() const { return rois.size(); }
  std::size_t num_positive() const { return std::size_t(std::count(positive.begin(), positive.end(), true)); }
};

/// Positives have IoU >= fg_iou with some GT, negatives IoU < bg_iou. Up to
/// rois_per_image are drawn, at most fg_fraction of them positive.
inline RoiBatch sample_rois(const std::vector<Box>& candidates, const std::vector<Annotation>& gts,
                            const TrainConfig& cfg, std::mt19937_64& rng) {
  std::vector<std::size_t> fg, bg;
  std::vector<long> best_gt(candidates.size(), -1);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double best = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double o = iou(candidates[i], gts[g].box);
      if (o > best) {
        best = o;
        best_gt[i] = long(g);
      }
    }
    if (best >= cfg.fg_iou) fg.push_back(i);
    else if (best < cfg.bg_iou) bg.push_back(i);
  }
  detail::seeded_shuffle(fg, rng);
  detail::seeded_shuffle(bg, rng);
  const std::size_t n_fg = std::min(fg.size(), std::size_t(std::lround(cfg.fg_fraction * double(cfg.rois_per_image))));
  const std::size_t n_bg = std::min(bg.size(), cfg.rois_per_image - n_fg);
  RoiBatch b;
  auto add = [&](std::size_t i, bool pos) {
    b.rois.push_back(RoI::from_box(candidates[i]));
    b.labels.push_back(pos ? 1 : 0);
    b.positive.push_back(pos);
    b.matched.push_back(pos ? best_gt[i] : -1);
    b.targets.push_back(pos ? scale_delta(encode_bbox(gts[std::size_t(best_gt[i])].box, candidates[i])) : BoxDelta{});
  };
  for (std::size_t k = 0; k < n_fg; ++k) add(fg[k], true);
  for (std::size_t k = 0; k < n_bg; ++k) add(bg[k], false);
  return b;
}

/// Per-cell part labels for a sampled RoI: a cell is pedestrian (1) when its
/// centre falls on a visible cell of the matched GT, background (0)
/// otherwise. Negatives are all background.
inline std::vector<std::size_t> part_cell_labels(const RoiBatch& batch, const std::vector<Annotation>& gts, std::size_t K) {
  std::vector<std::size_t> labels(batch.size() * K * K, 0);
  for (std::size_t r = 0; r < batch.size(); ++r) {
    if (!batch.positive[r]) continue;
    const Annotation& g = gts[std::size_t(batch.matched[r])];
    const Box rb = batch.rois[r].box();
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j) {
        const double cx = rb.x_min + (double(j) + 0.5) * rb.width / double(K);
        const double cy = rb.y_min + (double(i) + 0.5) * rb.height / double(K);
        const double fx = (cx - g.box.x_min) / g.box.width, fy = (cy - g.box.y_min) / g.box.height;
        if (fx < 0 || fy < 0 || fx >= 1 || fy >= 1) continue;
        const std::size_t gc = std::min(K - 1, std::size_t(fx * double(K)));
        const std::size_t gr = std::min(K - 1, std::size_t(fy * double(K)));
        const bool visible = g.visibility.empty() || g.visibility[gr * K + gc];
        labels[(r * K + i) * K + j] = visible ? 1 : 0;
      }
  }
  return labels;
}

struct AnchorTargets {
  std::vector<std::size_t> index;  // sampled anchors
  std::vector<std::size_t> labels;
  std::vector<BoxDelta> targets;
  std::vector<bool> positive;
};

/// Anchors at IoU >= fg_iou with a GT (plus each GT's best anchor) are
/// positive, IoU < bg_iou negative; rpn_batch of them are drawn, at most
/// half positive.
inline AnchorTargets sample_anchors(const std::vector<Box>& anchors, const std::vector<Annotation>& gts,
                                    const TrainConfig& cfg, std::mt19937_64& rng) {
  std::vector<double> best(anchors.size(), 0);
  std::vector<long> arg(anchors.size(), -1);
  std::vector<double> gt_best(gts.size(), 0);
  std::vector<std::size_t> gt_arg(gts.size(), 0);
  for (std::size_t a = 0; a < anchors.size(); ++a)
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double o = iou(anchors[a], gts[g].box);
      if (o > best[a]) {
        best[a] = o;
        arg[a] = long(g);
      }
      if (o > gt_best[g]) {
        gt_best[g] = o;
        gt_arg[g] = a;
      }
    }
  std::vector<int> state(anchors.size(), -1);  // 1 fg, 0 bg, -1 ignore
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (best[a] >= cfg.fg_iou) state[a] = 1;
    else if (best[a] < cfg.bg_iou) state[a] = 0;
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gt_best[g] > 0) {
      state[gt_arg[g]] = 1;
      arg[gt_arg[g]] = long(g);
    }
  }
  std::vector<std::size_t> fg, bg;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (state[a] == 1) fg.push_back(a);
    else if (state[a] == 0) bg.push_back(a);
  }
  detail::seeded_shuffle(fg, rng);
  detail::seeded_shuffle(bg, rng);
  const std::size_t n_fg = std::min(fg.size(), cfg.rpn_batch / 2);
  const std::size_t n_bg = std::min(bg.size(), cfg.rpn_batch - n_fg);
  AnchorTargets t;
  for (std::size_t k = 0; k < n_fg; ++k) {
    const std::size_t a = fg[k];
    t.index.push_back(a);
    t.labels.push_back(1);
    t.positive.push_back(true);
    t.targets.push_back(scale_delta(encode_bbox(gts[std::size_t(arg[a])].box, anchors[a])));
  }
  for (std::size_t k = 0; k < n_bg; ++k) {
    t.index.push_back(bg[k]);
    t.labels.push_back(0);
    t.positive.push_back(false);
    t.targets.push_back({});
  }
  return t;
}

/// Horizontal mirror of an image and its annotations.
inline std::pair<Image, std::vector<Annotation>> flip_horizontal(const Image& img, const std::vector<Annotation>& anns,
                                                                 std::size_t K) {
  Image out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.pixels[y * img.width + x] = img.pixels[y * img.width + img.width - 1 - x];
  std::vector<Annotation> flipped = anns;
  for (auto& a : flipped) {
    a.box.x_min = double(img.width) - a.box.x_max();
    if (a.visibility.size() == K * K) {
      auto v = a.visibility;
      for (std::size_t r = 0; r < K; ++r)
        for (std::size_t c = 0; c < K; ++c) a.visibility[r * K + c] = v[r * K + (K - 1 - c)];
    }
  }
  return {std::move(out), std::move(flipped)};
}

// ---------------------------------------------------------------------------
// Stage objectives
// ---------------------------------------------------------------------------

/// Loss terms of one training image. Entries of `branch` are undefined for
/// branches that the stage does not train.
struct StageLosses {
  Tensor rpn;
  std::array<Tensor, kNumBranches> branch;
};

inline std::vector<Box> candidate_boxes(const std::vector<RoI>& proposals, const std::vector<Annotation>& gts) {
  std::vector<Box> c;
  c.reserve(proposals.size() + gts.size());
  for (const auto& r : proposals) c.push_back(r.box());
  for (const auto& g : gts) c.push_back(g.box);
  return c;
}

/// Losses of one image for `stage`. A non-null `proposals_cache` that is
/// empty receives the proposals; one that is filled replaces them.
inline StageLosses stage_losses(const PcnModel& model, int stage, const Tensor& image, const std::vector<Annotation>& gts,
                                const TrainConfig& cfg, std::mt19937_64& rng,
                                std::vector<RoI>* proposals_cache = nullptr) {
  const ModelConfig& mc = model.config();
  StageLosses out;
  auto cached = [&](std::vector<RoI> fresh) {
    if (!proposals_cache) return fresh;
    if (proposals_cache->empty()) *proposals_cache = std::move(fresh);
    return *proposals_cache;
  };
  if (stage == 1) {
    const TrunkOutput t = model.trunk(image);
    const RpnOutput rpn = model.rpn(t.top());
    const auto anchors = generate_anchors(mc, mc.feature_stride(), rpn.feature_h, rpn.feature_w);
    const AnchorTargets at = sample_anchors(anchors, gts, cfg, rng);
    Tensor rpn_loss = cross_entropy(gather_rows(rpn.probs, at.index), at.labels);
    if (!gts.empty()) {
      rpn_loss = rpn_loss + smooth_l1_loss(gather_rows(rpn.deltas, at.index), at.targets, at.positive,
                                           double(std::max<std::size_t>(at.index.size(), 1)));
    }
    out.rpn = rpn_loss;

    std::vector<RoI> proposals;
    {
      NoGradGuard ng;
      proposals = cached(model.proposals(rpn, mc.proposals_train));
    }
    const RoiBatch batch = sample_rois(candidate_boxes(proposals, gts), gts, cfg, rng);
    if (batch.size() == 0) return out;
    const double norm = double(batch.size());
    const BranchOutput orig = model.original_branch(t.top(), batch.rois);
    out.branch[kOriginal] = cross_entropy(orig.probs, batch.labels) + smooth_l1_loss(orig.deltas, batch.targets, batch.positive, norm);
    if (mc.use_context) {
      const BranchOutput ctx = model.context_branch(t.top(), batch.rois);
      out.branch[kContext] = cross_entropy(ctx.probs, batch.labels) + smooth_l1_loss(ctx.deltas, batch.targets, batch.positive, norm);
    }
    return out;
  }

  // Stages 2 and 3 train on top of a frozen trunk.
  TrunkOutput t;
  std::vector<RoI> proposals;
  {
    NoGradGuard ng;
    t = model.trunk(image);
    proposals = cached(model.proposals(model.rpn(t.top()), mc.proposals_train));
  }
  const RoiBatch batch = sample_rois(candidate_boxes(proposals, gts), gts, cfg, rng);
  if (batch.size() == 0) return out;
  const std::size_t K = mc.part_grid, C1 = mc.classes;
  Tensor maps = model.part_maps(model.part_taps(t), batch.rois);  // [taps,R,K,K,C1]
  const std::size_t taps = maps.dim(0);
  std::vector<std::size_t> labels;
  if (stage == 2) {
    const auto cell = part_cell_labels(batch, gts, K);
    for (std::size_t tap = 0; tap < taps; ++tap) labels.insert(labels.end(), cell.begin(), cell.end());
  } else {
    maps = model.refine_part_maps(maps);
    for (std::size_t tap = 0; tap < taps; ++tap)
      for (std::size_t r = 0; r < batch.size(); ++r) labels.insert(labels.end(), K * K, batch.labels[r]);
  }
  out.branch[kPart] = cross_entropy(reshape(maps, {maps.size() / C1, C1}), labels);
  return out;
}

/// rpn_weight * l_rpn + sum_m alpha_m l^m over the branches present.
inline Tensor stage_objective(const StageLosses& l, const TrainConfig& cfg) {
  std::vector<Tensor> terms;
  std::vector<double> alpha;
  if (l.rpn.defined()) {
    terms.push_back(l.rpn);
    alpha.push_back(cfg.rpn_loss_weight);
  }
  for (std::size_t m = 0; m < kNumBranches; ++m) {
    if (!l.branch[m].defined()) continue;
    terms.push_back(l.branch[m]);
    alpha.push_back(cfg.loss_weights[m]);
  }
  return total_loss(terms, alpha);
}

// ---------------------------------------------------------------------------
// Stage driver
// ---------------------------------------------------------------------------

struct LossRow {
  std::size_t iteration = 0;
  int stage = 0;
  double lr = 0;
  double total = 0;
  double rpn = 0;
  std::array<double, kNumBranches> branch{};
};

inline void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << "iteration,stage,lr,total_loss,rpn_loss,original_loss,part_loss,context_loss\n";
  for (const auto& r : rows) {
    os << r.iteration << ',' << r.stage << ',' << format_real(r.lr) << ',' << format_real(r.total) << ','
       << format_real(r.rpn) << ',' << format_real(r.branch[kOriginal]) << ',' << format_real(r.branch[kPart]) << ','
       << format_real(r.branch[kContext]) << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

class StagePrerequisiteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parameters updated by each stage.
inline std::function<bool(const Parameter&)> stage_trainable(int stage) {
  switch (stage) {
    case 1: return [](const Parameter& p) { return p.group == ParamGroup::Stage1; };
    case 2: return [](const Parameter& p) { return p.group == ParamGroup::Stage2; };
    case 3: return [](const Parameter& p) { return p.group == ParamGroup::Stage2 || p.group == ParamGroup::Stage3; };
    default: throw std::invalid_argument("unknown stage " + std::to_string(stage));
  }
}

/// Trains one stage in place. Stage s > 1 needs a model that completed
/// stage s - 1.
inline std::vector<LossRow> run_stage(int stage, PcnModel& model, const Dataset& train, const TrainConfig& cfg,
                                      const std::function<void(const LossRow&)>& on_iteration = {}) {
  if (stage < 1 || stage > 3) throw std::invalid_argument("stage must be 1, 2 or 3");
  if (stage > 1 && model.completed_stage() < stage - 1) {
    throw StagePrerequisiteError("stage " + std::to_string(stage) + " requires a completed stage " +
                                 std::to_string(stage - 1) + " checkpoint");
  }
  if (stage > 1 && !model.config().use_part) {
    throw std::invalid_argument("stage " + std::to_string(stage) + " trains the part branch, which the model config disables");
  }
  if (train.images.empty()) throw std::invalid_argument("run_stage: empty training set");
  std::vector<std::vector<Annotation>> gts_of(train.images.size());
  {
    std::map<std::size_t, std::size_t> slot;
    for (std::size_t i = 0; i < train.images.size(); ++i) slot[train.images[i].id] = i;
    for (const auto& a : train.annotations) {
      auto it = slot.find(a.image_id);
      if (it != slot.end()) gts_of[it->second].push_back(a);
    }
  }

  const auto trainable = stage_trainable(stage);
  std::mt19937_64 rng(detail::splitmix64(cfg.seed * 31 + std::uint64_t(stage)));
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::vector<LossRow> rows;
  const std::size_t n_iter = cfg.iterations.at(std::size_t(stage - 1));
  rows.reserve(n_iter);
  for (auto& p : model.params().params()) p.velocity.clear();

  for (std::size_t it = 0; it < n_iter; ++it) {
    if (cursor == order.size()) {
      order.resize(train.images.size());
      std::iota(order.begin(), order.end(), 0);
      detail::seeded_shuffle(order, rng);
      cursor = 0;
    }
    const std::size_t idx = order[cursor++];
    const Image* img = &train.images[idx];
    const std::vector<Annotation>* gts = &gts_of[idx];
    std::pair<Image, std::vector<Annotation>> flipped;
    if (cfg.flip && (rng() & 1)) {
      flipped = flip_horizontal(*img, *gts, model.config().part_grid);
      img = &flipped.first;
      gts = &flipped.second;
    }

    model.params().zero_grad();
    const StageLosses losses = stage_losses(model, stage, img->to_tensor(), *gts, cfg, rng);
    const Tensor objective = stage_objective(losses, cfg);
    if (objective.requires_grad()) {
      objective.backward();
      clip_grad_norm(model.params(), cfg.clip_norm, trainable);
    }
    const double lr = cfg.lr_at(std::size_t(stage), it);
    sgd_step(model.params(), lr, cfg.momentum, cfg.weight_decay, trainable);

    LossRow row;
    row.iteration = it;
    row.stage = stage;
    row.lr = lr;
    row.total = double(objective.item());
    row.rpn = losses.rpn.defined() ? double(losses.rpn.item()) : 0.0;
    for (std::size_t m = 0; m < kNumBranches; ++m) row.branch[m] = losses.branch[m].defined() ? double(losses.branch[m].item()) : 0.0;
    rows.push_back(row);
    if (on_iteration) on_iteration(row);
  }
  model.params().zero_grad();
  model.set_completed_stage(stage);
  return rows;
}

// ---------------------------------------------------------------------------
// Inference over a dataset
// ---------------------------------------------------------------------------

inline std::vector<Detection> detect_all(const PcnModel& model, const Dataset& data) {
  std::vector<Detection> out;
  for (const auto& img : data.images) {
    auto d = model.detect(img.to_tensor(), img.id);
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

inline std::vector<std::size_t> image_ids(const Dataset& data) {
  std::vector<std::size_t> ids;
  for (const auto& img : data.images) ids.push_back(img.id);
  return ids;
}

}  // namespace pcn
