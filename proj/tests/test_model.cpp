#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "pcn/model.hpp"
#include "test_support.hpp"

using namespace pcn;
using pcn::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.image_height = 32;
  cfg.image_width = 48;
  cfg.anchor_base_height = 12;
  cfg.anchor_scale_stride = 1.3;
  cfg.anchor_count = 3;
  cfg.trunk = {{4, true, 1}, {6, true, 1}, {6, false, 1}, {6, false, 2}};
  cfg.rpn_channels = 4;
  cfg.fc_hidden = 8;
  cfg.context_channels = 4;
  cfg.part_hidden = 4;
  cfg.lstm_hidden = 4;
  cfg.proposals_test = 10;
  cfg.min_proposal_size = 1;
  return cfg;
}

}  // namespace

TEST(Anchors, HeightsAndLayout) {
  ModelConfig cfg;
  const auto a = generate_anchors(cfg, 4, 2, 3);
  ASSERT_EQ(a.size(), 2u * 3u * 9u);
  for (std::size_t k = 0; k < 9; ++k) {
    EXPECT_NEAR(a[k].height, 40 * std::pow(1.4, double(k)), 1e-9);
    EXPECT_NEAR(a[k].width, a[k].height * 0.41, 1e-9);
    EXPECT_NEAR(a[k].cx(), 2, 1e-12);
    EXPECT_NEAR(a[k].cy(), 2, 1e-12);
  }
  EXPECT_NEAR(a[9].cx(), 6, 1e-12);    // next column
  EXPECT_NEAR(a[27].cy(), 6, 1e-12);   // next row
}

TEST(Propose, CoincidentAnchorsSuppressed) {
  const std::vector<Box> anchors{{10, 10, 8, 20}, {10, 10, 8, 20}};
  ProposalOptions opt;
  opt.top_n = 10;
  opt.nms_iou = 0.5;
  const auto out = propose({0.8, 0.9}, {BoxDelta{}, BoxDelta{}}, anchors, opt);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].box(), anchors[1]);
}

TEST(Propose, TopNAndClip) {
  std::vector<Box> anchors;
  std::vector<double> scores;
  for (int i = 0; i < 20; ++i) {
    anchors.push_back({double(i) * 20 - 5, -5, 10, 30});
    scores.push_back(0.01 * i);
  }
  ProposalOptions opt;
  opt.top_n = 5;
  opt.nms_iou = 0.5;
  opt.image_width = 190;
  opt.image_height = 20;
  const auto out = propose(scores, std::vector<BoxDelta>(20), anchors, opt);
  ASSERT_EQ(out.size(), 5u);
  for (const auto& r : out) {
    const Box b = r.box();
    EXPECT_GE(b.x_min, -1e-12);
    EXPECT_GE(b.y_min, -1e-12);
    EXPECT_LE(b.y_max(), 20 + 1e-12);
  }
  EXPECT_NEAR(out[0].x_center, anchors[9].cx(), 1e-12);
  EXPECT_THROW(propose({0.1}, {}, {Box{0, 0, 1, 1}}, opt), std::invalid_argument);
}

TEST(ScaleRoi, Example) {
  const RoI r = scale_roi({50, 50, 20, 40}, 1.5);
  const Box b = r.box();
  EXPECT_EQ(b.x_min, 35);
  EXPECT_EQ(b.y_min, 20);
  EXPECT_EQ(b.x_max(), 65);
  EXPECT_EQ(b.y_max(), 80);
  EXPECT_EQ(r.x_center, 50);
  EXPECT_EQ(r.y_center, 50);
}

TEST(ScaleRoi, KeepsCentreAtImageBorder) {
  const RoI r = scale_roi({5, 50, 20, 40}, 2.0);
  EXPECT_EQ(r.x_center, 5);
  EXPECT_EQ(r.y_center, 50);
  EXPECT_EQ(r.box().x_min, -15);
  EXPECT_EQ(r.box().x_max(), 25);
}

TEST(Fusion, Example) {
  EXPECT_NEAR(PcnModel::fuse_scores({0.9, 0.5, 0.1}, {0.5, 0.3, 0.2}), 0.62, 1e-15);
}

TEST(ModelConfig, EffectiveWeights) {
  ModelConfig cfg;
  cfg.use_part = false;
  const auto w = cfg.effective_branch_weights();
  EXPECT_NEAR(w[kOriginal], 0.5, 1e-15);
  EXPECT_EQ(w[kPart], 0.0);
  EXPECT_NEAR(w[kContext], 0.5, 1e-15);
  cfg.branch_weights = {0, 1, 0};
  EXPECT_THROW(cfg.effective_branch_weights(), std::invalid_argument);
  cfg.branch_weights = {0.5, 0.5, 0.5};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Model, DetectProducesFusedScores) {
  const ModelConfig cfg = small_config();
  PcnModel model(cfg, 3);
  std::mt19937_64 rng(1);
  const Tensor img = random_tensor(rng, {1, cfg.image_height, cfg.image_width}, 0, 1);
  const auto dets = model.detect(img, 4);
  ASSERT_FALSE(dets.empty());
  EXPECT_LE(dets.size(), cfg.proposals_test);
  const auto w = cfg.effective_branch_weights();
  for (const auto& d : dets) {
    EXPECT_EQ(d.image_id, 4u);
    EXPECT_NEAR(d.score, w[0] * d.branch_scores[0] + w[1] * d.branch_scores[1] + w[2] * d.branch_scores[2], 1e-12);
    EXPECT_TRUE(d.box.valid());
  }
}

TEST(Model, OriginalOnlyWeights) {
  ModelConfig cfg = small_config();
  cfg.branch_weights = {1, 0, 0};
  PcnModel model(cfg, 3);
  std::mt19937_64 rng(1);
  for (const auto& d : model.detect(random_tensor(rng, {1, cfg.image_height, cfg.image_width}, 0, 1), 0)) {
    EXPECT_EQ(d.score, d.branch_scores[kOriginal]);
  }
}

TEST(Model, CheckpointRoundTrip) {
  const ModelConfig cfg = small_config();
  PcnModel a(cfg, 3), b(cfg, 99);
  a.set_completed_stage(2);
  const auto path = std::filesystem::temp_directory_path() / "pcn_model_test.ckpt";
  a.save(path.string());
  b.load(path.string());
  EXPECT_EQ(b.completed_stage(), 2);
  std::mt19937_64 rng(2);
  const Tensor img = random_tensor(rng, {1, cfg.image_height, cfg.image_width}, 0, 1);
  const auto da = a.detect(img, 0), db = b.detect(img, 0);
  ASSERT_EQ(da.size(), db.size());
  for (std::size_t i = 0; i < da.size(); ++i) {
    EXPECT_EQ(da[i].score, db[i].score);
    EXPECT_EQ(da[i].box, db[i].box);
  }
  ModelConfig other = cfg;
  other.part_grid = 2;
  PcnModel c(other, 3);
  EXPECT_THROW(c.load(path.string()), CheckpointError);
  std::filesystem::remove(path);
}

TEST(Model, SharedLayersInitialiseIdenticallyAcrossVariants) {
  ModelConfig full = small_config();
  ModelConfig base = full;
  base.use_part = false;
  base.use_context = false;
  PcnModel a(full, 5), b(base, 5);
  for (const auto& p : b.params().params()) {
    const auto va = a.params().get(p.name).data(), vb = p.value.data();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin(), vb.end())) << p.name;
  }
}
