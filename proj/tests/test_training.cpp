#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "pcn/experiment.hpp"
#include "pcn/grad_check.hpp"
#include "test_support.hpp"

using namespace pcn;
using pcn::testing::random_tensor;
using pcn::testing::values;

namespace {

constexpr double kTol = 1e-4;

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.scene.image_height = c.model.image_height = 48;
  c.scene.image_width = c.model.image_width = 64;
  c.scene.height_min = 20;
  c.scene.height_max = 40;
  c.model.anchor_base_height = 16;
  c.model.anchor_scale_stride = 1.3;
  c.model.anchor_count = 3;
  c.model.trunk = {{4, true, 1}, {6, true, 1}, {6, false, 1}, {6, false, 2}};
  c.model.rpn_channels = 4;
  c.model.fc_hidden = 8;
  c.model.context_channels = 4;
  c.model.part_hidden = 4;
  c.model.lstm_hidden = 4;
  c.model.proposals_train = 40;
  c.model.proposals_test = 10;
  c.model.rpn_pre_nms = 100;
  c.model.min_proposal_size = 1;
  c.train.iterations = {6, 4, 4};
  c.train.base_lr = 0.01;
  c.train.rois_per_image = 8;
  c.train.rpn_batch = 16;
  return c;
}

bool same_values(const Tensor& a, const Tensor& b) {
  auto x = a.data(), y = b.data();
  return std::equal(x.begin(), x.end(), y.begin(), y.end());
}

}  // namespace

TEST(CrossEntropy, Examples) {
  const std::vector<double> uniform{0.5, 0.5};
  EXPECT_NEAR(cross_entropy(uniform, 1), std::log(2.0), 1e-15);
  const std::vector<double> p{0.2, 0.8};
  EXPECT_NEAR(cross_entropy(p, 1), -std::log(0.8), 1e-15);
  const std::vector<double> zero{1.0, 0.0};
  EXPECT_NEAR(cross_entropy(zero, 1), -std::log(1e-12), 1e-9);
  EXPECT_THROW(cross_entropy(p, 2), std::out_of_range);
}

TEST(CrossEntropy, TensorMeanSkipsIgnored) {
  const Tensor probs = Tensor::from_data({3, 2}, {0.5, 0.5, 0.2, 0.8, 0.9, 0.1});
  EXPECT_NEAR(cross_entropy(probs, {0, 1, kIgnoreLabel}).item(), (std::log(2.0) - std::log(0.8)) / 2, 1e-15);
}

TEST(CrossEntropy, GradCheck) {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<std::size_t> label(0, 2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> labels(4);
    for (auto& l : labels) l = label(rng);
    const Tensor logits = random_tensor(rng, {4, 3}, -2, 2);
    EXPECT_LT(grad_check([&](const Tensor& x) { return cross_entropy(softmax(x), labels); }, logits), kTol);
  }
}

TEST(SmoothL1, Examples) {
  EXPECT_DOUBLE_EQ(smooth_l1(0.5), 0.125);
  EXPECT_DOUBLE_EQ(smooth_l1(2.0), 1.5);
  EXPECT_DOUBLE_EQ(smooth_l1(-2.0), 1.5);
  EXPECT_DOUBLE_EQ(smooth_l1(1.0), 0.5);
}

TEST(SmoothL1, ContinuouslyDifferentiableAtOne) {
  for (double x : {1.0, -1.0}) {
    const double below = std::nextafter(x, 0.0), above = std::nextafter(x, 2 * x);
    EXPECT_NEAR(smooth_l1(below), 0.5, 1e-12);
    EXPECT_NEAR(smooth_l1(above), 0.5, 1e-12);
    for (double side : {below, above}) {
      Tensor pred = Tensor::parameter({1, 4}, {side, 0, 0, 0});
      smooth_l1_loss(pred, {BoxDelta{}}, {true}, 1).backward();
      EXPECT_NEAR(pred.grad()[0], x, 1e-12);
    }
  }
}

TEST(SmoothL1, MaskedMeanAndGradCheck) {
  const Tensor pred = Tensor::from_data({2, 4}, {0.5, 0, 0, 2, 9, 9, 9, 9});
  EXPECT_NEAR(smooth_l1_loss(pred, {BoxDelta{}, BoxDelta{}}, {true, false}, 2).item(), (0.125 + 1.5) / 2, 1e-15);
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<BoxDelta> targets(3);
    for (auto& t : targets)
      for (std::size_t k = 0; k < 4; ++k) t[k] = u(rng);
    const std::vector<bool> mask{true, trial % 2 == 0, true};
    // Keep residuals away from the |d| = 1 kink.
    Tensor x = random_tensor(rng, {3, 4}, -3, 3);
    auto v = x.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double d = v[i] - targets[i / 4][i % 4];
      if (std::abs(std::abs(d) - 1) < 1e-3) v[i] += 0.01;
    }
    EXPECT_LT(grad_check([&](const Tensor& p) { return smooth_l1_loss(p, targets, mask, 3); }, x), kTol);
  }
}

TEST(TotalLoss, Example) {
  const std::vector<double> l{0.3, 0.1}, a{1, 2};
  EXPECT_NEAR(total_loss(l, a), 0.5, 1e-15);
  const std::vector<double> b{1};
  EXPECT_THROW(total_loss(l, b), std::invalid_argument);
}

TEST(TotalLoss, LinearInWeights) {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> u(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> l(3), a(3), b(3), ab(3);
    for (std::size_t m = 0; m < 3; ++m) {
      l[m] = u(rng);
      a[m] = u(rng);
      b[m] = u(rng);
      ab[m] = a[m] + 2.5 * b[m];
    }
    EXPECT_NEAR(total_loss(l, ab), total_loss(l, a) + 2.5 * total_loss(l, b), 1e-12);
    std::vector<Tensor> lt;
    for (double v : l) lt.push_back(Tensor::scalar(v));
    EXPECT_NEAR(total_loss(lt, ab).item(), total_loss(l, ab), 1e-12);
  }
}

TEST(TotalLoss, WholeModelGradCheck) {
  const ExperimentConfig cfg = tiny_experiment();
  const Dataset data = generate_dataset(cfg.scene, 2, 17);
  PcnModel model(cfg.model, 5);
  // Moves every parameter off its initial value.
  std::mt19937_64 jitter_rng(6);
  std::uniform_real_distribution<double> jitter(-0.01, 0.01);
  for (auto& p : model.params().params())
    for (auto& v : p.value.mutable_data()) v += Real(jitter(jitter_rng));
  for (int stage = 1; stage <= 3; ++stage) {
    // Proposal selection is held fixed across evaluations.
    std::vector<std::vector<RoI>> proposals(data.images.size());
    auto objective = [&] {
      Tensor total = Tensor::scalar(0);
      for (std::size_t i = 0; i < data.images.size(); ++i) {
        std::vector<Annotation> gts;
        for (const auto& a : data.annotations)
          if (a.image_id == data.images[i].id) gts.push_back(a);
        std::mt19937_64 rng(100 + i);
        total = total + stage_objective(stage_losses(model, stage, data.images[i].to_tensor(), gts, cfg.train, rng, &proposals[i]),
                                       cfg.train);
      }
      return total;
    };
    model.params().zero_grad();
    objective().backward();
    const auto trainable = stage_trainable(stage);
    // Where the central difference fails, the gradient must match one of the
    // one-sided slopes (a ReLU or max-pool kink within h).
    double worst = 0;
    std::size_t checked = 0, kinks = 0;
    NoGradGuard no_grad;
    const double h = 1e-5, f0 = objective().item();
    for (auto& p : model.params().params()) {
      if (!trainable(p)) continue;
      const RealVector analytic = p.value.grad();
      auto v = p.value.mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const Real saved = v[i];
        v[i] = saved + Real(h);
        const double up = objective().item();
        v[i] = saved - Real(h);
        const double down = objective().item();
        v[i] = saved;
        const double a = analytic[i], scale = std::max(1.0, std::abs(a));
        double err = std::abs(a - (up - down) / (2 * h)) / scale;
        if (err >= kTol) {
          ++kinks;
          err = std::min(std::abs(a - (up - f0) / h), std::abs(a - (f0 - down) / h)) / scale;
        }
        worst = std::max(worst, err);
        ++checked;
      }
    }
    EXPECT_GT(checked, 0u) << "stage " << stage;
    EXPECT_LT(worst, kTol) << "stage " << stage << " over " << checked << " coordinates";
    EXPECT_LE(kinks * 100, checked) << "stage " << stage;
    model.set_completed_stage(stage);
  }
}

TEST(Sgd, PlainStepSubtractsGradient) {
  ParamStore store;
  store.add("w", ParamGroup::Stage1, {2}, {1.0, -1.0});
  store.add("f", ParamGroup::Stage2, {1}, {3.0});
  Tensor& w = store.get("w");
  Tensor& frozen = store.get("f");
  sum(w * Tensor::from_data({2}, {0.5, 2.0}) + frozen).backward();
  sgd_step(store, 1.0, 0.0, 0.0, stage_trainable(1));
  EXPECT_EQ(values(w), (std::vector<double>{0.5, -3.0}));
  EXPECT_EQ(values(frozen), std::vector<double>{3.0});
}

TEST(Sgd, MomentumAndDecay) {
  ParamStore store;
  Tensor& w = store.add("w", ParamGroup::Stage1, {1}, {2.0});
  for (int i = 0; i < 2; ++i) {
    store.zero_grad();
    (w * Real(1)).backward();
    sgd_step(store, 0.1, 0.9, 0.5, stage_trainable(1));
  }
  // v1 = 0.1 * (1 + 1) = 0.2, w1 = 1.8; v2 = 0.18 + 0.1 * (1 + 0.9) = 0.37, w2 = 1.43.
  EXPECT_NEAR(values(w)[0], 1.43, 1e-12);
}

TEST(Sgd, ClipGradNorm) {
  ParamStore store;
  Tensor& w = store.add("w", ParamGroup::Stage1, {2}, {0, 0});
  sum(w * Tensor::from_data({2}, {3, 4})).backward();
  EXPECT_NEAR(clip_grad_norm(store, 1, stage_trainable(1)), 5, 1e-12);
  EXPECT_NEAR(w.grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(w.grad()[1], 0.8, 1e-12);
}

TEST(TrainConfig, LearningRateSchedule) {
  TrainConfig c;
  c.iterations = {10, 10, 10};
  c.base_lr = 0.01;
  EXPECT_EQ(c.lr_at(1, 7), 0.01);
  EXPECT_NEAR(c.lr_at(1, 8), 0.001, 1e-18);
}

TEST(Sampling, RoiBatchRespectsFractions) {
  std::mt19937_64 rng(34);
  std::vector<Annotation> gts(1);
  gts[0].box = {20, 20, 10, 24};
  std::vector<Box> cands;
  for (int i = 0; i < 40; ++i) cands.push_back({20 + 0.1 * i, 20, 10, 24});
  for (int i = 0; i < 40; ++i) cands.push_back({60 + double(i), 50, 10, 24});
  TrainConfig c;
  c.rois_per_image = 16;
  c.fg_fraction = 0.25;
  const RoiBatch b = sample_rois(cands, gts, c, rng);
  EXPECT_EQ(b.size(), 16u);
  EXPECT_EQ(b.num_positive(), 4u);
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double o = iou(b.rois[i].box(), gts[0].box);
    if (b.positive[i]) EXPECT_GE(o, 0.5);
    else EXPECT_LT(o, 0.3);
  }
}

TEST(Sampling, PartCellLabelsFollowVisibility) {
  std::vector<Annotation> gts(1);
  gts[0].box = {0, 0, 30, 30};
  gts[0].visibility = {true, true, true, true, true, true, false, false, true};
  RoiBatch b;
  b.rois = {RoI::from_box(gts[0].box), RoI::from_box({0, 0, 30, 30})};
  b.positive = {true, false};
  b.matched = {0, -1};
  b.labels = {1, 0};
  const auto l = part_cell_labels(b, gts, 3);
  EXPECT_EQ(std::vector<std::size_t>(l.begin(), l.begin() + 9), (std::vector<std::size_t>{1, 1, 1, 1, 1, 1, 0, 0, 1}));
  for (std::size_t i = 9; i < 18; ++i) EXPECT_EQ(l[i], 0u);
}

TEST(Stages, PrerequisiteNamesMissingStage) {
  const ExperimentConfig c = tiny_experiment();
  const Dataset d = generate_dataset(c.scene, 2, 1);
  PcnModel m(c.model, 1);
  try {
    run_stage(2, m, d, c.train);
    FAIL() << "expected StagePrerequisiteError";
  } catch (const StagePrerequisiteError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 1"), std::string::npos);
  }
}

TEST(Stages, FreezingByParameterGroup) {
  const ExperimentConfig c = tiny_experiment();
  const Dataset d = generate_dataset(c.scene, 4, 2);
  PcnModel m(c.model, 3);
  run_stage(1, m, d, c.train);
  const auto after1 = m.to_records();
  run_stage(2, m, d, c.train);
  const auto after2 = m.to_records();
  run_stage(3, m, d, c.train);
  const auto after3 = m.to_records();
  std::size_t changed2 = 0, changed3_part = 0, changed3_lstm = 0;
  for (std::size_t i = 0; i < after1.size(); ++i) {
    const std::string& n = after1[i].name;
    if (n.rfind("meta.", 0) == 0) continue;
    const ParamGroup g = m.params().group(n);
    if (g == ParamGroup::Stage1) {
      EXPECT_EQ(after1[i].values, after2[i].values) << n;
      EXPECT_EQ(after2[i].values, after3[i].values) << n;
    } else if (g == ParamGroup::Stage2) {
      changed2 += after1[i].values != after2[i].values;
      changed3_part += after2[i].values != after3[i].values;
    } else {
      EXPECT_EQ(after1[i].values, after2[i].values) << n;
      changed3_lstm += after2[i].values != after3[i].values;
    }
  }
  EXPECT_GT(changed2, 0u);
  EXPECT_GT(changed3_part, 0u);
  EXPECT_GT(changed3_lstm, 0u);
}

TEST(Stages, LossTraceIsDeterministic) {
  const ExperimentConfig c = tiny_experiment();
  const Dataset d = generate_dataset(c.scene, 3, 4);
  auto trace = [&] {
    PcnModel m(c.model, 5);
    const auto rows = run_stage(1, m, d, c.train);
    const auto path = std::filesystem::temp_directory_path() / "pcn_loss_trace.csv";
    write_loss_csv(path.string(), rows);
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    std::filesystem::remove(path);
    return ss.str();
  };
  const std::string a = trace();
  EXPECT_EQ(a, trace());
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 7);
}

TEST(Stages, StageOneIgnoresPartBranch) {
  // The ablation schedule reuses stage-1 checkpoints across variants that
  // differ only in the part branch.
  const ExperimentConfig c = tiny_experiment();
  const Dataset d = generate_dataset(c.scene, 3, 6);
  const auto full = ablation_variant(c.model, "full").model;
  const auto maxout = ablation_variant(c.model, "context_maxout").model;
  PcnModel a(full, 9), b(maxout, 9);
  run_stage(1, a, d, c.train);
  run_stage(1, b, d, c.train);
  for (const auto& p : b.params().params()) EXPECT_TRUE(same_values(p.value, a.params().get(p.name))) << p.name;
}

TEST(Ablation, VariantList) {
  const ModelConfig m;
  std::vector<std::string> names;
  for (const auto& v : ablation_variants(m)) names.push_back(v.name);
  EXPECT_EQ(names, (std::vector<std::string>{"base", "part_avg", "part+lstm", "context_s1.5", "context_s1.8",
                                             "context_s2.1", "context_maxout", "full"}));
  const auto s18 = ablation_variant(m, "context_s1.8").model;
  EXPECT_EQ(s18.context_scales, std::vector<double>{1.8});
  EXPECT_FALSE(s18.use_part);
  EXPECT_FALSE(ablation_variant(m, "part_avg").model.use_lstm);
  EXPECT_THROW(ablation_variant(m, "nope"), std::invalid_argument);
}

TEST(Ablation, MissingCheckpointIsAnError) {
  const auto dir = std::filesystem::temp_directory_path() / "pcn_no_such_dir";
  EXPECT_THROW(load_variant(ablation_variant(ModelConfig{}, "base"), dir), std::runtime_error);
}
