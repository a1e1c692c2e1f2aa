#include <gtest/gtest.h>

#include <random>

#include "pcn/grad_check.hpp"
#include "pcn/nn_blocks.hpp"
#include "test_support.hpp"

using namespace pcn;
using pcn::testing::random_tensor;
using pcn::testing::values;

namespace {

constexpr double kTol = 1e-4;

LstmCellParams random_cell(std::mt19937_64& rng, std::size_t in, std::size_t hd, double scale = 0.5) {
  return {random_tensor(rng, {in, 4 * hd}, -scale, scale), random_tensor(rng, {hd, 4 * hd}, -scale, scale),
          random_tensor(rng, {4 * hd}, -scale, scale)};
}

LstmParams random_lstm(std::mt19937_64& rng, std::size_t classes, std::size_t hd, double scale = 0.5) {
  LstmParams p;
  for (auto& d : p.directions) {
    d.cell = random_cell(rng, classes, hd, scale);
    d.proj_weights = random_tensor(rng, {hd, classes}, -scale, scale);
    d.proj_bias = random_tensor(rng, {classes}, -scale, scale);
  }
  return p;
}

LstmParams zero_lstm(std::size_t classes, std::size_t hd) {
  LstmParams p;
  for (auto& d : p.directions) {
    d.cell = {Tensor::zeros({classes, 4 * hd}), Tensor::zeros({hd, 4 * hd}), Tensor::zeros({4 * hd})};
    d.proj_weights = Tensor::zeros({hd, classes});
    d.proj_bias = Tensor::zeros({classes});
  }
  return p;
}

/// Random per-cell distributions, [B,K,K,C].
Tensor random_maps(std::mt19937_64& rng, std::size_t B, std::size_t K, std::size_t C) {
  NoGradGuard g;
  return softmax(random_tensor(rng, {B, K, K, C}, -3, 3));
}

}  // namespace

TEST(RoiPool, WholeMapExample) {
  RealVector v(16);
  for (int i = 0; i < 16; ++i) v[std::size_t(i)] = Real(i + 1);
  const Tensor x = Tensor::from_data({1, 4, 4}, v);
  const Tensor y = roi_pool(x, RoI::from_box({0, 0, 4, 4}), 2, 1.0);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(values(y), (std::vector<double>{6, 8, 14, 16}));
}

TEST(RoiPool, BinsOutsideTheMapAreZero) {
  RealVector v(16, Real(-5));
  const Tensor x = Tensor::from_data({1, 4, 4}, v);
  const Tensor y = roi_pool(x, RoI::from_box({2, 2, 4, 4}), 2, 1.0);
  EXPECT_EQ(values(y), (std::vector<double>{-5, 0, 0, 0}));
}

TEST(RoiPool, EntirelyOutsideThrows) {
  const Tensor x = Tensor::zeros({1, 4, 4});
  EXPECT_THROW(roi_pool(x, RoI::from_box({10, 10, 3, 3}), 2, 1.0), std::invalid_argument);
  EXPECT_THROW(roi_pool(x, RoI::from_box({-8, 0, 3, 3}), 2, 1.0), std::invalid_argument);
}

TEST(RoiPool, SpatialScale) {
  RealVector v(16);
  for (int i = 0; i < 16; ++i) v[std::size_t(i)] = Real(i + 1);
  const Tensor x = Tensor::from_data({1, 4, 4}, v);
  // A 16x16 image region at stride 4 covers the whole map.
  EXPECT_EQ(values(roi_pool(x, RoI::from_box({0, 0, 16, 16}), 2, 0.25)), (std::vector<double>{6, 8, 14, 16}));
}

TEST(RoiPool, GradCheck) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> pos(0, 10), size(1, 8);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor(rng, {2, 7, 9});
    std::vector<RoI> rois;
    for (int r = 0; r < 3; ++r) rois.push_back(RoI::from_box({pos(rng) * 0.6, pos(rng) * 0.5, size(rng), size(rng)}));
    const Tensor w = random_tensor(rng, {3, 2, 3, 3});
    EXPECT_LT(grad_check([&](const Tensor& f) { return sum(roi_pool(f, rois, 3, 1.0) * w); }, x), kTol);
  }
}

TEST(L2Normalize, UnitNormTimesGamma) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor(rng, {4, 3, 2});
  const Tensor gamma = Tensor::full({4}, Real(kL2NormGammaInit));
  const auto y = values(l2_normalize_scaled(x, gamma));
  for (std::size_t p = 0; p < 6; ++p) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += y[c * 6 + p] * y[c * 6 + p];
    EXPECT_NEAR(std::sqrt(s), 10.0, 1e-8);
  }
}

TEST(L2Normalize, ZeroInputStaysFinite) {
  const auto y = values(l2_normalize_scaled(Tensor::zeros({3, 2, 2}), Tensor::full({3}, 10)));
  for (double v : y) EXPECT_EQ(v, 0.0);
}

TEST(L2Normalize, GradCheck) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor(rng, {2, 3, 2, 2});
    const Tensor gamma = random_tensor(rng, {3}, 0.5, 2);
    const Tensor w = random_tensor(rng, {2, 3, 2, 2});
    EXPECT_LT(grad_check([&](const std::vector<Tensor>& in) { return sum(l2_normalize_scaled(in[0], in[1]) * w); },
                         {x, gamma}),
              kTol);
  }
}

TEST(LstmCell, ZeroParameters) {
  const Tensor c_prev = Tensor::from_data({1, 2}, {0.4, -2});
  const LstmCellParams p{Tensor::zeros({3, 8}), Tensor::zeros({2, 8}), Tensor::zeros({8})};
  const auto s = lstm_cell(Tensor::from_data({1, 3}, {1, 2, 3}), Tensor::zeros({1, 2}), c_prev, p);
  EXPECT_NEAR(values(s.c)[0], 0.2, 1e-15);
  EXPECT_NEAR(values(s.c)[1], -1.0, 1e-15);
  EXPECT_NEAR(values(s.h)[0], 0.5 * std::tanh(0.2), 1e-15);
}

TEST(LstmCell, SaturatedGatesCarryMemory) {
  const std::size_t hd = 2;
  RealVector b(4 * hd, 0);
  for (std::size_t j = 0; j < hd; ++j) {
    b[j] = -30;           // input gate shut
    b[hd + j] = 30;       // forget gate open
    b[3 * hd + j] = 30;   // output gate open
  }
  const LstmCellParams p{Tensor::full({1, 4 * hd}, 1), Tensor::zeros({hd, 4 * hd}), Tensor::from_data({4 * hd}, b)};
  const auto s = lstm_cell(Tensor::from_data({1, 1}, {0.7}), Tensor::zeros({1, hd}), Tensor::from_data({1, hd}, {0.3, -0.6}), p);
  EXPECT_NEAR(values(s.c)[0], 0.3, 1e-12);
  EXPECT_NEAR(values(s.c)[1], -0.6, 1e-12);
  EXPECT_NEAR(values(s.h)[1], std::tanh(-0.6), 1e-12);
}

TEST(LstmCell, GradCheck) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_cell(rng, 3, 2);
    const Tensor x = random_tensor(rng, {2, 3}), h = random_tensor(rng, {2, 2}), c = random_tensor(rng, {2, 2});
    const Tensor wh = random_tensor(rng, {2, 2}), wc = random_tensor(rng, {2, 2});
    EXPECT_LT(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    const auto s = lstm_cell(in[0], in[1], in[2], {in[3], in[4], in[5]});
                    return sum(s.h * wh) + sum(s.c * wc);
                  },
                  {x, h, c, p.input_weights, p.recurrent_weights, p.bias}),
              kTol);
  }
}

TEST(LstmSequence, MatchesCellLoop) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t T = 4, B = 3, D = 2, hd = 3;
    std::vector<Tensor> leaves{random_tensor(rng, {T, B, D}), random_tensor(rng, {D, 4 * hd}, -0.5, 0.5),
                               random_tensor(rng, {hd, 4 * hd}, -0.5, 0.5), random_tensor(rng, {4 * hd}, -0.5, 0.5)};
    const Tensor wo = random_tensor(rng, {T, B, hd});
    auto run = [&](bool fused) {
      std::vector<Tensor> in;
      for (const auto& l : leaves) in.push_back(l.detach().set_requires_grad(true));
      const LstmCellParams p{in[1], in[2], in[3]};
      Tensor hs;
      if (fused) {
        hs = lstm_sequence(in[0], p);
      } else {
        Tensor h = Tensor::zeros({B, hd}), c = Tensor::zeros({B, hd});
        std::vector<Tensor> steps;
        for (std::size_t t = 0; t < T; ++t) {
          const LstmState s = lstm_cell(select(in[0], 0, t), h, c, p);
          h = s.h;
          c = s.c;
          steps.push_back(h);
        }
        hs = stack(steps, 0);
      }
      sum(hs * wo).backward();
      std::vector<RealVector> out{RealVector(hs.data().begin(), hs.data().end())};
      for (const auto& t : in) out.push_back(t.grad());
      return out;
    };
    const auto a = run(true), b = run(false);
    for (std::size_t k = 0; k < a.size(); ++k) {
      ASSERT_EQ(a[k].size(), b[k].size());
      for (std::size_t i = 0; i < a[k].size(); ++i) EXPECT_NEAR(a[k][i], b[k][i], 1e-12) << k << " " << i;
    }
  }
}

TEST(LstmSequence, GradCheck) {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_cell(rng, 2, 3);
    const Tensor x = random_tensor(rng, {5, 2, 2}), wo = random_tensor(rng, {5, 2, 3});
    EXPECT_LT(grad_check([&](const std::vector<Tensor>& in) { return sum(lstm_sequence(in[0], {in[1], in[2], in[3]}) * wo); },
                         {x, p.input_weights, p.recurrent_weights, p.bias}),
              kTol);
  }
}

TEST(GridLstm, ScanOrdersAreInvertible) {
  std::mt19937_64 rng(8);
  const Tensor g = random_tensor(rng, {2, 3, 3, 4});
  for (std::size_t d = 0; d < kScanDirections; ++d) {
    const auto order = static_cast<ScanOrder>(d);
    EXPECT_EQ(values(sequence_to_grid(grid_to_sequence(g, order), order, 3)), values(g));
  }
}

TEST(GridLstm, ScanOrderVisitsExpectedCells) {
  // One channel holding the cell index row*K+col.
  RealVector v(9);
  for (int i = 0; i < 9; ++i) v[std::size_t(i)] = Real(i);
  const Tensor g = Tensor::from_data({1, 3, 3, 1}, v);
  EXPECT_EQ(values(grid_to_sequence(g, ScanOrder::RowMajor)), (std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_EQ(values(grid_to_sequence(g, ScanOrder::RowMajorReversed)), (std::vector<double>{8, 7, 6, 5, 4, 3, 2, 1, 0}));
  EXPECT_EQ(values(grid_to_sequence(g, ScanOrder::ColumnMajor)), (std::vector<double>{0, 3, 6, 1, 4, 7, 2, 5, 8}));
  EXPECT_EQ(values(grid_to_sequence(g, ScanOrder::ColumnMajorReversed)),
            (std::vector<double>{8, 5, 2, 7, 4, 1, 6, 3, 0}));
}

TEST(GridLstm, ZeroParametersGiveUniform) {
  std::mt19937_64 rng(9);
  const auto out = values(grid_lstm_refine(random_maps(rng, 2, 3, 2), zero_lstm(2, 4)));
  for (double v : out) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(GridLstm, SingleCellGrid) {
  std::mt19937_64 rng(10);
  const auto p = random_lstm(rng, 3, 4);
  const Tensor m = random_maps(rng, 1, 1, 3);
  const Tensor out = grid_lstm_refine(m, p);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1, 3}));
  EXPECT_TRUE(PartScoreMap::from_tensor(out).valid(1e-12));
}

TEST(GridLstm, OutputsStayOnSimplex) {
  std::mt19937_64 rng(11);
  const auto p = random_lstm(rng, 2, 8, 2.0);
  for (int i = 0; i < 200; ++i) {
    PartScoreMap m = PartScoreMap::from_tensor(random_maps(rng, 1, 3, 2));
    EXPECT_TRUE(grid_lstm_refine(m, p).valid(1e-9));
  }
}

TEST(GridLstm, DirectionsAreIndependent) {
  std::mt19937_64 rng(12);
  auto p = random_lstm(rng, 2, 3);
  const Tensor m = random_maps(rng, 1, 2, 2);
  const auto base = values(grid_lstm_refine(m, p));
  p.directions[2].proj_bias = Tensor::from_data({2}, {3, -3});
  const auto changed = values(grid_lstm_refine(m, p));
  EXPECT_NE(base, changed);
}

TEST(GridLstm, GradCheck) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = 2, hd = 3;
    const auto p = random_lstm(rng, C, hd);
    const Tensor m = random_maps(rng, 2, 2, C);
    const Tensor w = random_tensor(rng, {2, 2, 2, C});
    std::vector<Tensor> inputs{m};
    for (const auto& d : p.directions) {
      for (const Tensor* t : {&d.cell.input_weights, &d.cell.recurrent_weights, &d.cell.bias, &d.proj_weights, &d.proj_bias}) {
        inputs.push_back(*t);
      }
    }
    EXPECT_LT(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    LstmParams q;
                    for (std::size_t d = 0; d < kScanDirections; ++d) {
                      const std::size_t o = 1 + 5 * d;
                      q.directions[d] = {{in[o], in[o + 1], in[o + 2]}, in[o + 3], in[o + 4]};
                    }
                    return sum(grid_lstm_refine(in[0], q) * w);
                  },
                  inputs),
              kTol);
  }
}

TEST(Maxout, ElementwiseMaximum) {
  const Tensor a = Tensor::from_data({3}, {1, 5, 2}), b = Tensor::from_data({3}, {4, 0, 2}),
               c = Tensor::from_data({3}, {0, 6, 1});
  EXPECT_EQ(values(maxout_merge({a, b, c})), (std::vector<double>{4, 6, 2}));
  EXPECT_THROW(maxout_merge({a}), ShapeError);
  EXPECT_THROW(maxout_merge({a, Tensor::zeros({2})}), ShapeError);
}

TEST(Maxout, TieGradientGoesToFirst) {
  const Tensor a = Tensor::parameter({1}, {2}), b = Tensor::parameter({1}, {2});
  sum(maxout_merge({a, b})).backward();
  EXPECT_EQ(a.grad()[0], 1);
  EXPECT_EQ(b.grad()[0], 0);
}

TEST(Maxout, GradCheck) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> maps;
    for (int k = 0; k < 3; ++k) maps.push_back(random_tensor(rng, {2, 3, 3}));
    const Tensor w = random_tensor(rng, {2, 3, 3});
    EXPECT_LT(grad_check([&](const std::vector<Tensor>& in) { return sum(maxout_merge(in) * w); }, maps), kTol);
  }
}

TEST(PartHead, ShapesAndSimplex) {
  std::mt19937_64 rng(15);
  const std::size_t K = 3, C1 = 2, hid = 4;
  std::vector<PartHeadParams> heads;
  std::vector<Tensor> feats;
  for (std::size_t c : {3u, 5u}) {
    heads.push_back({Tensor::full({c}, 10), random_tensor(rng, {hid, c, 3, 3}), random_tensor(rng, {hid}),
                     random_tensor(rng, {C1, hid, 1, 1}), random_tensor(rng, {C1})});
    feats.push_back(random_tensor(rng, {4, c, 2 * K, 2 * K}));
  }
  const Tensor maps = part_score_head(feats, heads);
  EXPECT_EQ(maps.shape(), (Shape{2, 4, K, K, C1}));
  const Tensor flat = reshape(maps, {8, K, K, C1});
  for (std::size_t i = 0; i < 8; ++i) EXPECT_TRUE(PartScoreMap::from_tensor(flat, i).valid(1e-12));
  EXPECT_THROW(part_score_head({feats[0]}, heads), std::invalid_argument);
}

TEST(PartHead, GradCheck) {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = random_tensor(rng, {2, 3, 4, 4});
    const Tensor gamma = random_tensor(rng, {3}, 0.5, 2), cw = random_tensor(rng, {3, 3, 3, 3}), cb = random_tensor(rng, {3});
    const Tensor sw = random_tensor(rng, {2, 3, 1, 1}), sb = random_tensor(rng, {2});
    const Tensor w = random_tensor(rng, {1, 2, 2, 2, 2});
    EXPECT_LT(grad_check(
                  [&](const std::vector<Tensor>& in) {
                    return sum(part_score_head({in[0]}, {{in[1], in[2], in[3], in[4], in[5]}}) * w);
                  },
                  {f, gamma, cw, cb, sw, sb}),
              kTol);
  }
}

TEST(PartAggregate, MeanForeground) {
  PartScoreMap m;
  m.k = 3;
  m.classes = 2;
  for (int cell = 0; cell < 9; ++cell) {
    const double fg = cell < 4 ? 1.0 : 0.0;
    m.grid.push_back(1 - fg);
    m.grid.push_back(fg);
  }
  EXPECT_NEAR(part_branch_aggregate(m), 4.0 / 9.0, 1e-15);
  EXPECT_NEAR(part_branch_aggregate(reshape(m.to_tensor(), {1, 1, 3, 3, 2})).item(), 4.0 / 9.0, 1e-15);
}

TEST(PartAggregate, AveragesTaps) {
  RealVector v;
  for (int tap = 0; tap < 2; ++tap)
    for (int cell = 0; cell < 4; ++cell) {
      const double fg = tap == 0 ? 0.2 : 0.6;
      v.push_back(Real(1 - fg));
      v.push_back(Real(fg));
    }
  EXPECT_NEAR(part_branch_aggregate(Tensor::from_data({2, 1, 2, 2, 2}, v)).item(), 0.4, 1e-15);
}
