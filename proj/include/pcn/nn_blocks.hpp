#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <vector>

#include "pcn/geometry.hpp"
#include "pcn/ops.hpp"

namespace pcn {

/// Region of interest in image pixels, stored by center and size.
struct RoI {
  double x_center = 0, y_center = 0, width = 1, height = 1;
  std::size_t image = 0;

  static RoI from_box(const Box& b, std::size_t image = 0) { return {b.cx(), b.cy(), b.width, b.height, image}; }
  Box box() const { return Box::from_center(x_center, y_center, width, height); }
};

// ---------------------------------------------------------------------------
// RoI max pooling
// ---------------------------------------------------------------------------

/// Max-pools each RoI of a [C,H,W] feature map into an m x m grid, giving
/// [R,C,m,m]. The RoI is snapped outward to whole feature cells
/// (floor/ceil) and split into bins with floor/ceil edges; bins that fall
/// outside the map output 0 and pass no gradient.
inline Tensor roi_pool(const Tensor& features, const std::vector<RoI>& rois, std::size_t m, double spatial_scale) {
  detail::require(features.rank() == 3, "roi_pool: features must be [C,H,W]");
  detail::require(m >= 1, "roi_pool: output size must be positive");
  const std::size_t C = features.dim(0), H = features.dim(1), W = features.dim(2), R = rois.size();
  RealVector out(R * C * m * m, Real(0));
  auto argmax = std::make_shared<std::vector<long>>(out.size(), -1);
  auto v = features.data();
  for (std::size_t r = 0; r < R; ++r) {
    const Box b = rois[r].box();
    if (!(rois[r].width > 0 && rois[r].height > 0)) throw std::invalid_argument("roi_pool: RoI must have positive size");
    const long x0 = long(std::floor(b.x_min * spatial_scale));
    const long y0 = long(std::floor(b.y_min * spatial_scale));
    const long x1 = std::max(long(std::ceil(b.x_max() * spatial_scale)), x0 + 1);
    const long y1 = std::max(long(std::ceil(b.y_max() * spatial_scale)), y0 + 1);
    if (x1 <= 0 || y1 <= 0 || x0 >= long(W) || y0 >= long(H)) {
      throw std::invalid_argument("roi_pool: RoI lies entirely outside the feature map");
    }
    const double bin_w = double(x1 - x0) / double(m), bin_h = double(y1 - y0) / double(m);
    for (std::size_t py = 0; py < m; ++py) {
      const long hs = std::clamp(y0 + long(std::floor(double(py) * bin_h)), 0L, long(H));
      const long he = std::clamp(y0 + long(std::ceil(double(py + 1) * bin_h)), 0L, long(H));
      for (std::size_t px = 0; px < m; ++px) {
        const long ws = std::clamp(x0 + long(std::floor(double(px) * bin_w)), 0L, long(W));
        const long we = std::clamp(x0 + long(std::ceil(double(px + 1) * bin_w)), 0L, long(W));
        if (he <= hs || we <= ws) continue;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t o = ((r * C + c) * m + py) * m + px;
          long best = -1;
          Real best_v = 0;
          for (long y = hs; y < he; ++y)
            for (long x = ws; x < we; ++x) {
              const long idx = (long(c) * long(H) + y) * long(W) + x;
              if (best < 0 || v[std::size_t(idx)] > best_v) {
                best = idx;
                best_v = v[std::size_t(idx)];
              }
            }
          out[o] = best_v;
          (*argmax)[o] = best;
        }
      }
    }
  }
  return detail::make_result({R, C, m, m}, std::move(out), {features.node()}, [argmax](detail::Node& self) {
    Real* g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < argmax->size(); ++o)
      if ((*argmax)[o] >= 0) g[(*argmax)[o]] += self.grad[o];
  });
}

/// Single-RoI form: [C,m,m].
inline Tensor roi_pool(const Tensor& features, const RoI& roi, std::size_t m, double spatial_scale) {
  Tensor pooled = roi_pool(features, std::vector<RoI>{roi}, m, spatial_scale);
  return reshape(pooled, {features.dim(0), m, m});
}

// ---------------------------------------------------------------------------
// L2 normalisation with learned per-channel scale
// ---------------------------------------------------------------------------

inline constexpr double kL2NormEps = 1e-10;
inline constexpr double kL2NormGammaInit = 10.0;

/// At every spatial position of [C,h,w] (or [N,C,h,w]) divides the channel
/// vector by sqrt(|x|^2 + eps) and scales channel c by gamma[c].
inline Tensor l2_normalize_scaled(const Tensor& x, const Tensor& gamma, double eps = kL2NormEps) {
  detail::require(x.rank() == 3 || x.rank() == 4, "l2_normalize_scaled: input must be [C,h,w] or [N,C,h,w]");
  if (!(eps > 0)) throw std::invalid_argument("l2_normalize_scaled: eps must be positive");
  const std::size_t off = x.rank() == 4 ? 1 : 0;
  const std::size_t N = off ? x.dim(0) : 1, C = x.dim(off), P = x.dim(off + 1) * x.dim(off + 2);
  detail::require(gamma.rank() == 1 && gamma.dim(0) == C, "l2_normalize_scaled: gamma must be [C]");
  auto xv = x.data();
  auto gv = gamma.data();
  RealVector out(x.size());
  auto inv_norm = std::make_shared<RealVector>(N * P);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      Real s = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const Real e = xv[(n * C + c) * P + p];
        s += e * e;
      }
      const Real inv = Real(1) / std::sqrt(s + Real(eps));
      (*inv_norm)[n * P + p] = inv;
      for (std::size_t c = 0; c < C; ++c) out[(n * C + c) * P + p] = xv[(n * C + c) * P + p] * inv * gv[c];
    }
  return detail::make_result(x.shape(), std::move(out), {x.node(), gamma.node()},
                             [N, C, P, inv_norm](detail::Node& self) {
                               detail::Node& X = *self.inputs[0];
                               detail::Node& G = *self.inputs[1];
                               const auto& xv = X.value;
                               const auto& gv = G.value;
                               const Real* g = self.grad.data();
                               Real* gx = X.requires_grad ? X.grad_buffer() : nullptr;
                               Real* gg = G.requires_grad ? G.grad_buffer() : nullptr;
                               for (std::size_t n = 0; n < N; ++n)
                                 for (std::size_t p = 0; p < P; ++p) {
                                   const Real inv = (*inv_norm)[n * P + p];
                                   Real dot = 0;  // sum_c g_c gamma_c x_c
                                   for (std::size_t c = 0; c < C; ++c) {
                                     const std::size_t i = (n * C + c) * P + p;
                                     dot += g[i] * gv[c] * xv[i];
                                     if (gg) gg[c] += g[i] * xv[i] * inv;
                                   }
                                   if (!gx) continue;
                                   const Real inv3 = inv * inv * inv;
                                   for (std::size_t c = 0; c < C; ++c) {
                                     const std::size_t i = (n * C + c) * P + p;
                                     gx[i] += g[i] * gv[c] * inv - xv[i] * dot * inv3;
                                   }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

/// Gate blocks are laid out [input | forget | cell | output] along the
/// 4*hidden axis.
struct LstmCellParams {
  Tensor input_weights;      // [in, 4*hidden]
  Tensor recurrent_weights;  // [hidden, 4*hidden]
  Tensor bias;               // [4*hidden]

  std::size_t hidden() const { return recurrent_weights.dim(0); }
};

struct LstmState {
  Tensor h;
  Tensor c;
};

/// Gate nonlinearities and state update fused into one node: pre-activations
/// z [B,4*hidden] and c_prev [B,hidden] give [B,2*hidden] holding h then c.
inline Tensor lstm_gates(const Tensor& z, const Tensor& c_prev) {
  const std::size_t B = c_prev.dim(0), hd = c_prev.dim(1);
  detail::require(z.rank() == 2 && z.dim(0) == B && z.dim(1) == 4 * hd, "lstm_gates: z must be [B,4*hidden]");
  auto zv = z.data();
  auto cv = c_prev.data();
  auto sig = [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); };
  auto tanh_ = [](Real v) {
    const Real t = std::exp(-2 * std::abs(v));
    return std::copysign((Real(1) - t) / (Real(1) + t), v);
  };
  // Cached activations per row: i, f, g, o, tanh(c).
  auto act = std::make_shared<RealVector>(B * 5 * hd);
  RealVector out(B * 2 * hd);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < hd; ++j) {
      const Real* zr = &zv[b * 4 * hd];
      const Real i = sig(zr[j]), f = sig(zr[hd + j]), g = tanh_(zr[2 * hd + j]), o = sig(zr[3 * hd + j]);
      const Real c = f * cv[b * hd + j] + i * g;
      const Real tc = tanh_(c);
      Real* a = &(*act)[b * 5 * hd];
      a[j] = i;
      a[hd + j] = f;
      a[2 * hd + j] = g;
      a[3 * hd + j] = o;
      a[4 * hd + j] = tc;
      out[b * 2 * hd + j] = o * tc;
      out[b * 2 * hd + hd + j] = c;
    }
  return detail::make_result({B, 2 * hd}, std::move(out), {z.node(), c_prev.node()}, [B, hd, act](detail::Node& self) {
    detail::Node& Z = *self.inputs[0];
    detail::Node& C = *self.inputs[1];
    Real* gz = Z.requires_grad ? Z.grad_buffer() : nullptr;
    Real* gc = C.requires_grad ? C.grad_buffer() : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < hd; ++j) {
        const Real* a = &(*act)[b * 5 * hd];
        const Real i = a[j], f = a[hd + j], g = a[2 * hd + j], o = a[3 * hd + j], tc = a[4 * hd + j];
        const Real dh = self.grad[b * 2 * hd + j];
        const Real dc = self.grad[b * 2 * hd + hd + j] + dh * o * (Real(1) - tc * tc);
        if (gz) {
          Real* gzr = &gz[b * 4 * hd];
          gzr[j] += dc * g * i * (Real(1) - i);
          gzr[hd + j] += dc * C.value[b * hd + j] * f * (Real(1) - f);
          gzr[2 * hd + j] += dc * i * (Real(1) - g * g);
          gzr[3 * hd + j] += dh * tc * o * (Real(1) - o);
        }
        if (gc) gc[b * hd + j] += dc * f;
      }
  });
}

/// One step for a batch of rows: x [B,in], state [B,hidden] each.
inline LstmState lstm_cell(const Tensor& x, const Tensor& h_prev, const Tensor& c_prev, const LstmCellParams& p) {
  const std::size_t hd = p.hidden();
  detail::require(p.input_weights.rank() == 2 && p.input_weights.dim(1) == 4 * hd &&
                      p.recurrent_weights.dim(1) == 4 * hd && p.bias.rank() == 1 && p.bias.dim(0) == 4 * hd,
                  "lstm_cell: inconsistent parameter shapes");
  detail::require(x.rank() == 2 && x.dim(1) == p.input_weights.dim(0), "lstm_cell: input width mismatch");
  detail::require(h_prev.shape() == Shape{x.dim(0), hd} && c_prev.shape() == h_prev.shape(),
                  "lstm_cell: state shape mismatch");
  Tensor z = add_bias(matmul(x, p.input_weights) + matmul(h_prev, p.recurrent_weights), p.bias, 1);
  Tensor hc = lstm_gates(z, c_prev);
  return {slice(hc, 1, 0, hd), slice(hc, 1, hd, 2 * hd)};
}

/// One scan direction: a recurrent cell plus the projection of each hidden
/// state back to class logits.
struct LstmDirectionParams {
  LstmCellParams cell;
  Tensor proj_weights;  // [hidden, classes]
  Tensor proj_bias;     // [classes]
};

inline constexpr std::size_t kScanDirections = 4;

/// Independent parameters for the four scans.
struct LstmParams {
  std::array<LstmDirectionParams, kScanDirections> directions;
};

enum class ScanOrder : std::size_t { RowMajor = 0, RowMajorReversed = 1, ColumnMajor = 2, ColumnMajorReversed = 3 };

/// [B,K,K,D] grid -> [K*K,B,D] sequence in the given scan order.
inline Tensor grid_to_sequence(const Tensor& grid, ScanOrder order) {
  const std::size_t B = grid.dim(0), K = grid.dim(1), D = grid.dim(3);
  const bool columns = order == ScanOrder::ColumnMajor || order == ScanOrder::ColumnMajorReversed;
  Tensor seq = reshape(permute(grid, columns ? std::vector<std::size_t>{2, 1, 0, 3} : std::vector<std::size_t>{1, 2, 0, 3}),
                       {K * K, B, D});
  const bool reversed = order == ScanOrder::RowMajorReversed || order == ScanOrder::ColumnMajorReversed;
  return reversed ? flip(seq, {0}) : seq;
}

/// Inverse of grid_to_sequence.
inline Tensor sequence_to_grid(const Tensor& seq, ScanOrder order, std::size_t K) {
  const std::size_t B = seq.dim(1), D = seq.dim(2);
  const bool reversed = order == ScanOrder::RowMajorReversed || order == ScanOrder::ColumnMajorReversed;
  Tensor s = reversed ? flip(seq, {0}) : seq;
  const bool columns = order == ScanOrder::ColumnMajor || order == ScanOrder::ColumnMajorReversed;
  return permute(reshape(s, {K, K, B, D}), columns ? std::vector<std::size_t>{2, 1, 0, 3} : std::vector<std::size_t>{2, 0, 1, 3});
}

/// Whole-sequence LSTM over seq [T,B,D] from a zero state as a single graph
/// node; returns the hidden states [T,B,hidden]. Matches repeated lstm_cell.
inline Tensor lstm_sequence(const Tensor& seq, const LstmCellParams& p) {
  detail::require(seq.rank() == 3, "lstm_sequence: seq must be [T,B,D]");
  const std::size_t T = seq.dim(0), B = seq.dim(1), D = seq.dim(2), hd = p.hidden();
  detail::require(p.input_weights.shape() == Shape{D, 4 * hd} && p.recurrent_weights.shape() == Shape{hd, 4 * hd} &&
                      p.bias.shape() == Shape{4 * hd},
                  "lstm_sequence: inconsistent parameter shapes");
  using detail::ConstMatrixMap;
  using detail::MatrixMap;
  using Row = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
  const Eigen::Index b_ = Eigen::Index(B), h_ = Eigen::Index(hd), g_ = Eigen::Index(4 * hd);
  auto sig = [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); };
  auto tanh_ = [](Real v) {
    const Real t = std::exp(-2 * std::abs(v));
    return std::copysign((Real(1) - t) / (Real(1) + t), v);
  };
  // Per step: activations [B,4*hd] as i|f|g|o, then c and tanh(c) [B,hd].
  auto act = std::make_shared<RealVector>(T * B * 4 * hd);
  auto cell = std::make_shared<RealVector>(T * B * hd);
  auto tcell = std::make_shared<RealVector>(T * B * hd);
  RealVector out(T * B * hd);
  ConstMatrixMap wx(p.input_weights.data().data(), Eigen::Index(D), g_);
  ConstMatrixMap wh(p.recurrent_weights.data().data(), h_, g_);
  Eigen::Map<const Row> bias(p.bias.data().data(), g_);
  ConstMatrixMap xs(seq.data().data(), Eigen::Index(T) * b_, Eigen::Index(D));
  detail::RowMatrix z = xs * wx;
  z.rowwise() += bias;
  for (std::size_t t = 0; t < T; ++t) {
    MatrixMap zt(z.data() + t * B * 4 * hd, b_, g_);
    if (t > 0) zt.noalias() += ConstMatrixMap(&out[(t - 1) * B * hd], b_, h_) * wh;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < hd; ++j) {
        const std::size_t zr = (t * B + b) * 4 * hd, sr = (t * B + b) * hd;
        Real* a = &(*act)[zr];
        const Real i = sig(zt(b, j)), f = sig(zt(b, hd + j)), g = tanh_(zt(b, 2 * hd + j)), o = sig(zt(b, 3 * hd + j));
        const Real cp = t > 0 ? (*cell)[sr - B * hd + j] : Real(0);
        const Real c = f * cp + i * g;
        const Real tc = tanh_(c);
        a[j] = i;
        a[hd + j] = f;
        a[2 * hd + j] = g;
        a[3 * hd + j] = o;
        (*cell)[sr + j] = c;
        (*tcell)[sr + j] = tc;
        out[sr + j] = o * tc;
      }
  }
  return detail::make_result(
      {T, B, hd}, std::move(out),
      {seq.node(), p.input_weights.node(), p.recurrent_weights.node(), p.bias.node()},
      [T, B, D, hd, act, cell, tcell](detail::Node& self) {
        detail::Node& X = *self.inputs[0];
        detail::Node& WX = *self.inputs[1];
        detail::Node& WH = *self.inputs[2];
        detail::Node& BI = *self.inputs[3];
        const Eigen::Index b_ = Eigen::Index(B), h_ = Eigen::Index(hd), g_ = Eigen::Index(4 * hd), d_ = Eigen::Index(D);
        detail::RowMatrix dz(Eigen::Index(T) * b_, g_);
        detail::RowMatrix dh_next = detail::RowMatrix::Zero(b_, h_), dc_next = detail::RowMatrix::Zero(b_, h_);
        ConstMatrixMap wh(WH.value.data(), h_, g_);
        for (std::size_t t = T; t-- > 0;) {
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < hd; ++j) {
              const std::size_t zr = (t * B + b) * 4 * hd, sr = (t * B + b) * hd;
              const Real* a = &(*act)[zr];
              const Real i = a[j], f = a[hd + j], g = a[2 * hd + j], o = a[3 * hd + j], tc = (*tcell)[sr + j];
              const Real cp = t > 0 ? (*cell)[sr - B * hd + j] : Real(0);
              const Real dh = self.grad[sr + j] + dh_next(b, j);
              const Real dc = dc_next(b, j) + dh * o * (Real(1) - tc * tc);
              Real* d = &dz(Eigen::Index(t) * b_ + b, 0);
              d[j] = dc * g * i * (Real(1) - i);
              d[hd + j] = dc * cp * f * (Real(1) - f);
              d[2 * hd + j] = dc * i * (Real(1) - g * g);
              d[3 * hd + j] = dh * tc * o * (Real(1) - o);
              dc_next(b, j) = dc * f;
            }
          if (t > 0) dh_next.noalias() = dz.middleRows(Eigen::Index(t) * b_, b_) * wh.transpose();
        }
        if (X.requires_grad) {
          MatrixMap(X.grad_buffer(), Eigen::Index(T) * b_, d_).noalias() +=
              dz * ConstMatrixMap(WX.value.data(), d_, g_).transpose();
        }
        if (WX.requires_grad) {
          MatrixMap(WX.grad_buffer(), d_, g_).noalias() +=
              ConstMatrixMap(X.value.data(), Eigen::Index(T) * b_, d_).transpose() * dz;
        }
        if (WH.requires_grad && T > 1) {
          const Eigen::Index rows = Eigen::Index(T - 1) * b_;
          MatrixMap(WH.grad_buffer(), h_, g_).noalias() +=
              ConstMatrixMap(self.value.data(), rows, h_).transpose() * dz.bottomRows(rows);
        }
        if (BI.requires_grad) {
          Eigen::Map<Row>(BI.grad_buffer(), g_) += dz.colwise().sum();
        }
      });
}

/// Runs one scan over [T,B,D] and returns per-step class probabilities [T,B,classes].
inline Tensor lstm_scan(const Tensor& seq, const LstmDirectionParams& p) {
  const std::size_t T = seq.dim(0), B = seq.dim(1), hd = p.cell.hidden();
  Tensor logits = linear(reshape(lstm_sequence(seq, p.cell), {T * B, hd}), p.proj_weights, p.proj_bias);
  return reshape(softmax(logits), {T, B, p.proj_weights.dim(1)});
}

/// Four-direction recurrent refinement of a batch of part score maps
/// [B,K,K,C+1]. Each scan treats the K*K cells as one sequence; its outputs
/// are softmaxed, put back on the grid, and the four grids averaged.
inline Tensor grid_lstm_refine(const Tensor& maps, const LstmParams& params) {
  detail::require(maps.rank() == 4 && maps.dim(1) == maps.dim(2), "grid_lstm_refine: maps must be [B,K,K,C+1]");
  const std::size_t K = maps.dim(1);
  Tensor total;
  for (std::size_t d = 0; d < kScanDirections; ++d) {
    const auto order = static_cast<ScanOrder>(d);
    Tensor refined = sequence_to_grid(lstm_scan(grid_to_sequence(maps, order), params.directions[d]), order, K);
    total = d == 0 ? refined : total + refined;
  }
  return total * Real(1.0 / kScanDirections);
}

/// K x K x (C+1) grid of class distributions for one RoI.
struct PartScoreMap {
  std::size_t k = 3;
  std::size_t classes = 2;  // C + 1
  std::vector<double> grid;  // row-major [K][K][classes]

  double prob(std::size_t row, std::size_t col, std::size_t cls) const { return grid[(row * k + col) * classes + cls]; }

  /// Every cell on the probability simplex within `tol`.
  bool valid(double tol = 1e-9) const {
    if (grid.size() != k * k * classes) return false;
    for (std::size_t cell = 0; cell < k * k; ++cell) {
      double s = 0;
      for (std::size_t j = 0; j < classes; ++j) {
        const double p = grid[cell * classes + j];
        if (!(p >= -tol && p <= 1 + tol)) return false;
        s += p;
      }
      if (std::abs(s - 1) > tol) return false;
    }
    return true;
  }

  Tensor to_tensor() const {
    return Tensor::from_data({1, k, k, classes}, RealVector(grid.begin(), grid.end()));
  }

  /// Map `index` of a [B,K,K,classes] tensor.
  static PartScoreMap from_tensor(const Tensor& t, std::size_t index = 0) {
    PartScoreMap m;
    m.k = t.dim(1);
    m.classes = t.dim(3);
    const std::size_t len = m.k * m.k * m.classes;
    auto v = t.data();
    m.grid.assign(v.begin() + long(index * len), v.begin() + long((index + 1) * len));
    return m;
  }
};

inline PartScoreMap grid_lstm_refine(const PartScoreMap& map, const LstmParams& params) {
  NoGradGuard no_grad;
  return PartScoreMap::from_tensor(grid_lstm_refine(map.to_tensor(), params));
}

// ---------------------------------------------------------------------------
// Maxout
// ---------------------------------------------------------------------------

/// Element-wise maximum over two or more equally shaped maps. Each output
/// element's gradient goes to the first source holding the maximum.
inline Tensor maxout_merge(const std::vector<Tensor>& maps) {
  detail::require(maps.size() >= 2, "maxout_merge: needs at least two maps");
  for (const auto& m : maps) {
    detail::require(m.shape() == maps[0].shape(), "maxout_merge: shape mismatch " + to_string(m.shape()) + " vs " +
                                                      to_string(maps[0].shape()));
  }
  const std::size_t n = maps[0].size();
  RealVector out(maps[0].data().begin(), maps[0].data().end());
  auto winner = std::make_shared<std::vector<std::size_t>>(n, 0);
  std::vector<detail::NodePtr> inputs{maps[0].node()};
  for (std::size_t k = 1; k < maps.size(); ++k) {
    auto v = maps[k].data();
    for (std::size_t i = 0; i < n; ++i)
      if (v[i] > out[i]) {
        out[i] = v[i];
        (*winner)[i] = k;
      }
    inputs.push_back(maps[k].node());
  }
  return detail::make_result(maps[0].shape(), std::move(out), std::move(inputs), [winner](detail::Node& self) {
    for (std::size_t i = 0; i < winner->size(); ++i) {
      detail::Node& src = *self.inputs[(*winner)[i]];
      if (src.requires_grad) src.grad_buffer()[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Part score head
// ---------------------------------------------------------------------------

/// Layers applied to one tapped RoI feature: scaled L2 norm, 3x3 conv +
/// ReLU, 2x2 max pool down to K x K, 1x1 conv to class logits.
struct PartHeadParams {
  Tensor gamma;     // [C_tap]
  Tensor conv_w;    // [hidden, C_tap, 3, 3]
  Tensor conv_b;    // [hidden]
  Tensor score_w;   // [classes, hidden, 1, 1]
  Tensor score_b;   // [classes]
};

/// roi_feats: one [R,C_tap,2K,2K] tensor per tap. Returns per-cell class
/// probabilities stacked along a leading tap axis: [taps,R,K,K,classes].
inline Tensor part_score_head(const std::vector<Tensor>& roi_feats, const std::vector<PartHeadParams>& heads) {
  if (roi_feats.size() != heads.size() || roi_feats.empty()) {
    throw std::invalid_argument("part_score_head: " + std::to_string(roi_feats.size()) + " taps given for " +
                                std::to_string(heads.size()) + " heads");
  }
  std::vector<Tensor> per_tap;
  for (std::size_t t = 0; t < roi_feats.size(); ++t) {
    const auto& h = heads[t];
    Tensor x = l2_normalize_scaled(roi_feats[t], h.gamma);
    x = relu(conv2d(x, h.conv_w, h.conv_b, {1, 1, 1}));
    x = max_pool2d(x, 2, 2);
    x = conv2d(x, h.score_w, h.score_b);
    per_tap.push_back(softmax(permute(x, {0, 2, 3, 1})));
  }
  return stack(per_tap, 0);
}

/// Mean foreground probability over cells and taps: [taps,R,K,K,C+1] -> [R].
inline Tensor part_branch_aggregate(const Tensor& maps, std::size_t foreground = 1) {
  detail::require(maps.rank() == 5, "part_branch_aggregate: expected [taps,R,K,K,C+1]");
  const std::size_t taps = maps.dim(0), R = maps.dim(1), K = maps.dim(2);
  Tensor fg = select(maps, 4, foreground);  // [taps,R,K,K]
  return reduce(Reduce::Mean, reshape(permute(fg, {1, 0, 2, 3}), {R, taps * K * K}), 1);
}

inline double part_branch_aggregate(const PartScoreMap& map, std::size_t foreground = 1) {
  double s = 0;
  for (std::size_t cell = 0; cell < map.k * map.k; ++cell) s += map.grid[cell * map.classes + foreground];
  return s / double(map.k * map.k);
}

}  // namespace pcn
