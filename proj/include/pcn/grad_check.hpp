#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "pcn/ops.hpp"

namespace pcn {

/// Scalar-valued function of several tensors.
using MultiScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;
using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares reverse-mode gradients of `f` with central differences, one
/// coordinate at a time, over every input. Returns
///   max_i |analytic_i - fd_i| / max(1, |analytic_i|).
inline double grad_check(const MultiScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-5) {
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) {
    leaves.push_back(Tensor::parameter(in.shape(), RealVector(in.data().begin(), in.data().end())));
  }
  Tensor y = f(leaves);
  if (y.size() != 1) throw ShapeError("grad_check: function must return a scalar");
  if (!std::isfinite(double(y.item()))) throw DomainError("grad_check: f is not finite at x");
  y.backward();

  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    const RealVector analytic = leaves[t].grad();
    auto values = leaves[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Real saved = values[i];
      values[i] = saved + Real(h);
      const double up = double(f(leaves).item());
      values[i] = saved - Real(h);
      const double down = double(f(leaves).item());
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) throw DomainError("grad_check: f is not finite near x");
      const double fd = (up - down) / (2.0 * h);
      const double a = double(analytic[i]);
      worst = std::max(worst, std::abs(a - fd) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

inline double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5) {
  return grad_check([&f](const std::vector<Tensor>& in) { return f(in[0]); }, std::vector<Tensor>{x}, h);
}

}  // namespace pcn
