#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "molre/errors.hpp"
#include "molre/tensor.hpp"

namespace molre {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::vector<std::size_t> kink_coords;  // coordinates excluded from the max
};

namespace detail {

// A coordinate is excluded when perturbing it moved some relu/abs/clamp
// input across (or exactly onto) its breakpoint between the +eps and -eps
// evaluations: there central differences measure a subgradient mixture and
// cannot match any single analytic value. Inputs that sit at a breakpoint
// but do not move with the coordinate are kept; both sides agree there.
inline bool traces_cross_kink(const std::vector<double>& plus, const std::vector<double>& minus) {
  if (plus.size() != minus.size()) return true;  // control flow changed
  for (std::size_t p = 0; p < plus.size(); ++p) {
    const double a = plus[p], b = minus[p];
    if (a == b) continue;
    if (std::min(a, b) <= 0.0 && std::max(a, b) >= 0.0) return true;
  }
  return false;
}

}  // namespace detail

/// Checks the analytic gradient of a scalar-valued map against central
/// finite differences at `point`. Returns the max over coordinates of
/// |analytic - numeric| / max(1, |analytic|); coordinates whose perturbation
/// crosses a relu/abs/clamp breakpoint are flagged and excluded.
inline GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& point, double eps) {
  if (!(eps > 0.0)) throw ValueError("grad_check: eps must be positive, got " + std::to_string(eps));

  Tensor x = Tensor::from(point.shape(), point.values());
  Tensor y = f(x);
  if (y.size() != 1) {
    throw ValueError("grad_check: f must be scalar-valued, got shape " +
                     detail::shape_str(y.shape()));
  }
  y.backward();
  const std::vector<double> analytic = x.grad();

  GradCheckResult res;
  for (std::size_t i = 0; i < point.size(); ++i) {
    std::vector<double> trace_plus, trace_minus;
    double f_plus = 0.0, f_minus = 0.0;
    {
      NoGradGuard no_grad;
      Tensor xp = Tensor::from(point.shape(), point.values());
      xp.values()[i] += eps;
      KinkTraceGuard guard(&trace_plus);
      f_plus = f(xp).item();
    }
    {
      NoGradGuard no_grad;
      Tensor xm = Tensor::from(point.shape(), point.values());
      xm.values()[i] -= eps;
      KinkTraceGuard guard(&trace_minus);
      f_minus = f(xm).item();
    }
    if (detail::traces_cross_kink(trace_plus, trace_minus)) {
      res.kink_coords.push_back(i);
      continue;
    }
    const double numeric = (f_plus - f_minus) / (2.0 * eps);
    const double rel = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(analytic[i]));
    res.max_rel_err = std::max(res.max_rel_err, rel);
    ++res.checked;
  }
  return res;
}

/// Finite-difference check of a loss against every coordinate of a set of
/// parameter tensors. `loss_fn` must rebuild the loss graph from the
/// parameters' current values; parameters are perturbed in place and
/// restored bit-exactly.
inline GradCheckResult params_grad_check(const std::function<Tensor()>& loss_fn,
                                         const std::vector<Tensor>& params, double eps) {
  if (!(eps > 0.0)) throw ValueError("params_grad_check: eps must be positive");

  for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
  Tensor loss = loss_fn();
  if (loss.size() != 1) throw ValueError("params_grad_check: loss must be scalar");
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.push_back(p.grad());

  GradCheckResult res;
  std::size_t coord_base = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor param = params[pi];
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double saved = param.values()[i];
      std::vector<double> trace_plus, trace_minus;
      double f_plus = 0.0, f_minus = 0.0;
      {
        NoGradGuard no_grad;
        param.values()[i] = saved + eps;
        KinkTraceGuard guard(&trace_plus);
        f_plus = loss_fn().item();
      }
      {
        NoGradGuard no_grad;
        param.values()[i] = saved - eps;
        KinkTraceGuard guard(&trace_minus);
        f_minus = loss_fn().item();
      }
      param.values()[i] = saved;
      if (detail::traces_cross_kink(trace_plus, trace_minus)) {
        res.kink_coords.push_back(coord_base + i);
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double rel = std::fabs(a - numeric) / std::max(1.0, std::fabs(a));
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked;
    }
    coord_base += param.size();
  }
  return res;
}

}  // namespace molre
