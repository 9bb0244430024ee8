#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "eegm2/graph.hpp"

namespace eegm2 {

/// Compares reverse-mode gradients of a scalar-valued function against
/// central finite differences. Returns the max over checked coordinates of
/// |analytic - numeric| / max(1, |numeric|). `max_coords_per_param` < 0
/// checks every coordinate; otherwise coordinates are sampled with an even
/// deterministic stride.
template <class S>
double grad_check(const std::function<Var<S>()>& f, const std::vector<Var<S>>& params,
                  double eps, int64_t max_coords_per_param = -1) {
  for (auto& p : params) p.node()->grad = Tensor<S>();
  Var<S> y = f();
  if (!y.value().all_finite()) {
    throw NumericError("grad_check: function value is not finite");
  }
  backward(y);
  std::vector<Tensor<S>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<S>& pv = const_cast<Var<S>&>(params[pi]).value();
    const int64_t n = pv.numel();
    int64_t count = (max_coords_per_param < 0) ? n : std::min<int64_t>(n, max_coords_per_param);
    for (int64_t c = 0; c < count; ++c) {
      const int64_t i = (count == n) ? c : (c * n) / count;
      const S orig = pv.data()[i];
      double fp, fm;
      {
        NoGradGuard ng;
        pv.data()[i] = orig + static_cast<S>(eps);
        fp = static_cast<double>(f().value().data()[0]);
        pv.data()[i] = orig - static_cast<S>(eps);
        fm = static_cast<double>(f().value().data()[0]);
        pv.data()[i] = orig;
      }
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("grad_check: function not finite at probe point");
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = static_cast<double>(analytic[pi].data()[i]);
      const double err = std::fabs(a - numeric) / std::fmax(1.0, std::fabs(numeric));
      worst = std::fmax(worst, err);
    }
  }
  for (auto& p : params) p.node()->grad = Tensor<S>();
  return worst;
}

}  // namespace eegm2
