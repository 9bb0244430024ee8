#pragma once

#include "eegm2/nn.hpp"
#include "eegm2/ops.hpp"

namespace eegm2 {

/// Weights of the dual-domain reconstruction objective.
struct LossConfig {
  double alpha = 1.0;  // temporal L1 weight
  double beta = 1.0;   // spectral magnitude-MSE weight

  void validate() const {
    if (alpha < 0 || beta < 0 || alpha + beta <= 0) {
      throw ConfigError("LossConfig: need alpha, beta >= 0 and alpha + beta > 0");
    }
  }
};

/// Mean absolute error over all elements.
template <class S>
Var<S> l1_temporal(const Var<S>& target, const Var<S>& pred) {
  check_same_shape(target.value(), pred.value(), "l1_temporal");
  return mean_all(abs_op(sub(target, pred)));
}

/// Mean squared difference of rFFT magnitudes over batch, channels and
/// frequency bins (unnormalized transform; the mean divides by bin count).
template <class S>
Var<S> spectral_mse(const Var<S>& target, const Var<S>& pred) {
  check_same_shape(target.value(), pred.value(), "spectral_mse");
  Var<S> d = sub(rfft_mag(target), rfft_mag(pred));
  return mean_all(mul(d, d));
}

/// alpha * L1 + beta * spectral MSE.
template <class S>
Var<S> reconstruction_loss(const Var<S>& target, const Var<S>& pred,
                           const LossConfig& cfg) {
  cfg.validate();
  if (cfg.beta == 0.0) {
    return scale(l1_temporal(target, pred), static_cast<S>(cfg.alpha));
  }
  if (cfg.alpha == 0.0) {
    return scale(spectral_mse(target, pred), static_cast<S>(cfg.beta));
  }
  return add(scale(l1_temporal(target, pred), static_cast<S>(cfg.alpha)),
             scale(spectral_mse(target, pred), static_cast<S>(cfg.beta)));
}

/// Averaged channel-wise MSE: per-channel MSE over batch and time, then an
/// unweighted mean across channels. Plain evaluation metric, no gradients.
template <class S>
double acmse(const Tensor<S>& target, const Tensor<S>& pred) {
  check_same_shape(target, pred, "acmse");
  if (target.rank() != 3) throw ShapeError("acmse: expected [B,C,T]");
  const int64_t B = target.size(0), C = target.size(1), T = target.size(2);
  double total = 0.0;
  for (int64_t c = 0; c < C; ++c) {
    double se = 0.0;
    for (int64_t b = 0; b < B; ++b) {
      const S* xt = target.data() + (b * C + c) * T;
      const S* xp = pred.data() + (b * C + c) * T;
      for (int64_t t = 0; t < T; ++t) {
        const double d = static_cast<double>(xt[t]) - static_cast<double>(xp[t]);
        se += d * d;
      }
    }
    total += se / static_cast<double>(B * T);
  }
  return total / static_cast<double>(C);
}

}  // namespace eegm2
