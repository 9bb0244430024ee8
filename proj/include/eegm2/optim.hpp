#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "eegm2/params.hpp"

namespace eegm2 {

struct OptimConfig {
  double init_lr = 2.5e-4;       // optimizer base rate (the schedule governs)
  double weight_decay = 1e-2;
  double max_lr = 5e-4;          // OneCycle peak
  double warmup_frac = 0.30;     // fraction of steps spent rising
  double final_lr_div = 1e4;     // end rate = max_lr / final_lr_div
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 50;
  int batch_size = 64;

  void validate() const {
    if (!(warmup_frac > 0.0) || !(warmup_frac < 1.0)) {
      throw ConfigError("OptimConfig: warmup_frac must lie in (0,1)");
    }
    if (!(max_lr > 0.0)) throw ConfigError("OptimConfig: max_lr must be positive");
  }
};

/// OneCycle schedule: cosine rise from max_lr/10 to max_lr over the first
/// warmup_frac of steps, then cosine decay to max_lr/final_lr_div. Both
/// pieces equal max_lr at the boundary.
inline double onecycle_lr(int64_t step, int64_t total_steps, const OptimConfig& cfg) {
  cfg.validate();
  if (step < 0 || step >= total_steps) {
    throw ConfigError("onecycle_lr: step " + std::to_string(step) +
                      " outside [0," + std::to_string(total_steps) + ")");
  }
  const double start = cfg.max_lr / 10.0;
  const double final_lr = cfg.max_lr / cfg.final_lr_div;
  int64_t warm = std::llround(cfg.warmup_frac * static_cast<double>(total_steps));
  if (warm < 1) warm = 1;
  if (warm > total_steps - 1) warm = total_steps - 1;
  constexpr double kPi = 3.14159265358979323846;
  if (step <= warm) {
    const double phase = static_cast<double>(step) / static_cast<double>(warm);
    return start + (cfg.max_lr - start) * 0.5 * (1.0 - std::cos(kPi * phase));
  }
  const double phase =
      static_cast<double>(step - warm) / static_cast<double>(total_steps - 1 - warm);
  return final_lr + (cfg.max_lr - final_lr) * 0.5 * (1.0 + std::cos(kPi * phase));
}

/// Decoupled-weight-decay Adam with bias-corrected moments. Steps with any
/// non-finite gradient are skipped and counted.
template <class S>
class AdamW {
 public:
  AdamW(ParamSet<S>& params, OptimConfig cfg) : params_(&params), cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (auto& [name, p] : params) {
      m_.push_back(Tensor<S>::zeros(p.value().shape()));
      v_.push_back(Tensor<S>::zeros(p.value().shape()));
    }
  }

  /// Applies one update at rate `lr`. Returns false when the step was
  /// skipped because a gradient was non-finite.
  bool step(double lr) {
    ParamSet<S>& ps = *params_;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const Tensor<S> g = ps.var(i).grad();
      if (!g.all_finite()) {
        ++skipped_steps_;
        return false;
      }
    }
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      Tensor<S>& w = ps.var(i).value();
      const Tensor<S> g = ps.var(i).grad();
      Tensor<S>& m = m_[i];
      Tensor<S>& v = v_[i];
      for (int64_t j = 0; j < w.numel(); ++j) {
        const double gj = static_cast<double>(g.data()[j]);
        const double mj = cfg_.beta1 * static_cast<double>(m.data()[j]) + (1.0 - cfg_.beta1) * gj;
        const double vj = cfg_.beta2 * static_cast<double>(v.data()[j]) + (1.0 - cfg_.beta2) * gj * gj;
        m.data()[j] = static_cast<S>(mj);
        v.data()[j] = static_cast<S>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        const double wj = static_cast<double>(w.data()[j]);
        w.data()[j] = static_cast<S>(wj - lr * mhat / (std::sqrt(vhat) + cfg_.eps) -
                                     lr * cfg_.weight_decay * wj);
      }
    }
    return true;
  }

  int64_t step_count() const { return step_count_; }
  int64_t skipped_steps() const { return skipped_steps_; }

 private:
  ParamSet<S>* params_;
  OptimConfig cfg_;
  std::vector<Tensor<S>> m_;
  std::vector<Tensor<S>> v_;
  int64_t step_count_ = 0;
  int64_t skipped_steps_ = 0;
};

}  // namespace eegm2
