#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>
#include <vector>

#include "eegm2/nn.hpp"
#include "eegm2/ops.hpp"
#include "eegm2/optim.hpp"
#include "eegm2/rng.hpp"

namespace eegm2 {

// ---------------------------------------------------------------------------
// Nine-statistic temporal summary: [B,C,T'] -> [B,C,9] with
// [min, max, mean, std, Q0.05, Q0.25, Q0.5, Q0.75, Q0.95].
// Population std; quantiles interpolate between order statistics at p*(n-1).
// ---------------------------------------------------------------------------

inline constexpr int kReprStats = 9;
inline constexpr double kReprQuantiles[5] = {0.05, 0.25, 0.5, 0.75, 0.95};

template <class S>
Var<S> extract_stats(const Var<S>& f) {
  const Shape& fs = f.shape();
  if (fs.size() != 3) throw ShapeError("extract_stats: expected [B,C,T']");
  const int64_t T = fs[2];
  if (T < 1) throw ShapeError("extract_stats: empty temporal axis");
  const int64_t rows = fs[0] * fs[1];
  Tensor<S> out({fs[0], fs[1], kReprStats});

  // Saved for the pull-back: per row the sort permutation, argmin/argmax
  // (first occurrence), mean and std.
  auto order = std::make_shared<std::vector<int64_t>>(static_cast<std::size_t>(rows * T));
  auto extrema = std::make_shared<std::vector<int64_t>>(static_cast<std::size_t>(rows * 2));
  auto moments = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows * 2));

  const S* px = f.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * T;
    int64_t* ord = order->data() + r * T;
    std::iota(ord, ord + T, int64_t{0});
    std::stable_sort(ord, ord + T, [xr](int64_t i, int64_t j) { return xr[i] < xr[j]; });

    int64_t amin = 0, amax = 0;
    S mean = 0;
    for (int64_t t = 0; t < T; ++t) {
      if (xr[t] < xr[amin]) amin = t;
      if (xr[t] > xr[amax]) amax = t;
      mean += xr[t];
    }
    mean /= static_cast<S>(T);
    S var = 0;
    for (int64_t t = 0; t < T; ++t) {
      const S d = xr[t] - mean;
      var += d * d;
    }
    var /= static_cast<S>(T);
    const S sd = std::sqrt(var);
    (*extrema)[static_cast<std::size_t>(r * 2)] = amin;
    (*extrema)[static_cast<std::size_t>(r * 2 + 1)] = amax;
    (*moments)[static_cast<std::size_t>(r * 2)] = mean;
    (*moments)[static_cast<std::size_t>(r * 2 + 1)] = sd;

    S* orow = out.data() + r * kReprStats;
    orow[0] = xr[amin];
    orow[1] = xr[amax];
    orow[2] = mean;
    orow[3] = sd;
    for (int q = 0; q < 5; ++q) {
      const double pos = kReprQuantiles[q] * static_cast<double>(T - 1);
      int64_t lo = static_cast<int64_t>(pos);
      if (lo >= T - 1) lo = T - 1;
      const int64_t hi = std::min<int64_t>(lo + 1, T - 1);
      const double w = pos - static_cast<double>(lo);
      orow[4 + q] = static_cast<S>((1.0 - w) * static_cast<double>(xr[ord[lo]]) +
                                   w * static_cast<double>(xr[ord[hi]]));
    }
  }
  auto fn = f.node();
  Tensor<S> fv = f.value();
  return detail::make_op_node<S>(std::move(out), {fn},
                                 [fn, fv, order, extrema, moments, rows, T](Node<S>& self) {
    Tensor<S> gx = Tensor<S>::zeros(fv.shape());
    const S* g = self.grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      const S* gr = g + r * kReprStats;
      S* xr = gx.data() + r * T;
      const S* vr = fv.data() + r * T;
      const int64_t* ord = order->data() + r * T;
      xr[(*extrema)[static_cast<std::size_t>(r * 2)]] += gr[0];
      xr[(*extrema)[static_cast<std::size_t>(r * 2 + 1)]] += gr[1];
      const S mean = (*moments)[static_cast<std::size_t>(r * 2)];
      const S sd = (*moments)[static_cast<std::size_t>(r * 2 + 1)];
      const S gmean = gr[2] / static_cast<S>(T);
      for (int64_t t = 0; t < T; ++t) xr[t] += gmean;
      if (sd > S(0)) {
        const S gsd = gr[3] / (static_cast<S>(T) * sd);
        for (int64_t t = 0; t < T; ++t) xr[t] += gsd * (vr[t] - mean);
      }
      for (int q = 0; q < 5; ++q) {
        const double pos = kReprQuantiles[q] * static_cast<double>(T - 1);
        int64_t lo = static_cast<int64_t>(pos);
        if (lo >= T - 1) lo = T - 1;
        const int64_t hi = std::min<int64_t>(lo + 1, T - 1);
        const double w = pos - static_cast<double>(lo);
        xr[ord[lo]] += gr[4 + q] * static_cast<S>(1.0 - w);
        if (hi != lo) xr[ord[hi]] += gr[4 + q] * static_cast<S>(w);
      }
    }
    fn->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

/// Unweighted mean of per-class recall over the classes present in y_true.
inline double balanced_accuracy(const std::vector<int>& y_true,
                                const std::vector<int>& y_pred) {
  if (y_true.empty() || y_true.size() != y_pred.size()) {
    throw ConfigError("balanced_accuracy: label vectors empty or mismatched");
  }
  const int k = 1 + *std::max_element(y_true.begin(), y_true.end());
  std::vector<int64_t> total(static_cast<std::size_t>(k), 0);
  std::vector<int64_t> hit(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const int c = y_true[i];
    if (c < 0) throw ConfigError("balanced_accuracy: negative label");
    ++total[static_cast<std::size_t>(c)];
    if (y_pred[i] == c) ++hit[static_cast<std::size_t>(c)];
  }
  double acc = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    if (total[static_cast<std::size_t>(c)] == 0) continue;
    acc += static_cast<double>(hit[static_cast<std::size_t>(c)]) /
           static_cast<double>(total[static_cast<std::size_t>(c)]);
    ++present;
  }
  if (present < 1) throw ConfigError("balanced_accuracy: no class present");
  return acc / static_cast<double>(present);
}

/// Probability that a random positive outscores a random negative; ties
/// count one half (Mann-Whitney ranks).
inline double auroc(const std::vector<int>& y_true, const std::vector<double>& scores) {
  if (y_true.empty() || y_true.size() != scores.size()) {
    throw ConfigError("auroc: inputs empty or mismatched");
  }
  const std::size_t n = y_true.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(),
            [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based average rank
    for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = avg;
    i = j + 1;
  }
  double rank_pos = 0.0;
  int64_t n_pos = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (y_true[t] == 1) {
      rank_pos += rank[t];
      ++n_pos;
    } else if (y_true[t] != 0) {
      throw ConfigError("auroc: labels must be binary 0/1");
    }
  }
  const int64_t n_neg = static_cast<int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw ConfigError("auroc: both classes must be present");
  }
  const double u = rank_pos - 0.5 * static_cast<double>(n_pos) *
                                  static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// ---------------------------------------------------------------------------
// Linear probe: one-vs-rest L2-regularized logistic regression trained by
// full-batch gradient descent on train-standardized features.
// ---------------------------------------------------------------------------

class LogisticProbe {
 public:
  struct Config {
    double l2 = 1e-3;
    int max_iters = 500;
    double grad_tol = 1e-6;
  };

  LogisticProbe() = default;
  explicit LogisticProbe(Config cfg) : cfg_(cfg) {}

  void fit(const std::vector<std::vector<double>>& x, const std::vector<int>& y) {
    if (x.empty() || x.size() != y.size()) {
      throw ConfigError("linear_probe: features/labels empty or mismatched");
    }
    n_classes_ = 1 + *std::max_element(y.begin(), y.end());
    std::set<int> distinct(y.begin(), y.end());
    if (distinct.size() < 2) {
      throw ConfigError("linear_probe: training set has a single class");
    }
    dim_ = x[0].size();
    standardize_fit(x);
    auto xs = standardize(x);
    // Binary reduces to a single model scoring class 1.
    const int models = n_classes_ == 2 ? 1 : n_classes_;
    weights_.assign(static_cast<std::size_t>(models),
                    std::vector<double>(dim_ + 1, 0.0));
    for (int m = 0; m < models; ++m) {
      const int target = n_classes_ == 2 ? 1 : m;
      fit_binary(xs, y, target, weights_[static_cast<std::size_t>(m)]);
    }
  }

  /// Per-class scores; for binary a single column with p(class 1).
  std::vector<std::vector<double>> scores(const std::vector<std::vector<double>>& x) const {
    auto xs = standardize(x);
    std::vector<std::vector<double>> out(xs.size(),
                                         std::vector<double>(weights_.size(), 0.0));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      for (std::size_t m = 0; m < weights_.size(); ++m) {
        out[i][m] = sigmoid(dot(weights_[m], xs[i]));
      }
    }
    return out;
  }

  std::vector<int> predict(const std::vector<std::vector<double>>& x) const {
    auto sc = scores(x);
    std::vector<int> pred(sc.size(), 0);
    for (std::size_t i = 0; i < sc.size(); ++i) {
      if (n_classes_ == 2) {
        pred[i] = sc[i][0] > 0.5 ? 1 : 0;
      } else {
        pred[i] = static_cast<int>(std::max_element(sc[i].begin(), sc[i].end()) -
                                   sc[i].begin());
      }
    }
    return pred;
  }

  /// Norm of the regularized objective gradient at the current weights.
  double grad_norm(const std::vector<std::vector<double>>& x,
                   const std::vector<int>& y) const {
    auto xs = standardize(x);
    double worst = 0.0;
    for (std::size_t m = 0; m < weights_.size(); ++m) {
      const int target = n_classes_ == 2 ? 1 : static_cast<int>(m);
      std::vector<double> g(dim_ + 1, 0.0);
      objective_grad(xs, y, target, weights_[m], g);
      double norm = 0;
      for (double v : g) norm += v * v;
      worst = std::max(worst, std::sqrt(norm));
    }
    return worst;
  }

  int n_classes() const { return n_classes_; }

 private:
  static double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

  static double dot(const std::vector<double>& w, const std::vector<double>& x) {
    double z = w.back();  // bias in the last slot
    for (std::size_t i = 0; i < x.size(); ++i) z += w[i] * x[i];
    return z;
  }

  void standardize_fit(const std::vector<std::vector<double>>& x) {
    mean_.assign(dim_, 0.0);
    sd_.assign(dim_, 0.0);
    for (const auto& row : x)
      for (std::size_t j = 0; j < dim_; ++j) mean_[j] += row[j];
    for (std::size_t j = 0; j < dim_; ++j) mean_[j] /= static_cast<double>(x.size());
    for (const auto& row : x)
      for (std::size_t j = 0; j < dim_; ++j) {
        const double d = row[j] - mean_[j];
        sd_[j] += d * d;
      }
    for (std::size_t j = 0; j < dim_; ++j) {
      sd_[j] = std::sqrt(sd_[j] / static_cast<double>(x.size()));
      if (sd_[j] < 1e-12) sd_[j] = 1.0;
    }
  }

  std::vector<std::vector<double>> standardize(
      const std::vector<std::vector<double>>& x) const {
    std::vector<std::vector<double>> out(x.size(), std::vector<double>(dim_));
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < dim_; ++j) out[i][j] = (x[i][j] - mean_[j]) / sd_[j];
    return out;
  }

  double objective(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                   int target, const std::vector<double>& w) const {
    double loss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double z = dot(w, x[i]);
      const double t = y[i] == target ? 1.0 : 0.0;
      // log(1+exp(-|z|)) form keeps the CE numerically stable
      loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
    }
    loss /= static_cast<double>(x.size());
    for (std::size_t j = 0; j < dim_; ++j) loss += 0.5 * cfg_.l2 * w[j] * w[j];
    return loss;
  }

  void objective_grad(const std::vector<std::vector<double>>& x,
                      const std::vector<int>& y, int target,
                      const std::vector<double>& w, std::vector<double>& g) const {
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double err = sigmoid(dot(w, x[i])) - (y[i] == target ? 1.0 : 0.0);
      for (std::size_t j = 0; j < dim_; ++j) g[j] += err * x[i][j];
      g[dim_] += err;
    }
    const double inv_n = 1.0 / static_cast<double>(x.size());
    for (auto& v : g) v *= inv_n;
    for (std::size_t j = 0; j < dim_; ++j) g[j] += cfg_.l2 * w[j];
  }

  void fit_binary(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                  int target, std::vector<double>& w) {
    std::vector<double> g(dim_ + 1, 0.0);
    double lr = 1.0;
    double prev = objective(x, y, target, w);
    for (int it = 0; it < cfg_.max_iters; ++it) {
      objective_grad(x, y, target, w, g);
      double norm = 0;
      for (double v : g) norm += v * v;
      if (std::sqrt(norm) < cfg_.grad_tol) break;
      std::vector<double> cand = w;
      for (;;) {
        for (std::size_t j = 0; j <= dim_; ++j) cand[j] = w[j] - lr * g[j];
        const double cur = objective(x, y, target, cand);
        if (cur <= prev || lr < 1e-12) {
          w = cand;
          prev = cur;
          lr *= 1.1;  // gentle growth after an accepted step
          break;
        }
        lr *= 0.5;
      }
    }
  }

  Config cfg_;
  std::size_t dim_ = 0;
  int n_classes_ = 0;
  std::vector<double> mean_, sd_;
  std::vector<std::vector<double>> weights_;
};

// ---------------------------------------------------------------------------
// Non-linear probe: two-hidden-layer MLP on flattened statistics. The
// encoder stays frozen; only these weights train.
// ---------------------------------------------------------------------------

template <class S>
class MlpProbe {
 public:
  struct Config {
    int64_t hidden1 = 128;
    int64_t hidden2 = 64;
    int epochs = 150;
    double lr = 3e-3;
    double weight_decay = 1e-2;
  };

  MlpProbe(int64_t in_dim, int64_t n_classes, uint64_t seed, Config cfg = Config())
      : cfg_(cfg), in_dim_(in_dim), n_classes_(n_classes) {
    Rng rng(seed);
    w1_ = params_.add("mlp.w1", init::uniform_fan_in<S>(rng, {cfg.hidden1, in_dim}, in_dim));
    b1_ = params_.add("mlp.b1", init::zeros<S>({cfg.hidden1}));
    w2_ = params_.add("mlp.w2", init::uniform_fan_in<S>(rng, {cfg.hidden2, cfg.hidden1}, cfg.hidden1));
    b2_ = params_.add("mlp.b2", init::zeros<S>({cfg.hidden2}));
    w3_ = params_.add("mlp.w3", init::uniform_fan_in<S>(rng, {n_classes, cfg.hidden2}, cfg.hidden2));
    b3_ = params_.add("mlp.b3", init::zeros<S>({n_classes}));
  }

  ParamSet<S>& params() { return params_; }
  int64_t param_count() const { return params_.count_scalars(); }

  /// x: [n, in_dim] standardized features, y: labels.
  void fit(const Tensor<S>& x, const std::vector<int>& y) {
    if (x.rank() != 2 || x.size(1) != in_dim_) {
      throw ShapeError("mlp_probe: expected [n," + std::to_string(in_dim_) + "]");
    }
    std::set<int> distinct(y.begin(), y.end());
    if (distinct.size() < 2) throw ConfigError("mlp_probe: training set has a single class");
    OptimConfig oc;
    oc.weight_decay = cfg_.weight_decay;
    AdamW<S> opt(params_, oc);
    Var<S> xin = Var<S>::constant(x);
    for (int e = 0; e < cfg_.epochs; ++e) {
      params_.zero_grad();
      Var<S> loss = cross_entropy_logits(forward(xin), y);
      backward(loss);
      opt.step(cfg_.lr);
    }
  }

  Var<S> forward(const Var<S>& x) const {
    Var<S> h = silu(linear(x, w1_, b1_));
    h = silu(linear(h, w2_, b2_));
    return linear(h, w3_, b3_);
  }

  std::vector<int> predict(const Tensor<S>& x) const {
    NoGradGuard ng;
    Var<S> logits = forward(Var<S>::constant(x));
    const int64_t n = x.size(0);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      const S* row = logits.value().data() + i * n_classes_;
      out[static_cast<std::size_t>(i)] =
          static_cast<int>(std::max_element(row, row + n_classes_) - row);
    }
    return out;
  }

  /// Positive-class probability for binary problems.
  std::vector<double> scores_binary(const Tensor<S>& x) const {
    if (n_classes_ != 2) throw ConfigError("mlp_probe: binary scores need 2 classes");
    NoGradGuard ng;
    Var<S> logits = forward(Var<S>::constant(x));
    const int64_t n = x.size(0);
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      const double z0 = static_cast<double>(logits.value().data()[i * 2]);
      const double z1 = static_cast<double>(logits.value().data()[i * 2 + 1]);
      out[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(z0 - z1));
    }
    return out;
  }

 private:
  Config cfg_;
  int64_t in_dim_;
  int64_t n_classes_;
  ParamSet<S> params_;
  Var<S> w1_, b1_, w2_, b2_, w3_, b3_;
};

/// Writes features as a flat comma-separated table, one row per sample:
/// id, label, then the flattened statistics. Feeds external analysis tools.
template <class S>
void export_features_csv(std::ostream& os, const Tensor<S>& features,
                         const std::vector<int>& labels,
                         const std::vector<std::string>& ids) {
  if (features.rank() != 2) throw ShapeError("export_features_csv: expected [n, d]");
  const int64_t n = features.size(0), d = features.size(1);
  if (static_cast<int64_t>(labels.size()) != n ||
      static_cast<int64_t>(ids.size()) != n) {
    throw ConfigError("export_features_csv: ids/labels size mismatch");
  }
  os << "id,label";
  for (int64_t j = 0; j < d; ++j) os << ",f" << j;
  os << "\n";
  for (int64_t i = 0; i < n; ++i) {
    os << ids[static_cast<std::size_t>(i)] << "," << labels[static_cast<std::size_t>(i)];
    for (int64_t j = 0; j < d; ++j) os << "," << features.data()[i * d + j];
    os << "\n";
  }
}

/// Standardizes rows of a [n, d] feature matrix by train-split statistics.
template <class S>
struct FeatureScaler {
  std::vector<double> mean, sd;

  void fit(const Tensor<S>& x) {
    const int64_t n = x.size(0), d = x.size(1);
    mean.assign(static_cast<std::size_t>(d), 0.0);
    sd.assign(static_cast<std::size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j)
        mean[static_cast<std::size_t>(j)] += static_cast<double>(x.data()[i * d + j]);
    for (auto& v : mean) v /= static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) {
        const double dv = static_cast<double>(x.data()[i * d + j]) -
                          mean[static_cast<std::size_t>(j)];
        sd[static_cast<std::size_t>(j)] += dv * dv;
      }
    for (auto& v : sd) {
      v = std::sqrt(v / static_cast<double>(n));
      if (v < 1e-12) v = 1.0;
    }
  }

  Tensor<S> apply(const Tensor<S>& x) const {
    const int64_t n = x.size(0), d = x.size(1);
    Tensor<S> out({n, d});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j)
        out.data()[i * d + j] = static_cast<S>(
            (static_cast<double>(x.data()[i * d + j]) - mean[static_cast<std::size_t>(j)]) /
            sd[static_cast<std::size_t>(j)]);
    return out;
  }
};

}  // namespace eegm2
