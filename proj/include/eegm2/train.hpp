#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eegm2/arch.hpp"
#include "eegm2/data.hpp"
#include "eegm2/loss.hpp"
#include "eegm2/optim.hpp"
#include "eegm2/repr.hpp"
#include "eegm2/serialize.hpp"

namespace eegm2 {

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double acmse_val = 0.0;
  double seconds = 0.0;
};

inline nlohmann::json epoch_to_json(const EpochStats& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"val_loss", e.val_loss},
          {"acmse", e.acmse_val},
          {"seconds", e.seconds}};
}

template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int64_t>& idx) {
  const int64_t C = x.size(1), T = x.size(2);
  Tensor<S> out({static_cast<int64_t>(idx.size()), C, T});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(x.data() + idx[i] * C * T, x.data() + (idx[i] + 1) * C * T,
              out.data() + static_cast<int64_t>(i) * C * T);
  }
  return out;
}

/// Mean reconstruction loss over a batch without touching parameters.
template <class S>
double evaluate_loss(const Model<S>& model, const Tensor<S>& x, const LossConfig& lcfg,
                     int64_t eval_batch = 64) {
  NoGradGuard ng;
  const int64_t n = x.size(0);
  double total = 0.0;
  for (int64_t start = 0; start < n; start += eval_batch) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(n, start + eval_batch); ++i) idx.push_back(i);
    Var<S> xb = Var<S>::constant(gather_rows(x, idx));
    Var<S> loss = reconstruction_loss(xb, model.forward(xb), lcfg);
    total += static_cast<double>(loss.value().data()[0]) * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(n);
}

template <class S>
double evaluate_acmse(const Model<S>& model, const Tensor<S>& x, int64_t eval_batch = 64) {
  NoGradGuard ng;
  const int64_t n = x.size(0);
  double total = 0.0;
  for (int64_t start = 0; start < n; start += eval_batch) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(n, start + eval_batch); ++i) idx.push_back(i);
    Tensor<S> xb = gather_rows(x, idx);
    Var<S> out = model.forward(Var<S>::constant(xb));
    total += acmse(xb, out.value()) * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(n);
}

struct PretrainResult {
  std::vector<EpochStats> history;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int64_t final_step = 0;
  int64_t skipped_steps = 0;
};

/// Self-supervised reconstruction pretraining. Aborts with a diagnostic if
/// the loss diverges past 1000x its initial value. `log` (when given)
/// receives one JSON record per epoch.
template <class S>
PretrainResult pretrain(Model<S>& model, const Tensor<S>& train_x, const Tensor<S>& val_x,
                        const OptimConfig& ocfg, const LossConfig& lcfg, uint64_t seed,
                        std::ostream* log = nullptr, int start_epoch = 0,
                        AdamW<S>* opt_in = nullptr) {
  ocfg.validate();
  lcfg.validate();
  const int64_t n = train_x.size(0);
  const int64_t steps_per_epoch = (n + ocfg.batch_size - 1) / ocfg.batch_size;
  const int64_t total_steps = steps_per_epoch * ocfg.epochs;
  AdamW<S> local_opt(model.params(), ocfg);
  AdamW<S>& opt = opt_in ? *opt_in : local_opt;

  PretrainResult res;
  double initial_loss = -1.0;
  Rng shuffle_rng = Rng(seed).fork("pretrain-shuffle");
  int64_t step = static_cast<int64_t>(start_epoch) * steps_per_epoch;

  std::vector<int64_t> order(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = start_epoch; epoch < ocfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    int64_t seen = 0;
    for (int64_t start = 0; start < n; start += ocfg.batch_size) {
      std::vector<int64_t> idx(order.begin() + start,
                               order.begin() + std::min<int64_t>(n, start + ocfg.batch_size));
      Var<S> xb = Var<S>::constant(gather_rows(train_x, idx));
      model.params().zero_grad();
      Var<S> loss = reconstruction_loss(xb, model.forward(xb), lcfg);
      const double lv = static_cast<double>(loss.value().data()[0]);
      if (initial_loss < 0) initial_loss = lv;
      if (!std::isfinite(lv) || lv > 1e3 * initial_loss) {
        throw NumericError("pretrain: loss diverged at epoch " + std::to_string(epoch) +
                           " step " + std::to_string(step) + " (loss=" + std::to_string(lv) +
                           ", initial=" + std::to_string(initial_loss) + ")");
      }
      backward(loss);
      opt.step(onecycle_lr(std::min(step, total_steps - 1), total_steps, ocfg));
      epoch_loss += lv * static_cast<double>(idx.size());
      seen += static_cast<int64_t>(idx.size());
      ++step;
    }
    const auto t1 = std::chrono::steady_clock::now();
    EpochStats es;
    es.epoch = epoch;
    es.train_loss = epoch_loss / static_cast<double>(seen);
    es.seconds = std::chrono::duration<double>(t1 - t0).count();
    es.val_loss = evaluate_loss(model, val_x, lcfg, ocfg.batch_size);
    es.acmse_val = evaluate_acmse(model, val_x, ocfg.batch_size);
    res.best_val_loss = std::min(res.best_val_loss, es.val_loss);
    res.history.push_back(es);
    if (log) (*log) << epoch_to_json(es).dump() << "\n";
  }
  res.final_step = step;
  res.skipped_steps = opt.skipped_steps();
  return res;
}

// ---------------------------------------------------------------------------
// Downstream classification: statistics features from the stage-3 tap feed
// either probes (frozen encoder) or an end-to-end fine-tuned head.
// ---------------------------------------------------------------------------

/// Flattened nine-statistic features of the deepest encoder stage,
/// [n, 9 * d3]. Runs without gradients in eval batches.
template <class S>
Tensor<S> stats_features(const Model<S>& model, const Tensor<S>& x,
                         const std::string& layer_id = "stage3",
                         int64_t eval_batch = 64) {
  NoGradGuard ng;
  const int64_t n = x.size(0);
  Tensor<S> out;
  int64_t fdim = -1;
  for (int64_t start = 0; start < n; start += eval_batch) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(n, start + eval_batch); ++i) idx.push_back(i);
    Tensor<S> feat = tap_encoder(model, gather_rows(x, idx), layer_id);
    Var<S> z = extract_stats(Var<S>::constant(feat));
    const int64_t b = z.shape()[0];
    const int64_t d = z.shape()[1] * z.shape()[2];
    if (fdim < 0) {
      fdim = d;
      out = Tensor<S>({n, fdim});
    }
    std::copy(z.value().data(), z.value().data() + b * d, out.data() + start * fdim);
  }
  return out;
}

struct EvalMetrics {
  double balanced_acc = 0.0;
  double auroc_score = 0.0;
};

/// End-to-end classifier: encoder tap -> statistics -> MLP head, trained
/// jointly (fine-tuning) or with the encoder frozen elsewhere.
template <class S>
class FinetuneClassifier {
 public:
  struct Config {
    int64_t hidden1 = 128;
    int64_t hidden2 = 64;
    int epochs = 5;
    double lr = 1e-4;
    double weight_decay = 1e-2;
    int batch_size = 32;
  };

  FinetuneClassifier(Model<S>& model, int64_t n_classes, uint64_t seed, Config cfg = Config())
      : model_(&model), cfg_(cfg), n_classes_(n_classes) {
    const int64_t d3 = model.config().stage_widths[2];
    in_dim_ = d3 * kReprStats;
    Rng rng = Rng(seed).fork("finetune-head");
    w1_ = head_.add("head.w1", init::uniform_fan_in<S>(rng, {cfg.hidden1, in_dim_}, in_dim_));
    b1_ = head_.add("head.b1", init::zeros<S>({cfg.hidden1}));
    w2_ = head_.add("head.w2", init::uniform_fan_in<S>(rng, {cfg.hidden2, cfg.hidden1}, cfg.hidden1));
    b2_ = head_.add("head.b2", init::zeros<S>({cfg.hidden2}));
    w3_ = head_.add("head.w3", init::uniform_fan_in<S>(rng, {n_classes, cfg.hidden2}, cfg.hidden2));
    b3_ = head_.add("head.b3", init::zeros<S>({n_classes}));
    // One optimizer over encoder and head together; Var copies share state.
    for (auto& [name, v] : model.params()) all_.add(name, v);
    for (auto& [name, v] : head_) all_.add(name, v);
  }

  Var<S> logits(const Var<S>& x) const {
    const int64_t ptot = model_->config().pool_total();
    const int64_t T = x.shape()[2];
    const int64_t t_pad = (T + ptot - 1) / ptot * ptot;
    auto enc = model_->encode(pad_time(x, t_pad));
    Var<S> z = extract_stats(enc.z);
    Var<S> flat = reshape(z, {z.shape()[0], in_dim_});
    Var<S> h = silu(linear(flat, w1_, b1_));
    h = silu(linear(h, w2_, b2_));
    return linear(h, w3_, b3_);
  }

  void fit(const Tensor<S>& x, const std::vector<int>& y, uint64_t seed) {
    OptimConfig oc;
    oc.weight_decay = cfg_.weight_decay;
    AdamW<S> opt(all_, oc);
    Rng rng = Rng(seed).fork("finetune-shuffle");
    const int64_t n = x.size(0);
    std::vector<int64_t> order(static_cast<std::size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      rng.shuffle(order.begin(), order.end());
      for (int64_t start = 0; start < n; start += cfg_.batch_size) {
        std::vector<int64_t> idx(order.begin() + start,
                                 order.begin() + std::min<int64_t>(n, start + cfg_.batch_size));
        std::vector<int> yb;
        for (int64_t i : idx) yb.push_back(y[static_cast<std::size_t>(i)]);
        all_.zero_grad();
        Var<S> loss = cross_entropy_logits(logits(Var<S>::constant(gather_rows(x, idx))), yb);
        backward(loss);
        opt.step(cfg_.lr);
      }
    }
  }

  std::vector<int> predict(const Tensor<S>& x, int64_t eval_batch = 64) const {
    NoGradGuard ng;
    std::vector<int> out;
    const int64_t n = x.size(0);
    for (int64_t start = 0; start < n; start += eval_batch) {
      std::vector<int64_t> idx;
      for (int64_t i = start; i < std::min(n, start + eval_batch); ++i) idx.push_back(i);
      Var<S> lg = logits(Var<S>::constant(gather_rows(x, idx)));
      for (int64_t i = 0; i < lg.shape()[0]; ++i) {
        const S* row = lg.value().data() + i * n_classes_;
        out.push_back(static_cast<int>(std::max_element(row, row + n_classes_) - row));
      }
    }
    return out;
  }

  std::vector<double> scores_binary(const Tensor<S>& x, int64_t eval_batch = 64) const {
    if (n_classes_ != 2) throw ConfigError("finetune: binary scores need 2 classes");
    NoGradGuard ng;
    std::vector<double> out;
    const int64_t n = x.size(0);
    for (int64_t start = 0; start < n; start += eval_batch) {
      std::vector<int64_t> idx;
      for (int64_t i = start; i < std::min(n, start + eval_batch); ++i) idx.push_back(i);
      Var<S> lg = logits(Var<S>::constant(gather_rows(x, idx)));
      for (int64_t i = 0; i < lg.shape()[0]; ++i) {
        const double z0 = static_cast<double>(lg.value().data()[i * 2]);
        const double z1 = static_cast<double>(lg.value().data()[i * 2 + 1]);
        out.push_back(1.0 / (1.0 + std::exp(z0 - z1)));
      }
    }
    return out;
  }

  ParamSet<S>& head_params() { return head_; }

 private:
  Model<S>* model_;
  Config cfg_;
  int64_t n_classes_;
  int64_t in_dim_;
  ParamSet<S> head_;
  ParamSet<S> all_;
  Var<S> w1_, b1_, w2_, b2_, w3_, b3_;
};

/// Frozen-encoder non-linear probe on the stage-3 statistics; returns test
/// metrics. The encoder is untouched (hash-checked by callers/tests).
template <class S>
EvalMetrics probe_nonlinear(const Model<S>& model, const Tensor<S>& train_x,
                            const std::vector<int>& train_y, const Tensor<S>& test_x,
                            const std::vector<int>& test_y, uint64_t seed,
                            typename MlpProbe<S>::Config cfg = typename MlpProbe<S>::Config()) {
  Tensor<S> ftr = stats_features(model, train_x);
  Tensor<S> fte = stats_features(model, test_x);
  FeatureScaler<S> scaler;
  scaler.fit(ftr);
  const int n_classes = 1 + *std::max_element(train_y.begin(), train_y.end());
  MlpProbe<S> probe(ftr.size(1), n_classes, seed, cfg);
  probe.fit(scaler.apply(ftr), train_y);
  Tensor<S> fte_s = scaler.apply(fte);
  EvalMetrics m;
  m.balanced_acc = balanced_accuracy(test_y, probe.predict(fte_s));
  if (n_classes == 2) m.auroc_score = auroc(test_y, probe.scores_binary(fte_s));
  return m;
}

/// Frozen-encoder linear probe (one-vs-rest logistic regression).
template <class S>
EvalMetrics probe_linear(const Model<S>& model, const Tensor<S>& train_x,
                         const std::vector<int>& train_y, const Tensor<S>& test_x,
                         const std::vector<int>& test_y) {
  Tensor<S> ftr = stats_features(model, train_x);
  Tensor<S> fte = stats_features(model, test_x);
  auto to_rows = [](const Tensor<S>& t) {
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(t.size(0)),
                                          std::vector<double>(static_cast<std::size_t>(t.size(1))));
    for (int64_t i = 0; i < t.size(0); ++i)
      for (int64_t j = 0; j < t.size(1); ++j)
        rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
            static_cast<double>(t.data()[i * t.size(1) + j]);
    return rows;
  };
  LogisticProbe probe;
  auto xr = to_rows(ftr);
  probe.fit(xr, train_y);
  auto xe = to_rows(fte);
  EvalMetrics m;
  m.balanced_acc = balanced_accuracy(test_y, probe.predict(xe));
  if (probe.n_classes() == 2) {
    auto sc = probe.scores(xe);
    std::vector<double> s1(sc.size());
    for (std::size_t i = 0; i < sc.size(); ++i) s1[i] = sc[i][0];
    m.auroc_score = auroc(test_y, s1);
  }
  return m;
}

}  // namespace eegm2
