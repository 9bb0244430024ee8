#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "eegm2/loss.hpp"
#include "eegm2/repr.hpp"
#include "eegm2/ssd.hpp"

namespace eegm2 {

// The EEGM2 network: multi-scale embedding, three encoder stages, a
// mediator bottleneck and a mirrored interpolation decoder with skip
// connections, closed by a 1x1 output head. Stage 1 and the mediator and
// decoder stages carry sequence blocks (state-space scans, or attention for
// the S5 ablation).

enum class Variant { Full, S1, S2, S3, S4, S5 };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::S1: return "s1";
    case Variant::S2: return "s2";
    case Variant::S3: return "s3";
    case Variant::S4: return "s4";
    case Variant::S5: return "s5";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::Full, Variant::S1, Variant::S2, Variant::S3,
                    Variant::S4, Variant::S5}) {
    if (s == variant_name(v)) return v;
  }
  throw ConfigError("unknown variant '" + s + "' (expected full|s1|s2|s3|s4|s5)");
}

struct ArchConfig {
  int64_t in_channels = 14;
  std::array<int64_t, 3> stage_widths = {128, 256, 512};
  int64_t pool = 2;
  int64_t d_state = 128;
  int64_t n_heads = 4;
  Variant variant = Variant::Full;
  int64_t chunk = 64;
  double norm_eps = 1e-5;
  double dt_min = 1e-3;
  double dt_max = 1e-1;
  bool encoder_only = false;

  bool multiscale() const { return variant != Variant::S1 && variant != Variant::S4; }
  AMode a_mode() const {
    return (variant == Variant::S3 || variant == Variant::S4)
               ? AMode::diagonal_per_channel
               : AMode::scalar_per_head;
  }
  bool attention_blocks() const { return variant == Variant::S5; }

  /// The S2 ablation drops the spectral term.
  LossConfig loss() const {
    LossConfig lc;
    if (variant == Variant::S2) lc.beta = 0.0;
    return lc;
  }

  int64_t pool_total() const { return pool * pool; }

  void validate() const {
    if (in_channels < 1) throw ConfigError("ArchConfig: in_channels must be >= 1");
    if (!(stage_widths[0] < stage_widths[1] && stage_widths[1] < stage_widths[2])) {
      throw ConfigError("ArchConfig: stage widths must be strictly increasing");
    }
    if (multiscale() && stage_widths[0] < 3) {
      throw ConfigError("ArchConfig: multiscale embedding needs stage width d1 >= 3");
    }
    if (pool < 2) throw ConfigError("ArchConfig: pool must be >= 2");
    for (int64_t w : stage_widths) {
      if (w % n_heads != 0) {
        throw ConfigError("ArchConfig: every stage width must be divisible by n_heads");
      }
    }
  }
};

/// Parameter presets sized to the published model budgets.
inline ArchConfig full_preset(int64_t in_channels = 16) {
  ArchConfig c;
  c.in_channels = in_channels;
  c.stage_widths = {128, 256, 512};
  c.d_state = 128;
  c.n_heads = 4;
  return c;
}

inline ArchConfig light_preset(int64_t in_channels = 16) {
  ArchConfig c;
  c.in_channels = in_channels;
  c.stage_widths = {48, 96, 144};
  c.d_state = 16;
  c.n_heads = 4;
  c.encoder_only = true;
  return c;
}

namespace detail {

/// Sequence block dispatch: state-space scan or attention (S5).
template <class S>
struct SeqBlock {
  bool attention = false;
  Mamba2Block<S> ssm;
  AttentionBlock<S> attn;

  void setup(const ArchConfig& cfg, int64_t d_model, Rng& rng) {
    attention = cfg.attention_blocks();
    if (attention) {
      attn.d_model = d_model;
      attn.n_heads = cfg.n_heads;
      attn.norm_eps = cfg.norm_eps;
      attn.init(rng);
    } else {
      ssm.cfg.d_model = d_model;
      ssm.cfg.d_state = cfg.d_state;
      ssm.cfg.n_heads = cfg.n_heads;
      ssm.cfg.a_mode = cfg.a_mode();
      ssm.cfg.dt_min = cfg.dt_min;
      ssm.cfg.dt_max = cfg.dt_max;
      ssm.cfg.chunk = cfg.chunk;
      ssm.cfg.norm_eps = cfg.norm_eps;
      ssm.init(rng);
    }
  }

  void register_params(ParamSet<S>& ps, const std::string& prefix) {
    if (attention) {
      attn.register_params(ps, prefix);
    } else {
      ssm.register_params(ps, prefix);
    }
  }

  Var<S> forward(const Var<S>& x) const {
    return attention ? attn.forward(x) : ssm.forward(x);
  }
};

}  // namespace detail

/// Capture request for one encoder stage output (the "forward hook").
template <class S>
struct Tap {
  std::string layer_id;
  Tensor<S> captured;
  bool hit = false;
};

template <class S>
class Model {
 public:
  Model(ArchConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng(seed).fork("model-init");
    const int64_t cin = cfg_.in_channels;
    const auto [d1, d2, d3] = cfg_.stage_widths;

    if (cfg_.multiscale()) {
      const int64_t base = d1 / 3;
      const int64_t w1 = base + (d1 - 3 * base);  // remainder on the k=1 branch
      emb_w1_ = init::uniform_fan_in<S>(rng, {w1, cin, 1}, cin);
      emb_b1_ = init::zeros<S>({w1});
      emb_w3_ = init::uniform_fan_in<S>(rng, {base, cin, 3}, cin * 3);
      emb_b3_ = init::zeros<S>({base});
      emb_w7_ = init::uniform_fan_in<S>(rng, {base, cin, 7}, cin * 7);
      emb_b7_ = init::zeros<S>({base});
    } else {
      emb_w1_ = init::uniform_fan_in<S>(rng, {d1, cin, 1}, cin);
      emb_b1_ = init::zeros<S>({d1});
    }
    proj_w_ = init::uniform_fan_in<S>(rng, {d1, d1, 1}, d1);
    proj_b_ = init::zeros<S>({d1});
    block1_.setup(cfg_, d1, rng);
    conv2_w_ = init::uniform_fan_in<S>(rng, {d2, d1, 3}, d1 * 3);
    conv2_b_ = init::zeros<S>({d2});
    conv3_w_ = init::uniform_fan_in<S>(rng, {d3, d2, 3}, d2 * 3);
    conv3_b_ = init::zeros<S>({d3});

    if (!cfg_.encoder_only) {
      med_in_w_ = init::uniform_fan_in<S>(rng, {d3, d3, 1}, d3);
      med_in_b_ = init::zeros<S>({d3});
      med_block_.setup(cfg_, d3, rng);
      med_out_w_ = init::uniform_fan_in<S>(rng, {d3, d3, 1}, d3);
      med_out_b_ = init::zeros<S>({d3});

      dec1_block_.setup(cfg_, d3, rng);
      dec1_w_ = init::uniform_fan_in<S>(rng, {d2, d3 + d2, 3}, (d3 + d2) * 3);
      dec1_b_ = init::zeros<S>({d2});
      dec2_block_.setup(cfg_, d2, rng);
      dec2_w_ = init::uniform_fan_in<S>(rng, {d1, d2 + d1, 3}, (d2 + d1) * 3);
      dec2_b_ = init::zeros<S>({d1});
      head_w_ = init::uniform_fan_in<S>(rng, {cin, d1, 1}, d1);
      head_b_ = init::zeros<S>({cin});
    }
    register_all();
  }

  const ArchConfig& config() const { return cfg_; }
  ParamSet<S>& params() { return params_; }
  const ParamSet<S>& params() const { return params_; }

  static std::vector<std::string> tap_points() {
    return {"embed", "stage1", "stage2", "stage3"};
  }

  struct Encoded {
    Var<S> z;      // [B, d3, T/pool^2]
    Var<S> skip1;  // [B, d1, T]
    Var<S> skip2;  // [B, d2, T/pool]
  };

  /// Encoder pass; requires T divisible by pool^2 (see forward() for the
  /// padded entry point).
  Encoded encode(const Var<S>& x, Tap<S>* tap = nullptr) const {
    const Shape& xs = x.shape();
    if (xs.size() != 3 || xs[1] != cfg_.in_channels) {
      throw ShapeError("encode: expected [B," + std::to_string(cfg_.in_channels) +
                       ",T], got " + shape_str(xs));
    }
    const int64_t T = xs[2];
    if (T % cfg_.pool_total() != 0) {
      const int64_t need = cfg_.pool_total() - T % cfg_.pool_total();
      throw ShapeError("encode: T=" + std::to_string(T) + " not divisible by " +
                       std::to_string(cfg_.pool_total()) + "; pad " +
                       std::to_string(need) + " samples or use forward()");
    }
    Var<S> x0 = embed(x);
    observe(tap, "embed", x0);
    Var<S> s1 = block1_.forward(conv1d(x0, proj_w_, proj_b_));
    observe(tap, "stage1", s1);
    Var<S> s2 = max_pool1d(silu(conv1d(s1, conv2_w_, conv2_b_)), cfg_.pool, cfg_.pool);
    observe(tap, "stage2", s2);
    Var<S> z = max_pool1d(silu(conv1d(s2, conv3_w_, conv3_b_)), cfg_.pool, cfg_.pool);
    observe(tap, "stage3", z);
    return {z, s1, s2};
  }

  Var<S> mediator(const Var<S>& z) const {
    require_decoder("mediator");
    Var<S> m = conv1d(z, med_in_w_, med_in_b_);
    m = med_block_.forward(m);
    return conv1d(m, med_out_w_, med_out_b_);
  }

  Var<S> decode(const Var<S>& z_med, const Encoded& enc) const {
    require_decoder("decode");
    const int64_t t_mid = enc.skip2.shape()[2];
    const int64_t t_full = enc.skip1.shape()[2];
    Var<S> u = dec1_block_.forward(interp_upsample(z_med, t_mid));
    if (u.shape()[2] != enc.skip2.shape()[2]) {
      throw ShapeError("decode: skip2 resolution mismatch");
    }
    u = silu(conv1d(concat<S>({u, enc.skip2}, 1), dec1_w_, dec1_b_));
    u = dec2_block_.forward(interp_upsample(u, t_full));
    if (u.shape()[2] != enc.skip1.shape()[2]) {
      throw ShapeError("decode: skip1 resolution mismatch");
    }
    u = silu(conv1d(concat<S>({u, enc.skip1}, 1), dec2_w_, dec2_b_));
    return conv1d(u, head_w_, head_b_);
  }

  /// Full reconstruction pass. Inputs whose T is not divisible by pool^2
  /// are right-padded with zeros internally and the output is cropped back,
  /// which masks the padding out of any loss on the result.
  Var<S> forward(const Var<S>& x, Tap<S>* tap = nullptr) const {
    require_decoder("forward");
    const int64_t T = x.shape()[2];
    const int64_t ptot = cfg_.pool_total();
    const int64_t t_pad = (T + ptot - 1) / ptot * ptot;
    Var<S> xin = pad_time(x, t_pad);
    Encoded enc = encode(xin, tap);
    Var<S> out = decode(mediator(enc.z), enc);
    return crop_time(out, T);
  }

 private:
  Var<S> embed(const Var<S>& x) const {
    if (!cfg_.multiscale()) {
      return conv1d(x, emb_w1_, emb_b1_);
    }
    Var<S> y1 = conv1d(x, emb_w1_, emb_b1_);
    Var<S> y3 = conv1d(x, emb_w3_, emb_b3_);
    Var<S> y7 = conv1d(x, emb_w7_, emb_b7_);
    return concat<S>({y1, y3, y7}, 1);
  }

  void observe(Tap<S>* tap, const char* name, const Var<S>& v) const {
    if (tap && tap->layer_id == name) {
      tap->captured = v.value();
      tap->hit = true;
    }
  }

  void require_decoder(const char* what) const {
    if (cfg_.encoder_only) {
      throw ConfigError(std::string(what) + ": model was built encoder-only");
    }
  }

  void register_all() {
    params_.add("embed.k1.w", emb_w1_);
    params_.add("embed.k1.b", emb_b1_);
    if (cfg_.multiscale()) {
      params_.add("embed.k3.w", emb_w3_);
      params_.add("embed.k3.b", emb_b3_);
      params_.add("embed.k7.w", emb_w7_);
      params_.add("embed.k7.b", emb_b7_);
    }
    params_.add("stage1.proj.w", proj_w_);
    params_.add("stage1.proj.b", proj_b_);
    block1_.register_params(params_, "stage1.block");
    params_.add("stage2.conv.w", conv2_w_);
    params_.add("stage2.conv.b", conv2_b_);
    params_.add("stage3.conv.w", conv3_w_);
    params_.add("stage3.conv.b", conv3_b_);
    if (!cfg_.encoder_only) {
      params_.add("mediator.in.w", med_in_w_);
      params_.add("mediator.in.b", med_in_b_);
      med_block_.register_params(params_, "mediator.block");
      params_.add("mediator.out.w", med_out_w_);
      params_.add("mediator.out.b", med_out_b_);
      dec1_block_.register_params(params_, "decoder1.block");
      params_.add("decoder1.conv.w", dec1_w_);
      params_.add("decoder1.conv.b", dec1_b_);
      dec2_block_.register_params(params_, "decoder2.block");
      params_.add("decoder2.conv.w", dec2_w_);
      params_.add("decoder2.conv.b", dec2_b_);
      params_.add("head.w", head_w_);
      params_.add("head.b", head_b_);
    }
  }

  ArchConfig cfg_;
  ParamSet<S> params_;
  Var<S> emb_w1_, emb_b1_, emb_w3_, emb_b3_, emb_w7_, emb_b7_;
  Var<S> proj_w_, proj_b_;
  detail::SeqBlock<S> block1_;
  Var<S> conv2_w_, conv2_b_, conv3_w_, conv3_b_;
  Var<S> med_in_w_, med_in_b_, med_out_w_, med_out_b_;
  detail::SeqBlock<S> med_block_;
  detail::SeqBlock<S> dec1_block_;
  Var<S> dec1_w_, dec1_b_;
  detail::SeqBlock<S> dec2_block_;
  Var<S> dec2_w_, dec2_b_;
  Var<S> head_w_, head_b_;
};

/// Assembles a model for the requested ablation variant.
template <class S>
Model<S> build_variant(ArchConfig cfg, Variant variant, uint64_t seed) {
  cfg.variant = variant;
  return Model<S>(cfg, seed);
}

/// Captures one encoder stage output without altering the forward result.
/// Pads T like forward() when needed.
template <class S>
Tensor<S> tap_encoder(const Model<S>& model, const Tensor<S>& x,
                      const std::string& layer_id) {
  bool known = false;
  for (const auto& p : Model<S>::tap_points()) known = known || p == layer_id;
  if (!known) {
    std::string valid;
    for (const auto& p : Model<S>::tap_points()) valid += (valid.empty() ? "" : ", ") + p;
    throw ConfigError("tap_encoder: unknown layer '" + layer_id + "' (valid: " + valid + ")");
  }
  NoGradGuard ng;
  const int64_t T = x.size(2);
  const int64_t ptot = model.config().pool_total();
  const int64_t t_pad = (T + ptot - 1) / ptot * ptot;
  Tap<S> tap;
  tap.layer_id = layer_id;
  model.encode(pad_time(Var<S>::constant(x), t_pad), &tap);
  return tap.captured;
}

}  // namespace eegm2
