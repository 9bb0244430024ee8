#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "eegm2/nn.hpp"
#include "eegm2/ops.hpp"
#include "eegm2/params.hpp"

namespace eegm2 {

// Structured state-space block in the Mamba-2 style. The recurrence
//   h_t = A_t h_{t-1} + B_t x_t,   y_t = C_t h_t
// runs per head over a [head_dim x d_state] latent. A_t is a scalar decay
// per head (Mamba-2) or one decay per channel (Mamba-1 ablation mode); B_t
// and C_t are per-timestep linear projections of the block input.

enum class AMode { scalar_per_head, diagonal_per_channel };

struct SSDConfig {
  int64_t d_model = 0;
  int64_t d_state = 16;
  int64_t n_heads = 4;
  AMode a_mode = AMode::scalar_per_head;
  double dt_min = 1e-3;
  double dt_max = 1e-1;
  int64_t chunk = 64;
  double norm_eps = 1e-5;

  int64_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
      throw ConfigError("SSDConfig: d_model must be a positive multiple of n_heads");
    }
    if (d_state < 1) throw ConfigError("SSDConfig: d_state must be >= 1");
    if (!(dt_min > 0) || !(dt_max > 0) || !(dt_min < dt_max)) {
      throw ConfigError("SSDConfig: need 0 < dt_min < dt_max");
    }
    if (chunk < 1) throw ConfigError("SSDConfig: chunk must be >= 1");
  }
};

namespace detail {

template <class S>
void check_scan_shapes(const Shape& xs, const Shape& as, const Shape& bs,
                       const Shape& cs) {
  if (xs.size() != 4) throw ShapeError("scan: x must be [B,T,H,P], got " + shape_str(xs));
  if (bs.size() != 4 || cs.size() != 4 || bs != cs) {
    throw ShapeError("scan: B/C sequences must share shape [B,T,H,N]");
  }
  if (bs[0] != xs[0] || bs[1] != xs[1] || bs[2] != xs[2]) {
    throw ShapeError("scan: B/C " + shape_str(bs) + " incompatible with x " + shape_str(xs));
  }
  const bool per_channel = as.size() == 4;
  if (per_channel) {
    if (as != xs) throw ShapeError("scan: per-channel decay must match x shape");
  } else {
    if (as.size() != 3 || as[0] != xs[0] || as[1] != xs[1] || as[2] != xs[2]) {
      throw ShapeError("scan: decay must be [B,T,H] or [B,T,H,P]");
    }
  }
}

// Exact sequential recurrence; the correctness oracle. Throws on the first
// non-finite state, naming the time step.
template <class S>
void scan_naive_kernel(const S* x, const S* a, const S* b, const S* c, int64_t B,
                       int64_t T, int64_t H, int64_t P, int64_t N, bool per_channel,
                       S* y) {
  std::vector<S> h(static_cast<std::size_t>(P * N));
  for (int64_t bi = 0; bi < B; ++bi) {
    for (int64_t hi = 0; hi < H; ++hi) {
      std::fill(h.begin(), h.end(), S(0));
      for (int64_t t = 0; t < T; ++t) {
        const int64_t base = (bi * T + t) * H + hi;
        const S* xt = x + base * P;
        const S* bt = b + base * N;
        const S* ct = c + base * N;
        bool finite = true;
        for (int64_t p = 0; p < P; ++p) {
          const S ap = per_channel ? a[base * P + p] : a[base];
          S* hp = h.data() + p * N;
          const S xp = xt[p];
          for (int64_t n = 0; n < N; ++n) hp[n] = ap * hp[n] + bt[n] * xp;
          const S acc = detail::dot16(ct, hp, N);
          y[base * P + p] = acc;
          finite = finite && std::isfinite(static_cast<double>(acc));
        }
        if (!finite) {
          throw NumericError("scan: non-finite state at time step " + std::to_string(t));
        }
      }
    }
  }
}

// Chunked SSD evaluation: within-chunk contributions through a masked
// quadratic form, cross-chunk state carried by decay products. Linear in T
// for fixed chunk. Decay products are formed incrementally (never by
// exponentiating log sums), so they underflow gracefully to zero.
template <class S>
void scan_chunked_kernel(const S* x, const S* a, const S* b, const S* c, int64_t B,
                         int64_t T, int64_t H, int64_t P, int64_t N,
                         bool per_channel, int64_t chunk, S* y) {
  if (chunk == 1) {
    scan_naive_kernel(x, a, b, c, B, T, H, P, N, per_channel, y);
    return;
  }
  const int64_t Q = std::min<int64_t>(chunk, T);
  std::vector<S> h(static_cast<std::size_t>(P * N));        // carry state
  std::vector<S> G(static_cast<std::size_t>(Q * Q));        // c_t . b_s
  std::vector<S> E(static_cast<std::size_t>(Q * (per_channel ? P : 1)));
  std::vector<S> L(static_cast<std::size_t>(Q * (per_channel ? P : 1)));
  std::vector<S> D(static_cast<std::size_t>(Q * (per_channel ? P : 1)));

  for (int64_t bi = 0; bi < B; ++bi) {
    for (int64_t hi = 0; hi < H; ++hi) {
      std::fill(h.begin(), h.end(), S(0));
      for (int64_t s0 = 0; s0 < T; s0 += chunk) {
        const int64_t q = std::min<int64_t>(chunk, T - s0);
        auto idx = [&](int64_t t) { return (bi * T + (s0 + t)) * H + hi; };

        // E[t] = prod_{j<=t} a_j within the chunk (per channel if needed).
        if (!per_channel) {
          S run = S(1);
          for (int64_t t = 0; t < q; ++t) {
            run *= a[idx(t)];
            E[static_cast<std::size_t>(t)] = run;
          }
        } else {
          for (int64_t p = 0; p < P; ++p) {
            S run = S(1);
            for (int64_t t = 0; t < q; ++t) {
              run *= a[idx(t) * P + p];
              E[static_cast<std::size_t>(t * P + p)] = run;
            }
          }
        }

        // G[t,s] = c_t . b_s for s <= t (masked quadratic form).
        for (int64_t t = 0; t < q; ++t) {
          const S* ct = c + idx(t) * N;
          for (int64_t s = 0; s <= t; ++s) {
            G[static_cast<std::size_t>(t * Q + s)] = detail::dot16(ct, b + idx(s) * N, N);
          }
        }

        for (int64_t t = 0; t < q; ++t) {
          const int64_t base = idx(t);
          S* yt = y + base * P;
          const S* ct = c + base * N;

          // Inter-chunk term: decayed readout of the carry state.
          if (!per_channel) {
            const S et = E[static_cast<std::size_t>(t)];
            for (int64_t p = 0; p < P; ++p) {
              yt[p] = et * detail::dot16(ct, h.data() + p * N, N);
            }
          } else {
            for (int64_t p = 0; p < P; ++p) {
              yt[p] = E[static_cast<std::size_t>(t * P + p)] *
                      detail::dot16(ct, h.data() + p * N, N);
            }
          }

          // L[s] = prod_{j=s+1..t} a_j, built back from s = t.
          if (!per_channel) {
            L[static_cast<std::size_t>(t)] = S(1);
            for (int64_t s = t - 1; s >= 0; --s) {
              L[static_cast<std::size_t>(s)] =
                  L[static_cast<std::size_t>(s + 1)] * a[idx(s + 1)];
            }
            for (int64_t s = 0; s <= t; ++s) {
              const S w = G[static_cast<std::size_t>(t * Q + s)] *
                          L[static_cast<std::size_t>(s)];
              const S* xs = x + idx(s) * P;
              for (int64_t p = 0; p < P; ++p) yt[p] += w * xs[p];
            }
          } else {
            for (int64_t p = 0; p < P; ++p) L[static_cast<std::size_t>(t * P + p)] = S(1);
            for (int64_t s = t - 1; s >= 0; --s) {
              const S* anext = a + idx(s + 1) * P;
              for (int64_t p = 0; p < P; ++p) {
                L[static_cast<std::size_t>(s * P + p)] =
                    L[static_cast<std::size_t>((s + 1) * P + p)] * anext[p];
              }
            }
            for (int64_t s = 0; s <= t; ++s) {
              const S g = G[static_cast<std::size_t>(t * Q + s)];
              const S* xs = x + idx(s) * P;
              const S* lp = L.data() + s * P;
              for (int64_t p = 0; p < P; ++p) yt[p] += g * lp[p] * xs[p];
            }
          }
          if (t == q - 1) std::copy(L.begin(), L.begin() + q * (per_channel ? P : 1), D.begin());
        }

        // Carry state across the chunk boundary:
        // h <- E[q-1] * h + sum_s D[s] * x_s (x) b_s
        bool finite = true;
        if (!per_channel) {
          const S eq = E[static_cast<std::size_t>(q - 1)];
          for (auto& v : h) v *= eq;
          for (int64_t s = 0; s < q; ++s) {
            const S ds = D[static_cast<std::size_t>(s)];
            const S* xs = x + idx(s) * P;
            const S* bs = b + idx(s) * N;
            for (int64_t p = 0; p < P; ++p) {
              const S f = ds * xs[p];
              S* hp = h.data() + p * N;
              for (int64_t n = 0; n < N; ++n) hp[n] += f * bs[n];
            }
          }
        } else {
          for (int64_t p = 0; p < P; ++p) {
            const S eq = E[static_cast<std::size_t>((q - 1) * P + p)];
            S* hp = h.data() + p * N;
            for (int64_t n = 0; n < N; ++n) hp[n] *= eq;
          }
          for (int64_t s = 0; s < q; ++s) {
            const S* xs = x + idx(s) * P;
            const S* bs = b + idx(s) * N;
            const S* dp = D.data() + s * P;
            for (int64_t p = 0; p < P; ++p) {
              const S f = dp[p] * xs[p];
              S* hp = h.data() + p * N;
              for (int64_t n = 0; n < N; ++n) hp[n] += f * bs[n];
            }
          }
        }
        for (const S v : h) finite = finite && std::isfinite(static_cast<double>(v));
        if (!finite) {
          throw NumericError("scan: non-finite state at time step " +
                             std::to_string(s0 + q - 1));
        }
      }
    }
  }
}

// Adjoint of the recurrence; shared by the naive and chunked forwards since
// they compute the same function. Recomputes and stores the state sequence.
template <class S>
void scan_backward_kernel(const S* x, const S* a, const S* b, const S* c,
                          const S* gy, int64_t B, int64_t T, int64_t H, int64_t P,
                          int64_t N, bool per_channel, S* gx, S* ga, S* gb, S* gc) {
  std::vector<S> hs(static_cast<std::size_t>((T + 1) * P * N));
  std::vector<S> lam(static_cast<std::size_t>(P * N));
  for (int64_t bi = 0; bi < B; ++bi) {
    for (int64_t hi = 0; hi < H; ++hi) {
      std::fill(hs.begin(), hs.begin() + P * N, S(0));
      for (int64_t t = 0; t < T; ++t) {
        const int64_t base = (bi * T + t) * H + hi;
        const S* xt = x + base * P;
        const S* bt = b + base * N;
        const S* prev = hs.data() + t * P * N;
        S* cur = hs.data() + (t + 1) * P * N;
        for (int64_t p = 0; p < P; ++p) {
          const S ap = per_channel ? a[base * P + p] : a[base];
          const S xp = xt[p];
          const S* pp = prev + p * N;
          S* cp = cur + p * N;
          for (int64_t n = 0; n < N; ++n) cp[n] = ap * pp[n] + bt[n] * xp;
        }
      }
      std::fill(lam.begin(), lam.end(), S(0));
      for (int64_t t = T - 1; t >= 0; --t) {
        const int64_t base = (bi * T + t) * H + hi;
        const S* xt = x + base * P;
        const S* bt = b + base * N;
        const S* ct = c + base * N;
        const S* gyt = gy + base * P;
        const S* h_prev = hs.data() + t * P * N;
        const S* h_cur = hs.data() + (t + 1) * P * N;

        if (t < T - 1) {
          const int64_t next = (bi * T + (t + 1)) * H + hi;
          for (int64_t p = 0; p < P; ++p) {
            const S ap = per_channel ? a[next * P + p] : a[next];
            S* lp = lam.data() + p * N;
            for (int64_t n = 0; n < N; ++n) lp[n] *= ap;
          }
        }
        for (int64_t p = 0; p < P; ++p) {
          const S g = gyt[p];
          S* lp = lam.data() + p * N;
          for (int64_t n = 0; n < N; ++n) lp[n] += g * ct[n];
        }

        S* gct = gc + base * N;
        for (int64_t n = 0; n < N; ++n) {
          S acc = 0;
          for (int64_t p = 0; p < P; ++p) acc += gyt[p] * h_cur[p * N + n];
          gct[n] += acc;
        }
        S* gbt = gb + base * N;
        for (int64_t n = 0; n < N; ++n) {
          S acc = 0;
          for (int64_t p = 0; p < P; ++p) acc += lam[p * N + n] * xt[p];
          gbt[n] += acc;
        }
        S* gxt = gx + base * P;
        for (int64_t p = 0; p < P; ++p) {
          const S* lp = lam.data() + p * N;
          S acc = 0;
          for (int64_t n = 0; n < N; ++n) acc += lp[n] * bt[n];
          gxt[p] += acc;
        }
        if (per_channel) {
          for (int64_t p = 0; p < P; ++p) {
            const S* lp = lam.data() + p * N;
            const S* hp = h_prev + p * N;
            S acc = 0;
            for (int64_t n = 0; n < N; ++n) acc += lp[n] * hp[n];
            ga[base * P + p] += acc;
          }
        } else {
          S acc = 0;
          for (int64_t p = 0; p < P; ++p) {
            const S* lp = lam.data() + p * N;
            const S* hp = h_prev + p * N;
            for (int64_t n = 0; n < N; ++n) acc += lp[n] * hp[n];
          }
          ga[base] += acc;
        }
      }
    }
  }
}

template <class S>
Var<S> scan_op(const Var<S>& x, const Var<S>& a, const Var<S>& b, const Var<S>& c,
               int64_t chunk, bool use_chunked) {
  check_scan_shapes<S>(x.shape(), a.shape(), b.shape(), c.shape());
  const Shape& xs = x.shape();
  const int64_t B = xs[0], T = xs[1], H = xs[2], P = xs[3];
  const int64_t N = b.shape()[3];
  const bool per_channel = a.shape().size() == 4;
  Tensor<S> y(xs);
  if (use_chunked) {
    scan_chunked_kernel(x.value().data(), a.value().data(), b.value().data(),
                        c.value().data(), B, T, H, P, N, per_channel, chunk,
                        y.data());
  } else {
    scan_naive_kernel(x.value().data(), a.value().data(), b.value().data(),
                      c.value().data(), B, T, H, P, N, per_channel, y.data());
  }
  auto xn = x.node();
  auto an = a.node();
  auto bn = b.node();
  auto cn = c.node();
  Tensor<S> xv = x.value(), av = a.value(), bv = b.value(), cv = c.value();
  return detail::make_op_node<S>(std::move(y), {xn, an, bn, cn},
                                 [=](Node<S>& self) {
    Tensor<S> gx = Tensor<S>::zeros(xv.shape());
    Tensor<S> ga = Tensor<S>::zeros(av.shape());
    Tensor<S> gb = Tensor<S>::zeros(bv.shape());
    Tensor<S> gc = Tensor<S>::zeros(cv.shape());
    scan_backward_kernel(xv.data(), av.data(), bv.data(), cv.data(),
                         self.grad.data(), B, T, H, P, N, per_channel, gx.data(),
                         ga.data(), gb.data(), gc.data());
    if (xn->requires_grad) xn->accumulate(gx);
    if (an->requires_grad) an->accumulate(ga);
    if (bn->requires_grad) bn->accumulate(gb);
    if (cn->requires_grad) cn->accumulate(gc);
  });
}

}  // namespace detail

/// Sequential-scan oracle over [B,T,H,P] inputs.
template <class S>
Var<S> scan_naive(const Var<S>& x, const Var<S>& a, const Var<S>& b, const Var<S>& c) {
  return detail::scan_op(x, a, b, c, 1, false);
}

/// Production chunked scan; algebraically identical to scan_naive.
template <class S>
Var<S> scan_chunked(const Var<S>& x, const Var<S>& a, const Var<S>& b,
                    const Var<S>& c, int64_t chunk) {
  if (chunk < 1) throw ConfigError("scan_chunked: chunk must be >= 1");
  return detail::scan_op(x, a, b, c, chunk, true);
}

/// Decay factors A = exp(-dt * exp(a_log)); dt is [B,T,H], a_log is [H]
/// (scalar per head) or [H,P] (diagonal per channel). A always lies in (0,1)
/// for finite inputs.
template <class S>
Var<S> decay_factors(const Var<S>& dt, const Var<S>& a_log) {
  const Shape& ds = dt.shape();
  if (ds.size() != 3) throw ShapeError("decay_factors: dt must be [B,T,H]");
  const Shape& as = a_log.shape();
  const bool per_channel = as.size() == 2;
  if (!per_channel && (as.size() != 1 || as[0] != ds[2])) {
    throw ShapeError("decay_factors: a_log must be [H] or [H,P]");
  }
  if (per_channel && as[0] != ds[2]) {
    throw ShapeError("decay_factors: a_log head dim mismatch");
  }
  const int64_t rows = ds[0] * ds[1] * ds[2];
  const int64_t H = ds[2];
  const int64_t P = per_channel ? as[1] : 1;
  Shape os = ds;
  if (per_channel) os.push_back(P);
  Tensor<S> out(os);
  const S* pdt = dt.value().data();
  const S* pa = a_log.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t h = r % H;
    for (int64_t p = 0; p < P; ++p) {
      const double rate = std::exp(static_cast<double>(pa[h * P + p]));
      out.data()[r * P + p] =
          static_cast<S>(std::exp(-static_cast<double>(pdt[r]) * rate));
    }
  }
  auto dn = dt.node();
  auto an = a_log.node();
  Tensor<S> dv = dt.value(), alv = a_log.value(), ov = out;
  return detail::make_op_node<S>(std::move(out), {dn, an},
                                 [dn, an, dv, alv, ov, rows, H, P](Node<S>& self) {
    const S* g = self.grad.data();
    if (dn->requires_grad) {
      Tensor<S> gd(dv.shape());
      for (int64_t r = 0; r < rows; ++r) {
        const int64_t h = r % H;
        S acc = 0;
        for (int64_t p = 0; p < P; ++p) {
          const S rate = static_cast<S>(std::exp(static_cast<double>(alv.data()[h * P + p])));
          acc += g[r * P + p] * ov.data()[r * P + p] * (-rate);
        }
        gd.data()[r] = acc;
      }
      dn->accumulate(gd);
    }
    if (an->requires_grad) {
      Tensor<S> gal = Tensor<S>::zeros(alv.shape());
      for (int64_t r = 0; r < rows; ++r) {
        const int64_t h = r % H;
        for (int64_t p = 0; p < P; ++p) {
          const S rate = static_cast<S>(std::exp(static_cast<double>(alv.data()[h * P + p])));
          gal.data()[h * P + p] +=
              g[r * P + p] * ov.data()[r * P + p] * (-dv.data()[r] * rate);
        }
      }
      an->accumulate(gal);
    }
  });
}

/// Input-dependent recurrence coefficients for one timestep batch.
template <class S>
struct Discretized {
  Var<S> a;   // decay factors in (0,1)
  Var<S> b;   // dt-scaled input projection [B,T,H,N]
  Var<S> c;   // readout projection [B,T,H,N]
  Var<S> dt;  // positive step sizes [B,T,H]
};

template <class S>
struct Mamba2Block {
  SSDConfig cfg;
  Var<S> gamma, beta;
  Var<S> w_in, b_in;
  Var<S> w_b, w_c;
  Var<S> w_dt, b_dt;
  Var<S> a_log;
  Var<S> w_out, b_out;

  void init(Rng& rng) {
    cfg.validate();
    const int64_t d = cfg.d_model, H = cfg.n_heads, N = cfg.d_state;
    const int64_t P = cfg.head_dim();
    gamma = init::ones<S>({d});
    beta = init::zeros<S>({d});
    w_in = init::uniform_fan_in<S>(rng, {d, d}, d);
    b_in = init::zeros<S>({d});
    w_b = init::uniform_fan_in<S>(rng, {H * N, d}, d);
    w_c = init::uniform_fan_in<S>(rng, {H * N, d}, d);
    w_dt = init::uniform_fan_in<S>(rng, {H, d}, d);
    // Bias chosen so initial dt spans [dt_min, dt_max] log-uniformly.
    {
      Tensor<S> t({H});
      for (int64_t h = 0; h < H; ++h) {
        const double dt0 = std::exp(rng.uniform(std::log(cfg.dt_min), std::log(cfg.dt_max)));
        t.data()[h] = static_cast<S>(std::log(std::expm1(dt0)));
      }
      b_dt = Var<S>::leaf(std::move(t));
    }
    {
      Shape as = cfg.a_mode == AMode::scalar_per_head ? Shape{H} : Shape{H, P};
      Tensor<S> t(as);
      for (int64_t i = 0; i < t.numel(); ++i)
        t.data()[i] = static_cast<S>(std::log(rng.uniform(1.0, 16.0)));
      a_log = Var<S>::leaf(std::move(t));
    }
    w_out = init::uniform_fan_in<S>(rng, {d, d}, d);
    b_out = init::zeros<S>({d});
  }

  void register_params(ParamSet<S>& ps, const std::string& prefix) {
    ps.add(prefix + ".gamma", gamma);
    ps.add(prefix + ".beta", beta);
    ps.add(prefix + ".w_in", w_in);
    ps.add(prefix + ".b_in", b_in);
    ps.add(prefix + ".w_b", w_b);
    ps.add(prefix + ".w_c", w_c);
    ps.add(prefix + ".w_dt", w_dt);
    ps.add(prefix + ".b_dt", b_dt);
    ps.add(prefix + ".a_log", a_log);
    ps.add(prefix + ".w_out", w_out);
    ps.add(prefix + ".b_out", b_out);
  }

  /// Projects post-activation features into per-timestep (A, B, C, dt).
  Discretized<S> discretize(const Var<S>& u) const {
    const Shape& us = u.shape();  // [B,T,d]
    const int64_t B = us[0], T = us[1];
    const int64_t H = cfg.n_heads, N = cfg.d_state;
    Var<S> bt = reshape(linear_nobias(u, w_b), {B, T, H, N});
    Var<S> ct = reshape(linear_nobias(u, w_c), {B, T, H, N});
    Var<S> dt = softplus(linear(u, w_dt, b_dt));  // [B,T,H], positive
    Var<S> a = decay_factors(dt, a_log);
    Var<S> b_scaled = mul_bcast(bt, dt);  // dt also gates the input side
    return {a, b_scaled, ct, dt};
  }

  /// x: [B, d_model, T] -> same shape. Residual around
  /// W_out(scan(silu(W_in(norm(transpose(x)))))).
  Var<S> forward(const Var<S>& x) const {
    const Shape& xs = x.shape();
    if (xs.size() != 3 || xs[1] != cfg.d_model) {
      throw ShapeError("mamba2_block: expected [B," + std::to_string(cfg.d_model) +
                       ",T], got " + shape_str(xs));
    }
    const int64_t B = xs[0], T = xs[2];
    const int64_t H = cfg.n_heads, P = cfg.head_dim();
    Var<S> xt = transpose_last_two(x);  // [B,T,d]
    Var<S> u = silu(linear(layernorm(xt, gamma, beta, static_cast<S>(cfg.norm_eps)),
                           w_in, b_in));
    Discretized<S> dz = discretize(u);
    Var<S> xsplit = reshape(u, {B, T, H, P});
    Var<S> yscan = scan_chunked(xsplit, dz.a, dz.b, dz.c, cfg.chunk);
    Var<S> out = linear(reshape(yscan, {B, T, H * P}), w_out, b_out);
    return add(x, transpose_last_two(out));
  }
};

/// Pre-norm multi-head self-attention + feed-forward block used by the S5
/// ablation. No positional encoding; quadratic in T by construction.
template <class S>
struct AttentionBlock {
  int64_t d_model = 0;
  int64_t n_heads = 4;
  double norm_eps = 1e-5;
  Var<S> gamma1, beta1, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Var<S> gamma2, beta2, w_f1, b_f1, w_f2, b_f2;

  void init(Rng& rng) {
    if (d_model <= 0 || d_model % n_heads != 0) {
      throw ConfigError("attention_block: d_model must be a positive multiple of n_heads");
    }
    const int64_t d = d_model;
    gamma1 = init::ones<S>({d});
    beta1 = init::zeros<S>({d});
    w_q = init::uniform_fan_in<S>(rng, {d, d}, d);
    b_q = init::zeros<S>({d});
    w_k = init::uniform_fan_in<S>(rng, {d, d}, d);
    b_k = init::zeros<S>({d});
    w_v = init::uniform_fan_in<S>(rng, {d, d}, d);
    b_v = init::zeros<S>({d});
    w_o = init::uniform_fan_in<S>(rng, {d, d}, d);
    b_o = init::zeros<S>({d});
    gamma2 = init::ones<S>({d});
    beta2 = init::zeros<S>({d});
    w_f1 = init::uniform_fan_in<S>(rng, {4 * d, d}, d);
    b_f1 = init::zeros<S>({4 * d});
    w_f2 = init::uniform_fan_in<S>(rng, {d, 4 * d}, 4 * d);
    b_f2 = init::zeros<S>({d});
  }

  void register_params(ParamSet<S>& ps, const std::string& prefix) {
    ps.add(prefix + ".gamma1", gamma1);
    ps.add(prefix + ".beta1", beta1);
    ps.add(prefix + ".w_q", w_q);
    ps.add(prefix + ".b_q", b_q);
    ps.add(prefix + ".w_k", w_k);
    ps.add(prefix + ".b_k", b_k);
    ps.add(prefix + ".w_v", w_v);
    ps.add(prefix + ".b_v", b_v);
    ps.add(prefix + ".w_o", w_o);
    ps.add(prefix + ".b_o", b_o);
    ps.add(prefix + ".gamma2", gamma2);
    ps.add(prefix + ".beta2", beta2);
    ps.add(prefix + ".w_f1", w_f1);
    ps.add(prefix + ".b_f1", b_f1);
    ps.add(prefix + ".w_f2", w_f2);
    ps.add(prefix + ".b_f2", b_f2);
  }

  Var<S> forward(const Var<S>& x) const {
    const Shape& xs = x.shape();
    if (xs.size() != 3 || xs[1] != d_model) {
      throw ShapeError("attention_block: expected [B," + std::to_string(d_model) +
                       ",T], got " + shape_str(xs));
    }
    Var<S> xt = transpose_last_two(x);  // [B,T,d]
    Var<S> h = layernorm(xt, gamma1, beta1, static_cast<S>(norm_eps));
    Var<S> q = split_heads(linear(h, w_q, b_q), n_heads);  // [B,H,T,P]
    Var<S> k = split_heads(linear(h, w_k, b_k), n_heads);
    Var<S> v = split_heads(linear(h, w_v, b_v), n_heads);
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d_model / n_heads)));
    Var<S> scores = scale(matmul(q, k, /*trans_b=*/true), inv_sqrt);  // [B,H,T,T]
    Var<S> probs = softmax_lastdim(scores);
    Var<S> ctx = merge_heads(matmul(probs, v));  // [B,T,d]
    Var<S> y1 = add(xt, linear(ctx, w_o, b_o));
    Var<S> h2 = layernorm(y1, gamma2, beta2, static_cast<S>(norm_eps));
    Var<S> f = linear(silu(linear(h2, w_f1, b_f1)), w_f2, b_f2);
    return transpose_last_two(add(y1, f));
  }
};

}  // namespace eegm2
