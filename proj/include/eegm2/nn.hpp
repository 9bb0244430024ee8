#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "eegm2/fft.hpp"
#include "eegm2/graph.hpp"
#include "eegm2/ops.hpp"

namespace eegm2 {

namespace detail {

// Dot product with sixteen striped accumulators. The reduction order is
// fixed, so results stay bit-deterministic while the stripes map onto full
// vector registers.
template <class S>
inline S dot16(const S* a, const S* b, int64_t n) {
  S acc[16] = {};
  int64_t i = 0;
  for (; i + 16 <= n; i += 16) {
    for (int j = 0; j < 16; ++j) acc[j] += a[i + j] * b[i + j];
  }
  S tail = S(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  S sum = S(0);
  for (int j = 0; j < 16; ++j) sum += acc[j];
  return sum + tail;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Affine map along the trailing dim: x[..., Din] @ W[Dout, Din]^T + b[Dout]
// ---------------------------------------------------------------------------

template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& W, const Var<S>& b) {
  const Shape& xs = x.shape();
  const int64_t din = xs.back();
  if (W.shape().size() != 2 || W.shape()[1] != din) {
    throw ShapeError("linear: weight " + shape_str(W.shape()) +
                     " incompatible with input " + shape_str(xs));
  }
  const int64_t dout = W.shape()[0];
  const bool has_bias = b.defined();
  if (has_bias && (b.shape().size() != 1 || b.shape()[0] != dout)) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " must be [" +
                     std::to_string(dout) + "]");
  }
  const int64_t rows = x.value().numel() / din;
  Shape os = xs;
  os.back() = dout;
  Tensor<S> out(os);
  const S* px = x.value().data();
  const S* pw = W.value().data();
  const S* pb = has_bias ? b.value().data() : nullptr;
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * din;
    S* orow = po + r * dout;
    for (int64_t o = 0; o < dout; ++o) {
      orow[o] = (has_bias ? pb[o] : S(0)) + detail::dot16(xr, pw + o * din, din);
    }
  }
  auto xn = x.node();
  auto wn = W.node();
  auto bn = has_bias ? b.node() : nullptr;
  Tensor<S> xv = x.value();
  Tensor<S> wv = W.value();
  std::vector<std::shared_ptr<Node<S>>> parents{xn, wn};
  if (bn) parents.push_back(bn);
  return detail::make_op_node<S>(std::move(out), std::move(parents),
                                 [xn, wn, bn, xv, wv, rows, din, dout](Node<S>& self) {
    const S* g = self.grad.data();
    if (xn->requires_grad) {
      Tensor<S> gx(xv.shape());
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = g + r * dout;
        S* xr = gx.data() + r * din;
        for (int64_t i = 0; i < din; ++i) xr[i] = S(0);
        for (int64_t o = 0; o < dout; ++o) {
          const S go = gr[o];
          const S* wr = wv.data() + o * din;
          for (int64_t i = 0; i < din; ++i) xr[i] += go * wr[i];
        }
      }
      xn->accumulate(gx);
    }
    if (wn->requires_grad) {
      Tensor<S> gw = Tensor<S>::zeros(wv.shape());
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = g + r * dout;
        const S* xr = xv.data() + r * din;
        for (int64_t o = 0; o < dout; ++o) {
          const S go = gr[o];
          S* wr = gw.data() + o * din;
          for (int64_t i = 0; i < din; ++i) wr[i] += go * xr[i];
        }
      }
      wn->accumulate(gw);
    }
    if (bn && bn->requires_grad) {
      Tensor<S> gb = Tensor<S>::zeros({dout});
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = g + r * dout;
        for (int64_t o = 0; o < dout; ++o) gb.data()[o] += gr[o];
      }
      bn->accumulate(gb);
    }
  });
}

template <class S>
Var<S> linear_nobias(const Var<S>& x, const Var<S>& W) {
  return linear(x, W, Var<S>());
}

// ---------------------------------------------------------------------------
// 1-D convolution (cross-correlation, zero padded to preserve T)
// x: [B, Cin, T], w: [Cout, Cin, K] with K odd, b: [Cout]
// ---------------------------------------------------------------------------

template <class S>
Var<S> conv1d(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 3) {
    throw ShapeError("conv1d: expected x[B,Cin,T], w[Cout,Cin,K], got " +
                     shape_str(xs) + " and " + shape_str(ws));
  }
  if (ws[1] != xs[1]) {
    throw ShapeError("conv1d: channel mismatch, x has " + std::to_string(xs[1]) +
                     ", w expects " + std::to_string(ws[1]));
  }
  if (ws[2] % 2 == 0) throw ShapeError("conv1d: kernel size must be odd");
  const bool has_bias = b.defined();
  if (has_bias && (b.shape().size() != 1 || b.shape()[0] != ws[0])) {
    throw ShapeError("conv1d: bias must be [Cout]");
  }
  const int64_t B = xs[0], Cin = xs[1], T = xs[2];
  const int64_t Cout = ws[0], K = ws[2], pad = K / 2;

  Tensor<S> out({B, Cout, T});
  const S* px = x.value().data();
  const S* pw = w.value().data();
  const S* pb = has_bias ? b.value().data() : nullptr;
  S* po = out.data();
  for (int64_t bi = 0; bi < B; ++bi) {
    for (int64_t co = 0; co < Cout; ++co) {
      S* orow = po + (bi * Cout + co) * T;
      const S bias = has_bias ? pb[co] : S(0);
      for (int64_t t = 0; t < T; ++t) orow[t] = bias;
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const S* xr = px + (bi * Cin + ci) * T;
        const S* wr = pw + (co * Cin + ci) * K;
        for (int64_t k = 0; k < K; ++k) {
          const S wk = wr[k];
          const int64_t off = k - pad;
          const int64_t lo = std::max<int64_t>(0, -off);
          const int64_t hi = std::min<int64_t>(T, T - off);
          for (int64_t t = lo; t < hi; ++t) orow[t] += wk * xr[t + off];
        }
      }
    }
  }
  auto xn = x.node();
  auto wn = w.node();
  auto bn = has_bias ? b.node() : nullptr;
  Tensor<S> xv = x.value();
  Tensor<S> wv = w.value();
  std::vector<std::shared_ptr<Node<S>>> parents{xn, wn};
  if (bn) parents.push_back(bn);
  return detail::make_op_node<S>(
      std::move(out), std::move(parents),
      [xn, wn, bn, xv, wv, B, Cin, Cout, T, K, pad](Node<S>& self) {
    const S* g = self.grad.data();
    if (xn->requires_grad) {
      Tensor<S> gx = Tensor<S>::zeros(xv.shape());
      for (int64_t bi = 0; bi < B; ++bi) {
        for (int64_t co = 0; co < Cout; ++co) {
          const S* gr = g + (bi * Cout + co) * T;
          for (int64_t ci = 0; ci < Cin; ++ci) {
            S* xr = gx.data() + (bi * Cin + ci) * T;
            const S* wr = wv.data() + (co * Cin + ci) * K;
            for (int64_t k = 0; k < K; ++k) {
              const S wk = wr[k];
              const int64_t off = k - pad;
              const int64_t lo = std::max<int64_t>(0, -off);
              const int64_t hi = std::min<int64_t>(T, T - off);
              for (int64_t t = lo; t < hi; ++t) xr[t + off] += wk * gr[t];
            }
          }
        }
      }
      xn->accumulate(gx);
    }
    if (wn->requires_grad) {
      Tensor<S> gw = Tensor<S>::zeros(wv.shape());
      for (int64_t bi = 0; bi < B; ++bi) {
        for (int64_t co = 0; co < Cout; ++co) {
          const S* gr = g + (bi * Cout + co) * T;
          for (int64_t ci = 0; ci < Cin; ++ci) {
            const S* xr = xv.data() + (bi * Cin + ci) * T;
            S* wr = gw.data() + (co * Cin + ci) * K;
            for (int64_t k = 0; k < K; ++k) {
              const int64_t off = k - pad;
              const int64_t lo = std::max<int64_t>(0, -off);
              const int64_t hi = std::min<int64_t>(T, T - off);
              S acc = 0;
              for (int64_t t = lo; t < hi; ++t) acc += gr[t] * xr[t + off];
              wr[k] += acc;
            }
          }
        }
      }
      wn->accumulate(gw);
    }
    if (bn && bn->requires_grad) {
      Tensor<S> gb = Tensor<S>::zeros({Cout});
      for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t co = 0; co < Cout; ++co) {
          const S* gr = g + (bi * Cout + co) * T;
          for (int64_t t = 0; t < T; ++t) gb.data()[co] += gr[t];
        }
      bn->accumulate(gb);
    }
  });
}

// ---------------------------------------------------------------------------
// Layer normalization over the trailing dim (population variance + eps)
// ---------------------------------------------------------------------------

template <class S>
Var<S> layernorm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps) {
  const int64_t D = x.shape().back();
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
    throw ShapeError("layernorm: gamma/beta must be [" + std::to_string(D) + "]");
  }
  const int64_t rows = x.value().numel() / D;
  Tensor<S> out(x.shape());
  Tensor<S> xhat(x.shape());      // saved for backward
  Tensor<S> inv_std({rows});
  const S* px = x.value().data();
  const S* pg = gamma.value().data();
  const S* pbeta = beta.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * D;
    S mean = 0;
    for (int64_t i = 0; i < D; ++i) mean += xr[i];
    mean /= static_cast<S>(D);
    S var = 0;
    for (int64_t i = 0; i < D; ++i) {
      S d = xr[i] - mean;
      var += d * d;
    }
    var /= static_cast<S>(D);
    const S istd = S(1) / std::sqrt(var + eps);
    inv_std.data()[r] = istd;
    S* hr = xhat.data() + r * D;
    S* orow = out.data() + r * D;
    for (int64_t i = 0; i < D; ++i) {
      hr[i] = (xr[i] - mean) * istd;
      orow[i] = hr[i] * pg[i] + pbeta[i];
    }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  Tensor<S> gv = gamma.value();
  return detail::make_op_node<S>(std::move(out), {xn, gn, bn},
                                 [xn, gn, bn, gv, xhat, inv_std, rows, D](Node<S>& self) {
    const S* g = self.grad.data();
    if (xn->requires_grad) {
      Tensor<S> gx(xn->value.shape());
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = g + r * D;
        const S* hr = xhat.data() + r * D;
        S sum_gy = 0, sum_gyh = 0;
        for (int64_t i = 0; i < D; ++i) {
          const S gy = gr[i] * gv.data()[i];
          sum_gy += gy;
          sum_gyh += gy * hr[i];
        }
        const S istd = inv_std.data()[r];
        S* xr = gx.data() + r * D;
        for (int64_t i = 0; i < D; ++i) {
          const S gy = gr[i] * gv.data()[i];
          xr[i] = istd * (gy - sum_gy / static_cast<S>(D) -
                          hr[i] * sum_gyh / static_cast<S>(D));
        }
      }
      xn->accumulate(gx);
    }
    if (gn->requires_grad) {
      Tensor<S> gg = Tensor<S>::zeros({D});
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = g + r * D;
        const S* hr = xhat.data() + r * D;
        for (int64_t i = 0; i < D; ++i) gg.data()[i] += gr[i] * hr[i];
      }
      gn->accumulate(gg);
    }
    if (bn->requires_grad) {
      Tensor<S> gb = Tensor<S>::zeros({D});
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = g + r * D;
        for (int64_t i = 0; i < D; ++i) gb.data()[i] += gr[i];
      }
      bn->accumulate(gb);
    }
  });
}

// ---------------------------------------------------------------------------
// Max pooling over time; gradient routes to the first argmax of each window
// ---------------------------------------------------------------------------

template <class S>
Var<S> max_pool1d(const Var<S>& x, int64_t k, int64_t stride) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("max_pool1d: expected [B,C,T]");
  const int64_t B = xs[0], C = xs[1], T = xs[2];
  if (T < k) {
    throw ShapeError("max_pool1d: T=" + std::to_string(T) + " shorter than window " +
                     std::to_string(k));
  }
  const int64_t To = (T - k) / stride + 1;
  Tensor<S> out({B, C, To});
  auto argmax = std::make_shared<std::vector<int64_t>>(
      static_cast<std::size_t>(B * C * To));
  const S* px = x.value().data();
  for (int64_t r = 0; r < B * C; ++r) {
    const S* xr = px + r * T;
    S* orow = out.data() + r * To;
    for (int64_t o = 0; o < To; ++o) {
      const int64_t start = o * stride;
      int64_t best = start;
      S bv = xr[start];
      for (int64_t j = 1; j < k; ++j) {
        if (xr[start + j] > bv) {
          bv = xr[start + j];
          best = start + j;
        }
      }
      orow[o] = bv;
      (*argmax)[static_cast<std::size_t>(r * To + o)] = best;
    }
  }
  auto xn = x.node();
  Shape xshape = xs;
  return detail::make_op_node<S>(std::move(out), {xn},
                                 [xn, xshape, argmax, T, To, B, C](Node<S>& self) {
    Tensor<S> gx = Tensor<S>::zeros(xshape);
    const S* g = self.grad.data();
    for (int64_t r = 0; r < B * C; ++r) {
      for (int64_t o = 0; o < To; ++o) {
        gx.data()[r * T + (*argmax)[static_cast<std::size_t>(r * To + o)]] +=
            g[r * To + o];
      }
    }
    xn->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------
// Parameter-free linear upsampling with aligned endpoints
// ---------------------------------------------------------------------------

template <class S>
Var<S> interp_upsample(const Var<S>& x, int64_t t_out) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("interp_upsample: expected [B,C,T]");
  const int64_t T = xs[2];
  if (T < 2 || t_out < 2) throw ShapeError("interp_upsample: T and T_out must be >= 2");
  const int64_t rows = xs[0] * xs[1];
  Tensor<S> out({xs[0], xs[1], t_out});

  // Precomputed in double so exact grid hits stay exact.
  std::vector<int64_t> lo(static_cast<std::size_t>(t_out));
  std::vector<S> frac(static_cast<std::size_t>(t_out));
  for (int64_t j = 0; j < t_out; ++j) {
    double pos = static_cast<double>(j) * static_cast<double>(T - 1) /
                 static_cast<double>(t_out - 1);
    int64_t l = static_cast<int64_t>(pos);
    if (l >= T - 1) l = T - 2;
    lo[static_cast<std::size_t>(j)] = l;
    frac[static_cast<std::size_t>(j)] = static_cast<S>(pos - static_cast<double>(l));
  }
  const S* px = x.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * T;
    S* orow = out.data() + r * t_out;
    for (int64_t j = 0; j < t_out; ++j) {
      const int64_t l = lo[static_cast<std::size_t>(j)];
      const S w = frac[static_cast<std::size_t>(j)];
      orow[j] = (S(1) - w) * xr[l] + w * xr[l + 1];
    }
  }
  auto xn = x.node();
  Shape xshape = xs;
  auto lo_s = std::make_shared<std::vector<int64_t>>(std::move(lo));
  auto fr_s = std::make_shared<std::vector<S>>(std::move(frac));
  return detail::make_op_node<S>(std::move(out), {xn},
                                 [xn, xshape, lo_s, fr_s, rows, T, t_out](Node<S>& self) {
    Tensor<S> gx = Tensor<S>::zeros(xshape);
    const S* g = self.grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      S* xr = gx.data() + r * T;
      const S* gr = g + r * t_out;
      for (int64_t j = 0; j < t_out; ++j) {
        const int64_t l = (*lo_s)[static_cast<std::size_t>(j)];
        const S w = (*fr_s)[static_cast<std::size_t>(j)];
        xr[l] += (S(1) - w) * gr[j];
        xr[l + 1] += w * gr[j];
      }
    }
    xn->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------
// rFFT magnitudes along time: [B,C,T] -> [B,C,floor(T/2)+1], unnormalized
// ---------------------------------------------------------------------------

template <class S>
Var<S> rfft_mag(const Var<S>& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("rfft_mag: expected [B,C,T]");
  const int64_t T = xs[2];
  if (T < 2) throw ShapeError("rfft_mag: T must be >= 2");
  const int64_t rows = xs[0] * xs[1];
  const int64_t bins = T / 2 + 1;
  Tensor<S> out({xs[0], xs[1], bins});
  // Re/im per row saved in double for the pull-back.
  auto spectra = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(rows * bins * 2));
  std::vector<double> rowbuf(static_cast<std::size_t>(T));
  const S* px = x.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t t = 0; t < T; ++t) rowbuf[static_cast<std::size_t>(t)] =
        static_cast<double>(px[r * T + t]);
    std::vector<double> sp = fft::rfft(rowbuf.data(), T);
    std::copy(sp.begin(), sp.end(), spectra->begin() + r * bins * 2);
    S* orow = out.data() + r * bins;
    for (int64_t k = 0; k < bins; ++k) {
      const double re = sp[static_cast<std::size_t>(2 * k)];
      const double im = sp[static_cast<std::size_t>(2 * k + 1)];
      orow[k] = static_cast<S>(std::sqrt(re * re + im * im));
    }
  }
  auto xn = x.node();
  Shape xshape = xs;
  return detail::make_op_node<S>(std::move(out), {xn},
                                 [xn, xshape, spectra, rows, T, bins](Node<S>& self) {
    Tensor<S> gx = Tensor<S>::zeros(xshape);
    const S* g = self.grad.data();
    const double theta0 = 6.283185307179586 / static_cast<double>(T);
    for (int64_t r = 0; r < rows; ++r) {
      // d|F_k|/d(re,im) = (re,im)/|F_k|; then chain through the DFT matrix.
      std::vector<double> gre(static_cast<std::size_t>(bins));
      std::vector<double> gim(static_cast<std::size_t>(bins));
      for (int64_t k = 0; k < bins; ++k) {
        const double re = (*spectra)[static_cast<std::size_t>((r * bins + k) * 2)];
        const double im = (*spectra)[static_cast<std::size_t>((r * bins + k) * 2 + 1)];
        const double mag = std::sqrt(re * re + im * im);
        const double go = static_cast<double>(g[r * bins + k]);
        if (mag > 1e-300) {
          gre[static_cast<std::size_t>(k)] = go * re / mag;
          gim[static_cast<std::size_t>(k)] = go * im / mag;
        } else {
          gre[static_cast<std::size_t>(k)] = 0.0;
          gim[static_cast<std::size_t>(k)] = 0.0;
        }
      }
      S* xr = gx.data() + r * T;
      for (int64_t k = 0; k < bins; ++k) {
        const double gr_k = gre[static_cast<std::size_t>(k)];
        const double gi_k = gim[static_cast<std::size_t>(k)];
        if (gr_k == 0.0 && gi_k == 0.0) continue;
        const double step = theta0 * static_cast<double>(k);
        const double cs = std::cos(step), sn = std::sin(step);
        double c = 1.0, s = 0.0;  // rotates through exp(i*step*t)
        for (int64_t t = 0; t < T; ++t) {
          xr[t] += static_cast<S>(gr_k * c - gi_k * s);
          const double cn = c * cs - s * sn;
          s = c * sn + s * cs;
          c = cn;
        }
      }
    }
    xn->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------
// Softmax over the trailing dim
// ---------------------------------------------------------------------------

template <class S>
Var<S> softmax_lastdim(const Var<S>& x) {
  const int64_t D = x.shape().back();
  const int64_t rows = x.value().numel() / D;
  Tensor<S> out(x.shape());
  const S* px = x.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * D;
    S* orow = out.data() + r * D;
    S m = xr[0];
    for (int64_t i = 1; i < D; ++i) m = std::max(m, xr[i]);
    S z = 0;
    for (int64_t i = 0; i < D; ++i) {
      orow[i] = std::exp(xr[i] - m);
      z += orow[i];
    }
    for (int64_t i = 0; i < D; ++i) orow[i] /= z;
  }
  auto xn = x.node();
  Tensor<S> ov = out;
  return detail::make_op_node<S>(std::move(out), {xn},
                                 [xn, ov, rows, D](Node<S>& self) {
    Tensor<S> gx(ov.shape());
    const S* g = self.grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      const S* orow = ov.data() + r * D;
      const S* gr = g + r * D;
      S dot = 0;
      for (int64_t i = 0; i < D; ++i) dot += gr[i] * orow[i];
      S* xr = gx.data() + r * D;
      for (int64_t i = 0; i < D; ++i) xr[i] = orow[i] * (gr[i] - dot);
    }
    xn->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------
// Batched matmul: a[*, M, K] @ b[*, K, N]; _nt variant takes b[*, N, K]
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void mm_acc(const S* a, const S* b, S* o, int64_t M, int64_t K, int64_t N,
            bool trans_b) {
  // o[M,N] += a[M,K] @ (trans_b ? b[N,K]^T : b[K,N])
  if (trans_b) {
    for (int64_t i = 0; i < M; ++i) {
      for (int64_t j = 0; j < N; ++j) {
        o[i * N + j] += dot16(a + i * K, b + j * K, K);
      }
    }
  } else {
    for (int64_t i = 0; i < M; ++i) {
      S* orow = o + i * N;
      const S* ar = a + i * K;
      for (int64_t k = 0; k < K; ++k) {
        const S av = ar[k];
        const S* br = b + k * N;
        for (int64_t j = 0; j < N; ++j) orow[j] += av * br[j];
      }
    }
  }
}

}  // namespace detail

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b, bool trans_b = false) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || as.size() != bs.size()) {
    throw ShapeError("matmul: rank mismatch " + shape_str(as) + " vs " + shape_str(bs));
  }
  for (std::size_t i = 0; i + 2 < as.size(); ++i) {
    if (as[i] != bs[i]) throw ShapeError("matmul: batch dims differ");
  }
  const int64_t M = as[as.size() - 2];
  const int64_t K = as[as.size() - 1];
  const int64_t N = trans_b ? bs[bs.size() - 2] : bs[bs.size() - 1];
  const int64_t Kb = trans_b ? bs[bs.size() - 1] : bs[bs.size() - 2];
  if (K != Kb) throw ShapeError("matmul: inner dims differ");
  const int64_t batch = shape_numel(as) / (M * K);
  Shape os(as.begin(), as.end() - 2);
  os.push_back(M);
  os.push_back(N);
  Tensor<S> out = Tensor<S>::zeros(os);
  const S* pa = a.value().data();
  const S* pb = b.value().data();
  for (int64_t g = 0; g < batch; ++g) {
    detail::mm_acc(pa + g * M * K, pb + g * K * N, out.data() + g * M * N, M, K, N,
                   trans_b);
  }
  auto an = a.node();
  auto bn = b.node();
  Tensor<S> av = a.value();
  Tensor<S> bv = b.value();
  return detail::make_op_node<S>(std::move(out), {an, bn},
                                 [an, bn, av, bv, batch, M, K, N, trans_b](Node<S>& self) {
    const S* g = self.grad.data();
    if (an->requires_grad) {
      Tensor<S> ga = Tensor<S>::zeros(av.shape());
      for (int64_t q = 0; q < batch; ++q) {
        const S* gq = g + q * M * N;
        const S* bq = bv.data() + q * K * N;
        S* aq = ga.data() + q * M * K;
        if (trans_b) {
          // ga[M,K] += g[M,N] @ b[N,K]
          detail::mm_acc(gq, bq, aq, M, N, K, false);
        } else {
          // ga[M,K] += g[M,N] @ b[K,N]^T
          detail::mm_acc(gq, bq, aq, M, N, K, true);
        }
      }
      an->accumulate(ga);
    }
    if (bn->requires_grad) {
      Tensor<S> gb = Tensor<S>::zeros(bv.shape());
      for (int64_t q = 0; q < batch; ++q) {
        const S* gq = g + q * M * N;
        const S* aq = av.data() + q * M * K;
        S* bq = gb.data() + q * K * N;
        if (trans_b) {
          // gb[N,K] += g^T[N,M] @ a[M,K]
          for (int64_t j = 0; j < N; ++j)
            for (int64_t i = 0; i < M; ++i) {
              const S gv = gq[i * N + j];
              const S* ar = aq + i * K;
              S* br = bq + j * K;
              for (int64_t k = 0; k < K; ++k) br[k] += gv * ar[k];
            }
        } else {
          // gb[K,N] += a^T[K,M] @ g[M,N]
          for (int64_t i = 0; i < M; ++i) {
            const S* ar = aq + i * K;
            const S* gr = gq + i * N;
            for (int64_t k = 0; k < K; ++k) {
              const S avk = ar[k];
              S* br = bq + k * N;
              for (int64_t j = 0; j < N; ++j) br[j] += avk * gr[j];
            }
          }
        }
      }
      bn->accumulate(gb);
    }
  });
}

// ---------------------------------------------------------------------------
// Head split/merge for attention: [B,T,H*P] <-> [B,H,T,P]
// ---------------------------------------------------------------------------

template <class S>
Var<S> split_heads(const Var<S>& x, int64_t heads) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 || xs[2] % heads != 0) {
    throw ShapeError("split_heads: expected [B,T,D] with D divisible by heads");
  }
  const int64_t B = xs[0], T = xs[1], P = xs[2] / heads;
  Tensor<S> out({B, heads, T, P});
  const S* px = x.value().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t h = 0; h < heads; ++h) {
        const S* src = px + ((b * T + t) * heads + h) * P;
        S* dst = out.data() + (((b * heads + h) * T) + t) * P;
        std::copy(src, src + P, dst);
      }
  auto xn = x.node();
  return detail::make_op_node<S>(std::move(out), {xn},
                                 [xn, B, T, P, heads](Node<S>& self) {
    Tensor<S> gx(xn->value.shape());
    const S* g = self.grad.data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < T; ++t)
        for (int64_t h = 0; h < heads; ++h) {
          const S* src = g + (((b * heads + h) * T) + t) * P;
          S* dst = gx.data() + ((b * T + t) * heads + h) * P;
          std::copy(src, src + P, dst);
        }
    xn->accumulate(gx);
  });
}

template <class S>
Var<S> merge_heads(const Var<S>& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("merge_heads: expected [B,H,T,P]");
  const int64_t B = xs[0], H = xs[1], T = xs[2], P = xs[3];
  Tensor<S> out({B, T, H * P});
  const S* px = x.value().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t t = 0; t < T; ++t) {
        const S* src = px + (((b * H + h) * T) + t) * P;
        S* dst = out.data() + ((b * T + t) * H + h) * P;
        std::copy(src, src + P, dst);
      }
  auto xn = x.node();
  return detail::make_op_node<S>(std::move(out), {xn},
                                 [xn, B, H, T, P](Node<S>& self) {
    Tensor<S> gx(xn->value.shape());
    const S* g = self.grad.data();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t t = 0; t < T; ++t) {
          const S* src = g + ((b * T + t) * H + h) * P;
          S* dst = gx.data() + (((b * H + h) * T) + t) * P;
          std::copy(src, src + P, dst);
        }
    xn->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------
// Time padding/cropping for inputs whose T is not divisible by the pools
// ---------------------------------------------------------------------------

template <class S>
Var<S> pad_time(const Var<S>& x, int64_t t_out) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("pad_time: expected [B,C,T]");
  const int64_t T = xs[2];
  if (t_out < T) throw ShapeError("pad_time: target shorter than input");
  if (t_out == T) return x;
  const int64_t rows = xs[0] * xs[1];
  Tensor<S> out = Tensor<S>::zeros({xs[0], xs[1], t_out});
  const S* px = x.value().data();
  for (int64_t r = 0; r < rows; ++r)
    std::copy(px + r * T, px + (r + 1) * T, out.data() + r * t_out);
  auto xn = x.node();
  return detail::make_op_node<S>(std::move(out), {xn},
                                 [xn, rows, T, t_out](Node<S>& self) {
    Tensor<S> gx(xn->value.shape());
    const S* g = self.grad.data();
    for (int64_t r = 0; r < rows; ++r)
      std::copy(g + r * t_out, g + r * t_out + T, gx.data() + r * T);
    xn->accumulate(gx);
  });
}

template <class S>
Var<S> crop_time(const Var<S>& x, int64_t t_out) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("crop_time: expected [B,C,T]");
  const int64_t T = xs[2];
  if (t_out > T) throw ShapeError("crop_time: target longer than input");
  if (t_out == T) return x;
  const int64_t rows = xs[0] * xs[1];
  Tensor<S> out({xs[0], xs[1], t_out});
  const S* px = x.value().data();
  for (int64_t r = 0; r < rows; ++r)
    std::copy(px + r * T, px + r * T + t_out, out.data() + r * t_out);
  auto xn = x.node();
  return detail::make_op_node<S>(std::move(out), {xn},
                                 [xn, rows, T, t_out](Node<S>& self) {
    Tensor<S> gx = Tensor<S>::zeros(xn->value.shape());
    const S* g = self.grad.data();
    for (int64_t r = 0; r < rows; ++r)
      std::copy(g + r * t_out, g + (r + 1) * t_out, gx.data() + r * T);
    xn->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------
// Mean cross-entropy from logits [B, K] against integer labels
// ---------------------------------------------------------------------------

template <class S>
Var<S> cross_entropy_logits(const Var<S>& logits, const std::vector<int>& labels) {
  const Shape& ls = logits.shape();
  if (ls.size() != 2) throw ShapeError("cross_entropy_logits: expected [B,K]");
  const int64_t B = ls[0], K = ls[1];
  if (static_cast<int64_t>(labels.size()) != B) {
    throw ShapeError("cross_entropy_logits: label count mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= K)
      throw ShapeError("cross_entropy_logits: label " + std::to_string(y) +
                       " out of range [0," + std::to_string(K) + ")");
  }
  Tensor<S> probs({B, K});
  const S* pl = logits.value().data();
  S loss = 0;
  for (int64_t b = 0; b < B; ++b) {
    const S* lr = pl + b * K;
    S m = lr[0];
    for (int64_t k = 1; k < K; ++k) m = std::max(m, lr[k]);
    S z = 0;
    S* pr = probs.data() + b * K;
    for (int64_t k = 0; k < K; ++k) {
      pr[k] = std::exp(lr[k] - m);
      z += pr[k];
    }
    for (int64_t k = 0; k < K; ++k) pr[k] /= z;
    loss -= std::log(std::max(pr[labels[static_cast<std::size_t>(b)]],
                              std::numeric_limits<S>::min()));
  }
  loss /= static_cast<S>(B);
  auto ln = logits.node();
  auto labs = std::make_shared<std::vector<int>>(labels);
  return detail::make_op_node<S>(Tensor<S>::scalar(loss), {ln},
                                 [ln, probs, labs, B, K](Node<S>& self) {
    const S g0 = self.grad.data()[0] / static_cast<S>(B);
    Tensor<S> gx({B, K});
    for (int64_t b = 0; b < B; ++b) {
      const S* pr = probs.data() + b * K;
      S* gr = gx.data() + b * K;
      for (int64_t k = 0; k < K; ++k) gr[k] = g0 * pr[k];
      gr[(*labs)[static_cast<std::size_t>(b)]] -= g0;
    }
    ln->accumulate(gx);
  });
}

}  // namespace eegm2
