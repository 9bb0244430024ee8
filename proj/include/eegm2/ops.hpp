#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "eegm2/graph.hpp"

namespace eegm2 {

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor<S> out(a.shape());
  const S* pa = a.value().data();
  const S* pb = b.value().data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op_node<S>(std::move(out), {an, bn}, [an, bn](Node<S>& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) bn->accumulate(self.grad);
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.value(), b.value(), "sub");
  Tensor<S> out(a.shape());
  const S* pa = a.value().data();
  const S* pb = b.value().data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op_node<S>(std::move(out), {an, bn}, [an, bn](Node<S>& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) {
      Tensor<S> g(self.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g.data()[i] = -self.grad.data()[i];
      bn->accumulate(g);
    }
  });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a.value(), b.value(), "mul");
  Tensor<S> out(a.shape());
  const S* pa = a.value().data();
  const S* pb = b.value().data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  auto an = a.node();
  auto bn = b.node();
  Tensor<S> av = a.value();
  Tensor<S> bv = b.value();
  return detail::make_op_node<S>(std::move(out), {an, bn},
                                 [an, bn, av, bv](Node<S>& self) {
    if (an->requires_grad) {
      Tensor<S> g(self.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i)
        g.data()[i] = self.grad.data()[i] * bv.data()[i];
      an->accumulate(g);
    }
    if (bn->requires_grad) {
      Tensor<S> g(self.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i)
        g.data()[i] = self.grad.data()[i] * av.data()[i];
      bn->accumulate(g);
    }
  });
}

template <class S>
Var<S> scale(const Var<S>& x, S c) {
  Tensor<S> out(x.shape());
  const S* px = x.value().data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = px[i] * c;
  auto xn = x.node();
  return detail::make_op_node<S>(std::move(out), {xn}, [xn, c](Node<S>& self) {
    Tensor<S> g(self.grad.shape());
    for (int64_t i = 0; i < g.numel(); ++i) g.data()[i] = self.grad.data()[i] * c;
    xn->accumulate(g);
  });
}

/// Multiplies x by s where s's shape is a prefix of x's shape; s broadcasts
/// over the trailing dims.
template <class S>
Var<S> mul_bcast(const Var<S>& x, const Var<S>& s) {
  const Shape& xs = x.shape();
  const Shape& ss = s.shape();
  if (ss.size() > xs.size() ||
      !std::equal(ss.begin(), ss.end(), xs.begin())) {
    throw ShapeError("mul_bcast: " + shape_str(ss) + " is not a prefix of " +
                     shape_str(xs));
  }
  const int64_t rows = shape_numel(ss);
  const int64_t inner = x.value().numel() / rows;
  Tensor<S> out(xs);
  const S* px = x.value().data();
  const S* ps = s.value().data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S f = ps[r];
    for (int64_t j = 0; j < inner; ++j) po[r * inner + j] = px[r * inner + j] * f;
  }
  auto xn = x.node();
  auto sn = s.node();
  Tensor<S> xv = x.value();
  Tensor<S> sv = s.value();
  return detail::make_op_node<S>(std::move(out), {xn, sn},
                                 [xn, sn, xv, sv, rows, inner](Node<S>& self) {
    if (xn->requires_grad) {
      Tensor<S> g(xv.shape());
      for (int64_t r = 0; r < rows; ++r) {
        const S f = sv.data()[r];
        for (int64_t j = 0; j < inner; ++j)
          g.data()[r * inner + j] = self.grad.data()[r * inner + j] * f;
      }
      xn->accumulate(g);
    }
    if (sn->requires_grad) {
      Tensor<S> g(sv.shape());
      for (int64_t r = 0; r < rows; ++r) {
        S acc = 0;
        for (int64_t j = 0; j < inner; ++j)
          acc += self.grad.data()[r * inner + j] * xv.data()[r * inner + j];
        g.data()[r] = acc;
      }
      sn->accumulate(g);
    }
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class S>
Var<S> silu(const Var<S>& x) {
  Tensor<S> out(x.shape());
  const S* px = x.value().data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) {
    double v = static_cast<double>(px[i]);
    po[i] = static_cast<S>(v / (1.0 + std::exp(-v)));
  }
  auto xn = x.node();
  Tensor<S> xv = x.value();
  return detail::make_op_node<S>(std::move(out), {xn}, [xn, xv](Node<S>& self) {
    Tensor<S> g(xv.shape());
    for (int64_t i = 0; i < g.numel(); ++i) {
      double v = static_cast<double>(xv.data()[i]);
      double sg = 1.0 / (1.0 + std::exp(-v));
      g.data()[i] = self.grad.data()[i] * static_cast<S>(sg * (1.0 + v * (1.0 - sg)));
    }
    xn->accumulate(g);
  });
}

template <class S>
Var<S> softplus(const Var<S>& x) {
  Tensor<S> out(x.shape());
  const S* px = x.value().data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) {
    double v = static_cast<double>(px[i]);
    po[i] = static_cast<S>(std::fmax(v, 0.0) + std::log1p(std::exp(-std::fabs(v))));
  }
  auto xn = x.node();
  Tensor<S> xv = x.value();
  return detail::make_op_node<S>(std::move(out), {xn}, [xn, xv](Node<S>& self) {
    Tensor<S> g(xv.shape());
    for (int64_t i = 0; i < g.numel(); ++i) {
      double v = static_cast<double>(xv.data()[i]);
      g.data()[i] = self.grad.data()[i] * static_cast<S>(1.0 / (1.0 + std::exp(-v)));
    }
    xn->accumulate(g);
  });
}

template <class S>
Var<S> abs_op(const Var<S>& x) {
  Tensor<S> out(x.shape());
  const S* px = x.value().data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = px[i] < S(0) ? -px[i] : px[i];
  auto xn = x.node();
  Tensor<S> xv = x.value();
  return detail::make_op_node<S>(std::move(out), {xn}, [xn, xv](Node<S>& self) {
    Tensor<S> g(xv.shape());
    for (int64_t i = 0; i < g.numel(); ++i) {
      S v = xv.data()[i];
      S sign = v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0));
      g.data()[i] = self.grad.data()[i] * sign;
    }
    xn->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Var<S> sum_all(const Var<S>& x) {
  S acc = 0;
  const S* px = x.value().data();
  for (int64_t i = 0; i < x.value().numel(); ++i) acc += px[i];
  auto xn = x.node();
  Shape xshape = x.shape();
  return detail::make_op_node<S>(Tensor<S>::scalar(acc), {xn},
                                 [xn, xshape](Node<S>& self) {
    xn->accumulate(Tensor<S>::full(xshape, self.grad.data()[0]));
  });
}

template <class S>
Var<S> mean_all(const Var<S>& x) {
  const int64_t n = x.value().numel();
  S acc = 0;
  const S* px = x.value().data();
  for (int64_t i = 0; i < n; ++i) acc += px[i];
  acc /= static_cast<S>(n);
  auto xn = x.node();
  Shape xshape = x.shape();
  return detail::make_op_node<S>(Tensor<S>::scalar(acc), {xn},
                                 [xn, xshape, n](Node<S>& self) {
    xn->accumulate(Tensor<S>::full(xshape, self.grad.data()[0] / static_cast<S>(n)));
  });
}

// ---------------------------------------------------------------------------
// Layout ops (pass-through gradients)
// ---------------------------------------------------------------------------

template <class S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  Tensor<S> out = x.value().reshaped(std::move(shape));
  auto xn = x.node();
  Shape xshape = x.shape();
  return detail::make_op_node<S>(std::move(out), {xn}, [xn, xshape](Node<S>& self) {
    xn->accumulate(self.grad.reshaped(xshape));
  });
}

/// Swaps the last two axes: [..., A, B] -> [..., B, A].
template <class S>
Var<S> transpose_last_two(const Var<S>& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("transpose_last_two: rank must be >= 2");
  const int64_t a = s[s.size() - 2];
  const int64_t b = s[s.size() - 1];
  const int64_t outer = x.value().numel() / (a * b);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor<S> out(os);
  const S* px = x.value().data();
  S* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    const S* src = px + o * a * b;
    S* dst = po + o * a * b;
    for (int64_t i = 0; i < a; ++i)
      for (int64_t j = 0; j < b; ++j) dst[j * a + i] = src[i * b + j];
  }
  auto xn = x.node();
  return detail::make_op_node<S>(std::move(out), {xn},
                                 [xn, a, b, outer](Node<S>& self) {
    Tensor<S> g(xn->value.shape());
    const S* src = self.grad.data();
    for (int64_t o = 0; o < outer; ++o) {
      const S* gs = src + o * a * b;
      S* gd = g.data() + o * a * b;
      for (int64_t j = 0; j < b; ++j)
        for (int64_t i = 0; i < a; ++i) gd[i * b + j] = gs[j * a + i];
    }
    xn->accumulate(g);
  });
}

/// Concatenates along `axis`; all other dims must agree.
template <class S>
Var<S> concat(const std::vector<Var<S>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  const Shape& s0 = xs[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
  int64_t cat_dim = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (static_cast<int>(s.size()) != rank)
      throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && s[static_cast<std::size_t>(i)] != s0[static_cast<std::size_t>(i)])
        throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " +
                         shape_str(s0) + " outside axis " + std::to_string(axis));
    }
    cat_dim += s[static_cast<std::size_t>(axis)];
  }
  Shape os = s0;
  os[static_cast<std::size_t>(axis)] = cat_dim;

  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
  int64_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= s0[static_cast<std::size_t>(i)];

  Tensor<S> out(os);
  std::vector<int64_t> offsets;  // element offset of each input inside a row
  {
    int64_t off = 0;
    for (const auto& x : xs) {
      offsets.push_back(off);
      off += x.shape()[static_cast<std::size_t>(axis)];
    }
  }
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const int64_t dk = xs[k].shape()[static_cast<std::size_t>(axis)];
    const S* src = xs[k].value().data();
    for (int64_t o = 0; o < outer; ++o) {
      S* dst = out.data() + (o * cat_dim + offsets[k]) * inner;
      std::copy(src + o * dk * inner, src + (o + 1) * dk * inner, dst);
    }
  }

  std::vector<std::shared_ptr<Node<S>>> parents;
  std::vector<int64_t> dks;
  for (const auto& x : xs) {
    parents.push_back(x.node());
    dks.push_back(x.shape()[static_cast<std::size_t>(axis)]);
  }
  auto ps = parents;
  return detail::make_op_node<S>(std::move(out), std::move(parents),
                                 [ps, dks, offsets, outer, inner, cat_dim](Node<S>& self) {
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (!ps[k]->requires_grad) continue;
      Tensor<S> g(ps[k]->value.shape());
      for (int64_t o = 0; o < outer; ++o) {
        const S* src = self.grad.data() + (o * cat_dim + offsets[k]) * inner;
        std::copy(src, src + dks[k] * inner, g.data() + o * dks[k] * inner);
      }
      ps[k]->accumulate(g);
    }
  });
}

}  // namespace eegm2
