#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>

#include "eegm2/gradcheck.hpp"
#include "eegm2/memory.hpp"
#include "eegm2/rng.hpp"
#include "eegm2/ssd.hpp"

using namespace eegm2;

namespace {

template <class S>
struct ScanInstance {
  Var<S> x, a, b, c;
};

template <class S>
ScanInstance<S> random_instance(Rng& rng, int64_t B, int64_t T, int64_t H, int64_t P,
                                int64_t N, bool per_channel) {
  auto randt = [&rng](Shape s, double lo, double hi) {
    Tensor<S> t(std::move(s));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<S>(rng.uniform(lo, hi));
    return Var<S>::leaf(std::move(t));
  };
  ScanInstance<S> inst;
  inst.x = randt({B, T, H, P}, -1.0, 1.0);
  inst.a = per_channel ? randt({B, T, H, P}, 0.05, 0.99) : randt({B, T, H}, 0.05, 0.99);
  inst.b = randt({B, T, H, N}, -1.0, 1.0);
  inst.c = randt({B, T, H, N}, -1.0, 1.0);
  return inst;
}

template <class S>
double max_rel_diff(const Tensor<S>& got, const Tensor<S>& want) {
  double worst = 0.0;
  for (int64_t i = 0; i < got.numel(); ++i) {
    const double g = static_cast<double>(got.data()[i]);
    const double w = static_cast<double>(want.data()[i]);
    worst = std::max(worst, std::fabs(g - w) / (1.0 + std::fabs(w)));
  }
  return worst;
}

}  // namespace

TEST_CASE("discretize limiting and closed-form cases") {
  SSDConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_state = 4;
  Rng rng(1);
  Mamba2Block<double> block;
  block.cfg = cfg;
  block.init(rng);

  // a_log -> -inf limit: A -> 1 (pure integrator)
  for (int64_t h = 0; h < 2; ++h) block.a_log.value().data()[h] = -40.0;
  Tensor<double> u({1, 3, 8});
  Rng rng2(2);
  for (int64_t i = 0; i < u.numel(); ++i) u.data()[i] = rng2.uniform(-1.0, 1.0);
  auto dz = block.discretize(Var<double>::constant(u));
  for (int64_t i = 0; i < dz.a.value().numel(); ++i) {
    CHECK(dz.a.value().data()[i] == doctest::Approx(1.0).epsilon(1e-12));
  }

  // dt = ln 2 with exp(a_log) = 1 gives A = 0.5 exactly
  auto dt = Var<double>::leaf(Tensor<double>::full({1, 1, 2}, std::log(2.0)));
  auto a_log = Var<double>::leaf(Tensor<double>::zeros({2}));
  auto a = decay_factors(dt, a_log);
  CHECK(a.value().data()[0] == doctest::Approx(0.5));
  CHECK(a.value().data()[1] == doctest::Approx(0.5));

  // dt -> 0: A -> 1 and effective input gain (dt * B) -> 0
  auto dt0 = Var<double>::leaf(Tensor<double>::full({1, 1, 2}, 1e-12));
  auto a0 = decay_factors(dt0, a_log);
  CHECK(a0.value().data()[0] == doctest::Approx(1.0).epsilon(1e-10));
  auto bmat = Var<double>::leaf(Tensor<double>::full({1, 1, 2, 4}, 3.0));
  auto scaled = mul_bcast(bmat, dt0);
  for (int64_t i = 0; i < scaled.value().numel(); ++i) {
    CHECK(std::fabs(scaled.value().data()[i]) < 1e-10);
  }

  // decay factors stay inside (0,1) for finite parameters
  Rng rng3(3);
  auto inst = random_instance<double>(rng3, 1, 4, 2, 4, 4, false);
  auto dtr = softplus(inst.a);  // arbitrary positive values
  auto ar = decay_factors(reshape(dtr, {1, 4, 2}), a_log);
  for (int64_t i = 0; i < ar.value().numel(); ++i) {
    CHECK(ar.value().data()[i] > 0.0);
    CHECK(ar.value().data()[i] < 1.0);
  }
}

TEST_CASE("decay_factors gradient") {
  Rng rng(5);
  Tensor<double> dtv({2, 3, 2});
  for (int64_t i = 0; i < dtv.numel(); ++i) dtv.data()[i] = rng.uniform(0.01, 0.5);
  auto dt = Var<double>::leaf(dtv);
  Tensor<double> alv({2});
  alv.data()[0] = 0.3;
  alv.data()[1] = -0.7;
  auto al = Var<double>::leaf(alv);
  auto f = [&]() { return mean_all(decay_factors(dt, al)); };
  CHECK(grad_check<double>(f, {dt, al}, 1e-6) < 1e-4);

  // per-channel mode
  Tensor<double> alp({2, 4});
  for (int64_t i = 0; i < alp.numel(); ++i) alp.data()[i] = rng.uniform(-1.0, 1.0);
  auto alc = Var<double>::leaf(alp);
  auto f2 = [&]() { return mean_all(decay_factors(dt, alc)); };
  CHECK(grad_check<double>(f2, {dt, alc}, 1e-6) < 1e-4);
}

TEST_CASE("scan_naive zero-decay is memoryless and unit case integrates") {
  // A=0: y_t = C_t B_t x_t
  Rng rng(7);
  auto inst = random_instance<double>(rng, 1, 5, 1, 2, 3, false);
  for (int64_t i = 0; i < inst.a.value().numel(); ++i) inst.a.value().data()[i] = 0.0;
  auto y = scan_naive(inst.x, inst.a, inst.b, inst.c);
  for (int64_t t = 0; t < 5; ++t) {
    for (int64_t p = 0; p < 2; ++p) {
      double cb = 0;
      for (int64_t n = 0; n < 3; ++n) {
        cb += inst.c.value().data()[(t * 1 + 0) * 3 + n] * inst.b.value().data()[(t * 1 + 0) * 3 + n];
      }
      const double want = cb * inst.x.value().data()[t * 2 + p];
      CHECK(y.value().data()[t * 2 + p] == doctest::Approx(want));
    }
  }

  // scalar A=B=C=1, x=[1,2,3] -> cumulative sum [1,3,6]
  auto x = Var<double>::leaf(Tensor<double>::from({1, 2, 3}, {1, 3, 1, 1}));
  auto a = Var<double>::leaf(Tensor<double>::full({1, 3, 1}, 1.0));
  auto b = Var<double>::leaf(Tensor<double>::full({1, 3, 1, 1}, 1.0));
  auto c = Var<double>::leaf(Tensor<double>::full({1, 3, 1, 1}, 1.0));
  auto cum = scan_naive(x, a, b, c);
  CHECK(cum.value().data()[0] == doctest::Approx(1.0));
  CHECK(cum.value().data()[1] == doctest::Approx(3.0));
  CHECK(cum.value().data()[2] == doctest::Approx(6.0));
}

TEST_CASE("scan_naive rejects non-finite state with position index") {
  auto x = Var<double>::leaf(Tensor<double>::from({1, 1e308, 1}, {1, 3, 1, 1}));
  auto a = Var<double>::leaf(Tensor<double>::full({1, 3, 1}, 1.0));
  auto b = Var<double>::leaf(Tensor<double>::full({1, 3, 1, 1}, 1e308));
  auto c = Var<double>::leaf(Tensor<double>::full({1, 3, 1, 1}, 1e308));
  try {
    scan_naive(x, a, b, c);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("time step") != std::string::npos);
  }
}

TEST_CASE("scan_chunked equals scan_naive across chunkings (spec instance)") {
  Rng rng(11);
  // The spec's random instance: B=2, T=17, d_state=4.
  auto inst = random_instance<double>(rng, 2, 17, 2, 3, 4, false);
  auto ynaive = scan_naive(inst.x, inst.a, inst.b, inst.c);
  for (int64_t chunk : {1, 2, 5, 17, 64}) {
    auto ychunk = scan_chunked(inst.x, inst.a, inst.b, inst.c, chunk);
    CHECK(max_rel_diff(ychunk.value(), ynaive.value()) < 1e-5);
  }
  // chunk=1 degenerates to the naive path bit-exactly
  auto y1 = scan_chunked(inst.x, inst.a, inst.b, inst.c, 1);
  for (int64_t i = 0; i < y1.value().numel(); ++i) {
    CHECK(y1.value().data()[i] == ynaive.value().data()[i]);
  }
}

TEST_CASE("chunked-vs-naive equivalence: random instances at both dtypes") {
  Rng rng(13);
  for (int trial = 0; trial < 12; ++trial) {
    const int64_t T = 1 + static_cast<int64_t>(rng.below(512));
    const int64_t B = 1 + static_cast<int64_t>(rng.below(2));
    const int64_t H = 1 + static_cast<int64_t>(rng.below(3));
    const int64_t P = 1 + static_cast<int64_t>(rng.below(5));
    const int64_t N = 1 + static_cast<int64_t>(rng.below(6));
    const int64_t chunk = 1 + static_cast<int64_t>(rng.below(96));
    const bool per_channel = rng.below(2) == 0;
    auto inst = random_instance<double>(rng, B, T, H, P, N, per_channel);
    auto yn = scan_naive(inst.x, inst.a, inst.b, inst.c);
    auto yc = scan_chunked(inst.x, inst.a, inst.b, inst.c, chunk);
    CHECK(max_rel_diff(yc.value(), yn.value()) < 1e-10);

    auto xf = Var<float>::constant(inst.x.value().template cast<float>());
    auto af = Var<float>::constant(inst.a.value().template cast<float>());
    auto bf = Var<float>::constant(inst.b.value().template cast<float>());
    auto cf = Var<float>::constant(inst.c.value().template cast<float>());
    auto ynf = scan_naive(xf, af, bf, cf);
    auto ycf = scan_chunked(xf, af, bf, cf, chunk);
    CHECK(max_rel_diff(ycf.value(), ynf.value()) < 1e-5);
  }
}

TEST_CASE("T=1000 chunk 64 vs 128 agree") {
  Rng rng(17);
  auto inst = random_instance<double>(rng, 1, 1000, 2, 4, 4, false);
  auto y64 = scan_chunked(inst.x, inst.a, inst.b, inst.c, 64);
  auto y128 = scan_chunked(inst.x, inst.a, inst.b, inst.c, 128);
  CHECK(max_rel_diff(y64.value(), y128.value()) < 1e-5);
}

TEST_CASE("scan is linear in x for fixed coefficient sequences") {
  Rng rng(19);
  auto inst = random_instance<double>(rng, 1, 40, 2, 3, 4, false);
  auto x2 = Var<double>::leaf(inst.x.value().clone());
  Rng rng2(23);
  for (int64_t i = 0; i < x2.value().numel(); ++i) x2.value().data()[i] = rng2.normal();
  const double alpha = 0.7, beta = -1.3;

  Tensor<double> mix(inst.x.value().shape());
  for (int64_t i = 0; i < mix.numel(); ++i) {
    mix.data()[i] = alpha * inst.x.value().data()[i] + beta * x2.value().data()[i];
  }
  auto ymix = scan_chunked(Var<double>::constant(mix), inst.a, inst.b, inst.c, 16);
  auto y1 = scan_chunked(inst.x, inst.a, inst.b, inst.c, 16);
  auto y2 = scan_chunked(x2, inst.a, inst.b, inst.c, 16);
  for (int64_t i = 0; i < ymix.value().numel(); ++i) {
    const double want = alpha * y1.value().data()[i] + beta * y2.value().data()[i];
    CHECK(std::fabs(ymix.value().data()[i] - want) / (1.0 + std::fabs(want)) < 1e-6);
  }
}

TEST_CASE("scan gradients match finite differences (both modes)") {
  Rng rng(29);
  for (bool per_channel : {false, true}) {
    auto inst = random_instance<double>(rng, 1, 9, 2, 2, 3, per_channel);
    auto f = [&]() {
      auto y = scan_chunked(inst.x, inst.a, inst.b, inst.c, 4);
      return mean_all(mul(y, y));
    };
    CHECK(grad_check<double>(f, {inst.x, inst.a, inst.b, inst.c}, 1e-6) < 1e-4);
    auto fn = [&]() {
      auto y = scan_naive(inst.x, inst.a, inst.b, inst.c);
      return mean_all(mul(y, y));
    };
    CHECK(grad_check<double>(fn, {inst.x, inst.a, inst.b, inst.c}, 1e-6) < 1e-4);
  }
}

TEST_CASE("mamba2_block: zero output projection is the identity") {
  SSDConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_state = 4;
  Rng rng(31);
  Mamba2Block<double> block;
  block.cfg = cfg;
  block.init(rng);
  for (int64_t i = 0; i < block.w_out.value().numel(); ++i) block.w_out.value().data()[i] = 0.0;
  for (int64_t i = 0; i < block.b_out.value().numel(); ++i) block.b_out.value().data()[i] = 0.0;

  Tensor<double> x({2, 8, 12});
  Rng rng2(37);
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng2.normal();
  auto y = block.forward(Var<double>::constant(x));
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.value().data()[i] == x.data()[i]);
}

TEST_CASE("mamba2_block shape contract and wrong-width rejection") {
  SSDConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.d_state = 8;
  Rng rng(41);
  Mamba2Block<float> block;
  block.cfg = cfg;
  block.init(rng);
  Tensor<float> x({2, 16, 128});
  Rng rng2(43);
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = static_cast<float>(rng2.normal());
  auto y = block.forward(Var<float>::constant(x));
  CHECK(y.shape() == Shape{2, 16, 128});

  Tensor<float> bad({2, 8, 128});
  CHECK_THROWS_AS(block.forward(Var<float>::constant(bad)), ShapeError);
}

TEST_CASE("mamba2_block end-to-end gradient (d=8, T=32)") {
  SSDConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_state = 4;
  cfg.chunk = 8;
  Rng rng(47);
  Mamba2Block<double> block;
  block.cfg = cfg;
  block.init(rng);
  Tensor<double> x({1, 8, 32});
  Rng rng2(53);
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng2.normal() * 0.5;
  std::vector<Var<double>> params = {block.gamma, block.beta, block.w_in, block.b_in,
                                     block.w_b,   block.w_c,  block.w_dt, block.b_dt,
                                     block.a_log, block.w_out, block.b_out};
  auto f = [&]() { return mean_all(block.forward(Var<double>::constant(x))); };
  CHECK(grad_check<double>(f, params, 1e-6, 6) < 1e-4);
}

TEST_CASE("attention_block: single token reduces softmax to 1") {
  Rng rng(59);
  AttentionBlock<double> blk;
  blk.d_model = 8;
  blk.n_heads = 2;
  blk.init(rng);
  Tensor<double> x({1, 8, 1});
  Rng rng2(61);
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng2.normal();
  auto y = blk.forward(Var<double>::constant(x));
  // With T=1 the attention weight is exactly 1, so the context equals v and
  // the output is x + proj(v) + FFN path; verify by replaying that algebra.
  auto xt = transpose_last_two(Var<double>::constant(x));
  auto h = layernorm(xt, blk.gamma1, blk.beta1, 1e-5);
  auto v = linear(h, blk.w_v, blk.b_v);
  auto y1 = add(xt, linear(v, blk.w_o, blk.b_o));
  auto h2 = layernorm(y1, blk.gamma2, blk.beta2, 1e-5);
  auto f = linear(silu(linear(h2, blk.w_f1, blk.b_f1)), blk.w_f2, blk.b_f2);
  auto want = transpose_last_two(add(y1, f));
  for (int64_t i = 0; i < y.value().numel(); ++i) {
    CHECK(y.value().data()[i] == doctest::Approx(want.value().data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("attention_block is permutation-equivariant over time") {
  Rng rng(67);
  AttentionBlock<double> blk;
  blk.d_model = 6;
  blk.n_heads = 2;
  blk.init(rng);
  const int64_t T = 7;
  Tensor<double> x({1, 6, T});
  Rng rng2(71);
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng2.normal();
  auto y = blk.forward(Var<double>::constant(x));

  std::vector<int64_t> perm = {3, 0, 6, 1, 5, 2, 4};
  Tensor<double> xp({1, 6, T});
  for (int64_t c = 0; c < 6; ++c)
    for (int64_t t = 0; t < T; ++t)
      xp.data()[c * T + t] = x.data()[c * T + perm[static_cast<std::size_t>(t)]];
  auto yp = blk.forward(Var<double>::constant(xp));
  for (int64_t c = 0; c < 6; ++c)
    for (int64_t t = 0; t < T; ++t) {
      CHECK(yp.value().data()[c * T + t] ==
            doctest::Approx(y.value().data()[c * T + perm[static_cast<std::size_t>(t)]])
                .epsilon(1e-10));
    }
}

TEST_CASE("attention_block gradient") {
  Rng rng(73);
  AttentionBlock<double> blk;
  blk.d_model = 4;
  blk.n_heads = 2;
  blk.init(rng);
  Tensor<double> x({1, 4, 5});
  Rng rng2(79);
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng2.normal() * 0.5;
  std::vector<Var<double>> params = {blk.w_q, blk.w_k, blk.w_v, blk.w_o,
                                     blk.w_f1, blk.w_f2, blk.gamma1, blk.beta2};
  auto f = [&]() { return mean_all(blk.forward(Var<double>::constant(x))); };
  CHECK(grad_check<double>(f, params, 1e-6, 4) < 1e-4);
}

TEST_CASE("attention activation memory grows quadratically, scan linearly") {
  Rng rng(83);
  AttentionBlock<float> attn;
  attn.d_model = 8;
  attn.n_heads = 2;
  attn.init(rng);
  SSDConfig scfg;
  scfg.d_model = 8;
  scfg.n_heads = 2;
  scfg.d_state = 8;
  Mamba2Block<float> ssm;
  ssm.cfg = scfg;
  ssm.init(rng);

  auto act_bytes = [&](auto& block, int64_t T) {
    Tensor<float> x({1, 8, T});
    Rng r(11);
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = static_cast<float>(r.uniform(-1, 1));
    auto& meter = memory::Meter::instance();
    const std::size_t baseline = meter.current();
    meter.reset_peak();
    {
      NoGradGuard ng;
      block.forward(Var<float>::constant(x));
    }
    return meter.peak() - baseline;
  };

  const double attn_ratio = static_cast<double>(act_bytes(attn, 4096)) /
                            static_cast<double>(act_bytes(attn, 1024));
  CHECK(attn_ratio > 8.0);  // quadratic T x T terms dominate
  const double ssm_ratio = static_cast<double>(act_bytes(ssm, 4096)) /
                           static_cast<double>(act_bytes(ssm, 1024));
  CHECK(ssm_ratio < 6.0);  // linear growth
}

TEST_CASE("scan_chunked wall clock stays linear as T doubles") {
  Rng rng(89);
  const int64_t H = 2, P = 4, N = 8;
  auto time_scan = [&](int64_t T) {
    auto inst = random_instance<float>(rng, 1, T, H, P, N, false);
    NoGradGuard ng;
    double best = 1e100;
    for (int rep = 0; rep < 3; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      scan_chunked(inst.x, inst.a, inst.b, inst.c, 64);
      const auto t1 = std::chrono::steady_clock::now();
      best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
    }
    return best;
  };
  time_scan(1024);  // warm caches
  double prev = time_scan(1024);
  for (int64_t T = 2048; T <= 16384; T *= 2) {
    const double cur = time_scan(T);
    CHECK(cur / (2.0 * prev) <= 1.3);  // per-element cost must not grow
    prev = cur;
  }
}
