#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <sstream>

#include "eegm2/gradcheck.hpp"
#include "eegm2/memory.hpp"
#include "eegm2/nn.hpp"
#include "eegm2/ops.hpp"
#include "eegm2/rng.hpp"
#include "eegm2/serialize.hpp"

using namespace eegm2;

namespace {

// Independent O(T^2) DFT oracle for the spectral ops.
std::vector<double> dft_magnitudes(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<double> mags(n / 2 + 1);
  for (std::size_t k = 0; k < mags.size(); ++k) {
    double re = 0, im = 0;
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = 2.0 * M_PI * static_cast<double>(k * t) / static_cast<double>(n);
      re += x[t] * std::cos(ang);
      im -= x[t] * std::sin(ang);
    }
    mags[k] = std::hypot(re, im);
  }
  return mags;
}

Var<double> leaf_of(std::vector<double> v, Shape s) {
  return Var<double>::leaf(Tensor<double>::from(v, std::move(s)));
}

Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * scale;
  return t;
}

}  // namespace

TEST_CASE("linear identity and hand example") {
  auto x = leaf_of({1, 2}, {1, 2});
  auto W = leaf_of({1, 0, 0, 1}, {2, 2});
  auto b = leaf_of({0, 0}, {2});
  auto y = linear(x, W, b);
  CHECK(y.value().data()[0] == doctest::Approx(1.0));
  CHECK(y.value().data()[1] == doctest::Approx(2.0));

  auto W2 = leaf_of({1, 1, 0, 1}, {2, 2});
  auto b2 = leaf_of({1, 0}, {2});
  auto y2 = linear(x, W2, b2);
  CHECK(y2.value().data()[0] == doctest::Approx(4.0));
  CHECK(y2.value().data()[1] == doctest::Approx(2.0));
}

TEST_CASE("linear rejects dim mismatch") {
  auto x = leaf_of({1, 2, 3}, {1, 3});
  auto W = leaf_of({1, 0, 0, 1}, {2, 2});
  auto b = leaf_of({0, 0}, {2});
  CHECK_THROWS_AS(linear(x, W, b), ShapeError);
}

TEST_CASE("conv1d identity kernel and sliding window") {
  // K=1 identity over channels
  auto x = leaf_of({1, 2, 3, 4}, {1, 1, 4});
  auto w = leaf_of({1}, {1, 1, 1});
  auto b = leaf_of({0}, {1});
  auto y = conv1d(x, w, b);
  for (int i = 0; i < 4; ++i) CHECK(y.value().data()[i] == doctest::Approx(x.value().data()[i]));

  // cross-correlation with zero padding: x=[0,0,1,0,0], w=[1,2,3] -> [0,3,2,1,0]
  auto x2 = leaf_of({0, 0, 1, 0, 0}, {1, 1, 5});
  auto w2 = leaf_of({1, 2, 3}, {1, 1, 3});
  auto y2 = conv1d(x2, w2, b);
  const double expect[5] = {0, 3, 2, 1, 0};
  for (int i = 0; i < 5; ++i) CHECK(y2.value().data()[i] == doctest::Approx(expect[i]));
}

TEST_CASE("conv1d gradient matches finite differences") {
  Rng rng(7);
  auto x = Var<double>::leaf(random_tensor({2, 3, 8}, rng));
  auto w = Var<double>::leaf(random_tensor({4, 3, 3}, rng));
  auto b = Var<double>::leaf(random_tensor({4}, rng));
  auto f = [&]() { return sum_all(conv1d(x, w, b)); };
  CHECK(grad_check<double>(f, {x, w, b}, 1e-5) < 1e-4);
}

TEST_CASE("layernorm zero-variance, hand case, affine override") {
  auto g1 = leaf_of({1, 1}, {2});
  auto b0 = leaf_of({0, 0}, {2});
  auto c = leaf_of({5, 5}, {1, 2});
  auto y = layernorm(c, g1, b0, 1e-5);
  CHECK(y.value().data()[0] == doctest::Approx(0.0));
  CHECK(y.value().data()[1] == doctest::Approx(0.0));

  auto x = leaf_of({1, 3}, {1, 2});
  auto y2 = layernorm(x, g1, b0, 0.0);
  CHECK(y2.value().data()[0] == doctest::Approx(-1.0));
  CHECK(y2.value().data()[1] == doctest::Approx(1.0));

  auto g0 = leaf_of({0, 0}, {2});
  auto bc = leaf_of({2.5, 2.5}, {2});
  auto y3 = layernorm(x, g0, bc, 1e-5);
  CHECK(y3.value().data()[0] == doctest::Approx(2.5));
  CHECK(y3.value().data()[1] == doctest::Approx(2.5));
}

TEST_CASE("layernorm gradient") {
  Rng rng(11);
  auto x = Var<double>::leaf(random_tensor({3, 6}, rng));
  auto g = Var<double>::leaf(random_tensor({6}, rng));
  auto b = Var<double>::leaf(random_tensor({6}, rng));
  auto f = [&]() { return mean_all(mul(layernorm(x, g, b, 1e-5), layernorm(x, g, b, 1e-5))); };
  CHECK(grad_check<double>(f, {x, g, b}, 1e-6) < 1e-4);
}

TEST_CASE("max_pool1d window maxima, constant, identity") {
  auto x = leaf_of({1, 4, 2, 3}, {1, 1, 4});
  auto y = max_pool1d(x, 2, 2);
  CHECK(y.value().data()[0] == doctest::Approx(4.0));
  CHECK(y.value().data()[1] == doctest::Approx(3.0));

  auto c = leaf_of({2, 2, 2, 2}, {1, 1, 4});
  auto yc = max_pool1d(c, 2, 2);
  CHECK(yc.value().data()[0] == doctest::Approx(2.0));
  CHECK(yc.value().data()[1] == doctest::Approx(2.0));

  auto yi = max_pool1d(x, 1, 1);
  for (int i = 0; i < 4; ++i) CHECK(yi.value().data()[i] == doctest::Approx(x.value().data()[i]));

  auto tiny = leaf_of({1}, {1, 1, 1});
  CHECK_THROWS_AS(max_pool1d(tiny, 2, 2), ShapeError);
}

TEST_CASE("max_pool1d gradient routes to first argmax on ties") {
  auto x = leaf_of({3, 3, 1, 2}, {1, 1, 4});
  auto y = sum_all(max_pool1d(x, 2, 2));
  backward(y);
  auto g = x.grad();
  CHECK(g.data()[0] == doctest::Approx(1.0));  // first of the tied pair
  CHECK(g.data()[1] == doctest::Approx(0.0));
  CHECK(g.data()[2] == doctest::Approx(0.0));
  CHECK(g.data()[3] == doctest::Approx(1.0));
}

TEST_CASE("interp_upsample identity, ramp, align-endpoints") {
  auto x = leaf_of({0, 2}, {1, 1, 2});
  auto y = interp_upsample(x, 3);
  CHECK(y.value().data()[0] == doctest::Approx(0.0));
  CHECK(y.value().data()[1] == doctest::Approx(1.0));
  CHECK(y.value().data()[2] == doctest::Approx(2.0));

  auto x2 = leaf_of({0, 3, 6}, {1, 1, 3});
  auto y2 = interp_upsample(x2, 5);
  const double expect[5] = {0, 1.5, 3, 4.5, 6};
  for (int i = 0; i < 5; ++i) CHECK(y2.value().data()[i] == doctest::Approx(expect[i]));

  auto yi = interp_upsample(x2, 3);
  for (int i = 0; i < 3; ++i) CHECK(yi.value().data()[i] == doctest::Approx(x2.value().data()[i]));
}

TEST_CASE("interp_upsample exact inverse at original grid points") {
  Rng rng(3);
  auto x = Var<double>::leaf(random_tensor({2, 3, 9}, rng));
  // T_out - 1 = 3 * (T - 1)
  auto up = interp_upsample(x, 25);
  for (int64_t r = 0; r < 6; ++r) {
    for (int64_t j = 0; j < 9; ++j) {
      CHECK(up.value().data()[r * 25 + j * 3] == x.value().data()[r * 9 + j]);
    }
  }
}

TEST_CASE("interp_upsample gradient") {
  Rng rng(5);
  auto x = Var<double>::leaf(random_tensor({1, 2, 5}, rng));
  auto f = [&]() { return mean_all(mul(interp_upsample(x, 11), interp_upsample(x, 11))); };
  CHECK(grad_check<double>(f, {x}, 1e-6) < 1e-4);
}

TEST_CASE("rfft_mag trivial and derived examples") {
  auto z = leaf_of({0, 0, 0, 0}, {1, 1, 4});
  auto mz = rfft_mag(z);
  for (int i = 0; i < 3; ++i) CHECK(mz.value().data()[i] == doctest::Approx(0.0));

  auto ones = leaf_of({1, 1, 1, 1}, {1, 1, 4});
  auto mo = rfft_mag(ones);
  CHECK(mo.value().data()[0] == doctest::Approx(4.0));
  CHECK(mo.value().data()[1] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(mo.value().data()[2] == doctest::Approx(0.0).epsilon(1e-9));

  auto alt = leaf_of({1, -1, 1, -1}, {1, 1, 4});
  auto ma = rfft_mag(alt);
  CHECK(ma.value().data()[0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(ma.value().data()[1] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(ma.value().data()[2] == doctest::Approx(4.0));
}

TEST_CASE("rfft_mag matches direct DFT oracle for T in 2..64") {
  Rng rng(17);
  for (int64_t T = 2; T <= 64; ++T) {
    std::vector<double> vals(static_cast<std::size_t>(T));
    for (auto& v : vals) v = rng.normal();
    auto x = leaf_of(vals, {1, 1, T});
    auto m = rfft_mag(x);
    auto oracle = dft_magnitudes(vals);
    REQUIRE(m.value().numel() == static_cast<int64_t>(oracle.size()));
    double scale = 0.0;
    for (double v : oracle) scale = std::max(scale, std::fabs(v));
    for (std::size_t k = 0; k < oracle.size(); ++k) {
      CHECK(std::fabs(m.value().data()[static_cast<int64_t>(k)] - oracle[k]) <=
            1e-6 * std::max(1.0, scale));
    }
  }
}

TEST_CASE("rfft_mag gradient") {
  Rng rng(23);
  auto x = Var<double>::leaf(random_tensor({1, 2, 12}, rng));
  auto f = [&]() { return mean_all(mul(rfft_mag(x), rfft_mag(x))); };
  CHECK(grad_check<double>(f, {x}, 1e-6) < 1e-4);
}

TEST_CASE("activations") {
  auto x0 = leaf_of({0.0}, {1});
  CHECK(silu(x0).value().data()[0] == doctest::Approx(0.0));
  CHECK(softplus(x0).value().data()[0] == doctest::Approx(std::log(2.0)));

  Rng rng(29);
  auto x = Var<double>::leaf(random_tensor({10}, rng));
  auto fs = [&]() { return mean_all(silu(x)); };
  CHECK(grad_check<double>(fs, {x}, 1e-6) < 1e-4);
  auto fp = [&]() { return mean_all(softplus(x)); };
  CHECK(grad_check<double>(fp, {x}, 1e-6) < 1e-4);
}

TEST_CASE("transpose involution and elementwise ops") {
  Rng rng(31);
  auto x = Var<double>::leaf(random_tensor({2, 3, 4}, rng));
  auto tt = transpose_last_two(transpose_last_two(x));
  for (int64_t i = 0; i < x.value().numel(); ++i) {
    CHECK(tt.value().data()[i] == x.value().data()[i]);
  }

  auto a = Var<double>::leaf(random_tensor({5}, rng));
  auto b = Var<double>::leaf(random_tensor({5}, rng));
  auto f = [&]() { return mean_all(mul(add(a, b), sub(a, b))); };
  CHECK(grad_check<double>(f, {a, b}, 1e-6) < 1e-4);

  auto bad = Var<double>::leaf(random_tensor({4}, rng));
  CHECK_THROWS_AS(add(a, bad), ShapeError);
}

TEST_CASE("concat and backward split") {
  Rng rng(37);
  auto a = Var<double>::leaf(random_tensor({2, 2, 3}, rng));
  auto b = Var<double>::leaf(random_tensor({2, 1, 3}, rng));
  auto y = concat<double>({a, b}, 1);
  CHECK(y.shape() == Shape{2, 3, 3});
  auto f = [&]() { return mean_all(mul(concat<double>({a, b}, 1), concat<double>({a, b}, 1))); };
  CHECK(grad_check<double>(f, {a, b}, 1e-6) < 1e-4);
}

TEST_CASE("matmul and softmax gradients") {
  Rng rng(41);
  auto a = Var<double>::leaf(random_tensor({2, 3, 4}, rng));
  auto b = Var<double>::leaf(random_tensor({2, 4, 5}, rng));
  auto f1 = [&]() { return mean_all(matmul(a, b)); };
  CHECK(grad_check<double>(f1, {a, b}, 1e-6) < 1e-4);

  auto c = Var<double>::leaf(random_tensor({2, 5, 4}, rng));
  auto f2 = [&]() { return mean_all(mul(matmul(a, c, true), matmul(a, c, true))); };
  CHECK(grad_check<double>(f2, {a, c}, 1e-6) < 1e-4);

  auto s = Var<double>::leaf(random_tensor({3, 6}, rng));
  auto f3 = [&]() { return mean_all(mul(softmax_lastdim(s), softmax_lastdim(s))); };
  CHECK(grad_check<double>(f3, {s}, 1e-6) < 1e-4);
}

TEST_CASE("grad_check on quadratic and constant") {
  auto w = leaf_of({3.0}, {1});
  auto fq = [&]() { return mul(w, w); };
  CHECK(grad_check<double>(fq, {w}, 1e-6) < 1e-8);

  auto c = leaf_of({2.0}, {1});
  auto unused = leaf_of({1.0}, {1});
  auto fc = [&]() { return mul(c, Var<double>::constant(Tensor<double>::scalar(0.0))); };
  CHECK(grad_check<double>(fc, {c, unused}, 1e-6) < 1e-12);
  // unused parameter keeps an exactly-zero gradient
  auto y = fc();
  backward(y);
  CHECK(unused.grad().data()[0] == 0.0);
}

TEST_CASE("grad_check rejects non-finite objectives") {
  auto w = leaf_of({1e308}, {1});
  auto f = [&]() { return mul(mul(w, w), mul(w, w)); };
  CHECK_THROWS_AS(grad_check<double>(f, {w}, 1e-3), NumericError);
}

TEST_CASE("backward visits ops in reverse creation (topological) order") {
  auto a = leaf_of({2.0}, {1});
  auto b = mul(a, a);                 // id_b > id_a
  auto c = add(b, a);                 // id_c > id_b
  auto d = mul(c, b);
  backward(d);
  // d = (a^2 + a) * a^2 -> d' = 4a^3 + 3a^2 at a=2: 32 + 12 = 44
  CHECK(a.grad().data()[0] == doctest::Approx(44.0));
}

TEST_CASE("forward passes are bit-deterministic") {
  Rng rng(43);
  Tensor<double> base = random_tensor({2, 3, 16}, rng);
  auto run = [&]() {
    auto x = Var<double>::constant(base.clone());
    auto y = mean_all(rfft_mag(silu(x)));
    return y.value().data()[0];
  };
  const double v1 = run();
  const double v2 = run();
  CHECK(std::memcmp(&v1, &v2, sizeof(double)) == 0);
}

TEST_CASE("memory meter tracks live bytes and enforces caps") {
  auto& meter = memory::Meter::instance();
  const std::size_t before = meter.current();
  {
    Tensor<double> t({1000});
    CHECK(meter.current() >= before + 8000);
  }
  CHECK(meter.current() == before);

  memory::CapGuard cap(meter.current() + 1024);
  CHECK_THROWS_AS(Tensor<double>({100000}), OomError);
}

TEST_CASE("tensor serialization round trip") {
  Rng rng(47);
  Tensor<double> t = random_tensor({3, 5, 2}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  Tensor<double> u = read_tensor<double>(ss);
  REQUIRE(u.shape() == t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) CHECK(u.data()[i] == t.data()[i]);

  // wrong dtype rejected
  std::stringstream ss2;
  write_tensor(ss2, t);
  CHECK_THROWS_AS(read_tensor<float>(ss2), ConfigError);
}

TEST_CASE("gradcheck across random small shapes for every differentiable op") {
  Rng rng(53);
  for (int trial = 0; trial < 3; ++trial) {
    auto x = Var<double>::leaf(random_tensor({2, 2, 6}, rng));
    auto w = Var<double>::leaf(random_tensor({3, 2, 3}, rng, 0.5));
    auto b = Var<double>::leaf(random_tensor({3}, rng, 0.1));
    auto f = [&]() {
      auto y = conv1d(x, w, b);
      y = silu(y);
      y = max_pool1d(y, 2, 2);
      y = interp_upsample(y, 6);
      return mean_all(mul(y, y));
    };
    CHECK(grad_check<double>(f, {x, w, b}, 1e-5) < 1e-4);
  }
}
