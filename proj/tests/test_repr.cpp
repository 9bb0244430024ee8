#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "eegm2/arch.hpp"
#include "eegm2/gradcheck.hpp"
#include "eegm2/repr.hpp"
#include "eegm2/train.hpp"

using namespace eegm2;

TEST_CASE("extract_stats: constant channel") {
  auto f = Var<double>::constant(Tensor<double>::full({1, 1, 10}, 5.0));
  auto z = extract_stats(f);
  REQUIRE(z.shape() == Shape{1, 1, 9});
  const double want[9] = {5, 5, 5, 0, 5, 5, 5, 5, 5};
  for (int i = 0; i < 9; ++i) CHECK(z.value().data()[i] == doctest::Approx(want[i]));
}

TEST_CASE("extract_stats: arithmetic sequence 1..100 closed forms") {
  Tensor<double> t({1, 1, 100});
  for (int64_t i = 0; i < 100; ++i) t.data()[i] = static_cast<double>(i + 1);
  auto z = extract_stats(Var<double>::constant(t));
  const double* s = z.value().data();
  CHECK(s[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(s[1] == doctest::Approx(100.0).epsilon(1e-9));
  CHECK(s[2] == doctest::Approx(50.5).epsilon(1e-9));
  CHECK(s[3] == doctest::Approx(std::sqrt(9999.0 / 12.0)).epsilon(1e-6));  // 28.8661
  // Q(p) = 1 + 99 p under order-statistic interpolation
  CHECK(s[4] == doctest::Approx(5.95).epsilon(1e-9));
  CHECK(s[5] == doctest::Approx(25.75).epsilon(1e-9));
  CHECK(s[6] == doctest::Approx(50.5).epsilon(1e-9));
  CHECK(s[7] == doctest::Approx(75.25).epsilon(1e-9));
  CHECK(s[8] == doctest::Approx(95.05).epsilon(1e-9));
}

TEST_CASE("extract_stats: shape contract and empty axis rejection") {
  Rng rng(3);
  Tensor<double> f({4, 3, 17});
  for (int64_t i = 0; i < f.numel(); ++i) f.data()[i] = rng.normal();
  auto z = extract_stats(Var<double>::constant(f));
  CHECK(z.shape() == Shape{4, 3, 9});
  CHECK_THROWS_AS(extract_stats(Var<double>::constant(Tensor<double>({4, 3}))),
                  ShapeError);
}

TEST_CASE("extract_stats ordering invariant on 1000 random inputs") {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const int64_t T = 1 + static_cast<int64_t>(rng.below(40));
    Tensor<double> f({1, 1, T});
    for (int64_t i = 0; i < T; ++i) f.data()[i] = rng.normal() * 10.0;
    auto z = extract_stats(Var<double>::constant(f));
    const double* s = z.value().data();
    CHECK(s[0] <= s[4]);  // min <= Q05
    CHECK(s[4] <= s[5]);
    CHECK(s[5] <= s[6]);
    CHECK(s[6] <= s[7]);
    CHECK(s[7] <= s[8]);
    CHECK(s[8] <= s[1]);  // Q95 <= max
    CHECK(s[3] >= 0.0);   // std
  }
}

TEST_CASE("extract_stats is invariant under temporal permutation") {
  Rng rng(7);
  const int64_t T = 23;
  Tensor<double> f({1, 2, T});
  for (int64_t i = 0; i < f.numel(); ++i) f.data()[i] = rng.normal();
  auto z1 = extract_stats(Var<double>::constant(f));

  std::vector<int64_t> perm(static_cast<std::size_t>(T));
  for (int64_t i = 0; i < T; ++i) perm[static_cast<std::size_t>(i)] = i;
  rng.shuffle(perm.begin(), perm.end());
  Tensor<double> fp({1, 2, T});
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t t = 0; t < T; ++t)
      fp.data()[c * T + t] = f.data()[c * T + perm[static_cast<std::size_t>(t)]];
  auto z2 = extract_stats(Var<double>::constant(fp));
  for (int64_t i = 0; i < z1.value().numel(); ++i) {
    CHECK(z2.value().data()[i] == doctest::Approx(z1.value().data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("extract_stats gradient (distinct values, away from ties)") {
  Rng rng(11);
  Tensor<double> f({1, 2, 12});
  for (int64_t i = 0; i < f.numel(); ++i)
    f.data()[i] = static_cast<double>(i) * 0.37 + 0.2 * rng.uniform();
  auto v = Var<double>::leaf(f);
  auto fobj = [&]() { return mean_all(mul(extract_stats(v), extract_stats(v))); };
  CHECK(grad_check<double>(fobj, {v}, 1e-7) < 1e-4);
}

TEST_CASE("balanced_accuracy basics") {
  CHECK(balanced_accuracy({0, 1, 0, 1}, {0, 1, 0, 1}) == doctest::Approx(1.0));
  // constant majority prediction on a binary split
  CHECK(balanced_accuracy({0, 0, 0, 1}, {0, 0, 0, 0}) == doctest::Approx(0.5));
  // recalls 0.8 (8/10 of class 0) and 0.6 (3/5 of class 1) -> 0.7
  std::vector<int> yt, yp;
  for (int i = 0; i < 10; ++i) {
    yt.push_back(0);
    yp.push_back(i < 8 ? 0 : 1);
  }
  for (int i = 0; i < 5; ++i) {
    yt.push_back(1);
    yp.push_back(i < 3 ? 1 : 0);
  }
  CHECK(balanced_accuracy(yt, yp) == doctest::Approx(0.7));
  CHECK_THROWS_AS(balanced_accuracy({}, {}), ConfigError);
}

TEST_CASE("balanced_accuracy is invariant under class relabeling") {
  std::vector<int> yt = {0, 0, 1, 1, 2, 2, 2};
  std::vector<int> yp = {0, 1, 1, 1, 2, 0, 2};
  const double base = balanced_accuracy(yt, yp);
  // permutation 0->2, 1->0, 2->1
  auto relabel = [](int c) { return c == 0 ? 2 : (c == 1 ? 0 : 1); };
  std::vector<int> yt2, yp2;
  for (std::size_t i = 0; i < yt.size(); ++i) {
    yt2.push_back(relabel(yt[i]));
    yp2.push_back(relabel(yp[i]));
  }
  CHECK(balanced_accuracy(yt2, yp2) == doctest::Approx(base));
}

TEST_CASE("auroc: extremes, ties, the 3/4 pairwise case") {
  CHECK(auroc({0, 0, 1, 1}, {0.1, 0.2, 0.8, 0.9}) == doctest::Approx(1.0));
  CHECK(auroc({0, 1, 0, 1}, {0.5, 0.5, 0.5, 0.5}) == doctest::Approx(0.5));
  CHECK(auroc({0, 0, 1, 1}, {0.1, 0.4, 0.35, 0.8}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(auroc({1, 1}, {0.1, 0.2}), ConfigError);
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
  Rng rng(13);
  std::vector<int> y;
  std::vector<double> s;
  for (int i = 0; i < 50; ++i) {
    y.push_back(static_cast<int>(rng.below(2)));
    s.push_back(rng.normal());
  }
  const double base = auroc(y, s);
  std::vector<double> s2(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) s2[i] = std::exp(3.0 * s[i]) + 7.0;
  CHECK(auroc(y, s2) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("linear probe: separable toy set, near-zero gradient at optimum") {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  Rng rng(17);
  for (int i = 0; i < 60; ++i) {
    const int label = i % 2;
    const double cx = label == 0 ? -2.0 : 2.0;
    x.push_back({cx + 0.3 * rng.normal(), cx + 0.3 * rng.normal()});
    y.push_back(label);
  }
  LogisticProbe probe;
  probe.fit(x, y);
  auto pred = probe.predict(x);
  int correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
  CHECK(correct == 60);
  CHECK(probe.grad_norm(x, y) < 1e-5);

  // binary reduces to a single logistic model with scores in (0,1)
  auto sc = probe.scores(x);
  REQUIRE(sc[0].size() == 1);
  for (const auto& row : sc) {
    CHECK(row[0] > 0.0);
    CHECK(row[0] < 1.0);
  }

  std::vector<int> single(60, 1);
  LogisticProbe p2;
  CHECK_THROWS_AS(p2.fit(x, single), ConfigError);
}

TEST_CASE("probes never mutate the encoder (hash equality)") {
  ArchConfig c;
  c.in_channels = 2;
  c.stage_widths = {6, 12, 24};
  c.n_heads = 2;
  c.d_state = 4;
  Model<double> m(c, 19);
  Rng rng(23);
  Tensor<double> x({20, 2, 32});
  std::vector<int> y;
  for (int64_t i = 0; i < 20; ++i) {
    y.push_back(static_cast<int>(i % 2));
    for (int64_t j = 0; j < 2 * 32; ++j) {
      x.data()[i * 64 + j] = rng.normal() + (i % 2 ? std::sin(0.5 * j) : 0.0);
    }
  }
  const uint64_t before = m.params().content_hash();
  EvalMetrics nm = probe_nonlinear(m, x, y, x, y, 29);
  EvalMetrics lm = probe_linear(m, x, y, x, y);
  CHECK(m.params().content_hash() == before);
  CHECK(nm.balanced_acc >= 0.0);
  CHECK(lm.balanced_acc >= 0.0);
}

TEST_CASE("mlp probe separates an easy task") {
  Rng rng(31);
  const int64_t n = 80, d = 6;
  Tensor<double> x({n, d});
  std::vector<int> y;
  for (int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    y.push_back(label);
    for (int64_t j = 0; j < d; ++j) {
      x.data()[i * d + j] = rng.normal() + (label ? 2.0 : -2.0);
    }
  }
  MlpProbe<double> probe(d, 2, 37);
  probe.fit(x, y);
  CHECK(balanced_accuracy(y, probe.predict(x)) >= 0.95);
}

TEST_CASE("feature export writes one csv row per sample") {
  Tensor<double> f = Tensor<double>::from({1, 2, 3, 4}, {2, 2});
  std::ostringstream os;
  export_features_csv(os, f, {0, 1}, {"a", "b"});
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "id,label,f0,f1");
  std::getline(is, line);
  CHECK(line == "a,0,1,2");
  std::getline(is, line);
  CHECK(line == "b,1,3,4");
}
