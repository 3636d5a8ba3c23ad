#include "opendg/stylesynth.hpp"

#include <doctest.h>

#include <cmath>

using namespace opendg;
using featstats::StyleStats;
using stylesynth::MixStyleConfig;
using stylesynth::NoiseSpec;
using stylesynth::StyleBand;
using stylesynth::StyleSynthNet;

namespace {

StyleStats random_stats(int n, int c, Rng& rng) {
  StyleStats s(n, c);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < c; ++k) {
      s.mean(i, k) = rng.normal();
      s.stddev(i, k) = std::abs(rng.normal()) + 0.05;
    }
  return s;
}

}  // namespace

TEST_SUITE("stylesynth") {

TEST_CASE("network dimensions follow the 4C/3C/2C layout") {
  StyleSynthNet net(64);
  CHECK(net.fc1.in_features() == 256);
  CHECK(net.fc1.out_features() == 192);
  CHECK(net.fc2.in_features() == 192);
  CHECK(net.fc2.out_features() == 128);
  // parameter count matches the reference architecture summary
  int total = 0;
  for (const nn::Param* p : net.params()) total += static_cast<int>(p->value.size());
  CHECK(total == 74048);
}

TEST_CASE("zero-initialized final layer produces the zero style") {
  Rng rng(1);
  StyleSynthNet net(6);
  net.init(rng);
  net.fc2.weight.value.setZero();
  net.fc2.bias.value.setZero();
  StyleStats s1 = random_stats(3, 6, rng);
  StyleStats s2 = random_stats(3, 6, rng);
  StyleStats out = stylesynth::synthesize_style(net, s1, s2, {0.0, 1.0}, 99);
  CHECK(out.mean.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK(out.stddev.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("zero noise makes the forward a pure function of the stats") {
  Rng rng(2);
  StyleSynthNet net(5);
  net.init(rng);
  StyleStats s1 = random_stats(2, 5, rng);
  StyleStats s2 = random_stats(2, 5, rng);
  StyleStats a = stylesynth::synthesize_style(net, s1, s2, {0.0, 0.0}, 7);
  StyleStats b = stylesynth::synthesize_style(net, s1, s2, {0.0, 0.0}, 12345);
  CHECK((a.mean - b.mean).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK((a.stddev - b.stddev).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("same seed agrees elementwise, different seeds differ") {
  Rng rng(3);
  StyleSynthNet net(5);
  net.init(rng);
  StyleStats s1 = random_stats(2, 5, rng);
  StyleStats s2 = random_stats(2, 5, rng);
  NoiseSpec noise;  // standard normal
  StyleStats a = stylesynth::synthesize_style(net, s1, s2, noise, 7);
  StyleStats b = stylesynth::synthesize_style(net, s1, s2, noise, 7);
  StyleStats c = stylesynth::synthesize_style(net, s1, s2, noise, 8);
  CHECK((a.mean - b.mean).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK((a.stddev - b.stddev).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK((a.mean - c.mean).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("synthesized std part is nonnegative for arbitrary inputs") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    StyleSynthNet net(4);
    net.init(rng);
    StyleStats s1 = random_stats(3, 4, rng);
    StyleStats s2 = random_stats(3, 4, rng);
    StyleStats out = stylesynth::synthesize_style(net, s1, s2, {0.0, 2.0},
                                                  rng.raw());
    CHECK(out.stddev.minCoeff() >= 0.0);
    CHECK(out.mean.minCoeff() >= 0.0);  // final rectifier covers both halves
  }
}

TEST_CASE("margin loss hand cases") {
  // one instance, one channel: distances are plain absolute differences
  StyleStats synth(1, 1), s1(1, 1), s2(1, 1);
  const StyleBand wide{1e-9, 1e9};  // keeps the other three terms at zero

  SUBCASE("distance inside the band contributes zero") {
    synth.mean(0, 0) = 2.0;  // d(mean, s1.mean) = 2.0
    double loss = stylesynth::style_margin_loss(synth, s1, s2, {1.5, 3.5}, wide);
    // s2 term: d = 2.0 also inside [1.5, 3.5]; std terms inside the wide band
    CHECK(loss == doctest::Approx(0.0));
  }
  SUBCASE("d below a contributes a - d") {
    synth.mean(0, 0) = 1.0;
    s2.mean(0, 0) = 1.0;  // second mean term: d = 0 -> 1.5
    double loss = stylesynth::style_margin_loss(synth, s1, s2, {1.5, 3.5}, wide);
    CHECK(loss == doctest::Approx(0.5 + 1.5));
  }
  SUBCASE("d above b contributes d - b") {
    synth.mean(0, 0) = 4.0;
    s2.mean(0, 0) = 4.0;  // second term: d = 0 -> below a -> 1.5
    double loss = stylesynth::style_margin_loss(synth, s1, s2, {1.5, 3.5}, wide);
    CHECK(loss == doctest::Approx(0.5 + 1.5));
  }
}

TEST_CASE("margin loss is nonnegative and zero iff all distances in band") {
  Rng rng(6);
  const StyleBand bm{0.5, 4.0}, bs{0.1, 3.0};
  int zeros = 0;
  for (int trial = 0; trial < 500; ++trial) {
    StyleStats synth = random_stats(2, 3, rng);
    StyleStats s1 = random_stats(2, 3, rng);
    StyleStats s2 = random_stats(2, 3, rng);
    const double loss = stylesynth::style_margin_loss(synth, s1, s2, bm, bs);
    CHECK(loss >= 0.0);
    bool all_inside = true;
    for (int i = 0; i < 2; ++i) {
      for (const StyleStats* s : {&s1, &s2}) {
        const double dm = (synth.mean.row(i) - s->mean.row(i)).norm();
        const double ds = (synth.stddev.row(i) - s->stddev.row(i)).norm();
        all_inside = all_inside && dm >= bm.lo && dm <= bm.hi && ds >= bs.lo &&
                     ds <= bs.hi;
      }
    }
    if (all_inside) {
      CHECK(loss == doctest::Approx(0.0));
      ++zeros;
    } else {
      CHECK(loss > 0.0);
    }
  }
  CHECK(zeros > 0);  // the fuzz must actually exercise the zero branch
}

TEST_CASE("margin loss is continuous across the band boundaries") {
  StyleStats s1(1, 1), s2(1, 1), synth(1, 1);
  s2.mean(0, 0) = 2.5;  // keep the second term inside the band
  const StyleBand bm{1.5, 3.5};
  const StyleBand wide{1e-9, 1e9};
  const double eps = 1e-9;
  for (double boundary : {1.5, 3.5}) {
    synth.mean(0, 0) = boundary - eps;
    const double below = stylesynth::style_margin_loss(synth, s1, s2, bm, wide);
    synth.mean(0, 0) = boundary + eps;
    const double above = stylesynth::style_margin_loss(synth, s1, s2, bm, wide);
    CHECK(std::abs(below - above) < 1e-8);
  }
}

TEST_CASE("invalid bands are rejected") {
  StyleStats s(1, 1);
  CHECK_THROWS_AS(stylesynth::style_margin_loss(s, s, s, {3.0, 1.0}, {0.1, 2.0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(stylesynth::style_margin_loss(s, s, s, {-1.0, 1.0}, {0.1, 2.0}),
                  std::invalid_argument);
}

TEST_CASE("margin loss gradient matches finite differences through the net") {
  Rng rng(8);
  const int c = 5, n = 3;
  StyleSynthNet net(c);
  net.init(rng);
  StyleStats s1 = random_stats(n, c, rng);
  StyleStats s2 = random_stats(n, c, rng);
  NoiseSpec noise;  // standard normal, fixed by the seed below
  const std::uint64_t seed = 424242;

  // bands chosen so every hinge is strictly active (d < a)
  const StyleBand bm{30.0, 40.0}, bs{30.0, 40.0};
  auto loss = [&]() {
    StyleStats synth = stylesynth::synthesize_style(net, s1, s2, noise, seed);
    return stylesynth::style_margin_loss(synth, s1, s2, bm, bs);
  };

  StyleSynthNet::Cache cache;
  StyleStats synth = net.forward(s1, s2, noise, seed, cache);
  StyleStats d_synth(n, c), d_s1(n, c), d_s2(n, c);
  stylesynth::style_margin_loss_backward(synth, s1, s2, bm, bs, 1.0, d_synth,
                                         d_s1, d_s2);
  for (nn::Param* p : net.params()) p->zero_grad();
  net.backward(cache, d_synth, d_s1, d_s2);

  const double h = 1e-6;
  for (nn::Param* p : net.params()) {
    for (Eigen::Index j = 0; j < p->value.size(); j += 37) {
      const double saved = p->value[j];
      p->value[j] = saved + h;
      const double up = loss();
      p->value[j] = saved - h;
      const double down = loss();
      p->value[j] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double analytic = p->grad[j];
      const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-8});
      CHECK(std::abs(fd - analytic) / denom < 1e-4);
    }
  }
}

TEST_CASE("mixstyle endpoints and midpoint") {
  Rng rng(9);
  StyleStats s1 = random_stats(2, 3, rng);
  StyleStats s2 = random_stats(2, 3, rng);

  Vector ones = Vector::Ones(2);
  StyleStats out = stylesynth::mixstyle_with_lambda(s1, s2, ones);
  CHECK((out.mean - s1.mean).cwiseAbs().maxCoeff() == doctest::Approx(0.0));

  Vector half = Vector::Constant(2, 0.5);
  StyleStats a(1, 1), b(1, 1);
  a.mean(0, 0) = 0.0;
  a.stddev(0, 0) = 1.0;
  b.mean(0, 0) = 2.0;
  b.stddev(0, 0) = 3.0;
  StyleStats mid = stylesynth::mixstyle_with_lambda(a, b, Vector::Constant(1, 0.5));
  CHECK(mid.mean(0, 0) == doctest::Approx(1.0));
  CHECK(mid.stddev(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("mixstyle std never exceeds the elementwise max of the inputs") {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    StyleStats s1 = random_stats(3, 4, rng);
    StyleStats s2 = random_stats(3, 4, rng);
    StyleStats out = stylesynth::mixstyle_baseline(s1, s2, {0.3}, rng.raw());
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 4; ++k) {
        CHECK(out.stddev(i, k) <= std::max(s1.stddev(i, k), s2.stddev(i, k)) + 1e-12);
        CHECK(out.stddev(i, k) >= 0.0);
      }
  }
}

TEST_CASE("mixstyle is deterministic under the seed") {
  Rng rng(12);
  StyleStats s1 = random_stats(4, 3, rng);
  StyleStats s2 = random_stats(4, 3, rng);
  StyleStats a = stylesynth::mixstyle_baseline(s1, s2, {0.1}, 55);
  StyleStats b = stylesynth::mixstyle_baseline(s1, s2, {0.1}, 55);
  CHECK((a.mean - b.mean).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

}  // TEST_SUITE
