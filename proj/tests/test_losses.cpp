#include "opendg/losses.hpp"

#include "opendg/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace opendg;

namespace {

Matrix random_logits(int n, int c, Rng& rng) {
  Matrix m(n, c);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < c; ++k) m(i, k) = rng.normal(0.0, 2.0);
  return m;
}

Matrix one_hot(int cols, int index) {
  Matrix m = Matrix::Zero(1, cols);
  m(0, index) = 1.0;
  return m;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("cross entropy on hand cases") {
  SUBCASE("one-hot correct posterior gives zero") {
    CHECK(losses::loss_ce(one_hot(6, 2), {2}) == doctest::Approx(0.0));
  }
  SUBCASE("uniform posterior over six classes gives ln 6") {
    Matrix p = Matrix::Constant(1, 6, 1.0 / 6.0);
    CHECK(losses::loss_ce(p, {4}) == doctest::Approx(std::log(6.0)).epsilon(1e-9));
    CHECK(losses::loss_ce(p, {4}) == doctest::Approx(1.791759).epsilon(1e-6));
  }
  SUBCASE("posterior one half at the true index gives ln 2") {
    Matrix p(1, 3);
    p << 0.5, 0.25, 0.25;
    CHECK(losses::loss_ce(p, {0}) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  }
  SUBCASE("zero posterior at the true index clamps and flags") {
    Matrix p(1, 2);
    p << 1.0, 0.0;
    bool clamped = false;
    const double v = losses::loss_ce(p, {1}, &clamped);
    CHECK(clamped);
    CHECK(v == doctest::Approx(-std::log(1e-12)));
  }
}

TEST_CASE("cross entropy rejects invalid inputs") {
  Matrix not_simplex(1, 3);
  not_simplex << 0.5, 0.4, 0.4;
  CHECK_THROWS_AS(losses::loss_ce(not_simplex, {0}), std::invalid_argument);
  CHECK_THROWS_AS(losses::loss_ce(one_hot(3, 0), {5}), std::invalid_argument);
  CHECK_THROWS_AS(losses::loss_ce(Matrix(), {}), std::invalid_argument);
}

TEST_CASE("discriminability loss worked example") {
  // open one-hot at the open index: entropy 0
  Matrix open = one_hot(6, 5);
  // closed with p_open = 0.1 and top known prob 0.6
  Matrix closed(1, 6);
  closed << 0.6, 0.1, 0.1, 0.05, 0.05, 0.1;
  CHECK(losses::loss_disc(open, closed) == doctest::Approx(-0.5));
}

TEST_CASE("discriminability with no closed samples is the entropy alone") {
  Matrix open = Matrix::Constant(1, 6, 1.0 / 6.0);
  bool empty = false;
  const double v = losses::loss_disc(open, Matrix(), &empty);
  CHECK(empty);
  CHECK(v == doctest::Approx(std::log(6.0)).epsilon(1e-9));
}

TEST_CASE("uniform closed posterior has zero margin term") {
  Matrix open = one_hot(6, 5);
  Matrix closed = Matrix::Constant(1, 6, 1.0 / 6.0);
  CHECK(losses::loss_disc(open, closed) == doctest::Approx(0.0));
}

TEST_CASE("discriminability bounds hold under fuzz") {
  Rng rng(77);
  const int c1 = 6;  // C+1
  for (int trial = 0; trial < 10000; ++trial) {
    Matrix open = losses::row_softmax(random_logits(2, c1, rng));
    Matrix closed = losses::row_softmax(random_logits(2, c1, rng));
    const double v = losses::loss_disc(open, closed);
    CHECK(v >= -1.0 - 1e-12);
    CHECK(v <= std::log(static_cast<double>(c1)) + 1e-12);
  }
}

TEST_CASE("weighted total combines linearly") {
  CHECK(losses::loss_total(1.0, -0.5, 0.5, {1, 1, 1}) == doctest::Approx(1.0));
  CHECK(losses::loss_total(0.7, -0.5, 0.5, {1, 0, 0}) == doctest::Approx(0.7));
  CHECK(losses::loss_total(1.0, 2.0, 3.0, {0, 0, 0}) == doctest::Approx(0.0));
}

TEST_CASE("posterior-side and logit-side cross entropy agree") {
  Rng rng(5);
  Matrix z = random_logits(4, 5, rng);
  std::vector<int> labels = {0, 3, 2, 4};
  Matrix scratch = Matrix::Zero(4, 5);
  const double fused = losses::ce_softmax_backward(z, labels, 0.0, scratch);
  const double via_posterior = losses::loss_ce(losses::row_softmax(z), labels);
  CHECK(fused == doctest::Approx(via_posterior).epsilon(1e-12));
}

TEST_CASE("cross-entropy gradient matches finite differences") {
  Rng rng(6);
  Matrix z = random_logits(3, 6, rng);
  std::vector<int> labels = {1, 5, 0};
  Matrix grad = Matrix::Zero(3, 6);
  losses::ce_softmax_backward(z, labels, 1.0, grad);

  const double h = 1e-6;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 6; ++k) {
      Matrix up = z, down = z;
      up(i, k) += h;
      down(i, k) -= h;
      Matrix s1 = Matrix::Zero(3, 6), s2 = Matrix::Zero(3, 6);
      const double fd = (losses::ce_softmax_backward(up, labels, 0.0, s1) -
                         losses::ce_softmax_backward(down, labels, 0.0, s2)) /
                        (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(grad(i, k)), 1e-8});
      CHECK(std::abs(fd - grad(i, k)) / denom < 1e-4);
    }
}

TEST_CASE("entropy and margin gradients match finite differences") {
  Rng rng(8);
  Matrix z_open = random_logits(3, 5, rng);
  Matrix z_closed = random_logits(3, 5, rng);
  // keep the margin away from its non-smooth tie point
  Matrix p = losses::row_softmax(z_closed);
  for (int i = 0; i < 3; ++i) {
    Eigen::Index top = 0;
    p.row(i).head(4).maxCoeff(&top);
    if (std::abs(p(i, 4) - p(i, top)) < 0.05) z_closed(i, 4) += 1.0;
  }

  Matrix g_open = Matrix::Zero(3, 5), g_closed = Matrix::Zero(3, 5);
  losses::entropy_mean_backward(z_open, 1.0, g_open);
  losses::closed_margin_mean_backward(z_closed, 1.0, g_closed);

  const double h = 1e-6;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 5; ++k) {
      {
        Matrix up = z_open, down = z_open;
        up(i, k) += h;
        down(i, k) -= h;
        Matrix s = Matrix::Zero(3, 5);
        const double fd = (losses::entropy_mean_backward(up, 0.0, s) -
                           losses::entropy_mean_backward(down, 0.0, s)) /
                          (2.0 * h);
        const double denom = std::max({std::abs(fd), std::abs(g_open(i, k)), 1e-8});
        CHECK(std::abs(fd - g_open(i, k)) / denom < 1e-4);
      }
      {
        Matrix up = z_closed, down = z_closed;
        up(i, k) += h;
        down(i, k) -= h;
        Matrix s = Matrix::Zero(3, 5);
        const double fd = (losses::closed_margin_mean_backward(up, 0.0, s) -
                           losses::closed_margin_mean_backward(down, 0.0, s)) /
                          (2.0 * h);
        const double denom = std::max({std::abs(fd), std::abs(g_closed(i, k)), 1e-8});
        CHECK(std::abs(fd - g_closed(i, k)) / denom < 1e-4);
      }
    }
}

}  // TEST_SUITE
