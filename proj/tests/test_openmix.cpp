#include "opendg/openmix.hpp"

#include "opendg/backbone.hpp"
#include "opendg/losses.hpp"

#include <doctest.h>

#include <cmath>

using namespace opendg;
using openmix::FeatAggNet;

namespace {

Matrix random_matrix(int n, int d, Rng& rng, double scale = 1.0) {
  Matrix m(n, d);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) m(i, k) = rng.normal(0.0, scale);
  return m;
}

}  // namespace

TEST_SUITE("openmix") {

TEST_CASE("aggregation net follows the 2D/D layout and parameter count") {
  FeatAggNet net(512);
  CHECK(net.fc1.in_features() == 1024);
  CHECK(net.fc1.out_features() == 512);
  CHECK(net.fc2.in_features() == 512);
  CHECK(net.fc2.out_features() == 512);
  int total = 0;
  for (const nn::Param* p : net.params()) total += static_cast<int>(p->value.size());
  CHECK(total == 788480);
}

TEST_CASE("forced alpha reproduces the endpoints and midpoint") {
  Rng rng(1);
  Matrix e1 = random_matrix(3, 8, rng);
  Matrix e3 = random_matrix(3, 8, rng);

  Matrix ones = Matrix::Ones(3, 8);
  CHECK((openmix::mix_with_alpha(e1, e3, ones) - e1).cwiseAbs().maxCoeff() ==
        doctest::Approx(0.0));
  Matrix half = Matrix::Constant(3, 8, 0.5);
  Matrix mid = openmix::mix_with_alpha(e1, e3, half);
  CHECK((mid - 0.5 * (e1 + e3)).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("equal inputs are a fixed point for any alpha") {
  Rng rng(2);
  Matrix v = random_matrix(2, 6, rng);
  FeatAggNet net(6);
  net.init(rng);
  auto [fused, alpha] = openmix::aggregate_open(net, v, v, false);
  CHECK((fused - v).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("alpha stays strictly inside (0,1) and the output is bracketed") {
  Rng rng(3);
  FeatAggNet net(10);
  net.init(rng);
  for (int trial = 0; trial < 300; ++trial) {
    Matrix e1 = random_matrix(4, 10, rng, 3.0);
    Matrix e3 = random_matrix(4, 10, rng, 3.0);
    auto [fused, alpha] = openmix::aggregate_open(net, e1, e3, false);
    for (int i = 0; i < 4; ++i)
      for (int k = 0; k < 10; ++k) {
        CHECK(alpha(i, k) > 0.0);
        CHECK(alpha(i, k) < 1.0);
        const double lo = std::min(e1(i, k), e3(i, k));
        const double hi = std::max(e1(i, k), e3(i, k));
        CHECK(fused(i, k) >= lo - 1e-12);
        CHECK(fused(i, k) <= hi + 1e-12);
      }
  }
}

TEST_CASE("dimension mismatches are rejected") {
  Rng rng(4);
  FeatAggNet net(8);
  net.init(rng);
  Matrix e1 = random_matrix(2, 8, rng);
  Matrix bad = random_matrix(2, 6, rng);
  CHECK_THROWS_AS(openmix::aggregate_open(net, e1, bad, false),
                  std::invalid_argument);
}

TEST_CASE("gradient through the mixing matches finite differences") {
  // frozen batch-norm statistics, per the check contract
  Rng rng(5);
  const int d = 6, n = 4, c_known = 3;
  FeatAggNet net(d);
  net.init(rng);
  backbone::ClassifierHead head(d, c_known, true);
  head.init(rng);
  Matrix e1 = random_matrix(n, d, rng);
  Matrix e3 = random_matrix(n, d, rng);
  std::vector<int> labels(n, c_known);

  auto loss = [&]() {
    auto [fused, alpha] = openmix::aggregate_open(net, e1, e3, false);
    Matrix logits = head.logits(fused);
    Matrix scratch = Matrix::Zero(logits.rows(), logits.cols());
    return losses::ce_softmax_backward(logits, labels, 0.0, scratch);
  };

  for (nn::Param* p : net.params()) p->zero_grad();
  {
    FeatAggNet::Cache cache;
    Matrix fused = net.forward(e1, e3, false, cache);
    nn::Linear::Cache hc;
    Matrix logits = head.logits(fused, hc);
    Matrix d_logits = Matrix::Zero(logits.rows(), logits.cols());
    losses::ce_softmax_backward(logits, labels, 1.0, d_logits);
    Matrix d_fused = head.backward(hc, d_logits);
    Matrix d_e1 = Matrix::Zero(n, d), d_e3 = Matrix::Zero(n, d);
    net.backward(cache, d_fused, d_e1, d_e3);
  }

  const double h = 1e-6;
  for (nn::Param* p : net.params()) {
    for (Eigen::Index j = 0; j < p->value.size(); j += 11) {
      const double saved = p->value[j];
      p->value[j] = saved + h;
      const double up = loss();
      p->value[j] = saved - h;
      const double down = loss();
      p->value[j] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(p->grad[j]), 1e-8});
      CHECK(std::abs(fd - p->grad[j]) / denom < 1e-4);
    }
  }
}

TEST_CASE("batch-norm training mode gradient also matches finite differences") {
  Rng rng(6);
  const int d = 5, n = 6;
  FeatAggNet net(d);
  net.init(rng);
  Matrix e1 = random_matrix(n, d, rng);
  Matrix e3 = random_matrix(n, d, rng);
  Matrix probe = random_matrix(n, d, rng);

  // training-mode forward updates running stats; freeze them around the
  // probe by restoring the buffers after every evaluation
  Vector rm = net.bn.running_mean.value, rv = net.bn.running_var.value;
  auto loss = [&]() {
    FeatAggNet::Cache cache;
    Matrix fused = net.forward(e1, e3, true, cache);
    net.bn.running_mean.value = rm;
    net.bn.running_var.value = rv;
    return (fused.array() * probe.array()).sum();
  };

  for (nn::Param* p : net.params()) p->zero_grad();
  {
    FeatAggNet::Cache cache;
    Matrix fused = net.forward(e1, e3, true, cache);
    net.bn.running_mean.value = rm;
    net.bn.running_var.value = rv;
    Matrix d_e1 = Matrix::Zero(n, d), d_e3 = Matrix::Zero(n, d);
    net.backward(cache, probe, d_e1, d_e3);
  }

  const double h = 1e-6;
  for (nn::Param* p : net.params()) {
    for (Eigen::Index j = 0; j < p->value.size(); j += 7) {
      const double saved = p->value[j];
      p->value[j] = saved + h;
      const double up = loss();
      p->value[j] = saved - h;
      const double down = loss();
      p->value[j] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(p->grad[j]), 1e-8});
      CHECK(std::abs(fd - p->grad[j]) / denom < 2e-4);
    }
  }
}

TEST_CASE("half-crop joins the left half of x1 with the right half of x3") {
  Image x1(1, 2, 4), x3(1, 2, 4);
  for (double& v : x3.v) v = 1.0;
  Image out = openmix::baseline_half_crop(x1, x3);
  CHECK(out.h == 2);
  CHECK(out.w == 4);
  for (int y = 0; y < 2; ++y) {
    CHECK(out.at(0, y, 0) == 0.0);
    CHECK(out.at(0, y, 1) == 0.0);
    CHECK(out.at(0, y, 2) == 1.0);
    CHECK(out.at(0, y, 3) == 1.0);
  }
  Image same = openmix::baseline_half_crop(x1, x1);
  CHECK(same.v == x1.v);
}

TEST_CASE("pixel mean averages and commutes") {
  Rng rng(7);
  Image x1(3, 4, 4), x3(3, 4, 4);
  for (double& v : x1.v) v = rng.uniform();
  for (double& v : x3.v) v = rng.uniform();
  Image a = openmix::baseline_pixel_mean(x1, x3);
  Image b = openmix::baseline_pixel_mean(x3, x1);
  for (std::size_t k = 0; k < a.v.size(); ++k) {
    CHECK(a.v[k] == doctest::Approx(0.5 * (x1.v[k] + x3.v[k])));
    CHECK(a.v[k] == doctest::Approx(b.v[k]));
  }
  Image same = openmix::baseline_pixel_mean(x1, x1);
  for (std::size_t k = 0; k < same.v.size(); ++k)
    CHECK(same.v[k] == doctest::Approx(x1.v[k]));
}

TEST_CASE("patch replacement overwrites exactly the patch area") {
  Image x1(1, 40, 40), x3(1, 40, 40);
  for (double& v : x3.v) v = 1.0;
  Image out = openmix::baseline_patch_replace(x1, x3, 123, 30);
  int changed = 0;
  for (double v : out.v) changed += v == 1.0 ? 1 : 0;
  CHECK(changed == 900);

  Image again = openmix::baseline_patch_replace(x1, x3, 123, 30);
  CHECK(out.v == again.v);  // same seed, same patch location

  Image same = openmix::baseline_patch_replace(x1, x1, 5, 30);
  CHECK(same.v == x1.v);

  Image tiny(1, 20, 20);
  CHECK_THROWS_AS(openmix::baseline_patch_replace(tiny, tiny, 1, 30),
                  std::invalid_argument);
}

TEST_CASE("image baselines reject shape mismatches") {
  Image a(1, 8, 8), b(1, 8, 9);
  CHECK_THROWS_AS(openmix::baseline_half_crop(a, b), std::invalid_argument);
  CHECK_THROWS_AS(openmix::baseline_pixel_mean(a, b), std::invalid_argument);
  CHECK_THROWS_AS(openmix::baseline_patch_replace(a, b, 0, 4),
                  std::invalid_argument);
}

}  // TEST_SUITE
