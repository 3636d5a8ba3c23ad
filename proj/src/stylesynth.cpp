#include "opendg/stylesynth.hpp"

#include <cmath>
#include <stdexcept>

namespace opendg::stylesynth {

StyleSynthNet::StyleSynthNet(int channels)
    : fc1("ssnet.fc1", 4 * channels, 3 * channels),
      fc2("ssnet.fc2", 3 * channels, 2 * channels),
      channels_(channels) {}

void StyleSynthNet::init(Rng& rng) {
  fc1.init(rng);
  fc2.init(rng);
}

StyleStats StyleSynthNet::forward(const StyleStats& s1, const StyleStats& s2,
                                  const NoiseSpec& noise,
                                  std::uint64_t rng_seed, Cache& cache) const {
  if (!s1.same_shape(s2))
    throw std::invalid_argument("synthesize_style: stats shape mismatch");
  if (s1.channels() != channels_)
    throw std::invalid_argument("synthesize_style: channel count mismatch");
  if (noise.stddev < 0.0)
    throw std::invalid_argument("synthesize_style: negative noise std");

  const int n = s1.instances();
  const int c = channels_;
  Matrix input(n, 4 * c);
  Rng rng(rng_seed);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < c; ++k)
      input(i, k) = s1.mean(i, k) + rng.normal(noise.mean, noise.stddev);
    for (int k = 0; k < c; ++k)
      input(i, c + k) = s1.stddev(i, k) + rng.normal(noise.mean, noise.stddev);
    for (int k = 0; k < c; ++k)
      input(i, 2 * c + k) = s2.mean(i, k) + rng.normal(noise.mean, noise.stddev);
    for (int k = 0; k < c; ++k)
      input(i, 3 * c + k) = s2.stddev(i, k) + rng.normal(noise.mean, noise.stddev);
  }

  Matrix h = nn::Relu::forward(fc1.forward(input, cache.l1), cache.r1);
  Matrix out = nn::Relu::forward(fc2.forward(h, cache.l2), cache.r2);

  StyleStats synth(n, c);
  synth.mean = out.leftCols(c);
  synth.stddev = out.rightCols(c);
  return synth;
}

void StyleSynthNet::backward(const Cache& cache, const StyleStats& d_new,
                             StyleStats& d_s1, StyleStats& d_s2) {
  const int n = d_new.instances();
  const int c = channels_;
  Matrix d_out(n, 2 * c);
  d_out.leftCols(c) = d_new.mean;
  d_out.rightCols(c) = d_new.stddev;

  Matrix g = nn::Relu::backward(cache.r2, d_out);
  g = fc2.backward(cache.l2, g);
  g = nn::Relu::backward(cache.r1, g);
  Matrix d_input = fc1.backward(cache.l1, g);

  d_s1.mean += d_input.leftCols(c);
  d_s1.stddev += d_input.middleCols(c, c);
  d_s2.mean += d_input.middleCols(2 * c, c);
  d_s2.stddev += d_input.rightCols(c);
}

StyleStats synthesize_style(const StyleSynthNet& net, const StyleStats& s1,
                            const StyleStats& s2, const NoiseSpec& noise,
                            std::uint64_t rng_seed) {
  StyleSynthNet::Cache scratch;
  return net.forward(s1, s2, noise, rng_seed, scratch);
}

namespace {

double band_hinge(double d, const StyleBand& band) {
  if (d < band.lo) return band.lo - d;
  if (d > band.hi) return d - band.hi;
  return 0.0;
}

double band_hinge_slope(double d, const StyleBand& band) {
  if (d < band.lo) return -1.0;
  if (d > band.hi) return 1.0;
  return 0.0;
}

void require_margin_args(const StyleStats& synth, const StyleStats& s1,
                         const StyleStats& s2, const StyleBand& band_mean,
                         const StyleBand& band_std) {
  if (!band_mean.valid() || !band_std.valid())
    throw std::invalid_argument("style_margin_loss: invalid band");
  if (!synth.same_shape(s1) || !synth.same_shape(s2))
    throw std::invalid_argument("style_margin_loss: stats shape mismatch");
  if (synth.instances() < 1)
    throw std::invalid_argument("style_margin_loss: empty batch");
}

}  // namespace

double style_margin_loss(const StyleStats& synth, const StyleStats& s1,
                         const StyleStats& s2, const StyleBand& band_mean,
                         const StyleBand& band_std) {
  require_margin_args(synth, s1, s2, band_mean, band_std);
  const int n = synth.instances();
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    for (const StyleStats* s : {&s1, &s2}) {
      total += band_hinge((synth.mean.row(i) - s->mean.row(i)).norm(), band_mean);
      total += band_hinge((synth.stddev.row(i) - s->stddev.row(i)).norm(), band_std);
    }
  }
  return total / n;
}

double style_margin_loss_backward(const StyleStats& synth, const StyleStats& s1,
                                  const StyleStats& s2,
                                  const StyleBand& band_mean,
                                  const StyleBand& band_std, double weight,
                                  StyleStats& d_synth, StyleStats& d_s1,
                                  StyleStats& d_s2) {
  require_margin_args(synth, s1, s2, band_mean, band_std);
  const int n = synth.instances();
  const double scale = weight / n;
  double total = 0.0;

  StyleStats* d_inputs[2] = {&d_s1, &d_s2};
  const StyleStats* inputs[2] = {&s1, &s2};
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 2; ++j) {
      const StyleStats& s = *inputs[j];
      StyleStats& ds = *d_inputs[j];

      Eigen::RowVectorXd diff_m = synth.mean.row(i) - s.mean.row(i);
      const double dm = diff_m.norm();
      total += band_hinge(dm, band_mean);
      const double slope_m = band_hinge_slope(dm, band_mean);
      if (slope_m != 0.0 && dm > 0.0) {
        Eigen::RowVectorXd g = (scale * slope_m / dm) * diff_m;
        d_synth.mean.row(i) += g;
        ds.mean.row(i) -= g;
      }

      Eigen::RowVectorXd diff_s = synth.stddev.row(i) - s.stddev.row(i);
      const double dsd = diff_s.norm();
      total += band_hinge(dsd, band_std);
      const double slope_s = band_hinge_slope(dsd, band_std);
      if (slope_s != 0.0 && dsd > 0.0) {
        Eigen::RowVectorXd g = (scale * slope_s / dsd) * diff_s;
        d_synth.stddev.row(i) += g;
        ds.stddev.row(i) -= g;
      }
    }
  }
  return total / n;
}

Vector mixstyle_lambdas(int instances, const MixStyleConfig& cfg,
                        std::uint64_t rng_seed) {
  if (cfg.beta_param <= 0.0)
    throw std::invalid_argument("mixstyle: beta_param must be positive");
  Rng rng(rng_seed);
  Vector lambda(instances);
  for (int i = 0; i < instances; ++i)
    lambda[i] = rng.beta(cfg.beta_param, cfg.beta_param);
  return lambda;
}

StyleStats mixstyle_with_lambda(const StyleStats& s1, const StyleStats& s2,
                                const Vector& lambda) {
  if (!s1.same_shape(s2))
    throw std::invalid_argument("mixstyle: stats shape mismatch");
  if (lambda.size() != s1.instances())
    throw std::invalid_argument("mixstyle: lambda length mismatch");
  StyleStats out(s1.instances(), s1.channels());
  for (int i = 0; i < s1.instances(); ++i) {
    const double l = lambda[i];
    out.mean.row(i) = l * s1.mean.row(i) + (1.0 - l) * s2.mean.row(i);
    out.stddev.row(i) = l * s1.stddev.row(i) + (1.0 - l) * s2.stddev.row(i);
  }
  return out;
}

StyleStats mixstyle_baseline(const StyleStats& s1, const StyleStats& s2,
                             const MixStyleConfig& cfg, std::uint64_t rng_seed) {
  return mixstyle_with_lambda(s1, s2,
                              mixstyle_lambdas(s1.instances(), cfg, rng_seed));
}

void mixstyle_backward(const Vector& lambda, const StyleStats& d_out,
                       StyleStats& d_s1, StyleStats& d_s2) {
  for (int i = 0; i < d_out.instances(); ++i) {
    const double l = lambda[i];
    d_s1.mean.row(i) += l * d_out.mean.row(i);
    d_s1.stddev.row(i) += l * d_out.stddev.row(i);
    d_s2.mean.row(i) += (1.0 - l) * d_out.mean.row(i);
    d_s2.stddev.row(i) += (1.0 - l) * d_out.stddev.row(i);
  }
}

}  // namespace opendg::stylesynth
