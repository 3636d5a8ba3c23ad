#pragma once

#include "opendg/featstats.hpp"
#include "opendg/nn.hpp"

#include <cstdint>

namespace opendg::stylesynth {

using featstats::StyleStats;

// Gaussian noise added elementwise to each of the four style input vectors,
// one independent draw per element per forward pass.
struct NoiseSpec {
  double mean = 0.0;
  double stddev = 1.0;
};

// Admissible L2-distance interval between a synthesized style vector and an
// input style vector.
struct StyleBand {
  double lo = 0.0;
  double hi = 0.0;
  bool valid() const { return 0.0 <= lo && lo < hi; }
};

struct MixStyleConfig {
  double beta_param = 0.1;  // symmetric Beta concentration for lambda
};

// Style synthesizer: 4C -> 3C (ReLU) -> 2C (ReLU). The first C outputs are
// the synthesized means, the last C the synthesized stds; the final
// rectifier makes the std part nonnegative by construction.
class StyleSynthNet {
 public:
  StyleSynthNet() = default;
  explicit StyleSynthNet(int channels);
  void init(Rng& rng);
  int channels() const { return channels_; }

  struct Cache {
    nn::Linear::Cache l1, l2;
    nn::Relu::Cache r1, r2;
  };

  // Assembles [m1+d1; s1+d2; m2+d3; s2+d4] row per instance, runs the net,
  // splits the output into (mean, std) halves. Deterministic given rng_seed.
  StyleStats forward(const StyleStats& s1, const StyleStats& s2,
                     const NoiseSpec& noise, std::uint64_t rng_seed,
                     Cache& cache) const;

  // Backpropagates d_new through the net; input-side gradients land on the
  // stats (the additive noise has unit jacobian). Accumulates.
  void backward(const Cache& cache, const StyleStats& d_new, StyleStats& d_s1,
                StyleStats& d_s2);

  nn::ParamRefs params() { return {&fc1.weight, &fc1.bias, &fc2.weight, &fc2.bias}; }

  nn::Linear fc1, fc2;

 private:
  int channels_ = 0;
};

StyleStats synthesize_style(const StyleSynthNet& net, const StyleStats& s1,
                            const StyleStats& s2, const NoiseSpec& noise,
                            std::uint64_t rng_seed);

// Band hinge on per-instance L2 distances between the synthesized style and
// each input style, for the mean and std parts separately; the four hinge
// terms are summed and averaged over the batch. Zero iff every distance lies
// inside its band.
double style_margin_loss(const StyleStats& synth, const StyleStats& s1,
                         const StyleStats& s2, const StyleBand& band_mean,
                         const StyleBand& band_std);

// Same value, also accumulating weight * gradient into the three stats.
double style_margin_loss_backward(const StyleStats& synth, const StyleStats& s1,
                                  const StyleStats& s2,
                                  const StyleBand& band_mean,
                                  const StyleBand& band_std, double weight,
                                  StyleStats& d_synth, StyleStats& d_s1,
                                  StyleStats& d_s2);

// Convex interpolation baseline: lambda ~ Beta(g, g) per instance, applied
// to both the mean and std parts, so the std output stays nonnegative.
StyleStats mixstyle_baseline(const StyleStats& s1, const StyleStats& s2,
                             const MixStyleConfig& cfg, std::uint64_t rng_seed);

// Deterministic core of the baseline, exposed for tests and training.
StyleStats mixstyle_with_lambda(const StyleStats& s1, const StyleStats& s2,
                                const Vector& lambda);

// Draws the per-instance lambdas the baseline would use.
Vector mixstyle_lambdas(int instances, const MixStyleConfig& cfg,
                        std::uint64_t rng_seed);

// Backward of mixstyle_with_lambda with lambda held constant. Accumulates.
void mixstyle_backward(const Vector& lambda, const StyleStats& d_out,
                       StyleStats& d_s1, StyleStats& d_s2);

}  // namespace opendg::stylesynth
