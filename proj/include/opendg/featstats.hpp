#pragma once

#include "opendg/tensor.hpp"

#include <vector>

namespace opendg::featstats {

// Per-instance per-channel (mean, std) of a feature map: the style
// descriptor. std is the population form over spatial positions, so it is
// well-defined even for a 1x1 map.
struct StyleStats {
  Matrix mean;    // N x C
  Matrix stddev;  // N x C, elementwise >= 0

  StyleStats() = default;
  StyleStats(int n, int c) : mean(Matrix::Zero(n, c)), stddev(Matrix::Zero(n, c)) {}

  int instances() const { return static_cast<int>(mean.rows()); }
  int channels() const { return static_cast<int>(mean.cols()); }
  bool same_shape(const StyleStats& o) const {
    return mean.rows() == o.mean.rows() && mean.cols() == o.mean.cols();
  }
  bool all_finite() const { return mean.allFinite() && stddev.allFinite(); }

  // Per-instance concatenated [mean; std] style vector, length 2C.
  Vector concat_row(int i) const;
};

struct StatsConfig {
  double epsilon = 1e-5;  // division guard on the original std
};

// Mean and population standard deviation over the spatial positions of each
// (instance, channel) plane.
StyleStats compute_instance_stats(const FeatureMap& f);

// (f - mean) / (std + eps), broadcast per instance/channel.
FeatureMap instance_normalize(const FeatureMap& f, const StyleStats& s,
                              const StatsConfig& cfg);

// target.mean + target.std * (f - original.mean) / (original.std + eps).
// eps guards only the original std, never the target.
FeatureMap restyle(const FeatureMap& f, const StyleStats& original,
                   const StyleStats& target, const StatsConfig& cfg);

// Mean over all cross pairs (a in A, b in B) of 1 - cos(a, b). Range [0, 2].
double mean_cosine_distance(const std::vector<Vector>& a,
                            const std::vector<Vector>& b);

// ---- backward companions for the training graph ----

// Accumulates into d_f the gradient of stats(f) given upstream gradients on
// the mean and std outputs. At std = 0 the std subgradient is taken as 0.
void instance_stats_backward(const FeatureMap& f, const StyleStats& s,
                             const Matrix& d_mean, const Matrix& d_std,
                             FeatureMap& d_f);

// Accumulates gradients of restyle(...) into the feature map and both stats.
void restyle_backward(const FeatureMap& f, const StyleStats& original,
                      const StyleStats& target, const StatsConfig& cfg,
                      const FeatureMap& d_out, FeatureMap& d_f,
                      StyleStats& d_original, StyleStats& d_target);

}  // namespace opendg::featstats
