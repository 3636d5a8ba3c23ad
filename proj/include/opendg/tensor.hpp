#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <vector>

namespace opendg {

using Matrix = Eigen::MatrixXd;  // rows are batch instances
using Vector = Eigen::VectorXd;

// 4-axis activation tensor (batch, channel, height, width), double precision.
struct FeatureMap {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  FeatureMap() = default;
  FeatureMap(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_),
        v(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0) {}

  std::size_t idx(int i, int ch, int y, int x) const {
    return ((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x;
  }
  double& at(int i, int ch, int y, int x) { return v[idx(i, ch, y, x)]; }
  double at(int i, int ch, int y, int x) const { return v[idx(i, ch, y, x)]; }

  // Contiguous (H*W)-long span for one (instance, channel) plane.
  double* plane(int i, int ch) { return v.data() + idx(i, ch, 0, 0); }
  const double* plane(int i, int ch) const { return v.data() + idx(i, ch, 0, 0); }

  std::size_t size() const { return v.size(); }
  int spatial() const { return h * w; }

  bool same_shape(const FeatureMap& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool valid_shape() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

}  // namespace opendg
