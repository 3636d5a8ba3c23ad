#pragma once

#include <cstddef>
#include <vector>

namespace opendg {

// Interleaved-by-channel raster image, values in [0, 1]. Channel-major like
// FeatureMap so conversion to a network input is a copy.
struct Image {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;

  Image() = default;
  Image(int c_, int h_, int w_)
      : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, 0.0) {}

  std::size_t idx(int ch, int y, int x) const {
    return (static_cast<std::size_t>(ch) * h + y) * w + x;
  }
  double& at(int ch, int y, int x) { return v[idx(ch, y, x)]; }
  double at(int ch, int y, int x) const { return v[idx(ch, y, x)]; }

  bool same_shape(const Image& o) const {
    return c == o.c && h == o.h && w == o.w;
  }
};

}  // namespace opendg
