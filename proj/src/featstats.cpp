#include "opendg/featstats.hpp"

#include <cmath>
#include <stdexcept>

namespace opendg::featstats {

Vector StyleStats::concat_row(int i) const {
  const int c = channels();
  Vector out(2 * c);
  out.head(c) = mean.row(i).transpose();
  out.tail(c) = stddev.row(i).transpose();
  return out;
}

static void require_valid(const FeatureMap& f) {
  if (!f.valid_shape())
    throw std::invalid_argument("feature map has an empty axis");
  if (!f.all_finite())
    throw std::invalid_argument("feature map contains non-finite values");
}

static void require_compatible(const FeatureMap& f, const StyleStats& s,
                               const char* what) {
  if (s.instances() != f.n || s.channels() != f.c)
    throw std::invalid_argument(std::string(what) +
                                ": stats shape does not match feature map");
  if (s.mean.rows() != s.stddev.rows() || s.mean.cols() != s.stddev.cols())
    throw std::invalid_argument(std::string(what) + ": mean/std shape mismatch");
}

StyleStats compute_instance_stats(const FeatureMap& f) {
  require_valid(f);
  const int hw = f.spatial();
  StyleStats s(f.n, f.c);
  for (int i = 0; i < f.n; ++i) {
    for (int ch = 0; ch < f.c; ++ch) {
      const double* p = f.plane(i, ch);
      double sum = 0.0;
      for (int k = 0; k < hw; ++k) sum += p[k];
      const double m = sum / hw;
      double ss = 0.0;
      for (int k = 0; k < hw; ++k) {
        const double d = p[k] - m;
        ss += d * d;
      }
      s.mean(i, ch) = m;
      s.stddev(i, ch) = std::sqrt(ss / hw);
    }
  }
  return s;
}

FeatureMap instance_normalize(const FeatureMap& f, const StyleStats& s,
                              const StatsConfig& cfg) {
  require_valid(f);
  require_compatible(f, s, "instance_normalize");
  const int hw = f.spatial();
  FeatureMap out(f.n, f.c, f.h, f.w);
  for (int i = 0; i < f.n; ++i) {
    for (int ch = 0; ch < f.c; ++ch) {
      const double m = s.mean(i, ch);
      const double inv = 1.0 / (s.stddev(i, ch) + cfg.epsilon);
      const double* p = f.plane(i, ch);
      double* q = out.plane(i, ch);
      for (int k = 0; k < hw; ++k) q[k] = (p[k] - m) * inv;
    }
  }
  return out;
}

FeatureMap restyle(const FeatureMap& f, const StyleStats& original,
                   const StyleStats& target, const StatsConfig& cfg) {
  require_valid(f);
  require_compatible(f, original, "restyle");
  if (!original.same_shape(target))
    throw std::invalid_argument("restyle: target stats shape mismatch");
  if (!target.all_finite())
    throw std::invalid_argument("restyle: target stats are not finite");
  const int hw = f.spatial();
  FeatureMap out(f.n, f.c, f.h, f.w);
  for (int i = 0; i < f.n; ++i) {
    for (int ch = 0; ch < f.c; ++ch) {
      // out = t_mean + scale * (f - o_mean) with scale = t_std/(o_std + eps);
      // the factored form makes the identity restyle exact.
      const double scale = target.stddev(i, ch) / (original.stddev(i, ch) + cfg.epsilon);
      const double shift = target.mean(i, ch) - original.mean(i, ch) * scale;
      const double* p = f.plane(i, ch);
      double* q = out.plane(i, ch);
      for (int k = 0; k < hw; ++k) q[k] = p[k] * scale + shift;
    }
  }
  return out;
}

double mean_cosine_distance(const std::vector<Vector>& a,
                            const std::vector<Vector>& b) {
  if (a.empty() || b.empty())
    throw std::invalid_argument("mean_cosine_distance: empty vector set");
  const Eigen::Index dim = a.front().size();
  double total = 0.0;
  for (const Vector& x : a) {
    if (x.size() != dim)
      throw std::invalid_argument("mean_cosine_distance: dimension mismatch");
    const double nx = x.norm();
    if (nx == 0.0)
      throw std::invalid_argument("mean_cosine_distance: zero-norm vector");
    for (const Vector& y : b) {
      if (y.size() != dim)
        throw std::invalid_argument("mean_cosine_distance: dimension mismatch");
      const double ny = y.norm();
      if (ny == 0.0)
        throw std::invalid_argument("mean_cosine_distance: zero-norm vector");
      total += 1.0 - x.dot(y) / (nx * ny);
    }
  }
  return total / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

void instance_stats_backward(const FeatureMap& f, const StyleStats& s,
                             const Matrix& d_mean, const Matrix& d_std,
                             FeatureMap& d_f) {
  const int hw = f.spatial();
  for (int i = 0; i < f.n; ++i) {
    for (int ch = 0; ch < f.c; ++ch) {
      const double m = s.mean(i, ch);
      const double sd = s.stddev(i, ch);
      const double gm = d_mean(i, ch) / hw;
      const double gs = sd > 0.0 ? d_std(i, ch) / (hw * sd) : 0.0;
      const double* p = f.plane(i, ch);
      double* q = d_f.plane(i, ch);
      for (int k = 0; k < hw; ++k) q[k] += gm + gs * (p[k] - m);
    }
  }
}

void restyle_backward(const FeatureMap& f, const StyleStats& original,
                      const StyleStats& target, const StatsConfig& cfg,
                      const FeatureMap& d_out, FeatureMap& d_f,
                      StyleStats& d_original, StyleStats& d_target) {
  // out = t_mean + t_std * xhat with xhat = (f - o_mean)/(o_std + eps), so
  //   d f      += g * t_std/(o_std+eps)
  //   d t_mean += sum g
  //   d t_std  += sum g*xhat
  //   d o_mean += -t_std/(o_std+eps) * sum g
  //   d o_std  += -t_std/(o_std+eps) * sum g*xhat
  const int hw = f.spatial();
  for (int i = 0; i < f.n; ++i) {
    for (int ch = 0; ch < f.c; ++ch) {
      const double om = original.mean(i, ch);
      const double inv = 1.0 / (original.stddev(i, ch) + cfg.epsilon);
      const double ts = target.stddev(i, ch);
      const double* p = f.plane(i, ch);
      const double* g = d_out.plane(i, ch);
      double* q = d_f.plane(i, ch);
      double sum_g = 0.0, sum_gx = 0.0;
      for (int k = 0; k < hw; ++k) {
        sum_g += g[k];
        sum_gx += g[k] * (p[k] - om) * inv;
        q[k] += g[k] * ts * inv;
      }
      d_target.mean(i, ch) += sum_g;
      d_target.stddev(i, ch) += sum_gx;
      d_original.mean(i, ch) += -ts * inv * sum_g;
      d_original.stddev(i, ch) += -ts * inv * sum_gx;
    }
  }
}

}  // namespace opendg::featstats
