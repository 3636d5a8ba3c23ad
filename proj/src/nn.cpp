#include "opendg/nn.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace opendg::nn {

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in, int out) : in_(in), out_(out) {
  weight = Param(name + ".weight", static_cast<Eigen::Index>(in) * out);
  bias = Param(name + ".bias", out);
}

void Linear::init(Rng& rng) {
  const double k = 1.0 / std::sqrt(static_cast<double>(in_));
  for (Eigen::Index i = 0; i < weight.value.size(); ++i)
    weight.value[i] = rng.uniform(-k, k);
  for (Eigen::Index i = 0; i < bias.value.size(); ++i)
    bias.value[i] = rng.uniform(-k, k);
}

Matrix Linear::forward(const Matrix& x, Cache& cache) const {
  cache.input = x;
  return forward(x);
}

Matrix Linear::forward(const Matrix& x) const {
  if (x.cols() != in_) throw std::invalid_argument("Linear: input width mismatch");
  Matrix y = x * w().transpose();
  y.rowwise() += bias.value.transpose();
  return y;
}

Matrix Linear::backward(const Cache& cache, const Matrix& d_out) {
  Eigen::Map<Matrix> gw(weight.grad.data(), out_, in_);
  gw.noalias() += d_out.transpose() * cache.input;
  bias.grad += d_out.colwise().sum().transpose();
  return d_out * w();
}

// ---------------------------------------------------------------- Relu

Matrix Relu::forward(const Matrix& x, Cache& cache) {
  cache.input = x;
  return forward(x);
}

Matrix Relu::forward(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix Relu::backward(const Cache& cache, const Matrix& d_out) {
  return (cache.input.array() > 0.0).select(d_out, Matrix::Zero(d_out.rows(), d_out.cols()));
}

// ---------------------------------------------------------------- Sigmoid

Matrix Sigmoid::forward(const Matrix& x, Cache& cache) {
  cache.output = forward(x);
  return cache.output;
}

Matrix Sigmoid::forward(const Matrix& x) {
  return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

Matrix Sigmoid::backward(const Cache& cache, const Matrix& d_out) {
  return d_out.array() * cache.output.array() * (1.0 - cache.output.array());
}

// ---------------------------------------------------------------- BatchNorm1d

BatchNorm1d::BatchNorm1d(std::string name, int features, double eps,
                         double momentum)
    : features_(features), eps_(eps), momentum_(momentum) {
  gamma = Param(name + ".gamma", features);
  beta = Param(name + ".beta", features);
  running_mean = Param(name + ".running_mean", features);
  running_var = Param(name + ".running_var", features);
  gamma.value.setOnes();
  running_var.value.setOnes();
}

Matrix BatchNorm1d::forward(const Matrix& x, Cache& cache, bool training) {
  if (x.cols() != features_)
    throw std::invalid_argument("BatchNorm1d: feature width mismatch");
  cache.training = training;
  if (!training) {
    cache.inv_std = (running_var.value.array() + eps_).rsqrt();
    cache.xhat = (x.rowwise() - running_mean.value.transpose()).array().rowwise() *
                 cache.inv_std.transpose().array();
    Matrix y = cache.xhat.array().rowwise() * gamma.value.transpose().array();
    y.rowwise() += beta.value.transpose();
    return y;
  }

  const double n = static_cast<double>(x.rows());
  Vector mean = x.colwise().mean().transpose();
  Matrix centered = x.rowwise() - mean.transpose();
  Vector var = centered.array().square().colwise().sum().transpose() / n;
  cache.inv_std = (var.array() + eps_).rsqrt();
  cache.centered = centered;
  cache.xhat = centered.array().rowwise() * cache.inv_std.transpose().array();

  running_mean.value = (1.0 - momentum_) * running_mean.value + momentum_ * mean;
  running_var.value = (1.0 - momentum_) * running_var.value + momentum_ * var;

  Matrix y = cache.xhat.array().rowwise() * gamma.value.transpose().array();
  y.rowwise() += beta.value.transpose();
  return y;
}

Matrix BatchNorm1d::forward_eval(const Matrix& x) const {
  Vector inv_std = (running_var.value.array() + eps_).rsqrt();
  Matrix xhat = (x.rowwise() - running_mean.value.transpose()).array().rowwise() *
                inv_std.transpose().array();
  Matrix y = xhat.array().rowwise() * gamma.value.transpose().array();
  y.rowwise() += beta.value.transpose();
  return y;
}

Matrix BatchNorm1d::backward(const Cache& cache, const Matrix& d_out) {
  gamma.grad += (d_out.array() * cache.xhat.array()).colwise().sum().matrix().transpose();
  beta.grad += d_out.colwise().sum().transpose();
  if (!cache.training) {
    // Frozen statistics: an affine map per feature.
    return d_out.array().rowwise() *
           (gamma.value.array() * cache.inv_std.array()).transpose();
  }

  const double n = static_cast<double>(d_out.rows());
  Matrix d_xhat = d_out.array().rowwise() * gamma.value.transpose().array();

  // Standard batch-norm backward over batch statistics.
  Vector sum_dxhat = d_xhat.colwise().sum().transpose();
  Vector sum_dxhat_xhat = (d_xhat.array() * cache.xhat.array()).colwise().sum().matrix().transpose();
  Matrix dx = d_xhat;
  dx.array().rowwise() -= (sum_dxhat / n).transpose().array();
  dx.array() -= cache.xhat.array().rowwise() * (sum_dxhat_xhat / n).transpose().array();
  dx.array().rowwise() *= cache.inv_std.transpose().array();
  return dx;
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in_c, int out_c, int kernel, int stride,
               int pad, bool has_bias)
    : in_c_(in_c), out_c_(out_c), kernel_(kernel), stride_(stride), pad_(pad),
      has_bias_(has_bias) {
  weight = Param(name + ".weight",
                 static_cast<Eigen::Index>(out_c) * in_c * kernel * kernel);
  if (has_bias) bias = Param(name + ".bias", out_c);
}

void Conv2d::init(Rng& rng) {
  const double k = 1.0 / std::sqrt(static_cast<double>(in_c_) * kernel_ * kernel_);
  for (Eigen::Index i = 0; i < weight.value.size(); ++i)
    weight.value[i] = rng.uniform(-k, k);
  for (Eigen::Index i = 0; i < bias.value.size(); ++i)
    bias.value[i] = rng.uniform(-k, k);
}

ParamRefs Conv2d::params() {
  if (has_bias_) return {&weight, &bias};
  return {&weight};
}

void Conv2d::im2col(const FeatureMap& x, int instance, Matrix& cols) const {
  const int oh = out_dim(x.h), ow = out_dim(x.w);
  const int patch = in_c_ * kernel_ * kernel_;
  cols.resize(patch, static_cast<Eigen::Index>(oh) * ow);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Eigen::Index col = static_cast<Eigen::Index>(oy) * ow + ox;
      Eigen::Index row = 0;
      for (int ch = 0; ch < in_c_; ++ch) {
        for (int ky = 0; ky < kernel_; ++ky) {
          const int iy = oy * stride_ - pad_ + ky;
          for (int kx = 0; kx < kernel_; ++kx, ++row) {
            const int ix = ox * stride_ - pad_ + kx;
            cols(row, col) = (iy >= 0 && iy < x.h && ix >= 0 && ix < x.w)
                                 ? x.at(instance, ch, iy, ix)
                                 : 0.0;
          }
        }
      }
    }
  }
}

void Conv2d::col2im(const Matrix& cols, int instance, FeatureMap& dst) const {
  const int oh = out_dim(dst.h), ow = out_dim(dst.w);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Eigen::Index col = static_cast<Eigen::Index>(oy) * ow + ox;
      Eigen::Index row = 0;
      for (int ch = 0; ch < in_c_; ++ch) {
        for (int ky = 0; ky < kernel_; ++ky) {
          const int iy = oy * stride_ - pad_ + ky;
          for (int kx = 0; kx < kernel_; ++kx, ++row) {
            const int ix = ox * stride_ - pad_ + kx;
            if (iy >= 0 && iy < dst.h && ix >= 0 && ix < dst.w)
              dst.at(instance, ch, iy, ix) += cols(row, col);
          }
        }
      }
    }
  }
}

FeatureMap Conv2d::forward(const FeatureMap& x, Cache& cache) const {
  cache.input = x;
  return forward(x);
}

FeatureMap Conv2d::forward(const FeatureMap& x) const {
  if (x.c != in_c_) throw std::invalid_argument("Conv2d: channel mismatch");
  const int oh = out_dim(x.h), ow = out_dim(x.w);
  if (oh < 1 || ow < 1) throw std::invalid_argument("Conv2d: input too small");
  FeatureMap y(x.n, out_c_, oh, ow);
  const int patch = in_c_ * kernel_ * kernel_;
  Eigen::Map<const Matrix> wmat(weight.value.data(), out_c_, patch);
  Matrix cols;
  for (int i = 0; i < x.n; ++i) {
    im2col(x, i, cols);
    Matrix out = wmat * cols;  // out_c x (oh*ow)
    if (has_bias_) out.colwise() += bias.value;
    for (int ch = 0; ch < out_c_; ++ch)
      for (Eigen::Index k = 0; k < out.cols(); ++k)
        y.v[y.idx(i, ch, 0, 0) + k] = out(ch, k);
  }
  return y;
}

FeatureMap Conv2d::backward(const Cache& cache, const FeatureMap& d_out) {
  const FeatureMap& x = cache.input;
  const int oh = d_out.h, ow = d_out.w;
  const int patch = in_c_ * kernel_ * kernel_;
  Eigen::Map<const Matrix> wmat(weight.value.data(), out_c_, patch);
  Eigen::Map<Matrix> gw(weight.grad.data(), out_c_, patch);
  FeatureMap d_x(x.n, x.c, x.h, x.w);
  Matrix cols, gout(out_c_, static_cast<Eigen::Index>(oh) * ow);
  for (int i = 0; i < x.n; ++i) {
    im2col(x, i, cols);
    for (int ch = 0; ch < out_c_; ++ch)
      for (Eigen::Index k = 0; k < gout.cols(); ++k)
        gout(ch, k) = d_out.v[d_out.idx(i, ch, 0, 0) + k];
    gw.noalias() += gout * cols.transpose();
    if (has_bias_) bias.grad += gout.rowwise().sum();
    Matrix d_cols = wmat.transpose() * gout;
    col2im(d_cols, i, d_x);
  }
  return d_x;
}

// ---------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name, int channels, double eps,
                         double momentum)
    : channels_(channels), eps_(eps), momentum_(momentum) {
  gamma = Param(name + ".gamma", channels);
  beta = Param(name + ".beta", channels);
  running_mean = Param(name + ".running_mean", channels);
  running_var = Param(name + ".running_var", channels);
  gamma.value.setOnes();
  running_var.value.setOnes();
}

FeatureMap BatchNorm2d::forward(const FeatureMap& x, Cache& cache,
                                bool training) {
  if (x.c != channels_) throw std::invalid_argument("BatchNorm2d: channel mismatch");
  cache.training = training;
  if (!training) {
    const int hw = x.spatial();
    cache.inv_std = (running_var.value.array() + eps_).rsqrt();
    FeatureMap xhat(x.n, x.c, x.h, x.w);
    FeatureMap y(x.n, x.c, x.h, x.w);
    for (int i = 0; i < x.n; ++i)
      for (int ch = 0; ch < channels_; ++ch) {
        const double m = running_mean.value[ch], is = cache.inv_std[ch];
        const double g = gamma.value[ch], b = beta.value[ch];
        const double* p = x.plane(i, ch);
        double* ph = xhat.plane(i, ch);
        double* py = y.plane(i, ch);
        for (int k = 0; k < hw; ++k) {
          ph[k] = (p[k] - m) * is;
          py[k] = g * ph[k] + b;
        }
      }
    cache.xhat = std::move(xhat);
    return y;
  }

  const int hw = x.spatial();
  const double count = static_cast<double>(x.n) * hw;
  Vector mean = Vector::Zero(channels_), var = Vector::Zero(channels_);
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < channels_; ++ch) {
      const double* p = x.plane(i, ch);
      for (int k = 0; k < hw; ++k) mean[ch] += p[k];
    }
  mean /= count;
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < channels_; ++ch) {
      const double* p = x.plane(i, ch);
      for (int k = 0; k < hw; ++k) {
        const double d = p[k] - mean[ch];
        var[ch] += d * d;
      }
    }
  var /= count;
  cache.inv_std = (var.array() + eps_).rsqrt();

  FeatureMap xhat(x.n, x.c, x.h, x.w);
  FeatureMap y(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < channels_; ++ch) {
      const double* p = x.plane(i, ch);
      double* ph = xhat.plane(i, ch);
      double* py = y.plane(i, ch);
      const double m = mean[ch], is = cache.inv_std[ch];
      const double g = gamma.value[ch], b = beta.value[ch];
      for (int k = 0; k < hw; ++k) {
        ph[k] = (p[k] - m) * is;
        py[k] = g * ph[k] + b;
      }
    }
  cache.xhat = std::move(xhat);

  running_mean.value = (1.0 - momentum_) * running_mean.value + momentum_ * mean;
  running_var.value = (1.0 - momentum_) * running_var.value + momentum_ * var;
  return y;
}

FeatureMap BatchNorm2d::forward_eval(const FeatureMap& x) const {
  const int hw = x.spatial();
  FeatureMap y(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < channels_; ++ch) {
      const double is = 1.0 / std::sqrt(running_var.value[ch] + eps_);
      const double m = running_mean.value[ch];
      const double g = gamma.value[ch], b = beta.value[ch];
      const double* p = x.plane(i, ch);
      double* py = y.plane(i, ch);
      for (int k = 0; k < hw; ++k) py[k] = g * (p[k] - m) * is + b;
    }
  return y;
}

FeatureMap BatchNorm2d::backward(const Cache& cache, const FeatureMap& d_out) {
  const int hw = d_out.spatial();
  Vector sum_d(channels_), sum_dx(channels_);
  sum_d.setZero();
  sum_dx.setZero();
  for (int i = 0; i < d_out.n; ++i)
    for (int ch = 0; ch < channels_; ++ch) {
      const double* gp = d_out.plane(i, ch);
      const double* xp = cache.xhat.plane(i, ch);
      double a = 0.0, b = 0.0;
      for (int k = 0; k < hw; ++k) {
        a += gp[k];
        b += gp[k] * xp[k];
      }
      sum_d[ch] += a;
      sum_dx[ch] += b;
    }
  gamma.grad += sum_dx;
  beta.grad += sum_d;

  if (!cache.training) {
    FeatureMap dx(d_out.n, d_out.c, d_out.h, d_out.w);
    for (int i = 0; i < d_out.n; ++i)
      for (int ch = 0; ch < channels_; ++ch) {
        const double scale = gamma.value[ch] * cache.inv_std[ch];
        const double* gp = d_out.plane(i, ch);
        double* dp = dx.plane(i, ch);
        for (int k = 0; k < hw; ++k) dp[k] = gp[k] * scale;
      }
    return dx;
  }

  const double count = static_cast<double>(d_out.n) * hw;
  FeatureMap dx(d_out.n, d_out.c, d_out.h, d_out.w);
  for (int i = 0; i < d_out.n; ++i)
    for (int ch = 0; ch < channels_; ++ch) {
      const double g = gamma.value[ch];
      const double is = cache.inv_std[ch];
      const double c1 = sum_d[ch] / count;
      const double c2 = sum_dx[ch] / count;
      const double* gp = d_out.plane(i, ch);
      const double* xp = cache.xhat.plane(i, ch);
      double* dp = dx.plane(i, ch);
      for (int k = 0; k < hw; ++k)
        dp[k] = g * is * (gp[k] - c1 - xp[k] * c2);
    }
  return dx;
}

// ---------------------------------------------------------------- MaxPool2d

FeatureMap MaxPool2d::forward(const FeatureMap& x, Cache& cache) const {
  const int oh = out_dim(x.h), ow = out_dim(x.w);
  if (oh < 1 || ow < 1) throw std::invalid_argument("MaxPool2d: input too small");
  FeatureMap y(x.n, x.c, oh, ow);
  cache.in_n = x.n;
  cache.in_c = x.c;
  cache.in_h = x.h;
  cache.in_w = x.w;
  cache.argmax.assign(y.size(), 0);
  std::size_t out_i = 0;
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < x.c; ++ch)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox, ++out_i) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (int ky = 0; ky < kernel_; ++ky) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= x.h) continue;
            for (int kx = 0; kx < kernel_; ++kx) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= x.w) continue;
              const double val = x.at(i, ch, iy, ix);
              if (val > best) {
                best = val;
                best_idx = x.idx(i, ch, iy, ix);
              }
            }
          }
          y.v[out_i] = best;
          cache.argmax[out_i] = best_idx;
        }
  return y;
}

FeatureMap MaxPool2d::forward(const FeatureMap& x) const {
  Cache scratch;
  return forward(x, scratch);
}

FeatureMap MaxPool2d::backward(const Cache& cache, const FeatureMap& d_out) const {
  FeatureMap dx(cache.in_n, cache.in_c, cache.in_h, cache.in_w);
  for (std::size_t k = 0; k < d_out.size(); ++k)
    dx.v[cache.argmax[k]] += d_out.v[k];
  return dx;
}

// ---------------------------------------------------------------- pooling/relu on maps

Matrix GlobalAvgPool::forward(const FeatureMap& x, Cache& cache) {
  cache.h = x.h;
  cache.w = x.w;
  return forward(x);
}

Matrix GlobalAvgPool::forward(const FeatureMap& x) {
  Matrix y(x.n, x.c);
  const int hw = x.spatial();
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < x.c; ++ch) {
      const double* p = x.plane(i, ch);
      double s = 0.0;
      for (int k = 0; k < hw; ++k) s += p[k];
      y(i, ch) = s / hw;
    }
  return y;
}

FeatureMap GlobalAvgPool::backward(const Cache& cache, int n, int c,
                                   const Matrix& d_out) {
  FeatureMap dx(n, c, cache.h, cache.w);
  const int hw = cache.h * cache.w;
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double g = d_out(i, ch) / hw;
      double* p = dx.plane(i, ch);
      for (int k = 0; k < hw; ++k) p[k] = g;
    }
  return dx;
}

FeatureMap ReluMap::forward(const FeatureMap& x, Cache& cache) {
  cache.input = x;
  return forward(x);
}

FeatureMap ReluMap::forward(const FeatureMap& x) {
  FeatureMap y = x;
  for (double& v : y.v) v = v > 0.0 ? v : 0.0;
  return y;
}

FeatureMap ReluMap::backward(const Cache& cache, const FeatureMap& d_out) {
  FeatureMap dx = d_out;
  for (std::size_t k = 0; k < dx.size(); ++k)
    if (cache.input.v[k] <= 0.0) dx.v[k] = 0.0;
  return dx;
}

// ---------------------------------------------------------------- optimizer

void SgdMomentum::attach(const ParamRefs& params) {
  params_ = params;
  velocity_.clear();
  velocity_.reserve(params.size());
  for (const Param* p : params_) velocity_.push_back(Vector::Zero(p->value.size()));
}

void SgdMomentum::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

void SgdMomentum::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    velocity_[i] = momentum_ * velocity_[i] + params_[i]->grad;
    params_[i]->value -= lr_ * velocity_[i];
  }
}

}  // namespace opendg::nn
