#pragma once

#include "opendg/rng.hpp"
#include "opendg/tensor.hpp"

#include <string>
#include <vector>

namespace opendg::nn {

// One named, flat parameter block. Layers view it through Eigen::Map.
struct Param {
  std::string name;
  Vector value;
  Vector grad;

  Param() = default;
  Param(std::string n, Eigen::Index size)
      : name(std::move(n)), value(Vector::Zero(size)), grad(Vector::Zero(size)) {}
  void zero_grad() { grad.setZero(); }
};

using ParamRefs = std::vector<Param*>;

// Forward passes write their intermediates into caller-owned cache objects,
// so the same layer instance can run several branches within one step and
// each branch can be backpropagated independently.

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out);
  void init(Rng& rng);  // fan-in scaled uniform, torch convention

  struct Cache {
    Matrix input;
  };
  // x is N x in, result N x out.
  Matrix forward(const Matrix& x, Cache& cache) const;
  Matrix forward(const Matrix& x) const;  // no-cache variant for inference
  Matrix backward(const Cache& cache, const Matrix& d_out);

  ParamRefs params() { return {&weight, &bias}; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }

  Eigen::Map<Matrix> w() { return {weight.value.data(), out_, in_}; }
  Eigen::Map<const Matrix> w() const { return {weight.value.data(), out_, in_}; }

  Param weight;  // out x in, column-major flat
  Param bias;    // out

 private:
  int in_ = 0, out_ = 0;
};

struct Relu {
  struct Cache {
    Matrix input;
  };
  static Matrix forward(const Matrix& x, Cache& cache);
  static Matrix forward(const Matrix& x);
  static Matrix backward(const Cache& cache, const Matrix& d_out);
};

struct Sigmoid {
  struct Cache {
    Matrix output;
  };
  static Matrix forward(const Matrix& x, Cache& cache);
  static Matrix forward(const Matrix& x);
  static Matrix backward(const Cache& cache, const Matrix& d_out);
};

// 1-d batch normalization over features. Batch statistics during training,
// frozen running statistics in evaluation mode.
class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  BatchNorm1d(std::string name, int features, double eps = 1e-5,
              double momentum = 0.1);

  struct Cache {
    Matrix xhat;
    Vector inv_std;   // per feature
    Matrix centered;  // x - batch mean
    bool training = false;
  };
  Matrix forward(const Matrix& x, Cache& cache, bool training);
  Matrix forward_eval(const Matrix& x) const;
  Matrix backward(const Cache& cache, const Matrix& d_out);

  ParamRefs params() { return {&gamma, &beta}; }
  // Running statistics ride along in checkpoints but are not optimized.
  ParamRefs buffers() { return {&running_mean, &running_var}; }
  int features() const { return features_; }

  Param gamma, beta;
  Param running_mean, running_var;

 private:
  int features_ = 0;
  double eps_ = 1e-5;
  double momentum_ = 0.1;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_c, int out_c, int kernel, int stride,
         int pad, bool has_bias = true);
  void init(Rng& rng);

  struct Cache {
    FeatureMap input;
  };
  FeatureMap forward(const FeatureMap& x, Cache& cache) const;
  FeatureMap forward(const FeatureMap& x) const;
  FeatureMap backward(const Cache& cache, const FeatureMap& d_out);

  ParamRefs params();
  int out_channels() const { return out_c_; }
  int out_dim(int in_dim) const {
    return (in_dim + 2 * pad_ - kernel_) / stride_ + 1;
  }

  Param weight;  // out_c x (in_c*k*k), column-major flat
  Param bias;    // out_c (empty when has_bias == false)

 private:
  int in_c_ = 0, out_c_ = 0, kernel_ = 0, stride_ = 1, pad_ = 0;
  bool has_bias_ = true;

  void im2col(const FeatureMap& x, int instance, Matrix& cols) const;
  void col2im(const Matrix& cols, int instance, FeatureMap& dst) const;
};

// 2-d batch normalization over channels (statistics across batch and space).
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels, double eps = 1e-5,
              double momentum = 0.1);

  struct Cache {
    FeatureMap xhat;
    Vector inv_std;
    bool training = false;
  };
  FeatureMap forward(const FeatureMap& x, Cache& cache, bool training);
  FeatureMap forward_eval(const FeatureMap& x) const;
  FeatureMap backward(const Cache& cache, const FeatureMap& d_out);

  ParamRefs params() { return {&gamma, &beta}; }
  ParamRefs buffers() { return {&running_mean, &running_var}; }

  Param gamma, beta;
  Param running_mean, running_var;

 private:
  int channels_ = 0;
  double eps_ = 1e-5;
  double momentum_ = 0.1;
};

class MaxPool2d {
 public:
  MaxPool2d() = default;
  MaxPool2d(int kernel, int stride, int pad = 0)
      : kernel_(kernel), stride_(stride), pad_(pad) {}

  struct Cache {
    std::vector<std::size_t> argmax;  // flat source index per output element
    int in_n = 0, in_c = 0, in_h = 0, in_w = 0;
  };
  FeatureMap forward(const FeatureMap& x, Cache& cache) const;
  FeatureMap forward(const FeatureMap& x) const;
  FeatureMap backward(const Cache& cache, const FeatureMap& d_out) const;
  int out_dim(int in_dim) const {
    return (in_dim + 2 * pad_ - kernel_) / stride_ + 1;
  }

 private:
  int kernel_ = 2, stride_ = 2, pad_ = 0;
};

struct GlobalAvgPool {
  struct Cache {
    int h = 0, w = 0;
  };
  static Matrix forward(const FeatureMap& x, Cache& cache);
  static Matrix forward(const FeatureMap& x);
  static FeatureMap backward(const Cache& cache, int n, int c,
                             const Matrix& d_out);
};

struct ReluMap {
  struct Cache {
    FeatureMap input;
  };
  static FeatureMap forward(const FeatureMap& x, Cache& cache);
  static FeatureMap forward(const FeatureMap& x);
  static FeatureMap backward(const Cache& cache, const FeatureMap& d_out);
};

// Plain stochastic gradient descent with classical momentum:
// v <- momentum*v + grad; p <- p - lr*v.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  void attach(const ParamRefs& params);
  void zero_grad();
  void step();

 private:
  double lr_, momentum_;
  ParamRefs params_;
  std::vector<Vector> velocity_;
};

}  // namespace opendg::nn
