#include "opendg/openmix.hpp"

#include "opendg/rng.hpp"

#include <stdexcept>

namespace opendg::openmix {

FeatAggNet::FeatAggNet(int dim)
    : fc1("fanet.fc1", 2 * dim, dim),
      fc2("fanet.fc2", dim, dim),
      bn("fanet.bn", dim),
      dim_(dim) {}

void FeatAggNet::init(Rng& rng) {
  fc1.init(rng);
  fc2.init(rng);
}

Matrix FeatAggNet::forward(const Matrix& e1, const Matrix& e3, bool training,
                           Cache& cache) {
  if (e1.rows() != e3.rows() || e1.cols() != e3.cols())
    throw std::invalid_argument("aggregate_open: embedding shape mismatch");
  if (e1.cols() != dim_)
    throw std::invalid_argument("aggregate_open: embedding dimension mismatch");

  cache.e1 = e1;
  cache.e3 = e3;
  Matrix joint(e1.rows(), 2 * dim_);
  joint.leftCols(dim_) = e1;
  joint.rightCols(dim_) = e3;

  Matrix h = nn::Relu::forward(fc1.forward(joint, cache.l1), cache.r1);
  h = bn.forward(h, cache.bn, training);
  cache.alpha = nn::Sigmoid::forward(fc2.forward(h, cache.l2), cache.sg);
  return mix_with_alpha(e1, e3, cache.alpha);
}

void FeatAggNet::backward(const Cache& cache, const Matrix& d_out,
                          Matrix& d_e1, Matrix& d_e3) {
  // Mixing: out = a.*e1 + (1-a).*e3
  d_e1 += d_out.cwiseProduct(cache.alpha);
  d_e3 += d_out.cwiseProduct(Matrix::Ones(d_out.rows(), d_out.cols()) - cache.alpha);
  Matrix d_alpha = d_out.cwiseProduct(cache.e1 - cache.e3);

  Matrix g = nn::Sigmoid::backward(cache.sg, d_alpha);
  g = fc2.backward(cache.l2, g);
  g = bn.backward(cache.bn, g);
  g = nn::Relu::backward(cache.r1, g);
  Matrix d_joint = fc1.backward(cache.l1, g);
  d_e1 += d_joint.leftCols(dim_);
  d_e3 += d_joint.rightCols(dim_);
}

std::pair<Matrix, Matrix> aggregate_open(FeatAggNet& net, const Matrix& e1,
                                         const Matrix& e3, bool train_mode) {
  FeatAggNet::Cache cache;
  Matrix fused = net.forward(e1, e3, train_mode, cache);
  return {std::move(fused), std::move(cache.alpha)};
}

Matrix mix_with_alpha(const Matrix& e1, const Matrix& e3, const Matrix& alpha) {
  if (e1.rows() != e3.rows() || e1.cols() != e3.cols() ||
      alpha.rows() != e1.rows() || alpha.cols() != e1.cols())
    throw std::invalid_argument("mix_with_alpha: shape mismatch");
  return alpha.cwiseProduct(e1) +
         (Matrix::Ones(alpha.rows(), alpha.cols()) - alpha).cwiseProduct(e3);
}

static void require_same_shape(const Image& x1, const Image& x3,
                               const char* what) {
  if (!x1.same_shape(x3))
    throw std::invalid_argument(std::string(what) + ": image shape mismatch");
}

Image baseline_half_crop(const Image& x1, const Image& x3) {
  require_same_shape(x1, x3, "baseline_half_crop");
  Image out = x1;
  const int split = x1.w / 2;
  for (int ch = 0; ch < x1.c; ++ch)
    for (int y = 0; y < x1.h; ++y)
      for (int x = split; x < x1.w; ++x) out.at(ch, y, x) = x3.at(ch, y, x);
  return out;
}

Image baseline_pixel_mean(const Image& x1, const Image& x3) {
  require_same_shape(x1, x3, "baseline_pixel_mean");
  Image out = x1;
  for (std::size_t k = 0; k < out.v.size(); ++k)
    out.v[k] = 0.5 * (x1.v[k] + x3.v[k]);
  return out;
}

Image baseline_patch_replace(const Image& x1, const Image& x3,
                             std::uint64_t rng_seed, int patch_size) {
  require_same_shape(x1, x3, "baseline_patch_replace");
  if (x1.h < patch_size || x1.w < patch_size)
    throw std::invalid_argument("baseline_patch_replace: image smaller than patch");
  Rng rng(rng_seed);
  const int top = rng.uniform_int(0, x1.h - patch_size);
  const int left = rng.uniform_int(0, x1.w - patch_size);
  Image out = x1;
  for (int ch = 0; ch < x1.c; ++ch)
    for (int y = top; y < top + patch_size; ++y)
      for (int x = left; x < left + patch_size; ++x)
        out.at(ch, y, x) = x3.at(ch, y, x);
  return out;
}

}  // namespace opendg::openmix
