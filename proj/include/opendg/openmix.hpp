#pragma once

#include "opendg/image.hpp"
#include "opendg/nn.hpp"

#include <cstdint>
#include <utility>

namespace opendg::openmix {

// Learned per-dimension mixing weights over a pair of embeddings:
// Linear(2D -> D) -> ReLU -> BatchNorm1d -> Linear(D -> D) -> Sigmoid.
// The sigmoid keeps every weight strictly inside (0, 1).
class FeatAggNet {
 public:
  FeatAggNet() = default;
  explicit FeatAggNet(int dim);
  void init(Rng& rng);
  int dim() const { return dim_; }

  struct Cache {
    nn::Linear::Cache l1, l2;
    nn::Relu::Cache r1;
    nn::BatchNorm1d::Cache bn;
    nn::Sigmoid::Cache sg;
    Matrix alpha;
    Matrix e1, e3;
  };

  // Returns the fused embedding alpha.*e1 + (1-alpha).*e3; the weighting
  // vector stays available in cache.alpha.
  Matrix forward(const Matrix& e1, const Matrix& e3, bool training,
                 Cache& cache);

  // Gradient through both the mixing and the weighting network. Accumulates.
  void backward(const Cache& cache, const Matrix& d_out, Matrix& d_e1,
                Matrix& d_e3);

  nn::ParamRefs params() {
    return {&fc1.weight, &fc1.bias, &bn.gamma, &bn.beta, &fc2.weight, &fc2.bias};
  }
  nn::ParamRefs buffers() { return bn.buffers(); }

  nn::Linear fc1, fc2;
  nn::BatchNorm1d bn;

 private:
  int dim_ = 0;
};

// Spec entry point: (fused embedding, alpha). Rejects dimension mismatches.
std::pair<Matrix, Matrix> aggregate_open(FeatAggNet& net, const Matrix& e1,
                                         const Matrix& e3, bool train_mode);

// Deterministic mixing core, exposed for tests.
Matrix mix_with_alpha(const Matrix& e1, const Matrix& e3, const Matrix& alpha);

// ---- ad-hoc open-sample baselines in image space ----

// Left half of x1 joined with the right half of x3 (split at floor(W/2)).
Image baseline_half_crop(const Image& x1, const Image& x3);

// Elementwise average.
Image baseline_pixel_mean(const Image& x1, const Image& x3);

// x1 with one uniformly placed patch_size x patch_size region overwritten by
// the co-located region of x3.
Image baseline_patch_replace(const Image& x1, const Image& x3,
                             std::uint64_t rng_seed, int patch_size = 30);

}  // namespace opendg::openmix
