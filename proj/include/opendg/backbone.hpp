#pragma once

#include "opendg/featstats.hpp"
#include "opendg/nn.hpp"
#include "opendg/openmix.hpp"
#include "opendg/stylesynth.hpp"

#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace opendg::backbone {

enum class SplitDepth { Shallow, Default, Deep, Toy };

SplitDepth split_depth_from_string(const std::string& s);
std::string to_string(SplitDepth d);

struct CacheBase {
  virtual ~CacheBase() = default;
};
using CachePtr = std::unique_ptr<CacheBase>;

// Split feature extractor: an early part ending at the style-injection seam
// and a late part ending in global average pooling. Forward passes may run
// cache-free (inference) or fill a caller-owned cache for backprop, so one
// encoder instance can serve several branches per training step.
class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual SplitDepth depth() const = 0;
  virtual int seam_channels() const = 0;  // C_f at the seam
  virtual int embed_dim() const = 0;      // D after pooling

  virtual FeatureMap forward_early(const FeatureMap& x, CachePtr* cache,
                                   bool training) = 0;
  virtual void backward_early(CacheBase& cache, const FeatureMap& d_seam) = 0;
  virtual Matrix forward_late(const FeatureMap& seam, CachePtr* cache,
                              bool training) = 0;
  virtual FeatureMap backward_late(CacheBase& cache, const Matrix& d_embed) = 0;

  virtual nn::ParamRefs params() = 0;
  virtual nn::ParamRefs buffers() = 0;
};

// Toy: conv(3->32)+relu+pool, conv(32->64)+relu | seam | conv+relu+pool,
// conv+relu, gap -> 64. Reference: the 18-layer residual CNN, seam after the
// fifth conv block by default, with shallow and deep seam variants.
std::unique_ptr<Encoder> make_encoder(SplitDepth depth, Rng& rng);

// Affine map from embeddings to class logits; the last index is the open
// class when open_head is true.
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(int embed_dim, int num_known, bool open_head = true);
  void init(Rng& rng);

  int num_known() const { return num_known_; }
  int num_outputs() const { return fc.out_features(); }
  bool open_head() const { return open_head_; }

  Matrix logits(const Matrix& embed, nn::Linear::Cache& cache) const {
    return fc.forward(embed, cache);
  }
  Matrix logits(const Matrix& embed) const { return fc.forward(embed); }
  Matrix backward(const nn::Linear::Cache& cache, const Matrix& d_logits) {
    return fc.backward(cache, d_logits);
  }

  nn::ParamRefs params() { return fc.params(); }

  nn::Linear fc;

 private:
  int num_known_ = 0;
  bool open_head_ = true;
};

// ---- whole-model forward paths (evaluation-style conveniences) ----

// Posterior rows over C+1 classes for a batch of images.
Matrix forward_clean(Encoder& enc, const ClassifierHead& head,
                     const FeatureMap& x);

struct StyledOptions {
  featstats::StatsConfig stats;
  stylesynth::NoiseSpec noise;
  std::uint64_t seed = 0;
  // Test hook: bypass the synthesizer and restyle with these stats.
  const featstats::StyleStats* force_style = nullptr;
  // When both label vectors are given, pairs must be label-matched.
  const std::vector<int>* labels1 = nullptr;
  const std::vector<int>* labels2 = nullptr;
};

// Restyles x1 at the seam with a style synthesized from the pair (x1, x2);
// the output carries x1's label downstream.
Matrix forward_styled(Encoder& enc, const ClassifierHead& head,
                      const stylesynth::StyleSynthNet& ssnet,
                      const FeatureMap& x1, const FeatureMap& x2,
                      const StyledOptions& opt);

struct OpenOptions {
  double style_route_prob = 0.0;
  std::uint64_t seed = 0;
  // Optional style routing of the inputs before pooling; each routed sample
  // is restyled with a style synthesized from its own stats pair.
  const stylesynth::StyleSynthNet* ssnet = nullptr;
  stylesynth::NoiseSpec noise;
  featstats::StatsConfig stats;
  // Test hook: bypass the aggregation net's weighting.
  const Matrix* force_alpha = nullptr;
  // When both label vectors are given, pairs must differ.
  const std::vector<int>* labels1 = nullptr;
  const std::vector<int>* labels3 = nullptr;
};

// Fuses the embeddings of x1 and x3 into pseudo-open samples. Returns
// (posteriors, alpha).
std::pair<Matrix, Matrix> forward_open(Encoder& enc, const ClassifierHead& head,
                                       openmix::FeatAggNet& fanet,
                                       const FeatureMap& x1,
                                       const FeatureMap& x3,
                                       const OpenOptions& opt);

}  // namespace opendg::backbone
