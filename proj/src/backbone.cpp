#include "opendg/backbone.hpp"

#include "opendg/losses.hpp"

#include <stdexcept>

namespace opendg::backbone {

SplitDepth split_depth_from_string(const std::string& s) {
  if (s == "shallow") return SplitDepth::Shallow;
  if (s == "default") return SplitDepth::Default;
  if (s == "deep") return SplitDepth::Deep;
  if (s == "toy") return SplitDepth::Toy;
  throw std::invalid_argument("unknown split depth: " + s);
}

std::string to_string(SplitDepth d) {
  switch (d) {
    case SplitDepth::Shallow: return "shallow";
    case SplitDepth::Default: return "default";
    case SplitDepth::Deep: return "deep";
    case SplitDepth::Toy: return "toy";
  }
  return "?";
}

// ------------------------------------------------------------------ toy

namespace {

class ToyEncoder final : public Encoder {
 public:
  explicit ToyEncoder(Rng& rng)
      : c1_("enc.c1", 3, 32, 3, 1, 1),
        c2_("enc.c2", 32, 64, 3, 1, 1),
        c3_("enc.c3", 64, 64, 3, 1, 1),
        c4_("enc.c4", 64, 64, 3, 1, 1),
        pool_(2, 2) {
    c1_.init(rng);
    c2_.init(rng);
    c3_.init(rng);
    c4_.init(rng);
  }

  struct EarlyCache : CacheBase {
    nn::Conv2d::Cache c1, c2;
    nn::ReluMap::Cache r1, r2;
    nn::MaxPool2d::Cache p1;
  };
  struct LateCache : CacheBase {
    nn::Conv2d::Cache c3, c4;
    nn::ReluMap::Cache r3, r4;
    nn::MaxPool2d::Cache p2;
    nn::GlobalAvgPool::Cache gap;
    int n = 0, c = 0;
  };

  SplitDepth depth() const override { return SplitDepth::Toy; }
  int seam_channels() const override { return 64; }
  int embed_dim() const override { return 64; }

  FeatureMap forward_early(const FeatureMap& x, CachePtr* cache,
                           bool /*training*/) override {
    if (!cache) {
      FeatureMap f = nn::ReluMap::forward(c1_.forward(x));
      f = pool_.forward(f);
      return nn::ReluMap::forward(c2_.forward(f));
    }
    auto cc = std::make_unique<EarlyCache>();
    FeatureMap f = nn::ReluMap::forward(c1_.forward(x, cc->c1), cc->r1);
    f = pool_.forward(f, cc->p1);
    f = nn::ReluMap::forward(c2_.forward(f, cc->c2), cc->r2);
    *cache = std::move(cc);
    return f;
  }

  void backward_early(CacheBase& cache, const FeatureMap& d_seam) override {
    auto& cc = dynamic_cast<EarlyCache&>(cache);
    FeatureMap g = nn::ReluMap::backward(cc.r2, d_seam);
    g = c2_.backward(cc.c2, g);
    g = pool_.backward(cc.p1, g);
    g = nn::ReluMap::backward(cc.r1, g);
    c1_.backward(cc.c1, g);
  }

  Matrix forward_late(const FeatureMap& seam, CachePtr* cache,
                      bool /*training*/) override {
    if (!cache) {
      FeatureMap f = nn::ReluMap::forward(c3_.forward(seam));
      f = pool_.forward(f);
      f = nn::ReluMap::forward(c4_.forward(f));
      return nn::GlobalAvgPool::forward(f);
    }
    auto cc = std::make_unique<LateCache>();
    cc->n = seam.n;
    cc->c = 64;
    FeatureMap f = nn::ReluMap::forward(c3_.forward(seam, cc->c3), cc->r3);
    f = pool_.forward(f, cc->p2);
    f = nn::ReluMap::forward(c4_.forward(f, cc->c4), cc->r4);
    Matrix e = nn::GlobalAvgPool::forward(f, cc->gap);
    *cache = std::move(cc);
    return e;
  }

  FeatureMap backward_late(CacheBase& cache, const Matrix& d_embed) override {
    auto& cc = dynamic_cast<LateCache&>(cache);
    FeatureMap g = nn::GlobalAvgPool::backward(cc.gap, cc.n, cc.c, d_embed);
    g = nn::ReluMap::backward(cc.r4, g);
    g = c4_.backward(cc.c4, g);
    g = pool_.backward(cc.p2, g);
    g = nn::ReluMap::backward(cc.r3, g);
    return c3_.backward(cc.c3, g);
  }

  nn::ParamRefs params() override {
    nn::ParamRefs out;
    for (nn::Conv2d* c : {&c1_, &c2_, &c3_, &c4_})
      for (nn::Param* p : c->params()) out.push_back(p);
    return out;
  }
  nn::ParamRefs buffers() override { return {}; }

 private:
  nn::Conv2d c1_, c2_, c3_, c4_;
  nn::MaxPool2d pool_;
};

// ------------------------------------------------------------------ reference CNN

struct BasicBlock {
  nn::Conv2d conv1, conv2;
  nn::BatchNorm2d bn1, bn2;
  bool has_down = false;
  nn::Conv2d down_conv;
  nn::BatchNorm2d down_bn;

  BasicBlock(const std::string& name, int in_c, int out_c, int stride) {
    conv1 = nn::Conv2d(name + ".conv1", in_c, out_c, 3, stride, 1, false);
    bn1 = nn::BatchNorm2d(name + ".bn1", out_c);
    conv2 = nn::Conv2d(name + ".conv2", out_c, out_c, 3, 1, 1, false);
    bn2 = nn::BatchNorm2d(name + ".bn2", out_c);
    has_down = (stride != 1 || in_c != out_c);
    if (has_down) {
      down_conv = nn::Conv2d(name + ".down.conv", in_c, out_c, 1, stride, 0, false);
      down_bn = nn::BatchNorm2d(name + ".down.bn", out_c);
    }
  }

  void init(Rng& rng) {
    conv1.init(rng);
    conv2.init(rng);
    if (has_down) down_conv.init(rng);
  }

  struct Cache {
    nn::Conv2d::Cache c1, c2, dc;
    nn::BatchNorm2d::Cache b1, b2, db;
    nn::ReluMap::Cache r1, r2;
  };

  FeatureMap forward(const FeatureMap& x, Cache& cc, bool training) {
    FeatureMap out = conv1.forward(x, cc.c1);
    out = bn1.forward(out, cc.b1, training);
    out = nn::ReluMap::forward(out, cc.r1);
    out = conv2.forward(out, cc.c2);
    out = bn2.forward(out, cc.b2, training);
    FeatureMap skip =
        has_down ? down_bn.forward(down_conv.forward(x, cc.dc), cc.db, training)
                 : x;
    for (std::size_t k = 0; k < out.size(); ++k) out.v[k] += skip.v[k];
    return nn::ReluMap::forward(out, cc.r2);
  }

  FeatureMap forward_nocache(const FeatureMap& x, bool training) {
    Cache scratch;
    return forward(x, scratch, training);
  }

  FeatureMap backward(Cache& cc, const FeatureMap& d_out) {
    FeatureMap g = nn::ReluMap::backward(cc.r2, d_out);
    FeatureMap gb = bn2.backward(cc.b2, g);
    gb = conv2.backward(cc.c2, gb);
    gb = nn::ReluMap::backward(cc.r1, gb);
    gb = bn1.backward(cc.b1, gb);
    gb = conv1.backward(cc.c1, gb);
    FeatureMap gs = has_down
                        ? down_conv.backward(cc.dc, down_bn.backward(cc.db, g))
                        : g;
    for (std::size_t k = 0; k < gb.size(); ++k) gb.v[k] += gs.v[k];
    return gb;
  }

  void collect(nn::ParamRefs& params, nn::ParamRefs& buffers) {
    for (nn::Param* p : conv1.params()) params.push_back(p);
    for (nn::Param* p : bn1.params()) params.push_back(p);
    for (nn::Param* p : conv2.params()) params.push_back(p);
    for (nn::Param* p : bn2.params()) params.push_back(p);
    if (has_down) {
      for (nn::Param* p : down_conv.params()) params.push_back(p);
      for (nn::Param* p : down_bn.params()) params.push_back(p);
    }
    for (nn::Param* p : bn1.buffers()) buffers.push_back(p);
    for (nn::Param* p : bn2.buffers()) buffers.push_back(p);
    if (has_down)
      for (nn::Param* p : down_bn.buffers()) buffers.push_back(p);
  }
};

class ResNetEncoder final : public Encoder {
 public:
  ResNetEncoder(SplitDepth depth, Rng& rng)
      : depth_(depth),
        stem_conv_("enc.stem.conv", 3, 64, 7, 2, 3, false),
        stem_bn_("enc.stem.bn", 64),
        stem_pool_(3, 2, 1) {
    const int widths[4] = {64, 128, 256, 512};
    int in_c = 64;
    for (int stage = 0; stage < 4; ++stage) {
      const int out_c = widths[stage];
      const int stride = stage == 0 ? 1 : 2;
      blocks_.emplace_back("enc.l" + std::to_string(stage + 1) + ".b0", in_c,
                           out_c, stride);
      blocks_.emplace_back("enc.l" + std::to_string(stage + 1) + ".b1", out_c,
                           out_c, 1);
      in_c = out_c;
    }
    stem_conv_.init(rng);
    for (BasicBlock& b : blocks_) b.init(rng);
    switch (depth) {
      case SplitDepth::Shallow: early_blocks_ = 0; break;
      case SplitDepth::Default: early_blocks_ = 2; break;
      case SplitDepth::Deep: early_blocks_ = 4; break;
      default: throw std::invalid_argument("ResNetEncoder: bad depth");
    }
  }

  struct EarlyCache : CacheBase {
    nn::Conv2d::Cache sc;
    nn::BatchNorm2d::Cache sb;
    nn::ReluMap::Cache sr;
    nn::MaxPool2d::Cache sp;
    std::vector<BasicBlock::Cache> blocks;
  };
  struct LateCache : CacheBase {
    std::vector<BasicBlock::Cache> blocks;
    nn::GlobalAvgPool::Cache gap;
    int n = 0;
  };

  SplitDepth depth() const override { return depth_; }
  int seam_channels() const override {
    return early_blocks_ == 4 ? 128 : 64;
  }
  int embed_dim() const override { return 512; }

  FeatureMap forward_early(const FeatureMap& x, CachePtr* cache,
                           bool training) override {
    if (!cache) {
      // cache-free runs are inference: frozen statistics, no side effects
      FeatureMap f = stem_bn_.forward_eval(stem_conv_.forward(x));
      f = nn::ReluMap::forward(f);
      f = stem_pool_.forward(f);
      for (int b = 0; b < early_blocks_; ++b)
        f = blocks_[b].forward_nocache(f, false);
      return f;
    }
    auto cc = std::make_unique<EarlyCache>();
    cc->blocks.resize(early_blocks_);
    FeatureMap f = stem_conv_.forward(x, cc->sc);
    f = stem_bn_.forward(f, cc->sb, training);
    f = nn::ReluMap::forward(f, cc->sr);
    f = stem_pool_.forward(f, cc->sp);
    for (int b = 0; b < early_blocks_; ++b)
      f = blocks_[b].forward(f, cc->blocks[b], training);
    *cache = std::move(cc);
    return f;
  }

  void backward_early(CacheBase& cache, const FeatureMap& d_seam) override {
    auto& cc = dynamic_cast<EarlyCache&>(cache);
    FeatureMap g = d_seam;
    for (int b = early_blocks_ - 1; b >= 0; --b)
      g = blocks_[b].backward(cc.blocks[b], g);
    g = stem_pool_.backward(cc.sp, g);
    g = nn::ReluMap::backward(cc.sr, g);
    g = stem_bn_.backward(cc.sb, g);
    stem_conv_.backward(cc.sc, g);
  }

  Matrix forward_late(const FeatureMap& seam, CachePtr* cache,
                      bool training) override {
    if (!cache) {
      FeatureMap f = seam;
      for (std::size_t b = early_blocks_; b < blocks_.size(); ++b)
        f = blocks_[b].forward_nocache(f, false);
      return nn::GlobalAvgPool::forward(f);
    }
    auto cc = std::make_unique<LateCache>();
    cc->n = seam.n;
    cc->blocks.resize(blocks_.size() - early_blocks_);
    FeatureMap f = seam;
    for (std::size_t b = early_blocks_; b < blocks_.size(); ++b)
      f = blocks_[b].forward(f, cc->blocks[b - early_blocks_], training);
    Matrix e = nn::GlobalAvgPool::forward(f, cc->gap);
    *cache = std::move(cc);
    return e;
  }

  FeatureMap backward_late(CacheBase& cache, const Matrix& d_embed) override {
    auto& cc = dynamic_cast<LateCache&>(cache);
    FeatureMap g = nn::GlobalAvgPool::backward(cc.gap, cc.n, 512, d_embed);
    for (int b = static_cast<int>(blocks_.size()) - 1; b >= early_blocks_; --b)
      g = blocks_[b].backward(cc.blocks[b - early_blocks_], g);
    return g;
  }

  nn::ParamRefs params() override {
    nn::ParamRefs out;
    for (nn::Param* p : stem_conv_.params()) out.push_back(p);
    for (nn::Param* p : stem_bn_.params()) out.push_back(p);
    nn::ParamRefs bufs;
    for (BasicBlock& b : blocks_) b.collect(out, bufs);
    return out;
  }
  nn::ParamRefs buffers() override {
    nn::ParamRefs params, bufs;
    for (nn::Param* p : stem_bn_.buffers()) bufs.push_back(p);
    for (BasicBlock& b : blocks_) b.collect(params, bufs);
    return bufs;
  }

 private:
  SplitDepth depth_;
  nn::Conv2d stem_conv_;
  nn::BatchNorm2d stem_bn_;
  nn::MaxPool2d stem_pool_;
  std::vector<BasicBlock> blocks_;
  int early_blocks_ = 2;
};

}  // namespace

std::unique_ptr<Encoder> make_encoder(SplitDepth depth, Rng& rng) {
  if (depth == SplitDepth::Toy) return std::make_unique<ToyEncoder>(rng);
  return std::make_unique<ResNetEncoder>(depth, rng);
}

// ------------------------------------------------------------------ head

ClassifierHead::ClassifierHead(int embed_dim, int num_known, bool open_head)
    : fc("head.fc", embed_dim, num_known + (open_head ? 1 : 0)),
      num_known_(num_known),
      open_head_(open_head) {}

void ClassifierHead::init(Rng& rng) { fc.init(rng); }

// ------------------------------------------------------------------ forward paths

Matrix forward_clean(Encoder& enc, const ClassifierHead& head,
                     const FeatureMap& x) {
  if (!x.valid_shape() || !x.all_finite())
    throw std::invalid_argument("forward_clean: invalid image batch");
  FeatureMap seam = enc.forward_early(x, nullptr, false);
  Matrix embed = enc.forward_late(seam, nullptr, false);
  return losses::row_softmax(head.logits(embed));
}

Matrix forward_styled(Encoder& enc, const ClassifierHead& head,
                      const stylesynth::StyleSynthNet& ssnet,
                      const FeatureMap& x1, const FeatureMap& x2,
                      const StyledOptions& opt) {
  if (!x1.same_shape(x2))
    throw std::invalid_argument("forward_styled: batch shape mismatch");
  if (opt.labels1 && opt.labels2) {
    if (opt.labels1->size() != opt.labels2->size() ||
        static_cast<int>(opt.labels1->size()) != x1.n)
      throw std::invalid_argument("forward_styled: label count mismatch");
    for (std::size_t i = 0; i < opt.labels1->size(); ++i)
      if ((*opt.labels1)[i] != (*opt.labels2)[i])
        throw std::invalid_argument("forward_styled: pair labels must match");
  }

  FeatureMap f1 = enc.forward_early(x1, nullptr, false);
  FeatureMap f2 = enc.forward_early(x2, nullptr, false);
  featstats::StyleStats s1 = featstats::compute_instance_stats(f1);
  featstats::StyleStats s2 = featstats::compute_instance_stats(f2);
  featstats::StyleStats style =
      opt.force_style ? *opt.force_style
                      : stylesynth::synthesize_style(ssnet, s1, s2, opt.noise,
                                                     opt.seed);
  FeatureMap restyled = featstats::restyle(f1, s1, style, opt.stats);
  Matrix embed = enc.forward_late(restyled, nullptr, false);
  return losses::row_softmax(head.logits(embed));
}

std::pair<Matrix, Matrix> forward_open(Encoder& enc, const ClassifierHead& head,
                                       openmix::FeatAggNet& fanet,
                                       const FeatureMap& x1,
                                       const FeatureMap& x3,
                                       const OpenOptions& opt) {
  if (!x1.same_shape(x3))
    throw std::invalid_argument("forward_open: batch shape mismatch");
  if (opt.labels1 && opt.labels3) {
    if (opt.labels1->size() != opt.labels3->size() ||
        static_cast<int>(opt.labels1->size()) != x1.n)
      throw std::invalid_argument("forward_open: label count mismatch");
    for (std::size_t i = 0; i < opt.labels1->size(); ++i)
      if ((*opt.labels1)[i] == (*opt.labels3)[i])
        throw std::invalid_argument("forward_open: pair labels must differ");
  }

  FeatureMap f1 = enc.forward_early(x1, nullptr, false);
  FeatureMap f3 = enc.forward_early(x3, nullptr, false);

  if (opt.ssnet && opt.style_route_prob > 0.0) {
    Rng rng(derive_seed(opt.seed, 0x6f70656eULL));
    FeatureMap* maps[2] = {&f1, &f3};
    for (int m = 0; m < 2; ++m) {
      if (rng.uniform() < opt.style_route_prob) {
        featstats::StyleStats s = featstats::compute_instance_stats(*maps[m]);
        featstats::StyleStats style = stylesynth::synthesize_style(
            *opt.ssnet, s, s, opt.noise, derive_seed(opt.seed, 1 + m));
        *maps[m] = featstats::restyle(*maps[m], s, style, opt.stats);
      }
    }
  }

  Matrix e1 = enc.forward_late(f1, nullptr, false);
  Matrix e3 = enc.forward_late(f3, nullptr, false);

  Matrix fused, alpha;
  if (opt.force_alpha) {
    alpha = *opt.force_alpha;
    fused = openmix::mix_with_alpha(e1, e3, alpha);
  } else {
    auto [f, a] = openmix::aggregate_open(fanet, e1, e3, false);
    fused = std::move(f);
    alpha = std::move(a);
  }
  return {losses::row_softmax(head.logits(fused)), std::move(alpha)};
}

}  // namespace opendg::backbone
