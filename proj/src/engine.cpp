#include "opendg/engine.hpp"

#include "opendg/checkpoint.hpp"
#include "opendg/log.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace opendg::engine {

using backbone::CachePtr;
using featstats::StyleStats;

// ------------------------------------------------------------- config

StyleMode style_mode_from_string(const std::string& s) {
  if (s == "synth") return StyleMode::Synth;
  if (s == "mixstyle") return StyleMode::MixStyle;
  throw std::invalid_argument("unknown style mode: " + s);
}

OpenMode open_mode_from_string(const std::string& s) {
  if (s == "learned") return OpenMode::Learned;
  if (s == "half-crop") return OpenMode::HalfCrop;
  if (s == "pixel-mean") return OpenMode::PixelMean;
  if (s == "patch-replace") return OpenMode::PatchReplace;
  throw std::invalid_argument("unknown open mode: " + s);
}

std::string to_string(StyleMode m) {
  return m == StyleMode::Synth ? "synth" : "mixstyle";
}

std::string to_string(OpenMode m) {
  switch (m) {
    case OpenMode::Learned: return "learned";
    case OpenMode::HalfCrop: return "half-crop";
    case OpenMode::PixelMean: return "pixel-mean";
    default: return "patch-replace";
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("momentum must be in [0, 1)");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!band_mean.valid() || !band_std.valid())
    throw std::invalid_argument("style bands must satisfy 0 <= a < b");
  if (noise.stddev < 0.0) throw std::invalid_argument("noise std must be >= 0");
  if (weights.ce < 0.0 || weights.disc < 0.0 || weights.sm < 0.0)
    throw std::invalid_argument("loss weights must be nonnegative");
  if (style_route_prob < 0.0 || style_route_prob > 1.0)
    throw std::invalid_argument("style_route_prob must be in [0, 1]");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
  if (reshuffle_period < 1) throw std::invalid_argument("reshuffle_period must be >= 1");
  if (mixstyle_beta <= 0.0) throw std::invalid_argument("mixstyle_beta must be > 0");
}

TrainConfig erm_config(TrainConfig base) {
  base.weights = {1.0, 0.0, 0.0};
  base.use_styled_branch = false;
  base.use_open_branch = false;
  return base;
}

// ------------------------------------------------------------- model

nn::ParamRefs Model::params() {
  nn::ParamRefs out = encoder->params();
  for (nn::Param* p : head.params()) out.push_back(p);
  for (nn::Param* p : ssnet.params()) out.push_back(p);
  for (nn::Param* p : fanet.params()) out.push_back(p);
  return out;
}

nn::ParamRefs Model::buffers() {
  nn::ParamRefs out = encoder->buffers();
  for (nn::Param* p : fanet.buffers()) out.push_back(p);
  return out;
}

Model make_model(backbone::SplitDepth depth, int num_known, bool open_head,
                 std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x696e6974ULL));
  Model m;
  m.encoder = backbone::make_encoder(depth, rng);
  m.head = backbone::ClassifierHead(m.encoder->embed_dim(), num_known, open_head);
  m.head.init(rng);
  m.ssnet = stylesynth::StyleSynthNet(m.encoder->seam_channels());
  m.ssnet.init(rng);
  m.fanet = openmix::FeatAggNet(m.encoder->embed_dim());
  m.fanet.init(rng);
  m.depth = depth;
  m.num_known = num_known;
  m.init_seed = seed;
  return m;
}

// ------------------------------------------------------------- data prep

PreparedData prepare(const data::Dataset& ds, const data::PreprocessConfig& cfg) {
  PreparedData out;
  out.num_classes = ds.num_classes;
  out.images.reserve(ds.size());
  for (const data::Sample& s : ds.samples) {
    out.images.push_back(data::preprocess(s.image, cfg));
    out.labels.push_back(s.label);
    out.domains.push_back(s.domain);
    out.ids.push_back(s.id);
  }
  return out;
}

data::Dataset PreparedData::as_dataset() const {
  data::Dataset ds;
  ds.num_classes = num_classes;
  ds.samples.resize(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    ds.samples[i].label = labels[i];
    ds.samples[i].domain = domains[i];
    ds.samples[i].id = ids[i];
  }
  return ds;
}

// ------------------------------------------------------------- helpers

namespace {

FeatureMap gather_batch(const PreparedData& data, const std::vector<int>& idx) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(idx.size());
  for (int i : idx) ptrs.push_back(&data.images[i]);
  return data::to_batch(ptrs);
}

FeatureMap select_rows(const std::vector<char>& mask, const FeatureMap& routed,
                       const FeatureMap& plain) {
  FeatureMap out = plain;
  const std::size_t stride = static_cast<std::size_t>(out.c) * out.h * out.w;
  for (int i = 0; i < out.n; ++i)
    if (mask[i])
      std::memcpy(out.v.data() + i * stride, routed.v.data() + i * stride,
                  stride * sizeof(double));
  return out;
}

void scatter_rows(const FeatureMap& grad, const std::vector<char>& mask,
                  FeatureMap& routed_acc, FeatureMap& plain_acc) {
  const std::size_t stride = static_cast<std::size_t>(grad.c) * grad.h * grad.w;
  for (int i = 0; i < grad.n; ++i) {
    FeatureMap& dst = mask[i] ? routed_acc : plain_acc;
    double* d = dst.v.data() + i * stride;
    const double* g = grad.v.data() + i * stride;
    for (std::size_t k = 0; k < stride; ++k) d[k] += g[k];
  }
}

Image slice_to_image(const FeatureMap& batch, int i) {
  Image img(batch.c, batch.h, batch.w);
  const std::size_t stride = img.v.size();
  std::memcpy(img.v.data(), batch.v.data() + i * stride, stride * sizeof(double));
  return img;
}

struct StepLosses {
  double ce = 0.0, disc = 0.0, sm = 0.0;
  double total() const { return ce + disc + sm; }
};

std::string batch_diagnostics(const Matrix& logits) {
  std::ostringstream os;
  os << "logits min=" << logits.minCoeff() << " max=" << logits.maxCoeff();
  return os.str();
}

}  // namespace

// ------------------------------------------------------------- train step

namespace {

StepLosses train_step(Model& model, const PreparedData& source,
                      const std::vector<data::Triplet>& batch,
                      const TrainConfig& cfg, int epoch, int step_in_epoch,
                      nn::SgdMomentum& opt) {
  backbone::Encoder& enc = *model.encoder;
  const int n = static_cast<int>(batch.size());
  const int c_known = model.num_known;
  const int open_label = c_known;  // last head index when the head is open

  const bool styled_on = cfg.use_styled_branch && !batch.empty();
  const bool open_on = cfg.use_open_branch && !cfg.closed_set;
  const bool open_learned = open_on && cfg.open_mode == OpenMode::Learned;
  const featstats::StatsConfig stats_cfg{cfg.epsilon};

  std::vector<int> idx1(n), idx2(n), idx3(n), labels(n);
  for (int i = 0; i < n; ++i) {
    idx1[i] = batch[i].i1;
    idx2[i] = batch[i].i2;
    idx3[i] = batch[i].i3;
    labels[i] = batch[i].y1;
  }

  opt.zero_grad();

  // ---- forward ----
  FeatureMap x1 = gather_batch(source, idx1);
  CachePtr ec1;
  FeatureMap f1 = enc.forward_early(x1, &ec1, true);

  CachePtr ec2, ec3;
  FeatureMap f2, f3;
  StyleStats s1, s2, s3;
  StyleStats synth;
  stylesynth::StyleSynthNet::Cache ss_cache;
  Vector mix_lambda;
  FeatureMap restyled1, restyled3;
  CachePtr late_styled;
  Matrix e_styled;

  if (styled_on) {
    FeatureMap x2 = gather_batch(source, idx2);
    f2 = enc.forward_early(x2, &ec2, true);
    s1 = featstats::compute_instance_stats(f1);
    s2 = featstats::compute_instance_stats(f2);
    const std::uint64_t style_seed =
        derive_seed(cfg.seed, 0x7374796cULL, epoch, step_in_epoch);
    if (cfg.style_mode == StyleMode::Synth) {
      synth = model.ssnet.forward(s1, s2, cfg.noise, style_seed, ss_cache);
    } else {
      mix_lambda = stylesynth::mixstyle_lambdas(
          n, {cfg.mixstyle_beta}, style_seed);
      synth = stylesynth::mixstyle_with_lambda(s1, s2, mix_lambda);
    }
    restyled1 = featstats::restyle(f1, s1, synth, stats_cfg);
    e_styled = enc.forward_late(restyled1, &late_styled, true);
  }

  // open branch
  std::vector<char> route1(n, 0), route3(n, 0);
  bool any_route3 = false;
  CachePtr late_open1, late_open3, late_adhoc;
  Matrix e_open;
  openmix::FeatAggNet::Cache fa_cache;
  FeatureMap f1_open, f3_open, f_adhoc;
  CachePtr ec_adhoc;

  if (open_learned) {
    FeatureMap x3 = gather_batch(source, idx3);
    f3 = enc.forward_early(x3, &ec3, true);
    if (styled_on && cfg.style_route_prob > 0.0) {
      Rng route_rng(derive_seed(cfg.seed, 0x726f7574ULL, epoch, step_in_epoch));
      for (int i = 0; i < n; ++i) {
        route1[i] = route_rng.uniform() < cfg.style_route_prob ? 1 : 0;
        route3[i] = route_rng.uniform() < cfg.style_route_prob ? 1 : 0;
        any_route3 = any_route3 || route3[i];
      }
    }
    if (any_route3) {
      s3 = featstats::compute_instance_stats(f3);
      restyled3 = featstats::restyle(f3, s3, synth, stats_cfg);
      f3_open = select_rows(route3, restyled3, f3);
    } else {
      f3_open = f3;
    }
    f1_open = styled_on ? select_rows(route1, restyled1, f1) : f1;
    Matrix e1o = enc.forward_late(f1_open, &late_open1, true);
    Matrix e3o = enc.forward_late(f3_open, &late_open3, true);
    e_open = model.fanet.forward(e1o, e3o, true, fa_cache);
  } else if (open_on) {
    // ad-hoc image-space baselines
    FeatureMap x3 = gather_batch(source, idx3);
    FeatureMap xo(n, x1.c, x1.h, x1.w);
    Rng patch_rng(derive_seed(cfg.seed, 0x70617463ULL, epoch, step_in_epoch));
    for (int i = 0; i < n; ++i) {
      Image a = slice_to_image(x1, i);
      Image b = slice_to_image(x3, i);
      Image mixed;
      switch (cfg.open_mode) {
        case OpenMode::HalfCrop: mixed = openmix::baseline_half_crop(a, b); break;
        case OpenMode::PixelMean: mixed = openmix::baseline_pixel_mean(a, b); break;
        default:
          mixed = openmix::baseline_patch_replace(a, b, patch_rng.raw(),
                                                  cfg.patch_size);
      }
      std::memcpy(xo.v.data() + i * mixed.v.size(), mixed.v.data(),
                  mixed.v.size() * sizeof(double));
    }
    f_adhoc = enc.forward_early(xo, &ec_adhoc, true);
    e_open = enc.forward_late(f_adhoc, &late_adhoc, true);
  }

  // clean branch
  CachePtr late_clean;
  Matrix e_clean = enc.forward_late(f1, &late_clean, true);

  // heads
  nn::Linear::Cache hc_clean, hc_styled, hc_open;
  Matrix z_clean = model.head.logits(e_clean, hc_clean);
  Matrix z_styled, z_open;
  if (styled_on) z_styled = model.head.logits(e_styled, hc_styled);
  if (open_on) z_open = model.head.logits(e_open, hc_open);

  // ---- losses on logits ----
  const int n_clean = static_cast<int>(z_clean.rows());
  const int n_styled = styled_on ? static_cast<int>(z_styled.rows()) : 0;
  const int n_open = open_on ? static_cast<int>(z_open.rows()) : 0;
  const int total_rows = n_clean + n_styled + n_open;

  Matrix d_clean = Matrix::Zero(z_clean.rows(), z_clean.cols());
  Matrix d_styled = styled_on ? Matrix::Zero(z_styled.rows(), z_styled.cols()) : Matrix();
  Matrix d_open = open_on ? Matrix::Zero(z_open.rows(), z_open.cols()) : Matrix();

  StepLosses out;

  // Cross entropy over the union of branches: branch means recombined by
  // size so the value and gradient match a single mean over all rows.
  std::vector<int> open_labels(n_open, open_label);
  double ce = 0.0;
  ce += losses::ce_softmax_backward(
            z_clean, labels, cfg.weights.ce * n_clean / total_rows, d_clean) *
        n_clean / total_rows;
  if (styled_on)
    ce += losses::ce_softmax_backward(
              z_styled, labels, cfg.weights.ce * n_styled / total_rows, d_styled) *
          n_styled / total_rows;
  if (open_on)
    ce += losses::ce_softmax_backward(
              z_open, open_labels, cfg.weights.ce * n_open / total_rows, d_open) *
          n_open / total_rows;
  out.ce = ce;

  // Discriminability: open entropy (down) minus closed margin (up).
  if (open_on) {
    const double ent = losses::entropy_mean_backward(z_open, cfg.weights.disc, d_open);
    Matrix z_closed(n_clean + n_styled, z_clean.cols());
    z_closed.topRows(n_clean) = z_clean;
    if (styled_on) z_closed.bottomRows(n_styled) = z_styled;
    Matrix d_closed = Matrix::Zero(z_closed.rows(), z_closed.cols());
    const double marg =
        losses::closed_margin_mean_backward(z_closed, -cfg.weights.disc, d_closed);
    d_clean += d_closed.topRows(n_clean);
    if (styled_on) d_styled += d_closed.bottomRows(n_styled);
    out.disc = ent - marg;
  }

  // Style margin loss on the synthesized styles.
  StyleStats d_synth, d_s1, d_s2, d_s3;
  if (styled_on) {
    d_synth = StyleStats(n, synth.channels());
    d_s1 = StyleStats(n, synth.channels());
    d_s2 = StyleStats(n, synth.channels());
    if (cfg.style_mode == StyleMode::Synth) {
      out.sm = stylesynth::style_margin_loss_backward(
          synth, s1, s2, cfg.band_mean, cfg.band_std, cfg.weights.sm, d_synth,
          d_s1, d_s2);
    }
  }

  if (!std::isfinite(out.total())) {
    std::ostringstream os;
    os << "non-finite loss at epoch " << epoch << " step " << step_in_epoch
       << ": ce=" << out.ce << " disc=" << out.disc << " sm=" << out.sm << "; "
       << batch_diagnostics(z_clean);
    throw std::runtime_error(os.str());
  }

  // ---- backward ----
  Matrix d_e_clean = model.head.backward(hc_clean, d_clean);
  FeatureMap d_f1(f1.n, f1.c, f1.h, f1.w);
  FeatureMap d_restyled1;
  if (styled_on) d_restyled1 = FeatureMap(f1.n, f1.c, f1.h, f1.w);

  {
    FeatureMap g = enc.backward_late(*late_clean, d_e_clean);
    for (std::size_t k = 0; k < d_f1.size(); ++k) d_f1.v[k] += g.v[k];
  }
  if (styled_on) {
    Matrix d_e_styled = model.head.backward(hc_styled, d_styled);
    FeatureMap g = enc.backward_late(*late_styled, d_e_styled);
    for (std::size_t k = 0; k < d_restyled1.size(); ++k) d_restyled1.v[k] += g.v[k];
  }
  if (open_learned) {
    Matrix d_e_open = model.head.backward(hc_open, d_open);
    Matrix d_e1o = Matrix::Zero(e_open.rows(), e_open.cols());
    Matrix d_e3o = Matrix::Zero(e_open.rows(), e_open.cols());
    model.fanet.backward(fa_cache, d_e_open, d_e1o, d_e3o);

    FeatureMap g1 = enc.backward_late(*late_open1, d_e1o);
    if (styled_on) {
      scatter_rows(g1, route1, d_restyled1, d_f1);
    } else {
      for (std::size_t k = 0; k < d_f1.size(); ++k) d_f1.v[k] += g1.v[k];
    }

    FeatureMap g3 = enc.backward_late(*late_open3, d_e3o);
    FeatureMap d_f3(f3.n, f3.c, f3.h, f3.w);
    if (any_route3) {
      FeatureMap d_restyled3(f3.n, f3.c, f3.h, f3.w);
      scatter_rows(g3, route3, d_restyled3, d_f3);
      d_s3 = StyleStats(n, synth.channels());
      featstats::restyle_backward(f3, s3, synth, stats_cfg, d_restyled3, d_f3,
                                  d_s3, d_synth);
      featstats::instance_stats_backward(f3, s3, d_s3.mean, d_s3.stddev, d_f3);
    } else {
      for (std::size_t k = 0; k < d_f3.size(); ++k) d_f3.v[k] += g3.v[k];
    }
    enc.backward_early(*ec3, d_f3);
  } else if (open_on) {
    Matrix d_e_open = model.head.backward(hc_open, d_open);
    FeatureMap g = enc.backward_late(*late_adhoc, d_e_open);
    enc.backward_early(*ec_adhoc, g);
  }

  if (styled_on) {
    // restyle backward feeds the feature map, its own stats and the style
    featstats::restyle_backward(f1, s1, synth, stats_cfg, d_restyled1, d_f1,
                                d_s1, d_synth);
    if (cfg.style_mode == StyleMode::Synth) {
      model.ssnet.backward(ss_cache, d_synth, d_s1, d_s2);
    } else {
      stylesynth::mixstyle_backward(mix_lambda, d_synth, d_s1, d_s2);
    }
    featstats::instance_stats_backward(f1, s1, d_s1.mean, d_s1.stddev, d_f1);
    FeatureMap d_f2(f2.n, f2.c, f2.h, f2.w);
    featstats::instance_stats_backward(f2, s2, d_s2.mean, d_s2.stddev, d_f2);
    enc.backward_early(*ec2, d_f2);
  }

  enc.backward_early(*ec1, d_f1);

  opt.step();
  return out;
}

}  // namespace

// ------------------------------------------------------------- train loop

TrainResult train(Model& model, const PreparedData& source,
                  const TrainConfig& cfg,
                  const std::optional<std::string>& out_dir) {
  cfg.validate();
  if (source.size() == 0) throw std::invalid_argument("train: empty source");
  for (int y : source.labels)
    if (y < 0 || y >= model.num_known)
      throw std::invalid_argument("train: label outside the known range");
  if (cfg.closed_set && model.head.open_head())
    throw std::invalid_argument("train: closed-set mode needs a C-way head");

  nn::SgdMomentum opt(cfg.learning_rate, cfg.momentum);
  opt.attach(model.params());

  data::Dataset view = source.as_dataset();
  TrainResult result;
  int global_step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<data::Triplet> triplets =
        data::build_triplets(view, epoch, cfg.reshuffle_period, cfg.seed);
    int step_in_epoch = 0;
    for (std::size_t start = 0; start < triplets.size();
         start += cfg.batch_size, ++step_in_epoch) {
      const std::size_t stop = std::min(triplets.size(), start + cfg.batch_size);
      std::vector<data::Triplet> batch(triplets.begin() + start,
                                       triplets.begin() + stop);
      StepLosses losses =
          train_step(model, source, batch, cfg, epoch, step_in_epoch, opt);
      result.history.push_back({global_step, "ce", losses.ce});
      result.history.push_back({global_step, "disc", losses.disc});
      result.history.push_back({global_step, "sm", losses.sm});
      result.final_total = losses.ce * cfg.weights.ce +
                           losses.disc * cfg.weights.disc +
                           losses.sm * cfg.weights.sm;
      ++global_step;
    }
    if (out_dir) {
      save_model(model, cfg, *out_dir + "/checkpoint.ckpt");
      if (cfg.keep_epoch_checkpoints)
        save_model(model, cfg,
                   *out_dir + "/checkpoint_epoch" + std::to_string(epoch) + ".ckpt");
    }
  }
  result.steps = global_step;
  if (out_dir) write_loss_log(*out_dir + "/loss_log.tsv", result.history);
  return result;
}

// ------------------------------------------------------------- evaluate

double h_score(double acc_k, double acc_u) {
  const double denom = acc_k + acc_u;
  if (denom <= 0.0) return 0.0;
  return 2.0 * acc_k * acc_u / denom;
}

EvalReport evaluate(Model& model, const PreparedData& target) {
  if (target.size() == 0) throw std::invalid_argument("evaluate: empty target");
  const int c_known = model.num_known;
  for (int y : target.labels)
    if (y < 0 || y > c_known)
      throw std::invalid_argument("evaluate: label outside the C+1 range");

  backbone::Encoder& enc = *model.encoder;
  const int open_index = c_known;  // only reachable when the head is open

  struct Tally {
    int known_total = 0, known_correct = 0;
    int unk_total = 0, unk_correct = 0;
  };
  std::map<int, Tally> by_domain;
  Tally all;
  std::map<int, engine::ClassCount> per_class;

  const int chunk = 64;
  for (std::size_t start = 0; start < target.size(); start += chunk) {
    const std::size_t stop = std::min(target.size(), start + chunk);
    std::vector<int> idx(stop - start);
    for (std::size_t i = start; i < stop; ++i) idx[i - start] = static_cast<int>(i);
    FeatureMap x = gather_batch(target, idx);
    FeatureMap seam = enc.forward_early(x, nullptr, false);
    Matrix embed = enc.forward_late(seam, nullptr, false);
    Matrix logits = model.head.logits(embed);
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      Eigen::Index pred = 0;
      logits.row(r).maxCoeff(&pred);
      const std::size_t g = start + r;
      const int label = target.labels[g];
      Tally& dom = by_domain[target.domains[g]];
      engine::ClassCount& cc = per_class[label];
      cc.label = label;
      ++cc.total;
      if (label < c_known) {
        ++all.known_total;
        ++dom.known_total;
        if (pred == label) {
          ++all.known_correct;
          ++dom.known_correct;
          ++cc.correct;
        }
      } else {
        ++all.unk_total;
        ++dom.unk_total;
        if (pred == open_index && model.head.open_head()) {
          ++all.unk_correct;
          ++dom.unk_correct;
          ++cc.correct;
        }
      }
    }
  }

  auto pct = [](int num, int den) {
    return den > 0 ? 100.0 * num / den : 0.0;
  };

  EvalReport rep;
  rep.n_known = all.known_total;
  rep.n_unknown = all.unk_total;
  rep.acc_k = pct(all.known_correct, all.known_total);
  rep.acc_u = pct(all.unk_correct, all.unk_total);
  rep.acc = pct(all.known_correct + all.unk_correct,
                all.known_total + all.unk_total);
  rep.acc_macro = 0.5 * (rep.acc_k + rep.acc_u);
  rep.hs = h_score(rep.acc_k, rep.acc_u);
  for (const auto& [dom, t] : by_domain) {
    DomainRow row;
    row.domain = dom;
    row.n_known = t.known_total;
    row.n_unknown = t.unk_total;
    row.acc_k = pct(t.known_correct, t.known_total);
    row.acc_u = pct(t.unk_correct, t.unk_total);
    row.acc = pct(t.known_correct + t.unk_correct, t.known_total + t.unk_total);
    row.hs = h_score(row.acc_k, row.acc_u);
    rep.per_domain.push_back(row);
  }
  for (const auto& [label, cc] : per_class) rep.per_class.push_back(cc);
  return rep;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["acc_k"] = acc_k;
  j["acc_u"] = acc_u;
  j["acc"] = acc;
  j["acc_macro"] = acc_macro;
  j["hs"] = hs;
  j["n_known"] = n_known;
  j["n_unknown"] = n_unknown;
  j["per_domain"] = nlohmann::json::array();
  for (const DomainRow& r : per_domain) {
    j["per_domain"].push_back({{"domain", r.domain},
                               {"acc_k", r.acc_k},
                               {"acc_u", r.acc_u},
                               {"acc", r.acc},
                               {"hs", r.hs},
                               {"n_known", r.n_known},
                               {"n_unknown", r.n_unknown}});
  }
  j["per_class"] = nlohmann::json::array();
  for (const ClassCount& c : per_class)
    j["per_class"].push_back(
        {{"label", c.label}, {"total", c.total}, {"correct", c.correct}});
  return j;
}

// ------------------------------------------------------------- diversity

namespace {

// Paired variant of the diversity metric: sample i is compared to the vector
// generated from it, then averaged. Echoing the inputs gives exactly zero.
double paired_cosine_distance(const std::vector<Vector>& a,
                              const std::vector<Vector>& b, bool* degenerate) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].norm() == 0.0 || b[i].norm() == 0.0) {
      *degenerate = true;
      return 0.0;
    }
    total += featstats::mean_cosine_distance({a[i]}, {b[i]});
  }
  return a.empty() ? 0.0 : total / a.size();
}

}  // namespace

DiversityReport style_diversity_report(Model& model, const PreparedData& source,
                                       int n_samples, const TrainConfig& cfg,
                                       const StyleOverride& override_fn) {
  DiversityReport rep;
  data::Dataset view = source.as_dataset();
  std::vector<data::Triplet> triplets =
      data::build_triplets(view, 0, cfg.reshuffle_period, cfg.seed);
  if (static_cast<int>(triplets.size()) > n_samples) triplets.resize(n_samples);
  rep.n_pairs = static_cast<int>(triplets.size());

  std::vector<int> idx1, idx2, idx3;
  for (const data::Triplet& t : triplets) {
    idx1.push_back(t.i1);
    idx2.push_back(t.i2);
    idx3.push_back(t.i3);
  }
  backbone::Encoder& enc = *model.encoder;
  FeatureMap f1 = enc.forward_early(gather_batch(source, idx1), nullptr, false);
  FeatureMap f2 = enc.forward_early(gather_batch(source, idx2), nullptr, false);
  FeatureMap f3 = enc.forward_early(gather_batch(source, idx3), nullptr, false);
  StyleStats s1 = featstats::compute_instance_stats(f1);
  StyleStats s2 = featstats::compute_instance_stats(f2);
  StyleStats synth =
      override_fn ? override_fn(s1, s2)
                  : stylesynth::synthesize_style(model.ssnet, s1, s2, cfg.noise,
                                                 derive_seed(cfg.seed, 0x64697621ULL));

  std::vector<Vector> source_styles, synth_styles;
  for (int i = 0; i < s1.instances(); ++i) {
    source_styles.push_back(s1.concat_row(i));
    synth_styles.push_back(synth.concat_row(i));
  }
  rep.style_distance = paired_cosine_distance(source_styles, synth_styles,
                                              &rep.degenerate_styles);

  // closed embeddings vs the pseudo-open embeddings fused from them
  Matrix e1 = enc.forward_late(f1, nullptr, false);
  Matrix e3 = enc.forward_late(f3, nullptr, false);
  auto [fused, alpha] = openmix::aggregate_open(model.fanet, e1, e3, false);
  std::vector<Vector> closed_vecs, open_vecs;
  for (Eigen::Index i = 0; i < e1.rows(); ++i) {
    closed_vecs.push_back(e1.row(i).transpose());
    open_vecs.push_back(fused.row(i).transpose());
  }
  bool embed_degenerate = false;
  rep.embed_distance =
      paired_cosine_distance(closed_vecs, open_vecs, &embed_degenerate);
  rep.degenerate_styles = rep.degenerate_styles || embed_degenerate;
  return rep;
}

// ------------------------------------------------------------- grad check

GradComponent grad_component_from_string(const std::string& s) {
  if (s == "ssnet") return GradComponent::Ssnet;
  if (s == "fanet") return GradComponent::Fanet;
  if (s == "head") return GradComponent::Head;
  if (s == "losses") return GradComponent::Losses;
  throw std::invalid_argument("unknown gradient component: " + s);
}

namespace {

struct GroupCheck {
  std::string name;
  // Loss as a function of the current parameter values.
  std::function<double()> loss;
  // Fills analytic gradients (grad fields must be zeroed first).
  std::function<void()> backward;
  nn::ParamRefs params;
  int samples = 60;
};

GradCheckReport::Group run_group(GroupCheck& g, double h, std::uint64_t seed) {
  GradCheckReport::Group out;
  out.name = g.name;

  for (nn::Param* p : g.params) p->zero_grad();
  g.backward();

  // deterministic parameter sampling across the group's blocks
  std::vector<std::pair<nn::Param*, Eigen::Index>> coords;
  Rng rng(derive_seed(seed, 0x67636865ULL));
  Eigen::Index total = 0;
  for (nn::Param* p : g.params) total += p->value.size();
  const int want = std::min<Eigen::Index>(g.samples, total);
  for (int k = 0; k < want; ++k) {
    Eigen::Index flat = rng.uniform_int(0, static_cast<int>(total - 1));
    for (nn::Param* p : g.params) {
      if (flat < p->value.size()) {
        coords.emplace_back(p, flat);
        break;
      }
      flat -= p->value.size();
    }
  }

  for (auto& [p, j] : coords) {
    const double analytic = p->grad[j];
    const double saved = p->value[j];
    p->value[j] = saved + h;
    const double up = g.loss();
    p->value[j] = saved - h;
    const double down = g.loss();
    p->value[j] = saved;
    const double fd = (up - down) / (2.0 * h);

    const double denom = std::max(std::abs(analytic), std::abs(fd));
    if (denom < 1e-6) {
      ++out.skipped_small;
      ++out.checked;
      continue;
    }
    const double rel = std::abs(analytic - fd) / denom;
    out.max_rel_error = std::max(out.max_rel_error, rel);
    ++out.checked;
  }
  out.pass = out.max_rel_error < 1e-4;
  return out;
}

StyleStats random_stats(int n, int c, Rng& rng) {
  StyleStats s(n, c);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < c; ++k) {
      s.mean(i, k) = rng.normal();
      s.stddev(i, k) = std::abs(rng.normal()) + 0.1;
    }
  return s;
}

}  // namespace

GradCheckReport grad_check(GradComponent component, std::uint64_t seed,
                           double step_size) {
  if (!(step_size > 0.0))
    throw std::invalid_argument("grad_check: step size must be > 0");
  GradCheckReport report;
  report.step_size = step_size;
  Rng rng(derive_seed(seed, 0x67726164ULL));

  if (component == GradComponent::Ssnet) {
    const int c = 8, n = 4;
    StyleStats s1 = random_stats(n, c, rng);
    StyleStats s2 = random_stats(n, c, rng);
    stylesynth::StyleSynthNet net(c);
    net.init(rng);
    stylesynth::NoiseSpec noise;  // standard normal
    const std::uint64_t noise_seed = derive_seed(seed, 0x6e6f6973ULL);

    // Bands chosen so every distance falls in one hinge regime; the regime
    // boundaries themselves are non-differentiable and excluded by design.
    struct BandCase {
      const char* name;
      stylesynth::StyleBand mean, std;
    } cases[] = {
        {"ssnet.below_band", {50.0, 60.0}, {50.0, 60.0}},
        {"ssnet.above_band", {1e-4, 1e-3}, {1e-4, 1e-3}},
        {"ssnet.inside_band", {1e-6, 1e6}, {1e-6, 1e6}},
    };
    for (auto& bc : cases) {
      GroupCheck g;
      g.name = bc.name;
      g.params = net.params();
      g.loss = [&]() {
        StyleStats synth =
            stylesynth::synthesize_style(net, s1, s2, noise, noise_seed);
        return stylesynth::style_margin_loss(synth, s1, s2, bc.mean, bc.std);
      };
      g.backward = [&]() {
        stylesynth::StyleSynthNet::Cache cache;
        StyleStats synth = net.forward(s1, s2, noise, noise_seed, cache);
        StyleStats d_synth(n, c), d_s1(n, c), d_s2(n, c);
        stylesynth::style_margin_loss_backward(synth, s1, s2, bc.mean, bc.std,
                                               1.0, d_synth, d_s1, d_s2);
        net.backward(cache, d_synth, d_s1, d_s2);
      };
      report.groups.push_back(run_group(g, step_size, seed));
    }
  } else if (component == GradComponent::Fanet) {
    const int d = 16, n = 5, c_known = 3;
    Matrix e1(n, d), e3(n, d);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) {
        e1(i, k) = rng.normal();
        e3(i, k) = rng.normal();
      }
    openmix::FeatAggNet net(d);
    net.init(rng);
    backbone::ClassifierHead head(d, c_known, true);
    head.init(rng);
    std::vector<int> open_labels(n, c_known);

    GroupCheck g;
    g.name = "fanet";
    g.params = net.params();
    g.loss = [&]() {
      // frozen batch-norm statistics for the check
      auto [fused, alpha] = openmix::aggregate_open(net, e1, e3, false);
      Matrix logits = head.logits(fused);
      Matrix scratch = Matrix::Zero(logits.rows(), logits.cols());
      return losses::ce_softmax_backward(logits, open_labels, 0.0, scratch);
    };
    g.backward = [&]() {
      openmix::FeatAggNet::Cache cache;
      Matrix fused = net.forward(e1, e3, false, cache);
      nn::Linear::Cache hc;
      Matrix logits = head.logits(fused, hc);
      Matrix d_logits = Matrix::Zero(logits.rows(), logits.cols());
      losses::ce_softmax_backward(logits, open_labels, 1.0, d_logits);
      Matrix d_fused = head.backward(hc, d_logits);
      Matrix d_e1 = Matrix::Zero(n, d), d_e3 = Matrix::Zero(n, d);
      head.fc.weight.zero_grad();
      head.fc.bias.zero_grad();
      net.backward(cache, d_fused, d_e1, d_e3);
    };
    report.groups.push_back(run_group(g, step_size, seed));
  } else if (component == GradComponent::Head) {
    const int d = 16, n = 6, c_known = 5;
    Matrix embed(n, d);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) embed(i, k) = rng.normal();
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = rng.uniform_int(0, c_known);
    backbone::ClassifierHead head(d, c_known, true);
    head.init(rng);

    GroupCheck g;
    g.name = "head";
    g.params = head.params();
    g.loss = [&]() {
      Matrix logits = head.logits(embed);
      Matrix scratch = Matrix::Zero(logits.rows(), logits.cols());
      return losses::ce_softmax_backward(logits, labels, 0.0, scratch);
    };
    g.backward = [&]() {
      nn::Linear::Cache hc;
      Matrix logits = head.logits(embed, hc);
      Matrix d_logits = Matrix::Zero(logits.rows(), logits.cols());
      losses::ce_softmax_backward(logits, labels, 1.0, d_logits);
      head.backward(hc, d_logits);
    };
    report.groups.push_back(run_group(g, step_size, seed));
  } else {
    // L_disc with respect to the logits themselves. Rows whose margin term
    // sits near the |p_open - p_top| tie (or near an arg-max switch) are
    // resampled: the subgradient convention there is a documented carve-out.
    const int cols = 5, n_open = 6, n_closed = 6;
    nn::Param open_logits("losses.open_logits", n_open * cols);
    nn::Param closed_logits("losses.closed_logits", n_closed * cols);
    auto as_matrix = [cols](nn::Param& p, int rows) {
      return Eigen::Map<Matrix>(p.value.data(), rows, cols);
    };
    for (Eigen::Index k = 0; k < open_logits.value.size(); ++k)
      open_logits.value[k] = rng.normal();
    for (int attempt = 0; attempt < 1000; ++attempt) {
      for (Eigen::Index k = 0; k < closed_logits.value.size(); ++k)
        closed_logits.value[k] = rng.normal();
      Matrix p = losses::row_softmax(as_matrix(closed_logits, n_closed));
      bool ok = true;
      for (int i = 0; i < n_closed; ++i) {
        Eigen::RowVectorXd row = p.row(i);
        Eigen::Index top = 0;
        row.head(cols - 1).maxCoeff(&top);
        double second = -1.0;
        for (Eigen::Index j = 0; j + 1 < cols; ++j)
          if (j != top) second = std::max(second, row[j]);
        if (std::abs(row[cols - 1] - row[top]) < 0.05 ||
            std::abs(row[top] - second) < 0.05)
          ok = false;
      }
      if (ok) break;
    }

    GroupCheck g;
    g.name = "losses.disc";
    g.params = {&open_logits, &closed_logits};
    g.loss = [&]() {
      return losses::loss_disc(
          losses::row_softmax(as_matrix(open_logits, n_open)),
          losses::row_softmax(as_matrix(closed_logits, n_closed)));
    };
    g.backward = [&]() {
      Matrix d_open = Matrix::Zero(n_open, cols);
      Matrix d_closed = Matrix::Zero(n_closed, cols);
      losses::entropy_mean_backward(as_matrix(open_logits, n_open), 1.0, d_open);
      losses::closed_margin_mean_backward(as_matrix(closed_logits, n_closed),
                                          -1.0, d_closed);
      Eigen::Map<Matrix>(open_logits.grad.data(), n_open, cols) = d_open;
      Eigen::Map<Matrix>(closed_logits.grad.data(), n_closed, cols) = d_closed;
    };
    report.groups.push_back(run_group(g, step_size, seed));
  }

  report.pass = true;
  for (const auto& grp : report.groups) report.pass = report.pass && grp.pass;
  return report;
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json j;
  j["step_size"] = step_size;
  j["pass"] = pass;
  j["groups"] = nlohmann::json::array();
  for (const Group& g : groups)
    j["groups"].push_back({{"name", g.name},
                           {"max_rel_error", g.max_rel_error},
                           {"checked", g.checked},
                           {"skipped_small", g.skipped_small},
                           {"pass", g.pass}});
  return j;
}

// ------------------------------------------------------------- io

void write_loss_log(const std::string& path,
                    const std::vector<LossRecord>& history) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp);
    f << "step\tcomponent\tvalue\n";
    for (const LossRecord& r : history)
      f << r.step << "\t" << r.component << "\t" << r.value << "\n";
  }
  std::filesystem::rename(tmp, path);
}

void save_model(const Model& model, const TrainConfig& cfg,
                const std::string& path) {
  nlohmann::json manifest;
  manifest["format"] = 1;
  manifest["split_depth"] = backbone::to_string(model.depth);
  manifest["num_known"] = model.num_known;
  manifest["open_head"] = model.head.open_head();
  manifest["embed_dim"] = model.encoder->embed_dim();
  manifest["seam_channels"] = model.encoder->seam_channels();
  manifest["init_seed"] = model.init_seed;
  manifest["train"] = {
      {"band_mean", {cfg.band_mean.lo, cfg.band_mean.hi}},
      {"band_std", {cfg.band_std.lo, cfg.band_std.hi}},
      {"noise", {cfg.noise.mean, cfg.noise.stddev}},
      {"epsilon", cfg.epsilon},
      {"weights", {cfg.weights.ce, cfg.weights.disc, cfg.weights.sm}},
      {"style_mode", to_string(cfg.style_mode)},
      {"open_mode", to_string(cfg.open_mode)},
      {"seed", cfg.seed},
  };

  Model& m = const_cast<Model&>(model);
  std::vector<const nn::Param*> tensors;
  for (nn::Param* p : m.params()) tensors.push_back(p);
  for (nn::Param* p : m.buffers()) tensors.push_back(p);
  checkpoint::save(path, manifest, tensors);
}

Model load_model(const std::string& path) {
  checkpoint::Loaded ckpt = checkpoint::load(path);
  const nlohmann::json& m = ckpt.manifest;
  if (!m.contains("format") || m["format"].get<int>() != 1)
    throw std::runtime_error("load_model: unsupported checkpoint format");
  Model model = make_model(
      backbone::split_depth_from_string(m["split_depth"].get<std::string>()),
      m["num_known"].get<int>(), m["open_head"].get<bool>(),
      m["init_seed"].get<std::uint64_t>());
  nn::ParamRefs all = model.params();
  for (nn::Param* p : model.buffers()) all.push_back(p);
  checkpoint::apply(ckpt, all);
  return model;
}

}  // namespace opendg::engine
