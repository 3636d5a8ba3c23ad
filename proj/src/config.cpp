#include "opendg/config.hpp"

#include "opendg/log.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace opendg::config {

using nlohmann::json;

namespace {

// Tracks which keys of one JSON object were consumed; anything left over is
// a config error. Silent unknown keys are how ablation typos slip through.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object())
      throw std::invalid_argument("config: " + path_ + " must be an object");
  }

  bool has(const std::string& key) {
    if (j_.contains(key)) {
      seen_.insert(key);
      return true;
    }
    return false;
  }

  template <typename T>
  void get_to(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      j_.at(key).get_to(out);
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: bad value at " + path_ + "/" + key +
                                  ": " + e.what());
    }
  }

  const json* child(const std::string& key) {
    if (!has(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw std::invalid_argument("config: unknown key " + path_ + "/" +
                                    it.key());
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void get_pair(StrictObject& o, const std::string& key, double& a, double& b) {
  std::vector<double> v;
  o.get_to(key, v);
  if (v.empty()) return;
  if (v.size() != 2)
    throw std::invalid_argument("config: " + key + " expects two numbers");
  a = v[0];
  b = v[1];
}

void parse_train(const json& j, engine::TrainConfig& t) {
  StrictObject o(j, "/train");
  o.get_to("learning_rate", t.learning_rate);
  o.get_to("momentum", t.momentum);
  o.get_to("epochs", t.epochs);
  o.get_to("batch_size", t.batch_size);
  if (o.has("loss_weights")) {
    std::vector<double> w;
    j.at("loss_weights").get_to(w);
    if (w.size() != 3)
      throw std::invalid_argument("config: loss_weights expects three numbers");
    t.weights = {w[0], w[1], w[2]};
  }
  get_pair(o, "bands_mu", t.band_mean.lo, t.band_mean.hi);
  get_pair(o, "bands_sigma", t.band_std.lo, t.band_std.hi);
  get_pair(o, "noise", t.noise.mean, t.noise.stddev);
  o.get_to("reshuffle_period", t.reshuffle_period);
  o.get_to("seed", t.seed);
  o.get_to("epsilon", t.epsilon);
  o.get_to("style_route_prob", t.style_route_prob);
  o.get_to("use_styled_branch", t.use_styled_branch);
  o.get_to("use_open_branch", t.use_open_branch);
  o.get_to("closed_set", t.closed_set);
  o.get_to("mixstyle_beta", t.mixstyle_beta);
  o.get_to("patch_size", t.patch_size);
  o.get_to("keep_epoch_checkpoints", t.keep_epoch_checkpoints);
  if (o.has("style_mode"))
    t.style_mode = engine::style_mode_from_string(j.at("style_mode").get<std::string>());
  if (o.has("open_mode"))
    t.open_mode = engine::open_mode_from_string(j.at("open_mode").get<std::string>());
  o.finish();
}

void parse_preprocess(const json& j, data::PreprocessConfig& p) {
  StrictObject o(j, "/preprocess");
  o.get_to("target_size", p.target_size);
  std::vector<double> mean, sd;
  o.get_to("mean_rgb", mean);
  o.get_to("std_rgb", sd);
  if (!mean.empty()) {
    if (mean.size() != 3) throw std::invalid_argument("config: mean_rgb expects 3 values");
    std::copy(mean.begin(), mean.end(), p.mean_rgb.begin());
  }
  if (!sd.empty()) {
    if (sd.size() != 3) throw std::invalid_argument("config: std_rgb expects 3 values");
    std::copy(sd.begin(), sd.end(), p.std_rgb.begin());
  }
  o.finish();
}

void parse_synth(const json& j, SyntheticTrack& s) {
  StrictObject o(j, "/synthetic");
  o.get_to("image_size", s.image_size);
  o.get_to("num_classes", s.num_classes);
  o.get_to("n_domains", s.n_domains);
  o.get_to("n_per_class", s.n_per_class);
  o.get_to("eval_per_class", s.eval_per_class);
  o.get_to("seed", s.seed);
  o.get_to("source_domain", s.source_domain);
  o.get_to("target_domains", s.target_domains);
  o.get_to("contrast_jitter", s.contrast_jitter);
  o.get_to("pixel_noise", s.pixel_noise);
  o.finish();
}

DigitsFiles parse_digits_files(const json& j, const std::string& path) {
  DigitsFiles f;
  StrictObject o(j, path);
  o.get_to("name", f.name);
  o.get_to("images", f.images);
  o.get_to("labels", f.labels);
  if (o.has("crc_images")) f.crc_images = j.at("crc_images").get<std::uint32_t>();
  if (o.has("crc_labels")) f.crc_labels = j.at("crc_labels").get<std::uint32_t>();
  o.finish();
  return f;
}

void parse_digits(const json& j, DigitsTrack& d) {
  StrictObject o(j, "/digits");
  o.get_to("root", d.root);
  if (const json* src = o.child("source"))
    d.source = parse_digits_files(*src, "/digits/source");
  if (const json* tgt = o.child("targets")) {
    if (!tgt->is_array())
      throw std::invalid_argument("config: /digits/targets must be an array");
    d.targets.clear();
    for (const json& e : *tgt)
      d.targets.push_back(parse_digits_files(e, "/digits/targets[]"));
  }
  o.get_to("max_source", d.max_source);
  o.get_to("known_digits", d.known_digits);
  o.finish();
}

void parse_manifest(const json& j, ManifestTrack& m) {
  StrictObject o(j, "/manifest");
  o.get_to("train_manifest", m.train_manifest);
  o.get_to("eval_manifests", m.eval_manifests);
  o.get_to("known_labels", m.known_labels);
  o.finish();
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  StrictObject o(j, "");
  o.get_to("track", cfg.track);
  o.get_to("out_dir", cfg.out_dir);
  o.get_to("split_depth", cfg.split_depth);
  o.get_to("num_known", cfg.num_known);
  if (o.has("known_labels")) {
    std::vector<int> kl;
    j.at("known_labels").get_to(kl);
    cfg.known_labels = kl;
  }
  if (const json* t = o.child("train")) parse_train(*t, cfg.train);
  if (const json* p = o.child("preprocess")) {
    parse_preprocess(*p, cfg.preprocess);
    cfg.preprocess_explicit = true;
  }
  if (const json* s = o.child("synthetic")) parse_synth(*s, cfg.synth);
  if (const json* d = o.child("digits")) parse_digits(*d, cfg.digits);
  if (const json* m = o.child("manifest")) parse_manifest(*m, cfg.manifest);
  o.finish();

  if (cfg.track != "synthetic" && cfg.track != "digits" &&
      cfg.track != "custom-manifest")
    throw std::invalid_argument("config: unknown track " + cfg.track);
  backbone::split_depth_from_string(cfg.split_depth);  // validates

  if (!cfg.preprocess_explicit) {
    if (cfg.track == "synthetic") {
      cfg.preprocess.target_size = cfg.synth.image_size;
      cfg.preprocess.mean_rgb = {0.5, 0.5, 0.5};
      cfg.preprocess.std_rgb = {0.5, 0.5, 0.5};
    } else if (cfg.track == "digits") {
      cfg.preprocess.target_size = 28;
      cfg.preprocess.mean_rgb = {0.5, 0.5, 0.5};
      cfg.preprocess.std_rgb = {0.5, 0.5, 0.5};
    }
    // custom-manifest keeps the 128 / imagenet-constant defaults
  }
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  json j;
  try {
    // exceptions carry byte offsets; recover the line for the message
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    std::ifstream again(path);
    std::string text((std::istreambuf_iterator<char>(again)),
                     std::istreambuf_iterator<char>());
    std::size_t line = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i)
      if (text[i] == '\n') ++line;
    throw std::invalid_argument("config: parse error in " + path + " at line " +
                                std::to_string(line) + ": " + e.what());
  }
  return config_from_json(j);
}

json ExperimentConfig::to_json() const {
  json j;
  j["track"] = track;
  j["out_dir"] = out_dir;
  j["split_depth"] = split_depth;
  j["num_known"] = num_known;
  if (known_labels) j["known_labels"] = *known_labels;
  j["preprocess"] = {{"target_size", preprocess.target_size},
                     {"mean_rgb", preprocess.mean_rgb},
                     {"std_rgb", preprocess.std_rgb}};
  j["train"] = {
      {"learning_rate", train.learning_rate},
      {"momentum", train.momentum},
      {"epochs", train.epochs},
      {"batch_size", train.batch_size},
      {"loss_weights", {train.weights.ce, train.weights.disc, train.weights.sm}},
      {"bands_mu", {train.band_mean.lo, train.band_mean.hi}},
      {"bands_sigma", {train.band_std.lo, train.band_std.hi}},
      {"noise", {train.noise.mean, train.noise.stddev}},
      {"reshuffle_period", train.reshuffle_period},
      {"seed", train.seed},
      {"epsilon", train.epsilon},
      {"style_route_prob", train.style_route_prob},
      {"use_styled_branch", train.use_styled_branch},
      {"use_open_branch", train.use_open_branch},
      {"closed_set", train.closed_set},
      {"style_mode", engine::to_string(train.style_mode)},
      {"open_mode", engine::to_string(train.open_mode)},
      {"mixstyle_beta", train.mixstyle_beta},
      {"patch_size", train.patch_size},
      {"keep_epoch_checkpoints", train.keep_epoch_checkpoints},
  };
  if (track == "synthetic") {
    j["synthetic"] = {{"image_size", synth.image_size},
                      {"num_classes", synth.num_classes},
                      {"n_domains", synth.n_domains},
                      {"n_per_class", synth.n_per_class},
                      {"eval_per_class", synth.eval_per_class},
                      {"seed", synth.seed},
                      {"source_domain", synth.source_domain},
                      {"target_domains", synth.target_domains},
                      {"contrast_jitter", synth.contrast_jitter},
                      {"pixel_noise", synth.pixel_noise}};
  } else if (track == "digits") {
    json targets = json::array();
    for (const DigitsFiles& t : digits.targets) {
      json e = {{"name", t.name}, {"images", t.images}, {"labels", t.labels}};
      if (t.crc_images) e["crc_images"] = *t.crc_images;
      if (t.crc_labels) e["crc_labels"] = *t.crc_labels;
      targets.push_back(e);
    }
    j["digits"] = {{"root", digits.root},
                   {"source",
                    {{"name", digits.source.name},
                     {"images", digits.source.images},
                     {"labels", digits.source.labels}}},
                   {"targets", targets},
                   {"max_source", digits.max_source},
                   {"known_digits", digits.known_digits}};
  } else {
    j["manifest"] = {{"train_manifest", manifest.train_manifest},
                     {"eval_manifests", manifest.eval_manifests},
                     {"known_labels", manifest.known_labels}};
  }
  return j;
}

// ------------------------------------------------------------- assembly

namespace {

std::vector<int> default_known(const ExperimentConfig& cfg) {
  if (cfg.known_labels) return *cfg.known_labels;
  std::vector<int> known(cfg.num_known);
  for (int i = 0; i < cfg.num_known; ++i) known[i] = i;
  return known;
}

std::string digits_path(const DigitsTrack& d, const std::string& rel) {
  std::string root = d.root;
  if (root.empty()) {
    if (const char* env = std::getenv("ODG_DATA_ROOT")) root = env;
  }
  if (root.empty()) return rel;
  return (std::filesystem::path(root) / rel).string();
}

engine::PreparedData prepare_merged(const data::OpenSplit& split,
                                    const data::PreprocessConfig& pre) {
  data::Dataset merged;
  merged.num_classes = split.num_known + 1;
  merged.samples = split.closed.samples;
  merged.samples.insert(merged.samples.end(), split.open.samples.begin(),
                        split.open.samples.end());
  return engine::prepare(merged, pre);
}

}  // namespace

data::Dataset build_synthetic_raw(const ExperimentConfig& cfg) {
  data::SyntheticDomainSpec spec;
  spec.image_size = cfg.synth.image_size;
  spec.num_classes = cfg.synth.num_classes;
  spec.seed = cfg.synth.seed;
  spec.contrast_jitter = cfg.synth.contrast_jitter;
  spec.pixel_noise = cfg.synth.pixel_noise;
  return data::generate_synthetic_domains(spec, cfg.synth.n_domains,
                                          cfg.synth.n_per_class);
}

TrackData build_track_data(const ExperimentConfig& cfg) {
  TrackData out;
  const std::vector<int> known = default_known(cfg);
  out.num_known = static_cast<int>(known.size());

  if (cfg.track == "synthetic") {
    data::SyntheticDomainSpec spec;
    spec.image_size = cfg.synth.image_size;
    spec.num_classes = cfg.synth.num_classes;
    spec.seed = cfg.synth.seed;
    spec.contrast_jitter = cfg.synth.contrast_jitter;
    spec.pixel_noise = cfg.synth.pixel_noise;

    data::Dataset train_raw = data::domain_subset(
        data::generate_synthetic_domains(spec, cfg.synth.n_domains,
                                         cfg.synth.n_per_class),
        cfg.synth.source_domain);
    // independent draw for the evaluation pool so target samples never
    // coincide with training samples even on the source domain
    data::SyntheticDomainSpec eval_spec = spec;
    eval_spec.seed = derive_seed(spec.seed, 0x6576616cULL);
    data::Dataset eval_all = data::generate_synthetic_domains(
        eval_spec, cfg.synth.n_domains, cfg.synth.eval_per_class);

    std::vector<int> targets = cfg.synth.target_domains;
    if (targets.empty()) {
      for (int d = 0; d < cfg.synth.n_domains; ++d)
        if (d != cfg.synth.source_domain) targets.push_back(d);
    }
    data::Dataset eval_raw;
    eval_raw.num_classes = eval_all.num_classes;
    for (int d : targets) {
      data::Dataset sub = data::domain_subset(eval_all, d);
      eval_raw.samples.insert(eval_raw.samples.end(), sub.samples.begin(),
                              sub.samples.end());
    }

    data::OpenSplit train_split = data::split_open(train_raw, known);
    out.train = engine::prepare(train_split.closed, cfg.preprocess);
    out.eval = prepare_merged(data::split_open(eval_raw, known), cfg.preprocess);
  } else if (cfg.track == "digits") {
    const DigitsTrack& d = cfg.digits;
    data::Dataset source = data::load_idx_digits(
        digits_path(d, d.source.images), digits_path(d, d.source.labels), 0,
        d.source.crc_images, d.source.crc_labels);
    if (d.max_source > 0 &&
        static_cast<int>(source.samples.size()) > d.max_source)
      source.samples.resize(d.max_source);

    std::vector<int> kd = d.known_digits;
    out.num_known = static_cast<int>(kd.size());
    // the training stream keeps only known digits
    data::Dataset train_known;
    train_known.num_classes = source.num_classes;
    for (const data::Sample& s : source.samples)
      if (std::find(kd.begin(), kd.end(), s.label) != kd.end())
        train_known.samples.push_back(s);
    data::OpenSplit train_split = data::split_open(train_known, kd);
    out.train = engine::prepare(train_split.closed, cfg.preprocess);

    data::Dataset eval_raw;
    int dom = 1;
    for (const DigitsFiles& t : d.targets) {
      data::Dataset tgt = data::load_idx_digits(digits_path(d, t.images),
                                                digits_path(d, t.labels), dom++,
                                                t.crc_images, t.crc_labels);
      eval_raw.num_classes = tgt.num_classes;
      eval_raw.samples.insert(eval_raw.samples.end(), tgt.samples.begin(),
                              tgt.samples.end());
    }
    if (eval_raw.samples.empty())
      throw std::invalid_argument("digits track: no target datasets configured");
    out.eval = prepare_merged(data::split_open(eval_raw, kd), cfg.preprocess);
  } else {
    const ManifestTrack& m = cfg.manifest;
    if (m.train_manifest.empty())
      throw std::invalid_argument("custom-manifest track: train_manifest missing");
    data::Dataset train_raw = data::load_manifest(m.train_manifest);
    std::vector<int> kl = m.known_labels.empty() ? known : m.known_labels;
    out.num_known = static_cast<int>(kl.size());
    data::Dataset train_known;
    train_known.num_classes = train_raw.num_classes;
    for (const data::Sample& s : train_raw.samples)
      if (std::find(kl.begin(), kl.end(), s.label) != kl.end())
        train_known.samples.push_back(s);
    out.train = engine::prepare(data::split_open(train_known, kl).closed,
                                cfg.preprocess);

    data::Dataset eval_raw;
    for (const std::string& path : m.eval_manifests) {
      data::Dataset e = data::load_manifest(path);
      eval_raw.num_classes = std::max(eval_raw.num_classes, e.num_classes);
      eval_raw.samples.insert(eval_raw.samples.end(), e.samples.begin(),
                              e.samples.end());
    }
    if (eval_raw.samples.empty())
      throw std::invalid_argument("custom-manifest track: no eval manifests");
    out.eval = prepare_merged(data::split_open(eval_raw, kl), cfg.preprocess);
  }

  // leakage guard: training ids must never appear in the evaluation pool
  std::set<std::string> train_ids(out.train.ids.begin(), out.train.ids.end());
  for (const std::string& id : out.eval.ids)
    if (train_ids.count(id))
      throw std::runtime_error("track assembly: sample " + id +
                               " appears in both train and eval");
  return out;
}

void write_effective_config(const ExperimentConfig& cfg, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::string path = dir + "/effective_config.json";
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    f << cfg.to_json().dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace opendg::config
