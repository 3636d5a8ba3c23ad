#pragma once

#include "opendg/backbone.hpp"
#include "opendg/data.hpp"
#include "opendg/losses.hpp"

#include <json.hpp>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace opendg::engine {

enum class StyleMode { Synth, MixStyle };
enum class OpenMode { Learned, HalfCrop, PixelMean, PatchReplace };

StyleMode style_mode_from_string(const std::string& s);
OpenMode open_mode_from_string(const std::string& s);
std::string to_string(StyleMode m);
std::string to_string(OpenMode m);

struct TrainConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  int epochs = 1;
  int batch_size = 160;
  losses::LossWeights weights;
  stylesynth::StyleBand band_mean{1.5, 3.5};
  stylesynth::StyleBand band_std{0.1, 2.0};
  stylesynth::NoiseSpec noise;      // standard normal by default
  int reshuffle_period = 5;
  std::uint64_t seed = 0;
  double epsilon = 1e-5;            // restyle guard
  double style_route_prob = 0.5;    // open-branch style routing
  bool use_styled_branch = true;
  bool use_open_branch = true;
  bool closed_set = false;          // no open head, no open branch
  StyleMode style_mode = StyleMode::Synth;
  OpenMode open_mode = OpenMode::Learned;
  double mixstyle_beta = 0.1;
  int patch_size = 30;
  bool keep_epoch_checkpoints = false;

  void validate() const;
};

// ERM baseline: plain cross-entropy on the clean branch only.
TrainConfig erm_config(TrainConfig base);

// The trainable pieces as one unit.
struct Model {
  std::unique_ptr<backbone::Encoder> encoder;
  backbone::ClassifierHead head;
  stylesynth::StyleSynthNet ssnet;
  openmix::FeatAggNet fanet;
  backbone::SplitDepth depth = backbone::SplitDepth::Toy;
  int num_known = 0;
  std::uint64_t init_seed = 0;

  nn::ParamRefs params();   // trainables, stable order
  nn::ParamRefs buffers();  // batch-norm running statistics
};

Model make_model(backbone::SplitDepth depth, int num_known, bool open_head,
                 std::uint64_t seed);

// Images preprocessed once; training and evaluation index into this.
struct PreparedData {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<int> domains;
  std::vector<std::string> ids;
  int num_classes = 0;

  data::Dataset as_dataset() const;  // shallow label/domain view for triplets
  std::size_t size() const { return images.size(); }
};

PreparedData prepare(const data::Dataset& ds, const data::PreprocessConfig& cfg);

struct LossRecord {
  int step;
  std::string component;  // "ce" | "disc" | "sm"
  double value;
};

struct TrainResult {
  std::vector<LossRecord> history;
  int steps = 0;
  double final_total = 0.0;
};

// End-to-end training. Per step: forward the clean, styled and open branches,
// combine the weighted losses, update every trainable parameter with
// SGD + momentum. Deterministic given (config.seed, data). When out_dir is
// set, writes loss_log.tsv and checkpoint.ckpt (refreshed every epoch).
TrainResult train(Model& model, const PreparedData& source,
                  const TrainConfig& cfg,
                  const std::optional<std::string>& out_dir = std::nullopt);

// ---- evaluation ----

struct DomainRow {
  int domain = 0;
  double acc_k = 0.0, acc_u = 0.0, acc = 0.0, hs = 0.0;
  int n_known = 0, n_unknown = 0;
};

struct ClassCount {
  int label = 0;
  int total = 0, correct = 0;
};

struct EvalReport {
  double acc_k = 0.0;   // percent correct on known-label target samples
  double acc_u = 0.0;   // percent of unknown-label samples predicted open
  double acc = 0.0;     // sample-weighted (micro) over the union
  double acc_macro = 0.0;
  double hs = 0.0;      // harmonic mean of acc_k and acc_u
  std::vector<DomainRow> per_domain;
  std::vector<ClassCount> per_class;
  int n_known = 0, n_unknown = 0;

  nlohmann::json to_json() const;
};

double h_score(double acc_k, double acc_u);

// Arg-max over the C+1 posteriors, no thresholds. Labels in `target` follow
// the open-split convention: 0..C-1 known, C unknown.
EvalReport evaluate(Model& model, const PreparedData& target);

// ---- diagnostics ----

struct DiversityReport {
  double style_distance = 0.0;  // source styles vs their synthesized styles
  double embed_distance = 0.0;  // closed embeddings vs pseudo-open embeddings
  bool degenerate_styles = false;
  int n_pairs = 0;
};

// Mean cosine distance between each source style vector and the style
// synthesized from it (paired), and likewise between closed embeddings and
// the pseudo-open embeddings built from them. Zero-norm vectors flip the
// degenerate flag instead of crashing the metric.
using StyleOverride = std::function<featstats::StyleStats(
    const featstats::StyleStats&, const featstats::StyleStats&)>;

DiversityReport style_diversity_report(Model& model, const PreparedData& source,
                                       int n_samples, const TrainConfig& cfg,
                                       const StyleOverride& override_fn = {});

enum class GradComponent { Ssnet, Fanet, Head, Losses };
GradComponent grad_component_from_string(const std::string& s);

struct GradCheckReport {
  struct Group {
    std::string name;
    double max_rel_error = 0.0;
    int checked = 0;
    int skipped_small = 0;
    bool pass = false;
  };
  std::vector<Group> groups;
  double step_size = 1e-5;
  bool pass = false;

  nlohmann::json to_json() const;
};

// Central finite differences against the analytic gradients, double
// precision, batch norm frozen, >= 50 sampled parameters per group.
GradCheckReport grad_check(GradComponent component, std::uint64_t seed,
                           double step_size = 1e-5);

// Writes "step\tcomponent\tvalue" records.
void write_loss_log(const std::string& path, const std::vector<LossRecord>& history);

// Checkpoint round-trip for a whole model.
void save_model(const Model& model, const TrainConfig& cfg,
                const std::string& path);
Model load_model(const std::string& path);

}  // namespace opendg::engine
