#pragma once

#include "opendg/data.hpp"
#include "opendg/engine.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace opendg::config {

struct SyntheticTrack {
  int image_size = 32;
  int num_classes = 10;
  int n_domains = 3;
  int n_per_class = 20;
  int eval_per_class = 12;
  std::uint64_t seed = 7;
  int source_domain = 0;
  std::vector<int> target_domains;  // default: every other domain
  double contrast_jitter = 0.25;
  double pixel_noise = 0.02;
};

struct DigitsFiles {
  std::string name = "target";
  std::string images;
  std::string labels;
  std::optional<std::uint32_t> crc_images;
  std::optional<std::uint32_t> crc_labels;
};

struct DigitsTrack {
  std::string root;  // falls back to the ODG_DATA_ROOT environment variable
  DigitsFiles source;
  std::vector<DigitsFiles> targets;
  int max_source = 10000;
  std::vector<int> known_digits = {0, 1, 2, 3, 4};
};

struct ManifestTrack {
  std::string train_manifest;
  std::vector<std::string> eval_manifests;
  std::vector<int> known_labels;
};

struct ExperimentConfig {
  std::string track = "synthetic";  // synthetic | digits | custom-manifest
  std::string out_dir = "out";
  std::string split_depth = "toy";
  int num_known = 6;
  std::optional<std::vector<int>> known_labels;  // synthetic override
  data::PreprocessConfig preprocess;
  bool preprocess_explicit = false;  // whether the config set preprocess keys
  engine::TrainConfig train;
  SyntheticTrack synth;
  DigitsTrack digits;
  ManifestTrack manifest;

  nlohmann::json to_json() const;  // effective config, after defaults
};

// Strict loader: unknown keys are errors reported with their JSON path;
// parse errors carry the line number.
ExperimentConfig load_config_file(const std::string& path);
ExperimentConfig config_from_json(const nlohmann::json& j);

// Assembled experiment data: training stream (labels 0..C-1) and the target
// evaluation pool (labels 0..C, C meaning unknown).
struct TrackData {
  engine::PreparedData train;
  engine::PreparedData eval;
  int num_known = 0;
};

TrackData build_track_data(const ExperimentConfig& cfg);

// Raw (unpreprocessed) synthetic dataset per the config, for gen-data.
data::Dataset build_synthetic_raw(const ExperimentConfig& cfg);

void write_effective_config(const ExperimentConfig& cfg, const std::string& dir);

}  // namespace opendg::config
