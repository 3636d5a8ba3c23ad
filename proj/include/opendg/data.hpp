#pragma once

#include "opendg/image.hpp"
#include "opendg/rng.hpp"
#include "opendg/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace opendg::data {

struct Sample {
  Image image;       // values in [0, 1]
  int label = 0;
  int domain = 0;
  std::string id;    // file path or synthetic identifier; unique per sample
};

struct Dataset {
  std::vector<Sample> samples;
  int num_classes = 0;

  bool empty() const { return samples.empty(); }
  std::size_t size() const { return samples.size(); }
};

// (x1, x2 same class, x3 different class) as indices into a dataset.
struct Triplet {
  int i1 = 0, i2 = 0, i3 = 0;
  int y1 = 0;
};

// One triplet per sample (as x1) per epoch. The pairing and the order are a
// pure function of (seed, epoch / reshuffle_period), so consecutive epochs
// within one period see the identical sequence. A class with a single sample
// pairs with itself and logs a warning.
std::vector<Triplet> build_triplets(const Dataset& ds, int epoch,
                                    int reshuffle_period, std::uint64_t seed);

struct PreprocessConfig {
  int target_size = 128;
  std::array<double, 3> mean_rgb = {0.485, 0.456, 0.406};
  std::array<double, 3> std_rgb = {0.229, 0.224, 0.225};
};

// Bilinear resize; exact no-op when the size already matches.
Image resize_bilinear(const Image& in, int out_h, int out_w);

// Resize to target_size x target_size, replicate grayscale to three
// channels, normalize each channel with the given constants.
Image preprocess(const Image& raw, const PreprocessConfig& cfg);

// Known/unknown class split over target-only label spaces.
struct DomainSplit {
  std::vector<int> known_labels;    // original label values, sorted
  std::vector<int> unknown_labels;  // complement within the dataset
};

struct OpenSplit {
  Dataset closed;  // labels remapped to 0..C-1 in sorted known order
  Dataset open;    // all samples relabeled to C
  int num_known = 0;
};

// Partition: every sample lands in exactly one side. Rejects an empty known
// set or known labels missing from the dataset's label range.
OpenSplit split_open(const Dataset& ds, const std::vector<int>& known_labels);

// ---- synthetic multi-domain track ----

struct SyntheticDomainSpec {
  int image_size = 32;
  int num_classes = 10;
  std::uint64_t seed = 0;
  double contrast_jitter = 0.25;  // per-image contrast scale in [1-j, 1+j]
  double pixel_noise = 0.02;      // additive per-pixel noise std
};

// Deterministic parametric-shape dataset: the class decides the glyph, the
// domain decides palette, background texture, contrast range and blur.
Dataset generate_synthetic_domains(const SyntheticDomainSpec& spec,
                                   int n_domains, int n_per_class);

// Subset of one domain.
Dataset domain_subset(const Dataset& ds, int domain);

// ---- file formats ----

// Binary PPM (P6) round-trip used for the on-disk synthetic datasets.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

// Writes images plus a plain-text manifest (one "path label domain" record
// per line, paths relative to the manifest).
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset load_manifest(const std::string& manifest_path);

// IDX ingestion for the raw handwritten-digit archives. When expected CRCs
// are given, the file checksums are verified before parsing.
std::uint32_t crc32(const unsigned char* bytes, std::size_t len);
Dataset load_idx_digits(const std::string& images_path,
                        const std::string& labels_path, int domain,
                        std::optional<std::uint32_t> images_crc = std::nullopt,
                        std::optional<std::uint32_t> labels_crc = std::nullopt);

// ---- batch assembly ----

// Stacks preprocessed images into a network input batch.
FeatureMap to_batch(const std::vector<const Image*>& images);

}  // namespace opendg::data
