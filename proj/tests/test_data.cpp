#include "opendg/data.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

using namespace opendg;
namespace fs = std::filesystem;

namespace {

data::Dataset tiny_dataset(int classes, int per_class) {
  data::Dataset ds;
  ds.num_classes = classes;
  for (int k = 0; k < classes; ++k)
    for (int i = 0; i < per_class; ++i) {
      data::Sample s;
      s.image = Image(3, 4, 4);
      s.label = k;
      s.domain = 0;
      s.id = "t" + std::to_string(k) + "_" + std::to_string(i);
      ds.samples.push_back(std::move(s));
    }
  return ds;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("two classes by two samples yield four valid triplets") {
  data::Dataset ds = tiny_dataset(2, 2);
  auto triplets = data::build_triplets(ds, 0, 5, 1);
  CHECK(triplets.size() == 4);
  std::set<int> seen_x1;
  for (const data::Triplet& t : triplets) {
    seen_x1.insert(t.i1);
    CHECK(ds.samples[t.i1].label == ds.samples[t.i2].label);
    CHECK(ds.samples[t.i1].label != ds.samples[t.i3].label);
    CHECK(t.i1 != t.i2);  // both classes have two samples
    CHECK(t.y1 == ds.samples[t.i1].label);
  }
  CHECK(seen_x1.size() == 4);  // every sample appears as x1
}

TEST_CASE("triplet order is fixed within a reshuffle period") {
  data::Dataset ds = tiny_dataset(3, 4);
  auto base = data::build_triplets(ds, 0, 5, 9);
  for (int epoch = 1; epoch < 5; ++epoch) {
    auto t = data::build_triplets(ds, epoch, 5, 9);
    REQUIRE(t.size() == base.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(t[i].i1 == base[i].i1);
      CHECK(t[i].i2 == base[i].i2);
      CHECK(t[i].i3 == base[i].i3);
    }
  }
  auto shuffled = data::build_triplets(ds, 5, 5, 9);
  bool differs = false;
  for (std::size_t i = 0; i < shuffled.size(); ++i)
    differs = differs || shuffled[i].i1 != base[i].i1 ||
              shuffled[i].i2 != base[i].i2 || shuffled[i].i3 != base[i].i3;
  CHECK(differs);
}

TEST_CASE("triplet label constraints hold under fuzz") {
  data::Dataset ds = tiny_dataset(5, 7);
  for (int epoch = 0; epoch < 12; ++epoch) {
    auto triplets = data::build_triplets(ds, epoch, 3, 1234);
    for (const data::Triplet& t : triplets) {
      CHECK(ds.samples[t.i1].label == ds.samples[t.i2].label);
      CHECK(ds.samples[t.i1].label != ds.samples[t.i3].label);
    }
  }
}

TEST_CASE("a single-sample class pairs with itself") {
  data::Dataset ds = tiny_dataset(2, 2);
  data::Sample lonely;
  lonely.image = Image(3, 4, 4);
  lonely.label = 2;
  lonely.id = "lonely";
  ds.samples.push_back(lonely);
  ds.num_classes = 3;
  auto triplets = data::build_triplets(ds, 0, 5, 3);
  bool saw_self_pair = false;
  for (const data::Triplet& t : triplets)
    if (ds.samples[t.i1].label == 2) {
      CHECK(t.i1 == t.i2);
      saw_self_pair = true;
    }
  CHECK(saw_self_pair);
}

TEST_CASE("degenerate datasets are rejected") {
  data::Dataset single = tiny_dataset(1, 5);
  CHECK_THROWS_AS(data::build_triplets(single, 0, 5, 1), std::invalid_argument);
  data::Dataset empty;
  CHECK_THROWS_AS(data::build_triplets(empty, 0, 5, 1), std::invalid_argument);
}

TEST_CASE("preprocess normalizes the solid-gray image to near zero") {
  Image gray(3, 16, 16);
  const double values[3] = {0.485, 0.456, 0.406};
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) gray.at(c, y, x) = values[c];
  data::PreprocessConfig cfg;  // imagenet constants, size 128
  Image out = data::preprocess(gray, cfg);
  CHECK(out.c == 3);
  CHECK(out.h == 128);
  CHECK(out.w == 128);
  for (double v : out.v) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("resize is an exact no-op on already-sized input") {
  Rng rng(4);
  Image img(3, 28, 28);
  for (double& v : img.v) v = rng.uniform();
  Image out = data::resize_bilinear(img, 28, 28);
  CHECK(out.v == img.v);
}

TEST_CASE("grayscale input is replicated to three channels") {
  Image gray(1, 8, 8);
  for (double& v : gray.v) v = 0.25;
  data::PreprocessConfig cfg;
  cfg.target_size = 8;
  cfg.mean_rgb = {0.0, 0.0, 0.0};
  cfg.std_rgb = {1.0, 1.0, 1.0};
  Image out = data::preprocess(gray, cfg);
  CHECK(out.c == 3);
  for (double v : out.v) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("synthetic generation is bit-identical under the seed") {
  data::SyntheticDomainSpec spec;
  spec.image_size = 16;
  spec.num_classes = 4;
  spec.seed = 77;
  data::Dataset a = data::generate_synthetic_domains(spec, 2, 3);
  data::Dataset b = data::generate_synthetic_domains(spec, 2, 3);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i)
    CHECK(a.samples[i].image.v == b.samples[i].image.v);
}

TEST_CASE("per-domain mean pixel color differs across domains") {
  data::SyntheticDomainSpec spec;
  spec.image_size = 24;
  spec.num_classes = 5;
  spec.seed = 3;
  data::Dataset ds = data::generate_synthetic_domains(spec, 3, 8);
  std::vector<std::array<double, 3>> means(3, {0, 0, 0});
  std::vector<int> counts(3, 0);
  for (const data::Sample& s : ds.samples) {
    for (int c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (int y = 0; y < s.image.h; ++y)
        for (int x = 0; x < s.image.w; ++x) acc += s.image.at(c, y, x);
      means[s.domain][c] += acc / (s.image.h * s.image.w);
    }
    counts[s.domain]++;
  }
  for (int d = 0; d < 3; ++d)
    for (int c = 0; c < 3; ++c) means[d][c] /= counts[d];
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) {
      double dist = 0.0;
      for (int c = 0; c < 3; ++c)
        dist += std::abs(means[a][c] - means[b][c]);
      CHECK(dist > 0.05);
    }
}

TEST_CASE("synthetic labels are stratified per class and domain") {
  data::SyntheticDomainSpec spec;
  spec.image_size = 16;
  spec.num_classes = 6;
  spec.seed = 5;
  data::Dataset ds = data::generate_synthetic_domains(spec, 2, 4);
  CHECK(ds.samples.size() == 2u * 6u * 4u);
  std::map<std::pair<int, int>, int> counts;
  for (const data::Sample& s : ds.samples) counts[{s.domain, s.label}]++;
  for (const auto& [key, n] : counts) CHECK(n == 4);
}

TEST_CASE("open split partitions and remaps") {
  data::Dataset ds = tiny_dataset(10, 2);  // labels 0..9
  data::OpenSplit split = data::split_open(ds, {0, 1, 2, 3, 4});
  CHECK(split.num_known == 5);
  CHECK(split.closed.samples.size() + split.open.samples.size() ==
        ds.samples.size());
  std::set<int> closed_labels;
  for (const data::Sample& s : split.closed.samples) closed_labels.insert(s.label);
  CHECK(*closed_labels.rbegin() <= 4);
  for (const data::Sample& s : split.open.samples) CHECK(s.label == 5);

  // ids partition exactly
  std::set<std::string> ids;
  for (const data::Sample& s : split.closed.samples) ids.insert(s.id);
  for (const data::Sample& s : split.open.samples) {
    CHECK(!ids.count(s.id));
    ids.insert(s.id);
  }
  CHECK(ids.size() == ds.samples.size());
}

TEST_CASE("open split with the full label set leaves the open side empty") {
  data::Dataset ds = tiny_dataset(4, 3);
  data::OpenSplit split = data::split_open(ds, {0, 1, 2, 3});
  CHECK(split.open.samples.empty());
  CHECK(split.closed.samples.size() == ds.samples.size());
}

TEST_CASE("open split rejects an empty or alien known set") {
  data::Dataset ds = tiny_dataset(4, 3);
  CHECK_THROWS_AS(data::split_open(ds, {}), std::invalid_argument);
  CHECK_THROWS_AS(data::split_open(ds, {0, 9}), std::invalid_argument);
}

TEST_CASE("ppm round trip preserves pixels") {
  Rng rng(8);
  Image img(3, 9, 7);
  for (double& v : img.v) v = rng.uniform();
  const std::string path = (fs::temp_directory_path() / "odg_test.ppm").string();
  data::write_ppm(path, img);
  Image back = data::read_ppm(path);
  CHECK(back.h == 9);
  CHECK(back.w == 7);
  for (std::size_t k = 0; k < img.v.size(); ++k)
    CHECK(std::abs(back.v[k] - img.v[k]) <= 0.5 / 255.0 + 1e-9);
  fs::remove(path);
}

TEST_CASE("dataset manifest round trip") {
  data::SyntheticDomainSpec spec;
  spec.image_size = 12;
  spec.num_classes = 3;
  spec.seed = 9;
  data::Dataset ds = data::generate_synthetic_domains(spec, 2, 2);
  const std::string dir = (fs::temp_directory_path() / "odg_manifest_test").string();
  fs::remove_all(dir);
  data::write_dataset(ds, dir);
  data::Dataset back = data::load_manifest(dir + "/manifest.txt");
  CHECK(back.samples.size() == ds.samples.size());
  CHECK(back.num_classes == 3);
  for (std::size_t i = 0; i < back.samples.size(); ++i) {
    CHECK(back.samples[i].label == ds.samples[i].label);
    CHECK(back.samples[i].domain == ds.samples[i].domain);
  }
  fs::remove_all(dir);
}

TEST_CASE("idx ingestion parses images, labels and checksums") {
  // hand-built IDX pair: 2 images of 2x2, labels {3, 7}
  auto be = [](std::uint32_t v) {
    return std::array<unsigned char, 4>{
        static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  };
  std::vector<unsigned char> images;
  for (auto b : be(2051)) images.push_back(b);
  for (auto b : be(2)) images.push_back(b);
  for (auto b : be(2)) images.push_back(b);
  for (auto b : be(2)) images.push_back(b);
  for (int k = 0; k < 8; ++k) images.push_back(static_cast<unsigned char>(k * 30));
  std::vector<unsigned char> labels;
  for (auto b : be(2049)) labels.push_back(b);
  for (auto b : be(2)) labels.push_back(b);
  labels.push_back(3);
  labels.push_back(7);

  const fs::path dir = fs::temp_directory_path() / "odg_idx_test";
  fs::create_directories(dir);
  const std::string ip = (dir / "imgs").string(), lp = (dir / "labels").string();
  std::ofstream(ip, std::ios::binary)
      .write(reinterpret_cast<char*>(images.data()), images.size());
  std::ofstream(lp, std::ios::binary)
      .write(reinterpret_cast<char*>(labels.data()), labels.size());

  const std::uint32_t icrc = data::crc32(images.data(), images.size());
  const std::uint32_t lcrc = data::crc32(labels.data(), labels.size());
  data::Dataset ds = data::load_idx_digits(ip, lp, 0, icrc, lcrc);
  CHECK(ds.samples.size() == 2);
  CHECK(ds.samples[0].label == 3);
  CHECK(ds.samples[1].label == 7);
  CHECK(ds.samples[0].image.h == 2);
  CHECK(ds.samples[0].image.v[1] == doctest::Approx(30.0 / 255.0));

  CHECK_THROWS_AS(data::load_idx_digits(ip, lp, 0, icrc + 1, lcrc),
                  std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("crc32 matches the reference value for a known string") {
  const char* s = "123456789";
  CHECK(data::crc32(reinterpret_cast<const unsigned char*>(s), 9) == 0xCBF43926u);
}

}  // TEST_SUITE
