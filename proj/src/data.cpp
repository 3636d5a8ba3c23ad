#include "opendg/data.hpp"

#include "opendg/log.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace opendg::data {

// ------------------------------------------------------------- triplets

std::vector<Triplet> build_triplets(const Dataset& ds, int epoch,
                                    int reshuffle_period, std::uint64_t seed) {
  if (ds.empty()) throw std::invalid_argument("build_triplets: empty dataset");
  if (reshuffle_period < 1)
    throw std::invalid_argument("build_triplets: reshuffle_period must be >= 1");

  std::map<int, std::vector<int>> by_class;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    by_class[ds.samples[i].label].push_back(static_cast<int>(i));
  if (by_class.size() < 2)
    throw std::invalid_argument("build_triplets: need at least two classes");

  const std::uint64_t block = static_cast<std::uint64_t>(epoch) / reshuffle_period;
  Rng rng(derive_seed(seed, 0x74726970ULL, block));

  std::vector<int> order(ds.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(0, i)]);

  std::set<int> warned;
  std::vector<Triplet> out;
  out.reserve(order.size());
  const int n = static_cast<int>(ds.samples.size());
  for (int i1 : order) {
    const int y1 = ds.samples[i1].label;
    const std::vector<int>& mates = by_class[y1];
    int i2 = i1;
    if (mates.size() > 1) {
      do {
        i2 = mates[rng.uniform_int(0, static_cast<int>(mates.size()) - 1)];
      } while (i2 == i1);
    } else if (warned.insert(y1).second) {
      log_warn("build_triplets: class " + std::to_string(y1) +
               " has a single sample; pairing it with itself");
    }
    int i3;
    do {
      i3 = rng.uniform_int(0, n - 1);
    } while (ds.samples[i3].label == y1);
    out.push_back({i1, i2, i3, y1});
  }
  return out;
}

// ------------------------------------------------------------- preprocess

Image resize_bilinear(const Image& in, int out_h, int out_w) {
  if (in.h == out_h && in.w == out_w) return in;
  Image out(in.c, out_h, out_w);
  const double sy = static_cast<double>(in.h) / out_h;
  const double sx = static_cast<double>(in.w) / out_w;
  for (int ch = 0; ch < in.c; ++ch)
    for (int y = 0; y < out_h; ++y) {
      const double fy = (y + 0.5) * sy - 0.5;
      const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, in.h - 1);
      const int y1 = std::min(y0 + 1, in.h - 1);
      const double wy = std::clamp(fy - y0, 0.0, 1.0);
      for (int x = 0; x < out_w; ++x) {
        const double fx = (x + 0.5) * sx - 0.5;
        const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, in.w - 1);
        const int x1 = std::min(x0 + 1, in.w - 1);
        const double wx = std::clamp(fx - x0, 0.0, 1.0);
        const double top = (1.0 - wx) * in.at(ch, y0, x0) + wx * in.at(ch, y0, x1);
        const double bot = (1.0 - wx) * in.at(ch, y1, x0) + wx * in.at(ch, y1, x1);
        out.at(ch, y, x) = (1.0 - wy) * top + wy * bot;
      }
    }
  return out;
}

Image preprocess(const Image& raw, const PreprocessConfig& cfg) {
  if (raw.c != 1 && raw.c != 3)
    throw std::invalid_argument("preprocess: expected 1 or 3 channels");
  Image resized = resize_bilinear(raw, cfg.target_size, cfg.target_size);
  Image out(3, cfg.target_size, cfg.target_size);
  for (int ch = 0; ch < 3; ++ch) {
    const int src = resized.c == 1 ? 0 : ch;
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x)
        out.at(ch, y, x) =
            (resized.at(src, y, x) - cfg.mean_rgb[ch]) / cfg.std_rgb[ch];
  }
  return out;
}

// ------------------------------------------------------------- open split

OpenSplit split_open(const Dataset& ds, const std::vector<int>& known_labels) {
  if (known_labels.empty())
    throw std::invalid_argument("split_open: empty known label set");
  std::set<int> present;
  for (const Sample& s : ds.samples) present.insert(s.label);
  std::vector<int> known = known_labels;
  std::sort(known.begin(), known.end());
  known.erase(std::unique(known.begin(), known.end()), known.end());
  for (int k : known)
    if (!present.count(k))
      throw std::invalid_argument("split_open: known label " +
                                  std::to_string(k) + " absent from dataset");

  std::map<int, int> remap;
  for (std::size_t i = 0; i < known.size(); ++i)
    remap[known[i]] = static_cast<int>(i);

  OpenSplit out;
  out.num_known = static_cast<int>(known.size());
  out.closed.num_classes = out.num_known;
  out.open.num_classes = out.num_known + 1;
  for (const Sample& s : ds.samples) {
    auto it = remap.find(s.label);
    if (it != remap.end()) {
      Sample c = s;
      c.label = it->second;
      out.closed.samples.push_back(std::move(c));
    } else {
      Sample o = s;
      o.label = out.num_known;
      out.open.samples.push_back(std::move(o));
    }
  }
  return out;
}

// ------------------------------------------------------------- synthetic

namespace {

struct Palette {
  std::array<double, 3> bg, fg;
};

// Five palettes with clearly separated channel statistics.
const Palette kPalettes[5] = {
    {{0.92, 0.92, 0.88}, {0.10, 0.15, 0.55}},  // light paper, navy ink
    {{0.08, 0.10, 0.12}, {0.95, 0.80, 0.20}},  // dark slate, amber ink
    {{0.75, 0.35, 0.30}, {0.95, 0.95, 0.95}},  // brick, white ink
    {{0.20, 0.55, 0.30}, {0.90, 0.30, 0.75}},  // green field, magenta ink
    {{0.45, 0.45, 0.75}, {0.15, 0.85, 0.85}},  // periwinkle, cyan ink
};

double background_value(int texture, int y, int x, int size) {
  switch (texture % 3) {
    case 0: return 1.0;                                        // solid
    case 1: return 0.6 + 0.4 * (static_cast<double>(x) / size);  // gradient
    default: return ((y / 4 + x / 4) % 2 == 0) ? 1.0 : 0.78;   // checker
  }
}

// Glyph membership test for class k at unit coordinates centered on (cx, cy).
bool glyph_hit(int k, double u, double v, double r, double t) {
  const double au = std::abs(u), av = std::abs(v);
  switch (k % 10) {
    case 0: return u * u + v * v <= r * r;                        // disk
    case 1: {                                                     // ring
      const double d2 = u * u + v * v;
      return d2 <= r * r && d2 >= (r - t) * (r - t);
    }
    case 2: return au <= r && av <= r;                            // square
    case 3: return au <= r && av <= r && (au >= r - t || av >= r - t);  // frame
    case 4: return v >= -r && v <= r && au <= (r - v) * 0.5;      // triangle
    case 5: return (au <= t && av <= r) || (av <= t && au <= r);  // plus
    case 6: return std::abs(au - av) <= t && au <= r;             // diagonal X
    case 7: return au <= r && (std::abs(v - r * 0.5) <= t || std::abs(v + r * 0.5) <= t);  // h-bars
    case 8: return av <= r && (std::abs(u - r * 0.5) <= t || std::abs(u + r * 0.5) <= t);  // v-bars
    default: return au + av <= r;                                 // diamond
  }
}

Image blur3(const Image& in) {
  Image out = in;
  for (int ch = 0; ch < in.c; ++ch)
    for (int y = 0; y < in.h; ++y)
      for (int x = 0; x < in.w; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= in.h || xx < 0 || xx >= in.w) continue;
            acc += in.at(ch, yy, xx);
            ++cnt;
          }
        out.at(ch, y, x) = acc / cnt;
      }
  return out;
}

}  // namespace

Dataset generate_synthetic_domains(const SyntheticDomainSpec& spec,
                                   int n_domains, int n_per_class) {
  if (n_domains < 1 || n_per_class < 1 || spec.num_classes < 1 ||
      spec.image_size < 8)
    throw std::invalid_argument("generate_synthetic_domains: bad spec");
  Dataset ds;
  ds.num_classes = spec.num_classes;
  const int size = spec.image_size;

  for (int d = 0; d < n_domains; ++d) {
    const Palette& pal = kPalettes[d % 5];
    const int texture = d % 3;
    const bool blurred = (d % 2) == 1;
    for (int k = 0; k < spec.num_classes; ++k) {
      for (int i = 0; i < n_per_class; ++i) {
        Rng rng(derive_seed(spec.seed, d, k, i));
        const double cx = 0.5 + rng.uniform(-0.12, 0.12);
        const double cy = 0.5 + rng.uniform(-0.12, 0.12);
        const double r = rng.uniform(0.24, 0.36);
        const double t = rng.uniform(0.055, 0.09);
        const double contrast =
            1.0 + rng.uniform(-spec.contrast_jitter, spec.contrast_jitter);

        Image img(3, size, size);
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            const double u = (x + 0.5) / size - cx;
            const double v = (y + 0.5) / size - cy;
            const bool hit = glyph_hit(k, u, v, r, t);
            const double bg = background_value(texture, y, x, size);
            for (int ch = 0; ch < 3; ++ch) {
              double val = hit ? pal.fg[ch] : pal.bg[ch] * bg;
              val = 0.5 + (val - 0.5) * contrast;
              val += rng.normal(0.0, spec.pixel_noise);
              img.at(ch, y, x) = std::clamp(val, 0.0, 1.0);
            }
          }
        if (blurred) img = blur3(img);

        Sample s;
        s.image = std::move(img);
        s.label = k;
        s.domain = d;
        std::ostringstream id;
        id << "synth/s" << spec.seed << "/d" << d << "/c" << k << "/i" << i;
        s.id = id.str();
        ds.samples.push_back(std::move(s));
      }
    }
  }
  return ds;
}

Dataset domain_subset(const Dataset& ds, int domain) {
  Dataset out;
  out.num_classes = ds.num_classes;
  for (const Sample& s : ds.samples)
    if (s.domain == domain) out.samples.push_back(s);
  return out;
}

// ------------------------------------------------------------- PPM + manifest

void write_ppm(const std::string& path, const Image& img) {
  if (img.c != 3) throw std::invalid_argument("write_ppm: need 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        row[x * 3 + ch] = static_cast<unsigned char>(
            std::lround(std::clamp(img.at(ch, y, x), 0.0, 1.0) * 255.0));
    f.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
}

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || w < 1 || h < 1 || maxval != 255)
    throw std::runtime_error("read_ppm: unsupported header in " + path);
  f.get();  // single whitespace after header
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), raw.size());
  if (!f) throw std::runtime_error("read_ppm: truncated file " + path);
  Image img(3, h, w);
  std::size_t p = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch, ++p)
        img.at(ch, y, x) = raw[p] / 255.0;
  return img;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) throw std::runtime_error("write_dataset: cannot open manifest");
  int counter = 0;
  for (const Sample& s : ds.samples) {
    std::ostringstream rel;
    rel << "d" << s.domain << "_c" << s.label << "_" << counter++ << ".ppm";
    write_ppm(dir + "/" + rel.str(), s.image);
    manifest << rel.str() << " " << s.label << " " << s.domain << "\n";
  }
}

Dataset load_manifest(const std::string& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw std::runtime_error("load_manifest: cannot open " + manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  Dataset ds;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string rel;
    int label = 0, domain = 0;
    if (!(ls >> rel >> label >> domain))
      throw std::runtime_error("load_manifest: bad record at line " +
                               std::to_string(lineno));
    Sample s;
    const std::string full = (base / rel).string();
    try {
      s.image = read_ppm(full);
    } catch (const std::exception& e) {
      log_warn(std::string("load_manifest: skipping ") + full + ": " + e.what());
      continue;
    }
    s.label = label;
    s.domain = domain;
    s.id = full;
    ds.samples.push_back(std::move(s));
    ds.num_classes = std::max(ds.num_classes, label + 1);
  }
  return ds;
}

// ------------------------------------------------------------- IDX digits

std::uint32_t crc32(const unsigned char* bytes, std::size_t len) {
  static std::uint32_t table[256];
  static bool ready = false;
  if (!ready) {
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    ready = true;
  }
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i)
    crc = table[(crc ^ bytes[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

}  // namespace

Dataset load_idx_digits(const std::string& images_path,
                        const std::string& labels_path, int domain,
                        std::optional<std::uint32_t> images_crc,
                        std::optional<std::uint32_t> labels_crc) {
  const std::vector<unsigned char> ib = read_file(images_path);
  const std::vector<unsigned char> lb = read_file(labels_path);
  if (images_crc && crc32(ib.data(), ib.size()) != *images_crc)
    throw std::runtime_error("load_idx_digits: image file checksum mismatch");
  if (labels_crc && crc32(lb.data(), lb.size()) != *labels_crc)
    throw std::runtime_error("load_idx_digits: label file checksum mismatch");

  if (ib.size() < 16 || be32(ib.data()) != 2051)
    throw std::runtime_error("load_idx_digits: bad image magic");
  if (lb.size() < 8 || be32(lb.data()) != 2049)
    throw std::runtime_error("load_idx_digits: bad label magic");
  const std::uint32_t count = be32(ib.data() + 4);
  const std::uint32_t rows = be32(ib.data() + 8);
  const std::uint32_t cols = be32(ib.data() + 12);
  if (be32(lb.data() + 4) != count)
    throw std::runtime_error("load_idx_digits: image/label count mismatch");
  if (ib.size() != 16 + static_cast<std::size_t>(count) * rows * cols)
    throw std::runtime_error("load_idx_digits: image payload truncated");
  if (lb.size() != 8 + static_cast<std::size_t>(count))
    throw std::runtime_error("load_idx_digits: label payload truncated");

  Dataset ds;
  ds.num_classes = 10;
  ds.samples.reserve(count);
  const unsigned char* px = ib.data() + 16;
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    s.image = Image(1, static_cast<int>(rows), static_cast<int>(cols));
    for (std::uint32_t k = 0; k < rows * cols; ++k)
      s.image.v[k] = px[static_cast<std::size_t>(i) * rows * cols + k] / 255.0;
    s.label = lb[8 + i];
    s.domain = domain;
    s.id = images_path + "#" + std::to_string(i);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ------------------------------------------------------------- batches

FeatureMap to_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("to_batch: empty batch");
  const Image& first = *images.front();
  FeatureMap out(static_cast<int>(images.size()), first.c, first.h, first.w);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& img = *images[i];
    if (img.c != first.c || img.h != first.h || img.w != first.w)
      throw std::invalid_argument("to_batch: inconsistent image shapes");
    std::memcpy(out.v.data() + i * img.v.size(), img.v.data(),
                img.v.size() * sizeof(double));
  }
  return out;
}

}  // namespace opendg::data
