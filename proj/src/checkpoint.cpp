#include "opendg/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace opendg::checkpoint {

namespace {

void write_u64(std::ofstream& f, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  f.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::ifstream& f) {
  unsigned char b[8];
  f.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save(const std::string& path, const nlohmann::json& manifest,
          const std::vector<const nn::Param*>& tensors) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + tmp);
    f.write(kMagic, sizeof(kMagic));
    const std::string m = manifest.dump();
    write_u64(f, m.size());
    f.write(m.data(), static_cast<std::streamsize>(m.size()));
    write_u64(f, tensors.size());
    for (const nn::Param* p : tensors) {
      write_u64(f, p->name.size());
      f.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
      write_u64(f, static_cast<std::uint64_t>(p->value.size()));
      f.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Loaded load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[sizeof(kMagic)];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);

  Loaded out;
  const std::uint64_t mlen = read_u64(f);
  std::string m(mlen, '\0');
  f.read(m.data(), static_cast<std::streamsize>(mlen));
  out.manifest = nlohmann::json::parse(m);

  const std::uint64_t count = read_u64(f);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t nlen = read_u64(f);
    std::string name(nlen, '\0');
    f.read(name.data(), static_cast<std::streamsize>(nlen));
    const std::uint64_t size = read_u64(f);
    Vector v(static_cast<Eigen::Index>(size));
    f.read(reinterpret_cast<char*>(v.data()),
           static_cast<std::streamsize>(size * sizeof(double)));
    if (!f) throw std::runtime_error("checkpoint: truncated tensor in " + path);
    out.tensors.emplace(std::move(name), std::move(v));
  }
  return out;
}

void apply(const Loaded& ckpt, const nn::ParamRefs& params) {
  for (nn::Param* p : params) {
    auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end())
      throw std::runtime_error("checkpoint: missing tensor " + p->name);
    if (it->second.size() != p->value.size())
      throw std::runtime_error("checkpoint: size mismatch for " + p->name);
    p->value = it->second;
  }
}

int apply_partial(const Loaded& ckpt, const nn::ParamRefs& params) {
  int applied = 0;
  for (nn::Param* p : params) {
    auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end() || it->second.size() != p->value.size()) continue;
    p->value = it->second;
    ++applied;
  }
  return applied;
}

}  // namespace opendg::checkpoint
