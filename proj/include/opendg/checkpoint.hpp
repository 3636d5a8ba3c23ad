#pragma once

#include "opendg/nn.hpp"

#include <json.hpp>

#include <map>
#include <string>

namespace opendg::checkpoint {

// Single-file archive: magic + version, a JSON manifest, then named double
// tensors in a fixed order. Writes go through a temp file and an atomic
// rename so a crash never leaves a partial checkpoint behind.
inline constexpr char kMagic[8] = {'O', 'D', 'G', 'C', 'K', 'P', 'T', '\x01'};

void save(const std::string& path, const nlohmann::json& manifest,
          const std::vector<const nn::Param*>& tensors);

struct Loaded {
  nlohmann::json manifest;
  std::map<std::string, Vector> tensors;
};

Loaded load(const std::string& path);

// Copies loaded tensors into the given parameters by name; every parameter
// must be present with a matching size.
void apply(const Loaded& ckpt, const nn::ParamRefs& params);

// Partial variant for warm starts: copies only the names that exist, returns
// how many were applied.
int apply_partial(const Loaded& ckpt, const nn::ParamRefs& params);

}  // namespace opendg::checkpoint
