#pragma once

// On-disk parameters: manifest.json (config, tensor names, shapes, dtype)
// plus one little-endian flat binary per tensor.

#include <filesystem>
#include <string>

#include "fedgrec/params.hpp"

namespace fedgrec {

enum class Dtype { kF32, kF64 };

Dtype parse_dtype(const std::string& s);
std::string to_string(Dtype d);

// Values as they will read back after storage in `dtype`.
ModelParams round_to_dtype(const ModelParams& params, Dtype dtype);

void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params,
                     Dtype dtype = Dtype::kF32);

// Rebuilds parameters with the config stored in the manifest.
ModelParams load_checkpoint(const std::filesystem::path& dir);

// Same, but throws IncompatibleCheckpointError unless every tensor matches
// the shape `expected` implies.
ModelParams load_checkpoint(const std::filesystem::path& dir, const ModelConfig& expected);

}  // namespace fedgrec
