#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "poolbert/model.hpp"
#include "poolbert/model_config.hpp"

namespace poolbert {

// Binary layout, all integers little-endian u32:
//   "PBRT" version config_len config_text tensor_count
//   per tensor: name_len name rank dims[rank] f32 payload (little-endian)
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig config;
  std::vector<NamedTensor> tensors;
};

Checkpoint make_checkpoint(const Model& model);

/// Writes to a sibling temporary file, then renames over `path`.
void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);

/// FormatError on bad magic, unknown version, truncation or trailing bytes.
Checkpoint read_checkpoint(const std::filesystem::path& path);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

/// Loads weights from `path` into a model built for `config`.
/// ShapeMismatchError when a tensor's shape disagrees with that config.
Model load_checkpoint_as(const std::filesystem::path& path, const ModelConfig& config);

}  // namespace poolbert
