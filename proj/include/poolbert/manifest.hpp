#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace poolbert {

/// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
/// InputError when the file cannot be read.
std::string sha256_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
/// Writes through a sibling temporary file and a rename, so readers never see
/// a half-written artifact.
void write_text_file(const std::filesystem::path& path, std::string_view text);

// Record of one command invocation, written next to its outputs.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> parameters;  // fully resolved
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double duration_seconds = 0.0;
  std::map<std::string, std::string> input_hashes;     // path -> sha256
  std::map<std::string, std::string> artifact_hashes;  // path -> sha256

  /// Hashes every listed input and output that exists on disk.
  void hash_files();
  nlohmann::ordered_json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  void write(const std::filesystem::path& path) const;
  static RunManifest load(const std::filesystem::path& path);
};

/// `<out>.manifest.json` beside a file output.
std::filesystem::path manifest_path_for(const std::filesystem::path& output);

}  // namespace poolbert
