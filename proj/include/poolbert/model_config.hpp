#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>

#include "poolbert/ops.hpp"

namespace poolbert {

enum class HeadKind { cls, rupool, mlm };

std::string_view to_string(HeadKind kind);
HeadKind parse_head_kind(std::string_view text);

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t hidden_size = 64;
  std::size_t num_heads = 4;
  std::size_t ff_size = 256;
  std::size_t vocab_size = 2000;
  std::size_t max_positions = 64;
  std::size_t max_seq_len = 64;  // N: encodings are padded/truncated to this
  std::size_t num_segments = 2;
  double dropout_rate = 0.1;
  std::size_t num_classes = 8;
  HeadKind head_kind = HeadKind::rupool;
  double layer_norm_eps = 1e-12;
  ops::GeluKind gelu = ops::GeluKind::tanh_approx;

  /// Desk-scale configuration used by tests and the toy pipeline.
  static ModelConfig toy();
  /// 12 layers, H=768, 12 heads, ff 3072, N=128, K=265, 40k vocabulary.
  static ModelConfig full_scale();

  /// Throws ParameterError on a violated invariant.
  void validate() const;

  std::size_t head_dim() const { return hidden_size / num_heads; }
  /// Width of the vector fed to the classifier: H for cls, 3H for rupool.
  std::size_t pooled_size() const;

  std::string to_text() const;
  /// Keys absent from the text keep the toy defaults.
  static ModelConfig from_text(std::string_view text, std::string_view source = "<config>");
  static ModelConfig load(const std::filesystem::path& path);

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace poolbert
