#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "poolbert/model_config.hpp"
#include "poolbert/rng.hpp"
#include "poolbert/tensor.hpp"
#include "poolbert/tokenizer.hpp"

namespace poolbert {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Row-major [batch_size x seq_len] id/mask buffers for one forward pass.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> segment_ids;
  std::vector<std::uint8_t> attention_mask;

  /// Rows encodings[indices[i]]. With `trim`, the sequence axis is cut to the
  /// longest unpadded row; masked attention and pooling make the result
  /// identical to the untrimmed batch on every non-pad position.
  static Batch gather(std::span<const Encoding> encodings, std::span<const std::size_t> indices,
                      bool trim = true);
  static Batch from(std::span<const Encoding> encodings, bool trim = true);
};

// Encoder with one head. Parameters follow BERT naming:
//   embeddings.{word,position,token_type}_embeddings, embeddings.layer_norm.*
//   encoder.layer.<i>.attention.{query,key,value,output}.*, ...
//   classifier.{weight,bias}           (cls / rupool heads)
//   mlm.transform.*, mlm.decoder.*     (mlm head)
// Dense weights are stored [out x in].
class Model {
 public:
  /// Parameters are allocated and zero; see initialize().
  explicit Model(ModelConfig config);

  /// normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains.
  void initialize(std::uint64_t seed);
  static Model initialized(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  const Tensor& parameter(std::string_view name) const;
  bool has_parameter(std::string_view name) const;
  std::size_t parameter_count() const;

  /// Deep copy of every parameter.
  Model clone() const;

  /// token + segment + position embedding, before layer norm.
  Tensor embedding_sum(const Batch& batch) const;
  /// embedding_sum followed by layer norm and dropout: [B x T x H].
  Tensor embed(const Batch& batch, bool training, Rng& rng) const;

  /// The transformer stack over embeddings [B x T x H]. Keys with
  /// attention_mask 0 are masked out. When `attention` is given, it receives
  /// the [B x heads x T x T] attention probabilities of each layer.
  Tensor encode_sequence(const Tensor& embeddings, std::span<const std::uint8_t> attention_mask,
                         bool training, Rng& rng, std::vector<Tensor>* attention = nullptr) const;

  Tensor encode(const Batch& batch, bool training, Rng& rng) const;

  /// Head-specific pooled vector: [B x H] (cls) or [B x 3H] (rupool).
  Tensor pool(const Tensor& hidden, std::span<const std::uint8_t> attention_mask) const;

  /// Full classifier forward: [B x K] logits. Dropout hits the pooled vector.
  Tensor classifier_logits(const Batch& batch, bool training, Rng& rng) const;

  /// MLM logits at flat positions (b * T + t) of hidden [B x T x H]: [P x V].
  Tensor mlm_logits(const Tensor& hidden, std::span<const std::size_t> positions) const;

  /// Copies embeddings.* and encoder.* from `source`; shapes must agree.
  void copy_encoder_from(const Model& source);

  /// Overwrites every parameter from `tensors` (matched by name) or throws,
  /// leaving the model untouched: FormatError for a missing or unexpected
  /// name, ShapeMismatchError for a shape disagreement.
  void load_state(std::span<const NamedTensor> tensors);

 private:
  Tensor& add_parameter(std::string name, Shape shape);
  Tensor layer_parameter(std::size_t layer, std::string_view suffix) const;

  ModelConfig config_;
  std::vector<NamedTensor> params_;
};

Tensor pool_cls(const Tensor& hidden);
Tensor pool_rupool(const Tensor& hidden, std::span<const std::uint8_t> attention_mask);

/// pooled [B x D] * weight[K x D]^T + bias[K]; DimensionError if D differs.
Tensor classify(const Tensor& pooled, const Tensor& weight, const Tensor& bias);

}  // namespace poolbert
