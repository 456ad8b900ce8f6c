#include "poolbert/model.hpp"

#include <algorithm>
#include <cmath>

#include "poolbert/error.hpp"
#include "poolbert/ops.hpp"

namespace poolbert {

Batch Batch::gather(std::span<const Encoding> encodings, std::span<const std::size_t> indices, bool trim) {
  Batch b;
  b.batch_size = indices.size();
  if (indices.empty()) throw InputError("empty batch");
  const std::size_t full = encodings[indices[0]].ids.size();
  std::size_t len = trim ? 0 : full;
  for (std::size_t i : indices) {
    if (i >= encodings.size()) throw InputError("batch index out of range");
    const Encoding& e = encodings[i];
    if (e.ids.size() != full) throw DimensionError("encodings in a batch must share one padded length");
    if (trim) len = std::max(len, e.original_length);
  }
  b.seq_len = len;
  b.ids.reserve(b.batch_size * len);
  for (std::size_t i : indices) {
    const Encoding& e = encodings[i];
    b.ids.insert(b.ids.end(), e.ids.begin(), e.ids.begin() + static_cast<std::ptrdiff_t>(len));
    b.segment_ids.insert(b.segment_ids.end(), e.segment_ids.begin(),
                         e.segment_ids.begin() + static_cast<std::ptrdiff_t>(len));
    b.attention_mask.insert(b.attention_mask.end(), e.attention_mask.begin(),
                            e.attention_mask.begin() + static_cast<std::ptrdiff_t>(len));
  }
  return b;
}

Batch Batch::from(std::span<const Encoding> encodings, bool trim) {
  std::vector<std::size_t> all(encodings.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return gather(encodings, all, trim);
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t H = config_.hidden_size;
  add_parameter("embeddings.word_embeddings", {config_.vocab_size, H});
  add_parameter("embeddings.position_embeddings", {config_.max_positions, H});
  add_parameter("embeddings.token_type_embeddings", {config_.num_segments, H});
  add_parameter("embeddings.layer_norm.gamma", {H});
  add_parameter("embeddings.layer_norm.beta", {H});
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string p = "encoder.layer." + std::to_string(l) + ".";
    for (const char* proj : {"query", "key", "value"}) {
      add_parameter(p + "attention." + proj + ".weight", {H, H});
      add_parameter(p + "attention." + proj + ".bias", {H});
    }
    add_parameter(p + "attention.output.weight", {H, H});
    add_parameter(p + "attention.output.bias", {H});
    add_parameter(p + "attention.layer_norm.gamma", {H});
    add_parameter(p + "attention.layer_norm.beta", {H});
    add_parameter(p + "intermediate.weight", {config_.ff_size, H});
    add_parameter(p + "intermediate.bias", {config_.ff_size});
    add_parameter(p + "output.weight", {H, config_.ff_size});
    add_parameter(p + "output.bias", {H});
    add_parameter(p + "output.layer_norm.gamma", {H});
    add_parameter(p + "output.layer_norm.beta", {H});
  }
  if (config_.head_kind == HeadKind::mlm) {
    add_parameter("mlm.transform.weight", {H, H});
    add_parameter("mlm.transform.bias", {H});
    add_parameter("mlm.transform.layer_norm.gamma", {H});
    add_parameter("mlm.transform.layer_norm.beta", {H});
    add_parameter("mlm.decoder.weight", {config_.vocab_size, H});
    add_parameter("mlm.decoder.bias", {config_.vocab_size});
  } else {
    add_parameter("classifier.weight", {config_.num_classes, config_.pooled_size()});
    add_parameter("classifier.bias", {config_.num_classes});
  }
}

Tensor& Model::add_parameter(std::string name, Shape shape) {
  params_.push_back({std::move(name), Tensor::zeros(std::move(shape), true)});
  return params_.back().tensor;
}

static bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

void Model::initialize(std::uint64_t seed) {
  Rng rng(seed);
  for (NamedTensor& p : params_) {
    std::span<real> data = p.tensor.mutable_data();
    if (ends_with(p.name, ".gamma")) {
      std::fill(data.begin(), data.end(), real(1));
    } else if (ends_with(p.name, ".bias") || ends_with(p.name, ".beta")) {
      std::fill(data.begin(), data.end(), real(0));
    } else {
      for (real& v : data) v = static_cast<real>(0.02 * rng.normal());
    }
  }
}

Model Model::initialized(ModelConfig config, std::uint64_t seed) {
  Model m(std::move(config));
  m.initialize(seed);
  return m;
}

std::vector<Tensor> Model::parameter_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const NamedTensor& p : params_) out.push_back(p.tensor);
  return out;
}

const Tensor& Model::parameter(std::string_view name) const {
  for (const NamedTensor& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw ContractError("no parameter named " + std::string(name));
}

bool Model::has_parameter(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const NamedTensor& p) { return p.name == name; });
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const NamedTensor& p : params_) n += p.tensor.numel();
  return n;
}

Model Model::clone() const {
  Model copy(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    std::span<const real> src = params_[i].tensor.data();
    std::copy(src.begin(), src.end(), copy.params_[i].tensor.mutable_data().begin());
  }
  return copy;
}

Tensor Model::layer_parameter(std::size_t layer, std::string_view suffix) const {
  return parameter("encoder.layer." + std::to_string(layer) + "." + std::string(suffix));
}

Tensor Model::embedding_sum(const Batch& batch) const {
  if (batch.seq_len > config_.max_positions) {
    throw InputError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_positions " +
                     std::to_string(config_.max_positions));
  }
  const Shape index_shape{batch.batch_size, batch.seq_len};
  std::vector<std::int32_t> positions(batch.batch_size * batch.seq_len);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<std::int32_t>(i % batch.seq_len);
  }
  Tensor tok = ops::embedding(parameter("embeddings.word_embeddings"), batch.ids, index_shape);
  Tensor seg = ops::embedding(parameter("embeddings.token_type_embeddings"), batch.segment_ids, index_shape);
  Tensor pos = ops::embedding(parameter("embeddings.position_embeddings"), positions, index_shape);
  return ops::add(ops::add(tok, seg), pos);
}

Tensor Model::embed(const Batch& batch, bool training, Rng& rng) const {
  Tensor x = ops::layer_norm(embedding_sum(batch), parameter("embeddings.layer_norm.gamma"),
                             parameter("embeddings.layer_norm.beta"), static_cast<real>(config_.layer_norm_eps));
  return ops::dropout(x, static_cast<real>(config_.dropout_rate), training, rng);
}

Tensor Model::encode_sequence(const Tensor& embeddings, std::span<const std::uint8_t> attention_mask,
                              bool training, Rng& rng, std::vector<Tensor>* attention) const {
  if (embeddings.rank() != 3 || embeddings.dim(2) != config_.hidden_size) {
    throw DimensionError("encode_sequence expects [B x T x " + std::to_string(config_.hidden_size) + "], got " +
                         shape_string(embeddings.shape()));
  }
  const std::size_t B = embeddings.dim(0), T = embeddings.dim(1), H = config_.hidden_size;
  const std::size_t heads = config_.num_heads, d = config_.head_dim();
  if (attention_mask.size() != B * T) throw DimensionError("attention mask does not match [B x T]");
  const real rate = static_cast<real>(config_.dropout_rate);
  const real eps = static_cast<real>(config_.layer_norm_eps);
  const real inv_sqrt_d = static_cast<real>(1.0 / std::sqrt(static_cast<double>(d)));
  const std::size_t to_heads[] = {0, 2, 1, 3};

  // [B, T, H] -> [B*heads, T, d]
  auto split_heads = [&](const Tensor& x) {
    return ops::reshape(ops::permute(ops::reshape(x, {B, T, heads, d}), to_heads), {B * heads, T, d});
  };

  Tensor x = embeddings;
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    auto P = [&](std::string_view s) { return layer_parameter(l, s); };
    Tensor q = split_heads(ops::linear(x, P("attention.query.weight"), P("attention.query.bias")));
    Tensor k = split_heads(ops::linear(x, P("attention.key.weight"), P("attention.key.bias")));
    Tensor v = split_heads(ops::linear(x, P("attention.value.weight"), P("attention.value.bias")));
    Tensor scores = ops::reshape(ops::scale(ops::batched_matmul(q, k, true), inv_sqrt_d), {B, heads, T, T});
    Tensor probs = ops::softmax(ops::mask_keys(scores, attention_mask), 3);
    if (attention) attention->push_back(probs);
    Tensor context = ops::batched_matmul(ops::reshape(probs, {B * heads, T, T}), v);
    context = ops::reshape(ops::permute(ops::reshape(context, {B, heads, T, d}), to_heads), {B, T, H});
    Tensor attn_out = ops::dropout(ops::linear(context, P("attention.output.weight"), P("attention.output.bias")),
                                   rate, training, rng);
    x = ops::layer_norm(ops::add(x, attn_out), P("attention.layer_norm.gamma"), P("attention.layer_norm.beta"), eps);

    Tensor inner = ops::gelu(ops::linear(x, P("intermediate.weight"), P("intermediate.bias")), config_.gelu);
    Tensor ff_out = ops::dropout(ops::linear(inner, P("output.weight"), P("output.bias")), rate, training, rng);
    x = ops::layer_norm(ops::add(x, ff_out), P("output.layer_norm.gamma"), P("output.layer_norm.beta"), eps);
  }
  return x;
}

Tensor Model::encode(const Batch& batch, bool training, Rng& rng) const {
  return encode_sequence(embed(batch, training, rng), batch.attention_mask, training, rng);
}

Tensor Model::pool(const Tensor& hidden, std::span<const std::uint8_t> attention_mask) const {
  switch (config_.head_kind) {
    case HeadKind::cls: return pool_cls(hidden);
    case HeadKind::rupool: return pool_rupool(hidden, attention_mask);
    case HeadKind::mlm: break;
  }
  throw ContractError("pool() needs a classifier head");
}

Tensor Model::classifier_logits(const Batch& batch, bool training, Rng& rng) const {
  if (config_.head_kind == HeadKind::mlm) throw ContractError("classifier_logits() on an mlm model");
  Tensor hidden = encode(batch, training, rng);
  Tensor pooled = ops::dropout(pool(hidden, batch.attention_mask), static_cast<real>(config_.dropout_rate),
                               training, rng);
  return classify(pooled, parameter("classifier.weight"), parameter("classifier.bias"));
}

Tensor Model::mlm_logits(const Tensor& hidden, std::span<const std::size_t> positions) const {
  if (config_.head_kind != HeadKind::mlm) throw ContractError("mlm_logits() needs the mlm head");
  if (hidden.rank() != 3) throw DimensionError("mlm_logits expects [B x T x H]");
  const std::size_t rows = hidden.dim(0) * hidden.dim(1);
  for (std::size_t p : positions) {
    if (p >= rows) {
      throw InputError("masked position " + std::to_string(p) + " outside a batch of " + std::to_string(rows) +
                       " positions");
    }
  }
  Tensor h = ops::gather_rows(ops::reshape(hidden, {rows, config_.hidden_size}), positions);
  h = ops::gelu(ops::linear(h, parameter("mlm.transform.weight"), parameter("mlm.transform.bias")), config_.gelu);
  h = ops::layer_norm(h, parameter("mlm.transform.layer_norm.gamma"), parameter("mlm.transform.layer_norm.beta"),
                      static_cast<real>(config_.layer_norm_eps));
  return ops::linear(h, parameter("mlm.decoder.weight"), parameter("mlm.decoder.bias"));
}

void Model::copy_encoder_from(const Model& source) {
  std::vector<NamedTensor> shared;
  for (const NamedTensor& p : params_) {
    if (p.name.rfind("embeddings.", 0) != 0 && p.name.rfind("encoder.", 0) != 0) continue;
    if (!source.has_parameter(p.name)) throw FormatError("source model lacks parameter " + p.name);
    const Tensor& src = source.parameter(p.name);
    if (src.shape() != p.tensor.shape()) {
      throw ShapeMismatchError("parameter " + p.name + ": source shape " + shape_string(src.shape()) +
                               " does not match " + shape_string(p.tensor.shape()));
    }
    shared.push_back({p.name, src});
  }
  for (const NamedTensor& s : shared) {
    std::span<const real> src = s.tensor.data();
    Tensor dst = parameter(s.name);
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

void Model::load_state(std::span<const NamedTensor> tensors) {
  std::vector<const Tensor*> sources(params_.size(), nullptr);
  for (const NamedTensor& t : tensors) {
    auto it = std::find_if(params_.begin(), params_.end(), [&](const NamedTensor& p) { return p.name == t.name; });
    if (it == params_.end()) throw FormatError("unexpected tensor " + t.name + " for this model configuration");
    const std::size_t i = static_cast<std::size_t>(it - params_.begin());
    if (sources[i]) throw FormatError("duplicate tensor " + t.name);
    if (t.tensor.shape() != it->tensor.shape()) {
      throw ShapeMismatchError("tensor " + t.name + " has shape " + shape_string(t.tensor.shape()) +
                               ", model expects " + shape_string(it->tensor.shape()));
    }
    sources[i] = &t.tensor;
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!sources[i]) throw FormatError("missing tensor " + params_[i].name);
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    std::span<const real> src = sources[i]->data();
    std::copy(src.begin(), src.end(), params_[i].tensor.mutable_data().begin());
  }
}

Tensor pool_cls(const Tensor& hidden) { return ops::select_position(hidden, 0); }

Tensor pool_rupool(const Tensor& hidden, std::span<const std::uint8_t> attention_mask) {
  const Tensor parts[] = {ops::select_position(hidden, 0), ops::masked_max(hidden, attention_mask),
                          ops::masked_mean(hidden, attention_mask)};
  return ops::concat_last(parts);
}

Tensor classify(const Tensor& pooled, const Tensor& weight, const Tensor& bias) {
  if (pooled.rank() != 2 || weight.rank() != 2 || pooled.dim(1) != weight.dim(1)) {
    throw DimensionError("classifier expects pooled [B x D] and weight [K x D], got " + shape_string(pooled.shape()) +
                         " and " + shape_string(weight.shape()));
  }
  return ops::linear(pooled, weight, bias);
}

}  // namespace poolbert
