#include "poolbert/model_config.hpp"

#include "poolbert/error.hpp"
#include "poolbert/key_value.hpp"

namespace poolbert {

std::string_view to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::cls: return "cls";
    case HeadKind::rupool: return "rupool";
    case HeadKind::mlm: return "mlm";
  }
  return "?";
}

HeadKind parse_head_kind(std::string_view text) {
  if (text == "cls") return HeadKind::cls;
  if (text == "rupool") return HeadKind::rupool;
  if (text == "mlm") return HeadKind::mlm;
  throw ParseError("unknown head kind '" + std::string(text) + "' (expected cls, rupool or mlm)");
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.num_layers = 12;
  c.hidden_size = 768;
  c.num_heads = 12;
  c.ff_size = 3072;
  c.vocab_size = 40000;
  c.max_positions = 512;
  c.max_seq_len = 128;
  c.num_classes = 265;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ParameterError("model config: " + msg); };
  if (hidden_size == 0 || num_heads == 0) fail("hidden_size and num_heads must be positive");
  if (hidden_size % num_heads != 0) {
    fail("hidden_size " + std::to_string(hidden_size) + " is not divisible by num_heads " +
         std::to_string(num_heads));
  }
  if (ff_size == 0) fail("ff_size must be positive");
  if (vocab_size < 6) fail("vocab_size must exceed the 5 special tokens");
  if (max_seq_len < 3) fail("max_seq_len must be at least 3");
  if (max_positions < max_seq_len) fail("max_positions must be >= max_seq_len");
  if (num_segments == 0) fail("num_segments must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
  if (head_kind != HeadKind::mlm && num_classes < 2) fail("classifier heads need num_classes >= 2");
  if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
}

std::size_t ModelConfig::pooled_size() const {
  return head_kind == HeadKind::rupool ? 3 * hidden_size : hidden_size;
}

std::string ModelConfig::to_text() const {
  KeyValues kv;
  kv.set("num_layers", std::to_string(num_layers));
  kv.set("hidden_size", std::to_string(hidden_size));
  kv.set("num_heads", std::to_string(num_heads));
  kv.set("ff_size", std::to_string(ff_size));
  kv.set("vocab_size", std::to_string(vocab_size));
  kv.set("max_positions", std::to_string(max_positions));
  kv.set("max_seq_len", std::to_string(max_seq_len));
  kv.set("num_segments", std::to_string(num_segments));
  kv.set("dropout_rate", format_double(dropout_rate));
  kv.set("num_classes", std::to_string(num_classes));
  kv.set("head_kind", std::string(to_string(head_kind)));
  kv.set("layer_norm_eps", format_double(layer_norm_eps));
  kv.set("gelu", gelu == ops::GeluKind::tanh_approx ? "tanh" : "erf");
  return kv.to_text();
}

ModelConfig ModelConfig::from_text(std::string_view text, std::string_view source) {
  const KeyValues kv = KeyValues::parse(text, source);
  kv.require_known({"num_layers", "hidden_size", "num_heads", "ff_size", "vocab_size", "max_positions",
                    "max_seq_len", "num_segments", "dropout_rate", "num_classes", "head_kind",
                    "layer_norm_eps", "gelu"});
  ModelConfig c;
  c.num_layers = kv.get_size("num_layers", c.num_layers);
  c.hidden_size = kv.get_size("hidden_size", c.hidden_size);
  c.num_heads = kv.get_size("num_heads", c.num_heads);
  c.ff_size = kv.get_size("ff_size", c.ff_size);
  c.vocab_size = kv.get_size("vocab_size", c.vocab_size);
  c.max_positions = kv.get_size("max_positions", c.max_positions);
  c.max_seq_len = kv.get_size("max_seq_len", c.max_seq_len);
  c.num_segments = kv.get_size("num_segments", c.num_segments);
  c.dropout_rate = kv.get_double("dropout_rate", c.dropout_rate);
  c.num_classes = kv.get_size("num_classes", c.num_classes);
  c.head_kind = parse_head_kind(kv.get_string("head_kind", std::string(to_string(c.head_kind))));
  c.layer_norm_eps = kv.get_double("layer_norm_eps", c.layer_norm_eps);
  const std::string gelu = kv.get_string("gelu", "tanh");
  if (gelu == "tanh") {
    c.gelu = ops::GeluKind::tanh_approx;
  } else if (gelu == "erf") {
    c.gelu = ops::GeluKind::exact_erf;
  } else {
    throw ParseError(std::string(source) + ": gelu must be tanh or erf, got '" + gelu + "'");
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  const KeyValues kv = KeyValues::load(path);
  return from_text(kv.to_text(), path.string());
}

}  // namespace poolbert
