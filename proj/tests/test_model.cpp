#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "poolbert/checkpoint.hpp"
#include "poolbert/error.hpp"
#include "poolbert/model.hpp"
#include "poolbert/ops.hpp"

using namespace poolbert;

namespace {

ModelConfig small_config(HeadKind head = HeadKind::rupool) {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_size = 16;
  c.num_heads = 2;
  c.ff_size = 32;
  c.vocab_size = 30;
  c.max_positions = 16;
  c.max_seq_len = 12;
  c.num_classes = 5;
  c.head_kind = head;
  return c;
}

Encoding make_encoding(std::vector<std::int32_t> body, std::size_t max_len) {
  Encoding e;
  e.ids.assign(max_len, Vocab::kPad);
  e.attention_mask.assign(max_len, 0);
  e.segment_ids.assign(max_len, 0);
  e.ids[0] = Vocab::kCls;
  for (std::size_t i = 0; i < body.size(); ++i) e.ids[i + 1] = body[i];
  e.ids[body.size() + 1] = Vocab::kSep;
  e.original_length = body.size() + 2;
  e.word_pieces = body.size();
  std::fill_n(e.attention_mask.begin(), e.original_length, std::uint8_t{1});
  return e;
}

void zero(const Tensor& t) {
  Tensor handle = t;
  std::fill(handle.mutable_data().begin(), handle.mutable_data().end(), real(0));
}

std::vector<real> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.at(i)) - double(b.at(i))));
  return m;
}

Tensor eval_logits(const Model& m, const Batch& batch) {
  Rng rng(0);
  return m.classifier_logits(batch, false, rng);
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation and text round trip") {
  ModelConfig c = small_config();
  c.dropout_rate = 0.123456789;
  c.layer_norm_eps = 1e-12;
  c.gelu = ops::GeluKind::exact_erf;
  CHECK(ModelConfig::from_text(c.to_text()) == c);

  ModelConfig bad = small_config();
  bad.num_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = small_config();
  bad.num_classes = 1;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  CHECK_THROWS_AS(ModelConfig::from_text("hidden_size=abc"), ParseError);
  CHECK_THROWS_AS(ModelConfig::from_text("colour=blue"), ParseError);

  const ModelConfig full = ModelConfig::full_scale();
  CHECK(full.num_layers == 12);
  CHECK(full.hidden_size == 768);
  CHECK(full.num_heads == 12);
  CHECK(full.max_seq_len == 128);
  CHECK(full.num_classes == 265);
  CHECK_NOTHROW(full.validate());
}

TEST_CASE("embedding sum") {
  SUBCASE("zero tables give a zero sum") {
    Model m(small_config());
    const std::vector<Encoding> encs{make_encoding({7, 8, 9}, 12)};
    Tensor s = m.embedding_sum(Batch::from(encs));
    for (real v : s.data()) CHECK(v == 0);
  }
  SUBCASE("hand example") {
    ModelConfig c = small_config();
    c.hidden_size = 2;
    c.num_heads = 1;
    Model m(c);
    Tensor tok = m.parameter("embeddings.word_embeddings");
    Tensor seg = m.parameter("embeddings.token_type_embeddings");
    Tensor pos = m.parameter("embeddings.position_embeddings");
    tok.mutable_data()[2 * Vocab::kCls] = 1;
    tok.mutable_data()[2 * Vocab::kCls + 1] = 2;
    seg.mutable_data()[0] = 0.5;
    pos.mutable_data()[1] = 1;
    Batch b;
    b.batch_size = 1;
    b.seq_len = 1;
    b.ids = {Vocab::kCls};
    b.segment_ids = {0};
    b.attention_mask = {1};
    CHECK(values(m.embedding_sum(b)) == std::vector<real>{1.5, 3});
  }
  SUBCASE("identical rows embed identically") {
    Model m = Model::initialized(small_config(), 3);
    const std::vector<Encoding> encs{make_encoding({7, 8}, 12), make_encoding({7, 8}, 12)};
    Rng rng(1);
    Tensor e = m.embed(Batch::from(encs), false, rng);
    const std::size_t row = e.numel() / 2;
    CHECK(std::equal(e.data().begin(), e.data().begin() + row, e.data().begin() + row));
  }
  SUBCASE("out of range ids and positions") {
    Model m(small_config());
    std::vector<Encoding> encs{make_encoding({29}, 12)};
    encs[0].ids[1] = 30;
    CHECK_THROWS_AS(m.embedding_sum(Batch::from(encs)), InputError);
    const std::vector<Encoding> longer{make_encoding(std::vector<std::int32_t>(16, 7), 20)};
    CHECK_THROWS_AS(m.embedding_sum(Batch::from(longer)), InputError);
  }
}

TEST_CASE("empty encoder stack is the identity") {
  ModelConfig c = small_config();
  c.num_layers = 0;
  Model m = Model::initialized(c, 1);
  Rng rng(2);
  const std::vector<Encoding> encs{make_encoding({5, 6, 7}, 12)};
  const Batch b = Batch::from(encs);
  Tensor e = m.embed(b, false, rng);
  CHECK(values(m.encode_sequence(e, b.attention_mask, false, rng)) == values(e));
}

TEST_CASE("zero query/key weights give uniform attention over valid keys") {
  ModelConfig c = small_config();
  c.num_heads = 1;
  c.num_layers = 1;
  Model m = Model::initialized(c, 4);
  for (const char* n : {"query.weight", "query.bias", "key.weight", "key.bias"}) {
    zero(m.parameter(std::string("encoder.layer.0.attention.") + n));
  }
  const std::vector<Encoding> encs{make_encoding({5, 6, 7}, 12), make_encoding({5}, 12)};
  const Batch b = Batch::from(encs, false);
  Rng rng(0);
  std::vector<Tensor> attention;
  m.encode_sequence(m.embed(b, false, rng), b.attention_mask, false, rng, &attention);
  REQUIRE(attention.size() == 1);
  const std::size_t T = b.seq_len;
  for (std::size_t row = 0; row < 2; ++row) {
    const std::size_t valid = encs[row].original_length;
    for (std::size_t q = 0; q < T; ++q) {
      for (std::size_t k = 0; k < T; ++k) {
        const real p = attention[0].at((row * T + q) * T + k);
        CHECK(p == doctest::Approx(k < valid ? 1.0 / valid : 0.0).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("pooling") {
  // hidden [1 x 3 x 2]: rows [1,4], [3,2], and a pad row.
  Tensor h = Tensor::from({1, 3, 2}, {1, 4, 3, 2, 100, -100});
  const std::vector<std::uint8_t> mask{1, 1, 0};
  CHECK(values(pool_cls(h)) == std::vector<real>{1, 4});
  CHECK(values(pool_rupool(h, mask)) == std::vector<real>{1, 4, 3, 4, 2, 3});

  Tensor same = Tensor::from({1, 2, 3}, {1, 2, 3, 1, 2, 3});
  const std::vector<std::uint8_t> both{1, 1};
  CHECK(values(pool_rupool(same, both)) == std::vector<real>{1, 2, 3, 1, 2, 3, 1, 2, 3});

  Tensor all_pad = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  const std::vector<std::uint8_t> none{0, 0};
  CHECK_THROWS_AS(pool_rupool(all_pad, none), InputError);

  Tensor three = Tensor::zeros({3, 5, 8});
  CHECK(pool_cls(three).shape() == Shape{3, 8});

  // Max/mean pooling alone ignore the order of valid positions.
  Tensor permuted = Tensor::from({1, 3, 2}, {3, 2, 1, 4, 7, 7});
  CHECK(values(ops::masked_max(permuted, mask)) == values(ops::masked_max(h, mask)));
  CHECK(values(ops::masked_mean(permuted, mask)) == values(ops::masked_mean(h, mask)));
}

TEST_CASE("classification layer") {
  Tensor pooled = Tensor::from({1, 2}, {1, 0});
  Tensor w = Tensor::from({2, 2}, {2, 0, 0, 3});
  Tensor bias = Tensor::zeros({2});
  CHECK(values(classify(pooled, w, bias)) == std::vector<real>{2, 0});
  CHECK_THROWS_AS(classify(pooled, Tensor::zeros({2, 3}), bias), DimensionError);

  ModelConfig c = small_config();
  c.num_classes = 265;
  Model m(c);  // all-zero weights
  const std::vector<Encoding> encs{make_encoding({5, 6}, 12)};
  Tensor logits = eval_logits(m, Batch::from(encs));
  CHECK(logits.shape() == Shape{1, 265});
  Tensor probs = ops::softmax(logits, 1);
  for (real p : probs.data()) CHECK(p == doctest::Approx(1.0 / 265).epsilon(1e-6));
}

TEST_CASE("dimension contracts of the two classifier heads") {
  const std::size_t H = 16, K = 5;
  Model rupool(small_config(HeadKind::rupool));
  Model cls(small_config(HeadKind::cls));
  CHECK(rupool.parameter("classifier.weight").shape() == Shape{K, 3 * H});
  CHECK(cls.parameter("classifier.weight").shape() == Shape{K, H});
  const std::vector<Encoding> encs{make_encoding({5, 6}, 12), make_encoding({7}, 12)};
  const Batch b = Batch::from(encs);
  Rng rng(0);
  CHECK(rupool.pool(rupool.encode(b, false, rng), b.attention_mask).shape() == Shape{2, 3 * H});
  CHECK(cls.pool(cls.encode(b, false, rng), b.attention_mask).shape() == Shape{2, H});
}

TEST_CASE("padding invariance") {
  for (HeadKind head : {HeadKind::cls, HeadKind::rupool}) {
    CAPTURE(to_string(head));
    Model m = Model::initialized(small_config(head), 17);
    std::vector<Encoding> encs{make_encoding({5, 6, 7, 8}, 12), make_encoding({9, 10}, 12)};
    const Tensor base = eval_logits(m, Batch::from(encs, false));
    // Trimming the padded tail changes nothing.
    CHECK(max_abs_diff(base, eval_logits(m, Batch::from(encs, true))) <= 1e-5);
    // Garbage in pad positions (mask stays 0) changes nothing.
    for (std::size_t i = encs[1].original_length; i < 12; ++i) {
      encs[1].ids[i] = static_cast<std::int32_t>(11 + i);
      encs[1].segment_ids[i] = 1;
    }
    CHECK(max_abs_diff(base, eval_logits(m, Batch::from(encs, false))) <= 1e-5);
  }
}

TEST_CASE("token order matters through positional embeddings") {
  Model m = Model::initialized(small_config(), 8);
  const std::vector<Encoding> a{make_encoding({5, 6, 7}, 12)};
  const std::vector<Encoding> b{make_encoding({7, 6, 5}, 12)};
  CHECK(max_abs_diff(eval_logits(m, Batch::from(a)), eval_logits(m, Batch::from(b))) > 1e-6);
}

TEST_CASE("eval forward is deterministic, training forward uses dropout") {
  Model m = Model::initialized(small_config(), 8);
  const std::vector<Encoding> encs{make_encoding({5, 6, 7}, 12)};
  const Batch b = Batch::from(encs);
  CHECK(values(eval_logits(m, b)) == values(eval_logits(m, b)));
  Rng r1(1), r2(2);
  CHECK(values(m.classifier_logits(b, true, r1)) != values(m.classifier_logits(b, true, r2)));
}

TEST_CASE("gradients reach every parameter") {
  for (HeadKind head : {HeadKind::cls, HeadKind::rupool}) {
    CAPTURE(to_string(head));
    ModelConfig c = small_config(head);
    c.dropout_rate = 0;
    Model m = Model::initialized(c, 21);
    // Segment 1 so the second token-type row is exercised too.
    std::vector<Encoding> encs{make_encoding({5, 6, 7}, 12), make_encoding({8, 9}, 12)};
    encs[1].segment_ids[1] = 1;
    Tape tape;
    Rng rng(0);
    Tensor loss;
    {
      TapeScope scope(tape);
      const std::vector<std::int32_t> targets{1, 3};
      loss = ops::bce_with_logits(m.classifier_logits(Batch::from(encs), true, rng), targets);
    }
    tape.backward(loss);
    for (const NamedTensor& p : m.parameters()) {
      CAPTURE(p.name);
      REQUIRE(p.tensor.has_grad());
      CHECK(std::any_of(p.tensor.grad().begin(), p.tensor.grad().end(), [](real g) { return g != 0; }));
    }
  }
}

TEST_CASE("mlm head") {
  ModelConfig c = small_config(HeadKind::mlm);
  c.vocab_size = 2000;
  Model m = Model::initialized(c, 5);
  const std::vector<Encoding> encs{make_encoding({5, 6, 7, 8, 9, 10}, 12)};
  const Batch b = Batch::from(encs);
  Rng rng(0);
  Tensor hidden = m.encode(b, false, rng);
  const std::vector<std::size_t> positions{1, 2, 3, 4, 5};
  CHECK(m.mlm_logits(hidden, positions).shape() == Shape{5, 2000});
  const std::vector<std::size_t> bad{b.seq_len};
  CHECK_THROWS_AS(m.mlm_logits(hidden, bad), InputError);

  SUBCASE("logits at a position depend only on that position") {
    Tensor perturbed = hidden.clone();
    const std::size_t H = c.hidden_size;
    for (std::size_t j = 0; j < H; ++j) perturbed.mutable_data()[2 * H + j] += real(0.5);
    Tensor before = m.mlm_logits(hidden, positions), after = m.mlm_logits(perturbed, positions);
    const std::size_t V = c.vocab_size;
    for (std::size_t row = 0; row < positions.size(); ++row) {
      bool changed = false;
      for (std::size_t v = 0; v < V; ++v) changed |= before.at(row * V + v) != after.at(row * V + v);
      CHECK(changed == (positions[row] == 2));
    }
  }
  SUBCASE("zero weights give a uniform distribution") {
    Model z(c);
    Tensor probs = ops::softmax(z.mlm_logits(z.encode(b, false, rng), positions), 1);
    for (real p : probs.data()) CHECK(p == doctest::Approx(1.0 / 2000).epsilon(1e-6));
  }
}

TEST_CASE("copy_encoder_from transfers embeddings and encoder only") {
  Model mlm = Model::initialized(small_config(HeadKind::mlm), 1);
  Model clf = Model::initialized(small_config(HeadKind::rupool), 2);
  const std::vector<real> head_before = values(clf.parameter("classifier.weight"));
  clf.copy_encoder_from(mlm);
  CHECK(values(clf.parameter("encoder.layer.1.output.weight")) == values(mlm.parameter("encoder.layer.1.output.weight")));
  CHECK(values(clf.parameter("classifier.weight")) == head_before);
}

TEST_CASE("checkpoint") {
  const auto dir = std::filesystem::temp_directory_path() / "poolbert_test_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.pbrt";
  Model m = Model::initialized(small_config(), 99);
  save_checkpoint(m, path);

  SUBCASE("round trip is bit exact") {
    Model loaded = load_checkpoint(path);
    CHECK(loaded.config() == m.config());
    REQUIRE(loaded.parameters().size() == m.parameters().size());
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
      CHECK(loaded.parameters()[i].name == m.parameters()[i].name);
      CHECK(values(loaded.parameters()[i].tensor) == values(m.parameters()[i].tensor));
    }
  }
  SUBCASE("truncation and bad magic") {
    const auto size = std::filesystem::file_size(path);
    for (auto cut : {std::uintmax_t{3}, std::uintmax_t{40}, size / 2, size - 1}) {
      std::filesystem::copy_file(path, dir / "cut.pbrt", std::filesystem::copy_options::overwrite_existing);
      std::filesystem::resize_file(dir / "cut.pbrt", cut);
      CHECK_THROWS_AS(load_checkpoint(dir / "cut.pbrt"), FormatError);
    }
    std::filesystem::copy_file(path, dir / "magic.pbrt", std::filesystem::copy_options::overwrite_existing);
    std::fstream g(dir / "magic.pbrt", std::ios::in | std::ios::out | std::ios::binary);
    g.seekp(0);
    g.write("XXXX", 4);
    g.close();
    CHECK_THROWS_AS(load_checkpoint(dir / "magic.pbrt"), FormatError);
  }
  SUBCASE("rupool weights do not load into a cls configuration") {
    CHECK_THROWS_AS(load_checkpoint_as(path, small_config(HeadKind::cls)), ShapeMismatchError);
  }
  std::filesystem::remove_all(dir);
}

}
