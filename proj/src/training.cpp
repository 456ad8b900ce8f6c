#include "poolbert/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "json.hpp"

#include "poolbert/error.hpp"
#include "poolbert/ops.hpp"

namespace poolbert {

std::string_view to_string(LossKind kind) { return kind == LossKind::bce ? "bce" : "softmax-ce"; }

LossKind parse_loss_kind(std::string_view text) {
  if (text == "bce") return LossKind::bce;
  if (text == "softmax-ce" || text == "softmax_ce") return LossKind::softmax_ce;
  throw ParseError("unknown loss '" + std::string(text) + "' (expected bce or softmax-ce)");
}

std::string_view to_string(LrSchedule schedule) {
  return schedule == LrSchedule::constant ? "constant" : "linear_warmup_decay";
}

LrSchedule parse_lr_schedule(std::string_view text) {
  if (text == "constant") return LrSchedule::constant;
  if (text == "linear_warmup_decay") return LrSchedule::linear_warmup_decay;
  throw ParseError("unknown lr schedule '" + std::string(text) + "' (expected constant or linear_warmup_decay)");
}

TrainHParams TrainHParams::full_scale() {
  TrainHParams hp;
  hp.epochs = 5;
  hp.batch_size = 128;
  hp.learning_rate = 3e-5;
  hp.loss_kind = LossKind::bce;
  return hp;
}

void TrainHParams::validate() const {
  auto fail = [](const std::string& msg) { throw ParameterError("training parameters: " + msg); };
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail("adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (dropout_rate && !(*dropout_rate >= 0.0 && *dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
  if (!(mask_rate >= 0.0 && mask_rate < 1.0)) fail("mask_rate must be in [0, 1)");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) fail("warmup_fraction must be in [0, 1]");
}

void TrainHParams::write(KeyValues& out, const std::string& prefix) const {
  out.set(prefix + "batch_size", std::to_string(batch_size));
  out.set(prefix + "epochs", std::to_string(epochs));
  out.set(prefix + "learning_rate", format_double(learning_rate));
  out.set(prefix + "weight_decay", format_double(weight_decay));
  out.set(prefix + "adam_beta1", format_double(adam_beta1));
  out.set(prefix + "adam_beta2", format_double(adam_beta2));
  out.set(prefix + "adam_eps", format_double(adam_eps));
  if (dropout_rate) out.set(prefix + "dropout_rate", format_double(*dropout_rate));
  out.set(prefix + "loss", std::string(to_string(loss_kind)));
  out.set(prefix + "mask_rate", format_double(mask_rate));
  out.set(prefix + "seed", std::to_string(seed));
  out.set(prefix + "lr_schedule", std::string(to_string(lr_schedule)));
  out.set(prefix + "warmup_fraction", format_double(warmup_fraction));
}

TrainHParams TrainHParams::read(const KeyValues& in, const std::string& prefix, const TrainHParams& base) {
  TrainHParams hp = base;
  hp.batch_size = in.get_size(prefix + "batch_size", hp.batch_size);
  hp.epochs = in.get_size(prefix + "epochs", hp.epochs);
  hp.learning_rate = in.get_double(prefix + "learning_rate", hp.learning_rate);
  hp.weight_decay = in.get_double(prefix + "weight_decay", hp.weight_decay);
  hp.adam_beta1 = in.get_double(prefix + "adam_beta1", hp.adam_beta1);
  hp.adam_beta2 = in.get_double(prefix + "adam_beta2", hp.adam_beta2);
  hp.adam_eps = in.get_double(prefix + "adam_eps", hp.adam_eps);
  if (in.contains(prefix + "dropout_rate")) hp.dropout_rate = in.get_double(prefix + "dropout_rate", 0.0);
  hp.loss_kind = parse_loss_kind(in.get_string(prefix + "loss", std::string(to_string(hp.loss_kind))));
  hp.mask_rate = in.get_double(prefix + "mask_rate", hp.mask_rate);
  hp.seed = in.get_u64(prefix + "seed", hp.seed);
  hp.lr_schedule = parse_lr_schedule(in.get_string(prefix + "lr_schedule", std::string(to_string(hp.lr_schedule))));
  hp.warmup_fraction = in.get_double(prefix + "warmup_fraction", hp.warmup_fraction);
  hp.validate();
  return hp;
}

TrainHParams TrainHParams::read(const KeyValues& in, const std::string& prefix) {
  return read(in, prefix, TrainHParams{});
}

OptimizerState OptimizerState::for_parameters(std::span<const NamedTensor> params) {
  OptimizerState s;
  for (const NamedTensor& p : params) {
    s.first_moment.emplace_back(p.tensor.numel(), real(0));
    s.second_moment.emplace_back(p.tensor.numel(), real(0));
  }
  return s;
}

bool decays(std::string_view name) {
  return !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"));
}

double learning_rate_at(const TrainHParams& hp, std::uint64_t step, std::uint64_t total_steps) {
  if (hp.lr_schedule == LrSchedule::constant || total_steps == 0) return hp.learning_rate;
  const auto warmup = static_cast<std::uint64_t>(std::ceil(hp.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return hp.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total_steps <= warmup) return hp.learning_rate;
  const double remaining = static_cast<double>(total_steps - std::min(step, total_steps));
  return hp.learning_rate * remaining / static_cast<double>(total_steps - warmup);
}

void adamw_step(std::span<const NamedTensor> params, OptimizerState& state, const TrainHParams& hp, double lr) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw ContractError("optimizer state does not match the parameter list");
  }
  ++state.step;
  const double b1 = hp.adam_beta1, b2 = hp.adam_beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor tensor = params[i].tensor;
    std::vector<real>& m = state.first_moment[i];
    std::vector<real>& v = state.second_moment[i];
    if (m.size() != tensor.numel() || v.size() != tensor.numel()) {
      throw ContractError("moment buffer size mismatch for " + params[i].name);
    }
    const double wd = decays(params[i].name) ? hp.weight_decay : 0.0;
    std::span<real> w = tensor.mutable_data();
    const bool has_grad = tensor.has_grad();
    std::span<const real> g = has_grad ? tensor.grad() : std::span<const real>{};
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has_grad ? static_cast<double>(g[j]) : 0.0;
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<real>(mj);
      v[j] = static_cast<real>(vj);
      const double update = (mj / correction1) / (std::sqrt(vj / correction2) + hp.adam_eps) + wd * w[j];
      w[j] = static_cast<real>(w[j] - lr * update);
    }
  }
}

MaskedBatch mask_batch(std::span<const std::int32_t> ids, std::size_t vocab_size, double mask_rate, Rng& rng) {
  if (vocab_size <= Vocab::kNumSpecial) throw ParameterError("mask_batch: vocabulary has no ordinary tokens");
  MaskedBatch out;
  out.ids.assign(ids.begin(), ids.end());
  if (mask_rate <= 0.0) return out;
  const std::uint64_t ordinary = vocab_size - Vocab::kNumSpecial;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (Vocab::is_special(ids[i]) || !rng.bernoulli(mask_rate)) continue;
    out.positions.push_back(i);
    out.target_ids.push_back(ids[i]);
    const double u = rng.uniform();
    if (u < 0.8) {
      out.ids[i] = Vocab::kMask;
    } else if (u < 0.9) {
      out.ids[i] = static_cast<std::int32_t>(Vocab::kNumSpecial + rng.uniform_int(ordinary));
    }
  }
  return out;
}

std::string history_to_jsonl(std::span<const HistoryEntry> history) {
  std::string out;
  for (const HistoryEntry& h : history) {
    nlohmann::ordered_json j;
    j["epoch"] = h.epoch;
    j["split"] = h.split;
    j["metric"] = h.metric;
    j["value"] = h.value;
    out += j.dump() + "\n";
  }
  return out;
}

namespace {

std::vector<Encoding> encode_all(std::span<const std::string> texts, const Vocab& vocab, std::size_t max_len) {
  std::vector<Encoding> out;
  out.reserve(texts.size());
  for (const std::string& t : texts) out.push_back(encode(t, vocab, max_len));
  return out;
}

void check_vocab_fits(const Vocab& vocab, const ModelConfig& config) {
  if (vocab.size() > config.vocab_size) {
    throw ParameterError("vocabulary has " + std::to_string(vocab.size()) + " tokens but the model config allows " +
                         std::to_string(config.vocab_size));
  }
}

void zero_grads(const Model& model) {
  for (const NamedTensor& p : model.parameters()) {
    Tensor t = p.tensor;
    t.clear_grad();
  }
}

std::uint64_t total_steps(std::size_t n, const TrainHParams& hp) {
  return static_cast<std::uint64_t>((n + hp.batch_size - 1) / hp.batch_size) * hp.epochs;
}

void emit(std::vector<HistoryEntry>& history, const HistorySink& sink, HistoryEntry entry) {
  if (sink) sink(entry);
  history.push_back(std::move(entry));
}

std::vector<std::int32_t> labels_for(std::span<const VisitRecord> records, const LabelSpace& labels) {
  std::vector<std::int32_t> out;
  out.reserve(records.size());
  for (const VisitRecord& r : records) {
    const auto label = labels.label_of(r.icd_code);
    if (!label) {
      throw InputError("record " + r.visit_id + ": code " + r.icd_code + " is outside the label space");
    }
    out.push_back(static_cast<std::int32_t>(*label));
  }
  return out;
}

std::vector<Encoding> encode_records(std::span<const VisitRecord> records, const Vocab& vocab, std::size_t max_len) {
  std::vector<Encoding> out;
  out.reserve(records.size());
  for (const VisitRecord& r : records) out.push_back(encode(assemble_text(r), vocab, max_len));
  return out;
}

}  // namespace

PretrainResult pretrain_mlm(std::span<const std::string> texts, const Vocab& vocab, const ModelConfig& base,
                            const TrainHParams& hp, const HistorySink& sink) {
  if (base.head_kind != HeadKind::mlm) throw ParameterError("pretraining requires head_kind = mlm");
  if (texts.empty()) throw InputError("pretraining corpus is empty");
  hp.validate();
  ModelConfig config = base;
  if (hp.dropout_rate) config.dropout_rate = *hp.dropout_rate;
  check_vocab_fits(vocab, config);

  PretrainResult result{Model::initialized(config, hp.seed), {}, {}};
  Model& model = result.model;
  const std::vector<Encoding> encodings = encode_all(texts, vocab, config.max_seq_len);
  OptimizerState state = OptimizerState::for_parameters(model.parameters());
  const std::uint64_t steps = total_steps(encodings.size(), hp);
  Rng rng(hp.seed ^ 0x6d6c6dULL);

  std::vector<std::size_t> order(encodings.size());
  for (std::size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
    Rng epoch_rng = rng.fork(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    epoch_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t targets = 0;
    for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
      const std::size_t end = std::min(order.size(), start + hp.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      Batch batch = Batch::gather(encodings, rows);
      MaskedBatch masked = mask_batch(batch.ids, vocab.size(), hp.mask_rate, epoch_rng);
      if (masked.positions.empty()) continue;
      batch.ids = std::move(masked.ids);
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        const Tensor hidden = model.encode(batch, true, epoch_rng);
        loss = ops::softmax_cross_entropy(model.mlm_logits(hidden, masked.positions), masked.target_ids);
      }
      tape.backward(loss);
      adamw_step(model.parameters(), state, hp, learning_rate_at(hp, state.step, steps));
      zero_grads(model);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(masked.positions.size());
      targets += masked.positions.size();
    }
    const double epoch_loss = targets ? loss_sum / static_cast<double>(targets) : 0.0;
    result.epoch_losses.push_back(epoch_loss);
    emit(result.history, sink, {epoch, "train", "mlm_loss", epoch_loss});
  }
  return result;
}

double mlm_recovery_accuracy(const Model& model, std::span<const std::string> texts, const Vocab& vocab,
                             double mask_rate, std::uint64_t seed) {
  if (model.config().head_kind != HeadKind::mlm) throw ParameterError("recovery accuracy needs an mlm model");
  const std::vector<Encoding> encodings = encode_all(texts, vocab, model.config().max_seq_len);
  Rng rng(seed);
  std::size_t correct = 0, total = 0;
  constexpr std::size_t kBatch = 32;
  for (std::size_t start = 0; start < encodings.size(); start += kBatch) {
    std::vector<std::size_t> rows(std::min(kBatch, encodings.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    Batch batch = Batch::gather(encodings, rows);
    MaskedBatch masked = mask_batch(batch.ids, vocab.size(), mask_rate, rng);
    if (masked.positions.empty()) continue;
    batch.ids = std::move(masked.ids);
    const Tensor logits = model.mlm_logits(model.encode(batch, false, rng), masked.positions);
    const std::size_t V = logits.dim(1);
    for (std::size_t p = 0; p < masked.positions.size(); ++p) {
      std::span<const real> row = logits.data().subspan(p * V, V);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == static_cast<std::size_t>(masked.target_ids[p]);
    }
    total += masked.positions.size();
  }
  if (total == 0) throw InputError("no maskable tokens in the evaluation texts");
  return static_cast<double>(correct) / static_cast<double>(total);
}

std::vector<std::vector<double>> predict_probabilities(const Model& model, std::span<const Encoding> encodings,
                                                       std::size_t batch_size) {
  if (batch_size == 0) throw ParameterError("batch_size must be >= 1");
  std::vector<std::vector<double>> out;
  out.reserve(encodings.size());
  Rng unused(0);
  for (std::size_t start = 0; start < encodings.size(); start += batch_size) {
    std::vector<std::size_t> rows(std::min(batch_size, encodings.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const Tensor probs = ops::softmax(model.classifier_logits(Batch::gather(encodings, rows), false, unused), 1);
    const std::size_t K = probs.dim(1);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::span<const real> row = probs.data().subspan(r * K, K);
      out.emplace_back(row.begin(), row.end());
    }
  }
  return out;
}

std::vector<ScoredPrediction> score_records(const Model& model, std::span<const VisitRecord> records,
                                            const LabelSpace& labels, const Vocab& vocab, std::size_t batch_size) {
  const std::vector<std::int32_t> truth = labels_for(records, labels);
  const std::vector<Encoding> encodings = encode_records(records, vocab, model.config().max_seq_len);
  std::vector<std::vector<double>> probs = predict_probabilities(model, encodings, batch_size);
  std::vector<ScoredPrediction> out(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    out[i].visit_id = records[i].visit_id;
    out[i].scores = std::move(probs[i]);
    out[i].truth_index = static_cast<std::size_t>(truth[i]);
    out[i].input_token_length = encodings[i].word_pieces;
  }
  return out;
}

FinetuneResult finetune(std::span<const VisitRecord> train, std::span<const VisitRecord> val,
                        const LabelSpace& labels, const Vocab& vocab, ModelConfig config, const Model* init,
                        const TrainHParams& hp, const HistorySink& sink) {
  if (config.head_kind == HeadKind::mlm) throw ParameterError("fine-tuning needs a cls or rupool head");
  if (train.empty()) throw InputError("fine-tuning set is empty");
  hp.validate();
  config.num_classes = labels.size();
  if (hp.dropout_rate) config.dropout_rate = *hp.dropout_rate;
  config.validate();
  check_vocab_fits(vocab, config);

  const std::vector<std::int32_t> train_labels = labels_for(train, labels);
  labels_for(val, labels);  // fail early on a bad validation record
  const std::vector<Encoding> encodings = encode_records(train, vocab, config.max_seq_len);

  Model model = Model::initialized(config, hp.seed);
  if (init) model.copy_encoder_from(*init);
  FinetuneResult result{model.clone(), 0, {}, {}};
  OptimizerState state = OptimizerState::for_parameters(model.parameters());
  const std::uint64_t steps = total_steps(encodings.size(), hp);
  Rng rng(hp.seed ^ 0xf17e7ULL);

  std::tuple<double, double, double> best{-1.0, -1.0, -1.0};
  std::vector<std::size_t> order(encodings.size());
  std::vector<std::int32_t> targets;
  for (std::size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
    Rng epoch_rng = rng.fork(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    epoch_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
      const std::size_t end = std::min(order.size(), start + hp.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const Batch batch = Batch::gather(encodings, rows);
      targets.clear();
      for (std::size_t r : rows) targets.push_back(train_labels[r]);
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        const Tensor logits = model.classifier_logits(batch, true, epoch_rng);
        loss = hp.loss_kind == LossKind::bce ? ops::bce_with_logits(logits, targets)
                                             : ops::softmax_cross_entropy(logits, targets);
      }
      tape.backward(loss);
      adamw_step(model.parameters(), state, hp, learning_rate_at(hp, state.step, steps));
      zero_grads(model);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(rows.size());
    }
    const double epoch_loss = loss_sum / static_cast<double>(order.size());
    result.epoch_losses.push_back(epoch_loss);
    emit(result.history, sink, {epoch, "train", "loss", epoch_loss});

    std::tuple<double, double, double> score{0.0, 0.0, 0.0};
    if (!val.empty()) {
      const MetricsReport m = compute_metrics(score_records(model, val, labels, vocab), labels.size());
      emit(result.history, sink, {epoch, "val", "hit@1", m.hit_at_1});
      emit(result.history, sink, {epoch, "val", "hit@3", m.hit_at_3});
      emit(result.history, sink, {epoch, "val", "hit@5", m.hit_at_5});
      emit(result.history, sink, {epoch, "val", "hit@10", m.hit_at_10});
      emit(result.history, sink, {epoch, "val", "mrr", m.mrr});
      emit(result.history, sink, {epoch, "val", "f1_macro", m.f1.macro});
      emit(result.history, sink, {epoch, "val", "f1_weighted", m.f1.weighted});
      score = {m.hit_at_3, m.hit_at_1, m.mrr};
    }
    if (score >= best) {
      best = score;
      result.best_epoch = epoch;
      result.model = model.clone();
    }
  }
  return result;
}

}  // namespace poolbert
