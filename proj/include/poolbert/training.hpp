#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "poolbert/data.hpp"
#include "poolbert/key_value.hpp"
#include "poolbert/metrics.hpp"
#include "poolbert/model.hpp"
#include "poolbert/tokenizer.hpp"

namespace poolbert {

enum class LossKind { bce, softmax_ce };
enum class LrSchedule { constant, linear_warmup_decay };

std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view text);  // "bce", "softmax-ce" or "softmax_ce"
std::string_view to_string(LrSchedule schedule);
LrSchedule parse_lr_schedule(std::string_view text);

struct TrainHParams {
  std::size_t batch_size = 16;
  std::size_t epochs = 5;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::optional<double> dropout_rate;  // overrides the model config when set
  LossKind loss_kind = LossKind::bce;
  double mask_rate = 0.15;
  std::uint64_t seed = 42;
  LrSchedule lr_schedule = LrSchedule::constant;
  double warmup_fraction = 0.1;  // linear_warmup_decay only

  /// Fine-tuning setup reported for full-scale runs: 5 epochs, batch 128,
  /// lr 3e-5, BCE.
  static TrainHParams full_scale();

  /// Throws ParameterError on a violated invariant.
  void validate() const;

  /// Flat key=value form; `prefix` is prepended to every key.
  void write(KeyValues& out, const std::string& prefix = "") const;
  /// Keys absent from `in` keep the defaults of `base`.
  static TrainHParams read(const KeyValues& in, const std::string& prefix, const TrainHParams& base);
  static TrainHParams read(const KeyValues& in, const std::string& prefix = "");
};

// Per-parameter Adam moments plus the shared step counter.
struct OptimizerState {
  std::vector<std::vector<real>> first_moment;
  std::vector<std::vector<real>> second_moment;
  std::uint64_t step = 0;

  static OptimizerState for_parameters(std::span<const NamedTensor> params);
};

/// Layer-norm gains/offsets and biases are exempt from weight decay.
bool decays(std::string_view parameter_name);

/// Learning rate for 0-based `step` out of `total_steps`.
double learning_rate_at(const TrainHParams& hp, std::uint64_t step, std::uint64_t total_steps);

/// One AdamW update from the gradients stored on `params`:
///   m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2
///   p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
/// A parameter without a gradient buffer is treated as having zero gradient.
void adamw_step(std::span<const NamedTensor> params, OptimizerState& state, const TrainHParams& hp, double lr);

struct MaskedBatch {
  std::vector<std::int32_t> ids;         // input ids after masking
  std::vector<std::size_t> positions;    // flat b * T + t of every target
  std::vector<std::int32_t> target_ids;  // original ids at `positions`
};

/// BERT-style masking over a [B x T] id buffer. Each non-special token is
/// selected with probability mask_rate; a selected token becomes [MASK]
/// (80%), a uniformly random non-special id (10%) or stays unchanged (10%).
MaskedBatch mask_batch(std::span<const std::int32_t> ids, std::size_t vocab_size, double mask_rate, Rng& rng);

struct HistoryEntry {
  std::size_t epoch = 0;  // 1-based; 0 is the state before training
  std::string split;
  std::string metric;
  double value = 0.0;
};

std::string history_to_jsonl(std::span<const HistoryEntry> history);

using HistorySink = std::function<void(const HistoryEntry&)>;

struct PretrainResult {
  Model model;
  std::vector<double> epoch_losses;
  std::vector<HistoryEntry> history;
};

/// Masked-LM pretraining on free text. config.head_kind must be mlm.
/// InputError on an empty corpus.
PretrainResult pretrain_mlm(std::span<const std::string> texts, const Vocab& vocab, const ModelConfig& config,
                            const TrainHParams& hp, const HistorySink& sink = {});

/// Top-1 accuracy of the MLM head at masked positions (eval mode).
double mlm_recovery_accuracy(const Model& model, std::span<const std::string> texts, const Vocab& vocab,
                             double mask_rate, std::uint64_t seed);

struct FinetuneResult {
  Model model;                      // best validation Hit@3
  std::size_t best_epoch = 0;
  std::vector<double> epoch_losses;  // mean training loss per epoch
  std::vector<HistoryEntry> history;
};

/// Supervised training of a cls or rupool classifier over `labels`.
/// config.num_classes is taken from the label space. With `init`, the
/// embeddings and encoder start from that model; otherwise everything is
/// initialised from hp.seed. The returned model is the epoch with the best
/// validation Hit@3 (ties: Hit@1, then MRR, then the later epoch); without a
/// validation set it is the final epoch. InputError names the first record
/// whose code is outside the label space.
FinetuneResult finetune(std::span<const VisitRecord> train, std::span<const VisitRecord> val,
                        const LabelSpace& labels, const Vocab& vocab, ModelConfig config, const Model* init,
                        const TrainHParams& hp, const HistorySink& sink = {});

/// Eval-mode softmax probabilities [n x K] for pre-encoded inputs.
std::vector<std::vector<double>> predict_probabilities(const Model& model, std::span<const Encoding> encodings,
                                                       std::size_t batch_size = 64);

/// Encodes and scores labelled records. InputError for a code outside `labels`.
std::vector<ScoredPrediction> score_records(const Model& model, std::span<const VisitRecord> records,
                                            const LabelSpace& labels, const Vocab& vocab,
                                            std::size_t batch_size = 64);

}  // namespace poolbert
