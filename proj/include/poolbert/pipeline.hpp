#pragma once

#include <cstddef>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "poolbert/data.hpp"
#include "poolbert/error.hpp"
#include "poolbert/manifest.hpp"
#include "poolbert/metrics.hpp"
#include "poolbert/model.hpp"
#include "poolbert/synthetic.hpp"
#include "poolbert/tokenizer.hpp"
#include "poolbert/training.hpp"

// Workflow commands shared by the CLI and `pipeline run`. Every command
// writes only the outputs it lists and describes its resolved parameters for
// the run manifest.
namespace poolbert {

using Parameters = std::map<std::string, std::string>;

/// Process exit code for an exception: 1 usage/parameter, 2 data or format,
/// 3 internal invariant.
int exit_code_for(const std::exception& error);

/// Lines of a text file, or assembled visit texts when the file ends in .jsonl.
std::vector<std::string> read_corpus(const std::filesystem::path& path);

struct SynthCommand {
  SyntheticSpec spec;
  std::filesystem::path out_dir;

  Parameters parameters() const;
  /// train.jsonl, test.jsonl, labels.txt (root codes of train), corpus.txt.
  std::vector<std::filesystem::path> outputs() const;
  void run() const;
};

struct TokenizerCommand {
  std::filesystem::path input;
  VocabTrainingOptions options;
  std::filesystem::path out;

  Parameters parameters() const;
  void run() const;
};

struct LabelsCommand {
  std::filesystem::path data;
  LabelSpaceOptions options;
  std::filesystem::path out;

  Parameters parameters() const;
  LabelSpace run() const;
};

struct PretrainCommand {
  std::filesystem::path data;
  std::filesystem::path vocab;
  ModelConfig config;  // vocab_size is replaced by the vocabulary's size
  TrainHParams hp;
  std::filesystem::path out;
  std::filesystem::path history;

  Parameters parameters() const;
  PretrainResult run(const HistorySink& sink = {}) const;
};

struct FinetuneCommand {
  std::filesystem::path data;
  std::optional<std::filesystem::path> val;
  std::filesystem::path labels;
  std::filesystem::path vocab;
  std::optional<std::filesystem::path> init;  // fresh initialisation when empty
  ModelConfig config;  // used for a fresh start; with init, the init's encoder config
  HeadKind head = HeadKind::rupool;
  TrainHParams hp;
  std::filesystem::path out;
  std::filesystem::path history;

  Parameters parameters() const;
  FinetuneResult run(const HistorySink& sink = {}) const;
};

struct EvaluateCommand {
  std::filesystem::path model;
  std::filesystem::path vocab;
  std::filesystem::path labels;
  std::filesystem::path data;
  std::filesystem::path out;  // metrics JSON
  std::optional<std::filesystem::path> by_length;  // CSV
  std::optional<std::filesystem::path> predictions;  // JSONL, top-3 codes per visit
  std::size_t length_threshold = 20;

  Parameters parameters() const;
  std::vector<std::filesystem::path> outputs() const;
  MetricsReport run() const;
};

struct RankedCode {
  std::string code;
  double probability = 0.0;
};

struct Prediction {
  std::vector<RankedCode> codes;
  std::size_t token_count = 0;  // non-special tokens before truncation
  bool low_confidence = false;  // token_count < min_tokens
};

/// Eval-mode top-n codes with softmax probabilities. ParameterError unless
/// 1 <= top_n <= K.
std::vector<Prediction> predict_texts(const Model& model, const Vocab& vocab, const LabelSpace& labels,
                                      std::span<const std::string> texts, std::size_t top_n,
                                      std::size_t min_tokens = 20);

nlohmann::ordered_json prediction_to_json(const Prediction& prediction);

/// Merges an `evaluate --by-length` CSV into a (bin, count, hit_at_3) table.
/// Values are copied verbatim. ParseError with the line number on bad input.
std::string merge_length_table(std::string_view csv, std::string_view source = "<csv>");
/// Bar chart of counts with the Hit@3 curve, from a merged table.
std::string length_table_svg(std::string_view table);

// Flat key=value pipeline configuration. Relative paths resolve against the
// config file's directory.
struct PipelineConfig {
  std::filesystem::path out_dir;
  std::uint64_t seed = 42;
  SyntheticSpec synth;
  double val_fraction = 0.1;
  LabelSpaceOptions labels;
  VocabTrainingOptions tokenizer;
  ModelConfig model;
  bool pretrain_enabled = true;
  TrainHParams pretrain;
  HeadKind head = HeadKind::rupool;
  std::optional<std::filesystem::path> finetune_init;  // external checkpoint
  TrainHParams finetune;
  std::size_t length_threshold = 20;
  Parameters resolved;  // every key with its effective value

  static PipelineConfig parse(const KeyValues& values, const std::filesystem::path& base_dir);
  static PipelineConfig load(const std::filesystem::path& path);
};

enum class StageStatus { ran, skipped };

struct StageOutcome {
  std::string name;
  StageStatus status = StageStatus::ran;
  double seconds = 0.0;
};

struct PipelineResult {
  std::vector<StageOutcome> stages;
  std::filesystem::path metrics;
  MetricsReport report;
};

/// A stage failed; what() names the stage and the cause.
class PipelineError : public Error {
 public:
  PipelineError(std::string stage, const std::string& cause, int exit_code)
      : Error("stage " + stage + " failed: " + cause), stage_(std::move(stage)), exit_code_(exit_code) {}
  const std::string& stage() const { return stage_; }
  int exit_code() const { return exit_code_; }

 private:
  std::string stage_;
  int exit_code_;
};

/// synth -> tokenizer -> pretrain -> finetune -> evaluate. A stage is skipped
/// when its record in <out>/.stages matches the current input key and every
/// output still has its recorded hash. On failure the stage record and all
/// later ones are marked stale and PipelineError is thrown.
PipelineResult run_pipeline(const PipelineConfig& config, bool force = false, std::ostream* log = nullptr);

}  // namespace poolbert
