#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace poolbert {

struct ScoredPrediction {
  std::string visit_id;
  std::vector<double> scores;  // one per label-space index
  std::size_t truth_index = 0;
  std::size_t input_token_length = 0;  // non-special tokens before truncation
};

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct F1Result {
  double macro = 0.0;           // mean over all K classes
  double macro_observed = 0.0;  // mean over classes present in truths or predictions
  double weighted = 0.0;        // support-weighted mean
  std::vector<ClassScores> per_class;
};

/// Per-class precision/recall/F1 with 0/0 = 0. InputError on empty or
/// mismatched input, or a label >= num_classes.
F1Result f1_scores(std::span<const std::size_t> predicted, std::span<const std::size_t> truths,
                   std::size_t num_classes);

/// 1 + number of classes scoring strictly higher than the truth, so ties
/// resolve in the truth's favour.
std::size_t rank_of_truth(std::span<const double> scores, std::size_t truth_index);

double mrr(std::span<const ScoredPrediction> predictions);
/// Fraction with rank <= k. k = 0 is a ParameterError.
double hit_at_k(std::span<const ScoredPrediction> predictions, std::size_t k);

/// Index of the highest score; the lowest index wins ties.
std::size_t argmax(std::span<const double> scores);
/// Indices of the n highest scores, best first, ties by lower index.
std::vector<std::size_t> top_n(std::span<const double> scores, std::size_t n);

struct LengthBin {
  std::size_t begin = 0;
  std::optional<std::size_t> end;  // exclusive; none for the overflow bin
  std::size_t count = 0;
  std::optional<double> hit_at_3;  // none for an empty bin
};

struct LengthReport {
  std::vector<LengthBin> bins;
  std::size_t threshold = 20;
  double fraction_at_least_threshold = 0.0;
};

/// 0, 10, ..., 200.
std::vector<std::size_t> default_length_edges();

/// Half-open bins [e_i, e_i+1) plus an overflow bin [e_last, inf) and, when
/// e_0 > 0, an underflow bin [0, e_0). Edges must be strictly increasing.
LengthReport metrics_by_length(std::span<const ScoredPrediction> predictions, std::span<const std::size_t> edges,
                               std::size_t threshold = 20);

std::string length_report_csv(const LengthReport& report);

struct MetricsReport {
  std::size_t samples = 0;
  std::size_t num_classes = 0;
  F1Result f1;
  double mrr = 0.0;
  double hit_at_1 = 0.0, hit_at_3 = 0.0, hit_at_5 = 0.0, hit_at_10 = 0.0;
  std::optional<LengthReport> by_length;
};

MetricsReport compute_metrics(std::span<const ScoredPrediction> predictions, std::size_t num_classes);

/// `class_names` labels the per-class table; it may be empty.
nlohmann::ordered_json metrics_to_json(const MetricsReport& report, std::span<const std::string> class_names);

}  // namespace poolbert
