#include "poolbert/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "poolbert/error.hpp"
#include "poolbert/key_value.hpp"

namespace poolbert {

F1Result f1_scores(std::span<const std::size_t> predicted, std::span<const std::size_t> truths,
                   std::size_t num_classes) {
  if (truths.empty()) throw InputError("f1_scores: no samples");
  if (predicted.size() != truths.size()) throw InputError("f1_scores: predictions and truths differ in length");
  std::vector<std::size_t> tp(num_classes, 0), pred_count(num_classes, 0), support(num_classes, 0);
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (predicted[i] >= num_classes || truths[i] >= num_classes) {
      throw InputError("f1_scores: label outside [0, " + std::to_string(num_classes) + ")");
    }
    ++pred_count[predicted[i]];
    ++support[truths[i]];
    if (predicted[i] == truths[i]) ++tp[truths[i]];
  }
  F1Result r;
  r.per_class.resize(num_classes);
  double macro_sum = 0.0, weighted_sum = 0.0;
  std::size_t observed = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    ClassScores& s = r.per_class[c];
    s.support = support[c];
    s.precision = pred_count[c] ? static_cast<double>(tp[c]) / static_cast<double>(pred_count[c]) : 0.0;
    s.recall = support[c] ? static_cast<double>(tp[c]) / static_cast<double>(support[c]) : 0.0;
    // 2PR/(P+R) in its integer form, so the value is correctly rounded.
    const std::size_t denom = pred_count[c] + support[c];
    s.f1 = denom ? static_cast<double>(2 * tp[c]) / static_cast<double>(denom) : 0.0;
    macro_sum += s.f1;
    weighted_sum += s.f1 * static_cast<double>(support[c]);
    if (support[c] || pred_count[c]) ++observed;
  }
  r.macro = macro_sum / static_cast<double>(num_classes);
  r.macro_observed = observed ? macro_sum / static_cast<double>(observed) : 0.0;
  r.weighted = weighted_sum / static_cast<double>(truths.size());
  return r;
}

std::size_t rank_of_truth(std::span<const double> scores, std::size_t truth_index) {
  if (truth_index >= scores.size()) throw InputError("truth index outside the score vector");
  const double t = scores[truth_index];
  return 1 + static_cast<std::size_t>(std::count_if(scores.begin(), scores.end(), [t](double s) { return s > t; }));
}

double mrr(std::span<const ScoredPrediction> predictions) {
  if (predictions.empty()) throw InputError("mrr: no samples");
  double sum = 0.0;
  for (const ScoredPrediction& p : predictions) sum += 1.0 / static_cast<double>(rank_of_truth(p.scores, p.truth_index));
  return sum / static_cast<double>(predictions.size());
}

double hit_at_k(std::span<const ScoredPrediction> predictions, std::size_t k) {
  if (k == 0) throw ParameterError("hit_at_k: k must be >= 1");
  if (predictions.empty()) throw InputError("hit_at_k: no samples");
  std::size_t hits = 0;
  for (const ScoredPrediction& p : predictions) hits += rank_of_truth(p.scores, p.truth_index) <= k;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

std::size_t argmax(std::span<const double> scores) {
  if (scores.empty()) throw InputError("argmax of an empty score vector");
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

std::vector<std::size_t> top_n(std::span<const double> scores, std::size_t n) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  n = std::min(n, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  order.resize(n);
  return order;
}

std::vector<std::size_t> default_length_edges() {
  std::vector<std::size_t> edges;
  for (std::size_t e = 0; e <= 200; e += 10) edges.push_back(e);
  return edges;
}

LengthReport metrics_by_length(std::span<const ScoredPrediction> predictions, std::span<const std::size_t> edges,
                               std::size_t threshold) {
  if (edges.empty()) throw ParameterError("metrics_by_length: need at least one bin edge");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (edges[i] <= edges[i - 1]) throw ParameterError("metrics_by_length: bin edges must be strictly increasing");
  }
  LengthReport report;
  report.threshold = threshold;
  if (edges.front() > 0) report.bins.push_back({0, edges.front(), 0, std::nullopt});
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) report.bins.push_back({edges[i], edges[i + 1], 0, std::nullopt});
  report.bins.push_back({edges.back(), std::nullopt, 0, std::nullopt});

  std::vector<std::size_t> hits(report.bins.size(), 0);
  std::size_t long_enough = 0;
  for (const ScoredPrediction& p : predictions) {
    const std::size_t len = p.input_token_length;
    std::size_t b = 0;
    while (report.bins[b].end && len >= *report.bins[b].end) ++b;
    ++report.bins[b].count;
    hits[b] += rank_of_truth(p.scores, p.truth_index) <= 3;
    long_enough += len >= threshold;
  }
  for (std::size_t b = 0; b < report.bins.size(); ++b) {
    if (report.bins[b].count) {
      report.bins[b].hit_at_3 = static_cast<double>(hits[b]) / static_cast<double>(report.bins[b].count);
    }
  }
  report.fraction_at_least_threshold =
      predictions.empty() ? 0.0 : static_cast<double>(long_enough) / static_cast<double>(predictions.size());
  return report;
}

std::string length_report_csv(const LengthReport& report) {
  std::string out = "bin_start,bin_end,count,hit_at_3\n";
  for (const LengthBin& b : report.bins) {
    out += std::to_string(b.begin) + "," + (b.end ? std::to_string(*b.end) : std::string("inf")) + "," +
           std::to_string(b.count) + "," + (b.hit_at_3 ? format_double(*b.hit_at_3) : std::string()) + "\n";
  }
  return out;
}

MetricsReport compute_metrics(std::span<const ScoredPrediction> predictions, std::size_t num_classes) {
  MetricsReport r;
  r.samples = predictions.size();
  r.num_classes = num_classes;
  std::vector<std::size_t> predicted, truths;
  for (const ScoredPrediction& p : predictions) {
    if (p.scores.size() != num_classes) throw InputError("prediction " + p.visit_id + " has the wrong score count");
    predicted.push_back(argmax(p.scores));
    truths.push_back(p.truth_index);
  }
  r.f1 = f1_scores(predicted, truths, num_classes);
  r.mrr = mrr(predictions);
  r.hit_at_1 = hit_at_k(predictions, 1);
  r.hit_at_3 = hit_at_k(predictions, 3);
  r.hit_at_5 = hit_at_k(predictions, 5);
  r.hit_at_10 = hit_at_k(predictions, 10);
  return r;
}

nlohmann::ordered_json metrics_to_json(const MetricsReport& r, std::span<const std::string> class_names) {
  nlohmann::ordered_json j;
  j["samples"] = r.samples;
  j["num_classes"] = r.num_classes;
  j["f1_macro"] = r.f1.macro;
  j["f1_macro_observed"] = r.f1.macro_observed;
  j["f1_weighted"] = r.f1.weighted;
  j["mrr"] = r.mrr;
  j["hit@1"] = r.hit_at_1;
  j["hit@3"] = r.hit_at_3;
  j["hit@5"] = r.hit_at_5;
  j["hit@10"] = r.hit_at_10;
  nlohmann::ordered_json per_class = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < r.f1.per_class.size(); ++c) {
    const ClassScores& s = r.f1.per_class[c];
    nlohmann::ordered_json row;
    row["class"] = c < class_names.size() ? class_names[c] : std::to_string(c);
    row["precision"] = s.precision;
    row["recall"] = s.recall;
    row["f1"] = s.f1;
    row["support"] = s.support;
    per_class.push_back(row);
  }
  j["per_class"] = per_class;
  if (r.by_length) {
    nlohmann::ordered_json bins = nlohmann::ordered_json::array();
    for (const LengthBin& b : r.by_length->bins) {
      nlohmann::ordered_json row;
      row["bin_start"] = b.begin;
      row["bin_end"] = b.end ? nlohmann::ordered_json(*b.end) : nlohmann::ordered_json(nullptr);
      row["count"] = b.count;
      row["hit@3"] = b.hit_at_3 ? nlohmann::ordered_json(*b.hit_at_3) : nlohmann::ordered_json(nullptr);
      bins.push_back(row);
    }
    j["by_length"] = {{"threshold", r.by_length->threshold},
                      {"fraction_at_least_threshold", r.by_length->fraction_at_least_threshold},
                      {"bins", bins}};
  }
  return j;
}

}  // namespace poolbert
