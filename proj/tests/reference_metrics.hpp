#pragma once

// Brute-force reference implementations used as oracles by the metric tests
// and the acceptance suite. Deliberately naive: ranks come from a full sort,
// F1 from an explicit confusion matrix.

#include <algorithm>
#include <array>
#include <cstddef>
#include <numeric>
#include <vector>

#include "poolbert/metrics.hpp"

namespace reference {

struct Metrics {
  double mrr = 0;
  std::array<double, 4> hit{};  // k = 1, 3, 5, 10
  double f1_macro = 0;
  double f1_weighted = 0;
};

// Position of the truth after sorting classes by descending score with the
// truth placed first among equals.
inline std::size_t rank(const std::vector<double>& scores, std::size_t truth) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    if ((a == truth) != (b == truth)) return a == truth;
    return a < b;
  });
  return static_cast<std::size_t>(std::find(order.begin(), order.end(), truth) - order.begin()) + 1;
}

inline Metrics compute(const std::vector<poolbert::ScoredPrediction>& preds, std::size_t K) {
  Metrics m;
  const double n = static_cast<double>(preds.size());
  std::vector<std::vector<std::size_t>> confusion(K, std::vector<std::size_t>(K, 0));  // [truth][pred]
  double rr = 0;
  std::array<std::size_t, 4> hits{};
  const std::array<std::size_t, 4> ks{1, 3, 5, 10};
  for (const auto& p : preds) {
    const std::size_t r = rank(p.scores, p.truth_index);
    rr += 1.0 / static_cast<double>(r);
    for (std::size_t i = 0; i < ks.size(); ++i) hits[i] += r <= ks[i] ? 1 : 0;
    std::size_t best = 0;
    for (std::size_t c = 1; c < K; ++c) {
      if (p.scores[c] > p.scores[best]) best = c;
    }
    ++confusion[p.truth_index][best];
  }
  m.mrr = rr / n;
  for (std::size_t i = 0; i < ks.size(); ++i) m.hit[i] = static_cast<double>(hits[i]) / n;

  double macro = 0, weighted = 0;
  for (std::size_t c = 0; c < K; ++c) {
    std::size_t tp = confusion[c][c], row = 0, col = 0;
    for (std::size_t o = 0; o < K; ++o) {
      row += confusion[c][o];
      col += confusion[o][c];
    }
    // F1 = 2tp / (2tp + fp + fn), with fp = col - tp and fn = row - tp.
    const std::size_t fp = col - tp, fn = row - tp;
    const double f1 = tp == 0 ? 0.0 : static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
    macro += f1;
    weighted += f1 * static_cast<double>(row);
  }
  m.f1_macro = macro / static_cast<double>(K);
  m.f1_weighted = weighted / n;
  return m;
}

}  // namespace reference
