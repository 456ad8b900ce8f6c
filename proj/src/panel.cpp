#include "poolbert/panel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "poolbert/data.hpp"
#include "poolbert/error.hpp"

namespace poolbert {

namespace {

constexpr std::size_t kMaxAnswerCodes = 3;
constexpr std::size_t kMaxExactSample = 12;
const std::string kRejectCategory = "<reject>";

void validate_answer(const Answer& a, const std::string& where, const LabelSpace* space) {
  if (a.rejected) {
    if (!a.codes.empty()) throw InputError(where + ": a rejection cannot list codes");
    return;
  }
  if (a.codes.empty()) throw InputError(where + ": answer lists no codes and is not a rejection");
  if (a.codes.size() > kMaxAnswerCodes) throw InputError(where + ": answer lists more than 3 codes");
  std::set<std::string> seen;
  for (const std::string& c : a.codes) {
    if (!seen.insert(c).second) throw InputError(where + ": duplicate code " + c);
    if (space && !space->index_of(c)) throw InputError(where + ": code " + c + " is outside the label space");
  }
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// Midranks of the pooled sample (1-based; ties share their average rank).
std::vector<double> midranks(std::span<const double> pooled) {
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return pooled[x] < pooled[y]; });
  std::vector<double> ranks(pooled.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && pooled[order[j]] == pooled[order[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

Answer parse_answer_json(const nlohmann::json& j, const std::string& where) {
  Answer a;
  if (auto r = j.find("rejected"); r != j.end()) {
    if (!r->is_boolean()) throw ParseError(where + ": 'rejected' must be a boolean");
    a.rejected = r->get<bool>();
  }
  for (const char* key : {"answer", "codes"}) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) continue;
    if (it->is_string() && it->get<std::string>() == "reject") {
      a.rejected = true;
      continue;
    }
    if (!it->is_array()) throw ParseError(where + ": '" + key + "' must be an array of codes");
    for (const auto& c : *it) {
      if (!c.is_string()) throw ParseError(where + ": codes must be strings");
      a.codes.push_back(c.get<std::string>());
    }
  }
  return a;
}

template <class Fn>
void for_each_json_line(const std::filesystem::path& path, Fn fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(where + ": invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw ParseError(where + ": expected a JSON object");
    fn(j, where);
  }
}

std::string string_field(const nlohmann::json& j, const char* name, const std::string& where) {
  auto it = j.find(name);
  if (it == j.end() || !it->is_string()) throw ParseError(where + ": missing string field '" + name + "'");
  return it->get<std::string>();
}

}  // namespace

PanelDataset PanelDataset::from_annotations(std::span<const PanelAnnotation> annotations, const LabelSpace* space) {
  PanelDataset p;
  std::map<std::string, std::size_t> visit_index, expert_index;
  for (const PanelAnnotation& a : annotations) {
    if (visit_index.emplace(a.visit_id, p.visits_.size()).second) p.visits_.push_back(a.visit_id);
    if (expert_index.emplace(a.expert_id, p.experts_.size()).second) p.experts_.push_back(a.expert_id);
  }
  p.answers_.assign(p.visits_.size(), std::vector<Answer>(p.experts_.size()));
  std::vector<std::vector<bool>> filled(p.visits_.size(), std::vector<bool>(p.experts_.size(), false));
  for (const PanelAnnotation& a : annotations) {
    const std::string where = "annotation (" + a.visit_id + ", " + a.expert_id + ")";
    validate_answer(a.answer, where, space);
    const std::size_t v = visit_index[a.visit_id], e = expert_index[a.expert_id];
    if (filled[v][e]) throw InputError(where + " appears twice");
    filled[v][e] = true;
    p.answers_[v][e] = a.answer;
  }
  for (std::size_t v = 0; v < p.visits_.size(); ++v) {
    for (std::size_t e = 0; e < p.experts_.size(); ++e) {
      if (!filled[v][e]) {
        throw InputError("panel is incomplete: expert " + p.experts_[e] + " has no answer for visit " + p.visits_[v]);
      }
    }
  }
  return p;
}

PanelDataset PanelDataset::load(const std::filesystem::path& path, const LabelSpace* space) {
  std::vector<PanelAnnotation> annotations;
  for_each_json_line(path, [&](const nlohmann::json& j, const std::string& where) {
    annotations.push_back({string_field(j, "visit_id", where), string_field(j, "expert_id", where),
                           parse_answer_json(j, where)});
  });
  return from_annotations(annotations, space);
}

std::map<std::string, Answer> PanelDataset::answers_of(std::size_t expert) const {
  std::map<std::string, Answer> out;
  for (std::size_t v = 0; v < visits_.size(); ++v) out[visits_[v]] = answers_[v].at(expert);
  return out;
}

PanelDataset PanelDataset::without_expert(std::size_t expert) const {
  if (expert >= experts_.size()) throw ContractError("expert index out of range");
  PanelDataset p = *this;
  p.experts_.erase(p.experts_.begin() + static_cast<std::ptrdiff_t>(expert));
  for (auto& row : p.answers_) row.erase(row.begin() + static_cast<std::ptrdiff_t>(expert));
  return p;
}

double fleiss_kappa_counts(const std::vector<std::vector<std::size_t>>& counts) {
  if (counts.size() < 2) throw InputError("fleiss_kappa needs at least 2 subjects");
  const std::size_t categories = counts[0].size();
  const std::size_t raters = std::accumulate(counts[0].begin(), counts[0].end(), std::size_t{0});
  if (raters < 2) throw InputError("fleiss_kappa needs at least 2 raters");
  const double n = static_cast<double>(raters), N = static_cast<double>(counts.size());
  std::vector<double> column(categories, 0.0);
  double p_bar = 0.0;
  for (const auto& row : counts) {
    if (row.size() != categories || std::accumulate(row.begin(), row.end(), std::size_t{0}) != raters) {
      throw InputError("fleiss_kappa: every subject needs the same number of ratings");
    }
    double sq = 0.0;
    for (std::size_t j = 0; j < categories; ++j) {
      sq += static_cast<double>(row[j]) * static_cast<double>(row[j]);
      column[j] += static_cast<double>(row[j]);
    }
    p_bar += (sq - n) / (n * (n - 1.0));
  }
  p_bar /= N;
  double p_e = 0.0;
  for (double c : column) {
    const double pj = c / (N * n);
    p_e += pj * pj;
  }
  if (1.0 - p_e <= 1e-12) return 1.0;
  return (p_bar - p_e) / (1.0 - p_e);
}

double fleiss_kappa(const PanelDataset& panel) {
  if (panel.experts().size() < 2) throw InputError("fleiss_kappa needs at least 2 experts");
  if (panel.visits().size() < 2) throw InputError("fleiss_kappa needs at least 2 visits");
  std::map<std::string, std::size_t> category;
  auto first = [](const Answer& a) { return a.rejected ? kRejectCategory : a.codes.front(); };
  for (std::size_t v = 0; v < panel.visits().size(); ++v) {
    for (std::size_t e = 0; e < panel.experts().size(); ++e) category.emplace(first(panel.answer(v, e)), 0);
  }
  std::size_t next = 0;
  for (auto& [name, index] : category) index = next++;
  std::vector<std::vector<std::size_t>> counts(panel.visits().size(), std::vector<std::size_t>(category.size(), 0));
  for (std::size_t v = 0; v < panel.visits().size(); ++v) {
    for (std::size_t e = 0; e < panel.experts().size(); ++e) ++counts[v][category[first(panel.answer(v, e))]];
  }
  return fleiss_kappa_counts(counts);
}

GroundTruth infer_ground_truth(const PanelDataset& panel) {
  if (panel.experts().empty()) throw InputError("ground truth needs at least one expert");
  GroundTruth g;
  for (std::size_t v = 0; v < panel.visits().size(); ++v) {
    std::map<std::string, std::size_t> first_votes, appearances;
    for (std::size_t e = 0; e < panel.experts().size(); ++e) {
      const Answer& a = panel.answer(v, e);
      if (a.rejected) continue;
      ++first_votes[a.codes.front()];
      for (const std::string& c : a.codes) ++appearances[c];
    }
    if (first_votes.empty()) {
      g.excluded.push_back(panel.visits()[v]);
      continue;
    }
    // std::map iterates lexicographically, so strict improvements keep the
    // smallest code among full ties.
    auto best = first_votes.begin();
    for (auto it = first_votes.begin(); it != first_votes.end(); ++it) {
      if (it->second > best->second ||
          (it->second == best->second && appearances[it->first] > appearances[best->first])) {
        best = it;
      }
    }
    g.truth[panel.visits()[v]] = best->first;
  }
  return g;
}

double hit3_against_truth(const std::map<std::string, Answer>& answers, const GroundTruth& truth) {
  if (truth.truth.empty()) throw InputError("no visits with a ground truth to score");
  std::size_t hits = 0;
  for (const auto& [visit, code] : truth.truth) {
    auto it = answers.find(visit);
    if (it == answers.end()) throw InputError("no answer for visit " + visit);
    const Answer& a = it->second;
    if (a.rejected) continue;
    const std::size_t considered = std::min(a.codes.size(), kMaxAnswerCodes);
    hits += std::find(a.codes.begin(), a.codes.begin() + static_cast<std::ptrdiff_t>(considered), code) !=
            a.codes.begin() + static_cast<std::ptrdiff_t>(considered);
  }
  return static_cast<double>(hits) / static_cast<double>(truth.truth.size());
}

LeaveOneOut leave_one_out_scores(const PanelDataset& panel, const std::map<std::string, Answer>* model_answers) {
  if (panel.experts().size() < 2) throw InputError("leave-one-out needs at least 2 experts");
  LeaveOneOut r;
  r.experts = panel.experts();
  for (std::size_t e = 0; e < panel.experts().size(); ++e) {
    const GroundTruth truth = infer_ground_truth(panel.without_expert(e));
    r.excluded_visits.push_back(truth.excluded.size());
    r.expert_scores.push_back(hit3_against_truth(panel.answers_of(e), truth));
    if (model_answers) r.model_scores.push_back(hit3_against_truth(*model_answers, truth));
  }
  r.expert_mean = mean_of(r.expert_scores);
  r.expert_std = sample_std(r.expert_scores);
  r.model_mean = mean_of(r.model_scores);
  r.model_std = sample_std(r.model_scores);
  return r;
}

// ---------------------------------------------------------------------------
// Mann-Whitney U

std::map<long, double> mann_whitney_null_distribution(std::span<const double> pooled_midranks, std::size_t n) {
  // Doubled midranks are integers, so subset sums are counted exactly:
  // ways[k][s] = number of k-subsets of the items seen so far with doubled
  // rank sum s.
  std::vector<long> doubled;
  long max_sum = 0;
  for (double r : pooled_midranks) {
    doubled.push_back(std::lround(2.0 * r));
    max_sum += doubled.back();
  }
  std::vector<std::vector<double>> ways(n + 1, std::vector<double>(static_cast<std::size_t>(max_sum) + 1, 0.0));
  ways[0][0] = 1.0;
  for (long d : doubled) {
    for (std::size_t k = n; k >= 1; --k) {
      for (long s = max_sum; s >= d; --s) {
        ways[k][static_cast<std::size_t>(s)] += ways[k - 1][static_cast<std::size_t>(s - d)];
      }
    }
  }
  const long offset = static_cast<long>(n * (n + 1));  // 2 * n(n+1)/2
  std::map<long, double> dist;
  for (long s = 0; s <= max_sum; ++s) {
    if (ways[n][static_cast<std::size_t>(s)] > 0) dist[s - offset] = ways[n][static_cast<std::size_t>(s)];
  }
  return dist;
}

std::optional<int> mann_whitney_critical_value(std::size_t n, bool two_tailed) {
  // alpha = 0.05, equal group sizes n = 3..12; -1 marks "never significant".
  static constexpr int kOneTailed[] = {0, 1, 4, 7, 11, 15, 21, 27, 34, 42};
  static constexpr int kTwoTailed[] = {-1, 0, 2, 5, 8, 13, 17, 23, 30, 37};
  if (n < 3 || n > kMaxExactSample) return std::nullopt;
  const int v = (two_tailed ? kTwoTailed : kOneTailed)[n - 3];
  if (v < 0) return std::nullopt;
  return v;
}

MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b, double alpha) {
  if (a.empty() || b.empty()) throw InputError("mann_whitney_u: both samples must be non-empty");
  if (a.size() > kMaxExactSample || b.size() > kMaxExactSample) {
    throw InputError("mann_whitney_u: exact enumeration supports samples of at most 12");
  }
  if (!(alpha > 0.0 && alpha < 1.0)) throw ParameterError("alpha must be in (0, 1)");
  const std::size_t n = a.size(), m = b.size();
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::vector<double> ranks = midranks(pooled);
  const double rank_sum_a = std::accumulate(ranks.begin(), ranks.begin() + static_cast<std::ptrdiff_t>(n), 0.0);

  MannWhitneyResult r;
  r.alpha = alpha;
  r.u_a = rank_sum_a - static_cast<double>(n * (n + 1)) / 2.0;
  r.u_b = static_cast<double>(n * m) - r.u_a;
  r.u = std::min(r.u_a, r.u_b);

  const auto dist = mann_whitney_null_distribution(ranks, n);
  const long nm = static_cast<long>(n * m);
  const long twice_u_a = std::lround(2.0 * r.u_a), twice_u = std::lround(2.0 * r.u);
  const long deviation = std::labs(twice_u_a - nm);
  double total = 0, two_sided = 0, one_sided = 0;
  for (const auto& [twice_u_value, count] : dist) {
    total += count;
    if (std::labs(twice_u_value - nm) >= deviation) two_sided += count;
    if (twice_u_value <= twice_u) one_sided += count;
  }
  r.p_exact_two_sided = std::min(1.0, two_sided / total);
  r.p_exact_one_sided = std::min(1.0, one_sided / total);

  // Normal approximation with tie and continuity corrections.
  const double N = static_cast<double>(n + m);
  double tie_term = 0.0;
  std::vector<double> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  const double variance =
      static_cast<double>(n * m) / 12.0 * ((N + 1.0) - tie_term / (N * (N - 1.0)));
  if (variance > 0.0) {
    const double z = std::max(0.0, std::abs(r.u_a - static_cast<double>(n * m) / 2.0) - 0.5) / std::sqrt(variance);
    r.p_normal_two_sided = std::erfc(z / std::sqrt(2.0));
  }

  r.reject = r.p_exact_two_sided <= alpha;
  if (n == m && std::abs(alpha - 0.05) < 1e-12) {
    r.critical_one_tailed = mann_whitney_critical_value(n, false);
    r.critical_two_tailed = mann_whitney_critical_value(n, true);
  }
  return r;
}

std::map<std::string, Answer> load_model_answers(const std::filesystem::path& path) {
  std::map<std::string, Answer> out;
  for_each_json_line(path, [&](const nlohmann::json& j, const std::string& where) {
    const std::string visit = string_field(j, "visit_id", where);
    Answer a = parse_answer_json(j, where);
    if (a.codes.size() > kMaxAnswerCodes) a.codes.resize(kMaxAnswerCodes);
    validate_answer(a, where, nullptr);
    if (!out.emplace(visit, std::move(a)).second) throw InputError(where + ": duplicate visit " + visit);
  });
  return out;
}

nlohmann::ordered_json panel_report_json(const PanelDataset& panel, const LeaveOneOut& scores, double kappa,
                                         const std::optional<MannWhitneyResult>& test) {
  nlohmann::ordered_json j;
  j["visits"] = panel.visits().size();
  j["experts"] = panel.experts();
  j["fleiss_kappa"] = kappa;
  j["expert_scores"] = scores.expert_scores;
  j["excluded_visits"] = scores.excluded_visits;
  j["expert_mean"] = scores.expert_mean;
  j["expert_std"] = scores.expert_std;
  if (!scores.model_scores.empty()) {
    j["model_scores"] = scores.model_scores;
    j["model_mean"] = scores.model_mean;
    j["model_std"] = scores.model_std;
  }
  if (test) {
    nlohmann::ordered_json t;
    t["u_experts"] = test->u_a;
    t["u_model"] = test->u_b;
    t["u"] = test->u;
    t["p_exact_two_sided"] = test->p_exact_two_sided;
    t["p_exact_one_sided"] = test->p_exact_one_sided;
    t["p_normal_two_sided"] = test->p_normal_two_sided;
    t["alpha"] = test->alpha;
    t["reject_null"] = test->reject;
    auto opt = [](const std::optional<int>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
    t["u_critical_one_tailed"] = opt(test->critical_one_tailed);
    t["u_critical_two_tailed"] = opt(test->critical_two_tailed);
    t["table_reject_one_tailed"] = test->critical_one_tailed ? nlohmann::ordered_json(test->u <= *test->critical_one_tailed)
                                                             : nlohmann::ordered_json();
    t["table_reject_two_tailed"] = test->critical_two_tailed ? nlohmann::ordered_json(test->u <= *test->critical_two_tailed)
                                                             : nlohmann::ordered_json();
    j["mann_whitney"] = t;
  }
  return j;
}

}  // namespace poolbert
