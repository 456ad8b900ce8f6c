#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace poolbert {

class LabelSpace;

/// Up to three ranked codes, or a rejection ("not enough information").
struct Answer {
  bool rejected = false;
  std::vector<std::string> codes;

  bool operator==(const Answer&) const = default;
};

struct PanelAnnotation {
  std::string visit_id;
  std::string expert_id;
  Answer answer;
};

// Complete visit x expert matrix of answers.
class PanelDataset {
 public:
  /// InputError when an answer is malformed (more than three codes,
  /// duplicates, empty non-rejection, code outside `space` when given) or
  /// when the matrix is incomplete or has duplicate cells.
  static PanelDataset from_annotations(std::span<const PanelAnnotation> annotations,
                                       const LabelSpace* space = nullptr);

  /// JSONL: {"visit_id", "expert_id", "answer": [codes]} or {"..., "rejected": true}.
  static PanelDataset load(const std::filesystem::path& path, const LabelSpace* space = nullptr);

  const std::vector<std::string>& visits() const { return visits_; }
  const std::vector<std::string>& experts() const { return experts_; }
  const Answer& answer(std::size_t visit, std::size_t expert) const { return answers_[visit][expert]; }

  /// Answers of one expert keyed by visit id.
  std::map<std::string, Answer> answers_of(std::size_t expert) const;

  PanelDataset without_expert(std::size_t expert) const;

 private:
  std::vector<std::string> visits_;
  std::vector<std::string> experts_;
  std::vector<std::vector<Answer>> answers_;  // [visit][expert]
};

/// Fleiss' kappa over first-place answers, with rejection as its own
/// category. Returns 1 when expected agreement is 1 (a single category used
/// throughout). InputError with fewer than 2 experts or 2 visits.
double fleiss_kappa(const PanelDataset& panel);

/// Fleiss' kappa of a subject x category count table (equal row sums).
double fleiss_kappa_counts(const std::vector<std::vector<std::size_t>>& counts);

struct GroundTruth {
  std::map<std::string, std::string> truth;  // visit -> code
  std::vector<std::string> excluded;         // every expert rejected
};

/// Plurality of first-place answers (rejections abstain). Ties go to the code
/// with more appearances at any rank, then the lexicographically smallest.
GroundTruth infer_ground_truth(const PanelDataset& panel);

/// Fraction of scored visits whose truth is among the answer's codes; a
/// rejection counts as a miss. InputError when a scored visit has no answer.
double hit3_against_truth(const std::map<std::string, Answer>& answers, const GroundTruth& truth);

struct LeaveOneOut {
  std::vector<std::string> experts;
  std::vector<double> expert_scores;
  std::vector<double> model_scores;  // empty without model answers
  std::vector<std::size_t> excluded_visits;  // per held-out expert
  double expert_mean = 0, expert_std = 0;
  double model_mean = 0, model_std = 0;
};

/// For each expert e: truth from the other experts, then e's Hit@3 and (if
/// given) the model's Hit@3 against that truth. Standard deviations use n-1.
LeaveOneOut leave_one_out_scores(const PanelDataset& panel,
                                 const std::map<std::string, Answer>* model_answers = nullptr);

struct MannWhitneyResult {
  double u_a = 0, u_b = 0, u = 0;  // u = min(u_a, u_b)
  double p_exact_two_sided = 1;
  double p_exact_one_sided = 1;  // P(U <= u) under the null
  double p_normal_two_sided = 1;  // tie-corrected, continuity-corrected
  double alpha = 0.05;
  bool reject = false;  // p_exact_two_sided <= alpha
  std::optional<int> critical_one_tailed;  // tabulated, equal sizes 3..12, alpha 0.05
  std::optional<int> critical_two_tailed;
};

/// Exact Mann-Whitney U test with midranks. Sizes up to 12 each are
/// enumerated exactly; InputError on an empty sample or a size above 12.
MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b, double alpha = 0.05);

/// Tabulated critical U for n = m in [3, 12] at alpha = 0.05; reject when
/// U <= value. nullopt where no U can reach significance or outside the table.
std::optional<int> mann_whitney_critical_value(std::size_t n, bool two_tailed);

/// Exact null distribution of U_a for samples of size n and m drawn from the
/// pooled midranks: counts of each 2*U_a value over all C(n+m, n) labelings.
std::map<long, double> mann_whitney_null_distribution(std::span<const double> pooled_midranks, std::size_t n);

/// Reads {"visit_id", "codes": [...]} lines, e.g. `predict --data` output.
std::map<std::string, Answer> load_model_answers(const std::filesystem::path& path);

nlohmann::ordered_json panel_report_json(const PanelDataset& panel, const LeaveOneOut& scores, double kappa,
                                         const std::optional<MannWhitneyResult>& test);

}  // namespace poolbert
