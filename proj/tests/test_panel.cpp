#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "poolbert/error.hpp"
#include "poolbert/panel.hpp"
#include "poolbert/rng.hpp"

using namespace poolbert;

namespace {

Answer codes(std::vector<std::string> c) { return {false, std::move(c)}; }
Answer reject() { return {true, {}}; }

// rows[v][e] is expert e's answer for visit "v<v>".
PanelDataset make_panel(const std::vector<std::vector<Answer>>& rows) {
  std::vector<PanelAnnotation> ann;
  for (std::size_t v = 0; v < rows.size(); ++v) {
    for (std::size_t e = 0; e < rows[v].size(); ++e) {
      ann.push_back({"v" + std::to_string(v), "e" + std::to_string(e), rows[v][e]});
    }
  }
  return PanelDataset::from_annotations(ann);
}

// Brute-force exact null distribution: every n-subset of pooled ranks.
std::map<long, double> brute_null(const std::vector<double>& ranks, std::size_t n) {
  std::map<long, double> dist;
  const std::size_t N = ranks.size();
  for (unsigned mask = 0; mask < (1u << N); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != n) continue;
    double sum = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (mask & (1u << i)) sum += ranks[i];
    }
    dist[std::lround(2 * (sum - n * (n + 1) / 2.0))] += 1;
  }
  return dist;
}

}  // namespace

TEST_SUITE("panel") {

TEST_CASE("panel validation") {
  std::vector<PanelAnnotation> ann{{"v0", "e0", codes({"A01"})}, {"v0", "e1", codes({"A01"})}, {"v1", "e0", reject()}};
  CHECK_THROWS_AS(PanelDataset::from_annotations(ann), InputError);  // incomplete
  ann.push_back({"v1", "e1", codes({"A01", "B02", "C03", "D04"})});
  CHECK_THROWS_AS(PanelDataset::from_annotations(ann), InputError);  // four codes
  ann.back().answer = codes({"A01", "A01"});
  CHECK_THROWS_AS(PanelDataset::from_annotations(ann), InputError);  // duplicate code
  ann.back().answer = codes({"A01"});
  CHECK_NOTHROW(PanelDataset::from_annotations(ann));
}

TEST_CASE("fleiss kappa") {
  SUBCASE("perfect agreement") {
    std::vector<std::vector<Answer>> rows;
    for (int v = 0; v < 5; ++v) rows.push_back(std::vector<Answer>(7, codes({v % 2 ? "A01" : "B02"})));
    CHECK(fleiss_kappa(make_panel(rows)) == doctest::Approx(1.0));
  }
  SUBCASE("single category everywhere") {
    std::vector<std::vector<Answer>> rows(3, std::vector<Answer>(4, codes({"A01"})));
    CHECK(fleiss_kappa(make_panel(rows)) == 1.0);
  }
  SUBCASE("hand table, 3 subjects x 2 categories, 2 raters") {
    // Counts [2,0], [1,1], [0,2]: P_i = 1, 0, 1 -> P = 2/3; p = [1/2, 1/2] -> Pe = 1/2.
    // kappa = (2/3 - 1/2) / (1/2) = 1/3.
    CHECK(fleiss_kappa_counts({{2, 0}, {1, 1}, {0, 2}}) == doctest::Approx(1.0 / 3));
    const PanelDataset p = make_panel({{codes({"A01"}), codes({"A01"})},
                                       {codes({"A01"}), reject()},
                                       {reject(), reject()}});
    CHECK(fleiss_kappa(p) == doctest::Approx(1.0 / 3));
  }
  SUBCASE("independent uniform raters are near zero") {
    Rng rng(12);
    const std::vector<std::string> cats{"A01", "A02", "A03", "A04", "A05", "A06", "A07", "A08"};
    std::vector<std::vector<Answer>> rows(500);
    for (auto& row : rows) {
      for (int e = 0; e < 7; ++e) row.push_back(codes({cats[rng.uniform_int(cats.size())]}));
    }
    CHECK(std::abs(fleiss_kappa(make_panel(rows))) < 0.05);
  }
  SUBCASE("invariant to relabelling and reordering") {
    Rng rng(3);
    std::vector<std::vector<Answer>> rows(30);
    for (auto& row : rows) {
      for (int e = 0; e < 5; ++e) {
        row.push_back(rng.bernoulli(0.1) ? reject() : codes({"C0" + std::to_string(rng.uniform_int(4))}));
      }
    }
    const double base = fleiss_kappa(make_panel(rows));
    auto relabelled = rows;
    for (auto& row : relabelled) {
      for (auto& a : row) {
        if (!a.rejected) a.codes[0] = "Z9" + a.codes[0].substr(2);
      }
    }
    std::reverse(relabelled.begin(), relabelled.end());
    for (auto& row : relabelled) std::rotate(row.begin(), row.begin() + 2, row.end());
    CHECK(fleiss_kappa(make_panel(relabelled)) == doctest::Approx(base).epsilon(1e-12));
  }
  CHECK_THROWS_AS(fleiss_kappa(make_panel({{codes({"A01"}), codes({"A01"})}})), InputError);
}

TEST_CASE("ground truth inference") {
  SUBCASE("unanimous") {
    const PanelDataset p = make_panel({std::vector<Answer>(6, codes({"X01"}))});
    CHECK(infer_ground_truth(p).truth.at("v0") == "X01");
  }
  SUBCASE("tie broken by total appearances") {
    const PanelDataset p = make_panel({{codes({"A01"}), codes({"A01", "B02"}), codes({"A01", "B02"}),
                                        codes({"B02"}), codes({"B02"}), codes({"B02"})}});
    CHECK(infer_ground_truth(p).truth.at("v0") == "B02");
  }
  SUBCASE("full tie goes to the lexicographically smaller code") {
    const PanelDataset p = make_panel({{codes({"B02"}), codes({"A01"})}});
    CHECK(infer_ground_truth(p).truth.at("v0") == "A01");
  }
  SUBCASE("rejections abstain; all-reject visits are excluded") {
    const PanelDataset p = make_panel({{reject(), reject(), codes({"C03"})}, std::vector<Answer>(3, reject())});
    const GroundTruth g = infer_ground_truth(p);
    CHECK(g.truth.at("v0") == "C03");
    CHECK(g.excluded == std::vector<std::string>{"v1"});
  }
  SUBCASE("independent of expert order") {
    Rng rng(8);
    std::vector<std::vector<Answer>> rows(40);
    for (auto& row : rows) {
      for (int e = 0; e < 6; ++e) {
        std::vector<std::string> c;
        const std::size_t k = 1 + rng.uniform_int(3);
        while (c.size() < k) {
          std::string code = "D0" + std::to_string(rng.uniform_int(5));
          if (std::find(c.begin(), c.end(), code) == c.end()) c.push_back(code);
        }
        row.push_back(rng.bernoulli(0.15) ? reject() : codes(c));
      }
    }
    const GroundTruth base = infer_ground_truth(make_panel(rows));
    for (auto& row : rows) std::reverse(row.begin(), row.end());
    CHECK(infer_ground_truth(make_panel(rows)).truth == base.truth);
  }
}

TEST_CASE("hit3 against truth") {
  GroundTruth g;
  for (int v = 0; v < 6; ++v) g.truth["v" + std::to_string(v)] = "A01";
  std::map<std::string, Answer> answers;
  for (int v = 0; v < 6; ++v) answers["v" + std::to_string(v)] = codes({"B02", "C03", "A01"});
  CHECK(hit3_against_truth(answers, g) == 1.0);
  answers["v0"] = codes({"B02"});
  answers["v1"] = reject();
  CHECK(hit3_against_truth(answers, g) == doctest::Approx(4.0 / 6));
  for (auto& [v, a] : answers) a = reject();
  CHECK(hit3_against_truth(answers, g) == 0.0);
  answers.erase("v3");
  CHECK_THROWS_AS(hit3_against_truth(answers, g), InputError);
}

TEST_CASE("leave-one-out") {
  Rng rng(4);
  std::vector<std::vector<Answer>> rows(20);
  for (std::size_t v = 0; v < rows.size(); ++v) {
    for (int e = 0; e < 7; ++e) {
      rows[v].push_back(codes({rng.bernoulli(0.7) ? "A0" + std::to_string(v % 4) : "B0" + std::to_string(e)}));
    }
  }
  const PanelDataset p = make_panel(rows);
  SUBCASE("model copying an expert scores like that expert") {
    for (std::size_t e = 0; e < 7; ++e) {
      const auto model = p.answers_of(e);
      const LeaveOneOut r = leave_one_out_scores(p, &model);
      CHECK(r.model_scores[e] == r.expert_scores[e]);
    }
  }
  SUBCASE("means and stds match direct recomputation") {
    const LeaveOneOut r = leave_one_out_scores(p);
    REQUIRE(r.expert_scores.size() == 7);
    const double mean = std::accumulate(r.expert_scores.begin(), r.expert_scores.end(), 0.0) / 7;
    double ss = 0;
    for (double s : r.expert_scores) ss += (s - mean) * (s - mean);
    CHECK(r.expert_mean == doctest::Approx(mean));
    CHECK(r.expert_std == doctest::Approx(std::sqrt(ss / 6)));
  }
  SUBCASE("perfectly agreeing experts and a perfect model") {
    std::vector<std::vector<Answer>> same(10);
    for (std::size_t v = 0; v < same.size(); ++v) same[v].assign(7, codes({"A0" + std::to_string(v % 3)}));
    const PanelDataset agree = make_panel(same);
    const auto model = agree.answers_of(0);
    const LeaveOneOut r = leave_one_out_scores(agree, &model);
    for (double s : r.expert_scores) CHECK(s == 1.0);
    for (double s : r.model_scores) CHECK(s == 1.0);
    CHECK_FALSE(mann_whitney_u(r.expert_scores, r.model_scores).reject);
  }
  SUBCASE("an expert who always matches the others scores 1") {
    std::vector<std::vector<Answer>> consensus(12);
    for (std::size_t v = 0; v < consensus.size(); ++v) {
      const std::string truth = "A0" + std::to_string(v % 3);
      consensus[v].push_back(codes({truth}));
      for (int e = 1; e < 7; ++e) consensus[v].push_back(codes({e <= 4 ? truth : "Z9" + std::to_string(e)}));
    }
    CHECK(leave_one_out_scores(make_panel(consensus)).expert_scores[0] == 1.0);
  }
}

TEST_CASE("mann-whitney U") {
  SUBCASE("complete separation") {
    const std::vector<double> a{1, 2, 3}, b{4, 5, 6};
    const MannWhitneyResult r = mann_whitney_u(a, b);
    CHECK(r.u == 0);
    CHECK(r.u_a + r.u_b == 9);
    CHECK(r.p_exact_two_sided == doctest::Approx(0.1));  // 2 of C(6,3)=20 labelings
  }
  SUBCASE("identical samples") {
    const std::vector<double> a{0.5, 0.6, 0.7, 0.7, 0.8, 0.9, 1.0};
    const MannWhitneyResult r = mann_whitney_u(a, a);
    CHECK(r.u == doctest::Approx(49.0 / 2));
    CHECK(r.p_exact_two_sided == 1.0);
    CHECK_FALSE(r.reject);
  }
  SUBCASE("reported decision fixture: U = 22 against a critical value of 11 at n = 7") {
    // Ranks {1,2,3,7,11,12,14} vs the rest: R_a = 50, U_a = 22, U_b = 27.
    const std::vector<double> a{1, 2, 3, 7, 11, 12, 14}, b{4, 5, 6, 8, 9, 10, 13};
    const MannWhitneyResult r = mann_whitney_u(a, b);
    CHECK(r.u == 22);
    REQUIRE(r.critical_one_tailed.has_value());
    CHECK(*r.critical_one_tailed == 11);
    CHECK_FALSE(r.u <= *r.critical_one_tailed);
    CHECK_FALSE(r.reject);
    CHECK(r.p_exact_one_sided > 0.05);
  }
  SUBCASE("U_a + U_b = n*m and exact p agrees with brute force") {
    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 1 + rng.uniform_int(7), m = 1 + rng.uniform_int(7);
      std::vector<double> a(n), b(m);
      for (double& x : a) x = static_cast<double>(rng.uniform_int(6));
      for (double& x : b) x = static_cast<double>(rng.uniform_int(6));
      const MannWhitneyResult r = mann_whitney_u(a, b);
      CHECK(r.u_a + r.u_b == static_cast<double>(n * m));
      CHECK(r.p_exact_two_sided <= 1.0);
      CHECK(r.p_exact_two_sided >= r.p_exact_one_sided - 1e-12);
    }
  }
  SUBCASE("dynamic-programming null distribution equals subset enumeration") {
    const std::vector<double> ranks{1, 2.5, 2.5, 4, 5, 6.5, 6.5, 8, 9, 10};
    CHECK(mann_whitney_null_distribution(ranks, 4) == brute_null(ranks, 4));
    std::vector<double> plain(12);
    std::iota(plain.begin(), plain.end(), 1.0);
    CHECK(mann_whitney_null_distribution(plain, 6) == brute_null(plain, 6));
  }
  SUBCASE("tabulated critical values follow from the exact distribution") {
    for (std::size_t n = 3; n <= 12; ++n) {
      std::vector<double> ranks(2 * n);
      std::iota(ranks.begin(), ranks.end(), 1.0);
      const auto dist = mann_whitney_null_distribution(ranks, n);
      double total = 0;
      for (const auto& [u2, c] : dist) total += c;
      for (bool two_tailed : {false, true}) {
        const double level = two_tailed ? 0.025 : 0.05;
        int critical = -1;
        double cumulative = 0;
        for (const auto& [u2, c] : dist) {
          cumulative += c;
          if (cumulative / total > level) break;
          critical = static_cast<int>(u2 / 2);
        }
        CAPTURE(n);
        CAPTURE(two_tailed);
        const auto table = mann_whitney_critical_value(n, two_tailed);
        CHECK(table.value_or(-1) == critical);
      }
    }
  }
  SUBCASE("normal approximation tracks the exact p for n = m = 7 without ties") {
    Rng rng(10);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<double> pool(14);
      std::iota(pool.begin(), pool.end(), 1.0);
      rng.shuffle(pool.begin(), pool.end());
      const std::vector<double> a(pool.begin(), pool.begin() + 7), b(pool.begin() + 7, pool.end());
      const MannWhitneyResult r = mann_whitney_u(a, b);
      CHECK(std::abs(r.p_exact_two_sided - r.p_normal_two_sided) < 0.03);
    }
  }
  CHECK_THROWS_AS(mann_whitney_u(std::vector<double>{}, std::vector<double>{1}), InputError);
  CHECK_THROWS_AS(mann_whitney_u(std::vector<double>(13, 1.0), std::vector<double>{1}), InputError);
}

}
