#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "poolbert/data.hpp"
#include "poolbert/error.hpp"
#include "poolbert/rng.hpp"
#include "poolbert/synthetic.hpp"
#include "reference_label_space.hpp"

using namespace poolbert;

namespace {

VisitRecord record(std::string visit, std::string code) {
  return {"p", std::move(visit), "2020-01-01", "fever", "smoker", std::move(code)};
}

std::vector<VisitRecord> records_from_counts(const std::map<std::string, int>& counts) {
  std::vector<VisitRecord> out;
  for (const auto& [code, n] : counts) {
    for (int i = 0; i < n; ++i) out.push_back(record(code + "-" + std::to_string(i), code));
  }
  return out;
}

std::vector<std::string> words_of(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("assemble_text") {
  VisitRecord r = record("v", "A01");
  CHECK(assemble_text(r) == "fever smoker");
  r.symptoms_text = "";
  CHECK(assemble_text(r) == "smoker");
  r.anamnesis_text = "";
  CHECK(assemble_text(r) == "");
}

TEST_CASE("parse_icd") {
  const IcdCode d30 = parse_icd("D30.01");
  CHECK(d30.root == "D30");
  CHECK(d30.specifier == "01");
  const IcdCode j06 = parse_icd("J06");
  CHECK(j06.root == "J06");
  CHECK_FALSE(j06.specifier.has_value());
  CHECK_THROWS_AS(parse_icd("30.1"), ParseError);
  for (const char* bad : {"", "J0", "j06", "J06.", "J06.12345", "J06-1", "JJ6", "J06.1 "}) {
    CAPTURE(bad);
    CHECK_THROWS_AS(parse_icd(bad), ParseError);
  }
  try {
    parse_icd("30.1");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("30.1") != std::string::npos);
  }
  for (const char* good : {"A00", "Z99.9", "M54.5A", "T14.1234"}) CHECK(parse_icd(good).format() == good);
}

TEST_CASE("root label space") {
  SUBCASE("coverage example") {
    const auto recs = records_from_counts({{"A01", 50}, {"B02", 30}, {"C03", 15}, {"D04", 5}});
    LabelSpaceOptions opts;
    opts.coverage = 0.95;
    const LabelSpace s = LabelSpace::build(recs, opts);
    CHECK(s.codes() == std::vector<std::string>{"A01", "B02", "C03"});
    CHECK(s.coverage() == doctest::Approx(0.95));
    CHECK(s.coverage_target_met());
  }
  SUBCASE("K larger than the number of codes") {
    const auto recs = records_from_counts({{"A01", 2}, {"B02", 1}});
    LabelSpaceOptions opts;
    opts.top_k = 10;
    const LabelSpace s = LabelSpace::build(recs, opts);
    CHECK(s.size() == 2);
    CHECK(s.coverage() == 1.0);
  }
  SUBCASE("unreachable coverage reports the attainable maximum") {
    const auto recs = records_from_counts({{"A01", 50}, {"B02", 30}, {"C03", 20}});
    LabelSpaceOptions opts;
    opts.top_k = 2;
    opts.coverage = 0.95;
    const LabelSpace s = LabelSpace::build(recs, opts);
    CHECK(s.size() == 2);
    CHECK(s.coverage() == doctest::Approx(0.8));
    CHECK_FALSE(s.coverage_target_met());
  }
  SUBCASE("dotted codes collapse to their root") {
    std::vector<VisitRecord> recs{record("1", "D30.01"), record("2", "D30"), record("3", "J06.9"), record("4", "D30.1")};
    LabelSpaceOptions opts;
    opts.top_k = 1;
    const LabelSpace s = LabelSpace::build(recs, opts);
    CHECK(s.codes() == std::vector<std::string>{"D30"});
    const LabeledRecords lr = apply_label_space(recs, s);
    CHECK(lr.records.size() == 3);
    REQUIRE(lr.excluded.size() == 1);
    CHECK(lr.excluded[0].icd_code == "J06.9");
  }
  CHECK_THROWS_AS(LabelSpace::build(std::vector<VisitRecord>{}, {}), InputError);
}

TEST_CASE("root label space equals a brute-force oracle") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    std::map<std::string, int> counts;
    const std::size_t distinct = 1 + rng.uniform_int(trial < 90 ? 60 : 2000);
    while (counts.size() < distinct) {
      std::string code = std::string(1, char('A' + rng.uniform_int(26))) + std::to_string(10 + rng.uniform_int(90));
      counts[code] = 1 + static_cast<int>(rng.uniform_int(8));
    }
    const auto recs = records_from_counts(counts);
    LabelSpaceOptions opts;
    if (rng.bernoulli(0.5)) opts.top_k = 1 + rng.uniform_int(distinct + 5);
    if (rng.bernoulli(0.7)) opts.coverage = 0.05 + 0.95 * rng.uniform();
    CHECK(LabelSpace::build(recs, opts).codes() == reference::root_space(counts, opts.top_k, opts.coverage));
  }
}

TEST_CASE("extended label space") {
  std::vector<VisitRecord> recs;
  int id = 0;
  auto add = [&](const std::string& code, int n) {
    for (int i = 0; i < n; ++i) recs.push_back(record(std::to_string(id++), code));
  };
  add("D30.01", 5);
  add("D30", 3);
  add("D30.1", 3);
  add("J06.9", 4);
  add("Z00.0", 1);  // root outside the top-2 root space
  LabelSpaceOptions opts;
  opts.mode = LabelMode::extended;
  opts.top_k = 2;
  opts.extended_k = 3;
  const LabelSpace s = LabelSpace::build(recs, opts);
  CHECK(s.mode() == LabelMode::extended);
  CHECK(s.codes() == std::vector<std::string>{"D30.01", "J06.9", "D30"});
  CHECK(s.label_of("D30.1") == std::nullopt);
  CHECK(s.label_of("D30") == 2u);
  CHECK(s.coverage() == doctest::Approx(12.0 / 16.0));
  // Every excluded record's code is genuinely absent.
  for (const VisitRecord& r : apply_label_space(recs, s).excluded) CHECK_FALSE(s.index_of(r.icd_code));
}

TEST_CASE("label file round trip") {
  const auto path = std::filesystem::temp_directory_path() / "poolbert_labels.txt";
  const LabelSpace s({"A01", "B02", "C03"}, LabelMode::root);
  s.save(path);
  const LabelSpace loaded = LabelSpace::load(path);
  CHECK(loaded.codes() == s.codes());
  CHECK(loaded.mode() == LabelMode::root);
  std::filesystem::remove(path);
}

TEST_CASE("split_train_val") {
  std::vector<VisitRecord> recs;
  for (int i = 0; i < 100; ++i) recs.push_back(record(std::to_string(i), "A01"));
  auto [train, val] = split_train_val(recs, 0.8, 42);
  CHECK(train.size() == 80);
  CHECK(val.size() == 20);
  std::set<std::string> ids;
  for (const auto& r : train) ids.insert(r.visit_id);
  for (const auto& r : val) ids.insert(r.visit_id);
  CHECK(ids.size() == 100);
  auto again = split_train_val(recs, 0.8, 42);
  CHECK(again.first == train);
  CHECK(split_train_val(std::span(recs).first(5), 0.8, 1).first.size() == 4);
  CHECK_THROWS_AS(split_train_val(recs, 1.0, 1), ParameterError);
  CHECK_THROWS_AS(split_train_val(recs, 0.0, 1), ParameterError);
}

TEST_CASE("JSONL records") {
  const auto dir = std::filesystem::temp_directory_path() / "poolbert_test_data";
  std::filesystem::create_directories(dir);
  std::vector<VisitRecord> recs{record("1", "A01"), record("2", "B02.1")};
  recs[1].symptoms_text = "кашель, \"quoted\"\ttab";
  write_records(dir / "r.jsonl", recs);
  CHECK(read_records(dir / "r.jsonl") == recs);

  auto write = [&](const std::string& body) {
    std::ofstream(dir / "bad.jsonl") << body;
    return dir / "bad.jsonl";
  };
  CHECK_THROWS_AS(read_records(write("{\"visit_id\":\"1\",\"icd_code\":\"A01\"}\n{oops\n")), ParseError);
  try {
    read_records(write("{\"visit_id\":\"1\",\"icd_code\":\"A01\"}\n{oops\n"));
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("bad.jsonl:2") != std::string::npos);
  }
  CHECK_THROWS_AS(read_records(write("{\"visit_id\":\"1\",\"icd_code\":\"1AB\"}\n")), ParseError);
  CHECK_THROWS_AS(read_records(write("{\"visit_id\":\"1\"}\n")), ParseError);
  CHECK_THROWS_AS(
      read_records(write("{\"visit_id\":\"1\",\"icd_code\":\"A01\"}\n{\"visit_id\":\"1\",\"icd_code\":\"A01\"}\n")),
      InputError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("synthetic generator") {
  SyntheticSpec spec;
  const SyntheticData d = generate_synthetic(spec);
  CHECK(d.train.size() == 2000);
  CHECK(d.test.size() == 500);
  double total = 0;
  for (double p : d.class_probabilities) total += p;
  CHECK(total == doctest::Approx(1.0));

  SUBCASE("keyword pools are disjoint and every record is keyword-consistent") {
    std::map<std::string, std::size_t> owner;
    for (std::size_t c = 0; c < d.keywords.size(); ++c) {
      for (const auto& w : d.keywords[c]) CHECK(owner.emplace(w, c).second);
    }
    for (const auto& w : d.noise_vocabulary) CHECK(owner.count(w) == 0);
    for (const auto* split : {&d.train, &d.test}) {
      for (const VisitRecord& r : *split) {
        const std::size_t cls = static_cast<std::size_t>(std::stoi(r.icd_code.substr(1)));
        std::size_t own = 0, other = 0;
        for (const auto& w : words_of(r.symptoms_text)) {
          auto it = owner.find(w);
          if (it == owner.end()) continue;
          (it->second == cls ? own : other)++;
        }
        CHECK(own >= 1);
        CHECK(other == 0);
        for (const auto& w : words_of(r.anamnesis_text)) CHECK(owner.count(w) == 0);
        CHECK(is_valid_icd(r.icd_code));
      }
    }
  }
  SUBCASE("a bag-of-keywords rule is perfect on the training set") {
    std::map<std::string, std::string> keyword_code;
    for (std::size_t c = 0; c < d.keywords.size(); ++c) {
      for (const auto& w : d.keywords[c]) keyword_code[w] = synthetic_code(c);
    }
    for (const VisitRecord& r : d.train) {
      std::map<std::string, int> votes;
      for (const auto& w : words_of(assemble_text(r))) {
        if (keyword_code.count(w)) ++votes[keyword_code[w]];
      }
      REQUIRE(votes.size() == 1);
      CHECK(votes.begin()->first == r.icd_code);
    }
  }
  SUBCASE("deterministic per seed") {
    const SyntheticData again = generate_synthetic(spec);
    CHECK(again.train == d.train);
    CHECK(again.test == d.test);
    spec.seed = 43;
    CHECK(generate_synthetic(spec).train != d.train);
  }
  SUBCASE("zero skew is uniform") {
    spec.skew = 0;
    spec.train_size = 10000;
    spec.test_size = 0;
    const SyntheticData u = generate_synthetic(spec);
    std::map<std::string, int> counts;
    for (const auto& r : u.train) ++counts[r.icd_code];
    CHECK(counts.size() == 8);
    // Binomial sd for p=1/8, n=1e4 is ~33; allow 4 sd.
    for (const auto& [code, n] : counts) CHECK(std::abs(n - 1250) < 132);
  }
  SUBCASE("skew concentrates mass on the first classes") {
    CHECK(d.class_probabilities.front() > d.class_probabilities.back() * 5);
  }
  SUBCASE("distribution shift uses a separate noise vocabulary for test") {
    spec.test_shift = true;
    const SyntheticData s = generate_synthetic(spec);
    std::set<std::string> train_noise(s.noise_vocabulary.begin(), s.noise_vocabulary.end());
    for (const auto& r : s.test) {
      for (const auto& w : words_of(r.anamnesis_text)) CHECK(train_noise.count(w) == 0);
    }
  }
}

}
