#include "poolbert/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "poolbert/error.hpp"
#include "poolbert/rng.hpp"

namespace poolbert {

using ordered_json = nlohmann::ordered_json;

std::string assemble_text(const VisitRecord& record) {
  if (record.symptoms_text.empty()) return record.anamnesis_text;
  if (record.anamnesis_text.empty()) return record.symptoms_text;
  return record.symptoms_text + " " + record.anamnesis_text;
}

std::string record_to_json_line(const VisitRecord& r) {
  ordered_json j;
  j["patient_id"] = r.patient_id;
  j["visit_id"] = r.visit_id;
  j["date"] = r.date;
  j["symptoms_text"] = r.symptoms_text;
  j["anamnesis_text"] = r.anamnesis_text;
  j["icd_code"] = r.icd_code;
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

std::vector<VisitRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open record file " + path.string());
  std::vector<VisitRecord> records;
  std::set<std::string> seen;
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
    auto field = [&](const char* name, bool required) -> std::string {
      auto it = j.find(name);
      if (it == j.end() || it->is_null()) {
        if (required) throw ParseError(where + ": missing field '" + name + "'");
        return {};
      }
      if (!it->is_string()) throw ParseError(where + ": field '" + name + "' must be a string");
      return it->get<std::string>();
    };
    VisitRecord r;
    r.patient_id = field("patient_id", false);
    r.visit_id = field("visit_id", true);
    r.date = field("date", false);
    r.symptoms_text = field("symptoms_text", false);
    r.anamnesis_text = field("anamnesis_text", false);
    r.icd_code = field("icd_code", true);
    if (!is_valid_icd(r.icd_code)) throw ParseError(where + ": malformed ICD code '" + r.icd_code + "'");
    if (!seen.insert(r.visit_id).second) throw InputError(where + ": duplicate visit_id '" + r.visit_id + "'");
    records.push_back(std::move(r));
  }
  return records;
}

void write_records(const std::filesystem::path& path, std::span<const VisitRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write record file " + path.string());
  for (const VisitRecord& r : records) out << record_to_json_line(r) << '\n';
  if (!out) throw InputError("failed writing record file " + path.string());
}

bool is_valid_icd(std::string_view code) {
  auto upper = [](char c) { return c >= 'A' && c <= 'Z'; };
  auto digit = [](char c) { return c >= '0' && c <= '9'; };
  auto alnum = [&](char c) { return upper(c) || digit(c) || (c >= 'a' && c <= 'z'); };
  if (code.size() < 3 || !upper(code[0]) || !digit(code[1]) || !digit(code[2])) return false;
  if (code.size() == 3) return true;
  if (code[3] != '.' || code.size() < 5 || code.size() > 8) return false;
  return std::all_of(code.begin() + 4, code.end(), alnum);
}

IcdCode parse_icd(std::string_view code) {
  if (!is_valid_icd(code)) throw ParseError("malformed ICD code '" + std::string(code) + "'");
  IcdCode c{std::string(code.substr(0, 3)), std::nullopt};
  if (code.size() > 3) c.specifier = std::string(code.substr(4));
  return c;
}

// ---------------------------------------------------------------------------
// Label spaces

LabelSpace::LabelSpace(std::vector<std::string> codes, LabelMode mode) : codes_(std::move(codes)), mode_(mode) {
  for (std::size_t i = 0; i < codes_.size(); ++i) {
    const IcdCode parsed = parse_icd(codes_[i]);
    if (mode_ == LabelMode::root && parsed.specifier) {
      throw InputError("root label space cannot contain dotted code " + codes_[i]);
    }
    if (!index_.emplace(codes_[i], i).second) throw InputError("duplicate label code " + codes_[i]);
  }
}

namespace {

// Codes by descending count, ties lexicographic.
std::vector<std::pair<std::string, std::size_t>> rank_codes(const std::map<std::string, std::size_t>& counts) {
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return ranked;
}

}  // namespace

LabelSpace LabelSpace::build(std::span<const VisitRecord> train, const LabelSpaceOptions& options) {
  if (train.empty()) throw InputError("cannot build a label space from zero records");
  if (options.coverage && !(*options.coverage > 0.0 && *options.coverage <= 1.0)) {
    throw ParameterError("coverage target must be in (0, 1]");
  }
  if (options.top_k && *options.top_k == 0) throw ParameterError("top_k must be positive");

  std::map<std::string, std::size_t> root_counts, exact_counts;
  for (const VisitRecord& r : train) {
    const IcdCode c = parse_icd(r.icd_code);
    ++root_counts[c.root];
    ++exact_counts[c.format()];
  }
  const auto ranked = rank_codes(root_counts);
  const double total = static_cast<double>(train.size());

  std::size_t take = ranked.size();
  if (options.top_k) take = std::min(take, *options.top_k);
  bool target_met = true;
  if (options.coverage) {
    const double needed = *options.coverage * total;
    std::size_t cumulative = 0, prefix = 0;
    while (prefix < take && static_cast<double>(cumulative) < needed - 1e-9 * total) {
      cumulative += ranked[prefix++].second;
    }
    target_met = static_cast<double>(cumulative) >= needed - 1e-9 * total;
    take = prefix;
  }

  std::vector<std::string> roots;
  std::size_t covered = 0;
  for (std::size_t i = 0; i < take; ++i) {
    roots.push_back(ranked[i].first);
    covered += ranked[i].second;
  }

  LabelSpace space;
  if (options.mode == LabelMode::root) {
    space = LabelSpace(std::move(roots), LabelMode::root);
  } else {
    const std::set<std::string> root_set(roots.begin(), roots.end());
    std::map<std::string, std::size_t> candidates;
    for (const auto& [code, count] : exact_counts) {
      if (root_set.count(code.substr(0, 3))) candidates.emplace(code, count);
    }
    const auto ranked_exact = rank_codes(candidates);
    std::vector<std::string> codes;
    covered = 0;
    for (std::size_t i = 0; i < ranked_exact.size() && i < options.extended_k; ++i) {
      codes.push_back(ranked_exact[i].first);
      covered += ranked_exact[i].second;
    }
    space = LabelSpace(std::move(codes), LabelMode::extended);
  }
  space.coverage_ = static_cast<double>(covered) / total;
  space.coverage_target_met_ = target_met;
  return space;
}

LabelSpace LabelSpace::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open label file " + path.string());
  std::vector<std::string> codes;
  std::string line;
  std::size_t line_no = 0;
  bool dotted = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!is_valid_icd(line)) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed ICD code '" + line + "'");
    }
    dotted = dotted || line.find('.') != std::string::npos;
    codes.push_back(line);
  }
  if (codes.size() < 2) throw FormatError(path.string() + ": a label space needs at least two codes");
  return LabelSpace(std::move(codes), dotted ? LabelMode::extended : LabelMode::root);
}

void LabelSpace::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write label file " + path.string());
  for (const std::string& c : codes_) out << c << '\n';
}

std::optional<std::size_t> LabelSpace::index_of(std::string_view code) const {
  auto it = index_.find(code);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> LabelSpace::label_of(std::string_view icd_code) const {
  if (!is_valid_icd(icd_code)) return std::nullopt;
  return index_of(mode_ == LabelMode::root ? icd_code.substr(0, 3) : icd_code);
}

LabeledRecords apply_label_space(std::span<const VisitRecord> records, const LabelSpace& space) {
  LabeledRecords out;
  for (const VisitRecord& r : records) {
    if (auto label = space.label_of(r.icd_code)) {
      out.records.push_back(r);
      out.labels.push_back(static_cast<std::int32_t>(*label));
    } else {
      out.excluded.push_back(r);
    }
  }
  return out;
}

std::pair<std::vector<VisitRecord>, std::vector<VisitRecord>> split_train_val(std::span<const VisitRecord> records,
                                                                              double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ParameterError("split ratio must be in (0, 1)");
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(records.size())));
  std::pair<std::vector<VisitRecord>, std::vector<VisitRecord>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? out.first : out.second).push_back(records[order[i]]);
  }
  return out;
}

}  // namespace poolbert
