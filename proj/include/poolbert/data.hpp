#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace poolbert {

struct VisitRecord {
  std::string patient_id;
  std::string visit_id;
  std::string date;  // YYYY-MM-DD
  std::string symptoms_text;
  std::string anamnesis_text;
  std::string icd_code;

  bool operator==(const VisitRecord&) const = default;
};

/// symptoms + " " + anamnesis, skipping empty fields.
std::string assemble_text(const VisitRecord& record);

/// JSON-lines, one record per line, field names as in VisitRecord. Reading
/// validates ICD codes and visit_id uniqueness; errors carry the line number.
std::vector<VisitRecord> read_records(const std::filesystem::path& path);
void write_records(const std::filesystem::path& path, std::span<const VisitRecord> records);
std::string record_to_json_line(const VisitRecord& record);

// ICD-10 style code: one uppercase letter, two digits, optionally "." and
// 1-4 alphanumerics.
struct IcdCode {
  std::string root;
  std::optional<std::string> specifier;

  std::string format() const { return specifier ? root + "." + *specifier : root; }
};

bool is_valid_icd(std::string_view code);
/// ParseError naming the offending string when malformed.
IcdCode parse_icd(std::string_view code);

enum class LabelMode { root, extended };

struct LabelSpaceOptions {
  LabelMode mode = LabelMode::root;
  /// Upper bound on the number of root codes.
  std::optional<std::size_t> top_k;
  /// Smallest frequency-ranked prefix of root codes whose visit share
  /// reaches this target (capped by top_k when both are set).
  std::optional<double> coverage;
  /// Extended mode: number of exact codes kept.
  std::size_t extended_k = 1000;
};

class LabelSpace {
 public:
  LabelSpace() = default;
  LabelSpace(std::vector<std::string> codes, LabelMode mode);

  /// Ranks codes by visit count (ties: lexicographic). Root mode takes the
  /// top-K / coverage prefix of root codes; extended mode expands those roots
  /// to their observed exact codes (dotted variants and the bare root) and
  /// keeps the extended_k most frequent. InputError on an empty record set.
  static LabelSpace build(std::span<const VisitRecord> train, const LabelSpaceOptions& options);

  /// One code per line, line = index. The mode is extended if any code has a dot.
  static LabelSpace load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return codes_.size(); }
  LabelMode mode() const { return mode_; }
  const std::vector<std::string>& codes() const { return codes_; }
  const std::string& code(std::size_t index) const { return codes_.at(index); }
  std::optional<std::size_t> index_of(std::string_view code) const;

  /// Label of a raw record code under this space's mode (root mode strips
  /// the specifier), or nullopt when outside the space.
  std::optional<std::size_t> label_of(std::string_view icd_code) const;

  /// Fraction of the build set's visits that fall inside the space.
  double coverage() const { return coverage_; }
  /// Whether a requested coverage target was reached (true when none given).
  bool coverage_target_met() const { return coverage_target_met_; }

 private:
  std::vector<std::string> codes_;
  std::map<std::string, std::size_t, std::less<>> index_;
  LabelMode mode_ = LabelMode::root;
  double coverage_ = 0.0;
  bool coverage_target_met_ = true;
};

struct LabeledRecords {
  std::vector<VisitRecord> records;
  std::vector<std::int32_t> labels;
  std::vector<VisitRecord> excluded;  // codes outside the label space
};

/// Drops records outside the space; `excluded` lists them.
LabeledRecords apply_label_space(std::span<const VisitRecord> records, const LabelSpace& space);

/// Seeded uniform partition; |train| = round(ratio * n). ParameterError
/// unless 0 < ratio < 1.
std::pair<std::vector<VisitRecord>, std::vector<VisitRecord>> split_train_val(
    std::span<const VisitRecord> records, double ratio, std::uint64_t seed);

}  // namespace poolbert
