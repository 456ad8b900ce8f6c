#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace poolbert {

inline constexpr std::size_t kMaxSequenceLength = 128;
inline constexpr std::size_t kMaxCharsPerWord = 100;
inline constexpr std::string_view kContinuationPrefix = "##";

// WordPiece vocabulary. Ids are dense; the five special tokens occupy ids 0..4
// in the order [PAD], [UNK], [CLS], [SEP], [MASK].
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::int32_t kMask = 4;
  static constexpr std::size_t kNumSpecial = 5;
  static constexpr std::array<std::string_view, kNumSpecial> kSpecialTokens = {
      "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

  /// Validates uniqueness and the special-token prefix.
  static Vocab from_tokens(std::vector<std::string> tokens);

  /// One token per line, line number = id.
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::int32_t id) const;
  std::optional<std::int32_t> find(std::string_view token) const;
  bool contains(std::string_view token) const { return find(token).has_value(); }
  static bool is_special(std::int32_t id) { return id >= 0 && id < static_cast<std::int32_t>(kNumSpecial); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct Encoding {
  std::vector<std::int32_t> ids;            // exactly max_len entries
  std::vector<std::uint8_t> attention_mask;  // 1 on non-[PAD] positions
  std::vector<std::int32_t> segment_ids;     // all 0
  std::size_t original_length = 0;           // tokens incl. [CLS]/[SEP], after truncation
  std::size_t word_pieces = 0;               // non-special tokens before truncation
};

struct VocabTrainingOptions {
  std::size_t vocab_size = 2000;
  std::size_t min_frequency = 2;
};

// Builds a vocabulary by frequency-ranked pair merging over normalised words.
//
// Every character is seeded as both a head piece and a "##" continuation
// piece. Each round merges the most frequent adjacent pair (ties: the
// lexicographically smaller (left, right) pair) and adds the merged piece,
// until the vocabulary is full or the best pair is rarer than min_frequency.
class VocabTrainer {
 public:
  void add_line(std::string_view line);
  void add_lines(std::istream& in);
  std::size_t distinct_words() const { return word_counts_.size(); }
  Vocab train(const VocabTrainingOptions& options) const;

 private:
  std::map<std::string, std::uint64_t> word_counts_;
};

Vocab train_vocab(std::span<const std::string> corpus, const VocabTrainingOptions& options);

/// Greedy longest-match-first segmentation of one normalised word. A word
/// with an unmatchable remainder, or longer than kMaxCharsPerWord code
/// points, yields a single [UNK].
std::vector<std::int32_t> wordpiece_word(std::string_view word, const Vocab& vocab);

/// Normalises and segments free text (no special tokens, no truncation).
std::vector<std::int32_t> tokenize(std::string_view text, const Vocab& vocab);

/// [CLS] pieces [SEP] [PAD]...; tail pieces are dropped to fit max_len.
Encoding encode(std::string_view text, const Vocab& vocab, std::size_t max_len = kMaxSequenceLength);

/// Drops special tokens and re-joins "##" continuations.
std::string decode(std::span<const std::int32_t> ids, const Vocab& vocab);

}  // namespace poolbert
