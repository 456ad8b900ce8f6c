#include "poolbert/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <set>
#include <tuple>

#include "poolbert/error.hpp"
#include "poolbert/unicode_text.hpp"

namespace poolbert {

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kNumSpecial) {
    throw FormatError("vocabulary has " + std::to_string(tokens.size()) +
                      " tokens, fewer than the special tokens");
  }
  for (std::size_t i = 0; i < kNumSpecial; ++i) {
    if (tokens[i] != kSpecialTokens[i]) {
      throw FormatError("vocabulary line " + std::to_string(i + 1) + " must be " +
                        std::string(kSpecialTokens[i]) + ", found '" + tokens[i] + "'");
    }
  }
  Vocab vocab;
  vocab.index_.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].empty()) throw FormatError("empty token at id " + std::to_string(i));
    if (!vocab.index_.emplace(tokens[i], static_cast<std::int32_t>(i)).second) {
      throw FormatError("duplicate token '" + tokens[i] + "' at id " + std::to_string(i));
    }
  }
  vocab.tokens_ = std::move(tokens);
  return vocab;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write vocabulary file " + path.string());
  for (const std::string& t : tokens_) out << t << '\n';
  if (!out) throw InputError("failed writing vocabulary file " + path.string());
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<std::int32_t> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

// ---------------------------------------------------------------------------
// Training

void VocabTrainer::add_line(std::string_view line) {
  for (std::string& w : text::normalize_words(line)) ++word_counts_[std::move(w)];
}

void VocabTrainer::add_lines(std::istream& in) {
  std::string line;
  while (std::getline(in, line)) add_line(line);
}

namespace {

struct Word {
  std::vector<std::uint32_t> symbols;
  std::uint64_t count;
};

std::uint64_t pair_key(std::uint32_t left, std::uint32_t right) {
  return (static_cast<std::uint64_t>(left) << 32) | right;
}

std::string strip_prefix(const std::string& piece) {
  return piece.rfind(kContinuationPrefix, 0) == 0 ? piece.substr(kContinuationPrefix.size()) : piece;
}

}  // namespace

Vocab VocabTrainer::train(const VocabTrainingOptions& options) const {
  if (word_counts_.empty()) throw InputError("cannot train a vocabulary on an empty corpus");
  if (options.vocab_size <= Vocab::kNumSpecial) {
    throw ParameterError("vocab_size must exceed the " + std::to_string(Vocab::kNumSpecial) +
                         " special tokens");
  }

  // Symbol table: piece strings by id. Pieces are interned so pair counting
  // works on integers.
  std::vector<std::string> symbols;
  std::unordered_map<std::string, std::uint32_t> symbol_ids;
  auto intern = [&](const std::string& piece) {
    auto [it, inserted] = symbol_ids.emplace(piece, static_cast<std::uint32_t>(symbols.size()));
    if (inserted) symbols.push_back(piece);
    return it->second;
  };

  std::vector<Word> words;
  std::map<std::string, std::uint64_t> char_counts;
  for (const auto& [word, count] : word_counts_) {
    const std::vector<std::string> chars = text::split_code_points(word);
    if (chars.size() > kMaxCharsPerWord) continue;  // always [UNK] at encode time
    for (const std::string& c : chars) char_counts[c] += count;
  }

  // Alphabet, most frequent characters first; both head and continuation
  // forms are seeded so any in-alphabet character encodes in any position.
  std::vector<std::pair<std::string, std::uint64_t>> alphabet(char_counts.begin(), char_counts.end());
  std::stable_sort(alphabet.begin(), alphabet.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t alphabet_budget = (options.vocab_size - Vocab::kNumSpecial) / 2;
  std::set<std::string> kept_chars;
  for (std::size_t i = 0; i < alphabet.size() && i < alphabet_budget; ++i) kept_chars.insert(alphabet[i].first);

  std::vector<std::string> vocab_tokens(Vocab::kSpecialTokens.begin(), Vocab::kSpecialTokens.end());
  std::set<std::string> in_vocab(vocab_tokens.begin(), vocab_tokens.end());
  for (const std::string& c : kept_chars) {
    for (std::string piece : {c, std::string(kContinuationPrefix) + c}) {
      if (in_vocab.insert(piece).second) vocab_tokens.push_back(piece);
    }
  }

  for (const auto& [word, count] : word_counts_) {
    const std::vector<std::string> chars = text::split_code_points(word);
    if (chars.size() > kMaxCharsPerWord) continue;
    bool representable = true;
    for (const std::string& c : chars) representable = representable && kept_chars.count(c) > 0;
    if (!representable) continue;
    Word w{{}, count};
    for (std::size_t i = 0; i < chars.size(); ++i) {
      w.symbols.push_back(intern(i == 0 ? chars[i] : std::string(kContinuationPrefix) + chars[i]));
    }
    words.push_back(std::move(w));
  }

  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  auto add_pairs = [&](const Word& w, std::int64_t sign) {
    for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) {
      std::int64_t& c = pair_counts[pair_key(w.symbols[i], w.symbols[i + 1])];
      c += sign * static_cast<std::int64_t>(w.count);
    }
  };
  for (const Word& w : words) add_pairs(w, +1);

  while (vocab_tokens.size() < options.vocab_size) {
    std::uint64_t best_key = 0;
    std::int64_t best_count = 0;
    bool found = false;
    for (const auto& [key, count] : pair_counts) {
      if (count <= 0) continue;
      if (!found || count > best_count) {
        best_key = key;
        best_count = count;
        found = true;
      } else if (count == best_count) {
        const auto lhs = std::tie(symbols[key >> 32], symbols[key & 0xffffffffu]);
        const auto rhs = std::tie(symbols[best_key >> 32], symbols[best_key & 0xffffffffu]);
        if (lhs < rhs) best_key = key;
      }
    }
    if (!found || best_count < static_cast<std::int64_t>(options.min_frequency)) break;

    const std::uint32_t left = static_cast<std::uint32_t>(best_key >> 32);
    const std::uint32_t right = static_cast<std::uint32_t>(best_key & 0xffffffffu);
    const std::string merged = symbols[left] + strip_prefix(symbols[right]);
    const std::uint32_t merged_id = intern(merged);
    if (in_vocab.insert(merged).second) vocab_tokens.push_back(merged);

    for (Word& w : words) {
      bool touches = false;
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) {
        if (w.symbols[i] == left && w.symbols[i + 1] == right) {
          touches = true;
          break;
        }
      }
      if (!touches) continue;
      add_pairs(w, -1);
      std::vector<std::uint32_t> rewritten;
      rewritten.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size(); ++i) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
          rewritten.push_back(merged_id);
          ++i;
        } else {
          rewritten.push_back(w.symbols[i]);
        }
      }
      w.symbols = std::move(rewritten);
      add_pairs(w, +1);
    }
    pair_counts.erase(best_key);
  }
  return Vocab::from_tokens(std::move(vocab_tokens));
}

Vocab train_vocab(std::span<const std::string> corpus, const VocabTrainingOptions& options) {
  VocabTrainer trainer;
  for (const std::string& line : corpus) trainer.add_line(line);
  return trainer.train(options);
}

// ---------------------------------------------------------------------------
// Encoding

std::vector<std::int32_t> wordpiece_word(std::string_view word, const Vocab& vocab) {
  const std::vector<std::string> chars = text::split_code_points(word);
  if (chars.empty()) return {};
  if (chars.size() > kMaxCharsPerWord) return {Vocab::kUnk};
  std::vector<std::int32_t> pieces;
  std::size_t start = 0;
  std::string candidate;
  while (start < chars.size()) {
    std::optional<std::int32_t> match;
    std::size_t end = chars.size();
    for (; end > start; --end) {
      candidate.assign(start > 0 ? kContinuationPrefix : std::string_view{});
      for (std::size_t i = start; i < end; ++i) candidate += chars[i];
      match = vocab.find(candidate);
      if (match) break;
    }
    if (!match) return {Vocab::kUnk};
    pieces.push_back(*match);
    start = end;
  }
  return pieces;
}

std::vector<std::int32_t> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<std::int32_t> ids;
  for (const std::string& w : text::normalize_words(text)) {
    const std::vector<std::int32_t> pieces = wordpiece_word(w, vocab);
    ids.insert(ids.end(), pieces.begin(), pieces.end());
  }
  return ids;
}

Encoding encode(std::string_view text, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 3) throw ParameterError("encode: max_len must be at least 3");
  const std::vector<std::int32_t> pieces = tokenize(text, vocab);
  const std::size_t kept = std::min(pieces.size(), max_len - 2);
  Encoding enc;
  enc.word_pieces = pieces.size();
  enc.original_length = kept + 2;
  enc.ids.assign(max_len, Vocab::kPad);
  enc.attention_mask.assign(max_len, 0);
  enc.segment_ids.assign(max_len, 0);
  enc.ids[0] = Vocab::kCls;
  std::copy_n(pieces.begin(), kept, enc.ids.begin() + 1);
  enc.ids[kept + 1] = Vocab::kSep;
  std::fill_n(enc.attention_mask.begin(), kept + 2, std::uint8_t{1});
  return enc;
}

std::string decode(std::span<const std::int32_t> ids, const Vocab& vocab) {
  std::string out;
  for (std::int32_t id : ids) {
    const std::string& piece = vocab.token(id);
    if (Vocab::is_special(id)) continue;
    if (piece.rfind(kContinuationPrefix, 0) == 0) {
      out += piece.substr(kContinuationPrefix.size());
    } else {
      if (!out.empty()) out += ' ';
      out += piece;
    }
  }
  return out;
}

}  // namespace poolbert
