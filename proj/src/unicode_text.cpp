#include "poolbert/unicode_text.hpp"

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include "poolbert/error.hpp"

namespace poolbert::text {
namespace {

bool is_punctuation(UChar32 c) {
  // ASCII symbols count as punctuation, as in the BERT basic tokenizer.
  if ((c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) ||
      (c >= 123 && c <= 126)) {
    return true;
  }
  return u_ispunct(c) != 0;
}

bool is_space(UChar32 c) { return u_isUWhiteSpace(c) != 0; }

bool is_dropped(UChar32 c) {
  if (c == 0 || c == 0xFFFD) return true;
  const int8_t type = u_charType(c);
  return type == U_CONTROL_CHAR || type == U_FORMAT_CHAR;
}

}  // namespace

std::vector<std::string> normalize_words(std::string_view utf8) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw Error("ICU NFC normalizer unavailable");
  icu::UnicodeString source =
      icu::UnicodeString::fromUTF8(icu::StringPiece(utf8.data(), static_cast<int32_t>(utf8.size())));
  icu::UnicodeString normalized = nfc->normalize(source, status);
  if (U_FAILURE(status)) throw InputError("text could not be NFC-normalised");
  normalized.toLower(icu::Locale::getRoot());
  // Lowercasing can produce decomposed sequences (e.g. U+0130).
  normalized = nfc->normalize(normalized, status);

  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  };
  for (int32_t i = 0; i < normalized.length();) {
    const UChar32 c = normalized.char32At(i);
    i += U16_LENGTH(c);
    if (is_space(c)) {
      flush();
      continue;
    }
    if (is_dropped(c)) continue;
    std::string encoded;
    icu::UnicodeString(c).toUTF8String(encoded);
    if (is_punctuation(c)) {
      flush();
      words.push_back(std::move(encoded));
      continue;
    }
    current += encoded;
  }
  flush();
  return words;
}

std::string normalize(std::string_view utf8) {
  std::string joined;
  for (const std::string& w : normalize_words(utf8)) {
    if (!joined.empty()) joined += ' ';
    joined += w;
  }
  return joined;
}

std::vector<std::string> split_code_points(std::string_view utf8) {
  std::vector<std::string> out;
  const auto* bytes = reinterpret_cast<const uint8_t*>(utf8.data());
  const int32_t length = static_cast<int32_t>(utf8.size());
  for (int32_t i = 0; i < length;) {
    const int32_t start = i;
    UChar32 c;
    U8_NEXT(bytes, i, length, c);
    if (c < 0) {
      out.emplace_back("\xEF\xBF\xBD");
    } else {
      out.emplace_back(utf8.substr(static_cast<std::size_t>(start), static_cast<std::size_t>(i - start)));
    }
  }
  return out;
}

}  // namespace poolbert::text
