#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace poolbert::text {

/// NFC, lowercase, control characters dropped, punctuation split into
/// standalone words, whitespace collapsed. Returns the resulting words.
std::vector<std::string> normalize_words(std::string_view utf8);

/// normalize_words joined with single spaces.
std::string normalize(std::string_view utf8);

/// Splits a UTF-8 string into code points, each as its own UTF-8 string.
/// Invalid sequences become U+FFFD.
std::vector<std::string> split_code_points(std::string_view utf8);

}  // namespace poolbert::text
