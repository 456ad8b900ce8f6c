#pragma once

// Small clinical-style corpus with mixed case and irregular spacing, shared
// by the tokenizer tests and the acceptance suite.

#include <cctype>
#include <cstdint>
#include <string>
#include <vector>

#include "poolbert/rng.hpp"

namespace reference {

inline std::vector<std::string> synthetic_lines(std::size_t n, std::uint64_t seed) {
  const std::vector<std::string> words = {"fever", "cough", "pain", "chest", "head",  "nausea", "rash",
                                          "since", "three", "days", "acute", "mild",  "severe", "throat",
                                          "back",  "x-ray", "t:",    "38.5", "denies", "smoker"};
  poolbert::Rng rng(seed);
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < n; ++i) {
    std::string line;
    const std::size_t len = 3 + rng.uniform_int(10);
    for (std::size_t j = 0; j < len; ++j) {
      if (j) line += rng.bernoulli(0.2) ? "  " : " ";
      std::string w = words[rng.uniform_int(words.size())];
      if (rng.bernoulli(0.2)) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
      line += w;
    }
    lines.push_back(line);
  }
  return lines;
}

}  // namespace reference
