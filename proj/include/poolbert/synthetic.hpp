#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "poolbert/data.hpp"

namespace poolbert {

// Clinical-style synthetic visits. Each class owns a pool of invented
// keywords (pools are pairwise disjoint and disjoint from the noise
// vocabulary); a visit's symptoms mention 2-6 keywords of its class mixed
// with noise words, its anamnesis is noise only. Class frequencies follow a
// Zipf law with exponent `skew` (0 = uniform).
struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t keywords_per_class = 6;
  std::size_t noise_vocab_size = 300;
  double skew = 1.0;
  std::size_t min_keywords = 2;
  std::size_t max_keywords = 6;
  std::size_t min_symptom_noise = 0;
  std::size_t max_symptom_noise = 10;
  std::size_t min_anamnesis_words = 2;
  std::size_t max_anamnesis_words = 24;
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  std::uint64_t seed = 42;
  /// Test anamnesis/noise drawn from a separate noise vocabulary.
  bool test_shift = false;

  void validate() const;
};

struct SyntheticData {
  std::vector<VisitRecord> train;
  std::vector<VisitRecord> test;
  std::vector<double> class_probabilities;
  std::vector<std::vector<std::string>> keywords;  // per class
  std::vector<std::string> noise_vocabulary;
  std::vector<std::string> shifted_noise_vocabulary;
};

/// "S00", "S01", ...
std::string synthetic_code(std::size_t class_index);

SyntheticData generate_synthetic(const SyntheticSpec& spec);

}  // namespace poolbert
