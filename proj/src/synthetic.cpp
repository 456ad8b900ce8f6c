#include "poolbert/synthetic.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>

#include "poolbert/error.hpp"
#include "poolbert/rng.hpp"

namespace poolbert {

namespace {

constexpr const char* kOnsets[] = {"b", "br", "c", "ch", "d", "dr", "f", "g", "gl", "h", "k", "kr", "l", "m",
                                   "n", "p", "pl", "r", "s", "st", "t", "tr", "v", "z"};
constexpr const char* kNuclei[] = {"a", "e", "i", "o", "u", "ai", "ea", "io", "ou", "y"};
constexpr const char* kCodas[] = {"", "", "", "n", "r", "s", "l", "x", "m", "th"};

template <std::size_t N>
const char* pick(Rng& rng, const char* const (&table)[N]) {
  return table[rng.uniform_int(N)];
}

std::string invent_word(Rng& rng, std::size_t syllables) {
  std::string w;
  for (std::size_t s = 0; s < syllables; ++s) {
    w += pick(rng, kOnsets);
    w += pick(rng, kNuclei);
  }
  w += pick(rng, kCodas);
  return w;
}

std::vector<std::string> invent_words(Rng& rng, std::size_t count, std::size_t min_syl, std::size_t max_syl,
                                      std::set<std::string>& used) {
  std::vector<std::string> out;
  while (out.size() < count) {
    std::string w = invent_word(rng, min_syl + rng.uniform_int(max_syl - min_syl + 1));
    if (used.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

std::size_t uniform_between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.uniform_int(hi - lo + 1); }

std::string iso_date(std::size_t day_offset) {
  using namespace std::chrono;
  const year_month_day ymd{sys_days{year{2019} / January / 1} + days{static_cast<int>(day_offset)}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

}  // namespace

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ParameterError("synthetic spec: " + msg); };
  if (num_classes < 2 || num_classes > 100) fail("num_classes must be in [2, 100]");
  if (keywords_per_class == 0) fail("keywords_per_class must be positive");
  if (noise_vocab_size == 0) fail("noise_vocab_size must be positive");
  if (!(skew >= 0.0) || !std::isfinite(skew)) fail("skew must be a finite non-negative number");
  if (min_keywords == 0 || min_keywords > max_keywords) fail("need 1 <= min_keywords <= max_keywords");
  if (min_symptom_noise > max_symptom_noise) fail("min_symptom_noise > max_symptom_noise");
  if (min_anamnesis_words > max_anamnesis_words) fail("min_anamnesis_words > max_anamnesis_words");
}

std::string synthetic_code(std::size_t class_index) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "S%02zu", class_index);
  return buf;
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticData out;
  Rng vocab_rng(spec.seed);
  std::set<std::string> used;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    out.keywords.push_back(invent_words(vocab_rng, spec.keywords_per_class, 3, 4, used));
  }
  out.noise_vocabulary = invent_words(vocab_rng, spec.noise_vocab_size, 1, 2, used);
  out.shifted_noise_vocabulary = invent_words(vocab_rng, spec.noise_vocab_size, 1, 2, used);

  double norm = 0.0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    out.class_probabilities.push_back(1.0 / std::pow(static_cast<double>(c + 1), spec.skew));
    norm += out.class_probabilities.back();
  }
  for (double& p : out.class_probabilities) p /= norm;

  auto sample_class = [&](Rng& rng) {
    const double u = rng.uniform();
    double cumulative = 0.0;
    for (std::size_t c = 0; c + 1 < spec.num_classes; ++c) {
      cumulative += out.class_probabilities[c];
      if (u < cumulative) return c;
    }
    return spec.num_classes - 1;
  };

  auto make_split = [&](std::size_t n, const std::string& prefix, const std::vector<std::string>& noise,
                        Rng rng) {
    std::vector<VisitRecord> records;
    records.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t cls = sample_class(rng);
      const auto& pool = out.keywords[cls];
      std::vector<std::string> symptoms;
      const std::size_t k = uniform_between(rng, spec.min_keywords, spec.max_keywords);
      for (std::size_t j = 0; j < k; ++j) symptoms.push_back(pool[rng.uniform_int(pool.size())]);
      const std::size_t extra = uniform_between(rng, spec.min_symptom_noise, spec.max_symptom_noise);
      for (std::size_t j = 0; j < extra; ++j) {
        const std::size_t at = rng.uniform_int(symptoms.size() + 1);
        symptoms.insert(symptoms.begin() + static_cast<std::ptrdiff_t>(at), noise[rng.uniform_int(noise.size())]);
      }
      std::string anamnesis;
      const std::size_t a = uniform_between(rng, spec.min_anamnesis_words, spec.max_anamnesis_words);
      for (std::size_t j = 0; j < a; ++j) {
        if (j) anamnesis += ' ';
        anamnesis += noise[rng.uniform_int(noise.size())];
      }
      std::string symptom_text;
      for (std::size_t j = 0; j < symptoms.size(); ++j) {
        if (j) symptom_text += ' ';
        symptom_text += symptoms[j];
      }
      char pid[16];
      std::snprintf(pid, sizeof pid, "P%05zu", rng.uniform_int(100000));
      char vid[32];
      std::snprintf(vid, sizeof vid, "%s-%06zu", prefix.c_str(), i);
      records.push_back({pid, vid, iso_date(rng.uniform_int(730)), std::move(symptom_text), std::move(anamnesis),
                         synthetic_code(cls)});
    }
    return records;
  };

  Rng record_rng(spec.seed ^ 0x5eedULL);
  out.train = make_split(spec.train_size, "train", out.noise_vocabulary, record_rng.fork(1));
  out.test = make_split(spec.test_size, "test", spec.test_shift ? out.shifted_noise_vocabulary : out.noise_vocabulary,
                        record_rng.fork(2));
  return out;
}

}  // namespace poolbert
