#pragma once

#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "charprobe/embedding_store.hpp"
#include "test_util.hpp"

namespace charprobe::testing {

// Row i = per-letter counts of words[i] over `letters`, plus N(0, sigma).
inline EmbeddingTable count_embeddings(const std::vector<std::string>& words, const std::string& letters, float sigma,
                                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, sigma);
  std::vector<float> values;
  for (const auto& w : words) {
    std::vector<float> counts(letters.size(), 0.0f);
    for (char c : w) counts[letters.find(c)] += 1.0f;
    for (float c : counts) values.push_back(c + noise(rng));
  }
  return EmbeddingTable(std::uint32_t(words.size()), std::uint32_t(letters.size()), values, "letters");
}

inline std::vector<std::string> unique_words(std::mt19937_64& rng, std::size_t n, int lo, int hi,
                                             const std::string& letters) {
  std::set<std::string> seen;
  std::vector<std::string> out;
  while (out.size() < n)
    for (auto& w : random_words(rng, n - out.size(), lo, hi, letters))
      if (seen.insert(w).second) out.push_back(w);
  return out;
}

// Words whose i-th letter has weight skew^i.
inline std::vector<std::string> skewed_words(std::mt19937_64& rng, std::size_t n, int lo, int hi,
                                             const std::string& letters, double skew) {
  std::vector<double> weight;
  for (std::size_t i = 0; i < letters.size(); ++i) weight.push_back(std::pow(skew, double(i)));
  std::discrete_distribution<int> pick(weight.begin(), weight.end());
  std::set<std::string> seen;
  std::vector<std::string> out;
  while (out.size() < n) {
    std::string w;
    for (int k = lo + int(rng() % std::uint64_t(hi - lo + 1)); k > 0; --k) w += letters[std::size_t(pick(rng))];
    if (seen.insert(w).second) out.push_back(w);
  }
  return out;
}

// Vocabulary of base words plus fragments of them, so many tokens are
// substrings of others.
inline std::vector<std::string> substring_vocab(std::mt19937_64& rng, std::size_t n_base, std::size_t n_total,
                                                const std::string& letters, double skew = 1.0) {
  auto base = skewed_words(rng, n_base, 5, 8, letters, skew);
  std::set<std::string> seen(base.begin(), base.end());
  std::vector<std::string> out = base;
  while (out.size() < n_total) {
    const auto& w = base[rng() % base.size()];
    std::size_t len = 2 + rng() % 3, at = rng() % (w.size() - len + 1);
    auto frag = rng() % 3 ? w.substr(at, len) : skewed_words(rng, 1, 2, 4, letters, skew)[0];
    if (seen.insert(frag).second) out.push_back(frag);
  }
  return out;
}

}  // namespace charprobe::testing
