#include <gtest/gtest.h>

#include <set>

#include "charprobe/corpus_analyzer.hpp"
#include "corpus_oracle.hpp"
#include "test_util.hpp"

namespace charprobe {
namespace {

const TokenizationScheme& gpt2() {
  static const TokenizationScheme scheme =
      load_scheme(testing::fixture("gpt2/merges.txt"), testing::fixture("gpt2/vocab.json"));
  return scheme;
}

std::size_t dp(std::string_view a, std::string_view b) { return levenshtein<char>(a, b); }

TEST(Levenshtein, BandedCheckAgreesWithFullDp) {
  std::mt19937_64 rng(1);
  std::size_t close = 0;
  for (int k = 0; k < 10000; ++k) {
    auto base = testing::random_words(rng, 1, 5, 12, "abcd")[0];
    std::string other = base;
    switch (rng() % 4) {
      case 0: other[rng() % other.size()] = "abcd"[rng() % 4]; break;
      case 1: other.erase(rng() % other.size(), 1); break;
      case 2: other.insert(rng() % (other.size() + 1), 1, "abcd"[rng() % 4]); break;
      default: other = testing::random_words(rng, 1, 4, 13, "abcd")[0];
    }
    const auto full = dp(base, other);
    const int banded = edit_distance_upto1<char>(base, other);
    EXPECT_EQ(banded, int(std::min<std::size_t>(full, 2))) << base << " / " << other;
    close += full <= 1;
  }
  EXPECT_GT(close, 3000u);
}

TEST(FindOccurrences, SingleSubstitution) {
  auto m = find_occurrences("there is a dictionsry here", {"dictionary"});
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].surface, "dictionsry");
  EXPECT_EQ(m[0].distance, 1);
  EXPECT_TRUE(m[0].preceded_by_space);
}

TEST(FindOccurrences, BiggerWordIsNotAMatch) {
  EXPECT_TRUE(find_occurrences("the differentiation of", {"different"}).empty());
  EXPECT_TRUE(find_occurrences("undifferent", {"different"}).empty());
  EXPECT_EQ(find_occurrences("a different one", {"different"}).size(), 1u);
}

TEST(FindOccurrences, TrailingCharacterIsDropped) {
  for (std::string text : {"somethin'", "somethin\"", "(somethin", "\nsomethin, ok"}) {
    auto m = find_occurrences(text, {"something"});
    ASSERT_EQ(m.size(), 1u) << text;
    EXPECT_EQ(m[0].surface, "somethin");
    EXPECT_FALSE(m[0].preceded_by_space);
  }
  auto m = find_occurrences("said Something.", {"something"});
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].surface, "Something");
  EXPECT_EQ(m[0].distance, 0);
}

TEST(FindOccurrences, WhitespaceInsideIsRejected) {
  EXPECT_TRUE(find_occurrences("dict ionary", {"dictionary"}).empty());
  auto m = find_occurrences("dictionar y", {"dictionary"});
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].surface, "dictionar");
}

TEST(PseudoList, ProjectionAndProtection) {
  std::vector<std::string> dict{"protection", "projection", "objection", "projections", "Protection"};
  EXPECT_EQ(build_pseudo_list("projection", dict), (std::vector<std::string>{"protection", "projections"}));
  EXPECT_TRUE(build_pseudo_list("zzzzzzzz", dict).empty());
  EXPECT_EQ(prune_targets({"projection", "protection", "dictionary"}),
            (std::vector<std::string>{"projection", "dictionary"}));
}

TEST(PseudoList, MatchesAllPairsScan) {
  std::mt19937_64 rng(3);
  auto dict = testing::random_words(rng, 1000, 3, 7, "abcde");
  auto targets = testing::random_words(rng, 30, 4, 6, "abcde");
  for (const auto& t : targets) {
    std::vector<std::string> brute;
    std::set<std::string> seen;
    for (const auto& w : dict)
      if (dp(w, t) == 1 && seen.insert(w).second) brute.push_back(w);
    EXPECT_EQ(build_pseudo_list(t, dict), brute) << t;
  }
}

TEST(CountTokenizations, SingleOccurrence) {
  auto a = analyze_corpus({"one dictionary here"}, {"dictionary"}, {}, gpt2());
  ASSERT_EQ(a.stats.targets.size(), 1u);
  for (auto n : a.stats.targets[0].unique) EXPECT_LE(n, 1u);
  EXPECT_EQ(a.stats.targets[0].occurrences, 1u);
}

const std::vector<std::string> kTargets{"dictionary", "something", "projection", "different",
                                        "character",  "tokenization", "information", "schematics"};
const std::vector<std::string> kDictionary{"protection", "projections", "somethings", "characters", "schematic",
                                           "dictionary", "apple",       "table",      "indifferent"};

TEST(AnalyzeCorpus, MatchesInjectionOracleOnFiveMegabytes) {
  auto corpus = testing::synthetic_corpus(5u << 20, kTargets, kDictionary, 17);
  ASSERT_GE(corpus.text.size(), 5u << 20);
  auto analysis = analyze_corpus({corpus.text}, kTargets, kDictionary, gpt2());
  EXPECT_EQ(analysis.targets, kTargets);
  auto expected = testing::injection_oracle(corpus, kTargets, kDictionary, gpt2());
  ASSERT_EQ(analysis.stats.targets.size(), expected.targets.size());
  for (std::size_t t = 0; t < expected.targets.size(); ++t) {
    EXPECT_EQ(analysis.stats.targets[t].occurrences, expected.targets[t].occurrences) << kTargets[t];
    EXPECT_EQ(analysis.stats.targets[t].unique, expected.targets[t].unique) << kTargets[t];
  }
  EXPECT_EQ(analysis.stats, expected);
  for (const auto& t : analysis.stats.targets) {
    for (std::size_t c = 1; c <= kExactMatch; ++c) EXPECT_LE(t.unique[c], t.unique[c - 1]) << t.target;
    EXPECT_GT(t.unique[kAllMatches], 10u);
  }
}

TEST(AnalyzeCorpus, ShardedRunEqualsSingleShard) {
  auto corpus = testing::synthetic_corpus(1u << 20, kTargets, kDictionary, 5);
  auto single = analyze_corpus({corpus.text}, kTargets, kDictionary, gpt2(), 1);
  for (std::size_t n : {2u, 7u, 31u}) {
    auto shards = split_shards(corpus.text, n);
    std::string joined;
    for (auto s : shards) joined += s;
    ASSERT_EQ(joined, corpus.text);
    auto sharded = analyze_corpus(shards, kTargets, kDictionary, gpt2(), 4);
    EXPECT_EQ(sharded.stats, single.stats) << n << " shards";
    EXPECT_EQ(sharded.stats.to_json().dump(), single.stats.to_json().dump());
  }
}

TEST(AnalyzeCorpus, JsonSummaries) {
  VariabilityStats s;
  s.targets.push_back({"abcdefg", 100, {10, 8, 6, 4, 2, 3}});
  s.targets.push_back({"abcdefgh", 3000, {20, 18, 16, 14, 12, 5}});
  s.targets.push_back({"zzzzzzz", 0, {}});
  auto j = s.to_json();
  EXPECT_DOUBLE_EQ(j["aggregate"]["all_matches"]["mean"].get<double>(), 15.0);
  EXPECT_NEAR(j["aggregate"]["all_matches"]["std"].get<double>(), std::sqrt(50.0), 1e-12);
  EXPECT_DOUBLE_EQ(j["by_length"]["7"]["exact_match"]["mean"].get<double>(), 2.0);
  EXPECT_TRUE(j["by_occurrence_bucket"].contains("ln=4"));
  EXPECT_TRUE(j["by_occurrence_bucket"].contains("ln=8"));
  EXPECT_EQ(j["targets"].size(), 3u);
}

}  // namespace
}  // namespace charprobe
