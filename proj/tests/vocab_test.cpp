#include <gtest/gtest.h>

#include <map>
#include <sstream>
#include <set>

#include "charprobe/vocab.hpp"
#include "test_util.hpp"

namespace charprobe {
namespace {

using testing::vocab_from_surfaces;

std::vector<std::string> surfaces(const Vocabulary& v) {
  std::vector<std::string> out;
  for (const auto& e : v) out.push_back(e.surface);
  return out;
}

TEST(Vocab, LoadsWellFormedFile) {
  testing::TempDir dir;
  testing::write_text(dir / "v.tsv", "0\tĠcat\tcat\t120\n1\tdog\t\t0\n2\ta\\tb\t\t3\n");
  auto v = load_vocab(dir / "v.tsv");
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0].surface, "Ġcat");
  EXPECT_EQ(v[0].lemma, "cat");
  EXPECT_EQ(v[0].frequency, 120u);
  EXPECT_EQ(v[2].surface, "a\tb");
  EXPECT_EQ(v.by_id(1).surface, "dog");
}

TEST(Vocab, RejectsDuplicateIds) {
  std::istringstream in("7\tcat\t\t1\n7\tdog\t\t1\n");
  try {
    parse_vocab(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicateId);
  }
}

TEST(Vocab, RejectsShortRowWithLineNumber) {
  std::istringstream in("0\tcat\t\t1\n1\tdog\n");
  try {
    parse_vocab(in, "v.tsv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MalformedRow);
    EXPECT_NE(std::string(e.what()).find("v.tsv:2"), std::string::npos);
  }
}

TEST(Vocab, SaveLoadPreservesEscapedSurfaces) {
  testing::TempDir dir;
  Vocabulary v({{3, "a\nb", "x", 5}, {9, "Ġq\\t", "", 0}});
  save_vocab(v, dir / "v.tsv");
  auto back = load_vocab(dir / "v.tsv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].surface, "a\nb");
  EXPECT_EQ(back[1].surface, "Ġq\\t");
  EXPECT_EQ(back[1].id, 9u);
}

TEST(Vocab, FilterKeepsAlphabeticAfterOneMarker) {
  auto v = vocab_from_surfaces({"Ġcat", "cat", "c4t", "Ġ", "##ing"});
  auto kept = filter_alphabetic(v, Alphabet::english());
  EXPECT_EQ(surfaces(kept), (std::vector<std::string>{"Ġcat", "cat", "##ing"}));
}

TEST(Vocab, FilterKeepsSubwordPieces) {
  auto v = vocab_from_surfaces({"d", "ictionary"});
  EXPECT_EQ(filter_alphabetic(v, Alphabet::english()).size(), 2u);
}

TEST(Vocab, FilterStripsAtMostOneMarker) {
  auto v = vocab_from_surfaces({"ĠĠcat", "##Ġx", "▁Cat"});
  EXPECT_EQ(surfaces(filter_alphabetic(v, Alphabet::english())), (std::vector<std::string>{"▁Cat"}));
}

TEST(Vocab, TopFrequencyThenFilter) {
  std::mt19937_64 rng(3);
  std::vector<VocabEntry> entries;
  auto words = testing::random_words(rng, 400, 2, 8);
  for (std::size_t i = 0; i < words.size(); ++i) {
    auto w = words[i];
    if (i % 7 == 0) w += "1";
    entries.push_back({TokenId(i), w, "", std::uint64_t(rng() % 100000)});
  }
  Vocabulary v(std::move(entries));
  auto top = top_by_frequency(v, 40);
  ASSERT_EQ(top.size(), 40u);
  std::uint64_t min_top = ~0ull;
  for (const auto& e : top) min_top = std::min(min_top, e.frequency);
  std::size_t above = 0;
  for (const auto& e : v) above += e.frequency > min_top;
  EXPECT_LT(above, 40u);
  auto filtered = filter_alphabetic(top, Alphabet::english());
  EXPECT_LE(filtered.size(), 40u);
  for (const auto& e : filtered) EXPECT_TRUE(v.contains(e.id));
}

TEST(Vocab, FilterIsIdempotentAndSound) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto words = testing::random_words(rng, 200, 1, 6, "abcxyz19-Ġ");
    std::vector<std::string> with_markers;
    for (auto& w : words) with_markers.push_back((rng() % 3 == 0 ? "##" : "") + w);
    auto v = vocab_from_surfaces(with_markers);
    auto once = filter_alphabetic(v, Alphabet::english());
    auto twice = filter_alphabetic(once, Alphabet::english());
    EXPECT_EQ(surfaces(once), surfaces(twice));
    for (const auto& e : once)
      for (char32_t c : utf8::decode(strip_marker(e.surface))) EXPECT_TRUE(Alphabet::english().contains(c));
  }
}

TEST(Vocab, DeriveAlphabetByTokenCount) {
  auto v = vocab_from_surfaces({"ab", "ba", "aa"});
  EXPECT_EQ(derive_alphabet(v, 3).characters, (std::vector<char32_t>{U'a'}));
  EXPECT_EQ(derive_alphabet(v, 2).characters, (std::vector<char32_t>{U'a', U'b'}));
  EXPECT_THROW(derive_alphabet(v, 4), Error);
}

TEST(Vocab, DeriveAlphabetIgnoresMarkersAndWhitespace) {
  auto v = vocab_from_surfaces({"Ġa", "##a", "▁a", "a b"});
  auto a = derive_alphabet(v, 1);
  EXPECT_EQ(a.characters, (std::vector<char32_t>{U'a', U'b'}));
}

TEST(Vocab, DeriveAlphabetMatchesBruteForceOnCyrillic) {
  std::mt19937_64 rng(17);
  // Skewed letter distribution so that some letters fall below the threshold.
  std::u32string letters;
  for (char32_t c = 0x430; c <= 0x44F; ++c)
    for (int k = 0; k < int(c - 0x42F) % 6 + 1; ++k) letters.push_back(c);
  std::uniform_int_distribution<std::size_t> pick(0, letters.size() - 1);
  std::uniform_int_distribution<int> len(4, 10);
  std::vector<std::string> words;
  for (int i = 0; i < 1000; ++i) {
    std::u32string w;
    for (int k = len(rng); k > 0; --k) w.push_back(letters[pick(rng)]);
    words.push_back(utf8::encode(w));
  }
  auto v = vocab_from_surfaces(words);

  std::map<char32_t, int> brute;
  std::set<std::string> distinct(words.begin(), words.end());
  for (const auto& w : distinct) {
    auto cps = utf8::decode(w);
    std::set<char32_t> seen(cps.begin(), cps.end());
    for (auto c : seen) ++brute[c];
  }
  std::vector<char32_t> expected;
  for (auto [c, n] : brute)
    if (n >= 250) expected.push_back(c);
  ASSERT_FALSE(expected.empty());
  ASSERT_LT(expected.size(), brute.size());
  EXPECT_EQ(derive_alphabet(v, 250, "cyrillic").characters, expected);
}

TEST(Vocab, DeriveAlphabetIsMonotoneInThreshold) {
  std::mt19937_64 rng(23);
  auto v = vocab_from_surfaces(testing::random_words(rng, 300, 1, 5, "aaaabbbcdeffz"));
  for (std::size_t k1 = 1; k1 < 120; k1 += 7)
    for (std::size_t k2 = k1; k2 < 120; k2 += 13) {
      std::vector<char32_t> big, small;
      try {
        big = derive_alphabet(v, k1).characters;
        small = derive_alphabet(v, k2).characters;
      } catch (const Error&) {
        continue;
      }
      EXPECT_TRUE(std::includes(big.begin(), big.end(), small.begin(), small.end()));
    }
}

TEST(Vocab, CaseFolding) {
  EXPECT_EQ(utf8::simple_lower(U'Q'), U'q');
  EXPECT_EQ(utf8::simple_lower(U'Ж'), U'ж');
  EXPECT_EQ(utf8::simple_lower(U'Ё'), U'ё');
  EXPECT_EQ(utf8::simple_lower(U'Σ'), U'σ');
  EXPECT_EQ(utf8::simple_lower(U'É'), U'é');
  EXPECT_EQ(utf8::simple_lower(U'Ł'), U'ł');
  EXPECT_EQ(utf8::simple_lower(U'×'), U'×');
  EXPECT_TRUE(Alphabet::english().contains(U'C'));
  EXPECT_FALSE(Alphabet::from_string("cs", "abc", true).contains(U'C'));
}

}  // namespace
}  // namespace charprobe
