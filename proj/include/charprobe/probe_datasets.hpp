#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "charprobe/error.hpp"
#include "charprobe/rng.hpp"
#include "charprobe/utf8.hpp"
#include "charprobe/vocab.hpp"

namespace charprobe {

struct CharExample {
  TokenId token = 0;
  int label = 0;

  friend bool operator==(const CharExample&, const CharExample&) = default;
};

/// Balanced presence/absence dataset for one target character.
struct CharDataset {
  char32_t target = 0;
  std::vector<CharExample> examples;
  bool case_sensitive = false;
  std::uint64_t seed = 0;
};

struct SubstringExample {
  TokenId u = 0;  // candidate substring
  TokenId v = 0;  // superstring; grouping key for splits
  int label = 0;

  friend bool operator==(const SubstringExample&, const SubstringExample&) = default;
};

struct SubstringDataset {
  std::vector<SubstringExample> examples;
  std::uint64_t seed = 0;
  // Negatives drawn with replacement because same-length candidates ran out.
  std::size_t negatives_with_replacement = 0;
  // Positives dropped because no same-length non-substring token exists.
  std::size_t positives_dropped = 0;
};

enum class GroupKey { Lemma, Token, Superstring };

inline const char* to_string(GroupKey k) {
  switch (k) {
    case GroupKey::Lemma: return "lemma";
    case GroupKey::Token: return "token";
    case GroupKey::Superstring: return "superstring";
  }
  return "?";
}

/// Example indices on each side of a grouped split; both lists ascending.
struct SplitPlan {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  double ratio_target = 0.8;
  GroupKey group_key = GroupKey::Lemma;

  double train_fraction() const {
    auto total = train.size() + test.size();
    return total == 0 ? 0.0 : double(train.size()) / double(total);
  }
};

inline constexpr double kSplitTolerance = 0.05;

/// True when `c` occurs in the marker-stripped surface (case-folded unless
/// `case_sensitive`).
inline bool contains_char(std::string_view surface, char32_t c, bool case_sensitive) {
  auto chars = normalized_chars(surface, case_sensitive);
  if (!case_sensitive) c = utf8::simple_lower(c);
  return chars.find(c) != std::u32string::npos;
}

/// All positives, plus an equal number of negatives undersampled without
/// replacement (or the reverse when negatives are scarcer). Examples keep
/// vocabulary order.
inline CharDataset build_char_dataset(const Vocabulary& vocab, char32_t target, bool case_sensitive,
                                      std::uint64_t seed) {
  if (vocab.empty()) throw Error(ErrorCode::InvalidArgument, "empty vocabulary");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < vocab.size(); ++i)
    (contains_char(vocab[i].surface, target, case_sensitive) ? pos : neg).push_back(i);
  const auto name = utf8::encode(target);
  if (pos.empty()) throw Error(ErrorCode::NoPositives, "no token contains '" + name + "'");
  if (neg.empty()) throw Error(ErrorCode::NoNegatives, "every token contains '" + name + "'");

  Rng rng(derive_seed(seed, {target}));
  auto& larger = pos.size() > neg.size() ? pos : neg;
  const auto keep = std::min(pos.size(), neg.size());
  std::shuffle(larger.begin(), larger.end(), rng);
  larger.resize(keep);
  std::sort(larger.begin(), larger.end());

  std::vector<std::size_t> chosen;
  chosen.reserve(2 * keep);
  std::merge(pos.begin(), pos.end(), neg.begin(), neg.end(), std::back_inserter(chosen));
  std::unordered_set<std::size_t> positive(pos.begin(), pos.end());

  CharDataset ds{target, {}, case_sensitive, seed};
  ds.examples.reserve(chosen.size());
  for (auto i : chosen) ds.examples.push_back({vocab[i].id, positive.count(i) ? 1 : 0});
  return ds;
}

/// Assigns whole groups to train or test. Groups are visited in a seeded
/// shuffle and packed into train first-fit until the train count reaches
/// `ratio * total`; a group that would push train past the tolerance band
/// goes to test instead.
inline SplitPlan split_by_groups(const std::vector<std::string>& group_of_example, double ratio,
                                 std::uint64_t seed, GroupKey key) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw Error(ErrorCode::InvalidArgument, "ratio must lie in (0, 1)");
  const auto total = group_of_example.size();
  if (total == 0) throw Error(ErrorCode::EmptySplit, "nothing to split");

  std::unordered_map<std::string_view, std::size_t> group_index;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < total; ++i) {
    auto [it, inserted] = group_index.emplace(group_of_example[i], groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  std::size_t largest = 0;
  for (const auto& g : groups) largest = std::max(largest, g.size());
  if (double(largest) > std::max(ratio, 1.0 - ratio) * double(total))
    throw Error(ErrorCode::UnsatisfiableRatio, "a single group holds " + std::to_string(largest) + " of " +
                                                   std::to_string(total) + " examples");

  std::vector<std::size_t> order(groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const double target = ratio * double(total);
  const double upper = (ratio + kSplitTolerance) * double(total);
  SplitPlan plan;
  plan.ratio_target = ratio;
  plan.group_key = key;
  std::size_t train_count = 0;
  for (auto gi : order) {
    const auto& g = groups[gi];
    bool to_train = double(train_count) < target && double(train_count + g.size()) <= upper + 1e-9;
    auto& side = to_train ? plan.train : plan.test;
    side.insert(side.end(), g.begin(), g.end());
    if (to_train) train_count += g.size();
  }
  // A split with an empty side is useless to the probe; move the smallest
  // available group across when that happens on tiny inputs.
  if (plan.test.empty() || plan.train.empty()) {
    auto& from = plan.test.empty() ? plan.train : plan.test;
    auto& to = plan.test.empty() ? plan.test : plan.train;
    std::size_t best = groups.size();
    for (auto gi : order)
      if (best == groups.size() || groups[gi].size() < groups[best].size()) best = gi;
    if (groups.size() > 1) {
      for (auto i : groups[best]) to.push_back(i);
      std::unordered_set<std::size_t> moved(groups[best].begin(), groups[best].end());
      std::erase_if(from, [&](std::size_t i) { return moved.count(i) != 0; });
    }
  }
  std::sort(plan.train.begin(), plan.train.end());
  std::sort(plan.test.begin(), plan.test.end());
  return plan;
}

/// Lemma-grouped split (or per-token when `group_by_lemma` is false, as in
/// multilingual runs where lemmas are unavailable).
inline SplitPlan split_grouped(const CharDataset& ds, const Vocabulary& vocab, double ratio, std::uint64_t seed,
                               bool group_by_lemma = true) {
  std::vector<std::string> keys;
  keys.reserve(ds.examples.size());
  for (const auto& ex : ds.examples)
    keys.push_back(group_by_lemma ? lemma_group_key(vocab.by_id(ex.token)) : "#id:" + std::to_string(ex.token));
  return split_by_groups(keys, ratio, seed, group_by_lemma ? GroupKey::Lemma : GroupKey::Token);
}

/// Superstring-grouped split: every pair sharing `v` lands on one side.
inline SplitPlan split_grouped(const SubstringDataset& ds, const Vocabulary& /*vocab*/, double ratio,
                               std::uint64_t seed) {
  std::vector<std::string> keys;
  keys.reserve(ds.examples.size());
  for (const auto& ex : ds.examples) keys.push_back(std::to_string(ex.v));
  return split_by_groups(keys, ratio, seed, GroupKey::Superstring);
}

namespace detail {

// Byte offsets of each code point boundary (size = code points + 1).
inline std::vector<std::size_t> codepoint_offsets(std::string_view s) {
  std::vector<std::size_t> offsets;
  for (std::size_t i = 0; i < s.size(); ++i)
    if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80) offsets.push_back(i);
  offsets.push_back(s.size());
  return offsets;
}

inline std::size_t codepoint_length(std::string_view s) { return codepoint_offsets(s).size() - 1; }

}  // namespace detail

/// For every token v, each token u whose marker-stripped surface is a proper
/// contiguous substring of v's yields a positive (u, v); each positive is
/// paired with a negative u' of the same character length that is not a
/// substring of v.
inline SubstringDataset build_substring_dataset(const Vocabulary& vocab, std::uint64_t seed) {
  if (vocab.empty()) throw Error(ErrorCode::InvalidArgument, "empty vocabulary");
  std::vector<std::string_view> stripped(vocab.size());
  std::vector<std::size_t> length(vocab.size());
  std::unordered_map<std::string_view, std::vector<std::size_t>> by_form;
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    stripped[i] = strip_marker(vocab[i].surface);
    length[i] = detail::codepoint_length(stripped[i]);
    if (length[i] == 0) continue;
    by_form[stripped[i]].push_back(i);
    by_length[length[i]].push_back(i);
  }

  SubstringDataset ds;
  ds.seed = seed;
  for (std::size_t vi = 0; vi < vocab.size(); ++vi) {
    const auto v = stripped[vi];
    if (length[vi] < 2) continue;
    const auto offsets = detail::codepoint_offsets(v);
    const auto n = offsets.size() - 1;

    // Distinct proper substrings present in the vocabulary, ordered by
    // (length, text) for determinism.
    std::map<std::pair<std::size_t, std::string_view>, const std::vector<std::size_t>*> found;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b <= n; ++b) {
        if (b - a == n) continue;
        auto sub = v.substr(offsets[a], offsets[b] - offsets[a]);
        auto it = by_form.find(sub);
        if (it != by_form.end()) found.emplace(std::make_pair(b - a, sub), &it->second);
      }
    if (found.empty()) continue;

    Rng rng(derive_seed(seed, {vocab[vi].id}));
    std::unordered_set<std::size_t> used;
    auto is_negative = [&](std::size_t cand) { return v.find(stripped[cand]) == std::string_view::npos; };

    for (const auto& [key, ids] : found) {
      const auto& pool = by_length[key.first];
      for (auto ui : *ids) {
        std::size_t pick = vocab.size();
        for (int attempt = 0; attempt < 64 && pick == vocab.size(); ++attempt) {
          auto cand = pool[uniform_index(rng, pool.size())];
          if (!used.count(cand) && is_negative(cand)) pick = cand;
        }
        if (pick == vocab.size()) {
          std::vector<std::size_t> fresh, any;
          for (auto cand : pool)
            if (is_negative(cand)) {
              any.push_back(cand);
              if (!used.count(cand)) fresh.push_back(cand);
            }
          if (!fresh.empty()) {
            pick = fresh[uniform_index(rng, fresh.size())];
          } else if (!any.empty()) {
            pick = any[uniform_index(rng, any.size())];
            ++ds.negatives_with_replacement;
          } else {
            ++ds.positives_dropped;
            continue;
          }
        }
        used.insert(pick);
        ds.examples.push_back({vocab[ui].id, vocab[vi].id, 1});
        ds.examples.push_back({vocab[pick].id, vocab[vi].id, 0});
      }
    }
  }
  return ds;
}

/// Audit dump: `token_id<TAB>label<TAB>split` per example.
inline void write_dataset_dump(const CharDataset& ds, const SplitPlan& split, const std::filesystem::path& path) {
  std::vector<const char*> side(ds.examples.size(), "none");
  for (auto i : split.train) side[i] = "train";
  for (auto i : split.test) side[i] = "test";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  for (std::size_t i = 0; i < ds.examples.size(); ++i)
    out << ds.examples[i].token << '\t' << ds.examples[i].label << '\t' << side[i] << '\n';
}

/// Reads a dump written by `write_dataset_dump` back into a dataset and split.
inline std::pair<CharDataset, SplitPlan> read_dataset_dump(const std::filesystem::path& path, char32_t target,
                                                           bool case_sensitive, std::uint64_t seed,
                                                           double ratio, GroupKey key) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  CharDataset ds{target, {}, case_sensitive, seed};
  SplitPlan split;
  split.ratio_target = ratio;
  split.group_key = key;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cols = detail::split_tabs(line);
    CharExample ex;
    int label = 0;
    if (cols.size() != 3 || !detail::parse_uint(cols[0], ex.token) || !detail::parse_uint(cols[1], label))
      throw Error(ErrorCode::MalformedRow, path.string() + ": bad dump row");
    ex.label = label;
    (cols[2] == "train" ? split.train : split.test).push_back(ds.examples.size());
    ds.examples.push_back(ex);
  }
  return {std::move(ds), std::move(split)};
}

}  // namespace charprobe
