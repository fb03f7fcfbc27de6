#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "charprobe/bpe_tokenizer.hpp"
#include "charprobe/error.hpp"
#include "charprobe/levenshtein.hpp"
#include "charprobe/parallel.hpp"
#include "charprobe/utf8.hpp"

namespace charprobe {

// Match categories. The first five nest: each is a subset of the one before.
enum Category : std::size_t {
  kAllMatches = 0,
  kExceptPseudo,
  kCloserPseudo,
  kExactContain,
  kExactMatch,
  kCaseVariants,  // surface equals the target up to case, any spacing
  kNumCategories
};

inline const char* category_name(std::size_t c) {
  static const char* names[kNumCategories] = {"all_matches",   "except_pseudo", "closer_pseudo",
                                              "exact_contain", "exact_match",   "case_variants"};
  return names[c];
}

struct OccurrenceMatch {
  std::size_t target = 0;  // index into the target list
  std::string surface;     // as written in the corpus
  std::size_t shard = 0;
  std::size_t begin = 0;  // byte span of surface within the shard
  std::size_t end = 0;
  int distance = 0;
  bool preceded_by_space = false;
  std::array<bool, kNumCategories> in{};
};

inline std::u32string lowered(std::string_view s) { return utf8::lower(utf8::decode(s)); }

// Targets are lowercased. A later target within distance 1 of an earlier kept
// target is dropped.
inline std::vector<std::string> prune_targets(const std::vector<std::string>& targets) {
  std::vector<std::string> kept;
  std::vector<std::u32string> kept_lower;
  for (const auto& t : targets) {
    auto low = lowered(t);
    bool clash = false;
    for (const auto& k : kept_lower)
      if (edit_distance_upto1<char32_t>(low, k) <= 1) {
        clash = true;
        break;
      }
    if (clash) continue;
    kept.push_back(utf8::encode(low));
    kept_lower.push_back(std::move(low));
  }
  return kept;
}

// Dictionary words at distance exactly 1 from the target, case-insensitive,
// in dictionary order without duplicates.
inline std::vector<std::string> build_pseudo_list(const std::string& target, const std::vector<std::string>& dictionary) {
  const auto t = lowered(target);
  std::vector<std::string> out;
  std::set<std::u32string> seen;
  for (const auto& w : dictionary) {
    auto low = lowered(w);
    if (edit_distance_upto1<char32_t>(low, t) == 1 && seen.insert(low).second) out.push_back(utf8::encode(low));
  }
  return out;
}

// Splits text into about n pieces at ASCII whitespace; every piece after the
// first starts with the whitespace byte.
inline std::vector<std::string_view> split_shards(std::string_view text, std::size_t n) {
  std::vector<std::string_view> out;
  if (n <= 1 || text.empty()) {
    out.push_back(text);
    return out;
  }
  auto is_ws = [](char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; };
  std::size_t start = 0;
  for (std::size_t k = 1; k < n; ++k) {
    std::size_t cut = std::max(start + 1, text.size() * k / n);
    while (cut < text.size() && !is_ws(text[cut])) ++cut;
    if (cut >= text.size()) break;
    out.push_back(text.substr(start, cut - start));
    start = cut;
  }
  out.push_back(text.substr(start));
  return out;
}

// Case-insensitive windows within distance 1 of a target. A window starts at the
// first letter of a letter run, contains no whitespace and is not followed by a
// letter. A trailing non-letter is dropped. At each start the closest (then
// shortest) surface wins.
inline std::vector<OccurrenceMatch> find_occurrences(std::string_view shard, const std::vector<std::string>& targets,
                                                     std::size_t shard_index = 0) {
  std::vector<std::u32string> tl;
  for (const auto& t : targets) tl.push_back(lowered(t));
  std::vector<std::size_t> off;
  const std::u32string cps = utf8::decode(shard, &off);
  off.push_back(shard.size());
  const std::size_t n = cps.size();
  std::u32string low = utf8::lower(cps);
  std::vector<std::uint8_t> letter(n);
  for (std::size_t i = 0; i < n; ++i) letter[i] = utf8::is_letter(cps[i]);
  std::vector<std::size_t> next_ws(n + 1, n);
  for (std::size_t i = n; i-- > 0;) next_ws[i] = utf8::is_space(cps[i]) ? i : next_ws[i + 1];

  std::vector<OccurrenceMatch> out;
  const std::u32string_view lv(low);
  for (std::size_t p = 0; p < n; ++p) {
    if (!letter[p] || (p > 0 && letter[p - 1])) continue;
    for (std::size_t t = 0; t < tl.size(); ++t) {
      const std::size_t len = tl[t].size();
      int best_d = 3;
      std::size_t best_len = 0;
      for (std::size_t w = len > 0 ? len - 1 : 0; w <= len + 1; ++w) {
        if (w == 0 || p + w > n || next_ws[p] < p + w) continue;
        if (p + w < n && letter[p + w]) continue;
        int d = edit_distance_upto1<char32_t>(lv.substr(p, w), tl[t]);
        if (d > 1) continue;
        std::size_t final_len = w;
        if (!letter[p + w - 1]) {
          final_len = w - 1;
          if (final_len == 0) continue;
          d = edit_distance_upto1<char32_t>(lv.substr(p, final_len), tl[t]);
          if (d > 1) continue;
        }
        if (d < best_d || (d == best_d && final_len < best_len)) {
          best_d = d;
          best_len = final_len;
        }
      }
      if (best_d > 1) continue;
      OccurrenceMatch m;
      m.target = t;
      m.shard = shard_index;
      m.begin = off[p];
      m.end = off[p + best_len];
      m.surface = std::string(shard.substr(m.begin, m.end - m.begin));
      m.distance = best_d;
      m.preceded_by_space = p > 0 && cps[p - 1] == U' ';
      out.push_back(std::move(m));
    }
  }
  return out;
}

inline void categorize(OccurrenceMatch& m, const std::string& target, const std::vector<std::string>& pseudo) {
  const auto s = lowered(m.surface);
  const auto t = lowered(target);
  m.in.fill(false);
  m.in[kAllMatches] = true;
  bool is_pseudo = false, near_pseudo = false;
  for (const auto& p : pseudo) {
    const int d = edit_distance_upto1<char32_t>(s, lowered(p));
    is_pseudo |= d == 0;
    near_pseudo |= d <= 1;
  }
  m.in[kExceptPseudo] = !is_pseudo;
  m.in[kCloserPseudo] = m.in[kExceptPseudo] && !(m.distance == 1 && near_pseudo);
  m.in[kExactContain] = m.in[kCloserPseudo] && s.find(t) != std::u32string::npos;
  m.in[kExactMatch] = m.in[kExactContain] && s == t && !m.preceded_by_space;
  m.in[kCaseVariants] = s == t;
}

// Per-target sets of distinct token sequences; merging is a set union.
struct TokenizationSets {
  std::vector<std::uint64_t> occurrences;
  std::vector<std::array<std::set<std::vector<TokenId>>, kNumCategories>> sets;

  explicit TokenizationSets(std::size_t n_targets = 0) : occurrences(n_targets, 0), sets(n_targets) {}

  void add(const OccurrenceMatch& m, const std::vector<TokenId>& tokens) {
    ++occurrences[m.target];
    for (std::size_t c = 0; c < kNumCategories; ++c)
      if (m.in[c]) sets[m.target][c].insert(tokens);
  }

  TokenizationSets& merge(const TokenizationSets& o) {
    for (std::size_t t = 0; t < sets.size(); ++t) {
      occurrences[t] += o.occurrences[t];
      for (std::size_t c = 0; c < kNumCategories; ++c) sets[t][c].insert(o.sets[t][c].begin(), o.sets[t][c].end());
    }
    return *this;
  }
};

// Tokenizes each matched surface with plain BPE, with a leading space when the
// corpus had one, and collects distinct sequences per category.
inline TokenizationSets count_tokenizations(const std::vector<OccurrenceMatch>& matches,
                                            const TokenizationScheme& scheme, std::size_t n_targets) {
  TokenizationSets out(n_targets);
  BpeCache cache;
  for (const auto& m : matches) {
    const std::string text = (m.preceded_by_space ? " " : "") + m.surface;
    out.add(m, bpe_encode(scheme, text, &cache));
  }
  return out;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  r.n = xs.size();
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= double(xs.size());
  if (xs.size() > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / double(xs.size() - 1));
  }
  return r;
}

struct TargetStats {
  std::string target;
  std::uint64_t occurrences = 0;
  std::array<std::size_t, kNumCategories> unique{};

  bool operator==(const TargetStats&) const = default;
};

struct VariabilityStats {
  std::vector<TargetStats> targets;

  bool operator==(const VariabilityStats&) const = default;

  static VariabilityStats from_sets(const std::vector<std::string>& names, const TokenizationSets& sets) {
    VariabilityStats s;
    for (std::size_t t = 0; t < names.size(); ++t) {
      TargetStats ts{names[t], sets.occurrences[t], {}};
      for (std::size_t c = 0; c < kNumCategories; ++c) ts.unique[c] = sets.sets[t][c].size();
      s.targets.push_back(std::move(ts));
    }
    return s;
  }

  // Targets with no occurrence carry no information and are left out of the
  // summaries; their rows stay in `targets`.
  template <typename KeyFn>
  std::map<long, std::array<MeanStd, kNumCategories>> grouped(KeyFn&& key) const {
    std::map<long, std::array<std::vector<double>, kNumCategories>> values;
    for (const auto& t : targets) {
      if (t.occurrences == 0) continue;
      auto& v = values[key(t)];
      for (std::size_t c = 0; c < kNumCategories; ++c) v[c].push_back(double(t.unique[c]));
    }
    std::map<long, std::array<MeanStd, kNumCategories>> out;
    for (auto& [k, v] : values)
      for (std::size_t c = 0; c < kNumCategories; ++c) out[k][c] = mean_std(v[c]);
    return out;
  }

  std::array<MeanStd, kNumCategories> aggregate() const {
    auto g = grouped([](const TargetStats&) { return 0L; });
    return g.empty() ? std::array<MeanStd, kNumCategories>{} : g.begin()->second;
  }

  std::map<long, std::array<MeanStd, kNumCategories>> by_length() const {
    return grouped([](const TargetStats& t) { return long(utf8::decode(t.target).size()); });
  }

  // Natural-log occurrence bucket: floor(ln(occurrences)).
  std::map<long, std::array<MeanStd, kNumCategories>> by_occurrence_bucket() const {
    return grouped([](const TargetStats& t) { return long(std::floor(std::log(double(t.occurrences)))); });
  }

  nlohmann::json to_json() const {
    auto row = [](const std::array<MeanStd, kNumCategories>& a) {
      nlohmann::json j;
      for (std::size_t c = 0; c < kNumCategories; ++c)
        j[category_name(c)] = {{"mean", a[c].mean}, {"std", a[c].std}, {"n", a[c].n}};
      return j;
    };
    nlohmann::json j;
    j["aggregate"] = row(aggregate());
    for (const auto& [len, a] : by_length()) j["by_length"][std::to_string(len)] = row(a);
    for (const auto& [b, a] : by_occurrence_bucket()) j["by_occurrence_bucket"]["ln=" + std::to_string(b)] = row(a);
    j["targets"] = nlohmann::json::array();
    for (const auto& t : targets) {
      nlohmann::json tj{{"target", t.target}, {"occurrences", t.occurrences}};
      for (std::size_t c = 0; c < kNumCategories; ++c) tj[category_name(c)] = t.unique[c];
      j["targets"].push_back(std::move(tj));
    }
    return j;
  }
};

struct CorpusAnalysis {
  std::vector<std::string> targets;               // after pruning
  std::vector<std::vector<std::string>> pseudo;   // per target
  VariabilityStats stats;
  std::size_t skipped_shards = 0;
};

// Shards are processed independently and merged; the result does not depend
// on the number of shards or jobs.
inline CorpusAnalysis analyze_corpus(const std::vector<std::string_view>& shards,
                                     const std::vector<std::string>& raw_targets,
                                     const std::vector<std::string>& dictionary, const TokenizationScheme& scheme,
                                     unsigned jobs = 0) {
  CorpusAnalysis a;
  a.targets = prune_targets(raw_targets);
  for (const auto& t : a.targets) a.pseudo.push_back(build_pseudo_list(t, dictionary));
  std::vector<TokenizationSets> per_shard(shards.size(), TokenizationSets(a.targets.size()));
  parallel_for(shards.size(), jobs, [&](std::size_t s) {
    auto matches = find_occurrences(shards[s], a.targets, s);
    for (auto& m : matches) categorize(m, a.targets[m.target], a.pseudo[m.target]);
    per_shard[s] = count_tokenizations(matches, scheme, a.targets.size());
  });
  TokenizationSets total(a.targets.size());
  for (const auto& s : per_shard) total.merge(s);
  a.stats = VariabilityStats::from_sets(a.targets, total);
  return a;
}

// Reads each file as one or more shards. Unreadable files are reported on
// `log` and skipped.
inline std::vector<std::string> read_corpus_files(const std::vector<std::filesystem::path>& paths, std::ostream& log,
                                                  std::size_t* skipped = nullptr) {
  std::vector<std::string> texts;
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
      log << "skipping shard " << p.string() << ": cannot open\n";
      if (skipped) ++*skipped;
      continue;
    }
    texts.emplace_back(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return texts;
}

}  // namespace charprobe
