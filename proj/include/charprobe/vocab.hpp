#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "charprobe/error.hpp"
#include "charprobe/utf8.hpp"

namespace charprobe {

using TokenId = std::uint32_t;

struct VocabEntry {
  TokenId id = 0;
  std::string surface;  // includes marker characters, e.g. "Ġcat" or "##ing"
  std::string lemma;    // empty: the token is its own lemma group
  std::uint64_t frequency = 0;
};

class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<VocabEntry> entries) : entries_(std::move(entries)) {
    index_.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].surface.empty())
        throw Error(ErrorCode::InvalidArgument, "empty surface for id " + std::to_string(entries_[i].id));
      if (!index_.emplace(entries_[i].id, i).second)
        throw Error(ErrorCode::DuplicateId, "id " + std::to_string(entries_[i].id));
    }
  }

  const std::vector<VocabEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }
  const VocabEntry& operator[](std::size_t i) const { return entries_[i]; }

  bool contains(TokenId id) const { return index_.count(id) != 0; }

  const VocabEntry& by_id(TokenId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error(ErrorCode::UnknownId, "token id " + std::to_string(id));
    return entries_[it->second];
  }

  TokenId max_id() const {
    TokenId m = 0;
    for (const auto& e : entries_) m = std::max(m, e.id);
    return m;
  }

 private:
  std::vector<VocabEntry> entries_;
  std::unordered_map<TokenId, std::size_t> index_;
};

struct Alphabet {
  std::string script_name;
  std::vector<char32_t> characters;  // sorted ascending, unique
  bool case_sensitive = false;

  bool contains(char32_t c) const {
    if (!case_sensitive) c = utf8::simple_lower(c);
    return std::binary_search(characters.begin(), characters.end(), c);
  }

  static Alphabet english() {
    Alphabet a{"latin", {}, false};
    for (char32_t c = U'a'; c <= U'z'; ++c) a.characters.push_back(c);
    return a;
  }

  static Alphabet from_string(std::string name, std::string_view chars, bool case_sensitive) {
    Alphabet a{std::move(name), {}, case_sensitive};
    std::set<char32_t> unique;
    for (char32_t c : utf8::decode(chars)) unique.insert(case_sensitive ? c : utf8::simple_lower(c));
    a.characters.assign(unique.begin(), unique.end());
    if (a.characters.empty()) throw Error(ErrorCode::EmptyAlphabet, "alphabet has no characters");
    return a;
  }
};

inline const std::vector<std::string>& default_markers() {
  static const std::vector<std::string> markers{"\xC4\xA0" /* Ġ */, "##", "\xE2\x96\x81" /* ▁ */};
  return markers;
}

/// Removes at most one leading marker. Longer markers are tried first.
inline std::string_view strip_marker(std::string_view surface, const std::vector<std::string>& markers) {
  std::size_t best = 0;
  for (const auto& m : markers)
    if (m.size() > best && surface.substr(0, m.size()) == m) best = m.size();
  return surface.substr(best);
}

inline std::string_view strip_marker(std::string_view surface) {
  return strip_marker(surface, default_markers());
}

/// Marker-stripped code points, lowercased unless `case_sensitive`.
inline std::u32string normalized_chars(std::string_view surface, bool case_sensitive,
                                       const std::vector<std::string>& markers = default_markers()) {
  auto chars = utf8::decode(strip_marker(surface, markers));
  if (!case_sensitive)
    for (auto& c : chars) c = utf8::simple_lower(c);
  return chars;
}

namespace detail {

inline std::string unescape_field(std::string_view field) {
  std::string out;
  out.reserve(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    if (field[i] == '\\' && i + 1 < field.size()) {
      char n = field[i + 1];
      if (n == 't') { out.push_back('\t'); ++i; continue; }
      if (n == 'n') { out.push_back('\n'); ++i; continue; }
      if (n == '\\') { out.push_back('\\'); ++i; continue; }
    }
    out.push_back(field[i]);
  }
  return out;
}

inline std::string escape_field(std::string_view field) {
  std::string out;
  out.reserve(field.size());
  for (char c : field) {
    if (c == '\t') out += "\\t";
    else if (c == '\n') out += "\\n";
    else if (c == '\\') out += "\\\\";
    else out.push_back(c);
  }
  return out;
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    cols.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return cols;
}

template <typename Int>
bool parse_uint(std::string_view s, Int& out) {
  if (s.empty()) return false;
  std::uint64_t v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return false;
    v = v * 10 + static_cast<std::uint64_t>(c - '0');
    if (v > std::numeric_limits<Int>::max()) return false;
  }
  out = static_cast<Int>(v);
  return true;
}

}  // namespace detail

/// Parses `id<TAB>surface<TAB>lemma<TAB>frequency` rows. Empty lines are skipped.
inline Vocabulary parse_vocab(std::istream& in, const std::string& source = "vocab") {
  std::vector<VocabEntry> entries;
  std::unordered_map<TokenId, std::size_t> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cols = detail::split_tabs(line);
    auto where = source + ":" + std::to_string(line_no);
    if (cols.size() != 4)
      throw Error(ErrorCode::MalformedRow, where + ": expected 4 columns, got " + std::to_string(cols.size()));
    VocabEntry e;
    if (!detail::parse_uint(cols[0], e.id)) throw Error(ErrorCode::MalformedRow, where + ": bad id");
    e.surface = detail::unescape_field(cols[1]);
    if (e.surface.empty()) throw Error(ErrorCode::MalformedRow, where + ": empty surface");
    e.lemma = detail::unescape_field(cols[2]);
    if (!detail::parse_uint(cols[3], e.frequency))
      throw Error(ErrorCode::MalformedRow, where + ": bad frequency");
    auto [it, inserted] = seen.emplace(e.id, line_no);
    if (!inserted)
      throw Error(ErrorCode::DuplicateId, where + ": id " + std::to_string(e.id) + " already defined on line " +
                                              std::to_string(it->second));
    entries.push_back(std::move(e));
  }
  return Vocabulary(std::move(entries));
}

inline Vocabulary load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return parse_vocab(in, path.string());
}

inline void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  for (const auto& e : vocab)
    out << e.id << '\t' << detail::escape_field(e.surface) << '\t' << detail::escape_field(e.lemma) << '\t'
        << e.frequency << '\n';
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

/// Keeps tokens whose marker-stripped surface is made only of alphabet
/// characters. A bare marker (empty after stripping) is dropped.
inline Vocabulary filter_alphabetic(const Vocabulary& vocab, const Alphabet& alphabet,
                                    const std::vector<std::string>& markers = default_markers()) {
  std::vector<VocabEntry> kept;
  for (const auto& e : vocab) {
    auto chars = utf8::decode(strip_marker(e.surface, markers));
    if (chars.empty()) continue;
    if (std::all_of(chars.begin(), chars.end(), [&](char32_t c) { return alphabet.contains(c); }))
      kept.push_back(e);
  }
  return Vocabulary(std::move(kept));
}

/// The `n` most frequent entries (ties keep file order), in file order.
inline Vocabulary top_by_frequency(const Vocabulary& vocab, std::size_t n) {
  std::vector<std::size_t> order(vocab.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return vocab[a].frequency > vocab[b].frequency; });
  order.resize(std::min(n, order.size()));
  std::sort(order.begin(), order.end());
  std::vector<VocabEntry> kept;
  kept.reserve(order.size());
  for (auto i : order) kept.push_back(vocab[i]);
  return Vocabulary(std::move(kept));
}

/// Characters (markers and whitespace excluded) that occur in at least
/// `min_tokens` distinct token surfaces, in ascending code point order.
inline Alphabet derive_alphabet(const Vocabulary& vocab, std::size_t min_tokens, std::string script_name = "derived",
                                bool case_sensitive = true,
                                const std::vector<std::string>& markers = default_markers()) {
  if (min_tokens == 0) throw Error(ErrorCode::InvalidArgument, "min_tokens must be >= 1");
  std::set<std::string_view> surfaces;
  for (const auto& e : vocab) surfaces.insert(e.surface);
  std::map<char32_t, std::size_t> doc_freq;
  for (auto surface : surfaces) {
    auto chars = normalized_chars(surface, case_sensitive, markers);
    std::sort(chars.begin(), chars.end());
    chars.erase(std::unique(chars.begin(), chars.end()), chars.end());
    for (char32_t c : chars)
      if (!utf8::is_space(c)) ++doc_freq[c];
  }
  Alphabet a{std::move(script_name), {}, case_sensitive};
  for (auto [c, n] : doc_freq)
    if (n >= min_tokens) a.characters.push_back(c);
  if (a.characters.empty())
    throw Error(ErrorCode::EmptyAlphabet, "no character occurs in " + std::to_string(min_tokens) + " tokens");
  return a;
}

/// Grouping key used for leakage-free splits: the lemma when known, else
/// the token itself.
inline std::string lemma_group_key(const VocabEntry& e) {
  return e.lemma.empty() ? "#id:" + std::to_string(e.id) : "lemma:" + e.lemma;
}

}  // namespace charprobe
