#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "charprobe/error.hpp"
#include "charprobe/parallel.hpp"
#include "charprobe/rng.hpp"
#include "charprobe/utf8.hpp"
#include "charprobe/vocab.hpp"

namespace charprobe {

namespace byte_level {

// GPT-2 byte to printable code point table. Printable Latin-1 bytes map to
// themselves; the rest are shifted to U+0100 and up, so space becomes 'Ġ'.
inline const std::array<char32_t, 256>& byte_to_char() {
  static const std::array<char32_t, 256> table = [] {
    std::array<char32_t, 256> t{};
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) {
      bool printable = (b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE && b <= 0xFF);
      t[std::size_t(b)] = printable ? char32_t(b) : next++;
    }
    return t;
  }();
  return table;
}

inline const std::unordered_map<char32_t, unsigned char>& char_to_byte() {
  static const std::unordered_map<char32_t, unsigned char> table = [] {
    std::unordered_map<char32_t, unsigned char> t;
    const auto& fwd = byte_to_char();
    for (int b = 0; b < 256; ++b) t.emplace(fwd[std::size_t(b)], static_cast<unsigned char>(b));
    return t;
  }();
  return table;
}

inline const std::array<std::string, 256>& byte_symbols() {
  static const std::array<std::string, 256> table = [] {
    std::array<std::string, 256> t;
    for (int b = 0; b < 256; ++b) t[std::size_t(b)] = utf8::encode(byte_to_char()[std::size_t(b)]);
    return t;
  }();
  return table;
}

inline std::string to_symbols(std::string_view raw) {
  std::string out;
  out.reserve(raw.size() * 2);
  for (char c : raw) out += byte_symbols()[static_cast<unsigned char>(c)];
  return out;
}

// Inverse of to_symbols. Returns nullopt if a code point is not a byte symbol.
inline std::optional<std::string> from_symbols(std::string_view symbols) {
  std::string out;
  for (char32_t c : utf8::decode(symbols)) {
    auto it = char_to_byte().find(c);
    if (it == char_to_byte().end()) return std::nullopt;
    out.push_back(static_cast<char>(it->second));
  }
  return out;
}

}  // namespace byte_level

enum class PretokenKind { Word, Number, Other, Space, Contraction };

struct Pretoken {
  std::string_view text;
  PretokenKind kind;
};

// GPT-2 pre-tokenizer:
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
// A Word pre-token is a maximal letter run with its optional leading space.
inline std::vector<Pretoken> pretokenize(std::string_view text) {
  std::vector<std::size_t> off;
  std::u32string cps = utf8::decode(text, &off);
  off.push_back(text.size());
  auto cls = [](char32_t c) {
    if (utf8::is_letter(c)) return PretokenKind::Word;
    if (utf8::is_number(c)) return PretokenKind::Number;
    if (utf8::is_space(c)) return PretokenKind::Space;
    return PretokenKind::Other;
  };

  std::vector<Pretoken> out;
  const std::size_t n = cps.size();
  std::size_t i = 0;
  auto emit = [&](std::size_t a, std::size_t b, PretokenKind kind) {
    out.push_back({text.substr(off[a], off[b] - off[a]), kind});
  };
  while (i < n) {
    if (cps[i] == U'\'' && i + 1 < n) {
      char32_t c1 = cps[i + 1];
      char32_t c2 = i + 2 < n ? cps[i + 2] : 0;
      std::size_t len = 0;
      if (c1 == U's' || c1 == U't' || c1 == U'm' || c1 == U'd') len = 2;
      else if ((c1 == U'r' && c2 == U'e') || (c1 == U'v' && c2 == U'e') || (c1 == U'l' && c2 == U'l')) len = 3;
      if (len) {
        emit(i, i + len, PretokenKind::Contraction);
        i += len;
        continue;
      }
    }
    std::size_t start = i;
    if (cps[i] == U' ' && i + 1 < n && cls(cps[i + 1]) != PretokenKind::Space) ++i;
    PretokenKind kind = cls(cps[i]);
    if (kind != PretokenKind::Space) {
      std::size_t j = i + 1;
      while (j < n && cls(cps[j]) == kind) ++j;
      emit(start, j, kind);
      i = j;
      continue;
    }
    std::size_t j = i + 1;
    while (j < n && cls(cps[j]) == PretokenKind::Space) ++j;
    if (j < n && j - i >= 2) --j;
    emit(i, j, PretokenKind::Space);
    i = j;
  }
  return out;
}

// Merge table and token map are shared between copies; rho and seed are per copy.
class TokenizationScheme {
 public:
  TokenizationScheme(std::vector<std::pair<std::string, std::string>> merges,
                     std::unordered_map<std::string, TokenId> token_ids, std::string marker = "Ġ") {
    auto t = std::make_shared<Tables>();
    t->merges = std::move(merges);
    t->ids = std::move(token_ids);
    t->marker = std::move(marker);
    TokenId max_id = 0;
    for (const auto& [tok, id] : t->ids) max_id = std::max(max_id, id);
    t->tokens.assign(t->ids.empty() ? 0 : std::size_t(max_id) + 1, std::nullopt);
    for (const auto& [tok, id] : t->ids) {
      if (t->tokens[id]) throw Error(ErrorCode::DuplicateId, "token id " + std::to_string(id) + " assigned twice");
      t->tokens[id] = tok;
    }
    t->ranks.reserve(t->merges.size());
    for (std::size_t r = 0; r < t->merges.size(); ++r) {
      const auto& [a, b] = t->merges[r];
      auto ia = t->ids.find(a), ib = t->ids.find(b), iab = t->ids.find(a + b);
      if (ia == t->ids.end() || ib == t->ids.end() || iab == t->ids.end())
        throw Error(ErrorCode::MalformedRow, "merge " + std::to_string(r + 1) + " '" + a + " " + b + "' uses a token not in vocab");
      t->ranks.emplace(pair_key(ia->second, ib->second), Merge{std::uint32_t(r), iab->second});
    }
    for (int b = 0; b < 256; ++b) {
      auto it = t->ids.find(byte_level::byte_symbols()[std::size_t(b)]);
      if (it != t->ids.end()) t->byte_ids[std::size_t(b)] = it->second;
    }
    tables_ = std::move(t);
  }

  double rho = 0.0;
  std::uint64_t seed = 0;

  const std::string& marker() const { return tables_->marker; }
  std::size_t vocab_size() const { return tables_->ids.size(); }
  std::size_t id_bound() const { return tables_->tokens.size(); }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return tables_->merges; }

  std::optional<TokenId> id(const std::string& token) const {
    auto it = tables_->ids.find(token);
    if (it == tables_->ids.end()) return std::nullopt;
    return it->second;
  }

  bool has_id(TokenId id) const { return id < tables_->tokens.size() && tables_->tokens[id].has_value(); }

  const std::string& token(TokenId id) const {
    if (!has_id(id)) throw Error(ErrorCode::UnknownId, "token id " + std::to_string(id));
    return *tables_->tokens[id];
  }

  struct Merge {
    std::uint32_t rank;
    TokenId result;
  };

  // Rank and result of merging the adjacent pair (a, b), if it is a merge.
  const Merge* merge(TokenId a, TokenId b) const {
    auto it = tables_->ranks.find(pair_key(a, b));
    return it == tables_->ranks.end() ? nullptr : &it->second;
  }

  std::optional<TokenId> byte_id(unsigned char b) const { return tables_->byte_ids[b]; }

  TokenizationScheme with_variability(double new_rho, std::uint64_t new_seed) const {
    TokenizationScheme s = *this;
    s.rho = new_rho;
    s.seed = new_seed;
    return s;
  }

  // Token surfaces in the byte-symbol alphabet, ordered by id.
  Vocabulary as_vocabulary() const {
    std::vector<VocabEntry> entries;
    for (TokenId id = 0; id < tables_->tokens.size(); ++id)
      if (tables_->tokens[id]) entries.push_back({id, *tables_->tokens[id], "", 0});
    return Vocabulary(std::move(entries));
  }

 private:
  struct Tables {
    std::vector<std::pair<std::string, std::string>> merges;
    std::unordered_map<std::string, TokenId> ids;
    std::vector<std::optional<std::string>> tokens;
    std::unordered_map<std::uint64_t, Merge> ranks;
    std::array<std::optional<TokenId>, 256> byte_ids{};
    std::string marker;
  };
  static std::uint64_t pair_key(TokenId a, TokenId b) { return (std::uint64_t(a) << 32) | b; }
  std::shared_ptr<const Tables> tables_;
};

inline std::vector<std::pair<std::string, std::string>> parse_merges(std::istream& in,
                                                                      const std::string& source = "merges") {
  std::vector<std::pair<std::string, std::string>> merges;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (line_no == 1 && line.rfind("#version", 0) == 0)) continue;
    auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() || line.find(' ', sp + 1) != std::string::npos)
      throw Error(ErrorCode::MalformedRow, source + ":" + std::to_string(line_no) + ": expected two symbols");
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return merges;
}

inline TokenizationScheme load_scheme(const std::filesystem::path& merges_path,
                                      const std::filesystem::path& vocab_json_path) {
  std::ifstream min(merges_path);
  if (!min) throw Error(ErrorCode::IoError, "cannot open " + merges_path.string());
  auto merges = parse_merges(min, merges_path.string());
  std::ifstream vin(vocab_json_path);
  if (!vin) throw Error(ErrorCode::IoError, "cannot open " + vocab_json_path.string());
  nlohmann::json j;
  try {
    vin >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRow, vocab_json_path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::MalformedRow, vocab_json_path.string() + ": expected an object");
  std::unordered_map<std::string, TokenId> ids;
  ids.reserve(j.size());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_number_unsigned())
      throw Error(ErrorCode::MalformedRow, vocab_json_path.string() + ": id of '" + it.key() + "' is not unsigned");
    ids.emplace(it.key(), it.value().get<TokenId>());
  }
  return TokenizationScheme(std::move(merges), std::move(ids));
}

using BpeCache = std::unordered_map<std::string, std::vector<TokenId>>;

// Greedy lowest-rank merge of one pre-token given as raw bytes.
inline std::vector<TokenId> bpe_word(const TokenizationScheme& scheme, std::string_view raw) {
  std::vector<TokenId> parts;
  parts.reserve(raw.size());
  for (char c : raw) {
    auto id = scheme.byte_id(static_cast<unsigned char>(c));
    if (!id)
      throw Error(ErrorCode::UnencodableByte,
                  "byte " + std::to_string(int(static_cast<unsigned char>(c))) + " has no token in the vocabulary");
    parts.push_back(*id);
  }
  while (parts.size() > 1) {
    const TokenizationScheme::Merge* best = nullptr;
    std::size_t at = 0;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      auto m = scheme.merge(parts[i], parts[i + 1]);
      if (m && (!best || m->rank < best->rank)) {
        best = m;
        at = i;
      }
    }
    if (!best) break;
    const TokenId a = parts[at], b = parts[at + 1];
    std::size_t w = 0;
    for (std::size_t i = 0; i < parts.size();) {
      if (i + 1 < parts.size() && parts[i] == a && parts[i + 1] == b) {
        parts[w++] = best->result;
        i += 2;
      } else {
        parts[w++] = parts[i++];
      }
    }
    parts.resize(w);
  }
  return parts;
}

inline void bpe_encode_into(const TokenizationScheme& scheme, std::string_view pretoken, std::vector<TokenId>& out,
                            BpeCache* cache) {
  if (cache) {
    std::string key(pretoken);
    auto it = cache->find(key);
    if (it == cache->end()) it = cache->emplace(std::move(key), bpe_word(scheme, pretoken)).first;
    out.insert(out.end(), it->second.begin(), it->second.end());
    return;
  }
  auto ids = bpe_word(scheme, pretoken);
  out.insert(out.end(), ids.begin(), ids.end());
}

inline std::vector<TokenId> bpe_encode(const TokenizationScheme& scheme, std::string_view text,
                                       BpeCache* cache = nullptr) {
  std::vector<TokenId> out;
  for (const auto& p : pretokenize(text)) bpe_encode_into(scheme, p.text, out, cache);
  return out;
}

inline bool is_alphabetic_piece(std::string_view raw) {
  if (raw.empty()) return false;
  for (char32_t c : utf8::decode(raw))
    if (!utf8::is_letter(c)) return false;
  return true;
}

// Every split of `word` (raw text, optional leading space) into two in-vocab
// tokens. The leading space stays with the left piece.
inline std::vector<std::pair<TokenId, TokenId>> two_way_splits(const TokenizationScheme& scheme,
                                                                std::string_view word) {
  std::vector<std::pair<TokenId, TokenId>> out;
  std::string_view prefix;
  std::string_view body = word;
  if (!body.empty() && body.front() == ' ') {
    prefix = body.substr(0, 1);
    body.remove_prefix(1);
  }
  if (!is_alphabetic_piece(body)) return out;
  const std::string sym_prefix = byte_level::to_symbols(prefix);
  const std::string sym_body = byte_level::to_symbols(body);
  // Symbol offset of each raw byte; code points never split across pieces.
  std::string left = sym_prefix;
  std::size_t sym_at = 0;
  for (std::size_t i = 0; i < body.size();) {
    std::size_t j = i + 1;
    while (j < body.size() && (static_cast<unsigned char>(body[j]) & 0xC0) == 0x80) ++j;
    for (std::size_t k = i; k < j; ++k) sym_at += byte_level::byte_symbols()[static_cast<unsigned char>(body[k])].size();
    i = j;
    if (i >= body.size()) break;
    left.assign(sym_prefix).append(sym_body, 0, sym_at);
    auto l = scheme.id(left);
    if (!l) continue;
    auto r = scheme.id(sym_body.substr(sym_at));
    if (!r) continue;
    out.emplace_back(*l, *r);
  }
  return out;
}

struct VariabilityCounts {
  std::size_t words = 0;      // Word pre-tokens seen
  std::size_t eligible = 0;   // words with at least one two-way split
  std::size_t randomized = 0; // eligible words emitted as a random split

  VariabilityCounts& operator+=(const VariabilityCounts& o) {
    words += o.words;
    eligible += o.eligible;
    randomized += o.randomized;
    return *this;
  }
};

// Each Word pre-token is replaced, with probability rho, by a uniformly drawn
// two-way split; everything else is encoded with plain BPE.
inline std::vector<TokenId> variable_tokenize(const TokenizationScheme& scheme, std::string_view text, Rng& rng,
                                              BpeCache* cache = nullptr, VariabilityCounts* counts = nullptr) {
  if (!(scheme.rho >= 0.0 && scheme.rho <= 1.0))
    throw Error(ErrorCode::InvalidArgument, "rho must be in [0, 1], got " + std::to_string(scheme.rho));
  std::vector<TokenId> out;
  for (const auto& p : pretokenize(text)) {
    if (p.kind != PretokenKind::Word) {
      bpe_encode_into(scheme, p.text, out, cache);
      continue;
    }
    const double u = uniform01(rng);
    if (counts) ++counts->words;
    if (u < scheme.rho) {
      auto splits = two_way_splits(scheme, p.text);
      if (!splits.empty()) {
        const auto& s = splits[uniform_index(rng, splits.size())];
        out.push_back(s.first);
        out.push_back(s.second);
        if (counts) {
          ++counts->eligible;
          ++counts->randomized;
        }
        continue;
      }
    } else if (counts && !two_way_splits(scheme, p.text).empty()) {
      ++counts->eligible;
    }
    bpe_encode_into(scheme, p.text, out, cache);
  }
  return out;
}

inline std::vector<TokenId> variable_tokenize(const TokenizationScheme& scheme, std::string_view text) {
  Rng rng(scheme.seed);
  return variable_tokenize(scheme, text, rng);
}

inline std::string detokenize(const TokenizationScheme& scheme, const std::vector<TokenId>& ids) {
  std::string symbols;
  for (TokenId id : ids) symbols += scheme.token(id);
  auto raw = byte_level::from_symbols(symbols);
  if (!raw) throw Error(ErrorCode::UnencodableByte, "token text is not in the byte-symbol alphabet");
  return *raw;
}

// Whole-word baseline: every pre-token is one vocabulary item, keyed by its
// byte-symbol surface (so a leading space shows up as the marker).
inline std::vector<std::string> word_tokenize(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& p : pretokenize(text)) out.push_back(byte_level::to_symbols(p.text));
  return out;
}

// Tokenizes each line independently. Line i draws from its own RNG stream, so
// output does not depend on `jobs`.
inline std::vector<std::vector<TokenId>> tokenize_lines(const TokenizationScheme& scheme,
                                                        const std::vector<std::string>& lines, unsigned jobs,
                                                        VariabilityCounts* counts = nullptr) {
  std::vector<std::vector<TokenId>> out(lines.size());
  const std::size_t chunk = 1024;
  const std::size_t n_chunks = (lines.size() + chunk - 1) / chunk;
  std::vector<VariabilityCounts> per_chunk(n_chunks);
  parallel_for(n_chunks, jobs, [&](std::size_t c) {
    BpeCache cache;
    for (std::size_t i = c * chunk; i < std::min(lines.size(), (c + 1) * chunk); ++i) {
      Rng rng(derive_seed(scheme.seed, {i}));
      out[i] = variable_tokenize(scheme, lines[i], rng, &cache, &per_chunk[c]);
    }
  });
  if (counts)
    for (const auto& c : per_chunk) *counts += c;
  return out;
}

inline void write_token_lines(std::ostream& out, const std::vector<std::vector<TokenId>>& lines) {
  for (const auto& line : lines) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (i) out << ' ';
      out << line[i];
    }
    out << '\n';
  }
}

inline std::vector<std::vector<TokenId>> read_token_lines(std::istream& in, const std::string& source = "ids") {
  std::vector<std::vector<TokenId>> lines;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::vector<TokenId> ids;
    std::size_t i = 0;
    while (i < line.size()) {
      auto j = line.find(' ', i);
      if (j == std::string::npos) j = line.size();
      TokenId id = 0;
      if (!detail::parse_uint(std::string_view(line).substr(i, j - i), id))
        throw Error(ErrorCode::MalformedRow, source + ":" + std::to_string(line_no) + ": bad token id");
      ids.push_back(id);
      i = j + 1;
    }
    lines.push_back(std::move(ids));
  }
  return lines;
}

}  // namespace charprobe
