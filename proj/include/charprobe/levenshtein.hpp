#pragma once

#include <algorithm>
#include <cstddef>
#include <string_view>
#include <vector>

namespace charprobe {

// Full dynamic-programming edit distance (unit costs), two rows.
template <typename CharT>
std::size_t levenshtein(std::basic_string_view<CharT> a, std::basic_string_view<CharT> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Distance when it is 0 or 1, otherwise 2. Linear time.
template <typename CharT>
int edit_distance_upto1(std::basic_string_view<CharT> a, std::basic_string_view<CharT> b) {
  if (a.size() < b.size()) std::swap(a, b);
  const std::size_t la = a.size(), lb = b.size();
  if (la - lb > 1) return 2;
  std::size_t i = 0;
  while (i < lb && a[i] == b[i]) ++i;
  if (la == lb) {
    if (i == la) return 0;
    for (std::size_t k = i + 1; k < la; ++k)
      if (a[k] != b[k]) return 2;
    return 1;
  }
  // a is one longer: skip a[i].
  for (std::size_t k = i; k < lb; ++k)
    if (a[k + 1] != b[k]) return 2;
  return 1;
}

}  // namespace charprobe
