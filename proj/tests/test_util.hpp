#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <unistd.h>

#include "charprobe/vocab.hpp"

namespace charprobe::testing {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("charprobe-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(CHARPROBE_FIXTURE_DIR) / name;
}

inline Vocabulary vocab_from_surfaces(const std::vector<std::string>& surfaces) {
  std::vector<VocabEntry> entries;
  for (std::size_t i = 0; i < surfaces.size(); ++i)
    entries.push_back({static_cast<TokenId>(i), surfaces[i], "", 0});
  return Vocabulary(std::move(entries));
}

// Random lowercase words; lengths uniform in [min_len, max_len].
inline std::vector<std::string> random_words(std::mt19937_64& rng, std::size_t n, int min_len, int max_len,
                                             const std::string& letters = "abcdefghijklmnopqrstuvwxyz") {
  std::uniform_int_distribution<int> len(min_len, max_len);
  std::uniform_int_distribution<std::size_t> pick(0, letters.size() - 1);
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::string w;
    int l = len(rng);
    for (int k = 0; k < l; ++k) w.push_back(letters[pick(rng)]);
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace charprobe::testing
