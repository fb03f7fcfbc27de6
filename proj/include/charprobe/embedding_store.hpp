#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "charprobe/error.hpp"
#include "charprobe/rng.hpp"

namespace charprobe {

static_assert(std::endian::native == std::endian::little,
              "embedding files are read and written assuming a little-endian host");

/// Immutable token-embedding matrix. Row i is the embedding of token id i.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  EmbeddingTable(std::uint32_t vocab_size, std::uint32_t dim, std::vector<float> values,
                 std::string source_name, bool is_control = false)
      : vocab_size_(vocab_size),
        dim_(dim),
        values_(std::move(values)),
        source_name_(std::move(source_name)),
        is_control_(is_control) {
    if (values_.size() != static_cast<std::size_t>(vocab_size_) * dim_)
      throw Error(ErrorCode::InvalidArgument, "embedding value count does not match shape");
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (!std::isfinite(values_[i]))
        throw Error(ErrorCode::NonFiniteValue,
                    "value at index " + std::to_string(i) + " is not finite");
  }

  std::uint32_t vocab_size() const noexcept { return vocab_size_; }
  std::uint32_t dim() const noexcept { return dim_; }
  const std::string& source_name() const noexcept { return source_name_; }
  bool is_control() const noexcept { return is_control_; }

  std::span<const float> row(std::size_t id) const {
    if (id >= vocab_size_)
      throw Error(ErrorCode::UnknownId, "row " + std::to_string(id) + " out of range");
    return {values_.data() + id * dim_, dim_};
  }

  std::span<const float> values() const noexcept { return values_; }

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
    return a.vocab_size_ == b.vocab_size_ && a.dim_ == b.dim_ &&
           std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(float)) == 0;
  }

 private:
  std::uint32_t vocab_size_ = 0;
  std::uint32_t dim_ = 0;
  std::vector<float> values_;
  std::string source_name_;
  bool is_control_ = false;
};

inline constexpr std::array<char, 4> kEmbeddingMagic{'E', 'M', 'B', '1'};

namespace detail {

inline std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void write_u32_le(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                         static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  out.write(bytes, 4);
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Reads an `EMB1` file: magic, u32 vocab_size, u32 dim, then row-major
/// little-endian float32 values. Errors name the offending byte offset.
inline EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kEmbeddingMagic.data(), 4) != 0)
    throw Error(ErrorCode::BadMagic, path.string() + ": expected \"EMB1\" at byte offset 0");
  if (bytes.size() < 12)
    throw Error(ErrorCode::TruncatedFile,
                path.string() + ": header ends at byte offset " + std::to_string(bytes.size()));
  const std::uint32_t vocab_size = detail::read_u32_le(bytes.data() + 4);
  const std::uint32_t dim = detail::read_u32_le(bytes.data() + 8);
  const std::size_t count = static_cast<std::size_t>(vocab_size) * dim;
  const std::size_t expected = 12 + count * 4;
  if (bytes.size() != expected)
    throw Error(ErrorCode::TruncatedFile,
                path.string() + ": expected " + std::to_string(expected) + " bytes, data ends at byte offset " +
                    std::to_string(bytes.size()));
  std::vector<float> values(count);
  std::memcpy(values.data(), bytes.data() + 12, count * 4);
  for (std::size_t i = 0; i < count; ++i)
    if (!std::isfinite(values[i]))
      throw Error(ErrorCode::NonFiniteValue,
                  path.string() + ": non-finite value at byte offset " + std::to_string(12 + i * 4));
  return EmbeddingTable(vocab_size, dim, std::move(values), path.filename().string());
}

inline void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(kEmbeddingMagic.data(), 4);
  detail::write_u32_le(out, table.vocab_size());
  detail::write_u32_le(out, table.dim());
  const auto values = table.values();
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

/// Random control embeddings with entries i.i.d. N(0, 1/dim), so rows have
/// roughly unit L2 norm. Deterministic for a fixed seed.
inline EmbeddingTable make_control(std::uint32_t vocab_size, std::uint32_t dim, std::uint64_t seed) {
  if (vocab_size == 0 || dim == 0)
    throw Error(ErrorCode::ZeroSize, "control table needs vocab_size >= 1 and dim >= 1");
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, static_cast<float>(1.0 / std::sqrt(double(dim))));
  std::vector<float> values(static_cast<std::size_t>(vocab_size) * dim);
  for (auto& v : values) v = normal(rng);
  return EmbeddingTable(vocab_size, dim, std::move(values), "control-seed-" + std::to_string(seed),
                        true);
}

// Shape used by the original control runs, regardless of the probed model.
inline constexpr std::uint32_t kFixedControlVocab = 100000;
inline constexpr std::uint32_t kFixedControlDim = 4096;

}  // namespace charprobe
