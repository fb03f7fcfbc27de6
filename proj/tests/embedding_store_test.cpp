#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <limits>

#include "charprobe/embedding_store.hpp"
#include "test_util.hpp"

namespace charprobe {
namespace {

using testing::TempDir;

std::string header(const char magic[4], std::uint32_t vocab, std::uint32_t dim) {
  std::string s(magic, 4);
  s.append(reinterpret_cast<const char*>(&vocab), 4);
  s.append(reinterpret_cast<const char*>(&dim), 4);
  return s;
}

std::string floats(std::initializer_list<float> values) {
  std::string s;
  for (float v : values) s.append(reinterpret_cast<const char*>(&v), 4);
  return s;
}

ErrorCode error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::InvalidArgument;
}

TEST(EmbeddingStore, LoadsMinimalFile) {
  TempDir dir;
  testing::write_text(dir / "e.bin", header("EMB1", 3, 2) + floats({1, 2, 3, 4, 5, 6}));
  auto table = load_embeddings(dir / "e.bin");
  EXPECT_EQ(table.vocab_size(), 3u);
  EXPECT_EQ(table.dim(), 2u);
  EXPECT_FALSE(table.is_control());
  EXPECT_EQ(table.row(1)[0], 3.0f);
  EXPECT_EQ(table.row(2)[1], 6.0f);
}

TEST(EmbeddingStore, RejectsBadMagic) {
  TempDir dir;
  testing::write_text(dir / "e.bin", header("XXXX", 3, 2) + floats({1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(error_of([&] { load_embeddings(dir / "e.bin"); }), ErrorCode::BadMagic);
}

TEST(EmbeddingStore, RejectsTruncatedData) {
  TempDir dir;
  testing::write_text(dir / "e.bin", header("EMB1", 3, 2) + floats({1, 2, 3, 4, 5}));
  try {
    load_embeddings(dir / "e.bin");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TruncatedFile);
    EXPECT_NE(std::string(e.what()).find("byte offset 32"), std::string::npos) << e.what();
  }
  testing::write_text(dir / "short.bin", "EMB1\x03");
  EXPECT_EQ(error_of([&] { load_embeddings(dir / "short.bin"); }), ErrorCode::TruncatedFile);
}

TEST(EmbeddingStore, RejectsNonFiniteValueWithOffset) {
  TempDir dir;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  testing::write_text(dir / "e.bin", header("EMB1", 2, 2) + floats({1, 2, nan, 4}));
  try {
    load_embeddings(dir / "e.bin");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteValue);
    EXPECT_NE(std::string(e.what()).find("byte offset 20"), std::string::npos) << e.what();
  }
}

TEST(EmbeddingStore, MissingFileIsIoError) {
  EXPECT_EQ(error_of([] { load_embeddings("/nonexistent/e.bin"); }), ErrorCode::IoError);
}

TEST(EmbeddingStore, RoundTripIsBitExactForRandomTables) {
  TempDir dir;
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::uint32_t vocab = 1 + rng() % 50, dim = 1 + rng() % 17;
    std::vector<float> values(std::size_t(vocab) * dim);
    // Arbitrary bit patterns, filtered to finite values.
    for (auto& v : values) {
      do {
        std::uint32_t bits = std::uint32_t(rng());
        std::memcpy(&v, &bits, 4);
      } while (!std::isfinite(v));
    }
    EmbeddingTable table(vocab, dim, values, "random");
    save_embeddings(table, dir / "t.bin");
    EXPECT_EQ(load_embeddings(dir / "t.bin"), table);
  }
}

TEST(EmbeddingStore, ControlIsDeterministicPerSeed) {
  auto a = make_control(5, 4, 7);
  auto b = make_control(5, 4, 7);
  auto c = make_control(5, 4, 8);
  EXPECT_TRUE(a.is_control());
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == c);
}

TEST(EmbeddingStore, ControlRejectsZeroSize) {
  EXPECT_EQ(error_of([] { make_control(0, 4, 1); }), ErrorCode::ZeroSize);
  EXPECT_EQ(error_of([] { make_control(4, 0, 1); }), ErrorCode::ZeroSize);
}

TEST(EmbeddingStore, ControlMeanIsNearZeroAtGptScale) {
  auto table = make_control(50257, 4096, 0);
  double sum = 0.0;
  for (float v : table.values()) sum += v;
  EXPECT_NEAR(sum / double(table.values().size()), 0.0, 0.001);
}

TEST(EmbeddingStore, ControlRowNormsConcentrateNearOne) {
  std::size_t within = 0, total = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto table = make_control(2000, 4096, seed);
    for (std::uint32_t r = 0; r < table.vocab_size(); ++r) {
      double sq = 0;
      for (float v : table.row(r)) sq += double(v) * v;
      within += std::abs(std::sqrt(sq) - 1.0) <= 0.2;
      ++total;
    }
  }
  EXPECT_GE(double(within) / double(total), 0.99);
}

}  // namespace
}  // namespace charprobe
