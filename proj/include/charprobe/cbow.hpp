#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "charprobe/embedding_store.hpp"
#include "charprobe/error.hpp"
#include "charprobe/mlp.hpp"
#include "charprobe/rng.hpp"
#include "charprobe/vocab.hpp"

namespace charprobe {

struct CbowConfig {
  int dim = 300;
  int window = 5;
  int negatives = 5;
  int epochs = 5;
  double learning_rate = 0.025;
  std::uint64_t min_count = 5;
  double subsample = 1e-4;  // 0 disables subsampling
  std::uint64_t seed = 0;
  unsigned threads = 1;  // 1: deterministic; more: unsynchronized shared updates

  void validate() const {
    if (dim < 1) throw Error(ErrorCode::InvalidArgument, "dim must be >= 1");
    if (window < 1) throw Error(ErrorCode::InvalidArgument, "window must be >= 1");
    if (negatives < 1) throw Error(ErrorCode::InvalidArgument, "negatives must be >= 1");
    if (epochs < 1) throw Error(ErrorCode::InvalidArgument, "epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidArgument, "learning_rate must be > 0");
    if (subsample < 0.0) throw Error(ErrorCode::InvalidArgument, "subsample must be >= 0");
    if (threads < 1) throw Error(ErrorCode::InvalidArgument, "threads must be >= 1");
  }
};

struct CbowModel {
  std::vector<TokenId> source_ids;  // corpus id of each row, ascending
  std::vector<std::uint64_t> counts;  // corpus count of each row
  Matrix<float> input;  // dim x rows; the exported embeddings
  Matrix<float> output;
  std::vector<double> epoch_losses;

  std::size_t rows() const { return source_ids.size(); }

  EmbeddingTable table(std::string source_name = "cbow") const {
    std::vector<float> values(input.data(), input.data() + input.size());
    return EmbeddingTable(std::uint32_t(input.cols()), std::uint32_t(input.rows()), std::move(values),
                          std::move(source_name));
  }
};

inline float sigmoid(float x) {
  if (x >= 0) return 1.0f / (1.0f + std::exp(-x));
  float e = std::exp(x);
  return e / (1.0f + e);
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// One negative-sampling CBOW step. The hidden vector is the mean of the context
// input vectors; `target` is the positive output row, `negatives` the sampled
// ones. Applies one SGD step of size lr and returns the loss before the step.
template <typename T>
T cbow_step(Matrix<T>& input, Matrix<T>& output, std::span<const std::uint32_t> context, std::uint32_t target,
            std::span<const std::uint32_t> negatives, T lr, Vector<T>& h, Vector<T>& grad_h) {
  h.setZero(input.rows());
  for (auto c : context) h += input.col(c);
  h /= T(context.size());
  grad_h.setZero(input.rows());
  T loss = 0;
  auto visit = [&](std::uint32_t row, T label) {
    const T score = output.col(row).dot(h);
    const T p = sigmoid(score);
    // log(sigmoid) written to stay finite for large |score|.
    const T z = label > 0 ? score : -score;
    loss += z >= 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
    const T g = p - label;
    grad_h += g * output.col(row);
    output.col(row) -= lr * g * h;
  };
  visit(target, T(1));
  for (auto n : negatives) visit(n, T(0));
  grad_h /= T(context.size());
  for (auto c : context) input.col(c) -= lr * grad_h;
  return loss;
}

// Draws from counts^0.75.
class UnigramSampler {
 public:
  explicit UnigramSampler(const std::vector<std::uint64_t>& counts) {
    cumulative_.reserve(counts.size());
    double total = 0;
    for (auto c : counts) {
      total += std::pow(double(c), 0.75);
      cumulative_.push_back(total);
    }
  }

  std::uint32_t operator()(Rng& rng) const {
    double u = uniform01(rng) * cumulative_.back();
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::uint32_t(std::min<std::size_t>(std::size_t(it - cumulative_.begin()), cumulative_.size() - 1));
  }

 private:
  std::vector<double> cumulative_;
};

namespace detail {

struct CbowCorpus {
  std::vector<std::vector<std::uint32_t>> lines;  // in row indices
  std::uint64_t tokens = 0;
};

inline CbowCorpus index_corpus(const std::vector<std::vector<TokenId>>& corpus, std::uint64_t min_count,
                               CbowModel& model) {
  std::unordered_map<TokenId, std::uint64_t> counts;
  for (const auto& line : corpus)
    for (auto id : line) ++counts[id];
  for (const auto& [id, n] : counts)
    if (n >= min_count) model.source_ids.push_back(id);
  if (model.source_ids.empty())
    throw Error(ErrorCode::EmptyCorpusAfterFiltering,
                "no token occurs at least " + std::to_string(min_count) + " times");
  std::sort(model.source_ids.begin(), model.source_ids.end());
  std::unordered_map<TokenId, std::uint32_t> row_of;
  for (std::uint32_t r = 0; r < model.source_ids.size(); ++r) {
    row_of.emplace(model.source_ids[r], r);
    model.counts.push_back(counts[model.source_ids[r]]);
  }
  CbowCorpus out;
  for (const auto& line : corpus) {
    std::vector<std::uint32_t> rows;
    for (auto id : line) {
      auto it = row_of.find(id);
      if (it != row_of.end()) rows.push_back(it->second);
    }
    out.tokens += rows.size();
    if (rows.size() >= 2) out.lines.push_back(std::move(rows));
  }
  return out;
}

}  // namespace detail

// Trains CBOW with negative sampling over tokenized lines (context windows do
// not cross line boundaries).
inline CbowModel train_cbow(const std::vector<std::vector<TokenId>>& corpus, const CbowConfig& cfg) {
  cfg.validate();
  CbowModel model;
  auto data = detail::index_corpus(corpus, cfg.min_count, model);
  const Eigen::Index dim = cfg.dim, rows = Eigen::Index(model.rows());

  Rng init_rng(derive_seed(cfg.seed, {0}));
  model.input.resize(dim, rows);
  std::uniform_real_distribution<float> init(-0.5f / float(dim), 0.5f / float(dim));
  for (Eigen::Index i = 0; i < model.input.size(); ++i) model.input.data()[i] = init(init_rng);
  model.output = Matrix<float>::Zero(dim, rows);

  UnigramSampler sampler(model.counts);
  std::vector<float> keep(model.counts.size(), 1.0f);
  if (cfg.subsample > 0) {
    const double t = cfg.subsample * double(data.tokens);
    for (std::size_t r = 0; r < keep.size(); ++r) {
      const double f = double(model.counts[r]);
      keep[r] = float(std::min(1.0, (std::sqrt(f / t) + 1.0) * t / f));
    }
  }

  const double total_work = double(cfg.epochs) * double(data.tokens) + 1.0;
  std::atomic<std::uint64_t> processed{0};
  const unsigned n_threads = unsigned(std::min<std::size_t>(cfg.threads, std::max<std::size_t>(1, data.lines.size())));

  // Lines are visited in a fresh order every epoch.
  std::vector<std::size_t> order(data.lines.size());
  std::iota(order.begin(), order.end(), std::size_t(0));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng(derive_seed(cfg.seed, {2, std::uint64_t(epoch)}));
    std::shuffle(order.begin(), order.end(), order_rng);
    std::vector<double> loss_sum(n_threads, 0.0);
    std::vector<std::uint64_t> loss_n(n_threads, 0);
    auto worker = [&](unsigned t) {
      Rng rng(derive_seed(cfg.seed, {1, std::uint64_t(epoch), t}));
      Vector<float> h, grad_h;
      std::vector<std::uint32_t> sentence, context, negs;
      const std::size_t lo = data.lines.size() * t / n_threads, hi = data.lines.size() * (t + 1) / n_threads;
      for (std::size_t li = lo; li < hi; ++li) {
        const auto& line = data.lines[order[li]];
        sentence.clear();
        for (auto w : line)
          if (keep[w] >= 1.0f || uniform01(rng) < keep[w]) sentence.push_back(w);
        const double done = double(processed.fetch_add(line.size(), std::memory_order_relaxed));
        const float lr = float(cfg.learning_rate * std::max(1e-4, 1.0 - done / total_work));
        for (std::size_t pos = 0; pos < sentence.size(); ++pos) {
          const int b = int(rng() % std::uint64_t(cfg.window));
          const int span = cfg.window - b;
          context.clear();
          for (int off = -span; off <= span; ++off) {
            if (off == 0) continue;
            const auto p = std::ptrdiff_t(pos) + off;
            if (p < 0 || p >= std::ptrdiff_t(sentence.size())) continue;
            context.push_back(sentence[std::size_t(p)]);
          }
          if (context.empty()) continue;
          const std::uint32_t target = sentence[pos];
          negs.clear();
          for (int k = 0; k < cfg.negatives; ++k) {
            auto n = sampler(rng);
            if (n != target) negs.push_back(n);
          }
          loss_sum[t] += cbow_step<float>(model.input, model.output, context, target, negs, lr, h, grad_h);
          ++loss_n[t];
        }
      }
    };
    if (n_threads == 1) {
      worker(0);
    } else {
      std::vector<std::thread> threads;
      for (unsigned t = 0; t < n_threads; ++t) threads.emplace_back(worker, t);
      for (auto& th : threads) th.join();
    }
    double sum = 0;
    std::uint64_t n = 0;
    for (unsigned t = 0; t < n_threads; ++t) {
      sum += loss_sum[t];
      n += loss_n[t];
    }
    model.epoch_losses.push_back(n ? sum / double(n) : 0.0);
  }
  return model;
}

// Writes embeddings.bin and vocab.tsv into `dir`. Row i of the table is
// vocabulary id i; `surface_of` maps a corpus id to its surface.
template <typename SurfaceFn>
void export_embeddings(const CbowModel& model, SurfaceFn&& surface_of, const std::filesystem::path& dir,
                       const std::string& source_name = "cbow") {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  save_embeddings(model.table(source_name), dir / "embeddings.bin");
  std::vector<VocabEntry> entries;
  entries.reserve(model.rows());
  for (std::size_t r = 0; r < model.rows(); ++r)
    entries.push_back({TokenId(r), std::string(surface_of(model.source_ids[r])), "", model.counts[r]});
  save_vocab(Vocabulary(std::move(entries)), dir / "vocab.tsv");
}

// Whole-word corpus: each distinct string becomes an id in order of first
// appearance.
struct WordCorpus {
  std::vector<std::vector<TokenId>> lines;
  std::vector<std::string> surfaces;
};

inline WordCorpus index_words(const std::vector<std::vector<std::string>>& lines) {
  WordCorpus out;
  std::unordered_map<std::string, TokenId> ids;
  for (const auto& line : lines) {
    std::vector<TokenId> row;
    row.reserve(line.size());
    for (const auto& w : line) {
      auto [it, fresh] = ids.emplace(w, TokenId(out.surfaces.size()));
      if (fresh) out.surfaces.push_back(w);
      row.push_back(it->second);
    }
    out.lines.push_back(std::move(row));
  }
  return out;
}

}  // namespace charprobe
