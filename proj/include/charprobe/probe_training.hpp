#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "charprobe/embedding_store.hpp"
#include "charprobe/error.hpp"
#include "charprobe/metrics.hpp"
#include "charprobe/mlp.hpp"
#include "charprobe/probe_datasets.hpp"
#include "charprobe/rng.hpp"

namespace charprobe {

inline std::vector<double> default_lr_grid() {
  return {1e-5, 3e-5, 5e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2};
}

struct TrainConfig {
  int epochs = 5;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  double dropout = 0.1;
  int hidden = 0;  // 0: hidden width equals input width
  std::uint64_t seed = 0;
  std::vector<double> lr_grid;  // empty: no tuning, use learning_rate
  double tune_fraction = 0.1;

  void validate() const {
    if (epochs < 1) throw Error(ErrorCode::InvalidArgument, "epochs must be >= 1");
    if (batch_size < 1) throw Error(ErrorCode::InvalidArgument, "batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidArgument, "learning_rate must be > 0");
    for (double lr : lr_grid)
      if (!(lr > 0.0)) throw Error(ErrorCode::InvalidArgument, "lr_grid entries must be > 0");
    if (dropout < 0.0 || dropout >= 1.0) throw Error(ErrorCode::InvalidArgument, "dropout must be in [0, 1)");
  }
};

struct ProbeResult {
  Mlp<float> model;
  Metrics metrics;
  std::vector<std::size_t> test_indices;  // example indices, as in split.test
  std::vector<float> test_probs;
  std::vector<int> test_predictions;
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

/// One column per example: the token's embedding row.
inline Matrix<float> gather_token_features(const EmbeddingTable& table, const CharDataset& ds) {
  Matrix<float> x(table.dim(), Eigen::Index(ds.examples.size()));
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    auto row = table.row(ds.examples[i].token);
    x.col(Eigen::Index(i)) = Eigen::Map<const Vector<float>>(row.data(), Eigen::Index(row.size()));
  }
  return x;
}

/// One column per pair: [embedding(u); embedding(v)].
inline Matrix<float> gather_pair_features(const EmbeddingTable& table, const SubstringDataset& ds) {
  const Eigen::Index d = table.dim();
  Matrix<float> x(2 * d, Eigen::Index(ds.examples.size()));
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    auto u = table.row(ds.examples[i].u);
    auto v = table.row(ds.examples[i].v);
    x.col(Eigen::Index(i)).head(d) = Eigen::Map<const Vector<float>>(u.data(), d);
    x.col(Eigen::Index(i)).tail(d) = Eigen::Map<const Vector<float>>(v.data(), d);
  }
  return x;
}

template <typename Dataset>
std::vector<int> labels_of(const Dataset& ds) {
  std::vector<int> labels;
  labels.reserve(ds.examples.size());
  for (const auto& ex : ds.examples) labels.push_back(ex.label);
  return labels;
}

inline Matrix<float> gather_columns(const Matrix<float>& x, std::span<const std::size_t> idx) {
  Matrix<float> out(x.rows(), Eigen::Index(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(Eigen::Index(j)) = x.col(Eigen::Index(idx[j]));
  return out;
}

/// Numerically stable mean binary cross-entropy on logits; writes
/// dLoss/dLogits into `grad`.
template <typename T>
double bce_with_logits(const Matrix<T>& logits, std::span<const int> labels, Matrix<T>& grad) {
  const auto n = logits.cols();
  grad.resize(1, n);
  double loss = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double z = double(logits(0, j));
    const double y = labels[std::size_t(j)] ? 1.0 : 0.0;
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    const double sig = 1.0 / (1.0 + std::exp(-z));
    grad(0, j) = T((sig - y) / double(n));
  }
  return loss / double(n);
}

inline std::vector<float> predict_probs(const Mlp<float>& model, const Matrix<float>& x,
                                        std::span<const std::size_t> idx) {
  std::vector<float> probs;
  probs.reserve(idx.size());
  constexpr std::size_t kChunk = 4096;
  for (std::size_t start = 0; start < idx.size(); start += kChunk) {
    auto part = idx.subspan(start, std::min(kChunk, idx.size() - start));
    Matrix<float> logits = model.forward(gather_columns(x, part));
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      probs.push_back(float(1.0 / (1.0 + std::exp(-double(logits(0, j))))));
  }
  return probs;
}

/// Trains the 3-layer probe on `split.train` columns of `features` and
/// scores the final-epoch model on `split.test`. Deterministic per seed.
inline ProbeResult train_binary_probe(const Matrix<float>& features, std::span<const int> labels,
                                      const SplitPlan& split, const TrainConfig& cfg) {
  cfg.validate();
  if (std::size_t(features.cols()) != labels.size())
    throw Error(ErrorCode::LengthMismatch, "feature columns vs labels");
  if (split.train.empty() || split.test.empty())
    throw Error(ErrorCode::EmptySplit, "train or test side is empty");

  const int d = int(features.rows());
  const int h = cfg.hidden > 0 ? cfg.hidden : d;
  ProbeResult result;
  result.model = Mlp<float>(d, h, h, 1, cfg.dropout);
  Rng init_rng(derive_seed(cfg.seed, {0}));
  Rng order_rng(derive_seed(cfg.seed, {1}));
  Rng dropout_rng(derive_seed(cfg.seed, {2}));
  result.model.init(init_rng);

  Adam<float> adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay);
  std::vector<std::size_t> order = split.train;
  std::vector<int> batch_labels;
  MlpCache<float> cache;
  Matrix<float> d_logits;
  auto grads = result.model.params().zeros_like();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch_size)) {
      std::span<const std::size_t> batch(order.data() + start,
                                         std::min<std::size_t>(std::size_t(cfg.batch_size), order.size() - start));
      batch_labels.clear();
      for (auto i : batch) batch_labels.push_back(labels[i]);
      Matrix<float> logits = result.model.forward(gather_columns(features, batch), &cache, &dropout_rng);
      const double loss = bce_with_logits(logits, batch_labels, d_logits);
      if (!std::isfinite(loss))
        throw Error(ErrorCode::NonFiniteLoss, "loss became non-finite at epoch " + std::to_string(epoch) +
                                                  ", batch starting at " + std::to_string(start) +
                                                  " (lr=" + std::to_string(cfg.learning_rate) + ")");
      loss_sum += loss;
      ++batches;
      grads.each([](float* p, Eigen::Index n) { std::fill(p, p + n, 0.0f); });
      result.model.backward(cache, d_logits, grads);
      adam.begin_step();
      result.model.params().zip(grads, [&](float* p, float* g, Eigen::Index n) { adam.update(p, g, std::size_t(n)); });
    }
    result.epoch_losses.push_back(loss_sum / double(std::max<std::size_t>(batches, 1)));
  }
  if (!result.model.all_finite()) throw Error(ErrorCode::NonFiniteLoss, "parameters became non-finite");

  result.test_indices = split.test;
  result.test_probs = predict_probs(result.model, features, split.test);
  std::vector<int> test_labels;
  for (std::size_t j = 0; j < split.test.size(); ++j) {
    result.test_predictions.push_back(result.test_probs[j] >= 0.5f ? 1 : 0);
    test_labels.push_back(labels[split.test[j]]);
  }
  result.metrics = macro_f1(result.test_predictions, test_labels);
  return result;
}

/// Carves a tuning split out of the train side: a seeded `fraction` of the
/// train examples becomes the evaluation side.
inline SplitPlan holdout_split(const SplitPlan& split, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> train = split.train;
  Rng rng(derive_seed(seed, {0x70e}));
  std::shuffle(train.begin(), train.end(), rng);
  auto n_hold = std::max<std::size_t>(1, std::size_t(std::llround(fraction * double(train.size()))));
  n_hold = std::min(n_hold, train.size() > 1 ? train.size() - 1 : std::size_t(0));
  SplitPlan plan;
  plan.ratio_target = 1.0 - fraction;
  plan.group_key = split.group_key;
  plan.test.assign(train.begin(), train.begin() + std::ptrdiff_t(n_hold));
  plan.train.assign(train.begin() + std::ptrdiff_t(n_hold), train.end());
  std::sort(plan.train.begin(), plan.train.end());
  std::sort(plan.test.begin(), plan.test.end());
  return plan;
}

}  // namespace charprobe
