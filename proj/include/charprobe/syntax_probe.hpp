#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "charprobe/char_probe.hpp"
#include "charprobe/embedding_store.hpp"
#include "charprobe/error.hpp"
#include "charprobe/metrics.hpp"
#include "charprobe/mlp.hpp"
#include "charprobe/probe_datasets.hpp"
#include "charprobe/probe_training.hpp"
#include "charprobe/rng.hpp"
#include "charprobe/utf8.hpp"
#include "charprobe/vocab.hpp"

namespace charprobe {

enum class TagFeature { Pos, CoarsePos, Ner };

inline const char* to_string(TagFeature f) {
  switch (f) {
    case TagFeature::Pos: return "POS";
    case TagFeature::CoarsePos: return "COARSE_POS";
    case TagFeature::Ner: return "NER";
  }
  return "?";
}

inline TagFeature parse_tag_feature(std::string_view s) {
  if (s == "POS") return TagFeature::Pos;
  if (s == "COARSE_POS") return TagFeature::CoarsePos;
  if (s == "NER") return TagFeature::Ner;
  throw Error(ErrorCode::MalformedRow, "unknown feature name '" + std::string(s) + "'");
}

// ---------------------------------------------------------------- CoNLL

struct ConllToken {
  std::string word, pos, chunk, ner;
};

using ConllSentence = std::vector<ConllToken>;

struct ConllCorpus {
  std::vector<ConllSentence> sentences;

  std::size_t tokens() const {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.size();
    return n;
  }
};

/// word POS chunk NER per line, blank lines between sentences; -DOCSTART-
/// lines are ignored.
inline ConllCorpus parse_conll(std::istream& in, const std::string& source = "conll") {
  ConllCorpus corpus;
  ConllSentence current;
  std::string line;
  std::size_t line_no = 0;
  auto flush = [&] {
    if (!current.empty()) corpus.sentences.push_back(std::move(current));
    current.clear();
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream cols(line);
    std::vector<std::string> f;
    for (std::string c; cols >> c;) f.push_back(std::move(c));
    if (f.empty()) {
      flush();
      continue;
    }
    if (f[0] == "-DOCSTART-") continue;
    if (f.size() < 4)
      throw Error(ErrorCode::MalformedRow, source + ":" + std::to_string(line_no) + ": expected 4 columns, got " +
                                               std::to_string(f.size()));
    current.push_back({f[0], f[1], f[2], f[3]});
  }
  flush();
  if (corpus.sentences.empty()) throw Error(ErrorCode::EmptyCoNLL, source + " has no tokens");
  return corpus;
}

inline ConllCorpus load_conll(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return parse_conll(in, path.string());
}

inline const std::string& tag_of(const ConllToken& t, TagFeature f) {
  switch (f) {
    case TagFeature::Pos: return t.pos;
    case TagFeature::Ner: return t.ner;
    case TagFeature::CoarsePos: break;
  }
  throw Error(ErrorCode::InvalidArgument, "CoNLL files carry no COARSE_POS column");
}

// ---------------------------------------------------------------- alignment

using WordTokenizer = std::function<std::vector<TokenId>(std::string_view)>;

/// Greedy longest-prefix segmentation of a word into vocabulary tokens,
/// compared on marker-stripped surfaces. A stripped form shared by several
/// tokens maps to the first in vocabulary order.
class WordAligner {
 public:
  explicit WordAligner(const Vocabulary& vocab, const std::vector<std::string>& markers = default_markers()) {
    for (const auto& e : vocab) {
      auto s = std::string(strip_marker(e.surface, markers));
      if (s.empty()) continue;
      ids_.emplace(s, e.id);
      longest_ = std::max(longest_, s.size());
    }
  }

  /// Empty when some part of the word has no token.
  std::vector<TokenId> operator()(std::string_view word) const {
    std::vector<TokenId> out;
    std::size_t at = 0;
    while (at < word.size()) {
      bool found = false;
      for (std::size_t len = std::min(longest_, word.size() - at); len > 0; --len) {
        // Stay on code point boundaries.
        if (at + len < word.size() && (static_cast<unsigned char>(word[at + len]) & 0xC0) == 0x80) continue;
        auto it = ids_.find(std::string(word.substr(at, len)));
        if (it != ids_.end()) {
          out.push_back(it->second);
          at += len;
          found = true;
          break;
        }
      }
      if (!found) return {};
    }
    return out;
  }

 private:
  std::unordered_map<std::string, TokenId> ids_;
  std::size_t longest_ = 0;
};

struct TaggedTokens {
  std::vector<TokenId> tokens;
  std::vector<int> labels;
  std::size_t words = 0;
  std::size_t unaligned_words = 0;  // skipped: no tokenization into the vocabulary
};

/// Every subword of a word inherits the word's tag. `labels` maps tag name
/// to class index; an unknown tag raises UnknownLabel.
inline TaggedTokens tag_tokens(const ConllCorpus& corpus, TagFeature feature, const WordTokenizer& tokenize,
                               const std::map<std::string, int>& labels) {
  TaggedTokens out;
  for (const auto& sentence : corpus.sentences)
    for (const auto& t : sentence) {
      ++out.words;
      const auto& tag = tag_of(t, feature);
      auto it = labels.find(tag);
      if (it == labels.end()) throw Error(ErrorCode::UnknownLabel, "tag '" + tag + "' not in the label set");
      auto ids = tokenize(t.word);
      if (ids.empty()) {
        ++out.unaligned_words;
        continue;
      }
      for (auto id : ids) {
        out.tokens.push_back(id);
        out.labels.push_back(it->second);
      }
    }
  return out;
}

// ---------------------------------------------------------------- tagger

struct TaggerModel {
  TagFeature feature = TagFeature::Pos;
  std::vector<std::string> labels;
  Mlp<float> mlp;
  std::vector<double> epoch_losses;
  std::size_t unaligned_words = 0;
  MulticlassScores eval;  // on the evaluation corpus, when one was given
  bool has_eval = false;
};

/// Epochs, batch size and learning rate used for the tagger.
inline TrainConfig tagger_defaults() {
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 64;
  cfg.learning_rate = 1e-4;
  return cfg;
}

template <typename T>
Matrix<T> softmax_columns(const Matrix<T>& logits) {
  Matrix<T> p(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const T m = logits.col(j).maxCoeff();
    p.col(j) = (logits.col(j).array() - m).exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

/// Mean cross-entropy; writes dLoss/dLogits into `grad`.
template <typename T>
double softmax_cross_entropy(const Matrix<T>& logits, std::span<const int> labels, Matrix<T>& grad) {
  const auto n = logits.cols();
  grad = softmax_columns(logits);
  double loss = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const int y = labels[std::size_t(j)];
    loss -= std::log(std::max(double(grad(y, j)), 1e-300));
    grad(y, j) -= T(1);
  }
  grad /= T(n);
  return loss / double(n);
}

namespace detail {

inline Matrix<float> rows_of(const EmbeddingTable& table, std::span<const TokenId> tokens) {
  Matrix<float> x(table.dim(), Eigen::Index(tokens.size()));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto r = table.row(tokens[i]);
    x.col(Eigen::Index(i)) = Eigen::Map<const Vector<float>>(r.data(), Eigen::Index(r.size()));
  }
  return x;
}

inline std::vector<int> argmax_columns(const Matrix<float>& logits) {
  std::vector<int> out(std::size_t(logits.cols()));
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Eigen::Index k;
    logits.col(j).maxCoeff(&k);
    out[std::size_t(j)] = int(k);
  }
  return out;
}

}  // namespace detail

inline std::vector<int> predict_tags(const TaggerModel& model, const EmbeddingTable& table,
                                     std::span<const TokenId> tokens) {
  std::vector<int> out;
  constexpr std::size_t kChunk = 4096;
  for (std::size_t at = 0; at < tokens.size(); at += kChunk) {
    auto part = tokens.subspan(at, std::min(kChunk, tokens.size() - at));
    auto p = detail::argmax_columns(model.mlp.forward(detail::rows_of(table, part)));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

/// Softmax-cross-entropy MLP from static embeddings to tags. Labels are the
/// sorted distinct tags of `train`; `eval`, if given, is scored with
/// weighted and macro F1.
inline TaggerModel train_tagger(const EmbeddingTable& table, const ConllCorpus& train, TagFeature feature,
                                const TrainConfig& cfg, const WordTokenizer& tokenize,
                                const ConllCorpus* eval = nullptr) {
  cfg.validate();
  std::set<std::string> tags;
  for (const auto& s : train.sentences)
    for (const auto& t : s) tags.insert(tag_of(t, feature));
  TaggerModel model;
  model.feature = feature;
  model.labels.assign(tags.begin(), tags.end());
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < model.labels.size(); ++i) index[model.labels[i]] = int(i);

  auto data = tag_tokens(train, feature, tokenize, index);
  model.unaligned_words = data.unaligned_words;
  if (data.tokens.empty()) throw Error(ErrorCode::EmptyCoNLL, "no training word aligns to the vocabulary");
  for (auto id : data.tokens)
    if (id >= table.vocab_size()) throw Error(ErrorCode::UnknownId, "token " + std::to_string(id));

  const int d = int(table.dim());
  const int h = cfg.hidden > 0 ? cfg.hidden : d;
  model.mlp = Mlp<float>(d, h, h, int(model.labels.size()), cfg.dropout);
  Rng init_rng(derive_seed(cfg.seed, {0}));
  Rng order_rng(derive_seed(cfg.seed, {1}));
  Rng dropout_rng(derive_seed(cfg.seed, {2}));
  model.mlp.init(init_rng);

  Adam<float> adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay);
  std::vector<std::size_t> order(data.tokens.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto grads = model.mlp.params().zeros_like();
  MlpCache<float> cache;
  Matrix<float> d_logits;
  std::vector<TokenId> batch_tokens;
  std::vector<int> batch_labels;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch_size)) {
      const auto end = std::min(order.size(), start + std::size_t(cfg.batch_size));
      batch_tokens.clear();
      batch_labels.clear();
      for (auto k = start; k < end; ++k) {
        batch_tokens.push_back(data.tokens[order[k]]);
        batch_labels.push_back(data.labels[order[k]]);
      }
      auto logits = model.mlp.forward(detail::rows_of(table, batch_tokens), &cache, &dropout_rng);
      const double loss = softmax_cross_entropy(logits, batch_labels, d_logits);
      if (!std::isfinite(loss)) throw Error(ErrorCode::NonFiniteLoss, "tagger loss at epoch " + std::to_string(epoch));
      loss_sum += loss;
      ++batches;
      grads.each([](float* p, Eigen::Index n) { std::fill(p, p + n, 0.0f); });
      model.mlp.backward(cache, d_logits, grads);
      adam.begin_step();
      model.mlp.params().zip(grads, [&](float* p, float* g, Eigen::Index n) { adam.update(p, g, std::size_t(n)); });
    }
    model.epoch_losses.push_back(loss_sum / double(std::max<std::size_t>(batches, 1)));
  }

  if (eval) {
    auto ev = tag_tokens(*eval, feature, tokenize, index);
    auto preds = predict_tags(model, table, ev.tokens);
    model.eval = multiclass_f1(preds, ev.labels, int(model.labels.size()));
    model.has_eval = true;
  }
  return model;
}

// ---------------------------------------------------------------- tag distributions

struct TagDistribution {
  TokenId token = 0;
  TagFeature feature = TagFeature::Pos;
  std::vector<double> probs;
};

inline TagDistribution infer_tag_distribution(const TaggerModel& model, const EmbeddingTable& table, TokenId token) {
  const TokenId one[1] = {token};
  Matrix<double> logits = model.mlp.forward(detail::rows_of(table, one)).cast<double>();
  auto p = softmax_columns(logits);
  TagDistribution out{token, model.feature, {}};
  out.probs.assign(p.data(), p.data() + p.size());
  return out;
}

/// All distributions of one feature, indexed by token.
struct TagStream {
  TagFeature feature = TagFeature::Pos;
  std::vector<std::string> labels;
  std::unordered_map<TokenId, std::vector<float>> probs;

  bool one_hot() const {
    for (const auto& [id, p] : probs)
      for (float v : p)
        if (v != 0.0f && v != 1.0f) return false;
    return true;
  }

  bool covers(TokenId id) const { return probs.count(id) != 0; }
};

inline TagStream infer_stream(const TaggerModel& model, const EmbeddingTable& table, std::span<const TokenId> tokens) {
  TagStream s{model.feature, model.labels, {}};
  constexpr std::size_t kChunk = 4096;
  for (std::size_t at = 0; at < tokens.size(); at += kChunk) {
    auto part = tokens.subspan(at, std::min(kChunk, tokens.size() - at));
    Matrix<double> p = softmax_columns<double>(model.mlp.forward(detail::rows_of(table, part)).cast<double>());
    for (std::size_t j = 0; j < part.size(); ++j) {
      std::vector<float> v(std::size_t(p.rows()));
      for (Eigen::Index k = 0; k < p.rows(); ++k) v[std::size_t(k)] = float(p(k, Eigen::Index(j)));
      s.probs[part[j]] = std::move(v);
    }
  }
  return s;
}

namespace detail {

// "label:prob,label:prob"; labels may themselves contain ',' or ':', so
// comma-separated pieces are joined until they end in ":<number>".
inline std::vector<std::pair<std::string, double>> parse_distribution(std::string_view field, const std::string& where) {
  std::vector<std::pair<std::string, double>> out;
  std::string candidate;
  bool open = false;
  std::size_t start = 0;
  for (;;) {
    const auto comma = field.find(',', start);
    const auto piece = field.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    candidate = open ? candidate + "," + std::string(piece) : std::string(piece);
    open = true;
    const auto colon = candidate.rfind(':');
    if (colon != std::string::npos && colon > 0 && colon + 1 < candidate.size()) {
      const std::string num = candidate.substr(colon + 1);
      char* end = nullptr;
      const double value = std::strtod(num.c_str(), &end);
      if (end == num.c_str() + num.size()) {
        out.emplace_back(candidate.substr(0, colon), value);
        open = false;
      }
    }
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (open || out.empty()) throw Error(ErrorCode::MalformedRow, where + ": cannot parse '" + std::string(field) + "'");
  return out;
}

}  // namespace detail

/// tags.tsv rows: token_id, feature name, label:prob list. Each feature's
/// label set is the sorted union of labels seen for it.
inline std::map<TagFeature, TagStream> parse_tags(std::istream& in, const std::string& source = "tags.tsv") {
  struct Row {
    TokenId token;
    std::vector<std::pair<std::string, double>> dist;
  };
  std::map<TagFeature, std::vector<Row>> rows;
  std::map<TagFeature, std::set<std::string>> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    auto cols = detail::split_tabs(line);
    TokenId id = 0;
    if (cols.size() != 3 || !detail::parse_uint(cols[0], id))
      throw Error(ErrorCode::MalformedRow, where + ": expected token_id<TAB>feature<TAB>distribution");
    const auto feature = parse_tag_feature(cols[1]);
    auto dist = detail::parse_distribution(cols[2], where);
    double sum = 0.0;
    for (const auto& [label, p] : dist) {
      if (!(p >= 0.0)) throw Error(ErrorCode::MalformedRow, where + ": negative probability for '" + label + "'");
      sum += p;
      labels[feature].insert(label);
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw Error(ErrorCode::MalformedRow, where + ": probabilities sum to " + std::to_string(sum));
    rows[feature].push_back({id, std::move(dist)});
  }
  std::map<TagFeature, TagStream> out;
  for (auto& [feature, list] : rows) {
    TagStream s{feature, {labels[feature].begin(), labels[feature].end()}, {}};
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < s.labels.size(); ++i) index[s.labels[i]] = i;
    for (const auto& r : list) {
      std::vector<float> v(s.labels.size(), 0.0f);
      for (const auto& [label, p] : r.dist) v[index[label]] += float(p);
      if (!s.probs.emplace(r.token, std::move(v)).second)
        throw Error(ErrorCode::DuplicateId, source + ": token " + std::to_string(r.token) + " repeated for " +
                                                to_string(feature));
    }
    out.emplace(feature, std::move(s));
  }
  return out;
}

inline std::map<TagFeature, TagStream> load_tags(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return parse_tags(in, path.string());
}

/// Writes non-zero entries only, tokens ascending.
inline void write_tags(std::ostream& out, const TagStream& s) {
  std::vector<TokenId> ids;
  for (const auto& [id, p] : s.probs) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  out.precision(9);
  for (auto id : ids) {
    const auto& p = s.probs.at(id);
    out << id << '\t' << to_string(s.feature) << '\t';
    // Renormalize in double so the written row sums to 1 within 1e-6.
    double sum = 0.0;
    for (float v : p) sum += v;
    bool first = true;
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (p[k] == 0.0f) continue;
      if (!first) out << ',';
      first = false;
      out << s.labels[k] << ':' << double(p[k]) / sum;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------- syntax probe

/// Per-feature trainable embeddings E_j (dim x labels_j); the concatenation
/// of E_j p_j feeds the 3-layer probe.
template <typename T>
struct SyntaxNet {
  std::vector<Matrix<T>> embed;
  Mlp<T> mlp;

  struct Cache {
    std::vector<Matrix<T>> inputs;
    MlpCache<T> mlp;
  };

  Matrix<T> forward(const std::vector<Matrix<T>>& inputs, Cache* cache = nullptr, Rng* dropout_rng = nullptr) const {
    Eigen::Index rows = 0;
    for (const auto& e : embed) rows += e.rows();
    Matrix<T> x(rows, inputs.front().cols());
    Eigen::Index at = 0;
    for (std::size_t j = 0; j < embed.size(); ++j) {
      x.middleRows(at, embed[j].rows()).noalias() = embed[j] * inputs[j];
      at += embed[j].rows();
    }
    if (cache) cache->inputs = inputs;
    return mlp.forward(x, cache ? &cache->mlp : nullptr, dropout_rng);
  }

  void backward(const Cache& cache, const Matrix<T>& d_logits, std::vector<Matrix<T>>& d_embed,
                MlpParams<T>& d_mlp) const {
    Matrix<T> dx = mlp.backward(cache.mlp, d_logits, d_mlp);
    Eigen::Index at = 0;
    for (std::size_t j = 0; j < embed.size(); ++j) {
      d_embed[j].noalias() += dx.middleRows(at, embed[j].rows()) * cache.inputs[j].transpose();
      at += embed[j].rows();
    }
  }
};

inline constexpr int kFeatureEmbeddingDim = 64;

struct SyntaxProbeResult {
  Metrics metrics;
  std::vector<double> epoch_losses;
  std::vector<int> test_predictions;
  int batch_size = 0;
};

/// One-hot inputs train with batch 128, distributions with 64.
inline int syntax_batch_size(const std::vector<TagStream>& features) {
  for (const auto& f : features)
    if (!f.one_hot()) return 64;
  return 128;
}

namespace detail {

inline Matrix<float> stream_columns(const TagStream& s, const CharDataset& ds, std::span<const std::size_t> idx) {
  Matrix<float> x(Eigen::Index(s.labels.size()), Eigen::Index(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const auto& p = s.probs.at(ds.examples[idx[j]].token);
    x.col(Eigen::Index(j)) = Eigen::Map<const Vector<float>>(p.data(), Eigen::Index(p.size()));
  }
  return x;
}

}  // namespace detail

/// Binary probe for "token contains the target" from tag features alone.
/// Batch size follows syntax_batch_size; the other settings come from cfg.
inline SyntaxProbeResult train_syntax_probe(const std::vector<TagStream>& features, const CharDataset& ds,
                                            const SplitPlan& split, const TrainConfig& cfg) {
  cfg.validate();
  if (features.empty()) throw Error(ErrorCode::InvalidArgument, "no features");
  if (split.train.empty() || split.test.empty()) throw Error(ErrorCode::EmptySplit, "train or test side is empty");
  for (const auto& f : features)
    for (const auto& ex : ds.examples)
      if (!f.covers(ex.token))
        throw Error(ErrorCode::FeatureCoverageGap,
                    std::string(to_string(f.feature)) + " has no distribution for token " + std::to_string(ex.token));

  SyntaxProbeResult result;
  result.batch_size = syntax_batch_size(features);
  const int width = kFeatureEmbeddingDim * int(features.size());
  const int h = cfg.hidden > 0 ? cfg.hidden : width;

  SyntaxNet<float> net;
  Rng init_rng(derive_seed(cfg.seed, {0}));
  Rng order_rng(derive_seed(cfg.seed, {1}));
  Rng dropout_rng(derive_seed(cfg.seed, {2}));
  for (const auto& f : features) {
    const double bound = 1.0 / std::sqrt(double(f.labels.size()));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix<float> e(kFeatureEmbeddingDim, Eigen::Index(f.labels.size()));
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = float(u(init_rng));
    net.embed.push_back(std::move(e));
  }
  net.mlp = Mlp<float>(width, h, h, 1, cfg.dropout);
  net.mlp.init(init_rng);

  const auto labels = labels_of(ds);
  Adam<float> adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay);
  std::vector<Matrix<float>> d_embed;
  for (const auto& e : net.embed) d_embed.push_back(Matrix<float>::Zero(e.rows(), e.cols()));
  auto d_mlp = net.mlp.params().zeros_like();
  SyntaxNet<float>::Cache cache;
  Matrix<float> d_logits;
  std::vector<std::size_t> order = split.train;
  std::vector<int> batch_labels;
  std::vector<Matrix<float>> inputs(features.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(result.batch_size)) {
      std::span<const std::size_t> batch(order.data() + start,
                                         std::min(std::size_t(result.batch_size), order.size() - start));
      for (std::size_t j = 0; j < features.size(); ++j) inputs[j] = detail::stream_columns(features[j], ds, batch);
      batch_labels.clear();
      for (auto i : batch) batch_labels.push_back(labels[i]);
      auto logits = net.forward(inputs, &cache, &dropout_rng);
      const double loss = bce_with_logits(logits, batch_labels, d_logits);
      if (!std::isfinite(loss)) throw Error(ErrorCode::NonFiniteLoss, "syntax probe loss at epoch " + std::to_string(epoch));
      loss_sum += loss;
      ++batches;
      for (auto& g : d_embed) g.setZero();
      d_mlp.each([](float* p, Eigen::Index n) { std::fill(p, p + n, 0.0f); });
      net.backward(cache, d_logits, d_embed, d_mlp);
      adam.begin_step();
      for (std::size_t j = 0; j < net.embed.size(); ++j)
        adam.update(net.embed[j].data(), d_embed[j].data(), std::size_t(net.embed[j].size()));
      net.mlp.params().zip(d_mlp, [&](float* p, float* g, Eigen::Index n) { adam.update(p, g, std::size_t(n)); });
    }
    result.epoch_losses.push_back(loss_sum / double(std::max<std::size_t>(batches, 1)));
  }

  for (std::size_t j = 0; j < features.size(); ++j) inputs[j] = detail::stream_columns(features[j], ds, split.test);
  auto logits = net.forward(inputs);
  std::vector<int> test_labels;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    result.test_predictions.push_back(logits(0, j) >= 0.0f ? 1 : 0);
    test_labels.push_back(labels[split.test[std::size_t(j)]]);
  }
  result.metrics = macro_f1(result.test_predictions, test_labels);
  return result;
}

/// Control features: the tuple of distributions attached to each of
/// `tokens` is reassigned by a seeded permutation (jointly across features).
inline std::vector<TagStream> permute_assignment(const std::vector<TagStream>& features,
                                                 std::vector<TokenId> tokens, std::uint64_t seed) {
  std::sort(tokens.begin(), tokens.end());
  tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
  std::vector<TokenId> shuffled = tokens;
  Rng rng(seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  std::vector<TagStream> out = features;
  for (std::size_t j = 0; j < features.size(); ++j)
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      auto it = features[j].probs.find(shuffled[i]);
      if (it == features[j].probs.end())
        throw Error(ErrorCode::FeatureCoverageGap, std::string(to_string(features[j].feature)) +
                                                       " has no distribution for token " + std::to_string(shuffled[i]));
      out[j].probs[tokens[i]] = it->second;
    }
  return out;
}

/// Features in canonical concatenation order POS, COARSE_POS, NER.
inline std::vector<TagStream> ordered_features(const std::map<TagFeature, TagStream>& streams,
                                               const std::vector<TagFeature>& wanted) {
  std::vector<TagFeature> sorted = wanted;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<TagStream> out;
  for (auto f : sorted) {
    auto it = streams.find(f);
    if (it == streams.end())
      throw Error(ErrorCode::FeatureCoverageGap, std::string("no ") + to_string(f) + " distributions supplied");
    out.push_back(it->second);
  }
  return out;
}

/// Character presence from tag features, per character and seed, with a
/// control that permutes the token-to-features assignment.
inline ExperimentReport run_syntax_experiment(const std::vector<TagStream>& features, const Vocabulary& vocab,
                                              const Alphabet& alphabet, const TrainConfig& cfg, unsigned n_seeds,
                                              const ExperimentOptions& opt = {}) {
  cfg.validate();
  if (n_seeds < 1) throw Error(ErrorCode::InvalidArgument, "n_seeds must be >= 1");
  if (alphabet.characters.empty()) throw Error(ErrorCode::EmptyAlphabet, "alphabet has no characters");
  const auto& chars = alphabet.characters;
  const std::size_t n_chars = chars.size();

  ExperimentReport report;
  report.model = opt.model_name;
  report.alphabet = alphabet.script_name;
  report.kind = "syntax";
  report.seeds_count = n_seeds;

  std::vector<TokenId> all_tokens;
  for (const auto& e : vocab) all_tokens.push_back(e.id);
  auto dataset_seed = [&](std::size_t s) { return derive_seed(cfg.seed, {0xda7a, s}); };
  auto train_seed = [&](std::size_t c, std::size_t s) { return derive_seed(cfg.seed, {0x7a1, c, s}); };
  auto control_seed = [&](std::size_t s) { return derive_seed(cfg.seed, {0xc0de, s}); };
  auto prepare = [&](std::size_t c, std::size_t s) {
    auto ds = build_char_dataset(vocab, chars[c], alphabet.case_sensitive, dataset_seed(s));
    auto split = split_grouped(ds, vocab, opt.split_ratio, dataset_seed(s), opt.group_by_lemma);
    return std::make_pair(std::move(ds), std::move(split));
  };
  auto tune_on = [&](const std::vector<TagStream>& f) {
    return detail::tune_learning_rate(cfg, n_chars, opt.jobs,
                                      [&](std::size_t c, const TrainConfig& c_cfg) -> std::optional<double> {
                                        try {
                                          auto [ds, split] = prepare(c, 0);
                                          TrainConfig tc = c_cfg;
                                          tc.seed = train_seed(c, 0);
                                          auto hold = holdout_split(split, cfg.tune_fraction, tc.seed);
                                          return train_syntax_probe(f, ds, hold, tc).metrics.macro_f1;
                                        } catch (const Error&) {
                                          return std::nullopt;
                                        }
                                      });
  };
  report.learning_rate = tune_on(features);

  std::vector<std::vector<double>> plm(n_chars, std::vector<double>(n_seeds, 0.0)), ctl = plm;
  std::vector<std::vector<bool>> ok(n_chars, std::vector<bool>(n_seeds, false));
  std::vector<std::string> errors(n_chars);
  std::mutex error_mutex;
  for (std::size_t s = 0; s < n_seeds; ++s) {
    std::vector<TagStream> control;
    if (opt.run_control) {
      control = permute_assignment(features, all_tokens, control_seed(s));
      if (s == 0) report.control_learning_rate = tune_on(control);
    }
    parallel_for(n_chars, opt.jobs, [&](std::size_t c) {
      try {
        auto [ds, split] = prepare(c, s);
        TrainConfig tc = cfg;
        tc.seed = train_seed(c, s);
        tc.learning_rate = report.learning_rate;
        plm[c][s] = train_syntax_probe(features, ds, split, tc).metrics.macro_f1;
        if (opt.run_control) {
          tc.learning_rate = report.control_learning_rate;
          ctl[c][s] = train_syntax_probe(control, ds, split, tc).metrics.macro_f1;
        }
        ok[c][s] = true;
      } catch (const Error& e) {
        std::lock_guard lock(error_mutex);
        if (errors[c].empty()) errors[c] = e.what();
      }
    });
  }
  for (std::size_t c = 0; c < n_chars; ++c) {
    CharRun run;
    run.name = utf8::encode(chars[c]);
    run.error = errors[c];
    for (std::size_t s = 0; s < n_seeds; ++s)
      if (ok[c][s]) {
        run.f1.push_back(plm[c][s]);
        if (opt.run_control) run.control_f1.push_back(ctl[c][s]);
      }
    if (run.ok() && run.f1.size() != n_seeds) run.error = "missing seeds";
    if (!run.ok())
      for (std::size_t s = 0; s < n_seeds; ++s) ok[c][s] = false;
    run.f1_mean = mean_of(run.f1);
    run.f1_std = sample_std(run.f1);
    run.control_mean = mean_of(run.control_f1);
    run.control_std = sample_std(run.control_f1);
    report.per_char.push_back(std::move(run));
  }
  report.has_control = opt.run_control;
  detail::finish_summary(report, plm, ctl, ok);
  return report;
}

}  // namespace charprobe
