#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "charprobe/embedding_store.hpp"
#include "charprobe/error.hpp"
#include "charprobe/metrics.hpp"
#include "charprobe/parallel.hpp"
#include "charprobe/probe_datasets.hpp"
#include "charprobe/probe_training.hpp"
#include "charprobe/utf8.hpp"
#include "charprobe/vocab.hpp"

namespace charprobe {

struct ExperimentOptions {
  std::string model_name = "model";
  double split_ratio = 0.8;
  bool group_by_lemma = true;
  bool run_control = true;
  std::size_t top_k = 10;
  std::size_t min_bin_examples = 10;
  unsigned jobs = 0;  // 0: all cores
  std::uint32_t control_vocab = 0;  // 0: same shape as the probed table
  std::uint32_t control_dim = 0;
};

// Control rows must cover every id of the probed table, so a requested vocab
// smaller than the table is widened.
inline EmbeddingTable experiment_control(const EmbeddingTable& table, const ExperimentOptions& opt,
                                         std::uint64_t seed) {
  const std::uint32_t v = std::max(opt.control_vocab, table.vocab_size());
  const std::uint32_t d = opt.control_dim ? opt.control_dim : table.dim();
  return make_control(v, d, seed);
}

struct RankedToken {
  TokenId token = 0;
  std::string surface;
  double prob = 0.0;
  int label = 0;
};

struct BreakdownRow {
  long key = 0;
  std::size_t n = 0;
  double value = 0.0;  // recall for positions, macro-F1 otherwise
};

struct Breakdown {
  std::vector<BreakdownRow> rows;
  std::vector<long> skipped;  // keys with fewer examples than the minimum
};

struct CharRun {
  std::string name;  // the character, UTF-8
  std::vector<double> f1;          // per seed
  std::vector<double> control_f1;  // per seed
  double f1_mean = 0.0, f1_std = 0.0;
  double control_mean = 0.0, control_std = 0.0;
  std::string error;  // non-empty: this character failed

  bool ok() const { return error.empty(); }
};

struct ExperimentReport {
  std::string model;
  std::string alphabet;
  std::string kind;  // "char" or "substring"
  unsigned seeds_count = 0;
  double learning_rate = 0.0;
  double control_learning_rate = 0.0;
  std::vector<CharRun> per_char;
  // Overall score per seed (mean over successful characters), then mean/std
  // over seeds.
  std::vector<double> seed_f1, seed_control_f1;
  double f1_mean = 0.0, f1_std = 0.0;
  double control_mean = 0.0, control_std = 0.0;
  Breakdown position, frequency, length;
  std::optional<OlsResult> position_ols, frequency_ols;
  std::string position_ols_error, frequency_ols_error;
  std::map<std::string, std::vector<RankedToken>> top_tokens;
  bool has_control = true;

  nlohmann::json to_json() const;
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / double(v.size());
}

/// Sample standard deviation; zero for fewer than two values.
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

/// Highest-probability first; ties go to the smaller token id. k beyond the
/// number of candidates returns all of them.
inline std::vector<RankedToken> rank_by_confidence(std::vector<RankedToken> candidates, std::size_t k) {
  std::sort(candidates.begin(), candidates.end(), [](const RankedToken& a, const RankedToken& b) {
    return a.prob != b.prob ? a.prob > b.prob : a.token < b.token;
  });
  candidates.resize(std::min(k, candidates.size()));
  return candidates;
}

inline std::vector<RankedToken> top_confidence_tokens(const Mlp<float>& model, const EmbeddingTable& table,
                                                      const CharDataset& ds, const SplitPlan& split,
                                                      const Vocabulary& vocab, std::size_t k) {
  if (k == 0 || split.test.empty()) return {};
  auto probs = predict_probs(model, gather_token_features(table, ds), split.test);
  std::vector<RankedToken> cands;
  for (std::size_t j = 0; j < split.test.size(); ++j) {
    const auto& ex = ds.examples[split.test[j]];
    cands.push_back({ex.token, vocab.by_id(ex.token).surface, double(probs[j]), ex.label});
  }
  return rank_by_confidence(std::move(cands), k);
}

namespace detail {

// Test-side outcome of one trained probe.
struct ProbeOutcome {
  double f1 = 0.0;
  std::vector<TokenId> tokens;
  std::vector<int> labels, predictions;
  std::vector<float> probs;
};

inline ProbeOutcome outcome_of(const ProbeResult& r, const std::vector<TokenId>& token_of_example,
                               std::span<const int> labels) {
  ProbeOutcome o;
  o.f1 = r.metrics.macro_f1;
  o.probs = r.test_probs;
  o.predictions = r.test_predictions;
  for (auto i : r.test_indices) {
    o.tokens.push_back(token_of_example[i]);
    o.labels.push_back(labels[i]);
  }
  return o;
}

inline void check_coverage(const EmbeddingTable& table, const Vocabulary& vocab) {
  if (!vocab.empty() && vocab.max_id() >= table.vocab_size())
    throw Error(ErrorCode::UnknownId, "vocabulary id " + std::to_string(vocab.max_id()) +
                                          " outside embedding table of " + std::to_string(table.vocab_size()) +
                                          " rows");
}

inline double mean_success(const std::vector<double>& f1, const std::vector<bool>& ok) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < f1.size(); ++i)
    if (ok[i]) {
      s += f1[i];
      ++n;
    }
  return n ? s / double(n) : 0.0;
}

// Grid search over cfg.lr_grid: each candidate is scored by the macro-F1,
// averaged over `n_tasks`, of probes trained on a held-out slice of the
// train side. `task(i, cfg)` returns that score or nullopt on failure.
template <typename Task>
double tune_learning_rate(const TrainConfig& cfg, std::size_t n_tasks, unsigned jobs, Task&& task) {
  if (cfg.lr_grid.empty()) return cfg.learning_rate;
  double best_lr = cfg.lr_grid.front(), best = -1.0;
  for (double lr : cfg.lr_grid) {
    TrainConfig c = cfg;
    c.learning_rate = lr;
    std::vector<double> scores(n_tasks, 0.0);
    std::vector<char> ok(n_tasks, 0);
    parallel_for(n_tasks, jobs, [&](std::size_t i) {
      if (auto s = task(i, c)) {
        scores[i] = *s;
        ok[i] = 1;
      }
    });
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < n_tasks; ++i)
      if (ok[i]) {
        sum += scores[i];
        ++n;
      }
    if (n && sum / double(n) > best) {
      best = sum / double(n);
      best_lr = lr;
    }
  }
  return best_lr;
}

template <typename KeyFn, typename ValueFn>
Breakdown bin_and_score(const std::vector<const ProbeOutcome*>& outcomes, KeyFn&& key_of, ValueFn&& score,
                        std::size_t min_examples) {
  // key -> (labels, predictions)
  std::map<long, std::pair<std::vector<int>, std::vector<int>>> bins;
  for (const auto* o : outcomes)
    for (std::size_t j = 0; j < o->tokens.size(); ++j) {
      auto key = key_of(*o, j);
      if (!key) continue;
      auto& b = bins[*key];
      b.first.push_back(o->labels[j]);
      b.second.push_back(o->predictions[j]);
    }
  Breakdown out;
  for (const auto& [key, b] : bins) {
    if (b.first.size() < min_examples) {
      out.skipped.push_back(key);
      continue;
    }
    out.rows.push_back({key, b.first.size(), score(b.second, b.first)});
  }
  return out;
}

inline std::optional<OlsResult> fit_breakdown(const Breakdown& b, std::string& error) {
  std::vector<double> xs, ys;
  for (const auto& r : b.rows) {
    xs.push_back(double(r.key));
    ys.push_back(r.value);
  }
  try {
    return ols_fit(xs, ys);
  } catch (const Error& e) {
    error = e.what();
    return std::nullopt;
  }
}

inline double recall_of(const std::vector<int>& preds, const std::vector<int>& labels) {
  std::size_t tp = 0, pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) {
      ++pos;
      tp += preds[i] != 0;
    }
  return pos ? 100.0 * double(tp) / double(pos) : 0.0;
}

inline double f1_of(const std::vector<int>& preds, const std::vector<int>& labels) {
  return macro_f1(preds, labels).macro_f1;
}

inline void finish_summary(ExperimentReport& report, const std::vector<std::vector<double>>& plm,
                           const std::vector<std::vector<double>>& control, const std::vector<std::vector<bool>>& ok) {
  // plm[c][s]
  const std::size_t n_seeds = report.seeds_count;
  for (std::size_t s = 0; s < n_seeds; ++s) {
    std::vector<double> a, b;
    std::vector<bool> okc;
    for (std::size_t c = 0; c < plm.size(); ++c) {
      a.push_back(plm[c][s]);
      b.push_back(control[c][s]);
      okc.push_back(ok[c][s]);
    }
    report.seed_f1.push_back(mean_success(a, okc));
    if (report.has_control) report.seed_control_f1.push_back(mean_success(b, okc));
  }
  report.f1_mean = mean_of(report.seed_f1);
  report.f1_std = sample_std(report.seed_f1);
  if (!report.has_control) return;
  report.control_mean = mean_of(report.seed_control_f1);
  report.control_std = sample_std(report.seed_control_f1);
}

}  // namespace detail

/// Probes every alphabet character over `n_seeds` dataset/split/training
/// seeds, each alongside a control probe on a random table of the same
/// shape, and computes the position/frequency/length breakdowns from the
/// pooled test predictions.
inline ExperimentReport run_char_experiment(const EmbeddingTable& table, const Vocabulary& vocab,
                                            const Alphabet& alphabet, const TrainConfig& cfg, unsigned n_seeds,
                                            const ExperimentOptions& opt = {}) {
  cfg.validate();
  if (n_seeds < 1) throw Error(ErrorCode::InvalidArgument, "n_seeds must be >= 1");
  if (alphabet.characters.empty()) throw Error(ErrorCode::EmptyAlphabet, "alphabet has no characters");
  detail::check_coverage(table, vocab);

  const auto& chars = alphabet.characters;
  const std::size_t n_chars = chars.size();
  const bool cs = alphabet.case_sensitive;

  ExperimentReport report;
  report.model = opt.model_name;
  report.alphabet = alphabet.script_name;
  report.kind = "char";
  report.seeds_count = n_seeds;

  auto dataset_seed = [&](std::size_t s) { return derive_seed(cfg.seed, {0xda7a, s}); };
  auto train_seed = [&](std::size_t c, std::size_t s) { return derive_seed(cfg.seed, {0x7a1, c, s}); };
  auto control_seed = [&](std::size_t s) { return derive_seed(cfg.seed, {0xc0de, s}); };

  struct Prepared {
    CharDataset ds;
    SplitPlan split;
    std::vector<TokenId> tokens;
    std::vector<int> labels;
  };
  auto prepare = [&](std::size_t c, std::size_t s) {
    Prepared p;
    p.ds = build_char_dataset(vocab, chars[c], cs, dataset_seed(s));
    p.split = split_grouped(p.ds, vocab, opt.split_ratio, dataset_seed(s), opt.group_by_lemma);
    for (const auto& ex : p.ds.examples) p.tokens.push_back(ex.token);
    p.labels = labels_of(p.ds);
    return p;
  };

  auto tune_on = [&](const EmbeddingTable& t) {
    return detail::tune_learning_rate(cfg, n_chars, opt.jobs, [&](std::size_t c, const TrainConfig& c_cfg)
                                                                   -> std::optional<double> {
      try {
        auto p = prepare(c, 0);
        TrainConfig tc = c_cfg;
        tc.seed = train_seed(c, 0);
        auto hold = holdout_split(p.split, cfg.tune_fraction, tc.seed);
        return train_binary_probe(gather_token_features(t, p.ds), p.labels, hold, tc).metrics.macro_f1;
      } catch (const Error&) {
        return std::nullopt;
      }
    });
  };

  report.learning_rate = tune_on(table);

  std::vector<std::vector<double>> plm(n_chars, std::vector<double>(n_seeds, 0.0));
  std::vector<std::vector<double>> ctl(n_chars, std::vector<double>(n_seeds, 0.0));
  std::vector<std::vector<bool>> ok(n_chars, std::vector<bool>(n_seeds, false));
  std::vector<std::string> errors(n_chars);
  std::vector<std::vector<detail::ProbeOutcome>> outcomes(n_chars, std::vector<detail::ProbeOutcome>(n_seeds));
  std::mutex error_mutex;

  std::optional<EmbeddingTable> control;
  for (std::size_t s = 0; s < n_seeds; ++s) {
    if (opt.run_control) {
      control.emplace(experiment_control(table, opt, control_seed(s)));
      if (s == 0) report.control_learning_rate = tune_on(*control);
    }
    parallel_for(n_chars, opt.jobs, [&](std::size_t c) {
      try {
        auto p = prepare(c, s);
        TrainConfig tc = cfg;
        tc.seed = train_seed(c, s);
        tc.learning_rate = report.learning_rate;
        auto r = train_binary_probe(gather_token_features(table, p.ds), p.labels, p.split, tc);
        outcomes[c][s] = detail::outcome_of(r, p.tokens, p.labels);
        plm[c][s] = r.metrics.macro_f1;
        if (control) {
          tc.learning_rate = report.control_learning_rate;
          ctl[c][s] = train_binary_probe(gather_token_features(*control, p.ds), p.labels, p.split, tc).metrics.macro_f1;
        }
        ok[c][s] = true;
      } catch (const Error& e) {
        std::lock_guard lock(error_mutex);
        if (errors[c].empty()) errors[c] = e.what();
      }
    });
  }
  control.reset();

  for (std::size_t c = 0; c < n_chars; ++c) {
    CharRun run;
    run.name = utf8::encode(chars[c]);
    run.error = errors[c];
    for (std::size_t s = 0; s < n_seeds; ++s)
      if (ok[c][s]) {
        run.f1.push_back(plm[c][s]);
        if (opt.run_control) run.control_f1.push_back(ctl[c][s]);
      }
    // A character counts only when every seed succeeded.
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

  std::vector<const detail::ProbeOutcome*> pooled;
  std::vector<char32_t> target_of;  // parallel to pooled
  for (std::size_t c = 0; c < n_chars; ++c)
    for (std::size_t s = 0; s < n_seeds; ++s)
      if (ok[c][s]) {
        pooled.push_back(&outcomes[c][s]);
        target_of.push_back(cs ? chars[c] : utf8::simple_lower(chars[c]));
      }
  std::map<const detail::ProbeOutcome*, char32_t> target_by_outcome;
  for (std::size_t i = 0; i < pooled.size(); ++i) target_by_outcome[pooled[i]] = target_of[i];

  report.position = detail::bin_and_score(
      pooled,
      [&](const detail::ProbeOutcome& o, std::size_t j) -> std::optional<long> {
        if (!o.labels[j]) return std::nullopt;
        auto chars_of = normalized_chars(vocab.by_id(o.tokens[j]).surface, cs);
        auto at = chars_of.find(target_by_outcome[&o]);
        if (at == std::u32string::npos) return std::nullopt;
        return long(at) + 1;
      },
      detail::recall_of, opt.min_bin_examples);
  report.frequency = detail::bin_and_score(
      pooled,
      [&](const detail::ProbeOutcome& o, std::size_t j) -> std::optional<long> {
        auto f = vocab.by_id(o.tokens[j]).frequency;
        if (f == 0) return std::nullopt;
        return long(std::floor(std::log(double(f))));
      },
      detail::f1_of, opt.min_bin_examples);
  report.length = detail::bin_and_score(
      pooled,
      [&](const detail::ProbeOutcome& o, std::size_t j) -> std::optional<long> {
        return long(normalized_chars(vocab.by_id(o.tokens[j]).surface, true).size());
      },
      detail::f1_of, opt.min_bin_examples);
  report.position_ols = detail::fit_breakdown(report.position, report.position_ols_error);
  report.frequency_ols = detail::fit_breakdown(report.frequency, report.frequency_ols_error);

  if (opt.top_k > 0)
    for (std::size_t c = 0; c < n_chars; ++c) {
      if (!ok[c][0]) continue;
      const auto& o = outcomes[c][0];
      std::vector<RankedToken> cands;
      for (std::size_t j = 0; j < o.tokens.size(); ++j)
        cands.push_back({o.tokens[j], vocab.by_id(o.tokens[j]).surface, double(o.probs[j]), o.labels[j]});
      report.top_tokens[utf8::encode(chars[c])] = rank_by_confidence(std::move(cands), opt.top_k);
    }
  return report;
}

inline std::uint64_t substring_dataset_seed(std::uint64_t base, std::size_t seed_index) {
  return derive_seed(base, {0x5b5, seed_index});
}

/// Substring experiment: pairs (u, v) from build_substring_dataset, input
/// [embedding(u); embedding(v)], split grouped by v.
inline ExperimentReport run_substring_experiment(const EmbeddingTable& table, const Vocabulary& vocab,
                                                 const TrainConfig& cfg, unsigned n_seeds,
                                                 const ExperimentOptions& opt = {}) {
  cfg.validate();
  if (n_seeds < 1) throw Error(ErrorCode::InvalidArgument, "n_seeds must be >= 1");
  detail::check_coverage(table, vocab);

  ExperimentReport report;
  report.model = opt.model_name;
  report.kind = "substring";
  report.seeds_count = n_seeds;

  auto dataset_seed = [&](std::size_t s) { return substring_dataset_seed(cfg.seed, s); };
  auto train_seed = [&](std::size_t s) { return derive_seed(cfg.seed, {0x5b7, s}); };
  auto control_seed = [&](std::size_t s) { return derive_seed(cfg.seed, {0xc0de, s}); };

  struct Prepared {
    SubstringDataset ds;
    SplitPlan split;
    std::vector<int> labels;
  };
  std::vector<Prepared> prepared(n_seeds);
  for (std::size_t s = 0; s < n_seeds; ++s) {
    auto& p = prepared[s];
    p.ds = build_substring_dataset(vocab, dataset_seed(s));
    if (p.ds.examples.empty()) throw Error(ErrorCode::NoPositives, "no token is a substring of another");
    p.split = split_grouped(p.ds, vocab, opt.split_ratio, dataset_seed(s));
    p.labels = labels_of(p.ds);
  }

  auto tune_on = [&](const EmbeddingTable& t) {
    return detail::tune_learning_rate(cfg, 1, 1, [&](std::size_t, const TrainConfig& c_cfg) -> std::optional<double> {
      try {
        TrainConfig tc = c_cfg;
        tc.seed = train_seed(0);
        auto hold = holdout_split(prepared[0].split, cfg.tune_fraction, tc.seed);
        return train_binary_probe(gather_pair_features(t, prepared[0].ds), prepared[0].labels, hold, tc)
            .metrics.macro_f1;
      } catch (const Error&) {
        return std::nullopt;
      }
    });
  };
  report.learning_rate = tune_on(table);

  CharRun run;
  run.name = "substring";
  std::vector<std::vector<double>> plm(1, std::vector<double>(n_seeds, 0.0)), ctl = plm;
  std::vector<std::vector<bool>> ok(1, std::vector<bool>(n_seeds, false));
  for (std::size_t s = 0; s < n_seeds; ++s) {
    const auto& p = prepared[s];
    TrainConfig tc = cfg;
    tc.seed = train_seed(s);
    tc.learning_rate = report.learning_rate;
    try {
      plm[0][s] = train_binary_probe(gather_pair_features(table, p.ds), p.labels, p.split, tc).metrics.macro_f1;
      if (opt.run_control) {
        auto control = experiment_control(table, opt, control_seed(s));
        if (s == 0) report.control_learning_rate = tune_on(control);
        tc.learning_rate = report.control_learning_rate;
        ctl[0][s] = train_binary_probe(gather_pair_features(control, p.ds), p.labels, p.split, tc).metrics.macro_f1;
        run.control_f1.push_back(ctl[0][s]);
      }
      run.f1.push_back(plm[0][s]);
      ok[0][s] = true;
    } catch (const Error& e) {
      if (run.error.empty()) run.error = e.what();
    }
  }
  run.f1_mean = mean_of(run.f1);
  run.f1_std = sample_std(run.f1);
  run.control_mean = mean_of(run.control_f1);
  run.control_std = sample_std(run.control_f1);
  report.per_char.push_back(std::move(run));
  report.has_control = opt.run_control;
  detail::finish_summary(report, plm, ctl, ok);
  return report;
}

namespace detail {

inline nlohmann::json breakdown_json(const Breakdown& b, const char* value_name) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : b.rows) rows.push_back({{"key", r.key}, {"n", r.n}, {value_name, r.value}});
  return {{"rows", rows}, {"skipped", b.skipped}};
}

inline nlohmann::json ols_json(const std::optional<OlsResult>& r, const std::string& error) {
  if (!r) return {{"error", error}};
  auto finite = [](double x) -> nlohmann::json {
    if (std::isfinite(x)) return x;
    return std::signbit(x) ? "-inf" : "inf";
  };
  return {{"slope", r->slope},  {"intercept", r->intercept},      {"t", finite(r->t_stat)},
          {"p", r->p_value},    {"stderr", r->slope_stderr},      {"n", r->n}};
}

inline nlohmann::json std_json(double v, unsigned seeds) {
  return seeds > 1 ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace detail

inline nlohmann::json ExperimentReport::to_json() const {
  nlohmann::json j;
  j["model"] = model;
  j["alphabet"] = alphabet;
  j["kind"] = kind;
  j["seeds"] = seeds_count;
  j["learning_rate"] = learning_rate;
  j["control_learning_rate"] = control_learning_rate;
  j["per_char"] = nlohmann::json::array();
  for (const auto& r : per_char) {
    nlohmann::json e{{"char", r.name},
                     {"f1_mean", r.f1_mean},
                     {"f1_std", detail::std_json(r.f1_std, seeds_count)},
                     {"control_f1", has_control ? nlohmann::json(r.control_mean) : nlohmann::json()},
                     {"control_f1_std", has_control ? detail::std_json(r.control_std, seeds_count) : nlohmann::json()},
                     {"f1", r.f1},
                     {"control", r.control_f1}};
    if (!r.ok()) e["error"] = r.error;
    j["per_char"].push_back(std::move(e));
  }
  j["summary"] = {{"f1_mean", f1_mean},
                  {"f1_std", detail::std_json(f1_std, seeds_count)},
                  {"control_mean", has_control ? nlohmann::json(control_mean) : nlohmann::json()},
                  {"control_std", has_control ? detail::std_json(control_std, seeds_count) : nlohmann::json()},
                  {"per_seed", seed_f1},
                  {"control_per_seed", seed_control_f1}};
  j["breakdowns"] = {{"position_recall", detail::breakdown_json(position, "recall")},
                     {"log_frequency_f1", detail::breakdown_json(frequency, "f1")},
                     {"length_f1", detail::breakdown_json(length, "f1")}};
  j["regressions"] = {{"position_recall", detail::ols_json(position_ols, position_ols_error)},
                      {"log_frequency_f1", detail::ols_json(frequency_ols, frequency_ols_error)}};
  j["top_tokens"] = nlohmann::json::object();
  for (const auto& [c, list] : top_tokens) {
    auto& arr = j["top_tokens"][c] = nlohmann::json::array();
    for (const auto& t : list)
      arr.push_back({{"token", t.token}, {"surface", t.surface}, {"prob", t.prob}, {"label", t.label}});
  }
  return j;
}

}  // namespace charprobe
