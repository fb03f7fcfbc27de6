// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance            all criteria
//   acceptance 1 4 6      selected criteria
// Criterion 5 reads the corpus from CHARPROBE_CORPUS (a file or directory).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "charprobe/char_probe.hpp"
#include "charprobe/corpus_analyzer.hpp"
#include "charprobe/metrics.hpp"
#include "charprobe/mlp.hpp"
#include "cli_app.hpp"
#include "corpus_oracle.hpp"
#include "synthetic.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace charprobe::acceptance {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Collects failed checks; the first few are kept for the report line.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (ok) return;
    if (failures_.size() < 3) failures_.push_back(what);
    ++failed_;
  }
  bool ok() const { return failed_ == 0; }
  std::string summary() const {
    std::ostringstream s;
    s << failed_ << "/" << total_ << " checks failed";
    for (const auto& f : failures_) s << "; " << f;
    return s.str();
  }
  std::size_t total() const { return total_; }

 private:
  std::size_t total_ = 0, failed_ = 0;
  std::vector<std::string> failures_;
};

std::string fmt(double v, int digits = 2) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << v;
  return s.str();
}

const std::string kLetters = "abcdefghijklmnopqrstuvwxyz";

const TokenizationScheme& gpt2() {
  static const TokenizationScheme scheme =
      load_scheme(testing::fixture("gpt2/merges.txt"), testing::fixture("gpt2/vocab.json"));
  return scheme;
}

// 1. Letter-count oracle embeddings through the full character probe.
Outcome synthetic_oracle_probe() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1);
  auto words = testing::unique_words(rng, 5000, 3, 10, kLetters);
  // N(0, 0.01) read as variance 0.01.
  auto table = testing::count_embeddings(words, kLetters, 0.1f, 2);
  auto vocab = testing::vocab_from_surfaces(words);
  TrainConfig cfg;
  cfg.lr_grid = default_lr_grid();
  cfg.seed = 3;
  ExperimentOptions opt;
  opt.model_name = "letter-counts";
  auto report = run_char_experiment(table, vocab, Alphabet::english(), cfg, 5, opt);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  std::size_t failed = 0;
  for (const auto& r : report.per_char) failed += !r.ok();
  const bool pass = report.per_char.size() == 26 && failed == 0 && report.f1_mean >= 99.0 &&
                    report.control_mean >= 45.0 && report.control_mean <= 55.0 && seconds < 600.0;
  return {pass, "F1 " + fmt(report.f1_mean) + " (>= 99), control " + fmt(report.control_mean) +
                    " (45..55), chars ok " + std::to_string(26 - failed) + "/26, runtime " + fmt(seconds, 1) +
                    " s (< 600)"};
}

// Vocabulary with lemma families (base plus suffixed forms), singletons and
// marker prefixes.
Vocabulary random_lemma_vocab(std::mt19937_64& rng, const std::string& letters) {
  const std::size_t families = 300 + rng() % 700;
  const std::vector<std::string> suffixes{"s", "ed", "ing", "er", "ly"};
  std::set<std::string> seen;
  std::vector<VocabEntry> entries;
  auto add = [&](const std::string& surface, const std::string& lemma) {
    if (!seen.insert(surface).second) return;
    entries.push_back({TokenId(entries.size() * 3 + 1), surface, lemma, rng() % 1000});
  };
  for (auto& base : testing::random_words(rng, families, 2, 9, letters)) {
    const bool grouped = rng() % 3 != 0;
    const std::string marker = rng() % 2 ? "Ġ" : "";
    add(marker + base, grouped ? base : "");
    if (!grouped) continue;
    for (std::size_t k = rng() % 4; k > 0; --k) add(marker + base + suffixes[rng() % suffixes.size()], base);
  }
  return Vocabulary(std::move(entries));
}

std::string own_key(const VocabEntry& e) { return e.lemma.empty() ? "token " + std::to_string(e.id) : e.lemma; }

// 2. Balance, leakage and split-fraction properties.
Outcome balance_and_splits() {
  Checks checks;
  std::size_t char_datasets = 0, substring_datasets = 0, skipped = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(1000 + trial);
    std::string letters = kLetters;
    std::shuffle(letters.begin(), letters.end(), rng);
    letters.resize(8 + rng() % 19);
    const auto vocab = random_lemma_vocab(rng, letters);
    const std::string tag = "vocab " + std::to_string(trial);

    for (char32_t c : Alphabet::english().characters) {
      CharDataset ds;
      try {
        ds = build_char_dataset(vocab, c, false, trial);
      } catch (const Error& e) {
        const bool expected = e.code() == ErrorCode::NoPositives || e.code() == ErrorCode::NoNegatives;
        checks.expect(expected, tag + ": unexpected error " + e.what());
        ++skipped;
        continue;
      }
      ++char_datasets;
      std::size_t pos = 0, available_pos = 0, available_neg = 0;
      for (const auto& e : vocab) {
        const auto chars = normalized_chars(e.surface, false);
        (chars.find(c) != std::u32string::npos ? available_pos : available_neg)++;
      }
      for (const auto& ex : ds.examples) {
        const auto chars = normalized_chars(vocab.by_id(ex.token).surface, false);
        const int truth = chars.find(c) != std::u32string::npos;
        checks.expect(ex.label == truth, tag + ": wrong label");
        pos += ex.label;
      }
      checks.expect(2 * pos == ds.examples.size(), tag + ": unbalanced dataset for " + utf8::encode(c));
      checks.expect(pos == std::min(available_pos, available_neg), tag + ": minority class not kept whole");

      const auto plan = split_grouped(ds, vocab, 0.8, trial);
      std::set<std::string> train_keys;
      for (auto i : plan.train) train_keys.insert(own_key(vocab.by_id(ds.examples[i].token)));
      for (auto i : plan.test)
        checks.expect(!train_keys.count(own_key(vocab.by_id(ds.examples[i].token))), tag + ": lemma leakage");
      checks.expect(plan.train.size() + plan.test.size() == ds.examples.size(), tag + ": split lost examples");
      const double f = plan.train_fraction();
      checks.expect(f >= 0.75 && f <= 0.85, tag + ": char split fraction " + fmt(f, 3));
    }

    auto sub_words = testing::substring_vocab(rng, 150 + rng() % 150, 500 + rng() % 300, letters);
    const auto sub_vocab = testing::vocab_from_surfaces(sub_words);
    const auto sds = build_substring_dataset(sub_vocab, trial);
    ++substring_datasets;
    std::map<TokenId, long> balance;
    for (const auto& ex : sds.examples) {
      const auto& u = sub_words[ex.u];
      const auto& v = sub_words[ex.v];
      const int truth = u.size() < v.size() && v.find(u) != std::string::npos;
      checks.expect(ex.label == truth, tag + ": wrong substring label");
      balance[ex.v] += ex.label ? 1 : -1;
    }
    for (auto [v, b] : balance) checks.expect(b == 0, tag + ": unbalanced superstring " + sub_words[v]);
    const auto plan = split_grouped(sds, sub_vocab, 0.8, trial);
    std::set<TokenId> train_v;
    for (auto i : plan.train) train_v.insert(sds.examples[i].v);
    for (auto i : plan.test) checks.expect(!train_v.count(sds.examples[i].v), tag + ": superstring leakage");
    const double f = plan.train_fraction();
    checks.expect(f >= 0.75 && f <= 0.85, tag + ": substring split fraction " + fmt(f, 3));
  }
  return {checks.ok(), std::to_string(char_datasets) + " char and " + std::to_string(substring_datasets) +
                           " substring datasets, " + std::to_string(skipped) + " one-class targets skipped, " +
                           checks.summary()};
}

double relative_error(double numeric, double analytic) {
  return std::abs(numeric - analytic) / std::max(1e-6, std::abs(numeric) + std::abs(analytic));
}

double mlp_gradient_error() {
  Rng rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const int d = 5 + trial, h1 = 4 + 2 * trial, h2 = 6 + trial;
    Mlp<double> model(d, h1, h2, 1, 0.0);
    model.init(rng);
    Matrix<double> x = Matrix<double>::Random(d, 7);
    std::vector<int> y{1, 0, 1, 1, 0, 0, 1};
    auto loss = [&](const Matrix<double>& in) {
      Matrix<double> g;
      return bce_with_logits(model.forward(in), y, g);
    };

    MlpCache<double> cache;
    Matrix<double> d_logits;
    bce_with_logits(model.forward(x, &cache), y, d_logits);
    auto grads = model.params().zeros_like();
    const Matrix<double> d_input = model.backward(cache, d_logits, grads);

    const double h = 1e-6;
    model.params().zip(grads, [&](double* p, const double* g, Eigen::Index n) {
      for (Eigen::Index i = 0; i < n; ++i) {
        const double saved = p[i];
        p[i] = saved + h;
        const double up = loss(x);
        p[i] = saved - h;
        const double down = loss(x);
        p[i] = saved;
        worst = std::max(worst, relative_error((up - down) / (2 * h), g[i]));
      }
    });
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      Matrix<double> xp = x, xm = x;
      xp.data()[i] += h;
      xm.data()[i] -= h;
      worst = std::max(worst, relative_error((loss(xp) - loss(xm)) / (2 * h), d_input.data()[i]));
    }
  }
  return worst;
}

double cbow_gradient_error() {
  Rng rng(5);
  const int dim = 7, rows = 9;
  std::normal_distribution<double> g(0.0, 0.5);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    Matrix<double> in(dim, rows), out(dim, rows);
    for (Eigen::Index i = 0; i < in.size(); ++i) {
      in.data()[i] = g(rng);
      out.data()[i] = g(rng);
    }
    std::vector<std::uint32_t> context{0, 2, 2, 5}, negs{1, 4, 6};
    const std::uint32_t target = 3;
    Vector<double> h, gh;
    auto loss = [&](Matrix<double> a, Matrix<double> b) {
      return cbow_step<double>(a, b, context, target, negs, 0.0, h, gh);
    };
    // One step of size lr moves each parameter by -lr * gradient.
    const double lr = 1e-3, eps = 1e-6;
    Matrix<double> in2 = in, out2 = out;
    cbow_step<double>(in2, out2, context, target, negs, lr, h, gh);
    auto check = [&](Matrix<double>& m, const Matrix<double>& after, bool is_input) {
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        const double analytic = (m.data()[i] - after.data()[i]) / lr;
        const double saved = m.data()[i];
        m.data()[i] = saved + eps;
        const double up = is_input ? loss(m, out) : loss(in, m);
        m.data()[i] = saved - eps;
        const double down = is_input ? loss(m, out) : loss(in, m);
        m.data()[i] = saved;
        worst = std::max(worst, relative_error((up - down) / (2 * eps), analytic));
      }
    };
    check(in, in2, true);
    check(out, out2, false);
  }
  return worst;
}

double adam_error() {
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Adam<double> adam(lr, b1, b2, eps);
  double w[2] = {0.0, 5.0};
  double ref[2] = {0.0, 5.0}, m[2] = {0, 0}, v[2] = {0, 0};
  double worst = 0.0;
  for (int t = 1; t <= 500; ++t) {
    double g[2] = {2.0 * (w[0] - 3.0), 4.0 * (w[1] + 1.0)};
    adam.begin_step();
    adam.update(w, g, 2);
    for (int k = 0; k < 2; ++k) {
      const double rg = k == 0 ? 2.0 * (ref[0] - 3.0) : 4.0 * (ref[1] + 1.0);
      m[k] = b1 * m[k] + (1 - b1) * rg;
      v[k] = b2 * v[k] + (1 - b2) * rg * rg;
      const double m_hat = m[k] / (1 - std::pow(b1, t));
      const double v_hat = v[k] / (1 - std::pow(b2, t));
      ref[k] -= lr * m_hat / (std::sqrt(v_hat) + eps);
      worst = std::max(worst, std::abs(w[k] - ref[k]));
    }
  }
  return worst;
}

double ols_error() {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const double slope = u(rng), intercept = u(rng);
    std::vector<double> xs, ys;
    for (int i = 0, n = 3 + trial % 20; i < n; ++i) {
      xs.push_back(double(i) + 0.5 * u(rng));
      ys.push_back(slope * xs.back() + intercept);
    }
    const auto r = ols_fit(xs, ys);
    worst = std::max({worst, std::abs(r.slope - slope), std::abs(r.intercept - intercept)});
  }
  return worst;
}

// 3. Numerical engine.
Outcome numerical_engine() {
  const double mlp = mlp_gradient_error(), cbow = cbow_gradient_error(), adam = adam_error(), ols = ols_error();
  const bool pass = mlp < 1e-4 && cbow < 1e-4 && adam < 1e-6 && ols < 1e-9;
  return {pass, "MLP grad rel " + sci(mlp) + ", CBOW grad rel " + sci(cbow) + " (< 1e-4); Adam " + sci(adam) +
                    " (< 1e-6); OLS " + sci(ols)};
}

std::string fuzz_text(std::mt19937_64& rng, std::size_t max_len) {
  static const std::vector<std::string> pieces{" the", " schematics", "ing", " Über", "ß", "日本", "é", "'s", "'ll",
                                               "  ", "\n", "\t", "123", "!?", " café", "…", "😀"};
  std::string s;
  const std::size_t n = rng() % (max_len + 1);
  while (s.size() < n) {
    const auto r = rng() % 100;
    if (r < 55) s += char(32 + rng() % 95);
    else if (r < 85) s += pieces[rng() % pieces.size()];
    else if (r < 95) s += ' ';
    else s += char(rng() % 256);
  }
  return s;
}

// 4. Tokenizer round trips and split sets.
Outcome tokenizer() {
  Checks checks;
  std::mt19937_64 rng(10);
  std::vector<std::string> texts;
  for (int k = 0; k < 10000; ++k) texts.push_back(fuzz_text(rng, 60));
  for (double rho : {0.0, 0.05, 0.1, 0.2, 0.5}) {
    Rng stream(derive_seed(7, {std::uint64_t(rho * 100)}));
    const auto scheme = gpt2().with_variability(rho, 1);
    for (const auto& t : texts) {
      const auto ids = variable_tokenize(scheme, t, stream);
      checks.expect(detokenize(gpt2(), ids) == t, "round trip at rho " + fmt(rho));
      if (rho == 0.0) checks.expect(ids == bpe_encode(gpt2(), t), "rho 0 differs from plain BPE");
    }
  }

  std::ifstream in(testing::fixture("gpt2/reference.jsonl"));
  std::string line;
  std::size_t references = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    checks.expect(bpe_encode(gpt2(), j["text"].get<std::string>()) == j["ids"].get<std::vector<TokenId>>(),
                  "reference encoding mismatch");
    ++references;
  }
  checks.expect(references > 0, "no reference encodings");

  std::set<std::pair<std::string, std::string>> splits;
  for (auto [l, r] : two_way_splits(gpt2(), " schematics"))
    splits.insert({*byte_level::from_symbols(gpt2().token(l)), *byte_level::from_symbols(gpt2().token(r))});
  checks.expect(splits.count({" schema", "tics"}) == 1, "missing schema+tics");
  checks.expect(splits.count({" schematic", "s"}) == 1, "missing schematic+s");
  checks.expect(splits.count({" schemati", "cs"}) == 0, "schemati+cs present");

  // Exact split set against the raw vocabulary.
  std::set<std::string> raw;
  for (TokenId id = 0; id < gpt2().id_bound(); ++id)
    if (gpt2().has_id(id))
      if (auto s = byte_level::from_symbols(gpt2().token(id))) raw.insert(*s);
  std::set<std::pair<std::string, std::string>> brute;
  const std::string word = " schematics";
  for (std::size_t i = 2; i < word.size(); ++i)
    if (raw.count(word.substr(0, i)) && raw.count(word.substr(i))) brute.insert({word.substr(0, i), word.substr(i)});
  checks.expect(splits == brute, "split set differs from brute force");

  std::string listed;
  for (const auto& [l, r] : splits) listed += (listed.empty() ? "" : ", ") + ("'" + l + "'+'" + r + "'");
  return {checks.ok(), "50000 fuzzed round trips, " + std::to_string(references) + " reference encodings, " +
                           "splits {" + listed + "}, " + checks.summary()};
}

std::vector<std::string> corpus_files(const fs::path& root, std::uintmax_t& bytes) {
  std::vector<std::string> files;
  bytes = 0;
  if (fs::is_regular_file(root)) {
    files.push_back(root.string());
  } else if (fs::is_directory(root)) {
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
  }
  for (const auto& f : files) bytes += fs::file_size(f);
  return files;
}

// 5. Tokenization-variability effect on a real corpus, through the CLI.
Outcome variability_effect() {
  constexpr std::uintmax_t kMinBytes = 50'000'000;
  const char* env = std::getenv("CHARPROBE_CORPUS");
  if (!env || !*env)
    return {false, "CHARPROBE_CORPUS is not set; this criterion needs >= 50 MB of public-domain text"};
  std::uintmax_t bytes = 0;
  const auto files = corpus_files(env, bytes);
  if (bytes < kMinBytes)
    return {false, "corpus at " + std::string(env) + " holds " + std::to_string(bytes) + " bytes (< 50 MB)"};

  const auto start = std::chrono::steady_clock::now();
  const auto threads = std::to_string(std::max(1u, std::thread::hardware_concurrency()));
  testing::TempDir work;
  struct Scheme {
    std::string name, kind;
    double rho;
  };
  const std::vector<Scheme> schemes{{"word", "word", 0.0},     {"rho0", "bpe", 0.0},   {"rho0.05", "bpe", 0.05},
                                    {"rho0.1", "bpe", 0.1},    {"rho0.2", "bpe", 0.2}, {"rho0.5", "bpe", 0.5}};
  std::map<std::string, std::vector<double>> f1;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    for (const auto& s : schemes) {
      const auto dir = work / (s.name + "-" + std::to_string(seed));
      std::vector<std::string> train{"cbow-train", "--out", (dir / "cbow").string(), "--scheme", s.kind,
                                     "--seed", std::to_string(seed), "--threads", threads};
      for (const auto& f : files) train.insert(train.end(), {"--corpus", f});
      if (s.kind == "bpe")
        train.insert(train.end(), {"--merges", testing::fixture("gpt2/merges.txt").string(), "--bpe-vocab",
                                   testing::fixture("gpt2/vocab.json").string(), "--rho", fmt(s.rho, 2)});
      std::ostringstream out, err;
      if (int rc = cli::run_cli(train, out, err); rc != 0)
        return {false, s.name + " seed " + std::to_string(seed) + ": cbow-train exit " + std::to_string(rc) + ": " +
                           err.str()};
      const std::vector<std::string> probe{"probe-chars", "--out", (dir / "probe").string(), "--embeddings",
                                           (dir / "cbow/embeddings.bin").string(), "--vocab",
                                           (dir / "cbow/vocab.tsv").string(), "--alphabetic-only", "--seeds", "1",
                                           "--seed", std::to_string(seed), "--no-control", "--model-name",
                                           s.name, "--jobs", threads};
      const int rc = cli::run_cli(probe, out, err);
      if (rc == 2) return {false, s.name + ": probe-chars exit 2: " + err.str()};
      const auto report = cli::read_json(dir / "probe/report.json");
      f1[s.name].push_back(report["summary"]["f1_mean"].get<double>());
      std::cerr << "[5] seed " << seed << " " << s.name << ": F1 " << fmt(f1[s.name].back()) << "\n";
    }
  }
  const double hours = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 3600.0;
  int subword_wins = 0, variability_wins = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    subword_wins += f1["rho0"][k] > f1["word"][k];
    variability_wins += std::max(f1["rho0.05"][k], f1["rho0.1"][k]) > f1["rho0"][k];
  }
  std::string table;
  for (const auto& s : schemes) {
    table += " " + s.name + "=";
    for (std::size_t k = 0; k < 3; ++k) table += (k ? "/" : "") + fmt(f1[s.name][k], 1);
  }
  const bool pass = subword_wins >= 2 && variability_wins >= 2 && hours <= 6.0;
  return {pass, "rho0 > word in " + std::to_string(subword_wins) + "/3 seeds, max(rho .05, .1) > rho0 in " +
                    std::to_string(variability_wins) + "/3 seeds, " + fmt(hours, 2) + " h (<= 6);" + table};
}

const std::vector<std::string> kTargets{"dictionary", "something", "projection", "different",
                                        "character",  "tokenization", "information", "schematics"};
const std::vector<std::string> kDictionary{"protection", "projections", "somethings", "characters", "schematic",
                                           "dictionary", "apple",       "table",      "indifferent"};

// 6. Corpus analyzer against the injection oracle.
Outcome corpus_analyzer() {
  Checks checks;
  const auto corpus = testing::synthetic_corpus(5u << 20, kTargets, kDictionary, 17);
  const auto single = analyze_corpus({corpus.text}, kTargets, kDictionary, gpt2(), 1);
  const auto expected = testing::injection_oracle(corpus, kTargets, kDictionary, gpt2());
  checks.expect(single.stats == expected, "stats differ from the injection oracle");
  std::size_t occurrences = 0;
  for (const auto& t : single.stats.targets) {
    occurrences += t.occurrences;
    for (std::size_t c = 1; c <= kExactMatch; ++c)
      checks.expect(t.unique[c] <= t.unique[c - 1], t.target + ": nesting broken at " + category_name(c));
    checks.expect(t.unique[kCaseVariants] <= t.unique[kAllMatches], t.target + ": case variants exceed all");
  }

  std::mt19937_64 rng(1);
  for (int k = 0; k < 10000; ++k) {
    const auto a = testing::random_words(rng, 1, 1, 12, "abcd")[0];
    std::string b = a;
    switch (rng() % 4) {
      case 0: b[rng() % b.size()] = "abcd"[rng() % 4]; break;
      case 1: b.erase(rng() % b.size(), 1); break;
      case 2: b.insert(rng() % (b.size() + 1), 1, "abcd"[rng() % 4]); break;
      default: b = testing::random_words(rng, 1, 0, 13, "abcd")[0];
    }
    const auto full = levenshtein<char>(a, b);
    checks.expect(edit_distance_upto1<char>(a, b) == int(std::min<std::size_t>(full, 2)), "banded != DP: " + a + "/" + b);
  }

  for (std::size_t n : {2u, 16u, 61u}) {
    const auto sharded = analyze_corpus(split_shards(corpus.text, n), kTargets, kDictionary, gpt2(), 0);
    checks.expect(sharded.stats.to_json().dump() == single.stats.to_json().dump(),
                  std::to_string(n) + " shards differ from one shard");
  }
  return {checks.ok(), std::to_string(corpus.text.size()) + " bytes, " + std::to_string(occurrences) +
                           " target occurrences, " + checks.summary()};
}

// 7. Substring dataset and probe.
Outcome substring_pipeline() {
  Checks checks;
  std::mt19937_64 rng(2024);
  auto words = testing::random_words(rng, 400, 1, 6, "abcdefgh");
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  std::shuffle(words.begin(), words.end(), rng);
  words.resize(200);
  std::vector<std::string> marked;
  for (auto& w : words) marked.push_back((rng() % 2 ? "Ġ" : "") + w);
  const auto vocab = testing::vocab_from_surfaces(marked);
  const auto ds = build_substring_dataset(vocab, 8);

  std::set<std::pair<TokenId, TokenId>> brute, got;
  for (std::size_t i = 0; i < words.size(); ++i)
    for (std::size_t j = 0; j < words.size(); ++j)
      if (words[i].size() < words[j].size() && words[j].find(words[i]) != std::string::npos)
        brute.insert({TokenId(i), TokenId(j)});
  std::map<TokenId, long> balance;
  for (const auto& ex : ds.examples) {
    const bool is_sub = words[ex.u].size() < words[ex.v].size() && words[ex.v].find(words[ex.u]) != std::string::npos;
    checks.expect(ex.label == int(is_sub), "wrong label");
    if (ex.label) got.insert({ex.u, ex.v});
    balance[ex.v] += ex.label ? 1 : -1;
  }
  checks.expect(got == brute, "positives differ from brute force");
  for (auto [v, b] : balance) checks.expect(b == 0, "unbalanced superstring");
  checks.expect(ds.positives_dropped == 0, "positives dropped");

  std::mt19937_64 rng2(31);
  const std::string letters = kLetters.substr(0, 16);
  auto sub_words = testing::substring_vocab(rng2, 600, 2000, letters);
  const auto sub_vocab = testing::vocab_from_surfaces(sub_words);
  const auto table = testing::count_embeddings(sub_words, letters, 0.01f, 32);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 30;
  cfg.seed = 4;
  ExperimentOptions opt;
  opt.model_name = "letter-counts";
  const auto report = run_substring_experiment(table, sub_vocab, cfg, 3, opt);
  checks.expect(report.per_char.size() == 1 && report.per_char[0].ok(), "substring probe failed");
  checks.expect(report.f1_mean >= 90.0, "probe F1 below 90");
  return {checks.ok(), std::to_string(brute.size()) + " brute-force positives, probe F1 " + fmt(report.f1_mean) +
                           " (>= 90), control " + fmt(report.control_mean) + ", " + checks.summary()};
}

}  // namespace charprobe::acceptance

int main(int argc, char** argv) {
  using namespace charprobe::acceptance;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"synthetic-oracle probe", synthetic_oracle_probe},
      {"balance and split properties", balance_and_splits},
      {"numerical engine", numerical_engine},
      {"tokenizer", tokenizer},
      {"tokenization-variability effect", variability_effect},
      {"corpus analyzer", corpus_analyzer},
      {"substring pipeline", substring_pipeline},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const int n = std::atoi(argv[i]);
    if (n < 1 || n > int(criteria.size())) {
      std::cerr << "usage: acceptance [criterion 1-" << criteria.size() << "]...\n";
      return 2;
    }
    selected.insert(n);
  }
  int failed = 0;
  for (int n = 1; n <= int(criteria.size()); ++n) {
    if (!selected.empty() && !selected.count(n)) continue;
    const auto& [name, run] = criteria[std::size_t(n - 1)];
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << name << "): " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
