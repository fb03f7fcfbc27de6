#pragma once

// The charprobe command line: subcommands, JSON config files and run
// manifests. Kept header-only so tests can drive run_cli in process.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "charprobe/cbow.hpp"
#include "charprobe/char_probe.hpp"
#include "charprobe/corpus_analyzer.hpp"
#include "charprobe/syntax_probe.hpp"

namespace charprobe::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------- hashing

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw Error(ErrorCode::IoError, "sha256 unavailable");
  }

  Sha256& update(std::string_view data) {
    EVP_DigestUpdate(ctx_.get(), data.data(), data.size());
    return *this;
  }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md, &len);
    std::ostringstream s;
    for (unsigned i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return s.str();
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view data) { return Sha256().update(data).hex(); }

inline json file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  Sha256 h;
  std::vector<char> buf(1 << 20);
  std::uint64_t bytes = 0;
  while (in) {
    in.read(buf.data(), std::streamsize(buf.size()));
    const auto n = std::size_t(in.gcount());
    h.update(std::string_view(buf.data(), n));
    bytes += n;
  }
  return {{"path", path.string()}, {"sha256", h.hex()}, {"bytes", bytes}};
}

// ---------------------------------------------------------------- config

inline Error config_error(const std::string& what) { return Error(ErrorCode::ConfigError, what); }

inline std::size_t line_of(std::string_view text, std::size_t offset) {
  return 1 + std::size_t(std::count(text.begin(), text.begin() + std::min(offset, text.size()), '\n'));
}

inline std::string key_location(const std::string& source, std::string_view text, const std::string& key) {
  const auto at = text.find("\"" + key + "\"");
  return at == std::string_view::npos ? source : source + ":" + std::to_string(line_of(text, at));
}

inline std::string scalar_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw std::invalid_argument("expected a string, number or boolean");
}

inline CLI::Option* option_for_key(CLI::App& sub, const std::string& key) {
  std::string name = key;
  std::replace(name.begin(), name.end(), '_', '-');
  if (auto* opt = sub.get_option_no_throw("--" + name)) return opt;
  auto* opt = sub.get_option_no_throw(key);
  return opt && opt->get_positional() ? opt : nullptr;
}

// Config values fill options the command line left unset; anything given on
// the command line wins.
inline void apply_config(CLI::App& sub, const CLI::Option* config_opt, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open config " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto at = e.byte > 0 ? e.byte - 1 : 0;
    const auto line = line_of(text, at);
    const auto line_start = text.rfind('\n', at == 0 ? 0 : at - 1);
    const auto column = at - (line_start == std::string::npos ? 0 : line_start + 1) + 1;
    throw config_error(path.string() + ":" + std::to_string(line) + ":" + std::to_string(column) + ": " + e.what());
  }
  if (!j.is_object()) throw config_error(path.string() + ": top level must be an object");
  if (!j.contains("schema_version")) throw config_error(path.string() + ": missing key 'schema_version'");
  if (j["schema_version"] != kSchemaVersion)
    throw config_error(key_location(path.string(), text, "schema_version") + ": unsupported schema_version " +
                       j["schema_version"].dump() + " (expected " + std::to_string(kSchemaVersion) + ")");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (key == "schema_version") continue;
    const auto where = key_location(path.string(), text, key);
    auto* opt = option_for_key(sub, key);
    if (!opt || opt == config_opt || opt == sub.get_help_ptr())
      throw config_error(where + ": unknown key '" + key + "' for " + sub.get_name());
    if (opt->count() > 0) continue;
    std::vector<std::string> values;
    try {
      if (it->is_array()) {
        for (const auto& v : *it) values.push_back(scalar_string(v));
      } else {
        values.push_back(scalar_string(*it));
      }
    } catch (const std::invalid_argument& e) {
      throw config_error(where + ": key '" + key + "': " + e.what());
    }
    if (values.size() > 1 && opt->get_expected_max() <= 1)
      throw config_error(where + ": key '" + key + "' takes a single value");
    try {
      opt->add_result(values);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw config_error(where + ": key '" + key + "': " + e.what());
    }
  }
}

// Plain strings stay strings; anything that reads as a JSON scalar is typed.
inline json typed_value(const std::string& s) {
  if (s.empty()) return s;
  try {
    auto v = json::parse(s);
    if (v.is_number() || v.is_boolean()) return v;
  } catch (const json::exception&) {
  }
  return s;
}

inline json effective_config(const CLI::App& sub, const CLI::Option* config_opt) {
  json j{{"schema_version", kSchemaVersion}};
  for (const auto* opt : sub.get_options()) {
    if (opt == config_opt || opt == sub.get_help_ptr()) continue;
    std::string key = opt->get_lnames().empty() ? opt->get_name() : opt->get_lnames().front();
    std::replace(key.begin(), key.end(), '-', '_');
    if (opt->get_items_expected_max() == 0) {
      j[key] = opt->count() > 0 && opt->as<bool>();
      continue;
    }
    std::vector<std::string> values;
    if (opt->count() > 0) {
      values = opt->results();
    } else {
      std::string d = opt->get_default_str();
      if (d.size() >= 2 && d.front() == '[' && d.back() == ']') {
        d = d.substr(1, d.size() - 2);
        std::stringstream parts(d);
        for (std::string part; std::getline(parts, part, ',');) values.push_back(part);
      } else {
        values.push_back(d);
      }
    }
    if (opt->get_expected_max() > 1) {
      json arr = json::array();
      for (const auto& v : values) arr.push_back(typed_value(v));
      j[key] = std::move(arr);
    } else {
      j[key] = values.empty() ? json() : typed_value(values.back());
    }
  }
  return j;
}

// ---------------------------------------------------------------- shared helpers

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRow, path.string() + ": " + e.what());
  }
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline std::vector<std::string> nonempty_lines(const fs::path& path) {
  auto lines = read_lines(path);
  std::erase_if(lines, [](const std::string& l) { return l.find_first_not_of(" \t") == std::string::npos; });
  return lines;
}

inline std::vector<std::string> split_lines(const std::vector<std::string>& texts) {
  std::vector<std::string> lines;
  for (const auto& t : texts) {
    std::size_t start = 0;
    while (start < t.size()) {
      auto end = t.find('\n', start);
      if (end == std::string::npos) end = t.size();
      lines.emplace_back(t.substr(start, end - start));
      start = end + 1;
    }
  }
  return lines;
}

inline json alphabet_json(const Alphabet& a) {
  return {{"script_name", a.script_name},
          {"characters", utf8::encode(std::u32string(a.characters.begin(), a.characters.end()))},
          {"case_sensitive", a.case_sensitive}};
}

inline Alphabet load_alphabet(const fs::path& path) {
  auto j = read_json(path);
  try {
    return Alphabet::from_string(j.at("script_name").get<std::string>(), j.at("characters").get<std::string>(),
                                 j.at("case_sensitive").get<bool>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRow, path.string() + ": " + e.what());
  }
}

inline json counts_json(const VariabilityCounts& c) {
  return {{"words", c.words}, {"eligible", c.eligible}, {"randomized", c.randomized}};
}

// ---------------------------------------------------------------- commands

struct RunContext {
  fs::path out_dir;
  unsigned jobs = 1;
  std::ostream& out;
  std::ostream& err;
  json manifest_extra = json::object();
};

struct Command {
  CLI::App* app = nullptr;
  CLI::Option* config_opt = nullptr;
  std::string config_path;
  std::string out_dir = ".";
  unsigned jobs = 0;

  virtual ~Command() = default;
  virtual void add_options(CLI::App& sub) = 0;
  // Named input files that must exist before any work starts.
  virtual std::vector<std::pair<std::string, std::string>> inputs() const = 0;
  virtual void validate() const {}
  virtual json seeds() const { return json::object(); }
  virtual int run(RunContext& ctx) = 0;
};

// Options shared by the probing commands.
struct ProbeOptions {
  std::string vocab;
  unsigned seeds = 5;
  std::uint64_t seed = 0;
  double lr = 0.0;
  std::vector<double> lr_grid = default_lr_grid();
  int epochs = 5;
  int batch_size = 128;
  int hidden = 0;
  double dropout = 0.1;
  double split_ratio = 0.8;
  bool no_lemma_groups = false;
  std::size_t top_k = 10;
  bool no_control = false;
  std::string model_name = "model";
  std::string alphabet = "english";
  std::string alphabet_chars;
  bool case_sensitive = false;
  bool alphabetic_only = false;
  std::size_t top_frequency = 0;

  void add(CLI::App& sub, bool with_alphabet) {
    sub.add_option("--vocab", vocab, "vocab.tsv");
    sub.add_option("--seeds", seeds, "number of seeds");
    sub.add_option("--seed", seed, "base seed");
    sub.add_option("--lr", lr, "fixed learning rate; 0 tunes over --lr-grid");
    sub.add_option("--lr-grid", lr_grid, "learning rates tried on a holdout of seed 0");
    sub.add_option("--epochs", epochs);
    sub.add_option("--batch-size", batch_size);
    sub.add_option("--hidden", hidden, "hidden width; 0 matches the input");
    sub.add_option("--dropout", dropout);
    sub.add_option("--split-ratio", split_ratio, "train fraction");
    sub.add_flag("--no-lemma-groups", no_lemma_groups, "split by token instead of lemma");
    sub.add_option("--top-k", top_k, "most confident tokens kept per character");
    sub.add_flag("--no-control", no_control, "skip the control probe");
    sub.add_option("--model-name", model_name);
    if (with_alphabet) {
      sub.add_option("--alphabet", alphabet, "'english' or an alphabet.json file");
      sub.add_option("--alphabet-chars", alphabet_chars, "explicit target characters");
      sub.add_flag("--case-sensitive", case_sensitive, "with --alphabet-chars: keep case distinctions");
    }
    sub.add_flag("--alphabetic-only", alphabetic_only, "drop tokens with characters outside the alphabet");
    sub.add_option("--top-frequency", top_frequency, "keep only the N most frequent tokens; 0 keeps all");
  }

  void add_inputs(std::vector<std::pair<std::string, std::string>>& in) const {
    in.emplace_back("--vocab", vocab);
    if (alphabet != "english" && alphabet_chars.empty()) in.emplace_back("--alphabet", alphabet);
  }

  void validate() const {
    if (vocab.empty()) throw config_error("--vocab is required");
    if (seeds < 1) throw config_error("--seeds must be >= 1");
    if (lr < 0.0) throw config_error("--lr must be >= 0");
    if (lr == 0.0 && lr_grid.empty()) throw config_error("--lr-grid is empty and no --lr given");
    if (epochs < 1 || batch_size < 1) throw config_error("--epochs and --batch-size must be >= 1");
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw config_error("--split-ratio must be in (0, 1)");
    if (dropout < 0.0 || dropout >= 1.0) throw config_error("--dropout must be in [0, 1)");
  }

  Alphabet resolve_alphabet() const {
    if (!alphabet_chars.empty())
      return Alphabet::from_string(alphabet == "english" ? "custom" : alphabet, alphabet_chars, case_sensitive);
    if (alphabet == "english") return Alphabet::english();
    return load_alphabet(alphabet);
  }

  Vocabulary prepare_vocab(const Alphabet& a) const {
    auto v = load_vocab(vocab);
    if (alphabetic_only) v = filter_alphabetic(v, a);
    if (top_frequency > 0) v = top_by_frequency(v, top_frequency);
    return v;
  }

  TrainConfig train_config() const {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.hidden = hidden;
    c.dropout = dropout;
    c.seed = seed;
    if (lr > 0.0) {
      c.learning_rate = lr;
    } else {
      c.lr_grid = lr_grid;
    }
    return c;
  }

  ExperimentOptions experiment_options(unsigned jobs) const {
    ExperimentOptions o;
    o.model_name = model_name;
    o.split_ratio = split_ratio;
    o.group_by_lemma = !no_lemma_groups;
    o.run_control = !no_control;
    o.top_k = top_k;
    o.jobs = jobs;
    return o;
  }

  json seeds_json() const { return {{"seed", seed}, {"seeds", seeds}}; }
};

inline int finish_report(RunContext& ctx, const ExperimentReport& report, const json& extra = json::object()) {
  auto j = report.to_json();
  j.update(extra);
  write_json(ctx.out_dir / "report.json", j);
  std::size_t failed = 0;
  for (const auto& r : report.per_char)
    if (!r.ok()) {
      ++failed;
      ctx.err << "probe for '" << r.name << "' failed: " << r.error << '\n';
    }
  ctx.out << report.kind << " " << report.model << ": F1 " << std::fixed << std::setprecision(2) << report.f1_mean;
  if (report.has_control) ctx.out << ", control " << report.control_mean;
  ctx.out << " (" << report.per_char.size() - failed << "/" << report.per_char.size() << " ok)\n";
  ctx.manifest_extra["failed_characters"] = failed;
  return failed ? kExitFailure : kExitOk;
}

struct ProbeCharsCommand : Command {
  ProbeOptions p;
  std::string embeddings;
  bool fixed_control = false;

  void add_options(CLI::App& sub) override {
    sub.add_option("--embeddings", embeddings, "embeddings.bin");
    sub.add_flag("--fixed-control", fixed_control, "control table of 100000 x 4096 instead of the probed shape");
    p.add(sub, true);
  }
  std::vector<std::pair<std::string, std::string>> inputs() const override {
    std::vector<std::pair<std::string, std::string>> in{{"--embeddings", embeddings}};
    p.add_inputs(in);
    return in;
  }
  void validate() const override {
    if (embeddings.empty()) throw config_error("--embeddings is required");
    p.validate();
  }
  json seeds() const override { return p.seeds_json(); }

  ExperimentOptions options(unsigned jobs) const {
    auto o = p.experiment_options(jobs);
    if (fixed_control) {
      o.control_vocab = kFixedControlVocab;
      o.control_dim = kFixedControlDim;
    }
    return o;
  }

  int run(RunContext& ctx) override {
    const auto alphabet = p.resolve_alphabet();
    const auto vocab = p.prepare_vocab(alphabet);
    const auto table = load_embeddings(embeddings);
    auto report = run_char_experiment(table, vocab, alphabet, p.train_config(), p.seeds, options(ctx.jobs));
    return finish_report(ctx, report, {{"vocab_size", vocab.size()}, {"case_sensitive", alphabet.case_sensitive}});
  }
};

struct ProbeSubstringCommand : ProbeCharsCommand {
  int run(RunContext& ctx) override {
    const auto vocab = p.prepare_vocab(p.resolve_alphabet());
    const auto table = load_embeddings(embeddings);
    auto report = run_substring_experiment(table, vocab, p.train_config(), p.seeds, options(ctx.jobs));
    return finish_report(ctx, report, {{"vocab_size", vocab.size()}});
  }
};

struct ProbeSyntaxCommand : Command {
  ProbeOptions p;
  std::string tags;
  std::vector<std::string> features;

  void add_options(CLI::App& sub) override {
    sub.add_option("--tags", tags, "tags.tsv");
    sub.add_option("--features", features, "features to use (POS, COARSE_POS, NER); default all in the file")
        ->delimiter(',');
    p.add(sub, true);
  }
  std::vector<std::pair<std::string, std::string>> inputs() const override {
    std::vector<std::pair<std::string, std::string>> in{{"--tags", tags}};
    p.add_inputs(in);
    return in;
  }
  void validate() const override {
    if (tags.empty()) throw config_error("--tags is required");
    for (const auto& f : features) {
      try {
        parse_tag_feature(f);
      } catch (const Error& e) {
        throw config_error(std::string("--features: ") + e.what());
      }
    }
    p.validate();
  }
  json seeds() const override { return p.seeds_json(); }

  int run(RunContext& ctx) override {
    const auto alphabet = p.resolve_alphabet();
    const auto vocab = p.prepare_vocab(alphabet);
    const auto streams = load_tags(tags);
    std::vector<TagFeature> wanted;
    for (const auto& f : features) wanted.push_back(parse_tag_feature(f));
    if (wanted.empty())
      for (const auto& [f, s] : streams) wanted.push_back(f);
    const auto ordered = ordered_features(streams, wanted);
    json order = json::array();
    for (const auto& s : ordered) order.push_back(to_string(s.feature));
    auto report = run_syntax_experiment(ordered, vocab, alphabet, p.train_config(), p.seeds,
                                        p.experiment_options(ctx.jobs));
    return finish_report(ctx, report,
                         {{"vocab_size", vocab.size()}, {"features", order}, {"batch_size", syntax_batch_size(ordered)}});
  }
};

struct TagTrainCommand : Command {
  std::string embeddings, vocab, train, eval, merges, bpe_vocab;
  std::vector<std::string> features{"POS"};
  int epochs = 20;
  int batch_size = 64;
  double lr = 1e-4;
  std::uint64_t seed = 0;

  void add_options(CLI::App& sub) override {
    sub.add_option("--embeddings", embeddings, "embeddings.bin");
    sub.add_option("--vocab", vocab, "vocab.tsv");
    sub.add_option("--train", train, "CoNLL training file");
    sub.add_option("--eval", eval, "CoNLL evaluation file");
    sub.add_option("--feature", features, "POS and/or NER")->delimiter(',');
    sub.add_option("--merges", merges, "BPE merges; words are split by BPE instead of vocabulary lookup");
    sub.add_option("--bpe-vocab", bpe_vocab, "BPE vocab.json");
    sub.add_option("--epochs", epochs);
    sub.add_option("--batch-size", batch_size);
    sub.add_option("--lr", lr);
    sub.add_option("--seed", seed);
  }
  std::vector<std::pair<std::string, std::string>> inputs() const override {
    return {{"--embeddings", embeddings}, {"--vocab", vocab},  {"--train", train},
            {"--eval", eval},             {"--merges", merges}, {"--bpe-vocab", bpe_vocab}};
  }
  void validate() const override {
    if (embeddings.empty() || vocab.empty() || train.empty())
      throw config_error("--embeddings, --vocab and --train are required");
    if (merges.empty() != bpe_vocab.empty()) throw config_error("--merges and --bpe-vocab go together");
    if (features.empty()) throw config_error("--feature is empty");
    for (const auto& f : features) {
      TagFeature t;
      try {
        t = parse_tag_feature(f);
      } catch (const Error& e) {
        throw config_error(std::string("--feature: ") + e.what());
      }
      if (t == TagFeature::CoarsePos) throw config_error("--feature: CoNLL files carry no COARSE_POS column");
    }
    if (epochs < 1 || batch_size < 1 || !(lr > 0.0)) throw config_error("--epochs, --batch-size, --lr must be > 0");
  }
  json seeds() const override { return {{"seed", seed}}; }

  int run(RunContext& ctx) override {
    const auto table = load_embeddings(embeddings);
    const auto v = load_vocab(vocab);
    detail::check_coverage(table, v);
    const auto train_corpus = load_conll(train);
    std::optional<ConllCorpus> eval_corpus;
    if (!eval.empty()) eval_corpus = load_conll(eval);

    WordTokenizer tokenize;
    if (!merges.empty()) {
      auto scheme = std::make_shared<TokenizationScheme>(load_scheme(merges, bpe_vocab));
      tokenize = [scheme](std::string_view w) { return bpe_encode(*scheme, " " + std::string(w)); };
    } else {
      auto aligner = std::make_shared<WordAligner>(v);
      tokenize = [aligner](std::string_view w) { return (*aligner)(w); };
    }

    TrainConfig cfg = tagger_defaults();
    cfg.epochs = epochs;
    cfg.batch_size = batch_size;
    cfg.learning_rate = lr;

    std::vector<TokenId> ids;
    for (const auto& e : v) ids.push_back(e.id);
    std::ofstream tags_out(ctx.out_dir / "tags.tsv");
    if (!tags_out) throw Error(ErrorCode::IoError, "cannot write tags.tsv");
    json taggers = json::array();
    for (std::size_t k = 0; k < features.size(); ++k) {
      const auto feature = parse_tag_feature(features[k]);
      cfg.seed = derive_seed(seed, {k});
      auto model = train_tagger(table, train_corpus, feature, cfg, tokenize, eval_corpus ? &*eval_corpus : nullptr);
      save_checkpoint(model.mlp, ctx.out_dir / ("tagger_" + std::string(to_string(feature)) + ".ckpt"));
      write_tags(tags_out, infer_stream(model, table, ids));
      json t{{"feature", to_string(feature)},
             {"labels", model.labels},
             {"epoch_losses", model.epoch_losses},
             {"unaligned_words", model.unaligned_words},
             {"eval", nullptr}};
      if (model.has_eval)
        t["eval"] = {{"macro_f1", model.eval.macro_f1},
                     {"weighted_f1", model.eval.weighted_f1},
                     {"accuracy", model.eval.accuracy}};
      ctx.out << to_string(feature) << ": " << model.labels.size() << " labels";
      if (model.has_eval) ctx.out << ", eval macro-F1 " << std::fixed << std::setprecision(2) << model.eval.macro_f1;
      ctx.out << '\n';
      taggers.push_back(std::move(t));
    }
    write_json(ctx.out_dir / "tagger.json", {{"taggers", taggers}});
    return kExitOk;
  }
};

struct TokenizeCommand : Command {
  std::vector<std::string> files;
  std::string merges, bpe_vocab;
  double rho = 0.0;
  std::uint64_t seed = 0;

  void add_options(CLI::App& sub) override {
    sub.add_option("files", files, "text files; every line is tokenized separately");
    sub.add_option("--merges", merges, "BPE merges.txt");
    sub.add_option("--bpe-vocab", bpe_vocab, "BPE vocab.json");
    sub.add_option("--rho", rho, "probability of replacing a word with a random two-way split");
    sub.add_option("--seed", seed);
  }
  std::vector<std::pair<std::string, std::string>> inputs() const override {
    std::vector<std::pair<std::string, std::string>> in{{"--merges", merges}, {"--bpe-vocab", bpe_vocab}};
    for (const auto& f : files) in.emplace_back("files", f);
    return in;
  }
  void validate() const override {
    if (files.empty()) throw config_error("no input files");
    if (merges.empty() || bpe_vocab.empty()) throw config_error("--merges and --bpe-vocab are required");
    if (!(rho >= 0.0 && rho <= 1.0)) throw config_error("--rho must be in [0, 1]");
  }
  json seeds() const override { return {{"seed", seed}}; }

  int run(RunContext& ctx) override {
    const auto scheme = load_scheme(merges, bpe_vocab).with_variability(rho, seed);
    std::vector<std::string> lines;
    for (const auto& f : files) {
      auto l = read_lines(f);
      lines.insert(lines.end(), std::make_move_iterator(l.begin()), std::make_move_iterator(l.end()));
    }
    VariabilityCounts counts;
    const auto ids = tokenize_lines(scheme, lines, ctx.jobs, &counts);
    std::ofstream out(ctx.out_dir / "ids.txt");
    if (!out) throw Error(ErrorCode::IoError, "cannot write ids.txt");
    write_token_lines(out, ids);
    std::size_t tokens = 0;
    for (const auto& l : ids) tokens += l.size();
    ctx.manifest_extra["counts"] = counts_json(counts);
    ctx.manifest_extra["counts"]["lines"] = lines.size();
    ctx.manifest_extra["counts"]["tokens"] = tokens;
    ctx.out << lines.size() << " lines, " << tokens << " tokens, " << counts.randomized << "/" << counts.eligible
            << " eligible words split\n";
    return kExitOk;
  }
};

struct CbowTrainCommand : Command {
  std::vector<std::string> corpus;
  std::string scheme = "word";
  std::string merges, bpe_vocab;
  double rho = 0.0;
  std::uint64_t seed = 0;
  CbowConfig cbow;

  void add_options(CLI::App& sub) override {
    sub.add_option("--corpus", corpus, "text files");
    sub.add_option("--scheme", scheme, "word or bpe");
    sub.add_option("--merges", merges, "BPE merges.txt");
    sub.add_option("--bpe-vocab", bpe_vocab, "BPE vocab.json");
    sub.add_option("--rho", rho, "variable tokenization rate for the bpe scheme");
    sub.add_option("--seed", seed);
    sub.add_option("--dim", cbow.dim);
    sub.add_option("--window", cbow.window);
    sub.add_option("--negatives", cbow.negatives);
    sub.add_option("--epochs", cbow.epochs);
    sub.add_option("--lr", cbow.learning_rate);
    sub.add_option("--min-count", cbow.min_count);
    sub.add_option("--subsample", cbow.subsample, "0 disables subsampling");
    sub.add_option("--threads", cbow.threads, "1 is deterministic");
  }
  std::vector<std::pair<std::string, std::string>> inputs() const override {
    std::vector<std::pair<std::string, std::string>> in{{"--merges", merges}, {"--bpe-vocab", bpe_vocab}};
    for (const auto& f : corpus) in.emplace_back("--corpus", f);
    return in;
  }
  void validate() const override {
    if (corpus.empty()) throw config_error("--corpus is required");
    if (scheme != "word" && scheme != "bpe") throw config_error("--scheme must be 'word' or 'bpe'");
    if (scheme == "bpe" && (merges.empty() || bpe_vocab.empty()))
      throw config_error("--scheme bpe needs --merges and --bpe-vocab");
    if (scheme == "word" && rho != 0.0) throw config_error("--rho applies to the bpe scheme only");
    if (!(rho >= 0.0 && rho <= 1.0)) throw config_error("--rho must be in [0, 1]");
    try {
      cbow.validate();
    } catch (const Error& e) {
      throw config_error(e.what());
    }
  }
  json seeds() const override { return {{"seed", seed}}; }

  struct Tokenized {
    std::vector<std::vector<TokenId>> lines;
    std::vector<std::string> surfaces;  // word scheme only
  };

  Tokenized tokenize(RunContext& ctx, const std::optional<TokenizationScheme>& bpe) const {
    Tokenized t;
    std::ostringstream skipped;
    const auto lines = split_lines(read_corpus_files({corpus.begin(), corpus.end()}, skipped));
    if (bpe) {
      VariabilityCounts counts;
      t.lines = tokenize_lines(*bpe, lines, ctx.jobs, &counts);
      ctx.manifest_extra["counts"] = counts_json(counts);
    } else {
      std::vector<std::vector<std::string>> words(lines.size());
      parallel_for(lines.size(), ctx.jobs, [&](std::size_t i) { words[i] = word_tokenize(lines[i]); });
      auto indexed = index_words(words);
      t.lines = std::move(indexed.lines);
      t.surfaces = std::move(indexed.surfaces);
    }
    return t;
  }

  std::string cache_key(const json& digests) const {
    json k{{"scheme", scheme}, {"rho", rho}, {"seed", seed}, {"inputs", json::array()}};
    for (const auto& d : digests) k["inputs"].push_back(d["sha256"]);
    return sha256_hex(k.dump());
  }

  int run(RunContext& ctx) override {
    std::optional<TokenizationScheme> bpe;
    if (scheme == "bpe") bpe = load_scheme(merges, bpe_vocab).with_variability(rho, seed);

    Tokenized t;
    const char* cache_env = std::getenv("CHARPROBE_CACHE");
    bool hit = false;
    if (cache_env && *cache_env) {
      json digests = json::array();
      for (const auto& [flag, path] : inputs())
        if (!path.empty()) digests.push_back(file_digest(path));
      const fs::path dir(cache_env);
      fs::create_directories(dir);
      const auto key = cache_key(digests);
      const auto ids_path = dir / (key + ".ids");
      const auto words_path = dir / (key + ".words");
      if (fs::exists(ids_path) && (bpe || fs::exists(words_path))) {
        std::ifstream in(ids_path);
        t.lines = read_token_lines(in, ids_path.string());
        if (!bpe)
          for (auto& w : read_lines(words_path)) t.surfaces.push_back(detail::unescape_field(w));
        hit = true;
      } else {
        t = tokenize(ctx, bpe);
        {
          std::ofstream out(ids_path.string() + ".tmp");
          write_token_lines(out, t.lines);
        }
        if (!bpe) {
          std::ofstream out(words_path);
          for (const auto& w : t.surfaces) out << detail::escape_field(w) << '\n';
        }
        fs::rename(ids_path.string() + ".tmp", ids_path);
      }
      ctx.manifest_extra["cache"] = {{"dir", dir.string()}, {"key", key}, {"hit", hit}};
    } else {
      t = tokenize(ctx, bpe);
    }

    CbowConfig cfg = cbow;
    cfg.seed = seed;
    const auto model = train_cbow(t.lines, cfg);
    if (bpe) {
      export_embeddings(model, [&](TokenId id) -> const std::string& { return bpe->token(id); }, ctx.out_dir);
    } else {
      export_embeddings(model, [&](TokenId id) -> const std::string& { return t.surfaces.at(id); }, ctx.out_dir);
    }
    ctx.manifest_extra["epoch_losses"] = model.epoch_losses;
    ctx.manifest_extra["rows"] = model.rows();
    ctx.out << model.rows() << " embeddings of dim " << cfg.dim << (hit ? " (tokenization cached)" : "") << '\n';
    return kExitOk;
  }
};

struct AnalyzeCorpusCommand : Command {
  std::vector<std::string> corpus;
  std::string targets, dictionary, merges, bpe_vocab;
  std::size_t shards = 16;

  void add_options(CLI::App& sub) override {
    sub.add_option("--corpus", corpus, "text files");
    sub.add_option("--targets", targets, "target words, one per line");
    sub.add_option("--dictionary", dictionary, "dictionary words, one per line");
    sub.add_option("--merges", merges, "BPE merges.txt");
    sub.add_option("--bpe-vocab", bpe_vocab, "BPE vocab.json");
    sub.add_option("--shards", shards, "shards per corpus file");
  }
  std::vector<std::pair<std::string, std::string>> inputs() const override {
    std::vector<std::pair<std::string, std::string>> in{
        {"--targets", targets}, {"--dictionary", dictionary}, {"--merges", merges}, {"--bpe-vocab", bpe_vocab}};
    for (const auto& f : corpus) in.emplace_back("--corpus", f);
    return in;
  }
  void validate() const override {
    if (corpus.empty() || targets.empty() || merges.empty() || bpe_vocab.empty())
      throw config_error("--corpus, --targets, --merges and --bpe-vocab are required");
    if (shards < 1) throw config_error("--shards must be >= 1");
  }

  int run(RunContext& ctx) override {
    const auto scheme = load_scheme(merges, bpe_vocab);
    const auto target_words = nonempty_lines(targets);
    std::vector<std::string> dict;
    if (!dictionary.empty()) dict = nonempty_lines(dictionary);
    std::size_t skipped = 0;
    const auto texts = read_corpus_files({corpus.begin(), corpus.end()}, ctx.err, &skipped);
    std::vector<std::string_view> views;
    std::uint64_t bytes = 0;
    for (const auto& t : texts) {
      bytes += t.size();
      for (auto s : split_shards(t, shards)) views.push_back(s);
    }
    auto a = analyze_corpus(views, target_words, dict, scheme, ctx.jobs);
    json pseudo = json::object();
    for (std::size_t i = 0; i < a.targets.size(); ++i) pseudo[a.targets[i]] = a.pseudo[i];
    write_json(ctx.out_dir / "analysis.json", {{"kind", "corpus"},
                                               {"corpus_bytes", bytes},
                                               {"shards", views.size()},
                                               {"skipped_files", skipped},
                                               {"targets", a.targets},
                                               {"pseudo", pseudo},
                                               {"stats", a.stats.to_json()}});
    ctx.out << a.targets.size() << " targets over " << bytes << " bytes in " << views.size() << " shards\n";
    return kExitOk;
  }
};

struct DeriveAlphabetCommand : Command {
  std::string vocab;
  std::size_t min_tokens = 250;
  bool fold_case = false;
  std::string name = "derived";

  void add_options(CLI::App& sub) override {
    sub.add_option("--vocab", vocab, "vocab.tsv");
    sub.add_option("--min-tokens", min_tokens, "a character must occur in this many distinct tokens");
    sub.add_flag("--fold-case", fold_case, "merge upper and lower case");
    sub.add_option("--name", name, "script name stored in the alphabet");
  }
  std::vector<std::pair<std::string, std::string>> inputs() const override { return {{"--vocab", vocab}}; }
  void validate() const override {
    if (vocab.empty()) throw config_error("--vocab is required");
    if (min_tokens < 1) throw config_error("--min-tokens must be >= 1");
  }

  int run(RunContext& ctx) override {
    const auto a = derive_alphabet(load_vocab(vocab), min_tokens, name, !fold_case);
    write_json(ctx.out_dir / "alphabet.json", alphabet_json(a));
    ctx.out << a.characters.size() << " characters\n";
    return kExitOk;
  }
};

struct MakeControlCommand : Command {
  std::uint32_t vocab_size = kFixedControlVocab;
  std::uint32_t dim = kFixedControlDim;
  std::uint64_t seed = 0;

  void add_options(CLI::App& sub) override {
    sub.add_option("--vocab-size", vocab_size);
    sub.add_option("--dim", dim);
    sub.add_option("--seed", seed);
  }
  std::vector<std::pair<std::string, std::string>> inputs() const override { return {}; }
  void validate() const override {
    if (vocab_size < 1 || dim < 1) throw config_error("--vocab-size and --dim must be >= 1");
  }
  json seeds() const override { return {{"seed", seed}}; }

  int run(RunContext& ctx) override {
    save_embeddings(make_control(vocab_size, dim, seed), ctx.out_dir / "embeddings.bin");
    ctx.out << vocab_size << " x " << dim << " control written\n";
    return kExitOk;
  }
};

// ---------------------------------------------------------------- report

inline json mean_std_json(const std::vector<double>& xs) {
  return {{"mean", mean_of(xs)}, {"std", xs.size() > 1 ? json(sample_std(xs)) : json()}, {"n", xs.size()}};
}

inline fs::path resolve_report_input(const fs::path& p) {
  if (!fs::is_directory(p)) return p;
  for (const char* name : {"report.json", "analysis.json"})
    if (fs::exists(p / name)) return p / name;
  throw Error(ErrorCode::IoError, p.string() + ": no report.json or analysis.json inside");
}

/// Groups experiment reports by (kind, model, alphabet) and reduces each
/// group to mean and sample std across runs.
inline json aggregate_reports(const std::vector<std::pair<std::string, json>>& docs) {
  struct Group {
    std::string kind, model, alphabet;
    std::vector<std::string> sources;
    std::vector<double> f1, control;
    std::vector<std::string> char_order;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> per_char;
  };
  std::vector<Group> groups;
  json analyses = json::array();
  for (const auto& [source, j] : docs) {
    const std::string kind = j.value("kind", "");
    if (kind == "corpus") {
      analyses.push_back({{"source", source},
                          {"corpus_bytes", j.value("corpus_bytes", 0)},
                          {"targets", j["targets"].size()},
                          {"aggregate", j["stats"]["aggregate"]},
                          {"by_length", j["stats"]["by_length"]}});
      continue;
    }
    if (!j.contains("summary") || !j.contains("per_char"))
      throw Error(ErrorCode::MalformedRow, source + ": not a probe report");
    const std::string model = j.value("model", ""), alphabet = j.value("alphabet", "");
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) {
      return g.kind == kind && g.model == model && g.alphabet == alphabet;
    });
    if (it == groups.end()) it = groups.insert(groups.end(), Group{kind, model, alphabet, {}, {}, {}, {}, {}});
    it->sources.push_back(source);
    it->f1.push_back(j["summary"]["f1_mean"].get<double>());
    if (!j["summary"]["control_mean"].is_null())
      it->control.push_back(j["summary"]["control_mean"].get<double>());
    for (const auto& c : j["per_char"]) {
      if (c.contains("error")) continue;
      const auto name = c["char"].get<std::string>();
      if (!it->per_char.count(name)) it->char_order.push_back(name);
      auto& [f1, ctl] = it->per_char[name];
      f1.push_back(c["f1_mean"].get<double>());
      if (!c["control_f1"].is_null()) ctl.push_back(c["control_f1"].get<double>());
    }
  }
  json out{{"kind", "aggregate"}, {"groups", json::array()}, {"corpus_analyses", analyses}};
  for (const auto& g : groups) {
    json jg{{"kind", g.kind},
            {"model", g.model},
            {"alphabet", g.alphabet},
            {"runs", g.sources.size()},
            {"sources", g.sources},
            {"f1", mean_std_json(g.f1)},
            {"control", mean_std_json(g.control)},
            {"per_char", json::array()}};
    for (const auto& name : g.char_order) {
      const auto& [f1, ctl] = g.per_char.at(name);
      jg["per_char"].push_back({{"char", name}, {"f1", mean_std_json(f1)}, {"control", mean_std_json(ctl)}});
    }
    out["groups"].push_back(std::move(jg));
  }
  return out;
}

inline std::string format_mean_std(const json& ms) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << ms["mean"].get<double>();
  if (!ms["std"].is_null()) s << " +- " << ms["std"].get<double>();
  return s.str();
}

inline void print_aggregate(std::ostream& out, const json& agg) {
  for (const auto& g : agg["groups"]) {
    out << g["kind"].get<std::string>() << "  " << g["model"].get<std::string>() << "  "
        << g["alphabet"].get<std::string>() << "  runs=" << g["runs"] << "  F1 " << format_mean_std(g["f1"]);
    if (g["control"]["n"].get<std::size_t>() > 0) out << "  control " << format_mean_std(g["control"]);
    out << '\n';
    for (const auto& c : g["per_char"]) {
      out << "  " << std::left << std::setw(10) << c["char"].get<std::string>() << std::right << "  "
          << format_mean_std(c["f1"]);
      if (c["control"]["n"].get<std::size_t>() > 0) out << "  control " << format_mean_std(c["control"]);
      out << '\n';
    }
  }
  for (const auto& a : agg["corpus_analyses"]) {
    out << "corpus  " << a["source"].get<std::string>() << "  targets=" << a["targets"] << '\n';
    for (const auto& [category, ms] : a["aggregate"].items()) {
      out << "  " << std::left << std::setw(16) << category << std::right << "  " << std::fixed
          << std::setprecision(2) << ms["mean"].get<double>();
      if (!ms["std"].is_null()) out << " +- " << ms["std"].get<double>();
      out << '\n';
    }
  }
}

struct ReportCommand : Command {
  std::vector<std::string> files;

  void add_options(CLI::App& sub) override {
    sub.add_option("files", files, "report.json / analysis.json files or directories holding them");
  }
  std::vector<std::pair<std::string, std::string>> inputs() const override {
    std::vector<std::pair<std::string, std::string>> in;
    for (const auto& f : files) in.emplace_back("files", f);
    return in;
  }
  void validate() const override {
    if (files.empty()) throw config_error("no report files given");
  }

  int run(RunContext& ctx) override {
    std::vector<std::pair<std::string, json>> docs;
    for (const auto& f : files) {
      const auto path = resolve_report_input(f);
      docs.emplace_back(path.string(), read_json(path));
    }
    const auto agg = aggregate_reports(docs);
    write_json(ctx.out_dir / "report.json", agg);
    print_aggregate(ctx.out, agg);
    return kExitOk;
  }
};

// ---------------------------------------------------------------- dispatch

struct Registered {
  std::string name, description;
  std::unique_ptr<Command> command;
};

inline std::vector<Registered> make_commands() {
  std::vector<Registered> c;
  c.push_back({"probe-chars", "probe embeddings for character presence", std::make_unique<ProbeCharsCommand>()});
  c.push_back({"probe-substring", "probe token pairs for the substring relation",
               std::make_unique<ProbeSubstringCommand>()});
  c.push_back({"probe-syntax", "probe syntactic tag features for character presence",
               std::make_unique<ProbeSyntaxCommand>()});
  c.push_back({"tag-train", "train a token tagger on CoNLL data and write tags.tsv", std::make_unique<TagTrainCommand>()});
  c.push_back({"tokenize", "BPE-tokenize text files with optional variability", std::make_unique<TokenizeCommand>()});
  c.push_back({"cbow-train", "train CBOW embeddings on a corpus", std::make_unique<CbowTrainCommand>()});
  c.push_back({"analyze-corpus", "count tokenizations of target words in a corpus",
               std::make_unique<AnalyzeCorpusCommand>()});
  c.push_back({"derive-alphabet", "derive a target alphabet from a vocabulary", std::make_unique<DeriveAlphabetCommand>()});
  c.push_back({"make-control", "write a random control embedding table", std::make_unique<MakeControlCommand>()});
  c.push_back({"report", "aggregate reports into mean/std tables", std::make_unique<ReportCommand>()});
  return c;
}

inline void check_inputs(const Command& cmd) {
  for (const auto& [flag, path] : cmd.inputs()) {
    if (path.empty()) continue;
    if (!fs::exists(path)) throw config_error(flag + ": no such file: " + path);
  }
}

// Output location and thread count do not affect results, so they stay out
// of the hash.
inline std::string config_hash(json config) {
  config.erase("out");
  config.erase("jobs");
  return sha256_hex(config.dump());
}

inline json build_manifest(const std::string& name, const std::vector<std::string>& args, const Command& cmd,
                           const json& config, unsigned jobs) {
  json inputs = json::array();
  for (const auto& [flag, path] : cmd.inputs()) {
    if (path.empty() || fs::is_directory(path)) continue;
    auto d = file_digest(path);
    d["option"] = flag;
    inputs.push_back(std::move(d));
  }
  return {{"command", name},
          {"argv", args},
          {"config", config},
          {"config_sha256", config_hash(config)},
          {"seeds", cmd.seeds()},
          {"inputs", inputs},
          {"jobs", jobs}};
}

/// Runs one command line (without the program name). Returns the exit code:
/// 0 success, 1 experiment failure, 2 configuration or usage error.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"charprobe: character information probes for token embeddings", "charprobe"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  auto commands = make_commands();
  for (auto& r : commands) {
    auto* sub = app.add_subcommand(r.name, r.description);
    r.command->app = sub;
    r.command->config_opt = sub->add_option("--config", r.command->config_path, "JSON config; flags override it");
    sub->add_option("--out", r.command->out_dir, "output directory");
    sub->add_option("--jobs", r.command->jobs, "worker threads; 0 uses all cores");
    r.command->add_options(*sub);
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  auto it = std::find_if(commands.begin(), commands.end(), [](const Registered& r) { return r.command->app->parsed(); });
  Command& cmd = *it->command;
  CLI::App& sub = *cmd.app;

  json config;
  try {
    if (!cmd.config_path.empty()) apply_config(sub, cmd.config_opt, cmd.config_path);
    cmd.validate();
    check_inputs(cmd);
    config = effective_config(sub, cmd.config_opt);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  RunContext ctx{cmd.out_dir, cmd.jobs == 0 ? default_jobs() : cmd.jobs, out, err};
  int code = kExitOk;
  json manifest;
  try {
    fs::create_directories(ctx.out_dir);
    manifest = build_manifest(it->name, args, cmd, config, ctx.jobs);
    code = cmd.run(ctx);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    code = e.code() == ErrorCode::ConfigError ? kExitConfig : kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    code = kExitFailure;
  }
  if (!manifest.is_null()) {
    manifest.update(ctx.manifest_extra);
    manifest["exit_code"] = code;
    try {
      write_json(ctx.out_dir / "manifest.json", manifest);
    } catch (const Error& e) {
      err << "error: " << e.what() << '\n';
      if (code == kExitOk) code = kExitFailure;
    }
  }
  return code;
}

}  // namespace charprobe::cli
