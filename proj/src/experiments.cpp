/* Copyright 2026 The ratlab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "ratlab/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "ratlab/analysis.hpp"

namespace ratlab {

namespace {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Value parsing

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError(key + ": expected a nonnegative integer, got \"" + v + "\"");
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

std::size_t parse_positive(const std::string& key, const std::string& v) {
  const std::size_t n = parse_size(key, v);
  if (n == 0) throw ConfigError(key + ": must be positive");
  return n;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || ptr != end || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite real number, got \"" + v + "\"");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got \"" + v + "\"");
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

struct KeyEntry {
  ConfigKey doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define RATLAB_SIZE_KEY(name, field, help)                                                    \
  KeyEntry {                                                                                  \
    {name, help}, [](RunConfig& c, const std::string& v) { c.field = parse_size(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                            \
  }
#define RATLAB_POSITIVE_KEY(name, field, help)                                                    \
  KeyEntry {                                                                                      \
    {name, help}, [](RunConfig& c, const std::string& v) { c.field = parse_positive(name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                                \
  }
#define RATLAB_REAL_KEY(name, field, help)                                                    \
  KeyEntry {                                                                                  \
    {name, help}, [](RunConfig& c, const std::string& v) { c.field = parse_real(name, v); }, \
        [](const RunConfig& c) { return format_double(c.field); }                             \
  }
#define RATLAB_BOOL_KEY(name, field, help)                                                    \
  KeyEntry {                                                                                  \
    {name, help}, [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); }, \
        [](const RunConfig& c) { return bool_text(c.field); }                                 \
  }
#define RATLAB_PATH_KEY(name, field, help)                                        \
  KeyEntry {                                                                      \
    {name, help}, [](RunConfig& c, const std::string& v) { c.field = v; },       \
        [](const RunConfig& c) { return c.field.string(); }                       \
  }

const std::vector<KeyEntry>& key_table() {
  static const std::vector<KeyEntry> table = {
      // Corpus.
      RATLAB_POSITIVE_KEY("n_train", corpus.n_train, "training examples"),
      RATLAB_POSITIVE_KEY("n_dev", corpus.n_dev, "dev examples"),
      RATLAB_POSITIVE_KEY("n_test", corpus.n_test, "test examples"),
      RATLAB_POSITIVE_KEY("seq_len", corpus.seq_len, "maximum example length"),
      RATLAB_POSITIVE_KEY("min_len", corpus.min_len, "minimum example length"),
      RATLAB_POSITIVE_KEY("vocab_size", corpus.vocab_size, "vocabulary size including padding"),
      KeyEntry{{"n_classes", "number of classes (corpus and model)"},
               [](RunConfig& c, const std::string& v) {
                 c.corpus.n_classes = c.train.n_classes = parse_size("n_classes", v);
               },
               [](const RunConfig& c) { return std::to_string(c.corpus.n_classes); }},
      RATLAB_POSITIVE_KEY("rationale_len", corpus.rationale_len, "planted span length"),
      RATLAB_POSITIVE_KEY("rationale_vocab_size", corpus.rationale_vocab_size,
                          "rationale tokens per class"),
      RATLAB_SIZE_KEY("n_trivial", corpus.n_trivial, "number of trivial tokens"),
      RATLAB_REAL_KEY("trivial_rate", corpus.trivial_rate, "per-position trivial token rate"),
      KeyEntry{{"corpus_seed", "corpus generation seed"},
               [](RunConfig& c, const std::string& v) { c.corpus.seed = parse_u64("corpus_seed", v); },
               [](const RunConfig& c) { return std::to_string(c.corpus.seed); }},
      // Model and training.
      KeyEntry{{"variant", "rnp | rnp_a2i | shared_encoder | shared_encoder_a2i | "
                           "a2i_no_instruction | sparsity_only_generator"},
               [](RunConfig& c, const std::string& v) {
                 try {
                   c.train.variant = parse_variant(v);
                 } catch (const std::invalid_argument& e) {
                   throw ConfigError(std::string("variant: ") + e.what());
                 }
               },
               [](const RunConfig& c) { return std::string(to_string(c.train.variant)); }},
      RATLAB_REAL_KEY("sparsity", train.sparsity, "target selection fraction s"),
      RATLAB_REAL_KEY("lambda1", train.lambda1, "compactness weight"),
      RATLAB_REAL_KEY("lambda2", train.lambda2, "coherence weight"),
      KeyEntry{{"attacker_lambda1", "attacker compactness weight, or \"same\" to follow lambda1"},
               [](RunConfig& c, const std::string& v) {
                 if (v == "same") {
                   c.train.attacker_lambda1.reset();
                 } else {
                   c.train.attacker_lambda1 = parse_real("attacker_lambda1", v);
                 }
               },
               [](const RunConfig& c) {
                 return c.train.attacker_lambda1 ? format_double(*c.train.attacker_lambda1)
                                                 : std::string("same");
               }},
      RATLAB_REAL_KEY("learning_rate", train.learning_rate, "Adam learning rate"),
      KeyEntry{{"attacker_learning_rate", "attacker Adam learning rate, or \"same\""},
               [](RunConfig& c, const std::string& v) {
                 if (v == "same") {
                   c.train.attacker_learning_rate.reset();
                 } else {
                   c.train.attacker_learning_rate = parse_real("attacker_learning_rate", v);
                 }
               },
               [](const RunConfig& c) {
                 return c.train.attacker_learning_rate
                            ? format_double(*c.train.attacker_learning_rate)
                            : std::string("same");
               }},
      RATLAB_REAL_KEY("temperature", train.temperature, "Gumbel-softmax temperature"),
      RATLAB_POSITIVE_KEY("epochs", train.epochs, "training epochs"),
      RATLAB_POSITIVE_KEY("batch_size", train.batch_size, "examples per batch"),
      KeyEntry{{"seed", "training seed; sweeps use seed + i"},
               [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64("seed", v); },
               [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      RATLAB_BOOL_KEY("eval_deterministic", train.eval_deterministic,
                      "evaluate with probs > 0.5 instead of sampling"),
      RATLAB_POSITIVE_KEY("embed_dim", train.embed_dim, "embedding size"),
      RATLAB_POSITIVE_KEY("hidden_dim", train.hidden_dim, "GRU state size per direction"),
      RATLAB_POSITIVE_KEY("attacker_steps", train.attacker_steps, "attacker updates per batch"),
      RATLAB_BOOL_KEY("bidirectional", train.bidirectional, "add a right-to-left GRU pass"),
      KeyEntry{{"asr_split", "split whose ASR is reported on dev rows: dev | train"},
               [](RunConfig& c, const std::string& v) { c.train.asr_split = v; },
               [](const RunConfig& c) { return c.train.asr_split; }},
      // Harness.
      KeyEntry{{"experiment", "gen_data | train | figure3 | asr_curve | compare | analyze"},
               [](RunConfig& c, const std::string& v) {
                 static const char* const kNames[] = {"gen_data", "train",   "figure3",
                                                      "asr_curve", "compare", "analyze"};
                 if (std::find(std::begin(kNames), std::end(kNames), v) == std::end(kNames)) {
                   throw ConfigError("experiment: unknown experiment \"" + v + "\"");
                 }
                 c.experiment = v;
               },
               [](const RunConfig& c) { return c.experiment; }},
      RATLAB_PATH_KEY("output_dir", output_dir, "directory for all outputs"),
      RATLAB_PATH_KEY("data_dir", data_dir, "corpus directory; empty generates from corpus keys"),
      RATLAB_PATH_KEY("checkpoint", checkpoint, "checkpoint for analyze; empty uses output_dir"),
      RATLAB_POSITIVE_KEY("n_seeds", n_seeds, "runs per seed sweep"),
      RATLAB_POSITIVE_KEY("workers", workers, "concurrent runs in a sweep"),
      RATLAB_SIZE_KEY("probe_min_support", probe_min_support,
                      "selections a token needs before its probe deviation counts"),
      RATLAB_POSITIVE_KEY("asr_window", asr_window, "trailing epochs averaged in asr-curve"),
  };
  return table;
}

#undef RATLAB_SIZE_KEY
#undef RATLAB_POSITIVE_KEY
#undef RATLAB_REAL_KEY
#undef RATLAB_BOOL_KEY
#undef RATLAB_PATH_KEY

const KeyEntry& find_key(const std::string& key) {
  for (const auto& e : key_table()) {
    if (e.doc.name == key) return e;
  }
  throw ConfigError("unknown config key \"" + key + "\"");
}

// ---------------------------------------------------------------------------
// Files

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Statistics

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

double tail_mean(const std::vector<double>& v, std::size_t window) {
  if (v.empty()) return 0.0;
  const std::size_t n = std::min(window, v.size());
  return std::accumulate(v.end() - static_cast<std::ptrdiff_t>(n), v.end(), 0.0) /
         static_cast<double>(n);
}

TrainConfig config_for(const RunConfig& c, Variant variant, std::uint64_t seed) {
  TrainConfig t = c.train;
  t.variant = variant;
  t.seed = seed;
  t.n_classes = c.corpus.n_classes;
  return t;
}

std::vector<std::pair<std::string, std::vector<double>>> snapshot(Players& p) {
  std::vector<std::pair<std::string, std::vector<double>>> out;
  for (auto& [name, t] : p.named_parameters()) out.emplace_back(name, t->data);
  return out;
}

// Bitwise equality of the generator and predictor parameters.
bool same_generator_predictor(Players& a, Players& b) {
  auto keep = [](const std::string& name) { return name.rfind("attacker.", 0) != 0; };
  auto na = a.named_parameters(), nb = b.named_parameters();
  std::vector<std::pair<std::string, Tensor*>> fa, fb;
  std::copy_if(na.begin(), na.end(), std::back_inserter(fa), [&](auto& e) { return keep(e.first); });
  std::copy_if(nb.begin(), nb.end(), std::back_inserter(fb), [&](auto& e) { return keep(e.first); });
  if (fa.size() != fb.size()) return false;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    if (fa[i].first != fb[i].first || fa[i].second->shape != fb[i].second->shape) return false;
    if (std::memcmp(fa[i].second->data.data(), fb[i].second->data.data(),
                    fa[i].second->data.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

constexpr std::size_t kEvalBatch = 256;

std::vector<Var> mask_columns(Graph& g, const Batch& batch, const MaskRows* masks,
                              std::size_t offset) {
  std::vector<Var> cols;
  cols.reserve(batch.steps);
  for (std::size_t t = 0; t < batch.steps; ++t) {
    std::vector<double> col(batch.size, 0.0);
    for (std::size_t i = 0; i < batch.size; ++i) {
      if (!masks) {
        col[i] = batch.valid[t][i];
      } else {
        const auto& row = (*masks)[offset + i];
        col[i] = t < row.size() ? row[t] : 0.0;
      }
    }
    cols.push_back(g.constant({batch.size, 1}, std::move(col)));
  }
  return cols;
}

MaskRows selections(Players& players, std::span<const Example> examples, double temperature,
                    Rng* rng) {
  MaskRows out;
  out.reserve(examples.size());
  for (std::size_t start = 0; start < examples.size(); start += kEvalBatch) {
    const auto chunk = examples.subspan(start, std::min(kEvalBatch, examples.size() - start));
    const Batch batch = Batch::from(chunk);
    Graph g;
    const Selection sel = select_tokens(g, players.generator, batch, false, temperature, rng);
    auto rows = sel.hard();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      rows[i].resize(batch.lengths[i]);
      out.push_back(std::move(rows[i]));
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> trimmed_tokens(std::span<const Example> examples) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    out.emplace_back(e.tokens.begin(), e.tokens.begin() + static_cast<std::ptrdiff_t>(e.length()));
  }
  return out;
}

std::vector<std::size_t> labels_of(std::span<const Example> examples) {
  std::vector<std::size_t> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(e.label);
  return out;
}

struct ProbeSummary {
  std::vector<std::size_t> tokens;
  std::vector<CooccurrenceProbe> probes;
  double max_deviation = 0.0;
  std::optional<std::size_t> max_token;
};

ProbeSummary run_probes(const Corpus& corpus, const MaskRows& masks, std::size_t min_support) {
  ProbeSummary s;
  const auto toks = trimmed_tokens(corpus.train);
  const auto labels = labels_of(corpus.train);
  for (std::size_t tok : corpus.spec.trivial_tokens()) {
    if (!corpus.vocab.contains(tok)) continue;
    auto p = cooccurrence_probe(masks, toks, labels, tok);
    if (p.p_cond && p.n_selected >= min_support) {
      const double dev = std::abs(*p.p_cond - p.p_marginal);
      if (dev > s.max_deviation || !s.max_token) {
        s.max_deviation = dev;
        s.max_token = tok;
      }
    }
    s.tokens.push_back(tok);
    s.probes.push_back(p);
  }
  return s;
}

std::string probe_line(const Vocabulary& vocab, std::size_t tok, const CooccurrenceProbe& p) {
  std::ostringstream o;
  o << "  token " << tok << " \"" << vocab.token(tok) << "\": selected " << p.n_selected
    << " times, p_cond = " << (p.p_cond ? format_double(*p.p_cond) : std::string("undefined"))
    << ", p_marginal = " << format_double(p.p_marginal) << ", sigma = " << format_double(p.sigma());
  if (p.p_cond) o << ", |p_cond - p_marginal| = " << format_double(std::abs(*p.p_cond - p.p_marginal));
  o << '\n';
  return o.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

RunConfig::RunConfig() {
  // Desk-scale model defaults; the library defaults are the full-size ones.
  train.embed_dim = 16;
  train.hidden_dim = 16;
  train.learning_rate = 2e-3;
  train.epochs = 12;
  // Close to the planted rationale fraction of the default corpus (3 of 18-24).
  train.sparsity = 0.15;
  // The attacker only finds the predictor's blind spots when each position
  // sees the whole text, and a weak compactness pull lets it collapse to an
  // empty selection before the predictor settles.
  train.bidirectional = true;
  train.attacker_lambda1 = 10.0;
  train.attacker_learning_rate = 1e-2;
}

const std::vector<ConfigKey>& RunConfig::keys() {
  static const std::vector<ConfigKey> docs = [] {
    std::vector<ConfigKey> d;
    for (const auto& e : key_table()) d.push_back(e.doc);
    return d;
  }();
  return docs;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  find_key(key).set(*this, trim(value));
}

std::string RunConfig::get(const std::string& key) const { return find_key(key).get(*this); }

void RunConfig::apply_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    try {
      set(trim(std::string_view(body).substr(0, eq)), body.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

void RunConfig::apply_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str(), path.string());
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& e : key_table()) out += e.doc.name + " = " + e.get(*this) + "\n";
  return out;
}

fs::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? output_dir / "checkpoint.json" : checkpoint;
}

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, ptr) : std::to_string(v);
}

std::string metrics_csv_header() { return "epoch,split,acc,precision,recall,f1,sparsity,asr"; }

std::string metrics_csv_row(const MetricsRecord& r) {
  return std::to_string(r.epoch) + "," + r.split + "," + format_double(r.acc) + "," +
         format_double(r.precision) + "," + format_double(r.recall) + "," + format_double(r.f1) +
         "," + format_double(r.sparsity) + "," + (r.asr ? format_double(*r.asr) : std::string());
}

std::vector<MetricsRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || trim(line) != metrics_csv_header()) {
    throw std::runtime_error("metrics CSV: missing or unexpected header");
  }
  std::vector<MetricsRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 8) {
      throw std::runtime_error("metrics CSV line " + std::to_string(line_no) + ": expected 8 fields");
    }
    try {
      MetricsRecord r;
      r.epoch = parse_size("epoch", f[0]);
      r.split = f[1];
      r.acc = parse_real("acc", f[2]);
      r.precision = parse_real("precision", f[3]);
      r.recall = parse_real("recall", f[4]);
      r.f1 = parse_real("f1", f[5]);
      r.sparsity = parse_real("sparsity", f[6]);
      if (!f[7].empty()) r.asr = parse_real("asr", f[7]);
      out.push_back(std::move(r));
    } catch (const ConfigError& e) {
      throw std::runtime_error("metrics CSV line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared pieces

Corpus load_corpus(const RunConfig& config) {
  if (config.data_dir.empty()) {
    try {
      return generate_corpus(config.corpus);
    } catch (const CorpusError& e) {
      throw ConfigError(e.what());
    }
  }
  for (const char* split : {"train.jsonl", "dev.jsonl", "test.jsonl"}) {
    if (!fs::exists(config.data_dir / split)) {
      throw CorpusError("missing corpus file " + (config.data_dir / split).string());
    }
  }
  Corpus c = read_corpus_dir(config.data_dir);
  for (const auto* split : {&c.train, &c.dev, &c.test}) {
    for (const auto& e : *split) {
      if (e.label >= config.train.n_classes) {
        throw ConfigError("corpus label " + std::to_string(e.label) + " needs n_classes > " +
                          std::to_string(config.train.n_classes));
      }
    }
  }
  return c;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(std::max<std::size_t>(workers, 1), n);
  if (threads <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void train_full_text(Players& players, const Corpus& corpus, const TrainConfig& config,
                     const PredictorHook& hook) {
  config.validate();
  if (corpus.train.empty()) throw CorpusError("train: empty training split");
  std::vector<Tensor*> params;
  params.push_back(&players.predictor.encoder->embedding->weights);
  for (auto& [name, t] : players.named_parameters()) {
    if (name.rfind("predictor.", 0) == 0) params.push_back(t);
  }
  Adam opt(params, config.learning_rate);
  Rng rng(derive_seed(config.seed, 7));
  std::vector<std::size_t> order(corpus.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      std::vector<const Example*> ptrs;
      for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k) {
        ptrs.push_back(&corpus.train[order[k]]);
      }
      const Batch batch = Batch::from(std::span<const Example* const>(ptrs));
      Graph g;
      const auto masks = mask_columns(g, batch, nullptr, 0);
      const Var probs = predict(g, players.predictor, batch, masks, true);
      const Var loss = cross_entropy(g, probs, one_hot(batch.labels, config.n_classes));
      if (!std::isfinite(g.item(loss))) {
        throw DivergenceError("full-text loss became non-finite at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(batch_index));
      }
      opt.zero_grad();
      g.backward(loss);
      opt.step();
    }
    if (hook) hook(epoch, players);
  }
}

double masked_accuracy(Players& players, std::span<const Example> examples, const MaskRows& masks) {
  if (!masks.empty() && masks.size() != examples.size()) {
    throw std::invalid_argument("masked_accuracy: masks do not match examples");
  }
  if (examples.empty()) return 0.0;
  ProbRows preds;
  preds.reserve(examples.size());
  for (std::size_t start = 0; start < examples.size(); start += kEvalBatch) {
    const auto chunk = examples.subspan(start, std::min(kEvalBatch, examples.size() - start));
    const Batch batch = Batch::from(chunk);
    Graph g;
    const auto cols = mask_columns(g, batch, masks.empty() ? nullptr : &masks, start);
    const Var probs = predict(g, players.predictor, batch, cols, false);
    const auto& v = g.value(probs);
    const std::size_t c = g.shape(probs)[1];
    for (std::size_t i = 0; i < batch.size; ++i) {
      preds.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(i * c),
                         v.begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
    }
  }
  return accuracy_of(preds, labels_of(examples));
}

MaskRows sample_selections(Players& players, std::span<const Example> examples, double temperature,
                           std::uint64_t seed) {
  Rng rng(seed);
  return selections(players, examples, temperature, &rng);
}

MaskRows deterministic_selections(Players& players, std::span<const Example> examples,
                                  double temperature) {
  return selections(players, examples, temperature, nullptr);
}

FixedPointSweep fixed_point_sweep(std::size_t n) {
  FixedPointSweep s;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      const double p1 = static_cast<double>(i) / static_cast<double>(n + 1);
      const double p2 = static_cast<double>(j) / static_cast<double>(n + 1);
      const double f = fixed_point_confidence(p1, p2);
      s.max_gap = std::max(s.max_gap, std::abs(f - numeric_argmin_L(p1, p2).f));
      if (p1 >= p2) {
        s.min_f_star = std::min(s.min_f_star, f);
        if (f < 0.75) s.bound_holds = false;
      }
      if (i == j) s.max_equal_case_deviation = std::max(s.max_equal_case_deviation, std::abs(f - 0.75));
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Commands

GenDataResult cmd_gen_data(const RunConfig& config) {
  Corpus c;
  try {
    c = generate_corpus(config.corpus);
  } catch (const CorpusError& e) {
    throw ConfigError(e.what());
  }
  ensure_dir(config.output_dir);
  write_corpus_dir(config.output_dir, c);
  write_text(config.output_dir / "spec.json", c.spec.to_json().dump(2) + "\n");
  return {c.train.size(), c.dev.size(), c.test.size()};
}

TrainRunResult cmd_train(const RunConfig& config) {
  const Corpus corpus = load_corpus(config);
  TrainConfig tc = config.train;
  tc.n_classes = config.corpus.n_classes;
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  ensure_dir(config.output_dir);
  write_text(config.output_dir / "config.txt", config.to_text());
  auto csv = open_out(config.output_dir / "metrics.csv");
  csv << metrics_csv_header() << '\n' << std::flush;
  std::size_t written = 0;
  auto flush_rows = [&](const std::vector<MetricsRecord>& history) {
    for (; written < history.size(); ++written) csv << metrics_csv_row(history[written]) << '\n';
    csv.flush();
  };
  TrainResult r = train(corpus, tc, [&](std::size_t, Players&, const std::vector<MetricsRecord>& h) {
    flush_rows(h);
  });
  flush_rows(r.history);
  save_checkpoint(config.output_dir / "checkpoint.json", r.best_players, tc, corpus.vocab.size());

  TrainRunResult out;
  out.history = r.history;
  out.best_epoch = r.best_epoch;
  out.best_dev_f1 = r.best_dev_f1;
  out.test = evaluate(r.best_players, corpus.test, tc, "test", r.best_epoch).metrics;
  auto test_csv = open_out(config.output_dir / "test_metrics.csv");
  test_csv << metrics_csv_header() << '\n' << metrics_csv_row(out.test) << '\n';
  return out;
}

double Figure3Seed::final_gap() const {
  if (random_train_acc.empty() || r2f_train_acc.empty()) return 0.0;
  return random_train_acc.back() - r2f_train_acc.back();
}

std::vector<Figure3Seed> cmd_figure3(const RunConfig& config) {
  const Corpus corpus = load_corpus(config);
  ensure_dir(config.output_dir);
  write_text(config.output_dir / "config.txt", config.to_text());
  std::vector<Figure3Seed> seeds(config.n_seeds);

  parallel_for(config.n_seeds, config.workers, [&](std::size_t k) {
    Figure3Seed& out = seeds[k];
    out.seed = config.train.seed + k;
    const TrainConfig full_cfg = config_for(config, Variant::kRnp, out.seed);
    const TrainConfig rand_cfg = config_for(config, Variant::kSparsityOnlyGenerator, out.seed);

    Players full = Players::init(full_cfg, corpus.vocab.size());
    train_full_text(full, corpus, full_cfg, [&](std::size_t, Players& p) {
      out.full_train_acc.push_back(masked_accuracy(p, corpus.train, {}));
      out.full_dev_acc.push_back(masked_accuracy(p, corpus.dev, {}));
    });
    const auto before = snapshot(full);

    MaskRows last_train_masks;
    train(corpus, rand_cfg, [&](std::size_t epoch, Players& p, const std::vector<MetricsRecord>&) {
      MaskRows tr = sample_selections(p, corpus.train, rand_cfg.temperature, derive_seed(out.seed, 700 + epoch));
      MaskRows dv = sample_selections(p, corpus.dev, rand_cfg.temperature, derive_seed(out.seed, 900 + epoch));
      out.random_train_acc.push_back(masked_accuracy(p, corpus.train, tr));
      out.random_dev_acc.push_back(masked_accuracy(p, corpus.dev, dv));
      out.r2f_train_acc.push_back(masked_accuracy(full, corpus.train, tr));
      out.r2f_dev_acc.push_back(masked_accuracy(full, corpus.dev, dv));
      last_train_masks = std::move(tr);
    });
    out.full_text_frozen = snapshot(full) == before;

    const ProbeSummary probes = run_probes(corpus, last_train_masks, config.probe_min_support);
    out.probe_tokens = probes.tokens;
    out.probes = probes.probes;
    out.max_probe_deviation = probes.max_deviation;
    out.max_probe_token = probes.max_token;
  });

  auto csv = open_out(config.output_dir / "figure3.csv");
  csv << "seed,epoch,curve,split,acc\n";
  for (const auto& s : seeds) {
    const std::pair<const char*, const std::vector<double>*> curves[] = {
        {"full_text", &s.full_train_acc},      {"full_text", &s.full_dev_acc},
        {"random_patterns", &s.random_train_acc}, {"random_patterns", &s.random_dev_acc},
        {"r2f", &s.r2f_train_acc},            {"r2f", &s.r2f_dev_acc}};
    for (std::size_t c = 0; c < 6; ++c) {
      const char* split = c % 2 == 0 ? "train" : "dev";
      for (std::size_t e = 0; e < curves[c].second->size(); ++e) {
        csv << s.seed << ',' << e + 1 << ',' << curves[c].first << ',' << split << ','
            << format_double((*curves[c].second)[e]) << '\n';
      }
    }
  }
  auto probe_csv = open_out(config.output_dir / "figure3_probe.csv");
  probe_csv << "seed,token,n_selected,n_selected_positive,p_cond,p_marginal,sigma\n";
  std::ostringstream rep;
  rep << "three-predictor experiment, " << seeds.size() << " seed(s)\n";
  for (const auto& s : seeds) {
    for (std::size_t i = 0; i < s.probes.size(); ++i) {
      const auto& p = s.probes[i];
      probe_csv << s.seed << ',' << s.probe_tokens[i] << ',' << p.n_selected << ','
                << p.n_selected_positive << ',' << (p.p_cond ? format_double(*p.p_cond) : "") << ','
                << format_double(p.p_marginal) << ',' << format_double(p.sigma()) << '\n';
    }
    rep << "seed " << s.seed << ":\n"
        << "  full text      final train acc " << format_double(s.full_train_acc.back())
        << ", dev acc " << format_double(s.full_dev_acc.back()) << '\n'
        << "  random patterns final train acc " << format_double(s.random_train_acc.back())
        << ", dev acc " << format_double(s.random_dev_acc.back()) << '\n'
        << "  r2f            final train acc " << format_double(s.r2f_train_acc.back())
        << ", dev acc " << format_double(s.r2f_dev_acc.back()) << '\n'
        << "  train gap (random patterns - r2f) " << format_double(s.final_gap()) << '\n'
        << "  full-text predictor unchanged by r2f: " << (s.full_text_frozen ? "yes" : "no") << '\n'
        << "  largest probe deviation (support >= " << config.probe_min_support << "): "
        << format_double(s.max_probe_deviation);
    if (s.max_probe_token) rep << " at token " << *s.max_probe_token;
    rep << '\n';
    for (std::size_t i = 0; i < s.probes.size(); ++i) rep << probe_line(corpus.vocab, s.probe_tokens[i], s.probes[i]);
  }
  write_text(config.output_dir / "figure3_report.txt", rep.str());
  return seeds;
}

std::vector<AsrCurveSeed> cmd_asr_curve(const RunConfig& config) {
  const Corpus corpus = load_corpus(config);
  ensure_dir(config.output_dir);
  write_text(config.output_dir / "config.txt", config.to_text());
  const std::size_t n = config.n_seeds;
  std::vector<AsrCurveSeed> seeds(n);
  std::vector<std::vector<MetricsRecord>> histories(2 * n);

  parallel_for(2 * n, config.workers, [&](std::size_t job) {
    const std::size_t k = job / 2;
    const Variant v = job % 2 == 0 ? Variant::kA2INoInstruction : Variant::kRnpA2I;
    histories[job] = train(corpus, config_for(config, v, config.train.seed + k)).history;
  });

  for (std::size_t k = 0; k < n; ++k) {
    AsrCurveSeed& s = seeds[k];
    s.seed = config.train.seed + k;
    Players a = Players::init(config_for(config, Variant::kA2INoInstruction, s.seed), corpus.vocab.size());
    Players b = Players::init(config_for(config, Variant::kRnpA2I, s.seed), corpus.vocab.size());
    s.identical_start = same_generator_predictor(a, b);
    for (const auto& r : histories[2 * k]) {
      if (r.split == "dev") s.observer_asr.push_back(r.asr.value_or(0.0));
    }
    for (const auto& r : histories[2 * k + 1]) {
      if (r.split == "dev") s.a2i_asr.push_back(r.asr.value_or(0.0));
    }
    s.observer_tail_mean = tail_mean(s.observer_asr, config.asr_window);
    s.a2i_tail_mean = tail_mean(s.a2i_asr, config.asr_window);
  }

  auto csv = open_out(config.output_dir / "asr_curve.csv");
  csv << "seed,epoch,variant,asr\n";
  std::ostringstream rep;
  rep << "dev ASR per epoch; tail mean over the last " << config.asr_window << " epochs\n";
  for (std::size_t k = 0; k < n; ++k) {
    const auto& s = seeds[k];
    for (std::size_t e = 0; e < s.observer_asr.size(); ++e) {
      csv << s.seed << ',' << e + 1 << ",a2i_no_instruction," << format_double(s.observer_asr[e]) << '\n';
    }
    for (std::size_t e = 0; e < s.a2i_asr.size(); ++e) {
      csv << s.seed << ',' << e + 1 << ",rnp_a2i," << format_double(s.a2i_asr[e]) << '\n';
    }
    for (std::size_t j = 0; j < 2; ++j) {
      auto out = open_out(config.output_dir /
                          ("metrics_" + std::string(j == 0 ? "a2i_no_instruction" : "rnp_a2i") +
                           "_seed" + std::to_string(s.seed) + ".csv"));
      out << metrics_csv_header() << '\n';
      for (const auto& r : histories[2 * k + j]) out << metrics_csv_row(r) << '\n';
    }
    rep << "seed " << s.seed << ": a2i_no_instruction tail mean " << format_double(s.observer_tail_mean)
        << ", rnp_a2i tail mean " << format_double(s.a2i_tail_mean)
        << ", identical start: " << (s.identical_start ? "yes" : "no") << '\n';
  }
  write_text(config.output_dir / "asr_curve_report.txt", rep.str());
  return seeds;
}

CompareResult cmd_compare(const RunConfig& config) {
  if (config.n_seeds < 5) {
    throw ConfigError("compare needs n_seeds >= 5, got " + std::to_string(config.n_seeds));
  }
  const Corpus corpus = load_corpus(config);
  ensure_dir(config.output_dir);
  write_text(config.output_dir / "config.txt", config.to_text());
  const Variant variants[] = {Variant::kRnp, Variant::kRnpA2I, Variant::kSharedEncoder,
                              Variant::kSharedEncoderA2I};
  const std::size_t n = config.n_seeds;
  CompareResult result;
  result.runs.resize(4 * n);

  parallel_for(4 * n, config.workers, [&](std::size_t job) {
    CompareRun& run = result.runs[job];
    run.variant = variants[job / n];
    run.seed = config.train.seed + job % n;
    const TrainConfig tc = config_for(config, run.variant, run.seed);
    TrainResult r = train(corpus, tc);
    run.best_epoch = r.best_epoch;
    run.best_dev_f1 = r.best_dev_f1;
    for (auto it = r.history.rbegin(); it != r.history.rend(); ++it) {
      if (it->split == "train") {
        run.train_sparsity = it->sparsity;
        break;
      }
    }
    run.dev = evaluate(r.best_players, corpus.dev, tc, "dev", r.best_epoch).metrics;
    run.test = evaluate(r.best_players, corpus.test, tc, "test", r.best_epoch).metrics;
  });

  auto runs_csv = open_out(config.output_dir / "compare_runs.csv");
  runs_csv << "variant,seed,best_epoch,best_dev_f1,dev_sparsity,train_sparsity,test_acc,"
              "test_precision,test_recall,test_f1,test_sparsity\n";
  for (const auto& r : result.runs) {
    runs_csv << to_string(r.variant) << ',' << r.seed << ',' << r.best_epoch << ','
             << format_double(r.best_dev_f1) << ',' << format_double(r.dev.sparsity) << ','
             << format_double(r.train_sparsity) << ',' << format_double(r.test.acc) << ','
             << format_double(r.test.precision) << ',' << format_double(r.test.recall) << ','
             << format_double(r.test.f1) << ',' << format_double(r.test.sparsity) << '\n';
  }
  auto csv = open_out(config.output_dir / "compare.csv");
  csv << "variant,n_runs,best_dev_f1_mean,best_dev_f1_std,dev_sparsity_mean,dev_sparsity_std,"
         "train_sparsity_mean,train_sparsity_std,test_acc_mean,test_acc_std,test_f1_mean,"
         "test_f1_std,test_sparsity_mean,test_sparsity_std\n";
  for (std::size_t v = 0; v < 4; ++v) {
    std::vector<double> f1, dsp, tsp, acc, tf1, tesp;
    for (std::size_t k = 0; k < n; ++k) {
      const auto& r = result.runs[v * n + k];
      f1.push_back(r.best_dev_f1);
      dsp.push_back(r.dev.sparsity);
      tsp.push_back(r.train_sparsity);
      acc.push_back(r.test.acc);
      tf1.push_back(r.test.f1);
      tesp.push_back(r.test.sparsity);
    }
    CompareRow row;
    row.variant = variants[v];
    row.n_runs = n;
    auto fill = [](double& mean, double& sd, const std::vector<double>& v) {
      const MeanStd m = mean_std(v);
      mean = m.mean;
      sd = m.std;
    };
    fill(row.best_dev_f1_mean, row.best_dev_f1_std, f1);
    fill(row.dev_sparsity_mean, row.dev_sparsity_std, dsp);
    fill(row.train_sparsity_mean, row.train_sparsity_std, tsp);
    fill(row.test_acc_mean, row.test_acc_std, acc);
    fill(row.test_f1_mean, row.test_f1_std, tf1);
    fill(row.test_sparsity_mean, row.test_sparsity_std, tesp);
    csv << to_string(row.variant) << ',' << row.n_runs;
    for (double x : {row.best_dev_f1_mean, row.best_dev_f1_std, row.dev_sparsity_mean,
                     row.dev_sparsity_std, row.train_sparsity_mean, row.train_sparsity_std,
                     row.test_acc_mean, row.test_acc_std, row.test_f1_mean, row.test_f1_std,
                     row.test_sparsity_mean, row.test_sparsity_std}) {
      csv << ',' << format_double(x);
    }
    csv << '\n';
    result.rows.push_back(row);
  }
  return result;
}

AnalyzeResult cmd_analyze(const RunConfig& config) {
  AnalyzeResult r;
  ensure_dir(config.output_dir);
  std::ostringstream rep;
  std::ostringstream csv;
  csv << "section,key,value\n";

  const FixedPointSweep sweep = fixed_point_sweep(100);
  r.fixed_point_max_gap = sweep.max_gap;
  r.fixed_point_min_f_star = sweep.min_f_star;
  r.equal_case_f_star = 0.75 + sweep.max_equal_case_deviation;
  r.fixed_point_bound_holds = sweep.bound_holds && sweep.max_equal_case_deviation == 0.0;
  rep << "[fixed point]\n"
      << "  grid: p1, p2 in {1/101, ..., 100/101}\n"
      << "  worst case p1 == p2: f_star = " << format_double(r.equal_case_f_star) << '\n'
      << "  min f_star over p1 >= p2 > 0: " << format_double(r.fixed_point_min_f_star) << '\n'
      << "  f_star >= 0.75 whenever p1 >= p2, equality at p1 == p2: "
      << (r.fixed_point_bound_holds ? "holds" : "violated") << '\n';
  csv << "fixed_point,min_f_star," << format_double(r.fixed_point_min_f_star) << '\n'
      << "fixed_point,equal_case_f_star," << format_double(r.equal_case_f_star) << '\n'
      << "fixed_point,bound_holds," << (r.fixed_point_bound_holds ? 1 : 0) << '\n';

  rep << "[oracle agreement]\n"
      << "  max |closed form - numeric minimizer| = " << format_double(r.fixed_point_max_gap)
      << (r.fixed_point_max_gap < 1e-5 ? " (< 1e-5)" : " (>= 1e-5)") << '\n';
  csv << "oracle,max_gap," << format_double(r.fixed_point_max_gap) << '\n';

  // Derivative against a central difference of L.
  for (std::size_t i = 1; i <= 20; ++i) {
    for (std::size_t j = 0; j <= 20; ++j) {
      const double p1 = i / 20.0, p2 = j / 20.0;
      for (double f = 0.05; f < 0.96; f += 0.05) {
        const double h = 1e-6;
        const double num = (loss_L_and_derivative(p1, p2, f + h).loss -
                            loss_L_and_derivative(p1, p2, f - h).loss) / (2 * h);
        const double ana = loss_L_and_derivative(p1, p2, f).derivative;
        r.derivative_max_rel_error =
            std::max(r.derivative_max_rel_error, std::abs(ana - num) / std::max(1.0, std::abs(num)));
      }
    }
  }
  rep << "  dL/df vs central difference: max rel error " << format_double(r.derivative_max_rel_error) << '\n';
  csv << "oracle,derivative_max_rel_error," << format_double(r.derivative_max_rel_error) << '\n';

  rep << "[entropy identity]\n";
  Rng rng(derive_seed(config.train.seed, 42));
  r.entropy_never_below = true;
  std::vector<std::vector<double>> targets = {{0.5, 0.5}, {1.0, 0.0}, {0.3, 0.7}};
  for (std::size_t k = 0; k < 20; ++k) {
    std::vector<double> t(2 + rng.below(5));
    double s = 0.0;
    for (double& v : t) s += (v = -std::log(rng.uniform()));
    for (double& v : t) v /= s;
    targets.push_back(std::move(t));
  }
  for (const auto& t : targets) {
    const EntropyCheck e = min_xent_equals_entropy_check(t);
    r.entropy_max_gap = std::max(r.entropy_max_gap, e.gap);
    if (e.gap < 0.0) r.entropy_never_below = false;
  }
  rep << "  " << targets.size() << " targets, max gap " << format_double(r.entropy_max_gap)
      << ", never below entropy: " << (r.entropy_never_below ? "yes" : "no") << '\n';
  csv << "entropy,max_gap," << format_double(r.entropy_max_gap) << '\n'
      << "entropy,never_below," << (r.entropy_never_below ? 1 : 0) << '\n';

  rep << "[co-occurrence probe]\n";
  const fs::path ckpt = config.checkpoint_path();
  if (!fs::exists(ckpt)) {
    r.probe_notice = "skipped: no checkpoint at " + ckpt.string();
    rep << "  " << r.probe_notice << '\n';
    csv << "probe,status,skipped\n";
  } else {
    Checkpoint cp = load_checkpoint(ckpt);
    const Corpus corpus = load_corpus(config);
    if (cp.vocab_size != corpus.vocab.size()) {
      throw ConfigError("checkpoint vocabulary size " + std::to_string(cp.vocab_size) +
                        " does not match the corpus (" + std::to_string(corpus.vocab.size()) + ")");
    }
    const MaskRows masks = deterministic_selections(cp.players, corpus.train, cp.config.temperature);
    const ProbeSummary s = run_probes(corpus, masks, config.probe_min_support);
    r.probe_ran = true;
    r.probe_tokens = s.tokens;
    r.probes = s.probes;
    rep << "  checkpoint " << ckpt.string() << " (" << to_string(cp.config.variant)
        << "), deterministic train selections\n";
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      rep << probe_line(corpus.vocab, s.tokens[i], s.probes[i]);
      const auto& p = s.probes[i];
      csv << "probe,token_" << s.tokens[i] << "_n_selected," << p.n_selected << '\n'
          << "probe,token_" << s.tokens[i] << "_p_cond,"
          << (p.p_cond ? format_double(*p.p_cond) : std::string()) << '\n'
          << "probe,token_" << s.tokens[i] << "_p_marginal," << format_double(p.p_marginal) << '\n';
    }
    rep << "  largest deviation with support >= " << config.probe_min_support << ": "
        << format_double(s.max_deviation) << '\n';
    csv << "probe,max_deviation," << format_double(s.max_deviation) << '\n';
  }
  write_text(config.output_dir / "analysis_report.txt", rep.str());
  write_text(config.output_dir / "analysis.csv", csv.str());
  return r;
}

}  // namespace ratlab
