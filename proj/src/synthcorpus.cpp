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

#include "ratlab/synthcorpus.hpp"

#include <fstream>
#include <numeric>

#include "ratlab/nn.hpp"

namespace ratlab {

namespace {

const char* const kTrivialNames[] = {".", ",", ";", ":", "!", "?", "-", "'"};

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

std::vector<Example> generate_split(const CorpusSpec& spec, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % spec.n_classes;
  shuffle(labels, rng);

  const auto trivial = spec.trivial_tokens();
  const std::size_t filler0 = spec.filler_begin();
  const std::size_t n_filler = spec.vocab_size - filler0;

  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    ex.label = labels[i];
    const std::size_t len = spec.min_len + rng.below(spec.seq_len - spec.min_len + 1);
    const std::size_t start = rng.below(len - spec.rationale_len + 1);
    const auto rationale = spec.rationale_tokens(ex.label);
    ex.tokens.assign(spec.seq_len, 0);
    ex.gold_mask.assign(spec.seq_len, 0);
    for (std::size_t t = 0; t < len; ++t) {
      if (t >= start && t < start + spec.rationale_len) {
        ex.tokens[t] = rationale[rng.below(rationale.size())];
        ex.gold_mask[t] = 1;
      } else if (!trivial.empty() && rng.bernoulli(spec.trivial_rate)) {
        ex.tokens[t] = trivial[rng.below(trivial.size())];
      } else {
        ex.tokens[t] = filler0 + rng.below(n_filler);
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

const nlohmann::json& field(const nlohmann::json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end()) {
    throw CorpusError("line " + std::to_string(line) + ": missing field \"" + key + "\"");
  }
  return *it;
}

Example parse_record(const nlohmann::json& j, const Vocabulary& vocab, std::size_t line) {
  auto fail = [line](const std::string& what) {
    return CorpusError("line " + std::to_string(line) + ": " + what);
  };
  if (!j.is_object()) throw fail("record is not an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "tokens" && key != "label" && key != "rationale") throw fail("unknown field \"" + key + "\"");
  }
  Example ex;
  const auto& tokens = field(j, "tokens", line);
  if (!tokens.is_array()) throw fail("\"tokens\" is not a list");
  for (const auto& t : tokens) {
    if (!t.is_number_unsigned()) throw fail("token is not a non-negative integer");
    const auto idx = t.get<std::size_t>();
    if (!vocab.contains(idx)) throw fail("unknown token index " + std::to_string(idx));
    ex.tokens.push_back(idx);
  }
  const auto& label = field(j, "label", line);
  if (!label.is_number_unsigned()) throw fail("\"label\" is not a non-negative integer");
  ex.label = label.get<std::size_t>();
  if (auto it = j.find("rationale"); it != j.end()) {
    if (!it->is_array()) throw fail("\"rationale\" is not a list");
    if (it->size() != ex.tokens.size()) {
      throw fail("rationale length " + std::to_string(it->size()) + " does not match " +
                 std::to_string(ex.tokens.size()) + " tokens");
    }
    for (const auto& m : *it) {
      if (!m.is_number_unsigned() || m.get<unsigned>() > 1) throw fail("rationale entry is not 0/1");
      ex.gold_mask.push_back(m.get<int>());
    }
  }
  const std::size_t len = ex.length();
  if (len == 0) throw fail("record has no tokens");
  for (std::size_t t = 0; t < len; ++t) {
    if (ex.tokens[t] == 0) throw fail("padding token inside the sequence at position " + std::to_string(t));
  }
  return ex;
}

}  // namespace

std::vector<std::size_t> CorpusSpec::trivial_tokens() const {
  std::vector<std::size_t> v(n_trivial);
  std::iota(v.begin(), v.end(), std::size_t{1});
  return v;
}

std::vector<std::size_t> CorpusSpec::rationale_tokens(std::size_t cls) const {
  std::vector<std::size_t> v(rationale_vocab_size);
  std::iota(v.begin(), v.end(), 1 + n_trivial + cls * rationale_vocab_size);
  return v;
}

std::size_t CorpusSpec::filler_begin() const {
  return 1 + n_trivial + n_classes * rationale_vocab_size;
}

void CorpusSpec::validate() const {
  auto fail = [](const std::string& what) { throw CorpusError("infeasible corpus spec: " + what); };
  if (n_classes < 2) fail("n_classes must be at least 2");
  if (rationale_len == 0 || rationale_vocab_size == 0) fail("empty rationale");
  if (min_len == 0 || min_len > seq_len) fail("min_len must be in [1, seq_len]");
  if (!(trivial_rate >= 0.0 && trivial_rate <= 1.0)) fail("trivial_rate must be in [0, 1]");
  if (filler_begin() >= vocab_size) {
    fail("vocab_size " + std::to_string(vocab_size) + " leaves no filler tokens (need > " +
         std::to_string(filler_begin()) + ")");
  }
  if (n_trivial == 0 && trivial_rate > 0.0) fail("trivial_rate > 0 with no trivial tokens");
  const double free_slots = static_cast<double>(min_len) - static_cast<double>(rationale_len);
  if (rationale_len + trivial_rate * free_slots >= static_cast<double>(min_len)) {
    fail("rationale plus expected trivial insertions fill the whole sequence");
  }
  for (std::size_t n : {n_train, n_dev, n_test}) {
    if (n % n_classes != 0) fail("split size " + std::to_string(n) + " is not a multiple of n_classes");
  }
}

nlohmann::json CorpusSpec::to_json() const {
  return {{"n_train", n_train},
          {"n_dev", n_dev},
          {"n_test", n_test},
          {"seq_len", seq_len},
          {"min_len", min_len},
          {"vocab_size", vocab_size},
          {"n_classes", n_classes},
          {"rationale_len", rationale_len},
          {"rationale_vocab_size", rationale_vocab_size},
          {"n_trivial", n_trivial},
          {"trivial_rate", trivial_rate},
          {"seed", seed}};
}

CorpusSpec CorpusSpec::from_json(const nlohmann::json& j) {
  CorpusSpec s;
  s.n_train = j.value("n_train", s.n_train);
  s.n_dev = j.value("n_dev", s.n_dev);
  s.n_test = j.value("n_test", s.n_test);
  s.seq_len = j.value("seq_len", s.seq_len);
  s.min_len = j.value("min_len", s.min_len);
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.n_classes = j.value("n_classes", s.n_classes);
  s.rationale_len = j.value("rationale_len", s.rationale_len);
  s.rationale_vocab_size = j.value("rationale_vocab_size", s.rationale_vocab_size);
  s.n_trivial = j.value("n_trivial", s.n_trivial);
  s.trivial_rate = j.value("trivial_rate", s.trivial_rate);
  s.seed = j.value("seed", s.seed);
  return s;
}

std::size_t Example::length() const {
  std::size_t n = tokens.size();
  while (n > 0 && tokens[n - 1] == 0) --n;
  return n;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], i).second) {
      throw CorpusError("vocabulary: duplicate token \"" + tokens_[i] + "\"");
    }
  }
}

Vocabulary Vocabulary::for_spec(const CorpusSpec& spec) {
  std::vector<std::string> names{"<pad>"};
  for (std::size_t i = 0; i < spec.n_trivial; ++i) {
    names.push_back(i < std::size(kTrivialNames) ? kTrivialNames[i] : "t" + std::to_string(i));
  }
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t j = 0; j < spec.rationale_vocab_size; ++j) {
      names.push_back("c" + std::to_string(c) + "_r" + std::to_string(j));
    }
  }
  for (std::size_t i = spec.filler_begin(); i < spec.vocab_size; ++i) {
    names.push_back("w" + std::to_string(i - spec.filler_begin()));
  }
  return Vocabulary(std::move(names));
}

std::size_t Vocabulary::index(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw CorpusError("unknown token \"" + token + "\"");
  return it->second;
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < tokens_.size(); ++i) j[tokens_[i]] = i;
  return j;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw CorpusError("vocab is not an object");
  std::vector<std::string> names(j.size());
  std::vector<bool> filled(j.size(), false);
  for (const auto& [tok, idx] : j.items()) {
    if (!idx.is_number_unsigned() || idx.get<std::size_t>() >= names.size() ||
        filled[idx.get<std::size_t>()]) {
      throw CorpusError("vocab is not a bijection onto 0.." + std::to_string(names.size() - 1));
    }
    names[idx.get<std::size_t>()] = tok;
    filled[idx.get<std::size_t>()] = true;
  }
  return Vocabulary(std::move(names));
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus c;
  c.spec = spec;
  c.vocab = Vocabulary::for_spec(spec);
  c.train = generate_split(spec, spec.n_train, derive_seed(spec.seed, 101));
  c.dev = generate_split(spec, spec.n_dev, derive_seed(spec.seed, 202));
  c.test = generate_split(spec, spec.n_test, derive_seed(spec.seed, 303));
  return c;
}

void write_corpus(const std::filesystem::path& path, const std::vector<Example>& examples,
                  const Vocabulary& vocab, const nlohmann::json& spec) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CorpusError("cannot open " + path.string() + " for writing");
  nlohmann::json header = {{"vocab", vocab.to_json()}};
  if (!spec.is_null()) header["spec"] = spec;
  out << header.dump() << '\n';
  for (const auto& ex : examples) {
    nlohmann::json rec = {{"tokens", ex.tokens}, {"label", ex.label}};
    if (!ex.gold_mask.empty()) rec["rationale"] = ex.gold_mask;
    out << rec.dump() << '\n';
  }
  if (!out) throw CorpusError("write failed for " + path.string());
}

CorpusFile read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open " + path.string());
  CorpusFile f;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw CorpusError(path.string() + ": missing header line");
  ++lineno;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorpusError("line 1: malformed header: " + std::string(e.what()));
  }
  if (!header.is_object()) throw CorpusError("line 1: header is not an object");
  f.vocab = Vocabulary::from_json(field(header, "vocab", 1));
  if (auto it = header.find("spec"); it != header.end()) f.spec = *it;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw CorpusError("line " + std::to_string(lineno) + ": malformed record: " + e.what());
    }
    f.examples.push_back(parse_record(rec, f.vocab, lineno));
  }
  return f;
}

void write_corpus_dir(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  const auto spec = corpus.spec.to_json();
  write_corpus(dir / "train.jsonl", corpus.train, corpus.vocab, spec);
  write_corpus(dir / "dev.jsonl", corpus.dev, corpus.vocab, spec);
  write_corpus(dir / "test.jsonl", corpus.test, corpus.vocab, spec);
}

Corpus read_corpus_dir(const std::filesystem::path& dir) {
  Corpus c;
  auto train = read_corpus(dir / "train.jsonl");
  auto dev = read_corpus(dir / "dev.jsonl");
  auto test = read_corpus(dir / "test.jsonl");
  if (!(train.vocab == dev.vocab) || !(train.vocab == test.vocab)) {
    throw CorpusError(dir.string() + ": splits disagree on the vocabulary");
  }
  if (train.spec.is_object()) c.spec = CorpusSpec::from_json(train.spec);
  c.vocab = std::move(train.vocab);
  c.train = std::move(train.examples);
  c.dev = std::move(dev.examples);
  c.test = std::move(test.examples);
  return c;
}

}  // namespace ratlab
