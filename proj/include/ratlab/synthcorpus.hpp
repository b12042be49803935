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

// Clean synthetic classification corpora with planted rationales.
//
// Every example has one contiguous rationale span drawn from its class's
// rationale vocabulary; all other positions are filler or, with probability
// trivial_rate and independently of the label, a trivial token. Trivial
// tokens therefore carry no label information in the raw data.
//
// On-disk format (one file per split, UTF-8, '\n' line endings):
//   line 1:  {"spec":{...},"vocab":{"<pad>":0,...}}
//   line k:  {"label":1,"rationale":[0,1,...],"tokens":[5,17,...]}
// Keys are written in sorted order, integers in decimal, no whitespace.
// "rationale" is optional and, when present, has the same length as
// "tokens". Token 0 is padding and may only appear as a trailing run.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace ratlab {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CorpusSpec {
  std::size_t n_train = 8000;
  std::size_t n_dev = 1000;
  std::size_t n_test = 1000;
  std::size_t seq_len = 24;
  std::size_t min_len = 18;
  std::size_t vocab_size = 64;
  std::size_t n_classes = 2;
  std::size_t rationale_len = 3;
  std::size_t rationale_vocab_size = 4;  // per class
  std::size_t n_trivial = 4;
  double trivial_rate = 0.3;
  std::uint64_t seed = 12252018;

  // Role layout: 0 = padding, then trivial tokens, then each class's
  // rationale tokens, then filler up to vocab_size.
  std::vector<std::size_t> trivial_tokens() const;
  std::vector<std::size_t> rationale_tokens(std::size_t cls) const;
  std::size_t filler_begin() const;

  /// Throws CorpusError when the spec cannot be generated.
  void validate() const;

  nlohmann::json to_json() const;
  static CorpusSpec from_json(const nlohmann::json& j);
};

struct Example {
  std::vector<std::size_t> tokens;
  std::size_t label = 0;
  std::vector<int> gold_mask;  // empty when unannotated

  /// Number of tokens before the trailing padding run.
  std::size_t length() const;
  bool operator==(const Example&) const = default;
};

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  static Vocabulary for_spec(const CorpusSpec& spec);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t index) const { return tokens_.at(index); }
  std::size_t index(const std::string& token) const;
  bool contains(std::size_t index) const { return index < tokens_.size(); }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Corpus {
  CorpusSpec spec;
  Vocabulary vocab;
  std::vector<Example> train, dev, test;
};

Corpus generate_corpus(const CorpusSpec& spec);

/// Contents of one corpus file.
struct CorpusFile {
  Vocabulary vocab;
  nlohmann::json spec;  // echo; null when absent
  std::vector<Example> examples;
};

void write_corpus(const std::filesystem::path& path, const std::vector<Example>& examples,
                  const Vocabulary& vocab, const nlohmann::json& spec = nullptr);
CorpusFile read_corpus(const std::filesystem::path& path);

/// Writes train.jsonl, dev.jsonl, test.jsonl into `dir`.
void write_corpus_dir(const std::filesystem::path& dir, const Corpus& corpus);
Corpus read_corpus_dir(const std::filesystem::path& dir);

}  // namespace ratlab
