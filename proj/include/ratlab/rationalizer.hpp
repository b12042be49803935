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

// Select-then-predict rationalization with an optional attacker.
//
// The generator picks a token mask M from X and the predictor classifies
// Z = M * X. The attacker is a second selector trained to make the (frozen)
// predictor output a class other than the label; its selections are then fed
// back to the predictor with a uniform target so the predictor learns that
// whatever the attacker can find carries no label information.
//
// Per batch the trainer alternates:
//   main step:     min over generator+predictor of
//                    H(Y, p(Z)) + Omega(M) + H(uniform, p(stop_grad(Z_A)))
//   attacker step: min over attacker of
//                    H(Y_A, p(Z_A)) + attacker_lambda1 * |mean(M_A) - s|
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ratlab/autodiff.hpp"
#include "ratlab/metrics.hpp"
#include "ratlab/nn.hpp"
#include "ratlab/synthcorpus.hpp"

namespace ratlab {

enum class Variant {
  kRnp,
  kRnpA2I,
  kSharedEncoder,
  kSharedEncoderA2I,
  kA2INoInstruction,
  kSparsityOnlyGenerator,
};

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);
bool has_attacker(Variant v);
bool has_instruction(Variant v);
bool shares_encoder(Variant v);

struct TrainConfig {
  Variant variant = Variant::kRnp;
  std::size_t n_classes = 2;
  double sparsity = 0.2;
  double lambda1 = 1.0;
  double lambda2 = 0.0;
  std::optional<double> attacker_lambda1;  // defaults to lambda1
  double learning_rate = 1e-4;
  std::optional<double> attacker_learning_rate;  // defaults to learning_rate
  double temperature = 1.0;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  std::uint64_t seed = 12252018;
  bool eval_deterministic = true;
  std::size_t embed_dim = 100;
  std::size_t hidden_dim = 200;
  std::size_t attacker_steps = 1;  // attacker updates per main update
  bool bidirectional = false;
  std::string asr_split = "dev";

  double attacker_l1() const { return attacker_lambda1.value_or(lambda1); }
  double attacker_lr() const { return attacker_learning_rate.value_or(learning_rate); }
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// All players read one embedding table. It is trained with the generator
/// and predictor; the attacker reads it but never updates it.
struct Encoder {
  std::shared_ptr<EmbeddingTable> embedding;
  GRULayer gru;
  std::optional<GRULayer> gru_backward;  // right-to-left pass when bidirectional
  bool train_embedding = true;

  std::size_t output_dim() const { return gru.hidden_dim * (gru_backward ? 2 : 1); }
};

/// Generator or attacker: encoder plus a per-token (keep, drop) head.
struct Selector {
  std::shared_ptr<Encoder> encoder;
  Linear head;
};

/// Encoder plus a pooled n-class head.
struct Predictor {
  std::shared_ptr<Encoder> encoder;
  Linear head;
};

struct Players {
  Selector generator;
  Predictor predictor;
  std::optional<Selector> attacker;

  /// Each player draws from its own seed stream, so generator and predictor
  /// start identical across variants for the same seed.
  static Players init(const TrainConfig& config, std::size_t vocab_size);

  /// Deep copy that keeps the encoder sharing structure.
  Players clone() const;

  /// Unique tensors by name. The embedding table is listed once as
  /// "embedding" and a shared encoder once under "generator.encoder".
  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<Tensor*> generator_predictor_parameters();
  std::vector<Tensor*> attacker_parameters();
};

/// A batch laid out time-major with trailing padding.
struct Batch {
  std::size_t size = 0;
  std::size_t steps = 0;
  std::vector<std::vector<std::size_t>> tokens;  // steps x size
  std::vector<std::vector<double>> valid;        // steps x size, 1 on real tokens
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> labels;
  MaskRows gold;  // size x steps; empty when any example lacks annotation

  static Batch from(std::span<const Example* const> examples);
  static Batch from(std::span<const Example> examples);
};

/// Selections of one selector for a batch.
struct Selection {
  std::vector<MaskSample> steps;
  Var st_matrix;  // (B x T) straight-through values
  MaskRows hard() const;  // B x T
};

Selection select_tokens(Graph& g, Selector& selector, const Batch& batch, bool trainable,
                        double temperature, Rng* rng);

/// Z = M * X row by row: row i of `embedded` scaled by `mask` entry i.
Var apply_mask(Graph& g, Var embedded, Var mask);

/// Class probabilities (B x n_classes) for the masked batch. Pooling is the
/// mean over non-padding positions of the hidden states.
Var predict(Graph& g, Predictor& predictor, const Batch& batch, std::span<const Var> masks,
            bool trainable);

/// Mean over rows of -sum_c target[c] * log p[c].
Var cross_entropy(Graph& g, Var probs, const ProbRows& targets);

/// lambda1 * |sum(M) / len - s| + lambda2 * sum_{t>=1} |M_t - M_{t-1}|,
/// averaged over the batch. `mask` is (B x T) with zeros on padding.
Var omega_penalty(Graph& g, Var mask, std::span<const std::size_t> lengths, double s,
                  double lambda1, double lambda2);
/// Mean over the batch of |sum(M) / len - s|.
Var sparsity_gap(Graph& g, Var mask, std::span<const std::size_t> lengths, double s);

// Scalar forms used by the analysis and tests.
double omega_penalty(std::span<const double> mask, double s, double lambda1, double lambda2);
double task_loss(std::span<const double> probs, std::size_t label);
double instruction_objective(std::span<const double> probs);

std::size_t sample_attack_target(std::size_t label, std::size_t n_classes, Rng& rng);

ProbRows one_hot(std::span<const std::size_t> labels, std::size_t n_classes);
ProbRows uniform_rows(std::size_t rows, std::size_t n_classes);

struct BatchOutcome {
  double task_loss = 0.0;
  double omega_gen = 0.0;
  double instruction_loss = 0.0;
  double attacker_loss = 0.0;
  ProbRows predictions;
  ProbRows attack_predictions;
  std::vector<std::size_t> attack_targets;
  MaskRows masks;
  MaskRows attack_masks;
};

/// Optimizer state for one training run.
struct Trainer {
  Trainer(Players& players, const TrainConfig& config);

  Adam main_opt;
  std::optional<Adam> attacker_opt;
};

/// One update of generator and predictor. Attacker parameters are read but
/// never written.
BatchOutcome train_step_main(Players& players, Trainer& trainer, const Batch& batch,
                             const TrainConfig& config, Rng& rng);

/// One update of the attacker against the frozen predictor. Returns 0 and
/// does nothing for variants without an attacker. When `outcome` is given
/// the attack predictions, targets and masks are stored in it.
double train_step_attacker(Players& players, Trainer& trainer, const Batch& batch,
                           const TrainConfig& config, Rng& rng, BatchOutcome* outcome = nullptr);

/// Deterministic (probs > 0.5) evaluation of one split.
struct EvalResult {
  MetricsRecord metrics;
  ProbRows predictions;
  ProbRows attack_predictions;
  MaskRows masks;
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> labels;
};

EvalResult evaluate(Players& players, std::span<const Example> examples, const TrainConfig& config,
                    std::string split, std::size_t epoch = 0);

struct TrainResult {
  std::vector<MetricsRecord> history;
  Players final_players;
  Players best_players;
  std::size_t best_epoch = 0;
  double best_dev_f1 = -1.0;
  bool best_selected = false;
};

/// Called after each epoch's records are appended; lets harnesses flush
/// partial output or evaluate extra probes.
using EpochHook = std::function<void(std::size_t epoch, Players& players,
                                     const std::vector<MetricsRecord>& history)>;

/// Trains for config.epochs epochs. Each epoch appends a "train" record built
/// from the sampled training-time masks and a "dev" record from deterministic
/// evaluation. The best-dev-F1 snapshot is kept (ties keep the earlier epoch).
TrainResult train(const Corpus& corpus, const TrainConfig& config, const EpochHook& hook = {},
                  std::optional<Players> initial = std::nullopt);

// Checkpoint: a JSON document
//   {"format":"ratlab-checkpoint","version":1,"seed":N,"vocab_size":V,
//    "config":{...},"parameters":[{"name":...,"shape":[...],"data":[...]}]}
// Doubles are written in shortest round-trip form, so save/load is bit-exact.
void save_checkpoint(const std::filesystem::path& path, Players& players,
                     const TrainConfig& config, std::size_t vocab_size);

struct Checkpoint {
  TrainConfig config;
  std::size_t vocab_size = 0;
  Players players;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ratlab
