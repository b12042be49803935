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

#include "ratlab/rationalizer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

namespace ratlab {

namespace {

constexpr double kProbFloor = 1e-12;

struct VariantName {
  Variant variant;
  std::string_view name;
};

constexpr VariantName kVariantNames[] = {
    {Variant::kRnp, "rnp"},
    {Variant::kRnpA2I, "rnp_a2i"},
    {Variant::kSharedEncoder, "shared_encoder"},
    {Variant::kSharedEncoderA2I, "shared_encoder_a2i"},
    {Variant::kA2INoInstruction, "a2i_no_instruction"},
    {Variant::kSparsityOnlyGenerator, "sparsity_only_generator"},
};

std::shared_ptr<Encoder> make_encoder(std::shared_ptr<EmbeddingTable> table, const TrainConfig& c,
                                      Rng& rng) {
  auto e = std::make_shared<Encoder>();
  e->embedding = std::move(table);
  e->gru = GRULayer::random(c.embed_dim, c.hidden_dim, rng);
  if (c.bidirectional) e->gru_backward = GRULayer::random(c.embed_dim, c.hidden_dim, rng);
  return e;
}

std::shared_ptr<Encoder> copy_encoder(const Encoder& src, std::shared_ptr<EmbeddingTable> table) {
  auto e = std::make_shared<Encoder>(src);
  e->embedding = std::move(table);
  return e;
}

void add_encoder_params(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& prefix,
                        Encoder& e) {
  static const char* const kGruNames[] = {"w_update", "b_update", "w_reset",
                                          "b_reset",  "w_cand",   "b_cand"};
  auto params = e.gru.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.emplace_back(prefix + ".gru." + kGruNames[i], params[i]);
  }
  if (e.gru_backward) {
    params = e.gru_backward->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.emplace_back(prefix + ".gru_backward." + kGruNames[i], params[i]);
    }
  }
}

void add_head_params(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& prefix,
                     Linear& head) {
  out.emplace_back(prefix + ".head.weight", &head.weight);
  out.emplace_back(prefix + ".head.bias", &head.bias);
}

void check_finite(double v, const char* what, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(v)) {
    throw DivergenceError(std::string(what) + " became non-finite at epoch " +
                          std::to_string(epoch) + ", batch " + std::to_string(batch));
  }
}

ProbRows rows_of(const Graph& g, Var probs) {
  const Shape s = g.shape(probs);
  const std::size_t n = s[0], c = s[1];
  const auto v = g.value(probs);
  ProbRows out(n, std::vector<double>(c));
  for (std::size_t i = 0; i < n; ++i) std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * c), c, out[i].begin());
  return out;
}

std::vector<Var> st_steps(const Selection& s) {
  std::vector<Var> v;
  v.reserve(s.steps.size());
  for (const auto& m : s.steps) v.push_back(m.st);
  return v;
}

void append(MaskRows& dst, MaskRows&& src) {
  for (auto& r : src) dst.push_back(std::move(r));
}

// Selected rows are trimmed to the example length so metrics see no padding.
MaskRows trim(MaskRows rows, std::span<const std::size_t> lengths) {
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].resize(lengths[i]);
  return rows;
}

// Hidden states per step, (B x H) or (B x 2H) when bidirectional.
std::vector<Var> encode(Graph& g, Encoder& enc, const Batch& batch, std::span<const Var> inputs,
                        bool trainable) {
  auto states = gru_encode(g, bind(g, enc.gru, trainable), inputs);
  if (!enc.gru_backward) return states;
  std::vector<Var> rev_inputs(inputs.rbegin(), inputs.rend());
  std::vector<Var> rev_valid;
  rev_valid.reserve(batch.steps);
  for (std::size_t t = batch.steps; t-- > 0;) rev_valid.push_back(g.constant({batch.size, 1}, batch.valid[t]));
  const auto back = gru_encode(g, bind(g, *enc.gru_backward, trainable), rev_inputs, rev_valid);
  for (std::size_t t = 0; t < states.size(); ++t) {
    const std::array<Var, 2> parts{states[t], back[states.size() - 1 - t]};
    states[t] = g.concat_last(parts);
  }
  return states;
}

bool better(const MetricsRecord& a, const MetricsRecord& b) {
  if (a.f1 != b.f1) return a.f1 > b.f1;
  return a.acc > b.acc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Variants and config

std::string_view to_string(Variant v) {
  for (const auto& vn : kVariantNames) {
    if (vn.variant == v) return vn.name;
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  for (const auto& vn : kVariantNames) {
    if (vn.name == name) return vn.variant;
  }
  throw std::invalid_argument("unknown variant \"" + std::string(name) + "\"");
}

bool has_attacker(Variant v) {
  return v == Variant::kRnpA2I || v == Variant::kSharedEncoderA2I || v == Variant::kA2INoInstruction;
}

bool has_instruction(Variant v) {
  return v == Variant::kRnpA2I || v == Variant::kSharedEncoderA2I;
}

bool shares_encoder(Variant v) {
  return v == Variant::kSharedEncoder || v == Variant::kSharedEncoderA2I;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (n_classes < 2) fail("n_classes must be at least 2");
  if (!(sparsity > 0.0 && sparsity < 1.0)) fail("sparsity must be in (0, 1)");
  if (lambda1 < 0.0 || lambda2 < 0.0 || attacker_l1() < 0.0) fail("lambdas must be nonnegative");
  if (!(learning_rate > 0.0) || !(attacker_lr() > 0.0)) fail("learning rates must be positive");
  if (!(temperature > 0.0)) fail("temperature must be positive");
  if (epochs == 0 || batch_size == 0) fail("epochs and batch_size must be positive");
  if (embed_dim == 0 || hidden_dim == 0) fail("embed_dim and hidden_dim must be positive");
  if (attacker_steps == 0) fail("attacker_steps must be positive");
  if (asr_split != "dev" && asr_split != "train") fail("asr_split must be dev or train");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j = {{"variant", std::string(to_string(variant))},
                      {"n_classes", n_classes},
                      {"sparsity", sparsity},
                      {"lambda1", lambda1},
                      {"lambda2", lambda2},
                      {"attacker_lambda1", attacker_l1()},
                      {"learning_rate", learning_rate},
                      {"attacker_learning_rate", attacker_lr()},
                      {"temperature", temperature},
                      {"epochs", epochs},
                      {"batch_size", batch_size},
                      {"seed", seed},
                      {"eval_deterministic", eval_deterministic},
                      {"embed_dim", embed_dim},
                      {"hidden_dim", hidden_dim},
                      {"attacker_steps", attacker_steps},
                      {"bidirectional", bidirectional},
                      {"asr_split", asr_split}};
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  c.n_classes = j.value("n_classes", c.n_classes);
  c.sparsity = j.value("sparsity", c.sparsity);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  if (j.contains("attacker_lambda1")) c.attacker_lambda1 = j.at("attacker_lambda1").get<double>();
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (j.contains("attacker_learning_rate")) {
    c.attacker_learning_rate = j.at("attacker_learning_rate").get<double>();
  }
  c.temperature = j.value("temperature", c.temperature);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.eval_deterministic = j.value("eval_deterministic", c.eval_deterministic);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.attacker_steps = j.value("attacker_steps", c.attacker_steps);
  c.bidirectional = j.value("bidirectional", c.bidirectional);
  c.asr_split = j.value("asr_split", c.asr_split);
  return c;
}

// ---------------------------------------------------------------------------
// Players

Players Players::init(const TrainConfig& config, std::size_t vocab_size) {
  config.validate();
  Rng re(derive_seed(config.seed, 10));
  Rng rg(derive_seed(config.seed, 11));
  Rng rp(derive_seed(config.seed, 12));
  Rng ra(derive_seed(config.seed, 13));
  auto table = std::make_shared<EmbeddingTable>(EmbeddingTable::random(vocab_size, config.embed_dim, re));
  Players p;
  p.generator.encoder = make_encoder(table, config, rg);
  p.generator.head = Linear::random(p.generator.encoder->output_dim(), 2, rg);
  p.predictor.encoder = shares_encoder(config.variant) ? p.generator.encoder
                                                       : make_encoder(table, config, rp);
  p.predictor.head = Linear::random(p.generator.encoder->output_dim(), config.n_classes, rp);
  if (has_attacker(config.variant)) {
    Selector a;
    a.encoder = make_encoder(table, config, ra);
    a.encoder->train_embedding = false;
    a.head = Linear::random(p.generator.encoder->output_dim(), 2, ra);
    p.attacker = std::move(a);
  }
  return p;
}

Players Players::clone() const {
  Players p;
  auto table = std::make_shared<EmbeddingTable>(*generator.encoder->embedding);
  p.generator.encoder = copy_encoder(*generator.encoder, table);
  p.generator.head = generator.head;
  p.predictor.encoder = predictor.encoder == generator.encoder
                            ? p.generator.encoder
                            : copy_encoder(*predictor.encoder, table);
  p.predictor.head = predictor.head;
  if (attacker) {
    Selector a;
    a.encoder = copy_encoder(*attacker->encoder, table);
    a.head = attacker->head;
    p.attacker = std::move(a);
  }
  return p;
}

std::vector<std::pair<std::string, Tensor*>> Players::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embedding", &generator.encoder->embedding->weights);
  add_encoder_params(out, "generator.encoder", *generator.encoder);
  add_head_params(out, "generator", generator.head);
  if (predictor.encoder != generator.encoder) {
    add_encoder_params(out, "predictor.encoder", *predictor.encoder);
  }
  add_head_params(out, "predictor", predictor.head);
  if (attacker) {
    add_encoder_params(out, "attacker.encoder", *attacker->encoder);
    add_head_params(out, "attacker", attacker->head);
  }
  return out;
}

std::vector<Tensor*> Players::generator_predictor_parameters() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_parameters()) {
    if (name.rfind("attacker.", 0) != 0) out.push_back(t);
  }
  return out;
}

std::vector<Tensor*> Players::attacker_parameters() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_parameters()) {
    if (name.rfind("attacker.", 0) == 0) out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches and forward passes

Batch Batch::from(std::span<const Example* const> examples) {
  Batch b;
  b.size = examples.size();
  bool annotated = !examples.empty();
  for (const Example* ex : examples) {
    const std::size_t len = ex->length();
    if (len == 0) throw std::invalid_argument("batch: example without tokens");
    b.lengths.push_back(len);
    b.labels.push_back(ex->label);
    b.steps = std::max(b.steps, len);
    annotated = annotated && !ex->gold_mask.empty();
  }
  b.tokens.assign(b.steps, std::vector<std::size_t>(b.size, 0));
  b.valid.assign(b.steps, std::vector<double>(b.size, 0.0));
  for (std::size_t i = 0; i < b.size; ++i) {
    for (std::size_t t = 0; t < b.lengths[i]; ++t) {
      b.tokens[t][i] = examples[i]->tokens[t];
      b.valid[t][i] = 1.0;
    }
  }
  if (annotated) {
    b.gold.assign(b.size, std::vector<double>(b.steps, 0.0));
    for (std::size_t i = 0; i < b.size; ++i) {
      for (std::size_t t = 0; t < b.lengths[i]; ++t) b.gold[i][t] = examples[i]->gold_mask[t];
    }
  }
  return b;
}

Batch Batch::from(std::span<const Example> examples) {
  std::vector<const Example*> ptrs;
  ptrs.reserve(examples.size());
  for (const auto& e : examples) ptrs.push_back(&e);
  return from(std::span<const Example* const>(ptrs));
}

MaskRows Selection::hard() const {
  if (steps.empty()) return {};
  const std::size_t b = steps[0].hard.size();
  MaskRows out(b, std::vector<double>(steps.size()));
  for (std::size_t t = 0; t < steps.size(); ++t) {
    for (std::size_t i = 0; i < b; ++i) out[i][t] = steps[t].hard[i];
  }
  return out;
}

Selection select_tokens(Graph& g, Selector& selector, const Batch& batch, bool trainable,
                        double temperature, Rng* rng) {
  Encoder& enc = *selector.encoder;
  const Var table = g.param(enc.embedding->weights, trainable && enc.train_embedding);
  const Var w = g.param(selector.head.weight, trainable);
  const Var bias = g.param(selector.head.bias, trainable);

  std::vector<Var> inputs;
  inputs.reserve(batch.steps);
  for (const auto& tok : batch.tokens) inputs.push_back(embed_sequence(g, table, tok));
  const auto states = encode(g, enc, batch, inputs, trainable);

  Selection s;
  s.steps.reserve(batch.steps);
  for (std::size_t t = 0; t < batch.steps; ++t) {
    const Var logits = linear_project(g, w, bias, states[t]);
    const Var valid = g.constant({batch.size, 1}, batch.valid[t]);
    s.steps.push_back(gumbel_softmax_mask(g, logits, valid, temperature, rng));
  }
  const auto cols = st_steps(s);
  s.st_matrix = g.concat_last(cols);
  return s;
}

Var apply_mask(Graph& g, Var embedded, Var mask) {
  const Shape es = g.shape(embedded);
  const Shape ms = g.shape(mask);
  const std::size_t rows = es.size() >= 2 ? shape_numel(es) / es.back() : 1;
  if (shape_numel(ms) != rows) {
    throw ShapeError("apply_mask: mask of " + shape_str(ms) + " for sequence of " + shape_str(es));
  }
  return g.mask_rows(embedded, mask);
}

Var predict(Graph& g, Predictor& predictor, const Batch& batch, std::span<const Var> masks,
            bool trainable) {
  if (masks.size() != batch.steps) {
    throw ShapeError("predict: " + std::to_string(masks.size()) + " mask steps for " +
                     std::to_string(batch.steps) + " token steps");
  }
  Encoder& enc = *predictor.encoder;
  const Var table = g.param(enc.embedding->weights, trainable && enc.train_embedding);
  std::vector<Var> inputs;
  inputs.reserve(batch.steps);
  for (std::size_t t = 0; t < batch.steps; ++t) {
    inputs.push_back(apply_mask(g, embed_sequence(g, table, batch.tokens[t]), masks[t]));
  }
  const auto states = encode(g, enc, batch, inputs, trainable);

  Var pooled{};
  for (std::size_t t = 0; t < batch.steps; ++t) {
    std::vector<double> weight(batch.size);
    for (std::size_t i = 0; i < batch.size; ++i) {
      weight[i] = batch.valid[t][i] / static_cast<double>(batch.lengths[i]);
    }
    const Var term = g.mask_rows(states[t], g.constant({batch.size, 1}, std::move(weight)));
    pooled = t == 0 ? term : g.add(pooled, term);
  }
  const Var logits = linear_project(g, g.param(predictor.head.weight, trainable),
                                    g.param(predictor.head.bias, trainable), pooled);
  return g.softmax_last(logits);
}

// ---------------------------------------------------------------------------
// Losses

Var cross_entropy(Graph& g, Var probs, const ProbRows& targets) {
  const Shape s = g.shape(probs);
  if (s.size() != 2 || targets.size() != s[0]) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for probs " +
                     shape_str(s));
  }
  std::vector<double> flat;
  flat.reserve(s[0] * s[1]);
  for (const auto& row : targets) {
    if (row.size() != s[1]) throw ShapeError("cross_entropy: target width mismatch");
    flat.insert(flat.end(), row.begin(), row.end());
  }
  const Var weighted = g.mul(g.log(probs), g.constant(s, std::move(flat)));
  return g.scale(g.sum(weighted), -1.0 / static_cast<double>(s[0]));
}

Var sparsity_gap(Graph& g, Var mask, std::span<const std::size_t> lengths, double s) {
  const Shape shape = g.shape(mask);
  const std::size_t b = shape.size() == 2 ? shape[0] : 1;
  if (lengths.size() != b) throw ShapeError("sparsity_gap: lengths do not match mask rows");
  std::vector<double> inv(b);
  for (std::size_t i = 0; i < b; ++i) inv[i] = 1.0 / static_cast<double>(lengths[i]);
  const Var frac = g.mask_rows(g.sum_last(mask), g.constant({b, 1}, std::move(inv)));
  return g.mean(g.abs(g.sub(frac, g.scalar(s))));
}

Var omega_penalty(Graph& g, Var mask, std::span<const std::size_t> lengths, double s,
                  double lambda1, double lambda2) {
  Var total = g.scale(sparsity_gap(g, mask, lengths, s), lambda1);
  const Shape shape = g.shape(mask);
  const std::size_t b = lengths.size(), steps = shape.back();
  if (lambda2 > 0.0 && steps > 1) {
    // (B x T) x (T x T-1) difference operator gives M_{t+1} - M_t per column.
    std::vector<double> diff(steps * (steps - 1), 0.0);
    for (std::size_t t = 0; t + 1 < steps; ++t) {
      diff[t * (steps - 1) + t] = -1.0;
      diff[(t + 1) * (steps - 1) + t] = 1.0;
    }
    std::vector<double> pair_valid(b * (steps - 1), 0.0);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t t = 0; t + 1 < std::min(lengths[i], steps); ++t) pair_valid[i * (steps - 1) + t] = 1.0;
    }
    const Var jumps = g.abs(g.matmul(mask, g.constant({steps, steps - 1}, std::move(diff))));
    const Var counted = g.mul(jumps, g.constant({b, steps - 1}, std::move(pair_valid)));
    total = g.add(total, g.scale(g.sum(counted), lambda2 / static_cast<double>(b)));
  }
  return total;
}

double omega_penalty(std::span<const double> mask, double s, double lambda1, double lambda2) {
  if (mask.empty()) throw std::invalid_argument("omega_penalty: empty mask");
  Graph g;
  const Var m = g.constant({1, mask.size()}, std::vector<double>(mask.begin(), mask.end()));
  const std::size_t len = mask.size();
  return g.item(omega_penalty(g, m, std::span<const std::size_t>(&len, 1), s, lambda1, lambda2));
}

double task_loss(std::span<const double> probs, std::size_t label) {
  if (label >= probs.size()) {
    throw std::invalid_argument("task_loss: label " + std::to_string(label) + " outside " +
                                std::to_string(probs.size()) + " classes");
  }
  return -std::log(std::max(probs[label], kProbFloor));
}

double instruction_objective(std::span<const double> probs) {
  double s = 0.0;
  for (double p : probs) s += std::log(std::max(p, kProbFloor));
  return -s / static_cast<double>(probs.size());
}

std::size_t sample_attack_target(std::size_t label, std::size_t n_classes, Rng& rng) {
  if (n_classes < 2) throw std::invalid_argument("sample_attack_target: need at least 2 classes");
  if (n_classes == 2) return 1 - label;
  const auto k = static_cast<std::size_t>(rng.below(n_classes - 1));
  return k < label ? k : k + 1;
}

ProbRows one_hot(std::span<const std::size_t> labels, std::size_t n_classes) {
  ProbRows out(labels.size(), std::vector<double>(n_classes, 0.0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) {
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " outside " +
                                  std::to_string(n_classes) + " classes");
    }
    out[i][labels[i]] = 1.0;
  }
  return out;
}

ProbRows uniform_rows(std::size_t rows, std::size_t n_classes) {
  return ProbRows(rows, std::vector<double>(n_classes, 1.0 / static_cast<double>(n_classes)));
}

// ---------------------------------------------------------------------------
// Training steps

Trainer::Trainer(Players& players, const TrainConfig& config)
    : main_opt(players.generator_predictor_parameters(), config.learning_rate) {
  if (players.attacker) attacker_opt.emplace(players.attacker_parameters(), config.attacker_lr());
}

BatchOutcome train_step_main(Players& players, Trainer& trainer, const Batch& batch,
                             const TrainConfig& config, Rng& rng) {
  Graph g;
  BatchOutcome out;
  const Selection sel = select_tokens(g, players.generator, batch, true, config.temperature, &rng);
  std::vector<Var> masks = st_steps(sel);
  if (config.variant == Variant::kSparsityOnlyGenerator) {
    for (auto& m : masks) m = g.stop_gradient(m);
  }
  const Var probs = predict(g, players.predictor, batch, masks, true);
  const Var task = cross_entropy(g, probs, one_hot(batch.labels, config.n_classes));
  const Var omega = omega_penalty(g, sel.st_matrix, batch.lengths, config.sparsity, config.lambda1,
                                  config.lambda2);
  Var loss = g.add(task, omega);
  out.task_loss = g.item(task);
  out.omega_gen = g.item(omega);

  if (has_instruction(config.variant) && players.attacker) {
    const Selection attack =
        select_tokens(g, *players.attacker, batch, false, config.temperature, &rng);
    std::vector<Var> detached = st_steps(attack);
    for (auto& m : detached) m = g.stop_gradient(m);
    const Var attack_probs = predict(g, players.predictor, batch, detached, true);
    const Var instruction =
        cross_entropy(g, attack_probs, uniform_rows(batch.size, config.n_classes));
    out.instruction_loss = g.item(instruction);
    loss = g.add(loss, instruction);
  }

  out.predictions = rows_of(g, probs);
  out.masks = trim(sel.hard(), batch.lengths);
  if (!std::isfinite(g.item(loss))) return out;

  trainer.main_opt.zero_grad();
  g.backward(loss);
  trainer.main_opt.step();
  return out;
}

double train_step_attacker(Players& players, Trainer& trainer, const Batch& batch,
                           const TrainConfig& config, Rng& rng, BatchOutcome* outcome) {
  if (!players.attacker || !trainer.attacker_opt) return 0.0;
  double last = 0.0;
  for (std::size_t k = 0; k < config.attacker_steps; ++k) {
    Graph g;
    const Selection attack =
        select_tokens(g, *players.attacker, batch, true, config.temperature, &rng);
    const auto masks = st_steps(attack);
    const Var probs = predict(g, players.predictor, batch, masks, false);
    std::vector<std::size_t> targets(batch.size);
    for (std::size_t i = 0; i < batch.size; ++i) {
      targets[i] = sample_attack_target(batch.labels[i], config.n_classes, rng);
    }
    const Var loss =
        g.add(cross_entropy(g, probs, one_hot(targets, config.n_classes)),
              g.scale(sparsity_gap(g, attack.st_matrix, batch.lengths, config.sparsity),
                      config.attacker_l1()));
    last = g.item(loss);
    if (outcome && k + 1 == config.attacker_steps) {
      outcome->attacker_loss = last;
      outcome->attack_predictions = rows_of(g, probs);
      outcome->attack_targets = targets;
      outcome->attack_masks = trim(attack.hard(), batch.lengths);
    }
    if (!std::isfinite(last)) return last;
    trainer.attacker_opt->zero_grad();
    g.backward(loss);
    trainer.attacker_opt->step();
  }
  return last;
}

// ---------------------------------------------------------------------------
// Evaluation and the training loop

EvalResult evaluate(Players& players, std::span<const Example> examples, const TrainConfig& config,
                    std::string split, std::size_t epoch) {
  EvalResult r;
  r.metrics.epoch = epoch;
  r.metrics.split = std::move(split);
  if (examples.empty()) return r;
  Rng rng(derive_seed(config.seed, 1000 + epoch));
  Rng* noise = config.eval_deterministic ? nullptr : &rng;
  const std::size_t bs = std::max<std::size_t>(config.batch_size, 256);
  MaskRows gold;
  bool annotated = true;
  std::vector<std::size_t> targets;
  for (std::size_t start = 0; start < examples.size(); start += bs) {
    const auto chunk = examples.subspan(start, std::min(bs, examples.size() - start));
    const Batch batch = Batch::from(chunk);
    Graph g;
    const Selection sel = select_tokens(g, players.generator, batch, false, config.temperature, noise);
    const Var probs = predict(g, players.predictor, batch, st_steps(sel), false);
    append(r.predictions, rows_of(g, probs));
    append(r.masks, trim(sel.hard(), batch.lengths));
    if (batch.gold.empty()) {
      annotated = false;
    } else {
      append(gold, trim(batch.gold, batch.lengths));
    }
    r.lengths.insert(r.lengths.end(), batch.lengths.begin(), batch.lengths.end());
    r.labels.insert(r.labels.end(), batch.labels.begin(), batch.labels.end());
    if (players.attacker) {
      const Selection attack =
          select_tokens(g, *players.attacker, batch, false, config.temperature, noise);
      const Var aprobs = predict(g, players.predictor, batch, st_steps(attack), false);
      append(r.attack_predictions, rows_of(g, aprobs));
      for (std::size_t y : batch.labels) targets.push_back(sample_attack_target(y, config.n_classes, rng));
    }
  }
  r.metrics.acc = accuracy_of(r.predictions, r.labels);
  r.metrics.sparsity = sparsity_of(r.masks);
  if (annotated) {
    const PRF prf = token_prf(r.masks, gold);
    r.metrics.precision = prf.precision;
    r.metrics.recall = prf.recall;
    r.metrics.f1 = prf.f1;
  }
  if (players.attacker) {
    r.metrics.asr = attack_success_rate(r.attack_predictions, r.labels, targets);
  }
  return r;
}

TrainResult train(const Corpus& corpus, const TrainConfig& config, const EpochHook& hook,
                  std::optional<Players> initial) {
  config.validate();
  if (corpus.train.empty()) throw CorpusError("train: empty training split");
  TrainResult result;
  Players players = initial ? std::move(*initial) : Players::init(config, corpus.vocab.size());
  Trainer trainer(players, config);
  Rng rng(derive_seed(config.seed, 7));

  std::vector<std::size_t> order(corpus.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::optional<MetricsRecord> best;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    ProbRows preds, attack_preds;
    MaskRows masks, gold;
    std::vector<std::size_t> labels, attack_targets;
    bool annotated = true;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const Example*> ptrs;
      for (std::size_t k = start; k < end; ++k) ptrs.push_back(&corpus.train[order[k]]);
      const Batch batch = Batch::from(std::span<const Example* const>(ptrs));

      // A NaN that reaches a log is reported as a domain error by the graph;
      // inside training it means the run diverged.
      const auto guarded = [&](auto&& step) {
        try {
          return step();
        } catch (const DomainError& e) {
          throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                ", batch " + std::to_string(batch_index));
        }
      };
      BatchOutcome out =
          guarded([&] { return train_step_main(players, trainer, batch, config, rng); });
      check_finite(out.task_loss, "task loss", epoch, batch_index);
      check_finite(out.omega_gen, "regularizer", epoch, batch_index);
      check_finite(out.instruction_loss, "instruction loss", epoch, batch_index);
      if (players.attacker) {
        const double la = guarded(
            [&] { return train_step_attacker(players, trainer, batch, config, rng, &out); });
        check_finite(la, "attacker loss", epoch, batch_index);
        append(attack_preds, std::move(out.attack_predictions));
        attack_targets.insert(attack_targets.end(), out.attack_targets.begin(), out.attack_targets.end());
      }
      append(preds, std::move(out.predictions));
      append(masks, std::move(out.masks));
      labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
      if (batch.gold.empty()) {
        annotated = false;
      } else {
        append(gold, trim(batch.gold, batch.lengths));
      }
    }

    MetricsRecord tr;
    tr.epoch = epoch;
    tr.split = "train";
    tr.acc = accuracy_of(preds, labels);
    tr.sparsity = sparsity_of(masks);
    if (annotated) {
      const PRF prf = token_prf(masks, gold);
      tr.precision = prf.precision;
      tr.recall = prf.recall;
      tr.f1 = prf.f1;
    }
    if (players.attacker) tr.asr = attack_success_rate(attack_preds, labels, attack_targets);

    EvalResult dev = evaluate(players, corpus.dev, config, "dev", epoch);
    if (config.asr_split == "train" && players.attacker) dev.metrics.asr = tr.asr;
    result.history.push_back(tr);
    result.history.push_back(dev.metrics);

    if (!corpus.dev.empty() && (!best || better(dev.metrics, *best))) {
      best = dev.metrics;
      result.best_epoch = epoch;
      result.best_dev_f1 = dev.metrics.f1;
      result.best_players = players.clone();
      result.best_selected = true;
    }
    if (hook) hook(epoch, players, result.history);
  }
  if (!result.best_selected) result.best_players = players.clone();
  result.final_players = std::move(players);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, Players& players, const TrainConfig& config,
                     std::size_t vocab_size) {
  nlohmann::json params = nlohmann::json::array();
  for (auto& [name, t] : players.named_parameters()) {
    params.push_back({{"name", name}, {"shape", t->shape}, {"data", t->data}});
  }
  const nlohmann::json doc = {{"format", "ratlab-checkpoint"},
                              {"version", 1},
                              {"seed", config.seed},
                              {"vocab_size", vocab_size},
                              {"config", config.to_json()},
                              {"parameters", std::move(params)}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << doc.dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("malformed checkpoint " + path.string() + ": " + e.what());
  }
  if (doc.value("format", "") != "ratlab-checkpoint" || doc.value("version", 0) != 1) {
    throw std::runtime_error(path.string() + " is not a version-1 ratlab checkpoint");
  }
  Checkpoint c;
  c.config = TrainConfig::from_json(doc.at("config"));
  c.vocab_size = doc.at("vocab_size").get<std::size_t>();
  c.players = Players::init(c.config, c.vocab_size);
  auto named = c.players.named_parameters();
  const auto& params = doc.at("parameters");
  if (params.size() != named.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(params.size()) +
                             " parameters, model expects " + std::to_string(named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& p = params[i];
    auto& [name, t] = named[i];
    if (p.at("name").get<std::string>() != name || p.at("shape").get<Shape>() != t->shape) {
      throw std::runtime_error("checkpoint parameter " + p.at("name").get<std::string>() +
                               " does not match model parameter " + name);
    }
    t->data = p.at("data").get<std::vector<double>>();
    if (t->data.size() != shape_numel(t->shape)) {
      throw std::runtime_error("checkpoint parameter " + name + " has the wrong number of values");
    }
  }
  return c;
}

}  // namespace ratlab
