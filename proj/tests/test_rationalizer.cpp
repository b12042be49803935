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

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <doctest.h>

#include "ratlab/rationalizer.hpp"
#include "support/temp_dir.hpp"

using namespace ratlab;

namespace {

CorpusSpec tiny_spec() {
  CorpusSpec s;
  s.n_train = 256;
  s.n_dev = 128;
  s.n_test = 64;
  s.seq_len = 12;
  s.min_len = 9;
  s.vocab_size = 32;
  s.rationale_len = 2;
  return s;
}

TrainConfig tiny_config(Variant v) {
  TrainConfig c;
  c.variant = v;
  c.embed_dim = 8;
  c.hidden_dim = 8;
  c.learning_rate = 1e-2;
  c.sparsity = 0.2;
  c.epochs = 2;
  c.batch_size = 32;
  c.seed = 5;
  return c;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor*>& ts) {
  std::vector<std::vector<double>> out;
  for (const Tensor* t : ts) out.push_back(t->data);
  return out;
}

bool grad_is_zero(const Tensor& t) {
  return !t.grad || std::all_of(t.grad->begin(), t.grad->end(), [](double g) { return g == 0.0; });
}

bool any_changed(const std::vector<Tensor*>& ts, const std::vector<std::vector<double>>& before) {
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (ts[i]->data != before[i]) return true;
  }
  return false;
}

std::vector<Var> soft_masks(const Selection& s) {
  std::vector<Var> out;
  for (const auto& step : s.steps) out.push_back(step.probs);
  return out;
}

Batch first_batch(const Corpus& c, std::size_t n) {
  return Batch::from(std::span<const Example>(c.train.data(), n));
}

}  // namespace

TEST_CASE("omega penalty hand values") {
  std::vector<double> m(10, 0.0);
  m[0] = m[1] = 1.0;
  CHECK(omega_penalty(m, 0.2, 1.0, 1.0) == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> alt(10);
  for (std::size_t i = 0; i < alt.size(); ++i) alt[i] = i % 2 == 0 ? 1.0 : 0.0;
  CHECK(omega_penalty(alt, 0.5, 1.0, 1.0) == doctest::Approx(9.0).epsilon(1e-12));

  const std::vector<double> zeros(10, 0.0);
  CHECK(omega_penalty(zeros, 0.1, 2.0, 5.0) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK_THROWS_AS(omega_penalty(std::vector<double>{}, 0.1, 1.0, 1.0), std::invalid_argument);
}

TEST_CASE("omega penalty vanishes exactly on constant masks at the target level") {
  const std::vector<double> flat(8, 0.25);
  CHECK(omega_penalty(flat, 0.25, 1.0, 1.0) == doctest::Approx(0.0).epsilon(1e-12));
  // Right mean, not constant.
  const std::vector<double> split = {0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0};
  CHECK(omega_penalty(split, 0.25, 1.0, 1.0) > 0.1);
  // Constant, wrong mean.
  const std::vector<double> off(8, 0.5);
  CHECK(omega_penalty(off, 0.25, 1.0, 1.0) > 0.1);
}

TEST_CASE("task loss and instruction objective hand values") {
  CHECK(task_loss(std::vector<double>{0.25, 0.75}, 1) == doctest::Approx(-std::log(0.75)));
  CHECK(task_loss(std::vector<double>{0.25, 0.75}, 1) == doctest::Approx(0.2877).epsilon(1e-4));
  CHECK(task_loss(std::vector<double>{0.0, 1.0}, 1) == doctest::Approx(0.0));
  CHECK(task_loss(std::vector<double>{0.5, 0.5}, 0) == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(task_loss(std::vector<double>{0.5, 0.5}, 2), std::invalid_argument);

  CHECK(instruction_objective(std::vector<double>{0.5, 0.5}) == doctest::Approx(std::log(2.0)));
  CHECK(instruction_objective(std::vector<double>{0.9, 0.1}) ==
        doctest::Approx(-0.5 * (std::log(0.9) + std::log(0.1))));
  CHECK(instruction_objective(std::vector<double>{0.9, 0.1}) == doctest::Approx(1.2040).epsilon(1e-4));
  // Minimized only at the uniform prediction.
  for (double p = 0.01; p < 1.0; p += 0.01) {
    const double v = instruction_objective(std::vector<double>{p, 1.0 - p});
    CHECK(v >= std::log(2.0) - 1e-15);
    if (std::abs(p - 0.5) > 1e-9) CHECK(v > std::log(2.0));
  }
}

TEST_CASE("attack targets") {
  Rng rng(1);
  CHECK(sample_attack_target(1, 2, rng) == 0);
  CHECK(sample_attack_target(0, 2, rng) == 1);
  CHECK_THROWS_AS(sample_attack_target(0, 1, rng), std::invalid_argument);

  const std::size_t draws = 100000;
  std::size_t ones = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    const std::size_t t = sample_attack_target(0, 3, rng);
    REQUIRE((t == 1 || t == 2));
    ones += t == 1;
  }
  const double sigma = std::sqrt(0.25 / draws);
  CHECK(std::abs(static_cast<double>(ones) / draws - 0.5) < 3.0 * sigma);
}

TEST_CASE("apply_mask scales rows") {
  Graph g;
  const Var x = g.constant({3, 2}, {1, 2, 3, 4, 5, 6});
  const auto run = [&](std::vector<double> m) {
    const Var out = apply_mask(g, x, g.constant({3, 1}, std::move(m)));
    const auto v = g.value(out);
    return std::vector<double>(v.begin(), v.end());
  };
  CHECK(run({1, 1, 1}) == std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(run({0, 0, 0}) == std::vector<double>(6, 0.0));
  CHECK(run({1, 0, 1}) == std::vector<double>{1, 2, 0, 0, 5, 6});
  CHECK_THROWS_AS(apply_mask(g, x, g.constant({2, 1}, {1, 1})), ShapeError);
}

TEST_CASE("full training loss passes the finite-difference check") {
  const Corpus corpus = generate_corpus(tiny_spec());
  const Batch batch = first_batch(corpus, 2);
  for (Variant v : {Variant::kRnpA2I, Variant::kSharedEncoderA2I}) {
    for (bool bidirectional : {false, true}) {
      CAPTURE(to_string(v));
      CAPTURE(bidirectional);
      TrainConfig c = tiny_config(v);
      c.lambda2 = 0.5;
      c.bidirectional = bidirectional;
      Players players = Players::init(c, corpus.vocab.size());
      // Soft masks (keep probabilities without noise) make the loss smooth.
      const GraphBuilder build = [&](Graph& g, std::span<const Var>) {
        const Selection sel = select_tokens(g, players.generator, batch, true, c.temperature, nullptr);
        const auto masks = soft_masks(sel);
        const Var probs = predict(g, players.predictor, batch, masks, true);
        Var loss = cross_entropy(g, probs, one_hot(batch.labels, c.n_classes));
        loss = g.add(loss, omega_penalty(g, g.concat_last(masks), batch.lengths, c.sparsity,
                                         c.lambda1, c.lambda2));
        const Selection attack = select_tokens(g, *players.attacker, batch, false, c.temperature, nullptr);
        std::vector<Var> detached = soft_masks(attack);
        for (auto& m : detached) m = g.stop_gradient(m);
        const Var aprobs = predict(g, players.predictor, batch, detached, true);
        return g.add(loss, cross_entropy(g, aprobs, uniform_rows(batch.size, c.n_classes)));
      };
      const auto params = players.generator_predictor_parameters();
      const GradCheckReport r = grad_check_fd(build, params);
      CHECK(r.ok(1e-3));
      CHECK(r.max_rel_error <= 1e-3);
    }
  }
}

TEST_CASE("main step leaves the attacker bit-identical") {
  const Corpus corpus = generate_corpus(tiny_spec());
  const Batch batch = first_batch(corpus, 32);
  for (Variant v : {Variant::kRnpA2I, Variant::kSharedEncoderA2I, Variant::kA2INoInstruction}) {
    CAPTURE(to_string(v));
    const TrainConfig c = tiny_config(v);
    Players players = Players::init(c, corpus.vocab.size());
    Trainer trainer(players, c);
    Rng rng(3);
    const auto attacker = players.attacker_parameters();
    const auto main = players.generator_predictor_parameters();
    const auto before = snapshot(attacker);
    const auto main_before = snapshot(main);
    for (int k = 0; k < 3; ++k) train_step_main(players, trainer, batch, c, rng);
    CHECK(snapshot(attacker) == before);
    CHECK(any_changed(main, main_before));
    for (const Tensor* t : attacker) CHECK(grad_is_zero(*t));
  }
}

TEST_CASE("attacker step leaves generator and predictor bit-identical") {
  const Corpus corpus = generate_corpus(tiny_spec());
  const Batch batch = first_batch(corpus, 32);
  for (Variant v : {Variant::kRnpA2I, Variant::kSharedEncoderA2I, Variant::kA2INoInstruction}) {
    CAPTURE(to_string(v));
    TrainConfig c = tiny_config(v);
    c.attacker_steps = 2;
    Players players = Players::init(c, corpus.vocab.size());
    Trainer trainer(players, c);
    Rng rng(4);
    const auto main = players.generator_predictor_parameters();
    const auto attacker = players.attacker_parameters();
    const auto before = snapshot(main);
    const auto attacker_before = snapshot(attacker);
    BatchOutcome out;
    const double loss = train_step_attacker(players, trainer, batch, c, rng, &out);
    CHECK(std::isfinite(loss));
    CHECK(loss == out.attacker_loss);
    CHECK(out.attack_targets.size() == batch.size);
    CHECK(snapshot(main) == before);
    CHECK(any_changed(attacker, attacker_before));
    for (const Tensor* t : main) CHECK(grad_is_zero(*t));
  }
}

TEST_CASE("instruction term carries no gradient to the attacker") {
  const Corpus corpus = generate_corpus(tiny_spec());
  const Batch batch = first_batch(corpus, 8);
  const TrainConfig c = tiny_config(Variant::kRnpA2I);
  Players players = Players::init(c, corpus.vocab.size());
  for (Tensor* t : players.attacker_parameters()) t->zero_grad();
  Graph g;
  // Attacker leaves registered as trainable: only the stop-gradient cuts the path.
  const Selection attack = select_tokens(g, *players.attacker, batch, true, c.temperature, nullptr);
  std::vector<Var> detached;
  for (const auto& s : attack.steps) detached.push_back(g.stop_gradient(s.st));
  const Var probs = predict(g, players.predictor, batch, detached, true);
  const Var loss = cross_entropy(g, probs, uniform_rows(batch.size, c.n_classes));
  g.backward(loss);
  for (const Tensor* t : players.attacker_parameters()) CHECK(grad_is_zero(*t));
  // The predictor does receive gradient.
  CHECK_FALSE(grad_is_zero(players.predictor.head.weight));
}

TEST_CASE("variant contracts of the main step") {
  const Corpus corpus = generate_corpus(tiny_spec());
  const Batch batch = first_batch(corpus, 16);

  SUBCASE("rnp has no instruction and no attacker") {
    const TrainConfig c = tiny_config(Variant::kRnp);
    Players players = Players::init(c, corpus.vocab.size());
    CHECK_FALSE(players.attacker.has_value());
    Trainer trainer(players, c);
    Rng rng(1);
    const BatchOutcome out = train_step_main(players, trainer, batch, c, rng);
    CHECK(out.instruction_loss == 0.0);
    const auto before = snapshot(players.generator_predictor_parameters());
    CHECK(train_step_attacker(players, trainer, batch, c, rng) == 0.0);
    CHECK(snapshot(players.generator_predictor_parameters()) == before);
  }

  SUBCASE("a2i_no_instruction reports no instruction loss") {
    const TrainConfig c = tiny_config(Variant::kA2INoInstruction);
    Players players = Players::init(c, corpus.vocab.size());
    Trainer trainer(players, c);
    Rng rng(1);
    CHECK(train_step_main(players, trainer, batch, c, rng).instruction_loss == 0.0);
  }

  SUBCASE("rnp_a2i reports a positive instruction loss") {
    const TrainConfig c = tiny_config(Variant::kRnpA2I);
    Players players = Players::init(c, corpus.vocab.size());
    Trainer trainer(players, c);
    Rng rng(1);
    const BatchOutcome out = train_step_main(players, trainer, batch, c, rng);
    CHECK(out.instruction_loss >= std::log(2.0) - 1e-12);
    CHECK(std::isfinite(out.task_loss));
    CHECK(out.omega_gen >= 0.0);
  }

  SUBCASE("sparsity_only_generator: generator gradient is the regularizer gradient") {
    TrainConfig c = tiny_config(Variant::kSparsityOnlyGenerator);
    c.lambda2 = 0.3;
    Players players = Players::init(c, corpus.vocab.size());
    Players reference = players.clone();
    Trainer trainer(players, c);
    Rng rng(9);
    train_step_main(players, trainer, batch, c, rng);

    Graph g;
    Rng same(9);
    const Selection sel = select_tokens(g, reference.generator, batch, true, c.temperature, &same);
    g.backward(omega_penalty(g, sel.st_matrix, batch.lengths, c.sparsity, c.lambda1, c.lambda2));

    auto trained = players.named_parameters();
    auto ref = reference.named_parameters();
    std::size_t compared = 0;
    for (std::size_t i = 0; i < trained.size(); ++i) {
      if (trained[i].first.rfind("generator.", 0) != 0) continue;
      CAPTURE(trained[i].first);
      REQUIRE(ref[i].second->grad.has_value());
      REQUIRE(trained[i].second->grad.has_value());
      const auto& a = *trained[i].second->grad;
      const auto& b = *ref[i].second->grad;
      double worst = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
      CHECK(worst <= 1e-12);
      ++compared;
    }
    CHECK(compared > 0);
  }
}

TEST_CASE("attacker loss falls against a fixed vulnerable predictor") {
  const Corpus corpus = generate_corpus(tiny_spec());
  TrainConfig c = tiny_config(Variant::kA2INoInstruction);
  c.epochs = 4;
  c.attacker_learning_rate = 1e-2;
  // Without instruction the predictor is never told to ignore the attacker.
  TrainResult trained = train(corpus, c);
  Players players = std::move(trained.final_players);
  const Players fresh = Players::init(c, corpus.vocab.size());
  players.attacker->encoder->gru = fresh.attacker->encoder->gru;
  players.attacker->head = fresh.attacker->head;
  Trainer trainer(players, c);
  const Batch batch = first_batch(corpus, 64);
  Rng rng(11);
  std::vector<double> losses;
  for (int k = 0; k < 50; ++k) losses.push_back(train_step_attacker(players, trainer, batch, c, rng));
  const double head = std::accumulate(losses.begin(), losses.begin() + 5, 0.0) / 5.0;
  const double tail = std::accumulate(losses.end() - 5, losses.end(), 0.0) / 5.0;
  CHECK(tail < head);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("a predictor trained on gold rationales separates the corpus") {
  const Corpus corpus = generate_corpus(tiny_spec());
  const TrainConfig c = tiny_config(Variant::kRnp);
  Players players = Players::init(c, corpus.vocab.size());
  std::vector<Tensor*> params = {&players.generator.encoder->embedding->weights};
  for (Tensor* t : players.predictor.encoder->gru.parameters()) params.push_back(t);
  for (Tensor* t : players.predictor.head.parameters()) params.push_back(t);
  Adam opt(params, 1e-2);

  const auto gold_masks = [](Graph& g, const Batch& b) {
    std::vector<Var> masks;
    for (std::size_t t = 0; t < b.steps; ++t) {
      std::vector<double> col(b.size);
      for (std::size_t i = 0; i < b.size; ++i) col[i] = b.gold[i][t];
      masks.push_back(g.constant({b.size, 1}, std::move(col)));
    }
    return masks;
  };
  for (int epoch = 0; epoch < 15; ++epoch) {
    for (std::size_t start = 0; start < corpus.train.size(); start += 32) {
      const Batch b = Batch::from(std::span<const Example>(corpus.train).subspan(start, 32));
      REQUIRE_FALSE(b.gold.empty());
      Graph g;
      const auto masks = gold_masks(g, b);
      const Var loss = cross_entropy(g, predict(g, players.predictor, b, masks, true),
                                     one_hot(b.labels, c.n_classes));
      opt.zero_grad();
      g.backward(loss);
      opt.step();
    }
  }
  const Batch dev = Batch::from(std::span<const Example>(corpus.dev));
  Graph g;
  const auto masks = gold_masks(g, dev);
  const Var probs = predict(g, players.predictor, dev, masks, false);
  ProbRows rows(dev.size, std::vector<double>(c.n_classes));
  const auto v = g.value(probs);
  for (std::size_t i = 0; i < dev.size; ++i) {
    for (std::size_t k = 0; k < c.n_classes; ++k) rows[i][k] = v[i * c.n_classes + k];
  }
  CHECK(accuracy_of(rows, dev.labels) > 0.95);
}

TEST_CASE("training is deterministic and checkpoints round-trip bit-exactly") {
  const Corpus corpus = generate_corpus(tiny_spec());
  const TrainConfig c = tiny_config(Variant::kRnpA2I);
  TrainResult a = train(corpus, c);
  TrainResult b = train(corpus, c);
  REQUIRE(a.history.size() == 2 * c.epochs);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    const auto& x = a.history[i];
    const auto& y = b.history[i];
    CHECK(x.split == y.split);
    CHECK(x.acc == y.acc);
    CHECK(x.f1 == y.f1);
    CHECK(x.sparsity == y.sparsity);
    CHECK(x.asr == y.asr);
  }
  CHECK(a.history[0].split == "train");
  CHECK(a.history[1].split == "dev");
  CHECK(a.history[1].asr.has_value());

  const testing::TempDir dir("ckpt");
  save_checkpoint(dir / "c.json", a.final_players, c, corpus.vocab.size());
  Checkpoint back = load_checkpoint(dir / "c.json");
  auto orig = a.final_players.named_parameters();
  auto loaded = back.players.named_parameters();
  REQUIRE(orig.size() == loaded.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    CHECK(orig[i].first == loaded[i].first);
    CHECK(orig[i].second->shape == loaded[i].second->shape);
    CHECK(orig[i].second->data == loaded[i].second->data);
  }
  CHECK(back.config.to_json() == c.to_json());
  CHECK(back.vocab_size == corpus.vocab.size());
  // The loaded attacker still reads the shared embedding without training it.
  CHECK(back.players.attacker->encoder->embedding == back.players.generator.encoder->embedding);
  CHECK_FALSE(back.players.attacker->encoder->train_embedding);

  testing::write_file(dir / "bad.json", "{\"format\":\"other\"}");
  CHECK_THROWS(load_checkpoint(dir / "bad.json"));
  CHECK_THROWS(load_checkpoint(dir / "missing.json"));
}

TEST_CASE("non-finite losses abort training with a divergence error") {
  const Corpus corpus = generate_corpus(tiny_spec());
  const TrainConfig c = tiny_config(Variant::kRnp);
  Players players = Players::init(c, corpus.vocab.size());
  players.predictor.head.bias.data[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(corpus, c, {}, std::move(players));
    FAIL("training with a NaN parameter did not throw");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("epoch 1, batch 0") != std::string::npos);
  }

  Corpus empty = corpus;
  empty.train.clear();
  CHECK_THROWS_AS(train(empty, c), CorpusError);
}

TEST_CASE("encoder sharing follows the variant") {
  const TrainConfig se = tiny_config(Variant::kSharedEncoderA2I);
  Players p = Players::init(se, 20);
  CHECK(p.generator.encoder == p.predictor.encoder);
  CHECK(p.attacker->encoder != p.generator.encoder);
  Players q = p.clone();
  CHECK(q.generator.encoder == q.predictor.encoder);
  CHECK(q.generator.encoder != p.generator.encoder);

  const TrainConfig rnp = tiny_config(Variant::kRnp);
  Players r = Players::init(rnp, 20);
  CHECK(r.generator.encoder != r.predictor.encoder);
  CHECK(r.generator.encoder->embedding == r.predictor.encoder->embedding);

  // Same seed: generator and predictor start identical across variants.
  Players a = Players::init(tiny_config(Variant::kRnp), 20);
  Players b = Players::init(tiny_config(Variant::kA2INoInstruction), 20);
  CHECK(a.generator.head.weight.data == b.generator.head.weight.data);
  CHECK(a.predictor.head.weight.data == b.predictor.head.weight.data);
  CHECK(a.generator.encoder->gru.w_cand.data == b.generator.encoder->gru.w_cand.data);
}

TEST_CASE("config validation and variant names") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  auto bad = [](auto edit) {
    TrainConfig x;
    edit(x);
    CHECK_THROWS_AS(x.validate(), std::invalid_argument);
  };
  bad([](TrainConfig& x) { x.n_classes = 1; });
  bad([](TrainConfig& x) { x.sparsity = 0.0; });
  bad([](TrainConfig& x) { x.sparsity = 1.0; });
  bad([](TrainConfig& x) { x.lambda1 = -1.0; });
  bad([](TrainConfig& x) { x.learning_rate = 0.0; });
  bad([](TrainConfig& x) { x.attacker_learning_rate = -1.0; });
  bad([](TrainConfig& x) { x.temperature = 0.0; });
  bad([](TrainConfig& x) { x.epochs = 0; });
  bad([](TrainConfig& x) { x.attacker_steps = 0; });
  bad([](TrainConfig& x) { x.asr_split = "test"; });

  for (Variant v : {Variant::kRnp, Variant::kRnpA2I, Variant::kSharedEncoder,
                    Variant::kSharedEncoderA2I, Variant::kA2INoInstruction,
                    Variant::kSparsityOnlyGenerator}) {
    CHECK(parse_variant(to_string(v)) == v);
  }
  CHECK_THROWS(parse_variant("nope"));
  CHECK(has_attacker(Variant::kA2INoInstruction));
  CHECK_FALSE(has_instruction(Variant::kA2INoInstruction));
  CHECK_FALSE(has_attacker(Variant::kSharedEncoder));

  c.attacker_lambda1 = 3.0;
  c.attacker_learning_rate = 0.5;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.attacker_l1() == 3.0);
  CHECK(back.attacker_lr() == 0.5);
}
