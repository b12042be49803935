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

#include <cmath>
#include <random>
#include <vector>

#include <doctest.h>

#include "ratlab/autodiff.hpp"
#include "ratlab/nn.hpp"
#include "support/random_graphs.hpp"

using namespace ratlab;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  std::vector<double> d(shape_numel(s));
  for (auto& v : d) v = rng.uniform(-scale, scale);
  return Tensor(std::move(s), std::move(d), true);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Selection frequency of the keep component over `draws` single-token masks.
double keep_frequency(double keep, double drop, double temperature, std::size_t draws,
                      std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t chunk = 10000;
  double hits = 0.0;
  for (std::size_t done = 0; done < draws; done += chunk) {
    const std::size_t n = std::min(chunk, draws - done);
    Graph g;
    std::vector<double> logits;
    for (std::size_t i = 0; i < n; ++i) {
      logits.push_back(keep);
      logits.push_back(drop);
    }
    const Var l = g.constant({n, 2}, logits);
    const Var valid = g.constant({n, 1}, std::vector<double>(n, 1.0));
    const MaskSample m = gumbel_softmax_mask(g, l, valid, temperature, &rng);
    for (double h : m.hard) {
      REQUIRE((h == 0.0 || h == 1.0));
      hits += h;
    }
  }
  return hits / static_cast<double>(draws);
}

}  // namespace

TEST_CASE("embedding lookup reads rows and keeps padding at zero") {
  Rng rng(3);
  EmbeddingTable t = EmbeddingTable::random(6, 4, rng);
  for (std::size_t j = 0; j < 4; ++j) CHECK(t.weights.data[j] == 0.0);
  for (std::size_t j = 4; j < t.weights.data.size(); ++j) {
    CHECK(std::fabs(t.weights.data[j]) <= 0.1);
  }
  Graph g;
  const Var table = g.param(t.weights);
  const std::size_t pad[] = {0, 0};
  const auto zeros = g.value(embed_sequence(g, table, pad));
  CHECK(std::vector<double>(zeros.begin(), zeros.end()) == std::vector<double>(8, 0.0));
  const std::size_t k[] = {4};
  const auto row = g.value(embed_sequence(g, table, k));
  for (std::size_t j = 0; j < 4; ++j) CHECK(row[j] == t.weights.data[16 + j]);
  const std::size_t bad[] = {6};
  CHECK_THROWS(embed_sequence(g, table, bad));
}

TEST_CASE("embedding gradient counts token multiplicity") {
  Rng rng(5);
  EmbeddingTable t = EmbeddingTable::random(5, 3, rng);
  const std::size_t tokens[] = {2, 4, 2, 2};
  Graph g;
  g.backward(g.sum(embed_sequence(g, g.param(t.weights), tokens)));
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK((*t.weights.grad)[2 * 3 + j] == 3.0);
    CHECK((*t.weights.grad)[4 * 3 + j] == 1.0);
    CHECK((*t.weights.grad)[1 * 3 + j] == 0.0);
  }
  const double err = testing::fd_max_rel_error(
      [&](Graph& h, std::span<const Var> v) {
        return h.sum(h.mul(embed_sequence(h, v[0], tokens), embed_sequence(h, v[0], tokens)));
      },
      {&t.weights});
  CHECK(err <= 1e-4);
}

TEST_CASE("gru with zero weights stays at zero") {
  GRULayer layer = GRULayer::zeros(3, 4);
  Graph g;
  const GRUVars v = bind(g, layer, true);
  std::vector<Var> steps(5, g.constant({1, 3}, {0, 0, 0}));
  for (Var h : gru_encode(g, v, steps)) {
    for (double x : g.value(h)) CHECK(x == 0.0);
  }
}

TEST_CASE("one gru step equals the cell equations from a zero state") {
  Rng rng(11);
  GRULayer layer = GRULayer::random(2, 3, rng);
  for (auto* b : {&layer.b_update, &layer.b_reset, &layer.b_cand}) {
    for (auto& x : b->data) x = rng.uniform(-0.5, 0.5);
  }
  const std::vector<double> x = {0.4, -0.9};
  Graph g;
  const GRUVars v = bind(g, layer, false);
  const Var in = g.constant({1, 2}, x);
  const auto out = g.value(gru_encode(g, v, std::span<const Var>(&in, 1)).at(0));
  // h0 = 0, so [x, h0] W only reads the first input_dim rows of each matrix.
  for (std::size_t j = 0; j < 3; ++j) {
    double az = layer.b_update.data[j], an = layer.b_cand.data[j];
    for (std::size_t i = 0; i < 2; ++i) {
      az += x[i] * layer.w_update.data[i * 3 + j];
      an += x[i] * layer.w_cand.data[i * 3 + j];
    }
    const double z = sigmoid(az), n = std::tanh(an);
    CHECK(out[j] == doctest::Approx(n - z * n).epsilon(1e-14));
  }
}

TEST_CASE("gru gradients match central differences") {
  Rng rng(17);
  GRULayer layer = GRULayer::random(3, 4, rng);
  std::vector<Tensor> xs;
  for (int t = 0; t < 3; ++t) xs.push_back(random_tensor({2, 3}, rng));
  std::vector<Tensor*> params = layer.parameters();
  for (auto& x : xs) params.push_back(&x);
  const std::vector<double> mask[3] = {{1, 1}, {1, 0}, {1, 0}};
  for (bool with_reset : {false, true}) {
    const double err = testing::fd_max_rel_error(
        [&](Graph& g, std::span<const Var> v) {
          const GRUVars gv{v[0], v[1], v[2], v[3], v[4], v[5], 3, 4};
          const std::vector<Var> steps = {v[6], v[7], v[8]};
          std::vector<Var> reset;
          for (const auto& m : mask) reset.push_back(g.constant({2, 1}, m));
          const auto hs = with_reset ? gru_encode(g, gv, steps, reset) : gru_encode(g, gv, steps);
          Var loss = g.scalar(0.0);
          for (std::size_t t = 0; t < hs.size(); ++t) {
            loss = g.add(loss, g.scale(g.sum(g.tanh(hs[t])), 1.0 + 0.5 * static_cast<double>(t)));
          }
          return loss;
        },
        params);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("gru rejects a mismatched input width") {
  GRULayer layer = GRULayer::zeros(3, 2);
  Graph g;
  const GRUVars v = bind(g, layer, true);
  const Var bad = g.constant({1, 2}, {0, 0});
  CHECK_THROWS_AS(gru_encode(g, v, std::span<const Var>(&bad, 1)), ShapeError);
}

TEST_CASE("linear projection") {
  Graph g;
  const Var x = g.constant({2, 2}, {1, 2, 3, 4});
  const Var id = g.constant({2, 2}, {1, 0, 0, 1});
  const Var zero_b = g.constant({1, 2}, {0, 0});
  const auto same = g.value(linear_project(g, id, zero_b, x));
  CHECK(std::vector<double>(same.begin(), same.end()) == std::vector<double>{1, 2, 3, 4});
  const Var zero_w = g.constant({2, 3}, std::vector<double>(6, 0.0));
  const auto bias = g.value(linear_project(g, zero_w, g.constant({1, 3}, {7, 8, 9}), x));
  CHECK(std::vector<double>(bias.begin(), bias.end()) == std::vector<double>{7, 8, 9, 7, 8, 9});

  Rng rng(23);
  Tensor w = random_tensor({3, 2}, rng), b = random_tensor({1, 2}, rng), xs = random_tensor({4, 3}, rng);
  const auto out = g.value(linear_project(g, g.constant(w), g.constant(b), g.constant(xs)));
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 2; ++c) {
      double ref = b.data[c];
      for (std::size_t k = 0; k < 3; ++k) ref += xs.data[r * 3 + k] * w.data[k * 2 + c];
      CHECK(out[r * 2 + c] == doctest::Approx(ref).epsilon(1e-14));
    }
  }
}

TEST_CASE("saturated keep logit is almost always selected") {
  for (double tau : {1.0, 0.5, 0.1}) CHECK(keep_frequency(20.0, -20.0, tau, 10000, 7) >= 0.999);
}

TEST_CASE("equal logits select half the time") {
  const double f = keep_frequency(0.3, 0.3, 1.0, 100000, 8);
  const double sigma = 0.5 / std::sqrt(1e5);
  CHECK(std::fabs(f - 0.5) <= 3.0 * sigma);
}

TEST_CASE("selection frequency matches a Monte-Carlo oracle") {
  // Oracle: draw two Gumbel noises per token with an unrelated generator and
  // count how often the tempered keep component exceeds one half.
  std::mt19937_64 eng(99);
  std::uniform_real_distribution<double> u(std::nextafter(0.0, 1.0), 1.0);
  auto gumbel = [&] { return -std::log(-std::log(u(eng))); };
  const std::size_t oracle_draws = 1000000;
  double hits = 0.0;
  for (std::size_t i = 0; i < oracle_draws; ++i) hits += (1.0 + gumbel()) - (0.0 + gumbel()) > 0.0;
  const double p = hits / static_cast<double>(oracle_draws);
  const std::size_t draws = 100000;
  const double f = keep_frequency(1.0, 0.0, 1.0, draws, 9);
  const double sigma = std::sqrt(p * (1 - p) * (1.0 / draws + 1.0 / oracle_draws));
  CHECK(std::fabs(f - p) <= 3.0 * sigma);
}

TEST_CASE("low temperature concentrates probabilities on the hard value") {
  Rng rng(31);
  const std::size_t n = 2000;
  std::vector<double> logits;
  for (std::size_t i = 0; i < n; ++i) {
    const double mag = rng.uniform(2.0, 6.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    logits.push_back(mag / 2);
    logits.push_back(-mag / 2);
  }
  Graph g;
  const MaskSample m = gumbel_softmax_mask(g, g.constant({n, 2}, logits),
                                           g.constant({n, 1}, std::vector<double>(n, 1.0)), 0.01,
                                           &rng);
  const auto p = g.value(m.probs);
  double gap = 0.0;
  for (std::size_t i = 0; i < n; ++i) gap += std::fabs(p[i] - m.hard[i]);
  CHECK(gap / static_cast<double>(n) < 0.05);
}

TEST_CASE("straight-through values are hard and pass gradient to logits") {
  Rng rng(37);
  const std::size_t n = 16;
  Tensor logits = random_tensor({n, 2}, rng, 1.5);
  Tensor emb = random_tensor({n, 3}, rng);
  std::vector<double> valid(n, 1.0);
  valid[n - 1] = 0.0;
  Graph g;
  const Var l = g.param(logits);
  const MaskSample m = gumbel_softmax_mask(g, l, g.constant({n, 1}, valid), 1.0, &rng);
  const auto st = g.value(m.st);
  const auto p = g.value(m.probs);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(st[i] == m.hard[i]);
    CHECK(p[i] >= 0.0);
    CHECK(p[i] <= 1.0);
  }
  CHECK(m.hard[n - 1] == 0.0);
  CHECK(p[n - 1] == 0.0);
  g.backward(g.sum(g.mask_rows(g.constant(emb), m.st)));
  const auto dp = g.grad(m.probs);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    REQUIRE(dp[i] != 0.0);
    CHECK((*logits.grad)[2 * i] != 0.0);
  }
  CHECK_THROWS(gumbel_softmax_mask(g, l, g.constant({n, 1}, valid), 0.0, &rng));
}
