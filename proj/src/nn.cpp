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

#include "ratlab/nn.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ratlab {

double Rng::uniform() {
  // 53 random mantissa bits, shifted off zero.
  return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: empty range");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::gumbel() { return -std::log(-std::log(uniform())); }

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  // splitmix64 finalizer
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

EmbeddingTable EmbeddingTable::random(std::size_t vocab_size, std::size_t dim, Rng& rng) {
  if (vocab_size == 0 || dim == 0) throw std::invalid_argument("embedding: empty table");
  EmbeddingTable t;
  t.vocab_size = vocab_size;
  t.dim = dim;
  std::vector<double> w(vocab_size * dim);
  for (auto& x : w) x = rng.uniform(-0.1, 0.1);
  t.weights = Tensor({vocab_size, dim}, std::move(w), true);
  t.zero_padding_row();
  return t;
}

void EmbeddingTable::zero_padding_row() {
  std::fill_n(weights.data.begin(), static_cast<std::ptrdiff_t>(dim), 0.0);
}

Var embed_sequence(Graph& g, Var table, std::span<const std::size_t> tokens) {
  return g.embedding(table, tokens);
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> d(shape_numel(shape));
  for (auto& x : d) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(d), true);
}

}  // namespace

GRULayer GRULayer::random(std::size_t input_dim, std::size_t hidden_dim, Rng& rng) {
  GRULayer l = zeros(input_dim, hidden_dim);
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  const std::size_t fan_in = input_dim + hidden_dim;
  l.w_update = uniform_tensor({fan_in, hidden_dim}, bound, rng);
  l.w_reset = uniform_tensor({fan_in, hidden_dim}, bound, rng);
  l.w_cand = uniform_tensor({fan_in, hidden_dim}, bound, rng);
  return l;
}

GRULayer GRULayer::zeros(std::size_t input_dim, std::size_t hidden_dim) {
  if (input_dim == 0 || hidden_dim == 0) throw std::invalid_argument("gru: zero dimension");
  GRULayer l;
  l.input_dim = input_dim;
  l.hidden_dim = hidden_dim;
  const std::size_t fan_in = input_dim + hidden_dim;
  l.w_update = Tensor::zeros({fan_in, hidden_dim}, true);
  l.w_reset = Tensor::zeros({fan_in, hidden_dim}, true);
  l.w_cand = Tensor::zeros({fan_in, hidden_dim}, true);
  l.b_update = Tensor::zeros({1, hidden_dim}, true);
  l.b_reset = Tensor::zeros({1, hidden_dim}, true);
  l.b_cand = Tensor::zeros({1, hidden_dim}, true);
  return l;
}

std::vector<Tensor*> GRULayer::parameters() {
  return {&w_update, &b_update, &w_reset, &b_reset, &w_cand, &b_cand};
}

GRUVars bind(Graph& g, GRULayer& layer, bool trainable) {
  GRUVars v;
  v.w_update = g.param(layer.w_update, trainable);
  v.b_update = g.param(layer.b_update, trainable);
  v.w_reset = g.param(layer.w_reset, trainable);
  v.b_reset = g.param(layer.b_reset, trainable);
  v.w_cand = g.param(layer.w_cand, trainable);
  v.b_cand = g.param(layer.b_cand, trainable);
  v.input_dim = layer.input_dim;
  v.hidden_dim = layer.hidden_dim;
  return v;
}

std::vector<Var> gru_encode(Graph& g, const GRUVars& layer, std::span<const Var> steps) {
  return gru_encode(g, layer, steps, {});
}

std::vector<Var> gru_encode(Graph& g, const GRUVars& layer, std::span<const Var> steps,
                            std::span<const Var> reset) {
  if (!reset.empty() && reset.size() != steps.size()) {
    throw ShapeError("gru_encode: " + std::to_string(reset.size()) + " reset columns for " +
                     std::to_string(steps.size()) + " steps");
  }
  std::vector<Var> states;
  if (steps.empty()) return states;
  states.reserve(steps.size());
  const Shape first = g.shape(steps[0]);
  const std::size_t batch = first.size() == 2 ? first[0] : 1;
  Var h = g.constant({batch, layer.hidden_dim}, std::vector<double>(batch * layer.hidden_dim));
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const Var x = steps[t];
    const Shape s = g.shape(x);
    if (s.empty() || s.back() != layer.input_dim) {
      throw ShapeError("gru_encode: step shape " + shape_str(s) + " does not match input_dim " +
                       std::to_string(layer.input_dim));
    }
    const std::array<Var, 2> xh_parts{x, h};
    const Var xh = g.concat_last(xh_parts);
    const Var z = g.sigmoid(g.add(g.matmul(xh, layer.w_update), layer.b_update));
    const Var r = g.sigmoid(g.add(g.matmul(xh, layer.w_reset), layer.b_reset));
    const std::array<Var, 2> xrh_parts{x, g.mul(r, h)};
    const Var n = g.tanh(g.add(g.matmul(g.concat_last(xrh_parts), layer.w_cand), layer.b_cand));
    h = g.add(n, g.mul(z, g.sub(h, n)));
    if (!reset.empty()) h = g.mask_rows(h, reset[t]);
    states.push_back(h);
  }
  return states;
}

Linear Linear::random(std::size_t in, std::size_t out, Rng& rng) {
  Linear l;
  l.weight = uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  l.bias = Tensor::zeros({1, out}, true);
  return l;
}

Var linear_project(Graph& g, Var weight, Var bias, Var x) {
  return g.add(g.matmul(x, weight), bias);
}

MaskSample gumbel_softmax_mask(Graph& g, Var select_logits, Var valid, double temperature,
                               Rng* rng) {
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("gumbel_softmax_mask: temperature must be positive, got " +
                                std::to_string(temperature));
  }
  const Shape s = g.shape(select_logits);
  if (s.size() != 2 || s[1] != 2) {
    throw ShapeError("gumbel_softmax_mask: expected (B x 2) logits, got " + shape_str(s));
  }
  const std::size_t batch = s[0];
  // softmax([k, d] / tau)[keep] == sigmoid((k - d) / tau)
  Var diff = g.matmul(select_logits, g.constant({2, 1}, {1.0, -1.0}));
  if (rng) {
    std::vector<double> noise(batch);
    for (auto& e : noise) {
      const double keep = rng->gumbel();
      const double drop = rng->gumbel();
      e = keep - drop;
    }
    diff = g.add(diff, g.constant({batch, 1}, std::move(noise)));
  }
  MaskSample m;
  m.temperature = temperature;
  m.probs = g.mask_rows(g.sigmoid(g.scale(diff, 1.0 / temperature)), valid);
  const auto p = g.value(m.probs);
  m.hard.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) m.hard[i] = p[i] > 0.5 ? 1.0 : 0.0;
  // p + (hard - p) is exact for hard in {0, 1} on the side of 0.5 p lies on.
  const Var hard = g.constant({batch, 1}, m.hard);
  m.st = g.add(m.probs, g.stop_gradient(g.sub(hard, m.probs)));
  return m;
}

}  // namespace ratlab
