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

// Building blocks shared by the generator, predictor and attacker.
//
// Sequences are processed time-major: a batch of B sequences of length T is a
// list of T tensors of shape (B x dim). A single sequence is the B == 1 case.
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ratlab/autodiff.hpp"

namespace ratlab {

/// Seeded 64-bit Mersenne Twister with distribution helpers that do not depend
/// on the standard library's implementation-defined distributions, so streams
/// are reproducible across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in the open interval (0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double gumbel();
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

/// Derives an independent stream seed from a base seed and a salt.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);

struct EmbeddingTable {
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  Tensor weights;

  /// Uniform(-0.1, 0.1) init with the padding row (index 0) at zero.
  static EmbeddingTable random(std::size_t vocab_size, std::size_t dim, Rng& rng);
  void zero_padding_row();
};

/// Embeds one time step of a batch: returns (indices.size() x dim).
Var embed_sequence(Graph& g, Var table, std::span<const std::size_t> tokens);

/// Single-layer unidirectional GRU:
///   z = sigmoid([x, h] Wz + bz)
///   r = sigmoid([x, h] Wr + br)
///   n = tanh([x, r * h] Wn + bn)
///   h' = n + z * (h - n)
struct GRULayer {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  Tensor w_update, b_update;
  Tensor w_reset, b_reset;
  Tensor w_cand, b_cand;

  /// Uniform(-1/sqrt(hidden), 1/sqrt(hidden)) init, zero biases.
  static GRULayer random(std::size_t input_dim, std::size_t hidden_dim, Rng& rng);
  static GRULayer zeros(std::size_t input_dim, std::size_t hidden_dim);
  std::vector<Tensor*> parameters();
};

struct GRUVars {
  Var w_update, b_update, w_reset, b_reset, w_cand, b_cand;
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
};

GRUVars bind(Graph& g, GRULayer& layer, bool trainable);

/// Runs the recurrence from a zero initial state. Each step is (B x input_dim);
/// returns one (B x hidden_dim) state per step.
std::vector<Var> gru_encode(Graph& g, const GRUVars& layer, std::span<const Var> steps);

/// As above, but after step t the state of row i is multiplied by
/// reset[t](i, 0). Passing the padding mask keeps the state at zero over
/// padding, which a right-to-left pass needs.
std::vector<Var> gru_encode(Graph& g, const GRUVars& layer, std::span<const Var> steps,
                            std::span<const Var> reset);

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  static Linear random(std::size_t in, std::size_t out, Rng& rng);
  std::vector<Tensor*> parameters() { return {&weight, &bias}; }
};

/// x W + b with b broadcast over rows.
Var linear_project(Graph& g, Var weight, Var bias, Var x);

/// Per-token keep/drop decision for one time step of a batch.
struct MaskSample {
  Var probs;   // (B x 1) keep probability, zero on padding
  Var st;      // (B x 1) straight-through value: forward == hard, gradient via probs
  std::vector<double> hard;  // exact 0/1 per row
  double temperature = 1.0;
};

/// Gumbel-softmax over (keep, drop) logits given as a (B x 2) tensor. `valid`
/// is a (B x 1) 0/1 constant marking non-padding rows. With a null `rng` no
/// noise is drawn, which gives the deterministic evaluation mask.
MaskSample gumbel_softmax_mask(Graph& g, Var select_logits, Var valid, double temperature,
                               Rng* rng);

}  // namespace ratlab
