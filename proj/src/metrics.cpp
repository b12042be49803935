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

#include "ratlab/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace ratlab {

namespace {

void check_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": length mismatch (" + std::to_string(a) +
                                " vs " + std::to_string(b) + ")");
  }
}

std::size_t effective_len(const std::vector<double>& row, std::span<const std::size_t> lengths,
                          std::size_t i) {
  return lengths.empty() ? row.size() : std::min(row.size(), lengths[i]);
}

}  // namespace

double f1_of(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

PRF token_prf(const MaskRows& pred, const MaskRows& gold, std::span<const std::size_t> lengths) {
  check_aligned(pred.size(), gold.size(), "token_prf");
  if (!lengths.empty()) check_aligned(pred.size(), lengths.size(), "token_prf");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    check_aligned(pred[i].size(), gold[i].size(), "token_prf");
    const std::size_t n = effective_len(pred[i], lengths, i);
    for (std::size_t t = 0; t < n; ++t) {
      const bool p = pred[i][t] > 0.5, g = gold[i][t] > 0.5;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
    }
  }
  PRF r;
  r.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  r.f1 = f1_of(r.precision, r.recall);
  return r;
}

double sparsity_of(const MaskRows& masks, std::span<const std::size_t> lengths) {
  if (masks.empty()) throw std::invalid_argument("sparsity_of: no masks");
  if (!lengths.empty()) check_aligned(masks.size(), lengths.size(), "sparsity_of");
  double total = 0.0;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const std::size_t n = effective_len(masks[i], lengths, i);
    if (n == 0) continue;
    double sel = 0.0;
    for (std::size_t t = 0; t < n; ++t) sel += masks[i][t] > 0.5;
    total += sel / static_cast<double>(n);
  }
  return total / static_cast<double>(masks.size());
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

double accuracy_of(const ProbRows& predictions, std::span<const std::size_t> labels) {
  check_aligned(predictions.size(), labels.size(), "accuracy_of");
  if (predictions.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += argmax(predictions[i]) == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double attack_success_rate(const ProbRows& attack_predictions, std::span<const std::size_t> labels,
                           std::span<const std::size_t> targets) {
  check_aligned(attack_predictions.size(), targets.size(), "attack_success_rate");
  check_aligned(labels.size(), targets.size(), "attack_success_rate");
  if (targets.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) hit += argmax(attack_predictions[i]) == targets[i];
  return static_cast<double>(hit) / static_cast<double>(targets.size());
}

double CooccurrenceProbe::sigma() const {
  if (n_selected == 0) return 0.0;
  return std::sqrt(p_marginal * (1.0 - p_marginal) / static_cast<double>(n_selected));
}

CooccurrenceProbe cooccurrence_probe(const MaskRows& selections,
                                     const std::vector<std::vector<std::size_t>>& tokens,
                                     std::span<const std::size_t> labels,
                                     std::size_t pattern_token) {
  check_aligned(selections.size(), tokens.size(), "cooccurrence_probe");
  check_aligned(selections.size(), labels.size(), "cooccurrence_probe");
  CooccurrenceProbe p;
  p.n_total = labels.size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    check_aligned(selections[i].size(), tokens[i].size(), "cooccurrence_probe");
    const bool positive = labels[i] == 1;
    p.n_positive += positive;
    bool hit = false;
    for (std::size_t t = 0; t < tokens[i].size() && !hit; ++t) {
      hit = tokens[i][t] == pattern_token && selections[i][t] > 0.5;
    }
    if (hit) {
      ++p.n_selected;
      p.n_selected_positive += positive;
    }
  }
  if (p.n_total > 0) p.p_marginal = static_cast<double>(p.n_positive) / static_cast<double>(p.n_total);
  if (p.n_selected > 0) {
    p.p_cond = static_cast<double>(p.n_selected_positive) / static_cast<double>(p.n_selected);
  }
  return p;
}

}  // namespace ratlab
