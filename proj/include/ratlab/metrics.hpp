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

// Evaluation quantities. Masks are per-example 0/1 sequences; class
// distributions are per-example rows. Argmax ties go to the lowest class.
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ratlab {

using MaskRows = std::vector<std::vector<double>>;
using ProbRows = std::vector<std::vector<double>>;

struct MetricsRecord {
  std::size_t epoch = 0;
  std::string split;
  double acc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double sparsity = 0.0;
  std::optional<double> asr;
};

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

double f1_of(double precision, double recall);

/// Micro-averaged token overlap. Each pair of rows must have equal length;
/// positions past `lengths[i]` (when given) are padding and ignored.
PRF token_prf(const MaskRows& pred, const MaskRows& gold,
              std::span<const std::size_t> lengths = {});

/// Mean over examples of selected / non-padding length.
double sparsity_of(const MaskRows& masks, std::span<const std::size_t> lengths = {});

std::size_t argmax(std::span<const double> row);

double accuracy_of(const ProbRows& predictions, std::span<const std::size_t> labels);

/// Fraction of rows whose argmax hits the attack target. `labels` is only used
/// to check alignment.
double attack_success_rate(const ProbRows& attack_predictions,
                           std::span<const std::size_t> labels,
                           std::span<const std::size_t> targets);

struct CooccurrenceProbe {
  std::optional<double> p_cond;  // empty when the pattern was never selected
  double p_marginal = 0.0;
  std::size_t n_selected = 0;
  std::size_t n_selected_positive = 0;
  std::size_t n_total = 0;
  std::size_t n_positive = 0;

  /// Binomial standard error of p_cond under p_marginal.
  double sigma() const;
};

/// Estimates P(Y=1 | pattern selected) against P(Y=1). An example counts as
/// selecting the pattern when any position holding `pattern_token` is masked in.
CooccurrenceProbe cooccurrence_probe(const MaskRows& selections,
                                     const std::vector<std::vector<std::size_t>>& tokens,
                                     std::span<const std::size_t> labels,
                                     std::size_t pattern_token);

}  // namespace ratlab
