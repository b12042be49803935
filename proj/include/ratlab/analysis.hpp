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

// Closed-form and brute-force checks for the instructed-predictor fixed point
// and the cross-entropy/entropy identity.
//
// Setting: a pattern r+ appears with probability p1 in positive texts and p2
// in negative ones. Once the predictor is instructed to output 0.5 on
// negative texts, its confidence f on r+ minimizes
//   L(f) = -p1 log f - 0.5 p2 (log f + log(1 - f)),
// whose stationary point is f* = 1 - p2 / (2 p1 + 2 p2).
#pragma once

#include <span>
#include <stdexcept>
#include <vector>

namespace ratlab {

/// f* = 1 - p2 / (2 p1 + 2 p2). Throws std::domain_error when p1 + p2 == 0
/// and std::invalid_argument outside [0, 1].
double fixed_point_confidence(double p1, double p2);

struct LossValue {
  double loss = 0.0;
  double derivative = 0.0;
};

/// L and dL/df, normalized per example. Throws std::domain_error unless
/// 0 < f < 1.
LossValue loss_L_and_derivative(double p1, double p2, double f);

struct ArgminResult {
  double f = 0.0;
  bool boundary = false;  // minimizer sits at a grid end; not refined
};

/// Grid search over f in {0.001, ..., 0.999} followed by golden-section
/// refinement to a bracket of width 1e-7 around the best grid point.
ArgminResult numeric_argmin_L(double p1, double p2);

struct EntropyCheck {
  double entropy = 0.0;       // H(target)
  double achieved_min = 0.0;  // H(target, q) at the end of gradient descent
  double gap = 0.0;           // KL(target || q) = achieved_min - entropy, >= 0
  std::size_t iterations = 0;
};

/// Minimizes the cross-entropy H(target, softmax(z)) by gradient descent on z
/// starting from z = 0 (uniform q). Zero-probability classes contribute
/// nothing to H(target). The gap is summed as q - t - t log(q / t) per class,
/// which is nonnegative term by term. Throws std::invalid_argument unless
/// target is a finite probability vector (entries >= 0, sum within 1e-9 of 1).
EntropyCheck min_xent_equals_entropy_check(std::span<const double> target);

}  // namespace ratlab
