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

#include "ratlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ratlab {

namespace {

constexpr double kGridStep = 1e-3;
constexpr std::size_t kGridPoints = 999;  // 0.001 .. 0.999
constexpr double kGoldenTol = 1e-7;

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw std::invalid_argument(std::string(name) + " must be in [0, 1], got " + std::to_string(p));
  }
}

double loss_only(double p1, double p2, double f) {
  return -p1 * std::log(f) - 0.5 * p2 * (std::log(f) + std::log1p(-f));
}

}  // namespace

double fixed_point_confidence(double p1, double p2) {
  check_probability(p1, "p1");
  check_probability(p2, "p2");
  if (p1 + p2 == 0.0) throw std::domain_error("fixed_point_confidence: p1 + p2 == 0");
  return 1.0 - p2 / (2.0 * p1 + 2.0 * p2);
}

LossValue loss_L_and_derivative(double p1, double p2, double f) {
  if (!(f > 0.0 && f < 1.0)) {
    throw std::domain_error("loss_L_and_derivative: f must be in (0, 1), got " + std::to_string(f));
  }
  LossValue v;
  v.loss = loss_only(p1, p2, f);
  v.derivative = -(p1 + 0.5 * p2) / f + 0.5 * p2 / (1.0 - f);
  return v;
}

ArgminResult numeric_argmin_L(double p1, double p2) {
  check_probability(p1, "p1");
  check_probability(p2, "p2");
  if (p1 + p2 == 0.0) throw std::domain_error("numeric_argmin_L: p1 + p2 == 0");
  auto grid = [](std::size_t k) { return static_cast<double>(k + 1) * kGridStep; };
  std::size_t best = 0;
  double best_loss = loss_only(p1, p2, grid(0));
  for (std::size_t k = 1; k < kGridPoints; ++k) {
    const double l = loss_only(p1, p2, grid(k));
    if (l < best_loss) {
      best_loss = l;
      best = k;
    }
  }
  if (best == 0 || best + 1 == kGridPoints) return {grid(best), true};

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = grid(best - 1), b = grid(best + 1);
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = loss_only(p1, p2, c), fd = loss_only(p1, p2, d);
  while (b - a > kGoldenTol) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = loss_only(p1, p2, c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = loss_only(p1, p2, d);
    }
  }
  return {0.5 * (a + b), false};
}

EntropyCheck min_xent_equals_entropy_check(std::span<const double> target) {
  if (target.empty()) throw std::invalid_argument("target distribution is empty");
  double total = 0.0;
  for (double t : target) {
    if (!std::isfinite(t) || t < 0.0) {
      throw std::invalid_argument("target distribution has an invalid entry " + std::to_string(t));
    }
    total += t;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("target distribution sums to " + std::to_string(total));
  }

  const std::size_t n = target.size();
  EntropyCheck r;
  for (double t : target) {
    if (t > 0.0) r.entropy -= t * std::log(t);
  }

  std::vector<double> z(n, 0.0), q(n);
  auto softmax = [&] {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += (q[i] = std::exp(z[i] - m));
    for (double& v : q) v /= s;
  };
  constexpr double kStep = 1.0;
  constexpr std::size_t kMaxIter = 2'000'000;
  constexpr double kGradTol = 1e-9;
  softmax();
  for (r.iterations = 0; r.iterations < kMaxIter; ++r.iterations) {
    // d/dz H(t, softmax(z)) = q - t.
    double g_max = 0.0;
    for (std::size_t i = 0; i < n; ++i) g_max = std::max(g_max, std::abs(q[i] - target[i]));
    if (g_max < kGradTol) break;
    for (std::size_t i = 0; i < n; ++i) z[i] -= kStep * (q[i] - target[i]);
    softmax();
  }

  for (std::size_t i = 0; i < n; ++i) {
    const double t = target[i];
    if (t > 0.0) {
      const double d = q[i] / t - 1.0;
      r.gap += t * (d - std::log1p(d));
    } else {
      r.gap += q[i];
    }
  }
  // H(t, q) = H(t) + KL(t || q); summing it this way keeps rounding from
  // placing the achieved value below the entropy.
  r.achieved_min = r.entropy + r.gap;
  return r;
}

}  // namespace ratlab
