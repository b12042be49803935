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
#include <stdexcept>
#include <vector>

#include <doctest.h>

#include "ratlab/analysis.hpp"
#include "ratlab/experiments.hpp"
#include "ratlab/nn.hpp"

using namespace ratlab;

namespace {

// Independent evaluation of the per-example loss for the oracle checks.
double loss_direct(double p1, double p2, double f) {
  return -p1 * std::log(f) - 0.5 * p2 * (std::log(f) + std::log(1.0 - f));
}

double entropy_direct(const std::vector<double>& t) {
  double h = 0.0;
  for (double x : t) {
    if (x > 0) h -= x * std::log(x);
  }
  return h;
}

}  // namespace

TEST_CASE("fixed point closed form") {
  for (double p : {0.01, 0.3, 0.5, 1.0}) CHECK(fixed_point_confidence(p, p) == 0.75);
  CHECK(fixed_point_confidence(0.6, 0.0) == 1.0);
  CHECK(fixed_point_confidence(0.8, 0.4) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK_THROWS_AS(fixed_point_confidence(0.0, 0.0), std::domain_error);
  CHECK_THROWS_AS(fixed_point_confidence(1.2, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(fixed_point_confidence(0.5, -0.1), std::invalid_argument);
}

TEST_CASE("loss and derivative") {
  const double p1 = 0.7, p2 = 0.2;
  const LossValue at_star = loss_L_and_derivative(p1, p2, fixed_point_confidence(p1, p2));
  CHECK(std::fabs(at_star.derivative) < 1e-10);
  CHECK(loss_L_and_derivative(p1, p2, 0.5).derivative < 0.0);
  for (double f : {0.1, 0.5, 0.9}) {
    const LossValue v = loss_L_and_derivative(0.4, 0.0, f);
    CHECK(v.derivative == doctest::Approx(-0.4 / f).epsilon(1e-14));
    CHECK(v.loss == doctest::Approx(loss_direct(0.4, 0.0, f)).epsilon(1e-14));
  }
  CHECK_THROWS_AS(loss_L_and_derivative(p1, p2, 0.0), std::domain_error);
  CHECK_THROWS_AS(loss_L_and_derivative(p1, p2, 1.0), std::domain_error);
}

TEST_CASE("derivative matches a central difference of the loss") {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const double p1 = rng.uniform(0.01, 1.0), p2 = rng.uniform(0.0, 1.0);
    const double f = rng.uniform(0.05, 0.95), h = 1e-6;
    const double numeric = (loss_direct(p1, p2, f + h) - loss_direct(p1, p2, f - h)) / (2 * h);
    const double analytic = loss_L_and_derivative(p1, p2, f).derivative;
    CHECK(std::fabs(analytic - numeric) / std::max(1.0, std::fabs(numeric)) <= 1e-6);
  }
}

TEST_CASE("numeric minimizer agrees with the closed form") {
  CHECK(numeric_argmin_L(0.5, 0.5).f == doctest::Approx(0.75).epsilon(1e-6));
  const ArgminResult edge = numeric_argmin_L(1.0, 0.0);
  CHECK(edge.boundary);
  CHECK(edge.f == doctest::Approx(0.999).epsilon(1e-12));
  CHECK(numeric_argmin_L(0.8, 0.4).f == doctest::Approx(5.0 / 6.0).epsilon(1e-6));

  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    double p1 = rng.uniform(0.01, 1.0), p2 = rng.uniform(0.01, 1.0);
    if (p1 < p2) std::swap(p1, p2);
    const ArgminResult r = numeric_argmin_L(p1, p2);
    CHECK_FALSE(r.boundary);
    CHECK(std::fabs(r.f - fixed_point_confidence(p1, p2)) < 1e-5);
  }
}

TEST_CASE("fixed point sweep over the interior grid") {
  const FixedPointSweep s = fixed_point_sweep(100);
  CHECK(s.max_gap <= 1e-5);
  CHECK(s.bound_holds);
  CHECK(s.min_f_star >= 0.75);
  CHECK(s.max_equal_case_deviation == 0.0);
}

TEST_CASE("minimum cross-entropy equals entropy") {
  const EntropyCheck half = min_xent_equals_entropy_check(std::vector<double>{0.5, 0.5});
  CHECK(half.entropy == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(half.gap < 1e-6);

  const EntropyCheck corner = min_xent_equals_entropy_check(std::vector<double>{1.0, 0.0});
  CHECK(corner.entropy == 0.0);
  CHECK(corner.gap < 1e-4);

  const EntropyCheck skew = min_xent_equals_entropy_check(std::vector<double>{0.3, 0.7});
  CHECK(skew.entropy == doctest::Approx(entropy_direct({0.3, 0.7})).epsilon(1e-14));
  CHECK(skew.entropy == doctest::Approx(0.6109).epsilon(1e-4));
  CHECK(skew.gap < 1e-6);

  Rng rng(77);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> t(2 + rng.below(4));
    double total = 0;
    for (auto& x : t) total += (x = rng.uniform());
    for (auto& x : t) x /= total;
    const EntropyCheck r = min_xent_equals_entropy_check(t);
    CHECK(r.entropy == doctest::Approx(entropy_direct(t)).epsilon(1e-12));
    CHECK(r.gap >= 0.0);
    CHECK(r.gap < 1e-4);
    CHECK(r.achieved_min >= r.entropy);
  }
}

TEST_CASE("invalid targets are rejected") {
  CHECK_THROWS_AS(min_xent_equals_entropy_check(std::vector<double>{0.5, 0.6}), std::invalid_argument);
  CHECK_THROWS_AS(min_xent_equals_entropy_check(std::vector<double>{-0.1, 1.1}), std::invalid_argument);
  CHECK_THROWS_AS(min_xent_equals_entropy_check(std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(min_xent_equals_entropy_check(std::vector<double>{NAN, 1.0}), std::invalid_argument);
}
