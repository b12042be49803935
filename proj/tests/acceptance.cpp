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

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.
//
//   acceptance [--only N ...] [--workers N]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "ratlab/analysis.hpp"
#include "ratlab/experiments.hpp"
#include "ratlab/metrics.hpp"
#include "ratlab/rationalizer.hpp"
#include "support/random_graphs.hpp"
#include "support/temp_dir.hpp"

using namespace ratlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::size_t g_workers = 1;

// 1. Autodiff against central differences on random graphs.
Outcome autodiff_gradients() {
  constexpr double kTol = 1e-4, kBudget = 30.0;
  const Timer t;
  const auto sweep = testing::run_random_graph_sweep(50, 20260101);
  const double secs = t.seconds();
  std::size_t missing = 0;
  for (OpKind op : testing::covered_ops()) missing += sweep.ops_seen.count(op) == 0;
  missing += sweep.ops_seen.count(OpKind::kLeaf) == 0;
  missing += sweep.ops_seen.count(OpKind::kConstant) == 0;
  return {sweep.max_rel_error <= kTol && missing == 0 && secs < kBudget,
          "50 graphs, max rel error " + fmt(sweep.max_rel_error) + " (<= 1e-4), op kinds missing " +
              std::to_string(missing) + ", " + fmt(secs, 3) + " s (< 30 s)"};
}

// 2. Hand-computed regularizer and token-overlap values.
Outcome unit_values() {
  constexpr double kTol = 1e-12;
  std::vector<double> two(10, 0.0);
  two[0] = two[1] = 1.0;
  std::vector<double> alt(10);
  for (std::size_t i = 0; i < alt.size(); ++i) alt[i] = i % 2 == 0 ? 1.0 : 0.0;
  const double o1 = omega_penalty(two, 0.2, 1.0, 1.0);
  const double o2 = omega_penalty(alt, 0.5, 1.0, 1.0);
  const double o3 = omega_penalty(std::vector<double>(10, 0.0), 0.1, 2.0, 5.0);
  MaskRows gold = {std::vector<double>(10, 0.0)}, pred = gold;
  for (std::size_t i : {3, 4, 5}) gold[0][i] = 1.0;
  for (std::size_t i : {4, 5, 6}) pred[0][i] = 1.0;
  const PRF prf = token_prf(pred, gold);
  const bool ok = std::abs(o1 - 1.0) <= kTol && std::abs(o2 - 9.0) <= kTol &&
                  std::abs(o3 - 0.2) <= kTol && std::abs(prf.precision - 2.0 / 3.0) <= kTol &&
                  std::abs(prf.recall - 2.0 / 3.0) <= kTol && std::abs(prf.f1 - 2.0 / 3.0) <= kTol;
  return {ok, "omega " + fmt(o1, 17) + ", " + fmt(o2, 17) + ", " + fmt(o3, 17) + "; P/R/F1 " +
                  fmt(prf.precision, 17) + ", " + fmt(prf.recall, 17) + ", " + fmt(prf.f1, 17)};
}

// 3. Closed-form fixed point against the numeric minimizer.
Outcome fixed_point() {
  const Timer t;
  const FixedPointSweep s = fixed_point_sweep(100);
  const double secs = t.seconds();
  const bool ok = s.max_gap <= 1e-5 && s.bound_holds && s.min_f_star >= 0.75 &&
                  s.max_equal_case_deviation <= 1e-12 && secs < 10.0;
  return {ok, "100x100 grid, max |closed - numeric| " + fmt(s.max_gap) + " (<= 1e-5), min f* " +
                  fmt(s.min_f_star, 10) + " (>= 0.75), equal-case deviation " +
                  fmt(s.max_equal_case_deviation) + ", " + fmt(secs, 3) + " s (< 10 s)"};
}

// 4. Minimized cross-entropy equals the entropy.
Outcome entropy_identity() {
  Rng rng(4242);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const std::size_t n = 2 + rng.below(9);
    std::vector<double> target(n);
    double total = 0.0;
    for (double& v : target) total += (v = -std::log(rng.uniform()));
    for (double& v : target) v /= total;
    const EntropyCheck c = min_xent_equals_entropy_check(target);
    worst = std::max(worst, std::abs(c.achieved_min - c.entropy));
  }
  return {worst <= 1e-4, "20 random targets, max |min H(t, q) - H(t)| " + fmt(worst) + " (<= 1e-4)"};
}

// 5. Selections of a sparsity-only generator carry label information.
Outcome random_pattern_gap() {
  RunConfig c;
  c.workers = g_workers;
  c.output_dir = fs::temp_directory_path() / "ratlab_acceptance_figure3";
  const Timer t;
  const auto seeds = cmd_figure3(c);
  const double secs = t.seconds();
  std::size_t gap_ok = 0, probe_ok = 0;
  std::string per_seed;
  for (const auto& s : seeds) {
    gap_ok += s.final_gap() >= 0.2;
    probe_ok += s.max_probe_deviation > 0.15;
    per_seed += " " + fmt(s.final_gap(), 3) + "/" + fmt(s.max_probe_deviation, 3);
  }
  fs::remove_all(c.output_dir);
  return {gap_ok >= 4 && probe_ok >= 4 && secs < 600.0,
          "gap >= 0.2 in " + std::to_string(gap_ok) + "/5 seeds, probe > 0.15 in " +
              std::to_string(probe_ok) + "/5 (gap/probe per seed:" + per_seed + "), " +
              fmt(secs, 4) + " s (< 600 s)"};
}

// 6. Attack success with and without instruction.
Outcome attack_success() {
  RunConfig c;
  c.workers = g_workers;
  c.output_dir = fs::temp_directory_path() / "ratlab_acceptance_asr";
  const Timer t;
  const auto seeds = cmd_asr_curve(c);
  const double secs = t.seconds();
  std::size_t ok = 0;
  std::string per_seed;
  for (const auto& s : seeds) {
    ok += s.observer_tail_mean > 0.7 && s.a2i_tail_mean >= 0.4 && s.a2i_tail_mean <= 0.6;
    per_seed += " " + fmt(s.observer_tail_mean, 3) + "/" + fmt(s.a2i_tail_mean, 3);
  }
  fs::remove_all(c.output_dir);
  return {ok >= 4 && secs < 900.0,
          "observer > 0.7 and A2I in [0.4, 0.6] in " + std::to_string(ok) +
              "/5 seeds (observer/A2I per seed:" + per_seed + "), " + fmt(secs, 4) +
              " s (< 900 s)"};
}

// 7. Rationale quality direction and sparsity control.
Outcome compare_direction() {
  RunConfig c;
  c.workers = g_workers;
  c.output_dir = fs::temp_directory_path() / "ratlab_acceptance_compare";
  const Timer t;
  const CompareResult r = cmd_compare(c);
  const double secs = t.seconds();
  std::map<Variant, CompareRow> rows;
  for (const auto& row : r.rows) rows[row.variant] = row;
  const double s = c.train.sparsity;
  bool sparsity_ok = true;
  std::string detail;
  for (const auto& row : r.rows) {
    sparsity_ok = sparsity_ok && std::abs(row.dev_sparsity_mean - s) <= 0.05;
    detail += " " + std::string(to_string(row.variant)) + " F1 " + fmt(row.best_dev_f1_mean) +
              " S " + fmt(row.dev_sparsity_mean, 3) + ";";
  }
  const bool rnp_ok = rows[Variant::kRnpA2I].best_dev_f1_mean >= rows[Variant::kRnp].best_dev_f1_mean;
  const bool se_ok = rows[Variant::kSharedEncoderA2I].best_dev_f1_mean >=
                     rows[Variant::kSharedEncoder].best_dev_f1_mean;
  fs::remove_all(c.output_dir);
  return {rnp_ok && se_ok && sparsity_ok && secs < 1800.0,
          "5 seeds," + detail + " |S - " + fmt(s) + "| <= 0.05: " + (sparsity_ok ? "yes" : "no") +
              ", " + fmt(secs, 4) + " s (< 1800 s)"};
}

// 8. Alternation contracts and rerun identity.
using DirContents = std::map<std::string, std::string>;

DirContents contents(const fs::path& dir) {
  DirContents out;
  for (const auto& e : fs::directory_iterator(dir)) {
    out[e.path().filename().string()] = testing::read_file(e.path());
  }
  return out;
}

std::vector<std::vector<double>> values(const std::vector<Tensor*>& ts) {
  std::vector<std::vector<double>> out;
  for (const Tensor* t : ts) out.push_back(t->data);
  return out;
}

bool no_grad(const std::vector<Tensor*>& ts) {
  for (const Tensor* t : ts) {
    if (t->grad && std::any_of(t->grad->begin(), t->grad->end(), [](double g) { return g != 0.0; })) {
      return false;
    }
  }
  return true;
}

Outcome procedure_contracts() {
  RunConfig base;
  base.apply_text(R"(
    n_train = 128
    n_dev = 64
    n_test = 64
    epochs = 2
    n_seeds = 5
    asr_window = 2
    probe_min_support = 5
  )");
  std::vector<std::string> failures;

  // Frozen players and the instruction gradient, at the default model size.
  const Corpus corpus = load_corpus(base);
  const Batch batch = Batch::from(std::span<const Example>(corpus.train).first(base.train.batch_size));
  for (Variant v : {Variant::kRnpA2I, Variant::kSharedEncoderA2I, Variant::kA2INoInstruction}) {
    TrainConfig tc = base.train;
    tc.variant = v;
    Players players = Players::init(tc, corpus.vocab.size());
    Trainer trainer(players, tc);
    Rng rng(17);
    const auto attacker = players.attacker_parameters();
    const auto main = players.generator_predictor_parameters();
    for (int k = 0; k < 3; ++k) {
      const auto a_before = values(attacker);
      // Clear what the previous attacker step accumulated.
      for (Tensor* t : attacker) t->zero_grad();
      train_step_main(players, trainer, batch, tc, rng);
      if (values(attacker) != a_before || !no_grad(attacker)) {
        failures.push_back(std::string(to_string(v)) + " main step touched the attacker");
      }
      const auto m_before = values(main);
      train_step_attacker(players, trainer, batch, tc, rng);
      if (values(main) != m_before) {
        failures.push_back(std::string(to_string(v)) + " attacker step touched generator/predictor");
      }
    }
    if (has_instruction(v)) {
      for (Tensor* t : attacker) t->zero_grad();
      Graph g;
      const Selection sel = select_tokens(g, *players.attacker, batch, true, tc.temperature, &rng);
      std::vector<Var> detached;
      for (const auto& s : sel.steps) detached.push_back(g.stop_gradient(s.st));
      const Var probs = predict(g, players.predictor, batch, detached, true);
      g.backward(cross_entropy(g, probs, uniform_rows(batch.size, tc.n_classes)));
      if (!no_grad(attacker)) failures.push_back(std::string(to_string(v)) + " instruction reached the attacker");
    }
  }

  // Every command twice into the same directory: byte-identical outputs.
  const testing::TempDir dir("acceptance_rerun");
  const std::vector<std::pair<std::string, std::function<void(const RunConfig&)>>> commands = {
      {"gen_data", [](const RunConfig& c) { cmd_gen_data(c); }},
      {"train", [](const RunConfig& c) { cmd_train(c); }},
      {"analyze", [](const RunConfig& c) { cmd_analyze(c); }},
      {"figure3", [](const RunConfig& c) { cmd_figure3(c); }},
      {"asr_curve", [](const RunConfig& c) { cmd_asr_curve(c); }},
      {"compare", [](const RunConfig& c) { cmd_compare(c); }},
  };
  for (const auto& [name, run] : commands) {
    RunConfig c = base;
    c.set("experiment", name);
    c.workers = g_workers;
    c.output_dir = dir / name;
    if (name == "train") c.set("variant", "rnp_a2i");
    if (name == "analyze") {
      c.set("variant", "rnp_a2i");
      cmd_train(c);
    }
    run(c);
    const DirContents first = contents(c.output_dir);
    run(c);
    if (contents(c.output_dir) != first) failures.push_back(name + " rerun differs");
  }

  std::string detail = "frozen-player and instruction-gradient checks on 3 attacker variants; "
                       "rerun identity for gen_data, train, analyze, figure3, asr_curve, compare";
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ratlab acceptance checks"};
  std::vector<int> only;
  g_workers = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_option("--workers", g_workers, "concurrent runs in seed sweeps")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, Outcome (*)()>> criteria = {
      {"autodiff gradients", autodiff_gradients},
      {"regularizer and metric unit values", unit_values},
      {"fixed-point oracle", fixed_point},
      {"cross-entropy minimum equals entropy", entropy_identity},
      {"random-pattern selections carry the label", random_pattern_gap},
      {"attack success with and without instruction", attack_success},
      {"rationale F1 direction and sparsity", compare_direction},
      {"procedure contracts", procedure_contracts},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s (%s)\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first,
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
