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

// Experiment harness behind the command-line tool.
//
// Config file: UTF-8 text, one "key = value" per line; '#' starts a comment;
// blank lines are ignored. Keys are the ones listed by RunConfig::keys().
// Command-line flags of the same name override file values.
//
// Every command is deterministic given its config. Seed sweeps use
// seed, seed + 1, ..., seed + n_seeds - 1 and are assembled in that order
// regardless of how many workers ran them.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ratlab/metrics.hpp"
#include "ratlab/rationalizer.hpp"
#include "ratlab/synthcorpus.hpp"

namespace ratlab {

/// Bad key, bad value or inconsistent settings. Maps to exit code 1.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConfigKey {
  std::string name;
  std::string help;
};

struct RunConfig {
  CorpusSpec corpus;
  TrainConfig train;
  std::filesystem::path output_dir = "runs";
  std::filesystem::path data_dir;  // empty: generate the corpus from the corpus keys
  std::filesystem::path checkpoint;  // empty: <output_dir>/checkpoint.json
  std::size_t n_seeds = 5;
  std::size_t workers = 1;
  std::string experiment = "train";
  std::size_t probe_min_support = 30;
  std::size_t asr_window = 10;  // trailing epochs averaged by asr-curve

  RunConfig();

  static const std::vector<ConfigKey>& keys();

  /// Sets one key from its text form. Throws ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// Applies "key = value" lines. Throws ConfigError naming the line.
  void apply_text(const std::string& text, const std::string& origin = "config");
  void apply_file(const std::filesystem::path& path);

  /// All keys in documented order, in a form apply_text accepts.
  std::string to_text() const;

  std::filesystem::path checkpoint_path() const;
};

/// Formats a double in shortest round-trip form.
std::string format_double(double v);

/// One row per record: epoch,split,acc,precision,recall,f1,sparsity,asr.
/// asr is empty for variants without an attacker.
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r);
std::vector<MetricsRecord> parse_metrics_csv(const std::string& text);

/// Reads the corpus from data_dir, or generates it from the corpus keys.
Corpus load_corpus(const RunConfig& config);

// ---------------------------------------------------------------------------
// Commands. Each writes its outputs under config.output_dir and returns the
// numbers it wrote.

struct GenDataResult {
  std::size_t n_train = 0, n_dev = 0, n_test = 0;
};
GenDataResult cmd_gen_data(const RunConfig& config);

struct TrainRunResult {
  std::vector<MetricsRecord> history;
  std::size_t best_epoch = 0;
  double best_dev_f1 = 0.0;
  MetricsRecord test;  // best-dev snapshot on the test split
};
/// Writes metrics.csv (flushed after every epoch, so a divergence leaves the
/// completed epochs on disk), checkpoint.json and config.txt.
TrainRunResult cmd_train(const RunConfig& config);

/// Per-seed outcome of the three-predictor experiment.
struct Figure3Seed {
  std::uint64_t seed = 0;
  // Indexed by epoch - 1.
  std::vector<double> full_train_acc, full_dev_acc;
  std::vector<double> random_train_acc, random_dev_acc;
  std::vector<double> r2f_train_acc, r2f_dev_acc;
  bool full_text_frozen = false;  // full-text parameters unchanged by the r2f pass
  std::vector<CooccurrenceProbe> probes;  // one per trivial token, final-epoch train selections
  std::vector<std::size_t> probe_tokens;
  /// Largest |p_cond - p_marginal| over trivial tokens with at least
  /// probe_min_support selections; 0 when none qualifies.
  double max_probe_deviation = 0.0;
  std::optional<std::size_t> max_probe_token;

  double final_gap() const;  // random_train_acc - r2f_train_acc at the last epoch
};

/// Trains, per seed: a predictor on full text (all-ones mask); a
/// sparsity-only generator with its predictor; then feeds the second run's
/// selections to the first predictor. Selections for all three curves are
/// sampled the same way the generator samples them in training, since a
/// generator trained only for sparsity has no deterministic preference.
/// Writes figure3.csv (seed,epoch,curve,split,acc), figure3_probe.csv and
/// figure3_report.txt.
std::vector<Figure3Seed> cmd_figure3(const RunConfig& config);

struct AsrCurveSeed {
  std::uint64_t seed = 0;
  std::vector<double> observer_asr;  // a2i_no_instruction, dev, per epoch
  std::vector<double> a2i_asr;       // rnp_a2i, dev, per epoch
  bool identical_start = false;      // same initial generator/predictor parameters
  double observer_tail_mean = 0.0;
  double a2i_tail_mean = 0.0;
};
/// Writes asr_curve.csv (seed,epoch,variant,asr) and asr_curve_report.txt.
std::vector<AsrCurveSeed> cmd_asr_curve(const RunConfig& config);

struct CompareRun {
  Variant variant = Variant::kRnp;
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  double best_dev_f1 = 0.0;
  double train_sparsity = 0.0;  // final epoch, training-time masks
  MetricsRecord dev;             // best snapshot on dev
  MetricsRecord test;            // best snapshot on test
};
struct CompareRow {
  Variant variant = Variant::kRnp;
  std::size_t n_runs = 0;
  double best_dev_f1_mean = 0.0, best_dev_f1_std = 0.0;
  double dev_sparsity_mean = 0.0, dev_sparsity_std = 0.0;
  double train_sparsity_mean = 0.0, train_sparsity_std = 0.0;
  double test_acc_mean = 0.0, test_acc_std = 0.0;
  double test_f1_mean = 0.0, test_f1_std = 0.0;
  double test_sparsity_mean = 0.0, test_sparsity_std = 0.0;
};
struct CompareResult {
  std::vector<CompareRun> runs;  // variant-major, then seed order
  std::vector<CompareRow> rows;  // rnp, rnp_a2i, shared_encoder, shared_encoder_a2i
};
/// Writes compare_runs.csv and compare.csv (mean and sample std per variant).
CompareResult cmd_compare(const RunConfig& config);

struct AnalyzeResult {
  double fixed_point_max_gap = 0.0;     // closed form vs numeric minimizer
  double fixed_point_min_f_star = 0.0;  // over p1 >= p2 > 0
  double equal_case_f_star = 0.0;       // worst over p1 == p2
  bool fixed_point_bound_holds = false;
  double derivative_max_rel_error = 0.0;
  double entropy_max_gap = 0.0;
  bool entropy_never_below = false;
  bool probe_ran = false;
  std::string probe_notice;
  std::vector<std::size_t> probe_tokens;
  std::vector<CooccurrenceProbe> probes;
};
/// Writes analysis_report.txt and analysis.csv. The probe section runs on the
/// checkpoint's deterministic train selections and reads "skipped" when the
/// checkpoint is missing.
AnalyzeResult cmd_analyze(const RunConfig& config);

// Pieces shared with tests.

/// 100 x 100 interior grid p = i / 101, i = 1..100.
struct FixedPointSweep {
  double max_gap = 0.0;
  double min_f_star = 1.0;
  double max_equal_case_deviation = 0.0;  // max |f* - 0.75| over p1 == p2
  bool bound_holds = true;                // f* >= 0.75 whenever p1 >= p2
};
FixedPointSweep fixed_point_sweep(std::size_t n = 100);

/// Trains only the predictor of `players` on all-ones masks for
/// config.epochs epochs; `hook` sees the predictor after each epoch.
using PredictorHook = std::function<void(std::size_t epoch, Players& players)>;
void train_full_text(Players& players, const Corpus& corpus, const TrainConfig& config,
                     const PredictorHook& hook = {});

/// Accuracy of `predictor` on `examples` with the given per-example masks
/// (B x T rows trimmed to each example's length), or all-ones when empty.
double masked_accuracy(Players& players, std::span<const Example> examples, const MaskRows& masks);

/// Sampled generator selections (trimmed to length) with a fixed noise seed.
MaskRows sample_selections(Players& players, std::span<const Example> examples, double temperature,
                           std::uint64_t seed);
/// Deterministic (probs > 0.5) generator selections trimmed to length.
MaskRows deterministic_selections(Players& players, std::span<const Example> examples,
                                  double temperature);

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Exceptions are
/// rethrown in index order after all tasks finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace ratlab
