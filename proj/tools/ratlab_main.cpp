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

// ratlab: command-line front end for the experiment harness.
//
//   ratlab <command> [--config PATH] [--out DIR] [--seed N] [--workers N]
//                    [--<key> VALUE ...]
//
// Commands: gen-data, train, figure3, asr-curve, compare, analyze, keys.
// Exit codes: 0 success, 1 usage or config error, 2 runtime error
// (I/O, malformed data, divergence).

#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "ratlab/experiments.hpp"

namespace {

using ratlab::format_double;

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

void print_train(const ratlab::TrainRunResult& r) {
  for (const auto& m : r.history) std::cout << ratlab::metrics_csv_row(m) << '\n';
  std::cout << "best epoch " << r.best_epoch << ", best dev F1 " << format_double(r.best_dev_f1)
            << ", test F1 " << format_double(r.test.f1) << '\n';
}

int run(const std::string& command, const ratlab::RunConfig& cfg) {
  if (command == "keys") {
    for (const auto& k : ratlab::RunConfig::keys()) {
      std::cout << k.name << " = " << cfg.get(k.name) << "    # " << k.help << '\n';
    }
  } else if (command == "gen-data") {
    const auto r = ratlab::cmd_gen_data(cfg);
    std::cout << "wrote " << r.n_train << "/" << r.n_dev << "/" << r.n_test
              << " train/dev/test examples to " << cfg.output_dir.string() << '\n';
  } else if (command == "train") {
    print_train(ratlab::cmd_train(cfg));
  } else if (command == "figure3") {
    for (const auto& s : ratlab::cmd_figure3(cfg)) {
      std::cout << "seed " << s.seed << ": random patterns train acc "
                << format_double(s.random_train_acc.back()) << ", r2f train acc "
                << format_double(s.r2f_train_acc.back()) << ", gap " << format_double(s.final_gap())
                << ", max probe deviation " << format_double(s.max_probe_deviation) << '\n';
    }
  } else if (command == "asr-curve") {
    for (const auto& s : ratlab::cmd_asr_curve(cfg)) {
      std::cout << "seed " << s.seed << ": a2i_no_instruction " << format_double(s.observer_tail_mean)
                << ", rnp_a2i " << format_double(s.a2i_tail_mean) << '\n';
    }
  } else if (command == "compare") {
    const auto r = ratlab::cmd_compare(cfg);
    std::cout << "variant,n_runs,best_dev_f1_mean,best_dev_f1_std,dev_sparsity_mean\n";
    for (const auto& row : r.rows) {
      std::cout << ratlab::to_string(row.variant) << ',' << row.n_runs << ','
                << format_double(row.best_dev_f1_mean) << ',' << format_double(row.best_dev_f1_std)
                << ',' << format_double(row.dev_sparsity_mean) << '\n';
    }
  } else if (command == "analyze") {
    ratlab::cmd_analyze(cfg);
    std::cout << "wrote " << (cfg.output_dir / "analysis_report.txt").string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective rationalization experiments"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "key = value config file");
  std::map<std::string, std::string> overrides;
  for (const auto& key : ratlab::RunConfig::keys()) {
    std::string names = "--" + key.name;
    if (key.name == "output_dir") names = "--out,--output_dir";
    app.add_option(names, overrides[key.name], key.help);
  }

  const std::pair<const char*, const char*> commands[] = {
      {"gen-data", "write train/dev/test corpus files"},
      {"train", "train one variant; metrics CSV and checkpoint"},
      {"figure3", "full-text vs random-pattern vs r2f accuracy curves"},
      {"asr-curve", "dev ASR per epoch with and without instruction"},
      {"compare", "seed-averaged comparison of four variants"},
      {"analyze", "fixed-point, entropy and co-occurrence checks"},
      {"keys", "list config keys with their effective values"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  ratlab::RunConfig cfg;
  try {
    if (!config_path.empty()) cfg.apply_file(config_path);
    for (const auto& key : ratlab::RunConfig::keys()) {
      const auto& v = overrides[key.name];
      if (app.count("--" + key.name) > 0 || (key.name == "output_dir" && app.count("--out") > 0)) {
        cfg.set(key.name, v);
      }
    }
    if (command != "keys") {
      std::string experiment = command;
      for (char& c : experiment) c = c == '-' ? '_' : c;
      cfg.set("experiment", experiment);
    }
    return run(command, cfg);
  } catch (const ratlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const ratlab::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}
