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

// Python bindings: corpus generation and I/O, the metric and analysis
// functions, and the experiment commands driven by a RunConfig.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ratlab/analysis.hpp"
#include "ratlab/experiments.hpp"
#include "ratlab/metrics.hpp"
#include "ratlab/rationalizer.hpp"
#include "ratlab/synthcorpus.hpp"

namespace py = pybind11;
using namespace ratlab;

namespace {

using Sizes = std::vector<std::size_t>;

RunConfig make_config(const py::kwargs& kwargs) {
  RunConfig c;
  for (const auto& [k, v] : kwargs) {
    const std::string key = py::str(k);
    std::string value;
    if (py::isinstance<py::bool_>(v)) {
      value = v.cast<bool>() ? "true" : "false";
    } else if (py::isinstance<py::float_>(v)) {
      value = format_double(v.cast<double>());
    } else {
      value = py::str(v);
    }
    c.set(key, value);
  }
  return c;
}

}  // namespace

PYBIND11_MODULE(_ratlab, m) {
  m.doc() = "Selective rationalization with an attacker: native core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CorpusError>(m, "CorpusError", PyExc_RuntimeError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

  // Corpus.
  py::class_<CorpusSpec>(m, "CorpusSpec")
      .def(py::init<>())
      .def_readwrite("n_train", &CorpusSpec::n_train)
      .def_readwrite("n_dev", &CorpusSpec::n_dev)
      .def_readwrite("n_test", &CorpusSpec::n_test)
      .def_readwrite("seq_len", &CorpusSpec::seq_len)
      .def_readwrite("min_len", &CorpusSpec::min_len)
      .def_readwrite("vocab_size", &CorpusSpec::vocab_size)
      .def_readwrite("n_classes", &CorpusSpec::n_classes)
      .def_readwrite("rationale_len", &CorpusSpec::rationale_len)
      .def_readwrite("rationale_vocab_size", &CorpusSpec::rationale_vocab_size)
      .def_readwrite("n_trivial", &CorpusSpec::n_trivial)
      .def_readwrite("trivial_rate", &CorpusSpec::trivial_rate)
      .def_readwrite("seed", &CorpusSpec::seed)
      .def("trivial_tokens", &CorpusSpec::trivial_tokens)
      .def("rationale_tokens", &CorpusSpec::rationale_tokens, py::arg("cls"))
      .def("validate", &CorpusSpec::validate);

  py::class_<Example>(m, "Example")
      .def(py::init<>())
      .def_readwrite("tokens", &Example::tokens)
      .def_readwrite("label", &Example::label)
      .def_readwrite("gold_mask", &Example::gold_mask)
      .def("length", &Example::length)
      .def("__eq__", [](const Example& a, const Example& b) { return a == b; });

  py::class_<Vocabulary>(m, "Vocabulary")
      .def("__len__", &Vocabulary::size)
      .def("token", &Vocabulary::token)
      .def("index", &Vocabulary::index);

  py::class_<Corpus>(m, "Corpus")
      .def_readonly("spec", &Corpus::spec)
      .def_readonly("vocab", &Corpus::vocab)
      .def_readonly("train", &Corpus::train)
      .def_readonly("dev", &Corpus::dev)
      .def_readonly("test", &Corpus::test);

  m.def("generate_corpus", &generate_corpus, py::arg("spec"));
  m.def("write_corpus_dir", &write_corpus_dir, py::arg("dir"), py::arg("corpus"));
  m.def("read_corpus_dir", &read_corpus_dir, py::arg("dir"));

  // Metrics.
  py::class_<PRF>(m, "PRF")
      .def_readonly("precision", &PRF::precision)
      .def_readonly("recall", &PRF::recall)
      .def_readonly("f1", &PRF::f1);
  m.def(
      "token_prf", [](const MaskRows& pred, const MaskRows& gold) { return token_prf(pred, gold); },
      py::arg("pred"), py::arg("gold"));
  m.def(
      "sparsity_of", [](const MaskRows& masks) { return sparsity_of(masks); }, py::arg("masks"));
  m.def(
      "accuracy_of", [](const ProbRows& p, const Sizes& y) { return accuracy_of(p, y); },
      py::arg("predictions"), py::arg("labels"));
  m.def(
      "attack_success_rate",
      [](const ProbRows& p, const Sizes& y, const Sizes& t) { return attack_success_rate(p, y, t); },
      py::arg("attack_predictions"), py::arg("labels"), py::arg("targets"));

  py::class_<CooccurrenceProbe>(m, "CooccurrenceProbe")
      .def_readonly("p_cond", &CooccurrenceProbe::p_cond)
      .def_readonly("p_marginal", &CooccurrenceProbe::p_marginal)
      .def_readonly("n_selected", &CooccurrenceProbe::n_selected)
      .def_readonly("n_total", &CooccurrenceProbe::n_total)
      .def("sigma", &CooccurrenceProbe::sigma);
  m.def(
      "cooccurrence_probe",
      [](const MaskRows& sel, const std::vector<Sizes>& tokens, const Sizes& labels,
         std::size_t token) { return cooccurrence_probe(sel, tokens, labels, token); },
      py::arg("selections"), py::arg("tokens"), py::arg("labels"), py::arg("pattern_token"));

  // Losses.
  m.def(
      "omega_penalty",
      [](const std::vector<double>& mask, double s, double l1, double l2) {
        return omega_penalty(mask, s, l1, l2);
      },
      py::arg("mask"), py::arg("s"), py::arg("lambda1"), py::arg("lambda2"));
  m.def(
      "task_loss", [](const std::vector<double>& p, std::size_t y) { return task_loss(p, y); },
      py::arg("probs"), py::arg("label"));
  m.def(
      "instruction_objective", [](const std::vector<double>& p) { return instruction_objective(p); },
      py::arg("probs"));

  // Analysis.
  m.def("fixed_point_confidence", &fixed_point_confidence, py::arg("p1"), py::arg("p2"));
  m.def(
      "numeric_argmin_L", [](double p1, double p2) { return numeric_argmin_L(p1, p2).f; },
      py::arg("p1"), py::arg("p2"));
  py::class_<EntropyCheck>(m, "EntropyCheck")
      .def_readonly("entropy", &EntropyCheck::entropy)
      .def_readonly("achieved_min", &EntropyCheck::achieved_min)
      .def_readonly("gap", &EntropyCheck::gap)
      .def_readonly("iterations", &EntropyCheck::iterations);
  m.def(
      "min_xent_equals_entropy_check",
      [](const std::vector<double>& t) { return min_xent_equals_entropy_check(t); },
      py::arg("target"));

  // Experiments.
  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init(&make_config))
      .def("set", &RunConfig::set, py::arg("key"), py::arg("value"))
      .def("get", &RunConfig::get, py::arg("key"))
      .def("apply_text", &RunConfig::apply_text, py::arg("text"), py::arg("origin") = "config")
      .def("to_text", &RunConfig::to_text)
      .def_static("keys", [] {
        std::vector<std::string> names;
        for (const auto& k : RunConfig::keys()) names.push_back(k.name);
        return names;
      });

  py::class_<MetricsRecord>(m, "MetricsRecord")
      .def_readonly("epoch", &MetricsRecord::epoch)
      .def_readonly("split", &MetricsRecord::split)
      .def_readonly("acc", &MetricsRecord::acc)
      .def_readonly("precision", &MetricsRecord::precision)
      .def_readonly("recall", &MetricsRecord::recall)
      .def_readonly("f1", &MetricsRecord::f1)
      .def_readonly("sparsity", &MetricsRecord::sparsity)
      .def_readonly("asr", &MetricsRecord::asr);

  py::class_<TrainRunResult>(m, "TrainRunResult")
      .def_readonly("history", &TrainRunResult::history)
      .def_readonly("best_epoch", &TrainRunResult::best_epoch)
      .def_readonly("best_dev_f1", &TrainRunResult::best_dev_f1)
      .def_readonly("test", &TrainRunResult::test);

  py::class_<Figure3Seed>(m, "Figure3Seed")
      .def_readonly("seed", &Figure3Seed::seed)
      .def_readonly("full_train_acc", &Figure3Seed::full_train_acc)
      .def_readonly("full_dev_acc", &Figure3Seed::full_dev_acc)
      .def_readonly("random_train_acc", &Figure3Seed::random_train_acc)
      .def_readonly("random_dev_acc", &Figure3Seed::random_dev_acc)
      .def_readonly("r2f_train_acc", &Figure3Seed::r2f_train_acc)
      .def_readonly("r2f_dev_acc", &Figure3Seed::r2f_dev_acc)
      .def_readonly("max_probe_deviation", &Figure3Seed::max_probe_deviation)
      .def("final_gap", &Figure3Seed::final_gap);

  py::class_<AsrCurveSeed>(m, "AsrCurveSeed")
      .def_readonly("seed", &AsrCurveSeed::seed)
      .def_readonly("observer_asr", &AsrCurveSeed::observer_asr)
      .def_readonly("a2i_asr", &AsrCurveSeed::a2i_asr)
      .def_readonly("observer_tail_mean", &AsrCurveSeed::observer_tail_mean)
      .def_readonly("a2i_tail_mean", &AsrCurveSeed::a2i_tail_mean);

  py::class_<CompareRow>(m, "CompareRow")
      .def_property_readonly("variant", [](const CompareRow& r) { return std::string(to_string(r.variant)); })
      .def_readonly("n_runs", &CompareRow::n_runs)
      .def_readonly("best_dev_f1_mean", &CompareRow::best_dev_f1_mean)
      .def_readonly("best_dev_f1_std", &CompareRow::best_dev_f1_std)
      .def_readonly("dev_sparsity_mean", &CompareRow::dev_sparsity_mean)
      .def_readonly("test_acc_mean", &CompareRow::test_acc_mean)
      .def_readonly("test_f1_mean", &CompareRow::test_f1_mean);

  py::class_<AnalyzeResult>(m, "AnalyzeResult")
      .def_readonly("fixed_point_max_gap", &AnalyzeResult::fixed_point_max_gap)
      .def_readonly("fixed_point_bound_holds", &AnalyzeResult::fixed_point_bound_holds)
      .def_readonly("entropy_max_gap", &AnalyzeResult::entropy_max_gap)
      .def_readonly("probe_ran", &AnalyzeResult::probe_ran)
      .def_readonly("probe_notice", &AnalyzeResult::probe_notice);

  // The commands release the GIL: they are long-running and touch no Python state.
  const auto nogil = py::call_guard<py::gil_scoped_release>();
  m.def(
      "gen_data",
      [](const RunConfig& c) {
        const auto r = cmd_gen_data(c);
        return py::make_tuple(r.n_train, r.n_dev, r.n_test);
      },
      py::arg("config"));
  m.def("train", &cmd_train, py::arg("config"), nogil);
  m.def("figure3", &cmd_figure3, py::arg("config"), nogil);
  m.def("asr_curve", &cmd_asr_curve, py::arg("config"), nogil);
  m.def(
      "compare", [](const RunConfig& c) { return cmd_compare(c).rows; }, py::arg("config"), nogil);
  m.def("analyze", &cmd_analyze, py::arg("config"), nogil);
}
