# Copyright 2026 The ratlab Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Selective rationalization with an attacker.

Thin wrapper over the native module. Experiment commands take a RunConfig
built from the same keys the command-line tool accepts:

    cfg = ratlab.RunConfig(epochs=2, n_train=256, output_dir="runs/demo")
    result = ratlab.train(cfg)
"""

from ratlab._ratlab import (
    AnalyzeResult,
    AsrCurveSeed,
    CompareRow,
    ConfigError,
    CooccurrenceProbe,
    Corpus,
    CorpusError,
    CorpusSpec,
    DivergenceError,
    EntropyCheck,
    Example,
    Figure3Seed,
    MetricsRecord,
    PRF,
    RunConfig,
    TrainRunResult,
    Vocabulary,
    accuracy_of,
    analyze,
    asr_curve,
    attack_success_rate,
    compare,
    cooccurrence_probe,
    figure3,
    fixed_point_confidence,
    gen_data,
    generate_corpus,
    instruction_objective,
    min_xent_equals_entropy_check,
    numeric_argmin_L,
    omega_penalty,
    read_corpus_dir,
    sparsity_of,
    task_loss,
    token_prf,
    train,
    write_corpus_dir,
)

__all__ = [name for name in dir() if not name.startswith("_")]
