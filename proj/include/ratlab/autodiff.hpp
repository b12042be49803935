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

// Define-by-run reverse-mode automatic differentiation over dense 64-bit
// tensors, plus the Adam optimizer.
//
// A Graph records every operation applied to its variables. Parameters live
// outside the graph as Tensors; Graph::param() registers a parameter as a leaf
// without copying it, and Graph::backward() accumulates into Tensor::grad.
//
// Shape rules. Every op treats a tensor as a matrix whose column count is the
// size of the last axis and whose row count is the product of the remaining
// axes (a scalar is 1x1). Binary elementwise ops (add, sub, mul) accept either
// equal shapes, a right operand with one row broadcast over the rows of the
// left operand, or a scalar right operand.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ratlab {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Dense row-major real array. `grad` is allocated on first accumulation.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d, bool trainable = false);

  static Tensor zeros(Shape s, bool trainable = false);
  static Tensor scalar(double v);

  std::size_t numel() const { return data.size(); }
  std::size_t cols() const;
  std::size_t rows() const;

  void zero_grad();
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScalarMul,
  kMatMul,
  kConcatLast,
  kSum,
  kSumLast,
  kMean,
  kSigmoid,
  kTanh,
  kExp,
  kLog,
  kSoftmaxLast,
  kEmbeddingLookup,
  kAbs,
  kBroadcastMaskMul,
  kStopGradient,
};

const char* op_name(OpKind op);

/// Handle to a node of a Graph. Only meaningful for the graph that made it.
struct Var {
  int id = -1;
};

/// Traversal used by Graph::backward. Both are valid reverse topological
/// orders and give bit-identical gradients: each node pulls its gradient from
/// its consumers in ascending node order regardless of traversal.
enum class TopoOrder { kReverseCreation, kDepthFirst };

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers `t` as a leaf. The tensor must outlive the graph. When
  /// `trainable` is false the leaf is treated as a constant even if
  /// t.requires_grad is set, which is how players are frozen.
  Var param(Tensor& t, bool trainable = true);
  Var constant(Shape shape, std::vector<double> data);
  Var constant(const Tensor& t) { return constant(t.shape, t.data); }
  Var scalar(double v) { return constant({1}, {v}); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var matmul(Var a, Var b);
  Var concat_last(std::span<const Var> parts);
  Var sum(Var a);
  Var sum_last(Var a);
  Var mean(Var a);
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var exp(Var a);
  /// Natural log. Negative inputs throw DomainError; inputs below 1e-12
  /// (including exact zeros from underflow) are clamped with zero gradient.
  Var log(Var a);
  Var softmax_last(Var a);
  /// Gathers rows of a (vocab x dim) table. Index 0 is padding: its row is
  /// read as stored and never receives gradient.
  Var embedding(Var table, std::span<const std::size_t> indices);
  Var abs(Var a);
  /// Scales each row of `x` (rows x cols) by the matching entry of a
  /// (rows x 1) column.
  Var mask_rows(Var x, Var column);
  Var stop_gradient(Var a);

  /// Generic dispatch used by the randomized gradient tests.
  Var apply(OpKind op, std::span<const Var> inputs);

  const Shape& shape(Var v) const;
  std::span<const double> value(Var v) const;
  double item(Var v) const;
  bool requires_grad(Var v) const;
  /// Gradient of the last backward pass w.r.t. an intermediate node; empty
  /// when the node was not on a path to the loss.
  std::span<const double> grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss, TopoOrder order = TopoOrder::kReverseCreation);

 private:
  struct Node {
    OpKind op = OpKind::kConstant;
    Shape shape;
    std::vector<double> value;
    Tensor* param = nullptr;
    std::vector<int> inputs;
    std::vector<std::size_t> indices;
    double factor = 0.0;
    bool requires_grad = false;
    std::vector<double> grad;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  std::span<const double> data_of(const Node& n) const;
  Shape broadcast_shape(OpKind op, const Node& a, const Node& b) const;
  void contribute(int consumer, std::size_t slot, std::vector<double>& out) const;

  std::vector<Node> nodes_;
};

/// Result of a central-difference gradient check.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t param_index = 0;
  std::size_t element = 0;
  bool has_nan = false;
  bool ok(double tol) const { return !has_nan && max_rel_error <= tol; }
};

using GraphBuilder = std::function<Var(Graph&, std::span<const Var>)>;

/// Compares backward() against central differences for every element of
/// every tensor in `params`. Relative error is |analytic - numeric| /
/// max(1, |numeric|). `build` must be deterministic given parameter values.
GradCheckReport grad_check_fd(const GraphBuilder& build,
                              std::span<Tensor* const> params, double h = 1e-5);

struct AdamState {
  std::uint64_t step_count = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update in place.
void adam_step(AdamState& state, std::span<double> params,
               std::span<const double> grads);

/// Adam over a fixed list of tensors. Tensors without an accumulated grad are
/// skipped and their step counters do not advance.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, double learning_rate);

  void step();
  void zero_grad();
  const std::vector<Tensor*>& params() const { return params_; }
  const AdamState& state(std::size_t i) const { return states_.at(i); }

 private:
  std::vector<Tensor*> params_;
  std::vector<AdamState> states_;
};

}  // namespace ratlab
