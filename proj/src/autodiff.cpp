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

#include "ratlab/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ratlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kLogClamp = 1e-12;

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

std::size_t lead_dim(const Shape& s) {
  const std::size_t c = last_dim(s);
  return c == 0 ? 0 : shape_numel(s) / c;
}

Shape with_last(Shape s, std::size_t n) {
  if (s.empty()) return {n};
  s.back() = n;
  return s;
}

enum class Broadcast { kSame, kRow, kScalar };

Broadcast broadcast_kind(std::size_t a_numel, std::size_t b_numel) {
  if (a_numel == b_numel) return Broadcast::kSame;
  if (b_numel == 1) return Broadcast::kScalar;
  return Broadcast::kRow;
}

// Index of the right operand for element i of the left operand.
inline std::size_t bidx(Broadcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Broadcast::kSame:
      return i;
    case Broadcast::kRow:
      return i % cols;
    case Broadcast::kScalar:
      return 0;
  }
  return 0;
}

// Folds a full-size gradient back onto the right operand's shape.
void reduce_into(Broadcast k, std::span<const double> full, std::size_t cols,
                 double sign, std::vector<double>& out) {
  for (std::size_t i = 0; i < full.size(); ++i) out[bidx(k, i, cols)] += sign * full[i];
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape s, std::vector<double> d, bool trainable)
    : shape(std::move(s)), data(std::move(d)), requires_grad(trainable) {
  for (auto dim : shape) {
    if (dim == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::zeros(Shape s, bool trainable) {
  const std::size_t n = shape_numel(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0), trainable);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

std::size_t Tensor::cols() const { return last_dim(shape); }
std::size_t Tensor::rows() const { return lead_dim(shape); }

void Tensor::zero_grad() {
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScalarMul: return "scalar_mul";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConcatLast: return "concat_last";
    case OpKind::kSum: return "sum";
    case OpKind::kSumLast: return "sum_last";
    case OpKind::kMean: return "mean";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kTanh: return "tanh";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSoftmaxLast: return "softmax_last";
    case OpKind::kEmbeddingLookup: return "embedding";
    case OpKind::kAbs: return "abs";
    case OpKind::kBroadcastMaskMul: return "mask_rows";
    case OpKind::kStopGradient: return "stop_gradient";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph construction

Var Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::out_of_range("invalid graph variable " + std::to_string(v.id));
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

std::span<const double> Graph::data_of(const Node& n) const {
  if (n.param) return n.param->data;
  return n.value;
}

Var Graph::param(Tensor& t, bool trainable) {
  Node n;
  n.op = OpKind::kLeaf;
  n.shape = t.shape;
  n.param = &t;
  n.requires_grad = trainable && t.requires_grad;
  return push(std::move(n));
}

Var Graph::constant(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("constant: shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  Node n;
  n.op = OpKind::kConstant;
  n.shape = std::move(shape);
  n.value = std::move(data);
  return push(std::move(n));
}

Shape Graph::broadcast_shape(OpKind op, const Node& a, const Node& b) const {
  const std::size_t an = shape_numel(a.shape), bn = shape_numel(b.shape);
  if (a.shape == b.shape || bn == 1) return a.shape;
  if (bn == last_dim(a.shape) && lead_dim(b.shape) == 1 && an != bn) return a.shape;
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + shape_str(a.shape) +
                   " and " + shape_str(b.shape));
}

namespace {

template <typename F>
std::vector<double> binary(std::span<const double> a, std::span<const double> b,
                           std::size_t cols, F f) {
  const Broadcast k = broadcast_kind(a.size(), b.size());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[bidx(k, i, cols)]);
  return out;
}

template <typename F>
std::vector<double> unary(std::span<const double> a, F f) {
  std::vector<double> out(a.size());
  std::transform(a.begin(), a.end(), out.begin(), f);
  return out;
}

}  // namespace

Var Graph::add(Var a, Var b) {
  const Node &na = node(a), &nb = node(b);
  Node n;
  n.op = OpKind::kAdd;
  n.shape = broadcast_shape(n.op, na, nb);
  n.value = binary(data_of(na), data_of(nb), last_dim(na.shape), std::plus<>());
  n.inputs = {a.id, b.id};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

Var Graph::sub(Var a, Var b) {
  const Node &na = node(a), &nb = node(b);
  Node n;
  n.op = OpKind::kSub;
  n.shape = broadcast_shape(n.op, na, nb);
  n.value = binary(data_of(na), data_of(nb), last_dim(na.shape), std::minus<>());
  n.inputs = {a.id, b.id};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  const Node &na = node(a), &nb = node(b);
  Node n;
  n.op = OpKind::kMul;
  n.shape = broadcast_shape(n.op, na, nb);
  n.value = binary(data_of(na), data_of(nb), last_dim(na.shape), std::multiplies<>());
  n.inputs = {a.id, b.id};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

Var Graph::scale(Var a, double c) {
  const Node& na = node(a);
  Node n;
  n.op = OpKind::kScalarMul;
  n.shape = na.shape;
  n.factor = c;
  n.value = unary(data_of(na), [c](double x) { return c * x; });
  n.inputs = {a.id};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

Var Graph::matmul(Var a, Var b) {
  const Node &na = node(a), &nb = node(b);
  const std::size_t m = lead_dim(na.shape), k = last_dim(na.shape);
  if (nb.shape.size() != 2 || nb.shape[0] != k) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(na.shape) + " and " +
                     shape_str(nb.shape));
  }
  const std::size_t p = nb.shape[1];
  Node n;
  n.op = OpKind::kMatMul;
  n.shape = with_last(na.shape, p);
  n.value.resize(m * p);
  const auto ad = data_of(na), bd = data_of(nb);
  MutMap(n.value.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(p)).noalias() =
      ConstMap(ad.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) *
      ConstMap(bd.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p));
  n.inputs = {a.id, b.id};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

Var Graph::concat_last(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  const Node& first = node(parts[0]);
  const std::size_t rows = lead_dim(first.shape);
  Node n;
  n.op = OpKind::kConcatLast;
  std::size_t total = 0;
  for (Var v : parts) {
    const Node& p = node(v);
    if (lead_dim(p.shape) != rows || p.shape.size() != first.shape.size()) {
      throw ShapeError("concat_last: incompatible shapes " + shape_str(first.shape) + " and " +
                       shape_str(p.shape));
    }
    n.indices.push_back(last_dim(p.shape));
    total += last_dim(p.shape);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || p.requires_grad;
  }
  n.shape = with_last(first.shape, total);
  n.value.resize(rows * total);
  std::size_t offset = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const auto d = data_of(node(parts[j]));
    const std::size_t c = n.indices[j];
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(r * c), c,
                  n.value.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += c;
  }
  return push(std::move(n));
}

Var Graph::sum(Var a) {
  const Node& na = node(a);
  const auto d = data_of(na);
  Node n;
  n.op = OpKind::kSum;
  n.shape = {1};
  double s = 0.0;
  for (double x : d) s += x;
  n.value = {s};
  n.inputs = {a.id};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

Var Graph::sum_last(Var a) {
  const Node& na = node(a);
  const auto d = data_of(na);
  const std::size_t rows = lead_dim(na.shape), cols = last_dim(na.shape);
  Node n;
  n.op = OpKind::kSumLast;
  n.shape = with_last(na.shape, 1);
  n.value.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) n.value[r] += d[r * cols + c];
  }
  n.inputs = {a.id};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

Var Graph::mean(Var a) {
  const Node& na = node(a);
  const auto d = data_of(na);
  Node n;
  n.op = OpKind::kMean;
  n.shape = {1};
  double s = 0.0;
  for (double x : d) s += x;
  n.value = {s / static_cast<double>(d.size())};
  n.inputs = {a.id};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

Var Graph::sigmoid(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = OpKind::kSigmoid;
  n.shape = na.shape;
  n.value = unary(data_of(na), [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  n.inputs = {a.id};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

Var Graph::tanh(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = OpKind::kTanh;
  n.shape = na.shape;
  n.value = unary(data_of(na), [](double x) { return std::tanh(x); });
  n.inputs = {a.id};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

Var Graph::exp(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = OpKind::kExp;
  n.shape = na.shape;
  n.value = unary(data_of(na), [](double x) { return std::exp(x); });
  n.inputs = {a.id};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

Var Graph::log(Var a) {
  const Node& na = node(a);
  const auto d = data_of(na);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(d[i] >= 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(d[i]) + " at element " +
                        std::to_string(i) + " of " + shape_str(na.shape));
    }
  }
  Node n;
  n.op = OpKind::kLog;
  n.shape = na.shape;
  n.value = unary(d, [](double x) { return std::log(std::max(x, kLogClamp)); });
  n.inputs = {a.id};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

Var Graph::softmax_last(Var a) {
  const Node& na = node(a);
  const auto d = data_of(na);
  const std::size_t rows = lead_dim(na.shape), cols = last_dim(na.shape);
  Node n;
  n.op = OpKind::kSoftmaxLast;
  n.shape = na.shape;
  n.value.resize(d.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = d.data() + r * cols;
    double* out = n.value.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (out[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) out[c] /= z;
  }
  n.inputs = {a.id};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

Var Graph::embedding(Var table, std::span<const std::size_t> indices) {
  const Node& nt = node(table);
  if (nt.shape.size() != 2) {
    throw ShapeError("embedding: table must be 2-d, got " + shape_str(nt.shape));
  }
  const std::size_t vocab = nt.shape[0], dim = nt.shape[1];
  const auto d = data_of(nt);
  Node n;
  n.op = OpKind::kEmbeddingLookup;
  n.shape = {indices.size(), dim};
  n.value.resize(indices.size() * dim);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= vocab) {
      throw std::out_of_range("embedding: index " + std::to_string(indices[i]) +
                              " out of range for vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(indices[i] * dim), dim,
                n.value.begin() + static_cast<std::ptrdiff_t>(i * dim));
  }
  n.indices.assign(indices.begin(), indices.end());
  n.inputs = {table.id};
  n.requires_grad = nt.requires_grad;
  return push(std::move(n));
}

Var Graph::abs(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = OpKind::kAbs;
  n.shape = na.shape;
  n.value = unary(data_of(na), [](double x) { return std::fabs(x); });
  n.inputs = {a.id};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

Var Graph::mask_rows(Var x, Var column) {
  const Node &nx = node(x), &nc = node(column);
  const std::size_t rows = lead_dim(nx.shape), cols = last_dim(nx.shape);
  if (shape_numel(nc.shape) != rows || last_dim(nc.shape) != 1) {
    throw ShapeError("mask_rows: incompatible shapes " + shape_str(nx.shape) + " and " +
                     shape_str(nc.shape));
  }
  const auto xd = data_of(nx), cd = data_of(nc);
  Node n;
  n.op = OpKind::kBroadcastMaskMul;
  n.shape = nx.shape;
  n.value.resize(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) n.value[r * cols + c] = xd[r * cols + c] * cd[r];
  }
  n.inputs = {x.id, column.id};
  n.requires_grad = nx.requires_grad || nc.requires_grad;
  return push(std::move(n));
}

Var Graph::stop_gradient(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = OpKind::kStopGradient;
  n.shape = na.shape;
  const auto d = data_of(na);
  n.value.assign(d.begin(), d.end());
  n.inputs = {a.id};
  n.requires_grad = false;
  return push(std::move(n));
}

Var Graph::apply(OpKind op, std::span<const Var> in) {
  auto need = [&](std::size_t k) {
    if (in.size() != k) {
      throw std::invalid_argument(std::string(op_name(op)) + ": expected " + std::to_string(k) +
                                  " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (op) {
    case OpKind::kAdd: need(2); return add(in[0], in[1]);
    case OpKind::kSub: need(2); return sub(in[0], in[1]);
    case OpKind::kMul: need(2); return mul(in[0], in[1]);
    case OpKind::kMatMul: need(2); return matmul(in[0], in[1]);
    case OpKind::kConcatLast: return concat_last(in);
    case OpKind::kSum: need(1); return sum(in[0]);
    case OpKind::kSumLast: need(1); return sum_last(in[0]);
    case OpKind::kMean: need(1); return mean(in[0]);
    case OpKind::kSigmoid: need(1); return sigmoid(in[0]);
    case OpKind::kTanh: need(1); return tanh(in[0]);
    case OpKind::kExp: need(1); return exp(in[0]);
    case OpKind::kLog: need(1); return log(in[0]);
    case OpKind::kSoftmaxLast: need(1); return softmax_last(in[0]);
    case OpKind::kAbs: need(1); return abs(in[0]);
    case OpKind::kBroadcastMaskMul: need(2); return mask_rows(in[0], in[1]);
    case OpKind::kStopGradient: need(1); return stop_gradient(in[0]);
    case OpKind::kScalarMul:
    case OpKind::kEmbeddingLookup:
    case OpKind::kLeaf:
    case OpKind::kConstant:
      break;
  }
  throw std::invalid_argument(std::string(op_name(op)) + " needs extra arguments; call it directly");
}

const Shape& Graph::shape(Var v) const { return node(v).shape; }
std::span<const double> Graph::value(Var v) const { return data_of(node(v)); }

double Graph::item(Var v) const {
  const auto d = value(v);
  if (d.size() != 1) throw ShapeError("item: tensor is not a scalar: " + shape_str(shape(v)));
  return d[0];
}

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }
std::span<const double> Graph::grad(Var v) const { return node(v).grad; }

// ---------------------------------------------------------------------------
// Backward

void Graph::contribute(int consumer, std::size_t slot, std::vector<double>& out) const {
  const Node& n = nodes_[static_cast<std::size_t>(consumer)];
  const std::vector<double>& g = n.grad;
  const Node& in = nodes_[static_cast<std::size_t>(n.inputs[slot])];
  const auto x = data_of(in);
  switch (n.op) {
    case OpKind::kAdd:
    case OpKind::kSub: {
      const double sign = (n.op == OpKind::kSub && slot == 1) ? -1.0 : 1.0;
      if (slot == 0) {
        for (std::size_t i = 0; i < g.size(); ++i) out[i] += g[i];
      } else {
        reduce_into(broadcast_kind(g.size(), x.size()), g, last_dim(n.shape), sign, out);
      }
      return;
    }
    case OpKind::kMul: {
      const auto a = data_of(nodes_[static_cast<std::size_t>(n.inputs[0])]);
      const auto b = data_of(nodes_[static_cast<std::size_t>(n.inputs[1])]);
      const Broadcast k = broadcast_kind(a.size(), b.size());
      const std::size_t cols = last_dim(n.shape);
      if (slot == 0) {
        for (std::size_t i = 0; i < g.size(); ++i) out[i] += g[i] * b[bidx(k, i, cols)];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) out[bidx(k, i, cols)] += g[i] * a[i];
      }
      return;
    }
    case OpKind::kScalarMul:
      for (std::size_t i = 0; i < g.size(); ++i) out[i] += n.factor * g[i];
      return;
    case OpKind::kMatMul: {
      const Node& na = nodes_[static_cast<std::size_t>(n.inputs[0])];
      const Node& nb = nodes_[static_cast<std::size_t>(n.inputs[1])];
      const auto m = static_cast<Eigen::Index>(lead_dim(na.shape));
      const auto k = static_cast<Eigen::Index>(last_dim(na.shape));
      const auto p = static_cast<Eigen::Index>(nb.shape[1]);
      ConstMap G(g.data(), m, p);
      if (slot == 0) {
        MutMap(out.data(), m, k).noalias() += G * ConstMap(data_of(nb).data(), k, p).transpose();
      } else {
        MutMap(out.data(), k, p).noalias() += ConstMap(data_of(na).data(), m, k).transpose() * G;
      }
      return;
    }
    case OpKind::kConcatLast: {
      const std::size_t total = last_dim(n.shape), rows = lead_dim(n.shape);
      std::size_t offset = 0;
      for (std::size_t j = 0; j < slot; ++j) offset += n.indices[j];
      const std::size_t c = n.indices[slot];
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] += g[r * total + offset + j];
      }
      return;
    }
    case OpKind::kSum:
      for (auto& o : out) o += g[0];
      return;
    case OpKind::kSumLast: {
      const std::size_t cols = last_dim(in.shape);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += g[i / cols];
      return;
    }
    case OpKind::kMean: {
      const double s = g[0] / static_cast<double>(out.size());
      for (auto& o : out) o += s;
      return;
    }
    case OpKind::kSigmoid:
      for (std::size_t i = 0; i < g.size(); ++i) out[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
      return;
    case OpKind::kTanh:
      for (std::size_t i = 0; i < g.size(); ++i) out[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
      return;
    case OpKind::kExp:
      for (std::size_t i = 0; i < g.size(); ++i) out[i] += g[i] * n.value[i];
      return;
    case OpKind::kLog:
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] >= kLogClamp) out[i] += g[i] / x[i];
      }
      return;
    case OpKind::kSoftmaxLast: {
      const std::size_t rows = lead_dim(n.shape), cols = last_dim(n.shape);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = n.value.data() + r * cols;
        const double* gr = g.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += y[c] * (gr[c] - dot);
      }
      return;
    }
    case OpKind::kEmbeddingLookup: {
      const std::size_t dim = last_dim(n.shape);
      for (std::size_t i = 0; i < n.indices.size(); ++i) {
        const std::size_t row = n.indices[i];
        if (row == 0) continue;
        for (std::size_t j = 0; j < dim; ++j) out[row * dim + j] += g[i * dim + j];
      }
      return;
    }
    case OpKind::kAbs:
      for (std::size_t i = 0; i < g.size(); ++i) {
        out[i] += x[i] > 0 ? g[i] : (x[i] < 0 ? -g[i] : 0.0);
      }
      return;
    case OpKind::kBroadcastMaskMul: {
      const Node& nx = nodes_[static_cast<std::size_t>(n.inputs[0])];
      const Node& nc = nodes_[static_cast<std::size_t>(n.inputs[1])];
      const auto xd = data_of(nx), cd = data_of(nc);
      const std::size_t rows = lead_dim(n.shape), cols = last_dim(n.shape);
      if (slot == 0) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += g[r * cols + c] * cd[r];
        }
      } else {
        for (std::size_t r = 0; r < rows; ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < cols; ++c) s += g[r * cols + c] * xd[r * cols + c];
          out[r] += s;
        }
      }
      return;
    }
    case OpKind::kStopGradient:
    case OpKind::kLeaf:
    case OpKind::kConstant:
      return;
  }
}

void Graph::backward(Var loss, TopoOrder order) {
  const Node& nl = node(loss);
  if (shape_numel(nl.shape) != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(nl.shape));
  }
  for (auto& n : nodes_) n.grad.clear();
  if (!nl.requires_grad) return;

  const auto count = static_cast<std::size_t>(loss.id) + 1;
  std::vector<std::vector<int>> consumers(count);
  for (std::size_t i = 0; i < count; ++i) {
    for (int in : nodes_[i].inputs) {
      auto& c = consumers[static_cast<std::size_t>(in)];
      if (c.empty() || c.back() != static_cast<int>(i)) c.push_back(static_cast<int>(i));
    }
  }

  std::vector<int> sequence;
  if (order == TopoOrder::kReverseCreation) {
    for (int i = loss.id; i >= 0; --i) sequence.push_back(i);
  } else {
    // Iterative DFS post-order over inputs, then reversed.
    std::vector<char> seen(count, 0);
    std::vector<std::pair<int, std::size_t>> stack{{loss.id, 0}};
    seen[static_cast<std::size_t>(loss.id)] = 1;
    while (!stack.empty()) {
      auto& [id, next] = stack.back();
      const auto& ins = nodes_[static_cast<std::size_t>(id)].inputs;
      if (next < ins.size()) {
        const int child = ins[next++];
        if (!seen[static_cast<std::size_t>(child)]) {
          seen[static_cast<std::size_t>(child)] = 1;
          stack.emplace_back(child, 0);
        }
      } else {
        sequence.push_back(id);
        stack.pop_back();
      }
    }
    std::reverse(sequence.begin(), sequence.end());
  }

  for (int id : sequence) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) continue;
    if (id == loss.id) {
      n.grad.assign(1, 1.0);
    } else {
      bool reached = false;
      std::vector<double> g;
      for (int c : consumers[static_cast<std::size_t>(id)]) {
        const Node& cn = nodes_[static_cast<std::size_t>(c)];
        if (cn.grad.empty()) continue;
        if (!reached) {
          g.assign(shape_numel(n.shape), 0.0);
          reached = true;
        }
        for (std::size_t s = 0; s < cn.inputs.size(); ++s) {
          if (cn.inputs[s] == id) contribute(c, s, g);
        }
      }
      if (!reached) continue;
      n.grad = std::move(g);
    }
    if (n.op == OpKind::kLeaf && n.param) {
      Tensor& p = *n.param;
      if (!p.grad) p.grad.emplace(p.data.size(), 0.0);
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*p.grad)[i] += n.grad[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckReport grad_check_fd(const GraphBuilder& build, std::span<Tensor* const> params,
                              double h) {
  auto evaluate = [&](bool with_backward) {
    Graph g;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (Tensor* p : params) leaves.push_back(g.param(*p));
    const Var loss = build(g, leaves);
    const double v = g.item(loss);
    if (with_backward) g.backward(loss);
    return v;
  };

  for (Tensor* p : params) {
    p->requires_grad = true;
    p->grad.emplace(p->data.size(), 0.0);
  }
  evaluate(true);

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double saved = p.data[i];
      p.data[i] = saved + h;
      const double up = evaluate(false);
      p.data[i] = saved - h;
      const double down = evaluate(false);
      p.data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = (*p.grad)[i];
      const double err = std::fabs(analytic - numeric) / std::max(1.0, std::fabs(numeric));
      if (std::isnan(err)) {
        if (!report.has_nan) {
          report.param_index = pi;
          report.element = i;
        }
        report.has_nan = true;
      } else if (err > report.max_rel_error && !report.has_nan) {
        report.max_rel_error = err;
        report.param_index = pi;
        report.element = i;
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) +
                                " parameters but " + std::to_string(grads.size()) + " gradients");
  }
  if (state.first_moment.empty() && state.second_moment.empty()) {
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw std::invalid_argument("adam_step: moment length does not match parameter length");
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * grads[i];
    v = state.beta2 * v + (1.0 - state.beta2) * grads[i] * grads[i];
    params[i] -= state.learning_rate * (m / c1) / (std::sqrt(v / c2) + state.epsilon);
  }
}

Adam::Adam(std::vector<Tensor*> params, double learning_rate) : params_(std::move(params)) {
  states_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    states_[i].learning_rate = learning_rate;
    states_[i].first_moment.assign(params_[i]->data.size(), 0.0);
    states_[i].second_moment.assign(params_[i]->data.size(), 0.0);
  }
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    if (!p.grad) continue;
    adam_step(states_[i], p.data, *p.grad);
  }
}

void Adam::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

}  // namespace ratlab
