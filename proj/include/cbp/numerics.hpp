// Copyright 2026 The CBP Grounding Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major matrices and a tape-based reverse-mode autodiff engine.
//
// Every value in the model is a rank-2 matrix of doubles; vectors are stored
// as 1 x n rows. A Tape records the operations of one forward pass. Leaves
// are either constants or references into a ParamStore, and backward()
// returns one gradient matrix per parameter id.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cbp/errors.hpp"

namespace cbp {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " +
                           std::to_string(data_.size()) + " does not match " +
                           shape_string());
    }
  }

  static Matrix row_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Matrix(1, n, std::move(values));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols_ + c];
  }
  const double& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols_, cols_);
  }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }
  const std::vector<double>& values() const { return data_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }
  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b,
                               std::string_view what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape " + a.shape_string() +
                         " vs " + b.shape_string());
  }
}

// out += a * b
inline void gemm_nn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = &out(i, 0);
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a(i, l);
      if (av == 0.0) continue;
      const double* brow = &b(l, 0);
      for (std::size_t j = 0; j < n; ++j) o[j] += av * brow[j];
    }
  }
}

// out += a * b^T
inline void gemm_nt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = &a(i, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = &b(j, 0);
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += arow[l] * brow[l];
      out(i, j) += s;
    }
  }
}

// out += a^T * b
inline void gemm_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  for (std::size_t l = 0; l < k; ++l) {
    const double* arow = &a(l, 0);
    const double* brow = &b(l, 0);
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* o = &out(i, 0);
      for (std::size_t j = 0; j < n; ++j) o[j] += av * brow[j];
    }
  }
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// Plain (non-differentiable) matrix helpers.

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: shape " + a.shape_string() + " vs " +
                         b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  detail::gemm_nn_acc(a, b, out);
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// Row-wise softmax with the row max subtracted before exponentiation.
inline Matrix row_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto in = x.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (double& v : o) v /= total;
  }
  return out;
}

using Rng = std::mt19937_64;

// Entries i.i.d. uniform in [-bound, bound].
inline Matrix uniform_matrix(std::size_t rows, std::size_t cols, double bound,
                             Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

// Named parameter matrices. Ids are dense indices in insertion order.
class ParamStore {
 public:
  int add(std::string name, Matrix init) {
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return static_cast<int>(values_.size() - 1);
  }
  std::size_t size() const { return values_.size(); }
  const Matrix& value(int id) const { return values_.at(id); }
  Matrix& value(int id) { return values_.at(id); }
  const std::string& name(int id) const { return names_.at(id); }
  int find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return static_cast<int>(i);
    return -1;
  }
  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }
  friend bool operator==(const ParamStore&, const ParamStore&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

// Gradient per parameter id; shapes equal the parameter shapes.
using GradTable = std::vector<Matrix>;

inline GradTable zero_grads(const ParamStore& params) {
  GradTable g;
  g.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& v = params.value(static_cast<int>(i));
    g.emplace_back(v.rows(), v.cols());
  }
  return g;
}

namespace ad {

enum class OpKind : std::uint8_t {
  kConstant,
  kParam,
  kMatMul,
  kMatMulBias,
  kMatMulNT,
  kAdd,
  kAddRowBroadcast,
  kMul,
  kScale,
  kSigmoid,
  kTanh,
  kConcatCols,
  kSliceCols,
  kRow,
  kStackRows,
  kRowSoftmax,
  kSum,
  kWeightedBce,
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives and
// has not been cleared.
class Var {
 public:
  Var() = default;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  // Convenience for scalar results.
  double item() const { return value()[0]; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Lower and upper clamp applied to probabilities before taking logs.
inline constexpr double kProbClamp = 1e-12;

// Sum over all cells of -(wp*y*log p + wn*(1-y)*log(1-p)), p clamped to
// [kProbClamp, 1 - kProbClamp]. Cells with both weights zero contribute
// nothing, which is how masking is expressed.
inline double weighted_bce_value(const Matrix& probs, const Matrix& targets,
                                 const Matrix& pos_w, const Matrix& neg_w) {
  double total = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    const double wp = pos_w[k] * targets[k];
    const double wn = neg_w[k] * (1.0 - targets[k]);
    if (wp == 0.0 && wn == 0.0) continue;
    const double p = std::clamp(probs[k], kProbClamp, 1.0 - kProbClamp);
    total -= wp * std::log(p) + wn * std::log(1.0 - p);
  }
  return total;
}

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) {
    Node n;
    n.op = OpKind::kConstant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  // Leaf referencing params.value(id). The store must outlive the tape's use.
  Var param(const ParamStore& params, int id) {
    Node n;
    n.op = OpKind::kParam;
    n.requires_grad = true;
    n.param_id = id;
    n.external = &params.value(id);
    return push(std::move(n));
  }

  const Matrix& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(int id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  std::size_t size() const { return nodes_.size(); }
  void clear() {
    nodes_.clear();
    bce_aux_.clear();
  }

  // Reverse sweep from a scalar loss. Parameters that are not reachable from
  // the loss receive exactly zero gradient.
  GradTable backward(const Var& loss, const ParamStore& params) const {
    GradTable table = zero_grads(params);
    backward_into(loss, table);
    return table;
  }

  // Adds d(loss)/d(param) into `table`, which must be shaped like the store.
  void backward_into(const Var& loss, GradTable& table) const;

  // Operation recording. Public free functions below forward to these.
  Var record(OpKind op, Matrix value, int a, int b = -1, int c = -1,
             std::size_t aux = 0, double scalar = 0.0) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.a = a;
    n.b = b;
    n.c = c;
    n.aux = aux;
    n.scalar = scalar;
    n.requires_grad = (a >= 0 && requires_grad(a)) ||
                      (b >= 0 && requires_grad(b)) ||
                      (c >= 0 && requires_grad(c));
    return push(std::move(n));
  }
  Var record_stack(Matrix value, std::vector<int> inputs) {
    Node n;
    n.op = OpKind::kStackRows;
    n.value = std::move(value);
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                  [&](int i) { return requires_grad(i); });
    n.inputs = std::move(inputs);
    return push(std::move(n));
  }
  std::size_t add_bce_aux(Matrix targets, Matrix pos_w, Matrix neg_w) {
    bce_aux_.push_back({std::move(targets), std::move(pos_w), std::move(neg_w)});
    return bce_aux_.size() - 1;
  }
  Var make_var(int id) { return Var(this, id); }

 private:
  struct Node {
    OpKind op = OpKind::kConstant;
    bool requires_grad = false;
    int a = -1;
    int b = -1;
    int c = -1;
    int param_id = -1;
    std::size_t aux = 0;
    double scalar = 0.0;
    Matrix value;
    const Matrix* external = nullptr;
    std::vector<int> inputs;
  };
  struct BceAux {
    Matrix targets;
    Matrix pos_w;
    Matrix neg_w;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
  }

  std::vector<Node> nodes_;
  std::vector<BceAux> bce_aux_;
};

inline const Matrix& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

namespace detail {

inline Tape& common_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw ContractError("operands belong to different tapes");
  }
  return *a.tape();
}

inline Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("use of an unbound Var");
  return *a.tape();
}

}  // namespace detail

inline void Tape::backward_into(const Var& loss, GradTable& table) const {
  if (loss.tape() != this) throw ContractError("loss is not on this tape");
  const Matrix& lv = value(loss.id());
  if (lv.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        lv.shape_string());
  }
  std::vector<Matrix> grads(nodes_.size());
  auto grad_of = [&](int id) -> Matrix& {
    Matrix& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) {
      const Matrix& v = value(id);
      g = Matrix(v.rows(), v.cols());
    }
    return g;
  };
  grad_of(loss.id())[0] = 1.0;

  for (int id = loss.id(); id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    Matrix& g = grads[static_cast<std::size_t>(id)];
    if (g.empty() || !n.requires_grad) continue;
    const Matrix& y = value(id);
    const bool ga = n.a >= 0 && requires_grad(n.a);
    const bool gb = n.b >= 0 && requires_grad(n.b);
    const bool gc = n.c >= 0 && requires_grad(n.c);
    switch (n.op) {
      case OpKind::kConstant:
        break;
      case OpKind::kParam: {
        Matrix& dst = table.at(static_cast<std::size_t>(n.param_id));
        cbp::detail::require_same_shape(dst, g, "gradient table");
        for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
        break;
      }
      case OpKind::kMatMul:
      case OpKind::kMatMulBias: {
        if (ga) cbp::detail::gemm_nt_acc(g, value(n.b), grad_of(n.a));
        if (gb) cbp::detail::gemm_tn_acc(value(n.a), g, grad_of(n.b));
        if (n.op == OpKind::kMatMulBias && gc) {
          Matrix& gbias = grad_of(n.c);
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) gbias[j] += g(i, j);
        }
        break;
      }
      case OpKind::kMatMulNT: {
        // y = a b^T: da = g b, db = g^T a
        if (ga) cbp::detail::gemm_nn_acc(g, value(n.b), grad_of(n.a));
        if (gb) cbp::detail::gemm_tn_acc(g, value(n.a), grad_of(n.b));
        break;
      }
      case OpKind::kAdd: {
        if (ga) {
          Matrix& d = grad_of(n.a);
          for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k];
        }
        if (gb) {
          Matrix& d = grad_of(n.b);
          for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k];
        }
        break;
      }
      case OpKind::kAddRowBroadcast: {
        if (ga) {
          Matrix& d = grad_of(n.a);
          for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k];
        }
        if (gb) {
          Matrix& d = grad_of(n.b);
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) d[j] += g(i, j);
        }
        break;
      }
      case OpKind::kMul: {
        const Matrix& av = value(n.a);
        const Matrix& bv = value(n.b);
        if (ga) {
          Matrix& d = grad_of(n.a);
          for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k] * bv[k];
        }
        if (gb) {
          Matrix& d = grad_of(n.b);
          for (std::size_t k = 0; k < g.size(); ++k) d[k] += g[k] * av[k];
        }
        break;
      }
      case OpKind::kScale: {
        Matrix& d = grad_of(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) d[k] += n.scalar * g[k];
        break;
      }
      case OpKind::kSigmoid: {
        Matrix& d = grad_of(n.a);
        for (std::size_t k = 0; k < g.size(); ++k)
          d[k] += g[k] * y[k] * (1.0 - y[k]);
        break;
      }
      case OpKind::kTanh: {
        Matrix& d = grad_of(n.a);
        for (std::size_t k = 0; k < g.size(); ++k)
          d[k] += g[k] * (1.0 - y[k] * y[k]);
        break;
      }
      case OpKind::kConcatCols: {
        const std::size_t left = value(n.a).cols();
        const std::size_t right = value(n.b).cols();
        for (std::size_t i = 0; i < g.rows(); ++i) {
          if (ga) {
            Matrix& d = grad_of(n.a);
            for (std::size_t j = 0; j < left; ++j) d(i, j) += g(i, j);
          }
          if (gb) {
            Matrix& d = grad_of(n.b);
            for (std::size_t j = 0; j < right; ++j) d(i, j) += g(i, left + j);
          }
        }
        break;
      }
      case OpKind::kSliceCols: {
        Matrix& d = grad_of(n.a);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) d(i, n.aux + j) += g(i, j);
        break;
      }
      case OpKind::kRow: {
        Matrix& d = grad_of(n.a);
        for (std::size_t j = 0; j < g.cols(); ++j) d(n.aux, j) += g[j];
        break;
      }
      case OpKind::kStackRows: {
        for (std::size_t r = 0; r < n.inputs.size(); ++r) {
          if (!requires_grad(n.inputs[r])) continue;
          Matrix& d = grad_of(n.inputs[r]);
          for (std::size_t j = 0; j < g.cols(); ++j) d[j] += g(r, j);
        }
        break;
      }
      case OpKind::kRowSoftmax: {
        Matrix& d = grad_of(n.a);
        for (std::size_t i = 0; i < g.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
          for (std::size_t j = 0; j < g.cols(); ++j)
            d(i, j) += y(i, j) * (g(i, j) - dot);
        }
        break;
      }
      case OpKind::kSum: {
        Matrix& d = grad_of(n.a);
        for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[0];
        break;
      }
      case OpKind::kWeightedBce: {
        const BceAux& aux = bce_aux_[n.aux];
        const Matrix& p = value(n.a);
        Matrix& d = grad_of(n.a);
        for (std::size_t k = 0; k < p.size(); ++k) {
          const double wp = aux.pos_w[k] * aux.targets[k];
          const double wn = aux.neg_w[k] * (1.0 - aux.targets[k]);
          if (wp == 0.0 && wn == 0.0) continue;
          if (p[k] < kProbClamp || p[k] > 1.0 - kProbClamp) continue;
          d[k] += g[0] * (-wp / p[k] + wn / (1.0 - p[k]));
        }
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Differentiable operations.

inline Var matmul(const Var& a, const Var& w) {
  Tape& t = detail::common_tape(a, w);
  const Matrix& av = a.value();
  const Matrix& wv = w.value();
  if (av.cols() != wv.rows()) {
    throw DimensionError("matmul: shape " + av.shape_string() + " vs " +
                         wv.shape_string());
  }
  Matrix out(av.rows(), wv.cols());
  cbp::detail::gemm_nn_acc(av, wv, out);
  return t.record(OpKind::kMatMul, std::move(out), a.id(), w.id());
}

// a (m x k) * w (k x n) + b (1 x n, broadcast over rows).
inline Var matmul_bias(const Var& a, const Var& w, const Var& b) {
  Tape& t = detail::common_tape(a, w);
  detail::common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& wv = w.value();
  const Matrix& bv = b.value();
  if (av.cols() != wv.rows()) {
    throw DimensionError("matmul_bias: shape " + av.shape_string() + " vs " +
                         wv.shape_string());
  }
  if (bv.rows() != 1 || bv.cols() != wv.cols()) {
    throw DimensionError("matmul_bias: bias shape " + bv.shape_string() +
                         " vs weight " + wv.shape_string());
  }
  Matrix out(av.rows(), wv.cols());
  cbp::detail::gemm_nn_acc(av, wv, out);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv[j];
  return t.record(OpKind::kMatMulBias, std::move(out), a.id(), w.id(), b.id());
}

// a (m x k) * b^T where b is (n x k).
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: shape " + av.shape_string() + " vs " +
                         bv.shape_string());
  }
  Matrix out(av.rows(), bv.rows());
  cbp::detail::gemm_nt_acc(av, bv, out);
  return t.record(OpKind::kMatMulNT, std::move(out), a.id(), b.id());
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  cbp::detail::require_same_shape(av, bv, "add");
  Matrix out = av;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += bv[k];
  return t.record(OpKind::kAdd, std::move(out), a.id(), b.id());
}

// x (m x n) + r (1 x n) added to every row.
inline Var add_row_broadcast(const Var& x, const Var& r) {
  Tape& t = detail::common_tape(x, r);
  const Matrix& xv = x.value();
  const Matrix& rv = r.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) {
    throw DimensionError("add_row_broadcast: shape " + xv.shape_string() +
                         " vs " + rv.shape_string());
  }
  Matrix out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv[j];
  return t.record(OpKind::kAddRowBroadcast, std::move(out), x.id(), r.id());
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  cbp::detail::require_same_shape(av, bv, "mul");
  Matrix out = av;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= bv[k];
  return t.record(OpKind::kMul, std::move(out), a.id(), b.id());
}

inline Var scale(const Var& a, double s) {
  Tape& t = detail::tape_of(a);
  Matrix out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= s;
  return t.record(OpKind::kScale, std::move(out), a.id(), -1, -1, 0, s);
}

inline Var sigmoid(const Var& a) {
  Tape& t = detail::tape_of(a);
  Matrix out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k)
    out[k] = cbp::detail::sigmoid(out[k]);
  return t.record(OpKind::kSigmoid, std::move(out), a.id());
}

inline Var tanh(const Var& a) {
  Tape& t = detail::tape_of(a);
  Matrix out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::tanh(out[k]);
  return t.record(OpKind::kTanh, std::move(out), a.id());
}

// Concatenation along the last (column) axis.
inline Var concat_cols(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw DimensionError("concat_cols: shape " + av.shape_string() + " vs " +
                         bv.shape_string());
  }
  Matrix out(av.rows(), av.cols() + bv.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    std::copy(av.row(i).begin(), av.row(i).end(), out.row(i).begin());
    std::copy(bv.row(i).begin(), bv.row(i).end(),
              out.row(i).begin() + static_cast<std::ptrdiff_t>(av.cols()));
  }
  return t.record(OpKind::kConcatCols, std::move(out), a.id(), b.id());
}

inline Var slice_cols(const Var& a, std::size_t offset, std::size_t width) {
  Tape& t = detail::tape_of(a);
  const Matrix& av = a.value();
  if (offset + width > av.cols()) {
    throw DimensionError("slice_cols: columns [" + std::to_string(offset) +
                         ", " + std::to_string(offset + width) +
                         ") out of range for " + av.shape_string());
  }
  Matrix out(av.rows(), width);
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < width; ++j) out(i, j) = av(i, offset + j);
  return t.record(OpKind::kSliceCols, std::move(out), a.id(), -1, -1, offset);
}

inline Var row(const Var& a, std::size_t r) {
  Tape& t = detail::tape_of(a);
  const Matrix& av = a.value();
  if (r >= av.rows()) {
    throw DimensionError("row: index " + std::to_string(r) +
                         " out of range for " + av.shape_string());
  }
  Matrix out(1, av.cols());
  std::copy(av.row(r).begin(), av.row(r).end(), out.data().begin());
  return t.record(OpKind::kRow, std::move(out), a.id(), -1, -1, r);
}

// Stacks 1 x n rows into an m x n matrix.
inline Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ContractError("stack_rows: no rows");
  Tape& t = detail::tape_of(rows.front());
  const std::size_t n = rows.front().cols();
  Matrix out(rows.size(), n);
  std::vector<int> ids;
  ids.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Matrix& v = rows[r].value();
    if (rows[r].tape() != &t) {
      throw ContractError("operands belong to different tapes");
    }
    if (v.rows() != 1 || v.cols() != n) {
      throw DimensionError("stack_rows: row shape " + v.shape_string() +
                           " vs 1x" + std::to_string(n));
    }
    std::copy(v.data().begin(), v.data().end(), out.row(r).begin());
    ids.push_back(rows[r].id());
  }
  return t.record_stack(std::move(out), std::move(ids));
}

inline Var row_softmax(const Var& a) {
  Tape& t = detail::tape_of(a);
  return t.record(OpKind::kRowSoftmax, cbp::row_softmax(a.value()), a.id());
}

inline Var sum(const Var& a) {
  Tape& t = detail::tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record(OpKind::kSum, Matrix(1, 1, s), a.id());
}

// Scalar weighted binary cross-entropy over probabilities (see
// weighted_bce_value). Targets and weights are constants.
inline Var weighted_bce(const Var& probs, Matrix targets, Matrix pos_w,
                        Matrix neg_w) {
  Tape& t = detail::tape_of(probs);
  const Matrix& p = probs.value();
  cbp::detail::require_same_shape(p, targets, "weighted_bce targets");
  cbp::detail::require_same_shape(p, pos_w, "weighted_bce positive weights");
  cbp::detail::require_same_shape(p, neg_w, "weighted_bce negative weights");
  const double v = weighted_bce_value(p, targets, pos_w, neg_w);
  const std::size_t aux =
      t.add_bce_aux(std::move(targets), std::move(pos_w), std::move(neg_w));
  return t.record(OpKind::kWeightedBce, Matrix(1, 1, v), probs.id(), -1, -1,
                  aux);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle.

using LossFn = std::function<Var(Tape&, const ParamStore&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  double tol = 0.0;
  bool passed = true;
};

// Relative error |a - n| / max(|a|, |n|, floor), floor = 1e-6 * max(1, |f|).
// Rounding in f itself puts noise of roughly 1e-15 * |f| / eps on every
// central difference, so entries below the floor cannot be resolved and are
// judged against it instead of against their own size.
inline constexpr double kGradCheckFloor = 1e-6;

inline double grad_check_floor(double loss) {
  return kGradCheckFloor * std::max(1.0, std::abs(loss));
}

inline double eval_loss(const LossFn& f, const ParamStore& params) {
  Tape tape;
  const Var loss = f(tape, params);
  if (loss.value().size() != 1) {
    throw ContractError("loss function must return a scalar, got " +
                        loss.value().shape_string());
  }
  return loss.item();
}

// Compares `analytic` against central differences of f for every entry of
// every parameter. Parameters are restored before returning.
inline GradCheckReport finite_diff_check(ParamStore& params, const LossFn& f,
                                         const GradTable& analytic, double eps,
                                         double tol) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be > 0");
  const double base1 = eval_loss(f, params);
  const double base2 = eval_loss(f, params);
  if (base1 != base2) {
    throw ContractError("finite_diff_check: loss function is not deterministic");
  }
  GradCheckReport report;
  report.tol = tol;
  const double floor = grad_check_floor(base1);
  for (std::size_t p = 0; p < params.size(); ++p) {
    const int id = static_cast<int>(p);
    Matrix& value = params.value(id);
    for (std::size_t k = 0; k < value.size(); ++k) {
      const double saved = value[k];
      value[k] = saved + eps;
      const double up = eval_loss(f, params);
      value[k] = saved - eps;
      const double down = eval_loss(f, params);
      value[k] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic.at(p)[k];
      const double denom =
          std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.entries_checked;
      if (report.worst_param.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = params.name(id);
        report.worst_index = k;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

inline GradCheckReport finite_diff_check(ParamStore& params, const LossFn& f,
                                         double eps, double tol) {
  Tape tape;
  const Var loss = f(tape, params);
  const GradTable analytic = tape.backward(loss, params);
  return finite_diff_check(params, f, analytic, eps, tol);
}

}  // namespace ad
}  // namespace cbp
