#pragma once

// Minimal reverse-mode differentiation for the fixed graphs used by coupling
// flows. Values are batch matrices (rows = samples). The arithmetic primitive
// set is closed: add, mul, matvec, tanh, exp, log, log-sum-exp and affine,
// plus scalar helpers derived from them (scale, sum, mean, row_sum). Column
// gather/merge/concat only move values around. `rowwise` wraps an external
// per-row scalar function that supplies its own gradient (energy targets).
//
// Every primitive exists twice: on Eigen matrices (plain evaluation) and on
// tape variables (recorded for backprop). Generic code written against both
// overload sets is evaluated or differentiated without change.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gbnf/errors.hpp"

namespace gbnf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Parameter storage

struct TensorSlice {
  int layer = 0;
  std::string name;
  std::size_t offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

/// Map from (layer, tensor name) to contiguous row-major slices of a flat
/// parameter vector. Slices are appended in order, so they are disjoint and
/// cover [0, size()) by construction.
class ParamLayout {
 public:
  const TensorSlice& add(int layer, std::string name, Eigen::Index rows, Eigen::Index cols) {
    if (rows < 0 || cols < 0) throw ShapeError("ParamLayout: negative tensor extent for " + name);
    for (const auto& s : slices_)
      if (s.layer == layer && s.name == name)
        throw ShapeError("ParamLayout: duplicate tensor " + name);
    slices_.push_back(TensorSlice{layer, std::move(name), size_, rows, cols});
    size_ += slices_.back().size();
    return slices_.back();
  }

  const TensorSlice& at(int layer, std::string_view name) const {
    for (const auto& s : slices_)
      if (s.layer == layer && s.name == name) return s;
    throw ShapeError("ParamLayout: no tensor " + std::string(name) + " in layer " +
                     std::to_string(layer));
  }

  std::size_t size() const { return size_; }
  std::span<const TensorSlice> slices() const { return slices_; }

  // Disjoint and exactly covering. Always true for layouts built through add().
  bool valid() const {
    std::size_t next = 0;
    for (const auto& s : slices_) {
      if (s.offset != next) return false;
      next += s.size();
    }
    return next == size_;
  }

 private:
  std::vector<TensorSlice> slices_;
  std::size_t size_ = 0;
};

class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(ParamLayout layout)
      : layout_(std::move(layout)), values_(layout_.size(), 0.0) {}

  const ParamLayout& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  Matrix matrix(const TensorSlice& s) const {
    return Eigen::Map<const RowMajorMatrix>(values_.data() + s.offset, s.rows, s.cols);
  }

  void set(const TensorSlice& s, const Matrix& m) {
    if (m.rows() != s.rows || m.cols() != s.cols)
      throw ShapeError("ParamVector::set: shape mismatch for " + s.name);
    Eigen::Map<RowMajorMatrix>(values_.data() + s.offset, s.rows, s.cols) = m;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const ParamVector& o) const { return values_ == o.values_; }

 private:
  ParamLayout layout_;
  std::vector<double> values_;
};

struct GradResult {
  double loss = 0.0;
  std::vector<double> gradient;
};

namespace diff {

inline constexpr double kLogFloor = 1e-300;

inline void require_finite(const Matrix& m, const char* op) {
  if (!m.allFinite()) throw NumericError(std::string(op) + ": non-finite value");
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": operand shapes differ (" + std::to_string(a.rows()) +
                     "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
}

// Per-row scalar function with its gradient, used by `rowwise`.
struct RowFunction {
  std::function<double(const Eigen::RowVectorXd&)> value;
  std::function<Eigen::RowVectorXd(const Eigen::RowVectorXd&)> gradient;
};

// ---------------------------------------------------------------------------
// Plain evaluation overloads

inline Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix r = a + b;
  require_finite(r, "add");
  return r;
}
inline Matrix sub(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "sub");
  Matrix r = a - b;
  require_finite(r, "sub");
  return r;
}
inline Matrix mul(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "mul");
  Matrix r = a.cwiseProduct(b);
  require_finite(r, "mul");
  return r;
}
inline Matrix scale(const Matrix& a, double k) {
  Matrix r = a * k;
  require_finite(r, "scale");
  return r;
}
inline Matrix add_scalar(const Matrix& a, double k) {
  Matrix r = a.array() + k;
  require_finite(r, "add_scalar");
  return r;
}
// a * s where s is 1x1.
inline Matrix scale_by(const Matrix& a, const Matrix& s) {
  if (s.size() != 1) throw ShapeError("scale_by: scale must be 1x1");
  Matrix r = a * s(0, 0);
  require_finite(r, "scale_by");
  return r;
}
inline Matrix matvec(const Matrix& x, const Matrix& w) {
  if (x.cols() != w.cols()) throw ShapeError("matvec: input width does not match weight columns");
  Matrix r = x * w.transpose();
  require_finite(r, "matvec");
  return r;
}
inline Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  if (x.cols() != w.cols()) throw ShapeError("affine: input width does not match weight columns");
  if (b.rows() != 1 || b.cols() != w.rows()) throw ShapeError("affine: bias shape mismatch");
  Matrix r = x * w.transpose();
  r.rowwise() += b.row(0);
  require_finite(r, "affine");
  return r;
}
inline Matrix tanh(const Matrix& a) { return a.array().tanh().matrix(); }
inline Matrix exp(const Matrix& a) {
  Matrix r = a.array().exp().matrix();
  require_finite(r, "exp");
  return r;
}
inline Matrix log(const Matrix& a) {
  if (!a.allFinite()) throw NumericError("log: non-finite input");
  Matrix r(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double v = a.data()[i];
    if (v <= 0.0) throw NumericError("log: non-positive input");
    r.data()[i] = std::log(std::max(v, kLogFloor));
  }
  return r;
}
inline Matrix logsumexp(const Matrix& a) {
  Matrix r(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    if (!std::isfinite(m)) throw NumericError("logsumexp: row without finite entries");
    r(i, 0) = m + std::log((a.row(i).array() - m).exp().sum());
  }
  require_finite(r, "logsumexp");
  return r;
}
inline Matrix sum(const Matrix& a) {
  Matrix r(1, 1);
  r(0, 0) = a.sum();
  require_finite(r, "sum");
  return r;
}
inline Matrix mean(const Matrix& a) {
  if (a.size() == 0) throw ShapeError("mean: empty operand");
  Matrix r(1, 1);
  r(0, 0) = a.mean();
  require_finite(r, "mean");
  return r;
}
inline Matrix row_sum(const Matrix& a) {
  Matrix r = a.rowwise().sum();
  require_finite(r, "row_sum");
  return r;
}
inline Matrix select_cols(const Matrix& a, std::span<const int> idx) {
  Matrix r(a.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) r.col(static_cast<Eigen::Index>(j)) = a.col(idx[j]);
  return r;
}
// Inverse of two select_cols calls over a partition of [0, width).
inline Matrix merge_cols(const Matrix& a, std::span<const int> idx_a, const Matrix& b,
                         std::span<const int> idx_b) {
  if (a.rows() != b.rows()) throw ShapeError("merge_cols: row counts differ");
  Matrix r(a.rows(), static_cast<Eigen::Index>(idx_a.size() + idx_b.size()));
  for (std::size_t j = 0; j < idx_a.size(); ++j) r.col(idx_a[j]) = a.col(static_cast<Eigen::Index>(j));
  for (std::size_t j = 0; j < idx_b.size(); ++j) r.col(idx_b[j]) = b.col(static_cast<Eigen::Index>(j));
  return r;
}
inline Matrix concat_cols(std::span<const Matrix> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix r(parts.front().rows(), cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    r.middleCols(at, p.cols()) = p;
    at += p.cols();
  }
  return r;
}
inline Matrix rowwise(const Matrix& a, const RowFunction& fn, const char* name) {
  Matrix r(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) r(i, 0) = fn.value(a.row(i));
  require_finite(r, name);
  return r;
}
inline Matrix constant_like(const Matrix&, Matrix v) { return v; }

// ---------------------------------------------------------------------------
// Tape

class Tape;

class Var {
 public:
  Var() = default;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Receives the tape and the index of the node whose gradient is complete.
  using Backward = std::function<void(Tape&, int)>;

  Tape() = default;
  explicit Tape(const ParamVector& params) : params_(&params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix v) {
    require_finite(v, "constant");
    nodes_.push_back(Node{std::move(v), Matrix(), false, -1, {}, nullptr});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Leaf bound to a slice of the tape's parameter vector; receives gradient.
  Var param(const TensorSlice& s) {
    if (params_ == nullptr) throw ShapeError("Tape::param: tape has no bound parameters");
    if (s.offset + s.size() > params_->size())
      throw ShapeError("Tape::param: slice outside parameter vector");
    nodes_.push_back(Node{params_->matrix(s), Matrix(), true, static_cast<std::ptrdiff_t>(s.offset),
                          {}, nullptr});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward, const char* op) {
    require_finite(value, op);
    bool needs = false;
    std::vector<int> ids;
    ids.reserve(parents.size());
    for (const Var& p : parents) {
      if (p.tape() != this) throw ShapeError(std::string(op) + ": operand from another tape");
      ids.push_back(p.id());
      needs = needs || nodes_[static_cast<std::size_t>(p.id())].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), Matrix(), needs, -1, std::move(ids),
                          needs ? std::move(backward) : Backward{}});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var record(Matrix value, std::span<const Var> parents, Backward backward, const char* op) {
    require_finite(value, op);
    bool needs = false;
    std::vector<int> ids;
    for (const Var& p : parents) {
      if (p.tape() != this) throw ShapeError(std::string(op) + ": operand from another tape");
      ids.push_back(p.id());
      needs = needs || nodes_[static_cast<std::size_t>(p.id())].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), Matrix(), needs, -1, std::move(ids),
                          needs ? std::move(backward) : Backward{}});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  // Adds `g` into the gradient of node `id` (ignored for constants).
  template <class Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void backward(Var root) {
    if (root.tape() != this) throw ShapeError("Tape::backward: root from another tape");
    const Matrix& v = value(root.id());
    if (v.rows() != 1 || v.cols() != 1) throw ShapeError("Tape::backward: root must be scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[static_cast<std::size_t>(root.id())].grad = Matrix::Ones(1, 1);
    for (int i = root.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, i);
      if (!nodes_[static_cast<std::size_t>(i)].grad.allFinite())
        throw NumericError("backward: non-finite gradient");
    }
  }

  // Gradient with respect to the bound parameters, in parameter order.
  std::vector<double> param_gradient() const {
    std::vector<double> g(params_ ? params_->size() : 0, 0.0);
    for (const auto& n : nodes_) {
      if (n.param_offset < 0 || n.grad.size() == 0) continue;
      Eigen::Map<RowMajorMatrix> dst(g.data() + n.param_offset, n.value.rows(), n.value.cols());
      dst += n.grad;
    }
    return g;
  }

  const std::vector<int>& parents(int id) const {
    return nodes_[static_cast<std::size_t>(id)].parents;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::ptrdiff_t param_offset = -1;
    std::vector<int> parents;
    Backward backward;
  };

  const ParamVector* params_ = nullptr;
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

inline Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, int self) {
    t.accumulate(a.id(), t.grad(self));
    t.accumulate(b.id(), t.grad(self));
  }, "add");
}
inline Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, int self) {
    t.accumulate(a.id(), t.grad(self));
    t.accumulate(b.id(), -t.grad(self));
  }, "sub");
}
inline Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, int self) {
    t.accumulate(a.id(), t.grad(self).cwiseProduct(t.value(b.id())));
    t.accumulate(b.id(), t.grad(self).cwiseProduct(t.value(a.id())));
  }, "mul");
}
inline Var scale(Var a, double k) {
  return a.tape()->record(a.value() * k, {a}, [a, k](Tape& t, int self) {
    t.accumulate(a.id(), t.grad(self) * k);
  }, "scale");
}
inline Var add_scalar(Var a, double k) {
  return a.tape()->record((a.value().array() + k).matrix(), {a}, [a](Tape& t, int self) {
    t.accumulate(a.id(), t.grad(self));
  }, "add_scalar");
}
inline Var scale_by(Var a, Var s) {
  if (s.value().size() != 1) throw ShapeError("scale_by: scale must be 1x1");
  return a.tape()->record(a.value() * s.scalar(), {a, s}, [a, s](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.accumulate(a.id(), g * t.value(s.id())(0, 0));
    Matrix gs(1, 1);
    gs(0, 0) = g.cwiseProduct(t.value(a.id())).sum();
    t.accumulate(s.id(), gs);
  }, "scale_by");
}
inline Var matvec(Var x, Var w) {
  if (x.cols() != w.cols()) throw ShapeError("matvec: input width does not match weight columns");
  return x.tape()->record(x.value() * w.value().transpose(), {x, w}, [x, w](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(x.id())) t.accumulate(x.id(), g * t.value(w.id()));
    if (t.needs_grad(w.id())) t.accumulate(w.id(), g.transpose() * t.value(x.id()));
  }, "matvec");
}
inline Var affine(Var x, Var w, Var b) {
  if (x.cols() != w.cols()) throw ShapeError("affine: input width does not match weight columns");
  if (b.rows() != 1 || b.cols() != w.rows()) throw ShapeError("affine: bias shape mismatch");
  Matrix r = x.value() * w.value().transpose();
  r.rowwise() += b.value().row(0);
  return x.tape()->record(std::move(r), {x, w, b}, [x, w, b](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(x.id())) t.accumulate(x.id(), g * t.value(w.id()));
    if (t.needs_grad(w.id())) t.accumulate(w.id(), g.transpose() * t.value(x.id()));
    if (t.needs_grad(b.id())) t.accumulate(b.id(), g.colwise().sum());
  }, "affine");
}
inline Var tanh(Var a) {
  Matrix r = a.value().array().tanh().matrix();
  return a.tape()->record(std::move(r), {a}, [a](Tape& t, int self) {
    const Matrix& y = t.value(self);
    t.accumulate(a.id(), t.grad(self).cwiseProduct((1.0 - y.array().square()).matrix()));
  }, "tanh");
}
inline Var exp(Var a) {
  Matrix r = a.value().array().exp().matrix();
  return a.tape()->record(std::move(r), {a}, [a](Tape& t, int self) {
    t.accumulate(a.id(), t.grad(self).cwiseProduct(t.value(self)));
  }, "exp");
}
inline Var log(Var a) {
  Matrix r = diff::log(a.value());
  return a.tape()->record(std::move(r), {a}, [a](Tape& t, int self) {
    const Matrix& x = t.value(a.id());
    Matrix d(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i)
      d.data()[i] = x.data()[i] >= kLogFloor ? 1.0 / x.data()[i] : 0.0;
    t.accumulate(a.id(), t.grad(self).cwiseProduct(d));
  }, "log");
}
inline Var logsumexp(Var a) {
  Matrix r = diff::logsumexp(a.value());
  return a.tape()->record(std::move(r), {a}, [a](Tape& t, int self) {
    const Matrix& x = t.value(a.id());
    const Matrix& y = t.value(self);
    Matrix soft = (x.array().colwise() - y.col(0).array()).exp().matrix();
    t.accumulate(a.id(), (soft.array().colwise() * t.grad(self).col(0).array()).matrix());
  }, "logsumexp");
}
inline Var sum(Var a) {
  Matrix r(1, 1);
  r(0, 0) = a.value().sum();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape()->record(std::move(r), {a}, [a, rows, cols](Tape& t, int self) {
    t.accumulate(a.id(), Matrix::Constant(rows, cols, t.grad(self)(0, 0)));
  }, "sum");
}
inline Var mean(Var a) {
  if (a.value().size() == 0) throw ShapeError("mean: empty operand");
  Matrix r(1, 1);
  r(0, 0) = a.value().mean();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  const double inv = 1.0 / static_cast<double>(a.value().size());
  return a.tape()->record(std::move(r), {a}, [a, rows, cols, inv](Tape& t, int self) {
    t.accumulate(a.id(), Matrix::Constant(rows, cols, t.grad(self)(0, 0) * inv));
  }, "mean");
}
inline Var row_sum(Var a) {
  Matrix r = a.value().rowwise().sum();
  const Eigen::Index cols = a.cols();
  return a.tape()->record(std::move(r), {a}, [a, cols](Tape& t, int self) {
    t.accumulate(a.id(), t.grad(self).replicate(1, cols));
  }, "row_sum");
}
inline Var select_cols(Var a, std::span<const int> idx) {
  std::vector<int> cols(idx.begin(), idx.end());
  Matrix r = diff::select_cols(a.value(), cols);
  const Eigen::Index width = a.cols();
  return a.tape()->record(std::move(r), {a}, [a, cols, width](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix full = Matrix::Zero(g.rows(), width);
    for (std::size_t j = 0; j < cols.size(); ++j) full.col(cols[j]) += g.col(static_cast<Eigen::Index>(j));
    t.accumulate(a.id(), full);
  }, "select_cols");
}
inline Var merge_cols(Var a, std::span<const int> idx_a, Var b, std::span<const int> idx_b) {
  std::vector<int> ia(idx_a.begin(), idx_a.end()), ib(idx_b.begin(), idx_b.end());
  Matrix r = diff::merge_cols(a.value(), ia, b.value(), ib);
  return a.tape()->record(std::move(r), {a, b}, [a, b, ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id())) t.accumulate(a.id(), diff::select_cols(g, ia));
    if (t.needs_grad(b.id())) t.accumulate(b.id(), diff::select_cols(g, ib));
  }, "merge_cols");
}
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  std::vector<Matrix> values;
  values.reserve(parts.size());
  for (const Var& p : parts) values.push_back(p.value());
  Matrix r = diff::concat_cols(values);
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts.front().tape()->record(std::move(r), parts, [ps](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Eigen::Index at = 0;
    for (const Var& p : ps) {
      const Eigen::Index w = t.value(p.id()).cols();
      t.accumulate(p.id(), g.middleCols(at, w));
      at += w;
    }
  }, "concat_cols");
}
inline Var rowwise(Var a, const RowFunction& fn, const char* name) {
  Matrix r = diff::rowwise(a.value(), fn, name);
  return a.tape()->record(std::move(r), {a}, [a, fn](Tape& t, int self) {
    const Matrix& x = t.value(a.id());
    const Matrix& g = t.grad(self);
    Matrix d(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) d.row(i) = fn.gradient(x.row(i)) * g(i, 0);
    t.accumulate(a.id(), d);
  }, name);
}
inline Var constant_like(const Var& like, Matrix v) { return like.tape()->constant(std::move(v)); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Driver

/// Runs `program(tape)` on a tape bound to `params` and backpropagates the
/// 1x1 result. Single-threaded with a fixed accumulation order, so identical
/// inputs give bit-identical outputs.
template <class Program>
GradResult grad_scalar(Program&& program, const ParamVector& params) {
  Tape tape(params);
  Var out = program(tape);
  tape.backward(out);
  return GradResult{out.scalar(), tape.param_gradient()};
}

template <class Program>
double evaluate(Program&& program, const ParamVector& params) {
  Tape tape(params);
  Var out = program(tape);
  if (out.value().size() != 1) throw ShapeError("evaluate: program must return a scalar");
  return out.scalar();
}

/// max_i |analytic_i - central_i| / max(1e-8, |central_i|).
template <class Program>
double finite_diff_check(Program&& program, const ParamVector& params, double epsilon) {
  if (!(epsilon > 0.0)) throw DomainError("finite_diff_check: epsilon must be positive");
  const GradResult analytic = grad_scalar(program, params);
  ParamVector probe = params;
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double base = params[i];
    probe[i] = base + epsilon;
    const double up = evaluate(program, probe);
    probe[i] = base - epsilon;
    const double down = evaluate(program, probe);
    probe[i] = base;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_check: non-finite loss at perturbed point");
    const double central = (up - down) / (2.0 * epsilon);
    const double err =
        std::abs(analytic.gradient[i] - central) / std::max(1e-8, std::abs(central));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace diff

// ---------------------------------------------------------------------------
// Single-hidden-layer tanh MLP: out = W2 tanh(W1 x + b1) + b2.

struct MlpShape {
  int in = 0;
  int hidden = 0;
  int out = 0;
};

struct MlpSlices {
  MlpShape shape;
  TensorSlice w1, b1, w2, b2;
};

inline MlpSlices add_mlp(ParamLayout& layout, int layer, const std::string& prefix, MlpShape shape) {
  MlpSlices s;
  s.shape = shape;
  s.w1 = layout.add(layer, prefix + ".W1", shape.hidden, shape.in);
  s.b1 = layout.add(layer, prefix + ".b1", 1, shape.hidden);
  s.w2 = layout.add(layer, prefix + ".W2", shape.out, shape.hidden);
  s.b2 = layout.add(layer, prefix + ".b2", 1, shape.out);
  return s;
}

// Parameter sources turn a slice into an operand of the backend in use.
struct ValueSource {
  const ParamVector* params;
  Matrix operator()(const TensorSlice& s) const { return params->matrix(s); }
};

// Trainable leaves on a tape bound to the same parameters.
struct TapeSource {
  diff::Tape* tape;
  diff::Var operator()(const TensorSlice& s) const { return tape->param(s); }
};

// Frozen parameters placed on a tape as constants (no gradient).
struct FrozenSource {
  diff::Tape* tape;
  const ParamVector* params;
  diff::Var operator()(const TensorSlice& s) const { return tape->constant(params->matrix(s)); }
};

template <class Source, class T>
T mlp_apply(const Source& src, const MlpSlices& net, const T& x) {
  if (x.cols() != net.shape.in) throw ShapeError("mlp_forward: input width mismatch");
  T hidden = diff::tanh(diff::affine(x, src(net.w1), src(net.b1)));
  return diff::affine(hidden, src(net.w2), src(net.b2));
}

/// Evaluates the MLP at every row of `input` (n x in).
inline Matrix mlp_forward(const ParamVector& params, const MlpSlices& net, const Matrix& input) {
  return mlp_apply(ValueSource{&params}, net, input);
}

}  // namespace gbnf
