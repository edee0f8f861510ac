#pragma once

// Affine coupling flows with a fixed standard-normal base density.
//
// A component with K steps is K coupling layers. Layer l passes the even
// coordinates through when l is even and the odd coordinates when l is odd, so
// consecutive layers use complementary masks. For d = 2 this is a coordinate
// swap between layers; with K = 1 the pass-through coordinates keep their
// standard-normal marginal.
//
// Coupling layer, with z_m the pass-through coordinates and z_t the rest:
//   s = gate * tanh(scale_net(z_m)),  t = shift_net(z_m)
//   z'_t = z_t * exp(s) + t,          logdet = sum(s)
//
// Parameter layout per layer, in order: scale.W1 scale.b1 scale.W2 scale.b2
// gate shift.W1 shift.b1 shift.W2 shift.b2, each row-major.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "gbnf/diffcore.hpp"
#include "gbnf/errors.hpp"
#include "gbnf/rng.hpp"

namespace gbnf {

struct FlowShape {
  int dim = 2;
  int steps = 1;  // K
  int hidden = 256;

  bool operator==(const FlowShape&) const = default;
};

struct CouplingLayer {
  std::vector<int> pass;
  std::vector<int> trans;
  MlpSlices scale;
  TensorSlice gate;
  MlpSlices shift;
};

class FlowComponent {
 public:
  FlowComponent() = default;

  // All parameters zero: every layer is the identity map.
  explicit FlowComponent(const FlowShape& shape) : shape_(shape) {
    if (shape.dim < 2) throw ShapeError("FlowComponent: coupling flows need dim >= 2");
    if (shape.steps < 1) throw ShapeError("FlowComponent: need at least one flow step");
    if (shape.hidden < 0) throw ShapeError("FlowComponent: negative hidden width");
    ParamLayout layout;
    const int layer_count = shape.steps;
    for (int l = 0; l < layer_count; ++l) {
      CouplingLayer layer;
      for (int i = 0; i < shape.dim; ++i) ((i % 2) == (l % 2) ? layer.pass : layer.trans).push_back(i);
      const MlpShape net{static_cast<int>(layer.pass.size()), shape.hidden,
                         static_cast<int>(layer.trans.size())};
      layer.scale = add_mlp(layout, l, "scale", net);
      layer.gate = layout.add(l, "gate", 1, 1);
      layer.shift = add_mlp(layout, l, "shift", net);
      layers_.push_back(std::move(layer));
    }
    params_ = ParamVector(std::move(layout));
  }

  const FlowShape& shape() const { return shape_; }
  int dim() const { return shape_.dim; }
  const std::vector<CouplingLayer>& layers() const { return layers_; }
  ParamVector& params() { return params_; }
  const ParamVector& params() const { return params_; }

 private:
  FlowShape shape_;
  std::vector<CouplingLayer> layers_;
  ParamVector params_;
};

/// Fresh component that is still the identity map: hidden weights are drawn
/// uniform in +-1/sqrt(fan_in), the scale gate and the shift output layer are
/// zero.
inline FlowComponent make_component(const FlowShape& shape, Rng& rng) {
  FlowComponent c(shape);
  auto fill = [&](const TensorSlice& s, int fan_in) {
    if (s.size() == 0) return;
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < s.size(); ++i) c.params()[s.offset + i] = u(rng);
  };
  for (const auto& layer : c.layers()) {
    fill(layer.scale.w1, layer.scale.shape.in);
    fill(layer.scale.b1, layer.scale.shape.in);
    fill(layer.scale.w2, layer.scale.shape.hidden);
    fill(layer.scale.b2, layer.scale.shape.hidden);
    fill(layer.shift.w1, layer.shift.shape.in);
    fill(layer.shift.b1, layer.shift.shape.in);
  }
  return c;
}

template <class T>
struct FlowResult {
  T out;
  T logdet;  // n x 1
};

template <class Source, class T>
FlowResult<T> coupling_forward(const CouplingLayer& layer, const Source& src, const T& z) {
  T zm = diff::select_cols(z, layer.pass);
  T zt = diff::select_cols(z, layer.trans);
  T s = diff::scale_by(diff::tanh(mlp_apply(src, layer.scale, zm)), src(layer.gate));
  T t = mlp_apply(src, layer.shift, zm);
  T yt = diff::add(diff::mul(zt, diff::exp(s)), t);
  return {diff::merge_cols(zm, layer.pass, yt, layer.trans), diff::row_sum(s)};
}

template <class Source, class T>
FlowResult<T> coupling_inverse(const CouplingLayer& layer, const Source& src, const T& x) {
  T xm = diff::select_cols(x, layer.pass);
  T xt = diff::select_cols(x, layer.trans);
  T s = diff::scale_by(diff::tanh(mlp_apply(src, layer.scale, xm)), src(layer.gate));
  T t = mlp_apply(src, layer.shift, xm);
  T neg_s = diff::scale(s, -1.0);
  T zt = diff::mul(diff::sub(xt, t), diff::exp(neg_s));
  return {diff::merge_cols(xm, layer.pass, zt, layer.trans), diff::row_sum(neg_s)};
}

template <class Source, class T>
FlowResult<T> flow_forward(const FlowComponent& c, const Source& src, const T& z0) {
  if (z0.cols() != c.dim()) throw ShapeError("flow_forward: input width does not match dim");
  FlowResult<T> acc = coupling_forward(c.layers().front(), src, z0);
  for (std::size_t l = 1; l < c.layers().size(); ++l) {
    FlowResult<T> step = coupling_forward(c.layers()[l], src, acc.out);
    acc.out = step.out;
    acc.logdet = diff::add(acc.logdet, step.logdet);
  }
  return acc;
}

template <class Source, class T>
FlowResult<T> flow_inverse(const FlowComponent& c, const Source& src, const T& x) {
  if (x.cols() != c.dim()) throw ShapeError("flow_inverse: input width does not match dim");
  const auto& layers = c.layers();
  FlowResult<T> acc = coupling_inverse(layers.back(), src, x);
  for (std::size_t l = layers.size() - 1; l-- > 0;) {
    FlowResult<T> step = coupling_inverse(layers[l], src, acc.out);
    acc.out = step.out;
    acc.logdet = diff::add(acc.logdet, step.logdet);
  }
  return acc;
}

// log N(u; 0, I) per row.
template <class T>
T base_log_prob(const T& u) {
  const double norm = -0.5 * static_cast<double>(u.cols()) * std::log(2.0 * std::numbers::pi);
  return diff::add_scalar(diff::scale(diff::row_sum(diff::mul(u, u)), -0.5), norm);
}

// log g(x) = log p0(f^-1(x)) + log|det d f^-1 / dx|, n x 1.
template <class Source, class T>
T flow_log_prob(const FlowComponent& c, const Source& src, const T& x) {
  FlowResult<T> inv = flow_inverse(c, src, x);
  return diff::add(base_log_prob(inv.out), inv.logdet);
}

// ---------------------------------------------------------------------------
// Value-level API

struct LayerMap {
  Matrix out;
  Vector logdet;
};

inline void require_dim(const FlowComponent& c, const Matrix& x, const char* op) {
  if (x.cols() != c.dim())
    throw ShapeError(std::string(op) + ": expected " + std::to_string(c.dim()) + " columns, got " +
                     std::to_string(x.cols()));
}

inline LayerMap layer_forward(const FlowComponent& c, std::size_t layer, const Matrix& z) {
  require_dim(c, z, "layer_forward");
  auto r = coupling_forward(c.layers().at(layer), ValueSource{&c.params()}, z);
  return {std::move(r.out), r.logdet.col(0)};
}

inline LayerMap layer_inverse(const FlowComponent& c, std::size_t layer, const Matrix& x) {
  require_dim(c, x, "layer_inverse");
  auto r = coupling_inverse(c.layers().at(layer), ValueSource{&c.params()}, x);
  return {std::move(r.out), r.logdet.col(0)};
}

inline constexpr Eigen::Index kEvalChunk = 8192;

inline LayerMap component_forward(const FlowComponent& c, const Matrix& z0) {
  require_dim(c, z0, "component_forward");
  LayerMap out{Matrix(z0.rows(), z0.cols()), Vector(z0.rows())};
  for (Eigen::Index at = 0; at < z0.rows(); at += kEvalChunk) {
    const Eigen::Index n = std::min(kEvalChunk, z0.rows() - at);
    auto r = flow_forward(c, ValueSource{&c.params()}, Matrix(z0.middleRows(at, n)));
    out.out.middleRows(at, n) = r.out;
    out.logdet.segment(at, n) = r.logdet.col(0);
  }
  return out;
}

inline LayerMap component_inverse(const FlowComponent& c, const Matrix& x) {
  require_dim(c, x, "component_inverse");
  LayerMap out{Matrix(x.rows(), x.cols()), Vector(x.rows())};
  for (Eigen::Index at = 0; at < x.rows(); at += kEvalChunk) {
    const Eigen::Index n = std::min(kEvalChunk, x.rows() - at);
    auto r = flow_inverse(c, ValueSource{&c.params()}, Matrix(x.middleRows(at, n)));
    out.out.middleRows(at, n) = r.out;
    out.logdet.segment(at, n) = r.logdet.col(0);
  }
  return out;
}

inline Vector standard_normal_log_prob(const Matrix& u) { return base_log_prob(u).col(0); }

inline Vector component_log_prob(const FlowComponent& c, const Matrix& x) {
  LayerMap inv = component_inverse(c, x);
  return standard_normal_log_prob(inv.out) + inv.logdet;
}

inline Matrix standard_normal(Eigen::Index n, int dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix z(n, dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) z(i, j) = normal(rng);
  return z;
}

struct FlowSample {
  Matrix points;
  Vector log_probs;
};

/// x = f(z0) with z0 ~ N(0, I); log g(x) = log p0(z0) - logdet.
inline FlowSample component_sample(const FlowComponent& c, Eigen::Index n, Rng& rng) {
  if (n < 1) throw DomainError("component_sample: n must be >= 1");
  Matrix z0 = standard_normal(n, c.dim(), rng);
  LayerMap fwd = component_forward(c, z0);
  return {std::move(fwd.out), standard_normal_log_prob(z0) - fwd.logdet};
}

}  // namespace gbnf
