#pragma once

// Trainable losses. Each one comes as a value function and as a tape program
// (`*_program`) that grad_scalar differentiates with respect to the new
// component's parameters; fixed components enter the tape as constants.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gbnf/boostcore.hpp"
#include "gbnf/diffcore.hpp"
#include "gbnf/errors.hpp"
#include "gbnf/flows.hpp"
#include "gbnf/rng.hpp"
#include "gbnf/targets.hpp"

namespace gbnf {

using TapeProgram = std::function<diff::Var(diff::Tape&)>;

// ---------------------------------------------------------------------------
// Maximum likelihood

inline double nll_loss(const FlowComponent& c, const Matrix& batch) {
  if (batch.rows() == 0) throw DomainError("nll_loss: empty batch");
  return -component_log_prob(c, batch).mean();
}

inline double nll_loss(const GBNFModel& model, const Matrix& batch) {
  if (batch.rows() == 0) throw DomainError("nll_loss: empty batch");
  return -log_prob(model, batch).mean();
}

/// -mean log g(x) over `batch` as a function of the component parameters.
inline TapeProgram nll_program(const FlowComponent& c, Matrix batch) {
  if (batch.rows() == 0) throw DomainError("nll_loss: empty batch");
  return [&c, batch = std::move(batch)](diff::Tape& t) {
    diff::Var x = t.constant(batch);
    return diff::scale(diff::mean(flow_log_prob(c, TapeSource{&t}, x)), -1.0);
  };
}

// ---------------------------------------------------------------------------
// Resampling for the multiplicative surrogate

struct ResampleWeights {
  std::vector<double> weights;
  std::string source;
};

/// w_i proportional to G(x_i)^-beta, from log G(x_i). No log-probs (stage 1)
/// gives uniform weights.
inline ResampleWeights compute_resample_weights(const std::optional<Vector>& fixed_log_probs, Eigen::Index n,
                                                double beta = 1.0, std::string source = "none") {
  if (n < 1) throw DomainError("compute_resample_weights: no data");
  if (!(beta >= 0.0)) throw DomainError("compute_resample_weights: beta must be >= 0");
  ResampleWeights r;
  r.source = std::move(source);
  r.weights.assign(static_cast<std::size_t>(n), 1.0 / static_cast<double>(n));
  if (!fixed_log_probs || beta == 0.0) return r;
  const Vector& lp = *fixed_log_probs;
  if (lp.size() != n) throw ShapeError("compute_resample_weights: one log-prob per point");
  double m = kNegInf;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::isnan(lp(i)) || lp(i) == std::numeric_limits<double>::infinity())
      throw NumericError("compute_resample_weights: fixed model log-prob is +inf or NaN at row " +
                         std::to_string(i + 1));
    m = std::max(m, -beta * std::max(lp(i), kLogDensityFloor));
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = std::exp(-beta * std::max(lp(i), kLogDensityFloor) - m);
    r.weights[static_cast<std::size_t>(i)] = w;
    total += w;
  }
  for (double& w : r.weights) w /= total;
  return r;
}

inline ResampleWeights compute_resample_weights(const GBNFModel* fixed_model, const Matrix& data,
                                                double beta = 1.0) {
  if (fixed_model == nullptr || fixed_model->empty())
    return compute_resample_weights(std::nullopt, data.rows(), beta, "uniform");
  return compute_resample_weights(log_prob(*fixed_model, data), data.rows(), beta,
                                  "G(" + std::to_string(fixed_model->size()) + ")");
}

/// n i.i.d. row indices drawn with replacement from `weights`.
inline std::vector<Eigen::Index> resample_indices(const ResampleWeights& weights, Eigen::Index n, Rng& rng) {
  if (n < 1) throw DomainError("resample: n must be >= 1");
  std::discrete_distribution<Eigen::Index> pick(weights.weights.begin(), weights.weights.end());
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  for (auto& i : idx) i = pick(rng);
  return idx;
}

inline Matrix gather_rows(const Matrix& data, const std::vector<Eigen::Index>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), data.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = data.row(idx[i]);
  return out;
}

inline Matrix resample(const Matrix& data, const ResampleWeights& weights, Eigen::Index n, Rng& rng) {
  if (static_cast<std::size_t>(data.rows()) != weights.weights.size())
    throw ShapeError("resample: one weight per data row");
  return gather_rows(data, resample_indices(weights, n, rng));
}

// ---------------------------------------------------------------------------
// Additive density-estimation update with entropy regularization:
//   -(1/n) sum_i g(x_i) / G(x_i) + lambda sum_i g(x_i) log g(x_i)

inline constexpr double kMaxLogRatio = 700.0;

inline Vector guarded_log_fixed(const Vector& log_fixed) { return log_fixed.cwiseMax(kLogDensityFloor); }

inline void check_ratio_guard(const Vector& log_new, const Vector& log_fixed) {
  for (Eigen::Index i = 0; i < log_new.size(); ++i)
    if (log_new(i) - log_fixed(i) > kMaxLogRatio || log_new(i) > kMaxLogRatio)
      throw NumericError("additive_de_objective: density ratio overflow at row " + std::to_string(i + 1));
}

inline double additive_de_value(const Vector& log_new, const Vector& log_fixed, double lambda) {
  const Vector lf = guarded_log_fixed(log_fixed);
  check_ratio_guard(log_new, lf);
  const auto n = static_cast<double>(log_new.size());
  const Eigen::ArrayXd g = log_new.array().exp();
  return -(log_new - lf).array().exp().sum() / n + lambda * (g * log_new.array()).sum();
}

inline double additive_de_objective(const FlowComponent& c, const Matrix& batch, const GBNFModel& fixed,
                                    double lambda) {
  if (!(lambda > 0.0)) throw DomainError("additive_de_objective: lambda must be positive");
  if (batch.rows() == 0) throw DomainError("additive_de_objective: empty batch");
  return additive_de_value(component_log_prob(c, batch), log_prob(fixed, batch), lambda);
}

/// `log_fixed` holds log G(x_i) for the rows of `batch`.
inline TapeProgram additive_de_program(const FlowComponent& c, Matrix batch, Vector log_fixed, double lambda) {
  if (!(lambda > 0.0)) throw DomainError("additive_de_objective: lambda must be positive");
  if (batch.rows() == 0 || batch.rows() != log_fixed.size())
    throw ShapeError("additive_de_objective: batch and fixed log-probs differ in length");
  return [&c, batch = std::move(batch), lf = guarded_log_fixed(log_fixed), lambda](diff::Tape& t) {
    diff::Var x = t.constant(batch);
    diff::Var lg = flow_log_prob(c, TapeSource{&t}, x);
    check_ratio_guard(lg.value().col(0), lf);
    diff::Var ratio = diff::exp(diff::sub(lg, t.constant(lf)));
    diff::Var entropy = diff::sum(diff::mul(diff::exp(lg), lg));
    return diff::add(diff::scale(diff::mean(ratio), -1.0), diff::scale(entropy, lambda));
  };
}

// ---------------------------------------------------------------------------
// Entropy-regularized boosted reverse KL for density matching:
//   E_{z0}[ lambda log g(z) - log p~(z) + log G(z) ],  z = f(z0)

struct ReverseKlOptions {
  // Replaces the exact mixture log G(z) by log g_j(z) for one j ~ Categorical(w)
  // drawn per batch.
  bool stochastic_fixed = false;
};

/// Program over a fixed batch of base draws `z0`. `fixed` may be null or
/// empty (stage 1), in which case the fixed term is omitted. `pick` selects
/// the fixed component for the stochastic variant.
inline TapeProgram reverse_kl_program(const FlowComponent& c, const GBNFModel* fixed, const EnergyTarget& target,
                                      double lambda, Matrix z0, std::optional<std::size_t> pick = std::nullopt) {
  if (!(lambda > 0.0)) throw DomainError("boosted_reverse_kl_objective: lambda must be positive");
  if (z0.rows() < 1) throw DomainError("boosted_reverse_kl_objective: n_mc must be >= 1");
  if (z0.cols() != 2) throw ShapeError("boosted_reverse_kl_objective: energy targets are two-dimensional");
  return [&c, fixed, target, lambda, z0 = std::move(z0), pick](diff::Tape& t) {
    diff::Var base = t.constant(z0);
    FlowResult<diff::Var> fwd = flow_forward(c, TapeSource{&t}, base);
    diff::Var log_g = diff::sub(base_log_prob(base), fwd.logdet);
    diff::Var log_p = diff::rowwise(fwd.out, target.row_function(), "energy");
    diff::Var per_row = diff::sub(diff::scale(log_g, lambda), log_p);
    if (fixed != nullptr && !fixed->empty()) {
      const auto& w = fixed->weights();
      std::optional<diff::Var> log_fixed;
      if (pick) {
        const FlowComponent& fc = fixed->component(*pick);
        log_fixed = flow_log_prob(fc, FrozenSource{&t, &fc.params()}, fwd.out);
      } else {
        std::vector<diff::Var> cols;
        Matrix log_w(z0.rows(), 0);
        std::vector<double> lw;
        for (std::size_t j = 0; j < fixed->size(); ++j) {
          if (!(w[j] > 0.0)) continue;
          const FlowComponent& fc = fixed->component(j);
          cols.push_back(flow_log_prob(fc, FrozenSource{&t, &fc.params()}, fwd.out));
          lw.push_back(std::log(w[j]));
        }
        log_w.resize(z0.rows(), static_cast<Eigen::Index>(lw.size()));
        for (std::size_t j = 0; j < lw.size(); ++j) log_w.col(static_cast<Eigen::Index>(j)).setConstant(lw[j]);
        log_fixed = diff::logsumexp(diff::add(diff::concat_cols(cols), t.constant(log_w)));
      }
      per_row = diff::add(per_row, *log_fixed);
    }
    return diff::mean(per_row);
  };
}

/// Draws the base batch and (optionally) the stochastic component index from `rng`.
inline std::pair<Matrix, std::optional<std::size_t>> draw_reverse_kl_inputs(const GBNFModel* fixed, int dim,
                                                                            Eigen::Index n_mc,
                                                                            const ReverseKlOptions& opt, Rng& rng) {
  if (n_mc < 1) throw DomainError("boosted_reverse_kl_objective: n_mc must be >= 1");
  Matrix z0 = standard_normal(n_mc, dim, rng);
  std::optional<std::size_t> pick;
  if (opt.stochastic_fixed && fixed != nullptr && !fixed->empty()) {
    std::discrete_distribution<std::size_t> cat(fixed->weights().begin(), fixed->weights().end());
    pick = cat(rng);
  }
  return {std::move(z0), pick};
}

inline double boosted_reverse_kl_objective(const FlowComponent& c, const GBNFModel* fixed,
                                           const EnergyTarget& target, double lambda, Eigen::Index n_mc, Rng& rng,
                                           const ReverseKlOptions& opt = {}) {
  auto [z0, pick] = draw_reverse_kl_inputs(fixed, c.dim(), n_mc, opt, rng);
  return diff::evaluate(reverse_kl_program(c, fixed, target, lambda, std::move(z0), pick), c.params());
}

// ---------------------------------------------------------------------------
// Reverse-KL evaluation of a whole additive model

/// Common-random-number evaluation set for KL(G || p) up to log Z: for every
/// component j, the same base draws z0 are pushed through f_j, and every
/// mixture member is evaluated at the resulting points. The estimate is
/// sum_j w_j mean_i [log G(f_j(z0_i)) - log p~(f_j(z0_i))].
class MatchingEvalSet {
 public:
  MatchingEvalSet(const EnergyTarget& target, Matrix z0) : target_(target), z0_(std::move(z0)) {}

  // Pushes the base draws through `c` and records log-densities of every
  // component already added at the new points (and of `c` at the old ones).
  void add_component(const FlowComponent& c) {
    Block b;
    LayerMap fwd = component_forward(c, z0_);
    b.points = std::move(fwd.out);
    b.log_target = target_.log_unnorm(b.points);
    const std::size_t m = blocks_.size() + 1;
    b.log_probs.resize(z0_.rows(), static_cast<Eigen::Index>(m));
    for (std::size_t j = 0; j + 1 < m; ++j)
      b.log_probs.col(static_cast<Eigen::Index>(j)) = component_log_prob(components_[j], b.points);
    b.log_probs.col(static_cast<Eigen::Index>(m - 1)) = standard_normal_log_prob(z0_) - fwd.logdet;
    for (std::size_t j = 0; j + 1 < m; ++j) {
      Block& old = blocks_[j];
      old.log_probs.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(m));
      old.log_probs.col(static_cast<Eigen::Index>(m - 1)) = component_log_prob(c, old.points);
    }
    blocks_.push_back(std::move(b));
    components_.push_back(c);
  }

  void pop_component() {
    blocks_.pop_back();
    components_.pop_back();
    for (auto& b : blocks_) b.log_probs.conservativeResize(Eigen::NoChange, b.log_probs.cols() - 1);
  }

  std::size_t size() const { return blocks_.size(); }

  double value(std::span<const double> w) const {
    if (w.size() != blocks_.size()) throw ShapeError("MatchingEvalSet: one weight per component");
    double total = 0.0;
    for (std::size_t j = 0; j < blocks_.size(); ++j) {
      if (!(w[j] > 0.0)) continue;
      const Block& b = blocks_[j];
      const Vector lg = additive_log_prob_from(b.log_probs, w);
      total += w[j] * (lg - b.log_target).mean();
    }
    return total;
  }

 private:
  struct Block {
    Matrix points;
    Matrix log_probs;  // n x (components so far)
    Vector log_target;
  };
  EnergyTarget target_;
  Matrix z0_;
  std::vector<Block> blocks_;
  std::vector<FlowComponent> components_;
};

/// KL(G || p) + log Z estimated with `n` base draws shared across components.
inline double reverse_kl_estimate(const GBNFModel& model, const EnergyTarget& target, Eigen::Index n, Rng& rng) {
  if (model.mode() != BoostMode::additive) throw StateError("reverse_kl_estimate: model is multiplicative");
  MatchingEvalSet set(target, standard_normal(n, model.dim(), rng));
  for (const auto& c : model.components()) set.add_component(c);
  return set.value(model.weights());
}

}  // namespace gbnf
