#pragma once

// Gradient-boosted mixture of flow components.
//
// Additive mode:        G_c = (1 - rho_c) G_{c-1} + rho_c g_c
// Multiplicative mode:  G_c = prod_j g_j^{rho_j} / Gamma_c
//
// In additive mode the stagewise rho are folded into normalized mixture
// weights w; stage 1 always gets w_1 = 1. In multiplicative mode rho_j is
// the exponent of component j and Gamma_c is estimated by importance
// sampling from the equal-weight additive mixture of the same components.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gbnf/diffcore.hpp"
#include "gbnf/errors.hpp"
#include "gbnf/flows.hpp"
#include "gbnf/rng.hpp"

namespace gbnf {

enum class BoostMode { additive, multiplicative };

inline const char* to_string(BoostMode m) {
  return m == BoostMode::additive ? "additive" : "multiplicative";
}

// log of the density floor exp(-700) applied before ratio computations.
inline constexpr double kLogDensityFloor = -700.0;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct PartitionEstimate {
  double log_value = 0.0;
  double stderr_log = 0.0;
  double ess = 0.0;
  bool valid = false;
};

class GBNFModel {
 public:
  GBNFModel() = default;
  GBNFModel(BoostMode mode, FlowShape shape) : mode_(mode), shape_(shape) {}

  BoostMode mode() const { return mode_; }
  const FlowShape& shape() const { return shape_; }
  int dim() const { return shape_.dim; }
  std::size_t size() const { return components_.size(); }
  bool empty() const { return components_.empty(); }

  const std::vector<FlowComponent>& components() const { return components_; }
  const FlowComponent& component(std::size_t i) const { return components_.at(i); }
  const std::vector<double>& stagewise_rho() const { return rho_; }
  const std::vector<double>& weights() const { return weights_; }
  const PartitionEstimate& partition() const { return partition_; }

  void append(FlowComponent c, double rho) {
    if (!(rho >= 0.0 && rho <= 1.0)) throw DomainError("append_component: rho must lie in [0, 1]");
    if (!(c.shape() == shape_)) throw ShapeError("append_component: component shape differs from model");
    if (components_.empty()) {
      weights_ = {1.0};
    } else {
      for (double& w : weights_) w *= (1.0 - rho);
      weights_.push_back(rho);
    }
    rho_.push_back(rho);
    components_.push_back(std::move(c));
    partition_.valid = false;
  }

  // Replaces component i's parameters; partition becomes stale.
  void replace_component(std::size_t i, FlowComponent c) {
    if (!(c.shape() == shape_)) throw ShapeError("replace_component: shape mismatch");
    components_.at(i) = std::move(c);
    partition_.valid = false;
  }

  /// Sets additive weights directly and re-derives the stagewise rho with
  /// rho_j = w_j / (w_1 + ... + w_j); weights are then recomputed from rho so
  /// the two stay consistent.
  void set_weights(std::vector<double> w) {
    if (w.size() != components_.size()) throw ShapeError("set_weights: one weight per component");
    double total = 0.0;
    for (double v : w) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("set_weights: weights must be >= 0");
      total += v;
    }
    if (!(total > 0.0)) throw DomainError("set_weights: weights sum to zero");
    for (double& v : w) v /= total;
    std::vector<double> rho(w.size());
    double prefix = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      prefix += w[j];
      rho[j] = j == 0 ? 1.0 : (prefix > 0.0 ? std::clamp(w[j] / prefix, 0.0, 1.0) : 0.0);
    }
    set_stagewise_rho(std::move(rho));
  }

  void set_stagewise_rho(std::vector<double> rho) {
    if (rho.size() != components_.size()) throw ShapeError("set_stagewise_rho: size mismatch");
    for (double r : rho)
      if (!(r >= 0.0 && r <= 1.0)) throw DomainError("set_stagewise_rho: rho must lie in [0, 1]");
    rho_ = std::move(rho);
    weights_.assign(rho_.size(), 0.0);
    for (std::size_t j = 0; j < rho_.size(); ++j) {
      double w = j == 0 ? 1.0 : rho_[j];
      for (std::size_t k = j + 1; k < rho_.size(); ++k) w *= (1.0 - rho_[k]);
      weights_[j] = w;
    }
    partition_.valid = false;
  }

  void set_partition(const PartitionEstimate& p) { partition_ = p; }
  void mark_partition_stale() { partition_.valid = false; }

  // Restores every field verbatim (checkpoint loading).
  void restore(std::vector<FlowComponent> comps, std::vector<double> rho, std::vector<double> w,
               PartitionEstimate p) {
    if (rho.size() != comps.size() || w.size() != comps.size())
      throw ShapeError("GBNFModel::restore: inconsistent lengths");
    components_ = std::move(comps);
    rho_ = std::move(rho);
    weights_ = std::move(w);
    partition_ = p;
  }

 private:
  BoostMode mode_ = BoostMode::additive;
  FlowShape shape_;
  std::vector<FlowComponent> components_;
  std::vector<double> rho_;
  std::vector<double> weights_;
  PartitionEstimate partition_;
};

// ---------------------------------------------------------------------------
// log-space helpers

inline double log_sum_exp(std::span<const double> v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double safe_log(double w) { return w > 0.0 ? std::log(w) : kNegInf; }

/// log((1 - rho) exp(a) + rho exp(b)) without leaving log space.
inline double log_blend(double log_fixed, double log_new, double rho) {
  const double terms[2] = {safe_log(1.0 - rho) + log_fixed, safe_log(rho) + log_new};
  if (rho <= 0.0) return log_fixed;
  if (rho >= 1.0) return log_new;
  return log_sum_exp(terms);
}

// n x c matrix of component log-densities.
inline Matrix log_prob_matrix(const GBNFModel& model, const Matrix& x) {
  Matrix out(x.rows(), static_cast<Eigen::Index>(model.size()));
  for (std::size_t j = 0; j < model.size(); ++j)
    out.col(static_cast<Eigen::Index>(j)) = component_log_prob(model.component(j), x);
  return out;
}

inline Vector additive_log_prob_from(const Matrix& component_log_probs, std::span<const double> w) {
  Vector out(component_log_probs.rows());
  std::vector<double> terms(w.size());
  for (Eigen::Index i = 0; i < component_log_probs.rows(); ++i) {
    for (std::size_t j = 0; j < w.size(); ++j)
      terms[j] = safe_log(w[j]) + component_log_probs(i, static_cast<Eigen::Index>(j));
    out(i) = log_sum_exp(terms);
    if (!std::isfinite(out(i))) throw NumericError("additive_log_prob: all component densities vanish");
  }
  return out;
}

/// log sum_j w_j g_j(x) per row of x.
inline Vector additive_log_prob(const GBNFModel& model, const Matrix& x) {
  if (model.mode() != BoostMode::additive) throw StateError("additive_log_prob: model is multiplicative");
  if (model.empty()) throw StateError("additive_log_prob: model has no components");
  return additive_log_prob_from(log_prob_matrix(model, x), model.weights());
}

// sum_j rho_j log g_j(x), the log of the unnormalized multiplicative density.
inline Vector unnormalized_log_density(const GBNFModel& model, const Matrix& x) {
  Vector out = Vector::Zero(x.rows());
  for (std::size_t j = 0; j < model.size(); ++j) {
    const double r = model.stagewise_rho()[j];
    if (r == 0.0) continue;
    out += r * component_log_prob(model.component(j), x);
  }
  return out;
}

inline Vector multiplicative_log_prob(const GBNFModel& model, const Matrix& x) {
  if (model.mode() != BoostMode::multiplicative)
    throw StateError("multiplicative_log_prob: model is additive");
  if (!model.partition().valid)
    throw StateError("multiplicative_log_prob: partition estimate is stale; re-estimate it first");
  return (unnormalized_log_density(model, x).array() - model.partition().log_value).matrix();
}

inline Vector log_prob(const GBNFModel& model, const Matrix& x) {
  return model.mode() == BoostMode::additive ? additive_log_prob(model, x)
                                             : multiplicative_log_prob(model, x);
}

/// Posterior component responsibilities w_j g_j(x) / G(x), n x c (additive).
inline Matrix responsibilities(const GBNFModel& model, const Matrix& x) {
  Matrix lp = log_prob_matrix(model, x);
  Vector total = additive_log_prob_from(lp, model.weights());
  Matrix r(lp.rows(), lp.cols());
  for (Eigen::Index j = 0; j < lp.cols(); ++j)
    r.col(j) = ((lp.col(j).array() + safe_log(model.weights()[static_cast<std::size_t>(j)])) -
                total.array())
                   .exp()
                   .matrix();
  return r;
}

// ---------------------------------------------------------------------------
// Partition function

/// Draws from the equal-weight mixture of the first `proposal_count`
/// components and stores every component's log-density at the draws, so the
/// importance-sampling estimate can be recomputed for any exponent vector.
class PartitionPool {
 public:
  PartitionPool(std::span<const FlowComponent> comps, std::size_t proposal_count, Eigen::Index n,
                Rng& rng) {
    if (proposal_count < 1 || proposal_count > comps.size())
      throw DomainError("PartitionPool: bad proposal component count");
    if (n < 1) throw DomainError("PartitionPool: need samples");
    const int dim = comps.front().dim();
    std::uniform_int_distribution<std::size_t> pick(0, proposal_count - 1);
    std::vector<std::size_t> ids(static_cast<std::size_t>(n));
    for (auto& id : ids) id = pick(rng);
    points_.resize(n, dim);
    for (std::size_t j = 0; j < proposal_count; ++j) {
      const auto count = static_cast<Eigen::Index>(std::count(ids.begin(), ids.end(), j));
      if (count == 0) continue;
      FlowSample s = component_sample(comps[j], count, rng);
      Eigen::Index k = 0;
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == j) points_.row(static_cast<Eigen::Index>(i)) = s.points.row(k++);
    }
    log_probs_.resize(n, static_cast<Eigen::Index>(comps.size()));
    for (std::size_t j = 0; j < comps.size(); ++j)
      log_probs_.col(static_cast<Eigen::Index>(j)) =
          component_log_prob(comps[j], points_).cwiseMax(kLogDensityFloor);
    std::vector<double> equal(proposal_count, 1.0 / static_cast<double>(proposal_count));
    log_proposal_ = additive_log_prob_from(log_probs_.leftCols(static_cast<Eigen::Index>(proposal_count)),
                                           equal);
  }

  const Matrix& points() const { return points_; }
  const Matrix& log_probs() const { return log_probs_; }
  const Vector& log_proposal() const { return log_proposal_; }
  Eigen::Index size() const { return points_.rows(); }

  // log importance ratios log(prod_j g_j^{e_j} / q) at the pool points.
  Vector log_ratios(std::span<const double> exponents) const {
    if (exponents.size() != static_cast<std::size_t>(log_probs_.cols()))
      throw ShapeError("PartitionPool: one exponent per component");
    double total = 0.0;
    for (double e : exponents) total += e;
    if (!(total > 0.0))
      throw DomainError("estimate_log_partition: total exponent is zero, density is not integrable");
    Vector r = -log_proposal_;
    for (std::size_t j = 0; j < exponents.size(); ++j)
      if (exponents[j] != 0.0) r += exponents[j] * log_probs_.col(static_cast<Eigen::Index>(j));
    return r;
  }

  PartitionEstimate estimate(std::span<const double> exponents) const {
    return summarize(log_ratios(exponents));
  }

  static PartitionEstimate summarize(const Vector& log_ratio) {
    const auto n = static_cast<double>(log_ratio.size());
    const double m = log_ratio.maxCoeff();
    if (!std::isfinite(m)) throw NumericError("estimate_log_partition: non-finite importance ratio");
    const Eigen::ArrayXd w = (log_ratio.array() - m).exp();
    const double sw = w.sum();
    const double mean = sw / n;
    const double var = log_ratio.size() > 1 ? (w - mean).square().sum() / (n - 1.0) : 0.0;
    PartitionEstimate p;
    p.log_value = m + std::log(mean);
    p.stderr_log = std::sqrt(var / n) / mean;
    p.ess = sw * sw / w.square().sum();
    p.valid = true;
    if (p.ess < 10.0) throw DomainError("estimate_log_partition: effective sample size below 10 (degenerate proposal)");
    return p;
  }

 private:
  Matrix points_;
  Matrix log_probs_;
  Vector log_proposal_;
};

/// Importance-sampling estimate of log Gamma = log int prod_j g_j^{rho_j}.
inline PartitionEstimate estimate_log_partition(const GBNFModel& model, Eigen::Index n_samples, Rng& rng) {
  if (model.mode() != BoostMode::multiplicative)
    throw StateError("estimate_log_partition: model is additive (Gamma = 1)");
  if (model.empty()) throw StateError("estimate_log_partition: model has no components");
  if (n_samples < 1000) throw DomainError("estimate_log_partition: need at least 1000 samples");
  PartitionPool pool(model.components(), model.size(), n_samples, rng);
  return pool.estimate(model.stagewise_rho());
}

struct RecursionCheck {
  double direct = 0.0;      // log Gamma_c, direct estimate
  double recursive = 0.0;   // log Gamma_{c-1} + log E_{G_{c-1}}[g_c^rho_c]
  double discrepancy = 0.0;
  double combined_stderr = 0.0;
};

/// Compares the direct estimate of log Gamma_c against the stage recursion
/// Gamma_c = Gamma_{c-1} E_{G_{c-1}}[g_c^{rho_c}], with the expectation taken
/// by sampling-importance-resampling from G_{c-1}. Diagnostic only.
inline RecursionCheck recursion_check(const GBNFModel& model, Eigen::Index n_samples, Rng& rng) {
  if (model.mode() != BoostMode::multiplicative) throw StateError("recursion_check: model is additive");
  if (model.size() < 2) throw StateError("recursion_check: need at least two components");
  if (n_samples < 1000) throw DomainError("recursion_check: need at least 1000 samples");
  const std::size_t c = model.size();
  const auto& rho = model.stagewise_rho();

  RecursionCheck out;
  PartitionPool direct_pool(model.components(), c, n_samples, rng);
  const PartitionEstimate direct = direct_pool.estimate(rho);

  PartitionPool prev_pool(model.components(), c - 1, n_samples, rng);
  std::vector<double> prev_rho(rho.begin(), rho.end());
  prev_rho.back() = 0.0;
  const Vector log_ratio = prev_pool.log_ratios(prev_rho);
  const PartitionEstimate prev = PartitionPool::summarize(log_ratio);

  // Self-normalized weights of the pool as a sample from G_{c-1}.
  const double m = log_ratio.maxCoeff();
  Eigen::ArrayXd w = (log_ratio.array() - m).exp();
  w /= w.sum();
  const Eigen::ArrayXd log_h =
      rho.back() * prev_pool.log_probs().col(static_cast<Eigen::Index>(c - 1)).array();

  std::discrete_distribution<Eigen::Index> pick(w.data(), w.data() + w.size());
  const double h_max = log_h.maxCoeff();
  Eigen::ArrayXd h_draws(n_samples);
  for (Eigen::Index i = 0; i < n_samples; ++i) h_draws(i) = std::exp(log_h(pick(rng)) - h_max);
  const double mean_h = h_draws.mean();
  if (!(mean_h > 0.0)) throw NumericError("recursion_check: vanishing expectation");
  const double n = static_cast<double>(n_samples);
  const double var_resample = (h_draws - mean_h).square().sum() / (n - 1.0) / n;
  const Eigen::ArrayXd h_pool = (log_h - h_max).exp();
  const double mu_snis = (w * h_pool).sum();
  const double var_snis = (w.square() * (h_pool - mu_snis).square()).sum();
  const double se_expect = std::sqrt(var_resample + var_snis) / mean_h;

  out.direct = direct.log_value;
  out.recursive = prev.log_value + h_max + std::log(mean_h);
  out.discrepancy = std::abs(out.direct - out.recursive);
  out.combined_stderr = std::sqrt(direct.stderr_log * direct.stderr_log +
                                  prev.stderr_log * prev.stderr_log + se_expect * se_expect);
  return out;
}

// ---------------------------------------------------------------------------
// Sampling and structure edits

struct MixtureSample {
  Matrix points;
  std::vector<int> component_ids;  // zero-based
};

/// j ~ Categorical(w), then x ~ g_j. Additive models only.
inline MixtureSample sample_mixture(const GBNFModel& model, Eigen::Index n, Rng& rng) {
  if (model.mode() != BoostMode::additive)
    throw StateError("sample_mixture: exact sampling from a multiplicative model is not supported");
  if (model.empty()) throw StateError("sample_mixture: model has no components");
  if (n < 0) throw DomainError("sample_mixture: negative sample count");
  MixtureSample out;
  out.points.resize(n, model.dim());
  out.component_ids.resize(static_cast<std::size_t>(n));
  const auto& w = model.weights();
  std::discrete_distribution<int> pick(w.begin(), w.end());
  for (auto& id : out.component_ids) id = pick(rng);
  for (std::size_t j = 0; j < model.size(); ++j) {
    const auto count = static_cast<Eigen::Index>(
        std::count(out.component_ids.begin(), out.component_ids.end(), static_cast<int>(j)));
    if (count == 0) continue;
    FlowSample s = component_sample(model.component(j), count, rng);
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < out.component_ids.size(); ++i)
      if (out.component_ids[i] == static_cast<int>(j)) out.points.row(static_cast<Eigen::Index>(i)) = s.points.row(k++);
  }
  return out;
}

/// Mixture of every component except `i` (zero-based), weights renormalized.
inline GBNFModel leave_one_out(const GBNFModel& model, std::size_t i) {
  if (model.mode() != BoostMode::additive) throw StateError("leave_one_out: model is multiplicative");
  if (model.size() < 2) throw StateError("leave_one_out: need at least two components");
  if (i >= model.size()) throw DomainError("leave_one_out: component index out of range");
  const double wi = model.weights()[i];
  if (wi >= 1.0) throw DomainError("leave_one_out: removed component carries all the weight");
  GBNFModel out(model.mode(), model.shape());
  std::vector<double> w;
  for (std::size_t j = 0; j < model.size(); ++j) {
    if (j == i) continue;
    out.append(model.component(j), out.empty() ? 1.0 : 0.0);
    w.push_back(model.weights()[j] / (1.0 - wi));
  }
  out.set_weights(std::move(w));
  return out;
}

// ---------------------------------------------------------------------------
// Component weight optimization

struct LineSearchResult {
  double rho = 0.0;
  double value = 0.0;
  std::vector<double> grid;
  std::vector<double> values;
};

/// argmin of `objective` over a uniform grid on [0, 1] with both endpoints.
/// A later grid point replaces the incumbent only if it is lower by more than
/// `tie_tolerance`, so ties go to the smaller rho.
inline LineSearchResult rho_line_search(const std::function<double(double)>& objective, int grid_size,
                                        double tie_tolerance = 1e-12) {
  if (grid_size < 2) throw DomainError("rho_line_search: grid needs at least two points");
  LineSearchResult r;
  bool found = false;
  for (int k = 0; k < grid_size; ++k) {
    const double rho = static_cast<double>(k) / static_cast<double>(grid_size - 1);
    const double v = objective(rho);
    r.grid.push_back(rho);
    r.values.push_back(v);
    if (!std::isfinite(v)) continue;
    if (!found || v < r.value - tie_tolerance) {
      r.rho = rho;
      r.value = v;
      found = true;
    }
  }
  if (!found) throw NumericError("rho_line_search: objective non-finite at every grid point");
  return r;
}

struct RhoSgdConfig {
  double step = 0.05;        // delta
  double tolerance = 1e-4;   // epsilon
  int max_iters = 500;
  double decay = 0.01;       // delta_t = delta / (1 + decay * t)
  Eigen::Index batch = 256;
  int components = 2;        // C, sets the initial rho = 1 / C
};

struct RhoSgdResult {
  double rho = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;
};

/// Projected SGD on rho in [0, 1] given a stochastic gradient oracle.
inline RhoSgdResult rho_sgd_core(const std::function<double(double, Rng&)>& gradient,
                                 const RhoSgdConfig& cfg, Rng& rng) {
  if (!(cfg.step > 0.0) || !(cfg.tolerance > 0.0))
    throw DomainError("rho_sgd: step and tolerance must be positive");
  if (cfg.components < 1) throw DomainError("rho_sgd: need C >= 1");
  RhoSgdResult r;
  double rho = 1.0 / static_cast<double>(cfg.components);
  r.trace.push_back(rho);
  for (int t = 0; t < cfg.max_iters; ++t) {
    const double g = gradient(rho, rng);
    if (!std::isfinite(g)) throw NumericError("rho_sgd: non-finite gradient");
    const double step = cfg.step / (1.0 + cfg.decay * static_cast<double>(t));
    const double next = std::clamp(rho - step * g, 0.0, 1.0);
    r.trace.push_back(next);
    r.iterations = t + 1;
    const bool settled = std::abs(next - rho) < cfg.tolerance;
    rho = next;
    if (settled) {
      r.converged = true;
      break;
    }
  }
  r.rho = rho;
  return r;
}

/// Callbacks for the reverse-KL weight update: samplers for G_{c-1} and g_c
/// and log-densities of the fixed mixture, the new component and the target.
struct RhoSgdProblem {
  std::function<Matrix(Eigen::Index, Rng&)> sample_fixed;
  std::function<Matrix(Eigen::Index, Rng&)> sample_new;
  std::function<Vector(const Matrix&)> log_fixed;
  std::function<Vector(const Matrix&)> log_new;
  std::function<Vector(const Matrix&)> log_target;
};

/// Monte Carlo dF/drho = E_g[gamma] - E_G[gamma], where
/// gamma(z) = log((1 - rho) G(z) + rho g(z)) - log p(z).
inline double rho_gradient(const RhoSgdProblem& p, double rho, Eigen::Index batch, Rng& rng) {
  auto mean_gamma = [&](const Matrix& z) {
    const Vector lf = p.log_fixed(z), ln = p.log_new(z), lt = p.log_target(z);
    double s = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double gamma = log_blend(std::max(lf(i), kLogDensityFloor),
                                     std::max(ln(i), kLogDensityFloor), rho) - lt(i);
      if (!std::isfinite(gamma)) throw NumericError("rho_sgd: non-finite gamma");
      s += gamma;
    }
    return s / static_cast<double>(z.rows());
  };
  const Matrix from_new = p.sample_new(batch, rng);
  const Matrix from_fixed = p.sample_fixed(batch, rng);
  return mean_gamma(from_new) - mean_gamma(from_fixed);
}

inline RhoSgdResult rho_sgd(const RhoSgdProblem& problem, const RhoSgdConfig& cfg, Rng& rng) {
  return rho_sgd_core(
      [&](double rho, Rng& r) { return rho_gradient(problem, rho, cfg.batch, r); }, cfg, rng);
}

}  // namespace gbnf
