#pragma once

// Stagewise training: Adam, schedules, per-stage objectives with early
// stopping, the boosting loop, fine-tuning, and binary checkpoints.
//
// Random streams: every draw comes from derive_rng(seed, stage, purpose).
//   purpose 0  minibatches / Monte Carlo batches of stage training
//   purpose 1  component initialization
//   purpose 2  rho optimization
//   purpose 3  partition-function estimation
// Fine-tuning pass p of component i uses stage id 1000 * (p + 1) + i.
// Data generation uses stage id kDataStage.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "gbnf/boostcore.hpp"
#include "gbnf/config.hpp"
#include "gbnf/diffcore.hpp"
#include "gbnf/errors.hpp"
#include "gbnf/flows.hpp"
#include "gbnf/objectives.hpp"
#include "gbnf/rng.hpp"
#include "gbnf/targets.hpp"

namespace gbnf {

inline constexpr std::uint64_t kDataStage = 0xDA7A;

enum Purpose : std::uint64_t { kBatches = 0, kInit = 1, kRho = 2, kPartition = 3 };

// Raised when a stage diverges; carries what was trained so far.
class TrainingAbort : public Error {
 public:
  TrainingAbort(const std::string& what, std::vector<double> trace)
      : Error(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::vector<double> m, v;
  long t = 0;
};

inline constexpr double kAdamBeta1 = 0.9, kAdamBeta2 = 0.999, kAdamEps = 1e-8;

inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s, double lr) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: gradient length differs from parameters");
  if (!(lr > 0.0)) throw DomainError("adam_step: learning rate must be positive");
  for (double g : grads)
    if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient");
  if (s.m.empty()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = kAdamBeta1 * s.m[i] + (1.0 - kAdamBeta1) * grads[i];
    s.v[i] = kAdamBeta2 * s.v[i] + (1.0 - kAdamBeta2) * grads[i] * grads[i];
    params[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + kAdamEps);
  }
}

inline double cosine_lr(long step, long total, double base) {
  if (total <= 0) return base;
  step = std::clamp(step, 0L, total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

inline double scheduled_lr(const TrainConfig& cfg, long step, long total) {
  return cfg.schedule == Schedule::cosine ? cosine_lr(step, total, cfg.lr) : cfg.lr;
}

// Rescales g in place so that its Euclidean norm is at most `max_norm`.
inline double clip_global_norm(std::vector<double>& g, double max_norm) {
  double sq = 0.0;
  for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (double& v : g) v *= k;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Problems and stage objectives

/// Everything a run trains against: sampled data (density estimation) or an
/// energy target with a fixed validation batch of base draws (matching).
struct Problem {
  TaskMode task = TaskMode::density_estimation;
  int dim = 2;
  Matrix train, val, test;
  std::optional<EnergyTarget> target;
  Matrix val_z0;
};

inline Problem make_problem(const TrainConfig& cfg) {
  Problem p;
  p.task = cfg.task;
  switch (cfg.source) {
    case DataSource::toy: {
      const ToySampler sampler{parse_toy(cfg.name)};
      Rng r0 = derive_rng(cfg.seed, kDataStage, 0), r1 = derive_rng(cfg.seed, kDataStage, 1),
          r2 = derive_rng(cfg.seed, kDataStage, 2);
      p.train = sample_toy(sampler, cfg.n_train, r0);
      p.val = sample_toy(sampler, cfg.n_val, r1);
      p.test = sample_toy(sampler, cfg.n_test, r2);
      break;
    }
    case DataSource::tabular: {
      TabularOptions opt;
      opt.train_fraction = cfg.train_frac;
      opt.val_fraction = cfg.val_frac;
      opt.test_fraction = cfg.test_frac;
      opt.standardize = cfg.standardize;
      opt.header = cfg.header;
      opt.seed = cfg.seed;
      TabularDataset ds = load_tabular(cfg.path, opt);
      p.train = std::move(ds.train);
      p.val = std::move(ds.val);
      p.test = std::move(ds.test);
      break;
    }
    case DataSource::energy: {
      p.target = EnergyTarget{parse_energy(cfg.name)};
      Rng r = derive_rng(cfg.seed, kDataStage, 3);
      p.val_z0 = standard_normal(cfg.val_mc, 2, r);
      break;
    }
  }
  p.dim = cfg.source == DataSource::energy ? 2 : static_cast<int>(p.train.cols());
  return p;
}

/// What one stage minimizes. `program` builds the loss of one optimization
/// step (drawing minibatches from `rng`); `validation` scores a candidate
/// component for early stopping, lower is better.
class StageObjective {
 public:
  virtual ~StageObjective() = default;
  virtual TapeProgram program(const FlowComponent& c, Rng& rng) = 0;
  virtual double validation(const FlowComponent& c) const = 0;
  virtual const char* name() const = 0;
};

/// Maximum likelihood on minibatches drawn from `weights` (uniform for plain
/// NLL, proportional to G^-beta for the reweighted surrogate). Validation is
/// the likelihood on the validation set under the matching self-normalized
/// weights.
class NllObjective : public StageObjective {
 public:
  NllObjective(const Matrix& train, const Matrix& val, ResampleWeights train_w, ResampleWeights val_w,
               Eigen::Index batch)
      : train_(train), val_(val), train_w_(std::move(train_w)), val_w_(std::move(val_w)), batch_(batch),
        pick_(train_w_.weights.begin(), train_w_.weights.end()) {}

  TapeProgram program(const FlowComponent& c, Rng& rng) override {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(batch_));
    for (auto& i : idx) i = pick_(rng);
    return nll_program(c, gather_rows(train_, idx));
  }

  double validation(const FlowComponent& c) const override {
    const Vector lp = component_log_prob(c, val_);
    double s = 0.0;
    for (Eigen::Index i = 0; i < lp.size(); ++i) s -= val_w_.weights[static_cast<std::size_t>(i)] * lp(i);
    return s;
  }

  const char* name() const override { return "nll"; }

 private:
  const Matrix& train_;
  const Matrix& val_;
  ResampleWeights train_w_, val_w_;
  Eigen::Index batch_;
  std::discrete_distribution<Eigen::Index> pick_;
};

/// Entropy-regularized additive update against fixed log G values.
class AdditiveDeObjective : public StageObjective {
 public:
  AdditiveDeObjective(const Matrix& train, const Matrix& val, Vector log_fixed_train, Vector log_fixed_val,
                      double lambda, Eigen::Index batch)
      : train_(train), val_(val), lf_train_(std::move(log_fixed_train)), lf_val_(std::move(log_fixed_val)),
        lambda_(lambda), batch_(batch) {}

  TapeProgram program(const FlowComponent& c, Rng& rng) override {
    std::uniform_int_distribution<Eigen::Index> pick(0, train_.rows() - 1);
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(batch_));
    for (auto& i : idx) i = pick(rng);
    Vector lf(batch_);
    for (std::size_t k = 0; k < idx.size(); ++k) lf(static_cast<Eigen::Index>(k)) = lf_train_(idx[k]);
    return additive_de_program(c, gather_rows(train_, idx), std::move(lf), lambda_);
  }

  // Entropy sum rescaled to a training-batch-sized sample.
  double validation(const FlowComponent& c) const override {
    const double scale = static_cast<double>(batch_) / static_cast<double>(val_.rows());
    return additive_de_value(component_log_prob(c, val_), lf_val_, lambda_ * scale);
  }

  const char* name() const override { return "additive_entropy"; }

 private:
  const Matrix& train_;
  const Matrix& val_;
  Vector lf_train_, lf_val_;
  double lambda_;
  Eigen::Index batch_;
};

/// Boosted reverse KL against an energy; the fixed mixture is `fixed` (empty
/// at stage 1). Validation uses the problem's fixed base draws and the exact
/// mixture term.
class ReverseKlStageObjective : public StageObjective {
 public:
  ReverseKlStageObjective(EnergyTarget target, GBNFModel fixed, double lambda, Eigen::Index n_mc,
                          const Matrix& val_z0, ReverseKlOptions opt)
      : target_(target), fixed_(std::move(fixed)), lambda_(lambda), n_mc_(n_mc), val_z0_(val_z0), opt_(opt) {}

  TapeProgram program(const FlowComponent& c, Rng& rng) override {
    auto [z0, pick] = draw_reverse_kl_inputs(&fixed_, c.dim(), n_mc_, opt_, rng);
    return reverse_kl_program(c, &fixed_, target_, lambda_, std::move(z0), pick);
  }

  double validation(const FlowComponent& c) const override {
    return diff::evaluate(reverse_kl_program(c, &fixed_, target_, lambda_, val_z0_), c.params());
  }

  const char* name() const override { return "reverse_kl"; }

 private:
  EnergyTarget target_;
  GBNFModel fixed_;
  double lambda_;
  Eigen::Index n_mc_;
  const Matrix& val_z0_;
  ReverseKlOptions opt_;
};

/// Scores a candidate by the validation loss of the best blend
/// (1 - rho) G + rho g over the rho grid, so early stopping tracks the mixture
/// rather than the surrogate. Additive mixtures only.
class BlendValidated : public StageObjective {
 public:
  BlendValidated(std::unique_ptr<StageObjective> inner, const Problem& p, const GBNFModel& fixed, int grid_size)
      : inner_(std::move(inner)), problem_(p), weights_(fixed.weights()), grid_size_(grid_size) {
    if (p.task == TaskMode::density_matching) {
      eval_.emplace(*p.target, p.val_z0);
      for (const auto& c : fixed.components()) eval_->add_component(c);
    } else {
      log_fixed_ = additive_log_prob(fixed, p.val);
    }
  }

  TapeProgram program(const FlowComponent& c, Rng& rng) override { return inner_->program(c, rng); }

  double validation(const FlowComponent& c) const override {
    std::function<double(double)> objective;
    Vector log_new;
    if (eval_) {
      eval_->add_component(c);
      objective = [&](double rho) {
        std::vector<double> w = weights_;
        for (double& v : w) v *= (1.0 - rho);
        w.push_back(rho);
        return eval_->value(w);
      };
    } else {
      log_new = component_log_prob(c, problem_.val);
      objective = [&](double rho) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < log_new.size(); ++i) s -= log_blend(log_fixed_(i), log_new(i), rho);
        return s / static_cast<double>(log_new.size());
      };
    }
    double best = std::numeric_limits<double>::infinity();
    try {
      best = rho_line_search(objective, grid_size_).value;
    } catch (...) {
      if (eval_) eval_->pop_component();
      throw;
    }
    if (eval_) eval_->pop_component();
    return best;
  }

  const char* name() const override { return inner_->name(); }

 private:
  std::unique_ptr<StageObjective> inner_;
  const Problem& problem_;
  std::vector<double> weights_;
  int grid_size_;
  Vector log_fixed_;
  mutable std::optional<MatchingEvalSet> eval_;
};

/// Objective for a new component given the fixed mixture (empty at stage 1).
inline std::unique_ptr<StageObjective> make_surrogate_objective(const Problem& p, const TrainConfig& cfg,
                                                                const GBNFModel& fixed) {
  if (p.task == TaskMode::density_matching) {
    if (!p.target) throw ConfigError("density matching needs an energy target");
    return std::make_unique<ReverseKlStageObjective>(*p.target, fixed, cfg.lambda, cfg.n_mc, p.val_z0,
                                                     ReverseKlOptions{cfg.stochastic_fixed});
  }
  if (fixed.empty())
    return std::make_unique<NllObjective>(p.train, p.val, compute_resample_weights(nullptr, p.train),
                                          compute_resample_weights(nullptr, p.val), cfg.batch);
  if (fixed.mode() == BoostMode::additive && cfg.additive_objective == AdditiveObjective::entropy)
    return std::make_unique<AdditiveDeObjective>(p.train, p.val, log_prob(fixed, p.train), log_prob(fixed, p.val),
                                                 cfg.lambda, cfg.batch);
  return std::make_unique<NllObjective>(p.train, p.val, compute_resample_weights(&fixed, p.train, cfg.beta),
                                        compute_resample_weights(&fixed, p.val, cfg.beta), cfg.batch);
}

/// Stage objective with early stopping on the blended mixture for boosted
/// additive stages.
inline std::unique_ptr<StageObjective> make_stage_objective(const Problem& p, const TrainConfig& cfg,
                                                            const GBNFModel& fixed) {
  auto inner = make_surrogate_objective(p, cfg, fixed);
  if (fixed.empty() || fixed.mode() != BoostMode::additive) return inner;
  return std::make_unique<BlendValidated>(std::move(inner), p, fixed, cfg.grid_size);
}

// ---------------------------------------------------------------------------
// Stage training

struct StageTrainResult {
  FlowComponent component;
  std::vector<double> loss_trace;  // mean training loss per evaluation window
  std::vector<double> val_trace;   // validation loss at each evaluation, first entry before training
  double best_val = std::numeric_limits<double>::infinity();
  long steps = 0;
  bool early_stopped = false;
};

/// Adam with clipping and early stopping from `init`. Validation runs before
/// the first step and every `eval_every` steps; the best-scoring parameters
/// are returned. A non-finite training loss raises TrainingAbort.
inline StageTrainResult train_stage(StageObjective& objective, FlowComponent init, const TrainConfig& cfg,
                                    long max_steps, Rng& rng) {
  StageTrainResult r;
  r.component = std::move(init);
  ParamVector best = r.component.params();
  r.best_val = objective.validation(r.component);
  r.val_trace.push_back(r.best_val);
  if (!std::isfinite(r.best_val)) r.best_val = std::numeric_limits<double>::infinity();
  AdamState adam;
  long stale = 0;
  double window = 0.0;
  long window_n = 0;
  for (long step = 0; step < max_steps; ++step) {
    GradResult g;
    try {
      g = diff::grad_scalar(objective.program(r.component, rng), r.component.params());
    } catch (const NumericError& e) {
      throw TrainingAbort(std::string("training diverged at step ") + std::to_string(step) + ": " + e.what(),
                          r.loss_trace);
    }
    if (!std::isfinite(g.loss))
      throw TrainingAbort("training loss is non-finite at step " + std::to_string(step), r.loss_trace);
    clip_global_norm(g.gradient, cfg.clip_norm);
    adam_step(r.component.params().values(), g.gradient, adam, std::max(scheduled_lr(cfg, step, max_steps), 1e-300));
    window += g.loss;
    ++window_n;
    r.steps = step + 1;
    if (r.steps % cfg.eval_every == 0 || r.steps == max_steps) {
      r.loss_trace.push_back(window / static_cast<double>(window_n));
      window = 0.0;
      window_n = 0;
      double v = std::numeric_limits<double>::infinity();
      try {
        v = objective.validation(r.component);
      } catch (const NumericError&) {
      }
      r.val_trace.push_back(v);
      if (v < r.best_val) {
        r.best_val = v;
        best = r.component.params();
        stale = 0;
      } else if (++stale >= cfg.patience) {
        r.early_stopped = true;
        break;
      }
    }
  }
  r.component.params() = best;
  return r;
}

// ---------------------------------------------------------------------------
// Model-level validation losses

/// Validation loss of a whole model: NLL on the validation set (estimation)
/// or the common-random-number reverse-KL estimate on the validation draws
/// (matching).
inline double model_validation_loss(const Problem& p, const GBNFModel& model) {
  if (p.task == TaskMode::density_matching) {
    MatchingEvalSet set(*p.target, p.val_z0);
    for (const auto& c : model.components()) set.add_component(c);
    return set.value(model.weights());
  }
  return nll_loss(model, p.val);
}

struct RhoChoice {
  double rho = 0.0;
  double val_after = 0.0;
  std::optional<PartitionEstimate> partition;
  std::vector<double> grid, values;
  int sgd_iterations = 0;
  bool sgd_converged = true;
};

/// Chooses rho for `fresh` added to `model` (c >= 1 components already).
inline RhoChoice choose_rho(const Problem& p, const TrainConfig& cfg, const GBNFModel& model,
                            const FlowComponent& fresh, Rng& rng) {
  RhoChoice out;
  if (p.task == TaskMode::density_matching) {
    MatchingEvalSet set(*p.target, p.val_z0);
    for (const auto& c : model.components()) set.add_component(c);
    set.add_component(fresh);
    auto blended = [&](double rho) {
      std::vector<double> w = model.weights();
      for (double& v : w) v *= (1.0 - rho);
      w.push_back(rho);
      return set.value(w);
    };
    if (cfg.rho == RhoStrategy::sgd) {
      RhoSgdProblem prob;
      prob.sample_fixed = [&](Eigen::Index n, Rng& r) { return sample_mixture(model, n, r).points; };
      prob.sample_new = [&](Eigen::Index n, Rng& r) { return component_sample(fresh, n, r).points; };
      prob.log_fixed = [&](const Matrix& z) { return additive_log_prob(model, z); };
      prob.log_new = [&](const Matrix& z) { return component_log_prob(fresh, z); };
      prob.log_target = [&](const Matrix& z) { return p.target->log_unnorm(z); };
      RhoSgdConfig sc{cfg.rho_step, cfg.rho_tolerance, cfg.rho_max_iters, cfg.rho_decay, cfg.rho_batch,
                      cfg.components};
      const RhoSgdResult s = rho_sgd(prob, sc, rng);
      out.rho = s.rho;
      out.sgd_iterations = s.iterations;
      out.sgd_converged = s.converged;
      out.val_after = blended(out.rho);
      return out;
    }
    const LineSearchResult ls = rho_line_search(blended, cfg.grid_size);
    out.rho = ls.rho;
    out.val_after = ls.value;
    out.grid = ls.grid;
    out.values = ls.values;
    return out;
  }

  const Vector log_new = component_log_prob(fresh, p.val);
  if (model.mode() == BoostMode::additive) {
    const Vector log_fixed = additive_log_prob(model, p.val);
    auto objective = [&](double rho) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < log_new.size(); ++i) s -= log_blend(log_fixed(i), log_new(i), rho);
      return s / static_cast<double>(log_new.size());
    };
    const LineSearchResult ls = rho_line_search(objective, cfg.grid_size);
    out.rho = ls.rho;
    out.val_after = ls.value;
    out.grid = ls.grid;
    out.values = ls.values;
    return out;
  }

  // Multiplicative: one importance-sampling pool over all c + 1 components is
  // shared across the grid. rho = 0 keeps the current partition estimate.
  std::vector<FlowComponent> comps = model.components();
  comps.push_back(fresh);
  PartitionPool pool(comps, comps.size(), cfg.partition_samples, rng);
  const Vector log_fixed = unnormalized_log_density(model, p.val);
  std::vector<double> exps = model.stagewise_rho();
  exps.push_back(0.0);
  std::vector<std::optional<PartitionEstimate>> estimates;
  auto objective = [&](double rho) {
    PartitionEstimate est = model.partition();
    if (rho > 0.0) {
      exps.back() = rho;
      try {
        est = pool.estimate(exps);
      } catch (const DomainError&) {
        estimates.push_back(std::nullopt);
        return std::numeric_limits<double>::infinity();
      }
    }
    estimates.push_back(est);
    double s = 0.0;
    for (Eigen::Index i = 0; i < log_new.size(); ++i) s -= log_fixed(i) + rho * std::max(log_new(i), kLogDensityFloor);
    return s / static_cast<double>(log_new.size()) + est.log_value;
  };
  const LineSearchResult ls = rho_line_search(objective, cfg.grid_size);
  out.rho = ls.rho;
  out.val_after = ls.value;
  out.grid = ls.grid;
  out.values = ls.values;
  const auto k = static_cast<std::size_t>(std::lround(ls.rho * (cfg.grid_size - 1)));
  out.partition = estimates.at(k);
  return out;
}

// ---------------------------------------------------------------------------
// Boosting

struct StageRecord {
  std::string kind = "stage";  // "stage" or "finetune"
  int stage = 0;               // 1-based component index
  int pass = 0;                // fine-tune pass, 1-based
  std::string objective;
  long steps = 0;
  bool early_stopped = false;
  std::vector<double> loss_trace, val_trace;
  double rho = 0.0;
  double weight = 0.0;
  double val_before = std::numeric_limits<double>::quiet_NaN();
  double val_after = std::numeric_limits<double>::quiet_NaN();
  // Geometric-convergence diagnostic: (val_before - val_after) / val_before.
  double relative_decrease = std::numeric_limits<double>::quiet_NaN();
  std::optional<PartitionEstimate> partition;
  int sgd_iterations = 0;
  bool sgd_converged = true;
  bool accepted = true;
};

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline nlohmann::json to_json(const StageRecord& r, const std::string& config_hash) {
  nlohmann::json j;
  j["kind"] = r.kind;
  j["stage"] = r.stage;
  if (r.kind == "finetune") j["pass"] = r.pass;
  j["objective"] = r.objective;
  j["steps"] = r.steps;
  j["early_stopped"] = r.early_stopped;
  j["rho"] = r.rho;
  j["weight"] = r.weight;
  j["val_before"] = number_or_null(r.val_before);
  j["val_after"] = number_or_null(r.val_after);
  j["relative_decrease"] = number_or_null(r.relative_decrease);
  if (r.partition) {
    j["log_partition"] = r.partition->log_value;
    j["partition_stderr"] = r.partition->stderr_log;
  }
  if (r.sgd_iterations > 0) {
    j["sgd_iterations"] = r.sgd_iterations;
    j["sgd_converged"] = r.sgd_converged;
  }
  j["accepted"] = r.accepted;
  nlohmann::json lt = nlohmann::json::array(), vt = nlohmann::json::array();
  for (double v : r.loss_trace) lt.push_back(number_or_null(v));
  for (double v : r.val_trace) vt.push_back(number_or_null(v));
  j["loss_trace"] = lt;
  j["val_trace"] = vt;
  j["config_hash"] = config_hash;
  return j;
}

struct BoostResult {
  GBNFModel model;
  std::vector<StageRecord> records;
};

// Called after each stage with the model so far (for checkpointing).
using StageCallback = std::function<void(const GBNFModel&, const StageRecord&)>;

inline GBNFModel empty_model(const Problem& p, const TrainConfig& cfg) {
  return GBNFModel(cfg.boost, FlowShape{p.dim, cfg.steps, cfg.hidden});
}

/// Trains and appends one component to `model` (stage index = model.size() + 1).
inline StageRecord boost_stage(const Problem& p, const TrainConfig& cfg, GBNFModel& model) {
  const auto stage = static_cast<std::uint64_t>(model.size() + 1);
  StageRecord rec;
  rec.stage = static_cast<int>(stage);
  const auto objective = make_stage_objective(p, cfg, model);
  rec.objective = objective->name();
  Rng init_rng = derive_rng(cfg.seed, stage, kInit);
  Rng batch_rng = derive_rng(cfg.seed, stage, kBatches);
  StageTrainResult tr = train_stage(*objective, make_component(model.shape(), init_rng), cfg, cfg.max_steps, batch_rng);
  rec.steps = tr.steps;
  rec.early_stopped = tr.early_stopped;
  rec.loss_trace = std::move(tr.loss_trace);
  rec.val_trace = std::move(tr.val_trace);

  if (model.empty()) {
    rec.rho = 1.0;
    model.append(std::move(tr.component), 1.0);
    if (model.mode() == BoostMode::multiplicative) {
      Rng prng = derive_rng(cfg.seed, stage, kPartition);
      model.set_partition(estimate_log_partition(model, cfg.partition_samples, prng));
      rec.partition = model.partition();
    }
    rec.val_after = model_validation_loss(p, model);
  } else {
    rec.val_before = model_validation_loss(p, model);
    Rng rho_rng = derive_rng(cfg.seed, stage, kRho);
    RhoChoice choice = choose_rho(p, cfg, model, tr.component, rho_rng);
    const PartitionEstimate previous = model.partition();
    rec.rho = choice.rho;
    rec.sgd_iterations = choice.sgd_iterations;
    rec.sgd_converged = choice.sgd_converged;
    model.append(std::move(tr.component), choice.rho);
    if (model.mode() == BoostMode::multiplicative) {
      model.set_partition(choice.partition ? *choice.partition : previous);
      rec.partition = model.partition();
    }
    rec.val_after = choice.val_after;
    if (rec.val_before != 0.0) rec.relative_decrease = (rec.val_before - rec.val_after) / std::abs(rec.val_before);
  }
  rec.weight = model.weights().back();
  return rec;
}

/// Retrains each component against the leave-one-out mixture of the others,
/// then re-chooses its weight among the rho grid and its previous weight.
/// A component update that does not lower the validation loss is reverted.
inline std::vector<StageRecord> fine_tune(const Problem& p, const TrainConfig& cfg, GBNFModel& model, int passes,
                                          long epochs) {
  std::vector<StageRecord> records;
  if (model.mode() != BoostMode::additive) throw StateError("fine_tune: only additive mixtures can be fine-tuned");
  if (model.size() < 2) throw StateError("fine_tune: need at least two components");
  if (epochs == 0 || passes == 0) return records;
  const long steps = epochs * cfg.eval_every;
  for (int pass = 0; pass < passes; ++pass) {
    for (std::size_t i = 0; i < model.size(); ++i) {
      StageRecord rec;
      rec.kind = "finetune";
      rec.stage = static_cast<int>(i + 1);
      rec.pass = pass + 1;
      rec.val_before = model_validation_loss(p, model);
      const double old_w = model.weights()[i];
      if (old_w >= 1.0) {
        rec.accepted = false;
        rec.weight = old_w;
        rec.val_after = rec.val_before;
        records.push_back(std::move(rec));
        continue;
      }
      const GBNFModel fixed = leave_one_out(model, i);
      const auto objective = make_stage_objective(p, cfg, fixed);
      rec.objective = objective->name();
      const std::uint64_t stage_id = 1000ULL * static_cast<std::uint64_t>(pass + 1) + i;
      Rng batch_rng = derive_rng(cfg.seed, stage_id, kBatches);
      StageTrainResult tr = train_stage(*objective, model.component(i), cfg, steps, batch_rng);
      rec.steps = tr.steps;
      rec.early_stopped = tr.early_stopped;
      rec.loss_trace = std::move(tr.loss_trace);
      rec.val_trace = std::move(tr.val_trace);

      auto with_weight = [&](double wi) {
        GBNFModel cand = model;
        cand.replace_component(i, tr.component);
        std::vector<double> w;
        std::size_t k = 0;
        for (std::size_t j = 0; j < model.size(); ++j)
          w.push_back(j == i ? wi : fixed.weights()[k++] * (1.0 - wi));
        cand.set_weights(std::move(w));
        return cand;
      };
      std::vector<double> candidates;
      if (p.task == TaskMode::density_matching && cfg.rho == RhoStrategy::sgd) {
        Rng rho_rng = derive_rng(cfg.seed, stage_id, kRho);
        RhoSgdProblem prob;
        prob.sample_fixed = [&](Eigen::Index n, Rng& r) { return sample_mixture(fixed, n, r).points; };
        prob.sample_new = [&](Eigen::Index n, Rng& r) { return component_sample(tr.component, n, r).points; };
        prob.log_fixed = [&](const Matrix& z) { return additive_log_prob(fixed, z); };
        prob.log_new = [&](const Matrix& z) { return component_log_prob(tr.component, z); };
        prob.log_target = [&](const Matrix& z) { return p.target->log_unnorm(z); };
        RhoSgdConfig sc{cfg.rho_step, cfg.rho_tolerance, cfg.rho_max_iters, cfg.rho_decay, cfg.rho_batch,
                        cfg.components};
        const RhoSgdResult s = rho_sgd(prob, sc, rho_rng);
        rec.sgd_iterations = s.iterations;
        rec.sgd_converged = s.converged;
        if (s.rho > 0.0 && s.rho < 1.0) candidates.push_back(s.rho);
      } else {
        for (int k = 1; k + 1 < cfg.grid_size; ++k)
          candidates.push_back(static_cast<double>(k) / static_cast<double>(cfg.grid_size - 1));
      }
      candidates.push_back(old_w);

      double best_loss = rec.val_before;
      std::optional<GBNFModel> best;
      double best_w = old_w;
      for (double wi : candidates) {
        GBNFModel cand = with_weight(wi);
        double loss = std::numeric_limits<double>::infinity();
        try {
          loss = model_validation_loss(p, cand);
        } catch (const NumericError&) {
        }
        if (loss < best_loss) {
          best_loss = loss;
          best = std::move(cand);
          best_w = wi;
        }
      }
      rec.accepted = best.has_value();
      if (best) model = std::move(*best);
      rec.weight = rec.accepted ? best_w : old_w;
      rec.rho = model.stagewise_rho()[i];
      rec.val_after = best_loss;
      records.push_back(std::move(rec));
    }
  }
  return records;
}

inline BoostResult run_boosting(const Problem& p, const TrainConfig& cfg, const StageCallback& on_stage = {}) {
  validate(cfg);
  BoostResult out{empty_model(p, cfg), {}};
  for (int c = 0; c < cfg.components; ++c) {
    out.records.push_back(boost_stage(p, cfg, out.model));
    if (on_stage) on_stage(out.model, out.records.back());
  }
  if (cfg.finetune_passes > 0 && cfg.finetune_epochs > 0 && out.model.size() >= 2) {
    auto ft = fine_tune(p, cfg, out.model, cfg.finetune_passes, cfg.finetune_epochs);
    for (auto& r : ft) {
      out.records.push_back(std::move(r));
      if (on_stage) on_stage(out.model, out.records.back());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Binary, little-endian:
//   "GBNF"  u32 version
//   u64 n + n bytes        config echo (canonical text)
//   u32 mode               0 additive, 1 multiplicative
//   i32 dim, i32 steps, i32 hidden
//   u64 c, then per component: u64 n + n f64 parameters (documented layout)
//   u64 c + c f64          stagewise rho
//   u64 c + c f64          mixture weights
//   f64 log_partition, f64 stderr, f64 ess, u8 valid
//   u64 seed, u64 stage, u64 step   rng descriptor
//   u64 stage index
// A sidecar `<path>.meta` holds the same metadata as JSON.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct RngDescriptor {
  std::uint64_t seed = 0, stage = 0, step = 0;
  bool operator==(const RngDescriptor&) const = default;
};

struct Checkpoint {
  GBNFModel model;
  std::string config_text;
  RngDescriptor rng;
  std::uint64_t stage_index = 0;
};

namespace ckpt_detail {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) u8(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void u64(std::uint64_t v) {
    for (int k = 0; k < 8; ++k) u8(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { bytes_.append(s); }
  void f64s(std::span<const double> v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}
  void need(std::size_t n) const {
    if (at_ + n > bytes_.size())
      throw ParseError("checkpoint truncated at byte offset " + std::to_string(bytes_.size()) + " (needed " +
                       std::to_string(n) + " bytes at offset " + std::to_string(at_) + ")");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[at_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[at_++])) << (8 * k);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[at_++])) << (8 * k);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(at_, n);
    at_ += n;
    return s;
  }
  std::size_t length() {
    const std::size_t offset = at_;
    const std::uint64_t n = u64();
    if (n > bytes_.size()) throw ParseError("checkpoint: implausible length at byte offset " + std::to_string(offset));
    return static_cast<std::size_t>(n);
  }
  std::vector<double> f64s() {
    const std::size_t n = length();
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  std::size_t offset() const { return at_; }
  bool done() const { return at_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::size_t at_ = 0;
};

}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  ckpt_detail::Writer w;
  const GBNFModel& m = ck.model;
  w.raw("GBNF");
  w.u32(kCheckpointVersion);
  w.u64(ck.config_text.size());
  w.raw(ck.config_text);
  w.u32(m.mode() == BoostMode::additive ? 0 : 1);
  w.i32(m.shape().dim);
  w.i32(m.shape().steps);
  w.i32(m.shape().hidden);
  w.u64(m.size());
  for (const auto& c : m.components()) w.f64s(c.params().values());
  w.f64s(m.stagewise_rho());
  w.f64s(m.weights());
  w.f64(m.partition().log_value);
  w.f64(m.partition().stderr_log);
  w.f64(m.partition().ess);
  w.u8(m.partition().valid ? 1 : 0);
  w.u64(ck.rng.seed);
  w.u64(ck.rng.stage);
  w.u64(ck.rng.step);
  w.u64(ck.stage_index);
  return w.bytes();
}

inline Checkpoint deserialize_checkpoint(std::string bytes) {
  ckpt_detail::Reader r(std::move(bytes));
  if (r.raw(4) != "GBNF") throw ParseError("checkpoint: bad magic bytes at offset 0");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  ck.config_text = r.raw(r.length());
  const std::size_t mode_at = r.offset();
  const std::uint32_t mode = r.u32();
  if (mode > 1) throw ParseError("checkpoint: bad mode at byte offset " + std::to_string(mode_at));
  FlowShape shape;
  shape.dim = r.i32();
  shape.steps = r.i32();
  shape.hidden = r.i32();
  const std::size_t shape_at = r.offset();
  try {
    FlowComponent probe(shape);
  } catch (const Error& e) {
    throw ParseError("checkpoint: invalid flow shape before byte offset " + std::to_string(shape_at) + ": " + e.what());
  }
  const std::size_t count = r.length();
  std::vector<FlowComponent> comps;
  for (std::size_t j = 0; j < count; ++j) {
    FlowComponent c(shape);
    const std::size_t at = r.offset();
    const std::vector<double> v = r.f64s();
    if (v.size() != c.params().size())
      throw ParseError("checkpoint: component " + std::to_string(j + 1) + " has " + std::to_string(v.size()) +
                       " parameters at byte offset " + std::to_string(at) + ", expected " +
                       std::to_string(c.params().size()));
    std::copy(v.begin(), v.end(), c.params().values().begin());
    comps.push_back(std::move(c));
  }
  std::vector<double> rho = r.f64s();
  std::vector<double> weights = r.f64s();
  PartitionEstimate part;
  part.log_value = r.f64();
  part.stderr_log = r.f64();
  part.ess = r.f64();
  part.valid = r.u8() != 0;
  ck.rng.seed = r.u64();
  ck.rng.stage = r.u64();
  ck.rng.step = r.u64();
  ck.stage_index = r.u64();
  if (!r.done()) throw ParseError("checkpoint: trailing bytes at offset " + std::to_string(r.offset()));
  if (rho.size() != count || weights.size() != count)
    throw ParseError("checkpoint: weight vectors do not match the component count");
  ck.model = GBNFModel(mode == 0 ? BoostMode::additive : BoostMode::multiplicative, shape);
  ck.model.restore(std::move(comps), std::move(rho), std::move(weights), part);
  return ck;
}

inline nlohmann::json checkpoint_meta(const Checkpoint& ck) {
  const GBNFModel& m = ck.model;
  nlohmann::json j;
  j["format_version"] = kCheckpointVersion;
  j["config_hash"] = hex64(fnv1a(ck.config_text));
  j["config"] = ck.config_text;
  j["mode"] = to_string(m.mode());
  j["dim"] = m.shape().dim;
  j["steps"] = m.shape().steps;
  j["hidden"] = m.shape().hidden;
  j["components"] = m.size();
  j["stagewise_rho"] = m.stagewise_rho();
  j["weights"] = m.weights();
  j["log_partition"] = m.partition().log_value;
  j["partition_stderr"] = m.partition().stderr_log;
  j["partition_valid"] = m.partition().valid;
  j["rng"] = {{"seed", ck.rng.seed}, {"stage", ck.rng.stage}, {"step", ck.rng.step}};
  j["stage_index"] = ck.stage_index;
  return j;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint: " + path);
    const std::string bytes = serialize_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("failed writing checkpoint: " + path);
  }
  std::ofstream meta(path + ".meta", std::ios::binary | std::ios::trunc);
  if (!meta) throw ConfigError("cannot write checkpoint metadata: " + path + ".meta");
  meta << checkpoint_meta(ck).dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(std::move(bytes));
}

}  // namespace gbnf
