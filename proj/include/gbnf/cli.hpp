#pragma once

// Command-line front end: gbnf train | grid | sample | eval | partition.
//
// Exit codes: 0 ok, 2 configuration or input error, 3 training aborted,
// 4 model-state error (stale partition, unsupported mode, degenerate proposal).
//
// Every CSV written here starts with a `# config_hash=<hex>` line; the PGM
// header carries the same comment and JSON outputs a `config_hash` field.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "gbnf/boostcore.hpp"
#include "gbnf/config.hpp"
#include "gbnf/errors.hpp"
#include "gbnf/objectives.hpp"
#include "gbnf/targets.hpp"
#include "gbnf/trainer.hpp"

namespace gbnf::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kTrainingAbort = 3, kStateError = 4 };

namespace fs = std::filesystem;

// Rejected input that maps to a specific exit code.
struct Failure {
  int code;
  std::string message;
};

inline std::string checkpoint_hash(const Checkpoint& ck) { return hex64(fnv1a(ck.config_text)); }

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Failure{kConfigError, "cannot write " + path.string()};
  out << text;
}

inline Checkpoint open_checkpoint(const std::string& path) {
  try {
    return load_checkpoint(path);
  } catch (const Error& e) {
    throw Failure{kConfigError, e.what()};
  }
}

inline void require_evaluable(const GBNFModel& m) {
  if (m.empty()) throw Failure{kStateError, "model has no components"};
  if (m.mode() == BoostMode::multiplicative && !m.partition().valid)
    throw Failure{kStateError, "the partition estimate is stale; run `gbnf partition --checkpoint <path>` first"};
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string config;
  std::string out = "runs";
};

inline int cmd_train(const TrainOptions& o, std::ostream& log) {
  using clock = std::chrono::steady_clock;
  TrainConfig cfg;
  try {
    cfg = load_config(o.config);
  } catch (const ConfigError& e) {
    throw Failure{kConfigError, e.what()};
  }
  const fs::path run_dir = fs::path(o.out) / cfg.run_id;
  if (fs::exists(run_dir)) throw Failure{kConfigError, "run id '" + cfg.run_id + "' already exists in " + o.out};
  fs::create_directories(run_dir);

  const std::string text = to_text(cfg);
  const std::string hash = config_hash(cfg);
  write_text(run_dir / "config.txt", text);
  nlohmann::json manifest;
  manifest["run_id"] = cfg.run_id;
  manifest["config_path"] = fs::absolute(o.config).string();
  manifest["config_resolved"] = (run_dir / "config.txt").string();
  manifest["config_hash"] = hash;
  manifest["checkpoints"] = nlohmann::json::array();
  manifest["stage_log"] = (run_dir / "stages.jsonl").string();
  manifest["timings_seconds"] = nlohmann::json::object();
  std::ofstream stages(run_dir / "stages.jsonl", std::ios::binary | std::ios::trunc);

  auto write_manifest = [&](const std::string& status) {
    manifest["status"] = status;
    write_text(run_dir / "manifest.json", manifest.dump(2) + "\n");
  };
  auto make_ck = [&](const GBNFModel& m, long steps) {
    return Checkpoint{m, text, RngDescriptor{cfg.seed, m.size(), static_cast<std::uint64_t>(steps)}, m.size()};
  };

  const auto t0 = clock::now();
  auto last = t0;
  GBNFModel latest;
  try {
    const Problem problem = [&] {
      try {
        return make_problem(cfg);
      } catch (const Error& e) {
        throw Failure{kConfigError, e.what()};
      }
    }();
    BoostResult result = run_boosting(problem, cfg, [&](const GBNFModel& m, const StageRecord& rec) {
      latest = m;
      stages << to_json(rec, hash).dump() << '\n';
      stages.flush();
      const auto now = clock::now();
      // Fine-tune records are reported together once all passes finish.
      const std::string key = rec.kind == "stage" ? "stage_" + std::to_string(rec.stage) : "finetune";
      auto& slot = manifest["timings_seconds"][key];
      slot = slot.is_number() ? slot.get<double>() + std::chrono::duration<double>(now - last).count()
                              : std::chrono::duration<double>(now - last).count();
      last = now;
      if (rec.kind == "stage") {
        char name[32];
        std::snprintf(name, sizeof name, "stage_%02d.ckpt", rec.stage);
        const fs::path path = run_dir / name;
        save_checkpoint(make_ck(m, rec.steps), path.string());
        manifest["checkpoints"].push_back(path.string());
      }
      log << "stage " << rec.stage << (rec.kind == "stage" ? "" : " (fine-tune)") << ": rho=" << rec.rho
          << " val=" << rec.val_after << "\n";
    });
    const fs::path final_path = run_dir / "final.ckpt";
    save_checkpoint(make_ck(result.model, result.records.empty() ? 0 : result.records.back().steps),
                    final_path.string());
    manifest["final_checkpoint"] = final_path.string();

    nlohmann::json metrics;
    metrics["config_hash"] = hash;
    metrics["components"] = result.model.size();
    metrics["weights"] = result.model.weights();
    metrics["validation_loss"] = model_validation_loss(problem, result.model);
    if (problem.task == TaskMode::density_estimation) {
      metrics["test_mean_log_likelihood"] = log_prob(result.model, problem.test).mean();
      metrics["n_test"] = problem.test.rows();
    }
    write_text(run_dir / "metrics.json", metrics.dump(2) + "\n");
    manifest["metrics"] = (run_dir / "metrics.json").string();
    manifest["timings_seconds"]["total"] = std::chrono::duration<double>(clock::now() - t0).count();
    write_manifest("complete");
  } catch (const TrainingAbort& e) {
    if (!latest.empty()) {
      const fs::path partial = run_dir / "partial.ckpt";
      save_checkpoint(make_ck(latest, 0), partial.string());
      manifest["partial_checkpoint"] = partial.string();
    }
    manifest["error"] = e.what();
    write_manifest("aborted");
    throw Failure{kTrainingAbort, e.what()};
  }
  log << "wrote " << (run_dir / "manifest.json").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// grid

struct GridOptions {
  std::string checkpoint;
  std::vector<double> bbox{-4.0, 4.0, -4.0, 4.0};
  int res = 200;
  std::string out;  // prefix; defaults to the checkpoint path
};

struct Grid {
  Matrix points;  // res*res x 2, row-major over image rows (top row first)
  Vector log_density;
  double cell_area = 0.0;
};

/// Cell centers over [x0, x1] x [y0, y1]; image row r has y decreasing from the top.
inline Grid density_grid(const GBNFModel& model, const std::vector<double>& bbox, int res) {
  if (res < 2) throw Failure{kConfigError, "--res must be >= 2"};
  if (bbox.size() != 4 || !(bbox[1] > bbox[0]) || !(bbox[3] > bbox[2]))
    throw Failure{kConfigError, "--bbox must be x0,x1,y0,y1 with x0 < x1 and y0 < y1"};
  if (model.dim() != 2) throw Failure{kConfigError, "density grids need a two-dimensional model"};
  Grid g;
  const double hx = (bbox[1] - bbox[0]) / res, hy = (bbox[3] - bbox[2]) / res;
  g.cell_area = hx * hy;
  g.points.resize(static_cast<Eigen::Index>(res) * res, 2);
  for (int r = 0; r < res; ++r)
    for (int c = 0; c < res; ++c) {
      const Eigen::Index k = static_cast<Eigen::Index>(r) * res + c;
      g.points(k, 0) = bbox[0] + (c + 0.5) * hx;
      g.points(k, 1) = bbox[3] - (r + 0.5) * hy;
    }
  g.log_density = log_prob(model, g.points);
  return g;
}

inline int cmd_grid(const GridOptions& o, std::ostream& log) {
  const Checkpoint ck = open_checkpoint(o.checkpoint);
  require_evaluable(ck.model);
  const Grid g = density_grid(ck.model, o.bbox, o.res);
  const std::string hash = checkpoint_hash(ck);
  const std::string prefix = o.out.empty() ? o.checkpoint + ".grid" : o.out;

  std::ostringstream csv;
  csv << "# config_hash=" << hash << "\nx,y,log_density\n";
  for (Eigen::Index k = 0; k < g.points.rows(); ++k)
    csv << format_double(g.points(k, 0)) << ',' << format_double(g.points(k, 1)) << ','
        << format_double(g.log_density(k)) << '\n';
  write_text(prefix + ".csv", csv.str());

  const Eigen::ArrayXd density = g.log_density.array().exp();
  const double lo = density.minCoeff(), hi = density.maxCoeff();
  std::string pgm = "P5\n# config_hash=" + hash + "\n" + std::to_string(o.res) + " " + std::to_string(o.res) + "\n255\n";
  for (Eigen::Index k = 0; k < density.size(); ++k) {
    const double t = hi > lo ? (density(k) - lo) / (hi - lo) : 0.0;
    pgm.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
  write_text(prefix + ".pgm", pgm);
  log << "wrote " << prefix << ".csv and " << prefix << ".pgm (mass in box "
      << density.sum() * g.cell_area << ")\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// sample

struct SampleOptions {
  std::string checkpoint;
  long n = 1000;
  std::uint64_t seed = 0;
  std::string out;
};

inline int cmd_sample(const SampleOptions& o, std::ostream& log) {
  const Checkpoint ck = open_checkpoint(o.checkpoint);
  if (ck.model.mode() != BoostMode::additive)
    throw Failure{kStateError, "sampling from a multiplicative model is not supported"};
  if (ck.model.empty()) throw Failure{kStateError, "model has no components"};
  if (o.n < 0) throw Failure{kConfigError, "--n must be >= 0"};
  Rng rng = derive_rng(o.seed, 0, 0);
  const MixtureSample s = sample_mixture(ck.model, o.n, rng);
  std::ostringstream csv;
  csv << "# config_hash=" << checkpoint_hash(ck) << "\ncomponent";
  for (int j = 0; j < ck.model.dim(); ++j) csv << ",x" << (j + 1);
  csv << '\n';
  for (Eigen::Index i = 0; i < s.points.rows(); ++i) {
    csv << (s.component_ids[static_cast<std::size_t>(i)] + 1);
    for (Eigen::Index j = 0; j < s.points.cols(); ++j) csv << ',' << format_double(s.points(i, j));
    csv << '\n';
  }
  const std::string out = o.out.empty() ? o.checkpoint + ".samples.csv" : o.out;
  write_text(out, csv.str());
  log << "wrote " << o.n << " samples to " << out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::optional<bool> header;  // auto-detect by default
};

inline int cmd_eval(const EvalOptions& o, std::ostream& log) {
  const Checkpoint ck = open_checkpoint(o.checkpoint);
  require_evaluable(ck.model);
  Matrix x;
  try {
    x = read_csv_matrix(o.data, o.header);
  } catch (const Error& e) {
    throw Failure{kConfigError, e.what()};
  }
  if (x.rows() == 0) throw Failure{kConfigError, o.data + ": no data rows"};
  if (x.cols() != ck.model.dim())
    throw Failure{kConfigError, o.data + ": " + std::to_string(x.cols()) + " columns but the model has dimension " +
                                    std::to_string(ck.model.dim())};
  const Vector ll = log_prob(ck.model, x);
  std::vector<double> sorted(ll.data(), ll.data() + ll.size());
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  };
  nlohmann::json j;
  j["config_hash"] = checkpoint_hash(ck);
  j["n"] = x.rows();
  j["mean_log_likelihood"] = ll.mean();
  nlohmann::json qs;
  for (double q : {0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0}) {
    char key[16];
    std::snprintf(key, sizeof key, "q%02d", static_cast<int>(std::lround(q * 100)));
    qs[key] = quantile(q);
  }
  j["log_likelihood_quantiles"] = qs;
  const std::string out = o.out.empty() ? o.checkpoint + ".metrics.json" : o.out;
  write_text(out, j.dump(2) + "\n");
  log << "mean log-likelihood " << ll.mean() << " nats over " << x.rows() << " points; wrote " << out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// partition

struct PartitionOptions {
  std::string checkpoint;
  long samples = 100000;
  std::uint64_t seed = 0;
};

inline int cmd_partition(const PartitionOptions& o, std::ostream& log) {
  Checkpoint ck = open_checkpoint(o.checkpoint);
  if (ck.model.mode() != BoostMode::multiplicative)
    throw Failure{kStateError, "partition estimates apply to multiplicative models only"};
  if (ck.model.empty()) throw Failure{kStateError, "model has no components"};
  if (o.samples < 1000) throw Failure{kConfigError, "--samples must be >= 1000"};
  Rng rng = derive_rng(o.seed, ck.model.size(), kPartition);
  PartitionEstimate est;
  try {
    est = estimate_log_partition(ck.model, o.samples, rng);
  } catch (const DomainError& e) {
    throw Failure{kStateError, e.what()};
  } catch (const NumericError& e) {
    throw Failure{kStateError, e.what()};
  }
  ck.model.set_partition(est);
  save_checkpoint(ck, o.checkpoint);
  log << "log partition " << format_double(est.log_value) << " (stderr " << format_double(est.stderr_log)
      << ", ESS " << est.ess << ")\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Gradient-boosted normalizing flows"};
  app.require_subcommand(1);

  TrainOptions train;
  auto* t = app.add_subcommand("train", "Fit a boosted flow mixture from a config file");
  t->add_option("--config", train.config, "Config file")->required();
  t->add_option("--out", train.out, "Output directory for run folders");

  GridOptions grid;
  std::string bbox_text;
  auto* g = app.add_subcommand("grid", "Evaluate log-density on a regular 2D grid (CSV + PGM)");
  g->add_option("--checkpoint", grid.checkpoint, "Checkpoint file")->required();
  g->add_option("--bbox", bbox_text, "x0,x1,y0,y1");
  g->add_option("--res", grid.res, "Cells per side");
  g->add_option("--out", grid.out, "Output path prefix");

  SampleOptions sample;
  auto* s = app.add_subcommand("sample", "Draw samples with component ids");
  s->add_option("--checkpoint", sample.checkpoint, "Checkpoint file")->required();
  s->add_option("--n", sample.n, "Number of samples");
  s->add_option("--seed", sample.seed, "Random seed");
  s->add_option("--out", sample.out, "Output CSV");

  EvalOptions eval;
  bool header = false, no_header = false;
  auto* e = app.add_subcommand("eval", "Log-likelihood metrics on a CSV of points");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", eval.data, "CSV of points")->required();
  e->add_option("--out", eval.out, "Output metrics JSON");
  e->add_flag("--header", header, "First row is a header");
  e->add_flag("--no-header", no_header, "First row is data");

  PartitionOptions part;
  auto* p = app.add_subcommand("partition", "Re-estimate the partition function of a multiplicative model");
  p->add_option("--checkpoint", part.checkpoint, "Checkpoint file")->required();
  p->add_option("--samples", part.samples, "Importance samples");
  p->add_option("--seed", part.seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    return kConfigError;
  }

  try {
    if (*t) return cmd_train(train, out);
    if (*g) {
      if (!bbox_text.empty()) {
        grid.bbox.clear();
        std::stringstream ss(bbox_text);
        std::string item;
        while (std::getline(ss, item, ',')) {
          double v = 0.0;
          if (!parse_number(item, v)) throw Failure{kConfigError, "--bbox: not a number: '" + item + "'"};
          grid.bbox.push_back(v);
        }
      }
      return cmd_grid(grid, out);
    }
    if (*s) return cmd_sample(sample, out);
    if (*e) {
      if (header) eval.header = true;
      if (no_header) eval.header = false;
      return cmd_eval(eval, out);
    }
    if (*p) return cmd_partition(part, out);
  } catch (const Failure& f) {
    err << "error: " << f.message << "\n";
    return f.code;
  } catch (const TrainingAbort& ex) {
    err << "error: training aborted: " << ex.what() << "\n";
    return kTrainingAbort;
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const VersionError& ex) {
    err << "error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return kStateError;
  }
  return kConfigError;
}

}  // namespace gbnf::cli
