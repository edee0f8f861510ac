#pragma once

// Training configuration: a flat `key = value` text format with [sections].
// Blank lines and lines starting with '#' or ';' are ignored. Every key must
// belong to a known section; unknown sections or keys are rejected.
//
//   [run]       id, seed, task (density_estimation | density_matching),
//               boost (additive | multiplicative)
//   [data]      source (toy | energy | tabular), name, path, header,
//               train_frac, val_frac, test_frac, standardize,
//               n_train, n_val, n_test
//   [flow]      steps (K), hidden (H)
//   [boost]     components (C), lambda, rho (grid | sgd), grid_size,
//               rho_step, rho_tolerance, rho_max_iters, rho_decay, rho_batch,
//               partition_samples, beta, additive_objective (reweighted | entropy),
//               stochastic_fixed
//   [train]     lr, schedule (constant | cosine), batch, max_steps, eval_every,
//               patience, clip_norm, n_mc, val_mc
//   [finetune]  passes, epochs

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "gbnf/boostcore.hpp"
#include "gbnf/errors.hpp"
#include "gbnf/targets.hpp"

namespace gbnf {

enum class TaskMode { density_estimation, density_matching };
enum class DataSource { toy, energy, tabular };
enum class RhoStrategy { grid, sgd };
enum class Schedule { constant, cosine };
enum class AdditiveObjective { reweighted, entropy };

struct TrainConfig {
  // [run]
  std::string run_id = "run";
  std::uint64_t seed = 0;
  TaskMode task = TaskMode::density_estimation;
  BoostMode boost = BoostMode::additive;
  // [data]
  DataSource source = DataSource::toy;
  std::string name = "eight_gaussians";
  std::string path;
  bool header = false;
  double train_frac = 0.8, val_frac = 0.1, test_frac = 0.1;
  bool standardize = true;
  long n_train = 20000, n_val = 5000, n_test = 5000;
  // [flow]
  int steps = 1;
  int hidden = 256;
  // [boost]
  int components = 1;
  double lambda = 0.8;
  RhoStrategy rho = RhoStrategy::grid;
  int grid_size = 26;
  double rho_step = 0.05, rho_tolerance = 1e-4;
  int rho_max_iters = 500;
  double rho_decay = 0.01;
  long rho_batch = 256;
  long partition_samples = 100000;
  double beta = 1.0;
  AdditiveObjective additive_objective = AdditiveObjective::entropy;
  bool stochastic_fixed = false;
  // [train]
  double lr = 1e-3;
  Schedule schedule = Schedule::cosine;
  long batch = 512;
  long max_steps = 25000;
  long eval_every = 100;
  long patience = 50;
  double clip_norm = 10.0;
  long n_mc = 256;
  long val_mc = 4096;
  // [finetune]
  int finetune_passes = 0;
  long finetune_epochs = 0;

  bool operator==(const TrainConfig&) const = default;
};

inline const char* to_string(TaskMode m) {
  return m == TaskMode::density_estimation ? "density_estimation" : "density_matching";
}
inline const char* to_string(DataSource s) {
  return s == DataSource::toy ? "toy" : s == DataSource::energy ? "energy" : "tabular";
}
inline const char* to_string(RhoStrategy r) { return r == RhoStrategy::grid ? "grid" : "sgd"; }
inline const char* to_string(Schedule s) { return s == Schedule::constant ? "constant" : "cosine"; }
inline const char* to_string(AdditiveObjective a) {
  return a == AdditiveObjective::reweighted ? "reweighted" : "entropy";
}

namespace config_detail {

inline std::string full(std::string_view section, std::string_view key) {
  return std::string(section) + "." + std::string(key);
}

template <class T>
T parse_integer(const std::string& key, std::string_view v) {
  T out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config key " + key + ": expected an integer, got '" + std::string(v) + "'");
  return out;
}

inline double parse_real(const std::string& key, std::string_view v) {
  double out = 0.0;
  if (!parse_number(v, out))
    throw ConfigError("config key " + key + ": expected a number, got '" + std::string(v) + "'");
  return out;
}

inline bool parse_bool(const std::string& key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key " + key + ": expected true or false, got '" + std::string(v) + "'");
}

template <class E>
E parse_enum(const std::string& key, std::string_view v, std::initializer_list<std::pair<const char*, E>> opts) {
  std::string allowed;
  for (const auto& [text, value] : opts) {
    if (v == text) return value;
    allowed += allowed.empty() ? text : std::string(" | ") + text;
  }
  throw ConfigError("config key " + key + ": expected one of " + allowed + ", got '" + std::string(v) + "'");
}

}  // namespace config_detail

/// Applies one `section.key = value` assignment.
inline void set_config_value(TrainConfig& c, std::string_view section, std::string_view key, std::string_view v) {
  using namespace config_detail;
  const std::string k = full(section, key);
  auto integer = [&]<class T>(T& dst) { dst = parse_integer<T>(k, v); };
  if (k == "run.id") c.run_id = std::string(v);
  else if (k == "run.seed") integer(c.seed);
  else if (k == "run.task")
    c.task = parse_enum<TaskMode>(k, v, {{"density_estimation", TaskMode::density_estimation},
                                         {"density_matching", TaskMode::density_matching}});
  else if (k == "run.boost")
    c.boost = parse_enum<BoostMode>(k, v, {{"additive", BoostMode::additive},
                                           {"multiplicative", BoostMode::multiplicative}});
  else if (k == "data.source")
    c.source = parse_enum<DataSource>(k, v, {{"toy", DataSource::toy}, {"energy", DataSource::energy},
                                             {"tabular", DataSource::tabular}});
  else if (k == "data.name") c.name = std::string(v);
  else if (k == "data.path") c.path = std::string(v);
  else if (k == "data.header") c.header = parse_bool(k, v);
  else if (k == "data.train_frac") c.train_frac = parse_real(k, v);
  else if (k == "data.val_frac") c.val_frac = parse_real(k, v);
  else if (k == "data.test_frac") c.test_frac = parse_real(k, v);
  else if (k == "data.standardize") c.standardize = parse_bool(k, v);
  else if (k == "data.n_train") integer(c.n_train);
  else if (k == "data.n_val") integer(c.n_val);
  else if (k == "data.n_test") integer(c.n_test);
  else if (k == "flow.steps") integer(c.steps);
  else if (k == "flow.hidden") integer(c.hidden);
  else if (k == "boost.components") integer(c.components);
  else if (k == "boost.lambda") c.lambda = parse_real(k, v);
  else if (k == "boost.rho")
    c.rho = parse_enum<RhoStrategy>(k, v, {{"grid", RhoStrategy::grid}, {"sgd", RhoStrategy::sgd}});
  else if (k == "boost.grid_size") integer(c.grid_size);
  else if (k == "boost.rho_step") c.rho_step = parse_real(k, v);
  else if (k == "boost.rho_tolerance") c.rho_tolerance = parse_real(k, v);
  else if (k == "boost.rho_max_iters") integer(c.rho_max_iters);
  else if (k == "boost.rho_decay") c.rho_decay = parse_real(k, v);
  else if (k == "boost.rho_batch") integer(c.rho_batch);
  else if (k == "boost.partition_samples") integer(c.partition_samples);
  else if (k == "boost.beta") c.beta = parse_real(k, v);
  else if (k == "boost.additive_objective")
    c.additive_objective = parse_enum<AdditiveObjective>(
        k, v, {{"reweighted", AdditiveObjective::reweighted}, {"entropy", AdditiveObjective::entropy}});
  else if (k == "boost.stochastic_fixed") c.stochastic_fixed = parse_bool(k, v);
  else if (k == "train.lr") c.lr = parse_real(k, v);
  else if (k == "train.schedule")
    c.schedule = parse_enum<Schedule>(k, v, {{"constant", Schedule::constant}, {"cosine", Schedule::cosine}});
  else if (k == "train.batch") integer(c.batch);
  else if (k == "train.max_steps") integer(c.max_steps);
  else if (k == "train.eval_every") integer(c.eval_every);
  else if (k == "train.patience") integer(c.patience);
  else if (k == "train.clip_norm") c.clip_norm = parse_real(k, v);
  else if (k == "train.n_mc") integer(c.n_mc);
  else if (k == "train.val_mc") integer(c.val_mc);
  else if (k == "finetune.passes") integer(c.finetune_passes);
  else if (k == "finetune.epochs") integer(c.finetune_epochs);
  else throw ConfigError("unknown config key: " + k);
}

inline void validate(const TrainConfig& c) {
  auto require = [](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConfigError("config key " + key + ": " + what);
  };
  require(!c.run_id.empty() && c.run_id.find_first_of("/\\") == std::string::npos, "run.id",
          "must be a non-empty name without path separators");
  require(c.components >= 1, "boost.components", "C must be >= 1");
  require(c.steps >= 1, "flow.steps", "K must be >= 1");
  require(c.hidden >= 0, "flow.hidden", "must be >= 0");
  require(c.lambda > 0.0, "boost.lambda", "must be > 0");
  require(c.batch >= 1, "train.batch", "must be >= 1");
  require(c.lr > 0.0, "train.lr", "must be > 0");
  require(c.max_steps >= 0, "train.max_steps", "must be >= 0");
  require(c.eval_every >= 1, "train.eval_every", "must be >= 1");
  require(c.patience >= 1, "train.patience", "must be >= 1");
  require(c.clip_norm > 0.0, "train.clip_norm", "must be > 0");
  require(c.n_mc >= 1, "train.n_mc", "must be >= 1");
  require(c.val_mc >= 1, "train.val_mc", "must be >= 1");
  require(c.grid_size >= 2, "boost.grid_size", "must be >= 2");
  require(c.rho_step > 0.0, "boost.rho_step", "must be > 0");
  require(c.rho_tolerance > 0.0, "boost.rho_tolerance", "must be > 0");
  require(c.rho_max_iters >= 1, "boost.rho_max_iters", "must be >= 1");
  require(c.rho_decay >= 0.0, "boost.rho_decay", "must be >= 0");
  require(c.rho_batch >= 1, "boost.rho_batch", "must be >= 1");
  require(c.partition_samples >= 1000, "boost.partition_samples", "must be >= 1000");
  require(c.beta >= 0.0, "boost.beta", "must be >= 0");
  require(c.finetune_passes >= 0, "finetune.passes", "must be >= 0");
  require(c.finetune_epochs >= 0, "finetune.epochs", "must be >= 0");
  require(c.n_train >= 1 && c.n_val >= 1 && c.n_test >= 1, "data.n_train",
          "toy split sizes must be >= 1");

  const bool matching = c.task == TaskMode::density_matching;
  require(matching == (c.source == DataSource::energy), "data.source",
          "density_matching needs an energy source and density_estimation a sampled one");
  if (c.source == DataSource::toy) parse_toy(c.name);
  if (c.source == DataSource::energy) parse_energy(c.name);
  require(c.source != DataSource::tabular || !c.path.empty(), "data.path", "required for tabular data");
  require(!matching || c.boost == BoostMode::additive, "run.boost", "density matching uses additive mixtures");
  require(c.rho == RhoStrategy::grid || matching, "boost.rho", "sgd is available for density matching only");
  require(c.finetune_passes == 0 || c.boost == BoostMode::additive, "finetune.passes",
          "fine-tuning is available for additive mixtures only");
}

/// Canonical text of every field, one `section.key = value` per line. Parsing
/// this text reproduces the config exactly.
inline std::string to_text(const TrainConfig& c) {
  std::ostringstream o;
  auto real = [](double v) { return format_double(v); };
  auto flag = [](bool b) { return b ? "true" : "false"; };
  o << "[run]\n"
    << "id = " << c.run_id << "\nseed = " << c.seed << "\ntask = " << to_string(c.task)
    << "\nboost = " << to_string(c.boost) << "\n\n[data]\n"
    << "source = " << to_string(c.source) << "\nname = " << c.name << "\npath = " << c.path
    << "\nheader = " << flag(c.header) << "\ntrain_frac = " << real(c.train_frac)
    << "\nval_frac = " << real(c.val_frac) << "\ntest_frac = " << real(c.test_frac)
    << "\nstandardize = " << flag(c.standardize) << "\nn_train = " << c.n_train << "\nn_val = " << c.n_val
    << "\nn_test = " << c.n_test << "\n\n[flow]\n"
    << "steps = " << c.steps << "\nhidden = " << c.hidden << "\n\n[boost]\n"
    << "components = " << c.components << "\nlambda = " << real(c.lambda) << "\nrho = " << to_string(c.rho)
    << "\ngrid_size = " << c.grid_size << "\nrho_step = " << real(c.rho_step)
    << "\nrho_tolerance = " << real(c.rho_tolerance) << "\nrho_max_iters = " << c.rho_max_iters
    << "\nrho_decay = " << real(c.rho_decay) << "\nrho_batch = " << c.rho_batch
    << "\npartition_samples = " << c.partition_samples << "\nbeta = " << real(c.beta)
    << "\nadditive_objective = " << to_string(c.additive_objective)
    << "\nstochastic_fixed = " << flag(c.stochastic_fixed) << "\n\n[train]\n"
    << "lr = " << real(c.lr) << "\nschedule = " << to_string(c.schedule) << "\nbatch = " << c.batch
    << "\nmax_steps = " << c.max_steps << "\neval_every = " << c.eval_every << "\npatience = " << c.patience
    << "\nclip_norm = " << real(c.clip_norm) << "\nn_mc = " << c.n_mc << "\nval_mc = " << c.val_mc
    << "\n\n[finetune]\n"
    << "passes = " << c.finetune_passes << "\nepochs = " << c.finetune_epochs << "\n";
  return o.str();
}

inline TrainConfig parse_config_text(std::string_view text, bool check = true) {
  TrainConfig c;
  std::string section;
  std::size_t line_no = 0;
  std::size_t at = 0;
  while (at <= text.size()) {
    const auto end = text.find('\n', at);
    std::string_view line = trim(text.substr(at, end == std::string_view::npos ? std::string_view::npos : end - at));
    at = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": malformed section");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      static const char* known[] = {"run", "data", "flow", "boost", "train", "finetune"};
      if (std::find(std::begin(known), std::end(known), section) == std::end(known))
        throw ConfigError("unknown config section: [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError("config key " + std::string(key) + " appears before any [section]");
    set_config_value(c, section, key, value);
  }
  if (check) validate(c);
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const TrainConfig& c) { return hex64(fnv1a(to_text(c))); }

}  // namespace gbnf
