#pragma once

// Data sources: 2D toy samplers, unnormalized 2D energies and tabular CSV.
//
// Toy generators (all inside [-4, 4]^2 up to Gaussian tails):
//   eight_gaussians  equal mixture of 8 isotropic Gaussians, sigma = 0.5/sqrt(2),
//                    centers on the circle of radius 2*sqrt(2) at multiples of 45 deg
//   checkerboard     uniform on the 8 dark cells of a 4x4 board covering [-4, 4]^2
//   pinwheel         5 blades; radial sd 0.3, tangential sd 0.1, twist rate 0.25, scaled by 2
//   spiral           two opposite Archimedean arms, r = theta / 3 for theta in
//                    [0, 3 pi] (sqrt-uniform), arm jitter U(0, 0.5)/3, then N(0, 0.1^2) noise
//
// Energies, log p(z) = -U(z), with z = (z1, z2) and w1 = sin(pi z1 / 2):
//   u1  1/2 ((|z| - 2) / 0.4)^2 - log(exp(-1/2 ((z1 - 2)/0.6)^2) + exp(-1/2 ((z1 + 2)/0.6)^2))
//   u2  1/2 ((z2 - w1) / 0.4)^2                                               + B(z1)
//   u3  -log(exp(-1/2 ((z2 - w1)/0.35)^2) + exp(-1/2 ((z2 - w1 + w2)/0.35)^2)) + B(z1)
//       w2 = 3 exp(-1/2 ((z1 - 1)/0.6)^2)
//   u4  -log(exp(-1/2 ((z2 - w1)/0.4)^2) + exp(-1/2 ((z2 - w1 + w3)/0.35)^2))  + B(z1)
//       w3 = 3 sigmoid((z1 - 1)/0.3)
// B(z1) = 5 max(0, |z1| - 4)^2 confines u2-u4 along z1, which the valley terms
// leave unbounded. All four satisfy log p(z) <= log 2.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gbnf/diffcore.hpp"
#include "gbnf/errors.hpp"
#include "gbnf/rng.hpp"

namespace gbnf {

// ---------------------------------------------------------------------------
// Toy samplers

enum class ToyName { eight_gaussians, checkerboard, pinwheel, spiral };

inline ToyName parse_toy(std::string_view name) {
  if (name == "eight_gaussians" || name == "8gaussians") return ToyName::eight_gaussians;
  if (name == "checkerboard") return ToyName::checkerboard;
  if (name == "pinwheel") return ToyName::pinwheel;
  if (name == "spiral" || name == "2spirals") return ToyName::spiral;
  throw ConfigError("unknown toy dataset: " + std::string(name));
}

inline const char* to_string(ToyName n) {
  switch (n) {
    case ToyName::eight_gaussians: return "eight_gaussians";
    case ToyName::checkerboard: return "checkerboard";
    case ToyName::pinwheel: return "pinwheel";
    case ToyName::spiral: return "spiral";
  }
  return "?";
}

inline const double kEightGaussiansRadius = 2.0 * std::numbers::sqrt2;
inline const double kEightGaussiansSigma = 0.5 / std::numbers::sqrt2;

inline std::array<Eigen::Vector2d, 8> eight_gaussians_centers() {
  std::array<Eigen::Vector2d, 8> c;
  for (int k = 0; k < 8; ++k) {
    const double a = k * std::numbers::pi / 4.0;
    c[static_cast<std::size_t>(k)] = kEightGaussiansRadius * Eigen::Vector2d(std::cos(a), std::sin(a));
  }
  return c;
}

struct ToySampler {
  ToyName name = ToyName::eight_gaussians;
};

inline Matrix sample_toy(const ToySampler& sampler, Eigen::Index n, Rng& rng) {
  if (n < 1) throw DomainError("sample_toy: n must be >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix x(n, 2);
  switch (sampler.name) {
    case ToyName::eight_gaussians: {
      const auto centers = eight_gaussians_centers();
      std::uniform_int_distribution<int> pick(0, 7);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto& c = centers[static_cast<std::size_t>(pick(rng))];
        const double a = normal(rng), b = normal(rng);
        x(i, 0) = c.x() + kEightGaussiansSigma * a;
        x(i, 1) = c.y() + kEightGaussiansSigma * b;
      }
      break;
    }
    case ToyName::checkerboard: {
      std::uniform_int_distribution<int> band(0, 1);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double x1 = unit(rng) * 4.0 - 2.0;
        const double x2 = unit(rng) - 2.0 * band(rng);
        const double parity = std::fmod(std::floor(x1), 2.0);
        x(i, 0) = 2.0 * x1;
        x(i, 1) = 2.0 * (x2 + (parity < 0 ? parity + 2.0 : parity));
      }
      break;
    }
    case ToyName::pinwheel: {
      constexpr int kBlades = 5;
      constexpr double kRadialSd = 0.3, kTangentialSd = 0.1, kRate = 0.25;
      std::uniform_int_distribution<int> pick(0, kBlades - 1);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double f0 = normal(rng) * kRadialSd + 1.0;
        const double f1 = normal(rng) * kTangentialSd;
        const double angle = 2.0 * std::numbers::pi * pick(rng) / kBlades + kRate * std::exp(f0);
        const double c = std::cos(angle), s = std::sin(angle);
        x(i, 0) = 2.0 * (f0 * c + f1 * s);
        x(i, 1) = 2.0 * (-f0 * s + f1 * c);
      }
      break;
    }
    case ToyName::spiral: {
      std::uniform_int_distribution<int> arm(0, 1);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double theta = std::sqrt(unit(rng)) * 3.0 * std::numbers::pi;
        const double sign = arm(rng) == 0 ? 1.0 : -1.0;
        const double dx = -std::cos(theta) * theta + unit(rng) * 0.5;
        const double dy = std::sin(theta) * theta + unit(rng) * 0.5;
        x(i, 0) = sign * dx / 3.0 + 0.1 * normal(rng);
        x(i, 1) = sign * dy / 3.0 + 0.1 * normal(rng);
      }
      break;
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// Energy targets

enum class EnergyName { u1, u2, u3, u4 };

inline EnergyName parse_energy(std::string_view name) {
  if (name == "u1") return EnergyName::u1;
  if (name == "u2") return EnergyName::u2;
  if (name == "u3") return EnergyName::u3;
  if (name == "u4") return EnergyName::u4;
  throw ConfigError("unknown energy target: " + std::string(name));
}

inline const char* to_string(EnergyName n) {
  switch (n) {
    case EnergyName::u1: return "u1";
    case EnergyName::u2: return "u2";
    case EnergyName::u3: return "u3";
    case EnergyName::u4: return "u4";
  }
  return "?";
}

inline constexpr double kEnergyLogUpperBound = std::numbers::ln2;

namespace detail {

// log(exp(a) + exp(b)) and the softmax weight of a.
inline std::pair<double, double> lse2(double a, double b) {
  const double m = std::max(a, b);
  const double ea = std::exp(a - m), eb = std::exp(b - m);
  return {m + std::log(ea + eb), ea / (ea + eb)};
}

struct EnergyEval {
  double log_density;
  Eigen::Vector2d grad;  // d log p / dz
};

inline EnergyEval evaluate_energy(EnergyName name, double z1, double z2) {
  constexpr double pi = std::numbers::pi;
  // Confinement along z1 for the valley energies.
  const double excess = std::max(0.0, std::abs(z1) - 4.0);
  const double box = 5.0 * excess * excess;
  const double dbox = 10.0 * excess * (z1 >= 0 ? 1.0 : -1.0);
  const double w1 = std::sin(pi * z1 / 2.0);
  const double dw1 = pi / 2.0 * std::cos(pi * z1 / 2.0);

  switch (name) {
    case EnergyName::u1: {
      const double r = std::sqrt(z1 * z1 + z2 * z2);
      const double ring = (r - 2.0) / 0.4;
      const double a = -0.5 * std::pow((z1 - 2.0) / 0.6, 2);
      const double b = -0.5 * std::pow((z1 + 2.0) / 0.6, 2);
      const auto [lse, pa] = lse2(a, b);
      const double u = 0.5 * ring * ring - lse;
      const double da = -(z1 - 2.0) / 0.36, db = -(z1 + 2.0) / 0.36;
      Eigen::Vector2d du(0.0, 0.0);
      if (r > 0.0) du = (ring / 0.4) * Eigen::Vector2d(z1 / r, z2 / r);
      du.x() -= pa * da + (1.0 - pa) * db;
      return {-u, -du};
    }
    case EnergyName::u2: {
      const double v = (z2 - w1) / 0.4;
      const double u = 0.5 * v * v + box;
      const Eigen::Vector2d du(v / 0.4 * -dw1 + dbox, v / 0.4);
      return {-u, -du};
    }
    case EnergyName::u3: {
      const double w2 = 3.0 * std::exp(-0.5 * std::pow((z1 - 1.0) / 0.6, 2));
      const double dw2 = w2 * -(z1 - 1.0) / 0.36;
      const double p = (z2 - w1) / 0.35, q = (z2 - w1 + w2) / 0.35;
      const auto [lse, pa] = lse2(-0.5 * p * p, -0.5 * q * q);
      const double u = -lse + box;
      // d(-lse)/dz = pa * p * dp + (1 - pa) * q * dq
      const double dz1 = pa * p * (-dw1 / 0.35) + (1.0 - pa) * q * ((-dw1 + dw2) / 0.35) + dbox;
      const double dz2 = pa * p / 0.35 + (1.0 - pa) * q / 0.35;
      return {-u, -Eigen::Vector2d(dz1, dz2)};
    }
    case EnergyName::u4: {
      const double sig = 1.0 / (1.0 + std::exp(-(z1 - 1.0) / 0.3));
      const double w3 = 3.0 * sig;
      const double dw3 = 3.0 * sig * (1.0 - sig) / 0.3;
      const double p = (z2 - w1) / 0.4, q = (z2 - w1 + w3) / 0.35;
      const auto [lse, pa] = lse2(-0.5 * p * p, -0.5 * q * q);
      const double u = -lse + box;
      const double dz1 = pa * p * (-dw1 / 0.4) + (1.0 - pa) * q * ((-dw1 + dw3) / 0.35) + dbox;
      const double dz2 = pa * p / 0.4 + (1.0 - pa) * q / 0.35;
      return {-u, -Eigen::Vector2d(dz1, dz2)};
    }
  }
  return {0.0, Eigen::Vector2d::Zero()};
}

}  // namespace detail

struct EnergyTarget {
  EnergyName name = EnergyName::u1;
  // When set, replaces the named energy (reference targets in tests and tools).
  std::shared_ptr<const diff::RowFunction> custom{};

  static EnergyTarget from_function(diff::RowFunction fn) {
    EnergyTarget t;
    t.custom = std::make_shared<const diff::RowFunction>(std::move(fn));
    return t;
  }

  std::string label() const { return custom ? "custom" : to_string(name); }

  double log_unnorm(double z1, double z2) const {
    if (!std::isfinite(z1) || !std::isfinite(z2)) throw NumericError("energy_log_unnorm: non-finite input");
    const double v = eval(z1, z2).log_density;
    if (!std::isfinite(v)) throw NumericError("energy_log_unnorm: non-finite value");
    return v;
  }

  Eigen::Vector2d grad_log_unnorm(double z1, double z2) const { return eval(z1, z2).grad; }

  Vector log_unnorm(const Matrix& z) const {
    if (z.cols() != 2) throw ShapeError("energy targets are two-dimensional");
    Vector out(z.rows());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double v = eval(z(i, 0), z(i, 1)).log_density;
      if (!std::isfinite(v))
        throw NumericError("energy " + label() + ": non-finite at (" + std::to_string(z(i, 0)) + ", " +
                           std::to_string(z(i, 1)) + ")");
      out(i) = v;
    }
    return out;
  }

  // Differentiable per-row node for the tape.
  diff::RowFunction row_function() const {
    if (custom) return *custom;
    const EnergyName n = name;
    return diff::RowFunction{
        [n](const Eigen::RowVectorXd& z) { return detail::evaluate_energy(n, z(0), z(1)).log_density; },
        [n](const Eigen::RowVectorXd& z) {
          return Eigen::RowVectorXd(detail::evaluate_energy(n, z(0), z(1)).grad.transpose());
        }};
  }

 private:
  detail::EnergyEval eval(double z1, double z2) const {
    if (!custom) return detail::evaluate_energy(name, z1, z2);
    const Eigen::RowVector2d z(z1, z2);
    const Eigen::RowVectorXd g = custom->gradient(z);
    return {custom->value(z), Eigen::Vector2d(g(0), g(1))};
  }
};

inline double energy_log_unnorm(const EnergyTarget& target, const Eigen::Vector2d& z) {
  return target.log_unnorm(z.x(), z.y());
}

// ---------------------------------------------------------------------------
// CSV

// Shortest form that round-trips a double.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline bool parse_number(std::string_view cell, double& out) {
  cell = trim(cell);
  if (cell.empty()) return false;
  if (cell.front() == '+') cell.remove_prefix(1);
  const auto r = std::from_chars(cell.data(), cell.data() + cell.size(), out);
  return r.ec == std::errc() && r.ptr == cell.data() + cell.size() && std::isfinite(out);
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    cells.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return cells;
}

/// Comma-separated numeric matrix. `header`: true skips the first row, false
/// parses it, nullopt skips it only if it is not numeric. Lines starting with
/// `#` are comments.
inline Matrix read_csv_matrix(const std::string& path, std::optional<bool> header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open CSV file: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  bool seen_content = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = trim(line);
    if (line_no == 1 && view.size() >= 3 && static_cast<unsigned char>(view[0]) == 0xEF) view.remove_prefix(3);
    if (view.empty() || view.front() == '#') continue;
    const bool first = !seen_content;
    seen_content = true;
    const auto cells = split_commas(view);
    if (first && header.value_or(false)) continue;
    std::vector<double> row(cells.size());
    bool ok = true;
    std::size_t bad = 0;
    for (std::size_t j = 0; j < cells.size(); ++j)
      if (!parse_number(cells[j], row[j])) {
        ok = false;
        bad = j;
        break;
      }
    if (!ok) {
      if (first && !header.has_value()) continue;
      throw ParseError(path + ": non-numeric cell at row " + std::to_string(line_no) + ", column " +
                       std::to_string(bad + 1));
    }
    if (width == 0) width = row.size();
    if (row.size() != width)
      throw ParseError(path + ": row " + std::to_string(line_no) + " has " + std::to_string(row.size()) +
                       " columns, expected " + std::to_string(width));
    rows.push_back(std::move(row));
  }
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < width; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

inline void write_csv(const std::string& path, const Matrix& m, const std::vector<std::string>& header) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write CSV file: " + path);
  for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
  if (!header.empty()) out << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << format_double(m(i, j));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Tabular data

struct TabularOptions {
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  bool standardize = true;
  std::optional<bool> header = false;
  std::uint64_t seed = 0;
};

struct TabularDataset {
  Matrix train, val, test;
  Eigen::RowVectorXd mean, stddev;  // identity (0, 1) when not standardized
  int dim = 0;

  Matrix standardize(const Matrix& x) const {
    return ((x.rowwise() - mean).array().rowwise() / stddev.array()).matrix();
  }
  Matrix destandardize(const Matrix& x) const {
    return ((x.array().rowwise() * stddev.array()).matrix().rowwise() + mean);
  }
};

/// Row shuffle (seeded), split, and optional standardization with
/// statistics from the train split only.
inline TabularDataset split_tabular(const Matrix& data, const TabularOptions& opt) {
  const double total = opt.train_fraction + opt.val_fraction + opt.test_fraction;
  if (std::abs(total - 1.0) > 1e-9 || opt.train_fraction < 0 || opt.val_fraction < 0 || opt.test_fraction < 0)
    throw ConfigError("split fractions must be non-negative and sum to 1");
  const Eigen::Index n = data.rows();
  const auto n_train = static_cast<Eigen::Index>(std::floor(opt.train_fraction * static_cast<double>(n) + 1e-9));
  const auto n_val = static_cast<Eigen::Index>(std::floor(opt.val_fraction * static_cast<double>(n) + 1e-9));
  const Eigen::Index n_test = n - n_train - n_val;
  if (n_train < 1 || n_val < 1 || n_test < 1) throw ConfigError("a data split would be empty");

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng = derive_rng(opt.seed, 0x7ab, 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto take = [&](Eigen::Index from, Eigen::Index count) {
    Matrix m(count, data.cols());
    for (Eigen::Index i = 0; i < count; ++i) m.row(i) = data.row(order[static_cast<std::size_t>(from + i)]);
    return m;
  };

  TabularDataset ds;
  ds.dim = static_cast<int>(data.cols());
  ds.train = take(0, n_train);
  ds.val = take(n_train, n_val);
  ds.test = take(n_train + n_val, n_test);
  ds.mean = Eigen::RowVectorXd::Zero(data.cols());
  ds.stddev = Eigen::RowVectorXd::Ones(data.cols());
  if (opt.standardize) {
    ds.mean = ds.train.colwise().mean();
    const Matrix centered = ds.train.rowwise() - ds.mean;
    ds.stddev = (centered.array().square().colwise().sum() / static_cast<double>(n_train)).sqrt();
    for (Eigen::Index j = 0; j < ds.stddev.size(); ++j)
      if (!(ds.stddev(j) > 0.0)) ds.stddev(j) = 1.0;
    ds.train = ds.standardize(ds.train);
    ds.val = ds.standardize(ds.val);
    ds.test = ds.standardize(ds.test);
  }
  return ds;
}

inline TabularDataset load_tabular(const std::string& path, const TabularOptions& opt) {
  const Matrix data = read_csv_matrix(path, opt.header);
  if (data.rows() == 0) throw ConfigError(path + ": no data rows");
  return split_tabular(data, opt);
}

}  // namespace gbnf
