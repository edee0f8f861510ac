#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "gbnf/targets.hpp"
#include "test_util.hpp"

using namespace gbnf;
namespace fs = std::filesystem;

TEST(Toy, EightGaussiansIsCentered) {
  Rng rng = derive_rng(1);
  Matrix x = sample_toy(ToySampler{ToyName::eight_gaussians}, 1000000, rng);
  EXPECT_LT(x.colwise().mean().cwiseAbs().maxCoeff(), 0.01);
}

TEST(Toy, EightGaussiansStaysNearCenters) {
  Rng rng = derive_rng(2);
  Matrix x = sample_toy(ToySampler{ToyName::eight_gaussians}, 100000, rng);
  const auto centers = eight_gaussians_centers();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double best = 1e300;
    for (const auto& c : centers) best = std::min(best, (x.row(i).transpose() - c).norm());
    ASSERT_LT(best, 4.0);
  }
  for (const auto& c : centers) EXPECT_NEAR(c.norm(), kEightGaussiansRadius, 1e-12);
  EXPECT_LT(kEightGaussiansRadius + 3.0 * kEightGaussiansSigma, 4.0);
}

TEST(Toy, CheckerboardMarginalIsUniform) {
  Rng rng = derive_rng(3);
  const Eigen::Index n = 100000;
  Matrix x = sample_toy(ToySampler{ToyName::checkerboard}, n, rng);
  std::vector<double> v(x.col(0).data(), x.col(0).data() + n);
  std::sort(v.begin(), v.end());
  double ks = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double cdf = (v[static_cast<std::size_t>(i)] + 4.0) / 8.0;
    ks = std::max({ks, std::abs(cdf - static_cast<double>(i) / n), std::abs(cdf - static_cast<double>(i + 1) / n)});
  }
  EXPECT_LT(ks, 0.01);
}

TEST(Toy, ReproduciblePerSeed) {
  for (auto name : {ToyName::eight_gaussians, ToyName::checkerboard, ToyName::pinwheel, ToyName::spiral}) {
    Rng a = derive_rng(4), b = derive_rng(4);
    EXPECT_EQ(sample_toy(ToySampler{name}, 500, a), sample_toy(ToySampler{name}, 500, b));
  }
  EXPECT_EQ(parse_toy("8gaussians"), ToyName::eight_gaussians);
  EXPECT_THROW(parse_toy("moons"), ConfigError);
}

TEST(Energy, U1MatchesStraightLineFormula) {
  const EnergyTarget u1{EnergyName::u1};
  for (double angle : {0.0, 0.4, 1.3, 2.0, 3.1}) {
    const double z1 = 2.0 * std::cos(angle), z2 = 2.0 * std::sin(angle);
    const double ring = 0.5 * std::pow((std::sqrt(z1 * z1 + z2 * z2) - 2.0) / 0.4, 2);
    const double lobes =
        std::log(std::exp(-0.5 * std::pow((z1 - 2.0) / 0.6, 2)) + std::exp(-0.5 * std::pow((z1 + 2.0) / 0.6, 2)));
    EXPECT_NEAR(u1.log_unnorm(z1, z2), -(ring - lobes), 1e-12);
  }
}

TEST(Energy, U1IsSymmetric) {
  const EnergyTarget u1{EnergyName::u1};
  Rng rng = derive_rng(5);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int i = 0; i < 100; ++i) {
    const double x = u(rng), y = u(rng);
    EXPECT_DOUBLE_EQ(u1.log_unnorm(x, y), u1.log_unnorm(-x, y));
  }
}

TEST(Energy, TailsVanish) {
  for (int k = 0; k < 4; ++k) {
    const EnergyTarget t{static_cast<EnergyName>(k)};
    for (int d = 0; d < 16; ++d) {
      const double a = d * std::numbers::pi / 8.0;
      EXPECT_LT(t.log_unnorm(100.0 * std::cos(a), 100.0 * std::sin(a)), -100.0) << to_string(t.name);
    }
  }
}

TEST(Energy, FiniteAndBoundedOnProbeGrid) {
  const int res = 1000;
  Matrix z(static_cast<Eigen::Index>(res) * res, 2);
  for (int i = 0; i < res; ++i)
    for (int j = 0; j < res; ++j) {
      z(static_cast<Eigen::Index>(i) * res + j, 0) = -6.0 + 12.0 * i / (res - 1);
      z(static_cast<Eigen::Index>(i) * res + j, 1) = -6.0 + 12.0 * j / (res - 1);
    }
  for (int k = 0; k < 4; ++k) {
    const EnergyTarget t{static_cast<EnergyName>(k)};
    const Vector v = t.log_unnorm(z);
    EXPECT_TRUE(v.allFinite());
    EXPECT_LE(v.maxCoeff(), kEnergyLogUpperBound + 1e-12);
  }
}

TEST(Energy, GradientMatchesFiniteDifferences) {
  Rng rng = derive_rng(6);
  std::uniform_real_distribution<double> u(-5.5, 5.5);
  const double h = 1e-6;
  for (int k = 0; k < 4; ++k) {
    const EnergyTarget t{static_cast<EnergyName>(k)};
    for (int i = 0; i < 200; ++i) {
      const double x = u(rng), y = u(rng);
      const Eigen::Vector2d g = t.grad_log_unnorm(x, y);
      const double gx = (t.log_unnorm(x + h, y) - t.log_unnorm(x - h, y)) / (2 * h);
      const double gy = (t.log_unnorm(x, y + h) - t.log_unnorm(x, y - h)) / (2 * h);
      EXPECT_NEAR(g.x(), gx, 1e-5 * std::max(1.0, std::abs(gx))) << to_string(t.name);
      EXPECT_NEAR(g.y(), gy, 1e-5 * std::max(1.0, std::abs(gy))) << to_string(t.name);
    }
  }
  EXPECT_THROW(parse_energy("u5"), ConfigError);
}

TEST(Csv, DoublesRoundTrip) {
  Rng rng = derive_rng(7);
  Matrix m = gbnf::testing::random_matrix(20, 3, rng, 1e3);
  m(0, 0) = 1.0 / 3.0;
  m(1, 1) = -1e-300;
  const auto dir = gbnf::testing::scratch_dir("csv_roundtrip");
  write_csv((dir / "m.csv").string(), m, {"a", "b", "c"});
  EXPECT_EQ(read_csv_matrix((dir / "m.csv").string(), std::nullopt), m);
  EXPECT_EQ(read_csv_matrix((dir / "m.csv").string(), true), m);
}

TEST(Csv, HeaderCommentsAndErrors) {
  const auto dir = gbnf::testing::scratch_dir("csv_errors");
  {
    std::ofstream f(dir / "h.csv");
    f << "# produced elsewhere\nx,y\n1,2\n3,4\n";
  }
  Matrix m = read_csv_matrix((dir / "h.csv").string(), std::nullopt);
  EXPECT_EQ(m.rows(), 2);
  EXPECT_EQ(m(1, 1), 4.0);
  EXPECT_THROW(read_csv_matrix((dir / "h.csv").string(), false), ParseError);
  {
    std::ofstream f(dir / "bad.csv");
    f << "1,2\n3,oops\n";
  }
  try {
    read_csv_matrix((dir / "bad.csv").string(), false);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2, column 2"), std::string::npos) << e.what();
  }
  {
    std::ofstream f(dir / "ragged.csv");
    f << "1,2\n3\n";
  }
  EXPECT_THROW(read_csv_matrix((dir / "ragged.csv").string(), false), ParseError);
}

TEST(Tabular, SplitArithmetic) {
  Matrix data(4, 2);
  data << 1, 2, 3, 4, 5, 6, 7, 8;
  TabularOptions opt;
  opt.train_fraction = 0.5;
  opt.val_fraction = 0.25;
  opt.test_fraction = 0.25;
  opt.standardize = false;
  TabularDataset ds = split_tabular(data, opt);
  EXPECT_EQ(ds.train.rows(), 2);
  EXPECT_EQ(ds.val.rows(), 1);
  EXPECT_EQ(ds.test.rows(), 1);
  opt.train_fraction = 0.9;
  opt.val_fraction = 0.05;
  opt.test_fraction = 0.05;
  EXPECT_THROW(split_tabular(data, opt), ConfigError);
}

TEST(Tabular, StandardizationUsesTrainStatistics) {
  Rng rng = derive_rng(8);
  Matrix data = gbnf::testing::random_matrix(1000, 4, rng, 3.0);
  data.col(2).array() += 10.0;
  const auto dir = gbnf::testing::scratch_dir("tabular");
  write_csv((dir / "d.csv").string(), data, {});
  TabularOptions opt;
  opt.seed = 5;
  TabularDataset ds = load_tabular((dir / "d.csv").string(), opt);
  EXPECT_LT(ds.train.colwise().mean().cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_GT(ds.val.colwise().mean().cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_GT(ds.test.colwise().mean().cwiseAbs().maxCoeff(), 1e-6);
  Matrix raw = gbnf::testing::random_matrix(10, 4, rng);
  EXPECT_LT((ds.destandardize(ds.standardize(raw)) - raw).cwiseAbs().maxCoeff(), 1e-10);
  TabularDataset again = load_tabular((dir / "d.csv").string(), opt);
  EXPECT_EQ(again.train, ds.train);
  EXPECT_EQ(again.test, ds.test);
}
