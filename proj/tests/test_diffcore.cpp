#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "gbnf/diffcore.hpp"
#include "gbnf/flows.hpp"
#include "gbnf/objectives.hpp"
#include "test_util.hpp"

using namespace gbnf;
using gbnf::testing::random_component;
using gbnf::testing::random_matrix;

namespace {

struct Fixture {
  ParamLayout layout;
  TensorSlice a, b, w, bias, s;
  Fixture() {
    a = layout.add(0, "a", 5, 4);
    b = layout.add(0, "b", 5, 4);
    w = layout.add(0, "w", 3, 4);
    bias = layout.add(0, "bias", 1, 3);
    s = layout.add(0, "s", 1, 1);
  }
  ParamVector random(Rng& rng) const {
    ParamVector p(layout);
    std::normal_distribution<double> n(0.0, 0.7);
    for (double& v : p.values()) v = n(rng);
    return p;
  }
};

using Unary = std::function<diff::Var(diff::Tape&, diff::Var a, diff::Var b, diff::Var w, diff::Var bias,
                                      diff::Var s)>;

struct Primitive {
  const char* name;
  Unary build;
};

std::vector<Primitive> primitives() {
  using diff::Var;
  static const int even[] = {0, 2};
  static const int odd[] = {1, 3};
  return {
      {"add", [](diff::Tape&, Var a, Var b, Var, Var, Var) { return diff::add(a, b); }},
      {"sub", [](diff::Tape&, Var a, Var b, Var, Var, Var) { return diff::sub(a, b); }},
      {"mul", [](diff::Tape&, Var a, Var b, Var, Var, Var) { return diff::mul(a, b); }},
      {"scale", [](diff::Tape&, Var a, Var, Var, Var, Var) { return diff::scale(a, -1.7); }},
      {"add_scalar", [](diff::Tape&, Var a, Var, Var, Var, Var) { return diff::add_scalar(a, 0.3); }},
      {"scale_by", [](diff::Tape&, Var a, Var, Var, Var, Var s) { return diff::scale_by(a, s); }},
      {"matvec", [](diff::Tape&, Var a, Var, Var w, Var, Var) { return diff::matvec(a, w); }},
      {"affine", [](diff::Tape&, Var a, Var, Var w, Var bias, Var) { return diff::affine(a, w, bias); }},
      {"tanh", [](diff::Tape&, Var a, Var, Var, Var, Var) { return diff::tanh(a); }},
      {"exp", [](diff::Tape&, Var a, Var, Var, Var, Var) { return diff::exp(a); }},
      {"log",
       [](diff::Tape&, Var a, Var, Var, Var, Var) { return diff::log(diff::add_scalar(diff::mul(a, a), 0.5)); }},
      {"logsumexp", [](diff::Tape&, Var a, Var, Var, Var, Var) { return diff::logsumexp(a); }},
      {"sum", [](diff::Tape&, Var a, Var b, Var, Var, Var) { return diff::sum(diff::mul(a, b)); }},
      {"mean", [](diff::Tape&, Var a, Var b, Var, Var, Var) { return diff::mean(diff::mul(a, b)); }},
      {"row_sum", [](diff::Tape&, Var a, Var, Var, Var, Var) { return diff::row_sum(a); }},
      {"select_cols", [](diff::Tape&, Var a, Var, Var, Var, Var) { return diff::select_cols(a, odd); }},
      {"merge_cols",
       [](diff::Tape&, Var a, Var b, Var, Var, Var) {
         return diff::merge_cols(diff::select_cols(a, even), even, diff::select_cols(b, odd), odd);
       }},
      {"concat_cols",
       [](diff::Tape&, Var a, Var b, Var, Var, Var) {
         const Var parts[] = {a, b};
         return diff::concat_cols(parts);
       }},
      {"rowwise",
       [](diff::Tape&, Var a, Var, Var, Var, Var) {
         diff::RowFunction fn{[](const Eigen::RowVectorXd& r) { return std::sin(r(0)) * r(1) + r(2) * r(2); },
                              [](const Eigen::RowVectorXd& r) {
                                Eigen::RowVectorXd g = Eigen::RowVectorXd::Zero(r.size());
                                g(0) = std::cos(r(0)) * r(1);
                                g(1) = std::sin(r(0));
                                g(2) = 2.0 * r(2);
                                return g;
                              }};
         return diff::rowwise(a, fn, "probe");
       }},
  };
}

// Contracts the primitive output with a fixed random weight so every output
// entry contributes to the scalar loss.
auto contracted(const Fixture& f, const Primitive& prim, std::uint64_t seed) {
  return [&f, &prim, seed](diff::Tape& t) {
    diff::Var out = prim.build(t, t.param(f.a), t.param(f.b), t.param(f.w), t.param(f.bias), t.param(f.s));
    Rng rng = derive_rng(seed, 99);
    Matrix c = random_matrix(out.rows(), out.cols(), rng);
    return diff::sum(diff::mul(out, t.constant(c)));
  };
}

}  // namespace

TEST(MlpForward, ZeroParametersGiveZeroOutput) {
  ParamLayout layout;
  MlpSlices net = add_mlp(layout, 0, "net", {3, 8, 2});
  ParamVector p(layout);
  Rng rng = derive_rng(1);
  Matrix out = mlp_forward(p, net, random_matrix(6, 3, rng));
  EXPECT_EQ(out.rows(), 6);
  EXPECT_EQ(out.cols(), 2);
  EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.0);
}

TEST(MlpForward, ZeroInputReturnsOutputBias) {
  ParamLayout layout;
  MlpSlices net = add_mlp(layout, 0, "net", {2, 2, 2});
  ParamVector p(layout);
  p.set(net.w1, 0.01 * Matrix::Identity(2, 2));
  Matrix b2(1, 2);
  b2 << 0.25, -1.5;
  p.set(net.b2, b2);
  Rng rng = derive_rng(2);
  p.set(net.w2, random_matrix(2, 2, rng));
  Matrix out = mlp_forward(p, net, Matrix::Zero(1, 2));
  EXPECT_EQ(out(0, 0), 0.25);
  EXPECT_EQ(out(0, 1), -1.5);
}

TEST(MlpForward, MatchesStraightLineEvaluation) {
  ParamLayout layout;
  MlpSlices net = add_mlp(layout, 0, "net", {3, 7, 2});
  ParamVector p(layout);
  Rng rng = derive_rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : p.values()) v = n(rng);
  Matrix x = random_matrix(10, 3, rng);
  Matrix out = mlp_forward(p, net, x);
  // Parameters read straight from the documented row-major layout.
  auto at = [&](const TensorSlice& s, int r, int c) { return p[s.offset + static_cast<std::size_t>(r * s.cols + c)]; };
  for (int i = 0; i < 10; ++i)
    for (int o = 0; o < 2; ++o) {
      double acc = at(net.b2, 0, o);
      for (int h = 0; h < 7; ++h) {
        double pre = at(net.b1, 0, h);
        for (int k = 0; k < 3; ++k) pre += at(net.w1, h, k) * x(i, k);
        acc += at(net.w2, o, h) * std::tanh(pre);
      }
      EXPECT_NEAR(out(i, o), acc, 1e-12);
    }
}

TEST(ParamLayout, SlicesAreDisjointAndCovering) {
  FlowComponent c(FlowShape{4, 3, 5});
  EXPECT_TRUE(c.params().layout().valid());
  std::size_t total = 0;
  for (const auto& s : c.params().layout().slices()) total += s.size();
  EXPECT_EQ(total, c.params().size());
  ParamLayout l;
  l.add(0, "x", 2, 2);
  EXPECT_THROW(l.add(0, "x", 1, 1), ShapeError);
}

TEST(GradScalar, SumOfParamsHasUnitGradient) {
  Fixture f;
  Rng rng = derive_rng(4);
  ParamVector p = f.random(rng);
  GradResult g = diff::grad_scalar(
      [&](diff::Tape& t) {
        diff::Var total = diff::sum(t.param(f.a));
        for (const TensorSlice* s : {&f.b, &f.w, &f.bias, &f.s}) total = diff::add(total, diff::sum(t.param(*s)));
        return total;
      },
      p);
  for (double v : g.gradient) EXPECT_EQ(v, 1.0);
}

TEST(GradScalar, HalfSquaredNormHasParamsAsGradient) {
  Fixture f;
  Rng rng = derive_rng(5);
  ParamVector p = f.random(rng);
  GradResult g = diff::grad_scalar(
      [&](diff::Tape& t) {
        diff::Var total = t.constant(Matrix::Zero(1, 1));
        for (const TensorSlice* s : {&f.a, &f.b, &f.w, &f.bias, &f.s}) {
          diff::Var v = t.param(*s);
          total = diff::add(total, diff::scale(diff::sum(diff::mul(v, v)), 0.5));
        }
        return total;
      },
      p);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_DOUBLE_EQ(g.gradient[i], p[i]);
}

TEST(GradScalar, EveryPrimitiveMatchesFiniteDifferences) {
  Fixture f;
  const auto prims = primitives();
  for (const auto& prim : prims) {
    for (int trial = 0; trial < 100; ++trial) {
      Rng rng = derive_rng(6, static_cast<std::uint64_t>(trial));
      ParamVector p = f.random(rng);
      const double err = diff::finite_diff_check(contracted(f, prim, trial), p, 1e-5);
      ASSERT_LT(err, 1e-4) << prim.name << " trial " << trial;
    }
  }
}

TEST(GradScalar, IsBitIdenticalAcrossCalls) {
  Rng rng = derive_rng(7);
  FlowComponent c = random_component(FlowShape{2, 4, 8}, rng);
  Matrix x = random_matrix(32, 2, rng);
  GradResult g1 = diff::grad_scalar(nll_program(c, x), c.params());
  GradResult g2 = diff::grad_scalar(nll_program(c, x), c.params());
  EXPECT_EQ(g1.loss, g2.loss);
  EXPECT_EQ(g1.gradient, g2.gradient);
}

TEST(GradScalar, GradientOfSumIsSumOfGradients) {
  Fixture f;
  const auto prims = primitives();
  for (std::size_t i = 0; i < prims.size(); ++i) {
    const Primitive& p1 = prims[i];
    const Primitive& p2 = prims[(i + 5) % prims.size()];
    Rng rng = derive_rng(8, i);
    ParamVector p = f.random(rng);
    auto l1 = contracted(f, p1, i);
    auto l2 = contracted(f, p2, i + 100);
    GradResult g1 = diff::grad_scalar(l1, p);
    GradResult g2 = diff::grad_scalar(l2, p);
    GradResult g12 = diff::grad_scalar([&](diff::Tape& t) { return diff::add(l1(t), l2(t)); }, p);
    for (std::size_t k = 0; k < p.size(); ++k)
      EXPECT_NEAR(g12.gradient[k], g1.gradient[k] + g2.gradient[k],
                  1e-12 * (1.0 + std::abs(g12.gradient[k])))
          << p1.name << " + " << p2.name;
  }
}

TEST(FiniteDiffCheck, LinearLossIsExact) {
  Fixture f;
  Rng rng = derive_rng(9);
  ParamVector p = f.random(rng);
  Matrix c = random_matrix(5, 4, rng);
  auto linear = [&](diff::Tape& t) { return diff::sum(diff::mul(t.param(f.a), t.constant(c))); };
  for (double eps : {1e-3, 1e-4, 1e-5}) EXPECT_LT(diff::finite_diff_check(linear, p, eps), 1e-8);
}

TEST(FiniteDiffCheck, QuadraticLossIsExactToRounding) {
  Fixture f;
  Rng rng = derive_rng(10);
  ParamVector p = f.random(rng);
  auto quad = [&](diff::Tape& t) {
    diff::Var a = t.param(f.a);
    return diff::scale(diff::sum(diff::mul(a, a)), 0.5);
  };
  EXPECT_LT(diff::finite_diff_check(quad, p, 1e-5), 1e-6);
  EXPECT_THROW(diff::finite_diff_check(quad, p, 0.0), DomainError);
}

TEST(FiniteDiffCheck, CouplingFlowNll) {
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng = derive_rng(11, trial);
    FlowComponent c = random_component(FlowShape{2, 2, 6}, rng);
    Matrix x = random_matrix(16, 2, rng);
    EXPECT_LT(diff::finite_diff_check(nll_program(c, x), c.params(), 1e-5), 1e-4);
  }
}

TEST(Primitives, LogRejectsNonPositiveInput) {
  Matrix m(1, 2);
  m << 1.0, 0.0;
  EXPECT_THROW(diff::log(m), NumericError);
  m << 1.0, -2.0;
  EXPECT_THROW(diff::log(m), NumericError);
  m << 1e-320, 1.0;  // subnormal, floored rather than rejected
  EXPECT_NEAR(diff::log(m)(0, 0), std::log(1e-300), 1e-9);
}

TEST(Primitives, ShapeMismatchIsReported) {
  EXPECT_THROW(diff::add(Matrix::Zero(2, 2), Matrix::Zero(2, 3)), ShapeError);
  diff::Tape t;
  EXPECT_THROW(t.constant(Matrix::Constant(1, 1, std::nan(""))), NumericError);
}
