#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mlcn/digest.hpp"
#include "mlcn/grad_check.hpp"
#include "mlcn/ops.hpp"
#include "test_util.hpp"

using namespace mlcn;
using mlcn::testing::randn;
using mlcn::testing::uniform;

namespace {

std::vector<long double> softmax_ld(const std::vector<long double>& x) {
  long double z = 0;
  for (auto v : x) z += std::exp(v);
  std::vector<long double> out;
  for (auto v : x) out.push_back(std::exp(v) / z);
  return out;
}

}  // namespace

TEST(Tensor, ShapeMustMatchBuffer) {
  EXPECT_THROW(Tensord({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensord({0, 3}, {}), ShapeError);
  EXPECT_EQ(Tensord({2, 3}, std::vector<double>(6)).size(), 6u);
}

TEST(Tensor, NonFiniteValuesAreRejected) {
  EXPECT_THROW(Tensord::vector({1.0, std::numeric_limits<double>::quiet_NaN()}), NumericError);
  EXPECT_THROW(Tensord::vector({std::numeric_limits<double>::infinity()}), NumericError);
  const auto big = Tensord::vector({700.0});
  EXPECT_THROW(exp(scale(big, 2.0)), NumericError);
  EXPECT_THROW(log(Tensord::vector({0.0})), NumericError);
}

TEST(Softmax, UniformInput) {
  const auto s = softmax(Tensord::vector({2.0, 2.0}), 0);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Softmax, LargeLogitsStayFinite) {
  const auto s = softmax(Tensord::vector({1000.0, 1000.0, 990.0}), 0);
  EXPECT_NEAR(s[0], s[1], 1e-15);
  EXPECT_NEAR(s[0] + s[1] + s[2], 1.0, 1e-12);
}

TEST(Softmax, MatchesExtendedPrecision) {
  const auto s = softmax(Tensord::vector({1.0, 2.0, 3.0}), 0);
  const auto ref = softmax_ld({1.0L, 2.0L, 3.0L});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s[i], static_cast<double>(ref[i]), 1e-12);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(6);
    const auto x = randn({r, c}, rng, 3.0);
    const std::size_t axis = rng.below(2);
    const auto s = softmax(x, axis);
    const auto shifted = softmax(add_scalar(x, rng.uniform(-20, 20)), axis);
    const auto sums = sum(s, axis);
    for (double v : sums.values()) ASSERT_NEAR(v, 1.0, 1e-6);
    for (double v : s.values()) ASSERT_GT(v, 0.0);
    ASSERT_LE(mlcn::testing::max_abs_diff(s.values(), shifted.values()), 1e-9);
  }
}

TEST(Cosine, IdentityOrthogonalityAndLoopOracle) {
  const auto v = Tensord::vector({0.3, -1.2, 2.0});
  EXPECT_NEAR(cosine(v, v).item(), 1.0, 1e-15);
  EXPECT_NEAR(cosine(Tensord::vector({1, 0}), Tensord::vector({0, 1})).item(), 0.0, 1e-15);
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const auto a = randn({8}, rng), b = randn({8}, rng);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    EXPECT_NEAR(cosine(a, b).item(), dot / (std::sqrt(na) * std::sqrt(nb)), 1e-12);
  }
}

TEST(Cosine, ZeroNormIsDegenerate) {
  EXPECT_THROW(cosine(Tensord::vector({0, 0}), Tensord::vector({1, 0})), DegenerateVectorError);
  EXPECT_THROW(cosine(Tensord::vector({1, 0}), Tensord::vector({1, 0, 0})), ShapeError);
}

TEST(Cosine, SymmetricBoundedScaleInvariant) {
  Rng rng(5);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(10);
    const auto a = randn({n}, rng), b = randn({n}, rng);
    const double ab = cosine(a, b).item();
    ASSERT_EQ(ab, cosine(b, a).item());
    ASSERT_LE(std::abs(ab), 1.0);
    const double al = rng.uniform(0.01, 100), be = rng.uniform(0.01, 100);
    ASSERT_NEAR(cosine(scale(a, al), scale(b, be)).item(), ab, 1e-9);
  }
}

TEST(Conv2d, OneByOneIdentityKernel) {
  Rng rng(1);
  const auto x = randn({4, 5, 1}, rng);
  const auto y = conv2d(x, Tensord({1, 1, 1, 1}, {1.0}), 1, 0);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(mlcn::testing::max_abs_diff(y.values(), x.values()), 0.0);
}

TEST(Conv2d, OnesKernelSumsWindows) {
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
  const auto y = conv2d(Tensord({4, 4, 1}, v), Tensord::full({3, 3, 1, 1}, 1.0), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 1}));
  for (std::size_t oy = 0; oy < 2; ++oy)
    for (std::size_t ox = 0; ox < 2; ++ox) {
      double s = 0;
      for (std::size_t dy = 0; dy < 3; ++dy)
        for (std::size_t dx = 0; dx < 3; ++dx) s += v[(oy + dy) * 4 + ox + dx];
      EXPECT_DOUBLE_EQ(y[oy * 2 + ox], s);
    }
}

TEST(Conv2d, MatchesNestedLoopReference) {
  Rng rng(9);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      const auto x = randn({5, 5, 2}, rng), k = randn({3, 3, 2, 4}, rng);
      const auto y = conv2d(x, k, stride, pad);
      const std::size_t oh = (5 + 2 * pad - 3) / stride + 1;
      ASSERT_EQ(y.shape(), (Shape{oh, oh, 4}));
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < oh; ++ox)
          for (std::size_t co = 0; co < 4; ++co) {
            double s = 0;
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
                for (std::size_t ci = 0; ci < 2; ++ci)
                  s += x[(static_cast<std::size_t>(iy) * 5 + static_cast<std::size_t>(ix)) * 2 + ci] *
                       k[((ky * 3 + kx) * 2 + ci) * 4 + co];
              }
            EXPECT_NEAR(y[(oy * oh + ox) * 4 + co], s, 1e-12);
          }
    }
  }
}

TEST(Conv2d, ShapeMismatch) {
  EXPECT_THROW(conv2d(Tensord::zeros({4, 4, 2}), Tensord::zeros({3, 3, 3, 1})), ShapeError);
  EXPECT_THROW(conv2d(Tensord::zeros({2, 2, 1}), Tensord::zeros({3, 3, 1, 1}), 1, 0), ShapeError);
}

TEST(AvgPool, ConstantSingletonAndLoop) {
  const auto c = avg_pool_spatial(Tensord::full({3, 3, 2}, 1.5));
  EXPECT_DOUBLE_EQ(c[0], 1.5);
  EXPECT_DOUBLE_EQ(c[1], 1.5);
  Rng rng(2);
  const auto one = randn({1, 1, 4}, rng);
  EXPECT_EQ(mlcn::testing::max_abs_diff(avg_pool_spatial(one).values(), one.values()), 0.0);
  const auto x = randn({4, 4, 3}, rng);
  const auto p = avg_pool_spatial(x);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double s = 0;
    for (std::size_t i = 0; i < 16; ++i) s += x[i * 3 + ch];
    EXPECT_NEAR(p[ch], s / 16, 1e-14);
  }
}

TEST(Backward, SumGivesOnes) {
  const auto t = Tensord({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  const auto g = backward(sum(t));
  for (double v : g.of(t)) EXPECT_EQ(v, 1.0);
}

TEST(Backward, CosineSelfIsStationary) {
  const auto v = Tensord::vector({0.5, -2.0, 1.0}, true);
  const auto g = backward(cosine(v, v));
  for (double x : g.of(v)) EXPECT_NEAR(x, 0.0, 1e-15);
}

TEST(Backward, UntouchedParameterGetsZero) {
  const auto a = Tensord::vector({1.0, 2.0}, true);
  const auto b = Tensord::vector({3.0, 4.0}, true);
  const auto g = backward(sum(square(a)));
  EXPECT_FALSE(g.contains(b));
  for (double v : g.of(b)) EXPECT_EQ(v, 0.0);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  const auto x = Tensord::vector({3.0}, true);
  const auto y = mul(x, x);
  const auto g = backward(sum(add(y, y)));
  EXPECT_DOUBLE_EQ(g.of(x)[0], 12.0);
}

TEST(Backward, NoGradGuardStopsRecording) {
  const auto x = Tensord::vector({3.0}, true);
  Tensord y;
  {
    NoGradGuard guard;
    y = square(x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(square(x).requires_grad());
}

TEST(Backward, BitIdenticalAcrossRuns) {
  auto run = [] {
    Rng rng(77);
    const auto a = randn({6, 4}, rng).as_parameter();
    const auto b = randn({4, 5}, rng).as_parameter();
    const auto loss = cross_entropy(softmax(matmul(a, b), 1), std::vector<std::size_t>{0, 1, 2, 3, 4, 0});
    const auto g = backward(loss);
    auto out = g.of(a);
    auto gb = g.of(b);
    out.insert(out.end(), gb.begin(), gb.end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, QuadraticIsNearlyExact) {
  GradCheckOptions opt;
  opt.tolerance = 1e-8;
  const auto r = grad_check<double>([](const auto& x) { return sum(square(x[0])); }, {Tensord::vector({3.0})}, opt);
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.worst_rel(), 1e-8);
}

TEST(GradCheck, SoftmaxCrossEntropyAtTightTolerance) {
  Rng rng(4);
  GradCheckOptions opt;
  opt.tolerance = 1e-6;
  const auto r = grad_check<double>([](const auto& x) { return cross_entropy(x[0], 2); }, {randn({5}, rng)}, opt);
  EXPECT_TRUE(r.pass) << r.worst_rel();
}

TEST(GradCheck, ReportInvariant) {
  // A wrong backward must be caught: pass is false when both errors exceed their limits.
  const auto wrong = [](const std::vector<Tensord>& x) {
    const auto v = x[0];
    auto vals = std::vector<double>(v.values().begin(), v.values().end());
    return Tensord::from_op(Shape{1}, {vals[0] * vals[0]}, "bad_square", {v},
                            [](const detail::Node<double>&, std::span<const double> g, std::span<std::span<double>> gi) {
                              gi[0][0] += g[0];
                            });
  };
  const auto r = grad_check<double>(wrong, {Tensord::vector({3.0})});
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.pass, r.worst_rel() <= r.tolerance || r.worst_abs() <= r.abs_floor);
}

TEST(GradCheck, NonFiniteProbeIsNumericError) {
  // log at x = 1e-6 probed with eps 1e-5 crosses zero.
  GradCheckOptions opt;
  EXPECT_THROW(grad_check<double>([](const auto& x) { return sum(log(x[0])); }, {Tensord::vector({1e-6})}, opt),
               NumericError);
  opt.eps = 0;
  EXPECT_THROW(grad_check<double>([](const auto& x) { return sum(x[0]); }, {Tensord::vector({1.0})}, opt),
               PreconditionError);
}

namespace {

struct OpCase {
  std::string name;
  std::function<std::vector<Tensord>(Rng&)> inputs;
  std::function<Tensord(const std::vector<Tensord>&)> op;
};

Tensord signed_away_from_zero(const Shape& s, Rng& rng) {
  auto t = uniform(s, rng, 0.5, 2.0);
  std::vector<double> v(t.values().begin(), t.values().end());
  for (auto& x : v)
    if (rng.below(2)) x = -x;
  return Tensord(s, v);
}

std::vector<OpCase> op_cases() {
  using V = std::vector<Tensord>;
  auto two = [](Shape a, Shape b) { return [a, b](Rng& r) { return V{randn(a, r), randn(b, r)}; }; };
  auto one = [](Shape a) { return [a](Rng& r) { return V{randn(a, r)}; }; };
  return {
      {"add", two({3, 4}, {4}), [](const V& x) { return add(x[0], x[1]); }},
      {"add_general", two({2, 3, 4}, {3, 1}), [](const V& x) { return add(x[0], x[1]); }},
      {"sub", two({3, 4}, {3, 4}), [](const V& x) { return sub(x[0], x[1]); }},
      {"mul", two({3, 4}, {1}), [](const V& x) { return mul(x[0], x[1]); }},
      {"div", [](Rng& r) { return V{randn({3, 4}, r), signed_away_from_zero({4}, r)}; },
       [](const V& x) { return div(x[0], x[1]); }},
      {"scale", one({5}), [](const V& x) { return scale(x[0], 1.7); }},
      {"add_scalar", one({5}), [](const V& x) { return add_scalar(x[0], -0.3); }},
      {"neg", one({5}), [](const V& x) { return neg(x[0]); }},
      {"exp", one({5}), [](const V& x) { return exp(x[0]); }},
      {"log", [](Rng& r) { return V{uniform({5}, r, 0.5, 2.0)}; }, [](const V& x) { return log(x[0]); }},
      {"sqrt", [](Rng& r) { return V{uniform({5}, r, 0.5, 2.0)}; }, [](const V& x) { return sqrt(x[0]); }},
      {"square", one({5}), [](const V& x) { return square(x[0]); }},
      {"relu", one({6}), [](const V& x) { return relu(x[0]); }},
      {"sum", one({3, 4}), [](const V& x) { return sum(x[0]); }},
      {"mean", one({3, 4}), [](const V& x) { return mean(x[0]); }},
      {"sum_axis", one({2, 3, 4}), [](const V& x) { return sum(x[0], 1); }},
      {"mean_axis", one({2, 3, 4}), [](const V& x) { return mean(x[0], 2, true); }},
      {"reshape", one({2, 6}), [](const V& x) { return reshape(x[0], {3, 4}); }},
      {"transpose", one({3, 4}), [](const V& x) { return transpose(x[0]); }},
      {"slice", one({5, 2}), [](const V& x) { return slice(x[0], 1, 4); }},
      {"select", one({3, 2, 2}), [](const V& x) { return select(x[0], 1); }},
      {"concat", two({2, 3}, {1, 3}), [](const V& x) { return concat(x); }},
      {"stack", two({2, 3}, {2, 3}), [](const V& x) { return stack(x); }},
      {"matmul", two({3, 4}, {4, 2}), [](const V& x) { return matmul(x[0], x[1]); }},
      {"softmax", one({3, 4}), [](const V& x) { return softmax(x[0], 0); }},
      {"log_softmax", one({3, 4}), [](const V& x) { return log_softmax(x[0], 1); }},
      {"cross_entropy", one({3, 4}),
       [](const V& x) { return cross_entropy(x[0], std::vector<std::size_t>{0, 3, 1}); }},
      {"cosine", two({6}, {6}), [](const V& x) { return cosine(x[0], x[1]); }},
      {"normalize_rows", one({3, 4}), [](const V& x) { return normalize_rows(x[0]); }},
      {"pairwise_sq_dist", two({4, 3}, {2, 3}), [](const V& x) { return pairwise_sq_dist(x[0], x[1]); }},
      {"conv2d", two({2, 5, 5, 2}, {3, 3, 2, 3}), [](const V& x) { return conv2d(x[0], x[1], 1, 1); }},
      {"conv2d_stride", two({5, 5, 2}, {3, 3, 2, 2}), [](const V& x) { return conv2d(x[0], x[1], 2, 0); }},
      {"max_pool2d", one({2, 4, 4, 2}), [](const V& x) { return max_pool2d(x[0], 2); }},
      {"avg_pool_spatial", one({2, 3, 3, 2}), [](const V& x) { return avg_pool_spatial(x[0]); }},
      {"crop_center", one({1, 5, 5, 2}), [](const V& x) { return crop_center(x[0], 3); }},
  };
}

}  // namespace

TEST(GradCheck, EveryOperationOnHundredRandomInstances) {
  for (const auto& c : op_cases()) {
    Rng rng(Fnv1a().update(c.name).value());
    for (int trial = 0; trial < 100; ++trial) {
      auto in = c.inputs(rng);
      const auto w = randn(c.op(in).shape(), rng);
      const auto report = grad_check<double>([&](const auto& x) { return sum(mul(c.op(x), w)); }, in);
      ASSERT_TRUE(report.pass) << c.name << " trial " << trial << " rel " << report.worst_rel() << " abs "
                               << report.worst_abs();
    }
  }
}
