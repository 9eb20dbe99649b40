#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "crosspoint/autograd.hpp"
#include "crosspoint/grad_check.hpp"
#include "crosspoint/rng.hpp"

using namespace crosspoint;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Contracts an op output with fixed random weights so every output element
// receives a distinct upstream gradient.
Var weighted_sum(Var y, std::uint64_t seed) {
  Rng rng{StreamId(seed)};
  Var w = y.graph()->constant(random_tensor(y.shape(), rng));
  return sum_all(y * w);
}

double check_unary(const std::function<Var(Var)>& op, Shape shape, double lo, double hi,
                   std::uint64_t seed) {
  Rng rng{StreamId(seed)};
  std::vector<Tensor> params{random_tensor(shape, rng, lo, hi)};
  return grad_check(
             [&](Graph&, std::span<const Var> p) { return weighted_sum(op(p[0]), seed + 1); },
             params)
      .max_rel_error;
}

double check_binary(const std::function<Var(Var, Var)>& op, Shape sa, Shape sb,
                    std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng{StreamId(seed)};
  std::vector<Tensor> params{random_tensor(sa, rng), random_tensor(sb, rng, lo, hi)};
  return grad_check(
             [&](Graph&, std::span<const Var> p) {
               return weighted_sum(op(p[0], p[1]), seed + 1);
             },
             params)
      .max_rel_error;
}

}  // namespace

TEST(Unary, DefinitionExamples) {
  Graph g;
  auto x = g.constant(Tensor::vector({-1, 0, 2}));
  EXPECT_EQ(relu(x).value().values(), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(exp(g.constant(Tensor::vector({0}))).value().item(), 1.0);
  EXPECT_DOUBLE_EQ(leaky_relu(g.constant(Tensor::vector({-2})), 0.1).value().item(), -0.2);
}

TEST(Unary, LogOfNonPositiveIsDomainError) {
  Graph g;
  EXPECT_THROW(log(g.constant(Tensor::vector({1.0, 0.0}))), DomainError);
  EXPECT_THROW(log(g.constant(Tensor::vector({-3.0}))), DomainError);
  EXPECT_THROW(sqrt(g.constant(Tensor::vector({-1e-3}))), DomainError);
}

TEST(Binary, Examples) {
  Graph g;
  auto s = add(g.constant(Tensor::vector({1, 2})), g.constant(Tensor::vector({3, 4})));
  EXPECT_EQ(s.value().values(), (std::vector<double>{4, 6}));
  auto m = mul(g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4})),
               g.constant(Tensor::vector({10})));
  EXPECT_EQ(m.shape(), (Shape{2, 2}));
  EXPECT_EQ(m.value().values(), (std::vector<double>{10, 20, 30, 40}));
  EXPECT_THROW(div(g.constant(Tensor::vector({1})), g.constant(Tensor::vector({0}))),
               DomainError);
}

TEST(Binary, BroadcastRule) {
  Graph g;
  auto a = g.constant(Tensor({2, 3, 4}, 1.0));
  EXPECT_EQ(add(a, g.constant(Tensor({4}, 1.0))).shape(), (Shape{2, 3, 4}));
  EXPECT_EQ(add(a, g.constant(Tensor({3, 1}, 1.0))).shape(), (Shape{2, 3, 4}));
  EXPECT_EQ(add(g.constant(Tensor({3, 1}, 1.0)), g.constant(Tensor({1, 5}, 1.0))).shape(),
            (Shape{3, 5}));
  EXPECT_THROW(add(a, g.constant(Tensor({3}, 1.0))), ShapeError);
  EXPECT_THROW(add(a, g.constant(Tensor({5, 1, 1}, 1.0))), ShapeError);
  EXPECT_EQ(add(a, g.constant(Tensor({2, 1, 1, 1}, 1.0))).shape(), (Shape{2, 2, 3, 4}));
}

TEST(Matmul, Examples) {
  Graph g;
  auto id = g.constant(Tensor::identity(2));
  auto m = g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(id, m).value(), m.value());
  auto r = matmul(g.constant(Tensor::matrix(1, 2, {1, 2})),
                  g.constant(Tensor::matrix(2, 1, {3, 4})));
  EXPECT_EQ(r.value().item(), 11.0);
  EXPECT_THROW(matmul(m, g.constant(Tensor::matrix(3, 1, {1, 2, 3}))), ShapeError);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng{StreamId(7)};
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);
    Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    Graph g;
    auto c = matmul(g.constant(a), g.constant(b)).value();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double ref = 0.0;
        for (std::size_t p = 0; p < k; ++p) ref += a.at(i, p) * b.at(p, j);
        EXPECT_NEAR(c.at(i, j), ref, 1e-12);
      }
    }
  }
}

TEST(Reduce, Examples) {
  Graph g;
  auto x = g.constant(Tensor::vector({1, 5, 3}));
  auto mx = max(x, 0);
  EXPECT_EQ(mx.value.value().item(), 5.0);
  EXPECT_EQ(mx.arg, (std::vector<std::size_t>{1}));
  EXPECT_EQ(mean(g.constant(Tensor::vector({2, 4})), 0).value().item(), 3.0);
  EXPECT_THROW(sum(x, 1), ShapeError);
}

TEST(Reduce, SumMatchesLoopOracle) {
  Rng rng{StreamId(11)};
  Tensor a = random_tensor({4, 3}, rng);
  Graph g;
  auto rows = sum(g.constant(a), 1).value();
  auto cols = sum(g.constant(a), 0).value();
  for (std::size_t i = 0; i < 4; ++i) {
    double ref = 0;
    for (std::size_t j = 0; j < 3; ++j) ref += a.at(i, j);
    EXPECT_NEAR(rows[i], ref, 1e-12);
  }
  for (std::size_t j = 0; j < 3; ++j) {
    double ref = 0;
    for (std::size_t i = 0; i < 4; ++i) ref += a.at(i, j);
    EXPECT_NEAR(cols[j], ref, 1e-12);
  }
}

TEST(Reduce, MaxOnRandomRank3MatchesLoopOracle) {
  Rng rng{StreamId(12)};
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t a0 = 1 + rng.below(8), a1 = 1 + rng.below(8), a2 = 1 + rng.below(8);
    Tensor t = random_tensor({a0, a1, a2}, rng);
    Graph g;
    auto r = max(g.constant(t), 1);
    for (std::size_t i = 0; i < a0; ++i) {
      for (std::size_t k = 0; k < a2; ++k) {
        double best = t[(i * a1) * a2 + k];
        std::size_t arg = 0;
        for (std::size_t j = 1; j < a1; ++j) {
          if (t[(i * a1 + j) * a2 + k] > best) {
            best = t[(i * a1 + j) * a2 + k];
            arg = j;
          }
        }
        EXPECT_EQ(r.value.value()[i * a2 + k], best);
        EXPECT_EQ(r.arg[i * a2 + k], arg);
      }
    }
  }
}

TEST(Reduce, MaxTieRoutesGradientToFirstOccurrence) {
  Graph g;
  auto x = g.parameter(Tensor::vector({2, 7, 7, 1}));
  auto r = max(x, 0);
  EXPECT_EQ(r.arg[0], 1u);
  g.backward(r.value);
  EXPECT_EQ(g.grad(x).values(), (std::vector<double>{0, 1, 0, 0}));
}

TEST(Concat, Examples) {
  Graph g;
  auto c = concat(g.constant(Tensor::vector({1})), g.constant(Tensor::vector({2})), 0);
  EXPECT_EQ(c.value().values(), (std::vector<double>{1, 2}));
  auto wide = concat(g.constant(Tensor({2, 3}, 1.0)), g.constant(Tensor({2, 3}, 2.0)), 1);
  EXPECT_EQ(wide.shape(), (Shape{2, 6}));
  EXPECT_THROW(concat(g.constant(Tensor({2, 3})), g.constant(Tensor({3, 3})), 1), ShapeError);
}

TEST(Concat, BackwardSlicesOutputGradient) {
  Graph g;
  auto a = g.parameter(Tensor({2, 2}, 1.0));
  auto b = g.parameter(Tensor({2, 1}, 1.0));
  auto c = concat(a, b, 1);
  auto w = g.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  g.backward(sum_all(c * w));
  EXPECT_EQ(g.grad(a).values(), (std::vector<double>{1, 2, 4, 5}));
  EXPECT_EQ(g.grad(b).values(), (std::vector<double>{3, 6}));
}

TEST(Conv2d, Examples) {
  Graph g;
  Tensor img({1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) img[i] = static_cast<double>(i) - 4.0;
  auto doubled = conv2d(g.constant(img), g.constant(Tensor({1, 1, 1, 1}, 2.0)), 1);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(doubled.value()[i], 2.0 * img[i]);

  auto summed = conv2d(g.constant(Tensor({1, 2, 2}, std::vector<double>{1, 2, 3, 4})),
                       g.constant(Tensor({1, 1, 2, 2}, 1.0)), 1);
  EXPECT_EQ(summed.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(summed.value().item(), 10.0);
  EXPECT_THROW(conv2d(g.constant(Tensor({1, 2, 2})), g.constant(Tensor({1, 1, 3, 3})), 1),
               ShapeError);
}

TEST(Conv2d, MatchesQuadrupleLoopOracle) {
  Rng rng{StreamId(13)};
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t c = 1 + rng.below(3), h = 3 + rng.below(6), w = 3 + rng.below(6);
    const std::size_t o = 1 + rng.below(4), kh = 1 + rng.below(3), kw = 1 + rng.below(3);
    const std::size_t stride = 1 + rng.below(2);
    Tensor x = random_tensor({c, h, w}, rng), k = random_tensor({o, c, kh, kw}, rng);
    Graph g;
    auto y = conv2d(g.constant(x), g.constant(k), stride).value();
    const std::size_t oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{o, oh, ow}));
    for (std::size_t oc = 0; oc < o; ++oc) {
      for (std::size_t yy = 0; yy < oh; ++yy) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double ref = 0.0;
          for (std::size_t ic = 0; ic < c; ++ic) {
            for (std::size_t i = 0; i < kh; ++i) {
              for (std::size_t j = 0; j < kw; ++j) {
                ref += x[(ic * h + yy * stride + i) * w + xx * stride + j] *
                       k[((oc * c + ic) * kh + i) * kw + j];
              }
            }
          }
          EXPECT_NEAR(y[(oc * oh + yy) * ow + xx], ref, 1e-12);
        }
      }
    }
  }
}

TEST(Backward, Examples) {
  Graph g;
  auto w = g.parameter(Tensor::vector({0.3, -2, 5}));
  g.backward(sum(w, 0));
  EXPECT_EQ(g.grad(w).values(), (std::vector<double>{1, 1, 1}));

  Graph h;
  auto v = h.parameter(Tensor::vector({1, 2}));
  h.backward(sum(v * v, 0));
  EXPECT_EQ(h.grad(v).values(), (std::vector<double>{2, 4}));
}

TEST(Backward, UnreachableLeafGetsZeroGradient) {
  Graph g;
  auto used = g.parameter(Tensor::vector({1, 2}));
  auto unused = g.parameter(Tensor::vector({3, 4, 5}));
  g.backward(sum(used, 0));
  EXPECT_EQ(g.grad(unused).values(), (std::vector<double>{0, 0, 0}));
}

TEST(Backward, ErrorsWithoutRecordedScalar) {
  Graph g, other;
  auto x = g.parameter(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(Var{}), GraphError);
  EXPECT_THROW(other.backward(sum(x, 0)), GraphError);
  EXPECT_THROW(g.backward(x), GraphError);
}

TEST(Backward, CompositeMlpMatchesFiniteDifferences) {
  Rng rng{StreamId(21)};
  std::vector<Tensor> params{random_tensor({5, 3}, rng), random_tensor({3, 4}, rng),
                             random_tensor({4}, rng), random_tensor({4, 2}, rng)};
  auto f = [](Graph&, std::span<const Var> p) {
    Var h = leaky_relu(matmul(p[0], p[1]) + p[2], 0.01);
    Var out = matmul(h, p[3]);
    return sum_all(exp(scale(out, 0.5)));
  };
  EXPECT_LE(grad_check(f, params).max_rel_error, 1e-6);
}

TEST(GradCheck, QuadraticAndConstant) {
  Rng rng{StreamId(22)};
  std::vector<Tensor> params{random_tensor({6}, rng)};
  auto quad = [](Graph&, std::span<const Var> p) { return sum(p[0] * p[0], 0); };
  EXPECT_LE(grad_check(quad, params).max_rel_error, 1e-9);
  auto constant = [](Graph& g, std::span<const Var>) {
    return g.constant(Tensor::scalar(3.0)) * g.constant(Tensor::scalar(2.0));
  };
  EXPECT_EQ(grad_check(constant, params).max_rel_error, 0.0);
}

// Every differentiable operation against central differences, eps = 1e-5.
TEST(GradientProperty, EveryOperation) {
  constexpr double tol = 1e-6;
  for (std::uint64_t seed = 100; seed < 105; ++seed) {
    EXPECT_LE(check_unary([](Var x) { return relu(x); }, {3, 4}, -1, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return leaky_relu(x, 0.2); }, {3, 4}, -1, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return exp(x); }, {3, 4}, -1, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return log(x); }, {3, 4}, 0.2, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return neg(x); }, {3, 4}, -1, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return sqrt(x); }, {3, 4}, 0.2, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return scale(x, -1.7); }, {3, 4}, -1, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return transpose(x); }, {3, 4}, -1, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return reshape(x, {2, 6}); }, {3, 4}, -1, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return sum(x, 0); }, {3, 4, 2}, -1, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return mean(x, 1); }, {3, 4, 2}, -1, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return max(x, 1).value; }, {3, 4, 2}, -1, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return max(x, 2).value; }, {3, 4, 2}, -1, 1, seed), tol);
    EXPECT_LE(check_unary([](Var x) { return gather_rows(x, {2, 0, 2, 1}); }, {3, 4}, -1, 1,
                          seed),
              tol);
    EXPECT_LE(check_unary([](Var x) { return log_sum_exp(x); }, {3, 4}, -1, 1, seed), tol);
    EXPECT_LE(check_unary(
                  [](Var x) {
                    return log_sum_exp(x, {1, 0, 1, 1, 0, 1, 1, 1, 1, 1, 1, 0});
                  },
                  {3, 4}, -1, 1, seed),
              tol);

    EXPECT_LE(check_binary([](Var a, Var b) { return add(a, b); }, {3, 4}, {4}, seed), tol);
    EXPECT_LE(check_binary([](Var a, Var b) { return sub(a, b); }, {3, 4}, {3, 1}, seed), tol);
    EXPECT_LE(check_binary([](Var a, Var b) { return mul(a, b); }, {2, 3, 4}, {3, 4}, seed), tol);
    EXPECT_LE(check_binary([](Var a, Var b) { return div(a, b); }, {3, 4}, {3, 4}, seed, 0.5, 1.5), tol);
    EXPECT_LE(check_binary([](Var a, Var b) { return matmul(a, b); }, {3, 5}, {5, 2}, seed), tol);
    EXPECT_LE(check_binary([](Var a, Var b) { return concat(a, b, 0); }, {2, 3}, {4, 3}, seed),
              tol);
    EXPECT_LE(check_binary([](Var a, Var b) { return conv2d(a, b, 2); }, {2, 7, 6},
                           {3, 2, 3, 2}, seed),
              tol);
    EXPECT_LE(check_binary([](Var a, Var b) { return conv2d(a, b, 1); }, {2, 2, 5, 5},
                           {3, 2, 2, 2}, seed),
              tol);
  }
}

TEST(Linear, MatchesMatmulPlusBiasAndGradChecks) {
  Rng rng{StreamId(31)};
  std::vector<Tensor> params{random_tensor({5, 3}, rng), random_tensor({3, 4}, rng),
                             random_tensor({4}, rng)};
  Graph g;
  auto x = g.constant(params[0]);
  auto w = g.constant(params[1]);
  auto b = g.constant(params[2]);
  const Tensor fused = linear(x, w, b).value();
  const Tensor split = (matmul(x, w) + b).value();
  for (std::size_t i = 0; i < fused.size(); ++i) EXPECT_NEAR(fused[i], split[i], 1e-15);
  EXPECT_THROW(linear(x, w, g.constant(Tensor::vector({1, 2, 3}))), ShapeError);

  const Tensor weights = random_tensor({5, 4}, rng);
  auto f = [&weights](Graph& gr, std::span<const Var> p) {
    return sum_all(linear(p[0], p[1], p[2]) * gr.constant(weights));
  };
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EXPECT_LE(grad_check(f, params).max_rel_error, 1e-6);
    for (auto& t : params) t = random_tensor(t.shape(), rng);
  }
}

TEST(Graph, InputIdsPrecedeNodeIds) {
  Rng rng{StreamId(30)};
  Graph g;
  auto a = g.parameter(random_tensor({4, 3}, rng));
  auto b = g.parameter(random_tensor({3, 2}, rng));
  auto y = sum_all(leaky_relu(matmul(a, b)) * g.constant(random_tensor({4, 2}, rng)));
  (void)y;
  for (NodeId id = 0; id < g.size(); ++id) {
    for (NodeId in : g.node(id).inputs) EXPECT_LT(in, id);
  }
}

TEST(Graph, ForwardIsBitReproducible) {
  Rng rng{StreamId(31)};
  Tensor a = random_tensor({16, 9}, rng), b = random_tensor({9, 5}, rng);
  auto eval = [&] {
    Graph g;
    return log_sum_exp(leaky_relu(matmul(g.constant(a), g.constant(b)))).value();
  };
  EXPECT_EQ(eval(), eval());
}

TEST(LogSumExp, NanPropagatesAndEmptyRowThrows) {
  Graph g;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const Tensor y = log_sum_exp(g.constant(Tensor({2, 2}, std::vector<double>{nan, 1.0, 0.0, 0.0}))).value();
  EXPECT_TRUE(std::isnan(y[0]));
  EXPECT_NEAR(y[1], std::log(2.0), 1e-15);
  EXPECT_THROW(log_sum_exp(g.constant(Tensor({1, 2}, 1.0)), {0, 0}), DomainError);
}
