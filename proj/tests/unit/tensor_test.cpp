#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <string>

#include "deflect/ops.hpp"
#include "test_support.hpp"

using namespace deflect;
using deflect::testing::fd_max_rel_error;
using deflect::testing::random_tensor;

namespace {

const std::vector<Shape> kShapes{{2, 3}, {4, 5}, {7, 2}};
constexpr double kTol = 1e-5;

}  // namespace

TEST(Matmul, IdentityTimesIdentity) {
  auto i2 = Tensord::matrix(2, 2, {1, 0, 0, 1});
  EXPECT_EQ(matmul(i2, i2).values(), i2.values());
}

TEST(Matmul, HandExample) {
  auto a = Tensord::matrix(2, 2, {1, 2, 3, 4});
  auto b = Tensord::matrix(2, 1, {0, 1});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.values(), (std::vector<double>{2, 4}));
}

TEST(Matmul, MismatchNamesBothShapes) {
  auto a = Tensord::zeros({2, 3});
  auto b = Tensord::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos);
    EXPECT_NE(msg.find("4x5"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  auto a = random_tensor({5, 7}, 1), b = random_tensor({7, 3}, 2);
  EXPECT_LT(fd_max_rel_error({a, b}, [](const auto& x) { return matmul(x[0], x[1]); }), 1e-6);
}

TEST(Softmax, UniformRow) {
  auto s = softmax_rows(Tensord::zeros({1, 3}));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  auto s = softmax_rows(Tensord::matrix(1, 2, {1000, 0}));
  EXPECT_NEAR(s.data()[0], 1.0, 1e-12);
  EXPECT_NEAR(s.data()[1], 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(s.data()[1]));
}

TEST(Softmax, RowsSumToOne) {
  auto s = softmax_rows(random_tensor({6, 9}, 3, 5.0));
  for (std::size_t i = 0; i < 6; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GE(s.at(i, j), 0.0);
      total += s.at(i, j);
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Softmax, NanInputIsNumericError) {
  auto a = Tensord::matrix(1, 2, {std::numeric_limits<double>::quiet_NaN(), 0});
  EXPECT_THROW(softmax_rows(a), NumericError);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  EXPECT_LT(fd_max_rel_error({random_tensor({4, 4}, 4)}, [](const auto& x) { return softmax_rows(x[0]); }), 1e-6);
}

TEST(LayerNorm, ConstantRowGivesZero) {
  auto y = layer_norm(Tensord::full({1, 4}, 3.0), Tensord::full({4}, 1.0), Tensord::zeros({4}), 1e-6);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, ZeroGainGivesBeta) {
  auto beta = Tensord({3}, {0.5, -1, 2});
  auto y = layer_norm(random_tensor({2, 3}, 5), Tensord::zeros({3}), beta, 1e-6);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(y.at(i, j), beta.data()[j]);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  auto y = layer_norm(random_tensor({3, 16}, 6, 4.0), Tensord::full({16}, 1.0), Tensord::zeros({16}), 1e-12);
  for (std::size_t i = 0; i < 3; ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 16; ++j) m += y.at(i, j) / 16;
    for (std::size_t j = 0; j < 16; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m) / 16;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-9);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  for (const auto& s : {Shape{2, 3}, Shape{4, 5}, Shape{3, 8}}) {
    auto x = random_tensor(s, 7), g = random_tensor({s[1]}, 8), b = random_tensor({s[1]}, 9);
    EXPECT_LT(fd_max_rel_error({x, g, b}, [](const auto& v) { return layer_norm(v[0], v[1], v[2], 1e-6); }), kTol)
        << shape_str(s);
  }
}

TEST(L2Norm, HandValues) {
  auto n = l2_norm_rows(Tensord::matrix(2, 2, {3, 4, 0, 0}));
  EXPECT_DOUBLE_EQ(n.data()[0], 5.0);
  EXPECT_DOUBLE_EQ(n.data()[1], 0.0);
}

TEST(L2Norm, MatchesNaiveLoop) {
  auto a = random_tensor({6, 8}, 10);
  auto n = l2_norm_rows(a);
  for (std::size_t i = 0; i < 6; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < 8; ++j) acc += a.at(i, j) * a.at(i, j);
    EXPECT_NEAR(n.data()[i], std::sqrt(acc), 1e-7);
  }
}

TEST(L2Norm, ZeroRowHasZeroGradient) {
  auto a = Tensord::matrix(1, 3, {0, 0, 0}, true);
  sum(l2_norm_rows(a)).backward();
  for (double g : a.grad()) EXPECT_EQ(g, 0.0);
}

TEST(L2Norm, GradientMatchesFiniteDifferences) {
  for (const auto& s : kShapes)
    EXPECT_LT(fd_max_rel_error({random_tensor(s, 11)}, [](const auto& x) { return l2_norm_rows(x[0]); }), kTol);
}

// Every primitive, three shapes each.
TEST(Primitives, GradientsMatchFiniteDifferences) {
  using F = std::function<Tensord(const std::vector<Tensord>&)>;
  struct Case {
    const char* name;
    std::function<std::vector<Tensord>(const Shape&, std::uint64_t)> inputs;
    F f;
  };
  auto one = [](const Shape& s, std::uint64_t k) { return std::vector<Tensord>{random_tensor(s, k)}; };
  auto two = [](const Shape& s, std::uint64_t k) { return std::vector<Tensord>{random_tensor(s, k), random_tensor(s, k + 1)}; };
  auto positive = [](const Shape& s, std::uint64_t k) {
    auto t = random_tensor(s, k);
    for (auto& v : t.data()) v = 0.5 + std::abs(v);
    return std::vector<Tensord>{random_tensor(s, k + 1), t};
  };
  const std::vector<Case> cases{
      {"add", two, [](const auto& x) { return add(x[0], x[1]); }},
      {"sub", two, [](const auto& x) { return sub(x[0], x[1]); }},
      {"mul", two, [](const auto& x) { return mul(x[0], x[1]); }},
      {"div", positive, [](const auto& x) { return div(x[0], x[1]); }},
      {"scale", one, [](const auto& x) { return scale(x[0], 2.5); }},
      {"add_scalar", one, [](const auto& x) { return add_scalar(x[0], -0.7); }},
      {"clamp_min", positive, [](const auto& x) { return clamp_min(x[1], 0.1); }},
      {"transpose", one, [](const auto& x) { return transpose(x[0]); }},
      {"gelu", one, [](const auto& x) { return gelu(x[0]); }},
      {"mean_rows", one, [](const auto& x) { return mean_rows(x[0]); }},
      {"sum", one, [](const auto& x) { return sum(x[0]); }},
      {"mean", one, [](const auto& x) { return mean(x[0]); }},
      {"reshape", one, [](const auto& x) { return reshape(x[0], {x[0].size()}); }},
      {"slice_cols", one, [](const auto& x) { return slice_cols(x[0], 1, 1); }},
      {"concat_cols", two, [](const auto& x) { return concat_cols(std::vector<Tensord>{x[0], x[1], x[0]}); }},
      {"concat_rows", two, [](const auto& x) { return concat_rows(std::vector<Tensord>{x[1], x[0]}); }},
      {"gather_rows", one, [](const auto& x) { return gather_rows(x[0], {1, 0, 1, 1}); }},
      {"add_bias",
       [](const Shape& s, std::uint64_t k) { return std::vector<Tensord>{random_tensor(s, k), random_tensor({s[1]}, k + 1)}; },
       [](const auto& x) { return add_bias(x[0], x[1]); }},
      {"mul_rows",
       [](const Shape& s, std::uint64_t k) { return std::vector<Tensord>{random_tensor(s, k), random_tensor({s[0]}, k + 1)}; },
       [](const auto& x) { return mul_rows(x[0], x[1]); }},
      {"cross_entropy", one, [](const auto& x) {
         std::vector<int> labels(x[0].rows());
         for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % x[0].cols());
         labels[0] = 255;
         return cross_entropy(x[0], labels, 255);
       }},
  };
  std::uint64_t seed = 20;
  for (const auto& c : cases)
    for (const auto& s : kShapes) {
      EXPECT_LT(fd_max_rel_error(c.inputs(s, seed), c.f, seed), kTol) << c.name << " " << shape_str(s);
      seed += 3;
    }
}

TEST(CrossEntropy, IgnoredRowsContributeNothing) {
  auto logits = Tensord::matrix(2, 3, {1, 2, 3, 9, -4, 0}, true);
  auto only_first = Tensord::matrix(1, 3, {1, 2, 3});
  auto full = cross_entropy(logits, {2, 255}, 255);
  EXPECT_NEAR(full.item(), cross_entropy(only_first, {2}).item(), 1e-15);
  full.backward();
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(logits.grad()[3 + j], 0.0);
}

TEST(Graph, FanOutAccumulates) {
  auto x = random_tensor({3, 4}, 30);
  auto y = add(gelu(x), scale(x, 3.0));
  sum(y).backward();
  auto x1 = x.detach().clone(true), x2 = x.detach().clone(true);
  sum(gelu(x1)).backward();
  sum(scale(x2, 3.0)).backward();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x.grad()[i], x1.grad()[i] + x2.grad()[i], 1e-14);
}

TEST(Graph, DiamondVisitsEachNodeOnce) {
  auto x = Tensord::matrix(1, 1, {2.0}, true);
  auto h = mul(x, x);          // x^2
  auto y = add(mul(h, h), h);  // x^4 + x^2
  y.backward(std::vector<double>{1.0});
  EXPECT_DOUBLE_EQ(x.grad()[0], 4 * 8.0 + 2 * 2.0);
}

TEST(Graph, UntrackedTensorsNeverAccumulate) {
  auto a = random_tensor({2, 2}, 31, 1.0, false);
  auto b = random_tensor({2, 2}, 32);
  sum(matmul(a, b)).backward();
  EXPECT_FALSE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_EQ(b.grad().size(), b.size());
}

TEST(Graph, NoGradGuardStopsRecording) {
  auto a = random_tensor({2, 2}, 33);
  NoGradGuard guard;
  auto y = sum(matmul(a, a));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Graph, ForwardIsDeterministic) {
  auto f = [] {
    auto a = random_tensor({4, 6}, 40), b = random_tensor({6, 3}, 41);
    return softmax_rows(gelu(matmul(a, b))).values();
  };
  EXPECT_EQ(f(), f());
}

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensord({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensord::zeros({0, 3}), DimensionError);
  auto t = Tensord::zeros({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
}

TEST(Tensor, SinglePrecisionOps) {
  auto a = Tensorf::matrix(2, 2, {1, 2, 3, 4});
  auto s = softmax_rows(a);
  EXPECT_NEAR(s.at(0, 0) + s.at(0, 1), 1.0f, 1e-6f);
}
