#include <gtest/gtest.h>

#include <cmath>

#include "mf2vqa/grad_check.hpp"
#include "mf2vqa/ops.hpp"
#include "mf2vqa/random.hpp"

using namespace mf2;

namespace {

Tensor<double> random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  std::vector<double> v(numel(s));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return Tensor<double>(s, std::move(v));
}

double check(const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& f, std::vector<Tensor<double>> in) {
  return grad_check(f, in).max_rel_error;
}

}  // namespace

TEST(Tensor, ShapeInvariants) {
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_FALSE(t.has_grad());
  t.set_requires_grad(true);
  EXPECT_EQ(t.grad().size(), t.size());
  EXPECT_THROW(Tensor<float>({2, 0}, 0.0f), DimensionError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), DimensionError);
}

TEST(Matmul, IdentityAndClosedForm) {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> b({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(matmul(eye, b).vec(), b.vec());
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  Tensor<double> ones({2, 1}, {1, 1});
  EXPECT_EQ(matmul(a, ones).vec(), (std::vector<double>{3, 7}));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  Tensor<double> a({2, 3}, 0.0), b({2, 3}, 0.0);
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  auto f = [](std::vector<Tensor<double>>& in) { return sum(mul(matmul(in[0], in[1]), matmul(in[0], in[1]))); };
  EXPECT_LT(check(f, {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}), 1e-6);
}

TEST(Softmax, ClosedForms) {
  auto u = softmax(Tensor<double>({4}, 2.5), 0);
  for (double v : u.data()) EXPECT_DOUBLE_EQ(v, 0.25);
  auto w = softmax(Tensor<double>({2}, {0.0, std::log(3.0)}), 0);
  EXPECT_NEAR(w.data()[0], 0.25, 1e-15);
  EXPECT_NEAR(w.data()[1], 0.75, 1e-15);
}

TEST(Softmax, ShiftInvarianceAndNormalization) {
  Rng rng(2);
  auto x = random_tensor({3, 5}, rng, 3.0);
  auto shifted = x.vec();
  for (auto& v : shifted) v += 7.25;
  auto a = softmax(x, 1);
  auto b = softmax(Tensor<double>(x.shape(), shifted), 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-7);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_GE(a.at(r, c), 0.0);
      s += a.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  // along axis 0 as well
  auto c = softmax(x, 0);
  for (std::size_t col = 0; col < 5; ++col) {
    double s = 0;
    for (std::size_t r = 0; r < 3; ++r) s += c.at(r, col);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, LargeInputsStayFinite) {
  auto a = softmax(Tensor<float>({3}, {1000.f, 999.f, -1000.f}), 0);
  EXPECT_TRUE(all_finite<float>(a.data()));
}

TEST(Softmax, NanIsNumericError) {
  EXPECT_THROW(softmax(Tensor<double>({2}, {0.0, std::nan("")}), 0), NumericError);
  EXPECT_THROW(softmax(Tensor<double>({2}, 0.0), 1), DimensionError);
}

TEST(LayerNorm, ConstantVectorGivesZeros) {
  auto y = layer_norm(Tensor<double>({1, 4}, 3.0), Tensor<double>({4}, 1.0), Tensor<double>({4}, 0.0), 1e-12);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, HandComputation) {
  auto y = layer_norm(Tensor<double>({1, 3}, {1, 2, 3}), Tensor<double>({3}, 1.0), Tensor<double>({3}, 0.0), 0.0);
  EXPECT_NEAR(y.data()[0], -std::sqrt(1.5), 1e-12);
  EXPECT_NEAR(y.data()[1], 0.0, 1e-12);
  EXPECT_NEAR(y.data()[2], std::sqrt(1.5), 1e-12);
}

TEST(LayerNorm, UnitStatisticsOn768Dims) {
  Rng rng(3);
  std::vector<float> v(768);
  for (auto& x : v) x = float(rng.normal(0.3, 2.0));
  auto y = layer_norm(Tensor<float>({1, 768}, v), Tensor<float>({768}, 1.0f), Tensor<float>({768}, 0.0f), 1e-12f);
  double mu = 0, var = 0;
  for (float x : y.data()) mu += x;
  mu /= 768;
  for (float x : y.data()) var += (x - mu) * (x - mu);
  var /= 768;
  EXPECT_LE(std::abs(mu), 1e-6);
  EXPECT_LE(std::abs(var - 1.0), 1e-4);
}

TEST(LayerNorm, GradientFlowsToAllInputs) {
  Rng rng(4);
  auto f = [](std::vector<Tensor<double>>& in) {
    auto y = layer_norm(in[0], in[1], in[2], 1e-12);
    return sum(mul(y, y));
  };
  // squared output makes gain/bias gradients non-trivial
  std::vector<Tensor<double>> in = {random_tensor({3, 5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)};
  auto r = grad_check(f, in);
  EXPECT_LT(r.max_rel_error, 1e-6);
  for (double e : r.per_input) EXPECT_LT(e, 1e-6);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  std::vector<std::size_t> t = {0, 3, 6};
  auto l = cross_entropy(Tensor<double>({3, 7}, 0.4), std::span<const std::size_t>(t));
  EXPECT_NEAR(l.item(), std::log(7.0), 1e-12);
}

TEST(CrossEntropy, OneHotMagnitudeMonotone) {
  std::vector<std::size_t> t = {1};
  double prev = 1e9;
  for (double m : {0.5, 1.0, 2.0, 5.0, 10.0, 50.0}) {
    auto l = cross_entropy(Tensor<double>({1, 3}, {0, m, 0}), std::span<const std::size_t>(t)).item();
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-20);
}

TEST(CrossEntropy, MatchesScalarLoop) {
  Rng rng(5);
  auto x = random_tensor({4, 7}, rng, 2.0);
  std::vector<std::size_t> t = {0, 6, 3, 3};
  double oracle = 0;
  for (std::size_t b = 0; b < 4; ++b) {
    double z = 0;
    for (std::size_t c = 0; c < 7; ++c) z += std::exp(x.at(b, c));
    oracle += -(x.at(b, t[b]) - std::log(z));
  }
  oracle /= 4;
  EXPECT_NEAR(cross_entropy(x, std::span<const std::size_t>(t)).item(), oracle, 1e-6);
  auto f = [&](std::vector<Tensor<double>>& in) { return cross_entropy(in[0], std::span<const std::size_t>(t)); };
  EXPECT_LT(check(f, {x}), 1e-6);
}

TEST(CrossEntropy, OutOfRangeTarget) {
  std::vector<std::size_t> t = {7};
  EXPECT_THROW(cross_entropy(Tensor<double>({1, 7}, 0.0), std::span<const std::size_t>(t)), IndexError);
}

TEST(Backward, SumGivesOnes) {
  Tensor<double> x({2, 3}, 1.0, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Tensor<double> x({3}, {1.0, -2.0, 0.5}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], -4.0);
  EXPECT_EQ(x.grad()[2], 1.0);
}

TEST(Backward, Contracts) {
  Tensor<double> x({2}, 1.0, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
  auto l = sum(x);
  backward(l);
  EXPECT_THROW(backward(l), ContractError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor<double> x({2}, 1.0, true);
  Tensor<double> l;
  {
    NoGradGuard g;
    l = sum(x);
  }
  EXPECT_FALSE(l.requires_grad());
  EXPECT_THROW(backward(l), ContractError);
}

TEST(Ops, EveryDifferentiableOpPassesGradCheck) {
  using F = std::function<Tensor<double>(std::vector<Tensor<double>>&)>;
  const std::vector<std::pair<Shape, Shape>> shapes = {{{2, 3}, {3}}, {{4, 5}, {5}}, {{1, 7}, {7}}};
  for (const auto& [s, b] : shapes) {
    Rng rng(100 + s[0]);
    auto sq = [](const Tensor<double>& t) { return sum(mul(t, t)); };
    std::vector<std::pair<const char*, std::pair<F, std::vector<Tensor<double>>>>> cases;
    auto x = random_tensor(s, rng), y = random_tensor(s, rng), bias = random_tensor(b, rng);
    cases.push_back({"add", {[&](auto& in) { return sq(add(in[0], in[1])); }, {x, y}}});
    cases.push_back({"sub", {[&](auto& in) { return sq(sub(in[0], in[1])); }, {x, y}}});
    cases.push_back({"mul", {[&](auto& in) { return sq(mul(in[0], in[1])); }, {x, y}}});
    cases.push_back({"scale", {[&](auto& in) { return sq(scale(in[0], 1.7)); }, {x}}});
    cases.push_back({"add_bias", {[&](auto& in) { return sq(add_bias(in[0], in[1])); }, {x, bias}}});
    cases.push_back({"mean", {[&](auto& in) { return mean(mul(in[0], in[1])); }, {x, y}}});
    cases.push_back({"gelu", {[&](auto& in) { return sq(gelu(in[0])); }, {x}}});
    cases.push_back({"relu", {[&](auto& in) { return sq(relu(add(in[0], Tensor<double>(s, 0.01)))); }, {x}}});
    cases.push_back({"transpose", {[&](auto& in) { return sq(matmul(transpose(in[0]), in[1])); }, {x, y}}});
    cases.push_back({"reshape", {[&](auto& in) { return sq(mul(reshape(in[0], {numel(s)}), reshape(in[1], {numel(s)}))); }, {x, y}}});
    cases.push_back({"softmax0", {[&](auto& in) { return sq(mul(softmax(in[0], 0), in[1])); }, {x, y}}});
    cases.push_back({"softmax1", {[&](auto& in) { return sq(mul(softmax(in[0], 1), in[1])); }, {x, y}}});
    cases.push_back({"mse", {[&](auto& in) { return mse(in[0], in[1]); }, {x, y}}});
    cases.push_back({"slice_cols", {[&](auto& in) { return sq(slice_cols(in[0], 1, s[1] - 1)); }, {x}}});
    cases.push_back({"concat_rows", {[&](auto& in) { return sq(mul(concat_rows<double>({in[0], in[1]}), concat_rows<double>({in[1], in[0]}))); }, {x, y}}});
    cases.push_back({"concat_cols", {[&](auto& in) { return sq(mul(concat_cols<double>({in[0], in[1]}), concat_cols<double>({in[1], in[1]}))); }, {x, y}}});
    for (auto& [name, c] : cases) {
      EXPECT_LT(grad_check(c.first, c.second).max_rel_error, 1e-6) << name << " " << shape_str(s);
    }
  }
}

TEST(Ops, RowOpsGradCheck) {
  Rng rng(9);
  auto table = random_tensor({5, 3}, rng), rows = random_tensor({2, 3}, rng);
  std::vector<std::size_t> ids = {4, 0, 4, 2};
  auto f = [&](std::vector<Tensor<double>>& in) {
    auto g = gather_rows(in[0], std::span<const std::size_t>(ids));
    auto r = replace_rows(in[0], 1, in[1]);
    return add(sum(mul(g, g)), sum(mul(r, mul(r, r))));
  };
  std::vector<Tensor<double>> in = {table, rows};
  EXPECT_LT(grad_check(f, in).max_rel_error, 1e-6);
  auto f2 = [&](std::vector<Tensor<double>>& in) { auto s = slice_rows(in[0], 1, 3); return sum(mul(s, s)); };
  std::vector<Tensor<double>> in2 = {table};
  EXPECT_LT(grad_check(f2, in2).max_rel_error, 1e-6);
}

TEST(Ops, ReplaceRowsBlocksGradientOfOverwrittenRows) {
  Tensor<double> x({3, 2}, 1.0, true), r({1, 2}, 2.0, true);
  backward(sum(replace_rows(x, 1, r)));
  EXPECT_EQ(x.grad()[2], 0.0);
  EXPECT_EQ(x.grad()[3], 0.0);
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(r.grad()[0], 1.0);
}

TEST(Ops, BiasOnlyBroadcastsAlongLastAxis) {
  EXPECT_THROW(add(Tensor<double>({2, 3}, 0.0), Tensor<double>({3}, 0.0)), DimensionError);
  EXPECT_THROW(add_bias(Tensor<double>({2, 3}, 0.0), Tensor<double>({2}, 0.0)), DimensionError);
}

TEST(Ops, ForwardIsBitDeterministic) {
  Rng r1(10), r2(10);
  auto a1 = random_tensor({6, 9}, r1), b1 = random_tensor({9, 4}, r1);
  auto a2 = random_tensor({6, 9}, r2), b2 = random_tensor({9, 4}, r2);
  EXPECT_EQ(softmax(matmul(a1, b1), 1).vec(), softmax(matmul(a2, b2), 1).vec());
}

TEST(GradCheck, LinearFunctionHasRoundingLevelError) {
  Rng rng(11);
  auto f = [](std::vector<Tensor<double>>& in) { return sum(in[0]); };
  // central differences are exact for linear f up to rounding of x +- h
  EXPECT_LT(check(f, {random_tensor({3, 3}, rng)}), 1e-9);
}

TEST(GradCheck, SoftmaxOfMatmul) {
  Rng rng(12);
  auto w = random_tensor({3, 3}, rng);
  auto f = [&](std::vector<Tensor<double>>& in) {
    return sum(mul(softmax(matmul(in[0], in[1]), 1), w));
  };
  EXPECT_LT(check(f, {random_tensor({3, 3}, rng), random_tensor({3, 3}, rng)}), 1e-6);
}

TEST(GradCheck, SabotagedGradientIsDetected) {
  Rng rng(13);
  auto f = [](std::vector<Tensor<double>>& in) { return sum(mul(in[0], in[0])); };
  std::vector<Tensor<double>> in = {random_tensor({3, 3}, rng)};
  GradCheckOptions opts;
  opts.tamper = [](std::size_t, std::vector<double>& g) { g[0] *= 1.5; };
  EXPECT_GT(grad_check(f, in, opts).max_rel_error, 1e-2);
}
