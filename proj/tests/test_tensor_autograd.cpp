// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "test_util.hpp"

using namespace codesearch;
using cs_test::random_tensor;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor c = matmul(Tensor::identity(2), a);
  EXPECT_EQ(c.shape(), a.shape());
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(c[i], a[i]);
}

TEST(Matmul, RowTimesColumn) {
  const Tensor c = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  ASSERT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c[0], 11.0);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL() << "expected a dimension error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimension);
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  Rng rng(3);
  Var a(random_tensor({3, 4}, rng), true);
  Var b(random_tensor({4, 2}, rng), false);
  backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      const double expected = b.value()(k, 0) + b.value()(k, 1);
      EXPECT_NEAR(a.grad()(i, k), expected, 1e-14);
    }
  const auto r = grad_check([&] { return sum(matmul(a, b)); }, {a, b});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Softmax, ZerosGiveUniform) {
  const Tensor p = softmax(Tensor::matrix({{0, 0}}));
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  const Tensor p = softmax(Tensor::matrix({{1000, 0}}));
  EXPECT_TRUE(p.all_finite());
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_LT(p[1], 1e-300);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  Var x(random_tensor({3, 5}, rng), true);
  const Tensor w = random_tensor({3, 5}, rng);
  const auto r = grad_check([&] { return sum(mul(softmax(x), constant(w))); }, {x});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Softmax, ColumnAxis) {
  const Tensor p = softmax(Tensor::matrix({{1, 5}, {1, 2}}), 0);
  EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
  EXPECT_NEAR(p(0, 1) + p(1, 1), 1.0, 1e-15);
}

TEST(L2Normalize, ThreeFourFive) {
  const auto u = l2_normalize(std::vector<double>{3, 4});
  EXPECT_DOUBLE_EQ(u[0], 0.6);
  EXPECT_DOUBLE_EQ(u[1], 0.8);
}

TEST(L2Normalize, UnitVectorIsFixedPoint) {
  const std::vector<double> v{0.6, 0.8};
  const auto u = l2_normalize(v);
  EXPECT_NEAR(u[0], 0.6, 1e-16);
  EXPECT_NEAR(u[1], 0.8, 1e-16);
}

TEST(L2Normalize, ZeroVectorStaysZeroWithDiagnostic) {
  cs_test::DiagnosticCapture cap;
  const auto u = l2_normalize(std::vector<double>{0, 0, 0});
  for (double x : u) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(cap.messages.size(), 1u);

  Var z(Tensor({1, 3}), true);
  const Var y = l2_normalize_rows(z);
  for (double x : y.value().values()) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(cap.messages.size(), 2u);
}

TEST(LayerNorm, ConstantRowMapsToZeros) {
  Var x(Tensor::matrix({{2.5, 2.5, 2.5, 2.5}}));
  const Var y = layer_norm(x, constant(Tensor({4}, 1.0)), constant(Tensor({4}, 0.0)));
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Relu, ClampsNegatives) {
  const Var y = relu(constant(Tensor::matrix({{-1, 2}})));
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_EQ(y.value()[1], 2.0);
}

TEST(EmbeddingLookup, IdZeroReturnsRowZero) {
  Rng rng(1);
  const Tensor table = random_tensor({5, 3}, rng);
  const std::vector<std::int32_t> ids{0};
  const Var y = embedding_lookup(constant(table), ids);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y.value()[c], table(0, c));
}

TEST(EmbeddingLookup, OutOfRangeIdThrows) {
  const std::vector<std::int32_t> ids{7};
  try {
    embedding_lookup(constant(Tensor({5, 3})), ids);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIndex);
  }
}

TEST(GradCheck, QuadraticForm) {
  Var x(Tensor::vector({1, 2}), true);
  const auto r = grad_check([&] { return sum_squares(x); }, {x});
  EXPECT_LT(r.max_rel_error, 1e-8);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(GradCheck, ConstantFunctionHasExactlyZeroGradient) {
  Var x(Tensor::vector({1, 2, 3}), true);
  const Tensor c = Tensor::vector({4, 5, 6});
  const auto r = grad_check([&] { return add(scale(sum(x), 0.0), sum(constant(c))); }, {x});
  EXPECT_EQ(r.max_rel_error, 0.0);
  for (double g : x.grad().values()) EXPECT_EQ(g, 0.0);
}

TEST(GradCheck, RejectsStepOutsideRange) {
  Var x(Tensor::vector({1}), true);
  EXPECT_THROW(grad_check([&] { return sum(x); }, {x}, 1e-2), Error);
}

// Every differentiable op on random inputs in [-1, 1] over 20 seeds.
TEST(GradCheck, EveryOperationOverSeededTrials) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Var a(random_tensor({3, 4}, rng), true), b(random_tensor({4, 3}, rng), true);
    Var c(random_tensor({3, 4}, rng), true), v(random_tensor({4}, rng), true);
    Var s(random_tensor({1}, rng, 0.5, 1.5), true);
    Var gain(random_tensor({4}, rng), true), bias(random_tensor({4}, rng), true);
    const Tensor w34 = random_tensor({3, 4}, rng), w33 = random_tensor({3, 3}, rng);
    auto weigh = [](const Var& y, const Tensor& w) { return sum(mul(y, constant(w))); };

    const std::vector<std::pair<const char*, std::function<Var()>>> cases{
        {"matmul", [&] { return weigh(matmul(a, b), w33); }},
        {"transpose", [&] { return weigh(transpose(b), w34); }},
        {"add", [&] { return weigh(add(a, c), w34); }},
        {"sub", [&] { return weigh(sub(a, c), w34); }},
        {"mul", [&] { return weigh(mul(a, c), w34); }},
        {"add_row", [&] { return weigh(add_row(a, v), w34); }},
        {"mul_row", [&] { return weigh(mul_row(a, v), w34); }},
        {"scale", [&] { return weigh(scale(a, -1.7), w34); }},
        {"scale_by", [&] { return weigh(scale_by(a, s), w34); }},
        {"relu", [&] { return weigh(relu(a), w34); }},
        {"sum_squares", [&] { return sum_squares(a); }},
        {"softmax", [&] { return weigh(softmax(a), w34); }},
        {"softmax0", [&] { return weigh(softmax(a, 0), w34); }},
        {"layer_norm", [&] { return weigh(layer_norm(a, gain, bias), w34); }},
        {"l2_normalize_rows", [&] { return weigh(l2_normalize_rows(a), w34); }},
    };
    for (const auto& [name, fn] : cases) {
      const auto r = grad_check(fn, {a, b, c, v, s, gain, bias});
      EXPECT_LE(r.max_rel_error, 1e-4) << name << " seed " << seed;
    }

    // Sequence ops.
    Var table(random_tensor({6, 4}, rng), true);
    const std::vector<std::int32_t> ids{1, 3, 3, 0, 5, 2};
    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1};
    const Tensor w64 = random_tensor({6, 4}, rng), w24 = random_tensor({2, 4}, rng), w84 = random_tensor({8, 4}, rng);
    Var prefix(random_tensor({1, 4}, rng), true);
    Var q(random_tensor({6, 4}, rng), true), k(random_tensor({6, 4}, rng), true), vv(random_tensor({6, 4}, rng), true);
    EXPECT_LE(grad_check([&] { return weigh(embedding_lookup(table, ids), w64); }, {table}).max_rel_error, 1e-4);
    EXPECT_LE(grad_check([&] { return weigh(masked_mean_pool(q, mask, 2, 3), w24); }, {q}).max_rel_error, 1e-4);
    EXPECT_LE(grad_check([&] { return weigh(prepend_rows(q, prefix, 2, 3), w84); }, {q, prefix}).max_rel_error, 1e-4);
    EXPECT_LE(grad_check([&] { return weigh(attention(q, k, vv, mask, 2, 3, 2), w64); }, {q, k, vv}).max_rel_error,
              1e-4);
  }
}

TEST(Autograd, BackwardTwiceDoublesGradients) {
  Rng rng(11);
  Var a(random_tensor({2, 3}, rng), true);
  const Tensor w = random_tensor({2, 3}, rng);
  const Var y = sum(mul(softmax(a), constant(w)));
  backward(y);
  const Tensor once = a.grad();
  backward(y);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(a.grad()[i], 2.0 * once[i]);
}

TEST(Autograd, ForwardIsBitwiseDeterministic) {
  Rng rng(12);
  const Tensor x = random_tensor({4, 6}, rng);
  const Tensor g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  auto run = [&] { return l2_normalize_rows(softmax(layer_norm(constant(x), constant(g), constant(b)))).value(); };
  const Tensor r1 = run(), r2 = run();
  EXPECT_EQ(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)), 0);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Var a(Tensor::vector({1, 2}), true);
  Var y;
  {
    NoGradGuard guard;
    y = sum_squares(a);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(Attention, MaskedKeysGetNegligibleWeight) {
  // One head, len 3, third key masked. Its value row is huge, so any leaked
  // probability mass would show up in the output.
  Tensor qv({3, 2}, 0.5), kv({3, 2}, 0.5), vv({3, 2}, 1.0);
  vv(2, 0) = vv(2, 1) = 1e12;
  const std::vector<std::uint8_t> mask{1, 1, 0};
  const Var out = attention(constant(qv), constant(kv), constant(vv), mask, 1, 3, 1);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out.value()(r, c), 1.0, 1e-12);
}
