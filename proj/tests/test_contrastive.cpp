// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace codesearch;
using cs_test::random_tensor;
using cs_test::random_unit_rows;

namespace {

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < perm.size(); ++i) std::copy(t.row(perm[i]).begin(), t.row(perm[i]).end(), out.row(i).begin());
  return out;
}

}  // namespace

TEST(Similarity, IdentityRowsAtUnitTemperature) {
  const auto s = similarity_matrix(Tensor::identity(3), Tensor::identity(3), 1.0);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(s.scores[i], Tensor::identity(3)[i]);
}

TEST(Similarity, TemperatureScalesByTwelvePointFive) {
  Rng rng(1);
  const Tensor c = random_unit_rows(4, 5, rng), t = random_unit_rows(4, 5, rng);
  const auto raw = similarity_matrix(c, t, 1.0), scaled = similarity_matrix(c, t, 0.08);
  for (std::size_t i = 0; i < raw.scores.size(); ++i) EXPECT_NEAR(scaled.scores[i], 12.5 * raw.scores[i], 1e-12);
}

TEST(Similarity, SwappingModalitiesTransposes) {
  Rng rng(2);
  const Tensor c = random_unit_rows(4, 5, rng), t = random_unit_rows(4, 5, rng);
  const auto s = similarity_matrix(c, t, 0.08), st = similarity_matrix(t, c, 0.08);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(s.scores(i, j), st.scores(j, i));
}

TEST(Similarity, ShapeMismatchAndBadTemperature) {
  EXPECT_THROW(similarity_matrix(Tensor({2, 3}), Tensor({3, 3}), 1.0), Error);
  EXPECT_THROW(similarity_matrix(Tensor({2, 3}), Tensor({2, 3}), 0.0), Error);
}

TEST(NtXent, SinglePairIsZero) {
  EXPECT_EQ(nt_xent(Tensor::matrix({{12.5}})), 0.0);
  EXPECT_EQ(brute_force_loss(Tensor::matrix({{1.0}}), Tensor::matrix({{1.0}}), 0.08), 0.0);
}

TEST(NtXent, IdenticalEmbeddingsGiveLnTwo) {
  const Tensor e = Tensor::matrix({{0.6, 0.8}, {0.6, 0.8}});
  for (double tau : {0.08, 1.0, 3.0}) EXPECT_NEAR(nt_xent(similarity_matrix(e, e, tau)), std::log(2.0), 1e-15);
}

TEST(NtXent, OrthonormalPairsAtDefaultTemperature) {
  const Tensor e = Tensor::identity(2);
  const double expected = std::log1p(std::exp(-12.5));  // 3.7266e-6
  EXPECT_NEAR(nt_xent(similarity_matrix(e, e, 0.08)), expected, 1e-6 * expected);
  EXPECT_NEAR(expected, 3.73e-6, 0.005e-6);
}

TEST(NtXent, AgreesWithBruteForceOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(15), d = 1 + rng.below(8);
    const Tensor c = random_unit_rows(n, d, rng), t = random_unit_rows(n, d, rng);
    const double tau = trial % 2 ? 0.08 : rng.uniform(0.05, 2.0);
    EXPECT_NEAR(nt_xent(similarity_matrix(c, t, tau)), brute_force_loss(c, t, tau), 1e-12) << "n=" << n;
  }
}

TEST(NtXent, NonNegativeAndVanishesWhenMatchesDominate) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(8);
    const Tensor c = random_unit_rows(n, 4, rng), t = random_unit_rows(n, 4, rng);
    EXPECT_GE(nt_xent(similarity_matrix(c, t, 0.08)), 0.0);
  }
  const Tensor e = Tensor::identity(4);
  EXPECT_LT(nt_xent(similarity_matrix(e, e, 0.01)), 1e-40);
}

TEST(NtXent, ModalSymmetryIsExact) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor s = random_tensor({6, 6}, rng, -10, 10);
    EXPECT_EQ(nt_xent(s), nt_xent(transpose(s)));
  }
}

TEST(NtXent, PermutationInvariant) {
  Rng rng(6);
  const std::size_t n = 7;
  const Tensor c = random_unit_rows(n, 5, rng), t = random_unit_rows(n, 5, rng);
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  rng.shuffle(perm);
  const double a = nt_xent(similarity_matrix(c, t, 0.08));
  const double b = nt_xent(similarity_matrix(permute_rows(c, perm), permute_rows(t, perm), 0.08));
  EXPECT_NEAR(a, b, 1e-13);
  EXPECT_NEAR(brute_force_loss(permute_rows(c, perm), permute_rows(t, perm), 0.08), a, 1e-12);
}

TEST(NtXent, NonSquareIsDimensionError) {
  try {
    nt_xent(Tensor({2, 3}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimension);
  }
}

TEST(NtXent, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    Var c(random_unit_rows(4, 3, rng), true), t(random_unit_rows(4, 3, rng), true);
    const auto r = grad_check([&] { return nt_xent(similarity(l2_normalize_rows(c), l2_normalize_rows(t), 0.08)); }, {c, t});
    EXPECT_LE(r.max_rel_error, 1e-6);
  }
}

TEST(NtXent, LearnableInverseTemperatureMatchesFixed) {
  Rng rng(8);
  const Tensor c = random_unit_rows(5, 3, rng), t = random_unit_rows(5, 3, rng);
  Var inv(Tensor({1}, 12.5), true);
  const Var learned = nt_xent(similarity(constant(c), constant(t), inv));
  EXPECT_NEAR(learned.item(), nt_xent(similarity_matrix(c, t, 0.08)), 1e-13);
  const auto r = grad_check([&] { return nt_xent(similarity(constant(c), constant(t), inv)); }, {inv});
  EXPECT_LE(r.max_rel_error, 1e-6);
}
