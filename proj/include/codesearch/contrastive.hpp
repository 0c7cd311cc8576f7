// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "codesearch/autograd.hpp"
#include "codesearch/ops.hpp"

namespace codesearch {

// scores(i, j) = <code_i, text_j> / temperature
struct SimilarityMatrix {
  Tensor scores;
  double temperature = 1.0;

  std::size_t size() const { return scores.rows(); }
};

inline SimilarityMatrix similarity_matrix(const Tensor& code, const Tensor& text, double temperature) {
  require(temperature > 0.0, ErrorKind::kConfig, "temperature must be positive");
  require(code.shape().size() == 2 && code.shape() == text.shape(), ErrorKind::kDimension,
          "similarity_matrix needs equally shaped embedding matrices");
  Tensor s({code.rows(), text.rows()});
  kernels::matmul_bt(code.data(), text.data(), s.data(), code.rows(), code.cols(), text.rows());
  for (double& v : s.values()) v /= temperature;
  return {std::move(s), temperature};
}

inline Var similarity(const Var& code, const Var& text, double temperature) {
  require(temperature > 0.0, ErrorKind::kConfig, "temperature must be positive");
  return scale(matmul(code, transpose(text)), 1.0 / temperature);
}

// Same, with a learnable inverse temperature (scalar Var).
inline Var similarity(const Var& code, const Var& text, const Var& inverse_temperature) {
  return scale_by(matmul(code, transpose(text)), inverse_temperature);
}

namespace detail {

inline double log_sum_exp(const double* v, std::size_t n, std::size_t stride) {
  double mx = v[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, v[i * stride]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(v[i * stride] - mx);
  return mx + std::log(z);
}

}  // namespace detail

// Symmetric in-batch cross-entropy: row i scores code_i against every text
// (code->text), column i scores text_i against every code (text->code), and
// the loss averages both directions over the 2N anchors.
inline double nt_xent(const Tensor& s) {
  require(s.shape().size() == 2 && s.rows() == s.cols(), ErrorKind::kDimension, "nt_xent needs a square matrix");
  const std::size_t n = s.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double diag = s(i, i);
    const double row = detail::log_sum_exp(s.data() + i * n, n, 1);
    const double col = detail::log_sum_exp(s.data() + i, n, n);
    total += (row - diag) + (col - diag);
  }
  return total / (2.0 * static_cast<double>(n));
}

inline double nt_xent(const SimilarityMatrix& s) { return nt_xent(s.scores); }

inline Var nt_xent(const Var& s) {
  const double value = nt_xent(s.value());
  return make_node(Tensor({1}, {value}), {s}, [](Node& self) {
    Tensor* gs = grad_of(self, 0);
    if (!gs) return;
    const Tensor& sv = self.inputs[0]->value;
    const std::size_t n = sv.rows();
    const double w = self.grad[0] / (2.0 * static_cast<double>(n));
    const Tensor rows = softmax(sv, 1);
    const Tensor cols = softmax(sv, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        (*gs)(i, j) += w * (rows(i, j) + cols(i, j) - (i == j ? 2.0 : 0.0));
  });
}

// Direct evaluation of the per-pair definition, one anchor at a time, with no
// matrix ops. Test oracle for nt_xent.
inline double brute_force_loss(const Tensor& code, const Tensor& text, double temperature) {
  require(temperature > 0.0, ErrorKind::kConfig, "temperature must be positive");
  const std::size_t n = code.rows(), d = code.cols();
  auto delta = [&](const Tensor& a, std::size_t i, const Tensor& b, std::size_t k) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += a(i, c) * b(k, c);
    return s / temperature;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // Shift by the largest exponent so exp() stays in range; the shift cancels.
    double shift_ct = delta(code, i, text, 0), shift_tc = delta(text, i, code, 0);
    for (std::size_t k = 1; k < n; ++k) {
      shift_ct = std::max(shift_ct, delta(code, i, text, k));
      shift_tc = std::max(shift_tc, delta(text, i, code, k));
    }
    double denom_ct = 0.0, denom_tc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      denom_ct += std::exp(delta(code, i, text, k) - shift_ct);
      denom_tc += std::exp(delta(text, i, code, k) - shift_tc);
    }
    const double l_ct = -std::log(std::exp(delta(code, i, text, i) - shift_ct) / denom_ct);
    const double l_tc = -std::log(std::exp(delta(text, i, code, i) - shift_tc) / denom_tc);
    total += l_ct + l_tc;
  }
  return total / (2.0 * static_cast<double>(n));
}

}  // namespace codesearch
