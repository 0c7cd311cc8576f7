// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "codesearch/autograd.hpp"

// Differentiable operations on Var. Each op computes its forward value
// eagerly and records a closure with the exact gradient.
namespace codesearch {

namespace detail {

inline void require_matrix(const Var& v, const char* op) {
  require(v.shape().size() == 2, ErrorKind::kDimension,
          std::string(op) + " expects a matrix, got " + shape_string(v.shape()));
}

inline void require_row_vector(const Var& v, std::size_t width, const char* op) {
  require(v.value().size() == width && v.cols() == width, ErrorKind::kDimension,
          std::string(op) + ": vector of width " + std::to_string(width) + " expected, got " +
              shape_string(v.shape()));
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, ErrorKind::kDimension,
          "matmul inner extents disagree: " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  Tensor out({m, n});
  kernels::matmul(a.value().data(), b.value().data(), out.data(), m, k, n);
  return make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* ga = grad_of(self, 0)) kernels::matmul_bt(g.data(), bv.data(), ga->data(), m, n, k, true);
    if (Tensor* gb = grad_of(self, 1)) kernels::matmul_at(av.data(), g.data(), gb->data(), m, k, n, true);
  });
}

inline Var transpose(const Var& a) {
  detail::require_matrix(a, "transpose");
  return make_node(transpose(a.value()), {a}, [](Node& self) {
    if (Tensor* ga = grad_of(self, 0)) {
      const Tensor gt = transpose(self.grad);
      for (std::size_t i = 0; i < gt.size(); ++i) (*ga)[i] += gt[i];
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), ErrorKind::kDimension,
          "add shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = grad_of(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), ErrorKind::kDimension, "sub shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), ErrorKind::kDimension,
          "mul shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

// a + v with v broadcast over every row (last-axis broadcast).
inline Var add_row(const Var& a, const Var& v) {
  const std::size_t d = a.cols();
  detail::require_row_vector(v, d, "add_row");
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) += v.value()[c];
  return make_node(std::move(out), {a, v}, [d](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t r = 0; r < self.grad.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)[c] += self.grad(r, c);
  });
}

// a * v with v broadcast over every row (last-axis broadcast).
inline Var mul_row(const Var& a, const Var& v) {
  const std::size_t d = a.cols();
  detail::require_row_vector(v, d, "mul_row");
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) *= v.value()[c];
  return make_node(std::move(out), {a, v}, [d](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& vv = self.inputs[1]->value;
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t r = 0; r < self.grad.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)(r, c) += self.grad(r, c) * vv[c];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t r = 0; r < self.grad.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*g)[c] += self.grad(r, c) * av(r, c);
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& x : out.values()) x *= s;
  return make_node(std::move(out), {a}, [s](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

// a * s for a scalar Var s.
inline Var scale_by(const Var& a, const Var& s) {
  require(s.value().size() == 1, ErrorKind::kDimension, "scale_by expects a scalar factor");
  const double sv = s.item();
  Tensor out = a.value();
  for (double& x : out.values()) x *= sv;
  return make_node(std::move(out), {a, s}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const double sv = self.inputs[1]->value[0];
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += sv * self.grad[i];
    if (Tensor* g = grad_of(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += self.grad[i] * av[i];
      (*g)[0] += acc;
    }
  });
}

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& x : out.values()) x = x > 0.0 ? x : 0.0;
  return make_node(std::move(out), {a}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (av[i] > 0.0) (*g)[i] += self.grad[i];
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  return make_node(Tensor({1}, {s}), {a}, [](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (double& x : g->values()) x += self.grad[0];
  });
}

inline Var sum_squares(const Var& a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x * x;
  return make_node(Tensor({1}, {s}), {a}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += 2.0 * av[i] * self.grad[0];
  });
}

// Softmax of a matrix along `axis` (1 = within each row, 0 = within each
// column), with max subtraction.
inline Tensor softmax(const Tensor& x, int axis = 1) {
  require(x.shape().size() == 2, ErrorKind::kDimension, "softmax expects a matrix");
  require(axis == 0 || axis == 1, ErrorKind::kConfig, "softmax axis must be 0 or 1");
  const Tensor in = axis == 1 ? x : transpose(x);
  Tensor out = in;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  return axis == 1 ? out : transpose(out);
}

inline Var softmax(const Var& x, int axis = 1) {
  Tensor p = softmax(x.value(), axis);
  Tensor saved = p;
  return make_node(std::move(p), {x}, [axis, saved = std::move(saved)](Node& self) {
    Tensor* gx = grad_of(self, 0);
    if (!gx) return;
    const std::size_t rows = saved.rows(), cols = saved.cols();
    // dx = p * (g - <g, p>) along the normalized axis.
    if (axis == 1) {
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += self.grad(r, c) * saved(r, c);
        for (std::size_t c = 0; c < cols; ++c) (*gx)(r, c) += saved(r, c) * (self.grad(r, c) - s);
      }
    } else {
      for (std::size_t c = 0; c < cols; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r) s += self.grad(r, c) * saved(r, c);
        for (std::size_t r = 0; r < rows; ++r) (*gx)(r, c) += saved(r, c) * (self.grad(r, c) - s);
      }
    }
  });
}

// Row-wise layer normalization followed by gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const std::size_t d = x.cols(), n = x.value().rows();
  detail::require_row_vector(gain, d, "layer_norm gain");
  detail::require_row_vector(bias, d, "layer_norm bias");
  Tensor xhat(x.shape());
  std::vector<double> inv_std(n);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    auto row = x.value().row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat(r, c) = (row[c] - mean) * inv_std[r];
      out(r, c) = xhat(r, c) * gain.value()[c] + bias.value()[c];
    }
  }
  return make_node(std::move(out), {x, gain, bias},
                   [d, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                     const Tensor& g = self.grad;
                     const Tensor& gv = self.inputs[1]->value;
                     if (Tensor* gx = grad_of(self, 0)) {
                       const double inv_d = 1.0 / static_cast<double>(d);
                       for (std::size_t r = 0; r < n; ++r) {
                         double sum_dy = 0.0, sum_dy_xhat = 0.0;
                         for (std::size_t c = 0; c < d; ++c) {
                           const double dy = g(r, c) * gv[c];
                           sum_dy += dy;
                           sum_dy_xhat += dy * xhat(r, c);
                         }
                         for (std::size_t c = 0; c < d; ++c) {
                           const double dy = g(r, c) * gv[c];
                           (*gx)(r, c) += inv_std[r] * (dy - inv_d * sum_dy - xhat(r, c) * inv_d * sum_dy_xhat);
                         }
                       }
                     }
                     if (Tensor* gg = grad_of(self, 1))
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t c = 0; c < d; ++c) (*gg)[c] += g(r, c) * xhat(r, c);
                     if (Tensor* gb = grad_of(self, 2))
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t c = 0; c < d; ++c) (*gb)[c] += g(r, c);
                   });
}

// Gathers rows of `table` by id.
inline Var embedding_lookup(const Var& table, std::span<const std::int32_t> ids) {
  detail::require_matrix(table, "embedding_lookup");
  const std::size_t vocab = table.rows(), d = table.cols();
  require(!ids.empty(), ErrorKind::kDimension, "embedding_lookup with no ids");
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < vocab, ErrorKind::kIndex,
            "id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab) + " rows");
    auto src = table.value().row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return make_node(std::move(out), {table}, [d, saved = std::move(saved)](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < saved.size(); ++i)
        for (std::size_t c = 0; c < d; ++c) (*g)(static_cast<std::size_t>(saved[i]), c) += self.grad(i, c);
  });
}

// Unit-norm rows. Rows with norm <= eps become zero rows (diagnostic) and pass
// no gradient.
inline Var l2_normalize_rows(const Var& x, double eps = 1e-12) {
  const std::size_t n = x.value().rows(), d = x.cols();
  Tensor out = x.value();
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    norms[r] = l2_norm(x.value().row(r));
    auto row = out.row(r);
    if (norms[r] <= eps) {
      diagnostic("l2_normalize: row " + std::to_string(r) + " has norm below eps, returning zeros");
      std::fill(row.begin(), row.end(), 0.0);
    } else {
      for (double& v : row) v /= norms[r];
    }
  }
  Tensor y = out;
  return make_node(std::move(out), {x}, [n, d, eps, norms = std::move(norms), y = std::move(y)](Node& self) {
    Tensor* gx = grad_of(self, 0);
    if (!gx) return;
    // dx = (g - y <g, y>) / |x|
    for (std::size_t r = 0; r < n; ++r) {
      if (norms[r] <= eps) continue;
      double gy = 0.0;
      for (std::size_t c = 0; c < d; ++c) gy += self.grad(r, c) * y(r, c);
      for (std::size_t c = 0; c < d; ++c) (*gx)(r, c) += (self.grad(r, c) - y(r, c) * gy) / norms[r];
    }
  });
}

// x holds `seqs` sequences of `len` rows each; averages the rows whose mask
// entry is 1. mask has seqs*len entries.
inline Var masked_mean_pool(const Var& x, std::span<const std::uint8_t> mask, std::size_t seqs, std::size_t len) {
  const std::size_t d = x.cols();
  require(x.value().rows() == seqs * len && mask.size() == seqs * len, ErrorKind::kDimension,
          "masked_mean_pool shape mismatch");
  std::vector<double> counts(seqs, 0.0);
  Tensor out({seqs, d});
  for (std::size_t s = 0; s < seqs; ++s) {
    for (std::size_t t = 0; t < len; ++t)
      if (mask[s * len + t]) {
        counts[s] += 1.0;
        auto row = x.value().row(s * len + t);
        for (std::size_t c = 0; c < d; ++c) out(s, c) += row[c];
      }
    require(counts[s] > 0.0, ErrorKind::kData, "sequence " + std::to_string(s) + " has no non-PAD tokens");
    for (std::size_t c = 0; c < d; ++c) out(s, c) /= counts[s];
  }
  std::vector<std::uint8_t> saved(mask.begin(), mask.end());
  return make_node(std::move(out), {x}, [seqs, len, d, counts = std::move(counts), saved = std::move(saved)](Node& self) {
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t s = 0; s < seqs; ++s)
        for (std::size_t t = 0; t < len; ++t)
          if (saved[s * len + t])
            for (std::size_t c = 0; c < d; ++c) (*g)(s * len + t, c) += self.grad(s, c) / counts[s];
  });
}

// Inserts the rows of `prefix` (m x d) in front of each of the `seqs`
// sequences of `len` rows in x. Result has seqs*(m+len) rows.
inline Var prepend_rows(const Var& x, const Var& prefix, std::size_t seqs, std::size_t len) {
  const std::size_t d = x.cols(), m = prefix.rows();
  require(prefix.cols() == d && x.value().rows() == seqs * len, ErrorKind::kDimension, "prepend_rows shape mismatch");
  const std::size_t out_len = m + len;
  Tensor out({seqs * out_len, d});
  for (std::size_t s = 0; s < seqs; ++s) {
    for (std::size_t i = 0; i < m; ++i) {
      auto src = prefix.value().row(i);
      std::copy(src.begin(), src.end(), out.row(s * out_len + i).begin());
    }
    for (std::size_t t = 0; t < len; ++t) {
      auto src = x.value().row(s * len + t);
      std::copy(src.begin(), src.end(), out.row(s * out_len + m + t).begin());
    }
  }
  return make_node(std::move(out), {x, prefix}, [seqs, len, m, d, out_len](Node& self) {
    if (Tensor* gx = grad_of(self, 0))
      for (std::size_t s = 0; s < seqs; ++s)
        for (std::size_t t = 0; t < len; ++t)
          for (std::size_t c = 0; c < d; ++c) (*gx)(s * len + t, c) += self.grad(s * out_len + m + t, c);
    if (Tensor* gp = grad_of(self, 1))
      for (std::size_t s = 0; s < seqs; ++s)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t c = 0; c < d; ++c) (*gp)(i, c) += self.grad(s * out_len + i, c);
  });
}

inline constexpr double kAttentionMaskValue = -1e9;

// Scaled dot-product logits of one head: out[len x len] with additive mask on
// padded keys. q, k point at row 0 of the sequence; `stride` is the row width.
inline void attention_logits(const double* q, const double* k, std::size_t stride, std::size_t len,
                             std::size_t head_dim, const std::uint8_t* key_mask, double* out) {
  const double factor = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < len; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < head_dim; ++c) s += q[i * stride + c] * k[j * stride + c];
      out[i * len + j] = s * factor + (key_mask[j] ? 0.0 : kAttentionMaskValue);
    }
}

// Multi-head self-attention core: q, k, v are [seqs*len x d] with heads laid
// out as contiguous column blocks. Returns softmax(q k^T / sqrt(dh) + mask) v.
inline Var attention(const Var& q, const Var& k, const Var& v, std::span<const std::uint8_t> key_mask,
                     std::size_t seqs, std::size_t len, std::size_t heads) {
  const std::size_t d = q.cols();
  require(k.shape() == q.shape() && v.shape() == q.shape(), ErrorKind::kDimension, "attention q/k/v shapes differ");
  require(q.rows() == seqs * len && key_mask.size() == seqs * len, ErrorKind::kDimension, "attention shape mismatch");
  require(heads > 0 && d % heads == 0, ErrorKind::kConfig, "attention width not divisible by heads");
  const std::size_t dh = d / heads;
  const std::size_t block = len * len;

  Tensor probs({seqs * heads * block});
  Tensor out({seqs * len, d});
  std::vector<double> logits(block);
  for (std::size_t s = 0; s < seqs; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = s * len * d + h * dh;
      attention_logits(q.value().data() + base, k.value().data() + base, d, len, dh, key_mask.data() + s * len,
                       logits.data());
      double* p = probs.data() + (s * heads + h) * block;
      for (std::size_t i = 0; i < len; ++i) {
        const double* li = logits.data() + i * len;
        const double mx = *std::max_element(li, li + len);
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) z += (p[i * len + j] = std::exp(li[j] - mx));
        for (std::size_t j = 0; j < len; ++j) p[i * len + j] /= z;
        double* oi = out.data() + (s * len + i) * d + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          const double pij = p[i * len + j];
          if (pij == 0.0) continue;
          const double* vj = v.value().data() + (s * len + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
    }
  }

  return make_node(std::move(out), {q, k, v}, [seqs, len, heads, d, dh, block, probs = std::move(probs)](Node& self) {
    Tensor* gq = grad_of(self, 0);
    Tensor* gk = grad_of(self, 1);
    Tensor* gv = grad_of(self, 2);
    const Tensor& qv = self.inputs[0]->value;
    const Tensor& kv = self.inputs[1]->value;
    const Tensor& vv = self.inputs[2]->value;
    const double factor = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> dp(len);
    for (std::size_t s = 0; s < seqs; ++s) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* p = probs.data() + (s * heads + h) * block;
        for (std::size_t i = 0; i < len; ++i) {
          const double* gi = self.grad.data() + (s * len + i) * d + h * dh;
          double weighted = 0.0;
          for (std::size_t j = 0; j < len; ++j) {
            const double* vj = vv.data() + (s * len + j) * d + h * dh;
            double acc = 0.0;
            for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
            dp[j] = acc;
            weighted += acc * p[i * len + j];
            if (gv && p[i * len + j] != 0.0) {
              double* gvj = gv->data() + (s * len + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[i * len + j] * gi[c];
            }
          }
          if (!gq && !gk) continue;
          const double* qi = qv.data() + (s * len + i) * d + h * dh;
          for (std::size_t j = 0; j < len; ++j) {
            const double ds = p[i * len + j] * (dp[j] - weighted) * factor;
            if (ds == 0.0) continue;
            const double* kj = kv.data() + (s * len + j) * d + h * dh;
            if (gq) {
              double* gqi = gq->data() + (s * len + i) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
            }
            if (gk) {
              double* gkj = gk->data() + (s * len + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
            }
          }
        }
      }
    }
  });
}

}  // namespace codesearch
