// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "codesearch/codesearch.hpp"

namespace cs_test {

inline codesearch::Tensor random_tensor(codesearch::Shape shape, codesearch::Rng& rng, double lo = -1.0, double hi = 1.0) {
  codesearch::Tensor t(std::move(shape));
  for (double& x : t.values()) x = rng.uniform(lo, hi);
  return t;
}

inline codesearch::Tensor random_unit_rows(std::size_t n, std::size_t d, codesearch::Rng& rng) {
  codesearch::Tensor t({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    auto u = codesearch::l2_normalize(v);
    std::copy(u.begin(), u.end(), t.row(r).begin());
  }
  return t;
}

// Collects diagnostics instead of printing them.
struct DiagnosticCapture {
  std::vector<std::string> messages;
  codesearch::ScopedDiagnosticSink guard{[this](std::string_view m) { messages.emplace_back(m); }};
};

inline codesearch::EncoderConfig tiny_encoder(std::size_t vocab = 40) {
  codesearch::EncoderConfig c;
  c.layers = 1;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 12;
  c.vocab_size = vocab;
  c.max_len = 16;
  c.d_emb = 6;
  return c;
}

inline std::vector<std::int32_t> random_ids(std::size_t len, std::size_t vocab, codesearch::Rng& rng) {
  std::vector<std::int32_t> ids(len);
  for (auto& id : ids) id = static_cast<std::int32_t>(codesearch::Vocab::kReserved + rng.below(vocab - codesearch::Vocab::kReserved));
  return ids;
}

}  // namespace cs_test
