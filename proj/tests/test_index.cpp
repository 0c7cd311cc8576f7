// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"

using namespace codesearch;

namespace {

struct Fixture {
  std::vector<PairRecord> records;
  Vocab vocab;
  Model model;
};

Fixture make_fixture(std::size_t n = 24) {
  SyntheticConfig sc;
  sc.pairs = n;
  sc.concepts = 30;
  const auto records = synthesize(sc);
  Vocab vocab = build_vocab(records, 10000);
  EncoderConfig c = cs_test::tiny_encoder(vocab.size());
  c.max_len = 40;
  Model model = make_model(c, BaseDescriptor::seeded(2), Method::kLora, nlohmann::json(), 4);
  // Non-zero B so the adapter participates.
  Rng rng(9);
  for (Parameter* p : model.adapter->parameters())
    for (double& v : p->mutable_value().values()) v += rng.uniform(-0.1, 0.1);
  model.vocab_hash = vocab.hash();
  return {records, std::move(vocab), std::move(model)};
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("codesearch_index_" + name)).string();
}

EmbeddingIndex tiny_index(const std::vector<std::string>& ids, const Tensor& rows) {
  EmbeddingIndex ix;
  ix.matrix = rows;
  for (std::size_t i = 0; i < ids.size(); ++i) ix.entries.push_back({ids[i], "synth", "", {}, "code " + ids[i]});
  return ix;
}

}  // namespace

TEST(Index, RowsNormsAndRebuildBytes) {
  Fixture f = make_fixture();
  const auto a = build_index(f.model, f.vocab, f.records);
  ASSERT_EQ(a.size(), f.records.size());
  ASSERT_EQ(a.matrix.rows(), f.records.size());
  EXPECT_EQ(a.dim(), f.model.base.config.d_emb);
  for (std::size_t i = 0; i < a.size(); ++i) {
    double sq = 0.0;
    for (double v : a.matrix.row(i)) sq += v * v;
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
  }
  const auto b = build_index(f.model, f.vocab, f.records);
  EXPECT_EQ(a.serialize(), b.serialize());
}

TEST(Index, KOneIsArgmax) {
  Fixture f = make_fixture();
  const auto ix = build_index(f.model, f.vocab, f.records);
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor q = cs_test::random_unit_rows(1, ix.dim(), rng);
    const auto r = search(ix, q.row(0), 1);
    ASSERT_EQ(r.hits.size(), 1u);
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t i = 0; i < ix.size(); ++i) {
      double s = 0.0;
      for (std::size_t d = 0; d < ix.dim(); ++d) s += q(0, d) * ix.matrix(i, d);
      if (s > best_score) {
        best_score = s;
        best = i;
      }
    }
    EXPECT_EQ(r.hits[0].row, best);
  }
}

TEST(Index, DuplicateRowsOrderedById) {
  const Tensor rows = Tensor::matrix({{1, 0}, {0, 1}, {1, 0}, {1, 0}});
  const auto ix = tiny_index({"c", "b", "a", "d"}, rows);
  const std::vector<double> q{1, 0};
  const auto r = search(ix, q, 4);
  ASSERT_EQ(r.hits.size(), 4u);
  EXPECT_EQ(r.hits[0].id, "a");
  EXPECT_EQ(r.hits[1].id, "c");
  EXPECT_EQ(r.hits[2].id, "d");
  EXPECT_EQ(r.hits[3].id, "b");
}

TEST(Index, MatchesFullSortOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(40), d = 1 + rng.below(6);
    Tensor rows = cs_test::random_unit_rows(m, d, rng);
    // Quantize so ties actually occur.
    for (double& v : rows.values()) v = std::round(v * 2.0) / 2.0;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < m; ++i) ids.push_back("id" + std::to_string(rng.below(1000000)) + "_" + std::to_string(i));
    const auto ix = tiny_index(ids, rows);
    std::vector<double> q(d);
    for (double& v : q) v = std::round(rng.uniform(-1, 1) * 2.0) / 2.0;
    const std::size_t k = 1 + rng.below(m);
    const auto r = search(ix, q, k);

    std::vector<std::pair<double, std::string>> oracle;
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += q[j] * rows(i, j);
      oracle.emplace_back(-s, ids[i]);
    }
    std::sort(oracle.begin(), oracle.end());
    ASSERT_EQ(r.hits.size(), k);
    for (std::size_t i = 0; i < k; ++i) {
      EXPECT_EQ(r.hits[i].id, oracle[i].second);
      EXPECT_DOUBLE_EQ(r.hits[i].score, -oracle[i].first);
    }
  }
}

TEST(Index, KLargerThanIndexReturnsAllWithDiagnostic) {
  const auto ix = tiny_index({"a", "b"}, Tensor::matrix({{1, 0}, {0, 1}}));
  cs_test::DiagnosticCapture cap;
  const auto r = search(ix, std::vector<double>{1, 0}, 5);
  EXPECT_EQ(r.hits.size(), 2u);
  EXPECT_EQ(cap.messages.size(), 1u);
  EXPECT_THROW(search(ix, std::vector<double>{1, 0}, 0), Error);
  try {
    search(ix, std::vector<double>{1, 0, 0}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimension);
  }
}

TEST(Index, SaveLoadSearchIdentical) {
  Fixture f = make_fixture();
  IndexSource src{"corpus.jsonl", {}};
  for (std::size_t i = 0; i < f.records.size(); ++i) src.spans.push_back({i * 10, i * 10 + 9});
  auto ix = build_index(f.model, f.vocab, f.records, src);
  ix.fingerprint = 0x1234abcd;
  const std::string path = temp_path("roundtrip.bin");
  ix.save(path);
  const auto back = EmbeddingIndex::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.serialize(), ix.serialize());
  EXPECT_EQ(back.entries, ix.entries);
  for (const auto& r : f.records) {
    const auto a = search(ix, f.model, f.vocab, r.text, 5);
    const auto b = search(back, f.model, f.vocab, r.text, 5);
    ASSERT_EQ(a.hits.size(), b.hits.size());
    for (std::size_t i = 0; i < a.hits.size(); ++i) {
      EXPECT_EQ(a.hits[i].id, b.hits[i].id);
      EXPECT_EQ(a.hits[i].score, b.hits[i].score);
    }
  }
}

TEST(Index, QueryEmbeddingUsesEncode) {
  Fixture f = make_fixture();
  const std::string text = f.records[0].text;
  const auto q = embed_query(f.model, f.vocab, text, 256);
  const auto ids = f.vocab.encode(tokenize(text, TokenMode::kText),
                                  sequence_budget(f.model.base.config, f.model.adapter_ptr(), 256));
  EXPECT_EQ(q, encode(f.model.base, ids, f.model.adapter_ptr()));
}

TEST(Index, CodeRowEqualsEncodeOfCode) {
  Fixture f = make_fixture(8);
  const auto ix = build_index(f.model, f.vocab, f.records);
  const std::size_t budget = sequence_budget(f.model.base.config, f.model.adapter_ptr(), 256);
  for (std::size_t i = 0; i < f.records.size(); ++i) {
    const auto e = encode(f.model.base, f.vocab.encode(tokenize(f.records[i].code, TokenMode::kCode), budget),
                          f.model.adapter_ptr());
    for (std::size_t d = 0; d < ix.dim(); ++d) EXPECT_NEAR(ix.matrix(i, d), e[d], 1e-6);
  }
}

TEST(Index, FingerprintMismatchRejected) {
  auto ix = tiny_index({"a"}, Tensor::matrix({{1}}));
  ix.fingerprint = 42;
  EXPECT_NO_THROW(ix.check_fingerprint(42));
  try {
    ix.check_fingerprint(43);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFingerprint);
  }
}

TEST(Index, TruncatedFileIsLoadError) {
  auto ix = tiny_index({"a", "b"}, Tensor::matrix({{1, 0}, {0, 1}}));
  const std::string bytes = ix.serialize();
  try {
    EmbeddingIndex::parse(bytes.substr(0, bytes.find('\n') + 5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kLoad);
  }
}

TEST(Context, KOneGivesOneSnippet) {
  const auto ix = tiny_index({"a", "b", "c"}, Tensor::matrix({{1, 0}, {0, 1}, {0.6, 0.8}}));
  const auto r = search(ix, std::vector<double>{1, 0}, 1);
  const std::string ctx = export_context(ix, r, 1000);
  EXPECT_EQ(ctx, "### a (synth)\ncode a\n");
}

TEST(Context, FollowsRankOrderAndBudget) {
  const auto ix = tiny_index({"a", "b", "c"}, Tensor::matrix({{1, 0}, {0, 1}, {0.6, 0.8}}));
  const auto r = search(ix, std::vector<double>{0, 1}, 3);
  const std::string all = export_context(ix, r, 1000);
  EXPECT_EQ(all, "### b (synth)\ncode b\n### c (synth)\ncode c\n### a (synth)\ncode a\n");
  for (std::size_t budget = 1; budget < 40; ++budget) {
    cs_test::DiagnosticCapture cap;
    const std::string ctx = export_context(ix, r, budget);
    EXPECT_LE(count_tokens(ctx), budget);
    if (cap.messages.empty()) EXPECT_EQ(all.compare(0, ctx.size(), ctx), 0) << budget;
  }
}

TEST(Context, OversizedFirstSnippetIsTruncatedWithDiagnostic) {
  EmbeddingIndex ix = tiny_index({"a"}, Tensor::matrix({{1}}));
  ix.entries[0].code = "one two three four five six seven eight";
  const auto r = search(ix, std::vector<double>{1}, 1);
  const std::size_t header = count_tokens("### a (synth)\n");
  cs_test::DiagnosticCapture cap;
  const std::string ctx = export_context(ix, r, header + 3);
  EXPECT_EQ(cap.messages.size(), 1u);
  EXPECT_EQ(count_tokens(ctx), header + 3);
  EXPECT_NE(ctx.find("one two three\n"), std::string::npos);
}
