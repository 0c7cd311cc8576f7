// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codesearch/checkpoint.hpp"

namespace codesearch {

struct IndexEntry {
  std::string id;
  std::string lang;
  std::string source;  // corpus file the record came from
  ByteSpan span;       // its line within that file
  std::string code;

  friend bool operator==(const IndexEntry& a, const IndexEntry& b) {
    return a.id == b.id && a.lang == b.lang && a.source == b.source && a.span.begin == b.span.begin &&
           a.span.end == b.span.end && a.code == b.code;
  }
};

// Exact-search code embedding table tied to the checkpoint that built it.
// File layout: header JSON line, M x d_emb float32 little-endian rows, then
// one JSON metadata line.
struct EmbeddingIndex {
  nlohmann::json config = nlohmann::json::object();  // encoder, method, token budgets
  std::uint64_t fingerprint = 0;                     // of the checkpoint file bytes
  std::string checkpoint_path;
  std::string vocab_path;
  std::vector<IndexEntry> entries;
  Tensor matrix;  // M x d_emb, values float32-representable

  std::size_t size() const { return entries.size(); }
  std::size_t dim() const { return matrix.cols(); }

  std::size_t max_text_tokens() const { return config.value("max_text_tokens", std::size_t{256}); }

  std::string serialize() const {
    nlohmann::json header = {{"format_version", 1},
                             {"config", config},
                             {"fingerprint", hex64(fingerprint)},
                             {"checkpoint", checkpoint_path},
                             {"vocab", vocab_path},
                             {"M", size()},
                             {"d_emb", dim()}};
    std::string out = header.dump() + "\n";
    for (double v : matrix.values()) detail::append_f32(out, v);
    nlohmann::json meta = nlohmann::json::array();
    for (const auto& e : entries)
      meta.push_back({{"id", e.id},
                      {"lang", e.lang},
                      {"source", e.source},
                      {"offsets", {e.span.begin, e.span.end}},
                      {"code", e.code}});
    out += meta.dump() + "\n";
    return out;
  }

  static EmbeddingIndex parse(const std::string& bytes) {
    const auto nl = bytes.find('\n');
    require(nl != std::string::npos, ErrorKind::kLoad, "index file has no header line");
    EmbeddingIndex ix;
    try {
      const auto header = nlohmann::json::parse(bytes.substr(0, nl));
      require(header.at("format_version").get<int>() == 1, ErrorKind::kLoad, "unsupported index format version");
      ix.config = header.at("config");
      ix.fingerprint = parse_hex64(header.at("fingerprint").get<std::string>());
      ix.checkpoint_path = header.at("checkpoint").get<std::string>();
      ix.vocab_path = header.at("vocab").get<std::string>();
      const auto m = header.at("M").get<std::size_t>();
      const auto d = header.at("d_emb").get<std::size_t>();
      require(m >= 1 && d >= 1, ErrorKind::kIndex, "index is empty");
      const std::size_t start = nl + 1, bytes_needed = m * d * 4;
      require(bytes.size() >= start + bytes_needed, ErrorKind::kLoad, "index matrix is truncated");
      std::vector<double> values(m * d);
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = detail::read_f32(bytes.data() + start + 4 * i);
      ix.matrix = Tensor({m, d}, std::move(values));
      const auto meta = nlohmann::json::parse(bytes.substr(start + bytes_needed));
      require(meta.size() == m, ErrorKind::kLoad, "index metadata count differs from row count");
      for (const auto& e : meta) {
        const auto off = e.at("offsets").get<std::vector<std::size_t>>();
        require(off.size() == 2, ErrorKind::kLoad, "malformed offsets in index metadata");
        ix.entries.push_back({e.at("id").get<std::string>(), e.at("lang").get<std::string>(),
                              e.at("source").get<std::string>(), {off[0], off[1]}, e.at("code").get<std::string>()});
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kLoad, std::string("malformed index file: ") + e.what());
    }
    return ix;
  }

  void save(const std::string& path) const { write_file(path, serialize()); }
  static EmbeddingIndex load(const std::string& path) { return parse(read_file(path)); }

  void check_fingerprint(std::uint64_t checkpoint_fingerprint) const {
    require(checkpoint_fingerprint == fingerprint, ErrorKind::kFingerprint,
            "checkpoint fingerprint " + hex64(checkpoint_fingerprint) + " does not match the index (" +
                hex64(fingerprint) + ")");
  }
};

struct IndexSource {
  std::string path;            // recorded in metadata
  std::vector<ByteSpan> spans;  // one per record, or empty
};

// Embeds the code side of every record with the model. Rows are rounded to
// float32 so an index searched in memory and one reloaded from disk agree.
inline EmbeddingIndex build_index(const Model& model, const Vocab& vocab, const std::vector<PairRecord>& corpus,
                                  const IndexSource& source = {}, std::size_t max_text_tokens = 256,
                                  std::size_t max_code_tokens = 256) {
  require(!corpus.empty(), ErrorKind::kData, "cannot index an empty corpus");
  require(source.spans.empty() || source.spans.size() == corpus.size(), ErrorKind::kData,
          "byte span count differs from record count");
  const Adapter* adapter = model.adapter_ptr();
  const std::size_t code_budget = sequence_budget(model.base.config, adapter, max_code_tokens);
  std::vector<std::vector<std::int32_t>> seqs;
  seqs.reserve(corpus.size());
  for (const auto& r : corpus) seqs.push_back(vocab.encode(tokenize(r.code, TokenMode::kCode), code_budget));

  EmbeddingIndex ix;
  ix.matrix = embed_sequences(model.base, seqs, adapter);
  for (double& v : ix.matrix.values()) v = static_cast<double>(static_cast<float>(v));
  ix.config = {{"encoder", model.base.config.to_json()},
               {"method", to_string(model.method)},
               {"max_text_tokens", max_text_tokens},
               {"max_code_tokens", max_code_tokens}};
  ix.vocab_path = model.vocab_path;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    ix.entries.push_back({corpus[i].id, corpus[i].lang, source.path,
                          source.spans.empty() ? ByteSpan{} : source.spans[i], corpus[i].code});
  return ix;
}

struct QueryHit {
  std::string id;
  std::size_t row = 0;
  double score = 0.0;
};

struct QueryResult {
  std::vector<QueryHit> hits;
  std::size_t k = 0;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"k", k}, {"hits", nlohmann::json::array()}};
    for (const auto& h : hits) j["hits"].push_back({{"id", h.id}, {"score", h.score}});
    return j;
  }
};

// Full scan; scores descending, ties by ascending id.
inline QueryResult search(const EmbeddingIndex& ix, std::span<const double> query, std::size_t k) {
  require(ix.size() >= 1, ErrorKind::kIndex, "cannot search an empty index");
  require(k >= 1, ErrorKind::kConfig, "k must be at least 1");
  require(query.size() == ix.dim(), ErrorKind::kDimension, "query width differs from index width");
  if (k > ix.size()) {
    diagnostic("search: k=" + std::to_string(k) + " exceeds index size " + std::to_string(ix.size()) +
               ", returning all rows");
    k = ix.size();
  }
  std::vector<double> scores(ix.size());
  kernels::matmul_bt(query.data(), ix.matrix.data(), scores.data(), 1, ix.dim(), ix.size());
  std::vector<std::size_t> order(ix.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ix.entries[a].id < ix.entries[b].id;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  QueryResult r;
  r.k = k;
  for (std::size_t i = 0; i < k; ++i) r.hits.push_back({ix.entries[order[i]].id, order[i], scores[order[i]]});
  return r;
}

// Embeds the query through the same encode() path the index used.
inline std::vector<double> embed_query(const Model& model, const Vocab& vocab, const std::string& text,
                                       std::size_t max_text_tokens) {
  const std::size_t budget = sequence_budget(model.base.config, model.adapter_ptr(), max_text_tokens);
  const auto ids = vocab.encode(tokenize(text, TokenMode::kText), budget);
  require(!ids.empty(), ErrorKind::kData, "query has no tokens");
  return encode(model.base, ids, model.adapter_ptr());
}

inline QueryResult search(const EmbeddingIndex& ix, const Model& model, const Vocab& vocab, const std::string& text,
                          std::size_t k) {
  return search(ix, embed_query(model, vocab, text, ix.max_text_tokens()), k);
}

// Retrieved snippets in rank order as "### <id> (<lang>)\n<code>\n" blocks,
// cut so the whole block holds at most budget_tokens tokens.
inline std::string export_context(const EmbeddingIndex& ix, const QueryResult& result, std::size_t budget_tokens) {
  std::string out;
  std::size_t used = 0;
  for (std::size_t i = 0; i < result.hits.size(); ++i) {
    const IndexEntry& e = ix.entries.at(result.hits[i].row);
    const std::string header = "### " + e.id + " (" + e.lang + ")\n";
    const std::size_t header_tokens = count_tokens(header), code_tokens = count_tokens(e.code);
    if (used + header_tokens + code_tokens <= budget_tokens) {
      out += header + e.code + "\n";
      used += header_tokens + code_tokens;
      continue;
    }
    if (i == 0) {
      diagnostic("export_context: budget of " + std::to_string(budget_tokens) +
                 " tokens is smaller than the first snippet, truncating it");
      const std::size_t room = budget_tokens > header_tokens ? budget_tokens - header_tokens : 0;
      if (header_tokens <= budget_tokens) out += header + truncate_tokens(e.code, room) + "\n";
    }
    break;
  }
  return out;
}

}  // namespace codesearch
