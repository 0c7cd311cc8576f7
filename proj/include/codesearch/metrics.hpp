// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codesearch/peft.hpp"
#include "codesearch/tensor.hpp"

namespace codesearch {

// ---------------------------------------------------------------------------
// Mean reciprocal rank

// 1 + number of candidates scoring strictly higher than the match. Ties go to
// the match.
inline std::size_t rank_of_match(std::size_t i, std::span<const double> scores) {
  require(i < scores.size(), ErrorKind::kIndex, "match index outside score row");
  const double target = scores[i];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (j != i && scores[j] > target) ++rank;
  return rank;
}

inline std::size_t rank_of_match(std::size_t i, const Tensor& s) {
  require(s.shape().size() == 2 && s.rows() == s.cols(), ErrorKind::kDimension, "rank_of_match needs a square matrix");
  return rank_of_match(i, s.row(i));
}

enum class MrrProtocol { kAllPairs, kChunked };

inline const char* to_string(MrrProtocol p) { return p == MrrProtocol::kAllPairs ? "all-pairs" : "chunked"; }

inline MrrProtocol parse_protocol(const std::string& s) {
  if (s == "all-pairs") return MrrProtocol::kAllPairs;
  if (s == "chunked") return MrrProtocol::kChunked;
  fail(ErrorKind::kConfig, "unknown MRR protocol '" + s + "' (expected all-pairs|chunked)");
}

// How all-pairs MRR treats a query whose match ranks beyond the cutoff:
// contribute 0 to the mean (default), or leave the mean altogether.
enum class CutoffRule { kZero, kExclude };

struct MrrReport {
  MrrProtocol protocol = MrrProtocol::kAllPairs;
  std::size_t cutoff = 0;      // all-pairs only
  std::size_t chunk_size = 0;  // chunked only
  CutoffRule cutoff_rule = CutoffRule::kZero;
  std::vector<std::size_t> ranks;  // per evaluated query, in dataset order
  double mrr = 0.0;
  std::size_t n_evaluated = 0;

  // Recomputes mrr from ranks under the report's own protocol.
  double recompute() const {
    if (protocol == MrrProtocol::kChunked) {
      const std::size_t chunks = ranks.size() / chunk_size;
      double total = 0.0;
      for (std::size_t c = 0; c < chunks; ++c) {
        double sum = 0.0;
        for (std::size_t i = 0; i < chunk_size; ++i) sum += 1.0 / static_cast<double>(ranks[c * chunk_size + i]);
        total += sum / static_cast<double>(chunk_size);
      }
      return total / static_cast<double>(chunks);
    }
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t r : ranks) {
      if (r <= cutoff) {
        sum += 1.0 / static_cast<double>(r);
        ++counted;
      } else if (cutoff_rule == CutoffRule::kZero) {
        ++counted;
      }
    }
    return counted ? sum / static_cast<double>(counted) : 0.0;
  }

  nlohmann::json to_json(bool with_ranks = false) const {
    nlohmann::json j;
    j["protocol"] = to_string(protocol);
    j["cutoff"] = protocol == MrrProtocol::kAllPairs ? nlohmann::json(cutoff) : nlohmann::json(nullptr);
    j["chunk_size"] = protocol == MrrProtocol::kChunked ? nlohmann::json(chunk_size) : nlohmann::json(nullptr);
    j["n_evaluated"] = n_evaluated;
    j["mrr"] = mrr;
    if (with_ranks) j["ranks"] = ranks;
    return j;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::left << std::setw(12) << "protocol" << to_string(protocol) << '\n';
    if (protocol == MrrProtocol::kAllPairs)
      os << std::setw(12) << "cutoff" << cutoff << (cutoff_rule == CutoffRule::kExclude ? " (exclude)" : "") << '\n';
    else
      os << std::setw(12) << "chunk_size" << chunk_size << '\n';
    os << std::setw(12) << "n_evaluated" << n_evaluated << '\n';
    os << std::setw(12) << "mrr" << std::fixed << std::setprecision(6) << mrr << '\n';
    return os.str();
  }
};

namespace detail {

inline void check_embedding_sets(const Tensor& code, const Tensor& text) {
  require(code.shape().size() == 2 && code.shape() == text.shape(), ErrorKind::kDimension,
          "code and text embeddings must have equal shapes");
  require(code.rows() >= 1, ErrorKind::kData, "no pairs to evaluate");
}

// Ranks of code_i for query text_i, i in [begin, end), against codes of the
// same range.
inline std::vector<std::size_t> ranks_in_range(const Tensor& code, const Tensor& text, std::size_t begin, std::size_t end) {
  const std::size_t n = end - begin, d = code.cols();
  std::vector<std::size_t> ranks(n);
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    kernels::matmul_bt(text.data() + (begin + i) * d, code.data() + begin * d, row.data(), 1, d, n);
    ranks[i] = rank_of_match(i, row);
  }
  return ranks;
}

}  // namespace detail

// Text->code MRR over the whole pool; queries are the text rows.
inline MrrReport mrr_all_pairs(const Tensor& code, const Tensor& text, std::size_t cutoff = 1000,
                               CutoffRule rule = CutoffRule::kZero) {
  detail::check_embedding_sets(code, text);
  require(cutoff >= 1, ErrorKind::kConfig, "cutoff must be at least 1");
  MrrReport r;
  r.protocol = MrrProtocol::kAllPairs;
  r.cutoff = cutoff;
  r.cutoff_rule = rule;
  r.ranks = detail::ranks_in_range(code, text, 0, code.rows());
  r.mrr = r.recompute();
  r.n_evaluated = rule == CutoffRule::kZero
                      ? r.ranks.size()
                      : static_cast<std::size_t>(std::count_if(r.ranks.begin(), r.ranks.end(),
                                                               [&](std::size_t k) { return k <= cutoff; }));
  return r;
}

// Consecutive chunks in dataset order, each ranked only against itself; a
// trailing partial chunk is discarded.
inline MrrReport mrr_chunked(const Tensor& code, const Tensor& text, std::size_t chunk = 1000) {
  detail::check_embedding_sets(code, text);
  require(chunk >= 1, ErrorKind::kConfig, "chunk size must be at least 1");
  require(code.rows() >= chunk, ErrorKind::kData,
          "chunked MRR needs at least one full chunk: " + std::to_string(code.rows()) + " pairs < chunk size " +
              std::to_string(chunk));
  MrrReport r;
  r.protocol = MrrProtocol::kChunked;
  r.chunk_size = chunk;
  const std::size_t chunks = code.rows() / chunk;
  for (std::size_t c = 0; c < chunks; ++c) {
    auto ranks = detail::ranks_in_range(code, text, c * chunk, (c + 1) * chunk);
    r.ranks.insert(r.ranks.end(), ranks.begin(), ranks.end());
  }
  r.n_evaluated = chunks * chunk;
  r.mrr = r.recompute();
  return r;
}

// ---------------------------------------------------------------------------
// ROUGE

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  static RougeScore from_counts(double overlap, double candidate_total, double reference_total) {
    RougeScore s;
    s.precision = candidate_total > 0 ? overlap / candidate_total : 0.0;
    s.recall = reference_total > 0 ? overlap / reference_total : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
  }

  nlohmann::json to_json() const { return {{"precision", precision}, {"recall", recall}, {"f1", f1}}; }
};

struct RougeReport {
  RougeScore rouge1, rouge2, rougeL;

  nlohmann::json to_json() const {
    return {{"rouge1", rouge1.to_json()}, {"rouge2", rouge2.to_json()}, {"rougeL", rougeL.to_json()}};
  }
};

enum class RougeVariant { kOne, kTwo, kL };

namespace detail {

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& tokens, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

inline RougeScore rouge(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                        RougeVariant variant) {
  if (candidate.empty() && reference.empty()) {
    diagnostic("rouge: candidate and reference are both empty");
    return {};
  }
  if (variant == RougeVariant::kL) {
    const auto lcs = static_cast<double>(detail::lcs_length(candidate, reference));
    return RougeScore::from_counts(lcs, static_cast<double>(candidate.size()), static_cast<double>(reference.size()));
  }
  const std::size_t n = variant == RougeVariant::kOne ? 1 : 2;
  const auto cand = detail::ngram_counts(candidate, n);
  const auto ref = detail::ngram_counts(reference, n);
  std::size_t overlap = 0, cand_total = 0, ref_total = 0;
  for (const auto& [gram, c] : cand) {
    cand_total += c;
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  for (const auto& [gram, c] : ref) ref_total += c;
  return RougeScore::from_counts(static_cast<double>(overlap), static_cast<double>(cand_total),
                                 static_cast<double>(ref_total));
}

inline RougeReport rouge(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  return {rouge(candidate, reference, RougeVariant::kOne), rouge(candidate, reference, RougeVariant::kTwo),
          rouge(candidate, reference, RougeVariant::kL)};
}

// Mean of per-pair scores.
inline RougeReport rouge_corpus(const std::vector<std::vector<std::string>>& candidates,
                                const std::vector<std::vector<std::string>>& references) {
  require(candidates.size() == references.size(), ErrorKind::kData, "candidate and reference counts differ");
  require(!candidates.empty(), ErrorKind::kData, "no candidates to score");
  RougeReport mean;
  auto acc = [](RougeScore& into, const RougeScore& s) {
    into.precision += s.precision;
    into.recall += s.recall;
    into.f1 += s.f1;
  };
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const RougeReport r = rouge(candidates[i], references[i]);
    acc(mean.rouge1, r.rouge1);
    acc(mean.rouge2, r.rouge2);
    acc(mean.rougeL, r.rougeL);
  }
  const auto n = static_cast<double>(candidates.size());
  for (RougeScore* s : {&mean.rouge1, &mean.rouge2, &mean.rougeL}) {
    s->precision /= n;
    s->recall /= n;
    s->f1 /= n;
  }
  return mean;
}

// ---------------------------------------------------------------------------
// Trainable-parameter audit

inline constexpr double kAuditBaseParameters = 110'000'000.0;

struct AuditRow {
  std::string method;
  std::size_t trainable = 0;
  double percent = 0.0;  // of kAuditBaseParameters
};

struct AuditConfigs {
  AdaLoraConfig adalora{};
  LoraConfig lora{};
  Ia3Config ia3{};
  PromptConfig prompt{};
};

inline std::vector<AuditRow> audit(const EncoderConfig& enc, const AuditConfigs& configs = {}) {
  auto row = [](const char* name, std::size_t n) { return AuditRow{name, n, 100.0 * static_cast<double>(n) / kAuditBaseParameters}; };
  return {row("adalora", count_trainable(configs.adalora, enc)), row("lora", count_trainable(configs.lora, enc)),
          row("ia3", count_trainable(configs.ia3, enc)), row("prompt", count_trainable(configs.prompt, enc))};
}

inline std::string group_thousands(std::size_t n) {
  std::string digits = std::to_string(n), out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

inline std::string audit_report(const EncoderConfig& enc, const AuditConfigs& configs = {}) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "method" << std::right << std::setw(12) << "tunable #" << std::setw(12)
     << "tunable %" << '\n';
  for (const auto& r : audit(enc, configs)) {
    char pct[32];
    std::snprintf(pct, sizeof pct, "%.3f", r.percent);
    os << std::left << std::setw(10) << r.method << std::right << std::setw(12) << group_thousands(r.trainable)
       << std::setw(12) << pct << '\n';
  }
  return os.str();
}

inline nlohmann::json audit_json(const EncoderConfig& enc, const AuditConfigs& configs = {}) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : audit(enc, configs))
    rows.push_back({{"method", r.method}, {"trainable", r.trainable}, {"percent", r.percent}});
  return {{"base_parameters", static_cast<std::size_t>(kAuditBaseParameters)}, {"encoder", enc.to_json()}, {"rows", rows}};
}

}  // namespace codesearch
