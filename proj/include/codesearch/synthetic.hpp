// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codesearch/data.hpp"
#include "codesearch/random.hpp"

namespace codesearch {

// Seeded text/code corpus. Every pair carries a distinct signature of concept
// tokens that appear on both sides, buried in modality-specific filler so a
// random encoder only partially separates the pairs.
struct SyntheticConfig {
  std::size_t pairs = 512;
  std::size_t concepts = 150;
  std::size_t concept_offset = 0;  // first concept token index; disjoint corpora use disjoint ranges
  std::size_t signature = 3;     // concept tokens per pair
  std::size_t text_filler = 12;  // filler tokens per text
  std::size_t code_filler = 16;  // filler tokens per code
  std::uint64_t seed = 7;
  std::string lang = "synth";
  std::string id_prefix = "syn";

  nlohmann::json to_json() const {
    return {{"pairs", pairs},         {"concepts", concepts}, {"concept_offset", concept_offset}, {"signature", signature},
            {"text_filler", text_filler}, {"code_filler", code_filler}, {"seed", seed},
            {"lang", lang},           {"id_prefix", id_prefix}};
  }

  static SyntheticConfig from_json(const nlohmann::json& j) {
    SyntheticConfig c;
    c.pairs = j.value("pairs", c.pairs);
    c.concepts = j.value("concepts", c.concepts);
    c.concept_offset = j.value("concept_offset", c.concept_offset);
    c.signature = j.value("signature", c.signature);
    c.text_filler = j.value("text_filler", c.text_filler);
    c.code_filler = j.value("code_filler", c.code_filler);
    c.seed = j.value("seed", c.seed);
    c.lang = j.value("lang", c.lang);
    c.id_prefix = j.value("id_prefix", c.id_prefix);
    return c;
  }
};

namespace detail {

inline constexpr std::array<const char*, 20> kTextFiller{
    "returns", "the",   "given", "value", "of",    "a",     "list",  "for",   "each",  "item",
    "and",     "from",  "into",  "with",  "new",   "this",  "check", "if",    "is",    "by"};

inline constexpr std::array<const char*, 20> kCodeFiller{
    "def",  "return", "self", "x",    "y",     "i",    "if",   "else", "for",  "in",
    "None", "True",   "len",  "(",    ")",     ":",    "=",    ".",    "[",    "]"};

inline std::string concept_token(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "k%03zu", i);
  return buf;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string s;
  for (const auto& t : tokens) {
    if (!s.empty()) s += ' ';
    s += t;
  }
  return s;
}

}  // namespace detail

inline std::vector<PairRecord> synthesize(const SyntheticConfig& config) {
  require(config.signature >= 1 && config.signature <= config.concepts, ErrorKind::kConfig,
          "signature size must lie in [1, concepts]");
  require(config.pairs >= 1, ErrorKind::kConfig, "need at least one pair");
  Rng rng(config.seed);
  std::set<std::vector<std::size_t>> used;
  std::vector<PairRecord> out;
  std::size_t attempts = 0;
  while (out.size() < config.pairs) {
    require(++attempts < 100 * config.pairs + 1000, ErrorKind::kConfig, "cannot draw enough distinct signatures");
    std::vector<std::size_t> sig;
    while (sig.size() < config.signature) {
      const std::size_t c = rng.below(config.concepts);
      if (std::find(sig.begin(), sig.end(), c) == sig.end()) sig.push_back(c);
    }
    std::vector<std::size_t> key = sig;
    std::sort(key.begin(), key.end());
    if (!used.insert(key).second) continue;

    auto side = [&](const auto& filler, std::size_t n_filler) {
      std::vector<std::string> tokens;
      for (std::size_t i = 0; i < n_filler; ++i) tokens.emplace_back(filler[rng.below(filler.size())]);
      for (std::size_t c : sig) tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(rng.below(tokens.size() + 1)),
                                              detail::concept_token(config.concept_offset + c));
      return detail::join_tokens(tokens);
    };
    PairRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "-%04zu", out.size());
    r.id = config.id_prefix + id;
    r.text = side(detail::kTextFiller, config.text_filler);
    r.code = side(detail::kCodeFiller, config.code_filler);
    r.lang = config.lang;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace codesearch
