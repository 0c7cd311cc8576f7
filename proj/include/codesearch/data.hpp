// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "codesearch/error.hpp"
#include "codesearch/random.hpp"

namespace codesearch {

struct PairRecord {
  std::string id;
  std::string text;
  std::string code;
  std::string lang;

  friend bool operator==(const PairRecord&, const PairRecord&) = default;
};

// ---------------------------------------------------------------------------
// JSON Lines I/O. One object per line with keys id/text/code/lang.

inline PairRecord parse_record(std::string_view line, std::size_t line_no = 0) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, "line " + std::to_string(line_no) + ": " + e.what());
  }
  PairRecord r;
  const std::array<std::pair<const char*, std::string*>, 4> fields{
      {{"id", &r.id}, {"text", &r.text}, {"code", &r.code}, {"lang", &r.lang}}};
  for (auto [key, field] : fields) {
    require(j.contains(key) && j[key].is_string(), ErrorKind::kData,
            "line " + std::to_string(line_no) + ": missing string field '" + key + "'");
    *field = j[key].get<std::string>();
  }
  return r;
}

inline std::string record_to_json(const PairRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["text"] = r.text;
  j["code"] = r.code;
  j["lang"] = r.lang;
  return j.dump();
}

// Byte range [begin, end) of a record's line within its file.
struct ByteSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline std::vector<PairRecord> read_jsonl(std::istream& in, std::vector<ByteSpan>* spans = nullptr) {
  std::vector<PairRecord> out;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t line_no = 0, offset = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t begin = offset;
    offset += line.size() + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    PairRecord r = parse_record(line, line_no);
    require(ids.insert(r.id).second, ErrorKind::kData, "duplicate id '" + r.id + "'");
    out.push_back(std::move(r));
    if (spans) spans->push_back({begin, begin + line.size()});
  }
  return out;
}

inline std::vector<PairRecord> read_jsonl(const std::string& path, std::vector<ByteSpan>* spans = nullptr) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kIo, "cannot read " + path);
  return read_jsonl(in, spans);
}

inline void write_jsonl(std::ostream& out, const std::vector<PairRecord>& records) {
  for (const auto& r : records) out << record_to_json(r) << '\n';
}

inline void write_jsonl(const std::string& path, const std::vector<PairRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::kIo, "cannot write " + path);
  write_jsonl(out, records);
}

// ---------------------------------------------------------------------------
// Tokenizer: whitespace and ASCII punctuation boundaries, punctuation
// characters are tokens of their own. Bytes >= 0x80 belong to words so UTF-8
// sequences stay intact.

enum class TokenMode { kText, kCode };

struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

inline std::vector<TokenSpan> token_spans(std::string_view s) {
  std::vector<TokenSpan> spans;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c < 0x80 && std::isspace(c)) {
      ++i;
    } else if (c < 0x80 && std::ispunct(c)) {
      spans.push_back({i, i + 1});
      ++i;
    } else {
      const std::size_t start = i;
      while (i < s.size()) {
        const auto d = static_cast<unsigned char>(s[i]);
        if (d < 0x80 && (std::isspace(d) || std::ispunct(d))) break;
        ++i;
      }
      spans.push_back({start, i});
    }
  }
  return spans;
}

inline std::vector<std::string> tokenize(std::string_view s, TokenMode mode) {
  std::vector<std::string> tokens;
  for (const auto& sp : token_spans(s)) {
    std::string t(s.substr(sp.begin, sp.end - sp.begin));
    if (mode == TokenMode::kText)
      for (char& ch : t)
        if (static_cast<unsigned char>(ch) < 0x80) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    tokens.push_back(std::move(t));
  }
  return tokens;
}

inline std::size_t count_tokens(std::string_view s) { return token_spans(s).size(); }

// Prefix of s holding its first max_tokens tokens (s itself if shorter).
inline std::string truncate_tokens(std::string_view s, std::size_t max_tokens) {
  const auto spans = token_spans(s);
  if (spans.size() <= max_tokens) return std::string(s);
  if (max_tokens == 0) return {};
  return std::string(s.substr(0, spans[max_tokens - 1].end));
}

// ---------------------------------------------------------------------------
// English heuristic: at least 90% of the alphabetic characters must be ASCII
// letters. Non-ASCII code points count as letters unless they fall in the
// Latin-1 symbol block or the general punctuation / symbol / CJK punctuation
// ranges. Text with no letters at all is rejected.

struct LetterCounts {
  std::size_t ascii = 0;
  std::size_t other = 0;
};

inline LetterCounts count_letters(std::string_view s) {
  LetterCounts counts;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) {
      if (std::isalpha(c)) ++counts.ascii;
      ++i;
      continue;
    }
    std::size_t len = 1;
    std::uint32_t cp = 0;
    if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      ++i;  // stray continuation byte
      continue;
    }
    for (std::size_t k = 1; k < len && i + k < s.size(); ++k)
      cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    i += len;
    const bool symbol = cp < 0xC0 || cp == 0xD7 || cp == 0xF7 || (cp >= 0x2000 && cp <= 0x2BFF) ||
                        (cp >= 0x3000 && cp <= 0x303F) || (cp >= 0xFF00 && cp <= 0xFF0F) || cp >= 0x1F000;
    if (!symbol) ++counts.other;
  }
  return counts;
}

inline constexpr double kEnglishAsciiLetterShare = 0.9;

inline bool looks_english(std::string_view text) {
  const auto counts = count_letters(text);
  const std::size_t total = counts.ascii + counts.other;
  if (total == 0) return false;
  return static_cast<double>(counts.ascii) >= kEnglishAsciiLetterShare * static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Filtering

struct FilterConfig {
  std::size_t min_tokens = 3;
  std::size_t max_text_tokens = 256;
  std::size_t max_code_tokens = 256;
};

struct FilterReport {
  std::size_t input = 0;
  std::size_t short_text = 0;
  std::size_t short_code = 0;
  std::size_t non_english = 0;
  std::size_t kept = 0;
  std::size_t truncated_text = 0;
  std::size_t truncated_code = 0;

  std::string to_text() const {
    std::ostringstream os;
    os << "input " << input << '\n'
       << "dropped_short_text " << short_text << '\n'
       << "dropped_short_code " << short_code << '\n'
       << "dropped_non_english " << non_english << '\n'
       << "kept " << kept << '\n'
       << "truncated_text " << truncated_text << '\n'
       << "truncated_code " << truncated_code << '\n';
    return os.str();
  }
};

struct FilterResult {
  std::vector<PairRecord> records;
  FilterReport report;
};

// Drops pairs with a side shorter than min_tokens or a non-English text side,
// then truncates survivors to the max lengths. Output order follows input.
inline FilterResult filter_pairs(const std::vector<PairRecord>& records, const FilterConfig& config = {}) {
  require(config.min_tokens <= config.max_text_tokens && config.min_tokens <= config.max_code_tokens,
          ErrorKind::kConfig, "min_tokens exceeds a maximum length");
  FilterResult result;
  result.report.input = records.size();
  for (const auto& r : records) {
    const std::size_t nt = count_tokens(r.text);
    const std::size_t nc = count_tokens(r.code);
    if (nt < config.min_tokens) {
      ++result.report.short_text;
      continue;
    }
    if (nc < config.min_tokens) {
      ++result.report.short_code;
      continue;
    }
    if (!looks_english(r.text)) {
      ++result.report.non_english;
      continue;
    }
    PairRecord kept = r;
    if (nt > config.max_text_tokens) {
      kept.text = truncate_tokens(r.text, config.max_text_tokens);
      ++result.report.truncated_text;
    }
    if (nc > config.max_code_tokens) {
      kept.code = truncate_tokens(r.code, config.max_code_tokens);
      ++result.report.truncated_code;
    }
    result.records.push_back(std::move(kept));
  }
  result.report.kept = result.records.size();
  return result;
}

inline std::vector<PairRecord> filter_lang(const std::vector<PairRecord>& records, const std::string& lang) {
  std::vector<PairRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [&](const PairRecord& r) { return r.lang == lang; });
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kBos = 2;
  static constexpr std::int32_t kEos = 3;
  static constexpr std::size_t kReserved = 4;

  Vocab() : tokens_{"<pad>", "<unk>", "<bos>", "<eos>"} { reindex(); }

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    require(tokens_.size() >= kReserved && tokens_[0] == "<pad>" && tokens_[1] == "<unk>" && tokens_[2] == "<bos>" &&
                tokens_[3] == "<eos>",
            ErrorKind::kData, "vocab must start with the four reserved tokens");
    reindex();
    require(index_.size() == tokens_.size(), ErrorKind::kData, "vocab has duplicate tokens");
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::int32_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  std::vector<std::int32_t> encode(const std::vector<std::string>& tokens, std::size_t max_len = SIZE_MAX) const {
    std::vector<std::int32_t> ids;
    for (std::size_t i = 0; i < tokens.size() && i < max_len; ++i) ids.push_back(id(tokens[i]));
    return ids;
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("");
    for (const auto& t : tokens_) {
      h = fnv1a(t, h);
      h = fnv1a("\n", h);
    }
    return h;
  }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) out += t + '\n';
    return out;
  }

  static Vocab parse(std::istream& in) {
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return Vocab(std::move(tokens));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::kIo, "cannot write " + path);
    out << serialize();
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::kIo, "cannot read " + path);
    return parse(in);
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<std::int32_t>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

// Tokens of both sides ranked by frequency, then lexicographically.
inline Vocab build_vocab(const std::vector<PairRecord>& corpus, std::size_t max_size, std::size_t min_freq = 1) {
  require(max_size >= Vocab::kReserved + 1, ErrorKind::kConfig, "vocab max_size must be at least 5");
  require(!corpus.empty(), ErrorKind::kData, "cannot build a vocab from an empty corpus");
  std::map<std::string, std::size_t> freq;
  for (const auto& r : corpus) {
    for (auto& t : tokenize(r.text, TokenMode::kText)) ++freq[t];
    for (auto& t : tokenize(r.code, TokenMode::kCode)) ++freq[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, n] : freq)
    if (n >= std::max<std::size_t>(min_freq, 1)) ranked.emplace_back(tok, n);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{"<pad>", "<unk>", "<bos>", "<eos>"};
  for (auto& [tok, n] : ranked) {
    if (tokens.size() >= max_size) break;
    if (tok == "<pad>" || tok == "<unk>" || tok == "<bos>" || tok == "<eos>") continue;
    tokens.push_back(tok);
  }
  return Vocab(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Splits

struct Splits {
  std::vector<PairRecord> train;
  std::vector<PairRecord> valid;
  std::vector<PairRecord> test;
};

inline Splits split_dataset(const std::vector<PairRecord>& records, std::array<double, 3> ratios, std::uint64_t seed) {
  double total = 0.0;
  std::size_t nonzero = 0;
  for (double r : ratios) {
    require(r >= 0.0, ErrorKind::kConfig, "split ratios must be non-negative");
    total += r;
    nonzero += r > 0.0;
  }
  require(std::abs(total - 1.0) < 1e-9, ErrorKind::kConfig, "split ratios must sum to 1");
  require(records.size() >= nonzero, ErrorKind::kData,
          "fewer records (" + std::to_string(records.size()) + ") than splits (" + std::to_string(nonzero) + ")");

  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);

  const auto n = static_cast<double>(records.size());
  const auto n_train = std::min<std::size_t>(records.size(), static_cast<std::size_t>(std::llround(ratios[0] * n)));
  const auto n_valid =
      std::min<std::size_t>(records.size() - n_train, static_cast<std::size_t>(std::llround(ratios[1] * n)));
  Splits s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < n_train ? s.train : (i < n_train + n_valid ? s.valid : s.test);
    dst.push_back(records[order[i]]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Batching

// rows x cols id matrix padded with PAD; mask is 1 exactly on non-PAD ids.
struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;

  static TokenMatrix pack(const std::vector<std::vector<std::int32_t>>& seqs) {
    TokenMatrix m;
    m.rows = seqs.size();
    for (const auto& s : seqs) m.cols = std::max(m.cols, s.size());
    m.cols = std::max<std::size_t>(m.cols, 1);
    m.ids.assign(m.rows * m.cols, Vocab::kPad);
    m.mask.assign(m.rows * m.cols, 0);
    for (std::size_t r = 0; r < seqs.size(); ++r)
      for (std::size_t c = 0; c < seqs[r].size(); ++c) {
        m.ids[r * m.cols + c] = seqs[r][c];
        m.mask[r * m.cols + c] = seqs[r][c] != Vocab::kPad;
      }
    return m;
  }

  std::vector<std::int32_t> row(std::size_t r) const {
    return {ids.begin() + static_cast<std::ptrdiff_t>(r * cols), ids.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols)};
  }
};

struct EncodedPair {
  std::vector<std::int32_t> text;
  std::vector<std::int32_t> code;
};

inline EncodedPair encode_pair(const PairRecord& r, const Vocab& vocab, std::size_t max_text, std::size_t max_code) {
  return {vocab.encode(tokenize(r.text, TokenMode::kText), max_text),
          vocab.encode(tokenize(r.code, TokenMode::kCode), max_code)};
}

inline std::vector<EncodedPair> encode_pairs(const std::vector<PairRecord>& records, const Vocab& vocab,
                                             std::size_t max_text, std::size_t max_code) {
  std::vector<EncodedPair> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(encode_pair(r, vocab, max_text, max_code));
  return out;
}

struct Batch {
  std::vector<std::size_t> indices;  // positions in the split
  TokenMatrix text;
  TokenMatrix code;
};

inline Batch make_batch(const std::vector<EncodedPair>& pairs, const std::vector<std::size_t>& indices) {
  std::vector<std::vector<std::int32_t>> text, code;
  for (std::size_t i : indices) {
    text.push_back(pairs.at(i).text);
    code.push_back(pairs.at(i).code);
  }
  return {indices, TokenMatrix::pack(text), TokenMatrix::pack(code)};
}

// One epoch of batches. The order is reshuffled per (seed, epoch); each batch
// is padded to its own longest sequence.
inline std::vector<Batch> make_batches(const std::vector<EncodedPair>& pairs, std::size_t batch_size, std::uint64_t seed,
                                       std::uint64_t epoch = 0, bool drop_last = true) {
  require(batch_size >= 2, ErrorKind::kConfig, "batch size must be at least 2 for in-batch negatives");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, epoch));
  rng.shuffle(order);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (end - start < batch_size && drop_last) break;
    batches.push_back(make_batch(pairs, {order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end)}));
  }
  return batches;
}

}  // namespace codesearch
