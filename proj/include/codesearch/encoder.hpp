// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codesearch/autograd.hpp"
#include "codesearch/data.hpp"
#include "codesearch/ops.hpp"
#include "codesearch/random.hpp"

namespace codesearch {

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 256;
  std::size_t max_len = 64;
  std::size_t d_emb = 32;

  // Shape of the 110M-parameter code/text embedding model the audit counts
  // refer to.
  static EncoderConfig audit_profile() {
    return {.layers = 12, .d_model = 768, .heads = 12, .d_ff = 3072, .vocab_size = 32103, .max_len = 512, .d_emb = 256};
  }

  void validate() const {
    require(layers >= 1 && d_model >= 1 && heads >= 1 && d_ff >= 1 && vocab_size > Vocab::kReserved && max_len >= 1 &&
                d_emb >= 1,
            ErrorKind::kConfig, "encoder extents must be positive");
    require(d_model % heads == 0, ErrorKind::kConfig, "d_model must be divisible by the number of heads");
    require(d_emb <= d_model, ErrorKind::kConfig, "d_emb must not exceed d_model");
  }

  // Sum of the declared parameter shapes.
  std::size_t parameter_count() const {
    return vocab_size * d_model + max_len * d_model + layers * (4 * d_model * d_model + 2 * d_model * d_ff + 4 * d_model) +
           d_model * d_emb;
  }

  nlohmann::json to_json() const {
    return {{"layers", layers}, {"d_model", d_model}, {"heads", heads},   {"d_ff", d_ff},
            {"vocab_size", vocab_size}, {"max_len", max_len}, {"d_emb", d_emb}};
  }

  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.layers = j.value("layers", c.layers);
    c.d_model = j.value("d_model", c.d_model);
    c.heads = j.value("heads", c.heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_len = j.value("max_len", c.max_len);
    c.d_emb = j.value("d_emb", c.d_emb);
    return c;
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct LayerWeights {
  Parameter q, k, v, o;       // d_model x d_model
  Parameter ff_in, ff_out;    // d_model x d_ff, d_ff x d_model
  Parameter ln1_gain, ln1_bias, ln2_gain, ln2_bias;  // d_model
};

// Owns the base parameters. Move-only: copying would alias graph leaves, use
// clone() for an independent copy.
class EncoderWeights {
 public:
  EncoderWeights() = default;
  EncoderWeights(EncoderWeights&&) = default;
  EncoderWeights& operator=(EncoderWeights&&) = default;
  EncoderWeights(const EncoderWeights&) = delete;
  EncoderWeights& operator=(const EncoderWeights&) = delete;

  EncoderConfig config;
  Parameter token_embedding;     // vocab_size x d_model
  Parameter position_embedding;  // max_len x d_model
  std::vector<LayerWeights> layers;
  Parameter projection;  // d_model x d_emb

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&token_embedding, &position_embedding};
    for (auto& l : layers)
      for (Parameter* p : {&l.q, &l.k, &l.v, &l.o, &l.ff_in, &l.ff_out, &l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias})
        out.push_back(p);
    out.push_back(&projection);
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<EncoderWeights*>(this)->parameters()) out.push_back(p);
    return out;
  }

  void set_trainable(bool on) {
    for (Parameter* p : parameters()) p->set_trainable(on);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Parameter* p : parameters()) n += p->size();
    return n;
  }

  EncoderWeights clone() const {
    EncoderWeights w;
    w.config = config;
    w.token_embedding = token_embedding.clone();
    w.position_embedding = position_embedding.clone();
    for (const auto& l : layers)
      w.layers.push_back({l.q.clone(), l.k.clone(), l.v.clone(), l.o.clone(), l.ff_in.clone(), l.ff_out.clone(),
                          l.ln1_gain.clone(), l.ln1_bias.clone(), l.ln2_gain.clone(), l.ln2_bias.clone()});
    w.projection = projection.clone();
    return w;
  }

  // Hash of every value's bytes in parameter order.
  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a(config.to_json().dump());
    for (const Parameter* p : parameters()) {
      h = fnv1a(p->id, h);
      const auto& v = p->value();
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)), h);
    }
    return h;
  }

  Parameter* find(const std::string& id) {
    for (Parameter* p : parameters())
      if (p->id == id) return p;
    return nullptr;
  }
};

inline EncoderWeights init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.d_model;
  auto normal = [&](const std::string& id, Shape shape) {
    Tensor t(std::move(shape));
    for (double& x : t.values()) x = rng.normal(0.0, 0.02);
    return Parameter(id, std::move(t), false);
  };
  auto constant_vec = [&](const std::string& id, double v) { return Parameter(id, Tensor({d}, v), false); };

  EncoderWeights w;
  w.config = config;
  w.token_embedding = normal("embed.token", {config.vocab_size, d});
  w.position_embedding = normal("embed.position", {config.max_len, d});
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    w.layers.push_back({normal(p + "attn.q", {d, d}), normal(p + "attn.k", {d, d}), normal(p + "attn.v", {d, d}),
                        normal(p + "attn.o", {d, d}), normal(p + "ff.in", {d, config.d_ff}),
                        normal(p + "ff.out", {config.d_ff, d}), constant_vec(p + "ln1.gain", 1.0),
                        constant_vec(p + "ln1.bias", 0.0), constant_vec(p + "ln2.gain", 1.0),
                        constant_vec(p + "ln2.bias", 0.0)});
  }
  w.projection = normal("head.projection", {d, config.d_emb});
  return w;
}

// ---------------------------------------------------------------------------
// Adapter hooks

enum class Projection { kQuery, kKey, kValue, kOutput };

inline const char* to_string(Projection p) {
  switch (p) {
    case Projection::kQuery: return "q";
    case Projection::kKey: return "k";
    case Projection::kValue: return "v";
    case Projection::kOutput: return "o";
  }
  return "?";
}

enum class Method { kNone, kFull, kLora, kAdaLora, kIa3, kPrompt };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::kNone: return "none";
    case Method::kFull: return "full";
    case Method::kLora: return "lora";
    case Method::kAdaLora: return "adalora";
    case Method::kIa3: return "ia3";
    case Method::kPrompt: return "prompt";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::kNone, Method::kFull, Method::kLora, Method::kAdaLora, Method::kIa3, Method::kPrompt})
    if (s == to_string(m)) return m;
  fail(ErrorKind::kConfig, "unknown method '" + s + "' (expected none|full|lora|adalora|ia3|prompt)");
}

// Trainable attachment to a frozen encoder. The encoder routes every
// attention projection through project() and prepends prompt() rows, if any,
// to the embedded sequence.
class Adapter {
 public:
  virtual ~Adapter() = default;
  virtual Method method() const = 0;

  virtual Var project(std::size_t /*layer*/, Projection /*which*/, const Var& x, const Var& w) const {
    return matmul(x, w);
  }

  virtual std::optional<Var> prompt() const { return std::nullopt; }

  virtual std::vector<Parameter*> parameters() = 0;

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<Adapter*>(this)->parameters()) out.push_back(p);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const Parameter* p : parameters()) n += p->size();
    return n;
  }

  // Extra loss terms (AdaLoRA orthogonality); undefined Var when none.
  virtual Var regularizer() const { return {}; }
};

// ---------------------------------------------------------------------------
// Forward pass

inline std::size_t prompt_length(const Adapter* adapter) {
  if (!adapter) return 0;
  auto p = adapter->prompt();
  return p ? p->rows() : 0;
}

struct PromptedSequence {
  Var rows;                        // seqs*(m+len) x d
  std::vector<std::uint8_t> mask;  // attention mask, prompt rows included
  std::vector<std::uint8_t> pool;  // pooling mask, prompt rows excluded
};

// Prepends the prompt rows to every embedded sequence. A null prompt leaves
// the sequence unchanged.
inline PromptedSequence prompt_forward(const Var& embedded, const Var* prompt, const std::vector<std::uint8_t>& mask,
                                       std::size_t seqs, std::size_t len, std::size_t max_len) {
  const std::size_t m = prompt ? prompt->rows() : 0;
  require(m + len <= max_len, ErrorKind::kConfig,
          "prompt of " + std::to_string(m) + " rows plus " + std::to_string(len) + " tokens exceeds max length");
  if (!prompt) return {embedded, mask, mask};
  const std::size_t out_len = m + len;
  PromptedSequence out{prepend_rows(embedded, *prompt, seqs, len), std::vector<std::uint8_t>(seqs * out_len, 1),
                       std::vector<std::uint8_t>(seqs * out_len, 0)};
  for (std::size_t s = 0; s < seqs; ++s)
    for (std::size_t t = 0; t < len; ++t) out.mask[s * out_len + m + t] = out.pool[s * out_len + m + t] = mask[s * len + t];
  return out;
}

// Embeds every row of `tokens`: token + position embedding, optional prompt
// rows, pre-norm blocks, masked mean pool over real tokens, projection and L2
// normalization. Returns rows x d_emb.
inline Var encode_tokens(const EncoderWeights& w, const TokenMatrix& tokens, const Adapter* adapter = nullptr) {
  const auto& cfg = w.config;
  const std::size_t n = tokens.rows, t = tokens.cols;
  require(n >= 1, ErrorKind::kData, "encode needs at least one sequence");
  require(tokens.ids.size() == n * t && tokens.mask.size() == n * t, ErrorKind::kDimension, "malformed token matrix");
  for (std::size_t r = 0; r < n; ++r) {
    bool any = false;
    for (std::size_t c = 0; c < t; ++c) any = any || tokens.mask[r * t + c];
    require(any, ErrorKind::kData, "sequence " + std::to_string(r) + " is all PAD");
  }

  const std::optional<Var> prompt = adapter ? adapter->prompt() : std::nullopt;
  const std::size_t m = prompt ? prompt->rows() : 0;
  if (!prompt)
    require(t <= cfg.max_len, ErrorKind::kIndex,
            "sequence length " + std::to_string(t) + " exceeds max length " + std::to_string(cfg.max_len));

  std::vector<std::int32_t> positions(n * t);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < t; ++c) positions[r * t + c] = static_cast<std::int32_t>(c);
  const Var embedded =
      add(embedding_lookup(w.token_embedding.var, tokens.ids), embedding_lookup(w.position_embedding.var, positions));
  PromptedSequence seq = prompt_forward(embedded, prompt ? &*prompt : nullptr, tokens.mask, n, t, cfg.max_len);
  Var x = seq.rows;
  const std::size_t len = m + t;
  const std::vector<std::uint8_t>& attn_mask = seq.mask;
  const std::vector<std::uint8_t>& pool_mask = seq.pool;

  auto project = [&](std::size_t layer, Projection which, const Var& in, const Var& weight) {
    return adapter ? adapter->project(layer, which, in, weight) : matmul(in, weight);
  };

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    const Var h = layer_norm(x, lw.ln1_gain.var, lw.ln1_bias.var);
    const Var q = project(l, Projection::kQuery, h, lw.q.var);
    const Var k = project(l, Projection::kKey, h, lw.k.var);
    const Var v = project(l, Projection::kValue, h, lw.v.var);
    const Var a = attention(q, k, v, attn_mask, n, len, cfg.heads);
    x = add(x, project(l, Projection::kOutput, a, lw.o.var));
    const Var h2 = layer_norm(x, lw.ln2_gain.var, lw.ln2_bias.var);
    x = add(x, matmul(relu(matmul(h2, lw.ff_in.var)), lw.ff_out.var));
  }
  const Var pooled = masked_mean_pool(x, pool_mask, n, len);
  return l2_normalize_rows(matmul(pooled, w.projection.var));
}

// Single-sequence convenience wrapper; ids may contain trailing PAD.
inline std::vector<double> encode(const EncoderWeights& w, std::span<const std::int32_t> ids,
                                  const Adapter* adapter = nullptr) {
  NoGradGuard no_grad;
  const TokenMatrix tm = TokenMatrix::pack({std::vector<std::int32_t>(ids.begin(), ids.end())});
  const Var e = encode_tokens(w, tm, adapter);
  return {e.value().data(), e.value().data() + e.value().size()};
}

struct BatchEmbeddings {
  Var code;  // N x d_emb
  Var text;  // N x d_emb
};

// Both modalities through the same tower.
inline BatchEmbeddings encode_batch(const EncoderWeights& w, const Batch& batch, const Adapter* adapter = nullptr) {
  return {encode_tokens(w, batch.code, adapter), encode_tokens(w, batch.text, adapter)};
}

// Inference over many sequences in fixed-size chunks, no graph recorded.
inline Tensor embed_sequences(const EncoderWeights& w, const std::vector<std::vector<std::int32_t>>& seqs,
                              const Adapter* adapter = nullptr, std::size_t chunk = 64) {
  require(!seqs.empty(), ErrorKind::kData, "nothing to embed");
  NoGradGuard no_grad;
  Tensor out({seqs.size(), w.config.d_emb});
  for (std::size_t start = 0; start < seqs.size(); start += chunk) {
    const std::size_t end = std::min(seqs.size(), start + chunk);
    const TokenMatrix tm = TokenMatrix::pack({seqs.begin() + static_cast<std::ptrdiff_t>(start),
                                              seqs.begin() + static_cast<std::ptrdiff_t>(end)});
    const Var e = encode_tokens(w, tm, adapter);
    std::copy(e.value().values().begin(), e.value().values().end(), out.row(start).begin());
  }
  return out;
}

// Token budget per side once prompt rows are accounted for.
inline std::size_t sequence_budget(const EncoderConfig& cfg, const Adapter* adapter, std::size_t requested) {
  const std::size_t m = prompt_length(adapter);
  require(m < cfg.max_len, ErrorKind::kConfig, "prompt length leaves no room for tokens");
  return std::min(requested, cfg.max_len - m);
}

}  // namespace codesearch
