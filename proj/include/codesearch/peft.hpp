// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codesearch/encoder.hpp"

namespace codesearch {

namespace detail {

inline nlohmann::json targets_to_json(const std::vector<Projection>& targets) {
  nlohmann::json j = nlohmann::json::array();
  for (Projection p : targets) j.push_back(to_string(p));
  return j;
}

inline std::vector<Projection> targets_from_json(const nlohmann::json& j) {
  std::vector<Projection> out;
  for (const auto& s : j) {
    const auto name = s.get<std::string>();
    if (name == "q")
      out.push_back(Projection::kQuery);
    else if (name == "v")
      out.push_back(Projection::kValue);
    else
      fail(ErrorKind::kConfig, "low-rank targets must be drawn from {q, v}, got '" + name + "'");
  }
  return out;
}

inline void validate_targets(const std::vector<Projection>& targets) {
  require(!targets.empty(), ErrorKind::kConfig, "adapter target set is empty");
  std::set<Projection> seen;
  for (Projection p : targets) {
    require(p == Projection::kQuery || p == Projection::kValue, ErrorKind::kConfig, "low-rank targets must be Q or V");
    require(seen.insert(p).second, ErrorKind::kConfig, "duplicate adapter target");
  }
}

inline bool targets_contain(const std::vector<Projection>& targets, Projection p) {
  return std::find(targets.begin(), targets.end(), p) != targets.end();
}

inline Tensor normal_tensor(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& x : t.values()) x = rng.normal(0.0, stddev);
  return t;
}

inline std::string target_id(std::size_t layer, Projection p, const char* name) {
  return "layers." + std::to_string(layer) + ".attn." + to_string(p) + "." + name;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Configs

struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 0.0;  // 0 selects the default 2 * rank
  std::vector<Projection> targets{Projection::kQuery, Projection::kValue};

  double scaling() const { return effective_alpha() / static_cast<double>(rank); }
  double effective_alpha() const { return alpha > 0.0 ? alpha : 2.0 * static_cast<double>(rank); }

  void validate(const EncoderConfig& enc) const {
    require(rank >= 1 && rank <= enc.d_model, ErrorKind::kConfig, "LoRA rank must lie in [1, d_model]");
    detail::validate_targets(targets);
  }

  nlohmann::json to_json() const {
    return {{"rank", rank}, {"alpha", effective_alpha()}, {"targets", detail::targets_to_json(targets)}};
  }
  static LoraConfig from_json(const nlohmann::json& j) {
    LoraConfig c;
    c.rank = j.value("rank", c.rank);
    c.alpha = j.value("alpha", c.alpha);
    if (j.contains("targets")) c.targets = detail::targets_from_json(j["targets"]);
    return c;
  }
};

struct AdaLoraConfig {
  std::size_t r_init = 12;
  std::size_t r_target = 8;
  std::size_t t_init = 20;   // optimizer steps before pruning starts
  std::size_t t_final = 200;  // step at which the final budget is reached
  double gamma = 0.1;  // orthogonality weight
  double beta = 0.85;  // sensitivity smoothing
  double scaling = 1.0;
  std::vector<Projection> targets{Projection::kQuery, Projection::kValue};

  void validate(const EncoderConfig& enc) const {
    require(r_init >= 1 && r_init <= enc.d_model, ErrorKind::kConfig, "AdaLoRA r_init must lie in [1, d_model]");
    require(r_target >= 1 && r_target <= r_init, ErrorKind::kConfig, "AdaLoRA r_target must lie in [1, r_init]");
    require(t_init < t_final, ErrorKind::kConfig, "AdaLoRA needs t_init < t_final");
    require(gamma >= 0.0, ErrorKind::kConfig, "AdaLoRA gamma must be non-negative");
    require(beta > 0.0 && beta < 1.0, ErrorKind::kConfig, "AdaLoRA beta must lie in (0, 1)");
    detail::validate_targets(targets);
  }

  // Average rank allowed at optimizer step t: r_init until t_init, cubic decay
  // to r_target at t_final, constant afterwards.
  double rank_at(std::size_t t) const {
    if (t <= t_init) return static_cast<double>(r_init);
    if (t >= t_final) return static_cast<double>(r_target);
    const double progress = static_cast<double>(t - t_init) / static_cast<double>(t_final - t_init);
    const double remain = 1.0 - progress;
    return static_cast<double>(r_target) + static_cast<double>(r_init - r_target) * remain * remain * remain;
  }

  nlohmann::json to_json() const {
    return {{"r_init", r_init}, {"r_target", r_target}, {"t_init", t_init},   {"t_final", t_final},
            {"gamma", gamma},   {"beta", beta},         {"scaling", scaling}, {"targets", detail::targets_to_json(targets)}};
  }
  static AdaLoraConfig from_json(const nlohmann::json& j) {
    AdaLoraConfig c;
    c.r_init = j.value("r_init", c.r_init);
    c.r_target = j.value("r_target", c.r_target);
    c.t_init = j.value("t_init", c.t_init);
    c.t_final = j.value("t_final", c.t_final);
    c.gamma = j.value("gamma", c.gamma);
    c.beta = j.value("beta", c.beta);
    c.scaling = j.value("scaling", c.scaling);
    if (j.contains("targets")) c.targets = detail::targets_from_json(j["targets"]);
    return c;
  }
};

// Scales the Q-projection output, the K-projection output and the
// attention-output linear. The feed-forward block is left alone.
struct Ia3Config {
  nlohmann::json to_json() const { return {{"targets", {"q", "k", "o"}}}; }
  static Ia3Config from_json(const nlohmann::json&) { return {}; }
};

struct PromptConfig {
  std::size_t virtual_tokens = 10;
  bool random_init = false;  // default: copy randomly chosen vocabulary rows
  std::size_t sample_pool = 0;  // sample among the first n non-reserved ids (most frequent); 0 = whole table

  void validate(const EncoderConfig& enc) const {
    require(virtual_tokens >= 1, ErrorKind::kConfig, "prompt needs at least one virtual token");
    require(virtual_tokens < enc.max_len, ErrorKind::kConfig, "prompt length must leave room for input tokens");
    require(sample_pool + Vocab::kReserved <= enc.vocab_size, ErrorKind::kConfig, "prompt sample pool exceeds the vocabulary");
  }

  nlohmann::json to_json() const {
    return {{"virtual_tokens", virtual_tokens}, {"random_init", random_init}, {"sample_pool", sample_pool}};
  }
  static PromptConfig from_json(const nlohmann::json& j) {
    PromptConfig c;
    c.virtual_tokens = j.value("virtual_tokens", c.virtual_tokens);
    c.random_init = j.value("random_init", c.random_init);
    c.sample_pool = j.value("sample_pool", c.sample_pool);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Trainable-parameter counts in closed form.

inline std::size_t count_trainable(const LoraConfig& c, const EncoderConfig& enc) {
  return enc.layers * c.targets.size() * 2 * enc.d_model * c.rank;
}
inline std::size_t count_trainable(const AdaLoraConfig& c, const EncoderConfig& enc) {
  return enc.layers * c.targets.size() * c.r_init * (2 * enc.d_model + 1);
}
inline std::size_t count_trainable(const Ia3Config&, const EncoderConfig& enc) { return enc.layers * 3 * enc.d_model; }
inline std::size_t count_trainable(const PromptConfig& c, const EncoderConfig& enc) {
  return c.virtual_tokens * enc.d_model;
}

inline std::size_t count_trainable(Method method, const nlohmann::json& config, const EncoderConfig& enc) {
  switch (method) {
    case Method::kNone: return 0;
    case Method::kFull: return enc.parameter_count();
    case Method::kLora: return count_trainable(LoraConfig::from_json(config), enc);
    case Method::kAdaLora: return count_trainable(AdaLoraConfig::from_json(config), enc);
    case Method::kIa3: return count_trainable(Ia3Config::from_json(config), enc);
    case Method::kPrompt: return count_trainable(PromptConfig::from_json(config), enc);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// LoRA

// y = x (W + (alpha / r) B A) with A: r x d_out and B: d_in x r.
inline Var lora_forward(const Var& x, const Var& w, const Var& a, const Var& b, double alpha, std::size_t rank) {
  return add(matmul(x, w), scale(matmul(matmul(x, b), a), alpha / static_cast<double>(rank)));
}

inline Tensor merge_lora(const Tensor& w, const Tensor& a, const Tensor& b, double alpha, std::size_t rank) {
  Tensor delta = matmul(b, a);
  require(delta.shape() == w.shape(), ErrorKind::kDimension, "merge_lora shape mismatch");
  Tensor out = w;
  const double s = alpha / static_cast<double>(rank);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * delta[i];
  return out;
}

class LoraAdapter final : public Adapter {
 public:
  struct Factors {
    Parameter a;  // r x d
    Parameter b;  // d x r
  };

  LoraAdapter(const EncoderConfig& enc, LoraConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate(enc);
    Rng rng(seed);
    factors_.resize(enc.layers);
    for (std::size_t l = 0; l < enc.layers; ++l)
      for (Projection p : config_.targets)
        factors_[l].emplace(p, Factors{Parameter(detail::target_id(l, p, "lora_a"),
                                                 detail::normal_tensor({config_.rank, enc.d_model}, rng, 0.02)),
                                       Parameter(detail::target_id(l, p, "lora_b"), Tensor({enc.d_model, config_.rank}))});
  }

  Method method() const override { return Method::kLora; }
  const LoraConfig& config() const { return config_; }

  Var project(std::size_t layer, Projection which, const Var& x, const Var& w) const override {
    if (merged_) return matmul(x, w);
    auto it = factors_[layer].find(which);
    if (it == factors_[layer].end()) return matmul(x, w);
    return lora_forward(x, w, it->second.a.var, it->second.b.var, config_.effective_alpha(), config_.rank);
  }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> out;
    for (auto& layer : factors_)
      for (auto& [p, f] : layer) {
        out.push_back(&f.a);
        out.push_back(&f.b);
      }
    return out;
  }
  using Adapter::parameters;

  Factors& factors(std::size_t layer, Projection p) { return factors_.at(layer).at(p); }

  // Folds the update into the base weights. Single-shot: afterwards the
  // adapter passes projections through unchanged.
  void merge_into(EncoderWeights& w) {
    require(!merged_, ErrorKind::kConfig, "LoRA adapter already merged");
    for (std::size_t l = 0; l < factors_.size(); ++l)
      for (auto& [p, f] : factors_[l]) {
        Parameter& target = p == Projection::kQuery ? w.layers[l].q : w.layers[l].v;
        target.mutable_value() = merge_lora(target.value(), f.a.value(), f.b.value(), config_.effective_alpha(), config_.rank);
      }
    merged_ = true;
  }
  bool merged() const { return merged_; }

 private:
  LoraConfig config_;
  std::vector<std::map<Projection, Factors>> factors_;
  bool merged_ = false;
};

// ---------------------------------------------------------------------------
// AdaLoRA

namespace detail {

// out = xp * (lambda * mask) per column. The gradient w.r.t. the effective
// (masked) lambda is also added to `raw`, which importance scoring reads so a
// pruned triplet keeps a non-zero sensitivity and can come back.
inline Var masked_column_scale(const Var& xp, const Var& lambda, const std::vector<std::uint8_t>& mask,
                               std::shared_ptr<Tensor> raw) {
  const std::size_t r = xp.cols();
  require(lambda.value().size() == r && mask.size() == r, ErrorKind::kDimension, "AdaLoRA rank mismatch");
  Tensor out = xp.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t c = 0; c < r; ++c) out(i, c) *= mask[c] ? lambda.value()[c] : 0.0;
  return make_node(std::move(out), {xp, lambda}, [r, mask, raw = std::move(raw)](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& lv = self.inputs[1]->value;
    if (Tensor* g = grad_of(self, 0))
      for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t c = 0; c < r; ++c)
          if (mask[c]) (*g)(i, c) += self.grad(i, c) * lv[c];
    std::vector<double> col(r, 0.0);
    for (std::size_t i = 0; i < xv.rows(); ++i)
      for (std::size_t c = 0; c < r; ++c) col[c] += self.grad(i, c) * xv(i, c);
    for (std::size_t c = 0; c < r; ++c) (*raw)[c] += col[c];
    if (Tensor* g = grad_of(self, 1))
      for (std::size_t c = 0; c < r; ++c)
        if (mask[c]) (*g)[c] += col[c];
  });
}

}  // namespace detail

// Delta W = P diag(lambda) Q with importance-driven masking of triplets.
class AdaLoraAdapter final : public Adapter {
 public:
  struct Triplets {
    Parameter p;       // d x r
    Parameter lambda;  // r
    Parameter q;       // r x d
    std::vector<std::uint8_t> mask;
    std::vector<double> sensitivity;
    std::shared_ptr<Tensor> raw_grad;  // d loss / d effective lambda
  };

  AdaLoraAdapter(const EncoderConfig& enc, AdaLoraConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate(enc);
    Rng rng(seed);
    const std::size_t r = config_.r_init, d = enc.d_model;
    slots_.resize(enc.layers);
    for (std::size_t l = 0; l < enc.layers; ++l)
      for (Projection p : config_.targets) {
        Triplets t{Parameter(detail::target_id(l, p, "ada_p"), detail::normal_tensor({d, r}, rng, 0.02)),
                   Parameter(detail::target_id(l, p, "ada_lambda"), Tensor({r})),
                   Parameter(detail::target_id(l, p, "ada_q"), detail::normal_tensor({r, d}, rng, 0.02)),
                   std::vector<std::uint8_t>(r, 1), std::vector<double>(r, 0.0), std::make_shared<Tensor>(Shape{r})};
        slots_[l].emplace(p, std::move(t));
      }
  }

  Method method() const override { return Method::kAdaLora; }
  const AdaLoraConfig& config() const { return config_; }

  Var project(std::size_t layer, Projection which, const Var& x, const Var& w) const override {
    auto it = slots_[layer].find(which);
    if (it == slots_[layer].end()) return matmul(x, w);
    const Triplets& t = it->second;
    const Var xp = matmul(x, t.p.var);
    const Var scaled = detail::masked_column_scale(xp, t.lambda.var, t.mask, t.raw_grad);
    return add(matmul(x, w), scale(matmul(scaled, t.q.var), config_.scaling));
  }

  // gamma * sum over adapted matrices of |P^T P - I|_F^2 + |Q Q^T - I|_F^2.
  Var regularizer() const override {
    if (config_.gamma == 0.0) return {};
    const Var eye = constant(Tensor::identity(config_.r_init));
    Var total;
    for (const auto& layer : slots_)
      for (const auto& [proj, t] : layer) {
        const Var pp = sum_squares(sub(matmul(transpose(t.p.var), t.p.var), eye));
        const Var qq = sum_squares(sub(matmul(t.q.var, transpose(t.q.var)), eye));
        const Var term = add(pp, qq);
        total = total.defined() ? add(total, term) : term;
      }
    return scale(total, config_.gamma);
  }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> out;
    for (auto& layer : slots_)
      for (auto& [proj, t] : layer) {
        out.push_back(&t.p);
        out.push_back(&t.lambda);
        out.push_back(&t.q);
      }
    return out;
  }
  using Adapter::parameters;

  Triplets& triplets(std::size_t layer, Projection p) { return slots_.at(layer).at(p); }
  const Triplets& triplets(std::size_t layer, Projection p) const { return slots_.at(layer).at(p); }

  std::size_t matrix_count() const {
    std::size_t n = 0;
    for (const auto& layer : slots_) n += layer.size();
    return n;
  }

  std::size_t active_triplets() const {
    std::size_t n = 0;
    for (const auto& layer : slots_)
      for (const auto& [proj, t] : layer) n += static_cast<std::size_t>(std::count(t.mask.begin(), t.mask.end(), 1));
    return n;
  }

  double active_rank() const { return static_cast<double>(active_triplets()) / static_cast<double>(matrix_count()); }

  std::size_t budget_at(std::size_t t) const {
    return static_cast<std::size_t>(std::llround(config_.rank_at(t) * static_cast<double>(matrix_count())));
  }

  // One schedule step at optimizer step t: fold the gradients accumulated
  // since the last call into the smoothed sensitivities, then keep the
  // budget_at(t) most important triplets across all matrices.
  void step(std::size_t t) {
    struct Entry {
      double score;
      std::size_t slot;
    };
    std::vector<Entry> entries;
    std::vector<Triplets*> order;
    for (auto& layer : slots_)
      for (auto& [proj, trip] : layer) order.push_back(&trip);
    for (std::size_t s = 0; s < order.size(); ++s) {
      Triplets& trip = *order[s];
      for (std::size_t i = 0; i < config_.r_init; ++i) {
        const double importance = std::abs(trip.lambda.value()[i] * (*trip.raw_grad)[i]);
        trip.sensitivity[i] = config_.beta * trip.sensitivity[i] + (1.0 - config_.beta) * importance;
        entries.push_back({trip.sensitivity[i], s * config_.r_init + i});
      }
      trip.raw_grad->fill(0.0);
    }
    const std::size_t budget = budget_at(t);
    if (t <= config_.t_init || budget >= entries.size()) {
      for (Triplets* trip : order) std::fill(trip->mask.begin(), trip->mask.end(), 1);
      return;
    }
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });
    for (Triplets* trip : order) std::fill(trip->mask.begin(), trip->mask.end(), 0);
    for (std::size_t k = 0; k < budget; ++k) {
      const std::size_t slot = entries[k].slot;
      order[slot / config_.r_init]->mask[slot % config_.r_init] = 1;
    }
  }

  nlohmann::json masks_to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t l = 0; l < slots_.size(); ++l)
      for (const auto& [proj, t] : slots_[l]) j[detail::target_id(l, proj, "mask")] = t.mask;
    return j;
  }

  void masks_from_json(const nlohmann::json& j) {
    for (std::size_t l = 0; l < slots_.size(); ++l)
      for (auto& [proj, t] : slots_[l]) {
        const auto key = detail::target_id(l, proj, "mask");
        if (!j.contains(key)) continue;
        auto m = j[key].get<std::vector<std::uint8_t>>();
        require(m.size() == t.mask.size(), ErrorKind::kLoad, "AdaLoRA mask length mismatch for " + key);
        t.mask = std::move(m);
      }
  }

 private:
  AdaLoraConfig config_;
  std::vector<std::map<Projection, Triplets>> slots_;
};

// ---------------------------------------------------------------------------
// (IA)3

class Ia3Adapter final : public Adapter {
 public:
  struct Vectors {
    Parameter q, k, o;  // d_model each
  };

  explicit Ia3Adapter(const EncoderConfig& enc) {
    for (std::size_t l = 0; l < enc.layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".ia3.";
      vectors_.push_back({Parameter(p + "q", Tensor({enc.d_model}, 1.0)), Parameter(p + "k", Tensor({enc.d_model}, 1.0)),
                          Parameter(p + "o", Tensor({enc.d_model}, 1.0))});
    }
  }

  Method method() const override { return Method::kIa3; }

  Var project(std::size_t layer, Projection which, const Var& x, const Var& w) const override {
    const Var y = matmul(x, w);
    const Vectors& v = vectors_[layer];
    switch (which) {
      case Projection::kQuery: return mul_row(y, v.q.var);
      case Projection::kKey: return mul_row(y, v.k.var);
      case Projection::kOutput: return mul_row(y, v.o.var);
      case Projection::kValue: return y;
    }
    return y;
  }

  std::vector<Parameter*> parameters() override {
    std::vector<Parameter*> out;
    for (auto& v : vectors_)
      for (Parameter* p : {&v.q, &v.k, &v.o}) out.push_back(p);
    return out;
  }
  using Adapter::parameters;

  Vectors& vectors(std::size_t layer) { return vectors_.at(layer); }

 private:
  std::vector<Vectors> vectors_;
};

// ---------------------------------------------------------------------------
// Prompt tuning

class PromptAdapter final : public Adapter {
 public:
  PromptAdapter(const EncoderWeights& base, PromptConfig config, std::uint64_t seed) : config_(config) {
    config_.validate(base.config);
    Rng rng(seed);
    const std::size_t d = base.config.d_model, m = config_.virtual_tokens;
    Tensor init({m, d});
    if (config_.random_init) {
      init = detail::normal_tensor({m, d}, rng, 0.02);
    } else {
      const std::size_t candidates =
          config_.sample_pool ? config_.sample_pool : base.config.vocab_size - Vocab::kReserved;
      for (std::size_t i = 0; i < m; ++i) {
        const auto id = static_cast<std::int32_t>(Vocab::kReserved + rng.below(candidates));
        sampled_ids_.push_back(id);
        auto src = base.token_embedding.value().row(static_cast<std::size_t>(id));
        std::copy(src.begin(), src.end(), init.row(i).begin());
      }
    }
    prompt_ = Parameter("prompt.embedding", std::move(init));
  }

  Method method() const override { return Method::kPrompt; }
  std::optional<Var> prompt() const override { return prompt_.var; }

  std::vector<Parameter*> parameters() override { return {&prompt_}; }
  using Adapter::parameters;

  const std::vector<std::int32_t>& sampled_ids() const { return sampled_ids_; }
  const PromptConfig& config() const { return config_; }

 private:
  PromptConfig config_;
  Parameter prompt_;
  std::vector<std::int32_t> sampled_ids_;
};

// ---------------------------------------------------------------------------
// attach

// Freezes the base and returns the adapter for `method`; nullptr for none
// (frozen base) and full (everything trainable).
inline std::unique_ptr<Adapter> attach(Method method, const nlohmann::json& config, EncoderWeights& base,
                                       std::uint64_t seed) {
  base.set_trainable(method == Method::kFull);
  switch (method) {
    case Method::kNone:
    case Method::kFull: return nullptr;
    case Method::kLora: return std::make_unique<LoraAdapter>(base.config, LoraConfig::from_json(config), seed);
    case Method::kAdaLora: return std::make_unique<AdaLoraAdapter>(base.config, AdaLoraConfig::from_json(config), seed);
    case Method::kIa3: return std::make_unique<Ia3Adapter>(base.config);
    case Method::kPrompt: return std::make_unique<PromptAdapter>(base, PromptConfig::from_json(config), seed);
  }
  return nullptr;
}

inline nlohmann::json default_adapter_config(Method method) {
  switch (method) {
    case Method::kLora: return LoraConfig{}.to_json();
    case Method::kAdaLora: return AdaLoraConfig{}.to_json();
    case Method::kIa3: return Ia3Config{}.to_json();
    case Method::kPrompt: return PromptConfig{}.to_json();
    default: return nlohmann::json::object();
  }
}

}  // namespace codesearch
