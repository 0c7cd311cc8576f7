// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codesearch/encoder.hpp"
#include "codesearch/peft.hpp"

namespace codesearch {

inline constexpr int kCheckpointFormatVersion = 1;

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  require(s.size() == 16, ErrorKind::kLoad, "malformed 64-bit hex value '" + s + "'");
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else fail(ErrorKind::kLoad, "malformed 64-bit hex value '" + s + "'");
  }
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kIo, "cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::kIo, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::kIo, "write failed for " + path);
}

inline std::uint64_t file_fingerprint(const std::string& path) { return fnv1a(read_file(path)); }

namespace detail {

inline void append_f32(std::string& out, double value) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

inline double read_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace detail

// Where the frozen base comes from: a seeded initialization, or a full-mode
// checkpoint file pinned by its byte fingerprint.
struct BaseDescriptor {
  std::string kind = "seeded";  // seeded | file
  std::uint64_t seed = 0;
  std::string path;
  std::uint64_t fingerprint = 0;

  nlohmann::json to_json() const {
    if (kind == "seeded") return {{"kind", kind}, {"seed", seed}};
    return {{"kind", kind}, {"path", path}, {"fingerprint", hex64(fingerprint)}};
  }

  static BaseDescriptor from_json(const nlohmann::json& j) {
    BaseDescriptor b;
    b.kind = j.at("kind").get<std::string>();
    if (b.kind == "seeded") {
      b.seed = j.at("seed").get<std::uint64_t>();
    } else if (b.kind == "file") {
      b.path = j.at("path").get<std::string>();
      b.fingerprint = parse_hex64(j.at("fingerprint").get<std::string>());
    } else {
      fail(ErrorKind::kLoad, "unknown base kind '" + b.kind + "'");
    }
    return b;
  }

  static BaseDescriptor seeded(std::uint64_t seed) { return {"seeded", seed, {}, 0}; }
  static BaseDescriptor file(std::string path) {
    const std::uint64_t fp = file_fingerprint(path);
    return {"file", 0, std::move(path), fp};
  }
};

struct CheckpointHeader {
  int format_version = kCheckpointFormatVersion;
  Method method = Method::kNone;
  nlohmann::json adapter_config = nlohmann::json::object();
  EncoderConfig encoder{};
  std::uint64_t vocab_hash = 0;
  std::string vocab_path;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  double temperature = 0.08;
  BaseDescriptor base{};
  nlohmann::json adalora_masks = nullptr;
};

struct NamedTensor {
  std::string id;
  Tensor value;  // float32-representable after a round-trip
};

// Header JSON on the first line, then float32 little-endian values of every
// tensor in header order.
struct Checkpoint {
  CheckpointHeader header;
  std::vector<NamedTensor> tensors;

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.value.size();
    return n;
  }

  const NamedTensor* find(const std::string& id) const {
    for (const auto& t : tensors)
      if (t.id == id) return &t;
    return nullptr;
  }

  std::string serialize() const {
    std::string payload;
    payload.reserve(scalar_count() * 4);
    nlohmann::json list = nlohmann::json::array();
    for (const auto& t : tensors) {
      list.push_back({{"id", t.id}, {"shape", t.value.shape()}});
      for (double v : t.value.values()) detail::append_f32(payload, v);
    }
    const auto& h = header;
    nlohmann::json j = {{"format_version", h.format_version},
                        {"method", to_string(h.method)},
                        {"adapter_config", h.adapter_config},
                        {"encoder", h.encoder.to_json()},
                        {"vocab_hash", hex64(h.vocab_hash)},
                        {"vocab_path", h.vocab_path},
                        {"seed", h.seed},
                        {"step", h.step},
                        {"temperature", h.temperature},
                        {"base", h.base.to_json()},
                        {"adalora_masks", h.adalora_masks},
                        {"tensors", list},
                        {"payload_bytes", payload.size()},
                        {"payload_checksum", hex64(fnv1a(payload))}};
    return j.dump() + "\n" + payload;
  }

  static Checkpoint parse(const std::string& bytes) {
    const auto nl = bytes.find('\n');
    require(nl != std::string::npos, ErrorKind::kLoad, "checkpoint has no header line");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kLoad, std::string("corrupt checkpoint header: ") + e.what());
    }
    Checkpoint c;
    try {
      auto& h = c.header;
      h.format_version = j.at("format_version").get<int>();
      require(h.format_version == kCheckpointFormatVersion, ErrorKind::kLoad,
              "unsupported checkpoint format version " + std::to_string(h.format_version));
      h.method = parse_method(j.at("method").get<std::string>());
      h.adapter_config = j.at("adapter_config");
      h.encoder = EncoderConfig::from_json(j.at("encoder"));
      h.vocab_hash = parse_hex64(j.at("vocab_hash").get<std::string>());
      h.vocab_path = j.at("vocab_path").get<std::string>();
      h.seed = j.at("seed").get<std::uint64_t>();
      h.step = j.at("step").get<std::size_t>();
      h.temperature = j.at("temperature").get<double>();
      h.base = BaseDescriptor::from_json(j.at("base"));
      h.adalora_masks = j.at("adalora_masks");

      const std::string_view payload(bytes.data() + nl + 1, bytes.size() - nl - 1);
      require(payload.size() == j.at("payload_bytes").get<std::size_t>(), ErrorKind::kLoad,
              "checkpoint payload is truncated or padded");
      require(hex64(fnv1a(payload)) == j.at("payload_checksum").get<std::string>(), ErrorKind::kLoad,
              "checkpoint payload checksum mismatch");
      std::size_t offset = 0;
      for (const auto& t : j.at("tensors")) {
        const Shape shape = t.at("shape").get<Shape>();
        const std::size_t n = shape_size(shape);
        require(offset + 4 * n <= payload.size(), ErrorKind::kLoad, "tensor list overruns payload");
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i) values[i] = detail::read_f32(payload.data() + offset + 4 * i);
        offset += 4 * n;
        c.tensors.push_back({t.at("id").get<std::string>(), Tensor(shape, std::move(values))});
      }
      require(offset == payload.size(), ErrorKind::kLoad, "payload holds bytes not covered by the tensor list");
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kLoad, std::string("malformed checkpoint header: ") + e.what());
    }
    return c;
  }

  void save(const std::string& path) const { write_file(path, serialize()); }
  static Checkpoint load(const std::string& path) { return parse(read_file(path)); }
};

// Rejects a checkpoint built for another encoder shape or vocabulary.
inline void check_compatible(const CheckpointHeader& h, const EncoderConfig& live, std::uint64_t vocab_hash) {
  require(h.encoder == live, ErrorKind::kConfig, "checkpoint encoder config does not match the live config");
  require(h.vocab_hash == vocab_hash, ErrorKind::kConfig,
          "checkpoint vocab hash " + hex64(h.vocab_hash) + " does not match vocab " + hex64(vocab_hash));
}

// Copies checkpoint tensors into `params`; the id sets must coincide.
inline void restore(const Checkpoint& c, const std::vector<Parameter*>& params) {
  require(c.tensors.size() == params.size(), ErrorKind::kLoad,
          "checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model expects " +
              std::to_string(params.size()));
  for (Parameter* p : params) {
    const NamedTensor* t = c.find(p->id);
    require(t != nullptr, ErrorKind::kLoad, "checkpoint is missing tensor " + p->id);
    require(t->value.shape() == p->value().shape(), ErrorKind::kLoad,
            "shape mismatch for " + p->id + ": " + shape_string(t->value.shape()) + " vs " +
                shape_string(p->value().shape()));
    p->mutable_value() = t->value;
  }
}

// ---------------------------------------------------------------------------
// Model = frozen base + optional adapter + the provenance needed to rebuild it.

struct Model {
  EncoderWeights base;
  std::unique_ptr<Adapter> adapter;
  Method method = Method::kNone;
  nlohmann::json adapter_config = nlohmann::json::object();
  BaseDescriptor base_descriptor{};
  std::uint64_t vocab_hash = 0;
  std::string vocab_path;
  std::uint64_t seed = 0;
  double temperature = 0.08;

  const Adapter* adapter_ptr() const { return adapter.get(); }

  // Tensors a checkpoint of this model persists.
  std::vector<Parameter*> persisted() {
    if (method == Method::kFull) return base.parameters();
    if (adapter) return adapter->parameters();
    return {};
  }

  Checkpoint snapshot(std::size_t step) {
    Checkpoint c;
    auto& h = c.header;
    h.method = method;
    h.adapter_config = adapter_config;
    h.encoder = base.config;
    h.vocab_hash = vocab_hash;
    h.vocab_path = vocab_path;
    h.seed = seed;
    h.step = step;
    h.temperature = temperature;
    h.base = base_descriptor;
    if (auto* ada = dynamic_cast<AdaLoraAdapter*>(adapter.get())) h.adalora_masks = ada->masks_to_json();
    for (Parameter* p : persisted()) c.tensors.push_back({p->id, p->value()});
    return c;
  }
};

inline EncoderWeights load_base(const BaseDescriptor& d, const EncoderConfig& config, int depth = 0);

// Fresh model: base from the descriptor, adapter attached with `seed`.
inline Model make_model(const EncoderConfig& config, const BaseDescriptor& base, Method method,
                        nlohmann::json adapter_config, std::uint64_t seed) {
  Model m;
  m.base = load_base(base, config);
  m.base_descriptor = base;
  m.method = method;
  if (adapter_config.is_null() || adapter_config.empty()) adapter_config = default_adapter_config(method);
  m.adapter = attach(method, adapter_config, m.base, seed);
  m.adapter_config = std::move(adapter_config);
  m.seed = seed;
  return m;
}

// Rebuilds the model a checkpoint was taken from.
inline Model load_model(const Checkpoint& c, int depth = 0) {
  const auto& h = c.header;
  Model m;
  m.base = load_base(h.base, h.encoder, depth + 1);
  m.base_descriptor = h.base;
  m.method = h.method;
  m.adapter_config = h.adapter_config;
  m.adapter = attach(h.method, h.adapter_config, m.base, h.seed);
  m.vocab_hash = h.vocab_hash;
  m.vocab_path = h.vocab_path;
  m.seed = h.seed;
  m.temperature = h.temperature;
  restore(c, m.persisted());
  if (auto* ada = dynamic_cast<AdaLoraAdapter*>(m.adapter.get()); ada && !h.adalora_masks.is_null())
    ada->masks_from_json(h.adalora_masks);
  return m;
}

inline Model load_model(const std::string& path) { return load_model(Checkpoint::load(path)); }

inline EncoderWeights load_base(const BaseDescriptor& d, const EncoderConfig& config, int depth) {
  if (d.kind == "seeded") return init_encoder(config, d.seed);
  require(depth < 8, ErrorKind::kLoad, "base checkpoint chain is too deep");
  const std::string bytes = read_file(d.path);
  require(fnv1a(bytes) == d.fingerprint, ErrorKind::kFingerprint,
          "base checkpoint " + d.path + " fingerprint " + hex64(fnv1a(bytes)) + " differs from recorded " +
              hex64(d.fingerprint));
  const Checkpoint c = Checkpoint::parse(bytes);
  require(c.header.method == Method::kFull, ErrorKind::kLoad, "base checkpoint " + d.path + " is not a full-mode checkpoint");
  require(c.header.encoder == config, ErrorKind::kConfig, "base checkpoint encoder config differs");
  Model m = load_model(c, depth);
  m.base.set_trainable(false);
  return std::move(m.base);
}

}  // namespace codesearch
