// SPDX-License-Identifier: Apache-2.0
//
// codesearch: prepare -> train -> eval -> audit -> index -> search -> rouge,
// plus synth (seeded toy corpus) and replay (re-run from a manifest).
//
// Exit codes: 0 ok, 1 usage, 2 io, 3 empty/malformed data,
// 4 config/fingerprint/load mismatch, 5 numeric abort, 6 internal.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "codesearch/codesearch.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace codesearch;

namespace {

constexpr const char* kToolVersion = "codesearch 1.0.0";

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo: return 2;
    case ErrorKind::kData: return 3;
    case ErrorKind::kConfig:
    case ErrorKind::kFingerprint:
    case ErrorKind::kLoad:
    case ErrorKind::kIndex: return 4;
    case ErrorKind::kNumeric: return 5;
    case ErrorKind::kDimension: return 6;
  }
  return 6;
}

// ---------------------------------------------------------------------------
// Config files, resolved options and manifests

std::string option_key(const CLI::Option* opt) { return opt->get_single_name(); }

bool is_meta_option(const CLI::Option* opt) {
  const std::string key = option_key(opt);
  return key == "help" || key == "config" || key.empty();
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, path + ": " + e.what());
  }
}

std::vector<std::string> json_to_args(const json& v) {
  if (v.is_array()) {
    std::vector<std::string> out;
    for (const auto& e : v) {
      auto sub = json_to_args(e);
      out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
  }
  if (v.is_string()) return {v.get<std::string>()};
  if (v.is_boolean()) return {v.get<bool>() ? "true" : "false"};
  return {v.dump()};
}

// Values from a flat JSON object fill every option the command line left
// unset; keys are flag names without dashes.
void apply_config(CLI::App& cmd, const json& config) {
  require(config.is_object(), ErrorKind::kConfig, "config file must hold a JSON object");
  std::map<std::string, CLI::Option*> by_key;
  for (CLI::Option* opt : cmd.get_options())
    if (!is_meta_option(opt)) by_key[option_key(opt)] = opt;
  for (const auto& [key, value] : config.items()) {
    auto it = by_key.find(key);
    require(it != by_key.end(), ErrorKind::kConfig, "unknown config key '" + key + "' for " + cmd.get_name());
    CLI::Option* opt = it->second;
    if (opt->count() > 0) continue;
    if (value.is_array() && value.empty()) continue;  // a repeatable option never given
    opt->add_result(json_to_args(value));
    opt->run_callback();
  }
}

// Every option of the command with its effective value, defaults included.
json resolved_options(CLI::App& cmd) {
  json j = json::object();
  for (CLI::Option* opt : cmd.get_options()) {
    if (is_meta_option(opt)) continue;
    std::vector<std::string> values = opt->count() ? opt->results() : std::vector<std::string>{};
    if (values.empty() && !opt->get_default_str().empty()) values = {opt->get_default_str()};
    const bool is_flag = opt->get_type_size() == 0;
    if (is_flag) {
      j[option_key(opt)] = opt->count() > 0 && opt->as<bool>();
    } else if (opt->get_items_expected_max() > 1) {
      j[option_key(opt)] = values;
    } else {
      j[option_key(opt)] = values.empty() ? std::string() : values.back();
    }
  }
  return j;
}

struct RunRecord {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
};

void write_manifest(const std::string& out_dir, const RunRecord& r) {
  json m = {{"command", r.command}, {"config", r.config},   {"seed", r.seed},
            {"inputs", r.inputs},   {"outputs", r.outputs}, {"tool_version", kToolVersion}};
  write_file((fs::path(out_dir) / "manifest.json").string(), m.dump(2) + "\n");
}

void ensure_dir(const std::string& dir) {
  require(!dir.empty(), ErrorKind::kConfig, "--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::kIo, "cannot create " + dir + ": " + ec.message());
}

std::string join_path(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::array<double, 3> parse_ratios(const std::string& s) {
  std::array<double, 3> r{};
  std::stringstream ss(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    require(i < 3, ErrorKind::kConfig, "--ratios needs three comma-separated values");
    try {
      r[i++] = std::stod(part);
    } catch (const std::exception&) {
      fail(ErrorKind::kConfig, "bad ratio '" + part + "'");
    }
  }
  require(i == 3, ErrorKind::kConfig, "--ratios needs three comma-separated values");
  return r;
}

std::vector<Projection> parse_targets(const std::string& s) {
  json list = json::array();
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) list.push_back(part);
  return detail::targets_from_json(list);
}

Vocab load_vocab_checked(const std::string& path, std::uint64_t expected) {
  Vocab v = Vocab::load(path);
  require(v.hash() == expected, ErrorKind::kConfig,
          "vocab " + path + " (hash " + hex64(v.hash()) + ") does not match the checkpoint (" + hex64(expected) + ")");
  return v;
}

std::string split_path(const std::string& data_dir, const std::string& split) {
  if (split.size() > 6 && split.substr(split.size() - 6) == ".jsonl") return split;
  return join_path(data_dir, split + ".jsonl");
}

// ---------------------------------------------------------------------------
// Commands. Each registers its options and returns the action to run.

using Action = std::function<void(RunRecord&)>;

struct Command {
  CLI::App* app = nullptr;
  Action run;
  std::string* out = nullptr;     // output directory option, when any
  std::uint64_t* seed = nullptr;  // seed option, when any
};

struct SynthOpts {
  SyntheticConfig cfg;
  std::string out;
};

Command add_synth(CLI::App& root, SynthOpts& o) {
  auto* app = root.add_subcommand("synth", "Write a seeded synthetic text/code corpus (corpus.jsonl)");
  app->add_option("--pairs", o.cfg.pairs, "Number of pairs")->capture_default_str();
  app->add_option("--concepts", o.cfg.concepts, "Concept tokens shared by both sides")->capture_default_str();
  app->add_option("--concept-offset", o.cfg.concept_offset, "Index of the first concept token")->capture_default_str();
  app->add_option("--signature", o.cfg.signature, "Concept tokens per pair")->capture_default_str();
  app->add_option("--text-filler", o.cfg.text_filler, "Filler tokens per text")->capture_default_str();
  app->add_option("--code-filler", o.cfg.code_filler, "Filler tokens per code")->capture_default_str();
  app->add_option("--lang", o.cfg.lang, "Language tag")->capture_default_str();
  app->add_option("--id-prefix", o.cfg.id_prefix, "Record id prefix")->capture_default_str();
  app->add_option("--seed", o.cfg.seed, "Generator seed")->capture_default_str();
  app->add_option("--out", o.out, "Output directory")->capture_default_str();
  Command c{app, [&o](RunRecord& rec) {
              ensure_dir(o.out);
              write_jsonl(join_path(o.out, "corpus.jsonl"), synthesize(o.cfg));
              rec.outputs = {"corpus.jsonl"};
            }};
  c.out = &o.out;
  c.seed = &o.cfg.seed;
  return c;
}

struct PrepareOpts {
  std::vector<std::string> inputs;
  std::string lang;
  std::size_t min_tokens = 3, max_text = 256, max_code = 256;
  std::string ratios = "0.8,0.1,0.1";
  std::uint64_t seed = 0;
  std::size_t vocab_max = 50000, min_freq = 1;
  std::string out;
};

Command add_prepare(CLI::App& root, PrepareOpts& o) {
  auto* app = root.add_subcommand("prepare", "Filter, tokenize and split pairs; build the vocabulary");
  app->add_option("--input", o.inputs, "Input JSON Lines file(s); the vocabulary covers all of them");
  app->add_option("--lang", o.lang, "Keep only this language tag (empty keeps all)")->capture_default_str();
  app->add_option("--min-tokens", o.min_tokens, "Drop pairs with a side shorter than this (full scale: 3)")
      ->capture_default_str();
  app->add_option("--max-text-tokens", o.max_text, "Truncate text to this many tokens (full scale: 256)")
      ->capture_default_str();
  app->add_option("--max-code-tokens", o.max_code, "Truncate code to this many tokens (full scale: 256)")
      ->capture_default_str();
  app->add_option("--ratios", o.ratios, "train,valid,test fractions")->capture_default_str();
  app->add_option("--vocab-size", o.vocab_max, "Maximum vocabulary size")->capture_default_str();
  app->add_option("--min-freq", o.min_freq, "Minimum token frequency")->capture_default_str();
  app->add_option("--seed", o.seed, "Split seed (default from CODESEARCH_SEED)")->capture_default_str();
  app->add_option("--out", o.out, "Output directory")->capture_default_str();
  Command c{app, [&o](RunRecord& rec) {
              require(!o.inputs.empty(), ErrorKind::kConfig, "--input is required");
              std::vector<PairRecord> all;
              for (const auto& path : o.inputs) {
                auto part = read_jsonl(path);
                all.insert(all.end(), part.begin(), part.end());
              }
              const FilterConfig fc{o.min_tokens, o.max_text, o.max_code};
              FilterResult filtered = filter_pairs(all, fc);
              require(!filtered.records.empty(), ErrorKind::kData, "no pairs survive filtering");
              const Vocab vocab = build_vocab(filtered.records, o.vocab_max, o.min_freq);
              std::vector<PairRecord> kept =
                  o.lang.empty() ? filtered.records : filter_lang(filtered.records, o.lang);
              require(!kept.empty(), ErrorKind::kData, "no pairs left for language '" + o.lang + "'");
              const Splits s = split_dataset(kept, parse_ratios(o.ratios), o.seed);

              ensure_dir(o.out);
              write_jsonl(join_path(o.out, "train.jsonl"), s.train);
              write_jsonl(join_path(o.out, "valid.jsonl"), s.valid);
              write_jsonl(join_path(o.out, "test.jsonl"), s.test);
              vocab.save(join_path(o.out, "vocab.txt"));
              std::string report = filtered.report.to_text();
              report += "lang_kept " + std::to_string(kept.size()) + "\n";
              write_file(join_path(o.out, "report.txt"), report);
              std::cout << report;
              rec.inputs = o.inputs;
              rec.outputs = {"train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt", "report.txt"};
            }};
  c.out = &o.out;
  c.seed = &o.seed;
  return c;
}

struct ModelOpts {
  EncoderConfig encoder{};
  std::size_t vocab_size = 0;
  std::string base;
  std::uint64_t base_seed = 0;
  LoraConfig lora{};
  std::string lora_targets = "q,v";
  AdaLoraConfig adalora{};
  std::string adalora_targets = "q,v";
  PromptConfig prompt{};

  void add(CLI::App* app) {
    app->add_option("--base", base, "Frozen base: full-mode checkpoint file (empty: seeded init)")
        ->capture_default_str();
    app->add_option("--base-seed", base_seed, "Seed of the seeded base")->capture_default_str();
    app->add_option("--layers", encoder.layers, "Encoder layers")->capture_default_str();
    app->add_option("--d-model", encoder.d_model, "Model width")->capture_default_str();
    app->add_option("--heads", encoder.heads, "Attention heads")->capture_default_str();
    app->add_option("--d-ff", encoder.d_ff, "Feed-forward width")->capture_default_str();
    app->add_option("--max-len", encoder.max_len, "Maximum sequence length")->capture_default_str();
    app->add_option("--d-emb", encoder.d_emb, "Embedding width")->capture_default_str();
    app->add_option("--vocab-rows", vocab_size, "Embedding rows (0: vocabulary size)")->capture_default_str();
    app->add_option("--lora-rank", lora.rank, "LoRA rank")->capture_default_str();
    app->add_option("--lora-alpha", lora.alpha, "LoRA alpha (0: 2 * rank)")->capture_default_str();
    app->add_option("--lora-targets", lora_targets, "LoRA targets among q,v")->capture_default_str();
    app->add_option("--adalora-r-init", adalora.r_init, "AdaLoRA initial rank (full scale: 12)")
        ->capture_default_str();
    app->add_option("--adalora-r-target", adalora.r_target, "AdaLoRA target average rank")->capture_default_str();
    app->add_option("--adalora-t-init", adalora.t_init, "AdaLoRA steps before pruning")->capture_default_str();
    app->add_option("--adalora-t-final", adalora.t_final, "AdaLoRA step of the final budget")->capture_default_str();
    app->add_option("--adalora-gamma", adalora.gamma, "AdaLoRA orthogonality weight")->capture_default_str();
    app->add_option("--adalora-beta", adalora.beta, "AdaLoRA sensitivity smoothing")->capture_default_str();
    app->add_option("--adalora-targets", adalora_targets, "AdaLoRA targets among q,v")->capture_default_str();
    app->add_option("--prompt-tokens", prompt.virtual_tokens, "Virtual prompt tokens (full scale: 10)")
        ->capture_default_str();
    app->add_flag("--prompt-random-init", prompt.random_init, "Initialize the prompt from N(0, 0.02)");
    app->add_option("--prompt-sample-pool", prompt.sample_pool,
                    "Sample prompt rows among the n most frequent tokens (0: all)")
        ->capture_default_str();
  }

  json adapter_config(Method m) {
    lora.targets = parse_targets(lora_targets);
    adalora.targets = parse_targets(adalora_targets);
    switch (m) {
      case Method::kLora: return lora.to_json();
      case Method::kAdaLora: return adalora.to_json();
      case Method::kIa3: return Ia3Config{}.to_json();
      case Method::kPrompt: return prompt.to_json();
      default: return json::object();
    }
  }

  // Base descriptor plus the encoder config it implies.
  std::pair<BaseDescriptor, EncoderConfig> resolve_base(const Vocab& vocab) const {
    if (!base.empty()) {
      BaseDescriptor d = BaseDescriptor::file(base);
      const Checkpoint c = Checkpoint::load(base);
      require(c.header.method == Method::kFull, ErrorKind::kConfig, "--base must be a full-mode checkpoint");
      require(c.header.vocab_hash == vocab.hash(), ErrorKind::kConfig,
              "--base was trained with a different vocabulary");
      return {d, c.header.encoder};
    }
    EncoderConfig e = encoder;
    e.vocab_size = vocab_size ? vocab_size : vocab.size();
    require(e.vocab_size >= vocab.size(), ErrorKind::kConfig, "--vocab-rows is smaller than the vocabulary");
    return {BaseDescriptor::seeded(base_seed), e};
  }
};

struct TrainOpts {
  std::string data, method = "lora", out;
  TrainConfig train{};
  std::size_t max_text = 256, max_code = 256;
  ModelOpts model;
};

std::vector<EncodedPair> encode_split(const std::string& path, const Vocab& vocab, const Model& m,
                                      std::size_t max_text, std::size_t max_code) {
  const auto records = read_jsonl(path);
  const std::size_t t = sequence_budget(m.base.config, m.adapter_ptr(), max_text);
  const std::size_t c = sequence_budget(m.base.config, m.adapter_ptr(), max_code);
  return encode_pairs(records, vocab, t, c);
}

Command add_train(CLI::App& root, TrainOpts& o) {
  auto* app = root.add_subcommand("train", "Contrastive fine-tuning of one adapter (or the full base)");
  app->add_option("--data", o.data, "Prepared data directory (train/valid jsonl + vocab.txt)")->capture_default_str();
  app->add_option("--method", o.method, "full|lora|adalora|ia3|prompt|none")->capture_default_str();
  app->add_option("--lr", o.train.lr, "Peak learning rate (full scale: 0.001)")->capture_default_str();
  app->add_option("--lr-min", o.train.lr_min, "Cosine annealing floor")->capture_default_str();
  app->add_option("--batch-size", o.train.batch_size, "Pairs per micro-batch (full scale: 128)")->capture_default_str();
  app->add_option("--accumulation", o.train.accumulation, "Micro-batches per update (full scale: 4)")->capture_default_str();
  app->add_option("--epochs", o.train.epochs, "Passes over the training split")->capture_default_str();
  app->add_option("--max-steps", o.train.max_steps, "Optimizer-step cap (0: none)")->capture_default_str();
  app->add_option("--temperature", o.train.temperature, "Softmax temperature (full scale: 0.08)")->capture_default_str();
  app->add_flag("--learn-temperature", o.train.learn_temperature, "Train the inverse temperature");
  app->add_option("--valid-chunk", o.train.valid_chunk, "Chunk size of validation MRR (full scale: 1000)")
      ->capture_default_str();
  app->add_option("--max-text-tokens", o.max_text, "Text tokens per pair (full scale: 256)")->capture_default_str();
  app->add_option("--max-code-tokens", o.max_code, "Code tokens per pair (full scale: 256)")->capture_default_str();
  app->add_option("--seed", o.train.seed, "Adapter init and shuffling seed (default from CODESEARCH_SEED)")
      ->capture_default_str();
  app->add_option("--out", o.out, "Output directory")->capture_default_str();
  o.model.add(app);
  Command c{app, [&o](RunRecord& rec) {
              o.train.method = parse_method(o.method);
              const std::string vocab_path = join_path(o.data, "vocab.txt");
              const Vocab vocab = Vocab::load(vocab_path);
              auto [base, enc] = o.model.resolve_base(vocab);
              Model model = make_model(enc, base, o.train.method, o.model.adapter_config(o.train.method), o.train.seed);
              model.vocab_hash = vocab.hash();
              model.vocab_path = vocab_path;
              model.temperature = o.train.temperature;
              const auto train_pairs =
                  encode_split(join_path(o.data, "train.jsonl"), vocab, model, o.max_text, o.max_code);
              const auto valid_pairs =
                  encode_split(join_path(o.data, "valid.jsonl"), vocab, model, o.max_text, o.max_code);

              ensure_dir(o.out);
              std::ofstream log(join_path(o.out, "metrics.jsonl"), std::ios::binary | std::ios::trunc);
              require(log.good(), ErrorKind::kIo, "cannot write metrics log");
              TrainHooks hooks;
              hooks.log = &log;
              hooks.on_abort = [&](const Checkpoint& last) {
                last.save(join_path(o.out, "last_good.ckpt"));
                diagnostic("training aborted; last good state saved to " + join_path(o.out, "last_good.ckpt"));
              };
              const TrainResult r = train(o.train, model, train_pairs, valid_pairs, hooks);
              r.final_checkpoint.save(join_path(o.out, "final.ckpt"));
              rec.outputs = {"metrics.jsonl", "final.ckpt"};
              if (r.best_checkpoint) {
                r.best_checkpoint->save(join_path(o.out, "best.ckpt"));
                rec.outputs.push_back("best.ckpt");
              }
              rec.inputs = {join_path(o.data, "train.jsonl"), join_path(o.data, "valid.jsonl"), vocab_path};
              if (!o.model.base.empty()) rec.inputs.push_back(o.model.base);
              std::cout << "optimizer steps " << r.optimizer_steps << ", trainable scalars "
                        << r.final_checkpoint.scalar_count() << "\n";
              if (!r.steps.empty())
                std::cout << "loss " << r.steps.front().loss << " -> " << r.steps.back().loss << "\n";
            }};
  c.out = &o.out;
  c.seed = &o.train.seed;
  return c;
}

struct EvalOpts {
  std::string checkpoint, data, split = "test", protocol = "all-pairs", format = "text", out;
  std::size_t cutoff = 1000, chunk = 1000, max_text = 256, max_code = 256;
  bool exclude = false;
};

Command add_eval(CLI::App& root, EvalOpts& o) {
  auto* app = root.add_subcommand("eval", "Text-to-code MRR of a checkpoint on a split");
  app->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->capture_default_str();
  app->add_option("--data", o.data, "Prepared data directory")->capture_default_str();
  app->add_option("--split", o.split, "train|valid|test or a .jsonl path")->capture_default_str();
  app->add_option("--protocol", o.protocol, "all-pairs|chunked")->capture_default_str();
  app->add_option("--cutoff", o.cutoff, "All-pairs rank cutoff (full scale: 1000)")->capture_default_str();
  app->add_option("--chunk-size", o.chunk, "Chunked protocol size (full scale: 1000)")->capture_default_str();
  app->add_flag("--exclude-beyond-cutoff", o.exclude, "Drop queries ranked past the cutoff from the mean");
  app->add_option("--max-text-tokens", o.max_text, "Text tokens per pair (full scale: 256)")->capture_default_str();
  app->add_option("--max-code-tokens", o.max_code, "Code tokens per pair (full scale: 256)")->capture_default_str();
  app->add_option("--format", o.format, "text|json")->capture_default_str();
  app->add_option("--out", o.out, "Optional output directory for report.json")->capture_default_str();
  Command c{app, [&o](RunRecord& rec) {
              const Checkpoint ck = Checkpoint::load(o.checkpoint);
              const std::string vocab_path = join_path(o.data, "vocab.txt");
              const Vocab vocab = load_vocab_checked(vocab_path, ck.header.vocab_hash);
              const Model model = load_model(ck);
              const std::string path = split_path(o.data, o.split);
              const auto pairs = encode_split(path, vocab, model, o.max_text, o.max_code);
              require(!pairs.empty(), ErrorKind::kData, "split " + path + " is empty");
              std::vector<std::vector<std::int32_t>> text, code;
              for (const auto& p : pairs) {
                text.push_back(p.text);
                code.push_back(p.code);
              }
              const Tensor hc = embed_sequences(model.base, code, model.adapter_ptr());
              const Tensor ht = embed_sequences(model.base, text, model.adapter_ptr());
              const MrrReport report =
                  parse_protocol(o.protocol) == MrrProtocol::kAllPairs
                      ? mrr_all_pairs(hc, ht, o.cutoff, o.exclude ? CutoffRule::kExclude : CutoffRule::kZero)
                      : mrr_chunked(hc, ht, o.chunk);
              if (o.format == "json")
                std::cout << report.to_json().dump(2) << "\n";
              else
                std::cout << report.to_text();
              rec.inputs = {o.checkpoint, path, vocab_path};
              if (!o.out.empty()) {
                ensure_dir(o.out);
                write_file(join_path(o.out, "report.json"), report.to_json(true).dump(2) + "\n");
                rec.outputs = {"report.json"};
              }
            }};
  c.out = &o.out;
  return c;
}

struct AuditOpts {
  std::string encoder_config, profile = "audit", format = "text", out;
  AuditConfigs configs{};
};

Command add_audit(CLI::App& root, AuditOpts& o) {
  auto* app = root.add_subcommand("audit", "Trainable-parameter counts of the four PEFT methods");
  app->add_option("--encoder-config", o.encoder_config, "Encoder config JSON (overrides --profile)")
      ->capture_default_str();
  app->add_option("--profile", o.profile, "audit (L=12, d=768) or desk (L=2, d=64)")->capture_default_str();
  app->add_option("--lora-rank", o.configs.lora.rank, "LoRA rank (full scale: 8)")->capture_default_str();
  app->add_option("--adalora-r-init", o.configs.adalora.r_init, "AdaLoRA initial rank (full scale: 12)")
      ->capture_default_str();
  app->add_option("--prompt-tokens", o.configs.prompt.virtual_tokens, "Prompt tokens (full scale: 10)")
      ->capture_default_str();
  app->add_option("--format", o.format, "text|json")->capture_default_str();
  app->add_option("--out", o.out, "Optional output directory for audit.json")->capture_default_str();
  Command c{app, [&o](RunRecord& rec) {
              EncoderConfig enc;
              if (!o.encoder_config.empty()) {
                enc = EncoderConfig::from_json(read_json_file(o.encoder_config));
                rec.inputs = {o.encoder_config};
              } else if (o.profile == "audit") {
                enc = EncoderConfig::audit_profile();
              } else {
                require(o.profile == "desk", ErrorKind::kConfig, "unknown profile '" + o.profile + "'");
              }
              enc.validate();
              if (o.format == "json")
                std::cout << audit_json(enc, o.configs).dump(2) << "\n";
              else
                std::cout << audit_report(enc, o.configs);
              if (!o.out.empty()) {
                ensure_dir(o.out);
                write_file(join_path(o.out, "audit.json"), audit_json(enc, o.configs).dump(2) + "\n");
                rec.outputs = {"audit.json"};
              }
            }};
  c.out = &o.out;
  return c;
}

struct IndexOpts {
  std::string checkpoint, corpus, vocab, out;
  std::size_t max_text = 256, max_code = 256;
};

Command add_index(CLI::App& root, IndexOpts& o) {
  auto* app = root.add_subcommand("index", "Embed the code side of a corpus into a search index");
  app->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->capture_default_str();
  app->add_option("--corpus", o.corpus, "JSON Lines corpus")->capture_default_str();
  app->add_option("--vocab", o.vocab, "Vocabulary file (default: the checkpoint's)")->capture_default_str();
  app->add_option("--max-text-tokens", o.max_text, "Query tokens (full scale: 256)")->capture_default_str();
  app->add_option("--max-code-tokens", o.max_code, "Code tokens per snippet (full scale: 256)")->capture_default_str();
  app->add_option("--out", o.out, "Output directory")->capture_default_str();
  Command c{app, [&o](RunRecord& rec) {
              const std::string bytes = read_file(o.checkpoint);
              const Checkpoint ck = Checkpoint::parse(bytes);
              const std::string vocab_path = o.vocab.empty() ? ck.header.vocab_path : o.vocab;
              const Vocab vocab = load_vocab_checked(vocab_path, ck.header.vocab_hash);
              const Model model = load_model(ck);
              IndexSource source{o.corpus, {}};
              const auto records = read_jsonl(o.corpus, &source.spans);
              EmbeddingIndex ix = build_index(model, vocab, records, source, o.max_text, o.max_code);
              ix.fingerprint = fnv1a(bytes);
              ix.checkpoint_path = o.checkpoint;
              ix.vocab_path = vocab_path;
              ensure_dir(o.out);
              ix.save(join_path(o.out, "index.bin"));
              std::cout << "indexed " << ix.size() << " snippets, d_emb " << ix.dim() << "\n";
              rec.inputs = {o.checkpoint, o.corpus, vocab_path};
              rec.outputs = {"index.bin"};
            }};
  c.out = &o.out;
  return c;
}

struct SearchOpts {
  std::string index, checkpoint, queries, out;
  std::vector<std::string> query;
  std::size_t k = 10, context_budget = 0;
};

Command add_search(CLI::App& root, SearchOpts& o) {
  auto* app = root.add_subcommand("search", "Exact top-k text-to-code search over an index");
  app->add_option("--index", o.index, "Index file")->capture_default_str();
  app->add_option("--query", o.query, "Query text (repeatable)");
  app->add_option("--queries", o.queries, "JSON Lines file; every record's text is a query")->capture_default_str();
  app->add_option("--k", o.k, "Results per query")->capture_default_str();
  app->add_option("--checkpoint", o.checkpoint, "Checkpoint (default: the one that built the index)")
      ->capture_default_str();
  app->add_option("--context-budget", o.context_budget,
                  "If > 0, emit a RAG context block of at most this many tokens per query")
      ->capture_default_str();
  app->add_option("--out", o.out, "Optional output directory for results.jsonl / context.txt")
      ->capture_default_str();
  Command c{app, [&o](RunRecord& rec) {
              const EmbeddingIndex ix = EmbeddingIndex::load(o.index);
              const std::string ck_path = o.checkpoint.empty() ? ix.checkpoint_path : o.checkpoint;
              const std::string bytes = read_file(ck_path);
              ix.check_fingerprint(fnv1a(bytes));
              const Checkpoint ck = Checkpoint::parse(bytes);
              const Vocab vocab = load_vocab_checked(ix.vocab_path, ck.header.vocab_hash);
              const Model model = load_model(ck);

              std::vector<std::pair<std::string, std::string>> queries;  // (query id, text)
              for (std::size_t i = 0; i < o.query.size(); ++i) queries.emplace_back("q" + std::to_string(i), o.query[i]);
              if (!o.queries.empty())
                for (const auto& r : read_jsonl(o.queries)) queries.emplace_back(r.id, r.text);
              require(!queries.empty(), ErrorKind::kConfig, "give --query or --queries");

              std::string results, context;
              for (const auto& [qid, text] : queries) {
                const QueryResult r = search(ix, model, vocab, text, o.k);
                json line = r.to_json();
                line["query_id"] = qid;
                results += line.dump() + "\n";
                if (o.context_budget) context += export_context(ix, r, o.context_budget);
              }
              rec.inputs = {o.index, ck_path};
              if (!o.queries.empty()) rec.inputs.push_back(o.queries);
              if (o.out.empty()) {
                std::cout << (o.context_budget ? context : results);
                return;
              }
              ensure_dir(o.out);
              write_file(join_path(o.out, "results.jsonl"), results);
              rec.outputs = {"results.jsonl"};
              if (o.context_budget) {
                write_file(join_path(o.out, "context.txt"), context);
                rec.outputs.push_back("context.txt");
              }
              std::cout << (o.context_budget ? context : results);
            }};
  c.out = &o.out;
  return c;
}

struct RougeOpts {
  std::string candidates, references, format = "text", out;
};

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kIo, "cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

Command add_rouge(CLI::App& root, RougeOpts& o) {
  auto* app = root.add_subcommand("rouge", "Mean ROUGE-1/2/L of candidates against references (one per line)");
  app->add_option("--candidates", o.candidates, "Candidate file")->capture_default_str();
  app->add_option("--references", o.references, "Reference file")->capture_default_str();
  app->add_option("--format", o.format, "text|json")->capture_default_str();
  app->add_option("--out", o.out, "Optional output directory for rouge.json")->capture_default_str();
  Command c{app, [&o](RunRecord& rec) {
              std::vector<std::vector<std::string>> cand, ref;
              for (const auto& l : read_lines(o.candidates)) cand.push_back(tokenize(l, TokenMode::kText));
              for (const auto& l : read_lines(o.references)) ref.push_back(tokenize(l, TokenMode::kText));
              const RougeReport r = rouge_corpus(cand, ref);
              if (o.format == "json") {
                std::cout << r.to_json().dump(2) << "\n";
              } else {
                char buf[160];
                for (auto [name, s] : {std::pair{"rouge1", r.rouge1}, {"rouge2", r.rouge2}, {"rougeL", r.rougeL}}) {
                  std::snprintf(buf, sizeof buf, "%-8s P %.4f  R %.4f  F1 %.4f\n", name, s.precision, s.recall, s.f1);
                  std::cout << buf;
                }
              }
              rec.inputs = {o.candidates, o.references};
              if (!o.out.empty()) {
                ensure_dir(o.out);
                write_file(join_path(o.out, "rouge.json"), r.to_json().dump(2) + "\n");
                rec.outputs = {"rouge.json"};
              }
            }};
  c.out = &o.out;
  return c;
}

int run(int argc, char** argv, const json* injected = nullptr);

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }

namespace {

int run(int argc, char** argv, const json* injected) {
  CLI::App root{"Parameter-efficient contrastive fine-tuning and text-to-code retrieval"};
  root.set_version_flag("--version", kToolVersion);
  root.require_subcommand(1);

  SynthOpts synth_o;
  PrepareOpts prepare_o;
  TrainOpts train_o;
  EvalOpts eval_o;
  AuditOpts audit_o;
  IndexOpts index_o;
  SearchOpts search_o;
  RougeOpts rouge_o;
  std::vector<Command> commands{add_synth(root, synth_o),   add_prepare(root, prepare_o), add_train(root, train_o),
                                add_eval(root, eval_o),     add_audit(root, audit_o),     add_index(root, index_o),
                                add_search(root, search_o), add_rouge(root, rouge_o)};
  std::vector<std::string> config_paths(commands.size());
  for (std::size_t i = 0; i < commands.size(); ++i)
    commands[i].app->add_option("--config", config_paths[i], "JSON file of flag values (flags take precedence)");

  std::string manifest_path;
  auto* replay = root.add_subcommand("replay", "Re-run a command from its manifest.json");
  replay->add_option("--manifest", manifest_path, "Manifest file")->required();

  try {
    root.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = root.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (replay->parsed()) {
      const json m = read_json_file(manifest_path);
      require(m.is_object() && m.contains("command") && m.contains("config"), ErrorKind::kConfig,
              manifest_path + " is not a run manifest");
      const std::string cmd = m.at("command").get<std::string>();
      std::string prog = argv[0];
      std::vector<char*> args{prog.data(), const_cast<char*>(cmd.c_str())};
      const json config = m.at("config");
      const int code = run(static_cast<int>(args.size()), args.data(), &config);
      return code;
    }

    for (std::size_t i = 0; i < commands.size(); ++i) {
      Command& c = commands[i];
      if (!c.app->parsed()) continue;
      if (injected) apply_config(*c.app, *injected);
      if (!config_paths[i].empty()) apply_config(*c.app, read_json_file(config_paths[i]));
      if (c.seed && c.app->get_option("--seed")->count() == 0)
        if (const char* env = std::getenv("CODESEARCH_SEED")) {
          auto* opt = c.app->get_option("--seed");
          opt->add_result(std::string(env));
          opt->run_callback();
        }
      RunRecord rec;
      rec.command = c.app->get_name();
      rec.config = resolved_options(*c.app);
      if (c.seed) rec.seed = *c.seed;
      c.run(rec);
      if (c.out && !c.out->empty()) write_manifest(*c.out, rec);
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "codesearch: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const CLI::Error& e) {
    std::cerr << "codesearch: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "codesearch: internal error: " << e.what() << "\n";
    return 6;
  }
  return 1;
}

}  // namespace
