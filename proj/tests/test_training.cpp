// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "test_util.hpp"

using namespace codesearch;

namespace {

struct Corpus {
  Vocab vocab;
  std::vector<EncodedPair> pairs;
};

Corpus synthetic_corpus(std::size_t n, std::uint64_t seed = 7) {
  SyntheticConfig sc;
  sc.pairs = n;
  sc.concepts = 40;
  sc.seed = seed;
  const auto records = synthesize(sc);
  Corpus c{build_vocab(records, 10000), {}};
  c.pairs = encode_pairs(records, c.vocab, 256, 256);
  return c;
}

EncoderConfig small_encoder(std::size_t vocab) {
  EncoderConfig c;
  c.layers = 1;
  c.d_model = 16;
  c.heads = 2;
  c.d_ff = 32;
  c.vocab_size = vocab;
  c.max_len = 40;
  c.d_emb = 8;
  return c;
}

Model small_model(const Corpus& corpus, Method m, std::uint64_t seed = 1) {
  const nlohmann::json cfg = m == Method::kPrompt ? PromptConfig{.virtual_tokens = 4}.to_json() : nlohmann::json();
  Model model = make_model(small_encoder(corpus.vocab.size()), BaseDescriptor::seeded(3), m, cfg, seed);
  model.vocab_hash = corpus.vocab.hash();
  return model;
}

TrainConfig small_train(Method m) {
  TrainConfig t;
  t.method = m;
  t.lr = 1e-2;
  t.batch_size = 8;
  t.accumulation = 2;
  t.epochs = 2;
  t.seed = 5;
  return t;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("codesearch_test_" + name)).string();
}

}  // namespace

TEST(Cosine, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_annealing(0, 100, 1e-3, 1e-5), 1e-3);
  EXPECT_NEAR(cosine_annealing(100, 100, 1e-3, 1e-5), 1e-5, 1e-18);
  EXPECT_NEAR(cosine_annealing(50, 100, 1e-3, 1e-5), (1e-3 + 1e-5) / 2, 1e-18);
}

TEST(Cosine, PastHorizonClampsWithDiagnostic) {
  cs_test::DiagnosticCapture cap;
  EXPECT_EQ(cosine_annealing(101, 100, 1e-3, 2e-4), 2e-4);
  EXPECT_EQ(cap.messages.size(), 1u);
  EXPECT_THROW(cosine_annealing(0, 0, 1e-3), Error);
}

TEST(Adam, ZeroGradientLeavesParameterUnchanged) {
  Parameter p("w", Tensor::vector({0.25, -1.5}));
  Adam adam({&p});
  for (int k = 0; k < 5; ++k) {
    p.var.mutable_grad().fill(0.0);
    adam.step(0.1);
  }
  EXPECT_EQ(p.value()[0], 0.25);
  EXPECT_EQ(p.value()[1], -1.5);
}

TEST(Adam, FirstStepWithUnitGradient) {
  Parameter p("w", Tensor::vector({1.0}));
  Adam adam({&p});
  p.var.mutable_grad()[0] = 1.0;
  adam.step(0.1);
  // m_hat = v_hat = 1, so the step is lr / (1 + eps).
  EXPECT_NEAR(p.value()[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, FrozenParameterGetsNoStateAndNoUpdate) {
  Parameter live("live", Tensor::vector({1.0})), frozen("frozen", Tensor::vector({2.0}), false);
  Adam adam({&live, &frozen});
  live.var.mutable_grad()[0] = 1.0;
  adam.step(0.1);
  EXPECT_TRUE(adam.has_state("live"));
  EXPECT_FALSE(adam.has_state("frozen"));
  EXPECT_EQ(frozen.value()[0], 2.0);
}

TEST(Trainer, MicroBatchGradientsAddUp) {
  const Corpus corpus = synthetic_corpus(32);
  Model model = small_model(corpus, Method::kIa3);
  const auto batches = make_batches(corpus.pairs, 8, 1);
  auto loss_of = [&](const Batch& b) {
    const auto e = encode_batch(model.base, b, model.adapter_ptr());
    return nt_xent(similarity(e.code, e.text, 0.08));
  };
  const auto params = model.persisted();
  for (Parameter* p : params) p->var.zero_grad();
  backward(loss_of(batches[0]));
  backward(loss_of(batches[1]));
  std::vector<Tensor> accumulated;
  for (Parameter* p : params) accumulated.push_back(p->var.grad());
  for (Parameter* p : params) p->var.zero_grad();
  backward(add(loss_of(batches[0]), loss_of(batches[1])));
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_LE(max_abs_diff(params[i]->var.grad(), accumulated[i]), 1e-13);
}

TEST(Trainer, StepCountFollowsAccumulationWithFinalFlush) {
  const Corpus corpus = synthetic_corpus(80);
  Model model = small_model(corpus, Method::kLora);
  TrainConfig t = small_train(Method::kLora);
  t.accumulation = 4;
  t.epochs = 1;
  t.batch_size = 8;  // 10 micro-batches -> updates after 4, 8 and a flush of 2
  const auto r = train(t, model, corpus.pairs);
  EXPECT_EQ(r.optimizer_steps, 3u);
  ASSERT_EQ(r.steps.size(), 3u);
  EXPECT_DOUBLE_EQ(r.steps[0].lr, t.lr);
}

TEST(Trainer, MaxStepsCapsUpdates) {
  const Corpus corpus = synthetic_corpus(64);
  Model model = small_model(corpus, Method::kIa3);
  TrainConfig t = small_train(Method::kIa3);
  t.epochs = 50;
  t.max_steps = 7;
  EXPECT_EQ(train(t, model, corpus.pairs).optimizer_steps, 7u);
}

TEST(Trainer, SameSeedSameLossTrace) {
  const Corpus corpus = synthetic_corpus(48);
  auto run = [&] {
    Model model = small_model(corpus, Method::kAdaLora);
    std::ostringstream log;
    train(small_train(Method::kAdaLora), model, corpus.pairs, {}, {&log, {}});
    return log.str();
  };
  const std::string a = run();
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, run());
}

TEST(Trainer, FrozenBaseIsBitwiseUnchanged) {
  const Corpus corpus = synthetic_corpus(48);
  for (Method m : {Method::kLora, Method::kAdaLora, Method::kIa3, Method::kPrompt}) {
    Model model = small_model(corpus, m);
    const auto before = model.base.fingerprint();
    const auto r = train(small_train(m), model, corpus.pairs);
    EXPECT_GT(r.optimizer_steps, 0u);
    EXPECT_EQ(model.base.fingerprint(), before) << to_string(m);
    EXPECT_EQ(r.final_checkpoint.scalar_count(), count_trainable(m, model.adapter_config, model.base.config));
  }
}

TEST(Trainer, MethodNoneChangesNothing) {
  const Corpus corpus = synthetic_corpus(64);
  Model model = small_model(corpus, Method::kNone);
  const std::vector<EncodedPair> valid(corpus.pairs.begin(), corpus.pairs.begin() + 16);
  const double before = validation_mrr(model, valid, 1000);
  const auto fp = model.base.fingerprint();
  TrainConfig t = small_train(Method::kNone);
  const auto r = train(t, model, corpus.pairs, valid);
  EXPECT_EQ(r.optimizer_steps, 0u);
  EXPECT_TRUE(r.steps.empty());
  EXPECT_EQ(model.base.fingerprint(), fp);
  ASSERT_EQ(r.epochs.size(), 2u);
  EXPECT_EQ(r.epochs[0].valid_mrr, before);
  EXPECT_EQ(r.epochs[1].valid_mrr, before);
  EXPECT_EQ(r.final_checkpoint.scalar_count(), 0u);
}

TEST(Trainer, FullModeUpdatesTheBase) {
  const Corpus corpus = synthetic_corpus(32);
  Model model = small_model(corpus, Method::kFull);
  const auto before = model.base.fingerprint();
  train(small_train(Method::kFull), model, corpus.pairs);
  EXPECT_NE(model.base.fingerprint(), before);
}

TEST(Trainer, BestCheckpointTracksValidation) {
  const Corpus corpus = synthetic_corpus(96);
  Model model = small_model(corpus, Method::kLora);
  const std::vector<EncodedPair> train_pairs(corpus.pairs.begin(), corpus.pairs.begin() + 64),
      valid(corpus.pairs.begin() + 64, corpus.pairs.end());
  TrainConfig t = small_train(Method::kLora);
  t.epochs = 3;
  std::ostringstream log;
  const auto r = train(t, model, train_pairs, valid, {&log, {}});
  ASSERT_TRUE(r.best_checkpoint.has_value());
  ASSERT_EQ(r.epochs.size(), 3u);
  double best = 0;
  for (const auto& e : r.epochs) best = std::max(best, e.valid_mrr);
  EXPECT_EQ(r.best_valid_mrr, best);
  std::size_t epoch_lines = 0, step_lines = 0;
  std::istringstream lines(log.str());
  for (std::string line; std::getline(lines, line);) {
    const auto j = nlohmann::json::parse(line);
    epoch_lines += j.contains("valid_mrr");
    step_lines += j.contains("loss") && j.contains("lr") && j.contains("step");
  }
  EXPECT_EQ(epoch_lines, 3u);
  EXPECT_EQ(step_lines, r.optimizer_steps);
}

TEST(Trainer, NonFiniteStateAbortsWithLastGoodCheckpoint) {
  const Corpus corpus = synthetic_corpus(32);
  Model model = small_model(corpus, Method::kIa3);
  model.adapter->parameters()[0]->mutable_value()[0] = std::nan("");
  bool called = false;
  TrainHooks hooks;
  hooks.on_abort = [&](const Checkpoint& c) {
    called = true;
    EXPECT_EQ(c.header.step, 0u);
  };
  try {
    train(small_train(Method::kIa3), model, corpus.pairs, {}, hooks);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumeric);
  }
  EXPECT_TRUE(called);
}

TEST(Trainer, RejectsBadConfigs) {
  const Corpus corpus = synthetic_corpus(16);
  Model model = small_model(corpus, Method::kLora);
  TrainConfig t = small_train(Method::kLora);
  t.batch_size = 1;
  EXPECT_THROW(train(t, model, corpus.pairs), Error);
  t = small_train(Method::kIa3);
  EXPECT_THROW(train(t, model, corpus.pairs), Error);  // method mismatch
  t = small_train(Method::kLora);
  t.batch_size = 32;
  EXPECT_THROW(train(t, model, corpus.pairs), Error);  // fewer pairs than one batch
}

// Learning floor on the desk corpus: 200 LoRA steps halve the training loss.
TEST(Trainer, LoraHalvesTrainingLossOnDeskCorpus) {
  const auto records = synthesize({});
  const Vocab vocab = build_vocab(records, 10000);
  const auto pairs = encode_pairs(records, vocab, 256, 256);
  EncoderConfig enc;
  enc.vocab_size = vocab.size();
  Model model = make_model(enc, BaseDescriptor::seeded(1), Method::kLora, nullptr, 0);
  TrainConfig t;
  t.method = Method::kLora;
  t.lr = 1e-2;
  t.batch_size = 32;
  t.accumulation = 1;
  t.epochs = 100;
  t.max_steps = 200;
  const auto r = train(t, model, pairs);
  ASSERT_EQ(r.steps.size(), 200u);
  double tail = 0;
  for (std::size_t i = 190; i < 200; ++i) tail += r.steps[i].loss / 10.0;
  EXPECT_LE(tail, 0.5 * r.steps.front().loss) << "first " << r.steps.front().loss << " tail " << tail;
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const Corpus corpus = synthetic_corpus(32);
  for (Method m : {Method::kLora, Method::kAdaLora, Method::kIa3, Method::kPrompt, Method::kFull}) {
    Model model = small_model(corpus, m);
    train(small_train(m), model, corpus.pairs);
    const std::string first = model.snapshot(4).serialize();
    const Checkpoint parsed = Checkpoint::parse(first);
    EXPECT_EQ(parsed.serialize(), first) << to_string(m);
    Model reloaded = load_model(parsed);
    EXPECT_EQ(reloaded.snapshot(4).serialize(), first) << to_string(m);
  }
}

TEST(Checkpoint, ForwardDriftAfterRoundTripIsBelowFloat32Precision) {
  const Corpus corpus = synthetic_corpus(32);
  for (Method m : {Method::kLora, Method::kAdaLora, Method::kIa3, Method::kPrompt}) {
    Model model = small_model(corpus, m);
    train(small_train(m), model, corpus.pairs);
    Model reloaded = load_model(Checkpoint::parse(model.snapshot(0).serialize()));
    std::vector<std::vector<std::int32_t>> seqs;
    for (std::size_t i = 0; i < 8; ++i) seqs.push_back(corpus.pairs[i].code);
    const Tensor a = embed_sequences(model.base, seqs, model.adapter_ptr());
    const Tensor b = embed_sequences(reloaded.base, seqs, reloaded.adapter_ptr());
    EXPECT_LE(max_abs_diff(a, b), 1e-6) << to_string(m);
  }
}

TEST(Checkpoint, TamperedVersionOrPayloadIsRejected) {
  const Corpus corpus = synthetic_corpus(16);
  Model model = small_model(corpus, Method::kIa3);
  const std::string bytes = model.snapshot(0).serialize();
  auto kind_of = [](const std::string& b) {
    try {
      Checkpoint::parse(b);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kDimension;
  };
  std::string v2 = bytes;
  v2.replace(v2.find("\"format_version\":1"), 18, "\"format_version\":2");
  EXPECT_EQ(kind_of(v2), ErrorKind::kLoad);
  std::string flipped = bytes;
  flipped.back() ^= 0x01;
  EXPECT_EQ(kind_of(flipped), ErrorKind::kLoad);
  EXPECT_EQ(kind_of(bytes.substr(0, bytes.size() - 4)), ErrorKind::kLoad);
  EXPECT_EQ(kind_of("not a checkpoint"), ErrorKind::kLoad);
}

TEST(Checkpoint, RestoreRequiresMatchingIdsAndShapes) {
  const Corpus corpus = synthetic_corpus(16);
  Model lora = small_model(corpus, Method::kLora), ia3 = small_model(corpus, Method::kIa3);
  EXPECT_THROW(restore(lora.snapshot(0), ia3.persisted()), Error);
  Checkpoint c = ia3.snapshot(0);
  c.tensors[0].value = Tensor({3});
  EXPECT_THROW(restore(c, ia3.persisted()), Error);
}

TEST(Checkpoint, IncompatibleConfigOrVocabIsConfigError) {
  const Corpus corpus = synthetic_corpus(16);
  Model model = small_model(corpus, Method::kLora);
  const auto h = model.snapshot(0).header;
  EXPECT_NO_THROW(check_compatible(h, model.base.config, corpus.vocab.hash()));
  EncoderConfig other = model.base.config;
  other.d_emb = 4;
  try {
    check_compatible(h, other, corpus.vocab.hash());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
  EXPECT_THROW(check_compatible(h, model.base.config, corpus.vocab.hash() ^ 1), Error);
}

TEST(Checkpoint, FileBaseIsFingerprinted) {
  const Corpus corpus = synthetic_corpus(32);
  Model full = small_model(corpus, Method::kFull);
  train(small_train(Method::kFull), full, corpus.pairs);
  const std::string base_path = temp_path("base.ckpt");
  full.snapshot(1).save(base_path);

  Model adapted = make_model(full.base.config, BaseDescriptor::file(base_path), Method::kLora, nullptr, 2);
  EXPECT_EQ(adapted.base.fingerprint(), load_model(base_path).base.fingerprint());
  for (const Parameter* p : adapted.base.parameters()) EXPECT_FALSE(p->trainable());
  const Checkpoint ck = adapted.snapshot(0);
  EXPECT_NO_THROW(load_model(ck));

  Model other = small_model(corpus, Method::kFull);
  TrainConfig t = small_train(Method::kFull);
  t.seed = 6;
  train(t, other, corpus.pairs);
  other.snapshot(1).save(base_path);
  try {
    load_model(ck);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFingerprint);
  }
  std::filesystem::remove(base_path);
}

TEST(Checkpoint, AdaLoraMasksSurviveRoundTrip) {
  const Corpus corpus = synthetic_corpus(32);
  Model model = small_model(corpus, Method::kAdaLora);
  auto* ada = dynamic_cast<AdaLoraAdapter*>(model.adapter.get());
  ada->triplets(0, Projection::kQuery).mask[3] = 0;
  Model reloaded = load_model(Checkpoint::parse(model.snapshot(0).serialize()));
  EXPECT_EQ(dynamic_cast<AdaLoraAdapter*>(reloaded.adapter.get())->masks_to_json(), ada->masks_to_json());
}
