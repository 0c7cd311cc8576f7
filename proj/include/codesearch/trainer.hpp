// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "codesearch/checkpoint.hpp"
#include "codesearch/contrastive.hpp"
#include "codesearch/metrics.hpp"
#include "codesearch/optim.hpp"

namespace codesearch {

struct TrainConfig {
  Method method = Method::kLora;
  double lr = 1e-3;
  double lr_min = 0.0;
  std::size_t batch_size = 32;
  std::size_t accumulation = 4;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // optimizer-step cap, 0 = none
  double temperature = 0.08;
  bool learn_temperature = false;
  std::uint64_t seed = 0;
  std::size_t valid_chunk = 1000;

  void validate() const {
    require(lr > 0.0 && std::isfinite(lr), ErrorKind::kConfig, "lr must be positive");
    require(lr_min >= 0.0 && lr_min <= lr, ErrorKind::kConfig, "lr_min must lie in [0, lr]");
    require(accumulation >= 1, ErrorKind::kConfig, "accumulation must be at least 1");
    require(batch_size >= 2, ErrorKind::kConfig, "batch size must be at least 2 for in-batch negatives");
    require(temperature > 0.0, ErrorKind::kConfig, "temperature must be positive");
    require(valid_chunk >= 1, ErrorKind::kConfig, "valid_chunk must be at least 1");
  }

  nlohmann::json to_json() const {
    return {{"method", to_string(method)},
            {"lr", lr},
            {"lr_min", lr_min},
            {"batch_size", batch_size},
            {"accumulation", accumulation},
            {"epochs", epochs},
            {"max_steps", max_steps},
            {"temperature", temperature},
            {"learn_temperature", learn_temperature},
            {"seed", seed},
            {"valid_chunk", valid_chunk}};
  }
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double valid_mrr = 0.0;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  Checkpoint final_checkpoint;
  std::optional<Checkpoint> best_checkpoint;
  double best_valid_mrr = -1.0;
  std::size_t optimizer_steps = 0;
};

struct TrainHooks {
  std::ostream* log = nullptr;                            // JSON Lines metrics
  std::function<void(const Checkpoint&)> on_abort;        // receives the last good state
};

// Chunked validation MRR; the chunk shrinks to the split size when the split
// is smaller than the configured chunk.
inline double validation_mrr(const Model& model, const std::vector<EncodedPair>& valid, std::size_t chunk) {
  std::vector<std::vector<std::int32_t>> text, code;
  for (const auto& p : valid) {
    text.push_back(p.text);
    code.push_back(p.code);
  }
  const Tensor hc = embed_sequences(model.base, code, model.adapter_ptr());
  const Tensor ht = embed_sequences(model.base, text, model.adapter_ptr());
  return mrr_chunked(hc, ht, std::min(chunk, valid.size())).mrr;
}

// Micro-batches run in a continuous stream across epochs; every
// `accumulation` of them (or the leftover at the very end) form one optimizer
// update whose direction is the gradient of the summed micro-batch losses.
inline TrainResult train(const TrainConfig& config, Model& model, const std::vector<EncodedPair>& train_pairs,
                         const std::vector<EncodedPair>& valid_pairs = {}, const TrainHooks& hooks = {}) {
  config.validate();
  require(model.method == config.method, ErrorKind::kConfig, "model and config disagree on the method");
  require(train_pairs.size() >= config.batch_size, ErrorKind::kData,
          "training split has " + std::to_string(train_pairs.size()) + " pairs, fewer than one batch of " +
              std::to_string(config.batch_size));

  const bool updates = config.method != Method::kNone;
  std::vector<Parameter*> params = model.persisted();
  std::optional<Parameter> inv_temp;
  if (config.learn_temperature && updates) {
    inv_temp.emplace("loss.inverse_temperature", Tensor({1}, 1.0 / config.temperature));
    params.push_back(&*inv_temp);
  }
  Adam adam(params);
  auto* ada = dynamic_cast<AdaLoraAdapter*>(model.adapter.get());

  const std::size_t per_epoch = train_pairs.size() / config.batch_size;
  const std::size_t micro_total = per_epoch * config.epochs;
  std::size_t horizon = (micro_total + config.accumulation - 1) / config.accumulation;
  if (config.max_steps) horizon = std::min(horizon, config.max_steps);
  horizon = std::max<std::size_t>(horizon, 1);

  TrainResult result;
  auto emit = [&](const nlohmann::json& j) {
    if (hooks.log) *hooks.log << j.dump() << '\n';
  };
  auto current_temperature = [&] { return inv_temp ? 1.0 / inv_temp->value()[0] : config.temperature; };

  std::size_t pending = 0;
  double pending_loss = 0.0;
  auto apply_update = [&] {
    const std::size_t t = adam.steps();
    for (Parameter* p : params)
      if (p->var.has_grad() && !p->var.grad().all_finite()) {
        if (hooks.on_abort) hooks.on_abort(model.snapshot(t));
        fail(ErrorKind::kNumeric, "non-finite gradient at optimizer step " + std::to_string(t));
      }
    const double lr = cosine_annealing(t, horizon, config.lr, config.lr_min);
    if (ada) ada->step(t + 1);
    adam.step(lr);
    adam.zero_grad();
    StepRecord rec{t + 1, lr, pending_loss / static_cast<double>(pending)};
    result.steps.push_back(rec);
    emit({{"step", rec.step}, {"lr", rec.lr}, {"loss", rec.loss}});
    pending = 0;
    pending_loss = 0.0;
  };

  bool done = !updates;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (!done) {
      const auto batches = make_batches(train_pairs, config.batch_size, config.seed, epoch, true);
      for (const Batch& batch : batches) {
        const BatchEmbeddings e = encode_batch(model.base, batch, model.adapter_ptr());
        const Var s = inv_temp ? similarity(e.code, e.text, inv_temp->var)
                               : similarity(e.code, e.text, config.temperature);
        const Var contrastive = nt_xent(s);
        if (!std::isfinite(contrastive.item())) {
          if (hooks.on_abort) hooks.on_abort(model.snapshot(adam.steps()));
          fail(ErrorKind::kNumeric, "non-finite loss at optimizer step " + std::to_string(adam.steps()));
        }
        Var loss = contrastive;
        if (model.adapter)
          if (const Var reg = model.adapter->regularizer(); reg.defined()) loss = add(loss, reg);
        backward(loss);
        pending_loss += contrastive.item();
        if (++pending == config.accumulation) apply_update();
        if (config.max_steps && adam.steps() >= config.max_steps) {
          done = true;
          break;
        }
      }
      const bool last_epoch = epoch + 1 == config.epochs;
      if (pending && (last_epoch || done)) apply_update();
    }

    if (!valid_pairs.empty()) {
      model.temperature = current_temperature();
      const double mrr = validation_mrr(model, valid_pairs, config.valid_chunk);
      result.epochs.push_back({epoch + 1, mrr});
      emit({{"epoch", epoch + 1}, {"valid_mrr", mrr}});
      if (mrr > result.best_valid_mrr) {
        result.best_valid_mrr = mrr;
        result.best_checkpoint = model.snapshot(adam.steps());
      }
    }
    if (done && updates) break;
  }

  model.temperature = current_temperature();
  result.optimizer_steps = adam.steps();
  result.final_checkpoint = model.snapshot(adam.steps());
  return result;
}

}  // namespace codesearch
