// SPDX-License-Identifier: Apache-2.0
#include "zobridge/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace zobridge {

void TrainConfig::validate() const {
  if (!(lr_encoder_decoder >= 0.0) || !(lr_predictor >= 0.0)) throw InvalidArgument("learning rates must be >= 0");
  if (batch_size_stage1 < 1 || batch_size_stage2 < 1) throw InvalidArgument("batch sizes must be >= 1");
  if (!(clip_norm > 0.0)) throw InvalidArgument("clip_norm must be > 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidArgument("lambda must be finite and >= 0");
  bridge().latent.validate();
  bridge().params.validate();
}

double TrainConfig::lr_for(const std::string& block) const {
  return autoencoder_blocks.count(block) ? lr_encoder_decoder : lr_predictor;
}

BridgeConfig TrainConfig::bridge() const {
  ZoConfig base;
  base.kind = zo_kind;
  base.sigma = sigma;
  base.k_samples = k_samples;
  base.threads = threads;
  BridgeConfig b{base, base};
  b.latent.mu = mu_latent;
  b.latent.stream_id = 1;
  b.params.mu = mu_params;
  b.params.stream_id = 2;
  return b;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

std::string RunMetrics::jsonl() const {
  std::string out;
  for (const auto& e : epochs) {
    nlohmann::ordered_json j;
    j["stage"] = e.stage;
    j["epoch"] = e.epoch;
    j["steps"] = e.steps;
    j["train_loss"] = e.train_loss;
    j["train_rmse"] = e.train_rmse;
    j["test_rmse"] = e.test_rmse;
    j["recon_accuracy_train"] = optional_json(e.recon_accuracy_train);
    j["recon_accuracy_test"] = optional_json(e.recon_accuracy_test);
    j["zo_queries"] = e.zo_queries;
    out += j.dump() + "\n";
  }
  return out;
}

std::string RunMetrics::timing_jsonl() const {
  std::string out;
  for (const auto& e : epochs) {
    nlohmann::ordered_json j;
    j["stage"] = e.stage;
    j["epoch"] = e.epoch;
    j["wall_seconds"] = e.wall_seconds;
    out += j.dump() + "\n";
  }
  return out;
}

std::string RunMetrics::gnuplot() const {
  std::ostringstream os;
  os.precision(10);
  os << "# epoch steps train_loss train_rmse test_rmse recon_accuracy_test\n";
  for (const auto& e : epochs)
    os << e.epoch << ' ' << e.steps << ' ' << e.train_loss << ' ' << e.train_rmse << ' ' << e.test_rmse << ' '
       << (e.recon_accuracy_test ? *e.recon_accuracy_test : std::nan("")) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

double rmse(std::span<const Vec> y, std::span<const Vec> y_hat) {
  if (y.size() != y_hat.size()) throw InvalidArgument("rmse: length mismatch");
  if (y.empty()) throw InvalidArgument("rmse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i].size() != y_hat[i].size()) throw InvalidArgument("rmse: width mismatch");
    const Vec r = y[i] - y_hat[i];
    acc += dot(r, r);
  }
  return std::sqrt(acc / static_cast<double>(y.size()));
}

double pipeline_rmse(const PipelineState& ps, std::span<const Example> data) {
  std::vector<Vec> y, y_hat;
  for (const auto& ex : data) {
    y.push_back(ex.y);
    y_hat.push_back(forward_predict(ps, ex.x).y_hat);
  }
  return rmse(y, y_hat);
}

double reconstruction_accuracy(std::span<const Vec> objects, const PipelineState& ps) {
  if (objects.empty()) throw InvalidArgument("reconstruction_accuracy: no objects");
  if (!ps.recon_decoder || !ps.discretizer)
    throw InvalidArgument("reconstruction_accuracy: pipeline has no discretizable reconstruction path");
  const auto disc_params = ps.params_for(*ps.discretizer);
  std::size_t exact = 0;
  for (const auto& x : objects) {
    const Vec back = ps.discretizer->forward(reconstruct(ps, x), disc_params);
    if (back.size() == x.size() && (back.array() == x.array()).all()) ++exact;
  }
  return static_cast<double>(exact) / static_cast<double>(objects.size());
}

double reconstruction_accuracy(std::span<const Example> data, const PipelineState& ps) {
  std::vector<Vec> objects;
  for (const auto& ex : data) objects.push_back(ex.x);
  return reconstruction_accuracy(objects, ps);
}

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::size_t> shuffled(std::size_t n, Rng rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::vector<Example> gather_batch(std::span<const Example> data, const std::vector<std::size_t>& order,
                                  std::size_t begin, std::size_t size) {
  std::vector<Example> batch;
  for (std::size_t i = begin; i < std::min(order.size(), begin + size); ++i) batch.push_back(data[order[i]]);
  return batch;
}

bool finite_bundle(const GradientBundle& b) {
  if (!std::isfinite(b.loss.total)) return false;
  for (const auto& g : b.grads)
    if (!all_finite(g)) return false;
  return true;
}

EpochRecord evaluate(const std::string& stage, std::size_t epoch, std::size_t steps, const PipelineState& ps,
                     std::span<const Example> train, std::span<const Example> test, double lambda) {
  EpochRecord r;
  r.stage = stage;
  r.epoch = epoch;
  r.steps = steps;
  r.train_loss = batch_loss(ps, train, LossSpec{lambda}).total;
  r.train_rmse = pipeline_rmse(ps, train);
  r.test_rmse = test.empty() ? std::nan("") : pipeline_rmse(ps, test);
  if (ps.recon_decoder && ps.discretizer) {
    r.recon_accuracy_train = reconstruction_accuracy(train, ps);
    if (!test.empty()) r.recon_accuracy_test = reconstruction_accuracy(test, ps);
  }
  return r;
}

/// Tracks the early-stopping patience counter on train loss.
struct Patience {
  std::optional<std::size_t> limit;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;

  bool should_stop(double loss) {
    if (!limit) return false;
    if (loss < best) {
      best = loss;
      stale = 0;
      return false;
    }
    return ++stale >= *limit;
  }
};

}  // namespace

TrainResult stage1_train(const Stage1Task& task, const TrainConfig& cfg) {
  cfg.validate();
  task.pipeline.validate();
  task.predictor.validate();
  if (task.train.empty()) throw InvalidArgument("stage1: empty training set");
  if (task.predictor_train.empty()) throw InvalidArgument("stage1: empty predictor training set");

  PipelineState ae = task.pipeline;
  PipelineState pred = task.predictor;
  for (auto& b : ae.params.blocks()) b.frozen = false;
  for (auto& b : pred.params.blocks()) b.frozen = false;

  // The predictor owns the blocks it shares with the pipeline's middle/tail.
  auto merged = [&] {
    PipelineState full = ae;
    for (const auto& b : pred.params.blocks())
      if (full.params.contains(b.name)) full.params.at(b.name).values = b.values;
    return full;
  };

  Optimizer ae_opt(cfg.optimizer), pred_opt(cfg.optimizer);
  auto lr = [&](const std::string& name) { return cfg.lr_for(name); };
  const Rng root(cfg.seed, 0x5747451);
  const LossSpec eval_spec{cfg.lambda};
  TrainResult result;
  std::size_t steps = 0;

  result.metrics.epochs.push_back(evaluate("stage1", 0, 0, merged(), task.train, task.test, eval_spec.lambda));
  Patience patience{cfg.patience};

  for (std::size_t epoch = 1; epoch <= cfg.epochs_stage1; ++epoch) {
    const auto start = Clock::now();
    const PipelineState before_ae = ae;
    const PipelineState before_pred = pred;

    if (ae.recon_decoder) {
      const auto order = shuffled(task.train.size(), root.split(2 * epoch));
      for (std::size_t b = 0; b < order.size(); b += cfg.batch_size_stage1) {
        const auto batch = gather_batch(task.train, order, b, cfg.batch_size_stage1);
        GradientBundle g = reconstruction_gradient(ae, batch);
        if (!finite_bundle(g)) {
          ae = before_ae;
          result.params = merged().params;
          result.divergence = "stage1 autoencoder: non-finite loss or gradient at epoch " + std::to_string(epoch);
          return result;
        }
        ae_opt.step(ae.params, clip(std::move(g), cfg.clip_norm), lr);
        ++steps;
        result.metrics.step_queries.push_back(0);
      }
    }

    const auto order = shuffled(task.predictor_train.size(), root.split(2 * epoch + 1));
    Rng unused(0);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size_stage1) {
      const auto batch = gather_batch(task.predictor_train, order, b, cfg.batch_size_stage1);
      GradientBundle g = prediction_gradient(pred, batch, BridgeConfig{}, unused);
      if (!finite_bundle(g)) {
        ae = before_ae;
        pred = before_pred;
        result.params = merged().params;
        result.divergence = "stage1 predictor: non-finite loss or gradient at epoch " + std::to_string(epoch);
        return result;
      }
      pred_opt.step(pred.params, clip(std::move(g), cfg.clip_norm), lr);
      ++steps;
      result.metrics.step_queries.push_back(0);
    }

    EpochRecord rec = evaluate("stage1", epoch, steps, merged(), task.train, task.test, eval_spec.lambda);
    rec.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    result.metrics.epochs.push_back(rec);
    if (patience.should_stop(rec.train_loss)) break;
  }
  result.params = merged().params;
  return result;
}

TrainResult stage2_train(PipelineState ps, std::span<const Example> train, std::span<const Example> test,
                         const TrainConfig& cfg) {
  cfg.validate();
  ps.validate();
  if (train.empty()) throw InvalidArgument("stage2: empty training set");
  for (auto& b : ps.params.blocks()) b.frozen = cfg.freeze.count(b.name) > 0;

  Optimizer opt(cfg.optimizer);
  auto lr = [&](const std::string& name) { return cfg.lr_for(name); };
  const LossSpec spec{cfg.lambda};
  const BridgeConfig bridge = cfg.bridge();
  const Rng root(cfg.seed, 0x5747452);
  Rng zo_rng = root.split(0xE57);

  TrainResult result;
  std::size_t steps = 0;
  result.metrics.epochs.push_back(evaluate("stage2", 0, 0, ps, train, test, cfg.lambda));
  Patience patience{cfg.patience};
  ParamSet last_good = ps.params;

  for (std::size_t epoch = 1; epoch <= cfg.epochs_stage2; ++epoch) {
    const auto start = Clock::now();
    const auto order = shuffled(train.size(), root.split(epoch));
    std::size_t queries = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size_stage2) {
      const auto batch = gather_batch(train, order, b, cfg.batch_size_stage2);
      GradientBundle g;
      try {
        g = backward(ps, batch, spec, bridge, zo_rng);
      } catch (const NonFiniteOutput& e) {
        result.params = last_good;
        result.divergence = std::string("stage2: ") + e.what() + " at epoch " + std::to_string(epoch);
        return result;
      }
      if (!finite_bundle(g)) {
        result.params = last_good;
        result.divergence = "stage2: non-finite loss or gradient at epoch " + std::to_string(epoch);
        return result;
      }
      queries += g.log.queries;
      result.metrics.step_queries.push_back(g.log.queries);
      opt.step(ps.params, clip(std::move(g), cfg.clip_norm), lr);
      ++steps;
    }
    EpochRecord rec;
    try {
      rec = evaluate("stage2", epoch, steps, ps, train, test, cfg.lambda);
    } catch (const NonFiniteOutput& e) {
      result.params = last_good;
      result.divergence = std::string("stage2: ") + e.what() + " at epoch " + std::to_string(epoch);
      return result;
    }
    if (!std::isfinite(rec.train_loss)) {
      result.params = last_good;
      result.divergence = "stage2: non-finite training loss at epoch " + std::to_string(epoch);
      return result;
    }
    rec.zo_queries = queries;
    rec.wall_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    result.metrics.epochs.push_back(rec);
    last_good = ps.params;
    if (patience.should_stop(rec.train_loss)) break;
  }
  result.params = ps.params;
  return result;
}

namespace {

std::string cell(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return "";
  return nlohmann::json(*v).dump();
}

}  // namespace

std::string summary_csv(const std::optional<EpochRecord>& stage1, const std::optional<EpochRecord>& stage2) {
  auto acc = [](const std::optional<EpochRecord>& r) { return r ? r->recon_accuracy_test : std::nullopt; };
  auto err = [](const std::optional<EpochRecord>& r) { return r ? std::optional(r->test_rmse) : std::nullopt; };
  std::string out = "model,measure,stage1,stage2\n";
  out += "autoencoder,reconstruction_accuracy," + cell(acc(stage1)) + "," + cell(acc(stage2)) + "\n";
  out += "predictor_with_autoencoder,rmse," + cell(err(stage1)) + "," + cell(err(stage2)) + "\n";
  return out;
}

}  // namespace zobridge
