// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training:
//   stage 1  autoencoder and predictor trained independently with exact gradients
//   stage 2  joint end-to-end training through the opaque middle
#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "zobridge/optim.hpp"
#include "zobridge/pipeline.hpp"

namespace zobridge {

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr_encoder_decoder = 7e-4;
  double lr_predictor = 5e-4;
  std::size_t batch_size_stage1 = 16;
  std::size_t batch_size_stage2 = 8;
  double clip_norm = 5.0;
  double lambda = 1.0;
  std::size_t epochs_stage1 = 200;
  std::size_t epochs_stage2 = 20;
  std::uint64_t seed = 0;
  std::set<std::string> freeze{"v"};  // applied in stage 2
  std::set<std::string> autoencoder_blocks{"u", "v"};  // trained at lr_encoder_decoder

  ZoKind zo_kind = ZoKind::Coordinate;
  double mu_latent = 1e-3;
  double mu_params = 1e-3;
  double sigma = 1.0;
  int k_samples = 8;
  std::size_t threads = 0;

  std::optional<std::size_t> patience;  // early stopping on train loss; off when empty

  void validate() const;
  double lr_for(const std::string& block) const;
  BridgeConfig bridge() const;
};

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;  // 0 is the evaluation before any update
  std::size_t steps = 0;  // cumulative optimizer steps
  double train_loss = 0.0;
  double train_rmse = 0.0;
  double test_rmse = 0.0;
  std::optional<double> recon_accuracy_train;
  std::optional<double> recon_accuracy_test;
  std::size_t zo_queries = 0;  // issued during this epoch
  double wall_seconds = 0.0;
};

struct RunMetrics {
  std::vector<EpochRecord> epochs;
  std::vector<std::size_t> step_queries;  // zo queries per optimizer step

  /// One JSON object per epoch. Wall time is excluded so equal runs give equal files.
  std::string jsonl() const;
  /// Wall time per epoch, kept apart from jsonl().
  std::string timing_jsonl() const;
  /// Whitespace-separated columns for plotting.
  std::string gnuplot() const;
  const EpochRecord& last() const { return epochs.back(); }
};

struct TrainResult {
  ParamSet params;
  RunMetrics metrics;
  std::optional<std::string> divergence;  // set when training stopped on a non-finite loss
};

double rmse(std::span<const Vec> y, std::span<const Vec> y_hat);

/// Pipeline RMSE over a dataset.
double pipeline_rmse(const PipelineState& ps, std::span<const Example> data);

/// Fraction of objects whose encode → decode → discretize round trip equals
/// the object exactly. Requires a reconstruction decoder and a discretizer.
double reconstruction_accuracy(std::span<const Vec> objects, const PipelineState& ps);
double reconstruction_accuracy(std::span<const Example> data, const PipelineState& ps);

struct Stage1Task {
  PipelineState pipeline;               // the full pipeline; u and v are trained on reconstruction
  PipelineState predictor;              // identity encoder, differentiable front, tail; w1 and w2 trained on truth
  std::vector<Example> predictor_train; // ground-truth middle inputs to the front and properties
  std::vector<Example> train, test;     // pipeline data for metrics and the reconstruction objective
};

/// Independent pretraining with exact gradients; issues no zo queries. The
/// returned params are the pipeline's blocks after training.
TrainResult stage1_train(const Stage1Task& task, const TrainConfig& cfg);

/// Joint training of the pipeline through its middle (zo estimates when the
/// middle is opaque, exact gradients otherwise). Blocks in cfg.freeze are
/// frozen. On divergence, params are the last good ones.
TrainResult stage2_train(PipelineState ps, std::span<const Example> train, std::span<const Example> test,
                         const TrainConfig& cfg);

/// Two-row summary: reconstruction accuracy and RMSE on the test split, with
/// one column per stage. Empty cells for a missing stage or metric.
std::string summary_csv(const std::optional<EpochRecord>& stage1, const std::optional<EpochRecord>& stage2);

}  // namespace zobridge
