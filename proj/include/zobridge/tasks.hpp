// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale benchmark tasks with the encoder → opaque middle → predictor
// structure, plus dataset files.
//
// task_a_smooth      x ∈ R⁴ → latent R² → m(z) = (z₁², z₁z₂, sin z₂) → front → scalar.
//                    The black box m is also registered with its analytic
//                    Jacobian so first-order training is available as a reference.
// task_b_bitstring   16-bit strings → latent → decoder → threshold → substring
//                    features → fixed embedding → front → scalar. The middle is
//                    genuinely non-differentiable.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "zobridge/pipeline.hpp"
#include "zobridge/trainer.hpp"

namespace zobridge {

enum class ObjectKind { Real, Bits };

struct TaskPreset {
  std::string name;
  Index input_width = 0;
  Index latent_width = 0;
  Index readout_width = 0;  // middle output, tail input
  Index embed_width = 0;    // task_b: featurizer embedding width
  std::vector<Index> encoder_hidden;
  std::vector<Index> decoder_hidden;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  double noise_std = 0.0;
  std::uint64_t seed = 0;  // fixes the hidden generative pieces, not the sample draw
  /// Stage-1 train reconstruction accuracy expected at the default config
  /// (200 epochs, seed 7); fixed by a pilot run. Not part of the structure hash.
  std::optional<double> stage1_recon_floor;

  bool operator==(const TaskPreset&) const = default;
};

std::vector<std::string> preset_names();
/// InvalidArgument for unknown names.
TaskPreset preset_by_name(const std::string& name);

struct Dataset {
  ObjectKind kind = ObjectKind::Real;
  std::vector<Example> rows;
};

struct TaskData {
  TaskPreset preset;
  Dataset train, test;
};

/// Draws train and test splits. (preset, rng state) determines the result bit for bit.
TaskData gen_task_a(const TaskPreset& preset, Rng& rng);
TaskData gen_task_b(const TaskPreset& preset, Rng& rng);
TaskData generate(const TaskPreset& preset, std::uint64_t seed);

// --- task A pieces ---------------------------------------------------------

/// m(z) = (z₁², z₁z₂, sin z₂)
Vec task_a_map(const Vec& z);
Mat task_a_jacobian(const Vec& z);
/// Hidden ground truth: latent code z* for x and property ⟨c, m(z*)⟩ without noise.
Vec task_a_true_latent(const TaskPreset& preset, const Vec& x);
double task_a_property(const TaskPreset& preset, const Vec& x);

// --- task B pieces ---------------------------------------------------------

/// (count of "11", count of "101", parity of ones, longest run of equal bits);
/// substring counts include overlaps.
Vec bit_features(const Vec& bits);
/// Noise-free property as a function of bit_features.
double task_b_property(const Vec& features);
/// Indices of features that are not constant across `train`.
std::vector<Index> informative_features(std::span<const Example> train);
/// Fixed smooth embedding of the selected features into embed_width.
Vec task_b_embed(const TaskPreset& preset, const std::vector<Index>& kept, const Vec& features);

// --- models ----------------------------------------------------------------

struct TaskModel {
  PipelineState pipeline;  // opaque middle
  Stage1Task stage1;       // independent pretraining problem
  bool has_oracle = false;
  StagePtr oracle_middle;  // task A: same middle with a differentiable registration

  /// Copy of `ps` whose middle is the differentiable oracle registration.
  PipelineState with_oracle_middle(const PipelineState& ps) const;
};

/// Builds stages and initial parameters (weights ~ N(0, 1/fan_in), biases 0)
/// for `data`; `init_seed` fixes the initialization.
TaskModel build_task_model(const TaskData& data, std::uint64_t init_seed);

/// Stage 2 with exact middle gradients. Task A only; Unsupported otherwise.
TrainResult oracle_fo_train(const TaskModel& model, const PipelineState& ps, const TaskData& data,
                            const TrainConfig& cfg);

struct TwoStageOutcome {
  std::uint64_t seed = 0;
  TrainResult stage1;
  TrainResult stage2;
  /// Stage-1 blocks evaluated in the full pipeline (stage 2's epoch 0).
  const EpochRecord& stage1_pipeline() const { return stage2.metrics.epochs.front(); }
  const EpochRecord& stage2_final() const { return stage2.metrics.last(); }
};

/// Generates data with `seed`, initializes with `seed`, then runs stage 1 and
/// stage 2 back to back. cfg.seed is replaced by `seed`.
TwoStageOutcome run_two_stage(const TaskPreset& preset, TrainConfig cfg, std::uint64_t seed);

// --- dataset files ---------------------------------------------------------

/// CSV with header `object,y`. Real objects are `;`-separated decimals, bit
/// objects are 0/1 strings. Values are written in shortest round-trip form.
void save_dataset(const Dataset& d, const std::string& path);
std::string dataset_csv(const Dataset& d);
/// ParseError naming the line on malformed input.
Dataset load_dataset(const std::string& path);
Dataset parse_dataset(const std::string& text);

}  // namespace zobridge
