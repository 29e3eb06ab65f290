// SPDX-License-Identifier: Apache-2.0
//
// JSON forms of training configs, task presets and checkpoints.
#pragma once

#include <string>

#include <json.hpp>

#include "zobridge/tasks.hpp"
#include "zobridge/trainer.hpp"

namespace zobridge {

using Json = nlohmann::ordered_json;

/// Fully resolved form; every field is present.
Json to_json(const TrainConfig& cfg);
/// Overlays the keys present in `j` onto `base`. Unknown keys and
/// ill-typed values are InvalidArgument.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
TrainConfig load_train_config(const std::string& path);

Json to_json(const TaskPreset& p);
TaskPreset preset_from_json(const nlohmann::json& j);
TaskPreset load_preset(const std::string& path);

/// 16 hex digits of FNV-1a over the bytes.
std::string content_hash(const std::string& bytes);
/// Hash of the canonical preset JSON; ties checkpoints to model structure.
std::string structure_hash(const TaskPreset& p);

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int version = kCheckpointVersion;
  std::string stage;  // "init", "stage1" or "stage2"
  TaskPreset preset;
  std::string structure_hash;
  std::uint64_t init_seed = 0;
  std::string config_hash;
  ParamSet params;
  Json layouts;  // block name → owning stage description
};

Json to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const Checkpoint& c, const std::string& path);
/// InvalidArgument on version mismatch or malformed content.
Checkpoint load_checkpoint(const std::string& path);

/// Block name → description of the stage that consumes it (e.g. "mlp 16-32-10").
Json block_layouts(const PipelineState& ps);

/// Throws InvalidArgument unless the checkpoint's structure hash and block
/// layout match `ps`.
void check_compatible(const Checkpoint& c, const TaskPreset& preset, const PipelineState& ps);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace zobridge
