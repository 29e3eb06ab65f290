// SPDX-License-Identifier: Apache-2.0
#include "zobridge/config.hpp"

#include <fstream>
#include <sstream>

namespace zobridge {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot write " + path);
  f << content;
  if (!f) throw InvalidArgument("write failed: " + path);
}

std::string content_hash(const std::string& bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xF];
  return out;
}

// ---------------------------------------------------------------------------

Json to_json(const TrainConfig& c) {
  Json j;
  j["optimizer"] = to_string(c.optimizer);
  j["lr_encoder_decoder"] = c.lr_encoder_decoder;
  j["lr_predictor"] = c.lr_predictor;
  j["batch_size_stage1"] = c.batch_size_stage1;
  j["batch_size_stage2"] = c.batch_size_stage2;
  j["clip_norm"] = c.clip_norm;
  j["lambda"] = c.lambda;
  j["epochs_stage1"] = c.epochs_stage1;
  j["epochs_stage2"] = c.epochs_stage2;
  j["seed"] = c.seed;
  j["freeze"] = c.freeze;
  j["autoencoder_blocks"] = c.autoencoder_blocks;
  Json zo;
  zo["kind"] = to_string(c.zo_kind);
  zo["mu_latent"] = c.mu_latent;
  zo["mu_params"] = c.mu_params;
  zo["sigma"] = c.sigma;
  zo["k_samples"] = c.k_samples;
  zo["threads"] = c.threads;
  j["zo"] = zo;
  j["patience"] = c.patience ? Json(*c.patience) : Json(nullptr);
  return j;
}

namespace {

template <typename T>
T get_as(const nlohmann::json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidArgument("config key '" + key + "' has the wrong type");
  }
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "optimizer") c.optimizer = parse_optimizer(get_as<std::string>(v, key));
    else if (key == "lr_encoder_decoder") c.lr_encoder_decoder = get_as<double>(v, key);
    else if (key == "lr_predictor") c.lr_predictor = get_as<double>(v, key);
    else if (key == "batch_size_stage1") c.batch_size_stage1 = get_as<std::size_t>(v, key);
    else if (key == "batch_size_stage2") c.batch_size_stage2 = get_as<std::size_t>(v, key);
    else if (key == "clip_norm") c.clip_norm = get_as<double>(v, key);
    else if (key == "lambda") c.lambda = get_as<double>(v, key);
    else if (key == "epochs_stage1") c.epochs_stage1 = get_as<std::size_t>(v, key);
    else if (key == "epochs_stage2") c.epochs_stage2 = get_as<std::size_t>(v, key);
    else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
    else if (key == "freeze") c.freeze = get_as<std::set<std::string>>(v, key);
    else if (key == "autoencoder_blocks") c.autoencoder_blocks = get_as<std::set<std::string>>(v, key);
    else if (key == "patience") c.patience = v.is_null() ? std::nullopt : std::optional(get_as<std::size_t>(v, key));
    else if (key == "zo") {
      if (!v.is_object()) throw InvalidArgument("config key 'zo' must be an object");
      for (const auto& [zk, zv] : v.items()) {
        if (zk == "kind") c.zo_kind = parse_zo_kind(get_as<std::string>(zv, zk));
        else if (zk == "mu_latent") c.mu_latent = get_as<double>(zv, zk);
        else if (zk == "mu_params") c.mu_params = get_as<double>(zv, zk);
        else if (zk == "sigma") c.sigma = get_as<double>(zv, zk);
        else if (zk == "k_samples") c.k_samples = get_as<int>(zv, zk);
        else if (zk == "threads") c.threads = get_as<std::size_t>(zv, zk);
        else throw InvalidArgument("unknown config key 'zo." + zk + "'");
      }
    } else if (key == "$schema" || key == "description") {
      // informational
    } else {
      throw InvalidArgument("unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  try {
    return train_config_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

Json to_json(const TaskPreset& p) {
  Json j;
  j["name"] = p.name;
  j["input_width"] = p.input_width;
  j["latent_width"] = p.latent_width;
  j["readout_width"] = p.readout_width;
  j["embed_width"] = p.embed_width;
  j["encoder_hidden"] = p.encoder_hidden;
  j["decoder_hidden"] = p.decoder_hidden;
  j["train_size"] = p.train_size;
  j["test_size"] = p.test_size;
  j["noise_std"] = p.noise_std;
  j["seed"] = p.seed;
  if (p.stage1_recon_floor) j["stage1_recon_floor"] = *p.stage1_recon_floor;
  return j;
}

TaskPreset preset_from_json(const nlohmann::json& j) {
  try {
    TaskPreset p = preset_by_name(j.at("name").get<std::string>());
    p.input_width = j.at("input_width").get<Index>();
    p.latent_width = j.at("latent_width").get<Index>();
    p.readout_width = j.at("readout_width").get<Index>();
    p.embed_width = j.at("embed_width").get<Index>();
    p.encoder_hidden = j.at("encoder_hidden").get<std::vector<Index>>();
    p.decoder_hidden = j.at("decoder_hidden").get<std::vector<Index>>();
    p.train_size = j.at("train_size").get<std::size_t>();
    p.test_size = j.at("test_size").get<std::size_t>();
    p.noise_std = j.at("noise_std").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.stage1_recon_floor.reset();
    if (j.contains("stage1_recon_floor")) p.stage1_recon_floor = j.at("stage1_recon_floor").get<double>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("preset: ") + e.what());
  }
}

TaskPreset load_preset(const std::string& path) {
  try {
    return preset_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

std::string structure_hash(const TaskPreset& p) {
  Json j = to_json(p);
  j.erase("stage1_recon_floor");
  return content_hash(j.dump());
}

// ---------------------------------------------------------------------------

Json block_layouts(const PipelineState& ps) {
  Json j = Json::object();
  auto describe = [&](const Stage& s, const auto& self) -> void {
    if (const auto* c = dynamic_cast<const CompositeStage*>(&s)) {
      for (const auto& inner : c->inner()) self(*inner, self);
      return;
    }
    for (const auto& spec : s.param_specs()) {
      std::string text = s.label();
      if (const auto* m = dynamic_cast<const Mlp*>(&s)) {
        text = "mlp ";
        for (std::size_t i = 0; i < m->widths().size(); ++i)
          text += (i ? "-" : "") + std::to_string(m->widths()[i]);
      }
      j[spec.name] = {{"stage", text}, {"size", spec.size}};
    }
  };
  for (const StagePtr& s : {ps.encoder, ps.middle, ps.tail, ps.recon_decoder})
    if (s) describe(*s, describe);
  return j;
}

Json to_json(const Checkpoint& c) {
  Json j;
  j["format"] = "zobridge-checkpoint";
  j["version"] = c.version;
  j["stage"] = c.stage;
  j["preset"] = to_json(c.preset);
  j["structure_hash"] = c.structure_hash;
  j["init_seed"] = c.init_seed;
  j["config_hash"] = c.config_hash;
  j["layouts"] = c.layouts;
  Json blocks = Json::array();
  for (const auto& b : c.params.blocks()) {
    Json jb;
    jb["name"] = b.name;
    jb["frozen"] = b.frozen;
    jb["values"] = std::vector<double>(b.values.data(), b.values.data() + b.values.size());
    blocks.push_back(jb);
  }
  j["blocks"] = blocks;
  return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "zobridge-checkpoint") throw InvalidArgument("not a checkpoint file");
    Checkpoint c;
    c.version = j.at("version").get<int>();
    if (c.version != kCheckpointVersion)
      throw InvalidArgument("checkpoint version " + std::to_string(c.version) + " is not supported (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    c.stage = j.at("stage").get<std::string>();
    c.preset = preset_from_json(j.at("preset"));
    c.structure_hash = j.at("structure_hash").get<std::string>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    c.config_hash = j.at("config_hash").get<std::string>();
    c.layouts = j.at("layouts");
    for (const auto& jb : j.at("blocks")) {
      const auto values = jb.at("values").get<std::vector<double>>();
      c.params.add({jb.at("name").get<std::string>(), Eigen::Map<const Vec>(values.data(), Index(values.size())),
                    jb.at("frozen").get<bool>()});
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& c, const std::string& path) { write_file(path, to_json(c).dump(1) + "\n"); }

Checkpoint load_checkpoint(const std::string& path) {
  try {
    return checkpoint_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

void check_compatible(const Checkpoint& c, const TaskPreset& preset, const PipelineState& ps) {
  if (c.structure_hash != structure_hash(preset))
    throw InvalidArgument("checkpoint was trained for a different task structure (hash " + c.structure_hash +
                          ", data has " + structure_hash(preset) + ")");
  // Key order differs between a parsed file and a freshly built layout.
  const auto unordered = [](const Json& j) { return nlohmann::json::parse(j.dump()); };
  if (unordered(c.layouts) != unordered(block_layouts(ps))) throw InvalidArgument("checkpoint block layout does not match the pipeline");
  for (const auto& b : ps.params.blocks()) {
    if (!c.params.contains(b.name)) throw InvalidArgument("checkpoint lacks block '" + b.name + "'");
    if (c.params.at(b.name).values.size() != b.values.size())
      throw InvalidArgument("checkpoint block '" + b.name + "' has the wrong size");
  }
}

}  // namespace zobridge
