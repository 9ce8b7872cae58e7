#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "htc/cascade.hpp"

namespace htc {

// Desk-scale training schedule. The defaults are the pinned schedule:
// lr 0.005, momentum 0.9, weight decay 1e-4, batch 2, 12 epochs.
struct TrainSettings {
  double learning_rate = 0.005;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 2;
  int epochs = 12;
  std::vector<int> lr_decay_epochs = {9, 11};
  double lr_decay_factor = 0.1;
  bool hflip = true;
  int proposal_jitter = 8;
  int proposal_random = 16;
};

// Full run document: seed + pipeline + schedule + dataset paths. Parsed
// strictly — unknown keys are rejected.
struct RunConfig {
  uint64_t seed = 1;
  PipelineConfig pipeline = PipelineConfig::with_defaults();
  TrainSettings train;
  std::string train_dir;
  std::string val_dir;
};

nlohmann::json pipeline_to_json(const PipelineConfig& cfg);
PipelineConfig pipeline_from_json(const nlohmann::json& j);

nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// FNV-1a over the canonical (sorted-key) pipeline JSON, as 16 hex chars.
// Embedded in checkpoints and reports; mismatches mean a checkpoint belongs
// to a different architecture.
std::string pipeline_hash(const PipelineConfig& cfg);
std::string run_config_hash(const RunConfig& cfg);

}  // namespace htc
