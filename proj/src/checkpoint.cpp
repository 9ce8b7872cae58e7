#include "htc/checkpoint.hpp"

namespace htc {

CheckpointInfo read_checkpoint_info(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("checkpoint: missing manifest.json in " + dir);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: malformed manifest in " + dir + ": " + e.what());
  }
  if (manifest.value("format", "") != "htc-checkpoint")
    throw std::runtime_error("checkpoint: " + dir + " is not an htc checkpoint");
  CheckpointInfo info;
  info.pipeline = pipeline_from_json(manifest.at("pipeline"));
  info.config_hash = manifest.at("config_hash").get<std::string>();
  info.dtype = manifest.at("dtype").get<std::string>();
  info.seed = manifest.value("seed", 0ull);
  info.epoch = manifest.value("epoch", 0);
  info.iteration = manifest.value("iteration", static_cast<int64_t>(0));
  if (info.config_hash != pipeline_hash(info.pipeline))
    throw std::runtime_error("checkpoint: config hash mismatch in " + dir +
                             " (manifest does not match its own pipeline section)");
  return info;
}

}  // namespace htc
