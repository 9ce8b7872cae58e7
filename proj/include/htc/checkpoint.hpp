#pragma once

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "htc/backbone.hpp"
#include "htc/config.hpp"
#include "htc/optim.hpp"

// Checkpoint layout: a directory holding manifest.json plus one raw
// little-endian float file per parameter (and per momentum buffer when
// optimizer state is saved). Round-trips are bit-exact.

namespace htc {

struct CheckpointInfo {
  PipelineConfig pipeline;
  std::string config_hash;
  std::string dtype;
  uint64_t seed = 0;
  int epoch = 0;
  int64_t iteration = 0;
};

namespace detail {

template <typename S>
const char* dtype_name() {
  if constexpr (sizeof(S) == 4) return "f32";
  else return "f64";
}

template <typename S>
void write_raw_le(const std::string& path, const std::vector<S>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  std::vector<unsigned char> buf(values.size() * sizeof(S));
  for (size_t i = 0; i < values.size(); ++i) {
    if constexpr (sizeof(S) == 4) {
      uint32_t bits;
      std::memcpy(&bits, &values[i], 4);
      for (int b = 0; b < 4; ++b) buf[i * 4 + static_cast<size_t>(b)] = (bits >> (8 * b)) & 0xff;
    } else {
      uint64_t bits;
      std::memcpy(&bits, &values[i], 8);
      for (int b = 0; b < 8; ++b) buf[i * 8 + static_cast<size_t>(b)] = (bits >> (8 * b)) & 0xff;
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("checkpoint: short write to " + path);
}

template <typename S>
void read_raw_le(const std::string& path, std::vector<S>* values) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path);
  const std::streamsize bytes = in.tellg();
  if (bytes != static_cast<std::streamsize>(values->size() * sizeof(S)))
    throw std::runtime_error("checkpoint: " + path + " has " + std::to_string(bytes) +
                             " bytes, expected " + std::to_string(values->size() * sizeof(S)));
  in.seekg(0);
  std::vector<unsigned char> buf(static_cast<size_t>(bytes));
  in.read(reinterpret_cast<char*>(buf.data()), bytes);
  for (size_t i = 0; i < values->size(); ++i) {
    if constexpr (sizeof(S) == 4) {
      uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | buf[i * 4 + static_cast<size_t>(b)];
      std::memcpy(&(*values)[i], &bits, 4);
    } else {
      uint64_t bits = 0;
      for (int b = 7; b >= 0; --b) bits = (bits << 8) | buf[i * 8 + static_cast<size_t>(b)];
      std::memcpy(&(*values)[i], &bits, 8);
    }
  }
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& dir, const PipelineConfig& cfg,
                     const ParamRegistry<S>& registry, const SgdOptimizer<S>* optim,
                     uint64_t seed, int epoch, int64_t iteration) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "params");
  if (optim) fs::create_directories(fs::path(dir) / "optim");

  nlohmann::json manifest;
  manifest["format"] = "htc-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = detail::dtype_name<S>();
  manifest["seed"] = seed;
  manifest["epoch"] = epoch;
  manifest["iteration"] = iteration;
  manifest["pipeline"] = pipeline_to_json(cfg);
  manifest["config_hash"] = pipeline_hash(cfg);
  manifest["params"] = nlohmann::json::array();
  for (const auto& p : registry.params()) {
    const std::string file = "params/" + p.name + ".bin";
    detail::write_raw_le<S>((fs::path(dir) / file).string(), p.value.data());
    manifest["params"].push_back({{"name", p.name},
                                  {"shape", p.value.shape()},
                                  {"file", file},
                                  {"trainable", p.trainable}});
  }
  if (optim) {
    nlohmann::json oj;
    oj["momentum"] = static_cast<double>(optim->momentum());
    oj["weight_decay"] = static_cast<double>(optim->weight_decay());
    oj["velocity"] = nlohmann::json::array();
    for (const auto& p : registry.params()) {
      auto it = optim->state().find(p.name);
      if (it == optim->state().end()) continue;
      const std::string file = "optim/" + p.name + ".bin";
      detail::write_raw_le<S>((fs::path(dir) / file).string(), it->second);
      oj["velocity"].push_back({{"name", p.name}, {"file", file}});
    }
    manifest["optimizer"] = oj;
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw std::runtime_error("checkpoint: cannot write manifest in " + dir);
  out << manifest.dump(1) << "\n";
}

CheckpointInfo read_checkpoint_info(const std::string& dir);

template <typename S>
void load_checkpoint_params(const std::string& dir, ParamRegistry<S>& registry,
                            SgdOptimizer<S>* optim = nullptr) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("checkpoint: missing manifest.json in " + dir);
  nlohmann::json manifest;
  in >> manifest;
  const std::string dtype = manifest.at("dtype").get<std::string>();
  if (dtype != detail::dtype_name<S>())
    throw std::runtime_error("checkpoint: dtype " + dtype + " does not match model scalar " +
                             detail::dtype_name<S>());
  size_t loaded = 0;
  for (const auto& pj : manifest.at("params")) {
    const std::string name = pj.at("name").get<std::string>();
    Parameter<S>* p = registry.find(name);
    if (!p) throw std::runtime_error("checkpoint: parameter '" + name + "' not in model");
    const Shape shape = pj.at("shape").get<Shape>();
    if (shape != p->value.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': file " +
                               shape_str(shape) + " vs model " + shape_str(p->value.shape()));
    detail::read_raw_le<S>((fs::path(dir) / pj.at("file").get<std::string>()).string(),
                           &p->value.data());
    ++loaded;
  }
  if (loaded != registry.params().size())
    throw std::runtime_error("checkpoint: loaded " + std::to_string(loaded) + " of " +
                             std::to_string(registry.params().size()) + " model parameters");
  if (optim && manifest.contains("optimizer")) {
    for (const auto& vj : manifest["optimizer"].at("velocity")) {
      const std::string name = vj.at("name").get<std::string>();
      Parameter<S>* p = registry.find(name);
      if (!p) throw std::runtime_error("checkpoint: velocity for unknown parameter '" + name + "'");
      auto& buf = optim->state()[name];
      buf.assign(p->value.data().size(), S(0));
      detail::read_raw_le<S>((fs::path(dir) / vj.at("file").get<std::string>()).string(), &buf);
    }
  }
}

}  // namespace htc
