#include "htc/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "htc/rng.hpp"

namespace htc {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " + where);
}

SemanticFusion fusion_from_string(const std::string& s) {
  if (s == "none") return SemanticFusion::kNone;
  if (s == "bbox") return SemanticFusion::kBbox;
  if (s == "mask") return SemanticFusion::kMask;
  if (s == "both") return SemanticFusion::kBoth;
  throw std::invalid_argument("config: unknown semantic_fusion '" + s +
                              "' (none|bbox|mask|both)");
}

}  // namespace

json pipeline_to_json(const PipelineConfig& cfg) {
  json stages = json::array();
  for (const auto& sc : cfg.stages)
    stages.push_back({{"iou_threshold", sc.iou_threshold},
                      {"loss_weight", sc.loss_weight},
                      {"samples_per_image", sc.samples_per_image},
                      {"positive_fraction", sc.positive_fraction}});
  return json{{"num_stages", cfg.num_stages},
              {"interleaved", cfg.interleaved},
              {"mask_info_flow", cfg.mask_info_flow},
              {"semantic_branch", cfg.semantic_branch},
              {"semantic_fusion", to_string(cfg.semantic_fusion)},
              {"stages", stages},
              {"score_threshold", cfg.score_threshold},
              {"mask_resolution", cfg.mask_resolution},
              {"num_thing_classes", cfg.num_thing_classes},
              {"num_stuff_classes", cfg.num_stuff_classes},
              {"fpn_channels", cfg.fpn_channels},
              {"mask_head_channels", cfg.mask_head_channels},
              {"box_head_width", cfg.box_head_width},
              {"nms_iou", cfg.nms_iou},
              {"max_detections", cfg.max_detections},
              {"smooth_l1_beta", cfg.smooth_l1_beta},
              {"semantic_loss_weight", cfg.semantic_loss_weight}};
}

PipelineConfig pipeline_from_json(const json& j) {
  reject_unknown_keys(j,
                      {"num_stages", "interleaved", "mask_info_flow", "semantic_branch",
                       "semantic_fusion", "stages", "score_threshold", "mask_resolution",
                       "num_thing_classes", "num_stuff_classes", "fpn_channels",
                       "mask_head_channels", "box_head_width", "nms_iou", "max_detections",
                       "smooth_l1_beta", "semantic_loss_weight"},
                      "pipeline");
  PipelineConfig cfg = PipelineConfig::with_defaults(j.value("num_stages", 3));
  cfg.interleaved = j.value("interleaved", cfg.interleaved);
  cfg.mask_info_flow = j.value("mask_info_flow", cfg.mask_info_flow);
  cfg.semantic_branch = j.value("semantic_branch", cfg.semantic_branch);
  if (j.contains("semantic_fusion"))
    cfg.semantic_fusion = fusion_from_string(j["semantic_fusion"].get<std::string>());
  cfg.score_threshold = j.value("score_threshold", cfg.score_threshold);
  cfg.mask_resolution = j.value("mask_resolution", cfg.mask_resolution);
  cfg.num_thing_classes = j.value("num_thing_classes", cfg.num_thing_classes);
  cfg.num_stuff_classes = j.value("num_stuff_classes", cfg.num_stuff_classes);
  cfg.fpn_channels = j.value("fpn_channels", cfg.fpn_channels);
  cfg.mask_head_channels = j.value("mask_head_channels", cfg.mask_head_channels);
  cfg.box_head_width = j.value("box_head_width", cfg.box_head_width);
  cfg.nms_iou = j.value("nms_iou", cfg.nms_iou);
  cfg.max_detections = j.value("max_detections", cfg.max_detections);
  cfg.smooth_l1_beta = j.value("smooth_l1_beta", cfg.smooth_l1_beta);
  cfg.semantic_loss_weight = j.value("semantic_loss_weight", cfg.semantic_loss_weight);
  if (j.contains("stages")) {
    const auto& stages = j["stages"];
    if (!stages.is_array() || static_cast<int>(stages.size()) != cfg.num_stages)
      throw std::invalid_argument("config: 'stages' must be an array of num_stages entries");
    cfg.stages.clear();
    int idx = 0;
    for (const auto& sj : stages) {
      reject_unknown_keys(sj, {"iou_threshold", "loss_weight", "samples_per_image",
                               "positive_fraction"},
                          "pipeline.stages[" + std::to_string(idx) + "]");
      StageConfig sc;
      sc.index = idx++;
      sc.iou_threshold = sj.value("iou_threshold", sc.iou_threshold);
      sc.loss_weight = sj.value("loss_weight", sc.loss_weight);
      sc.samples_per_image = sj.value("samples_per_image", sc.samples_per_image);
      sc.positive_fraction = sj.value("positive_fraction", sc.positive_fraction);
      cfg.stages.push_back(sc);
    }
  }
  cfg.validate();
  return cfg;
}

json run_config_to_json(const RunConfig& cfg) {
  return json{{"seed", cfg.seed},
              {"pipeline", pipeline_to_json(cfg.pipeline)},
              {"train",
               {{"learning_rate", cfg.train.learning_rate},
                {"momentum", cfg.train.momentum},
                {"weight_decay", cfg.train.weight_decay},
                {"batch_size", cfg.train.batch_size},
                {"epochs", cfg.train.epochs},
                {"lr_decay_epochs", cfg.train.lr_decay_epochs},
                {"lr_decay_factor", cfg.train.lr_decay_factor},
                {"hflip", cfg.train.hflip},
                {"proposal_jitter", cfg.train.proposal_jitter},
                {"proposal_random", cfg.train.proposal_random}}},
              {"data", {{"train_dir", cfg.train_dir}, {"val_dir", cfg.val_dir}}}};
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown_keys(j, {"seed", "pipeline", "train", "data"}, "run config");
  RunConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("pipeline")) cfg.pipeline = pipeline_from_json(j["pipeline"]);
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown_keys(t,
                        {"learning_rate", "momentum", "weight_decay", "batch_size", "epochs",
                         "lr_decay_epochs", "lr_decay_factor", "hflip", "proposal_jitter",
                         "proposal_random"},
                        "train");
    cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
    cfg.train.momentum = t.value("momentum", cfg.train.momentum);
    cfg.train.weight_decay = t.value("weight_decay", cfg.train.weight_decay);
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.lr_decay_epochs = t.value("lr_decay_epochs", cfg.train.lr_decay_epochs);
    cfg.train.lr_decay_factor = t.value("lr_decay_factor", cfg.train.lr_decay_factor);
    cfg.train.hflip = t.value("hflip", cfg.train.hflip);
    cfg.train.proposal_jitter = t.value("proposal_jitter", cfg.train.proposal_jitter);
    cfg.train.proposal_random = t.value("proposal_random", cfg.train.proposal_random);
    if (cfg.train.batch_size < 1 || cfg.train.epochs < 0 || cfg.train.learning_rate < 0)
      throw std::invalid_argument("config: invalid train settings");
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown_keys(d, {"train_dir", "val_dir"}, "data");
    cfg.train_dir = d.value("train_dir", cfg.train_dir);
    cfg.val_dir = d.value("val_dir", cfg.val_dir);
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config: malformed JSON in " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

namespace {

std::string hex16(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace

std::string pipeline_hash(const PipelineConfig& cfg) {
  return hex16(fnv1a64(pipeline_to_json(cfg).dump()));
}

std::string run_config_hash(const RunConfig& cfg) {
  return hex16(fnv1a64(run_config_to_json(cfg).dump()));
}

}  // namespace htc
