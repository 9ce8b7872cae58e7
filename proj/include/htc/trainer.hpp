#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "htc/checkpoint.hpp"
#include "htc/config.hpp"
#include "htc/dataset.hpp"
#include "htc/loss.hpp"
#include "htc/rng.hpp"

namespace htc {

// Desk-scale training loop. All randomness (epoch order, flips, proposal
// jitter, RoI sampling) is derived statelessly from (seed, epoch, ...), so a
// resumed run continues bit-identically to an uninterrupted one.
template <typename S>
class Trainer {
 public:
  Trainer(HtcModel<S>& model, const RunConfig& cfg)
      : model_(model),
        cfg_(cfg),
        optim_(static_cast<S>(cfg.train.momentum), static_cast<S>(cfg.train.weight_decay)) {}

  // Continues from an existing checkpoint directory.
  void restore(const std::string& checkpoint_dir) {
    const CheckpointInfo info = read_checkpoint_info(checkpoint_dir);
    load_checkpoint_params(checkpoint_dir, model_.params(), &optim_);
    start_epoch_ = info.epoch;
    iteration_ = info.iteration;
  }

  // Runs (epochs - start_epoch) epochs. Writes metrics.jsonl plus one
  // checkpoint directory per epoch and `final` under out_dir. Throws with
  // the offending term name if any loss goes non-finite.
  void fit(const Dataset& data, const std::string& out_dir, std::ostream* progress = nullptr) {
    namespace fs = std::filesystem;
    if (data.samples.empty()) throw std::invalid_argument("train: dataset is empty");
    fs::create_directories(out_dir);
    const bool fresh = start_epoch_ == 0;
    std::ofstream metrics(fs::path(out_dir) / "metrics.jsonl",
                          fresh ? std::ios::trunc : std::ios::app);
    if (!metrics) throw std::runtime_error("train: cannot write metrics in " + out_dir);
    if (fresh)
      metrics << nlohmann::json{{"config_hash", pipeline_hash(cfg_.pipeline)},
                                {"run_config_hash", run_config_hash(cfg_)},
                                {"seed", cfg_.seed}}
                     .dump()
              << "\n";

    for (int epoch = start_epoch_; epoch < cfg_.train.epochs; ++epoch) {
      run_epoch(data, epoch, metrics, progress);
      save_checkpoint(checkpoint_dir(out_dir, epoch + 1), cfg_.pipeline, model_.params(), &optim_,
                      cfg_.seed, epoch + 1, iteration_);
    }
    save_checkpoint((fs::path(out_dir) / "final").string(), cfg_.pipeline, model_.params(),
                    &optim_, cfg_.seed, cfg_.train.epochs, iteration_);
  }

  static std::string checkpoint_dir(const std::string& out_dir, int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "checkpoint_epoch_%03d", epoch);
    return (std::filesystem::path(out_dir) / buf).string();
  }

  int64_t iteration() const { return iteration_; }

 private:
  double lr_for_epoch(int epoch) const {
    double lr = cfg_.train.learning_rate;
    for (int de : cfg_.train.lr_decay_epochs)
      if (epoch >= de) lr *= cfg_.train.lr_decay_factor;
    return lr;
  }

  void run_epoch(const Dataset& data, int epoch, std::ofstream& metrics, std::ostream* progress) {
    std::vector<int> order;
    for (size_t i = 0; i < data.samples.size(); ++i)
      if (!data.samples[i].instances.empty()) order.push_back(static_cast<int>(i));
    if (order.empty()) throw std::invalid_argument("train: no sample has instances");
    const int n = static_cast<int>(order.size());
    Rng order_rng(derive_seed(cfg_.seed, "epoch_order", static_cast<uint64_t>(epoch)));
    order_rng.shuffle(order);
    const double lr = lr_for_epoch(epoch);

    for (int pos = 0; pos < n; pos += cfg_.train.batch_size) {
      const int bsz = std::min(cfg_.train.batch_size, n - pos);
      std::vector<InstanceSample> batch;
      std::vector<std::vector<GtInstance>> gts;
      std::vector<std::vector<Box>> proposals;
      std::vector<std::vector<int>> stuff;
      for (int b = 0; b < bsz; ++b) {
        const InstanceSample& base = data.samples[static_cast<size_t>(order[static_cast<size_t>(pos + b)])];
        InstanceSample s = base;
        if (cfg_.train.hflip) {
          Rng flip_rng(derive_seed(cfg_.seed, "flip", static_cast<uint64_t>(epoch),
                                   static_cast<uint64_t>(base.id)));
          if (flip_rng.uniform() < 0.5) s = hflip_sample(base);
        }
        std::vector<Box> gt_boxes;
        for (const auto& inst : s.instances) gt_boxes.push_back(inst.box);
        proposals.push_back(gt_boxes.empty()
                                ? std::vector<Box>{}
                                : generate_proposals(gt_boxes, s.w, s.h,
                                                     derive_seed(cfg_.seed, "proposal",
                                                                 static_cast<uint64_t>(epoch),
                                                                 static_cast<uint64_t>(base.id)),
                                                     cfg_.train.proposal_jitter,
                                                     cfg_.train.proposal_random));
        gts.push_back(s.instances);
        stuff.push_back(s.stuff_map);
        batch.push_back(std::move(s));
      }

      const int H = batch[0].h, W = batch[0].w;
      std::vector<S> pixels;
      pixels.reserve(static_cast<size_t>(bsz) * 3 * H * W);
      for (const auto& s : batch) {
        if (s.h != H || s.w != W)
          throw std::invalid_argument("train: images in a batch must share one size");
        for (float v : s.image_chw()) pixels.push_back(static_cast<S>(v));
      }
      Tensor<S> images = Tensor<S>::from({bsz, 3, H, W}, std::move(pixels));

      TrainForward<S> fwd = model_.forward_train(
          images, gts, proposals, stuff,
          derive_seed(cfg_.seed, "roi_sample", static_cast<uint64_t>(epoch),
                      static_cast<uint64_t>(iteration_)));
      LossReport<S> rep = compute_loss(fwd, cfg_.pipeline);
      const std::string bad = rep.first_non_finite();
      if (!bad.empty())
        throw std::runtime_error("train: non-finite loss at iteration " +
                                 std::to_string(iteration_) + ", first non-finite term: " + bad);
      rep.total_node.backward();
      optim_.step(model_.params().params(), static_cast<S>(lr));

      metrics << nlohmann::json{{"iter", iteration_}, {"epoch", epoch},  {"lr", lr},
                                {"L_cls", rep.cls},   {"L_reg", rep.reg}, {"L_mask", rep.mask},
                                {"L_seg", rep.seg},   {"total", rep.total}}
                     .dump()
              << "\n";
      if (progress && iteration_ % 20 == 0)
        (*progress) << "epoch " << epoch << " iter " << iteration_ << " lr " << lr << " total "
                    << rep.total << "\n";
      ++iteration_;
    }
  }

  HtcModel<S>& model_;
  RunConfig cfg_;
  SgdOptimizer<S> optim_;
  int start_epoch_ = 0;
  int64_t iteration_ = 0;
};

}  // namespace htc
