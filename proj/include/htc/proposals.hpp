#pragma once

#include <cstdint>
#include <vector>

#include "htc/geometry.hpp"
#include "htc/mask.hpp"

namespace htc {

// One ground-truth instance: box, thing class (1-based, 0 is background) and
// full-image binary mask.
struct GtInstance {
  Box box;
  int label = 0;
  BinaryMask mask;
  double analytic_area = 0.0;  // exact geometric area when known (synthetic data)
};

// Per-stage assignment settings. Thresholds must be strictly increasing
// across stages; loss_weight is the stage's term weight in the total loss.
struct StageConfig {
  int index = 0;
  double iou_threshold = 0.5;
  double loss_weight = 1.0;
  int samples_per_image = 64;
  double positive_fraction = 0.5;
};

// Deterministic stand-in for a learned RPN: per ground-truth box, n_jitter
// copies perturbed by Gaussian noise on center (sigma = center_sigma * size)
// and log-scale (sigma = scale_sigma), clipped to the image, plus n_random
// uniform boxes.
std::vector<Box> generate_proposals(const std::vector<Box>& gt_boxes, double image_w,
                                    double image_h, uint64_t seed, int n_jitter, int n_random,
                                    double center_sigma = 0.15, double scale_sigma = 0.2);

// Deterministic multi-scale grid of boxes covering the image. Inference-time
// fallback for raw images that carry no annotations.
std::vector<Box> generate_grid_proposals(double image_w, double image_h);

struct AssignedBatch {
  std::vector<RoI> rois;
  std::vector<int> labels;              // per RoI; 0 = background
  std::vector<int> matched_gt;          // per RoI; -1 for background
  std::vector<int> positive_indices;    // rows with labels > 0, ascending
  std::vector<BoxDeltas> box_targets;   // one per positive, in positive order
  std::vector<BinaryMask> mask_targets; // one per positive, mask_resolution^2

  int num_rois() const { return static_cast<int>(rois.size()); }
  int num_positives() const { return static_cast<int>(positive_indices.size()); }
};

// Nearest-neighbor crop of a full-image mask to an out x out grid over the
// given box. Cell centers falling outside the image read as 0. Values stay
// binary.
BinaryMask crop_mask_target(const BinaryMask& gt_mask, const Box& roi, int out);

// Stage-1 assignment with sampling: a proposal is positive iff its best IoU
// against any GT reaches cfg.iou_threshold (argmax GT wins, ties to the
// lowest GT index); up to samples_per_image RoIs are kept at
// positive_fraction. Deterministic given the seed.
AssignedBatch assign_and_sample(const std::vector<Box>& proposals,
                                const std::vector<GtInstance>& gt, const StageConfig& cfg,
                                uint64_t seed, int image_index, int stage, int mask_resolution);

// Re-assignment for later stages: same matching rule, no sampling (every box
// is kept, in order).
AssignedBatch assign_targets(const std::vector<Box>& boxes, const std::vector<GtInstance>& gt,
                             const StageConfig& cfg, int image_index, int stage,
                             int mask_resolution);

}  // namespace htc
