#pragma once

#include <functional>
#include <limits>
#include <vector>

#include "htc/geometry.hpp"
#include "htc/rle.hpp"

namespace htc {

struct EvalDetection {
  int image_id = 0;
  int category_id = 0;
  double score = 0.0;
  Box box;
  RleMask mask;
  double area = 0.0;  // used for the scale buckets (box or mask area per mode)
};

struct EvalGroundTruth {
  int image_id = 0;
  int category_id = 0;
  Box box;
  RleMask mask;
  double area = 0.0;
};

// Metrics in [0,1], or -1 when a bucket contains no ground truth.
struct EvalResult {
  double ap = -1.0;
  double ap50 = -1.0;
  double ap75 = -1.0;
  double ap_s = -1.0;
  double ap_m = -1.0;
  double ap_l = -1.0;
};

using PairIouFn = std::function<double(const EvalDetection&, const EvalGroundTruth&)>;

inline double box_pair_iou(const EvalDetection& d, const EvalGroundTruth& g) {
  return iou(d.box, g.box);
}
inline double mask_pair_iou(const EvalDetection& d, const EvalGroundTruth& g) {
  return mask_iou(d.mask, g.mask);
}

struct AreaRange {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
};

// COCO-style AP: greedy score-descending matching per image/class/threshold
// (each GT matched at most once, the highest-IoU eligible GT wins,
// non-ignored GTs preferred), 101-point interpolated precision, averaged
// over classes that have ground truth in the range and over the thresholds.
// Returns -1 when no class has ground truth in the range.
double average_precision(const std::vector<EvalDetection>& detections,
                         const std::vector<EvalGroundTruth>& ground_truths, const PairIouFn& iou_fn,
                         const std::vector<double>& iou_thresholds, const AreaRange& area_range,
                         int max_dets = 100);

// The ten COCO thresholds 0.50..0.95.
std::vector<double> coco_iou_thresholds();

// Area buckets scaled by (image_size/640)^2 so small synthetic images still
// populate them.
struct ScaleBuckets {
  AreaRange all, small, medium, large;
};
ScaleBuckets make_scale_buckets(int image_size);

// Full six-metric report at the given image scale.
EvalResult evaluate_detections(const std::vector<EvalDetection>& detections,
                               const std::vector<EvalGroundTruth>& ground_truths,
                               const PairIouFn& iou_fn, int image_size, int max_dets = 100);

}  // namespace htc
