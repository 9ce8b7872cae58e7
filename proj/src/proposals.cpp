#include "htc/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "htc/rng.hpp"

namespace htc {

std::vector<Box> generate_proposals(const std::vector<Box>& gt_boxes, double image_w,
                                    double image_h, uint64_t seed, int n_jitter, int n_random,
                                    double center_sigma, double scale_sigma) {
  if (gt_boxes.empty())
    throw std::invalid_argument("generate_proposals: ground-truth box list is empty");
  Rng rng(derive_seed(seed, "proposals"));
  std::vector<Box> out;
  out.reserve(gt_boxes.size() * static_cast<size_t>(n_jitter) + static_cast<size_t>(n_random));
  for (const auto& gt : gt_boxes) {
    for (int j = 0; j < n_jitter; ++j) {
      const double cx = gt.cx() + rng.gaussian(0.0, center_sigma * gt.width());
      const double cy = gt.cy() + rng.gaussian(0.0, center_sigma * gt.height());
      const double w = gt.width() * std::exp(rng.gaussian(0.0, scale_sigma));
      const double h = gt.height() * std::exp(rng.gaussian(0.0, scale_sigma));
      Box b;
      b.x1 = cx - w / 2;
      b.y1 = cy - h / 2;
      b.x2 = cx + w / 2;
      b.y2 = cy + h / 2;
      out.push_back(clip_with_min_extent(b, image_w, image_h));
    }
  }
  for (int j = 0; j < n_random; ++j) {
    double xa = rng.uniform(0.0, image_w), xb = rng.uniform(0.0, image_w);
    double ya = rng.uniform(0.0, image_h), yb = rng.uniform(0.0, image_h);
    Box b;
    b.x1 = std::min(xa, xb);
    b.x2 = std::max(xa, xb);
    b.y1 = std::min(ya, yb);
    b.y2 = std::max(ya, yb);
    out.push_back(clip_with_min_extent(b, image_w, image_h, 2.0));
  }
  return out;
}

std::vector<Box> generate_grid_proposals(double image_w, double image_h) {
  std::vector<Box> out;
  const double base = std::min(image_w, image_h);
  const double scales[] = {0.15, 0.3, 0.5};
  const double aspects[] = {0.5, 1.0, 2.0};
  for (double s : scales) {
    const double step = std::max(4.0, base * s / 2);
    for (double a : aspects) {
      const double w = base * s * std::sqrt(a);
      const double h = base * s / std::sqrt(a);
      for (double cy = step / 2; cy < image_h; cy += step)
        for (double cx = step / 2; cx < image_w; cx += step) {
          Box b;
          b.x1 = cx - w / 2;
          b.y1 = cy - h / 2;
          b.x2 = cx + w / 2;
          b.y2 = cy + h / 2;
          out.push_back(clip_with_min_extent(b, image_w, image_h, 2.0));
        }
    }
  }
  return out;
}

BinaryMask crop_mask_target(const BinaryMask& gt_mask, const Box& roi, int out) {
  BinaryMask target(out, out);
  const double bw = roi.width() / out;
  const double bh = roi.height() / out;
  for (int i = 0; i < out; ++i) {
    const double y = roi.y1 + (i + 0.5) * bh;
    const int py = static_cast<int>(std::floor(y));
    for (int j = 0; j < out; ++j) {
      const double x = roi.x1 + (j + 0.5) * bw;
      const int px = static_cast<int>(std::floor(x));
      const bool inside = px >= 0 && px < gt_mask.w && py >= 0 && py < gt_mask.h;
      target.set(i, j, inside ? gt_mask.at(py, px) : 0);
    }
  }
  return target;
}

namespace {

// Matching shared by both assignment entry points.
void match_boxes(const std::vector<Box>& boxes, const std::vector<GtInstance>& gt,
                 double threshold, std::vector<int>* labels, std::vector<int>* matched) {
  labels->assign(boxes.size(), 0);
  matched->assign(boxes.size(), -1);
  for (size_t i = 0; i < boxes.size(); ++i) {
    double best = 0.0;
    int best_gt = -1;
    for (size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(boxes[i], gt[g].box);
      if (v > best) {  // strict: ties keep the lowest GT index
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0 && best >= threshold) {
      (*labels)[i] = gt[static_cast<size_t>(best_gt)].label;
      (*matched)[i] = best_gt;
    }
  }
}

AssignedBatch build_batch(const std::vector<Box>& boxes, const std::vector<int>& keep,
                          const std::vector<int>& labels, const std::vector<int>& matched,
                          const std::vector<GtInstance>& gt, int image_index, int stage,
                          int mask_resolution) {
  AssignedBatch out;
  out.rois.reserve(keep.size());
  for (int idx : keep) {
    RoI r;
    r.image_index = image_index;
    r.box = boxes[static_cast<size_t>(idx)];
    r.stage = stage;
    out.rois.push_back(r);
    out.labels.push_back(labels[static_cast<size_t>(idx)]);
    out.matched_gt.push_back(matched[static_cast<size_t>(idx)]);
  }
  for (int i = 0; i < out.num_rois(); ++i) {
    if (out.labels[static_cast<size_t>(i)] <= 0) continue;
    out.positive_indices.push_back(i);
    const auto& inst = gt[static_cast<size_t>(out.matched_gt[static_cast<size_t>(i)])];
    out.box_targets.push_back(encode_deltas(out.rois[static_cast<size_t>(i)].box, inst.box));
    out.mask_targets.push_back(
        crop_mask_target(inst.mask, out.rois[static_cast<size_t>(i)].box, mask_resolution));
  }
  return out;
}

}  // namespace

AssignedBatch assign_and_sample(const std::vector<Box>& proposals,
                                const std::vector<GtInstance>& gt, const StageConfig& cfg,
                                uint64_t seed, int image_index, int stage, int mask_resolution) {
  if (cfg.iou_threshold <= 0.0 || cfg.iou_threshold >= 1.0)
    throw std::invalid_argument("assign_and_sample: iou_threshold must be in (0,1)");
  std::vector<int> labels, matched;
  match_boxes(proposals, gt, cfg.iou_threshold, &labels, &matched);

  std::vector<int> pos, neg;
  for (size_t i = 0; i < proposals.size(); ++i)
    (labels[i] > 0 ? pos : neg).push_back(static_cast<int>(i));

  Rng rng(derive_seed(seed, "assign_sample", static_cast<uint64_t>(image_index),
                      static_cast<uint64_t>(stage)));
  rng.shuffle(pos);
  rng.shuffle(neg);
  const int want_pos = static_cast<int>(cfg.samples_per_image * cfg.positive_fraction);
  const int n_pos = std::min<int>(static_cast<int>(pos.size()), want_pos);
  const int n_neg = std::min<int>(static_cast<int>(neg.size()), cfg.samples_per_image - n_pos);
  std::vector<int> keep(pos.begin(), pos.begin() + n_pos);
  keep.insert(keep.end(), neg.begin(), neg.begin() + n_neg);
  std::sort(keep.begin(), keep.end());

  return build_batch(proposals, keep, labels, matched, gt, image_index, stage, mask_resolution);
}

AssignedBatch assign_targets(const std::vector<Box>& boxes, const std::vector<GtInstance>& gt,
                             const StageConfig& cfg, int image_index, int stage,
                             int mask_resolution) {
  if (cfg.iou_threshold <= 0.0 || cfg.iou_threshold >= 1.0)
    throw std::invalid_argument("assign_targets: iou_threshold must be in (0,1)");
  std::vector<int> labels, matched;
  match_boxes(boxes, gt, cfg.iou_threshold, &labels, &matched);
  std::vector<int> keep(boxes.size());
  for (size_t i = 0; i < boxes.size(); ++i) keep[i] = static_cast<int>(i);
  return build_batch(boxes, keep, labels, matched, gt, image_index, stage, mask_resolution);
}

}  // namespace htc
