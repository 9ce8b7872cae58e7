#pragma once

#include <cstdint>
#include <vector>

#include "htc/cascade.hpp"
#include "htc/dataset.hpp"
#include "htc/eval.hpp"
#include "htc/rng.hpp"

namespace htc {

struct EvalProtocolOptions {
  int proposal_jitter = 8;
  int proposal_random = 16;
  bool per_stage_masks = false;  // also score each stage's masks separately
};

struct ModelEvalResult {
  EvalResult box;
  EvalResult mask;
  std::vector<EvalResult> stage_mask;  // per stage when per_stage_masks is set
  int n_images = 0;
  int n_detections = 0;
};

// Shared evaluation protocol: proposals come from the same deterministic
// jittered-GT generator used in training (per-image seed derived from the
// eval seed), the model runs single-image inference, and detections are
// scored with the COCO-style evaluator for boxes and masks.
template <typename S>
ModelEvalResult evaluate_model(const HtcModel<S>& model, const Dataset& val, uint64_t seed,
                               const EvalProtocolOptions& opts = {}) {
  ModelEvalResult out;
  std::vector<EvalDetection> box_dets, mask_dets;
  std::vector<std::vector<EvalDetection>> stage_dets(
      static_cast<size_t>(model.config().num_stages));
  std::vector<EvalGroundTruth> gts;

  InferenceOptions iopts;
  iopts.keep_stage_masks = opts.per_stage_masks;

  for (const auto& sample : val.samples) {
    for (const auto& inst : sample.instances) {
      EvalGroundTruth g;
      g.image_id = sample.id;
      g.category_id = inst.label;
      g.box = inst.box;
      g.mask = rle_encode(inst.mask);
      g.area = static_cast<double>(inst.mask.area());
      gts.push_back(std::move(g));
    }
    if (sample.instances.empty()) continue;

    std::vector<Box> gt_boxes;
    for (const auto& inst : sample.instances) gt_boxes.push_back(inst.box);
    const std::vector<Box> proposals = generate_proposals(
        gt_boxes, sample.w, sample.h,
        derive_seed(seed, "eval_proposal", static_cast<uint64_t>(sample.id)),
        opts.proposal_jitter, opts.proposal_random);

    std::vector<S> pixels;
    pixels.reserve(static_cast<size_t>(3) * sample.h * sample.w);
    for (float v : sample.image_chw()) pixels.push_back(static_cast<S>(v));
    Tensor<S> image = Tensor<S>::from({1, 3, sample.h, sample.w}, std::move(pixels));

    InferenceResult inf = model.inference(image, proposals, iopts);
    out.n_detections += static_cast<int>(inf.detections.size());
    for (size_t d = 0; d < inf.detections.size(); ++d) {
      const Detection& det = inf.detections[d];
      EvalDetection bd;
      bd.image_id = sample.id;
      bd.category_id = det.label;
      bd.score = det.score;
      bd.box = det.box;
      bd.area = det.box.area();
      EvalDetection md = bd;
      md.mask = rle_encode(det.full_mask);
      md.area = static_cast<double>(rle_area(md.mask));
      box_dets.push_back(std::move(bd));
      mask_dets.push_back(std::move(md));
      if (opts.per_stage_masks) {
        for (size_t t = 0; t < inf.stage_full_masks[d].size(); ++t) {
          EvalDetection sd;
          sd.image_id = sample.id;
          sd.category_id = det.label;
          sd.score = det.score;
          sd.box = det.box;
          sd.mask = rle_encode(inf.stage_full_masks[d][t]);
          sd.area = static_cast<double>(rle_area(sd.mask));
          stage_dets[t].push_back(std::move(sd));
        }
      }
    }
    ++out.n_images;
  }

  const int image_size = val.image_size > 0 ? val.image_size : 128;
  out.box = evaluate_detections(box_dets, gts, box_pair_iou, image_size,
                                model.config().max_detections);
  out.mask = evaluate_detections(mask_dets, gts, mask_pair_iou, image_size,
                                 model.config().max_detections);
  if (opts.per_stage_masks) {
    for (const auto& sd : stage_dets)
      out.stage_mask.push_back(evaluate_detections(sd, gts, mask_pair_iou, image_size,
                                                   model.config().max_detections));
  }
  return out;
}

}  // namespace htc
