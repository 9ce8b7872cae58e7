#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "htc/backbone.hpp"
#include "htc/ops.hpp"
#include "htc/proposals.hpp"
#include "htc/roi_align.hpp"

namespace htc {

enum class SemanticFusion { kNone, kBbox, kMask, kBoth };

inline const char* to_string(SemanticFusion f) {
  switch (f) {
    case SemanticFusion::kNone: return "none";
    case SemanticFusion::kBbox: return "bbox";
    case SemanticFusion::kMask: return "mask";
    case SemanticFusion::kBoth: return "both";
  }
  return "none";
}

// Variant flags and head geometry for the whole pipeline. The four
// architecture variants map to:
//   cascade mask r-cnn:  interleaved=0, mask_info_flow=0, semantic_branch=0
//   interleaved:         interleaved=1
//   + mask info flow:    interleaved=1, mask_info_flow=1
//   full hybrid cascade: all on, semantic_fusion=both
struct PipelineConfig {
  int num_stages = 3;
  bool interleaved = true;
  bool mask_info_flow = true;
  bool semantic_branch = true;
  SemanticFusion semantic_fusion = SemanticFusion::kBoth;
  std::vector<StageConfig> stages;
  double score_threshold = 0.001;
  int mask_resolution = 28;
  int num_thing_classes = 3;
  int num_stuff_classes = 4;
  int fpn_channels = 32;
  int mask_head_channels = 16;
  int box_head_width = 256;
  double nms_iou = 0.5;
  int max_detections = 100;
  double smooth_l1_beta = 1.0;
  double semantic_loss_weight = 1.0;

  static PipelineConfig with_defaults(int T = 3) {
    PipelineConfig cfg;
    cfg.num_stages = T;
    const double thresholds[] = {0.5, 0.6, 0.7};
    const double alphas[] = {1.0, 0.5, 0.25};
    for (int t = 0; t < T; ++t) {
      StageConfig sc;
      sc.index = t;
      sc.iou_threshold = t < 3 ? thresholds[t] : thresholds[2] + 0.05 * (t - 2);
      sc.loss_weight = t < 3 ? alphas[t] : alphas[2] * std::pow(0.5, t - 2);
      cfg.stages.push_back(sc);
    }
    return cfg;
  }

  // Flags-off baseline (Fig. 2(a) wiring).
  static PipelineConfig cascade_mask_rcnn(int T = 3) {
    PipelineConfig cfg = with_defaults(T);
    cfg.interleaved = false;
    cfg.mask_info_flow = false;
    cfg.semantic_branch = false;
    cfg.semantic_fusion = SemanticFusion::kNone;
    return cfg;
  }

  void validate() const {
    if (num_stages < 1) throw std::invalid_argument("pipeline: num_stages must be >= 1");
    if (static_cast<int>(stages.size()) != num_stages)
      throw std::invalid_argument("pipeline: stage config count " +
                                  std::to_string(stages.size()) + " != num_stages " +
                                  std::to_string(num_stages));
    for (int t = 0; t < num_stages; ++t) {
      const auto& sc = stages[static_cast<size_t>(t)];
      if (sc.iou_threshold <= 0.0 || sc.iou_threshold >= 1.0)
        throw std::invalid_argument("pipeline: stage " + std::to_string(t) +
                                    " iou_threshold outside (0,1)");
      if (sc.loss_weight <= 0.0)
        throw std::invalid_argument("pipeline: stage " + std::to_string(t) +
                                    " loss weight must be > 0");
      if (t > 0 && sc.iou_threshold <= stages[static_cast<size_t>(t - 1)].iou_threshold)
        throw std::invalid_argument("pipeline: stage IoU thresholds must be strictly increasing");
      if (sc.samples_per_image < 1 || sc.positive_fraction <= 0.0 || sc.positive_fraction > 1.0)
        throw std::invalid_argument("pipeline: invalid sampling settings at stage " +
                                    std::to_string(t));
    }
    if (semantic_fusion != SemanticFusion::kNone && !semantic_branch)
      throw std::invalid_argument("pipeline: semantic_fusion requires semantic_branch");
    if (mask_resolution < 2 || mask_resolution % 2 != 0)
      throw std::invalid_argument("pipeline: mask_resolution must be a positive even number");
    if (score_threshold < 0.0 || score_threshold >= 1.0)
      throw std::invalid_argument("pipeline: score_threshold outside [0,1)");
    if (num_thing_classes < 1 || num_stuff_classes < 2)
      throw std::invalid_argument("pipeline: class counts out of range");
  }

  bool fuse_bbox() const {
    return semantic_fusion == SemanticFusion::kBbox || semantic_fusion == SemanticFusion::kBoth;
  }
  bool fuse_mask() const {
    return semantic_fusion == SemanticFusion::kMask || semantic_fusion == SemanticFusion::kBoth;
  }
};

template <typename S>
struct BoxHeadOutput {
  Tensor<S> class_logits;  // [R, num_thing_classes + 1]
  Tensor<S> deltas;        // [R, 4], class-agnostic
};

// flatten -> fc -> relu -> fc -> relu -> {cls, reg}
template <typename S>
class BoxHead {
 public:
  BoxHead() = default;
  BoxHead(ParamRegistry<S>& reg, const std::string& base, int in_channels, int pool_size,
          int width, int num_classes)
      : pool_size_(pool_size), in_features_(in_channels * pool_size * pool_size) {
    fc1_ = LinearLayer<S>(reg, base + ".fc1", width, in_features_);
    fc2_ = LinearLayer<S>(reg, base + ".fc2", width, width);
    cls_ = LinearLayer<S>(reg, base + ".cls", num_classes + 1, width, 0.01);
    reg_ = LinearLayer<S>(reg, base + ".reg", 4, width, 0.01);
  }

  BoxHeadOutput<S> forward(const Tensor<S>& pooled) const {
    if (pooled.ndim() != 4 || pooled.dim(2) != pool_size_ || pooled.dim(3) != pool_size_)
      throw std::invalid_argument("box head: expected pooled features [R,C," +
                                  std::to_string(pool_size_) + "," + std::to_string(pool_size_) +
                                  "], got " + shape_str(pooled.shape()));
    const int R = pooled.dim(0);
    Tensor<S> x = reshape(pooled, {R, in_features_});
    x = relu(fc1_(x));
    x = relu(fc2_(x));
    return {cls_(x), reg_(x)};
  }

 private:
  int pool_size_ = 7;
  int in_features_ = 0;
  LinearLayer<S> fc1_, fc2_, cls_, reg_;
};

// Mask head of one stage, split per the two-phase contract: transform()
// produces the 14x14 intermediate feature m_minus (four 3x3 convs; when a
// preceding stage's m_minus is supplied it enters through the 1x1 embedding
// conv and an element-wise sum), predict() upsamples by deconv and emits
// per-class mask logits.
template <typename S>
class MaskHead {
 public:
  MaskHead() = default;
  MaskHead(ParamRegistry<S>& reg, const std::string& base, int in_channels, int head_channels,
           int num_classes, bool with_flow_embed)
      : has_flow_embed_(with_flow_embed) {
    conv_[0] = ConvLayer<S>(reg, base + ".conv1", head_channels, in_channels, 3, 1, 1);
    for (int i = 1; i < 4; ++i)
      conv_[static_cast<size_t>(i)] =
          ConvLayer<S>(reg, base + ".conv" + std::to_string(i + 1), head_channels, head_channels, 3, 1, 1);
    if (with_flow_embed)
      flow_embed_ = ConvLayer<S>(reg, base + ".flow_embed", in_channels, head_channels, 1, 1, 0);
    deconv_weight_ = reg.deconv_weight(base + ".deconv.weight", head_channels, head_channels, 4);
    predict_ = ConvLayer<S>(reg, base + ".predict", num_classes, head_channels, 1, 1, 0);
  }

  // x_mask: [R, C, 14, 14]; prev: preceding stage's m_minus, required iff the
  // head was built with a flow embedding and flow is active for this call.
  Tensor<S> transform(const Tensor<S>& x_mask, const std::optional<Tensor<S>>& prev) const {
    Tensor<S> x = x_mask;
    if (prev.has_value()) {
      if (!has_flow_embed_)
        throw std::invalid_argument("mask head: got preceding features but has no flow embedding");
      if (prev->shape() != Shape{x_mask.dim(0), conv_[0].weight.dim(0), x_mask.dim(2),
                                 x_mask.dim(3)})
        throw std::invalid_argument("mask head: preceding m_minus shape " +
                                    shape_str(prev->shape()) + " incompatible with pooled " +
                                    shape_str(x_mask.shape()));
      x = elementwise_add(x_mask, flow_embed_(*prev));
    }
    for (int i = 0; i < 4; ++i) x = relu(conv_[static_cast<size_t>(i)](x));
    return x;
  }

  Tensor<S> predict(const Tensor<S>& m_minus) const {
    Tensor<S> up = relu(deconv2d(m_minus, deconv_weight_, 2));
    return predict_(up);
  }

  bool has_flow_embed() const { return has_flow_embed_; }

 private:
  bool has_flow_embed_ = false;
  std::array<ConvLayer<S>, 4> conv_;
  ConvLayer<S> flow_embed_;
  Tensor<S> deconv_weight_;
  ConvLayer<S> predict_;
};

// Captured data-flow of one training stage, for topology assertions.
struct StageTrace {
  std::vector<RoI> input_rois;   // boxes the box branch pooled on (r_{t-1})
  std::vector<Box> refined;      // decoded r_t, clipped, one per RoI
  std::vector<RoI> mask_rois;    // boxes the mask branch pooled on (positives)
  int num_positives = 0;
};

template <typename S>
struct StageOutputs {
  BoxHeadOutput<S> box;
  Tensor<S> mask_logits;                 // [P, num_classes, 2m, 2m]; undefined when P == 0
  Tensor<S> m_minus;                     // [P, C_m, m, m]; undefined when P == 0
  AssignedBatch assigned;                // labels/targets on the input boxes
  std::vector<BinaryMask> mask_targets;  // per positive, on the mask_rois boxes
};

template <typename S>
struct TrainForward {
  std::vector<StageOutputs<S>> stages;
  Tensor<S> semantic_logits;  // defined iff the semantic branch exists
  std::vector<int> stuff_labels;  // row-major [N * H/8 * W/8] target for L_seg
  std::vector<StageTrace> traces;
};

struct Detection {
  Box box;
  int label = 0;
  double score = 0.0;
  std::vector<std::vector<float>> stage_mask_probs;  // per stage, mask_res^2 probabilities
  std::vector<float> mask_probs;                     // stage-ensembled probabilities
  BinaryMask full_mask;                              // pasted at image resolution
};

struct InferenceOptions {
  bool keep_stage_masks = false;  // also paste per-stage masks (Table-4 style eval)
};

struct InferenceResult {
  std::vector<Detection> detections;
  std::vector<std::vector<BinaryMask>> stage_full_masks;  // [det][stage] when requested
};

// The full model: backbone + FPN, optional semantic branch, and T box/mask
// head pairs wired per the variant flags.
template <typename S>
class HtcModel {
 public:
  HtcModel(const PipelineConfig& cfg, uint64_t seed)
      : cfg_(cfg), registry_(seed) {
    cfg_.validate();
    backbone_ = std::make_unique<BackboneFpn<S>>(registry_, cfg_.fpn_channels);
    if (cfg_.semantic_branch)
      semantic_ = std::make_unique<SemanticBranch<S>>(registry_, cfg_.fpn_channels,
                                                      cfg_.num_stuff_classes);
    for (int t = 0; t < cfg_.num_stages; ++t) {
      const std::string base = "cascade.stage" + std::to_string(t);
      box_heads_.emplace_back(registry_, base + ".box_head", cfg_.fpn_channels, kBoxPool,
                              cfg_.box_head_width, cfg_.num_thing_classes);
      const bool flow_embed = cfg_.mask_info_flow && t >= 1;
      mask_heads_.emplace_back(registry_, base + ".mask_head", cfg_.fpn_channels,
                               cfg_.mask_head_channels, cfg_.num_thing_classes, flow_embed);
    }
  }

  const PipelineConfig& config() const { return cfg_; }
  ParamRegistry<S>& params() { return registry_; }
  const ParamRegistry<S>& params() const { return registry_; }
  const BoxHead<S>& box_head(int t) const { return box_heads_[static_cast<size_t>(t)]; }
  const MaskHead<S>& mask_head(int t) const { return mask_heads_[static_cast<size_t>(t)]; }

  // Training forward over a batch. `gts` and `proposals` are per image;
  // image tensor is [N,3,H,W]. Stage 1 samples RoIs from the proposals;
  // stage t>1 re-assigns the refined boxes r_{t-1}. Refined boxes are
  // constants for pooling (no gradient through box coordinates).
  TrainForward<S> forward_train(const Tensor<S>& images,
                                const std::vector<std::vector<GtInstance>>& gts,
                                const std::vector<std::vector<Box>>& proposals,
                                const std::vector<std::vector<int>>& stuff_maps,
                                uint64_t sample_seed) const {
    const int N = images.dim(0);
    if (static_cast<int>(gts.size()) != N || static_cast<int>(proposals.size()) != N)
      throw std::invalid_argument("forward_train: per-image target count != batch size");
    const double img_w = images.dim(3), img_h = images.dim(2);

    TrainForward<S> out;
    FeaturePyramid<S> pyr = backbone_->forward(images);
    std::optional<SemanticFeatureMap<S>> sem;
    if (semantic_) {
      sem = semantic_->forward(pyr);
      out.semantic_logits = sem->logits;
      out.stuff_labels = downsample_stuff(stuff_maps, static_cast<int>(img_h),
                                          static_cast<int>(img_w));
    }

    // Per-image RoI boxes for the current stage, refreshed after each decode.
    std::vector<std::vector<Box>> current(static_cast<size_t>(N));
    for (int t = 0; t < cfg_.num_stages; ++t) {
      const StageConfig& sc = cfg_.stages[static_cast<size_t>(t)];
      AssignedBatch batch;
      for (int i = 0; i < N; ++i) {
        AssignedBatch part =
            t == 0 ? assign_and_sample(proposals[static_cast<size_t>(i)],
                                       gts[static_cast<size_t>(i)], sc, sample_seed, i, t,
                                       cfg_.mask_resolution)
                   : assign_targets(current[static_cast<size_t>(i)], gts[static_cast<size_t>(i)],
                                    sc, i, t, cfg_.mask_resolution);
        append_batch(&batch, part);
      }

      StageOutputs<S> st;
      StageTrace trace;
      trace.input_rois = batch.rois;

      Tensor<S> x_box = pool_pyramid(pyr, batch.rois, kBoxPool);
      if (sem && cfg_.fuse_bbox())
        x_box = elementwise_add(x_box, roi_align(sem->features, batch.rois, kBoxPool, 0.125));
      st.box = box_heads_[static_cast<size_t>(t)].forward(x_box);

      // Decode r_t as constants; these drive next-stage assignment and any
      // interleaved mask pooling.
      const auto& dvals = st.box.deltas.data();
      trace.refined.resize(batch.rois.size());
      for (size_t r = 0; r < batch.rois.size(); ++r) {
        BoxDeltas d{static_cast<double>(dvals[r * 4 + 0]), static_cast<double>(dvals[r * 4 + 1]),
                    static_cast<double>(dvals[r * 4 + 2]), static_cast<double>(dvals[r * 4 + 3])};
        trace.refined[r] = clip_with_min_extent(decode_deltas(batch.rois[r].box, d), img_w, img_h);
      }

      // Mask branch runs on positives only.
      std::vector<RoI> mask_rois;
      std::vector<BinaryMask> mask_targets;
      for (int pi : batch.positive_indices) {
        RoI r = batch.rois[static_cast<size_t>(pi)];
        if (cfg_.interleaved) r.box = trace.refined[static_cast<size_t>(pi)];
        mask_rois.push_back(r);
        const auto& inst =
            gts[static_cast<size_t>(r.image_index)][static_cast<size_t>(
                batch.matched_gt[static_cast<size_t>(pi)])];
        mask_targets.push_back(crop_mask_target(inst.mask, r.box, cfg_.mask_resolution));
      }
      trace.mask_rois = mask_rois;
      trace.num_positives = static_cast<int>(mask_rois.size());

      if (!mask_rois.empty()) {
        Tensor<S> x_mask = pool_pyramid(pyr, mask_rois, kMaskPool);
        if (sem && cfg_.fuse_mask())
          x_mask = elementwise_add(x_mask, roi_align(sem->features, mask_rois, kMaskPool, 0.125));
        st.m_minus = run_mask_transforms(x_mask, t);
        st.mask_logits = mask_heads_[static_cast<size_t>(t)].predict(st.m_minus);
      }
      st.assigned = std::move(batch);
      st.mask_targets = std::move(mask_targets);

      for (int i = 0; i < N; ++i) current[static_cast<size_t>(i)].clear();
      for (size_t r = 0; r < trace.refined.size(); ++r)
        current[static_cast<size_t>(trace.input_rois[r].image_index)].push_back(trace.refined[r]);

      out.stages.push_back(std::move(st));
      out.traces.push_back(std::move(trace));
    }
    return out;
  }

  // Inference on a single image. Boxes are refined progressively through all
  // box heads; classification re-runs every stage's classifier on the final
  // boxes and averages softmax scores; per-class NMS; mask heads of all
  // stages run on the survivors and their sigmoid outputs are averaged.
  InferenceResult inference(const Tensor<S>& image, const std::vector<Box>& proposals,
                            const InferenceOptions& opts = {}) const {
    if (image.dim(0) != 1)
      throw std::invalid_argument("inference: expected a single-image batch");
    const double img_w = image.dim(3), img_h = image.dim(2);
    const int K = cfg_.num_thing_classes;

    InferenceResult result;
    if (proposals.empty()) return result;

    FeaturePyramid<S> pyr = backbone_->forward(image);
    std::optional<SemanticFeatureMap<S>> sem;
    if (semantic_) sem = semantic_->forward(pyr);

    // Progressive refinement.
    std::vector<Box> boxes = proposals;
    for (int t = 0; t < cfg_.num_stages; ++t) {
      Tensor<S> x_box = pool_boxes(pyr, sem, boxes, kBoxPool, cfg_.fuse_bbox());
      BoxHeadOutput<S> bo = box_heads_[static_cast<size_t>(t)].forward(x_box);
      const auto& dvals = bo.deltas.data();
      for (size_t r = 0; r < boxes.size(); ++r) {
        BoxDeltas d{static_cast<double>(dvals[r * 4 + 0]), static_cast<double>(dvals[r * 4 + 1]),
                    static_cast<double>(dvals[r * 4 + 2]), static_cast<double>(dvals[r * 4 + 3])};
        boxes[r] = clip_with_min_extent(decode_deltas(boxes[r], d), img_w, img_h);
      }
    }

    // Ensemble classification scores on the final boxes.
    const int R = static_cast<int>(boxes.size());
    std::vector<double> scores(static_cast<size_t>(R) * (K + 1), 0.0);
    {
      Tensor<S> x_final = pool_boxes(pyr, sem, boxes, kBoxPool, cfg_.fuse_bbox());
      for (int t = 0; t < cfg_.num_stages; ++t) {
        BoxHeadOutput<S> bo = box_heads_[static_cast<size_t>(t)].forward(x_final);
        Tensor<S> sm = softmax(bo.class_logits, 1);
        for (size_t i = 0; i < scores.size(); ++i) scores[i] += static_cast<double>(sm.data()[i]);
      }
      for (auto& s : scores) s /= cfg_.num_stages;
    }

    // Per-class thresholding + NMS, then a global cap.
    struct Cand {
      Box box;
      int label;
      double score;
      int roi;
    };
    std::vector<Cand> cands;
    for (int c = 1; c <= K; ++c) {
      std::vector<Box> cls_boxes;
      std::vector<int> roi_of;
      for (int r = 0; r < R; ++r) {
        const double s = scores[static_cast<size_t>(r) * (K + 1) + c];
        if (s > cfg_.score_threshold) {
          Box b = boxes[static_cast<size_t>(r)];
          b.score = s;
          b.label = c;
          cls_boxes.push_back(b);
          roi_of.push_back(r);
        }
      }
      for (int k : nms(cls_boxes, cfg_.nms_iou))
        cands.push_back({cls_boxes[static_cast<size_t>(k)], c,
                         cls_boxes[static_cast<size_t>(k)].score, roi_of[static_cast<size_t>(k)]});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.label != b.label) return a.label < b.label;
      return a.roi < b.roi;
    });
    if (static_cast<int>(cands.size()) > cfg_.max_detections)
      cands.resize(static_cast<size_t>(cfg_.max_detections));
    if (cands.empty()) return result;

    // Mask branch: one transform chain over all stages on the survivor boxes
    // (Eq. 5 evaluated at the final RoIs), per-stage sigmoid probabilities
    // averaged.
    std::vector<RoI> det_rois;
    for (const auto& c : cands) det_rois.push_back(RoI{0, c.box, cfg_.num_stages - 1});
    Tensor<S> x_mask = pool_rois(pyr, sem, det_rois, kMaskPool, cfg_.fuse_mask());
    const int D = static_cast<int>(cands.size());
    const int m = cfg_.mask_resolution;
    std::vector<std::vector<float>> stage_probs(
        static_cast<size_t>(cfg_.num_stages),
        std::vector<float>(static_cast<size_t>(D) * m * m, 0.f));
    std::vector<int> channel(static_cast<size_t>(D));
    for (int d = 0; d < D; ++d) channel[static_cast<size_t>(d)] = cands[static_cast<size_t>(d)].label - 1;
    {
      std::optional<Tensor<S>> prev;
      for (int t = 0; t < cfg_.num_stages; ++t) {
        Tensor<S> mm = mask_heads_[static_cast<size_t>(t)].transform(
            x_mask, cfg_.mask_info_flow && t >= 1 ? prev : std::nullopt);
        Tensor<S> logits = mask_heads_[static_cast<size_t>(t)].predict(mm);
        Tensor<S> probs = sigmoid(gather_channel(logits, channel));
        for (size_t i = 0; i < probs.data().size(); ++i)
          stage_probs[static_cast<size_t>(t)][i] = static_cast<float>(probs.data()[i]);
        prev = mm;
      }
    }

    result.detections.reserve(static_cast<size_t>(D));
    if (opts.keep_stage_masks) result.stage_full_masks.resize(static_cast<size_t>(D));
    for (int d = 0; d < D; ++d) {
      Detection det;
      det.box = cands[static_cast<size_t>(d)].box;
      det.label = cands[static_cast<size_t>(d)].label;
      det.score = cands[static_cast<size_t>(d)].score;
      det.mask_probs.assign(static_cast<size_t>(m) * m, 0.f);
      for (int t = 0; t < cfg_.num_stages; ++t) {
        std::vector<float> sp(stage_probs[static_cast<size_t>(t)].begin() + static_cast<int64_t>(d) * m * m,
                              stage_probs[static_cast<size_t>(t)].begin() + static_cast<int64_t>(d + 1) * m * m);
        for (size_t i = 0; i < det.mask_probs.size(); ++i)
          det.mask_probs[i] += sp[i] / static_cast<float>(cfg_.num_stages);
        if (opts.keep_stage_masks)
          result.stage_full_masks[static_cast<size_t>(d)].push_back(
              paste_mask(sp, m, det.box, static_cast<int>(img_h), static_cast<int>(img_w)));
        det.stage_mask_probs.push_back(std::move(sp));
      }
      det.full_mask =
          paste_mask(det.mask_probs, m, det.box, static_cast<int>(img_h), static_cast<int>(img_w));
      result.detections.push_back(std::move(det));
    }
    return result;
  }

  // Bilinear paste of a mask-resolution probability map into image
  // coordinates, thresholded at 0.5.
  static BinaryMask paste_mask(const std::vector<float>& probs, int m, const Box& box, int img_h,
                               int img_w) {
    BinaryMask out(img_h, img_w);
    const double bw = box.width(), bh = box.height();
    if (bw <= 0 || bh <= 0) return out;
    const int x0 = std::max(0, static_cast<int>(std::floor(box.x1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(box.y1)));
    const int x1 = std::min(img_w, static_cast<int>(std::ceil(box.x2)));
    const int y1 = std::min(img_h, static_cast<int>(std::ceil(box.y2)));
    for (int py = y0; py < y1; ++py) {
      const double my = (py + 0.5 - box.y1) / bh * m;
      if (my < 0 || my > m) continue;
      for (int px = x0; px < x1; ++px) {
        const double mx = (px + 0.5 - box.x1) / bw * m;
        if (mx < 0 || mx > m) continue;
        double v = 0;
        detail::bilinear_taps<double>(m, m, mx, my,
                                      [&](int pix, double w) { v += w * probs[static_cast<size_t>(pix)]; });
        if (v >= 0.5) out.set(py, px, 1);
      }
    }
    return out;
  }

 private:
  static constexpr int kBoxPool = 7;
  static constexpr int kMaskPool = 14;

  static void append_batch(AssignedBatch* dst, const AssignedBatch& src) {
    const int base = dst->num_rois();
    dst->rois.insert(dst->rois.end(), src.rois.begin(), src.rois.end());
    dst->labels.insert(dst->labels.end(), src.labels.begin(), src.labels.end());
    dst->matched_gt.insert(dst->matched_gt.end(), src.matched_gt.begin(), src.matched_gt.end());
    for (int pi : src.positive_indices) dst->positive_indices.push_back(base + pi);
    dst->box_targets.insert(dst->box_targets.end(), src.box_targets.begin(),
                            src.box_targets.end());
    dst->mask_targets.insert(dst->mask_targets.end(), src.mask_targets.begin(),
                             src.mask_targets.end());
  }

  Tensor<S> pool_pyramid(const FeaturePyramid<S>& pyr, const std::vector<RoI>& rois,
                         int out_size) const {
    std::vector<int> levels(rois.size());
    const double img_size = std::max(pyr.image_h, pyr.image_w);
    for (size_t i = 0; i < rois.size(); ++i)
      levels[i] = fpn_level_for_box(rois[i].box, img_size) - 2;
    return roi_align_pyramid(pyr.levels, rois, levels, out_size, pyr.spatial_scales());
  }

  Tensor<S> pool_rois(const FeaturePyramid<S>& pyr, const std::optional<SemanticFeatureMap<S>>& sem,
                      const std::vector<RoI>& rois, int out_size, bool fuse) const {
    Tensor<S> x = pool_pyramid(pyr, rois, out_size);
    if (sem.has_value() && fuse)
      x = elementwise_add(x, roi_align(sem->features, rois, out_size, 0.125));
    return x;
  }

  Tensor<S> pool_boxes(const FeaturePyramid<S>& pyr, const std::optional<SemanticFeatureMap<S>>& sem,
                       const std::vector<Box>& boxes, int out_size, bool fuse) const {
    std::vector<RoI> rois;
    rois.reserve(boxes.size());
    for (const auto& b : boxes) rois.push_back(RoI{0, b, 0});
    return pool_rois(pyr, sem, rois, out_size, fuse);
  }

  // Eq. 5: forward every preceding transform with the current stage's pooled
  // features, threading m_minus through the 1x1 embeddings.
  Tensor<S> run_mask_transforms(const Tensor<S>& x_mask, int t) const {
    if (!cfg_.mask_info_flow || t == 0)
      return mask_heads_[static_cast<size_t>(t)].transform(x_mask, std::nullopt);
    std::optional<Tensor<S>> prev;
    for (int i = 0; i <= t; ++i)
      prev = mask_heads_[static_cast<size_t>(i)].transform(x_mask, i >= 1 ? prev : std::nullopt);
    return *prev;
  }

  PipelineConfig cfg_;
  ParamRegistry<S> registry_;
  std::unique_ptr<BackboneFpn<S>> backbone_;
  std::unique_ptr<SemanticBranch<S>> semantic_;
  std::vector<BoxHead<S>> box_heads_;
  std::vector<MaskHead<S>> mask_heads_;

  static std::vector<int> downsample_stuff(const std::vector<std::vector<int>>& stuff_maps,
                                           int img_h, int img_w) {
    const int oh = img_h / 8, ow = img_w / 8;
    std::vector<int> out;
    out.reserve(stuff_maps.size() * static_cast<size_t>(oh) * ow);
    for (const auto& map : stuff_maps) {
      if (static_cast<int>(map.size()) != img_h * img_w)
        throw std::invalid_argument("forward_train: stuff map size != image size");
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j)
          out.push_back(map[static_cast<size_t>(std::min(i * 8 + 4, img_h - 1)) * img_w +
                            std::min(j * 8 + 4, img_w - 1)]);
    }
    return out;
  }
};

}  // namespace htc
