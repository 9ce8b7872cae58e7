#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "htc/cascade.hpp"
#include "htc/ops.hpp"

namespace htc {

// Per-iteration loss breakdown. The scalar graph nodes are kept so tests can
// backpropagate individual terms; the totals satisfy
//   total == sum_t alpha[t] * (cls[t] + reg[t] + mask[t]) + beta * seg
template <typename S>
struct LossReport {
  std::vector<double> cls, reg, mask;
  double seg = 0.0;
  double total = 0.0;
  std::vector<double> alpha;
  double beta = 0.0;

  std::vector<Tensor<S>> cls_nodes, reg_nodes, mask_nodes;
  Tensor<S> seg_node;
  Tensor<S> total_node;

  // Name of the first non-finite term, empty when all terms are finite.
  std::string first_non_finite() const {
    for (size_t t = 0; t < cls.size(); ++t) {
      if (!std::isfinite(cls[t])) return "L_cls[" + std::to_string(t) + "]";
      if (!std::isfinite(reg[t])) return "L_reg[" + std::to_string(t) + "]";
      if (!std::isfinite(mask[t])) return "L_mask[" + std::to_string(t) + "]";
    }
    if (!std::isfinite(seg)) return "L_seg";
    if (!std::isfinite(total)) return "total";
    return "";
  }
};

// Assembles Eq.-style multi-task loss from a training forward pass:
// classification cross-entropy over all sampled RoIs, smooth-L1 over
// positive deltas, per-class binary cross-entropy on positive masks, and
// pixel cross-entropy for the stuff map, combined with the per-stage alpha
// weights and the semantic weight beta.
template <typename S>
LossReport<S> compute_loss(const TrainForward<S>& fwd, const PipelineConfig& cfg) {
  const int T = static_cast<int>(fwd.stages.size());
  if (T != cfg.num_stages)
    throw std::invalid_argument("compute_loss: stage count " + std::to_string(T) +
                                " != configured " + std::to_string(cfg.num_stages));

  LossReport<S> rep;
  rep.beta = cfg.semantic_branch ? cfg.semantic_loss_weight : 0.0;
  Tensor<S> total;
  for (int t = 0; t < T; ++t) {
    const auto& st = fwd.stages[static_cast<size_t>(t)];
    const double alpha = cfg.stages[static_cast<size_t>(t)].loss_weight;
    rep.alpha.push_back(alpha);

    Tensor<S> l_cls = cross_entropy_loss(st.box.class_logits, st.assigned.labels);
    Tensor<S> l_reg, l_mask;
    if (!st.assigned.positive_indices.empty()) {
      Tensor<S> pos_deltas = gather_rows(st.box.deltas, st.assigned.positive_indices);
      std::vector<S> tvals;
      tvals.reserve(st.assigned.box_targets.size() * 4);
      for (const auto& d : st.assigned.box_targets)
        for (double v : d) tvals.push_back(static_cast<S>(v));
      Tensor<S> target = Tensor<S>::from({static_cast<int>(st.assigned.box_targets.size()), 4},
                                         std::move(tvals));
      l_reg = smooth_l1_loss(pos_deltas, target, static_cast<S>(cfg.smooth_l1_beta));
    } else {
      l_reg = Tensor<S>::scalar(S(0));
    }

    if (st.mask_logits.defined() && !st.mask_targets.empty()) {
      std::vector<int> channels;
      for (int pi : st.assigned.positive_indices)
        channels.push_back(st.assigned.labels[static_cast<size_t>(pi)] - 1);
      Tensor<S> pred = gather_channel(st.mask_logits, channels);
      const int m = cfg.mask_resolution;
      std::vector<S> tvals;
      tvals.reserve(st.mask_targets.size() * static_cast<size_t>(m) * m);
      for (const auto& mk : st.mask_targets)
        for (uint8_t v : mk.data) tvals.push_back(static_cast<S>(v));
      Tensor<S> target = Tensor<S>::from({static_cast<int>(st.mask_targets.size()), 1, m, m},
                                         std::move(tvals));
      l_mask = binary_cross_entropy_loss(pred, target);
    } else {
      l_mask = Tensor<S>::scalar(S(0));
    }

    rep.cls.push_back(static_cast<double>(l_cls.item()));
    rep.reg.push_back(static_cast<double>(l_reg.item()));
    rep.mask.push_back(static_cast<double>(l_mask.item()));
    rep.cls_nodes.push_back(l_cls);
    rep.reg_nodes.push_back(l_reg);
    rep.mask_nodes.push_back(l_mask);

    Tensor<S> stage_sum = elementwise_add(elementwise_add(l_cls, l_reg), l_mask);
    Tensor<S> weighted = mul_scalar(stage_sum, static_cast<S>(alpha));
    total = t == 0 ? weighted : elementwise_add(total, weighted);
  }

  if (cfg.semantic_branch) {
    if (!fwd.semantic_logits.defined())
      throw std::invalid_argument("compute_loss: semantic branch enabled but no logits present");
    rep.seg_node = cross_entropy_loss(fwd.semantic_logits, fwd.stuff_labels);
    rep.seg = static_cast<double>(rep.seg_node.item());
    total = elementwise_add(total, mul_scalar(rep.seg_node, static_cast<S>(rep.beta)));
  } else {
    rep.seg_node = Tensor<S>::scalar(S(0));
    rep.seg = 0.0;
  }

  rep.total_node = total;
  rep.total = static_cast<double>(total.item());
  return rep;
}

}  // namespace htc
