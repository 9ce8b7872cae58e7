#pragma once

#include <array>
#include <vector>

namespace htc {

// Axis-aligned box in continuous image coordinates. (x2,y2) is the exclusive
// edge, so width = x2 - x1 with no +1 correction anywhere.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double score = 0;
  int label = -1;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
};

// A box bound to one image of a batch and one cascade stage.
struct RoI {
  int image_index = 0;
  Box box;
  int stage = 0;
};

using BoxDeltas = std::array<double, 4>;  // dx, dy, dw, dh

double iou(const Box& a, const Box& b);

// Standard R-CNN delta coding: dx=(cx_t-cx_p)/w_p, dy=(cy_t-cy_p)/h_p,
// dw=ln(w_t/w_p), dh=ln(h_t/h_p). Proposal extents must be positive.
BoxDeltas encode_deltas(const Box& proposal, const Box& target);

// Inverse of encode_deltas; does not clip. dw/dh are clamped to ln(1000/16)
// so untrained heads cannot overflow exp().
Box decode_deltas(const Box& proposal, const BoxDeltas& deltas);

Box clip_box(const Box& b, double image_w, double image_h);

// clip_box, then re-inflate degenerate extents to min_extent (kept inside
// the image) so downstream pooling and delta coding stay well-defined.
Box clip_with_min_extent(const Box& b, double image_w, double image_h, double min_extent = 1.0);

// Greedy descending-score suppression; ties broken by lower input index.
// Returns kept indices in suppression order.
std::vector<int> nms(const std::vector<Box>& boxes, double iou_threshold);

}  // namespace htc
