#include "htc/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace htc {

double iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

BoxDeltas encode_deltas(const Box& proposal, const Box& target) {
  const double pw = proposal.width();
  const double ph = proposal.height();
  if (pw <= 0 || ph <= 0)
    throw std::invalid_argument("encode_deltas: proposal has non-positive extent");
  return {(target.cx() - proposal.cx()) / pw, (target.cy() - proposal.cy()) / ph,
          std::log(target.width() / pw), std::log(target.height() / ph)};
}

Box decode_deltas(const Box& proposal, const BoxDeltas& deltas) {
  const double pw = proposal.width();
  const double ph = proposal.height();
  if (pw <= 0 || ph <= 0)
    throw std::invalid_argument("decode_deltas: proposal has non-positive extent");
  static const double kMaxScaleDelta = std::log(1000.0 / 16.0);
  const double dx = deltas[0], dy = deltas[1];
  const double dw = std::clamp(deltas[2], -kMaxScaleDelta, kMaxScaleDelta);
  const double dh = std::clamp(deltas[3], -kMaxScaleDelta, kMaxScaleDelta);
  const double cx = proposal.cx() + dx * pw;
  const double cy = proposal.cy() + dy * ph;
  const double w = pw * std::exp(dw);
  const double h = ph * std::exp(dh);
  Box out;
  out.x1 = cx - 0.5 * w;
  out.y1 = cy - 0.5 * h;
  out.x2 = cx + 0.5 * w;
  out.y2 = cy + 0.5 * h;
  out.score = proposal.score;
  out.label = proposal.label;
  return out;
}

Box clip_box(const Box& b, double image_w, double image_h) {
  Box out = b;
  out.x1 = std::clamp(b.x1, 0.0, image_w);
  out.y1 = std::clamp(b.y1, 0.0, image_h);
  out.x2 = std::clamp(b.x2, 0.0, image_w);
  out.y2 = std::clamp(b.y2, 0.0, image_h);
  if (out.x2 < out.x1) out.x2 = out.x1;
  if (out.y2 < out.y1) out.y2 = out.y1;
  return out;
}

Box clip_with_min_extent(const Box& b, double image_w, double image_h, double min_extent) {
  Box out = clip_box(b, image_w, image_h);
  if (out.width() < min_extent) {
    const double cx = std::clamp(out.cx(), min_extent / 2, image_w - min_extent / 2);
    out.x1 = cx - min_extent / 2;
    out.x2 = cx + min_extent / 2;
  }
  if (out.height() < min_extent) {
    const double cy = std::clamp(out.cy(), min_extent / 2, image_h - min_extent / 2);
    out.y1 = cy - min_extent / 2;
    out.y2 = cy + min_extent / 2;
  }
  return out;
}

std::vector<int> nms(const std::vector<Box>& boxes, double iou_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (boxes[static_cast<size_t>(a)].score != boxes[static_cast<size_t>(b)].score)
      return boxes[static_cast<size_t>(a)].score > boxes[static_cast<size_t>(b)].score;
    return a < b;
  });
  std::vector<char> suppressed(boxes.size(), 0);
  std::vector<int> kept;
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const int i = order[oi];
    if (suppressed[static_cast<size_t>(i)]) continue;
    kept.push_back(i);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const int j = order[oj];
      if (suppressed[static_cast<size_t>(j)]) continue;
      if (iou(boxes[static_cast<size_t>(i)], boxes[static_cast<size_t>(j)]) > iou_threshold)
        suppressed[static_cast<size_t>(j)] = 1;
    }
  }
  return kept;
}

}  // namespace htc
