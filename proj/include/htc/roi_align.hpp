#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "htc/geometry.hpp"
#include "htc/tensor.hpp"

// RoIAlign: quantization-free pooling. Each output cell averages
// sampling_ratio^2 bilinear samples taken at exact sub-pixel locations;
// sample coordinates outside the feature map clamp to the border. Gradients
// flow to the features only — box coordinates are constants.

namespace htc {

namespace detail {

// One bilinear sample at continuous feature coordinates (x, y), where pixel
// (i, j) covers [j, j+1) x [i, i+1). Calls f(flat_index, weight) for up to
// four taps.
template <typename S, typename F>
void bilinear_taps(int H, int W, double x, double y, F&& f) {
  double u = x - 0.5;
  double v = y - 0.5;
  if (u < 0) u = 0;
  if (v < 0) v = 0;
  if (u > W - 1) u = W - 1;
  if (v > H - 1) v = H - 1;
  const int j0 = static_cast<int>(u);
  const int i0 = static_cast<int>(v);
  const int j1 = j0 + 1 < W ? j0 + 1 : j0;
  const int i1 = i0 + 1 < H ? i0 + 1 : i0;
  const S fx = static_cast<S>(u - j0);
  const S fy = static_cast<S>(v - i0);
  f(i0 * W + j0, (S(1) - fy) * (S(1) - fx));
  f(i0 * W + j1, (S(1) - fy) * fx);
  f(i1 * W + j0, fy * (S(1) - fx));
  f(i1 * W + j1, fy * fx);
}

// Iterates every (cell, sample) pair of one pooled RoI, invoking
// g(out_cell_index, flat_pixel_index, weight) with weights that already
// include the 1/ratio^2 averaging factor.
template <typename S, typename G>
void roi_samples(const Box& b, double spatial_scale, int out_size, int ratio, int H, int W,
                 G&& g) {
  const double x1 = b.x1 * spatial_scale;
  const double y1 = b.y1 * spatial_scale;
  const double bw = (b.x2 - b.x1) * spatial_scale / out_size;
  const double bh = (b.y2 - b.y1) * spatial_scale / out_size;
  const S inv = S(1) / static_cast<S>(ratio * ratio);
  for (int cy = 0; cy < out_size; ++cy) {
    for (int cx = 0; cx < out_size; ++cx) {
      const int cell = cy * out_size + cx;
      for (int sy = 0; sy < ratio; ++sy) {
        const double y = y1 + (cy + (sy + 0.5) / ratio) * bh;
        for (int sx = 0; sx < ratio; ++sx) {
          const double x = x1 + (cx + (sx + 0.5) / ratio) * bw;
          bilinear_taps<S>(H, W, x, y,
                           [&](int pix, S w) { g(cell, pix, w * inv); });
        }
      }
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> roi_align(const Tensor<S>& features, const std::vector<RoI>& rois, int out_size,
                    double spatial_scale, int sampling_ratio = 2) {
  if (features.ndim() != 4)
    throw std::invalid_argument("roi_align: features must be [N,C,H,W], got " +
                                shape_str(features.shape()));
  if (out_size < 1 || sampling_ratio < 1)
    throw std::invalid_argument("roi_align: out_size and sampling_ratio must be >= 1");
  const int N = features.dim(0), C = features.dim(1), H = features.dim(2), W = features.dim(3);
  const int R = static_cast<int>(rois.size());
  for (const auto& r : rois)
    if (r.image_index < 0 || r.image_index >= N)
      throw std::invalid_argument("roi_align: image_index " + std::to_string(r.image_index) +
                                  " outside batch of " + std::to_string(N));

  const int64_t cells = static_cast<int64_t>(out_size) * out_size;
  const int64_t plane = static_cast<int64_t>(H) * W;
  std::vector<S> out(static_cast<size_t>(R) * C * cells, S(0));
  const S* in = features.data().data();
  for (int r = 0; r < R; ++r) {
    const int64_t nbase = static_cast<int64_t>(rois[static_cast<size_t>(r)].image_index) * C * plane;
    S* obase = out.data() + static_cast<int64_t>(r) * C * cells;
    detail::roi_samples<S>(rois[static_cast<size_t>(r)].box, spatial_scale, out_size,
                           sampling_ratio, H, W, [&](int cell, int pix, S w) {
                             for (int c = 0; c < C; ++c)
                               obase[c * cells + cell] += w * in[nbase + c * plane + pix];
                           });
  }

  auto fn = features.raw();
  auto boxes = std::make_shared<std::vector<RoI>>(rois);
  return make_op<S>(
      {R, C, out_size, out_size}, std::move(out), {features},
      [fn, boxes, out_size, spatial_scale, sampling_ratio, C, H, W, cells,
       plane](detail::Node<S>& self) {
        if (!fn->requires_grad) return;
        fn->ensure_grad();
        const int R = static_cast<int>(boxes->size());
        for (int r = 0; r < R; ++r) {
          const int64_t nbase =
              static_cast<int64_t>((*boxes)[static_cast<size_t>(r)].image_index) * C * plane;
          const S* gbase = self.grad.data() + static_cast<int64_t>(r) * C * cells;
          detail::roi_samples<S>((*boxes)[static_cast<size_t>(r)].box, spatial_scale, out_size,
                                 sampling_ratio, H, W, [&](int cell, int pix, S w) {
                                   for (int c = 0; c < C; ++c)
                                     fn->grad[nbase + c * plane + pix] += w * gbase[c * cells + cell];
                                 });
        }
      });
}

// FPN level heuristic pinned for determinism:
//   level = clamp(2 + floor(log2(sqrt(area) / (image_size / 8))), 2, 5)
inline int fpn_level_for_box(const Box& b, double image_size) {
  const double sz = std::sqrt(std::max(b.area(), 1e-12));
  const double base = image_size / 8.0;
  const int level = 2 + static_cast<int>(std::floor(std::log2(sz / base)));
  return std::min(5, std::max(2, level));
}

// Pools each RoI from its assigned pyramid level (P2..P5 = index 0..3) and
// packs results in input order.
template <typename S>
Tensor<S> roi_align_pyramid(const std::array<Tensor<S>, 4>& levels, const std::vector<RoI>& rois,
                            const std::vector<int>& roi_level, int out_size,
                            const std::array<double, 4>& spatial_scales,
                            int sampling_ratio = 2) {
  if (roi_level.size() != rois.size())
    throw std::invalid_argument("roi_align_pyramid: roi_level size mismatch");
  const int C = levels[0].dim(1);
  const int R = static_cast<int>(rois.size());
  for (int l = 0; l < 4; ++l) {
    if (levels[static_cast<size_t>(l)].ndim() != 4 || levels[static_cast<size_t>(l)].dim(1) != C)
      throw std::invalid_argument("roi_align_pyramid: level " + std::to_string(l) +
                                  " has inconsistent channels");
  }
  for (int lv : roi_level)
    if (lv < 0 || lv > 3) throw std::invalid_argument("roi_align_pyramid: level index out of range");

  const int64_t cells = static_cast<int64_t>(out_size) * out_size;
  std::vector<S> out(static_cast<size_t>(R) * C * cells, S(0));
  std::array<std::shared_ptr<detail::Node<S>>, 4> raw;
  for (int l = 0; l < 4; ++l) raw[static_cast<size_t>(l)] = levels[static_cast<size_t>(l)].raw();

  for (int r = 0; r < R; ++r) {
    const int lv = roi_level[static_cast<size_t>(r)];
    const auto& feat = levels[static_cast<size_t>(lv)];
    const int H = feat.dim(2), W = feat.dim(3);
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t nbase = static_cast<int64_t>(rois[static_cast<size_t>(r)].image_index) * C * plane;
    const S* in = feat.data().data();
    S* obase = out.data() + static_cast<int64_t>(r) * C * cells;
    detail::roi_samples<S>(rois[static_cast<size_t>(r)].box,
                           spatial_scales[static_cast<size_t>(lv)], out_size, sampling_ratio, H, W,
                           [&](int cell, int pix, S w) {
                             for (int c = 0; c < C; ++c)
                               obase[c * cells + cell] += w * in[nbase + c * plane + pix];
                           });
  }

  auto boxes = std::make_shared<std::vector<RoI>>(rois);
  auto lvls = std::make_shared<std::vector<int>>(roi_level);
  std::vector<Tensor<S>> parents(levels.begin(), levels.end());
  return make_op<S>(
      {R, C, out_size, out_size}, std::move(out), parents,
      [raw, boxes, lvls, out_size, spatial_scales, sampling_ratio, C, cells](detail::Node<S>& self) {
        const int R = static_cast<int>(boxes->size());
        for (int r = 0; r < R; ++r) {
          const int lv = (*lvls)[static_cast<size_t>(r)];
          auto& level = raw[static_cast<size_t>(lv)];
          if (!level->requires_grad) continue;
          level->ensure_grad();
          const int H = level->shape[2], W = level->shape[3];
          const int64_t plane = static_cast<int64_t>(H) * W;
          const int64_t nbase =
              static_cast<int64_t>((*boxes)[static_cast<size_t>(r)].image_index) * C * plane;
          const S* gbase = self.grad.data() + static_cast<int64_t>(r) * C * cells;
          detail::roi_samples<S>((*boxes)[static_cast<size_t>(r)].box,
                                 spatial_scales[static_cast<size_t>(lv)], out_size, sampling_ratio,
                                 H, W, [&](int cell, int pix, S w) {
                                   for (int c = 0; c < C; ++c)
                                     level->grad[nbase + c * plane + pix] +=
                                         w * gbase[c * cells + cell];
                                 });
        }
      });
}

}  // namespace htc
