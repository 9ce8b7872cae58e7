#pragma once

#include <cstdint>
#include <vector>

#include "htc/mask.hpp"

namespace htc {

// COCO-style uncompressed RLE: column-major scan, alternating run lengths
// starting with the zero-run. Sum of counts always equals h*w.
struct RleMask {
  int h = 0, w = 0;
  std::vector<int> counts;

  bool operator==(const RleMask& o) const { return h == o.h && w == o.w && counts == o.counts; }
};

RleMask rle_encode(const BinaryMask& mask);
BinaryMask rle_decode(const RleMask& rle);

int64_t rle_area(const RleMask& rle);

// Intersection-over-union computed directly on the runs (no dense decode).
double mask_iou(const RleMask& a, const RleMask& b);

}  // namespace htc
