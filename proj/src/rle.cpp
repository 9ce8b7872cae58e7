#include "htc/rle.hpp"

#include <stdexcept>
#include <string>

namespace htc {

RleMask rle_encode(const BinaryMask& mask) {
  RleMask out;
  out.h = mask.h;
  out.w = mask.w;
  const int64_t n = static_cast<int64_t>(mask.h) * mask.w;
  uint8_t cur = 0;
  int run = 0;
  for (int64_t k = 0; k < n; ++k) {
    const int x = static_cast<int>(k / mask.h);
    const int y = static_cast<int>(k % mask.h);
    const uint8_t v = mask.at(y, x) ? 1 : 0;
    if (v == cur) {
      ++run;
    } else {
      out.counts.push_back(run);
      cur = v;
      run = 1;
    }
  }
  out.counts.push_back(run);
  return out;
}

BinaryMask rle_decode(const RleMask& rle) {
  const int64_t n = static_cast<int64_t>(rle.h) * rle.w;
  int64_t total = 0;
  for (int c : rle.counts) {
    if (c < 0) throw std::invalid_argument("rle_decode: negative run length");
    total += c;
  }
  if (total != n)
    throw std::invalid_argument("rle_decode: counts sum to " + std::to_string(total) +
                                ", expected " + std::to_string(n));
  BinaryMask out(rle.h, rle.w);
  int64_t k = 0;
  uint8_t cur = 0;
  for (int c : rle.counts) {
    for (int i = 0; i < c; ++i, ++k) {
      if (cur) {
        const int x = static_cast<int>(k / rle.h);
        const int y = static_cast<int>(k % rle.h);
        out.set(y, x, 1);
      }
    }
    cur = 1 - cur;
  }
  return out;
}

int64_t rle_area(const RleMask& rle) {
  int64_t area = 0;
  for (size_t i = 1; i < rle.counts.size(); i += 2) area += rle.counts[i];
  return area;
}

double mask_iou(const RleMask& a, const RleMask& b) {
  if (a.h != b.h || a.w != b.w)
    throw std::invalid_argument("mask_iou: size mismatch " + std::to_string(a.h) + "x" +
                                std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                                std::to_string(b.w));
  // Walk the one-runs of both masks as [start, end) intervals in scan order.
  auto next_interval = [](const RleMask& m, size_t* idx, int64_t* pos, int64_t* start,
                          int64_t* end) -> bool {
    while (*idx < m.counts.size()) {
      const int64_t len = m.counts[*idx];
      const bool ones = (*idx % 2) == 1;
      if (ones && len > 0) {
        *start = *pos;
        *end = *pos + len;
        *pos += len;
        ++(*idx);
        return true;
      }
      *pos += len;
      ++(*idx);
    }
    return false;
  };

  int64_t inter = 0;
  size_t ia = 0, ib = 0;
  int64_t pa = 0, pb = 0;
  int64_t sa = 0, ea = 0, sb = 0, eb = 0;
  bool va = next_interval(a, &ia, &pa, &sa, &ea);
  bool vb = next_interval(b, &ib, &pb, &sb, &eb);
  while (va && vb) {
    const int64_t lo = sa > sb ? sa : sb;
    const int64_t hi = ea < eb ? ea : eb;
    if (hi > lo) inter += hi - lo;
    if (ea <= eb)
      va = next_interval(a, &ia, &pa, &sa, &ea);
    else
      vb = next_interval(b, &ib, &pb, &sb, &eb);
  }
  const int64_t uni = rle_area(a) + rle_area(b) - inter;
  if (uni <= 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace htc
