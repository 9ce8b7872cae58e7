#pragma once

#include <cstdint>
#include <vector>

namespace htc {

// Dense binary mask, row-major, values 0/1.
struct BinaryMask {
  int h = 0, w = 0;
  std::vector<uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_, 0) {}

  uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * w + x]; }
  void set(int y, int x, uint8_t v) { data[static_cast<size_t>(y) * w + x] = v; }

  int64_t area() const {
    int64_t n = 0;
    for (uint8_t v : data) n += v;
    return n;
  }

  bool operator==(const BinaryMask& o) const { return h == o.h && w == o.w && data == o.data; }
};

}  // namespace htc
