#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace htc {

// Minimal libpng wrappers. RGB images are row-major interleaved
// (h*w*3 bytes); grayscale maps are h*w bytes.
void write_png_rgb(const std::string& path, int w, int h, const std::vector<uint8_t>& rgb);
std::vector<uint8_t> read_png_rgb(const std::string& path, int* w, int* h);

void write_png_gray(const std::string& path, int w, int h, const std::vector<uint8_t>& gray);
std::vector<uint8_t> read_png_gray(const std::string& path, int* w, int* h);

}  // namespace htc
