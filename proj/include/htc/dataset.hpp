#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "htc/proposals.hpp"

namespace htc {

inline constexpr int kNumThingClasses = 3;  // circle, square, triangle
inline constexpr int kNumStuffClasses = 4;  // background, sky-band, ground-band, noise-texture

const char* thing_class_name(int id);
const char* stuff_class_name(int id);

enum class Difficulty { kEasy, kMedium, kHard };

Difficulty difficulty_from_string(const std::string& s);
const char* to_string(Difficulty d);

// One synthetic image with its annotations. The image is stored quantized to
// 8-bit at generation time so disk round-trips are bitwise.
struct InstanceSample {
  int id = 0;
  int h = 0, w = 0;
  std::vector<uint8_t> image_rgb;    // h*w*3, row-major interleaved
  std::vector<GtInstance> instances; // visible (modal) masks, tight boxes
  std::vector<int> stuff_map;        // h*w, values in [0, kNumStuffClasses)

  // CHW float image in [0,1] for the model.
  std::vector<float> image_chw() const;
};

struct Dataset {
  std::vector<InstanceSample> samples;
  int image_size = 128;
  uint64_t seed = 0;
  std::string difficulty = "easy";
};

// Renders 1..n anti-aliased colored shapes (circle/square/triangle, uniform
// class draw, random position/scale/rotation) over a banded, lightly
// textured background. Difficulty controls the allowed occlusion between
// instances. Deterministic per seed.
InstanceSample generate_sample(uint64_t seed, int image_size, int min_instances,
                               int max_instances, Difficulty difficulty);

Dataset generate_dataset(uint64_t seed, int n_images, int image_size, int min_instances,
                         int max_instances, Difficulty difficulty);

// Layout: {root}/images/*.png, {root}/stuff/*.png, {root}/annotations.json.
// Boxes round-trip exactly; masks round-trip bitwise via RLE.
void write_coco_json(const Dataset& ds, const std::string& root);
Dataset read_coco_json(const std::string& root);

// Horizontal mirror of image, stuff map, masks and boxes (train-time
// augmentation).
InstanceSample hflip_sample(const InstanceSample& s);

}  // namespace htc
