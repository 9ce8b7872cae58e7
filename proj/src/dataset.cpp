#include "htc/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "htc/png_io.hpp"
#include "htc/rle.hpp"
#include "htc/rng.hpp"

namespace htc {

namespace fs = std::filesystem;
using nlohmann::json;

const char* thing_class_name(int id) {
  switch (id) {
    case 1: return "circle";
    case 2: return "square";
    case 3: return "triangle";
  }
  return "unknown";
}

const char* stuff_class_name(int id) {
  switch (id) {
    case 0: return "background";
    case 1: return "sky-band";
    case 2: return "ground-band";
    case 3: return "noise-texture";
  }
  return "unknown";
}

Difficulty difficulty_from_string(const std::string& s) {
  if (s == "easy") return Difficulty::kEasy;
  if (s == "medium") return Difficulty::kMedium;
  if (s == "hard") return Difficulty::kHard;
  throw std::invalid_argument("unknown difficulty '" + s + "' (easy|medium|hard)");
}

const char* to_string(Difficulty d) {
  switch (d) {
    case Difficulty::kEasy: return "easy";
    case Difficulty::kMedium: return "medium";
    case Difficulty::kHard: return "hard";
  }
  return "easy";
}

std::vector<float> InstanceSample::image_chw() const {
  std::vector<float> out(static_cast<size_t>(3) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out[static_cast<size_t>(c) * h * w + static_cast<size_t>(y) * w + x] =
            static_cast<float>(image_rgb[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.f;
  return out;
}

namespace {

struct ShapeSpec {
  int cls = 1;          // 1 circle, 2 square, 3 triangle
  double cx = 0, cy = 0;
  double r = 0;         // circumradius
  double rot = 0;
  double color[3] = {0, 0, 0};
};

double analytic_area(const ShapeSpec& s) {
  switch (s.cls) {
    case 1: return M_PI * s.r * s.r;
    case 2: return 2.0 * s.r * s.r;                    // side = r*sqrt(2)
    case 3: return 3.0 * std::sqrt(3.0) / 4.0 * s.r * s.r;
  }
  return 0;
}

bool inside_shape(const ShapeSpec& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  switch (s.cls) {
    case 1:
      return dx * dx + dy * dy <= s.r * s.r;
    case 2: {
      const double c = std::cos(-s.rot), sn = std::sin(-s.rot);
      const double u = dx * c - dy * sn, v = dx * sn + dy * c;
      const double a = s.r / std::sqrt(2.0);
      return std::abs(u) <= a && std::abs(v) <= a;
    }
    case 3: {
      // equilateral, vertices on the circumcircle
      double vx[3], vy[3];
      for (int k = 0; k < 3; ++k) {
        const double ang = s.rot + M_PI / 2 + k * 2.0 * M_PI / 3.0;
        vx[k] = s.cx + s.r * std::cos(ang);
        vy[k] = s.cy + s.r * std::sin(ang);
      }
      for (int k = 0; k < 3; ++k) {
        const int k2 = (k + 1) % 3;
        const double ex = vx[k2] - vx[k], ey = vy[k2] - vy[k];
        const double px = x - vx[k], py = y - vy[k];
        if (ex * py - ey * px < 0) return false;
      }
      return true;
    }
  }
  return false;
}

// 4x4 subsample coverage in [0,1]
double pixel_coverage(const ShapeSpec& s, int px, int py) {
  int hit = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (inside_shape(s, px + (j + 0.5) / 4.0, py + (i + 0.5) / 4.0)) ++hit;
  return hit / 16.0;
}

BinaryMask rasterize(const ShapeSpec& s, int size, std::vector<float>* coverage) {
  BinaryMask m(size, size);
  coverage->assign(static_cast<size_t>(size) * size, 0.f);
  const int x0 = std::max(0, static_cast<int>(std::floor(s.cx - s.r - 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(s.cy - s.r - 1)));
  const int x1 = std::min(size, static_cast<int>(std::ceil(s.cx + s.r + 1)));
  const int y1 = std::min(size, static_cast<int>(std::ceil(s.cy + s.r + 1)));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const double c = pixel_coverage(s, x, y);
      if (c > 0) {
        (*coverage)[static_cast<size_t>(y) * size + x] = static_cast<float>(c);
        if (c >= 0.5) m.set(y, x, 1);
      }
    }
  return m;
}

void hsv_to_rgb(double h, double s, double v, double* rgb) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

double occlusion_cap(Difficulty d) {
  switch (d) {
    case Difficulty::kEasy: return 0.05;
    case Difficulty::kMedium: return 0.25;
    case Difficulty::kHard: return 0.50;
  }
  return 0.05;
}

int64_t overlap_area(const BinaryMask& a, const BinaryMask& b) {
  int64_t n = 0;
  for (size_t i = 0; i < a.data.size(); ++i) n += a.data[i] & b.data[i];
  return n;
}

}  // namespace

InstanceSample generate_sample(uint64_t seed, int image_size, int min_instances,
                               int max_instances, Difficulty difficulty) {
  if (image_size % 32 != 0)
    throw std::invalid_argument("generate_sample: image_size " + std::to_string(image_size) +
                                " not divisible by 32");
  if (min_instances < 1 || max_instances < min_instances)
    throw std::invalid_argument("generate_sample: bad instance range");

  Rng rng(derive_seed(seed, "sample_gen"));
  InstanceSample sample;
  sample.h = sample.w = image_size;

  // background bands + stuff map
  const int sky_end = static_cast<int>(image_size * rng.uniform(0.2, 0.35));
  const int ground_start = static_cast<int>(image_size * rng.uniform(0.65, 0.8));
  const double noise_amp =
      difficulty == Difficulty::kEasy ? 0.02 : (difficulty == Difficulty::kMedium ? 0.04 : 0.06);
  const double band_colors[3][3] = {
      {0.82, 0.80, 0.72},  // background (middle)
      {0.55, 0.72, 0.92},  // sky
      {0.48, 0.38, 0.24},  // ground
  };
  std::vector<double> img(static_cast<size_t>(3) * image_size * image_size);
  sample.stuff_map.assign(static_cast<size_t>(image_size) * image_size, 0);
  for (int y = 0; y < image_size; ++y) {
    const int band = y < sky_end ? 1 : (y >= ground_start ? 2 : 0);
    for (int x = 0; x < image_size; ++x) {
      sample.stuff_map[static_cast<size_t>(y) * image_size + x] = band;
      for (int c = 0; c < 3; ++c)
        img[(static_cast<size_t>(y) * image_size + x) * 3 + c] =
            std::clamp(band_colors[band][c] + rng.uniform(-noise_amp, noise_amp), 0.0, 1.0);
    }
  }
  // speckled noise-texture patches
  const int n_patches = rng.uniform_int(1, 3);
  for (int p = 0; p < n_patches; ++p) {
    const int pw = static_cast<int>(image_size * rng.uniform(0.10, 0.28));
    const int ph = static_cast<int>(image_size * rng.uniform(0.10, 0.28));
    const int px = rng.uniform_int(0, image_size - pw - 1);
    const int py = rng.uniform_int(0, image_size - ph - 1);
    for (int y = py; y < py + ph; ++y)
      for (int x = px; x < px + pw; ++x) {
        sample.stuff_map[static_cast<size_t>(y) * image_size + x] = 3;
        const double v = rng.uniform(0.3, 0.7);
        for (int c = 0; c < 3; ++c)
          img[(static_cast<size_t>(y) * image_size + x) * 3 + c] = v + rng.uniform(-0.15, 0.15);
      }
  }

  // place shapes under the occlusion cap
  const double cap = occlusion_cap(difficulty);
  const int want = rng.uniform_int(min_instances, max_instances);
  std::vector<ShapeSpec> shapes;
  std::vector<BinaryMask> binaries;
  std::vector<std::vector<float>> coverages;
  std::vector<int64_t> occluded(static_cast<size_t>(want), 0);
  for (int i = 0; i < want; ++i) {
    ShapeSpec cand;
    cand.cls = rng.uniform_int(1, 3);
    bool placed = false;
    for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
      cand.r = image_size * rng.uniform(0.09, 0.17);
      const double margin = cand.r + 2.0;
      cand.cx = rng.uniform(margin, image_size - margin);
      cand.cy = rng.uniform(margin, image_size - margin);
      cand.rot = rng.uniform(0.0, 2.0 * M_PI);
      std::vector<float> cov;
      BinaryMask bin = rasterize(cand, image_size, &cov);
      bool ok = true;
      std::vector<int64_t> adds(shapes.size(), 0);
      for (size_t j = 0; j < shapes.size() && ok; ++j) {
        adds[j] = overlap_area(binaries[j], bin);
        const int64_t area_j = binaries[j].area();
        if (area_j > 0 &&
            static_cast<double>(occluded[j] + adds[j]) / static_cast<double>(area_j) > cap)
          ok = false;
      }
      if (!ok) continue;
      const double hue = rng.uniform(0.0, 1.0);
      hsv_to_rgb(hue, rng.uniform(0.65, 1.0), rng.uniform(0.55, 0.95), cand.color);
      for (size_t j = 0; j < shapes.size(); ++j) occluded[j] += adds[j];
      shapes.push_back(cand);
      binaries.push_back(std::move(bin));
      coverages.push_back(std::move(cov));
      placed = true;
    }
  }

  // composite in draw order
  for (size_t i = 0; i < shapes.size(); ++i) {
    const auto& cov = coverages[i];
    for (int y = 0; y < image_size; ++y)
      for (int x = 0; x < image_size; ++x) {
        const float a = cov[static_cast<size_t>(y) * image_size + x];
        if (a <= 0) continue;
        for (int c = 0; c < 3; ++c) {
          double& px = img[(static_cast<size_t>(y) * image_size + x) * 3 + c];
          px = px * (1.0 - a) + shapes[i].color[c] * a;
        }
      }
  }

  // visible masks (later shapes occlude earlier ones), tight boxes
  for (size_t i = 0; i < shapes.size(); ++i) {
    BinaryMask vis = binaries[i];
    for (size_t j = i + 1; j < shapes.size(); ++j)
      for (size_t k = 0; k < vis.data.size(); ++k)
        if (binaries[j].data[k]) vis.data[k] = 0;
    int min_x = image_size, min_y = image_size, max_x = -1, max_y = -1;
    for (int y = 0; y < image_size; ++y)
      for (int x = 0; x < image_size; ++x)
        if (vis.at(y, x)) {
          min_x = std::min(min_x, x);
          min_y = std::min(min_y, y);
          max_x = std::max(max_x, x);
          max_y = std::max(max_y, y);
        }
    if (max_x < 0 || vis.area() < 8) continue;  // fully occluded
    GtInstance inst;
    inst.label = shapes[i].cls;
    inst.mask = std::move(vis);
    inst.box.x1 = min_x;
    inst.box.y1 = min_y;
    inst.box.x2 = max_x + 1;
    inst.box.y2 = max_y + 1;
    inst.analytic_area = analytic_area(shapes[i]);
    sample.instances.push_back(std::move(inst));
  }

  sample.image_rgb.resize(img.size());
  for (size_t i = 0; i < img.size(); ++i)
    sample.image_rgb[i] =
        static_cast<uint8_t>(std::clamp(std::lround(img[i] * 255.0), 0l, 255l));
  return sample;
}

Dataset generate_dataset(uint64_t seed, int n_images, int image_size, int min_instances,
                         int max_instances, Difficulty difficulty) {
  Dataset ds;
  ds.seed = seed;
  ds.image_size = image_size;
  ds.difficulty = to_string(difficulty);
  for (int i = 0; i < n_images; ++i) {
    InstanceSample s = generate_sample(derive_seed(seed, "image", static_cast<uint64_t>(i)),
                                       image_size, min_instances, max_instances, difficulty);
    s.id = i + 1;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void write_coco_json(const Dataset& ds, const std::string& root) {
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "stuff");

  json doc;
  doc["info"] = {{"description", "synthetic shapes dataset"},
                 {"seed", ds.seed},
                 {"image_size", ds.image_size},
                 {"difficulty", ds.difficulty}};
  doc["categories"] = json::array();
  for (int c = 1; c <= kNumThingClasses; ++c)
    doc["categories"].push_back({{"id", c}, {"name", thing_class_name(c)}});
  doc["stuff_categories"] = json::array();
  for (int c = 0; c < kNumStuffClasses; ++c)
    doc["stuff_categories"].push_back({{"id", c}, {"name", stuff_class_name(c)}});

  doc["images"] = json::array();
  doc["annotations"] = json::array();
  int ann_id = 1;
  char name[64];
  for (const auto& s : ds.samples) {
    std::snprintf(name, sizeof(name), "img_%06d.png", s.id);
    const std::string img_rel = std::string("images/") + name;
    const std::string stuff_rel = std::string("stuff/") + name;
    write_png_rgb((fs::path(root) / img_rel).string(), s.w, s.h, s.image_rgb);
    std::vector<uint8_t> stuff8(s.stuff_map.size());
    for (size_t i = 0; i < stuff8.size(); ++i) stuff8[i] = static_cast<uint8_t>(s.stuff_map[i]);
    write_png_gray((fs::path(root) / stuff_rel).string(), s.w, s.h, stuff8);

    doc["images"].push_back({{"id", s.id},
                             {"file_name", name},
                             {"stuff_file_name", name},
                             {"height", s.h},
                             {"width", s.w}});
    for (const auto& inst : s.instances) {
      const RleMask rle = rle_encode(inst.mask);
      json ann = {{"id", ann_id++},
                  {"image_id", s.id},
                  {"category_id", inst.label},
                  {"bbox", {inst.box.x1, inst.box.y1, inst.box.width(), inst.box.height()}},
                  {"area", inst.mask.area()},
                  {"iscrowd", 0},
                  {"segmentation", {{"size", {rle.h, rle.w}}, {"counts", rle.counts}}}};
      if (inst.analytic_area > 0) ann["analytic_area"] = inst.analytic_area;
      doc["annotations"].push_back(std::move(ann));
    }
  }

  std::ofstream out(fs::path(root) / "annotations.json");
  if (!out) throw std::runtime_error("write_coco_json: cannot write " + root + "/annotations.json");
  out << doc.dump(1) << "\n";
}

InstanceSample hflip_sample(const InstanceSample& s) {
  InstanceSample out = s;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const int mx = s.w - 1 - x;
      out.stuff_map[static_cast<size_t>(y) * s.w + x] =
          s.stuff_map[static_cast<size_t>(y) * s.w + mx];
      for (int c = 0; c < 3; ++c)
        out.image_rgb[(static_cast<size_t>(y) * s.w + x) * 3 + c] =
            s.image_rgb[(static_cast<size_t>(y) * s.w + mx) * 3 + c];
    }
  for (size_t i = 0; i < s.instances.size(); ++i) {
    const auto& src = s.instances[i];
    auto& dst = out.instances[i];
    dst.box.x1 = s.w - src.box.x2;
    dst.box.x2 = s.w - src.box.x1;
    for (int y = 0; y < src.mask.h; ++y)
      for (int x = 0; x < src.mask.w; ++x)
        dst.mask.set(y, x, src.mask.at(y, src.mask.w - 1 - x));
  }
  return out;
}

Dataset read_coco_json(const std::string& root) {
  const fs::path ann_path = fs::path(root) / "annotations.json";
  std::ifstream in(ann_path);
  if (!in) throw std::runtime_error("read_coco_json: missing " + ann_path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw std::runtime_error("read_coco_json: malformed JSON in " + ann_path.string() + ": " +
                             e.what());
  }

  Dataset ds;
  if (doc.contains("info")) {
    const auto& info = doc["info"];
    ds.seed = info.value("seed", 0ull);
    ds.image_size = info.value("image_size", 0);
    ds.difficulty = info.value("difficulty", "easy");
  }

  for (const auto& im : doc.at("images")) {
    InstanceSample s;
    s.id = im.at("id").get<int>();
    s.h = im.at("height").get<int>();
    s.w = im.at("width").get<int>();
    const fs::path img_path = fs::path(root) / "images" / im.at("file_name").get<std::string>();
    if (!fs::exists(img_path))
      throw std::runtime_error("read_coco_json: missing image file " + img_path.string());
    int w = 0, h = 0;
    s.image_rgb = read_png_rgb(img_path.string(), &w, &h);
    if (w != s.w || h != s.h)
      throw std::runtime_error("read_coco_json: image size mismatch for " + img_path.string());
    const fs::path stuff_path =
        fs::path(root) / "stuff" / im.at("stuff_file_name").get<std::string>();
    if (!fs::exists(stuff_path))
      throw std::runtime_error("read_coco_json: missing stuff map " + stuff_path.string());
    std::vector<uint8_t> stuff8 = read_png_gray(stuff_path.string(), &w, &h);
    s.stuff_map.assign(stuff8.begin(), stuff8.end());
    ds.samples.push_back(std::move(s));
    if (ds.image_size == 0) ds.image_size = s.w;
  }

  for (const auto& ann : doc.at("annotations")) {
    const int image_id = ann.at("image_id").get<int>();
    auto it = std::find_if(ds.samples.begin(), ds.samples.end(),
                           [&](const InstanceSample& s) { return s.id == image_id; });
    if (it == ds.samples.end())
      throw std::runtime_error("read_coco_json: annotation references unknown image id " +
                               std::to_string(image_id));
    GtInstance inst;
    inst.label = ann.at("category_id").get<int>();
    const auto& bb = ann.at("bbox");
    inst.box.x1 = bb.at(0).get<double>();
    inst.box.y1 = bb.at(1).get<double>();
    inst.box.x2 = inst.box.x1 + bb.at(2).get<double>();
    inst.box.y2 = inst.box.y1 + bb.at(3).get<double>();
    RleMask rle;
    rle.h = ann.at("segmentation").at("size").at(0).get<int>();
    rle.w = ann.at("segmentation").at("size").at(1).get<int>();
    rle.counts = ann.at("segmentation").at("counts").get<std::vector<int>>();
    inst.mask = rle_decode(rle);
    inst.analytic_area = ann.value("analytic_area", 0.0);
    it->instances.push_back(std::move(inst));
  }
  return ds;
}

}  // namespace htc
