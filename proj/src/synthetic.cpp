#include "vlseg/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "vlseg/error.hpp"
#include "vlseg/image_io.hpp"

namespace vlseg {

namespace {

const char* const kShapeNames[] = {"disc", "square", "triangle", "ring"};

std::array<double, 3> hsv_color(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

bool inside(int64_t kind, double dx, double dy, double radius) {
  switch (kind) {
    case 0: return dx * dx + dy * dy <= radius * radius;
    case 1: return std::abs(dx) <= radius * 0.85 && std::abs(dy) <= radius * 0.85;
    case 2: {
      // upward triangle inscribed in the radius
      const double top = -radius, bottom = radius * 0.75;
      if (dy < top || dy > bottom) return false;
      const double half_width = (dy - top) / (bottom - top) * radius;
      return std::abs(dx) <= half_width;
    }
    default: {
      const double r2 = dx * dx + dy * dy;
      return r2 <= radius * radius && r2 >= 0.36 * radius * radius;
    }
  }
}

}  // namespace

std::vector<std::string> synthetic_class_names(int64_t shape_kinds) {
  if (shape_kinds < 1 || shape_kinds > 4) throw ConfigError("synthetic corpus supports 1..4 shape kinds");
  std::vector<std::string> names{"background"};
  for (int64_t k = 0; k < shape_kinds; ++k) names.emplace_back(kShapeNames[k]);
  return names;
}

SegSample make_synthetic_sample(const SyntheticSpec& spec, const std::string& id, Rng& rng) {
  const int64_t size = spec.image_size;
  auto image = torch::empty({3, size, size}, torch::kFloat32);
  auto mask = torch::zeros({size, size}, torch::kUInt8);
  auto img = image.accessor<float, 3>();
  auto msk = mask.accessor<std::uint8_t, 2>();

  // low-saturation sinusoidal texture
  const double base = rng.uniform(0.25, 0.6);
  const double fx1 = rng.uniform(0.05, 0.3), fy1 = rng.uniform(0.05, 0.3);
  const double fx2 = rng.uniform(0.05, 0.3), fy2 = rng.uniform(0.05, 0.3);
  const double ph1 = rng.uniform(0, 2 * M_PI), ph2 = rng.uniform(0, 2 * M_PI);
  const std::array<double, 3> tint{rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      const double tex = 0.12 * std::sin(fx1 * x + fy1 * y + ph1) + 0.08 * std::sin(fx2 * x - fy2 * y + ph2);
      for (int c = 0; c < 3; ++c) {
        const double noise = rng.uniform(-0.03, 0.03);
        img[c][y][x] = static_cast<float>(std::clamp(base + tex + tint[c] + noise, 0.0, 1.0));
      }
    }
  }

  const int64_t count = rng.uniform_int(spec.min_shapes, spec.max_shapes);
  for (int64_t s = 0; s < count; ++s) {
    const int64_t kind = rng.uniform_int(0, spec.shape_kinds - 1);
    const double radius = rng.uniform(size * 0.1, size * 0.25);
    const double cx = rng.uniform(radius * 0.5, size - radius * 0.5);
    const double cy = rng.uniform(radius * 0.5, size - radius * 0.5);
    const double hue = static_cast<double>(kind) / static_cast<double>(spec.shape_kinds) + rng.uniform(-0.08, 0.08);
    const auto color = hsv_color(hue, rng.uniform(0.55, 0.95), rng.uniform(0.6, 1.0));
    for (int64_t y = 0; y < size; ++y) {
      for (int64_t x = 0; x < size; ++x) {
        if (!inside(kind, x + 0.5 - cx, y + 0.5 - cy, radius)) continue;
        for (int c = 0; c < 3; ++c) {
          const double shade = color[c] + rng.uniform(-0.04, 0.04);
          img[c][y][x] = static_cast<float>(std::clamp(shade, 0.0, 1.0));
        }
        msk[y][x] = static_cast<std::uint8_t>(kind + 1);
      }
    }
  }

  SegSample sample;
  sample.id = id;
  // round through 8 bits so in-memory samples equal what the PNG round trip yields
  sample.image = image.mul(255.0).round().div(255.0);
  sample.mask = mask;
  return sample;
}

SplitSpec generate_synthetic_corpus(const std::filesystem::path& root, const SyntheticSpec& spec) {
  if (spec.num_labeled < 0 || spec.num_unlabeled < 0 || spec.num_val < 0 || spec.image_size <= 0)
    throw ConfigError("synthetic corpus sizes must be non-negative");
  const auto classes = synthetic_class_names(spec.shape_kinds);
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "masks");
  const auto palette = voc_palette();

  Rng rng(spec.seed);
  auto emit = [&](const char* prefix, int64_t n) {
    std::vector<std::string> ids;
    for (int64_t i = 0; i < n; ++i) {
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%04lld", prefix, static_cast<long long>(i));
      auto sample = make_synthetic_sample(spec, name, rng);
      write_image_png(root / "images" / (sample.id + ".png"), sample.image);
      write_mask_png(root / "masks" / (sample.id + ".png"), *sample.mask, palette);
      ids.push_back(sample.id);
    }
    return ids;
  };

  SplitSpec split;
  split.root = root;
  split.labeled_ids = emit("lab", spec.num_labeled);
  split.unlabeled_ids = emit("unl", spec.num_unlabeled);
  const auto val_ids = emit("val", spec.num_val);
  write_id_list(root / "labeled.txt", split.labeled_ids);
  write_id_list(root / "unlabeled.txt", split.unlabeled_ids);
  write_id_list(root / "val.txt", val_ids);

  nlohmann::json defs = {{"classes", classes}};
  std::ofstream(root / "classes.json") << defs.dump(2) << '\n';
  return split;
}

}  // namespace vlseg
