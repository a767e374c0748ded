#include "vlseg/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "vlseg/error.hpp"
#include "vlseg/image_io.hpp"

namespace vlseg {

namespace F = torch::nn::functional;

void validate_sample(const SegSample& sample, int64_t num_classes) {
  if (!sample.image.defined() || sample.image.dim() != 3 || sample.image.size(0) != 3)
    throw ValidationError("sample '" + sample.id + "': image must be 3xHxW");
  if (!sample.mask) return;
  const auto& mask = *sample.mask;
  if (mask.dim() != 2 || mask.size(0) != sample.height() || mask.size(1) != sample.width())
    throw ValidationError("sample '" + sample.id + "': mask shape does not match image");
  auto values = mask.to(torch::kInt64);
  auto bad = (values >= num_classes).logical_and(values != kIgnoreIndex).logical_or(values < 0);
  if (bad.any().item<bool>())
    throw ValidationError("sample '" + sample.id + "': mask contains class indices outside [0, " +
                          std::to_string(num_classes) + ") and not the ignore value");
}

std::vector<std::string> read_id_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open id list: " + path.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    ids.push_back(line.substr(first, last - first + 1));
  }
  return ids;
}

void write_id_list(const std::filesystem::path& path, const std::vector<std::string>& ids) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write id list: " + path.string());
  for (const auto& id : ids) out << id << '\n';
}

SplitSpec read_split(const std::filesystem::path& root) {
  SplitSpec spec;
  spec.root = root;
  spec.labeled_ids = read_id_list(root / "labeled.txt");
  spec.unlabeled_ids = read_id_list(root / "unlabeled.txt");
  return spec;
}

namespace {

std::filesystem::path find_image(const std::filesystem::path& root, const std::string& id) {
  for (const char* ext : {".png", ".jpg", ".jpeg"}) {
    auto candidate = root / "images" / (id + ext);
    if (std::filesystem::exists(candidate)) return candidate;
  }
  throw LoadError("image file missing for id '" + id + "' under " + (root / "images").string());
}

}  // namespace

SegSample load_sample(const std::filesystem::path& root, const std::string& id, bool with_mask) {
  SegSample sample;
  sample.id = id;
  sample.image = read_image(find_image(root, id));
  if (with_mask) {
    const auto mask_path = root / "masks" / (id + ".png");
    if (!std::filesystem::exists(mask_path))
      throw LoadError("mask file missing for labeled id '" + id + "': " + mask_path.string());
    auto mask = read_mask(mask_path);
    if (mask.size(0) != sample.height() || mask.size(1) != sample.width())
      throw ValidationError("mask/image shape mismatch for id '" + id + "'");
    sample.mask = mask;
  }
  return sample;
}

LoadedSplit load_split(const SplitSpec& spec) {
  std::unordered_set<std::string> labeled(spec.labeled_ids.begin(), spec.labeled_ids.end());
  for (const auto& id : spec.unlabeled_ids)
    if (labeled.count(id)) throw ValidationError("id '" + id + "' is in both labeled and unlabeled splits");

  LoadedSplit out;
  out.labeled.reserve(spec.labeled_ids.size());
  for (const auto& id : spec.labeled_ids) out.labeled.push_back(load_sample(spec.root, id, true));
  out.unlabeled.reserve(spec.unlabeled_ids.size());
  for (const auto& id : spec.unlabeled_ids) out.unlabeled.push_back(load_sample(spec.root, id, false));
  return out;
}

void AugmentationRecipe::validate() const {
  auto in_unit = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!in_unit(grayscale_prob) || !in_unit(cutmix_prob) || !in_unit(hflip_prob) || !in_unit(jitter.prob))
    throw ConfigError("augmentation probabilities must lie in [0,1]");
  if (scale_range.first <= 0.0 || scale_range.first > scale_range.second)
    throw ConfigError("augmentation scale_range must satisfy 0 < low <= high");
  if (crop_size <= 0) throw ConfigError("augmentation crop_size must be positive");
  if (jitter.brightness < 0 || jitter.contrast < 0 || jitter.saturation < 0 || jitter.hue < 0 || jitter.hue > 0.5)
    throw ConfigError("color jitter strengths must be non-negative (hue <= 0.5)");
}

AugmentationRecipe AugmentationRecipe::identity(int64_t crop_size) {
  AugmentationRecipe r;
  r.jitter = ColorJitter{0.0, 0.0, 0.0, 0.0, 0.0};
  r.grayscale_prob = 0.0;
  r.cutmix_prob = 0.0;
  r.scale_range = {1.0, 1.0};
  r.hflip_prob = 0.0;
  r.crop_size = crop_size;
  return r;
}

torch::Tensor apply_geometry(const torch::Tensor& chw, const CropGeometry& g, Interp interp, double pad_value) {
  TORCH_CHECK(chw.dim() == 3, "apply_geometry expects CxHxW, got ", chw.sizes());
  const auto dtype = chw.scalar_type();
  torch::Tensor x = chw;
  if (g.scaled_height != chw.size(1) || g.scaled_width != chw.size(2)) {
    auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{g.scaled_height, g.scaled_width});
    if (interp == Interp::kNearest) {
      opts.mode(torch::kNearest);
    } else {
      opts.mode(torch::kBilinear).align_corners(false);
    }
    auto work = x.to(torch::kFloat32).unsqueeze(0);
    x = F::interpolate(work, opts).squeeze(0);
    if (interp == Interp::kNearest || !torch::isFloatingType(dtype)) x = x.round();
    x = x.to(dtype);
  }
  const int64_t pad_h = std::max<int64_t>(g.crop_size - x.size(1), 0);
  const int64_t pad_w = std::max<int64_t>(g.crop_size - x.size(2), 0);
  if (pad_h > 0 || pad_w > 0) {
    auto padded = torch::full({x.size(0), x.size(1) + pad_h, x.size(2) + pad_w}, pad_value, x.options());
    padded.narrow(1, 0, x.size(1)).narrow(2, 0, x.size(2)).copy_(x);
    x = padded;
  }
  x = x.narrow(1, g.top, g.crop_size).narrow(2, g.left, g.crop_size);
  if (g.flipped) x = x.flip({2});
  return x.contiguous();
}

WeakView weak_augment_view(const SegSample& sample, const AugmentationRecipe& recipe, Rng& rng) {
  recipe.validate();
  const double scale = rng.uniform(recipe.scale_range.first, recipe.scale_range.second);
  CropGeometry g;
  g.crop_size = recipe.crop_size;
  if (scale == 1.0) {
    g.scaled_height = sample.height();
    g.scaled_width = sample.width();
  } else {
    g.scaled_height = std::max<int64_t>(1, std::llround(sample.height() * scale));
    g.scaled_width = std::max<int64_t>(1, std::llround(sample.width() * scale));
  }
  const int64_t padded_h = std::max(g.scaled_height, g.crop_size);
  const int64_t padded_w = std::max(g.scaled_width, g.crop_size);
  g.top = rng.uniform_int(0, padded_h - g.crop_size);
  g.left = rng.uniform_int(0, padded_w - g.crop_size);
  g.flipped = recipe.hflip_prob > 0.0 && rng.bernoulli(recipe.hflip_prob);

  WeakView view;
  view.geometry = g;
  view.sample.id = sample.id;
  view.sample.image = apply_geometry(sample.image, g, Interp::kBilinear, 0.0);
  if (sample.mask) {
    view.sample.mask = apply_geometry(sample.mask->unsqueeze(0), g, Interp::kNearest, kIgnoreIndex).squeeze(0);
  }
  auto ones = torch::ones({1, sample.height(), sample.width()}, torch::kUInt8);
  view.valid = apply_geometry(ones, g, Interp::kNearest, 0).squeeze(0).to(torch::kBool);
  return view;
}

SegSample weak_augment(const SegSample& sample, const AugmentationRecipe& recipe, Rng& rng) {
  return weak_augment_view(sample, recipe, rng).sample;
}

torch::Tensor CutMixRecord::apply(const torch::Tensor& batch) const {
  TORCH_CHECK(batch.size(0) == box_mask.size(0), "CutMix batch size mismatch");
  TORCH_CHECK(batch.size(-2) == box_mask.size(1) && batch.size(-1) == box_mask.size(2),
              "CutMix spatial size mismatch");
  auto index = torch::tensor(partner, torch::kInt64);
  auto source = batch.index_select(0, index);
  std::vector<int64_t> shape(batch.dim(), 1);
  shape[0] = box_mask.size(0);
  shape[batch.dim() - 2] = box_mask.size(1);
  shape[batch.dim() - 1] = box_mask.size(2);
  auto mask = box_mask.view(shape);
  return torch::where(mask, source, batch);
}

double CutMixRecord::mixed_fraction() const {
  return box_mask.to(torch::kFloat64).mean().item<double>();
}

namespace {

torch::Tensor grayscale(const torch::Tensor& rgb) {
  auto gray = rgb.select(0, 0) * 0.299 + rgb.select(0, 1) * 0.587 + rgb.select(0, 2) * 0.114;
  return gray.unsqueeze(0).expand({3, -1, -1});
}

// 3×H×W RGB in [0,1] -> HSV with hue in [0,1).
torch::Tensor rgb_to_hsv(const torch::Tensor& rgb) {
  auto r = rgb.select(0, 0), g = rgb.select(0, 1), b = rgb.select(0, 2);
  auto maxc = std::get<0>(rgb.max(0));
  auto minc = std::get<0>(rgb.min(0));
  auto delta = maxc - minc;
  auto safe_delta = torch::where(delta > 0, delta, torch::ones_like(delta));
  auto s = torch::where(maxc > 0, delta / torch::where(maxc > 0, maxc, torch::ones_like(maxc)), torch::zeros_like(maxc));
  auto rc = (maxc - r) / safe_delta;
  auto gc = (maxc - g) / safe_delta;
  auto bc = (maxc - b) / safe_delta;
  auto h = torch::where(maxc == r, bc - gc, torch::where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc));
  h = torch::where(delta > 0, torch::remainder(h / 6.0, 1.0), torch::zeros_like(h));
  return torch::stack({h, s, maxc});
}

torch::Tensor hsv_to_rgb(const torch::Tensor& hsv) {
  auto h = hsv.select(0, 0), s = hsv.select(0, 1), v = hsv.select(0, 2);
  auto i = torch::floor(h * 6.0);
  auto f = h * 6.0 - i;
  auto p = v * (1.0 - s);
  auto q = v * (1.0 - s * f);
  auto t = v * (1.0 - s * (1.0 - f));
  auto sector = torch::remainder(i, 6.0).to(torch::kInt64);
  auto pick = [&](const std::array<torch::Tensor, 6>& options) {
    auto out = options[0].clone();
    for (int64_t k = 1; k < 6; ++k) out = torch::where(sector == k, options[k], out);
    return out;
  };
  auto r = pick({v, q, p, p, t, v});
  auto g = pick({t, v, v, q, p, p});
  auto b = pick({p, p, t, v, v, q});
  return torch::stack({r, g, b});
}

torch::Tensor color_jitter(torch::Tensor img, const ColorJitter& j, Rng& rng) {
  if (j.brightness > 0) {
    const double f = rng.uniform(std::max(0.0, 1.0 - j.brightness), 1.0 + j.brightness);
    img = (img * f).clamp(0.0, 1.0);
  }
  if (j.contrast > 0) {
    const double f = rng.uniform(std::max(0.0, 1.0 - j.contrast), 1.0 + j.contrast);
    auto mean = grayscale(img).mean();
    img = (img * f + mean * (1.0 - f)).clamp(0.0, 1.0);
  }
  if (j.saturation > 0) {
    const double f = rng.uniform(std::max(0.0, 1.0 - j.saturation), 1.0 + j.saturation);
    img = (img * f + grayscale(img) * (1.0 - f)).clamp(0.0, 1.0);
  }
  if (j.hue > 0) {
    const double shift = rng.uniform(-j.hue, j.hue);
    auto hsv = rgb_to_hsv(img);
    hsv[0] = torch::remainder(hsv[0] + shift, 1.0);
    img = hsv_to_rgb(hsv).clamp(0.0, 1.0);
  }
  return img;
}

StrongView make_strong_view(const torch::Tensor& images, const AugmentationRecipe& recipe, Rng& rng) {
  const int64_t batch = images.size(0), height = images.size(2), width = images.size(3);
  std::vector<torch::Tensor> views;
  views.reserve(batch);
  for (int64_t i = 0; i < batch; ++i) {
    auto img = images[i];
    if (recipe.jitter.prob > 0 && rng.bernoulli(recipe.jitter.prob)) img = color_jitter(img, recipe.jitter, rng);
    if (recipe.grayscale_prob > 0 && rng.bernoulli(recipe.grayscale_prob)) img = grayscale(img).contiguous();
    views.push_back(img);
  }
  auto jittered = torch::stack(views);

  StrongView view;
  view.cutmix.box_mask = torch::zeros({batch, height, width}, torch::kBool);
  view.cutmix.partner.resize(batch);
  for (int64_t i = 0; i < batch; ++i) {
    view.cutmix.partner[i] = (i + 1) % batch;
    if (recipe.cutmix_prob <= 0 || !rng.bernoulli(recipe.cutmix_prob)) continue;
    const double area = rng.uniform(0.25, 0.5) * static_cast<double>(height * width);
    const double aspect = rng.uniform(0.5, 2.0);
    const int64_t box_h = std::clamp<int64_t>(std::llround(std::sqrt(area / aspect)), 1, height);
    const int64_t box_w = std::clamp<int64_t>(std::llround(std::sqrt(area * aspect)), 1, width);
    const int64_t top = rng.uniform_int(0, height - box_h);
    const int64_t left = rng.uniform_int(0, width - box_w);
    view.cutmix.box_mask[i].narrow(0, top, box_h).narrow(1, left, box_w).fill_(true);
  }
  view.images = view.cutmix.apply(jittered);
  return view;
}

}  // namespace

StrongPair strong_augment_pair(const torch::Tensor& images, const AugmentationRecipe& recipe, Rng& rng) {
  TORCH_CHECK(images.dim() == 4 && images.size(0) > 0 && images.size(1) == 3,
              "strong_augment_pair expects a nonempty Bx3xHxW batch");
  recipe.validate();
  StrongPair pair;
  pair.first = make_strong_view(images, recipe, rng);
  pair.second = make_strong_view(images, recipe, rng);
  return pair;
}

StrongPair strong_augment_pair(const std::vector<SegSample>& batch, const AugmentationRecipe& recipe, Rng& rng) {
  if (batch.empty()) throw ValidationError("strong_augment_pair: empty batch");
  return strong_augment_pair(stack_images(batch), recipe, rng);
}

torch::Tensor feature_perturb(const torch::Tensor& features, double drop_rate, Rng& rng) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw ValidationError("feature_perturb: drop_rate must lie in [0,1)");
  if (drop_rate == 0.0) return features;
  TORCH_CHECK(features.dim() == 3 || features.dim() == 4, "feature_perturb expects CxHxW or BxCxHxW");
  const bool batched = features.dim() == 4;
  const int64_t batch = batched ? features.size(0) : 1;
  const int64_t channels = features.size(batched ? 1 : 0);
  const auto drop = static_cast<int64_t>(std::floor(drop_rate * static_cast<double>(channels)));
  const double keep_scale = 1.0 / (1.0 - drop_rate);

  auto keep = torch::full({batch, channels}, keep_scale, torch::TensorOptions().dtype(features.scalar_type()));
  std::vector<int64_t> order(channels);
  for (int64_t b = 0; b < batch; ++b) {
    std::iota(order.begin(), order.end(), 0);
    // partial Fisher-Yates: the first `drop` entries are a uniform subset
    for (int64_t k = 0; k < drop; ++k) {
      const int64_t pick = rng.uniform_int(k, channels - 1);
      std::swap(order[k], order[pick]);
      keep[b][order[k]] = 0.0;
    }
  }
  keep = keep.to(features.device());
  if (batched) return features * keep.view({batch, channels, 1, 1});
  return features * keep.view({channels, 1, 1});
}

torch::Tensor stack_images(const std::vector<SegSample>& batch) {
  std::vector<torch::Tensor> images;
  images.reserve(batch.size());
  for (const auto& s : batch) images.push_back(s.image);
  return torch::stack(images);
}

torch::Tensor stack_masks(const std::vector<SegSample>& batch) {
  std::vector<torch::Tensor> masks;
  masks.reserve(batch.size());
  for (const auto& s : batch) {
    if (s.mask) {
      masks.push_back(s.mask->to(torch::kInt64));
    } else {
      masks.push_back(torch::full({s.height(), s.width()}, static_cast<int64_t>(kIgnoreIndex), torch::kInt64));
    }
  }
  return torch::stack(masks);
}

}  // namespace vlseg
