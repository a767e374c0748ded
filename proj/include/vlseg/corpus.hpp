#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vlseg/rng.hpp"

namespace vlseg {

inline constexpr std::uint8_t kIgnoreIndex = 255;

// Image (float32 3×H×W in [0,1]) with an optional uint8 H×W class mask.
struct SegSample {
  torch::Tensor image;
  std::optional<torch::Tensor> mask;
  std::string id;

  int64_t height() const { return image.size(1); }
  int64_t width() const { return image.size(2); }
};

// Throws ValidationError when mask values fall outside [0, num_classes) ∪ {ignore}
// or the mask shape disagrees with the image.
void validate_sample(const SegSample& sample, int64_t num_classes);

struct SplitSpec {
  std::filesystem::path root;
  std::vector<std::string> labeled_ids;
  std::vector<std::string> unlabeled_ids;
};

std::vector<std::string> read_id_list(const std::filesystem::path& path);
void write_id_list(const std::filesystem::path& path, const std::vector<std::string>& ids);

// Reads <root>/labeled.txt and <root>/unlabeled.txt.
SplitSpec read_split(const std::filesystem::path& root);

struct LoadedSplit {
  std::vector<SegSample> labeled;
  std::vector<SegSample> unlabeled;
};

LoadedSplit load_split(const SplitSpec& spec);
SegSample load_sample(const std::filesystem::path& root, const std::string& id, bool with_mask);

struct ColorJitter {
  double brightness = 0.5;
  double contrast = 0.5;
  double saturation = 0.5;
  double hue = 0.25;
  double prob = 0.8;
};

struct AugmentationRecipe {
  ColorJitter jitter;
  double grayscale_prob = 0.2;
  double cutmix_prob = 0.5;
  std::pair<double, double> scale_range{0.5, 2.0};
  double hflip_prob = 0.5;
  int64_t crop_size = 512;
  std::uint64_t seed = 0;

  void validate() const;
  static AugmentationRecipe identity(int64_t crop_size);
};

// Geometric part of a weak view: rescale, pad to crop size, crop, flip.
struct CropGeometry {
  int64_t scaled_height = 0;
  int64_t scaled_width = 0;
  int64_t top = 0;
  int64_t left = 0;
  int64_t crop_size = 0;
  bool flipped = false;
};

enum class Interp { kNearest, kBilinear };

// Applies a recorded geometry to a C×H×W tensor (any dtype); padding uses pad_value.
torch::Tensor apply_geometry(const torch::Tensor& chw, const CropGeometry& geometry, Interp interp, double pad_value);

struct WeakView {
  SegSample sample;
  CropGeometry geometry;
  torch::Tensor valid;  // bool H×W, false on padding
};

WeakView weak_augment_view(const SegSample& sample, const AugmentationRecipe& recipe, Rng& rng);
SegSample weak_augment(const SegSample& sample, const AugmentationRecipe& recipe, Rng& rng);

// Boxes pasted from a partner sample in the same batch.
struct CutMixRecord {
  torch::Tensor box_mask;         // bool B×H×W; true where the partner's content was pasted
  std::vector<int64_t> partner;   // partner[i] is the source sample for row i

  // Mixes any B×...×H×W tensor with the recorded boxes.
  torch::Tensor apply(const torch::Tensor& batch) const;
  double mixed_fraction() const;
};

struct StrongView {
  torch::Tensor images;  // B×3×H×W
  CutMixRecord cutmix;
};

struct StrongPair {
  StrongView first;
  StrongView second;
};

// Two independently perturbed views of a weakly augmented batch
// (color jitter, grayscale, then in-batch CutMix).
StrongPair strong_augment_pair(const torch::Tensor& images, const AugmentationRecipe& recipe, Rng& rng);
StrongPair strong_augment_pair(const std::vector<SegSample>& batch, const AugmentationRecipe& recipe, Rng& rng);

// Zeroes floor(drop_rate*C) uniformly chosen channels per sample and scales
// the survivors by 1/(1-drop_rate). Accepts C×h×w or B×C×h×w.
torch::Tensor feature_perturb(const torch::Tensor& features, double drop_rate, Rng& rng);

inline constexpr double kDefaultFeatureDropRate = 0.5;

torch::Tensor stack_images(const std::vector<SegSample>& batch);
// Masks as int64 B×H×W; absent masks become all-ignore.
torch::Tensor stack_masks(const std::vector<SegSample>& batch);

}  // namespace vlseg
