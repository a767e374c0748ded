#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "vlseg/corpus.hpp"
#include "vlseg/decoder.hpp"
#include "vlseg/objective.hpp"
#include "vlseg/vlm.hpp"

namespace vlseg {

struct DataConfig {
  std::filesystem::path root;               // holds labeled.txt, unlabeled.txt, images/, masks/
  std::filesystem::path val_list;           // default <root>/val.txt
  std::filesystem::path class_names;        // default <root>/classes.json
  std::filesystem::path class_definitions;  // concept file; empty means one concept per class name
};

struct BackboneConfig {
  std::string kind = "tiny";  // "tiny" (random init from seed) or "file"
  std::filesystem::path checkpoint;
  std::filesystem::path weight_map;
  std::uint64_t seed = 0;
};

struct TextConfig {
  std::string source = "encoder";  // "encoder" (backbone text tower) or "anchors"
  std::string prompt_template = kDefaultPromptTemplate;
  std::uint64_t anchor_seed = 0;
};

struct EvalConfig {
  int64_t window = 0;  // 0: crop size
  int64_t stride = 0;  // 0: window / 2
  int64_t every_epochs = 1;
};

// Defaults reproduce the VOC recipe: 8+8 images per step, lr 1e-4 with a 0.01
// multiplier on the encoder, 512 crops, 0.9 polynomial decay, AdamW.
struct TrainConfig {
  int64_t batch_labeled = 8;
  int64_t batch_unlabeled = 8;
  int64_t epochs = 80;
  double base_lr = 1e-4;
  double backbone_lr_multiplier = 0.01;
  double poly_power = 0.9;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int64_t crop_size = 512;
  double feature_drop_rate = kDefaultFeatureDropRate;
  FineTuneMode fine_tune_mode = FineTuneMode::kSpatial;
  std::uint64_t seed = 0;
  bool semi_supervised = true;  // false trains on the labeled loss only
  bool use_guidance = true;

  LossConfig loss;
  DecoderConfig decoder;
  AugmentationRecipe augment;
  DataConfig data;
  BackboneConfig backbone;
  TextConfig text;
  EvalConfig eval;

  // Run control, excluded from the config hash.
  std::filesystem::path output_dir = "runs/default";
  std::filesystem::path resume;  // checkpoint to continue from
  int64_t max_steps = 0;         // stop early after this many steps (0: no limit)
  std::filesystem::path guidance_cache;  // default <output_dir>/guidance_cache

  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys are rejected; relative paths resolve against base_dir.
  static TrainConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  // Hash of every field that affects the training trajectory.
  std::string hash() const;

  int64_t eval_window() const { return eval.window > 0 ? eval.window : crop_size; }
  int64_t eval_stride() const { return eval.stride > 0 ? eval.stride : std::max<int64_t>(1, eval_window() / 2); }
  std::filesystem::path val_list() const;
  std::filesystem::path class_names_path() const;
};

TrainConfig load_train_config(const std::filesystem::path& path);

nlohmann::json augmentation_to_json(const AugmentationRecipe& recipe);
AugmentationRecipe augmentation_from_json(const nlohmann::json& j);

// Reads {"classes": [...]} or a bare JSON list of class names.
std::vector<std::string> read_class_names(const std::filesystem::path& path);

}  // namespace vlseg
