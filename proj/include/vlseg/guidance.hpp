#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlseg/vlm.hpp"

namespace vlseg {

// Class names in dataset order and, per class, the concept phrases that vote for it.
// The same phrase may appear under two classes; each occurrence is scored separately.
struct ClassDefinitionSet {
  std::vector<std::string> classes;
  std::vector<std::vector<std::string>> concepts;

  int64_t num_classes() const { return static_cast<int64_t>(classes.size()); }
  int64_t num_concepts() const;
  // All concepts class by class, and the owning class of each.
  std::vector<std::string> flat_concepts() const;
  std::vector<int64_t> owners() const;

  // Throws ConfigError on duplicate class names or an empty concept list.
  void validate() const;
  std::string hash() const;
  nlohmann::json to_json() const;

  static ClassDefinitionSet from_names(const std::vector<std::string>& names);
  // Accepts {"classes": [...], "concepts": {name: [...]}} or a bare list of names.
  static ClassDefinitionSet from_json(const nlohmann::json& j, const std::string& source = "<json>");
};

// Loads a class-definition file. When expected_classes is non-empty the file's
// class order must match it exactly.
ClassDefinitionSet load_class_definitions(const std::filesystem::path& path,
                                          const std::vector<std::string>& expected_classes = {});

struct GuidanceConfig {
  std::string prompt_template = kDefaultPromptTemplate;
  double logit_scale = 100.0;  // frozen softmax temperature of the VLM
  double zeta = 0.9;           // only used when reporting confident fractions
};

// M×D text embeddings for every concept prompt, in flat_concepts() order.
torch::Tensor embed_concepts(const ClassDefinitionSet& defs, TextEmbedder& text, const std::string& prompt_template);

// Softmax over all M concepts of the scaled cosine similarity between the
// frozen dense patch embeddings and each concept embedding.
// images B×3×H×W (H, W multiples of the patch size) -> B×M×h×w.
torch::Tensor concept_scores(const torch::Tensor& images, VisionEncoder& frozen_encoder,
                             const torch::Tensor& concept_embeds, double logit_scale);
torch::Tensor concept_scores(const torch::Tensor& images, const ClassDefinitionSet& defs, VisionEncoder& frozen_encoder,
                             TextEmbedder& text, const GuidanceConfig& cfg);

// probs: class scores B×N×h×w; confidence: B×h×w, the per-pixel max of the
// max-aggregated concept scores (not renormalized).
struct DensePseudoLabel {
  torch::Tensor probs;
  torch::Tensor confidence;

  // Fraction of pixels whose confidence reaches zeta.
  double confident_fraction(double zeta) const;
};

// Class score = max over the class's concepts; confidence = max over classes.
DensePseudoLabel aggregate_concepts(const torch::Tensor& p_concept, const ClassDefinitionSet& defs);

// Dense guidance label at the input resolution. Inputs whose sides are not
// multiples of the patch size are resized for the encoder. Class scores are
// upsampled bilinearly and renormalized per pixel; confidence keeps the
// unnormalized aggregated maximum.
DensePseudoLabel pseudolabel_image(const torch::Tensor& image, const ClassDefinitionSet& defs,
                                   VisionEncoder& frozen_encoder, const torch::Tensor& concept_embeds,
                                   const GuidanceConfig& cfg);
DensePseudoLabel pseudolabel_image(const torch::Tensor& image, const ClassDefinitionSet& defs,
                                   VisionEncoder& frozen_encoder, TextEmbedder& text, const GuidanceConfig& cfg);

// On-disk store of per-image guidance labels, one zlib-compressed archive per
// image under <dir>/<key>/. Writes go through a temp file and a rename.
class PseudoLabelCache {
 public:
  PseudoLabelCache(std::filesystem::path dir, std::string key);

  static std::string make_key(const ClassDefinitionSet& defs, const std::string& backbone_hash);

  std::filesystem::path path_for(const std::string& id) const;
  std::optional<DensePseudoLabel> load(const std::string& id) const;
  void store(const std::string& id, const DensePseudoLabel& label) const;
  const std::string& key() const { return key_; }

 private:
  std::filesystem::path dir_;
  std::string key_;
};

}  // namespace vlseg
