#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlseg/tokenizer.hpp"

namespace vlseg {

enum class ParamRole { kAttention, kMlp, kNorm, kPatchEmbed, kPosEmbed, kOther };
enum class FineTuneMode { kSpatial, kFull, kFrozen };

std::string to_string(ParamRole role);
ParamRole param_role_from_string(const std::string& text);
std::string to_string(FineTuneMode mode);
FineTuneMode fine_tune_mode_from_string(const std::string& text);

// Role of a parameter from its name under this toolkit's naming scheme;
// nullopt for names outside the scheme.
std::optional<ParamRole> infer_param_role(const std::string& name);

enum class Activation { kGelu, kQuickGelu };

struct TransformerConfig {
  int64_t width = 32;
  int64_t depth = 4;
  int64_t heads = 4;
  int64_t mlp_ratio = 4;
  Activation activation = Activation::kQuickGelu;
};

// Pre-norm residual attention block: x + attn(norm1(x)), then x + mlp(norm2(x)).
class ResidualBlockImpl : public torch::nn::Module {
 public:
  explicit ResidualBlockImpl(const TransformerConfig& config);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& attn_mask = {});
  // Value path only: out-proj(v(norm1(x))) added to x, then the MLP residual.
  torch::Tensor forward_value_path(const torch::Tensor& x);

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};

 private:
  torch::Tensor attention(const torch::Tensor& x, const torch::Tensor& attn_mask);
  torch::Tensor mlp(const torch::Tensor& x);

  TransformerConfig config_;
  std::shared_ptr<torch::nn::Module> attn_;
  torch::nn::Linear qkv{nullptr}, proj{nullptr};
  std::shared_ptr<torch::nn::Module> mlp_;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(ResidualBlock);

struct VisionEncoderConfig {
  int64_t patch_size = 16;
  int64_t embed_dim = 32;  // joint vision-language space D
  int64_t pretrain_grid = 4;
  TransformerConfig transformer;

  nlohmann::json to_json() const;
  static VisionEncoderConfig from_json(const nlohmann::json& j);
  // patch 16, D=32, depth 4, random init
  static VisionEncoderConfig tiny();
  static VisionEncoderConfig vit_b16();
};

struct TaggedParameter {
  std::string name;
  torch::Tensor tensor;
  std::optional<ParamRole> role;
};

struct VisionFeatures {
  torch::Tensor dense;              // B×D×h×w in the joint space
  std::vector<torch::Tensor> taps;  // B×width×h×w after the requested blocks
};

// Patch encoder of a vision-language model. Parameter names follow
// patch_embed / cls_token / pos_embed / norm_pre / blocks.<i>.{norm1,attn,norm2,mlp} /
// norm_post / head.proj.
class VisionEncoderImpl : public torch::nn::Module {
 public:
  explicit VisionEncoderImpl(const VisionEncoderConfig& config);

  const VisionEncoderConfig& config() const { return config_; }
  int64_t patch_size() const { return config_.patch_size; }
  int64_t embed_dim() const { return config_.embed_dim; }

  // Trainable path; images B×3×H×W with H,W divisible by the patch size.
  VisionFeatures forward_features(const torch::Tensor& images, const std::vector<int64_t>& tap_blocks = {});
  torch::Tensor forward(const torch::Tensor& images) { return forward_features(images).dense; }

  // Dense extraction for the frozen guidance path: the last block reads the
  // value projection through its output projection instead of attention pooling.
  torch::Tensor forward_dense_value(const torch::Tensor& images);

  std::vector<TaggedParameter> tagged_parameters() const;
  const std::map<std::string, ParamRole>& roles() const { return roles_; }

 private:
  torch::Tensor embed_tokens(const torch::Tensor& images, int64_t grid_h, int64_t grid_w);
  torch::Tensor project_patches(const torch::Tensor& tokens, int64_t batch, int64_t grid_h, int64_t grid_w);
  void check_input(const torch::Tensor& images) const;

  VisionEncoderConfig config_;
  torch::nn::Conv2d patch_embed{nullptr};
  torch::Tensor cls_token, pos_embed;
  torch::nn::LayerNorm norm_pre{nullptr}, norm_post{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  std::shared_ptr<torch::nn::Module> head_;
  torch::Tensor head_proj;
  std::map<std::string, ParamRole> roles_;
};
TORCH_MODULE(VisionEncoder);

// Independent deep copy (parameters and buffers) of an encoder.
VisionEncoder clone_encoder(const VisionEncoder& encoder);

struct TextEncoderConfig {
  int64_t vocab_size = 258;
  int64_t context_length = 32;
  int64_t embed_dim = 32;
  TransformerConfig transformer{32, 2, 4, 4, Activation::kQuickGelu};

  nlohmann::json to_json() const;
  static TextEncoderConfig from_json(const nlohmann::json& j);
  static TextEncoderConfig tiny();
  static TextEncoderConfig clip_b16();
};

// Causal transformer over token ids; the embedding at the end marker is projected to D.
class TextEncoderImpl : public torch::nn::Module {
 public:
  explicit TextEncoderImpl(const TextEncoderConfig& config);
  const TextEncoderConfig& config() const { return config_; }
  // tokens: N×L ids, end_positions: N
  torch::Tensor forward(const torch::Tensor& tokens, const torch::Tensor& end_positions);

 private:
  TextEncoderConfig config_;
  torch::nn::Embedding token_embedding{nullptr};
  torch::Tensor pos_embed;
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm norm_final{nullptr};
  std::shared_ptr<torch::nn::Module> head_;
  torch::Tensor head_proj;
};
TORCH_MODULE(TextEncoder);

// Maps prompt strings to N×D embeddings (rows unnormalized).
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual torch::Tensor embed(const std::vector<std::string>& prompts) = 0;
  virtual int64_t dim() const = 0;
};

class TransformerTextEmbedder final : public TextEmbedder {
 public:
  TransformerTextEmbedder(TextEncoder encoder, std::shared_ptr<Tokenizer> tokenizer);
  torch::Tensor embed(const std::vector<std::string>& prompts) override;
  int64_t dim() const override { return encoder_->config().embed_dim; }
  TextEncoder& encoder() { return encoder_; }

 private:
  TextEncoder encoder_;
  std::shared_ptr<Tokenizer> tokenizer_;
};

// Fixed random unit anchors, mutually orthogonal when count <= dim. Stands in
// for a pretrained text tower in desk-scale experiments.
class AnchorTextEmbedder final : public TextEmbedder {
 public:
  AnchorTextEmbedder(const std::vector<std::string>& prompts, int64_t dim, std::uint64_t seed);
  torch::Tensor embed(const std::vector<std::string>& prompts) override;
  int64_t dim() const override { return dim_; }

 private:
  int64_t dim_;
  std::map<std::string, torch::Tensor> table_;
};

inline constexpr const char* kDefaultPromptTemplate = "a photo of a {}";

// Substitutes each name into the single "{}" placeholder of template_text.
std::vector<std::string> build_prompts(const std::vector<std::string>& names, const std::string& template_text);

struct ParameterPartition {
  std::set<std::string> trainable;
  std::set<std::string> frozen;
  FineTuneMode mode = FineTuneMode::kSpatial;
};

// spatial: attention + pos_embed trainable, everything else frozen;
// full: all trainable; frozen: none trainable.
ParameterPartition partition_parameters(const std::vector<TaggedParameter>& params, FineTuneMode mode);
ParameterPartition partition_parameters(const VisionEncoder& encoder, FineTuneMode mode);

// Sets requires_grad per the partition; returns the trainable tensors.
std::vector<torch::Tensor> apply_partition(VisionEncoder& encoder, const ParameterPartition& partition);

// A vision tower, a text tower and the frozen logit scale.
struct Backbone {
  VisionEncoder vision{nullptr};
  TextEncoder text{nullptr};
  std::string tokenizer_kind = "byte";
  double logit_scale = 100.0;
};

Backbone make_tiny_backbone(std::uint64_t seed);

// Weight-map file: lines "source_name -> target_name"; '#' starts a comment and
// '*' matches a layer index consistently on both sides.
std::vector<std::pair<std::string, std::string>> read_weight_map(const std::filesystem::path& path);
std::map<std::string, torch::Tensor> apply_weight_map(const std::map<std::string, torch::Tensor>& source,
                                                      const std::vector<std::pair<std::string, std::string>>& rules);

void save_backbone(const std::filesystem::path& path, const Backbone& backbone);
// Loads an archive written by save_backbone, or a raw published checkpoint when
// a weight map is given (its metadata must then describe the architecture).
Backbone load_backbone(const std::filesystem::path& path, const std::filesystem::path& weight_map = {});

// Stable hash over parameter names and values.
std::string backbone_hash(const Backbone& backbone);

}  // namespace vlseg
