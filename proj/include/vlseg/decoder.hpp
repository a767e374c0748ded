#pragma once

#include <torch/torch.h>

#include <array>
#include <vector>

#include <json.hpp>

#include "vlseg/rng.hpp"
#include "vlseg/vlm.hpp"

namespace vlseg {

struct DecoderConfig {
  int64_t d = 128;
  std::vector<int64_t> aspp_dilations{6, 12, 18};
  int64_t spatial_kernel = 7;
  int64_t semantic_blocks = 2;
  int64_t semantic_heads = 4;
  int64_t pool = 4;
  std::array<int64_t, 2> skip_taps{0, 3};        // encoder blocks feeding the skips (first, fourth)
  std::array<int64_t, 2> skip_channels{16, 32};  // projected width of each tap
  std::array<int64_t, 2> fuse_channels{64, 32};  // width after the first / second upsampling block
  int64_t norm_groups = 8;
  bool decoupled = true;
  bool use_spatial = true;
  bool use_semantic = true;
  bool use_upsample = true;

  void validate() const;
  nlohmann::json to_json() const;
  static DecoderConfig from_json(const nlohmann::json& j);
};

// S[b,n,i,j] = <patch[b,:,i,j], text[n]> / (|patch| |text|). patch B×D×h×w, text N×D -> B×N×h×w.
// Throws ValidationError naming the first zero-norm embedding.
torch::Tensor similarity_map(const torch::Tensor& patch_embeds, const torch::Tensor& text_embeds);

// Per-class 7×7 embedding to d channels followed by a residual ASPP. With
// decoupled=false all classes enter one convolution stack together.
class SpatialReasoningImpl : public torch::nn::Module {
 public:
  SpatialReasoningImpl(const DecoderConfig& config, int64_t num_classes);
  // B×N×h×w -> B×N×d×h×w
  torch::Tensor forward(const torch::Tensor& similarity);

 private:
  torch::Tensor aspp(const torch::Tensor& x);

  DecoderConfig config_;
  int64_t num_classes_;
  torch::nn::Conv2d embed{nullptr};
  torch::nn::ModuleList branches{nullptr};
  torch::nn::Sequential fuse{nullptr};
};
TORCH_MODULE(SpatialReasoning);

// Transformer blocks over the class axis at each pooled location, with text
// anchors projected to d and added to the class tokens.
class SemanticReasoningImpl : public torch::nn::Module {
 public:
  SemanticReasoningImpl(const DecoderConfig& config, int64_t text_dim);
  // volume B×N×d×h×w, text N×D -> B×N×d×h×w
  torch::Tensor forward(const torch::Tensor& volume, const torch::Tensor& text_embeds);

 private:
  DecoderConfig config_;
  torch::nn::Linear text_proj{nullptr};
  torch::nn::ModuleList blocks{nullptr};
};
TORCH_MODULE(SemanticReasoning);

// Two class-wise 2× upsampling blocks with shared skip features, then a 1-channel head.
class UpsampleHeadImpl : public torch::nn::Module {
 public:
  UpsampleHeadImpl(const DecoderConfig& config, int64_t encoder_width);
  // volume B×N×d×h×w, skips {first tap, fourth tap} each B×C×h×w -> B×N×4h×4w
  torch::Tensor forward(const torch::Tensor& volume, const std::vector<torch::Tensor>& skips);

 private:
  torch::Tensor run_block(int64_t index, const torch::Tensor& x, const torch::Tensor& skip, int64_t num_classes);

  DecoderConfig config_;
  torch::nn::ModuleList up{nullptr};
  torch::nn::ModuleList skip_proj{nullptr};
  torch::nn::ModuleList fuse{nullptr};
  torch::nn::Conv2d classifier{nullptr};
};
TORCH_MODULE(UpsampleHead);

class LanguageGuidedDecoderImpl : public torch::nn::Module {
 public:
  LanguageGuidedDecoderImpl(const DecoderConfig& config, int64_t text_dim, int64_t encoder_width, int64_t num_classes);
  const DecoderConfig& config() const { return config_; }

  // dense B×D×h×w, taps as produced for config().skip_taps, text N×D -> logits B×N×4h×4w
  // (B×N×h×w when upsampling is disabled).
  torch::Tensor forward(const torch::Tensor& dense, const std::vector<torch::Tensor>& taps,
                        const torch::Tensor& text_embeds);

  SpatialReasoning spatial{nullptr};
  SemanticReasoning semantic{nullptr};
  UpsampleHead upsample{nullptr};

 private:
  DecoderConfig config_;
  torch::nn::Conv2d flat_head{nullptr};
};
TORCH_MODULE(LanguageGuidedDecoder);

struct SegmentationOutput {
  torch::Tensor logits;     // B×N×H×W
  torch::Tensor logits_fp;  // feature-perturbed branch, undefined unless requested
};

// Trainable encoder + language-guided decoder; logits are bilinearly resized to the input size.
class SegmentationModelImpl : public torch::nn::Module {
 public:
  SegmentationModelImpl(VisionEncoder encoder, const DecoderConfig& config, int64_t num_classes);

  torch::Tensor forward(const torch::Tensor& images, const torch::Tensor& text_embeds);
  // Clean logits plus a branch decoded from channel-dropped encoder features.
  SegmentationOutput forward_with_perturbation(const torch::Tensor& images, const torch::Tensor& text_embeds,
                                               double drop_rate, Rng& rng);

  VisionEncoder encoder{nullptr};
  LanguageGuidedDecoder decoder{nullptr};

 private:
  std::vector<int64_t> tap_blocks() const;
  torch::Tensor decode(const VisionFeatures& features, const torch::Tensor& text_embeds, int64_t height, int64_t width);
};
TORCH_MODULE(SegmentationModel);

}  // namespace vlseg
