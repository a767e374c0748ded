#include "vlseg/decoder.hpp"

#include <sstream>

#include "vlseg/corpus.hpp"
#include "vlseg/error.hpp"

namespace vlseg {

namespace F = torch::nn::functional;
using nlohmann::json;

void DecoderConfig::validate() const {
  if (d <= 0 || pool <= 0 || spatial_kernel <= 0 || spatial_kernel % 2 == 0)
    throw ConfigError("decoder: d and pool must be positive and spatial_kernel odd");
  if (semantic_blocks < 0 || semantic_heads <= 0 || d % semantic_heads != 0)
    throw ConfigError("decoder: d must be divisible by semantic_heads");
  if (norm_groups <= 0 || d % norm_groups != 0 || fuse_channels[0] % norm_groups != 0 ||
      fuse_channels[1] % norm_groups != 0)
    throw ConfigError("decoder: d and fuse_channels must be divisible by norm_groups");
  for (auto r : aspp_dilations)
    if (r <= 0) throw ConfigError("decoder: ASPP dilation rates must be positive");
  for (int i = 0; i < 2; ++i)
    if (skip_channels[i] <= 0 || fuse_channels[i] <= 0 || skip_taps[i] < 0)
      throw ConfigError("decoder: skip/fuse channel counts must be positive");
}

json DecoderConfig::to_json() const {
  return {{"d", d},
          {"aspp_dilations", aspp_dilations},
          {"spatial_kernel", spatial_kernel},
          {"semantic_blocks", semantic_blocks},
          {"semantic_heads", semantic_heads},
          {"pool", pool},
          {"skip_taps", skip_taps},
          {"skip_channels", skip_channels},
          {"fuse_channels", fuse_channels},
          {"norm_groups", norm_groups},
          {"decoupled", decoupled},
          {"use_spatial", use_spatial},
          {"use_semantic", use_semantic},
          {"use_upsample", use_upsample}};
}

DecoderConfig DecoderConfig::from_json(const json& j) {
  DecoderConfig c;
  try {
    c.d = j.value("d", c.d);
    c.aspp_dilations = j.value("aspp_dilations", c.aspp_dilations);
    c.spatial_kernel = j.value("spatial_kernel", c.spatial_kernel);
    c.semantic_blocks = j.value("semantic_blocks", c.semantic_blocks);
    c.semantic_heads = j.value("semantic_heads", c.semantic_heads);
    c.pool = j.value("pool", c.pool);
    if (j.contains("skip_taps")) c.skip_taps = j.at("skip_taps").get<std::array<int64_t, 2>>();
    if (j.contains("skip_channels")) c.skip_channels = j.at("skip_channels").get<std::array<int64_t, 2>>();
    if (j.contains("fuse_channels")) c.fuse_channels = j.at("fuse_channels").get<std::array<int64_t, 2>>();
    c.norm_groups = j.value("norm_groups", c.norm_groups);
    c.decoupled = j.value("decoupled", c.decoupled);
    c.use_spatial = j.value("use_spatial", c.use_spatial);
    c.use_semantic = j.value("use_semantic", c.use_semantic);
    c.use_upsample = j.value("use_upsample", c.use_upsample);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("decoder config: ") + e.what());
  }
  c.validate();
  return c;
}

torch::Tensor similarity_map(const torch::Tensor& patch_embeds, const torch::Tensor& text_embeds) {
  if (patch_embeds.dim() != 4 || text_embeds.dim() != 2 || patch_embeds.size(1) != text_embeds.size(1))
    throw ValidationError("similarity_map: expected patch B×D×h×w and text N×D with matching D");
  auto patch_norm = patch_embeds.norm(2, {1}, true);  // B×1×h×w
  auto text_norm = text_embeds.norm(2, {1}, true);    // N×1
  {
    auto zero_text = (text_norm.squeeze(1) == 0).nonzero();
    if (zero_text.size(0) > 0)
      throw ValidationError("similarity_map: text embedding " + std::to_string(zero_text[0][0].item<int64_t>()) +
                            " has zero norm");
    auto zero_patch = (patch_norm.squeeze(1) == 0).nonzero();
    if (zero_patch.size(0) > 0) {
      std::ostringstream msg;
      msg << "similarity_map: patch embedding (batch " << zero_patch[0][0].item<int64_t>() << ", row "
          << zero_patch[0][1].item<int64_t>() << ", col " << zero_patch[0][2].item<int64_t>() << ") has zero norm";
      throw ValidationError(msg.str());
    }
  }
  auto patches = patch_embeds / patch_norm;
  auto texts = text_embeds / text_norm;
  return torch::einsum("bdhw,nd->bnhw", {patches, texts});
}

namespace {

torch::nn::Sequential conv_norm_act(int64_t in, int64_t out, int64_t kernel, int64_t dilation, int64_t groups) {
  const int64_t padding = dilation * (kernel - 1) / 2;
  return torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).padding(padding).dilation(dilation)),
      torch::nn::GroupNorm(torch::nn::GroupNormOptions(std::min(groups, out), out)), torch::nn::GELU());
}

}  // namespace

SpatialReasoningImpl::SpatialReasoningImpl(const DecoderConfig& config, int64_t num_classes)
    : config_(config), num_classes_(num_classes) {
  const int64_t d = config.d, k = config.spatial_kernel;
  const int64_t in = config.decoupled ? 1 : num_classes;
  const int64_t width = config.decoupled ? d : num_classes * d;
  embed = register_module("embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, width, k).padding(k / 2)));
  branches = register_module("aspp", torch::nn::ModuleList());
  fuse = register_module("aspp_fuse", torch::nn::Sequential());
  if (config.use_spatial) {
    branches->push_back(conv_norm_act(width, d, 1, 1, config.norm_groups));
    for (auto rate : config.aspp_dilations) branches->push_back(conv_norm_act(width, d, 3, rate, config.norm_groups));
    const int64_t cat = d * static_cast<int64_t>(branches->size());
    fuse->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(cat, width, 1)));
    fuse->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(std::min(config.norm_groups, width), width)));
    fuse->push_back(torch::nn::GELU());
  }
}

torch::Tensor SpatialReasoningImpl::aspp(const torch::Tensor& x) {
  std::vector<torch::Tensor> outs;
  for (const auto& branch : *branches) outs.push_back(branch->as<torch::nn::Sequential>()->forward(x));
  return x + fuse->forward(torch::cat(outs, 1));
}

torch::Tensor SpatialReasoningImpl::forward(const torch::Tensor& similarity) {
  const int64_t batch = similarity.size(0), classes = similarity.size(1);
  const int64_t h = similarity.size(2), w = similarity.size(3), d = config_.d;
  torch::Tensor x;
  if (config_.decoupled) {
    x = embed->forward(similarity.reshape({batch * classes, 1, h, w}));
  } else {
    if (classes != num_classes_)
      throw ValidationError("joint spatial reasoning was built for " + std::to_string(num_classes_) + " classes, got " +
                            std::to_string(classes));
    x = embed->forward(similarity);
  }
  if (config_.use_spatial) x = aspp(x);
  return x.reshape({batch, classes, d, h, w});
}

SemanticReasoningImpl::SemanticReasoningImpl(const DecoderConfig& config, int64_t text_dim) : config_(config) {
  text_proj = register_module("text_proj", torch::nn::Linear(text_dim, config.d));
  blocks = register_module("blocks", torch::nn::ModuleList());
  const TransformerConfig tc{config.d, std::max<int64_t>(config.semantic_blocks, 1), config.semantic_heads, 4,
                             Activation::kGelu};
  for (int64_t i = 0; i < config.semantic_blocks; ++i) blocks->push_back(ResidualBlock(tc));
}

torch::Tensor SemanticReasoningImpl::forward(const torch::Tensor& volume, const torch::Tensor& text_embeds) {
  const int64_t batch = volume.size(0), classes = volume.size(1), d = volume.size(2);
  const int64_t h = volume.size(3), w = volume.size(4), p = config_.pool;
  if (classes < 1) throw ValidationError("semantic reasoning needs at least one class");
  if (text_embeds.size(0) != classes) throw ValidationError("semantic reasoning: text/class count mismatch");

  auto pooled = F::avg_pool2d(volume.reshape({batch, classes * d, h, w}),
                              F::AvgPool2dFuncOptions(p).stride(p).ceil_mode(true).count_include_pad(false));
  const int64_t ph = pooled.size(2), pw = pooled.size(3);
  // one token sequence of length N per pooled location
  auto tokens = pooled.reshape({batch, classes, d, ph, pw}).permute({0, 3, 4, 1, 2}).reshape({batch * ph * pw, classes, d});
  auto x = tokens + text_proj->forward(text_embeds).unsqueeze(0);
  auto y = x;
  for (const auto& block : *blocks) y = block->as<ResidualBlock>()->forward(y);
  auto delta = (y - x).reshape({batch, ph, pw, classes, d}).permute({0, 3, 4, 1, 2});  // B×N×d×ph×pw
  delta = delta.repeat_interleave(p, 3).repeat_interleave(p, 4).narrow(3, 0, h).narrow(4, 0, w);
  return volume + delta;
}

UpsampleHeadImpl::UpsampleHeadImpl(const DecoderConfig& config, int64_t encoder_width) : config_(config) {
  up = register_module("up", torch::nn::ModuleList());
  skip_proj = register_module("skip_proj", torch::nn::ModuleList());
  fuse = register_module("fuse", torch::nn::ModuleList());
  // block 0 consumes the deeper (fourth-block) tap, block 1 the first-block tap
  const std::array<int64_t, 2> in_channels{config.d, config.fuse_channels[0]};
  const std::array<int64_t, 2> skip_width{config.skip_channels[1], config.skip_channels[0]};
  for (int b = 0; b < 2; ++b) {
    const int64_t c = in_channels[b];
    up->push_back(torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(c, c, 2).stride(2)));
    skip_proj->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(encoder_width, skip_width[b], 1)));
    torch::nn::Sequential block;
    const auto first = conv_norm_act(c + skip_width[b], config.fuse_channels[b], 3, 1, config.norm_groups);
    const auto second = conv_norm_act(config.fuse_channels[b], config.fuse_channels[b], 3, 1, config.norm_groups);
    for (const auto& m : *first) block->push_back(m);
    for (const auto& m : *second) block->push_back(m);
    fuse->push_back(block);
  }
  classifier = register_module("classifier", torch::nn::Conv2d(torch::nn::Conv2dOptions(config.fuse_channels[1], 1, 1)));
}

torch::Tensor UpsampleHeadImpl::run_block(int64_t index, const torch::Tensor& x, const torch::Tensor& skip,
                                          int64_t num_classes) {
  auto upsampled = up[index]->as<torch::nn::ConvTranspose2d>()->forward(x);  // (B·N)×c×2h×2w
  const int64_t batch = skip.size(0);
  auto s = skip_proj[index]->as<torch::nn::Conv2d>()->forward(skip);
  s = F::interpolate(s, F::InterpolateFuncOptions()
                            .size(std::vector<int64_t>{upsampled.size(2), upsampled.size(3)})
                            .mode(torch::kBilinear)
                            .align_corners(false));
  // share the skip across classes
  s = s.unsqueeze(1).expand({batch, num_classes, s.size(1), s.size(2), s.size(3)})
          .reshape({batch * num_classes, s.size(1), s.size(2), s.size(3)});
  return fuse[index]->as<torch::nn::Sequential>()->forward(torch::cat({upsampled, s}, 1));
}

torch::Tensor UpsampleHeadImpl::forward(const torch::Tensor& volume, const std::vector<torch::Tensor>& skips) {
  if (skips.size() != 2) throw ValidationError("upsample head expects two skip tensors");
  const int64_t batch = volume.size(0), classes = volume.size(1);
  const int64_t d = volume.size(2), h = volume.size(3), w = volume.size(4);
  auto x = volume.reshape({batch * classes, d, h, w});
  x = run_block(0, x, skips[1], classes);
  x = run_block(1, x, skips[0], classes);
  auto logits = classifier->forward(x);
  return logits.reshape({batch, classes, logits.size(2), logits.size(3)});
}

LanguageGuidedDecoderImpl::LanguageGuidedDecoderImpl(const DecoderConfig& config, int64_t text_dim,
                                                     int64_t encoder_width, int64_t num_classes)
    : config_(config) {
  config.validate();
  spatial = register_module("spatial", SpatialReasoning(config, num_classes));
  if (config.use_semantic) semantic = register_module("semantic", SemanticReasoning(config, text_dim));
  if (config.use_upsample) {
    upsample = register_module("upsample", UpsampleHead(config, encoder_width));
  } else {
    flat_head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(config.d, 1, 1)));
  }
}

torch::Tensor LanguageGuidedDecoderImpl::forward(const torch::Tensor& dense, const std::vector<torch::Tensor>& taps,
                                                 const torch::Tensor& text_embeds) {
  auto volume = spatial->forward(similarity_map(dense, text_embeds));
  if (config_.use_semantic) volume = semantic->forward(volume, text_embeds);
  if (config_.use_upsample) return upsample->forward(volume, taps);
  const int64_t batch = volume.size(0), classes = volume.size(1);
  auto logits = flat_head->forward(volume.reshape({batch * classes, config_.d, volume.size(3), volume.size(4)}));
  return logits.reshape({batch, classes, volume.size(3), volume.size(4)});
}

SegmentationModelImpl::SegmentationModelImpl(VisionEncoder enc, const DecoderConfig& config, int64_t num_classes) {
  encoder = register_module("encoder", std::move(enc));
  for (auto tap : config.skip_taps)
    if (config.use_upsample && tap >= encoder->config().transformer.depth)
      throw ConfigError("decoder skip tap " + std::to_string(tap) + " exceeds encoder depth");
  decoder = register_module("decoder", LanguageGuidedDecoder(config, encoder->embed_dim(),
                                                             encoder->config().transformer.width, num_classes));
}

std::vector<int64_t> SegmentationModelImpl::tap_blocks() const {
  const auto& c = decoder->config();
  if (!c.use_upsample) return {};
  return {c.skip_taps[0], c.skip_taps[1]};
}

torch::Tensor SegmentationModelImpl::decode(const VisionFeatures& features, const torch::Tensor& text_embeds,
                                            int64_t height, int64_t width) {
  auto logits = decoder->forward(features.dense, features.taps, text_embeds);
  return F::interpolate(logits, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{height, width})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
}

torch::Tensor SegmentationModelImpl::forward(const torch::Tensor& images, const torch::Tensor& text_embeds) {
  auto features = encoder->forward_features(images, tap_blocks());
  return decode(features, text_embeds, images.size(2), images.size(3));
}

SegmentationOutput SegmentationModelImpl::forward_with_perturbation(const torch::Tensor& images,
                                                                    const torch::Tensor& text_embeds, double drop_rate,
                                                                    Rng& rng) {
  auto features = encoder->forward_features(images, tap_blocks());
  VisionFeatures perturbed;
  perturbed.dense = feature_perturb(features.dense, drop_rate, rng);
  for (const auto& tap : features.taps) perturbed.taps.push_back(feature_perturb(tap, drop_rate, rng));
  SegmentationOutput out;
  out.logits = decode(features, text_embeds, images.size(2), images.size(3));
  out.logits_fp = decode(perturbed, text_embeds, images.size(2), images.size(3));
  return out;
}

}  // namespace vlseg
