#include "vlseg/vlm.hpp"

#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "vlseg/error.hpp"
#include "vlseg/rng.hpp"
#include "vlseg/safetensors.hpp"

namespace vlseg {

namespace F = torch::nn::functional;
using nlohmann::json;

std::string to_string(ParamRole role) {
  switch (role) {
    case ParamRole::kAttention: return "attention";
    case ParamRole::kMlp: return "mlp";
    case ParamRole::kNorm: return "norm";
    case ParamRole::kPatchEmbed: return "patch_embed";
    case ParamRole::kPosEmbed: return "pos_embed";
    case ParamRole::kOther: return "other";
  }
  return "other";
}

ParamRole param_role_from_string(const std::string& text) {
  if (text == "attention") return ParamRole::kAttention;
  if (text == "mlp") return ParamRole::kMlp;
  if (text == "norm") return ParamRole::kNorm;
  if (text == "patch_embed") return ParamRole::kPatchEmbed;
  if (text == "pos_embed") return ParamRole::kPosEmbed;
  if (text == "other") return ParamRole::kOther;
  throw ValidationError("unknown parameter role: " + text);
}

std::string to_string(FineTuneMode mode) {
  switch (mode) {
    case FineTuneMode::kSpatial: return "spatial";
    case FineTuneMode::kFull: return "full";
    case FineTuneMode::kFrozen: return "frozen";
  }
  return "spatial";
}

FineTuneMode fine_tune_mode_from_string(const std::string& text) {
  if (text == "spatial") return FineTuneMode::kSpatial;
  if (text == "full") return FineTuneMode::kFull;
  if (text == "frozen") return FineTuneMode::kFrozen;
  throw ConfigError("fine_tune_mode must be one of spatial|full|frozen, got '" + text + "'");
}

std::optional<ParamRole> infer_param_role(const std::string& name) {
  static const std::regex block(R"(blocks\.\d+\.(attn|mlp|norm1|norm2)\..+)");
  std::smatch m;
  if (std::regex_match(name, m, block)) {
    if (m[1] == "attn") return ParamRole::kAttention;
    if (m[1] == "mlp") return ParamRole::kMlp;
    return ParamRole::kNorm;
  }
  if (name.rfind("patch_embed.", 0) == 0) return ParamRole::kPatchEmbed;
  if (name == "pos_embed") return ParamRole::kPosEmbed;
  if (name.rfind("norm_pre.", 0) == 0 || name.rfind("norm_post.", 0) == 0) return ParamRole::kNorm;
  if (name == "cls_token" || name == "head.proj") return ParamRole::kOther;
  return std::nullopt;
}

namespace {

std::string to_string(Activation a) { return a == Activation::kGelu ? "gelu" : "quick_gelu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::kGelu;
  if (s == "quick_gelu") return Activation::kQuickGelu;
  throw ConfigError("unknown activation: " + s);
}

json transformer_to_json(const TransformerConfig& c) {
  return {{"width", c.width}, {"depth", c.depth}, {"heads", c.heads}, {"mlp_ratio", c.mlp_ratio},
          {"activation", to_string(c.activation)}};
}

TransformerConfig transformer_from_json(const json& j) {
  TransformerConfig c;
  c.width = j.value("width", c.width);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.activation = activation_from_string(j.value("activation", std::string("quick_gelu")));
  if (c.width <= 0 || c.depth <= 0 || c.heads <= 0 || c.width % c.heads != 0)
    throw ConfigError("transformer width must be positive and divisible by heads");
  return c;
}

}  // namespace

ResidualBlockImpl::ResidualBlockImpl(const TransformerConfig& config) : config_(config) {
  const int64_t width = config.width;
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  attn_ = register_module("attn", std::make_shared<torch::nn::Module>());
  qkv = attn_->register_module("qkv", torch::nn::Linear(width, 3 * width));
  proj = attn_->register_module("proj", torch::nn::Linear(width, width));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  mlp_ = register_module("mlp", std::make_shared<torch::nn::Module>());
  fc1 = mlp_->register_module("fc1", torch::nn::Linear(width, width * config.mlp_ratio));
  fc2 = mlp_->register_module("fc2", torch::nn::Linear(width * config.mlp_ratio, width));

  torch::NoGradGuard no_grad;
  const double attn_std = std::pow(static_cast<double>(width), -0.5);
  const double proj_std = attn_std * std::pow(2.0 * config.depth, -0.5);
  const double fc_std = std::pow(2.0 * width, -0.5);
  torch::nn::init::normal_(qkv->weight, 0.0, attn_std);
  torch::nn::init::zeros_(qkv->bias);
  torch::nn::init::normal_(proj->weight, 0.0, proj_std);
  torch::nn::init::zeros_(proj->bias);
  torch::nn::init::normal_(fc1->weight, 0.0, fc_std);
  torch::nn::init::zeros_(fc1->bias);
  torch::nn::init::normal_(fc2->weight, 0.0, proj_std);
  torch::nn::init::zeros_(fc2->bias);
}

torch::Tensor ResidualBlockImpl::attention(const torch::Tensor& x, const torch::Tensor& attn_mask) {
  const int64_t batch = x.size(0), length = x.size(1), width = x.size(2);
  const int64_t heads = config_.heads, head_dim = width / heads;
  auto qkv_out = qkv->forward(x).view({batch, length, 3, heads, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv_out[0], k = qkv_out[1], v = qkv_out[2];
  auto scores = torch::matmul(q, k.transpose(-2, -1)) * std::pow(static_cast<double>(head_dim), -0.5);
  if (attn_mask.defined()) scores = scores + attn_mask;
  auto out = torch::matmul(scores.softmax(-1), v);
  out = out.transpose(1, 2).reshape({batch, length, width});
  return proj->forward(out);
}

torch::Tensor ResidualBlockImpl::mlp(const torch::Tensor& x) {
  auto h = fc1->forward(x);
  h = config_.activation == Activation::kGelu ? F::gelu(h) : h * torch::sigmoid(1.702 * h);
  return fc2->forward(h);
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& attn_mask) {
  auto y = x + attention(norm1->forward(x), attn_mask);
  return y + mlp(norm2->forward(y));
}

torch::Tensor ResidualBlockImpl::forward_value_path(const torch::Tensor& x) {
  const int64_t width = x.size(2);
  auto v = qkv->forward(norm1->forward(x)).narrow(-1, 2 * width, width);
  auto y = x + proj->forward(v);
  return y + mlp(norm2->forward(y));
}

json VisionEncoderConfig::to_json() const {
  return {{"patch_size", patch_size}, {"embed_dim", embed_dim}, {"pretrain_grid", pretrain_grid},
          {"transformer", transformer_to_json(transformer)}};
}

VisionEncoderConfig VisionEncoderConfig::from_json(const json& j) {
  VisionEncoderConfig c;
  c.patch_size = j.value("patch_size", c.patch_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.pretrain_grid = j.value("pretrain_grid", c.pretrain_grid);
  if (j.contains("transformer")) c.transformer = transformer_from_json(j.at("transformer"));
  if (c.patch_size <= 0 || c.embed_dim <= 0 || c.pretrain_grid <= 0)
    throw ConfigError("vision encoder sizes must be positive");
  return c;
}

VisionEncoderConfig VisionEncoderConfig::tiny() {
  VisionEncoderConfig c;
  c.patch_size = 16;
  c.embed_dim = 32;
  c.pretrain_grid = 4;
  c.transformer = TransformerConfig{32, 4, 4, 4, Activation::kQuickGelu};
  return c;
}

VisionEncoderConfig VisionEncoderConfig::vit_b16() {
  VisionEncoderConfig c;
  c.patch_size = 16;
  c.embed_dim = 512;
  c.pretrain_grid = 14;
  c.transformer = TransformerConfig{768, 12, 12, 4, Activation::kQuickGelu};
  return c;
}

VisionEncoderImpl::VisionEncoderImpl(const VisionEncoderConfig& config) : config_(config) {
  const int64_t width = config.transformer.width;
  const int64_t grid = config.pretrain_grid;
  patch_embed = register_module(
      "patch_embed",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(3, width, config.patch_size).stride(config.patch_size).bias(false)));
  const double scale = std::pow(static_cast<double>(width), -0.5);
  cls_token = register_parameter("cls_token", torch::randn({width}) * scale);
  pos_embed = register_parameter("pos_embed", torch::randn({1 + grid * grid, width}) * scale);
  norm_pre = register_module("norm_pre", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < config.transformer.depth; ++i) blocks->push_back(ResidualBlock(config.transformer));
  norm_post = register_module("norm_post", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  head_ = register_module("head", std::make_shared<torch::nn::Module>());
  head_proj = head_->register_parameter("proj", torch::randn({width, config.embed_dim}) * scale);

  for (const auto& p : named_parameters()) {
    auto role = infer_param_role(p.key());
    if (!role) throw ValidationError("vision parameter has no role tag: " + p.key());
    roles_[p.key()] = *role;
  }
}

void VisionEncoderImpl::check_input(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3) throw ValidationError("vision encoder expects Bx3xHxW images");
  if (images.size(2) % config_.patch_size != 0 || images.size(3) % config_.patch_size != 0)
    throw ValidationError("image size " + std::to_string(images.size(2)) + "x" + std::to_string(images.size(3)) +
                          " is not divisible by patch size " + std::to_string(config_.patch_size));
}

torch::Tensor VisionEncoderImpl::embed_tokens(const torch::Tensor& images, int64_t grid_h, int64_t grid_w) {
  const int64_t batch = images.size(0), width = config_.transformer.width, grid = config_.pretrain_grid;
  auto x = patch_embed->forward(images).flatten(2).transpose(1, 2);  // B×hw×W
  auto cls = cls_token.view({1, 1, width}).expand({batch, 1, width});
  x = torch::cat({cls, x}, 1);

  auto pos = pos_embed;
  if (grid_h != grid || grid_w != grid) {
    auto patch_pos = pos.narrow(0, 1, grid * grid).t().reshape({1, width, grid, grid});
    patch_pos = F::interpolate(patch_pos, F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{grid_h, grid_w})
                                              .mode(torch::kBicubic)
                                              .align_corners(false));
    patch_pos = patch_pos.reshape({width, grid_h * grid_w}).t();
    pos = torch::cat({pos.narrow(0, 0, 1), patch_pos}, 0);
  }
  return norm_pre->forward(x + pos.unsqueeze(0));
}

torch::Tensor VisionEncoderImpl::project_patches(const torch::Tensor& tokens, int64_t batch, int64_t grid_h,
                                                 int64_t grid_w) {
  auto patches = norm_post->forward(tokens).narrow(1, 1, grid_h * grid_w);
  auto dense = torch::matmul(patches, head_proj);  // B×hw×D
  return dense.transpose(1, 2).reshape({batch, config_.embed_dim, grid_h, grid_w});
}

VisionFeatures VisionEncoderImpl::forward_features(const torch::Tensor& images, const std::vector<int64_t>& tap_blocks) {
  check_input(images);
  const int64_t batch = images.size(0), width = config_.transformer.width;
  const int64_t grid_h = images.size(2) / config_.patch_size, grid_w = images.size(3) / config_.patch_size;
  for (auto t : tap_blocks)
    if (t < 0 || t >= static_cast<int64_t>(blocks->size()))
      throw ConfigError("skip tap block " + std::to_string(t) + " outside encoder depth");

  VisionFeatures out;
  out.taps.resize(tap_blocks.size());
  auto x = embed_tokens(images, grid_h, grid_w);
  for (int64_t i = 0; i < static_cast<int64_t>(blocks->size()); ++i) {
    x = blocks[i]->as<ResidualBlock>()->forward(x);
    for (std::size_t t = 0; t < tap_blocks.size(); ++t) {
      if (tap_blocks[t] == i)
        out.taps[t] = x.narrow(1, 1, grid_h * grid_w).transpose(1, 2).reshape({batch, width, grid_h, grid_w});
    }
  }
  out.dense = project_patches(x, batch, grid_h, grid_w);
  return out;
}

torch::Tensor VisionEncoderImpl::forward_dense_value(const torch::Tensor& images) {
  check_input(images);
  const int64_t batch = images.size(0);
  const int64_t grid_h = images.size(2) / config_.patch_size, grid_w = images.size(3) / config_.patch_size;
  auto x = embed_tokens(images, grid_h, grid_w);
  const auto depth = static_cast<int64_t>(blocks->size());
  for (int64_t i = 0; i + 1 < depth; ++i) x = blocks[i]->as<ResidualBlock>()->forward(x);
  x = blocks[depth - 1]->as<ResidualBlock>()->forward_value_path(x);
  return project_patches(x, batch, grid_h, grid_w);
}

VisionEncoder clone_encoder(const VisionEncoder& encoder) {
  VisionEncoder copy(encoder->config());
  torch::NoGradGuard no_grad;
  auto dst = copy->named_parameters();
  for (const auto& p : encoder->named_parameters()) dst[p.key()].copy_(p.value());
  auto dst_buffers = copy->named_buffers();
  for (const auto& b : encoder->named_buffers()) dst_buffers[b.key()].copy_(b.value());
  copy->train(encoder->is_training());
  return copy;
}

std::vector<TaggedParameter> VisionEncoderImpl::tagged_parameters() const {
  std::vector<TaggedParameter> out;
  for (const auto& p : named_parameters()) {
    auto it = roles_.find(p.key());
    out.push_back({p.key(), p.value(), it == roles_.end() ? std::nullopt : std::optional<ParamRole>(it->second)});
  }
  return out;
}

json TextEncoderConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"context_length", context_length}, {"embed_dim", embed_dim},
          {"transformer", transformer_to_json(transformer)}};
}

TextEncoderConfig TextEncoderConfig::from_json(const json& j) {
  TextEncoderConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.context_length = j.value("context_length", c.context_length);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  if (j.contains("transformer")) c.transformer = transformer_from_json(j.at("transformer"));
  if (c.vocab_size <= 0 || c.context_length < 2 || c.embed_dim <= 0)
    throw ConfigError("text encoder sizes must be positive");
  return c;
}

TextEncoderConfig TextEncoderConfig::tiny() { return TextEncoderConfig{}; }

TextEncoderConfig TextEncoderConfig::clip_b16() {
  TextEncoderConfig c;
  c.vocab_size = 49408;
  c.context_length = 77;
  c.embed_dim = 512;
  c.transformer = TransformerConfig{512, 12, 8, 4, Activation::kQuickGelu};
  return c;
}

TextEncoderImpl::TextEncoderImpl(const TextEncoderConfig& config) : config_(config) {
  const int64_t width = config.transformer.width;
  token_embedding = register_module("token_embedding", torch::nn::Embedding(config.vocab_size, width));
  pos_embed = register_parameter("pos_embed", torch::randn({config.context_length, width}) * 0.01);
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < config.transformer.depth; ++i) blocks->push_back(ResidualBlock(config.transformer));
  norm_final = register_module("norm_final", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  head_ = register_module("head", std::make_shared<torch::nn::Module>());
  head_proj = head_->register_parameter("proj", torch::randn({width, config.embed_dim}) * std::pow(width, -0.5));
  torch::NoGradGuard no_grad;
  torch::nn::init::normal_(token_embedding->weight, 0.0, 0.02);
}

torch::Tensor TextEncoderImpl::forward(const torch::Tensor& tokens, const torch::Tensor& end_positions) {
  const int64_t length = tokens.size(1);
  if (length > config_.context_length) throw ValidationError("token sequence longer than the context length");
  auto x = token_embedding->forward(tokens) + pos_embed.narrow(0, 0, length).unsqueeze(0);
  auto mask = torch::full({length, length}, -std::numeric_limits<float>::infinity(), x.options()).triu(1);
  for (const auto& block : *blocks) x = block->as<ResidualBlock>()->forward(x, mask);
  x = norm_final->forward(x);
  auto rows = torch::arange(tokens.size(0), torch::kInt64);
  auto pooled = x.index({rows, end_positions.to(torch::kInt64)});
  return torch::matmul(pooled, head_proj);
}

TransformerTextEmbedder::TransformerTextEmbedder(TextEncoder encoder, std::shared_ptr<Tokenizer> tokenizer)
    : encoder_(std::move(encoder)), tokenizer_(std::move(tokenizer)) {
  if (tokenizer_->vocab_size() > encoder_->config().vocab_size)
    throw ConfigError("tokenizer vocabulary exceeds text encoder vocabulary");
}

torch::Tensor TransformerTextEmbedder::embed(const std::vector<std::string>& prompts) {
  const int64_t context = encoder_->config().context_length;
  if (prompts.empty()) return torch::zeros({0, dim()});
  std::vector<torch::Tensor> ids;
  std::vector<int64_t> ends;
  for (const auto& p : prompts) {
    auto tok = tokenize_prompt(*tokenizer_, p, context);
    if (tok.truncated) log_warning("prompt truncated to " + std::to_string(context) + " tokens: '" + p + "'");
    ids.push_back(torch::tensor(tok.ids, torch::kInt64));
    ends.push_back(tok.end_position);
  }
  torch::NoGradGuard no_grad;
  return encoder_->forward(torch::stack(ids), torch::tensor(ends, torch::kInt64));
}

AnchorTextEmbedder::AnchorTextEmbedder(const std::vector<std::string>& prompts, int64_t dim, std::uint64_t seed)
    : dim_(dim) {
  const auto count = static_cast<int64_t>(prompts.size());
  Rng rng(seed);
  auto raw = torch::empty({dim, count}, torch::kFloat64);
  auto acc = raw.accessor<double, 2>();
  for (int64_t i = 0; i < dim; ++i)
    for (int64_t j = 0; j < count; ++j) acc[i][j] = rng.normal();
  torch::Tensor rows;
  if (count > 0 && count <= dim) {
    rows = std::get<0>(torch::linalg_qr(raw)).t();
  } else {
    rows = raw.t() / raw.t().norm(2, {1}, true);
  }
  rows = rows.to(torch::kFloat32).contiguous();
  for (int64_t j = 0; j < count; ++j) table_[prompts[j]] = rows[j].clone();
}

torch::Tensor AnchorTextEmbedder::embed(const std::vector<std::string>& prompts) {
  if (prompts.empty()) return torch::zeros({0, dim_});
  std::vector<torch::Tensor> rows;
  for (const auto& p : prompts) {
    auto it = table_.find(p);
    if (it == table_.end()) throw ValidationError("no anchor embedding for prompt '" + p + "'");
    rows.push_back(it->second);
  }
  return torch::stack(rows);
}

std::vector<std::string> build_prompts(const std::vector<std::string>& names, const std::string& template_text) {
  const auto first = template_text.find("{}");
  if (first == std::string::npos || template_text.find("{}", first + 2) != std::string::npos)
    throw ValidationError("prompt template must contain exactly one '{}' placeholder: '" + template_text + "'");
  std::vector<std::string> prompts;
  prompts.reserve(names.size());
  for (const auto& name : names) {
    std::string p = template_text;
    p.replace(first, 2, name);
    prompts.push_back(std::move(p));
  }
  return prompts;
}

ParameterPartition partition_parameters(const std::vector<TaggedParameter>& params, FineTuneMode mode) {
  ParameterPartition partition;
  partition.mode = mode;
  for (const auto& p : params) {
    if (!p.role) throw ValidationError("parameter has no role tag: " + p.name);
    bool trainable = false;
    switch (mode) {
      case FineTuneMode::kFull: trainable = true; break;
      case FineTuneMode::kFrozen: trainable = false; break;
      case FineTuneMode::kSpatial:
        trainable = *p.role == ParamRole::kAttention || *p.role == ParamRole::kPosEmbed;
        break;
    }
    (trainable ? partition.trainable : partition.frozen).insert(p.name);
  }
  return partition;
}

ParameterPartition partition_parameters(const VisionEncoder& encoder, FineTuneMode mode) {
  return partition_parameters(encoder->tagged_parameters(), mode);
}

std::vector<torch::Tensor> apply_partition(VisionEncoder& encoder, const ParameterPartition& partition) {
  std::vector<torch::Tensor> trainable;
  for (auto& p : encoder->named_parameters()) {
    const bool train = partition.trainable.count(p.key()) > 0;
    if (!train && partition.frozen.count(p.key()) == 0)
      throw ValidationError("parameter missing from partition: " + p.key());
    p.value().set_requires_grad(train);
    if (train) trainable.push_back(p.value());
  }
  return trainable;
}

Backbone make_tiny_backbone(std::uint64_t seed) {
  torch::manual_seed(seed);
  Backbone b;
  b.vision = VisionEncoder(VisionEncoderConfig::tiny());
  b.text = TextEncoder(TextEncoderConfig::tiny());
  b.tokenizer_kind = "byte";
  b.logit_scale = 100.0;
  return b;
}

std::vector<std::pair<std::string, std::string>> read_weight_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open weight map: " + path.string());
  std::vector<std::pair<std::string, std::string>> rules;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto arrow = line.find("->");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
    };
    if (trim(line).empty()) continue;
    if (arrow == std::string::npos)
      throw LoadError("weight map line " + std::to_string(lineno) + " lacks '->': " + path.string());
    auto source = trim(line.substr(0, arrow)), target = trim(line.substr(arrow + 2));
    if (source.empty() || target.empty())
      throw LoadError("weight map line " + std::to_string(lineno) + " has an empty side: " + path.string());
    rules.emplace_back(source, target);
  }
  return rules;
}

std::map<std::string, torch::Tensor> apply_weight_map(const std::map<std::string, torch::Tensor>& source,
                                                      const std::vector<std::pair<std::string, std::string>>& rules) {
  std::map<std::string, torch::Tensor> out;
  std::set<std::string> used;
  for (const auto& [from, to] : rules) {
    const auto star = from.find('*');
    if (star == std::string::npos) {
      auto it = source.find(from);
      if (it == source.end()) continue;
      out[to] = it->second;
      used.insert(from);
      continue;
    }
    const std::string prefix = from.substr(0, star), suffix = from.substr(star + 1);
    for (const auto& [name, tensor] : source) {
      if (name.size() <= prefix.size() + suffix.size()) continue;
      if (name.compare(0, prefix.size(), prefix) != 0) continue;
      if (name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) continue;
      const auto index = name.substr(prefix.size(), name.size() - prefix.size() - suffix.size());
      if (index.empty() || index.find_first_not_of("0123456789") != std::string::npos) continue;
      auto target = to;
      if (auto ts = target.find('*'); ts != std::string::npos) target.replace(ts, 1, index);
      out[target] = tensor;
      used.insert(name);
    }
  }
  for (const auto& [name, _] : source)
    if (!used.count(name)) log_info("weight map ignores source tensor " + name);
  return out;
}

namespace {

void copy_into(torch::nn::Module& module, const std::string& prefix, const std::map<std::string, torch::Tensor>& tensors) {
  torch::NoGradGuard no_grad;
  for (auto& p : module.named_parameters()) {
    auto it = tensors.find(prefix + p.key());
    if (it == tensors.end()) throw LoadError("checkpoint lacks parameter " + prefix + p.key());
    auto value = it->second.to(torch::kFloat32);
    if (value.sizes() != p.value().sizes()) {
      // published checkpoints store a few tensors with a leading singleton or as (in,out)
      if (value.numel() == p.value().numel()) {
        value = value.reshape(p.value().sizes());
      } else {
        std::ostringstream msg;
        msg << "shape mismatch for " << prefix << p.key() << ": checkpoint " << value.sizes() << " vs model "
            << p.value().sizes();
        throw LoadError(msg.str());
      }
    }
    p.value().copy_(value);
  }
}

}  // namespace

void save_backbone(const std::filesystem::path& path, const Backbone& backbone) {
  TensorArchive archive;
  json roles = json::object();
  for (const auto& p : backbone.vision->named_parameters()) archive.tensors["vision." + p.key()] = p.value();
  for (const auto& [name, role] : backbone.vision->roles()) roles[name] = to_string(role);
  for (const auto& p : backbone.text->named_parameters()) archive.tensors["text." + p.key()] = p.value();
  archive.tensors["logit_scale"] = torch::tensor({std::log(backbone.logit_scale)}, torch::kFloat32);
  json meta = {{"format", "vlseg-backbone/1"},
               {"vision", backbone.vision->config().to_json()},
               {"text", backbone.text->config().to_json()},
               {"tokenizer", backbone.tokenizer_kind},
               {"logit_scale", backbone.logit_scale},
               {"roles", roles}};
  archive.metadata["vlseg"] = meta.dump();
  save_archive(path, archive);
}

Backbone load_backbone(const std::filesystem::path& path, const std::filesystem::path& weight_map) {
  auto archive = load_archive(path);
  auto meta_it = archive.metadata.find("vlseg");
  if (meta_it == archive.metadata.end())
    throw LoadError("backbone archive lacks the 'vlseg' metadata record: " + path.string());
  json meta;
  try {
    meta = json::parse(meta_it->second);
  } catch (const json::exception& e) {
    throw LoadError("backbone metadata is not JSON: " + std::string(e.what()));
  }

  auto tensors = archive.tensors;
  if (!weight_map.empty()) tensors = apply_weight_map(tensors, read_weight_map(weight_map));

  Backbone b;
  b.vision = VisionEncoder(VisionEncoderConfig::from_json(meta.at("vision")));
  b.text = TextEncoder(TextEncoderConfig::from_json(meta.at("text")));
  b.tokenizer_kind = meta.value("tokenizer", std::string("byte"));
  copy_into(*b.vision, "vision.", tensors);
  copy_into(*b.text, "text.", tensors);
  if (meta.contains("roles")) {
    for (const auto& [name, role] : meta.at("roles").items()) {
      auto declared = param_role_from_string(role.get<std::string>());
      auto it = b.vision->roles().find(name);
      if (it == b.vision->roles().end() || it->second != declared)
        throw ValidationError("role tag mismatch for vision parameter " + name);
    }
  }
  if (meta.contains("logit_scale")) {
    b.logit_scale = meta.at("logit_scale").get<double>();
  } else if (auto it = tensors.find("logit_scale"); it != tensors.end()) {
    b.logit_scale = std::exp(it->second.to(torch::kFloat64).item<double>());
  }
  return b;
}

std::string backbone_hash(const Backbone& backbone) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  auto mix_module = [&](const torch::nn::Module& m) {
    for (const auto& p : m.named_parameters()) {
      mix(p.key().data(), p.key().size());
      auto t = p.value().detach().to(torch::kFloat32).contiguous();
      mix(t.data_ptr(), t.numel() * t.element_size());
    }
  };
  mix_module(*backbone.vision);
  if (backbone.text) mix_module(*backbone.text);
  mix(&backbone.logit_scale, sizeof(double));
  std::ostringstream out;
  out << std::hex << h;
  return out.str();
}

}  // namespace vlseg
