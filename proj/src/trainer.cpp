#include "vlseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "vlseg/error.hpp"
#include "vlseg/hash.hpp"
#include "vlseg/safetensors.hpp"

namespace vlseg {

using nlohmann::json;
namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace {

// Random streams; each is combined with the run seed and an index.
constexpr std::uint64_t kStepStream = 1;
constexpr std::uint64_t kLabeledOrderStream = 2;
constexpr std::uint64_t kUnlabeledOrderStream = 3;
constexpr std::uint64_t kLabeledAugStream = 4;
constexpr std::uint64_t kUnlabeledAugStream = 5;

void set_learning_rates(torch::optim::AdamW& optimizer, double lr, double encoder_multiplier) {
  auto& groups = optimizer.param_groups();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& opts = static_cast<torch::optim::AdamWOptions&>(groups[g].options());
    opts.lr(g == 0 ? lr : lr * encoder_multiplier);
  }
}

double masked_share(const torch::Tensor& selected, const torch::Tensor& valid) {
  const double denom = valid.sum().item<double>();
  if (denom == 0.0) return 0.0;
  return selected.logical_and(valid).sum().item<double>() / denom;
}

std::string tensor_bytes_hash(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  return fnv1a_hex(std::string_view(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size()));
}

fs::path default_vocab_path() { return fs::path(VLSEG_DATA_DIR) / "clip" / "bpe_simple_vocab_16e6.txt.gz"; }

}  // namespace

double poly_lr(int64_t step, int64_t total, double base, double power) {
  if (total <= 0) return base;
  if (step < 0 || step > total) {
    log_warning("poly_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "], clamped");
    step = std::clamp<int64_t>(step, 0, total);
  }
  if (step == total) return 0.0;
  return base * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

json LossRecord::to_json() const {
  return {{"step", step},
          {"L_s", L_s},
          {"L_u", L_u},
          {"L_dc_contrib", L_dc_contrib},
          {"lambda_dc", lambda_dc},
          {"masked_frac_tau", masked_frac_tau},
          {"masked_frac_zeta", masked_frac_zeta},
          {"lr", lr},
          {"total", total}};
}

LossRecord LossRecord::from_json(const json& j) {
  LossRecord r;
  r.step = j.at("step").get<int64_t>();
  r.L_s = j.at("L_s").get<double>();
  r.L_u = j.at("L_u").get<double>();
  r.L_dc_contrib = j.at("L_dc_contrib").get<double>();
  r.lambda_dc = j.at("lambda_dc").get<double>();
  r.masked_frac_tau = j.at("masked_frac_tau").get<double>();
  r.masked_frac_zeta = j.at("masked_frac_zeta").get<double>();
  r.lr = j.value("lr", 0.0);
  r.total = j.value("total", 0.0);
  return r;
}

TrainState make_train_state(const TrainConfig& config, const VisionEncoder& encoder, torch::Tensor text_embeds,
                            int64_t total_steps) {
  TrainState state;
  state.config = config;
  state.total_steps = total_steps;
  state.text_embeds = text_embeds.detach();
  torch::manual_seed(config.seed);
  state.model = SegmentationModel(clone_encoder(encoder), config.decoder, text_embeds.size(0));
  state.model->train();
  state.partition = partition_parameters(state.model->encoder, config.fine_tune_mode);
  auto encoder_params = apply_partition(state.model->encoder, state.partition);

  auto defaults = torch::optim::AdamWOptions(config.base_lr)
                      .betas({config.beta1, config.beta2})
                      .weight_decay(config.weight_decay);
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(state.model->decoder->parameters(), std::make_unique<torch::optim::AdamWOptions>(defaults));
  if (!encoder_params.empty()) {
    auto encoder_opts = defaults;
    encoder_opts.lr(config.base_lr * config.backbone_lr_multiplier);
    groups.emplace_back(encoder_params, std::make_unique<torch::optim::AdamWOptions>(encoder_opts));
  }
  state.optimizer = std::make_unique<torch::optim::AdamW>(std::move(groups), defaults);
  return state;
}

LossRecord train_step(const LabeledBatch& labeled, const UnlabeledBatch& unlabeled, TrainState& state, Rng& rng) {
  const auto& cfg = state.config;
  auto& model = state.model;
  model->train();

  LossRecord rec;
  rec.step = state.step;
  rec.lr = poly_lr(state.step, state.total_steps, cfg.base_lr, cfg.poly_power);
  set_learning_rates(*state.optimizer, rec.lr, cfg.backbone_lr_multiplier);
  LossConfig loss_cfg = cfg.loss;
  loss_cfg.total_steps = std::max<int64_t>(1, state.total_steps);
  rec.lambda_dc = cfg.use_guidance ? lambda_schedule(state.step, loss_cfg) : 0.0;

  state.optimizer->zero_grad();
  const auto& text = state.text_embeds;
  auto sup = supervised_loss(model->forward(labeled.images, text), labeled.masks);
  rec.L_s = sup.value.item<double>();

  torch::Tensor unlabeled_total = torch::zeros({}, sup.value.options());
  if (cfg.semi_supervised) {
    if (!unlabeled.images.defined()) throw ConfigError("train_step: semi-supervised step without an unlabeled batch");
    auto weak = model->forward_with_perturbation(unlabeled.images, text, cfg.feature_drop_rate, rng);
    torch::Tensor p_u;
    {
      torch::NoGradGuard no_grad;
      p_u = weak.logits.detach().softmax(1);
    }
    auto recipe = cfg.augment;
    recipe.crop_size = unlabeled.images.size(2);
    auto strong = strong_augment_pair(unlabeled.images, recipe, rng);
    auto strong_logits = model->forward(torch::cat({strong.first.images, strong.second.images}), text).chunk(2, 0);

    const auto& valid = unlabeled.valid;
    const bool guided = cfg.use_guidance && unlabeled.guide_probs.defined();
    auto branch_guide = [&](const CutMixRecord* mix) -> std::optional<GuidanceTarget> {
      if (!guided) return std::nullopt;
      if (mix == nullptr) return GuidanceTarget{unlabeled.guide_probs, unlabeled.guide_conf};
      return GuidanceTarget{mix->apply(unlabeled.guide_probs), mix->apply(unlabeled.guide_conf)};
    };
    const auto& mix1 = strong.first.cutmix;
    const auto& mix2 = strong.second.cutmix;
    PredictionSet preds;
    preds.feature = {weak.logits_fp, true, p_u, valid, branch_guide(nullptr)};
    preds.strong1 = {strong_logits[0], true, mix1.apply(p_u), mix1.apply(valid), branch_guide(&mix1)};
    preds.strong2 = {strong_logits[1], true, mix2.apply(p_u), mix2.apply(valid), branch_guide(&mix2)};
    auto lu = unlabeled_loss(preds, loss_cfg, rec.lambda_dc);
    unlabeled_total = lu.total;
    rec.L_u = lu.total.item<double>();
    rec.L_dc_contrib = rec.lambda_dc * lu.guidance.item<double>();
    rec.masked_frac_tau = masked_share(std::get<0>(p_u.max(1)) >= loss_cfg.tau, valid);
    if (guided) rec.masked_frac_zeta = masked_share(unlabeled.guide_conf >= loss_cfg.zeta, valid);
  }

  auto total = total_loss(sup.value, unlabeled_total);
  rec.total = total.item<double>();
  total.backward();
  state.optimizer->step();
  ++state.step;
  return rec;
}

torch::Tensor sliding_window_probs(const torch::Tensor& image, int64_t window, int64_t stride, const LogitsFn& logits,
                                   int64_t patch_size) {
  if (image.dim() != 3) throw ValidationError("sliding_window_infer expects a 3×H×W image");
  if (window <= 0 || stride <= 0) throw ValidationError("sliding_window_infer: window and stride must be positive");
  const int64_t height = image.size(1), width = image.size(2);
  auto starts = [&](int64_t extent) {
    std::vector<int64_t> out;
    const int64_t count = std::max<int64_t>(extent - window + stride - 1, 0) / stride + 1;
    for (int64_t i = 0; i < count; ++i) out.push_back(std::min(i * stride, std::max<int64_t>(extent - window, 0)));
    return out;
  };
  torch::Tensor sum, count = torch::zeros({1, height, width}, image.options());
  for (int64_t top : starts(height)) {
    for (int64_t left : starts(width)) {
      const int64_t h = std::min(window, height - top), w = std::min(window, width - left);
      auto crop = image.narrow(1, top, h).narrow(2, left, w).unsqueeze(0);
      const int64_t pad_h = (patch_size - h % patch_size) % patch_size;
      const int64_t pad_w = (patch_size - w % patch_size) % patch_size;
      if (pad_h > 0 || pad_w > 0) {
        auto opts = F::PadFuncOptions({0, pad_w, 0, pad_h});
        // reflection needs the pad to be shorter than the side
        if (pad_h < h && pad_w < w) {
          opts.mode(torch::kReflect);
        } else {
          opts.mode(torch::kReplicate);
        }
        crop = F::pad(crop, opts);
      }
      auto probs = logits(crop).softmax(1)[0].narrow(1, 0, h).narrow(2, 0, w);
      if (!sum.defined()) sum = torch::zeros({probs.size(0), height, width}, probs.options());
      sum.narrow(1, top, h).narrow(2, left, w).add_(probs);
      count.narrow(1, top, h).narrow(2, left, w).add_(1.0);
    }
  }
  return sum / count;
}

torch::Tensor sliding_window_infer(const torch::Tensor& image, int64_t window, int64_t stride, SegmentationModel& model,
                                   const torch::Tensor& text_embeds) {
  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  auto out = sliding_window_probs(
      image, window, stride, [&](const torch::Tensor& x) { return model->forward(x, text_embeds); },
      model->encoder->patch_size());
  model->train(was_training);
  return out;
}

ConfusionMatrix evaluate(SegmentationModel& model, const torch::Tensor& text_embeds,
                         const std::vector<SegSample>& samples, int64_t window, int64_t stride) {
  ConfusionMatrix cm(text_embeds.size(0));
  for (const auto& sample : samples) {
    if (!sample.mask) throw ValidationError("evaluate: sample '" + sample.id + "' has no mask");
    auto probs = sliding_window_infer(sample.image, window, stride, model, text_embeds);
    cm.accumulate(probs.argmax(0), *sample.mask);
  }
  return cm;
}

BatchSource::BatchSource(const TrainConfig& config, std::vector<SegSample> labeled, std::vector<SegSample> unlabeled)
    : config_(config), labeled_(std::move(labeled)), unlabeled_(std::move(unlabeled)) {
  if (labeled_.empty()) throw ConfigError("the labeled split is empty");
  config_.augment.crop_size = config_.crop_size;
}

int64_t BatchSource::steps_per_epoch() const {
  if (!unlabeled_.empty())
    return std::max<int64_t>(1, static_cast<int64_t>(unlabeled_.size()) / config_.batch_unlabeled);
  return std::max<int64_t>(1, static_cast<int64_t>(labeled_.size()) / config_.batch_labeled);
}

std::vector<int64_t> BatchSource::permutation(int64_t n, std::uint64_t stream, int64_t round) const {
  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = i;
  auto rng = Rng::derive(config_.seed, stream, static_cast<std::uint64_t>(round));
  for (int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
  return order;
}

LabeledBatch BatchSource::labeled_batch(int64_t step) const {
  const auto n = static_cast<int64_t>(labeled_.size());
  std::vector<SegSample> views;
  std::map<int64_t, std::vector<int64_t>> orders;
  for (int64_t j = 0; j < config_.batch_labeled; ++j) {
    const int64_t g = step * config_.batch_labeled + j;
    auto& order = orders[g / n];
    if (order.empty()) order = permutation(n, kLabeledOrderStream, g / n);
    auto rng = Rng::derive(config_.seed, kLabeledAugStream, static_cast<std::uint64_t>(g));
    views.push_back(weak_augment(labeled_[order[g % n]], config_.augment, rng));
  }
  return {stack_images(views), stack_masks(views)};
}

UnlabeledBatch BatchSource::unlabeled_batch(int64_t step, const GuideLookup& guide) const {
  if (unlabeled_.empty()) throw ConfigError("the unlabeled split is empty");
  const auto n = static_cast<int64_t>(unlabeled_.size());
  const int64_t spe = steps_per_epoch();
  const auto order = permutation(n, kUnlabeledOrderStream, step / spe);
  std::vector<SegSample> views;
  std::vector<torch::Tensor> valid, probs, conf;
  for (int64_t j = 0; j < config_.batch_unlabeled; ++j) {
    const auto& sample = unlabeled_[order[((step % spe) * config_.batch_unlabeled + j) % n]];
    auto rng = Rng::derive(config_.seed, kUnlabeledAugStream,
                           static_cast<std::uint64_t>(step * config_.batch_unlabeled + j));
    auto view = weak_augment_view(sample, config_.augment, rng);
    std::optional<DensePseudoLabel> label = guide ? guide(sample.id) : std::nullopt;
    if (label) {
      auto p = label->probs.dim() == 4 ? label->probs[0] : label->probs;
      auto c = label->confidence.dim() == 3 ? label->confidence[0] : label->confidence;
      probs.push_back(apply_geometry(p, view.geometry, Interp::kBilinear, 0.0));
      conf.push_back(apply_geometry(c.unsqueeze(0), view.geometry, Interp::kBilinear, 0.0).squeeze(0));
    }
    valid.push_back(view.valid);
    views.push_back(std::move(view.sample));
  }
  if (!probs.empty() && probs.size() != views.size())
    throw LoadError("guidance labels are missing for part of the unlabeled batch");
  UnlabeledBatch batch;
  batch.images = stack_images(views);
  batch.valid = torch::stack(valid);
  if (!probs.empty()) {
    batch.guide_probs = torch::stack(probs);
    batch.guide_conf = torch::stack(conf);
  }
  return batch;
}

void save_checkpoint(const fs::path& path, const TrainState& state, const CheckpointInfo& info) {
  TensorArchive archive;
  for (const auto& p : state.model->named_parameters()) archive.tensors["model." + p.key()] = p.value();
  for (const auto& b : state.model->named_buffers()) archive.tensors["buffer." + b.key()] = b.value();
  archive.tensors["text_embeds"] = state.text_embeds;
  if (state.optimizer) {
    torch::serialize::OutputArchive out;
    state.optimizer->save(out);
    std::ostringstream bytes;
    out.save_to(bytes);
    const std::string s = bytes.str();
    archive.tensors["optimizer_state"] =
        torch::from_blob(const_cast<char*>(s.data()), {static_cast<int64_t>(s.size())}, torch::kUInt8).clone();
  }
  archive.metadata = {{"format", kCheckpointFormat},
                      {"step", std::to_string(state.step)},
                      {"epoch", std::to_string(info.epoch)},
                      {"total_steps", std::to_string(state.total_steps)},
                      {"config", state.config.to_json().dump()},
                      {"config_hash", state.config.hash()},
                      {"class_names", json(info.class_names).dump()},
                      {"vision", state.model->encoder->config().to_json().dump()},
                      {"rng", info.rng_state}};
  if (info.best_miou) archive.metadata["best_miou"] = json(*info.best_miou).dump();
  save_archive(path, archive);
}

namespace {

CheckpointInfo read_info(const TensorArchive& archive, const fs::path& path) {
  auto meta = archive.metadata;
  if (meta["format"] != kCheckpointFormat)
    throw LoadError(path.string() + " is not a training checkpoint (format '" + meta["format"] + "')");
  CheckpointInfo info;
  try {
    info.step = std::stoll(meta.at("step"));
    info.epoch = std::stoll(meta.at("epoch"));
    info.config_hash = meta.at("config_hash");
    info.config = json::parse(meta.at("config"));
    info.class_names = json::parse(meta.at("class_names")).get<std::vector<std::string>>();
    if (meta.count("best_miou")) info.best_miou = json::parse(meta.at("best_miou")).get<double>();
    info.rng_state = meta["rng"];
  } catch (const std::exception& e) {
    throw LoadError(path.string() + ": malformed checkpoint metadata: " + e.what());
  }
  return info;
}

void copy_model_tensors(const TensorArchive& archive, SegmentationModel& model, const fs::path& path) {
  torch::NoGradGuard no_grad;
  for (auto& p : model->named_parameters()) {
    auto it = archive.tensors.find("model." + p.key());
    if (it == archive.tensors.end()) throw LoadError(path.string() + ": missing parameter " + p.key());
    if (it->second.sizes() != p.value().sizes()) throw LoadError(path.string() + ": shape mismatch for " + p.key());
    p.value().copy_(it->second);
  }
  for (auto& b : model->named_buffers()) {
    auto it = archive.tensors.find("buffer." + b.key());
    if (it != archive.tensors.end()) b.value().copy_(it->second);
  }
}

}  // namespace

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  auto archive = load_archive(path);
  LoadedCheckpoint out;
  out.info = read_info(archive, path);
  out.config = TrainConfig::from_json(out.info.config);
  VisionEncoderConfig vision;
  try {
    vision = VisionEncoderConfig::from_json(json::parse(archive.metadata.at("vision")));
  } catch (const std::exception& e) {
    throw LoadError(path.string() + ": missing encoder description: " + e.what());
  }
  if (!archive.tensors.count("text_embeds")) throw LoadError(path.string() + ": missing text embeddings");
  out.text_embeds = archive.tensors.at("text_embeds");
  out.model = SegmentationModel(VisionEncoder(vision), out.config.decoder, out.text_embeds.size(0));
  copy_model_tensors(archive, out.model, path);
  out.model->eval();
  return out;
}

CheckpointInfo restore_checkpoint(const fs::path& path, TrainState& state) {
  auto archive = load_archive(path);
  auto info = read_info(archive, path);
  if (info.config_hash != state.config.hash())
    throw ConfigError("checkpoint " + path.string() + " was written by a different configuration (hash " +
                      info.config_hash + ", current " + state.config.hash() + ")");
  copy_model_tensors(archive, state.model, path);
  if (state.optimizer) {
    auto it = archive.tensors.find("optimizer_state");
    if (it == archive.tensors.end()) throw LoadError(path.string() + ": missing optimizer state");
    auto bytes = it->second.contiguous();
    std::istringstream in(std::string(static_cast<const char*>(bytes.data_ptr()), bytes.numel()));
    torch::serialize::InputArchive ar;
    ar.load_from(in);
    state.optimizer->load(ar);
  }
  state.step = info.step;
  return info;
}

json MetricsRecord::to_json() const {
  auto j = report.to_json(class_names);
  j["schema"] = kMetricsSchema;
  j["epoch"] = epoch;
  j["step"] = step;
  j["split"] = split;
  return j;
}

ModelInputs prepare_model_inputs(const TrainConfig& config) {
  ModelInputs in;
  in.backbone = config.backbone.kind == "tiny" ? make_tiny_backbone(config.backbone.seed)
                                               : load_backbone(config.backbone.checkpoint, config.backbone.weight_map);
  in.class_names = read_class_names(config.class_names_path());
  in.defs = config.data.class_definitions.empty()
                ? ClassDefinitionSet::from_names(in.class_names)
                : load_class_definitions(config.data.class_definitions, in.class_names);
  const auto class_prompts = build_prompts(in.class_names, config.text.prompt_template);
  const auto concept_prompts = build_prompts(in.defs.flat_concepts(), config.text.prompt_template);
  std::unique_ptr<TextEmbedder> embedder;
  if (config.text.source == "anchors") {
    auto all = class_prompts;
    all.insert(all.end(), concept_prompts.begin(), concept_prompts.end());
    embedder = std::make_unique<AnchorTextEmbedder>(all, in.backbone.vision->embed_dim(), config.text.anchor_seed);
  } else {
    if (!in.backbone.text) throw ConfigError("text.source 'encoder' needs a backbone with a text tower");
    std::shared_ptr<Tokenizer> tokenizer = make_tokenizer(
        in.backbone.tokenizer_kind, in.backbone.tokenizer_kind == "clip-bpe" ? default_vocab_path() : fs::path());
    embedder = std::make_unique<TransformerTextEmbedder>(in.backbone.text, tokenizer);
  }
  in.class_embeds = embedder->embed(class_prompts).detach();
  in.concept_embeds = embedder->embed(concept_prompts).detach();
  return in;
}

std::map<std::string, DensePseudoLabel> precompute_guidance(const TrainConfig& config, const ModelInputs& inputs,
                                                            const std::vector<SegSample>& samples) {
  auto frozen = clone_encoder(inputs.backbone.vision);
  frozen->eval();
  for (auto& p : frozen->parameters()) p.set_requires_grad(false);
  GuidanceConfig gcfg;
  gcfg.prompt_template = config.text.prompt_template;
  gcfg.logit_scale = inputs.backbone.logit_scale;
  gcfg.zeta = config.loss.zeta;
  const auto cache_dir = config.guidance_cache.empty() ? config.output_dir / "guidance_cache" : config.guidance_cache;
  PseudoLabelCache cache(cache_dir, PseudoLabelCache::make_key(inputs.defs, backbone_hash(inputs.backbone) + ":" +
                                                                           tensor_bytes_hash(inputs.concept_embeds)));
  std::map<std::string, DensePseudoLabel> labels;
  for (const auto& sample : samples) {
    auto label = cache.load(sample.id);
    if (!label) {
      label = pseudolabel_image(sample.image, inputs.defs, frozen, inputs.concept_embeds, gcfg);
      cache.store(sample.id, *label);
    }
    labels.emplace(sample.id, std::move(*label));
  }
  return labels;
}

namespace {

std::vector<SegSample> load_val(const TrainConfig& config, int64_t num_classes) {
  std::vector<SegSample> out;
  const auto list = config.val_list();
  if (!fs::exists(list)) return out;
  for (const auto& id : read_id_list(list)) {
    out.push_back(load_sample(config.data.root, id, true));
    validate_sample(out.back(), num_classes);
  }
  return out;
}

class JsonLines {
 public:
  JsonLines(const fs::path& path, bool append)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw LoadError("cannot open " + path.string() + " for writing");
  }
  void write(const json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace

FitResult fit(const TrainConfig& config) {
  config.validate();
  fs::create_directories(config.output_dir);
  {
    std::ofstream out(config.output_dir / "config.json");
    out << config.to_json().dump(2) << '\n';
  }
  auto inputs = prepare_model_inputs(config);
  const auto num_classes = static_cast<int64_t>(inputs.class_names.size());

  auto split = load_split(read_split(config.data.root));
  for (const auto& s : split.labeled) validate_sample(s, num_classes);
  const auto val = load_val(config, num_classes);
  BatchSource source(config, std::move(split.labeled), std::move(split.unlabeled));
  const bool semi = config.semi_supervised && !source.unlabeled().empty();
  if (config.semi_supervised && !semi) log_warning("no unlabeled images; training on the labeled loss only");
  auto run_config = config;
  run_config.semi_supervised = semi;

  const int64_t spe = source.steps_per_epoch();
  const int64_t total = config.epochs * spe;
  TrainState state = make_train_state(run_config, inputs.backbone.vision, inputs.class_embeds, total);
  // the hash check on resume compares against the config as given
  state.config = config;
  state.config.semi_supervised = semi;

  FitResult result;
  result.last_checkpoint = config.output_dir / "checkpoint_last.safetensors";
  CheckpointInfo info;
  info.class_names = inputs.class_names;
  const bool resuming = !config.resume.empty();
  if (resuming) {
    auto restored = restore_checkpoint(config.resume, state);
    info.best_miou = restored.best_miou;
    log_info("resumed from " + config.resume.string() + " at step " + std::to_string(state.step));
  }

  std::map<std::string, DensePseudoLabel> guide_labels;
  if (semi && config.use_guidance) guide_labels = precompute_guidance(config, inputs, source.unlabeled());
  BatchSource::GuideLookup lookup;
  if (!guide_labels.empty()) {
    lookup = [&guide_labels](const std::string& id) -> std::optional<DensePseudoLabel> {
      auto it = guide_labels.find(id);
      if (it == guide_labels.end()) return std::nullopt;
      return it->second;
    };
  }

  JsonLines loss_log(config.output_dir / "losses.jsonl", resuming);
  JsonLines metrics_log(config.output_dir / "metrics.jsonl", resuming);
  auto save_last = [&](int64_t epoch) {
    info.step = state.step;
    info.epoch = epoch;
    info.rng_state = Rng::derive(config.seed, kStepStream, static_cast<std::uint64_t>(state.step)).serialize();
    save_checkpoint(result.last_checkpoint, state, info);
  };
  auto run_eval = [&](int64_t epoch) {
    MetricsRecord rec;
    rec.epoch = epoch;
    rec.step = state.step;
    rec.split = "val";
    rec.class_names = inputs.class_names;
    rec.report = iou_report(evaluate(state.model, state.text_embeds, val, config.eval_window(), config.eval_stride()));
    metrics_log.write(rec.to_json());
    result.metrics.push_back(rec);
    result.final_report = rec.report;
    return rec.report.miou;
  };

  const int64_t stop = config.max_steps > 0 ? std::min(total, config.max_steps) : total;
  bool evaluated_at_exit = false;
  while (state.step < stop) {
    const int64_t step = state.step;
    auto rng = Rng::derive(config.seed, kStepStream, static_cast<std::uint64_t>(step));
    auto labeled = source.labeled_batch(step);
    UnlabeledBatch unlabeled;
    if (semi) unlabeled = source.unlabeled_batch(step, lookup);
    LossRecord rec;
    try {
      rec = train_step(labeled, unlabeled, state, rng);
    } catch (const NumericError& e) {
      const auto last = fs::exists(result.last_checkpoint) ? result.last_checkpoint.string() : std::string("none");
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(step) +
                         "; last good checkpoint: " + last);
    }
    loss_log.write(rec.to_json());
    result.losses.push_back(rec);
    evaluated_at_exit = false;
    if (state.step % spe == 0) {
      const int64_t epoch = state.step / spe;
      if (!val.empty() && epoch % config.eval.every_epochs == 0) {
        const double miou = run_eval(epoch);
        evaluated_at_exit = true;
        if (!info.best_miou || miou > *info.best_miou) {
          info.best_miou = miou;
          result.best_checkpoint = config.output_dir / "checkpoint_best.safetensors";
          info.step = state.step;
          info.epoch = epoch;
          save_checkpoint(result.best_checkpoint, state, info);
        }
      }
      save_last(epoch);
    }
  }
  if (state.step == total && total > 0 && !val.empty() && !evaluated_at_exit) run_eval(total / spe);
  if (!fs::exists(result.last_checkpoint) || state.step % spe != 0 || total == 0) save_last(state.step / spe);
  if (result.best_checkpoint.empty() && fs::exists(config.output_dir / "checkpoint_best.safetensors"))
    result.best_checkpoint = config.output_dir / "checkpoint_best.safetensors";
  result.steps = state.step;
  return result;
}

}  // namespace vlseg
