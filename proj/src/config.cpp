#include "vlseg/config.hpp"

#include <fstream>
#include <set>

#include "vlseg/error.hpp"
#include "vlseg/hash.hpp"

namespace vlseg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + section);
  }
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

}  // namespace

json augmentation_to_json(const AugmentationRecipe& r) {
  return {{"jitter",
           {{"brightness", r.jitter.brightness},
            {"contrast", r.jitter.contrast},
            {"saturation", r.jitter.saturation},
            {"hue", r.jitter.hue},
            {"prob", r.jitter.prob}}},
          {"grayscale_prob", r.grayscale_prob},
          {"cutmix_prob", r.cutmix_prob},
          {"scale_range", {r.scale_range.first, r.scale_range.second}},
          {"hflip_prob", r.hflip_prob}};
}

AugmentationRecipe augmentation_from_json(const json& j) {
  AugmentationRecipe r;
  check_keys(j, {"jitter", "grayscale_prob", "cutmix_prob", "scale_range", "hflip_prob"}, "augment");
  if (j.contains("jitter")) {
    const auto& jj = j.at("jitter");
    check_keys(jj, {"brightness", "contrast", "saturation", "hue", "prob"}, "augment.jitter");
    r.jitter.brightness = jj.value("brightness", r.jitter.brightness);
    r.jitter.contrast = jj.value("contrast", r.jitter.contrast);
    r.jitter.saturation = jj.value("saturation", r.jitter.saturation);
    r.jitter.hue = jj.value("hue", r.jitter.hue);
    r.jitter.prob = jj.value("prob", r.jitter.prob);
  }
  r.grayscale_prob = j.value("grayscale_prob", r.grayscale_prob);
  r.cutmix_prob = j.value("cutmix_prob", r.cutmix_prob);
  if (j.contains("scale_range")) {
    auto range = j.at("scale_range").get<std::vector<double>>();
    if (range.size() != 2) throw ConfigError("augment.scale_range needs two numbers");
    r.scale_range = {range[0], range[1]};
  }
  r.hflip_prob = j.value("hflip_prob", r.hflip_prob);
  return r;
}

void TrainConfig::validate() const {
  if (batch_labeled <= 0 || batch_unlabeled <= 0) throw ConfigError("batch sizes must be positive");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (!(backbone_lr_multiplier >= 0.0)) throw ConfigError("backbone_lr_multiplier must be non-negative");
  if (!(poly_power > 0.0)) throw ConfigError("poly_power must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0,1)");
  if (crop_size <= 0) throw ConfigError("crop_size must be positive");
  if (!(feature_drop_rate >= 0.0 && feature_drop_rate < 1.0)) throw ConfigError("feature_drop_rate must lie in [0,1)");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (eval.window < 0 || eval.stride < 0 || eval.every_epochs <= 0)
    throw ConfigError("eval window/stride must be non-negative and every_epochs positive");
  if (backbone.kind != "tiny" && backbone.kind != "file")
    throw ConfigError("backbone.kind must be 'tiny' or 'file', got '" + backbone.kind + "'");
  if (backbone.kind == "file" && backbone.checkpoint.empty())
    throw ConfigError("backbone.checkpoint is required when backbone.kind is 'file'");
  if (text.source != "encoder" && text.source != "anchors")
    throw ConfigError("text.source must be 'encoder' or 'anchors', got '" + text.source + "'");
  if (data.root.empty()) throw ConfigError("data.root is required");
  loss.validate();
  decoder.validate();
  auto recipe = augment;
  recipe.crop_size = crop_size;
  recipe.validate();
}

json TrainConfig::to_json() const {
  auto loss_json = loss.to_json();
  loss_json.erase("total_steps");
  return {{"batch_labeled", batch_labeled},
          {"batch_unlabeled", batch_unlabeled},
          {"epochs", epochs},
          {"base_lr", base_lr},
          {"backbone_lr_multiplier", backbone_lr_multiplier},
          {"poly_power", poly_power},
          {"weight_decay", weight_decay},
          {"betas", {beta1, beta2}},
          {"crop_size", crop_size},
          {"feature_drop_rate", feature_drop_rate},
          {"fine_tune_mode", to_string(fine_tune_mode)},
          {"seed", seed},
          {"semi_supervised", semi_supervised},
          {"use_guidance", use_guidance},
          {"loss", loss_json},
          {"decoder", decoder.to_json()},
          {"augment", augmentation_to_json(augment)},
          {"data",
           {{"root", data.root.string()},
            {"val_list", data.val_list.string()},
            {"class_names", data.class_names.string()},
            {"class_definitions", data.class_definitions.string()}}},
          {"backbone",
           {{"kind", backbone.kind},
            {"checkpoint", backbone.checkpoint.string()},
            {"weight_map", backbone.weight_map.string()},
            {"seed", backbone.seed}}},
          {"text",
           {{"source", text.source}, {"prompt_template", text.prompt_template}, {"anchor_seed", text.anchor_seed}}},
          {"eval", {{"window", eval.window}, {"stride", eval.stride}, {"every_epochs", eval.every_epochs}}},
          {"output_dir", output_dir.string()},
          {"resume", resume.string()},
          {"max_steps", max_steps},
          {"guidance_cache", guidance_cache.string()}};
}

TrainConfig TrainConfig::from_json(const json& j, const fs::path& base_dir) {
  TrainConfig c;
  check_keys(j,
             {"batch_labeled", "batch_unlabeled", "epochs", "base_lr", "backbone_lr_multiplier", "poly_power",
              "weight_decay", "betas", "crop_size", "feature_drop_rate", "fine_tune_mode", "seed", "semi_supervised",
              "use_guidance", "loss", "decoder", "augment", "data", "backbone", "text", "eval", "output_dir", "resume",
              "max_steps", "guidance_cache"},
             "train config");
  try {
    c.batch_labeled = j.value("batch_labeled", c.batch_labeled);
    c.batch_unlabeled = j.value("batch_unlabeled", c.batch_unlabeled);
    c.epochs = j.value("epochs", c.epochs);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.backbone_lr_multiplier = j.value("backbone_lr_multiplier", c.backbone_lr_multiplier);
    c.poly_power = j.value("poly_power", c.poly_power);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("betas")) {
      auto betas = j.at("betas").get<std::vector<double>>();
      if (betas.size() != 2) throw ConfigError("betas needs two numbers");
      c.beta1 = betas[0];
      c.beta2 = betas[1];
    }
    c.crop_size = j.value("crop_size", c.crop_size);
    c.feature_drop_rate = j.value("feature_drop_rate", c.feature_drop_rate);
    if (j.contains("fine_tune_mode")) {
      try {
        c.fine_tune_mode = fine_tune_mode_from_string(j.at("fine_tune_mode").get<std::string>());
      } catch (const ValidationError& e) {
        throw ConfigError(e.what());
      }
    }
    c.seed = j.value("seed", c.seed);
    c.semi_supervised = j.value("semi_supervised", c.semi_supervised);
    c.use_guidance = j.value("use_guidance", c.use_guidance);
    if (j.contains("loss")) {
      check_keys(j.at("loss"), {"tau", "zeta", "lambda_dc0", "total_steps"}, "loss");
      c.loss = LossConfig::from_json(j.at("loss"));
    }
    if (j.contains("decoder")) {
      check_keys(j.at("decoder"),
                 {"d", "aspp_dilations", "spatial_kernel", "semantic_blocks", "semantic_heads", "pool", "skip_taps",
                  "skip_channels", "fuse_channels", "norm_groups", "decoupled", "use_spatial", "use_semantic",
                  "use_upsample"},
                 "decoder");
      c.decoder = DecoderConfig::from_json(j.at("decoder"));
    }
    if (j.contains("augment")) c.augment = augmentation_from_json(j.at("augment"));
    if (j.contains("data")) {
      const auto& d = j.at("data");
      check_keys(d, {"root", "val_list", "class_names", "class_definitions"}, "data");
      c.data.root = resolve(base_dir, d.value("root", std::string()));
      c.data.val_list = resolve(base_dir, d.value("val_list", std::string()));
      c.data.class_names = resolve(base_dir, d.value("class_names", std::string()));
      c.data.class_definitions = resolve(base_dir, d.value("class_definitions", std::string()));
    }
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      check_keys(b, {"kind", "checkpoint", "weight_map", "seed"}, "backbone");
      c.backbone.kind = b.value("kind", c.backbone.kind);
      c.backbone.checkpoint = resolve(base_dir, b.value("checkpoint", std::string()));
      c.backbone.weight_map = resolve(base_dir, b.value("weight_map", std::string()));
      c.backbone.seed = b.value("seed", c.backbone.seed);
    }
    if (j.contains("text")) {
      const auto& t = j.at("text");
      check_keys(t, {"source", "prompt_template", "anchor_seed"}, "text");
      c.text.source = t.value("source", c.text.source);
      c.text.prompt_template = t.value("prompt_template", c.text.prompt_template);
      c.text.anchor_seed = t.value("anchor_seed", c.text.anchor_seed);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      check_keys(e, {"window", "stride", "every_epochs"}, "eval");
      c.eval.window = e.value("window", c.eval.window);
      c.eval.stride = e.value("stride", c.eval.stride);
      c.eval.every_epochs = e.value("every_epochs", c.eval.every_epochs);
    }
    c.output_dir = resolve(base_dir, j.value("output_dir", c.output_dir.string()));
    c.resume = resolve(base_dir, j.value("resume", std::string()));
    c.max_steps = j.value("max_steps", c.max_steps);
    c.guidance_cache = resolve(base_dir, j.value("guidance_cache", std::string()));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.augment.crop_size = c.crop_size;
  c.validate();
  return c;
}

std::string TrainConfig::hash() const {
  auto j = to_json();
  for (const char* key : {"output_dir", "resume", "max_steps", "guidance_cache", "eval"}) j.erase(key);
  return fnv1a_hex(j.dump());
}

fs::path TrainConfig::val_list() const { return data.val_list.empty() ? data.root / "val.txt" : data.val_list; }

fs::path TrainConfig::class_names_path() const {
  return data.class_names.empty() ? data.root / "classes.json" : data.class_names;
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return TrainConfig::from_json(j, path.parent_path());
}

std::vector<std::string> read_class_names(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open class names: " + path.string());
  try {
    auto j = json::parse(in);
    if (j.is_array()) return j.get<std::vector<std::string>>();
    return j.at("classes").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace vlseg
