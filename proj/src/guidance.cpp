#include "vlseg/guidance.hpp"

#include <zlib.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "vlseg/decoder.hpp"
#include "vlseg/error.hpp"
#include "vlseg/hash.hpp"
#include "vlseg/safetensors.hpp"

namespace vlseg {

using nlohmann::json;
namespace F = torch::nn::functional;

int64_t ClassDefinitionSet::num_concepts() const {
  int64_t m = 0;
  for (const auto& list : concepts) m += static_cast<int64_t>(list.size());
  return m;
}

std::vector<std::string> ClassDefinitionSet::flat_concepts() const {
  std::vector<std::string> out;
  for (const auto& list : concepts) out.insert(out.end(), list.begin(), list.end());
  return out;
}

std::vector<int64_t> ClassDefinitionSet::owners() const {
  std::vector<int64_t> out;
  for (std::size_t a = 0; a < concepts.size(); ++a) out.insert(out.end(), concepts[a].size(), static_cast<int64_t>(a));
  return out;
}

void ClassDefinitionSet::validate() const {
  if (classes.empty()) throw ConfigError("class definitions list no classes");
  if (concepts.size() != classes.size()) throw ConfigError("class definitions: one concept list per class required");
  std::set<std::string> seen;
  for (std::size_t a = 0; a < classes.size(); ++a) {
    if (!seen.insert(classes[a]).second) throw ConfigError("class definitions: duplicate class '" + classes[a] + "'");
    if (concepts[a].empty()) throw ConfigError("class definitions: empty concept list for class '" + classes[a] + "'");
  }
}

std::string ClassDefinitionSet::hash() const { return fnv1a_hex(to_json().dump()); }

json ClassDefinitionSet::to_json() const {
  json c = json::object();
  for (std::size_t a = 0; a < classes.size(); ++a) c[classes[a]] = concepts[a];
  return {{"classes", classes}, {"concepts", c}};
}

ClassDefinitionSet ClassDefinitionSet::from_names(const std::vector<std::string>& names) {
  ClassDefinitionSet defs;
  defs.classes = names;
  for (const auto& n : names) defs.concepts.push_back({n});
  defs.validate();
  return defs;
}

ClassDefinitionSet ClassDefinitionSet::from_json(const json& j, const std::string& source) {
  ClassDefinitionSet defs;
  try {
    if (j.is_array()) return from_names(j.get<std::vector<std::string>>());
    defs.classes = j.at("classes").get<std::vector<std::string>>();
    std::map<std::string, std::vector<std::string>> given;
    if (j.contains("concepts")) given = j.at("concepts").get<std::map<std::string, std::vector<std::string>>>();
    for (const auto& [name, list] : given) {
      if (std::find(defs.classes.begin(), defs.classes.end(), name) == defs.classes.end())
        throw ConfigError(source + ": concepts given for unknown class '" + name + "'");
    }
    for (const auto& name : defs.classes) {
      auto it = given.find(name);
      if (it == given.end()) {
        defs.concepts.push_back({name});
        continue;
      }
      std::vector<std::string> unique;
      for (const auto& c : it->second) {
        if (std::find(unique.begin(), unique.end(), c) != unique.end()) {
          log_warning(source + ": duplicate concept '" + c + "' in class '" + name + "' dropped");
          continue;
        }
        unique.push_back(c);
      }
      defs.concepts.push_back(std::move(unique));
    }
  } catch (const json::exception& e) {
    throw ConfigError(source + ": malformed class definitions: " + e.what());
  }
  defs.validate();
  return defs;
}

ClassDefinitionSet load_class_definitions(const std::filesystem::path& path,
                                          const std::vector<std::string>& expected_classes) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open class definitions: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto defs = ClassDefinitionSet::from_json(j, path.string());
  if (!expected_classes.empty() && defs.classes != expected_classes) {
    std::ostringstream msg;
    msg << path.string() << ": class order does not match the dataset (";
    for (std::size_t i = 0; i < expected_classes.size(); ++i) msg << (i ? ", " : "") << expected_classes[i];
    msg << ")";
    throw ConfigError(msg.str());
  }
  return defs;
}

torch::Tensor embed_concepts(const ClassDefinitionSet& defs, TextEmbedder& text, const std::string& prompt_template) {
  return text.embed(build_prompts(defs.flat_concepts(), prompt_template));
}

torch::Tensor concept_scores(const torch::Tensor& images, VisionEncoder& frozen_encoder,
                             const torch::Tensor& concept_embeds, double logit_scale) {
  torch::NoGradGuard no_grad;
  auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
  auto dense = frozen_encoder->forward_dense_value(batch);
  auto sim = similarity_map(dense, concept_embeds.to(dense.scalar_type()));
  return (logit_scale * sim).softmax(1);
}

torch::Tensor concept_scores(const torch::Tensor& images, const ClassDefinitionSet& defs, VisionEncoder& frozen_encoder,
                             TextEmbedder& text, const GuidanceConfig& cfg) {
  return concept_scores(images, frozen_encoder, embed_concepts(defs, text, cfg.prompt_template), cfg.logit_scale);
}

double DensePseudoLabel::confident_fraction(double zeta) const {
  if (!confidence.defined() || confidence.numel() == 0) return 0.0;
  return (confidence >= zeta).sum().item<double>() / static_cast<double>(confidence.numel());
}

DensePseudoLabel aggregate_concepts(const torch::Tensor& p_concept, const ClassDefinitionSet& defs) {
  if (p_concept.dim() != 4 || p_concept.size(1) != defs.num_concepts())
    throw ValidationError("aggregate_concepts: expected B×" + std::to_string(defs.num_concepts()) + "×h×w scores");
  std::vector<torch::Tensor> per_class;
  int64_t start = 0;
  for (const auto& list : defs.concepts) {
    const auto count = static_cast<int64_t>(list.size());
    per_class.push_back(std::get<0>(p_concept.narrow(1, start, count).max(1)));
    start += count;
  }
  DensePseudoLabel out;
  out.probs = torch::stack(per_class, 1);
  out.confidence = std::get<0>(out.probs.max(1));
  return out;
}

DensePseudoLabel pseudolabel_image(const torch::Tensor& image, const ClassDefinitionSet& defs,
                                   VisionEncoder& frozen_encoder, const torch::Tensor& concept_embeds,
                                   const GuidanceConfig& cfg) {
  torch::NoGradGuard no_grad;
  auto batch = image.dim() == 3 ? image.unsqueeze(0) : image;
  const int64_t height = batch.size(2), width = batch.size(3), patch = frozen_encoder->patch_size();
  auto fit = [patch](int64_t side) { return std::max<int64_t>(patch, (side + patch / 2) / patch * patch); };
  auto input = batch;
  if (height % patch != 0 || width % patch != 0) {
    input = F::interpolate(batch, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{fit(height), fit(width)})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
  }
  auto aggregated = aggregate_concepts(concept_scores(input, frozen_encoder, concept_embeds, cfg.logit_scale), defs);
  auto up = F::interpolate(aggregated.probs, F::InterpolateFuncOptions()
                                                 .size(std::vector<int64_t>{height, width})
                                                 .mode(torch::kBilinear)
                                                 .align_corners(false));
  DensePseudoLabel out;
  out.confidence = std::get<0>(up.max(1));
  out.probs = up / up.sum(1, true);
  return out;
}

DensePseudoLabel pseudolabel_image(const torch::Tensor& image, const ClassDefinitionSet& defs,
                                   VisionEncoder& frozen_encoder, TextEmbedder& text, const GuidanceConfig& cfg) {
  return pseudolabel_image(image, defs, frozen_encoder, embed_concepts(defs, text, cfg.prompt_template), cfg);
}

PseudoLabelCache::PseudoLabelCache(std::filesystem::path dir, std::string key)
    : dir_(std::move(dir)), key_(std::move(key)) {}

std::string PseudoLabelCache::make_key(const ClassDefinitionSet& defs, const std::string& backbone_hash) {
  return fnv1a_hex(defs.hash() + ":" + backbone_hash);
}

std::filesystem::path PseudoLabelCache::path_for(const std::string& id) const {
  std::string safe = id;
  for (auto& c : safe) {
    if (c == '/' || c == '\\' || c == ':') c = '_';
  }
  return dir_ / key_ / (safe + ".dcpl.z");
}

std::optional<DensePseudoLabel> PseudoLabelCache::load(const std::string& id) const {
  const auto path = path_for(id);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string packed = buffer.str();
  if (packed.size() < 8) throw LoadError("truncated guidance cache entry: " + path.string());
  uLongf raw_size = 0;
  for (int i = 0; i < 8; ++i) raw_size |= static_cast<uLongf>(static_cast<unsigned char>(packed[i])) << (8 * i);
  std::string raw(raw_size, '\0');
  uLongf got = raw_size;
  if (uncompress(reinterpret_cast<Bytef*>(raw.data()), &got, reinterpret_cast<const Bytef*>(packed.data() + 8),
                 packed.size() - 8) != Z_OK ||
      got != raw_size)
    throw LoadError("corrupt guidance cache entry: " + path.string());
  auto archive = decode_archive(raw, path.string());
  if (archive.metadata["id"] != id || archive.metadata["key"] != key_)
    throw LoadError("guidance cache entry does not belong to '" + id + "': " + path.string());
  return DensePseudoLabel{archive.tensors.at("probs"), archive.tensors.at("confidence")};
}

void PseudoLabelCache::store(const std::string& id, const DensePseudoLabel& label) const {
  TensorArchive archive;
  archive.tensors["probs"] = label.probs.to(torch::kFloat32);
  archive.tensors["confidence"] = label.confidence.to(torch::kFloat32);
  archive.metadata = {{"id", id}, {"key", key_}};
  const std::string raw = encode_archive(archive);
  uLongf bound = compressBound(raw.size());
  std::string packed(8 + bound, '\0');
  for (int i = 0; i < 8; ++i) packed[i] = static_cast<char>((static_cast<std::uint64_t>(raw.size()) >> (8 * i)) & 0xff);
  if (compress2(reinterpret_cast<Bytef*>(packed.data() + 8), &bound, reinterpret_cast<const Bytef*>(raw.data()),
                raw.size(), Z_BEST_SPEED) != Z_OK)
    throw Error("zlib compression failed for guidance cache entry '" + id + "'");
  packed.resize(8 + bound);
  const auto path = path_for(id);
  std::filesystem::create_directories(path.parent_path());
  atomic_write(path, packed);
}

}  // namespace vlseg
