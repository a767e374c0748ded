#include <doctest.h>

#include <fstream>

#include "support.hpp"
#include "vlseg/error.hpp"
#include "vlseg/guidance.hpp"
#include "vlseg/rng.hpp"

using namespace vlseg;
using namespace vlseg::testing;
using nlohmann::json;

namespace {

// 1902 of 4096 pixels for the seed-0 tiny backbone and seed-123 two-class image.
constexpr double kPinnedConfidentFraction = 1902.0 / 4096.0;

std::filesystem::path classdefs(const std::string& name) {
  return std::filesystem::path(VLSEG_DATA_DIR) / "classdefs" / name;
}

ClassDefinitionSet two_class_defs() {
  ClassDefinitionSet defs;
  defs.classes = {"chair", "sofa"};
  defs.concepts = {{"chair", "armchair"}, {"sofa"}};
  return defs;
}

// Brute force of the max rule: for each class, the largest score among its concepts.
torch::Tensor max_rule_oracle(const torch::Tensor& p, const ClassDefinitionSet& defs) {
  auto out = torch::zeros({p.size(0), defs.num_classes(), p.size(2), p.size(3)}, p.options());
  const auto owners = defs.owners();
  for (int64_t b = 0; b < p.size(0); ++b)
    for (int64_t i = 0; i < p.size(2); ++i)
      for (int64_t j = 0; j < p.size(3); ++j)
        for (int64_t a = 0; a < defs.num_classes(); ++a) {
          double best = -1.0;
          for (int64_t m = 0; m < static_cast<int64_t>(owners.size()); ++m)
            if (owners[m] == a) best = std::max(best, p[b][m][i][j].item<double>());
          out[b][a][i][j] = best;
        }
  return out;
}

struct GuidanceFixture {
  Backbone backbone = make_tiny_backbone(0);
  ClassDefinitionSet defs = ClassDefinitionSet::from_names({"background", "disc"});
  std::unique_ptr<AnchorTextEmbedder> text;
  torch::Tensor image;
  GuidanceFixture() {
    text = std::make_unique<AnchorTextEmbedder>(build_prompts(defs.flat_concepts(), kDefaultPromptTemplate), 32, 0);
    SyntheticSpec spec;
    spec.shape_kinds = 1;
    spec.image_size = 64;
    Rng rng(123);
    image = make_synthetic_sample(spec, "two-class", rng).image;
  }
};

}  // namespace

TEST_SUITE("guidance") {
  TEST_CASE("bundled VOC definitions reproduce the concept table") {
    auto defs = load_class_definitions(classdefs("voc_concepts.json"));
    REQUIRE(defs.num_classes() == 21);
    auto chair = std::find(defs.classes.begin(), defs.classes.end(), "chair") - defs.classes.begin();
    CHECK(defs.concepts[chair] == std::vector<std::string>{"chair", "armchair", "deckchair"});
    const auto& bg = defs.concepts[0];
    CHECK(std::find(bg.begin(), bg.end(), "stool") != bg.end());
    CHECK(std::find(bg.begin(), bg.end(), "bench") != bg.end());
  }

  TEST_CASE("every bundled definition file loads") {
    for (const auto* name : {"voc_concepts.json", "voc_guidelines.json", "voc_oxford.json", "voc_gpt.json",
                             "voc_names.json", "cityscapes_concepts.json"}) {
      CAPTURE(name);
      auto defs = load_class_definitions(classdefs(name));
      CHECK(defs.num_classes() > 0);
      for (const auto& list : defs.concepts) CHECK_FALSE(list.empty());
    }
    auto voc = load_class_definitions(classdefs("voc_names.json"));
    CHECK_NOTHROW(load_class_definitions(classdefs("voc_concepts.json"), voc.classes));
  }

  TEST_CASE("a names-only file gives each class its own name as concept") {
    auto defs = ClassDefinitionSet::from_json(json::array({"road", "car"}));
    CHECK(defs.concepts == std::vector<std::vector<std::string>>{{"road"}, {"car"}});
    auto partial = ClassDefinitionSet::from_json({{"classes", {"road", "car"}}, {"concepts", {{"car", {"car", "van"}}}}});
    CHECK(partial.concepts[0] == std::vector<std::string>{"road"});
    CHECK(partial.concepts[1] == std::vector<std::string>{"car", "van"});
  }

  TEST_CASE("definition errors: unknown class, empty list, wrong order") {
    CHECK_THROWS_AS(ClassDefinitionSet::from_json({{"classes", {"a"}}, {"concepts", {{"b", {"x"}}}}}), ConfigError);
    CHECK_THROWS_AS(ClassDefinitionSet::from_json({{"classes", {"a"}}, {"concepts", {{"a", json::array()}}}}),
                    ConfigError);
    TempDir dir("defs");
    std::ofstream(dir / "d.json") << R"({"classes": ["a", "b"]})";
    CHECK_THROWS_AS(load_class_definitions(dir / "d.json", {"b", "a"}), ConfigError);
  }

  TEST_CASE("duplicate concepts within a class are dropped") {
    auto defs = ClassDefinitionSet::from_json({{"classes", {"a", "b"}}, {"concepts", {{"a", {"x", "y", "x"}}, {"b", {"x"}}}}});
    CHECK(defs.concepts[0] == std::vector<std::string>{"x", "y"});
    CHECK(defs.num_concepts() == 3);
    CHECK(defs.owners() == std::vector<int64_t>{0, 0, 1});
  }

  TEST_CASE("max aggregation picks the best concept per class") {
    auto defs = two_class_defs();
    auto p = torch::tensor({0.2, 0.6, 0.3}, torch::kFloat64).view({1, 3, 1, 1});
    auto label = aggregate_concepts(p, defs);
    CHECK(label.probs[0][0][0][0].item<double>() == 0.6);
    CHECK(label.probs[0][1][0][0].item<double>() == 0.3);
    CHECK(label.confidence[0][0][0].item<double>() == 0.6);
  }

  TEST_CASE("singleton concepts reproduce the concept scores") {
    auto defs = ClassDefinitionSet::from_names({"a", "b", "c"});
    auto p = random_probs({2, 3, 3, 3}, 4);
    CHECK(torch::equal(aggregate_concepts(p, defs).probs, p));
  }

  TEST_CASE("adding a weaker concept leaves the class score unchanged") {
    auto defs = two_class_defs();
    auto p = torch::tensor({0.5, 0.2, 0.3}, torch::kFloat64).view({1, 3, 1, 1});
    auto before = aggregate_concepts(p, defs).probs;
    auto wider = defs;
    wider.concepts[0].push_back("stool");
    auto q = torch::tensor({0.5, 0.2, 0.3, 0.1}, torch::kFloat64).view({1, 4, 1, 1});
    q = torch::cat({q.narrow(1, 0, 2), q.narrow(1, 3, 1), q.narrow(1, 2, 1)}, 1);
    CHECK(torch::equal(aggregate_concepts(q, wider).probs, before));
  }

  TEST_CASE("aggregation matches the brute-force max rule on every 2-class, 3-concept layout") {
    const std::vector<double> levels{0.0, 0.25, 0.5, 0.75, 1.0};
    for (int owner_mask = 1; owner_mask < 7; ++owner_mask) {  // both classes own at least one concept
      ClassDefinitionSet defs;
      defs.classes = {"a", "b"};
      defs.concepts = {{}, {}};
      for (int m = 0; m < 3; ++m) defs.concepts[(owner_mask >> m) & 1].push_back("c" + std::to_string(m));
      std::vector<double> flat;
      for (double x : levels)
        for (double y : levels)
          for (double z : levels) {
            // concept order follows flat_concepts(): class a's concepts first
            std::vector<double> by_concept{x, y, z};
            for (int a = 0; a < 2; ++a)
              for (int m = 0; m < 3; ++m)
                if (((owner_mask >> m) & 1) == a) flat.push_back(by_concept[m]);
          }
      const int64_t count = static_cast<int64_t>(flat.size()) / 3;
      auto p = torch::tensor(flat, torch::kFloat64).view({count, 3}).t().contiguous().view({1, 3, 1, count});
      auto label = aggregate_concepts(p, defs);
      CHECK(torch::equal(label.probs, max_rule_oracle(p, defs)));
      CHECK(torch::equal(label.confidence, std::get<0>(max_rule_oracle(p, defs).max(1))));
    }
  }

  TEST_CASE("aggregated scores need not sum to one so thresholds read the confidence field") {
    ClassDefinitionSet defs;
    defs.classes = {"a", "b"};
    defs.concepts = {{"x", "y"}, {"z"}};
    auto p = torch::tensor({0.45, 0.1, 0.45}, torch::kFloat64).view({1, 3, 1, 1});
    auto label = aggregate_concepts(p, defs);
    CHECK(label.probs.sum().item<double>() == doctest::Approx(0.9));
    CHECK(label.confidence.item<double>() == 0.45);
  }

  TEST_CASE("concept scores are a softmax over all concepts") {
    GuidanceFixture f;
    GuidanceConfig cfg;
    auto single = ClassDefinitionSet::from_names({"thing"});
    AnchorTextEmbedder one({"a photo of a thing"}, 32, 0);
    auto s1 = concept_scores(f.image.unsqueeze(0), single, f.backbone.vision, one, cfg);
    CHECK(torch::equal(s1, torch::ones_like(s1)));
    auto s = concept_scores(f.image.unsqueeze(0), f.defs, f.backbone.vision, *f.text, cfg);
    CHECK((s.sum(1) - 1).abs().max().item<double>() < 1e-5);
  }

  TEST_CASE("concept scores match a loop softmax-of-cosines oracle") {
    GuidanceFixture f;
    auto image = torch::rand({1, 3, 64, 64});
    auto embeds = embed_concepts(f.defs, *f.text, kDefaultPromptTemplate);
    auto scores = concept_scores(image, f.backbone.vision, embeds, 100.0);
    torch::NoGradGuard no_grad;
    auto dense = f.backbone.vision->forward_dense_value(image).to(torch::kFloat64);
    auto e = embeds.to(torch::kFloat64);
    double worst = 0.0;
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t j = 0; j < 4; ++j) {
        std::vector<double> logits;
        for (int64_t m = 0; m < e.size(0); ++m) {
          double dot = 0, pn = 0, tn = 0;
          for (int64_t k = 0; k < e.size(1); ++k) {
            const double a = dense[0][k][i][j].item<double>(), b = e[m][k].item<double>();
            dot += a * b;
            pn += a * a;
            tn += b * b;
          }
          logits.push_back(100.0 * dot / std::sqrt(pn * tn));
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (double l : logits) z += std::exp(l - mx);
        for (int64_t m = 0; m < e.size(0); ++m)
          worst = std::max(worst, std::abs(std::exp(logits[m] - mx) / z - scores[0][m][i][j].item<double>()));
      }
    CHECK(worst < 1e-5);
  }

  TEST_CASE("pseudo-labels are deterministic, full resolution and normalized") {
    GuidanceFixture f;
    GuidanceConfig cfg;
    CHECK(cfg.zeta == 0.9);
    auto a = pseudolabel_image(f.image, f.defs, f.backbone.vision, *f.text, cfg);
    auto b = pseudolabel_image(f.image, f.defs, f.backbone.vision, *f.text, cfg);
    CHECK(torch::equal(a.probs, b.probs));
    CHECK(torch::equal(a.confidence, b.confidence));
    CHECK(a.probs.sizes() == torch::IntArrayRef({1, 2, 64, 64}));
    CHECK((a.probs.sum(1) - 1).abs().max().item<double>() < 1e-5);
    const double frac = a.confident_fraction(0.9);
    CHECK(frac == doctest::Approx(kPinnedConfidentFraction).epsilon(1e-12));
  }

  TEST_CASE("inputs off the patch grid get labels at their own resolution") {
    GuidanceFixture f;
    auto label = pseudolabel_image(torch::rand({3, 48, 40}), f.defs, f.backbone.vision, *f.text, GuidanceConfig{});
    CHECK(label.probs.sizes() == torch::IntArrayRef({1, 2, 48, 40}));
    CHECK(label.confidence.sizes() == torch::IntArrayRef({1, 48, 40}));
    CHECK((label.probs.sum(1) - 1).abs().max().item<double>() < 1e-5);
    CHECK(label.confidence.min().item<double>() >= 0.5 - 1e-6);
  }

  TEST_CASE("permuting the class order permutes the pseudo-label channels") {
    GuidanceFixture f;
    ClassDefinitionSet defs;
    defs.classes = {"background", "disc", "square"};
    defs.concepts = {{"background", "grass"}, {"disc"}, {"square", "box"}};
    ClassDefinitionSet swapped;
    swapped.classes = {"square", "background", "disc"};
    swapped.concepts = {{"square", "box"}, {"background", "grass"}, {"disc"}};
    AnchorTextEmbedder text(build_prompts(defs.flat_concepts(), kDefaultPromptTemplate), 32, 1);
    auto a = pseudolabel_image(f.image, defs, f.backbone.vision, text, GuidanceConfig{});
    auto b = pseudolabel_image(f.image, swapped, f.backbone.vision, text, GuidanceConfig{});
    auto perm = torch::tensor({2, 0, 1}, torch::kInt64);
    CHECK((b.probs - a.probs.index_select(1, perm)).abs().max().item<double>() < 1e-6);
    CHECK((b.confidence - a.confidence).abs().max().item<double>() < 1e-6);
  }

  TEST_CASE("the cache round-trips labels and keys on the definitions") {
    GuidanceFixture f;
    TempDir dir("cache");
    auto label = pseudolabel_image(f.image, f.defs, f.backbone.vision, *f.text, GuidanceConfig{});
    PseudoLabelCache cache(dir.path(), PseudoLabelCache::make_key(f.defs, backbone_hash(f.backbone)));
    CHECK_FALSE(cache.load("img").has_value());
    cache.store("img", label);
    auto back = cache.load("img");
    REQUIRE(back.has_value());
    CHECK(torch::equal(back->probs, label.probs));
    CHECK(torch::equal(back->confidence, label.confidence));
    auto other = ClassDefinitionSet::from_names({"background", "ring"});
    CHECK(PseudoLabelCache::make_key(other, backbone_hash(f.backbone)) != cache.key());
    int files = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir.path()))
      if (e.is_regular_file()) {
        ++files;
        CHECK(e.path().string().find(".tmp") == std::string::npos);
      }
    CHECK(files == 1);
  }
}
