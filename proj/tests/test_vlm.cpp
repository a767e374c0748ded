#include <doctest.h>

#include <fstream>

#include "support.hpp"
#include "vlseg/error.hpp"
#include "vlseg/tokenizer.hpp"
#include "vlseg/vlm.hpp"

using namespace vlseg;
using namespace vlseg::testing;

namespace {

std::filesystem::path clip_vocab() { return std::filesystem::path(VLSEG_DATA_DIR) / "clip" / "bpe_simple_vocab_16e6.txt.gz"; }

}  // namespace

TEST_SUITE("vlm") {
  TEST_CASE("prompts substitute the single placeholder in order") {
    CHECK(build_prompts({"cow"}, "a photo of a {}") == std::vector<std::string>{"a photo of a cow"});
    CHECK(build_prompts({}, "a photo of a {}").empty());
    CHECK(build_prompts({"armchair", "deckchair"}, kDefaultPromptTemplate) ==
          std::vector<std::string>{"a photo of a armchair", "a photo of a deckchair"});
    CHECK_THROWS_AS(build_prompts({"cow"}, "no placeholder"), ValidationError);
    CHECK_THROWS_AS(build_prompts({"cow"}, "{} and {}"), ValidationError);
  }

  TEST_CASE("the CLIP tokenizer reproduces the published ids") {
    ClipBpeTokenizer tok(clip_vocab());
    auto prompt = tokenize_prompt(tok, "a photo of a cat", 77);
    std::vector<int64_t> head(prompt.ids.begin(), prompt.ids.begin() + 7);
    CHECK(head == std::vector<int64_t>{49406, 320, 1125, 539, 320, 2368, 49407});
    CHECK(prompt.end_position == 6);
    CHECK(prompt.ids.size() == 77);
    CHECK(prompt.ids[7] == 0);
    CHECK(tok.encode("A  Photo") == tok.encode("a photo"));
  }

  TEST_CASE("over-length prompts are truncated keeping the end marker") {
    ByteTokenizer tok;
    auto prompt = tokenize_prompt(tok, std::string(100, 'x'), 16);
    CHECK(prompt.truncated);
    CHECK(prompt.ids.size() == 16);
    CHECK(prompt.ids.back() == tok.end_token());
    CHECK(prompt.end_position == 15);
  }

  TEST_CASE("text embeddings are deterministic with one row per prompt") {
    auto backbone = make_tiny_backbone(0);
    TransformerTextEmbedder text(backbone.text, std::make_shared<ByteTokenizer>());
    auto e = text.embed({"a photo of a cat", "a photo of a dog", "a photo of a cat"});
    CHECK(e.sizes() == torch::IntArrayRef({3, backbone.vision->embed_dim()}));
    CHECK(torch::equal(e[0], e[2]));
    CHECK_FALSE(torch::equal(e[0], e[1]));
  }

  TEST_CASE("anchor embeddings are fixed unit vectors, orthogonal within the dimension") {
    std::vector<std::string> prompts{"a", "b", "c"};
    AnchorTextEmbedder anchors(prompts, 32, 7);
    auto e = anchors.embed(prompts);
    auto gram = e.matmul(e.t());
    CHECK(torch::allclose(gram, torch::eye(3), 1e-5, 1e-5));
    AnchorTextEmbedder again(prompts, 32, 7);
    CHECK(torch::equal(again.embed({"b"}), e.narrow(0, 1, 1)));
  }

  TEST_CASE("dense embeddings have one vector per patch in the text space") {
    auto backbone = make_tiny_backbone(0);
    auto& v = backbone.vision;
    CHECK(v->patch_size() == 16);
    CHECK(v->embed_dim() == 32);
    CHECK(v->config().transformer.depth == 4);
    auto dense = v->forward(torch::rand({2, 3, 64, 64}));
    CHECK(dense.sizes() == torch::IntArrayRef({2, 32, 4, 4}));
    auto value = v->forward_dense_value(torch::rand({1, 3, 64, 96}));
    CHECK(value.sizes() == torch::IntArrayRef({1, 32, 4, 6}));
    CHECK(backbone.text->config().embed_dim == v->embed_dim());
    CHECK_THROWS_AS(v->forward(torch::rand({1, 3, 60, 64})), ValidationError);
  }

  TEST_CASE("the published ViT-B/16 geometry gives a 32x32 grid for 512 inputs") {
    auto cfg = VisionEncoderConfig::vit_b16();
    CHECK(cfg.patch_size == 16);
    CHECK(512 / cfg.patch_size == 32);
  }

  TEST_CASE("spatial partition follows the role tags") {
    auto backbone = make_tiny_backbone(0);
    auto part = partition_parameters(backbone.vision, FineTuneMode::kSpatial);
    CHECK(part.trainable.count("blocks.3.attn.qkv.weight") == 1);
    CHECK(part.frozen.count("blocks.3.mlp.fc1.weight") == 1);
    CHECK(part.trainable.count("pos_embed") == 1);
    CHECK(part.frozen.count("patch_embed.weight") == 1);
    CHECK(part.frozen.count("blocks.0.norm1.weight") == 1);
    for (const auto& p : backbone.vision->tagged_parameters()) {
      REQUIRE(p.role.has_value());
      if (*p.role == ParamRole::kMlp) CHECK(part.frozen.count(p.name) == 1);
      if (*p.role == ParamRole::kAttention) CHECK(part.trainable.count(p.name) == 1);
    }
  }

  TEST_CASE("every mode yields a bipartition of the encoder parameters") {
    auto backbone = make_tiny_backbone(0);
    const auto params = backbone.vision->tagged_parameters();
    for (auto mode : {FineTuneMode::kSpatial, FineTuneMode::kFull, FineTuneMode::kFrozen}) {
      auto part = partition_parameters(params, mode);
      CHECK(part.trainable.size() + part.frozen.size() == params.size());
      for (const auto& name : part.trainable) CHECK(part.frozen.count(name) == 0);
      if (mode == FineTuneMode::kFull) CHECK(part.frozen.empty());
      if (mode == FineTuneMode::kFrozen) CHECK(part.trainable.empty());
    }
  }

  TEST_CASE("an untagged parameter is reported by name") {
    auto params = make_tiny_backbone(0).vision->tagged_parameters();
    params.push_back({"mystery.weight", torch::zeros({1}), std::nullopt});
    try {
      partition_parameters(params, FineTuneMode::kSpatial);
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("mystery.weight") != std::string::npos);
    }
  }

  TEST_CASE("apply_partition sets requires_grad from the partition") {
    auto backbone = make_tiny_backbone(0);
    auto part = partition_parameters(backbone.vision, FineTuneMode::kSpatial);
    auto trainable = apply_partition(backbone.vision, part);
    CHECK(trainable.size() == part.trainable.size());
    for (const auto& p : backbone.vision->named_parameters())
      CHECK(p.value().requires_grad() == (part.trainable.count(p.key()) == 1));
  }

  TEST_CASE("clone_encoder is an independent copy") {
    auto backbone = make_tiny_backbone(1);
    auto copy = clone_encoder(backbone.vision);
    auto x = torch::rand({1, 3, 32, 32});
    CHECK(torch::equal(copy->forward(x), backbone.vision->forward(x)));
    {
      torch::NoGradGuard no_grad;
      copy->named_parameters()["pos_embed"].add_(1.0);
    }
    CHECK_FALSE(torch::equal(copy->forward(x), backbone.vision->forward(x)));
  }

  TEST_CASE("backbones round-trip through an archive and a weight map") {
    TempDir dir("backbone");
    auto backbone = make_tiny_backbone(3);
    save_backbone(dir / "b.safetensors", backbone);
    auto loaded = load_backbone(dir / "b.safetensors");
    CHECK(backbone_hash(loaded) == backbone_hash(backbone));
    CHECK(loaded.logit_scale == doctest::Approx(100.0));

    std::ofstream(dir / "identity.map") << "# comment\nvision.* -> vision.*\n";
    auto rules = read_weight_map(dir / "identity.map");
    REQUIRE(rules.size() == 1);
    std::map<std::string, torch::Tensor> source{{"visual.transformer.resblocks.2.ln_1.weight", torch::ones({2})},
                                                {"visual.proj", torch::zeros({2})}};
    auto mapped = apply_weight_map(source, {{"visual.transformer.resblocks.*.ln_1.weight", "vision.blocks.*.norm1.weight"},
                                            {"visual.proj", "vision.head.proj"}});
    CHECK(mapped.count("vision.blocks.2.norm1.weight") == 1);
    CHECK(mapped.count("vision.head.proj") == 1);
  }

  TEST_CASE("the bundled CLIP weight map parses and covers both towers") {
    auto rules = read_weight_map(std::filesystem::path(VLSEG_DATA_DIR) / "weights" / "clip_vit_b16.map");
    bool vision = false, text = false;
    for (const auto& [from, to] : rules) {
      vision = vision || to.rfind("vision.", 0) == 0;
      text = text || to.rfind("text.", 0) == 0;
    }
    CHECK(vision);
    CHECK(text);
  }
}
