#include <doctest.h>

#include <fstream>

#include "support.hpp"
#include "vlseg/config.hpp"
#include "vlseg/error.hpp"
#include "vlseg/image_io.hpp"
#include "vlseg/safetensors.hpp"

using namespace vlseg;
using namespace vlseg::testing;
using nlohmann::json;

namespace {

std::filesystem::path config_dir() { return std::filesystem::path(VLSEG_DATA_DIR).parent_path() / "configs"; }

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("archives round-trip tensors of several dtypes with metadata") {
    TempDir dir("archive");
    TensorArchive a;
    a.tensors["f"] = torch::randn({3, 4});
    a.tensors["d"] = torch::randn({2}, torch::kFloat64);
    a.tensors["i"] = torch::arange(6, torch::kInt64).view({2, 3});
    a.tensors["u"] = torch::tensor({0, 7, 255}, torch::kUInt8);
    a.tensors["scalar"] = torch::tensor(1.5f);
    a.metadata["format"] = "test";
    save_archive(dir / "a.safetensors", a);
    auto b = load_archive(dir / "a.safetensors");
    CHECK(b.metadata == a.metadata);
    REQUIRE(b.tensors.size() == a.tensors.size());
    for (const auto& [name, t] : a.tensors) {
      CAPTURE(name);
      CHECK(b.tensors.at(name).dtype() == t.dtype());
      CHECK(torch::equal(b.tensors.at(name), t));
    }
    CHECK(decode_archive(encode_archive(a)).tensors.size() == a.tensors.size());
  }

  TEST_CASE("the archive layout is a length-prefixed JSON header") {
    TensorArchive a;
    a.tensors["x"] = torch::ones({2, 2});
    const auto bytes = encode_archive(a);
    uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
    auto header = json::parse(bytes.substr(8, n));
    CHECK(header["x"]["dtype"] == "F32");
    CHECK(header["x"]["shape"] == json::array({2, 2}));
    CHECK(bytes.size() == 8 + n + 16);
  }

  TEST_CASE("truncated or missing archives raise load errors") {
    TensorArchive a;
    a.tensors["x"] = torch::ones({8});
    const auto bytes = encode_archive(a);
    CHECK_THROWS_AS(decode_archive(bytes.substr(0, bytes.size() - 4)), LoadError);
    CHECK_THROWS_AS(decode_archive(bytes.substr(0, 5)), LoadError);
    CHECK_THROWS_AS(load_archive("/nonexistent/file.safetensors"), LoadError);
  }

  TEST_CASE("atomic writes leave no temp files") {
    TempDir dir("atomic");
    atomic_write(dir / "f.txt", "one");
    atomic_write(dir / "f.txt", "two");
    std::ifstream in(dir / "f.txt");
    std::string text;
    in >> text;
    CHECK(text == "two");
    CHECK(std::distance(std::filesystem::directory_iterator(dir.path()), std::filesystem::directory_iterator{}) == 1);
  }

  TEST_CASE("default run settings follow the published recipe") {
    TrainConfig c;
    CHECK(c.batch_labeled == 8);
    CHECK(c.batch_unlabeled == 8);
    CHECK(c.base_lr == 1e-4);
    CHECK(c.backbone_lr_multiplier == 0.01);
    CHECK(c.crop_size == 512);
    CHECK(c.poly_power == 0.9);
    CHECK(c.fine_tune_mode == FineTuneMode::kSpatial);
    CHECK(c.loss.tau == 0.95);
    CHECK(c.loss.zeta == 0.9);
    CHECK(c.loss.lambda_dc0 == 0.1);
    CHECK(c.eval_window() == 512);
    CHECK(c.eval_stride() == 256);
  }

  TEST_CASE("configs round-trip through JSON") {
    TempDir dir("cfg");
    auto c = tiny_train_config(dir / "data", dir / "out");
    c.loss.tau = 0.8;
    c.fine_tune_mode = FineTuneMode::kFull;
    c.decoder.use_semantic = false;
    auto back = TrainConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
  }

  TEST_CASE("unknown keys are rejected at every level") {
    auto j = TrainConfig{}.to_json();
    auto top = j;
    top["learning_rate"] = 1.0;
    CHECK_THROWS_AS(TrainConfig::from_json(top), ConfigError);
    auto nested = j;
    nested["loss"]["tua"] = 0.5;
    CHECK_THROWS_AS(TrainConfig::from_json(nested), ConfigError);
    auto dec = j;
    dec["decoder"]["width"] = 3;
    CHECK_THROWS_AS(TrainConfig::from_json(dec), ConfigError);
  }

  TEST_CASE("invalid values are rejected") {
    TrainConfig c;
    c.data.root = "x";
    c.batch_labeled = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.batch_labeled = 2;
    c.loss.tau = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.loss.tau = 0.9;
    c.base_lr = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("the hash ignores run control and tracks the trajectory") {
    TrainConfig a;
    auto b = a;
    b.output_dir = "elsewhere";
    b.max_steps = 7;
    b.resume = "ckpt";
    CHECK(a.hash() == b.hash());
    b.seed = 1;
    CHECK(a.hash() != b.hash());
  }

  TEST_CASE("relative paths resolve against the config file") {
    TempDir dir("rel");
    std::filesystem::create_directories(dir / "cfg");
    std::ofstream(dir / "cfg" / "c.json") << R"({"data": {"root": "../data"}, "epochs": 3})";
    auto c = load_train_config(dir / "cfg" / "c.json");
    CHECK(std::filesystem::weakly_canonical(c.data.root) == std::filesystem::weakly_canonical(dir / "data"));
    CHECK(c.epochs == 3);
    CHECK(c.batch_labeled == 8);
  }

  TEST_CASE("the bundled configs load") {
    auto synth = load_train_config(config_dir() / "synthetic.json");
    CHECK(synth.crop_size == 64);
    auto voc = load_train_config(config_dir() / "voc.json");
    CHECK(voc.crop_size == 512);
    CHECK(voc.base_lr == 1e-4);
    CHECK(voc.backbone.kind == "file");
  }

  TEST_CASE("class name files accept an object or a list") {
    TempDir dir("names");
    std::ofstream(dir / "a.json") << R"({"classes": ["x", "y"]})";
    std::ofstream(dir / "b.json") << R"(["x", "y"])";
    CHECK(read_class_names(dir / "a.json") == std::vector<std::string>{"x", "y"});
    CHECK(read_class_names(dir / "b.json") == std::vector<std::string>{"x", "y"});
  }

  TEST_CASE("images and masks round-trip through PNG") {
    TempDir dir("png");
    auto img = (torch::rand({3, 5, 7}) * 255).round() / 255;
    write_image_png(dir / "i.png", img);
    CHECK((read_image(dir / "i.png") - img).abs().max().item<double>() < 1e-6);
    auto mask = torch::randint(0, 21, {5, 7}).to(torch::kUInt8);
    mask[0][0] = kIgnoreIndex;
    write_mask_png(dir / "m.png", mask, voc_palette());
    CHECK(torch::equal(read_mask(dir / "m.png"), mask));
    CHECK_THROWS_AS(read_image(dir / "missing.png"), LoadError);
  }
}
