#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "vlseg/corpus.hpp"
#include "vlseg/error.hpp"
#include "vlseg/image_io.hpp"
#include "vlseg/rng.hpp"

using namespace vlseg;
using namespace vlseg::testing;
namespace fs = std::filesystem;

namespace {

SegSample ramp_sample(int64_t size, const std::string& id = "ramp") {
  auto ys = torch::arange(size, torch::kFloat32).view({size, 1}).expand({size, size});
  auto xs = torch::arange(size, torch::kFloat32).view({1, size}).expand({size, size});
  SegSample s;
  s.id = id;
  s.image = torch::stack({ys / size, xs / size, (ys + xs) / (2 * size)});
  s.mask = ((ys.to(torch::kInt64) / 16 + xs.to(torch::kInt64) / 16) % 3).to(torch::kUInt8);
  return s;
}

}  // namespace

TEST_SUITE("corpus") {
  TEST_CASE("load_split returns labeled and unlabeled samples in file order") {
    TempDir dir("split");
    make_corpus(dir.path(), 2, 1, 0);
    auto spec = read_split(dir.path());
    REQUIRE(spec.labeled_ids.size() == 2);
    REQUIRE(spec.unlabeled_ids.size() == 1);
    auto loaded = load_split(spec);
    CHECK(loaded.labeled.size() == 2);
    CHECK(loaded.unlabeled.size() == 1);
    CHECK(loaded.labeled[0].id == spec.labeled_ids[0]);
    CHECK(loaded.labeled[1].id == spec.labeled_ids[1]);
    CHECK(loaded.labeled[0].mask.has_value());
    CHECK_FALSE(loaded.unlabeled[0].mask.has_value());
  }

  TEST_CASE("a labeled id without a mask file fails naming the id") {
    TempDir dir("nomask");
    make_corpus(dir.path(), 2, 1, 0);
    auto spec = read_split(dir.path());
    fs::remove(dir.path() / "masks" / (spec.labeled_ids[1] + ".png"));
    try {
      load_split(spec);
      FAIL("expected a load error");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find(spec.labeled_ids[1]) != std::string::npos);
    }
  }

  TEST_CASE("mask and image shape mismatch is a validation error") {
    TempDir dir("mismatch");
    make_corpus(dir.path(), 1, 0, 0);
    auto spec = read_split(dir.path());
    write_mask_png(dir.path() / "masks" / (spec.labeled_ids[0] + ".png"), torch::zeros({8, 8}, torch::kUInt8),
                   voc_palette());
    CHECK_THROWS_AS(load_split(spec), ValidationError);
  }

  TEST_CASE("overlapping labeled and unlabeled ids are rejected") {
    TempDir dir("overlap");
    make_corpus(dir.path(), 2, 1, 0);
    auto spec = read_split(dir.path());
    spec.unlabeled_ids.push_back(spec.labeled_ids[0]);
    CHECK_THROWS_AS(load_split(spec), ValidationError);
  }

  TEST_CASE("bundled synthetic split loads 4 labeled and 16 unlabeled samples of one shape") {
    TempDir dir("bundled");
    SyntheticSpec spec;  // defaults: 4 labeled, 16 unlabeled
    generate_synthetic_corpus(dir.path(), spec);
    auto loaded = load_split(read_split(dir.path()));
    CHECK(loaded.labeled.size() + loaded.unlabeled.size() == 20);
    CHECK(loaded.labeled.size() == 4);
    for (const auto* group : {&loaded.labeled, &loaded.unlabeled})
      for (const auto& s : *group) {
        CHECK(s.image.sizes() == torch::IntArrayRef({3, spec.image_size, spec.image_size}));
        if (s.mask) validate_sample(s, 3);
      }
  }

  TEST_CASE("identity weak augmentation returns the input unchanged") {
    auto s = ramp_sample(64);
    Rng rng(1);
    auto out = weak_augment(s, AugmentationRecipe::identity(64), rng);
    CHECK(torch::equal(out.image, s.image));
    CHECK(torch::equal(out.mask->to(torch::kUInt8), *s.mask));
  }

  TEST_CASE("weak augmentation is deterministic for a fixed seed") {
    auto s = ramp_sample(96);
    AugmentationRecipe recipe;
    recipe.crop_size = 64;
    Rng a(42), b(42);
    auto x = weak_augment(s, recipe, a);
    auto y = weak_augment(s, recipe, b);
    CHECK(torch::equal(x.image, y.image));
    CHECK(torch::equal(*x.mask, *y.mask));
  }

  TEST_CASE("a 64 crop of a 128 sample keeps every pixel's class aligned") {
    auto s = ramp_sample(128);
    auto recipe = AugmentationRecipe::identity(64);
    recipe.hflip_prob = 1.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      auto view = weak_augment_view(s, recipe, rng);
      const auto& g = view.geometry;
      REQUIRE(view.sample.image.size(1) == 64);
      REQUIRE(view.sample.mask->size(0) == 64);
      CHECK(g.flipped);
      auto img = view.sample.image;
      auto mask = view.sample.mask->to(torch::kInt64);
      for (int64_t y = 0; y < 64; y += 7)
        for (int64_t x = 0; x < 64; x += 5) {
          const int64_t sy = g.top + y;
          const int64_t sx = g.left + 63 - x;
          CHECK(mask[y][x].item<int64_t>() == (*s.mask)[sy][sx].item<int64_t>());
          CHECK(img[1][y][x].item<float>() == s.image[1][sy][sx].item<float>());
        }
    }
  }

  TEST_CASE("weak augmentation pads masks with the ignore index and never invents classes") {
    auto s = ramp_sample(48);
    AugmentationRecipe recipe;
    recipe.crop_size = 64;
    recipe.scale_range = {0.5, 0.5};
    Rng rng(3);
    auto view = weak_augment_view(s, recipe, rng);
    auto mask = view.sample.mask->to(torch::kInt64);
    CHECK((mask == 255).any().item<bool>());
    CHECK(((mask < 3) | (mask == 255)).all().item<bool>());
    CHECK(torch::equal(view.valid, mask != 255));
  }

  TEST_CASE("strong views equal the input when every perturbation is disabled") {
    std::vector<SegSample> batch{ramp_sample(32, "a"), ramp_sample(32, "b")};
    batch[1].image = batch[1].image.flip({2});
    auto recipe = AugmentationRecipe::identity(32);
    Rng rng(0);
    auto pair = strong_augment_pair(batch, recipe, rng);
    auto input = stack_images(batch);
    CHECK(torch::equal(pair.first.images, input));
    CHECK(torch::equal(pair.second.images, input));
  }

  TEST_CASE("cutmix pastes a rectangle from the partner and records it") {
    std::vector<SegSample> batch{ramp_sample(32, "a"), ramp_sample(32, "b")};
    batch[1].image = 1.0 - batch[1].image;
    auto recipe = AugmentationRecipe::identity(32);
    recipe.cutmix_prob = 1.0;
    Rng rng(5);
    auto pair = strong_augment_pair(batch, recipe, rng);
    auto input = stack_images(batch);
    for (const auto* view : {&pair.first, &pair.second}) {
      const auto& mix = view->cutmix;
      const double frac = mix.mixed_fraction();
      CHECK(frac > 0.0);
      CHECK(frac < 1.0);
      for (int64_t i = 0; i < 2; ++i) {
        auto box = mix.box_mask[i];
        auto partner = input[mix.partner[i]];
        auto same_as_partner = (view->images[i] == partner).all(0);
        auto same_as_self = (view->images[i] == input[i]).all(0);
        CHECK(same_as_partner.masked_select(box).all().item<bool>());
        CHECK(same_as_self.masked_select(box.logical_not()).all().item<bool>());
        auto rows = box.any(1).nonzero().squeeze(1), cols = box.any(0).nonzero().squeeze(1);
        const int64_t h = rows.max().item<int64_t>() - rows.min().item<int64_t>() + 1;
        const int64_t w = cols.max().item<int64_t>() - cols.min().item<int64_t>() + 1;
        CHECK(box.sum().item<int64_t>() == h * w);
      }
    }
  }

  TEST_CASE("cutmix on masks commutes with masking the mixed images") {
    std::vector<SegSample> batch{ramp_sample(32, "a"), ramp_sample(32, "b"), ramp_sample(32, "c")};
    auto recipe = AugmentationRecipe::identity(32);
    recipe.cutmix_prob = 1.0;
    Rng rng(8);
    auto pair = strong_augment_pair(batch, recipe, rng);
    auto masks = stack_masks(batch);
    auto mixed_masks = pair.first.cutmix.apply(masks);
    for (int64_t i = 0; i < 3; ++i) {
      const auto& box = pair.first.cutmix.box_mask[i];
      auto expected = torch::where(box, masks[pair.first.cutmix.partner[i]], masks[i]);
      CHECK(torch::equal(mixed_masks[i], expected));
    }
  }

  TEST_CASE("grayscale with probability one makes channels equal") {
    std::vector<SegSample> batch{ramp_sample(16)};
    auto recipe = AugmentationRecipe::identity(16);
    recipe.grayscale_prob = 1.0;
    Rng rng(0);
    auto pair = strong_augment_pair(batch, recipe, rng);
    auto img = pair.first.images[0];
    CHECK(torch::equal(img[0], img[1]));
    CHECK(torch::equal(img[1], img[2]));
  }

  TEST_CASE("strong augmentation is deterministic for a fixed seed") {
    std::vector<SegSample> batch{ramp_sample(32, "a"), ramp_sample(32, "b")};
    AugmentationRecipe recipe;
    recipe.crop_size = 32;
    Rng a(77), b(77);
    auto x = strong_augment_pair(batch, recipe, a);
    auto y = strong_augment_pair(batch, recipe, b);
    CHECK(torch::equal(x.first.images, y.first.images));
    CHECK(torch::equal(x.second.images, y.second.images));
    CHECK(torch::equal(x.first.cutmix.box_mask, y.first.cutmix.box_mask));
  }

  TEST_CASE("feature dropout zeroes half the channels and doubles the rest") {
    auto features = torch::rand({4, 3, 3}) + 0.5;
    Rng rng(1);
    CHECK(torch::equal(feature_perturb(features, 0.0, rng), features));
    auto out = feature_perturb(features, 0.5, rng);
    int64_t zero = 0;
    for (int64_t c = 0; c < 4; ++c) {
      if ((out[c] == 0).all().item<bool>()) {
        ++zero;
      } else {
        CHECK(torch::allclose(out[c], features[c] * 2.0));
      }
    }
    CHECK(zero == 2);
    CHECK(kDefaultFeatureDropRate == 0.5);
    CHECK_THROWS_AS(feature_perturb(features, 1.0, rng), ValidationError);
  }

  TEST_CASE("feature dropout preserves the expectation") {
    auto features = torch::rand({8, 2, 2}, torch::kFloat64) + 0.5;
    auto sum = torch::zeros_like(features);
    Rng rng(2);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) sum += feature_perturb(features, 0.5, rng);
    CHECK(((sum / draws - features).abs().sum() / features.sum()).item<double>() < 0.02);
  }
}
