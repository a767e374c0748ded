#include <doctest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "support.hpp"
#include "vlseg/error.hpp"
#include "vlseg/objective.hpp"

using namespace vlseg;
using namespace vlseg::testing;

namespace {

torch::Tensor pixel(std::vector<double> values) {
  return torch::tensor(values, torch::kFloat64).view({1, static_cast<int64_t>(values.size()), 1, 1});
}

// One-pixel branch whose consistency term equals `c` (pseudo-label class 0 at confidence 1).
BranchPrediction branch_with_loss(double c) {
  const double p0 = std::exp(-c);
  return BranchPrediction{pixel({p0, 1.0 - p0}), false, pixel({1.0, 0.0}), {}, std::nullopt};
}

}  // namespace

TEST_SUITE("objective") {
  TEST_CASE("supervised loss is near zero for saturated correct logits") {
    auto mask = torch::tensor({0, 1, 2, 1}, torch::kInt64).view({1, 2, 2});
    auto logits = torch::one_hot(mask, 3).permute({0, 3, 1, 2}).to(torch::kFloat32) * 20.0;
    CHECK(supervised_loss(logits, mask).value.item<double>() < 1e-3);
  }

  TEST_CASE("supervised loss of uniform logits is ln N") {
    auto logits = torch::zeros({2, 4, 3, 3});
    auto mask = torch::randint(0, 4, {2, 3, 3}, torch::kInt64);
    CHECK(supervised_loss(logits, mask).value.item<double>() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  }

  TEST_CASE("supervised loss matches the loop oracle and skips ignore pixels") {
    torch::manual_seed(3);
    auto logits = torch::randn({1, 3, 2, 2}, torch::kFloat64);
    auto mask = torch::tensor({0, 255, 2, 1}, torch::kInt64).view({1, 2, 2});
    const double expected = oracle::cross_entropy(logits, mask, 255);
    CHECK(std::abs(supervised_loss(logits, mask).value.item<double>() - expected) < 1e-6);
  }

  TEST_CASE("supervised loss over an all-ignored mask returns zero with a flag") {
    auto logits = torch::randn({1, 3, 2, 2}, torch::requires_grad());
    auto mask = torch::full({1, 2, 2}, 255, torch::kInt64);
    auto out = supervised_loss(logits, mask);
    CHECK(out.all_ignored);
    CHECK(out.value.item<double>() == 0.0);
    out.value.backward();
    CHECK(logits.grad().abs().sum().item<double>() == 0.0);
  }

  TEST_CASE("consistency loss is zero when nothing passes the threshold") {
    auto pu = random_probs({2, 3, 4, 4}, 1) * 0.0 + 1.0 / 3.0;
    auto pred = random_probs({2, 3, 4, 4}, 2);
    CHECK(consistency_loss(pred, pu, 0.95).item<double>() == 0.0);
  }

  TEST_CASE("single confident pixel gives -ln of the predicted pseudo-label probability") {
    auto pu = pixel({0.96, 0.03, 0.01});
    auto pred = pixel({0.7, 0.2, 0.1});
    CHECK(consistency_loss(pred, pu, 0.95).item<double>() == doctest::Approx(-std::log(0.7)).epsilon(1e-9));
    CHECK(-std::log(0.7) == doctest::Approx(0.3567).epsilon(1e-3));
  }

  TEST_CASE("one-hot self consistency is zero for any threshold") {
    auto labels = torch::randint(0, 3, {2, 4, 4}, torch::kInt64);
    auto p = torch::one_hot(labels, 3).permute({0, 3, 1, 2}).to(torch::kFloat64);
    for (double tau : {0.1, 0.5, 0.95, 1.0}) CHECK(consistency_loss(p, p, tau).item<double>() == 0.0);
  }

  TEST_CASE("ties in the pseudo-label go to the lowest class index") {
    auto pu = pixel({0.5, 0.5});
    auto pred = pixel({0.25, 0.75});
    CHECK(hard_targets(pu).labels.item<int64_t>() == 0);
    CHECK(consistency_loss(pred, pu, 0.5).item<double>() == doctest::Approx(-std::log(0.25)));
  }

  TEST_CASE("contributing-pixel count never grows with tau") {
    auto pu = random_probs({2, 3, 8, 8}, 11);
    auto conf = hard_targets(pu).confidence;
    int64_t previous = std::numeric_limits<int64_t>::max();
    for (double tau = 0.3; tau <= 1.0; tau += 0.05) {
      const int64_t count = (conf >= tau).sum().item<int64_t>();
      CHECK(count <= previous);
      previous = count;
    }
  }

  TEST_CASE("masked pixels stay in the mean denominator") {
    auto pu = torch::cat({pixel({1.0, 0.0}), pixel({0.5, 0.5})}, 3);
    auto pred = torch::cat({pixel({0.5, 0.5}), pixel({0.5, 0.5})}, 3);
    CHECK(consistency_loss(pred, pu, 0.9).item<double>() == doctest::Approx(std::log(2.0) / 2.0));
  }

  TEST_CASE("consistency and guided losses match loop oracles on random inputs") {
    LossConfig cfg;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto pred = random_probs({1, 3, 4, 4}, 100 + seed);
      auto pu = random_probs({1, 3, 4, 4}, 200 + seed);
      auto pdc = random_probs({1, 3, 4, 4}, 300 + seed);
      cfg.tau = 0.5;
      cfg.zeta = 0.6;
      CHECK(std::abs(consistency_loss(pred, pu, cfg.tau).item<double>() - oracle::consistency(pred, pu, cfg.tau)) <
            1e-9);
      CHECK(std::abs(guided_consistency_loss(pred, pu, pdc, cfg, 0.3).item<double>() -
                     oracle::guided(pred, pu, pdc, cfg.tau, cfg.zeta, 0.3)) < 1e-9);
    }
  }

  TEST_CASE("unlabeled loss weights the branches one half, one quarter, one quarter") {
    LossConfig cfg;
    PredictionSet all_one{branch_with_loss(1.0), branch_with_loss(1.0), branch_with_loss(1.0)};
    CHECK(unlabeled_loss(all_one, cfg).total.item<double>() == doctest::Approx(1.0).epsilon(1e-12));
    PredictionSet mixed{branch_with_loss(0.4), branch_with_loss(0.8), branch_with_loss(0.0)};
    CHECK(unlabeled_loss(mixed, cfg).total.item<double>() == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(kFeatureBranchWeight == 0.5);
    CHECK(kStrongBranchWeight == 0.25);
  }

  TEST_CASE("unlabeled loss rejects a missing branch") {
    LossConfig cfg;
    PredictionSet preds{branch_with_loss(0.2), branch_with_loss(0.2), BranchPrediction{}};
    CHECK_THROWS_AS(unlabeled_loss(preds, cfg), ConfigError);
  }

  TEST_CASE("guided loss reduces to consistency with zero weight or no confident guidance") {
    LossConfig cfg;
    auto pred = random_probs({1, 3, 4, 4}, 5);
    auto pu = random_probs({1, 3, 4, 4}, 6);
    auto pdc = random_probs({1, 3, 4, 4}, 7);
    const double plain = consistency_loss(pred, pu, cfg.tau).item<double>();
    CHECK(guided_consistency_loss(pred, pu, pdc, cfg, 0.0).item<double>() == plain);
    auto flat = torch::full({1, 3, 4, 4}, 1.0 / 3.0, torch::kFloat64);
    CHECK(guided_consistency_loss(pred, pu, flat, cfg, 0.5).item<double>() == plain);
  }

  TEST_CASE("guided loss single-pixel case") {
    LossConfig cfg;
    auto pdc = pixel({0.95, 0.05});
    auto pred = pixel({0.5, 0.5});
    auto pu = pixel({0.6, 0.4});
    const double value = guided_consistency_loss(pred, pu, pdc, cfg, 0.1).item<double>();
    CHECK(value == doctest::Approx(0.1 * std::log(2.0)).epsilon(1e-12));
    CHECK(value == doctest::Approx(0.0693).epsilon(1e-3));
  }

  TEST_CASE("zero guidance weight leaves gradients bit-identical to the unguided path") {
    LossConfig cfg;
    cfg.tau = 0.4;
    auto base = torch::randn({2, 3, 4, 4}, torch::kFloat32);
    auto pu = random_probs({2, 3, 4, 4}, 9, torch::kFloat32);
    GuidanceTarget guide{random_probs({2, 3, 4, 4}, 10, torch::kFloat32), {}};
    guide.confidence = std::get<0>(guide.probs.max(1));

    auto a = base.clone().requires_grad_(true);
    guided_consistency_terms_logits(a, pu, nullptr, cfg, 0.0).total.backward();
    auto b = base.clone().requires_grad_(true);
    guided_consistency_terms_logits(b, pu, &guide, cfg, 0.0).total.backward();
    CHECK(torch::equal(a.grad(), b.grad()));
  }

  TEST_CASE("losses are invariant to a spatial permutation of pixels") {
    LossConfig cfg;
    cfg.tau = 0.4;
    auto pred = random_probs({1, 3, 4, 4}, 21);
    auto pu = random_probs({1, 3, 4, 4}, 22);
    auto pdc = random_probs({1, 3, 4, 4}, 23);
    auto perm = torch::randperm(16, torch::kInt64);
    auto shuffle = [&](const torch::Tensor& t) { return t.flatten(2).index_select(2, perm).view({1, 3, 4, 4}); };
    CHECK(consistency_loss(shuffle(pred), shuffle(pu), cfg.tau).item<double>() ==
          doctest::Approx(consistency_loss(pred, pu, cfg.tau).item<double>()).epsilon(1e-12));
    CHECK(guided_consistency_loss(shuffle(pred), shuffle(pu), shuffle(pdc), cfg, 0.2).item<double>() ==
          doctest::Approx(guided_consistency_loss(pred, pu, pdc, cfg, 0.2).item<double>()).epsilon(1e-12));
  }

  TEST_CASE("loss gradients with respect to the prediction match finite differences") {
    LossConfig cfg;
    cfg.tau = 0.4;
    cfg.zeta = 0.45;
    auto pu = random_probs({1, 3, 3, 3}, 31);
    auto pdc = random_probs({1, 3, 3, 3}, 32);
    auto pred = random_probs({1, 3, 3, 3}, 33);

    auto x = pred.clone().requires_grad_(true);
    guided_consistency_loss(x, pu, pdc, cfg, 0.3).backward();
    auto numeric = numeric_gradient(
        [&](const torch::Tensor& p) { return guided_consistency_loss(p, pu, pdc, cfg, 0.3).item<double>(); }, pred);
    CHECK(relative_error(x.grad(), numeric) < 1e-4);

    auto logits = torch::randn({1, 3, 3, 3}, torch::kFloat64);
    auto mask = torch::tensor({0, 1, 2, 255, 1, 0, 2, 2, 1}, torch::kInt64).view({1, 3, 3});
    auto y = logits.clone().requires_grad_(true);
    supervised_loss(y, mask).value.backward();
    auto numeric_s = numeric_gradient(
        [&](const torch::Tensor& l) { return supervised_loss(l, mask).value.item<double>(); }, logits);
    CHECK(relative_error(y.grad(), numeric_s) < 1e-4);
  }

  TEST_CASE("lambda schedule decays linearly from its initial value to zero") {
    LossConfig cfg;
    cfg.total_steps = 1000;
    CHECK(lambda_schedule(0, cfg) == 0.1);
    CHECK(lambda_schedule(1000, cfg) == 0.0);
    CHECK(lambda_schedule(500, cfg) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(lambda_schedule(-5, cfg) == 0.1);
    CHECK(lambda_schedule(5000, cfg) == 0.0);
  }

  TEST_CASE("total loss halves the sum and rejects non-finite input") {
    CHECK(total_loss(1.0, 1.0) == 1.0);
    CHECK(total_loss(0.0, 0.0) == 0.0);
    CHECK(total_loss(0.8, 0.4) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK_THROWS_AS(total_loss(std::nan(""), 0.0), NumericError);
    CHECK_THROWS_AS(total_loss(torch::tensor(1.0), torch::tensor(INFINITY)), NumericError);
  }

  TEST_CASE("loss config validation") {
    LossConfig cfg;
    CHECK(cfg.tau == 0.95);
    CHECK(cfg.zeta == 0.9);
    CHECK(cfg.lambda_dc0 == 0.1);
    cfg.tau = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.tau = 0.95;
    cfg.lambda_dc0 = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}
