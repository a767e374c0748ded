#include "support.hpp"

#include <atomic>
#include <unistd.h>

#include <ATen/CPUGeneratorImpl.h>

#include "vlseg/rng.hpp"

namespace vlseg::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("vlseg-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

torch::Tensor random_probs(std::vector<int64_t> shape, std::uint64_t seed, torch::Dtype dtype) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto logits = at::randn(shape, gen, torch::TensorOptions().dtype(torch::kFloat64)) * 2.0;
  return logits.softmax(1).to(dtype);
}

DecoderConfig tiny_decoder_config() {
  DecoderConfig d;
  d.d = 16;
  d.aspp_dilations = {1, 2, 3};
  d.spatial_kernel = 3;
  d.semantic_blocks = 1;
  d.semantic_heads = 2;
  d.pool = 2;
  d.skip_channels = {8, 8};
  d.fuse_channels = {16, 16};
  d.norm_groups = 4;
  return d;
}

TrainConfig tiny_train_config(const fs::path& data_root, const fs::path& output_dir) {
  TrainConfig c;
  c.batch_labeled = 4;
  c.batch_unlabeled = 4;
  c.epochs = 1;
  c.base_lr = 1e-3;
  c.backbone_lr_multiplier = 0.01;
  c.crop_size = 64;
  c.augment.crop_size = 64;
  c.augment.scale_range = {0.75, 1.5};
  c.decoder = tiny_decoder_config();
  c.data.root = data_root;
  c.text.source = "anchors";
  c.eval.window = 64;
  c.eval.stride = 32;
  c.output_dir = output_dir;
  return c;
}

void make_corpus(const fs::path& root, int64_t labeled, int64_t unlabeled, int64_t val, std::uint64_t seed,
                 int64_t shape_kinds) {
  SyntheticSpec spec;
  spec.num_labeled = labeled;
  spec.num_unlabeled = unlabeled;
  spec.num_val = val;
  spec.seed = seed;
  spec.shape_kinds = shape_kinds;
  generate_synthetic_corpus(root, spec);
}

double relative_error(const torch::Tensor& analytic, const torch::Tensor& numeric) {
  const double diff = (analytic - numeric).abs().max().item<double>();
  const double scale = std::max(1.0, numeric.abs().max().item<double>());
  return diff / scale;
}

torch::Tensor numeric_gradient(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x,
                               double step) {
  auto base = x.detach().clone().to(torch::kFloat64).contiguous();
  auto grad = torch::zeros_like(base);
  auto flat = base.view({-1});
  auto gflat = grad.view({-1});
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + step;
    const double up = f(base);
    flat[i] = orig - step;
    const double down = f(base);
    flat[i] = orig;
    gflat[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace vlseg::testing
