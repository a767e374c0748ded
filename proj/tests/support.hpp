#pragma once

#include <torch/torch.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vlseg/config.hpp"
#include "vlseg/synthetic.hpp"

namespace vlseg::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Random probability maps B×N×H×W (rows sum to 1) in double or float.
torch::Tensor random_probs(std::vector<int64_t> shape, std::uint64_t seed, torch::Dtype dtype = torch::kFloat64);

// Tiny-model decoder widths that fit 64-pixel crops of the tiny backbone.
DecoderConfig tiny_decoder_config();

// Synthetic-corpus run config rooted at data_root, writing into output_dir.
TrainConfig tiny_train_config(const std::filesystem::path& data_root, const std::filesystem::path& output_dir);

// Generates a synthetic corpus (labeled/unlabeled/val counts) once per root.
void make_corpus(const std::filesystem::path& root, int64_t labeled, int64_t unlabeled, int64_t val,
                 std::uint64_t seed = 0, int64_t shape_kinds = 2);

// Relative error of a finite-difference check: max |a-n| / max(1, max|n|).
double relative_error(const torch::Tensor& analytic, const torch::Tensor& numeric);

// Central finite-difference gradient of a scalar function of x (double precision).
torch::Tensor numeric_gradient(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x,
                               double step = 1e-6);

}  // namespace vlseg::testing
