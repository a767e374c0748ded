#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlseg/config.hpp"

namespace vlseg {

struct SweepCell {
  std::string param;
  double value = 0.0;
  double miou = 0.0;                   // final validation mIoU in [0, 1], 0 without a val split
  double mean_masked_frac_zeta = 0.0;  // over the training steps of the run
  int64_t guide_pixels = 0;            // unlabeled-set pixels with guidance confidence >= ζ
  std::filesystem::path output_dir;
};

struct SweepResult {
  std::string param;
  std::vector<SweepCell> cells;
  // For a ζ sweep: guide_pixels never grows as ζ grows.
  std::optional<bool> zeta_monotone;

  nlohmann::json to_json() const;
};

// Parameters that can be swept: lambda_dc0, zeta, tau.
void set_sweep_param(TrainConfig& config, const std::string& param, double value);

// Trains one run per value under <output_dir>/<param>_<value>/, sharing one
// guidance cache, and writes sweep.csv and sweep.json to output_dir.
SweepResult run_sweep(const TrainConfig& base, const std::string& param, const std::vector<double>& values);

}  // namespace vlseg
