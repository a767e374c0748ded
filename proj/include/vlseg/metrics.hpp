#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "vlseg/image_io.hpp"

namespace vlseg {

// counts[g * N + p]: pixels with ground truth g predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int64_t num_classes = 0);

  int64_t num_classes() const { return num_classes_; }
  int64_t at(int64_t gt, int64_t pred) const { return counts_[gt * num_classes_ + pred]; }
  const std::vector<int64_t>& counts() const { return counts_; }
  int64_t ignore_skipped() const { return ignore_skipped_; }
  int64_t total() const;

  // pred and gt: integer tensors of the same shape. Ground-truth pixels equal to
  // the ignore index are skipped; any other value outside [0, N) throws ValidationError.
  void accumulate(const torch::Tensor& pred, const torch::Tensor& gt);
  void merge(const ConfusionMatrix& other);

  nlohmann::json to_json() const;
  static ConfusionMatrix from_json(const nlohmann::json& j);

  bool operator==(const ConfusionMatrix& other) const = default;

 private:
  int64_t num_classes_;
  std::vector<int64_t> counts_;
  int64_t ignore_skipped_ = 0;
};

ConfusionMatrix accumulate(ConfusionMatrix cm, const torch::Tensor& pred, const torch::Tensor& gt);

struct IoUReport {
  std::vector<std::optional<double>> iou;  // nullopt where the class has an empty union
  double miou = 0.0;                       // mean over present classes, in [0, 1]
  int64_t present = 0;

  nlohmann::json to_json(const std::vector<std::string>& class_names = {}) const;
};

IoUReport iou_report(const ConfusionMatrix& cm);

// Argmax of N×H×W (or 1×N×H×W) scores written as a palette PNG; returns the label map.
torch::Tensor export_mask(const torch::Tensor& probs, const Palette& palette, const std::filesystem::path& path);

}  // namespace vlseg
