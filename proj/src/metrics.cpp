#include "vlseg/metrics.hpp"

#include <numeric>

#include "vlseg/corpus.hpp"
#include "vlseg/error.hpp"

namespace vlseg {

using nlohmann::json;

ConfusionMatrix::ConfusionMatrix(int64_t num_classes)
    : num_classes_(num_classes), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 0) throw ValidationError("confusion matrix needs a non-negative class count");
}

int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), int64_t{0}); }

void ConfusionMatrix::accumulate(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (pred.sizes() != gt.sizes()) throw ValidationError("accumulate: prediction and ground truth shapes differ");
  auto p = pred.to(torch::kInt64).contiguous().view(-1);
  auto g = gt.to(torch::kInt64).contiguous().view(-1);
  auto keep = g != kIgnoreIndex;
  const int64_t skipped = g.numel() - keep.sum().item<int64_t>();
  p = p.masked_select(keep);
  g = g.masked_select(keep);
  if (g.numel() == 0) {
    ignore_skipped_ += skipped;
    return;
  }
  const int64_t n = num_classes_;
  if (g.min().item<int64_t>() < 0 || g.max().item<int64_t>() >= n)
    throw ValidationError("accumulate: ground-truth class index outside [0, " + std::to_string(n) + ")");
  if (p.min().item<int64_t>() < 0 || p.max().item<int64_t>() >= n)
    throw ValidationError("accumulate: predicted class index outside [0, " + std::to_string(n) + ")");
  auto bins = torch::bincount(g * n + p, {}, n * n);
  const auto* data = bins.data_ptr<int64_t>();
  for (int64_t i = 0; i < n * n; ++i) counts_[i] += data[i];
  ignore_skipped_ += skipped;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_) throw ValidationError("merge: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  ignore_skipped_ += other.ignore_skipped_;
}

json ConfusionMatrix::to_json() const {
  return {{"num_classes", num_classes_}, {"counts", counts_}, {"ignore_skipped", ignore_skipped_}};
}

ConfusionMatrix ConfusionMatrix::from_json(const json& j) {
  ConfusionMatrix cm(j.at("num_classes").get<int64_t>());
  auto counts = j.at("counts").get<std::vector<int64_t>>();
  if (counts.size() != cm.counts_.size()) throw ValidationError("confusion matrix JSON has the wrong size");
  cm.counts_ = std::move(counts);
  cm.ignore_skipped_ = j.value("ignore_skipped", int64_t{0});
  return cm;
}

ConfusionMatrix accumulate(ConfusionMatrix cm, const torch::Tensor& pred, const torch::Tensor& gt) {
  cm.accumulate(pred, gt);
  return cm;
}

json IoUReport::to_json(const std::vector<std::string>& class_names) const {
  json per_class = json::array();
  for (std::size_t c = 0; c < iou.size(); ++c) {
    json entry = {{"index", c}, {"iou", iou[c] ? json(*iou[c]) : json(nullptr)}};
    if (c < class_names.size()) entry["name"] = class_names[c];
    per_class.push_back(entry);
  }
  return {{"miou", miou}, {"present", present}, {"per_class", per_class}};
}

IoUReport iou_report(const ConfusionMatrix& cm) {
  const int64_t n = cm.num_classes();
  IoUReport report;
  report.iou.resize(n);
  double sum = 0.0;
  for (int64_t c = 0; c < n; ++c) {
    int64_t row = 0, col = 0;
    for (int64_t k = 0; k < n; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const int64_t tp = cm.at(c, c);
    const int64_t uni = row + col - tp;
    if (uni == 0) continue;
    report.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += *report.iou[c];
    ++report.present;
  }
  report.miou = report.present > 0 ? sum / static_cast<double>(report.present) : 0.0;
  return report;
}

torch::Tensor export_mask(const torch::Tensor& probs, const Palette& palette, const std::filesystem::path& path) {
  auto p = probs.dim() == 4 ? probs.squeeze(0) : probs;
  if (p.dim() != 3) throw ValidationError("export_mask expects N×H×W scores");
  if (static_cast<int64_t>(palette.size()) < p.size(0))
    throw ValidationError("export_mask: palette has " + std::to_string(palette.size()) + " colors for " +
                          std::to_string(p.size(0)) + " classes");
  auto labels = p.argmax(0).to(torch::kUInt8);
  write_mask_png(path, labels, palette);
  return labels;
}

}  // namespace vlseg
