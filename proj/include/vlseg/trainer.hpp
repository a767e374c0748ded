#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlseg/config.hpp"
#include "vlseg/guidance.hpp"
#include "vlseg/metrics.hpp"

namespace vlseg {

// base · (1 − step/total)^power; step is clamped to [0, total] with a warning.
double poly_lr(int64_t step, int64_t total, double base, double power);

struct LabeledBatch {
  torch::Tensor images;  // B×3×H×W
  torch::Tensor masks;   // int64 B×H×W
};

struct UnlabeledBatch {
  torch::Tensor images;      // weak views B×3×H×W
  torch::Tensor valid;       // bool B×H×W, false on padding
  torch::Tensor guide_probs; // B×N×H×W aligned with the weak views, undefined without guidance
  torch::Tensor guide_conf;  // B×H×W
};

struct LossRecord {
  int64_t step = 0;
  double L_s = 0.0;
  double L_u = 0.0;
  double L_dc_contrib = 0.0;  // λ_DC times the branch-weighted guidance term
  double lambda_dc = 0.0;
  double masked_frac_tau = 0.0;   // share of valid weak-view pixels with max p_u >= τ
  double masked_frac_zeta = 0.0;  // share of valid weak-view pixels with guidance confidence >= ζ
  double lr = 0.0;
  double total = 0.0;

  nlohmann::json to_json() const;
  static LossRecord from_json(const nlohmann::json& j);
};

// Everything a training step mutates.
struct TrainState {
  TrainConfig config;
  SegmentationModel model{nullptr};
  torch::Tensor text_embeds;  // N×D class prompt embeddings
  ParameterPartition partition;
  std::unique_ptr<torch::optim::AdamW> optimizer;
  int64_t step = 0;
  int64_t total_steps = 1;
};

// Builds the model from a backbone (the encoder is copied), applies the
// fine-tuning partition and creates AdamW with the encoder lr multiplier.
// The decoder initialisation is seeded from config.seed.
TrainState make_train_state(const TrainConfig& config, const VisionEncoder& encoder, torch::Tensor text_embeds,
                            int64_t total_steps);

// One optimisation step on ½(L_s + L_u). rng drives strong views and feature dropout.
LossRecord train_step(const LabeledBatch& labeled, const UnlabeledBatch& unlabeled, TrainState& state, Rng& rng);

// Per-pixel class probabilities (N×H×W) averaged over overlapping windows.
// Windows are clipped to the image; a window whose sides are not multiples of
// the patch size is reflect-padded for the forward pass and cropped back.
using LogitsFn = std::function<torch::Tensor(const torch::Tensor&)>;
torch::Tensor sliding_window_probs(const torch::Tensor& image, int64_t window, int64_t stride, const LogitsFn& logits,
                                   int64_t patch_size = 1);
torch::Tensor sliding_window_infer(const torch::Tensor& image, int64_t window, int64_t stride, SegmentationModel& model,
                                   const torch::Tensor& text_embeds);

ConfusionMatrix evaluate(SegmentationModel& model, const torch::Tensor& text_embeds,
                         const std::vector<SegSample>& samples, int64_t window, int64_t stride);

// Deterministic data pipeline: batch contents are a pure function of (seed, step).
class BatchSource {
 public:
  BatchSource(const TrainConfig& config, std::vector<SegSample> labeled, std::vector<SegSample> unlabeled);

  int64_t steps_per_epoch() const;
  LabeledBatch labeled_batch(int64_t step) const;
  // guide(id) returns the full-image guidance label for an unlabeled sample, if any.
  using GuideLookup = std::function<std::optional<DensePseudoLabel>(const std::string&)>;
  UnlabeledBatch unlabeled_batch(int64_t step, const GuideLookup& guide) const;

  const std::vector<SegSample>& labeled() const { return labeled_; }
  const std::vector<SegSample>& unlabeled() const { return unlabeled_; }

 private:
  std::vector<int64_t> permutation(int64_t n, std::uint64_t stream, int64_t round) const;

  TrainConfig config_;
  std::vector<SegSample> labeled_;
  std::vector<SegSample> unlabeled_;
};

inline constexpr const char* kCheckpointFormat = "vlseg-checkpoint/1";
inline constexpr const char* kMetricsSchema = "vlseg-metrics/1";

struct CheckpointInfo {
  int64_t step = 0;
  int64_t epoch = 0;
  std::string config_hash;
  nlohmann::json config;
  std::vector<std::string> class_names;
  std::optional<double> best_miou;
  std::string rng_state;
};

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const CheckpointInfo& info);

struct LoadedCheckpoint {
  CheckpointInfo info;
  TrainConfig config;
  SegmentationModel model{nullptr};
  torch::Tensor text_embeds;
};

// Rebuilds the model (and text embeddings) stored in a checkpoint.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
// Restores parameters, optimizer state and step into an existing state; the
// config hash must match.
CheckpointInfo restore_checkpoint(const std::filesystem::path& path, TrainState& state);

struct MetricsRecord {
  int64_t epoch = 0;
  int64_t step = 0;
  std::string split;
  IoUReport report;
  std::vector<std::string> class_names;

  nlohmann::json to_json() const;
};

struct FitResult {
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;  // empty when no evaluation ran
  std::vector<LossRecord> losses;         // steps executed by this call
  std::vector<MetricsRecord> metrics;
  std::optional<IoUReport> final_report;  // evaluation after the last step
  int64_t steps = 0;                      // global step counter at exit
};

// Full semi-supervised run: loads the corpus, backbone and class definitions,
// precomputes guidance labels, trains, evaluates after every eval.every_epochs
// epochs, and writes under output_dir: losses.jsonl, metrics.jsonl,
// checkpoint_last.safetensors, checkpoint_best.safetensors and config.json.
FitResult fit(const TrainConfig& config);

// Backbone and class text embeddings for a config.
struct ModelInputs {
  Backbone backbone;
  std::vector<std::string> class_names;
  ClassDefinitionSet defs;
  torch::Tensor class_embeds;    // N×D
  torch::Tensor concept_embeds;  // M×D
};
ModelInputs prepare_model_inputs(const TrainConfig& config);

// Guidance labels for every sample, read from or added to the on-disk cache
// (config.guidance_cache, default <output_dir>/guidance_cache).
std::map<std::string, DensePseudoLabel> precompute_guidance(const TrainConfig& config, const ModelInputs& inputs,
                                                            const std::vector<SegSample>& samples);

}  // namespace vlseg
