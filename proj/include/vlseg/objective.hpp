#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>

#include <json.hpp>

namespace vlseg {

struct LossConfig {
  double tau = 0.95;        // pseudo-label confidence threshold
  double zeta = 0.9;        // guidance confidence threshold
  double lambda_dc0 = 0.1;  // initial guidance weight, decayed linearly to 0
  int64_t total_steps = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

struct SupervisedLoss {
  torch::Tensor value;
  bool all_ignored = false;
};

// Mean cross-entropy over non-ignored pixels. logits B×N×H×W, mask int B×H×W.
// Returns 0 with all_ignored set when every pixel carries the ignore index.
SupervisedLoss supervised_loss(const torch::Tensor& logits, const torch::Tensor& mask);

// Hard pseudo-label targets: argmax (lowest index on ties) and per-pixel max.
struct HardTargets {
  torch::Tensor labels;      // int64 B×H×W
  torch::Tensor confidence;  // B×H×W
};
HardTargets hard_targets(const torch::Tensor& probs);

// mean over valid pixels of 1[conf >= threshold] · -log pred[label]. pred_log_probs B×N×H×W.
// Pixels under the threshold contribute 0 but stay in the denominator.
torch::Tensor masked_hard_cross_entropy(const torch::Tensor& pred_log_probs, const torch::Tensor& labels,
                                        const torch::Tensor& confidence, double threshold,
                                        const torch::Tensor& valid = {});

// Thresholded consistency against the hard pseudo-label of p_u. p_pred and p_u are
// probability tensors B×N×H×W; valid (optional bool B×H×W) drops padded pixels.
torch::Tensor consistency_loss(const torch::Tensor& p_pred, const torch::Tensor& p_u, double tau,
                               const torch::Tensor& valid = {});
// Same, with the prediction given as logits (numerically safer for training).
torch::Tensor consistency_loss_logits(const torch::Tensor& logits, const torch::Tensor& p_u, double tau,
                                      const torch::Tensor& valid = {});

// Guidance pseudo-label: class scores (for the argmax) and the confidence the
// ζ-threshold reads. confidence defaults to the per-pixel max of probs.
struct GuidanceTarget {
  torch::Tensor probs;       // B×N×H×W
  torch::Tensor confidence;  // B×H×W
};

struct GuidedTerms {
  torch::Tensor consistency;    // C(p_pred, p_u)
  torch::Tensor guidance;       // mean 1[conf_dc >= ζ]·H(p_pred, onehot(p_dc)), before λ
  torch::Tensor total;          // consistency + λ·guidance
};

// C(p_pred, p_u) + λ_DC · mean over valid pixels of 1[max p_dc >= ζ] · H(p_pred, onehot(p_dc)).
torch::Tensor guided_consistency_loss(const torch::Tensor& p_pred, const torch::Tensor& p_u,
                                      const torch::Tensor& p_dc, const LossConfig& cfg, double lambda_dc,
                                      const torch::Tensor& valid = {});
GuidedTerms guided_consistency_terms_logits(const torch::Tensor& logits, const torch::Tensor& p_u,
                                            const GuidanceTarget* guide, const LossConfig& cfg, double lambda_dc,
                                            const torch::Tensor& valid = {});

// One perturbed branch of the unlabeled loss: the prediction (logits or probs)
// and the targets it is compared against, already mixed when CutMix was applied.
struct BranchPrediction {
  torch::Tensor pred;            // B×N×H×W
  bool pred_is_logits = false;
  torch::Tensor pseudo;          // p_u (probabilities), treated as constant
  torch::Tensor valid;           // optional bool B×H×W
  std::optional<GuidanceTarget> guide;
};

struct PredictionSet {
  BranchPrediction feature;  // p_fp
  BranchPrediction strong1;  // p_p1
  BranchPrediction strong2;  // p_p2
};

struct UnlabeledLoss {
  torch::Tensor total;           // ½ C_fp + ¼ C_p1 + ¼ C_p2
  torch::Tensor consistency;     // same weights, without the guidance part
  torch::Tensor guidance;        // same weights, guidance part before λ
};

inline constexpr double kFeatureBranchWeight = 0.5;
inline constexpr double kStrongBranchWeight = 0.25;

// Throws ConfigError when a branch prediction is missing.
UnlabeledLoss unlabeled_loss(const PredictionSet& preds, const LossConfig& cfg, double lambda_dc = 0.0);

// λ_DC(step) = lambda_dc0 · (1 − step/total_steps); step is clamped with a warning.
double lambda_schedule(int64_t step, const LossConfig& cfg);

// ½(L_s + L_u); throws NumericError on non-finite input.
torch::Tensor total_loss(const torch::Tensor& supervised, const torch::Tensor& unlabeled);
double total_loss(double supervised, double unlabeled);

}  // namespace vlseg
