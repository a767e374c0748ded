#include "vlseg/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "vlseg/corpus.hpp"
#include "vlseg/error.hpp"

namespace vlseg {

namespace F = torch::nn::functional;
using nlohmann::json;

void LossConfig::validate() const {
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("loss.tau must lie in (0,1]");
  if (!(zeta > 0.0 && zeta <= 1.0)) throw ConfigError("loss.zeta must lie in (0,1]");
  if (!(lambda_dc0 >= 0.0)) throw ConfigError("loss.lambda_dc0 must be non-negative");
  if (total_steps < 1) throw ConfigError("loss.total_steps must be at least 1");
}

json LossConfig::to_json() const {
  return {{"tau", tau}, {"zeta", zeta}, {"lambda_dc0", lambda_dc0}, {"total_steps", total_steps}};
}

LossConfig LossConfig::from_json(const json& j) {
  LossConfig c;
  try {
    c.tau = j.value("tau", c.tau);
    c.zeta = j.value("zeta", c.zeta);
    c.lambda_dc0 = j.value("lambda_dc0", c.lambda_dc0);
    c.total_steps = j.value("total_steps", c.total_steps);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("loss config: ") + e.what());
  }
  c.validate();
  return c;
}

SupervisedLoss supervised_loss(const torch::Tensor& logits, const torch::Tensor& mask) {
  if (logits.dim() != 4 || mask.dim() != 3 || logits.size(0) != mask.size(0) || logits.size(2) != mask.size(1) ||
      logits.size(3) != mask.size(2))
    throw ValidationError("supervised_loss: logits B×N×H×W and mask B×H×W must agree");
  auto target = mask.to(torch::kInt64);
  SupervisedLoss out;
  const int64_t counted = (target != kIgnoreIndex).sum().item<int64_t>();
  if (counted == 0) {
    out.all_ignored = true;
    out.value = (logits * 0.0).sum();
    return out;
  }
  out.value = F::cross_entropy(logits, target,
                               F::CrossEntropyFuncOptions().ignore_index(kIgnoreIndex).reduction(torch::kMean));
  return out;
}

HardTargets hard_targets(const torch::Tensor& probs) {
  // max(dim) does not promise which index wins a tie; argmax returns the first
  return {probs.argmax(1), std::get<0>(probs.max(1))};
}

torch::Tensor masked_hard_cross_entropy(const torch::Tensor& pred_log_probs, const torch::Tensor& labels,
                                        const torch::Tensor& confidence, double threshold, const torch::Tensor& valid) {
  auto nll = -pred_log_probs.gather(1, labels.unsqueeze(1)).squeeze(1);
  auto selected = confidence >= threshold;
  torch::Tensor denom;
  if (valid.defined()) {
    selected = selected.logical_and(valid);
    denom = valid.sum();
  } else {
    denom = torch::tensor(static_cast<int64_t>(labels.numel()));
  }
  auto weighted = torch::where(selected, nll, torch::zeros_like(nll)).sum();
  if (denom.item<int64_t>() == 0) return weighted * 0.0;
  return weighted / denom.to(weighted.scalar_type());
}

namespace {

torch::Tensor safe_log(const torch::Tensor& probs) {
  return probs.clamp_min(std::numeric_limits<float>::min()).log();
}

torch::Tensor consistency_from_log_probs(const torch::Tensor& log_probs, const torch::Tensor& p_u, double tau,
                                         const torch::Tensor& valid) {
  if (log_probs.sizes() != p_u.sizes()) throw ValidationError("consistency loss: prediction/pseudo-label shape mismatch");
  torch::NoGradGuard no_grad_targets;
  auto targets = hard_targets(p_u.detach());
  at::AutoGradMode enable(true);
  return masked_hard_cross_entropy(log_probs, targets.labels, targets.confidence, tau, valid);
}

GuidedTerms guided_from_log_probs(const torch::Tensor& log_probs, const torch::Tensor& p_u, const GuidanceTarget* guide,
                                  const LossConfig& cfg, double lambda_dc, const torch::Tensor& valid) {
  GuidedTerms terms;
  terms.consistency = consistency_from_log_probs(log_probs, p_u, cfg.tau, valid);
  if (guide == nullptr) {
    terms.guidance = torch::zeros({}, log_probs.options());
    terms.total = terms.consistency;
    return terms;
  }
  if (guide->probs.sizes() != log_probs.sizes()) throw ValidationError("guidance pseudo-label shape mismatch");
  torch::Tensor labels, confidence;
  {
    torch::NoGradGuard no_grad;
    labels = guide->probs.detach().argmax(1);
    confidence = guide->confidence.defined() ? guide->confidence.detach() : std::get<0>(guide->probs.detach().max(1));
  }
  terms.guidance = masked_hard_cross_entropy(log_probs, labels, confidence, cfg.zeta, valid);
  // λ = 0 leaves the graph untouched so gradients match the unguided path bit for bit
  terms.total = lambda_dc == 0.0 ? terms.consistency : terms.consistency + lambda_dc * terms.guidance;
  return terms;
}

}  // namespace

torch::Tensor consistency_loss(const torch::Tensor& p_pred, const torch::Tensor& p_u, double tau,
                               const torch::Tensor& valid) {
  return consistency_from_log_probs(safe_log(p_pred), p_u, tau, valid);
}

torch::Tensor consistency_loss_logits(const torch::Tensor& logits, const torch::Tensor& p_u, double tau,
                                      const torch::Tensor& valid) {
  return consistency_from_log_probs(logits.log_softmax(1), p_u, tau, valid);
}

torch::Tensor guided_consistency_loss(const torch::Tensor& p_pred, const torch::Tensor& p_u, const torch::Tensor& p_dc,
                                      const LossConfig& cfg, double lambda_dc, const torch::Tensor& valid) {
  GuidanceTarget guide{p_dc, {}};
  return guided_from_log_probs(safe_log(p_pred), p_u, &guide, cfg, lambda_dc, valid).total;
}

GuidedTerms guided_consistency_terms_logits(const torch::Tensor& logits, const torch::Tensor& p_u,
                                            const GuidanceTarget* guide, const LossConfig& cfg, double lambda_dc,
                                            const torch::Tensor& valid) {
  return guided_from_log_probs(logits.log_softmax(1), p_u, guide, cfg, lambda_dc, valid);
}

UnlabeledLoss unlabeled_loss(const PredictionSet& preds, const LossConfig& cfg, double lambda_dc) {
  struct Named {
    const char* name;
    const BranchPrediction* branch;
    double weight;
  };
  const Named branches[] = {{"feature-perturbed", &preds.feature, kFeatureBranchWeight},
                            {"strong view 1", &preds.strong1, kStrongBranchWeight},
                            {"strong view 2", &preds.strong2, kStrongBranchWeight}};
  UnlabeledLoss out;
  for (const auto& [name, branch, weight] : branches) {
    if (!branch->pred.defined() || !branch->pseudo.defined())
      throw ConfigError(std::string("unlabeled loss: missing ") + name + " branch");
    auto log_probs = branch->pred_is_logits ? branch->pred.log_softmax(1) : safe_log(branch->pred);
    const GuidanceTarget* guide = branch->guide ? &*branch->guide : nullptr;
    auto terms = guided_from_log_probs(log_probs, branch->pseudo, guide, cfg, lambda_dc, branch->valid);
    auto add = [&](torch::Tensor& acc, const torch::Tensor& v) { acc = acc.defined() ? acc + weight * v : weight * v; };
    add(out.total, terms.total);
    add(out.consistency, terms.consistency);
    add(out.guidance, terms.guidance);
  }
  return out;
}

double lambda_schedule(int64_t step, const LossConfig& cfg) {
  if (cfg.total_steps < 1) throw ConfigError("lambda_schedule: total_steps must be at least 1");
  if (step < 0 || step > cfg.total_steps) {
    log_warning("lambda_schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) +
                "], clamped");
    step = std::clamp<int64_t>(step, 0, cfg.total_steps);
  }
  if (step == cfg.total_steps) return 0.0;
  return cfg.lambda_dc0 * (1.0 - static_cast<double>(step) / static_cast<double>(cfg.total_steps));
}

torch::Tensor total_loss(const torch::Tensor& supervised, const torch::Tensor& unlabeled) {
  const bool finite = torch::isfinite(supervised).all().item<bool>() && torch::isfinite(unlabeled).all().item<bool>();
  if (!finite) {
    std::ostringstream msg;
    msg << "non-finite loss: L_s=" << supervised.item<double>() << " L_u=" << unlabeled.item<double>();
    throw NumericError(msg.str());
  }
  return 0.5 * (supervised + unlabeled);
}

double total_loss(double supervised, double unlabeled) {
  if (!std::isfinite(supervised) || !std::isfinite(unlabeled)) {
    std::ostringstream msg;
    msg << "non-finite loss: L_s=" << supervised << " L_u=" << unlabeled;
    throw NumericError(msg.str());
  }
  return 0.5 * (supervised + unlabeled);
}

}  // namespace vlseg
