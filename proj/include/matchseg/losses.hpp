#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "matchseg/tensor.hpp"

namespace matchseg {

inline constexpr float kDiceEps = 1e-6f;
inline constexpr float kProbClamp = 1e-7f;

struct LossWeights {
    float lambda1 = 0.6f; // Dice
    float lambda2 = 0.3f; // BCE
    float lambda3 = 0.3f; // Focal
};

// All losses take probabilities in [0,1] and a binary target of equal shape,
// return a scalar tensor, and are differentiable in probs.

// 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)
Tensor dice_loss(const Tensor& probs, const Tensor& target);

// mean over pixels of -[y log p + (1-y) log(1-p)], p clamped to
// [kProbClamp, 1-kProbClamp]
Tensor bce_loss(const Tensor& probs, const Tensor& target);

// mean over pixels of -alpha_t (1-p_t)^gamma log(p_t) with p_t = p when y=1
// else 1-p. alpha = nullopt disables the balancing term (alpha_t = 1).
Tensor focal_loss(const Tensor& probs, const Tensor& target, float gamma = 2.0f,
                  std::optional<float> alpha = 0.25f);

// lambda1 * Dice + lambda2 * BCE + lambda3 * Focal
Tensor total_loss(const Tensor& probs, const Tensor& target, const LossWeights& weights);

struct MetricsRow {
    std::string query_id;
    double dsc = 0.0;
    double iou = 0.0;
};

// Plain (non-differentiable) metrics on binary masks; both-empty pairs score 1.0.
double dsc_metric(const Tensor& pred_binary, const Tensor& target);
double iou_metric(const Tensor& pred_binary, const Tensor& target);

// probs > threshold -> 1 else 0; plain data op.
Tensor binarize(const Tensor& probs, float threshold = 0.5f);

// Tab-separated "query_id\tdsc\tiou" rows with a final "MEAN" row, 4 decimals.
void write_metrics_report(std::ostream& os, const std::vector<MetricsRow>& rows);

} // namespace matchseg
