#pragma once

#include <cstdint>
#include <span>

#include <nlohmann/json.hpp>

#include "greskit/mask.hpp"

namespace greskit {

// lambda_1..3 for the language-model, BCE and DICE terms.
struct LossWeights {
  double lm = 1.0;
  double bce = 2.0;
  double dice = 0.5;
};

struct LossBreakdown {
  double lm = 0.0;
  double bce = 0.0;
  double dice = 0.0;
  double total = 0.0;

  nlohmann::json to_json() const;
};

inline constexpr double kDiceSmooth = 1.0;

// Deterministic pairwise (tree) summation.
double pairwise_sum(std::span<const double> values);

// Mean over unignored rows of -log softmax(logits[row])[target[row]].
// `logits` is rows x vocab, row-major; ignore[row] != 0 skips the row.
// If `grad` is non-empty it receives d(loss)/d(logits). Throws
// ValidationError when every row is ignored or shapes disagree.
double lm_cross_entropy(std::span<const double> logits, std::size_t vocab,
                        std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> ignore, std::span<double> grad = {});

// Per-pixel mean of the logistic loss, in the max(x,0) - x*y + log1p(exp(-|x|)) form.
double bce_with_logits(std::span<const double> logits, std::span<const double> targets,
                       std::span<double> grad = {});
double bce_with_logits(std::span<const double> logits, const BinaryMask& gt,
                       std::span<double> grad = {});

// 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps) with p = sigmoid(logits).
double dice_loss(std::span<const double> logits, std::span<const double> targets,
                 std::span<double> grad = {}, double smooth = kDiceSmooth);
double dice_loss(std::span<const double> logits, const BinaryMask& gt, std::span<double> grad = {},
                 double smooth = kDiceSmooth);

// Average of per-mask losses; zero when no mask is supervised.
double mean_mask_loss(std::span<const double> per_mask);

LossBreakdown total_loss(double lm, double bce, double dice, const LossWeights& weights = {});

}  // namespace greskit
