#include "greskit/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "greskit/error.hpp"

namespace greskit {
namespace {

std::vector<double> mask_targets(const BinaryMask& gt) {
  const auto bits = gt.bits();
  return std::vector<double>(bits.begin(), bits.end());
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ValidationError(std::string(what) + ": shape mismatch");
}

}  // namespace

nlohmann::json LossBreakdown::to_json() const {
  return {{"lm", lm}, {"bce", bce}, {"dice", dice}, {"total", total}};
}

double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const auto half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

double lm_cross_entropy(std::span<const double> logits, std::size_t vocab,
                        std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> ignore, std::span<double> grad) {
  const std::size_t rows = targets.size();
  require_size(logits.size(), rows * vocab, "lm_cross_entropy logits");
  if (!ignore.empty()) require_size(ignore.size(), rows, "lm_cross_entropy ignore mask");
  if (!grad.empty()) {
    require_size(grad.size(), logits.size(), "lm_cross_entropy grad");
    std::fill(grad.begin(), grad.end(), 0.0);
  }
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) counted += ignore.empty() || !ignore[r];
  if (counted == 0) throw ValidationError("lm_cross_entropy: every position is ignored");

  std::vector<double> terms;
  terms.reserve(counted);
  const double inv = 1.0 / static_cast<double>(counted);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!ignore.empty() && ignore[r]) continue;
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw ValidationError("lm_cross_entropy: target out of range");
    }
    const auto row = logits.subspan(r * vocab, vocab);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double x : row) z += std::exp(x - m);
    const double log_z = m + std::log(z);
    terms.push_back(log_z - row[t]);
    if (!grad.empty()) {
      auto g = grad.subspan(r * vocab, vocab);
      for (std::size_t k = 0; k < vocab; ++k) g[k] = std::exp(row[k] - log_z) * inv;
      g[t] -= inv;
    }
  }
  return pairwise_sum(terms) * inv;
}

double bce_with_logits(std::span<const double> logits, std::span<const double> targets,
                       std::span<double> grad) {
  require_size(logits.size(), targets.size(), "bce_with_logits");
  if (logits.empty()) return 0.0;
  if (!grad.empty()) require_size(grad.size(), logits.size(), "bce_with_logits grad");
  const double inv = 1.0 / static_cast<double>(logits.size());
  std::vector<double> terms(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i];
    const double y = targets[i];
    terms[i] = std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    if (!grad.empty()) grad[i] = (sigmoid(x) - y) * inv;
  }
  return pairwise_sum(terms) * inv;
}

double bce_with_logits(std::span<const double> logits, const BinaryMask& gt,
                       std::span<double> grad) {
  const auto y = mask_targets(gt);
  return bce_with_logits(logits, y, grad);
}

double dice_loss(std::span<const double> logits, std::span<const double> targets,
                 std::span<double> grad, double smooth) {
  require_size(logits.size(), targets.size(), "dice_loss");
  if (!grad.empty()) require_size(grad.size(), logits.size(), "dice_loss grad");
  const std::size_t n = logits.size();
  std::vector<double> p(n), py(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = sigmoid(logits[i]);
    py[i] = p[i] * targets[i];
  }
  const double inter = pairwise_sum(py);
  const double denom = pairwise_sum(p) + pairwise_sum(targets) + smooth;
  const double numer = 2.0 * inter + smooth;
  if (!grad.empty()) {
    for (std::size_t i = 0; i < n; ++i) {
      const double d_p = -(2.0 * targets[i] * denom - numer) / (denom * denom);
      grad[i] = d_p * p[i] * (1.0 - p[i]);
    }
  }
  return 1.0 - numer / denom;
}

double dice_loss(std::span<const double> logits, const BinaryMask& gt, std::span<double> grad,
                 double smooth) {
  const auto y = mask_targets(gt);
  return dice_loss(logits, y, grad, smooth);
}

double mean_mask_loss(std::span<const double> per_mask) {
  if (per_mask.empty()) return 0.0;
  return pairwise_sum(per_mask) / static_cast<double>(per_mask.size());
}

LossBreakdown total_loss(double lm, double bce, double dice, const LossWeights& w) {
  return {lm, bce, dice, w.lm * lm + w.bce * bce + w.dice * dice};
}

}  // namespace greskit
