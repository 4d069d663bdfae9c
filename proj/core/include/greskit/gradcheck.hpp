#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "greskit/autodiff.hpp"
#include "greskit/losses.hpp"
#include "greskit/train.hpp"

namespace greskit {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
  std::string worst;  // "<parameter>[<element>]" of the largest error

  nlohmann::json to_json() const;
};

// |a - n| / max(|a|, |n|, floor): relative where the gradient is
// resolvable, absolute (scaled by 1/floor) near zero.
inline constexpr double kRelErrorFloor = 1e-8;
double relative_error(double analytic, double numeric, double floor = kRelErrorFloor);

// Central differences of the batch-mean total loss on `samples` randomly
// drawn parameter elements (a tensor is drawn uniformly, then an element).
GradCheckResult gradient_check(ToyModel& model, std::span<const TrainingExample> batch,
                               double epsilon = 1e-4, int samples = 128, std::uint64_t seed = 0,
                               const LossWeights& weights = {});

// f maps graph inputs to any tensor; the checked scalar is sum(f(x) * r)
// with a fixed random r, so every output element carries gradient. Every
// element of every input is checked.
using GraphFunction = std::function<ad::Var(ad::Graph&, const std::vector<ad::Var>&)>;
GradCheckResult check_function(const GraphFunction& f, std::vector<ad::Tensor> inputs,
                               double epsilon = 1e-6, std::uint64_t seed = 0);

// y = W x + b under a squared-error loss: central differences are exact up
// to rounding.
GradCheckResult linear_gradient_check(double epsilon = 1e-4, std::uint64_t seed = 0);
// Logits -> cross entropy, compared against softmax(z) - onehot.
GradCheckResult softmax_ce_gradient_check(double epsilon = 1e-5, std::uint64_t seed = 0);

// Every primitive of the autodiff core on small random shapes, keyed by name.
std::vector<std::pair<std::string, GradCheckResult>> primitive_gradient_checks(std::uint64_t seed = 0);

}  // namespace greskit
