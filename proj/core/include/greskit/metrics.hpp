#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "greskit/annotations.hpp"
#include "greskit/mask.hpp"
#include "greskit/protocol.hpp"

namespace greskit {

// How a prediction is judged "empty". ExplicitToken reads the [REJ]
// decision; PixelThreshold calls a mask empty when it has fewer than
// `threshold` foreground pixels (default 50).
struct EmptyPolicy {
  enum class Kind { kExplicitToken, kPixelThreshold };
  Kind kind = Kind::kExplicitToken;
  std::int64_t threshold = 50;

  static EmptyPolicy explicit_token() { return {Kind::kExplicitToken, 50}; }
  static EmptyPolicy pixel_threshold(std::int64_t n = 50);

  // "explicit" | "pixel:<N>"
  static EmptyPolicy parse(std::string_view text);
  std::string name() const;
};

// Throws ValidationError when the policy's required input is missing:
// ExplicitToken needs a decision, PixelThreshold needs a mask.
bool classify_empty(std::optional<Decision> decision, const BinaryMask* mask,
                    const EmptyPolicy& policy);

enum class EmptyOutcome { kNotApplicable, kCorrect, kWrong };

struct GresSampleScore {
  double giou_term = 0.0;
  std::int64_t inter = 0;
  std::int64_t uni = 0;
  bool counts_for_ciou = true;
  EmptyOutcome empty_outcome = EmptyOutcome::kNotApplicable;
};

// One reference under the GRES rules:
//   empty GT, predicted empty     -> gIoU 1.0, left out of cIoU
//   empty GT, predicted non-empty -> gIoU 0.0, union += |pred|
//   GT, predicted empty           -> gIoU 0.0, union += |GT| (all-zero prediction)
//   GT, predicted non-empty       -> gIoU = IoU, inter/union of the pair
// A prediction classified empty is scored as the all-zero mask. A [REJ]
// prediction without a mask is the all-zero mask under PixelThreshold.
GresSampleScore score_gres_sample(const Prediction& pred, const BinaryMask& gt, bool gt_empty,
                                  const EmptyPolicy& policy);

// Component-wise sums; merge() is the monoid operation for partial results.
struct GresAccumulator {
  double giou_sum = 0.0;
  std::int64_t sample_count = 0;
  std::int64_t inter_sum = 0;
  std::int64_t union_sum = 0;
  std::int64_t empty_total = 0;
  std::int64_t empty_correct = 0;

  void add(const GresSampleScore& s);
  void merge(const GresAccumulator& other);
  friend bool operator==(const GresAccumulator&, const GresAccumulator&) = default;
};

struct GresReport {
  double giou = 0.0;
  double ciou = 0.0;
  std::optional<double> n_acc;  // absent when the split has no empty target
  GresAccumulator accumulator;
};

GresReport make_gres_report(const GresAccumulator& acc);

struct RefScore {
  RefId ref_id = 0;
  bool gt_empty = false;
  bool pred_empty = false;
  double score = 0.0;  // gIoU term, IoU, or box IoU depending on the suite
  std::int64_t inter = 0;
  std::int64_t uni = 0;
};

struct GresEvaluation {
  GresReport report;
  std::vector<RefScore> per_ref;  // sorted by ref_id
};

// Every ref of the split must have exactly one prediction; missing,
// duplicate and foreign ref_ids raise IntegrityError. Per-ref terms are
// reduced in ref_id order, so the result is independent of the order of
// `predictions` and of `jobs`.
GresEvaluation evaluate_gres(std::span<const Prediction> predictions, const Dataset& dataset,
                             Split split, const EmptyPolicy& policy, int jobs = 1);

struct RefZomAccumulator {
  double iou_sum = 0.0;        // non-empty GT only
  std::int64_t target_count = 0;
  std::int64_t inter_sum = 0;  // non-empty GT only
  std::int64_t union_sum = 0;
  std::int64_t empty_total = 0;
  std::int64_t empty_correct = 0;

  friend bool operator==(const RefZomAccumulator&, const RefZomAccumulator&) = default;
};

struct RefZomReport {
  std::optional<double> oiou;
  std::optional<double> miou;
  std::optional<double> acc;  // strictly all-zero prediction on empty GT
  RefZomAccumulator accumulator;
};

struct RefZomEvaluation {
  RefZomReport report;
  std::vector<RefScore> per_ref;
};

RefZomEvaluation evaluate_refzom(std::span<const Prediction> predictions, const Dataset& dataset,
                                 Split split, int jobs = 1);

struct RecAccumulator {
  std::int64_t total = 0;
  std::int64_t correct = 0;
  std::int64_t skipped_empty = 0;  // empty-GT refs are not part of REC

  friend bool operator==(const RecAccumulator&, const RecAccumulator&) = default;
};

struct RecReport {
  std::optional<double> precision;  // Prec@0.5, box IoU strictly greater than 0.5
  RecAccumulator accumulator;
};

struct RecEvaluation {
  RecReport report;
  std::vector<RefScore> per_ref;
};

RecEvaluation evaluate_rec(std::span<const Prediction> predictions, const Dataset& dataset,
                           Split split, int jobs = 1);

// Report JSON: {"metric_suite", "split", "policy", <metrics>, "accumulators", "per_ref"?}
nlohmann::json report_json(const GresEvaluation& e, Split split, const EmptyPolicy& policy,
                           bool include_per_ref = false);
nlohmann::json report_json(const RefZomEvaluation& e, Split split, bool include_per_ref = false);
nlohmann::json report_json(const RecEvaluation& e, Split split, bool include_per_ref = false);

// Fixed-width text tables, one row per report.
std::string format_table(const GresReport& r, std::string_view row_label, Split split);
std::string format_table(const RefZomReport& r, std::string_view row_label, Split split);
std::string format_table(const RecReport& r, std::string_view row_label, Split split);

}  // namespace greskit
