#include "greskit/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <map>
#include <thread>

#include "greskit/error.hpp"

namespace greskit {
namespace {

struct Pairing {
  RefId ref_id = 0;
  const Prediction* prediction = nullptr;
};

// Matches predictions to the refs of a split, sorted by ref_id.
std::vector<Pairing> pair_with_split(std::span<const Prediction> predictions,
                                     const Dataset& dataset, Split split) {
  std::map<RefId, const Prediction*> by_ref;
  for (const auto& p : predictions) {
    if (!dataset.has_ref(p.ref_id)) {
      throw IntegrityError("prediction for unknown ref_id " + std::to_string(p.ref_id));
    }
    if (dataset.ref(p.ref_id).split != split) {
      throw IntegrityError("prediction for ref_id " + std::to_string(p.ref_id) +
                           " which is not in split " + std::string(split_name(split)));
    }
    if (!by_ref.emplace(p.ref_id, &p).second) {
      throw IntegrityError("duplicate prediction for ref_id " + std::to_string(p.ref_id));
    }
  }
  std::vector<Pairing> out;
  for (const auto id : dataset.refs_in_split(split)) {
    const auto it = by_ref.find(id);
    if (it == by_ref.end()) {
      throw IntegrityError("no prediction for ref_id " + std::to_string(id));
    }
    out.push_back({id, it->second});
  }
  return out;
}

template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::clamp(jobs, 1, 64));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(n, begin + chunk);
      if (begin >= end) break;
      pool.emplace_back([&, w, begin, end] {
        try {
          for (std::size_t i = begin; i < end; ++i) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// The effective predicted mask: [REJ] without a mask is all zeros.
BinaryMask effective_mask(const Prediction& p, int height, int width) {
  if (p.mask) {
    if (p.mask->height() != height || p.mask->width() != width) {
      throw DimensionMismatch("prediction for ref_id " + std::to_string(p.ref_id) + " is " +
                              std::to_string(p.mask->height()) + "x" +
                              std::to_string(p.mask->width()) + ", ground truth is " +
                              std::to_string(height) + "x" + std::to_string(width));
    }
    if (p.decision == Decision::kRej) return BinaryMask(height, width);
    return *p.mask;
  }
  return BinaryMask(height, width);
}

std::string fmt_pct(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v * 100.0);
  return buf;
}

nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

nlohmann::json per_ref_json(const std::vector<RefScore>& rows) {
  auto arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"ref_id", r.ref_id}, {"gt_empty", r.gt_empty}, {"pred_empty", r.pred_empty},
                   {"score", r.score}, {"inter", r.inter}, {"union", r.uni}});
  }
  return arr;
}

std::string table(std::string_view row_label, Split split, const char* h1, const char* h2,
                  const char* h3, const std::string& v1, const std::string& v2,
                  const std::string& v3) {
  char buf[512];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-24s | %-28s\n", "Model", std::string(split_name(split)).c_str());
  out += buf;
  std::snprintf(buf, sizeof buf, "%-24s | %8s %8s %8s\n", "", h1, h2, h3);
  out += buf;
  out += std::string(24, '-') + "-+-" + std::string(28, '-') + "\n";
  std::snprintf(buf, sizeof buf, "%-24s | %8s %8s %8s\n", std::string(row_label).c_str(),
                v1.c_str(), v2.c_str(), v3.c_str());
  out += buf;
  return out;
}

}  // namespace

EmptyPolicy EmptyPolicy::pixel_threshold(std::int64_t n) {
  if (n < 1) throw ConfigError("pixel threshold must be >= 1");
  return {Kind::kPixelThreshold, n};
}

EmptyPolicy EmptyPolicy::parse(std::string_view text) {
  if (text == "explicit") return explicit_token();
  if (text == "pixel") return pixel_threshold(50);
  constexpr std::string_view prefix = "pixel:";
  if (text.starts_with(prefix)) {
    const auto digits = text.substr(prefix.size());
    std::int64_t n = 0;
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), n);
    if (ec == std::errc() && ptr == digits.data() + digits.size()) return pixel_threshold(n);
  }
  throw ConfigError("policy must be \"explicit\" or \"pixel:<N>\", got \"" + std::string(text) +
                    "\"");
}

std::string EmptyPolicy::name() const {
  return kind == Kind::kExplicitToken ? "explicit" : "pixel:" + std::to_string(threshold);
}

bool classify_empty(std::optional<Decision> decision, const BinaryMask* mask,
                    const EmptyPolicy& policy) {
  if (policy.kind == EmptyPolicy::Kind::kExplicitToken) {
    if (!decision) throw ValidationError("explicit-token policy needs a decision");
    return *decision == Decision::kRej;
  }
  if (!mask) throw ValidationError("pixel-threshold policy needs a mask");
  return positive_pixel_count(*mask) < policy.threshold;
}

GresSampleScore score_gres_sample(const Prediction& pred, const BinaryMask& gt, bool gt_empty,
                                  const EmptyPolicy& policy) {
  const BinaryMask mask = effective_mask(pred, gt.height(), gt.width());
  const bool pred_empty = classify_empty(pred.decision, &mask, policy);
  GresSampleScore s;
  if (gt_empty) {
    if (pred_empty) {
      s.giou_term = 1.0;
      s.counts_for_ciou = false;
      s.empty_outcome = EmptyOutcome::kCorrect;
    } else {
      s.giou_term = 0.0;
      s.inter = 0;
      s.uni = positive_pixel_count(mask);
      s.empty_outcome = EmptyOutcome::kWrong;
    }
    return s;
  }
  if (pred_empty) {
    s.giou_term = 0.0;
    s.inter = 0;
    s.uni = positive_pixel_count(gt);
    return s;
  }
  s.inter = intersection_area(mask, gt);
  s.uni = union_area(mask, gt);
  s.giou_term = s.uni == 0 ? 1.0 : static_cast<double>(s.inter) / static_cast<double>(s.uni);
  return s;
}

void GresAccumulator::add(const GresSampleScore& s) {
  giou_sum += s.giou_term;
  ++sample_count;
  if (s.counts_for_ciou) {
    inter_sum += s.inter;
    union_sum += s.uni;
  }
  if (s.empty_outcome != EmptyOutcome::kNotApplicable) {
    ++empty_total;
    if (s.empty_outcome == EmptyOutcome::kCorrect) ++empty_correct;
  }
}

void GresAccumulator::merge(const GresAccumulator& o) {
  giou_sum += o.giou_sum;
  sample_count += o.sample_count;
  inter_sum += o.inter_sum;
  union_sum += o.union_sum;
  empty_total += o.empty_total;
  empty_correct += o.empty_correct;
}

GresReport make_gres_report(const GresAccumulator& acc) {
  GresReport r;
  r.accumulator = acc;
  r.giou = acc.sample_count == 0 ? 0.0 : acc.giou_sum / static_cast<double>(acc.sample_count);
  // union_sum == 0 only when every ref was a correctly rejected empty target.
  r.ciou = acc.union_sum == 0 ? 1.0
                              : static_cast<double>(acc.inter_sum) /
                                    static_cast<double>(acc.union_sum);
  if (acc.empty_total > 0) {
    r.n_acc = static_cast<double>(acc.empty_correct) / static_cast<double>(acc.empty_total);
  }
  return r;
}

GresEvaluation evaluate_gres(std::span<const Prediction> predictions, const Dataset& dataset,
                             Split split, const EmptyPolicy& policy, int jobs) {
  const auto pairs = pair_with_split(predictions, dataset, split);
  std::vector<GresSampleScore> scores(pairs.size());
  std::vector<RefScore> rows(pairs.size());
  parallel_for(pairs.size(), jobs, [&](std::size_t i) {
    const auto& ref = dataset.ref(pairs[i].ref_id);
    const auto gt = ground_truth_mask(dataset, ref.ref_id);
    const bool gt_empty = is_empty_target(ref);
    scores[i] = score_gres_sample(*pairs[i].prediction, gt, gt_empty, policy);
    const auto& pred = *pairs[i].prediction;
    const auto mask = effective_mask(pred, gt.height(), gt.width());
    const auto& s = scores[i];
    rows[i] = {ref.ref_id, gt_empty, classify_empty(pred.decision, &mask, policy), s.giou_term,
               s.inter, s.uni};
  });
  GresAccumulator acc;
  for (const auto& s : scores) acc.add(s);
  return {make_gres_report(acc), std::move(rows)};
}

RefZomEvaluation evaluate_refzom(std::span<const Prediction> predictions, const Dataset& dataset,
                                 Split split, int jobs) {
  const auto pairs = pair_with_split(predictions, dataset, split);
  std::vector<RefScore> rows(pairs.size());
  parallel_for(pairs.size(), jobs, [&](std::size_t i) {
    const auto& ref = dataset.ref(pairs[i].ref_id);
    const auto gt = ground_truth_mask(dataset, ref.ref_id);
    const auto mask = effective_mask(*pairs[i].prediction, gt.height(), gt.width());
    RefScore r{ref.ref_id, is_empty_target(ref), positive_pixel_count(mask) == 0, 0.0, 0, 0};
    if (r.gt_empty) {
      r.score = r.pred_empty ? 1.0 : 0.0;
    } else {
      r.inter = intersection_area(mask, gt);
      r.uni = union_area(mask, gt);
      r.score = static_cast<double>(r.inter) / static_cast<double>(r.uni);
    }
    rows[i] = r;
  });
  RefZomAccumulator acc;
  for (const auto& r : rows) {
    if (r.gt_empty) {
      ++acc.empty_total;
      if (r.pred_empty) ++acc.empty_correct;
    } else {
      ++acc.target_count;
      acc.iou_sum += r.score;
      acc.inter_sum += r.inter;
      acc.union_sum += r.uni;
    }
  }
  RefZomReport rep;
  rep.accumulator = acc;
  if (acc.target_count > 0) {
    rep.miou = acc.iou_sum / static_cast<double>(acc.target_count);
    rep.oiou = static_cast<double>(acc.inter_sum) / static_cast<double>(acc.union_sum);
  }
  if (acc.empty_total > 0) {
    rep.acc = static_cast<double>(acc.empty_correct) / static_cast<double>(acc.empty_total);
  }
  return {rep, std::move(rows)};
}

RecEvaluation evaluate_rec(std::span<const Prediction> predictions, const Dataset& dataset,
                           Split split, int jobs) {
  const auto pairs = pair_with_split(predictions, dataset, split);
  std::vector<RefScore> rows(pairs.size());
  parallel_for(pairs.size(), jobs, [&](std::size_t i) {
    const auto& ref = dataset.ref(pairs[i].ref_id);
    const auto gt = ground_truth_mask(dataset, ref.ref_id);
    const auto mask = effective_mask(*pairs[i].prediction, gt.height(), gt.width());
    RefScore r{ref.ref_id, is_empty_target(ref), positive_pixel_count(mask) == 0, 0.0, 0, 0};
    if (!r.gt_empty) {
      const auto gt_box = mask_to_bbox(gt);
      const auto pred_box = mask_to_bbox(mask);
      r.score = pred_box ? bbox_iou(*pred_box, *gt_box) : 0.0;
    }
    rows[i] = r;
  });
  RecAccumulator acc;
  for (const auto& r : rows) {
    if (r.gt_empty) {
      ++acc.skipped_empty;
      continue;
    }
    ++acc.total;
    if (r.score > 0.5) ++acc.correct;
  }
  RecReport rep;
  rep.accumulator = acc;
  if (acc.total > 0) rep.precision = static_cast<double>(acc.correct) / static_cast<double>(acc.total);
  return {rep, std::move(rows)};
}

nlohmann::json report_json(const GresEvaluation& e, Split split, const EmptyPolicy& policy,
                           bool include_per_ref) {
  const auto& a = e.report.accumulator;
  nlohmann::json j{{"metric_suite", "gres"},
                   {"split", std::string(split_name(split))},
                   {"policy", policy.name()},
                   {"gIoU", e.report.giou},
                   {"cIoU", e.report.ciou},
                   {"N_acc", opt_json(e.report.n_acc)},
                   {"accumulators",
                    {{"giou_sum", a.giou_sum},
                     {"sample_count", a.sample_count},
                     {"inter_sum", a.inter_sum},
                     {"union_sum", a.union_sum},
                     {"empty_total", a.empty_total},
                     {"empty_correct", a.empty_correct}}}};
  if (include_per_ref) j["per_ref"] = per_ref_json(e.per_ref);
  return j;
}

nlohmann::json report_json(const RefZomEvaluation& e, Split split, bool include_per_ref) {
  const auto& a = e.report.accumulator;
  nlohmann::json j{{"metric_suite", "refzom"},
                   {"split", std::string(split_name(split))},
                   {"policy", "all-zero"},
                   {"oIoU", opt_json(e.report.oiou)},
                   {"mIoU", opt_json(e.report.miou)},
                   {"Acc", opt_json(e.report.acc)},
                   {"accumulators",
                    {{"iou_sum", a.iou_sum},
                     {"target_count", a.target_count},
                     {"inter_sum", a.inter_sum},
                     {"union_sum", a.union_sum},
                     {"empty_total", a.empty_total},
                     {"empty_correct", a.empty_correct}}}};
  if (include_per_ref) j["per_ref"] = per_ref_json(e.per_ref);
  return j;
}

nlohmann::json report_json(const RecEvaluation& e, Split split, bool include_per_ref) {
  const auto& a = e.report.accumulator;
  nlohmann::json j{{"metric_suite", "rec"},
                   {"split", std::string(split_name(split))},
                   {"policy", "box-iou>0.5"},
                   {"Prec@0.5", opt_json(e.report.precision)},
                   {"accumulators",
                    {{"total", a.total}, {"correct", a.correct}, {"skipped_empty", a.skipped_empty}}}};
  if (include_per_ref) j["per_ref"] = per_ref_json(e.per_ref);
  return j;
}

std::string format_table(const GresReport& r, std::string_view row_label, Split split) {
  return table(row_label, split, "gIoU", "cIoU", "N-acc.", fmt_pct(r.giou), fmt_pct(r.ciou),
               fmt_pct(r.n_acc));
}

std::string format_table(const RefZomReport& r, std::string_view row_label, Split split) {
  return table(row_label, split, "oIoU", "mIoU", "Acc", fmt_pct(r.oiou), fmt_pct(r.miou),
               fmt_pct(r.acc));
}

std::string format_table(const RecReport& r, std::string_view row_label, Split split) {
  return table(row_label, split, "Prec@0.5", "", "", fmt_pct(r.precision), "", "");
}

}  // namespace greskit
