#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "greskit/metrics.hpp"
#include "greskit/train.hpp"

namespace greskit {

// A model configuration under test and the empty-target policy it is
// scored with. Models without [REJ] can only signal "empty" through an
// (almost) empty mask, so they are scored with the pixel threshold.
struct Variant {
  std::string name;
  ToyConfig model;
  EmptyPolicy policy;
};

EmptyPolicy default_policy(const ToyConfig& model);

// Named ablations of `base`:
//   full        multi [SEG] + [REJ] + expression prefix
//   no_rej      no [REJ]
//   single_seg  one referent per prompt, no [REJ], prefix kept
//   no_prefix   answers without expression prefixes
//   no_share    indexed [SEG] bank instead of one shared row
//   seg<k>      full, with k referents per prompt (1..10)
Variant make_variant(const std::string& name, const ToyConfig& base);
std::vector<std::string> known_variants();

struct GresSubsets {
  GresReport all;
  GresReport multi_target;   // refs with two or more objects
  GresReport single_target;  // refs with exactly one object
  GresReport empty_target;   // refs with no object
};

// Splits per-ref GRES terms by target cardinality.
GresSubsets gres_subsets(std::span<const RefScore> per_ref, const Dataset& dataset);

struct ExperimentResult {
  std::string variant;
  std::uint64_t seed = 0;
  GresSubsets scores;
  LossBreakdown final_loss;
  double train_seconds = 0.0;

  nlohmann::json to_json() const;
};

// Trains a fresh model (seeded from train.seed) on `train_splits`, infers
// on `eval_splits` and scores the union of those refs. When `out_dir` is
// non-empty it receives config.json, train_log.jsonl, model.ckpt,
// predictions.jsonl and report.json.
ExperimentResult run_experiment(const Dataset& dataset, const std::map<ImageId, RgbImage>& images,
                                const Variant& variant, const TrainConfig& train,
                                std::span<const Split> train_splits,
                                std::span<const Split> eval_splits, int jobs = 1,
                                const std::filesystem::path& out_dir = {});

}  // namespace greskit
