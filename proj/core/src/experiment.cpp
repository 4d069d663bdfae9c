#include "greskit/experiment.hpp"

#include <chrono>
#include <fstream>

#include <spdlog/spdlog.h>

#include "greskit/checkpoint.hpp"
#include "greskit/error.hpp"

namespace greskit {
namespace {

nlohmann::json report_to_json(const GresReport& r) {
  nlohmann::json j{{"gIoU", r.giou},
                   {"cIoU", r.ciou},
                   {"refs", r.accumulator.sample_count},
                   {"inter_sum", r.accumulator.inter_sum},
                   {"union_sum", r.accumulator.union_sum}};
  j["N-acc"] = r.n_acc ? nlohmann::json(*r.n_acc) : nlohmann::json(nullptr);
  return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text)) throw IoError("cannot write " + path.string());
}

}  // namespace

EmptyPolicy default_policy(const ToyConfig& model) {
  return model.use_rej ? EmptyPolicy::explicit_token() : EmptyPolicy::pixel_threshold(50);
}

std::vector<std::string> known_variants() {
  return {"full", "no_rej", "single_seg", "no_prefix", "no_share", "seg1", "seg3", "seg5", "seg10"};
}

Variant make_variant(const std::string& name, const ToyConfig& base) {
  ToyConfig m = base;
  m.multi_seg = m.use_rej = m.prefix_expressions = m.share_seg_embedding = true;
  if (name == "full") {
  } else if (name == "no_rej") {
    m.use_rej = false;
  } else if (name == "single_seg") {
    m.multi_seg = false;
    m.use_rej = false;
  } else if (name == "no_prefix") {
    m.prefix_expressions = false;
  } else if (name == "no_share") {
    m.share_seg_embedding = false;
  } else if (name.size() > 3 && name.starts_with("seg")) {
    int k = 0;
    try {
      k = std::stoi(name.substr(3));
    } catch (const std::exception&) {
      throw ConfigError("unknown variant \"" + name + "\"");
    }
    if (k < 1 || k > kMaxReferents) throw ConfigError("variant " + name + ": token count out of range");
    m.max_targets = k;
  } else {
    throw ConfigError("unknown variant \"" + name + "\"");
  }
  m.validate();
  return {name, m, default_policy(m)};
}

GresSubsets gres_subsets(std::span<const RefScore> per_ref, const Dataset& dataset) {
  GresAccumulator all, multi, single, empty;
  for (const auto& r : per_ref) {
    GresSampleScore s;
    s.giou_term = r.score;
    s.inter = r.inter;
    s.uni = r.uni;
    s.counts_for_ciou = !(r.gt_empty && r.pred_empty);
    if (r.gt_empty) s.empty_outcome = r.pred_empty ? EmptyOutcome::kCorrect : EmptyOutcome::kWrong;
    all.add(s);
    const auto n = dataset.ref(r.ref_id).ann_ids.size();
    (n == 0 ? empty : n == 1 ? single : multi).add(s);
  }
  return {make_gres_report(all), make_gres_report(multi), make_gres_report(single),
          make_gres_report(empty)};
}

nlohmann::json ExperimentResult::to_json() const {
  return {{"variant", variant},
          {"seed", seed},
          {"all", report_to_json(scores.all)},
          {"multi_target", report_to_json(scores.multi_target)},
          {"single_target", report_to_json(scores.single_target)},
          {"empty_target", report_to_json(scores.empty_target)},
          {"final_loss", final_loss.to_json()},
          {"train_seconds", train_seconds}};
}

ExperimentResult run_experiment(const Dataset& dataset, const std::map<ImageId, RgbImage>& images,
                                const Variant& variant, const TrainConfig& train_cfg,
                                std::span<const Split> train_splits,
                                std::span<const Split> eval_splits, int jobs,
                                const std::filesystem::path& out_dir) {
  ToyConfig mc = variant.model;
  mc.seed = train_cfg.seed;
  ToyModel model(mc, make_vocabulary(dataset_words(dataset)));
  const TrainingSet data(dataset, images, train_splits);

  const bool write = !out_dir.empty();
  if (write) {
    std::filesystem::create_directories(out_dir);
    nlohmann::json cfg{{"variant", variant.name},
                       {"model", mc.to_json()},
                       {"train", train_cfg.to_json()},
                       {"policy", variant.policy.name()}};
    auto& tr = cfg["train_splits"] = nlohmann::json::array();
    for (auto s : train_splits) tr.push_back(split_name(s));
    auto& ev = cfg["eval_splits"] = nlohmann::json::array();
    for (auto s : eval_splits) ev.push_back(split_name(s));
    write_text(out_dir / "config.json", cfg.dump(2) + "\n");
  }

  std::ofstream log;
  if (write) {
    log.open(out_dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
    if (!log) throw IoError("cannot write " + (out_dir / "train_log.jsonl").string());
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto history = train(model, data, train_cfg, write ? &log : nullptr);
  const auto t1 = std::chrono::steady_clock::now();

  ExperimentResult result;
  result.variant = variant.name;
  result.seed = train_cfg.seed;
  result.train_seconds = std::chrono::duration<double>(t1 - t0).count();
  if (!history.empty()) result.final_loss = history.back().loss;

  std::vector<Prediction> all_preds;
  std::vector<RefScore> per_ref;
  nlohmann::json split_reports = nlohmann::json::object();
  InferenceConfig ic;
  ic.jobs = jobs;
  for (const auto split : eval_splits) {
    auto preds = infer_split(model, dataset, images, split, ic);
    const auto eval = evaluate_gres(preds, dataset, split, variant.policy, jobs);
    split_reports[std::string(split_name(split))] = report_to_json(eval.report);
    per_ref.insert(per_ref.end(), eval.per_ref.begin(), eval.per_ref.end());
    all_preds.insert(all_preds.end(), std::make_move_iterator(preds.begin()),
                     std::make_move_iterator(preds.end()));
  }
  result.scores = gres_subsets(per_ref, dataset);

  if (write) {
    save_checkpoint(out_dir / "model.ckpt", model);
    write_predictions(out_dir / "predictions.jsonl", all_preds);
    auto report = result.to_json();
    report.erase("train_seconds");  // keep the report byte-stable across reruns
    report["splits"] = split_reports;
    write_text(out_dir / "report.json", report.dump(2) + "\n");
  }
  spdlog::info("{} seed {}: gIoU {:.4f} cIoU {:.4f} N-acc {} multi gIoU {:.4f} ({:.1f}s)", variant.name,
               result.seed, result.scores.all.giou, result.scores.all.ciou,
               result.scores.all.n_acc ? fmt::format("{:.4f}", *result.scores.all.n_acc) : "n/a",
               result.scores.multi_target.giou, result.train_seconds);
  return result;
}

}  // namespace greskit
