#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "greskit/checkpoint.hpp"
#include "greskit/error.hpp"
#include "greskit/experiment.hpp"
#include "greskit/gradcheck.hpp"
#include "greskit/metrics.hpp"
#include "greskit/synth.hpp"
#include "greskit/train.hpp"
#include "overlay.hpp"

namespace greskit::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text)) throw IoError("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// foo/report.json -> foo/report.config.json
fs::path config_path_for(const fs::path& output) {
  return output.parent_path() / (output.stem().string() + ".config.json");
}

bool parse_bool(const std::string& flag, const std::string& text) {
  if (text == "true" || text == "1" || text == "on" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "off" || text == "no") return false;
  throw ConfigError(flag + ": expected true or false, got \"" + text + "\"");
}

Split require_split(const std::string& name) {
  const auto s = parse_split(name);
  if (!s) throw ConfigError("unknown split \"" + name + "\" (train, val, testA, testB, test)");
  return *s;
}

std::vector<Split> require_splits(const std::vector<std::string>& names) {
  std::vector<Split> out;
  for (const auto& n : names) out.push_back(require_split(n));
  return out;
}

json split_list(std::span<const Split> splits) {
  json j = json::array();
  for (auto s : splits) j.push_back(split_name(s));
  return j;
}

// Model switches shared by train and ablate.
struct ModelFlags {
  std::string multi_seg, use_rej, prefix, share_seg;
  int num_seg_tokens = 0;

  void add(CLI::App* app) {
    app->add_option("--num-seg-tokens", num_seg_tokens, "referents per prompt (1..10)");
    app->add_option("--multi-seg", multi_seg, "true|false");
    app->add_option("--use-rej", use_rej, "true|false");
    app->add_option("--prefix", prefix, "true|false: expression before each [SEG]/[REJ]");
    app->add_option("--share-seg", share_seg, "true|false: one shared [SEG] row");
  }
  void apply(ToyConfig& m) const {
    if (num_seg_tokens != 0) m.max_targets = num_seg_tokens;
    if (!multi_seg.empty()) m.multi_seg = parse_bool("--multi-seg", multi_seg);
    if (!use_rej.empty()) m.use_rej = parse_bool("--use-rej", use_rej);
    if (!prefix.empty()) m.prefix_expressions = parse_bool("--prefix", prefix);
    if (!share_seg.empty()) m.share_seg_embedding = parse_bool("--share-seg", share_seg);
  }
};

// Optimizer and schedule switches shared by train and ablate.
struct TrainFlags {
  int steps = -1, batch_size = -1, warmup = -1;
  double lr = -1.0;
  std::string optimizer, cosine;

  void add(CLI::App* app) {
    app->add_option("--steps", steps);
    app->add_option("--batch-size", batch_size);
    app->add_option("--lr", lr);
    app->add_option("--optimizer", optimizer, "sgd|adamw")->check(CLI::IsMember({"sgd", "adamw"}));
    app->add_option("--warmup", warmup, "linear warmup steps");
    app->add_option("--cosine", cosine, "true|false: cosine decay after warmup");
  }
  void apply(TrainConfig& t) const {
    if (steps >= 0) t.steps = steps;
    if (batch_size >= 0) t.batch_size = batch_size;
    if (lr >= 0) t.optimizer.learning_rate = lr;
    if (!optimizer.empty()) t.optimizer.kind = optimizer == "adamw" ? OptimizerKind::kAdamW : OptimizerKind::kSgd;
    if (warmup >= 0) t.warmup_steps = warmup;
    if (!cosine.empty()) t.cosine_decay = parse_bool("--cosine", cosine);
  }
};

// ---- synth --------------------------------------------------------------

struct SynthArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> samples;
  int jobs = 1;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  SynthConfig cfg = a.config.empty() ? SynthConfig{} : SynthConfig::from_json(read_json_file(a.config));
  if (a.seed) cfg.seed = *a.seed;
  if (a.samples) cfg.samples = *a.samples;
  cfg.validate();
  const auto data = synth_generate(cfg, a.jobs);
  write_synth_output(a.out, data, cfg);
  write_json(fs::path(a.out) / "config.json", cfg.to_json());
  out << fmt::format("wrote {} images, {} refs to {}\n", data.dataset.images().size(),
                     data.dataset.refs().size(), a.out);
  return 0;
}

// ---- train --------------------------------------------------------------

struct TrainArgs {
  std::string dataset, out, config, variant;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> splits{"train"};
  ModelFlags model;
  TrainFlags train;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  json file = a.config.empty() ? json::object() : read_json_file(a.config);
  ToyConfig mc = ToyConfig::from_json(file.value("model", json::object()));
  TrainConfig tc = TrainConfig::from_json(file.value("train", json::object()));
  std::string variant = file.value("variant", std::string{});
  if (!a.variant.empty()) variant = a.variant;
  if (!variant.empty()) mc = make_variant(variant, mc).model;
  a.model.apply(mc);
  a.train.apply(tc);
  if (a.seed) tc.seed = *a.seed;
  mc.seed = tc.seed;
  mc.validate();
  tc.validate();
  const auto splits = require_splits(a.splits);

  const auto ds = load_dataset_dir(a.dataset);
  ToyModel model(mc, make_vocabulary(dataset_words(ds.dataset)));
  const TrainingSet data(ds.dataset, ds.images, splits);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  json resolved{{"model", mc.to_json()}, {"train", tc.to_json()}, {"train_splits", split_list(splits)}};
  if (!variant.empty()) resolved["variant"] = variant;
  write_json(dir / "config.json", resolved);

  std::ofstream log(dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw IoError("cannot write " + (dir / "train_log.jsonl").string());
  const auto history = train(model, data, tc, &log);
  save_checkpoint(dir / "model.ckpt", model);
  if (!history.empty()) {
    const auto& last = history.back().loss;
    out << fmt::format("trained {} steps on {} refs: total {:.4f} lm {:.4f} bce {:.4f} dice {:.4f}\n",
                       tc.steps, data.ref_count(), last.total, last.lm, last.bce, last.dice);
  }
  return 0;
}

// ---- infer --------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, dataset, split = "val", out, question = "what";
  int jobs = 1;
};

int cmd_infer(const InferArgs& a, std::ostream& out) {
  const auto model = load_checkpoint(a.checkpoint);
  const auto ds = load_dataset_dir(a.dataset);
  InferenceConfig ic;
  ic.form = parse_question_form(a.question);
  ic.jobs = a.jobs;
  const auto split = require_split(a.split);
  const auto preds = infer_split(model, ds.dataset, ds.images, split, ic);
  {
    std::ostringstream os;
    write_predictions(os, preds);
    write_text(a.out, os.str());
  }
  write_json(config_path_for(a.out), {{"model", model.config().to_json()},
                                       {"split", split_name(split)},
                                       {"question", question_form_name(ic.form)}});
  out << fmt::format("wrote {} predictions to {}\n", preds.size(), a.out);
  return 0;
}

// ---- eval ---------------------------------------------------------------

struct EvalArgs {
  std::string predictions, dataset, split = "val", suite = "gres", policy = "explicit", out;
  bool per_ref = false;
  int jobs = 1;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto ds = load_dataset_dir(a.dataset, false);
  const auto preds = read_predictions(fs::path(a.predictions));
  const auto split = require_split(a.split);
  json report;
  json resolved{{"split", split_name(split)}, {"suite", a.suite}};
  if (a.suite == "gres") {
    const auto policy = EmptyPolicy::parse(a.policy);
    resolved["policy"] = policy.name();
    const auto e = evaluate_gres(preds, ds.dataset, split, policy, a.jobs);
    report = report_json(e, split, policy, a.per_ref);
    out << format_table(e.report, "greskit", split);
  } else if (a.suite == "refzom") {
    const auto e = evaluate_refzom(preds, ds.dataset, split, a.jobs);
    report = report_json(e, split, a.per_ref);
    out << format_table(e.report, "greskit", split);
  } else {
    const auto e = evaluate_rec(preds, ds.dataset, split, a.jobs);
    report = report_json(e, split, a.per_ref);
    out << format_table(e.report, "greskit", split);
  }
  if (!a.out.empty()) {
    write_json(a.out, report);
    write_json(config_path_for(a.out), resolved);
  }
  return 0;
}

// ---- overlay ------------------------------------------------------------

struct OverlayArgs {
  std::string predictions, dataset, out, split;
};

int cmd_overlay(const OverlayArgs& a, std::ostream& out) {
  const auto ds = load_dataset_dir(a.dataset);
  const auto preds = read_predictions(fs::path(a.predictions));
  std::optional<Split> only;
  if (!a.split.empty()) only = require_split(a.split);

  std::map<ImageId, std::vector<const Prediction*>> by_image;
  for (const auto& p : preds) {
    if (!ds.dataset.has_ref(p.ref_id)) {
      throw IntegrityError("prediction for unknown ref " + std::to_string(p.ref_id));
    }
    const auto& ref = ds.dataset.ref(p.ref_id);
    if (only && ref.split != *only) continue;
    by_image[ref.image_id].push_back(&p);
  }

  const fs::path dir(a.out);
  fs::create_directories(dir);
  const auto& palette = overlay_palette();
  json legend = json::array();
  for (auto& [image_id, list] : by_image) {
    std::sort(list.begin(), list.end(), [](auto* x, auto* y) { return x->ref_id < y->ref_id; });
    std::vector<OverlayItem> items;
    for (const auto* p : list) items.push_back({p, ds.dataset.ref(p->ref_id).expression});
    const auto r = render_overlay(ds.images.at(image_id), items);
    const std::string file = std::to_string(image_id) + ".ppm";
    write_ppm(dir / file, r.image);
    json refs = json::array();
    for (std::size_t i = 0; i < items.size(); ++i) {
      json e{{"ref_id", items[i].prediction->ref_id},
             {"expression", items[i].expression},
             {"decision", items[i].prediction->decision == Decision::kRej ? "rej" : "seg"}};
      const int ci = r.color_index[i];
      e["color"] = ci < 0 ? json(nullptr) : json(palette[ci]);
      refs.push_back(std::move(e));
    }
    legend.push_back({{"image_id", image_id}, {"file", file}, {"source_height", r.source_height}, {"refs", refs}});
  }
  write_json(dir / "overlay.json", legend);
  write_json(dir / "config.json", {{"split", a.split.empty() ? json(nullptr) : json(a.split)}});
  out << fmt::format("wrote {} overlays to {}\n", by_image.size(), a.out);
  return 0;
}

// ---- gradcheck ----------------------------------------------------------

struct GradArgs {
  std::string config, mode = "full";
  double epsilon = 1e-4;
  double tolerance = -1.0;
  int samples = 128, batch = 2;
  std::uint64_t seed = 0;
};

int cmd_gradcheck(const GradArgs& a, std::ostream& out) {
  json report{{"mode", a.mode}, {"epsilon", a.epsilon}, {"seed", a.seed}};
  double max_err = 0.0;
  double tol = a.tolerance;
  if (a.mode == "full") {
    ToyConfig mc = a.config.empty() ? ToyConfig{} : ToyConfig::from_json(read_json_file(a.config));
    mc.seed = a.seed;
    SynthConfig sc;
    sc.samples = std::max(10, 5 * a.batch);
    sc.image_size = mc.image_size;
    sc.seed = a.seed;
    sc.val_fraction = sc.testa_fraction = sc.testb_fraction = 0.0;
    const auto data = synth_generate(sc);
    ToyModel model(mc, make_vocabulary(dataset_words(data.dataset)));
    const std::vector<Split> train_split{Split::kTrain};
    const TrainingSet set(data.dataset, data.images, train_split);
    auto batch = set.fixed(mc.referents_per_prompt());
    batch.resize(std::min<std::size_t>(batch.size(), static_cast<std::size_t>(std::max(1, a.batch))));
    const auto r = gradient_check(model, batch, a.epsilon, a.samples, a.seed);
    report["result"] = r.to_json();
    max_err = r.max_rel_error;
    if (tol < 0) tol = 1e-4;
  } else if (a.mode == "linear") {
    const auto r = linear_gradient_check(a.epsilon, a.seed);
    report["result"] = r.to_json();
    max_err = r.max_rel_error;
    if (tol < 0) tol = 1e-7;
  } else if (a.mode == "softmax") {
    const auto r = softmax_ce_gradient_check(a.epsilon, a.seed);
    report["result"] = r.to_json();
    max_err = r.max_rel_error;
    if (tol < 0) tol = 1e-6;
  } else {
    json prims = json::object();
    for (const auto& [name, r] : primitive_gradient_checks(a.seed)) {
      prims[name] = r.to_json();
      max_err = std::max(max_err, r.max_rel_error);
    }
    report["result"] = prims;
    if (tol < 0) tol = 1e-6;
  }
  const bool pass = std::isfinite(max_err) && max_err < tol;
  report["max_rel_error"] = max_err;
  report["tolerance"] = tol;
  report["pass"] = pass;
  out << report.dump(2) << "\n";
  return pass ? 0 : static_cast<int>(ExitCode::kNumeric);
}

// ---- ablate -------------------------------------------------------------

struct AblateArgs {
  std::string dataset, out, config;
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> train_splits{"train"};
  std::vector<std::string> eval_splits{"val", "testA", "testB"};
  TrainFlags train;
  ModelFlags model;
  int jobs = 1;
};

std::string metric(const std::optional<double>& v) { return v ? fmt::format("{:8.2f}", 100.0 * *v) : "       -"; }

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  json file = a.config.empty() ? json::object() : read_json_file(a.config);
  ToyConfig base = ToyConfig::from_json(file.value("model", json::object()));
  a.model.apply(base);
  TrainConfig tc = TrainConfig::from_json(file.value("train", json::object()));
  a.train.apply(tc);
  const auto variants = a.variants.empty() ? known_variants() : a.variants;
  const auto train_splits = require_splits(a.train_splits);
  const auto eval_splits = require_splits(a.eval_splits);
  const auto ds = load_dataset_dir(a.dataset);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  json resolved{{"base_model", base.to_json()},
                {"train", tc.to_json()},
                {"variants", variants},
                {"seeds", a.seeds},
                {"train_splits", split_list(train_splits)},
                {"eval_splits", split_list(eval_splits)}};
  write_json(dir / "config.json", resolved);

  json summary = json::array();
  out << fmt::format("{:<12}{:>6}{:>8}{:>8}{:>8}{:>8}\n", "variant", "seed", "gIoU", "cIoU", "N-acc",
                     "multi");
  for (const auto& name : variants) {
    const auto variant = make_variant(name, base);
    for (const auto seed : a.seeds) {
      TrainConfig run = tc;
      run.seed = seed;
      const auto r = run_experiment(ds.dataset, ds.images, variant, run, train_splits, eval_splits, a.jobs,
                                    dir / name / ("seed" + std::to_string(seed)));
      auto j = r.to_json();
      j.erase("train_seconds");
      summary.push_back(std::move(j));
      const auto& all = r.scores.all;
      out << fmt::format("{:<12}{:>6}{}{}{}{}\n", name, seed, metric(all.giou), metric(all.ciou), metric(all.n_acc),
                         metric(r.scores.multi_target.giou));
    }
  }
  write_json(dir / "summary.json", summary);
  return 0;
}

}  // namespace

void configure_logging() {
  const char* env = std::getenv("GRESKIT_LOG");
  if (env == nullptr || *env == '\0') {
    spdlog::set_level(spdlog::level::info);
    return;
  }
  const auto level = spdlog::level::from_str(env);
  // from_str maps unknown names to "off"; only accept that when asked for.
  if (level == spdlog::level::off && std::string_view(env) != "off") {
    spdlog::warn("GRESKIT_LOG=\"{}\" is not a log level, keeping info", env);
    spdlog::set_level(spdlog::level::info);
    return;
  }
  spdlog::set_level(level);
}

LoadedDataset load_dataset_dir(const fs::path& path, bool with_images) {
  const bool is_dir = fs::is_directory(path);
  const fs::path file = is_dir ? path / "dataset.json" : path;
  const fs::path root = is_dir ? path : path.parent_path();
  LoadedDataset out{load_dataset(file), {}};
  if (with_images) out.images = load_images(out.dataset, root);
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"greskit: generalized referring segmentation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "greskit 0.1.0");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic dataset");
  s->add_option("--config", synth.config, "synth config JSON");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--seed", synth.seed);
  s->add_option("--samples", synth.samples, "number of referring expressions");
  s->add_option("--jobs", synth.jobs)->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the toy model");
  t->add_option("--dataset", tr.dataset, "dataset directory or JSON")->required();
  t->add_option("--out", tr.out, "run directory")->required();
  t->add_option("--config", tr.config, "JSON with optional \"model\", \"train\" and \"variant\"");
  t->add_option("--variant", tr.variant, "named ablation preset");
  t->add_option("--seed", tr.seed);
  t->add_option("--split", tr.splits, "training splits");
  tr.model.add(t);
  tr.train.add(t);

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "predict every ref of a split");
  i->add_option("--checkpoint", inf.checkpoint)->required();
  i->add_option("--dataset", inf.dataset)->required();
  i->add_option("--split", inf.split);
  i->add_option("--out", inf.out, "predictions JSONL")->required();
  i->add_option("--question", inf.question, "what|where|show|outline|segment");
  i->add_option("--jobs", inf.jobs)->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score predictions");
  e->add_option("--predictions", ev.predictions)->required();
  e->add_option("--dataset", ev.dataset)->required();
  e->add_option("--split", ev.split);
  e->add_option("--suite", ev.suite)->check(CLI::IsMember({"gres", "refzom", "rec"}));
  e->add_option("--policy", ev.policy, "explicit|pixel:<N>");
  e->add_option("--out", ev.out, "report JSON");
  e->add_flag("--per-ref", ev.per_ref, "include per-ref scores in the report");
  e->add_option("--jobs", ev.jobs)->check(CLI::PositiveNumber);

  OverlayArgs ov;
  auto* o = app.add_subcommand("overlay", "paint predictions onto their images");
  o->add_option("--predictions", ov.predictions)->required();
  o->add_option("--dataset", ov.dataset)->required();
  o->add_option("--out", ov.out, "output directory")->required();
  o->add_option("--split", ov.split, "only refs of this split");

  GradArgs gc;
  auto* g = app.add_subcommand("gradcheck", "compare analytic and numeric gradients");
  g->add_option("--config", gc.config, "model config JSON");
  g->add_option("--mode", gc.mode)->check(CLI::IsMember({"full", "linear", "softmax", "primitives"}));
  g->add_option("--epsilon", gc.epsilon);
  g->add_option("--tolerance", gc.tolerance);
  g->add_option("--samples", gc.samples);
  g->add_option("--batch", gc.batch);
  g->add_option("--seed", gc.seed);

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "train and score a set of variants over seeds");
  b->add_option("--dataset", ab.dataset)->required();
  b->add_option("--out", ab.out)->required();
  b->add_option("--config", ab.config, "JSON with optional \"model\" and \"train\"");
  b->add_option("--variants", ab.variants)->delimiter(',');
  b->add_option("--seeds", ab.seeds)->delimiter(',');
  b->add_option("--train-split", ab.train_splits)->delimiter(',');
  b->add_option("--eval-split", ab.eval_splits)->delimiter(',');
  b->add_option("--jobs", ab.jobs)->check(CLI::PositiveNumber);
  ab.train.add(b);
  ab.model.add(b);

  std::vector<char*> argv;
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kValidation);
  }

  try {
    if (s->parsed()) return cmd_synth(synth, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (i->parsed()) return cmd_infer(inf, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (o->parsed()) return cmd_overlay(ov, out);
    if (g->parsed()) return cmd_gradcheck(gc, out);
    if (b->parsed()) return cmd_ablate(ab, out);
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return static_cast<int>(ex.code());
  } catch (const fs::filesystem_error& ex) {
    err << "error: " << ex.what() << "\n";
    return static_cast<int>(ExitCode::kIo);
  }
  return static_cast<int>(ExitCode::kValidation);
}

}  // namespace greskit::cli
