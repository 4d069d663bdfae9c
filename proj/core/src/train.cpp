#include "greskit/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <ostream>
#include <set>
#include <thread>

#include <spdlog/spdlog.h>

#include "greskit/error.hpp"
#include "greskit/synth.hpp"

namespace greskit {
namespace {

using ad::Graph;
using ad::Tensor;
using ad::Var;

std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adamw"; }

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adamw") return OptimizerKind::kAdamW;
  throw ConfigError("unknown optimizer \"" + std::string(s) + "\" (expected sgd or adamw)");
}

std::string describe(const LossBreakdown& l) { return l.to_json().dump(); }

// Uniform index in [0, n) from the raw engine output; the engine is fixed,
// so the draw sequence is reproducible across standard libraries.
std::size_t draw_below(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

template <typename T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[draw_below(rng, i)]);
}

int answer_budget(std::span<const std::string> referents) {
  int n = 4;
  for (const auto& r : referents) n += static_cast<int>(split_words(escape_referent(r)).size()) + 3;
  return n + 4;
}

}  // namespace

// ---- sequences and losses ----------------------------------------------

TeacherSequence teacher_sequence(const ToyModel& model, const TrainingExample& ex, QuestionForm form) {
  const auto& cfg = model.config();
  const auto& vocab = model.vocab();
  if (ex.referents.empty()) throw ValidationError("training example has no referents");
  if (ex.gt_empty.size() != ex.referents.size() || ex.masks.size() != ex.referents.size()) {
    throw ValidationError("training example: referents, empty flags and masks disagree in length");
  }
  TeacherSequence s;
  s.tokens = model.prompt_tokens(PromptPlan{ex.referents, form});
  s.answer_start = s.tokens.size();

  std::vector<AnswerEntry> entries;
  for (std::size_t i = 0; i < ex.referents.size(); ++i) {
    const bool rej = cfg.use_rej && ex.gt_empty[i];
    entries.push_back({ex.referents[i], rej ? Decision::kRej : Decision::kSeg});
  }
  const auto answer = build_answer(entries, vocab, cfg.answer_options());
  s.tokens.insert(s.tokens.end(), answer.begin(), answer.end());
  s.tokens.push_back(vocab.special().eos_id);

  std::size_t referent = 0;
  for (std::size_t p = s.answer_start; p < s.tokens.size(); ++p) {
    const auto t = s.tokens[p];
    if (vocab.is_seg(t)) {
      s.seg_positions.push_back(p);
      s.seg_referents.push_back(referent);
    }
    if (vocab.is_seg(t) || vocab.is_rej(t)) ++referent;
  }
  return s;
}

SampleLoss sample_loss(Graph& g, const ToyModel& model, const TrainingExample& ex,
                       const LossWeights& weights) {
  if (ex.image == nullptr) throw ValidationError("training example without an image");
  const auto seq = teacher_sequence(model, ex);
  const auto fr = model.forward(g, *ex.image, seq.tokens, false);

  std::vector<int> lm_rows;
  std::vector<std::int32_t> lm_targets;
  for (std::size_t i = seq.answer_start - 1; i + 1 < seq.tokens.size(); ++i) {
    lm_rows.push_back(fr.rows[i]);
    lm_targets.push_back(seq.tokens[i + 1]);
  }
  const Var lm_logits = model.vocab_logits(g, ad::gather_rows(g, fr.hidden, lm_rows));
  const Var lm = ad::cross_entropy(g, lm_logits, std::move(lm_targets));

  SampleLoss out;
  out.parts.lm = g.value(lm)[0];
  Var total = ad::scale(g, lm, weights.lm);

  const int n = static_cast<int>(seq.seg_positions.size());
  out.mask_count = n;
  if (n > 0) {
    std::vector<int> rows;
    for (auto p : seq.seg_positions) rows.push_back(fr.rows[p]);
    const Var queries = model.extract_queries(g, fr.hidden, rows);
    const Var maps = model.decode_masks(g, queries, model.seg_features(g, *ex.image));
    const int hw = model.config().image_size * model.config().image_size;
    const Var flat = ad::reshape(g, maps, {n, hw});
    std::vector<Var> bce_terms, dice_terms;
    for (int k = 0; k < n; ++k) {
      const auto& gt = ex.masks[seq.seg_referents[static_cast<std::size_t>(k)]];
      if (gt.size() != hw) throw DimensionMismatch("ground-truth mask does not match the model image size");
      const std::vector<double> y(gt.bits().begin(), gt.bits().end());
      const Var row = ad::gather_rows(g, flat, {k});
      bce_terms.push_back(ad::bce_with_logits(g, row, y));
      dice_terms.push_back(ad::dice_loss(g, row, y));
    }
    const double inv = 1.0 / n;
    const Var bce = ad::scale(g, ad::sum(g, ad::concat_rows(g, bce_terms)), inv);
    const Var dice = ad::scale(g, ad::sum(g, ad::concat_rows(g, dice_terms)), inv);
    out.parts.bce = g.value(bce)[0];
    out.parts.dice = g.value(dice)[0];
    total = ad::add(g, total, ad::scale(g, bce, weights.bce));
    total = ad::add(g, total, ad::scale(g, dice, weights.dice));
  }
  out.total = total;
  out.parts.total = g.value(total)[0];
  return out;
}

LossBreakdown batch_loss(const ToyModel& model, std::span<const TrainingExample> batch,
                         const LossWeights& weights, std::vector<Tensor>* grads) {
  if (batch.empty()) throw ValidationError("empty training batch");
  std::vector<double> lm, bce, dice, total;
  for (const auto& ex : batch) {
    Graph g(grads != nullptr);
    const auto s = sample_loss(g, model, ex, weights);
    if (!std::isfinite(s.parts.total)) {
      throw NumericError("non-finite loss on refs starting at " +
                         std::to_string(ex.ref_ids.empty() ? -1 : ex.ref_ids.front()) + ": " +
                         describe(s.parts));
    }
    lm.push_back(s.parts.lm);
    bce.push_back(s.parts.bce);
    dice.push_back(s.parts.dice);
    total.push_back(s.parts.total);
    if (grads) g.backward(s.total, grads);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  if (grads) {
    for (auto& t : *grads) {
      for (auto& v : t.values()) v *= inv;
    }
  }
  return {pairwise_sum(lm) * inv, pairwise_sum(bce) * inv, pairwise_sum(dice) * inv,
          pairwise_sum(total) * inv};
}

// ---- optimizer ----------------------------------------------------------

nlohmann::json OptimizerConfig::to_json() const {
  return {{"kind", optimizer_name(kind)}, {"learning_rate", learning_rate},
          {"clip_norm", clip_norm},       {"beta1", beta1},
          {"beta2", beta2},               {"epsilon", epsilon},
          {"weight_decay", weight_decay}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  try {
    if (j.contains("kind")) c.kind = parse_optimizer(j.at("kind").get<std::string>());
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("optimizer config: ") + e.what());
  }
  return c;
}

Optimizer::Optimizer(OptimizerConfig config, const ad::ParameterSet& params) : config_(config) {
  if (config_.learning_rate < 0) throw ConfigError("learning rate must be non-negative");
  if (config_.kind == OptimizerKind::kAdamW) {
    m_ = params.zero_gradients();
    v_ = params.zero_gradients();
  }
}

double global_norm(std::span<const Tensor> grads) {
  std::vector<double> per;
  per.reserve(grads.size());
  std::vector<double> sq;
  for (const auto& t : grads) {
    sq.assign(t.size(), 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) sq[i] = t[i] * t[i];
    per.push_back(pairwise_sum(sq));
  }
  return std::sqrt(pairwise_sum(per));
}

double Optimizer::step(ad::ParameterSet& params, std::vector<Tensor>& grads) {
  if (grads.size() != static_cast<std::size_t>(params.size())) {
    throw DimensionMismatch("optimizer: gradient count does not match parameter count");
  }
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (config_.clip_norm > 0 && norm > config_.clip_norm) {
    const double k = config_.clip_norm / norm;
    for (auto& t : grads) {
      for (auto& v : t.values()) v *= k;
    }
  }
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::kSgd) {
    for (int i = 0; i < params.size(); ++i) {
      auto& p = params.value(i);
      const auto& gr = grads[static_cast<std::size_t>(i)];
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * gr[k];
    }
    return norm;
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (int i = 0; i < params.size(); ++i) {
    auto& p = params.value(i);
    const auto& gr = grads[static_cast<std::size_t>(i)];
    auto& m = m_[static_cast<std::size_t>(i)];
    auto& v = v_[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = config_.beta1 * m[k] + (1 - config_.beta1) * gr[k];
      v[k] = config_.beta2 * v[k] + (1 - config_.beta2) * gr[k] * gr[k];
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.epsilon);
      p[k] -= lr * (update + config_.weight_decay * p[k]);
    }
  }
  return norm;
}

LossBreakdown train_step(ToyModel& model, std::span<const TrainingExample> batch,
                         const LossWeights& weights, Optimizer& optimizer) {
  auto grads = model.params().zero_gradients();
  const auto loss = batch_loss(model, batch, weights, &grads);
  optimizer.step(model.params(), grads);
  return loss;
}

LossBreakdown train_step(ToyModel& model, std::span<const TrainingExample> batch,
                         const LossWeights& weights, double learning_rate) {
  OptimizerConfig cfg;
  cfg.learning_rate = learning_rate;
  Optimizer opt(cfg, model.params());
  return train_step(model, batch, weights, opt);
}

// ---- training data ------------------------------------------------------

TrainingSet::TrainingSet(const Dataset& dataset, const std::map<ImageId, RgbImage>& images,
                         std::span<const Split> splits) {
  std::map<ImageId, Group> by_image;
  for (const auto& [id, ref] : dataset.refs()) {
    if (std::find(splits.begin(), splits.end(), ref.split) == splits.end()) continue;
    const auto it = images.find(ref.image_id);
    if (it == images.end()) {
      throw IntegrityError("ref " + std::to_string(id) + ": image " + std::to_string(ref.image_id) +
                           " was not loaded");
    }
    auto& group = by_image[ref.image_id];
    group.image = &it->second;
    group.items.push_back({id, ref.expression, is_empty_target(ref), ground_truth_mask(dataset, id)});
    ++ref_count_;
  }
  for (auto& [id, g] : by_image) groups_.push_back(std::move(g));
}

std::vector<TrainingExample> TrainingSet::chunk(const std::vector<std::vector<const Item*>>& order,
                                                const std::vector<const RgbImage*>& images,
                                                int per_prompt) const {
  if (per_prompt < 1) throw ConfigError("referents per prompt must be positive");
  std::vector<TrainingExample> out;
  for (std::size_t gi = 0; gi < order.size(); ++gi) {
    const auto& items = order[gi];
    for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(per_prompt)) {
      TrainingExample ex;
      ex.image = images[gi];
      const auto end = std::min(items.size(), start + static_cast<std::size_t>(per_prompt));
      for (std::size_t k = start; k < end; ++k) {
        ex.ref_ids.push_back(items[k]->ref_id);
        ex.referents.push_back(items[k]->text);
        ex.gt_empty.push_back(items[k]->empty ? 1 : 0);
        ex.masks.push_back(items[k]->mask);
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<TrainingExample> TrainingSet::fixed(int per_prompt) const {
  std::vector<std::vector<const Item*>> order;
  std::vector<const RgbImage*> images;
  for (const auto& g : groups_) {
    images.push_back(g.image);
    auto& o = order.emplace_back();
    for (const auto& it : g.items) o.push_back(&it);
  }
  return chunk(order, images, per_prompt);
}

std::vector<TrainingExample> TrainingSet::shuffled(int per_prompt, std::mt19937_64& rng) const {
  std::vector<std::vector<const Item*>> order;
  std::vector<const RgbImage*> images;
  for (const auto& g : groups_) {
    images.push_back(g.image);
    auto& o = order.emplace_back();
    for (const auto& it : g.items) o.push_back(&it);
    shuffle_in_place(o, rng);
  }
  auto out = chunk(order, images, per_prompt);
  shuffle_in_place(out, rng);
  return out;
}

// ---- training loop ------------------------------------------------------

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (optimizer.learning_rate < 0) throw ConfigError("learning rate must be non-negative");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
}

double TrainConfig::learning_rate_at(int step) const {
  const double base = optimizer.learning_rate;
  if (step < warmup_steps) return base * (step + 1) / warmup_steps;
  if (!cosine_decay || steps <= warmup_steps) return base;
  const double t = static_cast<double>(step - warmup_steps) / (steps - warmup_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"optimizer", optimizer.to_json()},
          {"warmup_steps", warmup_steps},
          {"cosine_decay", cosine_decay},
          {"loss_weights", {{"lm", weights.lm}, {"bce", weights.bce}, {"dice", weights.dice}}},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("optimizer")) c.optimizer = OptimizerConfig::from_json(j.at("optimizer"));
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
    if (j.contains("loss_weights")) {
      const auto& w = j.at("loss_weights");
      c.weights.lm = w.value("lm", c.weights.lm);
      c.weights.bce = w.value("bce", c.weights.bce);
      c.weights.dice = w.value("dice", c.weights.dice);
    }
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<TrainRecord> train(ToyModel& model, const TrainingSet& data, const TrainConfig& config,
                               std::ostream* log) {
  config.validate();
  if (data.ref_count() == 0) throw ValidationError("training set is empty");
  std::mt19937_64 rng(mix_seed(config.seed, 0x7472));
  Optimizer opt(config.optimizer, model.params());
  const int per_prompt = model.config().referents_per_prompt();

  std::vector<TrainingExample> pool;
  std::size_t next = 0;
  std::vector<TrainRecord> history;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<TrainingExample> batch;
    while (static_cast<int>(batch.size()) < config.batch_size) {
      if (next >= pool.size()) {
        pool = data.shuffled(per_prompt, rng);
        next = 0;
      }
      batch.push_back(pool[next++]);
    }
    auto grads = model.params().zero_gradients();
    TrainRecord rec;
    rec.step = step;
    rec.loss = batch_loss(model, batch, config.weights, &grads);
    opt.set_learning_rate(config.learning_rate_at(step));
    rec.grad_norm = opt.step(model.params(), grads);
    if (log) {
      nlohmann::json line = rec.loss.to_json();
      line["step"] = step;
      line["grad_norm"] = rec.grad_norm;
      *log << line.dump() << '\n';
    }
    if (step % 50 == 0 || step + 1 == config.steps) {
      spdlog::debug("step {} total {:.4f} lm {:.4f} bce {:.4f} dice {:.4f} |g| {:.3f}", step,
                    rec.loss.total, rec.loss.lm, rec.loss.bce, rec.loss.dice, rec.grad_norm);
    }
    history.push_back(rec);
  }
  return history;
}

// ---- inference ----------------------------------------------------------

std::vector<Prediction> predict_prompt(const ToyModel& model, const RgbImage& image,
                                       std::span<const RefId> ref_ids,
                                       std::span<const std::string> referents, QuestionForm form) {
  if (ref_ids.size() != referents.size() || referents.empty()) {
    throw ValidationError("predict_prompt: need one ref id per referent");
  }
  const auto& vocab = model.vocab();
  const int size = model.config().image_size;
  const PromptPlan plan{{referents.begin(), referents.end()}, form};
  const auto prompt = model.prompt_tokens(plan);
  const auto generated = model.generate(image, prompt, answer_budget(referents));
  const auto parse = parse_response(generated, vocab);
  for (const auto& d : parse.diagnostics) spdlog::debug("response parse: {}", d);

  std::vector<BinaryMask> decoded;
  const auto seg_positions = select_seg_positions(parse);
  if (!seg_positions.empty()) {
    // Hidden states only depend on the prefix up to the last [SEG].
    std::vector<TokenId> seq = prompt;
    seq.insert(seq.end(), generated.begin(),
               generated.begin() + static_cast<std::ptrdiff_t>(seg_positions.back()) + 1);
    Graph g(false);
    const auto fr = model.forward(g, image, seq, false);
    std::vector<int> rows;
    for (auto p : seg_positions) rows.push_back(fr.rows[prompt.size() + p]);
    const Var maps = model.decode_masks(g, model.extract_queries(g, fr.hidden, rows),
                                        model.seg_features(g, image));
    const auto& m = g.value(maps);
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      decoded.push_back(threshold_logits({m.data() + k * plane, plane}, size, size));
    }
  }
  const auto assigned = assign_masks(parse, decoded, size, size);

  std::vector<Prediction> out;
  for (std::size_t i = 0; i < referents.size(); ++i) {
    Prediction p;
    p.ref_id = ref_ids[i];
    if (i < assigned.size()) {
      p.decision = assigned[i].decision;
      if (p.decision == Decision::kSeg) p.mask = assigned[i].mask;
    } else {
      p.decision = Decision::kSeg;
      p.mask = BinaryMask(size, size);
    }
    out.push_back(std::move(p));
  }
  if (assigned.size() != referents.size()) {
    spdlog::debug("answer had {} entries for {} referents", assigned.size(), referents.size());
  }
  return out;
}

std::vector<Prediction> infer_split(const ToyModel& model, const Dataset& dataset,
                                    const std::map<ImageId, RgbImage>& images, Split split,
                                    const InferenceConfig& config) {
  struct Task {
    const RgbImage* image;
    std::vector<RefId> ids;
    std::vector<std::string> texts;
  };
  const int size = model.config().image_size;
  const int per_prompt = model.config().referents_per_prompt();
  std::map<ImageId, std::vector<RefId>> by_image;
  for (const auto id : dataset.refs_in_split(split)) by_image[dataset.ref(id).image_id].push_back(id);

  std::vector<Task> tasks;
  for (const auto& [image_id, ids] : by_image) {
    const auto& entry = dataset.image(image_id);
    if (entry.height != size || entry.width != size) {
      throw DimensionMismatch("image " + std::to_string(image_id) + " is " + std::to_string(entry.height) +
                              "x" + std::to_string(entry.width) + " but the model works at " +
                              std::to_string(size) + "x" + std::to_string(size));
    }
    const auto it = images.find(image_id);
    if (it == images.end()) throw IntegrityError("image " + std::to_string(image_id) + " was not loaded");
    for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(per_prompt)) {
      Task t{&it->second, {}, {}};
      const auto end = std::min(ids.size(), start + static_cast<std::size_t>(per_prompt));
      for (std::size_t k = start; k < end; ++k) {
        t.ids.push_back(ids[k]);
        t.texts.push_back(dataset.ref(ids[k]).expression);
      }
      tasks.push_back(std::move(t));
    }
  }

  std::vector<std::vector<Prediction>> results(tasks.size());
  std::atomic<std::size_t> cursor{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = cursor++; i < tasks.size(); i = cursor++) {
      try {
        results[i] = predict_prompt(model, *tasks[i].image, tasks[i].ids, tasks[i].texts, config.form);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(config.jobs, static_cast<int>(tasks.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<Prediction> out;
  for (auto& r : results) {
    for (auto& p : r) out.push_back(std::move(p));
  }
  std::sort(out.begin(), out.end(), [](const Prediction& a, const Prediction& b) { return a.ref_id < b.ref_id; });
  return out;
}

std::vector<std::string> dataset_words(const Dataset& dataset) {
  std::set<std::string> words;
  for (const auto& [id, ref] : dataset.refs()) {
    for (auto& w : split_words(ref.expression)) {
      const bool bracketed = w.size() >= 2 && ((w.front() == '[' && w.back() == ']') ||
                                               (w.front() == '<' && w.back() == '>'));
      if (!bracketed) words.insert(std::move(w));
    }
  }
  return {words.begin(), words.end()};
}

}  // namespace greskit
