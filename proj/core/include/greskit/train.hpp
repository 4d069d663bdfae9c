#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "greskit/annotations.hpp"
#include "greskit/autodiff.hpp"
#include "greskit/image.hpp"
#include "greskit/losses.hpp"
#include "greskit/protocol.hpp"
#include "greskit/toymodel.hpp"

namespace greskit {

// One prompt worth of referents on one image.
struct TrainingExample {
  const RgbImage* image = nullptr;
  std::vector<RefId> ref_ids;
  std::vector<std::string> referents;
  std::vector<std::uint8_t> gt_empty;
  std::vector<BinaryMask> masks;  // ground truth at image resolution
};

// <s> <image> question answer </s>, with the bookkeeping the losses need.
struct TeacherSequence {
  std::vector<TokenId> tokens;
  std::size_t answer_start = 0;
  std::vector<std::size_t> seg_positions;  // token index of each [SEG]
  std::vector<std::size_t> seg_referents;  // referent supervised by each [SEG]
};

// The answer marks empty referents [REJ] when the model uses rejection,
// otherwise every referent gets a [SEG] and its (possibly empty) mask.
TeacherSequence teacher_sequence(const ToyModel& model, const TrainingExample& example,
                                 QuestionForm form = QuestionForm::kWhat);

struct SampleLoss {
  ad::Var total;
  LossBreakdown parts;
  int mask_count = 0;
};

// LM loss over the answer tokens (and eos), plus BCE/DICE averaged over
// the masks decoded from the answer's [SEG] tokens. Without [SEG] tokens
// the mask terms are zero and the segmentation branch is never built.
SampleLoss sample_loss(ad::Graph& g, const ToyModel& model, const TrainingExample& example,
                       const LossWeights& weights = {});

// Batch-mean loss; gradients (if given) are accumulated per sample in
// batch order and scaled by 1/batch.
LossBreakdown batch_loss(const ToyModel& model, std::span<const TrainingExample> batch,
                         const LossWeights& weights, std::vector<ad::Tensor>* grads);

enum class OptimizerKind { kSgd, kAdamW };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double learning_rate = 0.05;
  double clip_norm = 1.0;  // <= 0 disables clipping
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;

  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

class Optimizer {
 public:
  Optimizer(OptimizerConfig config, const ad::ParameterSet& params);

  // Clips `grads` to the global norm, then updates. Returns the norm before
  // clipping; throws NumericError if it is not finite.
  double step(ad::ParameterSet& params, std::vector<ad::Tensor>& grads);
  const OptimizerConfig& config() const noexcept { return config_; }
  void set_learning_rate(double lr) noexcept { config_.learning_rate = lr; }

 private:
  OptimizerConfig config_;
  std::vector<ad::Tensor> m_, v_;
  std::int64_t t_ = 0;
};

double global_norm(std::span<const ad::Tensor> grads);

// One update. Throws NumericError (with the loss parts) on a NaN loss.
LossBreakdown train_step(ToyModel& model, std::span<const TrainingExample> batch,
                         const LossWeights& weights, Optimizer& optimizer);
// Plain gradient descent with clipping at 1.0.
LossBreakdown train_step(ToyModel& model, std::span<const TrainingExample> batch,
                         const LossWeights& weights, double learning_rate);

// Refs of the chosen splits grouped by image, with masks materialized.
class TrainingSet {
 public:
  TrainingSet(const Dataset& dataset, const std::map<ImageId, RgbImage>& images,
              std::span<const Split> splits);

  // Each image's refs in ref_id order, cut into prompts of `per_prompt`.
  std::vector<TrainingExample> fixed(int per_prompt) const;
  // Same, but refs shuffled within each image and prompts shuffled overall.
  std::vector<TrainingExample> shuffled(int per_prompt, std::mt19937_64& rng) const;

  std::size_t ref_count() const noexcept { return ref_count_; }
  std::size_t image_count() const noexcept { return groups_.size(); }

 private:
  struct Item {
    RefId ref_id;
    std::string text;
    bool empty;
    BinaryMask mask;
  };
  struct Group {
    const RgbImage* image;
    std::vector<Item> items;
  };
  std::vector<TrainingExample> chunk(const std::vector<std::vector<const Item*>>& order,
                                     const std::vector<const RgbImage*>& images,
                                     int per_prompt) const;

  std::vector<Group> groups_;
  std::size_t ref_count_ = 0;
};

struct TrainConfig {
  int steps = 600;
  int batch_size = 8;
  OptimizerConfig optimizer;
  // Linear warmup over warmup_steps, then optional cosine decay to zero.
  int warmup_steps = 0;
  bool cosine_decay = false;
  LossWeights weights;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);

  double learning_rate_at(int step) const;
};

struct TrainRecord {
  int step = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;
};

// Runs config.steps updates, reshuffling prompts every pass over the data.
// Each record is also written to `log` (if given) as one JSON line.
std::vector<TrainRecord> train(ToyModel& model, const TrainingSet& data, const TrainConfig& config,
                               std::ostream* log = nullptr);

struct InferenceConfig {
  QuestionForm form = QuestionForm::kWhat;
  int jobs = 1;
};

// Generates an answer for up to referents_per_prompt() referents and turns
// it into one prediction per referent. Entry i of the parsed answer is
// matched to referent i; a referent without an entry becomes a [SEG]
// prediction with an all-background mask, and surplus entries are ignored.
std::vector<Prediction> predict_prompt(const ToyModel& model, const RgbImage& image,
                                       std::span<const RefId> ref_ids,
                                       std::span<const std::string> referents,
                                       QuestionForm form = QuestionForm::kWhat);

// One prediction per ref of the split, sorted by ref_id. Refs of an image
// are packed into prompts in ref_id order.
std::vector<Prediction> infer_split(const ToyModel& model, const Dataset& dataset,
                                    const std::map<ImageId, RgbImage>& images, Split split,
                                    const InferenceConfig& config = {});

// Words of every expression in the dataset, in first-seen order.
std::vector<std::string> dataset_words(const Dataset& dataset);

}  // namespace greskit
