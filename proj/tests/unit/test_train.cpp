#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "greskit/error.hpp"
#include "greskit/synth.hpp"
#include "greskit/train.hpp"

using namespace greskit;

namespace {

const SynthOutput& tiny_data() {
  static const SynthOutput out = [] {
    SynthConfig sc;
    sc.samples = 64;
    sc.seed = 8;
    sc.val_fraction = 0.25;
    sc.testa_fraction = 0.0;
    sc.testb_fraction = 0.0;
    return synth_generate(sc);
  }();
  return out;
}

ToyModel small_model(std::uint64_t seed, ToyConfig c = {}) {
  c.d_model = 32;
  c.decoder_layers = 1;
  c.seed = seed;
  return ToyModel(c, make_vocabulary(dataset_words(tiny_data().dataset)));
}

TrainingSet all_refs() {
  const std::vector<Split> splits{Split::kTrain, Split::kVal};
  return TrainingSet(tiny_data().dataset, tiny_data().images, splits);
}

TrainConfig quick(int steps, double lr) {
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = 2;
  tc.optimizer.learning_rate = lr;
  tc.seed = 3;
  return tc;
}

}  // namespace

TEST_CASE("same seed gives the same parameters after training") {
  const auto data = all_refs();
  auto a = small_model(1), b = small_model(1);
  train(a, data, quick(10, 0.05));
  train(b, data, quick(10, 0.05));
  CHECK(parameter_checksum(a.params()) == parameter_checksum(b.params()));
  CHECK(parameter_checksum(a.params()) != parameter_checksum(small_model(1).params()));
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  auto m = small_model(2);
  const auto before = parameter_checksum(m.params());
  std::ostringstream log;
  const auto records = train(m, all_refs(), quick(3, 0.0), &log);
  CHECK(parameter_checksum(m.params()) == before);
  CHECK(records.size() == 3);
  std::istringstream lines(log.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("step").get<int>() == n++);
    CHECK(j.contains("grad_norm"));
  }
  CHECK(n == 3);
}

TEST_CASE("a small set can be overfit") {
  auto m = small_model(3);
  TrainingSet data(tiny_data().dataset, tiny_data().images, std::vector<Split>{Split::kTrain});
  REQUIRE(data.ref_count() <= 64);
  auto tc = quick(200, 0.003);
  tc.optimizer.kind = OptimizerKind::kAdamW;
  tc.batch_size = 4;
  const auto records = train(m, data, tc);
  CHECK(records.back().loss.total < 0.5 * records.front().loss.total);
}

TEST_CASE("non-finite parameters raise NumericError") {
  auto m = small_model(4);
  m.params().value(m.params().index("mask_decoder.scale"))[0] = std::numeric_limits<double>::quiet_NaN();
  m.params().value(0)[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(train(m, all_refs(), quick(1, 0.05)), NumericError);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig tc = quick(100, 0.1);
  CHECK(tc.learning_rate_at(50) == 0.1);
  tc.warmup_steps = 10;
  CHECK(tc.learning_rate_at(0) == doctest::Approx(0.01));
  CHECK(tc.learning_rate_at(9) == doctest::Approx(0.1));
  CHECK(tc.learning_rate_at(60) == 0.1);
  tc.cosine_decay = true;
  CHECK(tc.learning_rate_at(10) == doctest::Approx(0.1));
  CHECK(tc.learning_rate_at(55) == doctest::Approx(0.05));
  CHECK(tc.learning_rate_at(100) == doctest::Approx(0.0).epsilon(1e-12));
  for (int s = 11; s < 100; ++s) CHECK(tc.learning_rate_at(s) <= tc.learning_rate_at(s - 1));
  CHECK(TrainConfig::from_json(tc.to_json()).to_json() == tc.to_json());
  tc.warmup_steps = -1;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("teacher sequences follow the answer format") {
  const auto data = all_refs().fixed(3);
  const auto it = std::find_if(data.begin(), data.end(), [](const TrainingExample& e) {
    return std::count(e.gt_empty.begin(), e.gt_empty.end(), 1) > 0 && e.referents.size() > 1;
  });
  REQUIRE(it != data.end());
  const auto m = small_model(5);
  const auto seq = teacher_sequence(m, *it);
  const std::vector<TokenId> answer(seq.tokens.begin() + static_cast<long>(seq.answer_start), seq.tokens.end() - 1);
  CHECK(seq.tokens.back() == m.vocab().special().eos_id);
  const auto parsed = parse_response(answer, m.vocab());
  REQUIRE(parsed.entries.size() == it->referents.size());
  std::size_t segs = 0;
  for (std::size_t i = 0; i < parsed.entries.size(); ++i) {
    CHECK(parsed.entries[i].decision == (it->gt_empty[i] ? Decision::kRej : Decision::kSeg));
    segs += it->gt_empty[i] == 0;
  }
  CHECK(seq.seg_positions.size() == segs);

  ToyConfig no_rej;
  no_rej.use_rej = false;
  const auto m2 = small_model(5, no_rej);
  CHECK(teacher_sequence(m2, *it).seg_positions.size() == it->referents.size());
}

TEST_CASE("all-rejected prompts have no mask loss and no decoder gradient") {
  const auto m = small_model(6);
  TrainingExample ex;
  ex.image = &tiny_data().images.begin()->second;
  ex.ref_ids = {1, 2};
  ex.referents = {"red circle", "blue triangle"};
  ex.gt_empty = {1, 1};
  ex.masks = {BinaryMask(64, 64), BinaryMask(64, 64)};
  ad::Graph g;
  const auto loss = sample_loss(g, m, ex);
  CHECK(loss.mask_count == 0);
  CHECK(loss.parts.bce == 0.0);
  CHECK(loss.parts.dice == 0.0);
  CHECK(loss.parts.lm > 0.0);
  auto grads = m.params().zero_gradients();
  g.backward(loss.total, &grads);
  for (int i = 0; i < m.params().size(); ++i) {
    const auto& name = m.params().name(i);
    const bool seg_branch = name.starts_with("mask_decoder") || name.starts_with("query_proj") ||
                            name.starts_with("seg_encoder");
    if (!seg_branch) continue;
    for (double v : grads[i].values()) REQUIRE(v == 0.0);
  }
}

TEST_CASE("inference writes one prediction per ref") {
  const auto m = small_model(7);
  const auto& ds = tiny_data().dataset;
  const auto preds = infer_split(m, ds, tiny_data().images, Split::kVal);
  CHECK(preds.size() == ds.refs_in_split(Split::kVal).size());
  for (std::size_t i = 1; i < preds.size(); ++i) CHECK(preds[i - 1].ref_id < preds[i].ref_id);
  for (const auto& p : preds) {
    if (p.decision == Decision::kRej) CHECK_FALSE(p.mask.has_value());
    if (p.decision == Decision::kSeg) {
      REQUIRE(p.mask.has_value());
      CHECK(p.mask->height() == 64);
    }
  }
  InferenceConfig two;
  two.jobs = 2;
  const auto again = infer_split(m, ds, tiny_data().images, Split::kVal, two);
  CHECK(again.size() == preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    CHECK(prediction_to_json(again[i]) == prediction_to_json(preds[i]));
  }

  auto images = tiny_data().images;
  images.at(ds.ref(ds.refs_in_split(Split::kTrain).front()).image_id) = RgbImage(32, 32);
  CHECK_THROWS_AS(infer_split(m, ds, images, Split::kTrain), DimensionMismatch);
}

TEST_CASE("predict_prompt pads missing entries with empty [SEG] masks") {
  const auto m = small_model(9);
  const std::vector<RefId> ids{1, 2};
  const std::vector<std::string> refs{"red circle", "green square"};
  const auto preds = predict_prompt(m, tiny_data().images.begin()->second, ids, refs);
  REQUIRE(preds.size() == 2);
  CHECK(preds[0].ref_id == 1);
  CHECK(preds[1].ref_id == 2);
}
