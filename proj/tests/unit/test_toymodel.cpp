#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "greskit/checkpoint.hpp"
#include "greskit/error.hpp"
#include "greskit/synth.hpp"
#include "greskit/toymodel.hpp"
#include "greskit/train.hpp"

using namespace greskit;
using ad::Graph;
using ad::Tensor;

namespace {

struct Fixture {
  SynthOutput data;
  Vocabulary vocab;
  ToyConfig config;

  explicit Fixture(ToyConfig c = {}) : data(make_data()), vocab(make_vocabulary(dataset_words(data.dataset))), config(c) {}

  static SynthOutput make_data() {
    SynthConfig sc;
    sc.samples = 40;
    sc.seed = 21;
    return synth_generate(sc);
  }
  const RgbImage& image() const { return data.images.begin()->second; }
};

std::vector<TokenId> answer_prompt(const ToyModel& m, const std::vector<std::string>& refs,
                                   const std::vector<Decision>& decisions) {
  auto tokens = m.prompt_tokens(PromptPlan{refs, QuestionForm::kWhat});
  std::vector<AnswerEntry> entries;
  for (std::size_t i = 0; i < refs.size(); ++i) entries.push_back({refs[i], decisions[i]});
  const auto ans = build_answer(entries, m.vocab(), m.config().answer_options());
  tokens.insert(tokens.end(), ans.begin(), ans.end());
  return tokens;
}

}  // namespace

TEST_CASE("config validation") {
  ToyConfig c;
  CHECK_NOTHROW(c.validate());
  c.patch_size = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.max_targets = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.max_targets = 11;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(ToyConfig::from_json(ToyConfig{}.to_json()).to_json() == ToyConfig{}.to_json());
  CHECK(ToyConfig{}.visual_token_count() == 64);
}

TEST_CASE("encodings have the documented shapes") {
  Fixture f;
  const ToyModel m(f.config, f.vocab);
  const auto e = m.encode_image(f.image());
  CHECK(e.visual_tokens.shape() == std::vector<int>{64, 64});
  CHECK(e.seg_features.shape() == std::vector<int>{16, 16, 32});

  const auto tokens = m.prompt_tokens(PromptPlan{{"red circle"}, QuestionForm::kWhat});
  Graph g(false);
  const auto r = m.forward(g, f.image(), tokens, true);
  CHECK(g.value(r.hidden).rows() == static_cast<int>(tokens.size()) - 1 + 64);
  CHECK(g.value(r.logits).cols() == static_cast<int>(f.vocab.size()));
  CHECK(r.rows[1] == -1);
  CHECK(r.rows[2] == 1 + 64);

  RgbImage wrong(32, 32);
  CHECK_THROWS_AS(m.encode_image(wrong), DimensionMismatch);
  const std::vector<TokenId> no_image{f.vocab.special().bos_id};
  CHECK_THROWS_AS(m.forward_logits(f.image(), no_image), ValidationError);
}

TEST_CASE("future tokens never change earlier logits") {
  Fixture f;
  const ToyModel m(f.config, f.vocab);
  auto tokens = answer_prompt(m, {"red circle", "blue square"}, {Decision::kSeg, Decision::kRej});
  const auto base = m.forward_logits(f.image(), tokens);
  const int v = base.cols();
  const std::size_t cut = tokens.size() - 4;
  auto changed = tokens;
  for (std::size_t i = cut; i < changed.size(); ++i) changed[i] = f.vocab.id("green");
  const auto other = m.forward_logits(f.image(), changed);
  // Rows of tokens before `cut` (spliced index cut - 1 + 64) are bitwise equal.
  const int last_row = static_cast<int>(cut) - 1 + 63;
  for (int r = 0; r <= last_row; ++r) {
    for (int k = 0; k < v; ++k) REQUIRE(base[r * v + k] == other[r * v + k]);
  }
  bool differs = false;
  for (std::size_t k = static_cast<std::size_t>((last_row + 1) * v); k < base.size(); ++k) differs |= base[k] != other[k];
  CHECK(differs);
}

TEST_CASE("mask decoder contracts") {
  Fixture f;
  const ToyModel m(f.config, f.vocab);
  const int c = f.config.seg_channels, side = f.config.seg_feature_size, size = f.config.image_size;
  Graph g(false);
  const auto feats = m.seg_features(g, f.image());

  // Zero query -> constant zero map.
  const auto zero = m.decode_masks(g, g.constant(Tensor({1, c}, 0.0)), feats);
  for (double v : g.value(zero).values()) CHECK(v == 0.0);

  // Explicit per-cell dot product, then separable bilinear resampling.
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  Tensor q({2, c});
  for (auto& v : q.values()) v = n(rng);
  const Tensor fv = g.value(feats);
  const auto maps = m.decode_masks(g, g.constant(q), feats);
  const double scale = m.params().value(m.params().index("mask_decoder.scale"))[0];
  const auto w = ad::bilinear_weights(side, size);
  for (int k = 0; k < 2; ++k) {
    std::vector<double> cell(side * side);
    for (int i = 0; i < side * side; ++i) {
      double dot = 0.0;
      for (int ch = 0; ch < c; ++ch) dot += q[k * c + ch] * fv[i * c + ch];
      cell[i] = scale * dot / std::sqrt(static_cast<double>(c));
    }
    for (int y = 0; y < size; y += 7) {
      for (int x = 0; x < size; x += 5) {
        double want = 0.0;
        for (int i = 0; i < side; ++i) {
          for (int j = 0; j < side; ++j) want += w[y * side + i] * w[x * side + j] * cell[i * side + j];
        }
        CHECK(g.value(maps)[(k * size + y) * size + x] == doctest::Approx(want).epsilon(1e-10));
      }
    }
  }

  // Swapping queries swaps maps.
  Tensor swapped({2, c});
  for (int ch = 0; ch < c; ++ch) {
    swapped[ch] = q[c + ch];
    swapped[c + ch] = q[ch];
  }
  const Tensor a = g.value(maps);
  const Tensor b = g.value(m.decode_masks(g, g.constant(swapped), feats));
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (std::size_t i = 0; i < plane; ++i) {
    CHECK(a[i] == b[plane + i]);
    CHECK(a[plane + i] == b[i]);
  }
  CHECK_THROWS_AS(m.decode_masks(g, g.constant(Tensor({1, c + 1}, 0.0)), feats), DimensionMismatch);
}

TEST_CASE("shared [SEG] rows make referent order a pure relabeling") {
  Fixture f;
  const ToyModel m(f.config, f.vocab);
  const std::vector<AnswerEntry> ab{{"red circle", Decision::kSeg}, {"blue square", Decision::kSeg}};
  const std::vector<AnswerEntry> ba{{"blue square", Decision::kSeg}, {"red circle", Decision::kSeg}};
  const auto t1 = build_answer(ab, f.vocab, m.config().answer_options());
  const auto t2 = build_answer(ba, f.vocab, m.config().answer_options());
  // Every mask query comes from the same embedding row whatever the order.
  const auto p1 = select_seg_positions(parse_response(t1, f.vocab));
  const auto p2 = select_seg_positions(parse_response(t2, f.vocab));
  REQUIRE(p1.size() == 2);
  REQUIRE(p2.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) CHECK(t1[p1[i]] == t2[p2[i]]);
  CHECK(parse_response(t2, f.vocab).entries[0].referent_text == "blue square");

  ToyConfig indexed = f.config;
  indexed.share_seg_embedding = false;
  const auto t3 = build_answer(ab, f.vocab, indexed.answer_options());
  const auto p3 = select_seg_positions(parse_response(t3, f.vocab));
  CHECK(t3[p3[0]] != t3[p3[1]]);
}

TEST_CASE("generation") {
  Fixture f;
  const ToyModel m(f.config, f.vocab);
  const auto prompt = m.prompt_tokens(PromptPlan{{"red circle", "green square"}, QuestionForm::kWhat});
  CHECK(m.generate(f.image(), prompt, 1).size() == 1);
  const auto a = m.generate(f.image(), prompt, 20);
  CHECK(a == m.generate(f.image(), prompt, 20));
  for (auto t : a) CHECK(m.emittable(t));

  // Teacher forcing on the emitted prefix reproduces each greedy choice.
  auto seq = prompt;
  seq.insert(seq.end(), a.begin(), a.end());
  const auto logits = m.forward_logits(f.image(), seq);
  const int v = logits.cols();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int row = static_cast<int>(prompt.size() + i) - 1 + 63;
    TokenId best = -1;
    double best_v = -1e300;
    for (int k = 0; k < v; ++k) {
      if (m.emittable(k) && logits[row * v + k] > best_v) {
        best_v = logits[row * v + k];
        best = k;
      }
    }
    CHECK(best == a[i]);
  }
}

TEST_CASE("emittable tokens follow the flags") {
  Fixture f;
  const auto& sp = f.vocab.special();
  const ToyModel full(f.config, f.vocab);
  CHECK(full.emittable(sp.seg_id));
  CHECK(full.emittable(sp.rej_id));
  CHECK_FALSE(full.emittable(sp.seg_bank[0]));
  CHECK_FALSE(full.emittable(sp.image_placeholder_id));
  CHECK_FALSE(full.emittable(sp.pad_id));

  ToyConfig c = f.config;
  c.use_rej = false;
  c.share_seg_embedding = false;
  const ToyModel other(c, f.vocab);
  CHECK_FALSE(other.emittable(sp.rej_id));
  CHECK_FALSE(other.emittable(sp.seg_id));
  CHECK(other.emittable(sp.seg_bank[3]));
}

TEST_CASE("initialization is seeded") {
  Fixture f;
  ToyConfig a = f.config, b = f.config;
  a.seed = 1;
  b.seed = 2;
  CHECK(parameter_checksum(ToyModel(a, f.vocab).params()) == parameter_checksum(ToyModel(a, f.vocab).params()));
  CHECK(parameter_checksum(ToyModel(a, f.vocab).params()) != parameter_checksum(ToyModel(b, f.vocab).params()));
}

TEST_CASE("threshold is logit > 0") {
  const std::vector<double> logits{-1.0, 0.0, 1e-9, 3.0};
  const auto m = threshold_logits(logits, 2, 2);
  CHECK_FALSE(m.at(0, 0));
  CHECK_FALSE(m.at(0, 1));
  CHECK(m.at(1, 0));
  CHECK(m.at(1, 1));
}

TEST_CASE("checkpoints roundtrip and reject damage") {
  Fixture f;
  ToyConfig c = f.config;
  c.seed = 5;
  c.use_rej = false;
  const ToyModel m(c, f.vocab);
  const auto dir = std::filesystem::temp_directory_path() / "greskit_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.ckpt";
  save_checkpoint(path, m);
  const auto back = load_checkpoint(path);
  CHECK(parameter_checksum(back.params()) == parameter_checksum(m.params()));
  CHECK(back.config().to_json() == m.config().to_json());
  CHECK(back.vocab().words() == m.vocab().words());

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 9);
  CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("extract_queries applies the projector row by row") {
  Fixture f;
  const ToyModel m(f.config, f.vocab);
  const auto tokens = answer_prompt(m, {"red circle", "blue square", "green circle"},
                                    {Decision::kSeg, Decision::kRej, Decision::kSeg});
  Graph g(false);
  const auto r = m.forward(g, f.image(), tokens, false);
  CHECK_FALSE(m.extract_queries(g, r.hidden, std::vector<int>{}).valid());

  const std::vector<int> rows{70, 66, 75};
  const auto q = m.extract_queries(g, r.hidden, rows);
  REQUIRE(g.value(q).shape() == std::vector<int>{3, f.config.seg_channels});
  // Each row on its own gives the same query.
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto one = m.extract_queries(g, r.hidden, std::vector<int>{rows[i]});
    for (int c = 0; c < f.config.seg_channels; ++c) {
      CHECK(g.value(one)[c] == g.value(q)[i * f.config.seg_channels + c]);
    }
  }
  CHECK_THROWS(m.extract_queries(g, r.hidden, std::vector<int>{100000}));
}

TEST_CASE("one decoded mask per [SEG] in the answer") {
  Fixture f;
  const ToyModel m(f.config, f.vocab);
  const auto& img = f.data.images.begin()->second;
  std::mt19937_64 rng(2);
  for (int t = 0; t < 6; ++t) {
    std::vector<std::string> refs;
    std::vector<Decision> decisions;
    const int n = 1 + static_cast<int>(rng() % 5);
    for (int k = 0; k < n; ++k) {
      refs.emplace_back(k % 2 ? "red circle" : "blue square");
      decisions.push_back(rng() % 2 ? Decision::kSeg : Decision::kRej);
    }
    TrainingExample ex;
    ex.image = &img;
    for (int k = 0; k < n; ++k) {
      ex.ref_ids.push_back(k + 1);
      ex.referents.push_back(refs[k]);
      ex.gt_empty.push_back(decisions[k] == Decision::kRej);
      ex.masks.emplace_back(64, 64);
    }
    const auto seq = teacher_sequence(m, ex);
    Graph g(false);
    const auto loss = sample_loss(g, m, ex);
    CHECK(loss.mask_count == std::count(decisions.begin(), decisions.end(), Decision::kSeg));
    CHECK(seq.seg_positions.size() == static_cast<std::size_t>(loss.mask_count));
  }
}

TEST_CASE("encoding is pure and finite on a blank image") {
  Fixture f;
  const ToyModel m(f.config, f.vocab);
  const RgbImage blank(64, 64);
  const auto a = m.encode_image(blank), b = m.encode_image(blank);
  CHECK(a.visual_tokens.values().size() == b.visual_tokens.values().size());
  CHECK(std::equal(a.visual_tokens.values().begin(), a.visual_tokens.values().end(), b.visual_tokens.values().begin()));
  CHECK(std::equal(a.seg_features.values().begin(), a.seg_features.values().end(), b.seg_features.values().begin()));
  for (double v : a.visual_tokens.values()) REQUIRE(std::isfinite(v));
  for (double v : a.seg_features.values()) REQUIRE(std::isfinite(v));
  const auto logits = m.forward_logits(blank, m.prompt_tokens(PromptPlan{{"red circle"}, QuestionForm::kWhat}));
  for (double v : logits.values()) REQUIRE(std::isfinite(v));
}
