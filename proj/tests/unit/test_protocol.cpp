#include <doctest.h>

#include <random>
#include <sstream>

#include "greskit/error.hpp"
#include "greskit/protocol.hpp"

using namespace greskit;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = make_vocabulary({"red", "green", "blue", "circle", "square", "triangle", "and",
                                               "at", "top", "left"});
  return v;
}

std::vector<AnswerEntry> random_entries(std::mt19937_64& rng) {
  static const std::vector<std::string> words{"red", "green", "blue", "circle", "square", "triangle",
                                              "and", "at", "top", "left"};
  std::vector<AnswerEntry> out(1 + rng() % 5);
  for (auto& e : out) {
    const int n = 1 + static_cast<int>(rng() % 4);
    for (int k = 0; k < n; ++k) {
      if (k > 0) e.text += rng() % 6 == 0 ? ", " : " ";
      e.text += words[rng() % words.size()];
    }
    e.decision = rng() % 2 ? Decision::kSeg : Decision::kRej;
  }
  return out;
}

}  // namespace

TEST_CASE("tokenizer splits delimiters and keeps escapes literal") {
  CHECK(split_words("Sure, red circle:[SEG].") ==
        std::vector<std::string>{"Sure", ",", "red", "circle", ":", "[SEG]", "."});
  CHECK(split_words("a\\, b\\:c") == std::vector<std::string>{"a", "\\,", "b", "\\:", "c"});
  CHECK(split_words("  what?  ") == std::vector<std::string>{"what", "?"});
  CHECK(escape_referent("a, b: c.") == "a\\, b\\: c\\.");
  CHECK(unescape_referent(escape_referent("a, b: c. d?")) == "a, b: c. d?");
  CHECK(escape_referent("a\\, b") == "a\\, b");  // idempotent
}

TEST_CASE("vocabulary layout") {
  const auto& v = vocab();
  const auto& sp = v.special();
  CHECK(v.is_word(v.id("red")));
  CHECK_FALSE(v.is_word(sp.seg_id));
  CHECK(v.is_seg(sp.seg_id));
  CHECK(sp.seg_bank.size() == static_cast<std::size_t>(kSegBankSize));
  for (auto id : sp.seg_bank) CHECK(v.is_seg(id));
  CHECK(v.is_rej(sp.rej_id));
  CHECK(v.token(sp.seg_bank[7]) == "[SEG007]");
  CHECK(v.id("purple") == v.id("<unk>"));
  CHECK_THROWS_AS(Vocabulary({"a", "a"}), ConfigError);
  CHECK_THROWS_AS(Vocabulary({"[SEG]"}), ConfigError);
}

TEST_CASE("answer format") {
  const std::vector<AnswerEntry> e{{"red circle", Decision::kRej}, {"blue square", Decision::kSeg}};
  CHECK(answer_text(e) == "Sure, red circle:[REJ], blue square:[SEG].");
  CHECK(answer_text(e, {false, true}) == "Sure, [REJ], [SEG].");
  CHECK(answer_text(e, {true, false}) == "Sure, red circle:[REJ], blue square:[SEG001].");
  CHECK(vocab().decode(build_answer(e, vocab())) == answer_text(e));
  CHECK(vocab().encode(answer_text(e)) == build_answer(e, vocab()));
}

TEST_CASE("question templates") {
  CHECK(build_question({{"red circle"}, QuestionForm::kWhat}) ==
        "What is red circle in this image? Please output segmentation mask.");
  CHECK(build_question({{"a", "b"}, QuestionForm::kWhat}) ==
        "What are a, b in this image? Please output the segmentation masks.");
  CHECK_THROWS_AS(build_question({{}, QuestionForm::kWhat}), ValidationError);
  for (auto f : {QuestionForm::kWhat, QuestionForm::kWhere, QuestionForm::kShow, QuestionForm::kOutline,
                 QuestionForm::kSegment}) {
    CHECK(parse_question_form(question_form_name(f)) == f);
  }
}

TEST_CASE("parse inverts build for random plans") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 200; ++t) {
    const auto entries = random_entries(rng);
    const auto tokens = build_answer(entries, vocab());
    const auto parse = parse_response(tokens, vocab());
    REQUIRE(parse.entries.size() == entries.size());
    CHECK(parse.diagnostics.empty());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      CHECK(parse.entries[i].referent_text == entries[i].text);
      CHECK(parse.entries[i].decision == entries[i].decision);
      CHECK(tokens[parse.entries[i].token_position] ==
            (entries[i].decision == Decision::kSeg ? vocab().special().seg_id : vocab().special().rej_id));
    }
  }
}

TEST_CASE("parser is total on malformed input") {
  const auto& v = vocab();
  const auto& sp = v.special();
  auto p = parse_response(std::vector<TokenId>{}, v);
  CHECK(p.entries.empty());
  CHECK_FALSE(p.diagnostics.empty());

  // Missing prefix, stray tokens after eos.
  p = parse_response(std::vector<TokenId>{v.id("Sure"), v.comma(), sp.seg_id, sp.eos_id, sp.rej_id}, v);
  REQUIRE(p.entries.size() == 1);
  CHECK(p.entries[0].referent_text.empty());
  CHECK(p.diagnostics.size() == 2);

  std::mt19937_64 rng(9);
  for (int t = 0; t < 200; ++t) {
    std::vector<TokenId> junk(rng() % 30);
    for (auto& id : junk) id = static_cast<TokenId>(rng() % (v.size() + 3)) - 1;
    CHECK_NOTHROW(parse_response(junk, v));
  }
}

TEST_CASE("seg positions and mask assignment") {
  const auto& v = vocab();
  const std::vector<AnswerEntry> e{{"red", Decision::kSeg}, {"blue", Decision::kRej}, {"green", Decision::kSeg}};
  const auto tokens = build_answer(e, v);
  const auto parse = parse_response(tokens, v);
  const auto pos = select_seg_positions(parse);
  REQUIRE(pos.size() == 2);
  for (auto p : pos) CHECK(tokens[p] == v.special().seg_id);

  BinaryMask a(4, 4), b(4, 4);
  a.set(0, 0);
  b.set(3, 3);
  const std::vector<BinaryMask> decoded{a, b};
  const auto assigned = assign_masks(parse, decoded, 4, 4);
  REQUIRE(assigned.size() == 3);
  CHECK(assigned[0].mask == a);
  CHECK(positive_pixel_count(assigned[1].mask) == 0);
  CHECK(assigned[1].decision == Decision::kRej);
  CHECK(assigned[2].mask == b);
  CHECK_THROWS_AS(assign_masks(parse, std::span<const BinaryMask>(decoded).first(1), 4, 4), ProtocolError);
  CHECK_THROWS_AS(assign_masks(parse, decoded, 5, 4), DimensionMismatch);
}

TEST_CASE("prediction lines") {
  BinaryMask m(3, 2);
  m.set(1, 1);
  std::vector<Prediction> preds{{7, Decision::kSeg, m}, {8, Decision::kRej, std::nullopt}};
  std::stringstream ss;
  write_predictions(ss, preds);
  const auto text = ss.str();
  CHECK(text.find("\"mask\":null") != std::string::npos);
  const auto back = read_predictions(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[0].mask == m);
  CHECK_FALSE(back[1].mask.has_value());

  using nlohmann::json;
  CHECK_THROWS_AS(prediction_from_json(json{{"ref_id", 1}, {"decision", "seg"}, {"mask", nullptr}}), ValidationError);
  CHECK_THROWS_AS(prediction_from_json(json{{"ref_id", 1}, {"decision", "rej"}, {"mask", rle_to_json(encode_rle(m))}}),
                  ValidationError);
  CHECK_THROWS_AS(prediction_from_json(json{{"ref_id", 1}, {"decision", "maybe"}}), ValidationError);
  CHECK_THROWS_AS(prediction_from_json(json{{"decision", "rej"}}), ValidationError);
  CHECK_THROWS_AS(prediction_from_json(json{{"ref_id", 1}, {"decision", "seg"},
                                            {"mask", {{"size", {2, 2}}, {"counts", {1, 1}}}}}),
                  ValidationError);
}
