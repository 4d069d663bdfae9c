#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "greskit/annotations.hpp"
#include "greskit/mask.hpp"

namespace greskit {

using TokenId = std::int32_t;

// Referents per prompt. 5 is the default slot count; the sweep goes to 10.
inline constexpr int kDefaultMaxReferents = 5;
inline constexpr int kMaxReferents = 10;
// Size of the indexed [SEGnnn] bank used when [SEG] rows are not shared.
inline constexpr int kSegBankSize = 8;

enum class Decision { kSeg, kRej };

std::string_view decision_name(Decision d);  // "seg" | "rej"

struct SpecialVocab {
  TokenId pad_id = -1;
  TokenId bos_id = -1;
  TokenId eos_id = -1;
  TokenId image_placeholder_id = -1;
  TokenId seg_id = -1;
  TokenId rej_id = -1;
  std::vector<TokenId> seg_bank;  // [SEG000] .. [SEG007]
};

// Closed word vocabulary followed by the special tokens. Text is split on
// whitespace with , : . ? as standalone tokens; a backslash-escaped
// delimiter ("\,") is its own literal token that the parser never treats as
// structure.
class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> words);

  std::size_t size() const noexcept { return tokens_.size(); }
  std::size_t word_count() const noexcept { return word_count_; }
  const SpecialVocab& special() const noexcept { return special_; }

  TokenId id(std::string_view token) const;  // <unk> id for unknown words
  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  bool is_word(TokenId id) const noexcept {
    return id >= 0 && static_cast<std::size_t>(id) < word_count_;
  }
  bool is_seg(TokenId id) const noexcept;  // [SEG] or any bank entry
  bool is_rej(TokenId id) const noexcept { return id == special_.rej_id; }

  TokenId comma() const noexcept { return comma_; }
  TokenId colon() const noexcept { return colon_; }
  TokenId period() const noexcept { return period_; }

  std::vector<TokenId> encode(std::string_view text) const;
  // Joins word tokens with single spaces, attaching punctuation to the
  // previous word. Non-word tokens are rendered by their text form.
  std::string decode(std::span<const TokenId> tokens) const;

  const std::vector<std::string>& words() const noexcept { return words_; }

 private:
  std::vector<std::string> words_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t word_count_ = 0;
  SpecialVocab special_;
  TokenId unk_ = 0;
  TokenId comma_ = 0;
  TokenId colon_ = 0;
  TokenId period_ = 0;
};

// Whitespace/delimiter split used by Vocabulary::encode, without id lookup.
std::vector<std::string> split_words(std::string_view text);

// Template words plus the caller's domain words.
Vocabulary make_vocabulary(const std::vector<std::string>& domain_words);

std::string escape_referent(std::string_view text);
std::string unescape_referent(std::string_view text);

enum class QuestionForm { kWhat, kWhere, kShow, kOutline, kSegment };

std::string_view question_form_name(QuestionForm form);
QuestionForm parse_question_form(std::string_view name);

struct PromptPlan {
  std::vector<std::string> referents;
  QuestionForm form = QuestionForm::kWhat;
};

// Throws ValidationError for an empty referent list.
std::string build_question(const PromptPlan& plan);

struct AnswerEntry {
  std::string text;
  Decision decision = Decision::kSeg;

  friend bool operator==(const AnswerEntry&, const AnswerEntry&) = default;
};

struct AnswerOptions {
  bool prefix_expressions = true;
  bool share_seg_embedding = true;
};

// "Sure, {a}:[REJ], {b}:[SEG]." as tokens (no trailing eos). With prefixes
// off: "Sure, [REJ], [SEG].". Without shared [SEG] rows the i-th entry uses
// bank token i mod 8.
std::vector<TokenId> build_answer(std::span<const AnswerEntry> entries, const Vocabulary& vocab,
                                  const AnswerOptions& options = {});
std::string answer_text(std::span<const AnswerEntry> entries, const AnswerOptions& options = {});

struct ParsedEntry {
  std::string referent_text;
  Decision decision = Decision::kSeg;
  std::size_t token_position = 0;
};

struct ResponseParse {
  std::vector<ParsedEntry> entries;
  std::vector<std::string> diagnostics;
};

// Total: never throws. Every [SEG]/[REJ] occurrence becomes an entry; the
// referent text is whatever words sit between the previous comma and the
// colon in front of the special token (empty when the colon is missing).
ResponseParse parse_response(std::span<const TokenId> tokens, const Vocabulary& vocab);

std::vector<std::size_t> select_seg_positions(const ResponseParse& parse);

struct AssignedMask {
  std::string referent_text;
  Decision decision = Decision::kSeg;
  BinaryMask mask;
};

// The i-th [SEG] entry takes decoded[i]; every [REJ] entry gets an all-zero
// mask. Throws ProtocolError when the decoded count differs from the number
// of [SEG] entries.
std::vector<AssignedMask> assign_masks(const ResponseParse& parse,
                                       std::span<const BinaryMask> decoded, int height,
                                       int width);

// One line of a prediction JSONL file:
// {"ref_id":..., "decision":"seg"|"rej", "mask":{RLE}|null}
struct Prediction {
  RefId ref_id = 0;
  Decision decision = Decision::kSeg;
  std::optional<BinaryMask> mask;
};

nlohmann::json prediction_to_json(const Prediction& p);
// Throws ValidationError ("rej" with a mask, "seg" without one, bad RLE).
Prediction prediction_from_json(const nlohmann::json& j);

std::vector<Prediction> read_predictions(std::istream& in);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);
void write_predictions(std::ostream& out, std::span<const Prediction> predictions);
void write_predictions(const std::filesystem::path& path, std::span<const Prediction> predictions);

}  // namespace greskit
