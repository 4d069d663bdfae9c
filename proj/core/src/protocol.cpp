#include "greskit/protocol.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <ostream>

#include "greskit/error.hpp"

namespace greskit {
namespace {

constexpr std::string_view kDelimiters = ",:.?";

bool is_delimiter(char c) { return kDelimiters.find(c) != std::string_view::npos; }

bool is_punctuation_token(std::string_view t) {
  if (t.size() == 1) return is_delimiter(t[0]);
  return t.size() == 2 && t[0] == '\\' && is_delimiter(t[1]);
}

const std::vector<std::string>& template_words() {
  static const std::vector<std::string> words{
      "<unk>", ",",     ":",    ".",       "?",     "\\,",  "\\:",   "\\.",   "\\?",
      "Sure",  "What",  "is",   "are",     "in",    "this", "image", "Please", "output",
      "the",   "segmentation",  "mask",    "masks", "Where", "Show", "me",     "Outline",
      "with",  "segment", "it"};
  return words;
}

std::string bank_token(int i) {
  std::string s = "[SEG000]";
  s[4] = static_cast<char>('0' + (i / 100) % 10);
  s[5] = static_cast<char>('0' + (i / 10) % 10);
  s[6] = static_cast<char>('0' + i % 10);
  return s;
}

std::string join_referents(const std::vector<std::string>& referents) {
  std::string out;
  for (std::size_t i = 0; i < referents.size(); ++i) {
    if (i > 0) out += ", ";
    out += escape_referent(referents[i]);
  }
  return out;
}

}  // namespace

std::string_view decision_name(Decision d) { return d == Decision::kSeg ? "seg" : "rej"; }

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  auto add = [&](const std::string& t) {
    const auto id = static_cast<TokenId>(tokens_.size());
    if (!index_.emplace(t, id).second) {
      throw ConfigError("duplicate vocabulary token \"" + t + "\"");
    }
    tokens_.push_back(t);
    return id;
  };
  for (const auto& w : words_) {
    if (w.empty()) throw ConfigError("empty vocabulary word");
    if ((w.front() == '[' && w.back() == ']' && w.size() > 2)) {
      throw ConfigError("word \"" + w + "\" collides with special token syntax");
    }
    add(w);
  }
  word_count_ = tokens_.size();
  special_.pad_id = add("<pad>");
  special_.bos_id = add("<s>");
  special_.eos_id = add("</s>");
  special_.image_placeholder_id = add("<image>");
  special_.seg_id = add("[SEG]");
  special_.rej_id = add("[REJ]");
  for (int i = 0; i < kSegBankSize; ++i) special_.seg_bank.push_back(add(bank_token(i)));

  auto require = [&](const char* t) {
    const auto it = index_.find(t);
    if (it == index_.end() || static_cast<std::size_t>(it->second) >= word_count_) {
      throw ConfigError(std::string("vocabulary lacks required word \"") + t + "\"");
    }
    return it->second;
  };
  unk_ = require("<unk>");
  comma_ = require(",");
  colon_ = require(":");
  period_ = require(".");
}

TokenId Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? unk_ : it->second;
}

bool Vocabulary::is_seg(TokenId id) const noexcept {
  if (id == special_.seg_id) return true;
  return std::find(special_.seg_bank.begin(), special_.seg_bank.end(), id) !=
         special_.seg_bank.end();
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  auto special_at = [&](std::size_t pos) -> std::size_t {
    if (text[pos] != '[' && text[pos] != '<') return 0;
    const char close = text[pos] == '[' ? ']' : '>';
    const auto end = text.find(close, pos);
    if (end == std::string_view::npos) return 0;
    const auto candidate = text.substr(pos, end - pos + 1);
    const auto it = index_.find(std::string(candidate));
    if (it == index_.end()) return 0;
    return candidate.size();
  };
  while (i < n) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (c == '\\' && i + 1 < n && is_delimiter(text[i + 1])) {
      out.push_back(id(text.substr(i, 2)));
      i += 2;
      continue;
    }
    if (is_delimiter(c)) {
      out.push_back(id(text.substr(i, 1)));
      ++i;
      continue;
    }
    if (const auto len = special_at(i)) {
      out.push_back(id(text.substr(i, len)));
      i += len;
      continue;
    }
    std::size_t j = i;
    while (j < n && !std::isspace(static_cast<unsigned char>(text[j])) && !is_delimiter(text[j]) &&
           !(text[j] == '\\' && j + 1 < n && is_delimiter(text[j + 1])) &&
           !(j > i && special_at(j))) {
      ++j;
    }
    out.push_back(id(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

std::string Vocabulary::decode(std::span<const TokenId> tokens) const {
  std::string out;
  bool after_colon = false;
  for (const auto t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= tokens_.size()) continue;
    const auto& s = tokens_[t];
    const bool attach = out.empty() || is_punctuation_token(s) ||
                        (after_colon && !is_word(t));
    if (!attach) out += ' ';
    out += s;
    after_colon = (t == colon_);
  }
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == '\\' && i + 1 < n && is_delimiter(text[i + 1])) {
      out.emplace_back(text.substr(i, 2));
      i += 2;
    } else if (is_delimiter(c)) {
      out.emplace_back(text.substr(i, 1));
      ++i;
    } else {
      std::size_t j = i;
      while (j < n && !std::isspace(static_cast<unsigned char>(text[j])) && !is_delimiter(text[j]) &&
             !(text[j] == '\\' && j + 1 < n && is_delimiter(text[j + 1]))) {
        ++j;
      }
      out.emplace_back(text.substr(i, j - i));
      i = j;
    }
  }
  return out;
}

Vocabulary make_vocabulary(const std::vector<std::string>& domain_words) {
  std::vector<std::string> words = template_words();
  for (const auto& w : domain_words) {
    if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
  }
  return Vocabulary(std::move(words));
}

std::string escape_referent(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '\\' && i + 1 < text.size() && is_delimiter(text[i + 1])) {
      // Already escaped.
      out += c;
      out += text[++i];
      continue;
    }
    if (is_delimiter(c)) out += '\\';
    out += c;
  }
  return out;
}

std::string unescape_referent(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '\\' && i + 1 < text.size() && is_delimiter(text[i + 1])) continue;
    out += text[i];
  }
  return out;
}

std::string_view question_form_name(QuestionForm form) {
  switch (form) {
    case QuestionForm::kWhat: return "what";
    case QuestionForm::kWhere: return "where";
    case QuestionForm::kShow: return "show";
    case QuestionForm::kOutline: return "outline";
    case QuestionForm::kSegment: return "segment";
  }
  return "what";
}

QuestionForm parse_question_form(std::string_view name) {
  for (auto f : {QuestionForm::kWhat, QuestionForm::kWhere, QuestionForm::kShow,
                 QuestionForm::kOutline, QuestionForm::kSegment}) {
    if (question_form_name(f) == name) return f;
  }
  throw ConfigError("unknown question form \"" + std::string(name) + "\"");
}

std::string build_question(const PromptPlan& plan) {
  if (plan.referents.empty()) throw ValidationError("prompt plan has no referents");
  const bool single = plan.referents.size() == 1;
  const std::string objs = join_referents(plan.referents);
  switch (plan.form) {
    case QuestionForm::kWhat:
      return single ? "What is " + objs + " in this image? Please output segmentation mask."
                    : "What are " + objs + " in this image? Please output the segmentation masks.";
    case QuestionForm::kWhere:
      return single ? "Where is " + objs + " in this image? Please output segmentation mask."
                    : "Where are " + objs +
                          " in this image? Please output the segmentation masks.";
    case QuestionForm::kShow:
      return "Show me " + objs + " in the image with segmentation masks";
    case QuestionForm::kOutline:
      return "Outline " + objs + " in this image with segmentation masks";
    case QuestionForm::kSegment:
      return "Please segment " + objs + " in this image";
  }
  return {};
}

std::vector<TokenId> build_answer(std::span<const AnswerEntry> entries, const Vocabulary& vocab,
                                  const AnswerOptions& options) {
  const auto& sp = vocab.special();
  std::vector<TokenId> out{vocab.id("Sure"), vocab.comma()};
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (options.prefix_expressions) {
      const auto words = vocab.encode(escape_referent(e.text));
      out.insert(out.end(), words.begin(), words.end());
      out.push_back(vocab.colon());
    }
    if (e.decision == Decision::kRej) {
      out.push_back(sp.rej_id);
    } else if (options.share_seg_embedding) {
      out.push_back(sp.seg_id);
    } else {
      out.push_back(sp.seg_bank[i % sp.seg_bank.size()]);
    }
    out.push_back(i + 1 < entries.size() ? vocab.comma() : vocab.period());
  }
  return out;
}

std::string answer_text(std::span<const AnswerEntry> entries, const AnswerOptions& options) {
  std::string out = "Sure,";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out += ' ';
    if (options.prefix_expressions) out += escape_referent(entries[i].text) + ":";
    if (entries[i].decision == Decision::kRej) {
      out += "[REJ]";
    } else {
      out += options.share_seg_embedding ? std::string("[SEG]")
                                         : bank_token(static_cast<int>(i % kSegBankSize));
    }
    out += i + 1 < entries.size() ? "," : ".";
  }
  return out;
}

ResponseParse parse_response(std::span<const TokenId> tokens, const Vocabulary& vocab) {
  ResponseParse parse;
  const auto& sp = vocab.special();
  std::size_t segment_start = 0;
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    const auto t = tokens[p];
    if (t == sp.eos_id) {
      if (p + 1 < tokens.size()) {
        parse.diagnostics.push_back("tokens after end-of-sequence at position " +
                                    std::to_string(p) + " ignored");
      }
      break;
    }
    if (t == vocab.comma()) {
      segment_start = p + 1;
      continue;
    }
    const bool seg = vocab.is_seg(t);
    if (!seg && !vocab.is_rej(t)) continue;

    ParsedEntry entry;
    entry.decision = seg ? Decision::kSeg : Decision::kRej;
    entry.token_position = p;
    if (p > segment_start && tokens[p - 1] == vocab.colon()) {
      std::vector<TokenId> words;
      for (std::size_t k = segment_start; k + 1 < p; ++k) {
        if (vocab.is_word(tokens[k])) words.push_back(tokens[k]);
      }
      entry.referent_text = unescape_referent(vocab.decode(words));
    } else {
      parse.diagnostics.push_back("no expression prefix before special token at position " +
                                  std::to_string(p));
    }
    parse.entries.push_back(std::move(entry));
    segment_start = p + 1;
  }
  if (parse.entries.empty()) parse.diagnostics.push_back("response contains no [SEG] or [REJ] token");
  return parse;
}

std::vector<std::size_t> select_seg_positions(const ResponseParse& parse) {
  std::vector<std::size_t> out;
  for (const auto& e : parse.entries) {
    if (e.decision == Decision::kSeg) out.push_back(e.token_position);
  }
  return out;
}

std::vector<AssignedMask> assign_masks(const ResponseParse& parse,
                                       std::span<const BinaryMask> decoded, int height,
                                       int width) {
  const auto n_seg = static_cast<std::size_t>(
      std::count_if(parse.entries.begin(), parse.entries.end(),
                    [](const ParsedEntry& e) { return e.decision == Decision::kSeg; }));
  if (n_seg != decoded.size()) {
    throw ProtocolError("decoder produced " + std::to_string(decoded.size()) + " masks for " +
                        std::to_string(n_seg) + " [SEG] entries");
  }
  std::vector<AssignedMask> out;
  out.reserve(parse.entries.size());
  std::size_t next = 0;
  for (const auto& e : parse.entries) {
    if (e.decision == Decision::kSeg) {
      const auto& m = decoded[next++];
      if (m.height() != height || m.width() != width) {
        throw DimensionMismatch("decoded mask size does not match the image");
      }
      out.push_back({e.referent_text, e.decision, m});
    } else {
      out.push_back({e.referent_text, e.decision, BinaryMask(height, width)});
    }
  }
  return out;
}

nlohmann::json prediction_to_json(const Prediction& p) {
  nlohmann::json j{{"ref_id", p.ref_id}, {"decision", std::string(decision_name(p.decision))}};
  j["mask"] = p.mask ? rle_to_json(encode_rle(*p.mask)) : nlohmann::json(nullptr);
  return j;
}

Prediction prediction_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("ref_id") || !j.at("ref_id").is_number_integer()) {
    throw ValidationError("prediction: missing integer \"ref_id\"");
  }
  Prediction p;
  p.ref_id = j.at("ref_id").get<RefId>();
  const std::string where = "prediction for ref " + std::to_string(p.ref_id);
  if (!j.contains("decision") || !j.at("decision").is_string()) {
    throw ValidationError(where + ": missing \"decision\"");
  }
  const auto d = j.at("decision").get<std::string>();
  if (d == "seg") {
    p.decision = Decision::kSeg;
  } else if (d == "rej") {
    p.decision = Decision::kRej;
  } else {
    throw ValidationError(where + ": decision must be \"seg\" or \"rej\"");
  }
  const bool has_mask = j.contains("mask") && !j.at("mask").is_null();
  if (p.decision == Decision::kRej && has_mask) {
    throw ValidationError(where + ": \"rej\" must carry a null mask");
  }
  if (p.decision == Decision::kSeg && !has_mask) {
    throw ValidationError(where + ": \"seg\" requires a mask");
  }
  if (has_mask) {
    try {
      p.mask = decode_rle(rle_from_json(j.at("mask")));
    } catch (const MalformedEncoding& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return p;
}

std::vector<Prediction> read_predictions(std::istream& in) {
  std::vector<Prediction> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("predictions line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(prediction_from_json(j));
  }
  return out;
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open predictions " + path.string());
  return read_predictions(in);
}

void write_predictions(std::ostream& out, std::span<const Prediction> predictions) {
  for (const auto& p : predictions) out << prediction_to_json(p).dump() << '\n';
}

void write_predictions(const std::filesystem::path& path, std::span<const Prediction> predictions) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_predictions(out, predictions);
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace greskit
