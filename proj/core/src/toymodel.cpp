#include "greskit/toymodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <string>

#include "greskit/error.hpp"

namespace greskit {
namespace {

using ad::Graph;
using ad::Tensor;
using ad::Var;

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

int stride_conv_count(const ToyConfig& c) {
  return std::countr_zero(static_cast<unsigned>(c.image_size / c.seg_feature_size));
}

int conv_hidden_channels(const ToyConfig& c) { return std::max(8, c.seg_channels / 2); }

Tensor normal_tensor(std::vector<int> shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape), 0.0);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

// ---- ToyConfig ----------------------------------------------------------

void ToyConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (image_size < 16) fail("image_size must be at least 16");
  if (patch_size < 2 || patch_size % 2 != 0 || image_size % patch_size != 0) {
    fail("patch_size must be even and divide image_size");
  }
  if (d_model < 1 || heads < 1 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if (decoder_layers < 1) fail("decoder_layers must be positive");
  if (mlp_ratio < 1) fail("mlp_ratio must be positive");
  if (seg_channels < 1) fail("seg_channels must be positive");
  if (seg_feature_size < 1 || image_size % seg_feature_size != 0 ||
      !is_pow2(image_size / seg_feature_size)) {
    fail("image_size / seg_feature_size must be a power of two");
  }
  if (max_targets < 1 || max_targets > kMaxReferents) {
    fail("max_targets must be in [1, " + std::to_string(kMaxReferents) + "]");
  }
  if (max_seq_len < visual_token_count() + 8) fail("max_seq_len too small for the visual tokens");
}

nlohmann::json ToyConfig::to_json() const {
  return {{"image_size", image_size},
          {"patch_size", patch_size},
          {"d_model", d_model},
          {"decoder_layers", decoder_layers},
          {"heads", heads},
          {"mlp_ratio", mlp_ratio},
          {"seg_feature_size", seg_feature_size},
          {"seg_channels", seg_channels},
          {"max_targets", max_targets},
          {"max_seq_len", max_seq_len},
          {"multi_seg", multi_seg},
          {"use_rej", use_rej},
          {"prefix_expressions", prefix_expressions},
          {"share_seg_embedding", share_seg_embedding},
          {"seed", seed}};
}

ToyConfig ToyConfig::from_json(const nlohmann::json& j) {
  ToyConfig c;
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  try {
    c.image_size = j.value("image_size", c.image_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.d_model = j.value("d_model", c.d_model);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.seg_feature_size = j.value("seg_feature_size", c.seg_feature_size);
    c.seg_channels = j.value("seg_channels", c.seg_channels);
    c.max_targets = j.value("max_targets", c.max_targets);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.multi_seg = j.value("multi_seg", c.multi_seg);
    c.use_rej = j.value("use_rej", c.use_rej);
    c.prefix_expressions = j.value("prefix_expressions", c.prefix_expressions);
    c.share_seg_embedding = j.value("share_seg_embedding", c.share_seg_embedding);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

// ---- ToyModel -----------------------------------------------------------

ToyModel::ToyModel(ToyConfig config, Vocabulary vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
  config_.validate();
  init_parameters();
}

void ToyModel::init_parameters() {
  std::mt19937_64 rng(config_.seed ^ 0x9e3779b97f4a7c15ULL);
  const int d = config_.d_model;
  const int p = config_.patch_size;
  const int v = static_cast<int>(vocab_.size());
  const int hidden = d * config_.mlp_ratio;
  const int c = config_.seg_channels;
  auto w = [&](int fan_in, int fan_out) {
    return normal_tensor({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
  };
  auto zeros = [](int n) { return Tensor({n}, 0.0); };
  auto ones = [](int n) { return Tensor({n}, 1.0); };

  // Overlapping patches: each token sees a 2p x 2p window centred on its cell.
  patch_w_ = params_.add("patch_embed.weight", w(4 * p * p * 3, d));
  patch_b_ = params_.add("patch_embed.bias", zeros(d));
  proj_w_ = params_.add("vision_proj.weight", w(d, d));
  proj_b_ = params_.add("vision_proj.bias", zeros(d));
  tok_ = params_.add("token_embed", normal_tensor({v, d}, 0.5, rng));
  pos_ = params_.add("position_embed", normal_tensor({config_.max_seq_len, d}, 0.5, rng));
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    BlockIndex b{};
    b.ln1_g = params_.add(pre + "ln1.gain", ones(d));
    b.ln1_b = params_.add(pre + "ln1.bias", zeros(d));
    b.wqkv = params_.add(pre + "attn.qkv.weight", w(d, 3 * d));
    b.bqkv = params_.add(pre + "attn.qkv.bias", zeros(3 * d));
    b.wo = params_.add(pre + "attn.out.weight", w(d, d));
    b.bo = params_.add(pre + "attn.out.bias", zeros(d));
    b.ln2_g = params_.add(pre + "ln2.gain", ones(d));
    b.ln2_b = params_.add(pre + "ln2.bias", zeros(d));
    b.w1 = params_.add(pre + "mlp.in.weight", w(d, hidden));
    b.b1 = params_.add(pre + "mlp.in.bias", zeros(hidden));
    b.w2 = params_.add(pre + "mlp.out.weight", w(hidden, d));
    b.b2 = params_.add(pre + "mlp.out.bias", zeros(d));
    blocks_.push_back(b);
  }
  lnf_g_ = params_.add("final_norm.gain", ones(d));
  lnf_b_ = params_.add("final_norm.bias", zeros(d));
  head_w_ = params_.add("lm_head.weight", w(d, v));
  head_b_ = params_.add("lm_head.bias", zeros(v));

  // Strided 3x3 convs down to the feature grid, then one stride-1 refinement.
  const int strided = stride_conv_count(config_);
  const int mid = conv_hidden_channels(config_);
  int cin = 3;
  for (int i = 0; i <= strided; ++i) {
    const int cout = (i >= strided - 1) ? c : mid;
    const std::string pre = "seg_encoder.conv" + std::to_string(i) + ".";
    conv_w_.push_back(params_.add(pre + "weight", w(9 * cin, cout)));
    conv_b_.push_back(params_.add(pre + "bias", zeros(cout)));
    cin = cout;
  }
  const int cells = config_.seg_feature_size * config_.seg_feature_size;
  seg_pos_ = params_.add("seg_encoder.position_embed", normal_tensor({cells, c}, 0.5, rng));

  psi_w1_ = params_.add("query_proj.in.weight", w(d, d));
  psi_b1_ = params_.add("query_proj.in.bias", zeros(d));
  psi_w2_ = params_.add("query_proj.out.weight", w(d, c));
  psi_b2_ = params_.add("query_proj.out.bias", zeros(c));
  mask_scale_ = params_.add("mask_decoder.scale", Tensor({1}, 1.0));
}

void ToyModel::check_image(const RgbImage& image) const {
  if (image.height != config_.image_size || image.width != config_.image_size) {
    throw DimensionMismatch("image is " + std::to_string(image.height) + "x" +
                            std::to_string(image.width) + ", model expects " +
                            std::to_string(config_.image_size) + "x" +
                            std::to_string(config_.image_size));
  }
}

Var ToyModel::visual_tokens(Graph& g, const RgbImage& image) const {
  check_image(image);
  Var x = g.constant(image_tensor(image));
  const int p = config_.patch_size;
  x = ad::gelu(g, ad::conv2d(g, x, param(g, patch_w_), param(g, patch_b_), 2 * p, p, p / 2));
  x = ad::reshape(g, x, {config_.visual_token_count(), config_.d_model});
  return ad::add_bias(g, ad::matmul(g, x, param(g, proj_w_)), param(g, proj_b_));
}

Var ToyModel::seg_features(Graph& g, const RgbImage& image) const {
  check_image(image);
  Var x = g.constant(image_tensor(image));
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    const bool last = i + 1 == conv_w_.size();
    x = ad::conv2d(g, x, param(g, conv_w_[i]), param(g, conv_b_[i]), 3, last ? 1 : 2, 1);
    if (!last) x = ad::gelu(g, x);
  }
  const int cells = config_.seg_feature_size * config_.seg_feature_size;
  x = ad::reshape(g, x, {cells, config_.seg_channels});
  return ad::add(g, x, param(g, seg_pos_));
}

ForwardResult ToyModel::forward(Graph& g, const RgbImage& image, std::span<const TokenId> tokens,
                                bool with_logits) const {
  const TokenId placeholder = vocab_.special().image_placeholder_id;
  const auto n_place = std::count(tokens.begin(), tokens.end(), placeholder);
  if (n_place != 1) {
    throw ValidationError("forward: token sequence must contain exactly one image placeholder, found " +
                          std::to_string(n_place));
  }
  const auto vsize = static_cast<TokenId>(vocab_.size());
  for (const auto t : tokens) {
    if (t < 0 || t >= vsize) throw ValidationError("forward: token id " + std::to_string(t) + " out of range");
  }
  const int k = static_cast<int>(std::find(tokens.begin(), tokens.end(), placeholder) - tokens.begin());
  const int n_img = config_.visual_token_count();
  const int length = static_cast<int>(tokens.size()) - 1 + n_img;
  if (length > config_.max_seq_len) {
    throw ValidationError("forward: spliced length " + std::to_string(length) + " exceeds max_seq_len " +
                          std::to_string(config_.max_seq_len));
  }

  ForwardResult r;
  r.rows.resize(tokens.size());
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    r.rows[i] = i < k ? i : (i == k ? -1 : i - 1 + n_img);
  }

  const Var table = param(g, tok_);
  std::vector<Var> parts;
  if (k > 0) parts.push_back(ad::gather_rows(g, table, {tokens.begin(), tokens.begin() + k}));
  parts.push_back(visual_tokens(g, image));
  if (k + 1 < static_cast<int>(tokens.size())) {
    parts.push_back(ad::gather_rows(g, table, {tokens.begin() + k + 1, tokens.end()}));
  }
  Var x = ad::concat_rows(g, parts);
  std::vector<int> positions(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) positions[i] = i;
  x = ad::add(g, x, ad::gather_rows(g, param(g, pos_), std::move(positions)));

  const int d = config_.d_model;
  const int dh = d / config_.heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& b : blocks_) {
    const Var a = ad::layer_norm(g, x, param(g, b.ln1_g), param(g, b.ln1_b));
    const Var qkv = ad::add_bias(g, ad::matmul(g, a, param(g, b.wqkv)), param(g, b.bqkv));
    std::vector<Var> heads;
    for (int h = 0; h < config_.heads; ++h) {
      const Var q = ad::slice_cols(g, qkv, h * dh, dh);
      const Var kk = ad::slice_cols(g, qkv, d + h * dh, dh);
      const Var v = ad::slice_cols(g, qkv, 2 * d + h * dh, dh);
      const Var s = ad::scale(g, ad::matmul(g, q, kk, false, true), inv_sqrt_dh);
      heads.push_back(ad::matmul(g, ad::causal_softmax(g, s), v));
    }
    const Var merged = heads.size() == 1 ? heads[0] : ad::concat_cols(g, heads);
    x = ad::add(g, x, ad::add_bias(g, ad::matmul(g, merged, param(g, b.wo)), param(g, b.bo)));
    const Var m = ad::layer_norm(g, x, param(g, b.ln2_g), param(g, b.ln2_b));
    const Var up = ad::gelu(g, ad::add_bias(g, ad::matmul(g, m, param(g, b.w1)), param(g, b.b1)));
    x = ad::add(g, x, ad::add_bias(g, ad::matmul(g, up, param(g, b.w2)), param(g, b.b2)));
  }
  r.hidden = ad::layer_norm(g, x, param(g, lnf_g_), param(g, lnf_b_));
  if (with_logits) r.logits = vocab_logits(g, r.hidden);
  return r;
}

Var ToyModel::vocab_logits(Graph& g, Var hidden_rows) const {
  return ad::add_bias(g, ad::matmul(g, hidden_rows, param(g, head_w_)), param(g, head_b_));
}

Var ToyModel::extract_queries(Graph& g, Var hidden, std::span<const int> rows) const {
  if (rows.empty()) return Var{};
  const Var picked = ad::gather_rows(g, hidden, {rows.begin(), rows.end()});
  const Var mid = ad::gelu(g, ad::add_bias(g, ad::matmul(g, picked, param(g, psi_w1_)), param(g, psi_b1_)));
  return ad::add_bias(g, ad::matmul(g, mid, param(g, psi_w2_)), param(g, psi_b2_));
}

Var ToyModel::decode_masks(Graph& g, Var queries, Var seg_features) const {
  const auto& q = g.value(queries);
  const auto& f = g.value(seg_features);
  if (q.cols() != f.cols() || q.cols() != config_.seg_channels) {
    throw DimensionMismatch("decode_masks: query width " + std::to_string(q.cols()) +
                            " vs feature width " + std::to_string(f.cols()));
  }
  const int n = q.rows();
  const int side = config_.seg_feature_size;
  if (f.rows() != side * side) throw DimensionMismatch("decode_masks: feature grid size");
  Var s = ad::matmul(g, queries, seg_features, false, true);
  s = ad::mul_scalar(g, s, param(g, mask_scale_));
  s = ad::scale(g, s, 1.0 / std::sqrt(static_cast<double>(config_.seg_channels)));
  s = ad::reshape(g, s, {n, side, side});
  return ad::upsample_bilinear(g, s, config_.image_size, config_.image_size);
}

EncodedImage ToyModel::encode_image(const RgbImage& image) const {
  Graph g(false);
  EncodedImage out;
  out.visual_tokens = g.value(visual_tokens(g, image));
  out.seg_features = g.value(seg_features(g, image));
  out.seg_features.reshape({config_.seg_feature_size, config_.seg_feature_size, config_.seg_channels});
  return out;
}

Tensor ToyModel::forward_logits(const RgbImage& image, std::span<const TokenId> tokens) const {
  Graph g(false);
  const auto r = forward(g, image, tokens, true);
  return g.value(r.logits);
}

bool ToyModel::emittable(TokenId id) const {
  const auto& sp = vocab_.special();
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) return false;
  if (id == sp.pad_id || id == sp.bos_id || id == sp.image_placeholder_id) return false;
  if (id == vocab_.id("<unk>")) return false;
  if (id == sp.rej_id) return config_.use_rej;
  if (id == sp.seg_id) return config_.share_seg_embedding;
  if (vocab_.is_seg(id)) return !config_.share_seg_embedding;
  return true;
}

std::vector<TokenId> ToyModel::generate(const RgbImage& image, std::span<const TokenId> prompt,
                                        int max_len) const {
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  const int n_img = config_.visual_token_count();
  const TokenId eos = vocab_.special().eos_id;
  for (int step = 0; step < max_len; ++step) {
    // The sequence after appending must still fit one forward pass.
    if (static_cast<int>(seq.size()) + n_img > config_.max_seq_len) break;
    Graph g(false);
    const auto r = forward(g, image, seq, false);
    const auto& hidden = g.value(r.hidden);
    const Var last = ad::gather_rows(g, r.hidden, {hidden.rows() - 1});
    const auto& logits = g.value(vocab_logits(g, last));
    TokenId best = -1;
    double best_v = -std::numeric_limits<double>::infinity();
    for (TokenId t = 0; t < static_cast<TokenId>(logits.size()); ++t) {
      if (!emittable(t)) continue;
      if (best < 0 || logits[t] > best_v) {
        best = t;
        best_v = logits[t];
      }
    }
    seq.push_back(best);
    out.push_back(best);
    if (best == eos) break;
  }
  return out;
}

std::vector<TokenId> ToyModel::prompt_tokens(const PromptPlan& plan) const {
  std::vector<TokenId> t{vocab_.special().bos_id, vocab_.special().image_placeholder_id};
  const auto q = vocab_.encode(build_question(plan));
  t.insert(t.end(), q.begin(), q.end());
  return t;
}

// ---- helpers ------------------------------------------------------------

Tensor image_tensor(const RgbImage& image) {
  Tensor t({image.height, image.width, 3}, 0.0);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) t[i] = image.pixels[i] / 127.5 - 1.0;
  return t;
}

BinaryMask threshold_logits(std::span<const double> logits, int height, int width) {
  if (logits.size() != static_cast<std::size_t>(height) * width) {
    throw DimensionMismatch("threshold_logits: size does not match the mask shape");
  }
  std::vector<std::uint8_t> bits(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) bits[i] = logits[i] > 0.0 ? 1 : 0;
  return BinaryMask(height, width, std::move(bits));
}

std::uint64_t parameter_checksum(const ad::ParameterSet& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : params.values()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace greskit
