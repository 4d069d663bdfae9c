#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "greskit/autodiff.hpp"
#include "greskit/image.hpp"
#include "greskit/mask.hpp"
#include "greskit/protocol.hpp"

namespace greskit {

struct ToyConfig {
  int image_size = 64;
  int patch_size = 8;
  int d_model = 64;
  int decoder_layers = 2;
  int heads = 2;
  int mlp_ratio = 4;
  int seg_feature_size = 16;  // h' = w'
  int seg_channels = 32;      // C
  int max_targets = kDefaultMaxReferents;
  int max_seq_len = 384;
  bool multi_seg = true;
  bool use_rej = true;
  bool prefix_expressions = true;
  bool share_seg_embedding = true;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
  // Referents packed into one prompt.
  int referents_per_prompt() const { return multi_seg ? max_targets : 1; }
  int visual_token_count() const {
    const int g = image_size / patch_size;
    return g * g;
  }
  AnswerOptions answer_options() const { return {prefix_expressions, share_seg_embedding}; }

  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static ToyConfig from_json(const nlohmann::json& j);
};

struct EncodedImage {
  ad::Tensor visual_tokens;  // n_img x d_model
  ad::Tensor seg_features;   // h' x w' x C
};

struct ForwardResult {
  ad::Var hidden;  // (L - 1 + n_img) x d_model, after the final norm
  ad::Var logits;  // same rows x |V|; invalid when logits were not requested
  // Row of each input token in the spliced sequence; -1 for the placeholder.
  std::vector<int> rows;
};

// Desk-scale multimodal segmenter: an overlapping-patch encoder feeding a causal token
// decoder, a separate strided-conv encoder producing segmentation features,
// a two-layer projector from [SEG] hidden states to queries, and a
// dot-product mask decoder. All parameters live in one ParameterSet and
// are initialized from config.seed.
class ToyModel {
 public:
  ToyModel(ToyConfig config, Vocabulary vocab);

  const ToyConfig& config() const noexcept { return config_; }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  ad::ParameterSet& params() noexcept { return params_; }
  const ad::ParameterSet& params() const noexcept { return params_; }

  // Graph-level building blocks.
  ad::Var visual_tokens(ad::Graph& g, const RgbImage& image) const;  // n_img x d
  ad::Var seg_features(ad::Graph& g, const RgbImage& image) const;   // (h'*w') x C
  // `tokens` must contain exactly one image placeholder.
  ForwardResult forward(ad::Graph& g, const RgbImage& image, std::span<const TokenId> tokens,
                        bool with_logits = true) const;
  ad::Var vocab_logits(ad::Graph& g, ad::Var hidden_rows) const;
  // psi applied to hidden[rows]; an empty row list gives an invalid Var.
  ad::Var extract_queries(ad::Graph& g, ad::Var hidden, std::span<const int> rows) const;
  // N x H x W logit maps; throws DimensionMismatch when channels disagree.
  ad::Var decode_masks(ad::Graph& g, ad::Var queries, ad::Var seg_features) const;

  // Value-level conveniences.
  EncodedImage encode_image(const RgbImage& image) const;
  ad::Tensor forward_logits(const RgbImage& image, std::span<const TokenId> tokens) const;

  // Greedy decoding after `prompt`; stops after eos or max_len tokens.
  // The returned tokens exclude the prompt.
  std::vector<TokenId> generate(const RgbImage& image, std::span<const TokenId> prompt,
                                int max_len) const;
  // Tokens the decoder may emit under the current flags.
  bool emittable(TokenId id) const;

  // <s> <image> question-tokens
  std::vector<TokenId> prompt_tokens(const PromptPlan& plan) const;

 private:
  struct BlockIndex {
    int ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  void init_parameters();
  void check_image(const RgbImage& image) const;
  ad::Var param(ad::Graph& g, int index) const { return g.parameter(params_, index); }

  ToyConfig config_;
  Vocabulary vocab_;
  ad::ParameterSet params_;

  int patch_w_ = -1, patch_b_ = -1, proj_w_ = -1, proj_b_ = -1, tok_ = -1, pos_ = -1;
  std::vector<BlockIndex> blocks_;
  int lnf_g_ = -1, lnf_b_ = -1, head_w_ = -1, head_b_ = -1;
  std::vector<int> conv_w_, conv_b_;
  int seg_pos_ = -1;
  int psi_w1_ = -1, psi_b1_ = -1, psi_w2_ = -1, psi_b2_ = -1;
  int mask_scale_ = -1;
};

// Pixel values mapped to [-1, 1], laid out H x W x 3.
ad::Tensor image_tensor(const RgbImage& image);

// Logit > 0 (sigmoid > 0.5).
BinaryMask threshold_logits(std::span<const double> logits, int height, int width);

// FNV-1a over the raw bytes of every parameter, in registration order.
std::uint64_t parameter_checksum(const ad::ParameterSet& params);

}  // namespace greskit
