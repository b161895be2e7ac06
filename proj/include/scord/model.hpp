#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scord/autograd.hpp"
#include "scord/vocab.hpp"

namespace scord {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int hidden_dim = 64;
  int num_heads = 4;
  int n_v = 2;  // image encoder layers
  int n_t = 2;  // text encoder layers
  int n_m = 2;  // multimodal fusion layers
  int n_d = 2;  // decoder layers
  int image_size = 64;
  int patch_size = 8;
  int vocab_size = 0;
  int max_input_len = 16;
  int max_target_len = 16;
  int ffn_dim = 0;  // 0 -> 4 * hidden_dim
  uint64_t seed = 0;

  int num_patches() const {
    int g = image_size / patch_size;
    return g * g;
  }
  int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden_dim; }
  void validate() const;
};

// S x S x 3 pixel intensities in [0,1], channel-last, plus the native image
// extent the box coordinates live in.
struct ImageTensor {
  int side = 0;
  double native_w = 0, native_h = 0;
  std::vector<double> data;  // side*side*3

  double at(int y, int x, int c) const { return data[(y * side + x) * 3 + c]; }
};

// Which vocabulary ids the decoder may emit at a slot, given whether [@] has
// already been generated. Before [@]: words, [UNK] and [@]. After: position
// tokens and [SEP]. Everything else gets a large negative additive penalty,
// which keeps the corresponding output-projection entries out of every loss
// path they are not supposed to reach.
struct DecodeSupport {
  int first_position_id = 0;
  int vocab_size = 0;

  static DecodeSupport from_vocab(const Vocabulary& v) {
    return {kNumSentinels + v.num_words(), v.size()};
  }
  bool allowed(TokenId id, bool after_at) const;
  Eigen::RowVectorXd logit_mask(bool after_at) const;  // 0 or -1e30 per id
};

struct TrainingSample {
  ImageTensor image;
  std::vector<TokenId> input_ids;
  std::vector<TokenId> target_ids;
  std::vector<uint8_t> loss_mask;
};

struct LossResult {
  double loss = 0;
  long unmasked_positions = 0;
  bool empty_mask_warning = false;
};

struct Hyperparams {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 1;
  int batch_size = 16;
  uint64_t seed = 0;
};

class Model {
 public:
  struct Linear {
    ag::Var W, b;
  };
  struct LayerNorm {
    ag::Var g, b;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct EncoderLayer {
    LayerNorm ln1;
    Attention self;
    LayerNorm ln2;
    Linear ff1, ff2;
  };
  // Shape-identical for the fusion encoder and the decoder, so decoder
  // initialization can copy fusion weights.
  struct CrossLayer {
    LayerNorm ln1;
    Attention self;
    LayerNorm ln_x;
    Attention cross;
    LayerNorm ln2;
    Linear ff1, ff2;
  };

  static Model init(const ModelConfig& config);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::pair<std::string, ag::Var>>& parameters() const { return params_; }
  ag::Var param(const std::string& name) const;

  // Graph-building forwards (shared by training and inference).
  ag::Var encode_image_g(const ImageTensor& img) const;
  ag::Var encode_text_g(const std::vector<TokenId>& input_ids) const;
  ag::Var fuse_g(const ag::Var& img_feats, const ag::Var& txt_feats) const;
  ag::Var decoder_hidden_g(const ag::Var& z, const std::vector<TokenId>& prefix) const;
  ag::Var decoder_logits_g(const ag::Var& z, const std::vector<TokenId>& prefix) const;

  // Inference wrappers (no gradient recording).
  Eigen::MatrixXd encode_image(const ImageTensor& img) const;
  Eigen::MatrixXd encode_text(const std::vector<TokenId>& input_ids) const;
  Eigen::MatrixXd fuse_context(const ImageTensor& img, const std::vector<TokenId>& input_ids) const;
  // One logit row per position k in 0..|prefix|: row k scores token t_k given
  // t_{0:k-1} (a learned start embedding seeds position 0).
  Eigen::MatrixXd decoder_logits(const Eigen::MatrixXd& z,
                                 const std::vector<TokenId>& prefix) const;

  void save(const std::string& path, uint64_t vocab_hash) const;
  static std::pair<Model, uint64_t> load(const std::string& path);

 private:
  Model() = default;
  void register_params();

  ModelConfig cfg_;
  Linear patch_embed_;
  ag::Var img_pos_;
  std::vector<EncoderLayer> img_layers_;
  LayerNorm img_ln_f_;
  ag::Var tok_embed_, text_pos_;
  std::vector<EncoderLayer> text_layers_;
  LayerNorm text_ln_f_;
  std::vector<CrossLayer> fusion_layers_;
  LayerNorm fusion_ln_f_;
  ag::Var dec_embed_, dec_pos_, bos_;
  std::vector<CrossLayer> dec_layers_;
  LayerNorm dec_ln_f_;
  Linear out_proj_;
  std::vector<std::pair<std::string, ag::Var>> params_;
};

// Mean masked cross-entropy over the batch (summed negative log-likelihood
// divided by the number of unmasked positions). The decoder distribution at
// each slot is restricted to the slot's legal segment via DecodeSupport.
LossResult compute_loss(const std::vector<TrainingSample>& batch, const Model& m,
                        const DecodeSupport& support);

using GradientSet = std::vector<std::pair<std::string, Eigen::MatrixXd>>;

std::pair<LossResult, GradientSet> compute_gradients(const std::vector<TrainingSample>& batch,
                                                     const Model& m,
                                                     const DecodeSupport& support);

struct TrainOutcome {
  Model model;
  std::vector<double> loss_history;  // one mean loss per epoch
};

TrainOutcome train(const std::vector<TrainingSample>& dataset, const ModelConfig& config,
                   const Hyperparams& hp, const DecodeSupport& support);

// In-place fitting of an already-initialized model (used by train()).
std::vector<double> fit(Model& m, const std::vector<TrainingSample>& dataset,
                        const Hyperparams& hp, const DecodeSupport& support);

uint64_t fnv1a_hash(const std::string& s);

}  // namespace scord
