#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vfa/align.hpp"
#include "vfa/autograd.hpp"
#include "vfa/nn.hpp"
#include "vfa/vocab.hpp"

namespace vfa::model {

using vfa::VocabSpec;

struct CglConfig {
  std::size_t num_layers = 2;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t window = 16;
  std::size_t global_kernel = 31;
  std::size_t local_kernel = 3;
  std::size_t feature_dim = 32;
  std::size_t vocab_size = 24;
  std::size_t decoder_layers = 2;
  std::uint64_t seed = 1;

  void validate() const;

  friend bool operator==(const CglConfig&, const CglConfig&) = default;
};

// Branch outputs of one encoder block, before MFM fusion.
template <typename T>
struct BlockTrace {
  Var<T> global_branch;
  Var<T> local_branch;
};

template <typename T>
class CglBlock {
 public:
  CglBlock(ParameterStore<T>& store, const std::string& name, const CglConfig& cfg, nn::Initializer& init);

  Var<T> operator()(Tape<T>& tape, Var<T> x, Var<T> text, BlockTrace<T>* trace = nullptr) const;

 private:
  std::size_t window_;
  nn::LayerNorm<T> ffn1_norm_, cross_norm_, global_norm_, global_conv_norm_, local_norm_, local_conv_norm_,
      ffn2_norm_, out_norm_;
  nn::FeedForward<T> ffn1_, ffn2_;
  nn::MultiHeadAttention<T> cross_attn_, global_attn_, local_attn_;
  nn::ConvBranch<T> global_conv_, local_conv_;
};

template <typename T>
class DecoderLayer {
 public:
  DecoderLayer(ParameterStore<T>& store, const std::string& name, const CglConfig& cfg, nn::Initializer& init);

  Var<T> operator()(Tape<T>& tape, Var<T> y, Var<T> memory) const;

 private:
  nn::LayerNorm<T> self_norm_, cross_norm_, ffn_norm_;
  nn::MultiHeadAttention<T> self_attn_, cross_attn_;
  nn::FeedForward<T> ffn_;
};

// Per-sample predictions fed to the aligners.
struct Inference {
  align::EmissionMatrix emissions;
  align::BoundarySignal boundaries;
  align::SilenceAwareSequence silence_seq;
};

// Scores the next token given a BOS-prefixed history.
using NextTokenScorer = std::function<std::vector<double>(std::span<const int> prefix)>;

// Greedy decoding restricted at each step to {next transcript token,
// SIL unless the previous token was SIL, EOS once the transcript is consumed}.
// Ties prefer that order. Stops after 2n+1 tokens and appends whatever of the
// transcript is left, so the result always reduces to the transcript.
align::SilenceAwareSequence constrained_greedy_decode(std::span<const int> transcript, const VocabSpec& vocab,
                                                      const NextTokenScorer& scorer);

template <typename T>
class CglModel {
 public:
  CglModel(CglConfig cfg, VocabSpec vocab);
  CglModel(const CglModel&) = delete;
  CglModel& operator=(const CglModel&) = delete;

  const CglConfig& config() const noexcept { return cfg_; }
  const VocabSpec& vocab() const noexcept { return vocab_; }
  ParameterStore<T>& parameters() noexcept { return params_; }
  const ParameterStore<T>& parameters() const noexcept { return params_; }

  // T_v x D_in features and a transcript to T_v x C encodings.
  Var<T> encoder_forward(Tape<T>& tape, const Tensor<T>& features, std::span<const int> text_ids,
                         std::vector<BlockTrace<T>>* trace = nullptr) const;
  // T_v x V logits.
  Var<T> frame_head(Tape<T>& tape, Var<T> enc) const;
  // T_v x 1 probabilities.
  Var<T> boundary_head(Tape<T>& tape, Var<T> enc) const;
  // One row of logits per prefix position; prefix[0] is normally BOS.
  Var<T> silence_decoder_logits(Tape<T>& tape, Var<T> enc, std::span<const int> text_ids,
                                std::span<const int> prefix) const;
  // Teacher-forced logits for [BOS] + gold; row i predicts gold[i] (EOS last).
  Var<T> silence_decoder_train(Tape<T>& tape, Var<T> enc, std::span<const int> text_ids,
                               std::span<const int> gold_silence_seq) const;
  align::SilenceAwareSequence silence_decoder_decode(const Tensor<T>& enc, std::span<const int> text_ids) const;

  Inference infer(const Tensor<T>& features, std::span<const int> text_ids) const;

 private:
  Var<T> embed_text(Tape<T>& tape, std::span<const int> ids) const;

  CglConfig cfg_;
  VocabSpec vocab_;
  ParameterStore<T> params_;
  nn::Linear<T> feature_embed_;
  Parameter<T>* token_embed_ = nullptr;
  std::vector<CglBlock<T>> blocks_;
  nn::Linear<T> frame_hidden_, frame_out_;
  nn::Linear<T> boundary_hidden_, boundary_out_;
  std::vector<DecoderLayer<T>> decoder_;
  nn::LayerNorm<T> decoder_norm_;
  nn::Linear<T> decoder_out_;
};

// Checkpoint: "VFCK", u32 header length, JSON header {config, vocab}, u32
// record count, then per parameter: u32 name length, name, VFT1 tensor.
template <typename T>
void save_checkpoint(const CglModel<T>& model, const std::string& path);
template <typename T>
std::unique_ptr<CglModel<T>> load_checkpoint(const std::string& path);

}  // namespace vfa::model
