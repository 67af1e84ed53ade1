#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "vfa/autograd.hpp"

namespace vfa::nn {

struct AttentionConfig {
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  // Local attention only: frame i sees j with |i - j| <= window / 2.
  std::size_t window = 16;

  void validate() const;
  std::size_t head_dim() const { return embed_dim / num_heads; }
};

struct ConvBranchConfig {
  std::size_t kernel = 31;
  std::size_t embed_dim = 64;

  void validate() const;
};

// Additive T x T mask keeping |i - j| <= floor(window / 2).
template <typename T>
Tensor<T> local_attention_mask(std::size_t frames, std::size_t window);

// Additive n x n mask keeping j <= i.
template <typename T>
Tensor<T> causal_mask(std::size_t n);

// Sinusoidal absolute positions: even columns sin, odd columns cos.
template <typename T>
Tensor<T> positional_encoding(std::size_t frames, std::size_t dim);

// Seeded parameter initialization.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <typename T>
  Tensor<T> xavier(std::size_t fan_in, std::size_t fan_out);
  template <typename T>
  Tensor<T> uniform(Shape shape, double bound);

 private:
  std::mt19937_64 rng_;
};

template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;  // [in x out]
  Parameter<T>* bias = nullptr;    // [out]

  static Linear create(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                       Initializer& init);
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  static LayerNorm create(ParameterStore<T>& store, const std::string& name, std::size_t dim);
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;
};

// Multi-head scaled dot-product attention. Queries come from one sequence,
// keys and values from another (the same one for self-attention).
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore<T>& store, const std::string& name, AttentionConfig cfg, Initializer& init);

  // mask, when given, is T_q x T_kv with entries 0 or mask_sentinel().
  Var<T> operator()(Tape<T>& tape, Var<T> query, Var<T> kv, const Tensor<T>* mask = nullptr) const;

  const AttentionConfig& config() const { return cfg_; }

 private:
  AttentionConfig cfg_;
  Linear<T> q_, k_, v_, out_;
};

// pointwise(C -> 2C) -> GLU -> depthwise(k) -> layer_norm -> swish -> pointwise(C -> C).
// The caller adds the residual.
template <typename T>
class ConvBranch {
 public:
  ConvBranch() = default;
  ConvBranch(ParameterStore<T>& store, const std::string& name, ConvBranchConfig cfg, Initializer& init);

  Var<T> operator()(Tape<T>& tape, Var<T> x) const;

  const ConvBranchConfig& config() const { return cfg_; }

 private:
  ConvBranchConfig cfg_;
  Linear<T> expand_;
  Parameter<T>* depthwise_ = nullptr;  // [k x C]
  LayerNorm<T> norm_;
  Linear<T> project_;
};

// linear(C -> 4C) -> swish -> linear(4C -> C). The caller scales the residual.
template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore<T>& store, const std::string& name, std::size_t dim, Initializer& init);

  Var<T> operator()(Tape<T>& tape, Var<T> x) const;

 private:
  Linear<T> up_, down_;
};

}  // namespace vfa::nn
