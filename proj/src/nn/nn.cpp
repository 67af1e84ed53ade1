#include "vfa/nn.hpp"

#include <cmath>
#include <vector>

namespace vfa::nn {

void AttentionConfig::validate() const {
  if (embed_dim == 0 || num_heads == 0) throw ContractError("attention: embed_dim and num_heads must be >= 1");
  if (embed_dim % num_heads != 0) {
    throw ContractError("attention: embed_dim " + std::to_string(embed_dim) + " not divisible by " +
                        std::to_string(num_heads) + " heads");
  }
  if (window == 0) throw ContractError("attention: window must be >= 1");
}

void ConvBranchConfig::validate() const {
  if (embed_dim == 0) throw ContractError("conv branch: embed_dim must be >= 1");
  if (kernel == 0 || kernel % 2 == 0) throw ContractError("conv branch: kernel must be odd");
}

template <typename T>
Tensor<T> local_attention_mask(std::size_t frames, std::size_t window) {
  const std::size_t radius = window / 2;
  Tensor<T> mask(Shape{frames, frames}, mask_sentinel<T>());
  for (std::size_t i = 0; i < frames; ++i) {
    const std::size_t lo = i >= radius ? i - radius : 0;
    const std::size_t hi = std::min(frames - 1, i + radius);
    for (std::size_t j = lo; j <= hi; ++j) mask.at(i, j) = T(0);
  }
  return mask;
}

template <typename T>
Tensor<T> causal_mask(std::size_t n) {
  Tensor<T> mask(Shape{n, n}, mask_sentinel<T>());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask.at(i, j) = T(0);
  return mask;
}

template <typename T>
Tensor<T> positional_encoding(std::size_t frames, std::size_t dim) {
  Tensor<T> pe(Shape{frames, dim});
  for (std::size_t pos = 0; pos < frames; ++pos) {
    for (std::size_t j = 0; j < dim; ++j) {
      const std::size_t pair = j / 2 * 2;
      const double freq = std::exp(-std::log(10000.0) * double(pair) / double(dim));
      const double angle = double(pos) * freq;
      pe.at(pos, j) = static_cast<T>(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

template <typename T>
Tensor<T> Initializer::xavier(std::size_t fan_in, std::size_t fan_out) {
  return uniform<T>(Shape{fan_in, fan_out}, std::sqrt(6.0 / double(fan_in + fan_out)));
}

template <typename T>
Tensor<T> Initializer::uniform(Shape shape, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng_));
  return t;
}

template <typename T>
Linear<T> Linear<T>::create(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                            Initializer& init) {
  Linear l;
  l.weight = &store.add(name + ".weight", init.xavier<T>(in, out));
  l.bias = &store.add(name + ".bias", Tensor<T>(Shape{out}));
  return l;
}

template <typename T>
Var<T> Linear<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return linear(x, tape.parameter(*weight), tape.parameter(*bias));
}

template <typename T>
LayerNorm<T> LayerNorm<T>::create(ParameterStore<T>& store, const std::string& name, std::size_t dim) {
  LayerNorm n;
  n.gain = &store.add(name + ".gain", Tensor<T>(Shape{dim}, T(1)));
  n.bias = &store.add(name + ".bias", Tensor<T>(Shape{dim}));
  return n;
}

template <typename T>
Var<T> LayerNorm<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return layer_norm(x, tape.parameter(*gain), tape.parameter(*bias));
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParameterStore<T>& store, const std::string& name, AttentionConfig cfg,
                                          Initializer& init)
    : cfg_(cfg) {
  cfg_.validate();
  const std::size_t c = cfg_.embed_dim;
  q_ = Linear<T>::create(store, name + ".query", c, c, init);
  k_ = Linear<T>::create(store, name + ".key", c, c, init);
  v_ = Linear<T>::create(store, name + ".value", c, c, init);
  out_ = Linear<T>::create(store, name + ".out", c, c, init);
}

template <typename T>
Var<T> MultiHeadAttention<T>::operator()(Tape<T>& tape, Var<T> query, Var<T> kv, const Tensor<T>* mask) const {
  const auto& qv = query.value();
  const auto& kvv = kv.value();
  if (qv.rank() != 2 || kvv.rank() != 2 || qv.cols() != cfg_.embed_dim || kvv.cols() != cfg_.embed_dim) {
    throw DimensionError("attention: query " + shape_str(qv.shape()) + " kv " + shape_str(kvv.shape()) +
                         " for embed_dim " + std::to_string(cfg_.embed_dim));
  }
  if (mask && mask->shape() != Shape{qv.rows(), kvv.rows()}) {
    throw DimensionError("attention: mask " + shape_str(mask->shape()) + " for " + std::to_string(qv.rows()) +
                         " queries and " + std::to_string(kvv.rows()) + " keys");
  }
  const Var<T> q = q_(tape, query);
  const Var<T> k = k_(tape, kv);
  const Var<T> v = v_(tape, kv);
  const std::size_t heads = cfg_.num_heads, d = cfg_.head_dim();
  const T inv_sqrt = T(1) / std::sqrt(T(d));
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Var<T> qh = heads == 1 ? q : slice_cols(q, h * d, d);
    const Var<T> kh = heads == 1 ? k : slice_cols(k, h * d, d);
    const Var<T> vh = heads == 1 ? v : slice_cols(v, h * d, d);
    const Var<T> weights = masked_softmax(scale(matmul_nt(qh, kh), inv_sqrt), mask);
    outs.push_back(matmul(weights, vh));
  }
  const Var<T> merged = heads == 1 ? outs[0] : concat_cols<T>(outs);
  return out_(tape, merged);
}

template <typename T>
ConvBranch<T>::ConvBranch(ParameterStore<T>& store, const std::string& name, ConvBranchConfig cfg,
                          Initializer& init)
    : cfg_(cfg) {
  cfg_.validate();
  const std::size_t c = cfg_.embed_dim;
  expand_ = Linear<T>::create(store, name + ".expand", c, 2 * c, init);
  depthwise_ = &store.add(name + ".depthwise", init.uniform<T>(Shape{cfg_.kernel, c}, 1.0 / std::sqrt(double(cfg_.kernel))));
  norm_ = LayerNorm<T>::create(store, name + ".norm", c);
  project_ = Linear<T>::create(store, name + ".project", c, c, init);
}

template <typename T>
Var<T> ConvBranch<T>::operator()(Tape<T>& tape, Var<T> x) const {
  const std::size_t frames = x.value().rows();
  if (frames == 0) throw ContractError("conv branch: empty input");
  Var<T> kernels = tape.parameter(*depthwise_);
  // Taps farther than T-1 frames from the centre only ever see padding, so a
  // kernel wider than 2T-1 is cropped to its centre without changing the output.
  const std::size_t reach = 2 * frames - 1;
  if (cfg_.kernel > reach) kernels = slice_rows(kernels, (cfg_.kernel - reach) / 2, reach);
  Var<T> h = glu(expand_(tape, x));
  h = conv1d_depthwise(h, kernels);
  h = swish(norm_(tape, h));
  return project_(tape, h);
}

template <typename T>
FeedForward<T>::FeedForward(ParameterStore<T>& store, const std::string& name, std::size_t dim, Initializer& init) {
  up_ = Linear<T>::create(store, name + ".up", dim, 4 * dim, init);
  down_ = Linear<T>::create(store, name + ".down", 4 * dim, dim, init);
}

template <typename T>
Var<T> FeedForward<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return down_(tape, swish(up_(tape, x)));
}

#define VFA_INSTANTIATE_NN(T)                                                      \
  template Tensor<T> local_attention_mask<T>(std::size_t, std::size_t);          \
  template Tensor<T> causal_mask<T>(std::size_t);                                 \
  template Tensor<T> positional_encoding<T>(std::size_t, std::size_t);           \
  template Tensor<T> Initializer::xavier<T>(std::size_t, std::size_t);           \
  template Tensor<T> Initializer::uniform<T>(Shape, double);                      \
  template struct Linear<T>;                                                      \
  template struct LayerNorm<T>;                                                   \
  template class MultiHeadAttention<T>;                                           \
  template class ConvBranch<T>;                                                   \
  template class FeedForward<T>;

VFA_INSTANTIATE_NN(float)
VFA_INSTANTIATE_NN(double)
#undef VFA_INSTANTIATE_NN

}  // namespace vfa::nn
