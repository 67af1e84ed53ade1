#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "vfa/tensor.hpp"

namespace vfa {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

// Owns named parameters. Addresses are stable for the store's lifetime.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter<T>& add(std::string name, Tensor<T> init);
  Parameter<T>& get(std::string_view name);
  const Parameter<T>& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  void zero_grad();
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t num_elements() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.cbegin(); }
  auto end() const { return params_.cend(); }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
class Tape;

// Handle to a node on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

// Records a forward computation for one reverse-mode sweep. Not reusable after
// backward(); build a fresh tape per step.
template <typename T>
class Tape {
 public:
  // Receives the gradient flowing into the node's output.
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> parameter(Parameter<T>& p);
  // Leaf that collects its own gradient (used for input-gradient checks).
  Var<T> variable(Tensor<T> value);
  Var<T> record(Tensor<T> value, bool requires_grad, BackwardFn fn);

  const Tensor<T>& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  // Gradient accumulator of a node, zero-initialized on first access.
  Tensor<T>& grad(std::uint32_t id);

  // Seeds d(out)/d(out) = 1 and sweeps every node in reverse creation order
  // once. Parameter leaves add their gradient into Parameter::grad.
  void backward(Var<T> out);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };
  std::deque<Node> nodes_;
  bool consumed_ = false;
};

// Differentiable operations. Shapes are checked eagerly and mismatches throw
// DimensionError.

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, std::type_identity_t<T> s);
// x [R x C] + bias [C], broadcast over rows.
template <typename T> Var<T> add_row(Var<T> x, Var<T> bias);
// Adds a constant tensor of the same shape.
template <typename T> Var<T> add_constant(Var<T> x, const Tensor<T>& c);

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// a [m x k] times b[n x k] transposed.
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

template <typename T> Var<T> sigmoid(Var<T> x);
template <typename T> Var<T> swish(Var<T> x);
// Gated linear unit over the last dim: first half * sigmoid(second half).
template <typename T> Var<T> glu(Var<T> x);

// Row-wise softmax with an optional additive mask holding 0 or mask_sentinel().
template <typename T> Var<T> masked_softmax(Var<T> logits, const Tensor<T>* mask);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias,
                                        std::type_identity_t<T> epsilon = T(1e-5));
template <typename T> Var<T> conv1d_depthwise(Var<T> x, Var<T> kernels);
template <typename T> Var<T> conv1d_pointwise(Var<T> x, Var<T> w);
// Elementwise max; the gradient goes to `a` on ties.
template <typename T> Var<T> mfm_fuse(Var<T> a, Var<T> b);

template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_cols(Var<T> x, std::size_t start, std::size_t count);
template <typename T> Var<T> slice_rows(Var<T> x, std::size_t start, std::size_t count);
template <typename T> Var<T> gather_rows(Var<T> table, std::span<const int> ids);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);

template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);
// Mean over rows of -log softmax(logits)[target].
template <typename T> Var<T> cross_entropy(Var<T> logits, std::span<const int> targets);
// Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7].
template <typename T> Var<T> binary_cross_entropy(Var<T> probs, std::span<const int> targets);

}  // namespace vfa
