#include "vfa/autograd.hpp"

#include <algorithm>
#include <cmath>

namespace vfa {

// ---------------------------------------------------------------- parameters

template <typename T>
Parameter<T>& ParameterStore<T>::add(std::string name, Tensor<T> init) {
  if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter<T>>();
  p->name = name;
  p->grad = Tensor<T>(init.shape());
  p->value = std::move(init);
  index_.emplace(std::move(name), params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
Parameter<T>& ParameterStore<T>::get(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter: " + std::string(name));
  return *params_[it->second];
}

template <typename T>
const Parameter<T>& ParameterStore<T>::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter: " + std::string(name));
  return *params_[it->second];
}

template <typename T>
bool ParameterStore<T>::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p->grad.fill(T(0));
}

template <typename T>
std::size_t ParameterStore<T>::num_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------------- tape

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape->requires_grad(id);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  nodes_.push_back(Node{p.value, {}, {}, &p, true});
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, true});
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, bool requires_grad, BackwardFn fn) {
  if (!requires_grad) fn = nullptr;
  nodes_.push_back(Node{std::move(value), {}, std::move(fn), nullptr, requires_grad});
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Tensor<T>& Tape<T>::grad(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> out) {
  if (out.tape != this) throw ContractError("backward: variable belongs to another tape");
  if (consumed_) throw ContractError("backward: tape already consumed");
  if (value(out.id).size() != 1) {
    throw ContractError("backward: output must be scalar, got " + shape_str(value(out.id).shape()));
  }
  consumed_ = true;
  grad(out.id)[0] = T(1);
  for (std::int64_t id = out.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param) {
      auto& pg = n.param->grad;
      if (pg.shape() != n.value.shape()) pg = Tensor<T>(n.value.shape());
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
    }
  }
}

// ------------------------------------------------------------------- helpers

namespace {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ContractError("variables from different tapes");
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void accumulate(Tape<T>& tape, std::uint32_t id, const Tensor<T>& g) {
  if (!tape.requires_grad(id)) return;
  auto& dst = tape.grad(id);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

// out[m x n] += a[m x k] * b[n x k]^T
template <typename T>
void accum_matmul_nt(T* out, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      out[i * n + j] += acc;
    }
  }
}

// out[k x n] += a[m x k]^T * b[m x n]
template <typename T>
void accum_matmul_tn(T* out, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      T* o = out + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * bi[j];
    }
  }
}

// out[m x n] += a[m x k] * b[k x n]
template <typename T>
void accum_matmul(T* out, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* o = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * bp[j];
    }
  }
}

template <typename T>
T sigmoid_of(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

// ------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                          accumulate(t, ia, g);
                          accumulate(t, ib, g);
                        });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape("sub", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                          accumulate(t, ia, g);
                          if (t.requires_grad(ib)) {
                            auto& d = t.grad(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
                          }
                        });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape("mul", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                          const auto& av = t.value(ia);
                          const auto& bv = t.value(ib);
                          if (t.requires_grad(ia)) {
                            auto& d = t.grad(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
                          }
                          if (t.requires_grad(ib)) {
                            auto& d = t.grad(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
                          }
                        });
}

template <typename T>
Var<T> scale(Var<T> a, std::type_identity_t<T> s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  const auto ia = a.id;
  return a.tape->record(std::move(out), a.requires_grad(), [ia, s](Tape<T>& t, const Tensor<T>& g) {
    auto& d = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
  });
}

template <typename T>
Var<T> add_row(Var<T> x, Var<T> bias) {
  require_same_tape(x, bias);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_row: " + shape_str(xv.shape()) + " + " + shape_str(bv.shape()));
  }
  Tensor<T> out = xv;
  const std::size_t c = xv.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    T* o = out.row(r);
    for (std::size_t j = 0; j < c; ++j) o[j] += bv[j];
  }
  const auto ix = x.id, ib = bias.id;
  return x.tape->record(std::move(out), x.requires_grad() || bias.requires_grad(),
                        [ix, ib, c](Tape<T>& t, const Tensor<T>& g) {
                          accumulate(t, ix, g);
                          if (t.requires_grad(ib)) {
                            auto& d = t.grad(ib);
                            for (std::size_t r = 0; r < g.rows(); ++r)
                              for (std::size_t j = 0; j < c; ++j) d[j] += g.row(r)[j];
                          }
                        });
}

template <typename T>
Var<T> add_constant(Var<T> x, const Tensor<T>& c) {
  require_same_shape("add_constant", x.value(), c);
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  const auto ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(),
                        [ix](Tape<T>& t, const Tensor<T>& g) { accumulate(t, ix, g); });
}

// ------------------------------------------------------------------ products

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  Tensor<T> out = kernels::matmul(a.value(), b.value());
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                          const auto& av = t.value(ia);
                          const auto& bv = t.value(ib);
                          const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
                          if (t.requires_grad(ia)) accum_matmul_nt(t.grad(ia).data().data(), g.data().data(),
                                                                   bv.data().data(), m, n, k);
                          if (t.requires_grad(ib)) accum_matmul_tn(t.grad(ib).data().data(), av.data().data(),
                                                                   g.data().data(), m, k, n);
                        });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()) + "^T");
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  Tensor<T> out(Shape{m, n});
  accum_matmul_nt(out.data().data(), av.data().data(), bv.data().data(), m, k, n);
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib, m, k, n](Tape<T>& t, const Tensor<T>& g) {
                          const auto& av = t.value(ia);
                          const auto& bv = t.value(ib);
                          if (t.requires_grad(ia))
                            accum_matmul(t.grad(ia).data().data(), g.data().data(), bv.data().data(), m, n, k);
                          if (t.requires_grad(ib))
                            accum_matmul_tn(t.grad(ib).data().data(), g.data().data(), av.data().data(), m, n, k);
                        });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  require_same_tape(x, w);
  require_same_tape(x, b);
  Tensor<T> out = kernels::matmul(x.value(), w.value());
  const auto& bv = b.value();
  const std::size_t n = out.cols();
  if (bv.size() != n) throw DimensionError("linear: bias " + shape_str(bv.shape()) + " for output width " + std::to_string(n));
  for (std::size_t r = 0; r < out.rows(); ++r) {
    T* o = out.row(r);
    for (std::size_t j = 0; j < n; ++j) o[j] += bv[j];
  }
  const auto ix = x.id, iw = w.id, ib = b.id;
  return x.tape->record(
      std::move(out), x.requires_grad() || w.requires_grad() || b.requires_grad(),
      [ix, iw, ib](Tape<T>& t, const Tensor<T>& g) {
        const auto& xv = t.value(ix);
        const auto& wv = t.value(iw);
        const std::size_t m = xv.rows(), k = xv.cols(), n = wv.cols();
        if (t.requires_grad(ix))
          accum_matmul_nt(t.grad(ix).data().data(), g.data().data(), wv.data().data(), m, n, k);
        if (t.requires_grad(iw))
          accum_matmul_tn(t.grad(iw).data().data(), xv.data().data(), g.data().data(), m, k, n);
        if (t.requires_grad(ib)) {
          auto& d = t.grad(ib);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < n; ++j) d[j] += g.row(r)[j];
        }
      });
}

// --------------------------------------------------------------- activations

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = sigmoid_of(v);
  const auto ix = x.id;
  const auto iy = static_cast<std::uint32_t>(x.tape->size());
  return x.tape->record(std::move(out), x.requires_grad(), [ix, iy](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(iy);
    auto& d = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> swish(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v * sigmoid_of(v);
  const auto ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(), [ix](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(ix);
    auto& d = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = sigmoid_of(xv[i]);
      d[i] += g[i] * (s + xv[i] * s * (T(1) - s));
    }
  });
}

template <typename T>
Var<T> glu(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t c2 = xv.cols();
  if (c2 % 2 != 0) throw DimensionError("glu: last dimension must be even, got " + shape_str(xv.shape()));
  const std::size_t h = c2 / 2;
  Shape shape = xv.shape();
  shape.back() = h;
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const T* xi = xv.row(r);
    T* o = out.row(r);
    for (std::size_t j = 0; j < h; ++j) o[j] = xi[j] * sigmoid_of(xi[h + j]);
  }
  const auto ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(), [ix, h](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(ix);
    auto& d = t.grad(ix);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const T* xi = xv.row(r);
      const T* gi = g.row(r);
      T* di = d.row(r);
      for (std::size_t j = 0; j < h; ++j) {
        const T s = sigmoid_of(xi[h + j]);
        di[j] += gi[j] * s;
        di[h + j] += gi[j] * xi[j] * s * (T(1) - s);
      }
    }
  });
}

// ------------------------------------------------------------ normalizations

template <typename T>
Var<T> masked_softmax(Var<T> logits, const Tensor<T>* mask) {
  Tensor<T> out = kernels::masked_softmax(logits.value(), mask);
  const auto ix = logits.id;
  const auto iy = static_cast<std::uint32_t>(logits.tape->size());
  return logits.tape->record(std::move(out), logits.requires_grad(), [ix, iy](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(iy);
    auto& d = t.grad(ix);
    const std::size_t n = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const T* yr = y.row(r);
      const T* gr = g.row(r);
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      T* dr = d.row(r);
      for (std::size_t j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, std::type_identity_t<T> epsilon) {
  require_same_tape(x, gain);
  require_same_tape(x, bias);
  Tensor<T> out = kernels::layer_norm(x.value(), gain.value(), bias.value(), epsilon);
  const auto ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->record(
      std::move(out), x.requires_grad() || gain.requires_grad() || bias.requires_grad(),
      [ix, ig, ib, epsilon](Tape<T>& t, const Tensor<T>& g) {
        const auto& xv = t.value(ix);
        const auto& gv = t.value(ig);
        const std::size_t c = xv.cols();
        std::vector<T> xhat(c), gg(c);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const T* xi = xv.row(r);
          const T* gi = g.row(r);
          T mu = 0;
          for (std::size_t j = 0; j < c; ++j) mu += xi[j];
          mu /= T(c);
          T var = 0;
          for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
          var /= T(c);
          const T inv = T(1) / std::sqrt(var + epsilon);
          T mean_gg = 0, mean_ggx = 0;
          for (std::size_t j = 0; j < c; ++j) {
            xhat[j] = (xi[j] - mu) * inv;
            gg[j] = gi[j] * gv[j];
            mean_gg += gg[j];
            mean_ggx += gg[j] * xhat[j];
          }
          mean_gg /= T(c);
          mean_ggx /= T(c);
          if (t.requires_grad(ix)) {
            T* d = t.grad(ix).row(r);
            for (std::size_t j = 0; j < c; ++j) d[j] += inv * (gg[j] - mean_gg - xhat[j] * mean_ggx);
          }
          if (t.requires_grad(ig)) {
            auto& d = t.grad(ig);
            for (std::size_t j = 0; j < c; ++j) d[j] += gi[j] * xhat[j];
          }
          if (t.requires_grad(ib)) {
            auto& d = t.grad(ib);
            for (std::size_t j = 0; j < c; ++j) d[j] += gi[j];
          }
        }
      });
}

// ------------------------------------------------------------- convolutions

template <typename T>
Var<T> conv1d_depthwise(Var<T> x, Var<T> kernels) {
  require_same_tape(x, kernels);
  Tensor<T> out = kernels::conv1d_depthwise(x.value(), kernels.value());
  const auto ix = x.id, ik = kernels.id;
  return x.tape->record(std::move(out), x.requires_grad() || kernels.requires_grad(),
                        [ix, ik](Tape<T>& t, const Tensor<T>& g) {
                          const auto& xv = t.value(ix);
                          const auto& kv = t.value(ik);
                          const auto frames = static_cast<std::ptrdiff_t>(xv.dim(0));
                          const std::size_t channels = xv.dim(1), k = kv.dim(0);
                          const auto pad = static_cast<std::ptrdiff_t>(k / 2);
                          const bool gx = t.requires_grad(ix), gk = t.requires_grad(ik);
                          for (std::ptrdiff_t f = 0; f < frames; ++f) {
                            const T* gf = g.row(static_cast<std::size_t>(f));
                            for (std::size_t j = 0; j < k; ++j) {
                              const std::ptrdiff_t src = f + static_cast<std::ptrdiff_t>(j) - pad;
                              if (src < 0 || src >= frames) continue;
                              const auto s = static_cast<std::size_t>(src);
                              if (gx) {
                                T* d = t.grad(ix).row(s);
                                const T* kj = kv.row(j);
                                for (std::size_t c = 0; c < channels; ++c) d[c] += kj[c] * gf[c];
                              }
                              if (gk) {
                                T* d = t.grad(ik).row(j);
                                const T* xs = xv.row(s);
                                for (std::size_t c = 0; c < channels; ++c) d[c] += xs[c] * gf[c];
                              }
                            }
                          }
                        });
}

template <typename T>
Var<T> conv1d_pointwise(Var<T> x, Var<T> w) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0)) {
    throw DimensionError("conv1d_pointwise: input " + shape_str(xv.shape()) + " weights " + shape_str(wv.shape()));
  }
  return matmul(x, w);
}

template <typename T>
Var<T> mfm_fuse(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape("mfm_fuse", a.value(), b.value());
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] >= bv[i] ? av[i] : bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, const Tensor<T>& g) {
                          const auto& av = t.value(ia);
                          const auto& bv = t.value(ib);
                          const bool ga = t.requires_grad(ia), gb = t.requires_grad(ib);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (av[i] >= bv[i]) {
                              if (ga) t.grad(ia)[i] += g[i];
                            } else if (gb) {
                              t.grad(ib)[i] += g[i];
                            }
                          }
                        });
}

// ------------------------------------------------------------------- layout

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t c = parts[0].value().cols();
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p);
    if (p.value().rank() != 2 || p.value().cols() != c) throw DimensionError("concat_rows: column mismatch");
    total += p.value().rows();
    rg = rg || p.requires_grad();
  }
  Tensor<T> out(Shape{total, c});
  std::vector<std::uint32_t> ids;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
    ids.push_back(p.id);
  }
  return parts[0].tape->record(std::move(out), rg, [ids](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) {
        auto& d = t.grad(id);
        for (std::size_t i = 0; i < n; ++i) d[i] += g[off + i];
      }
      off += n;
    }
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  bool rg = false;
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p);
    if (p.value().rank() != 2 || p.value().rows() != rows) throw DimensionError("concat_cols: row mismatch");
    total += p.value().cols();
    rg = rg || p.requires_grad();
    ids.push_back(p.id);
  }
  Tensor<T> out(Shape{rows, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const std::size_t c = v.cols();
    for (std::size_t r = 0; r < rows; ++r) std::copy(v.row(r), v.row(r) + c, out.row(r) + off);
    off += c;
  }
  return parts[0].tape->record(std::move(out), rg, [ids](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t c = t.value(id).cols();
      if (t.requires_grad(id)) {
        auto& d = t.grad(id);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t j = 0; j < c; ++j) d.row(r)[j] += g.row(r)[off + j];
      }
      off += c;
    }
  });
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t start, std::size_t count) {
  const auto& xv = x.value();
  if (xv.rank() != 2 || start + count > xv.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                         shape_str(xv.shape()));
  }
  Tensor<T> out(Shape{xv.rows(), count});
  for (std::size_t r = 0; r < xv.rows(); ++r) std::copy(xv.row(r) + start, xv.row(r) + start + count, out.row(r));
  const auto ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(), [ix, start, count](Tape<T>& t, const Tensor<T>& g) {
    auto& d = t.grad(ix);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t j = 0; j < count; ++j) d.row(r)[start + j] += g.row(r)[j];
  });
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t start, std::size_t count) {
  const auto& xv = x.value();
  if (xv.rank() != 2 || start + count > xv.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                         shape_str(xv.shape()));
  }
  const std::size_t c = xv.cols();
  std::vector<T> data(xv.row(start), xv.row(start) + count * c);
  const auto ix = x.id;
  return x.tape->record(Tensor<T>(Shape{count, c}, std::move(data)), x.requires_grad(),
                        [ix, start, c](Tape<T>& t, const Tensor<T>& g) {
                          T* d = t.grad(ix).row(start);
                          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                        });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids) {
  const auto& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("gather_rows: table must be 2-D");
  const std::size_t c = tv.cols();
  Tensor<T> out(Shape{ids.size(), c});
  std::vector<int> idx(ids.begin(), ids.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= tv.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(idx[r]) + " out of range");
    }
    std::copy(tv.row(static_cast<std::size_t>(idx[r])), tv.row(static_cast<std::size_t>(idx[r])) + c, out.row(r));
  }
  const auto it = table.id;
  return table.tape->record(std::move(out), table.requires_grad(),
                            [it, idx = std::move(idx), c](Tape<T>& t, const Tensor<T>& g) {
                              auto& d = t.grad(it);
                              for (std::size_t r = 0; r < idx.size(); ++r) {
                                T* dr = d.row(static_cast<std::size_t>(idx[r]));
                                for (std::size_t j = 0; j < c; ++j) dr[j] += g.row(r)[j];
                              }
                            });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const auto ix = x.id;
  return x.tape->record(std::move(out), x.requires_grad(),
                        [ix](Tape<T>& t, const Tensor<T>& g) { accumulate(t, ix, g); });
}

// ----------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  const auto ix = x.id;
  return x.tape->record(Tensor<T>::scalar(s), x.requires_grad(), [ix](Tape<T>& t, const Tensor<T>& g) {
    auto& d = t.grad(ix);
    for (auto& v : d.data()) v += g[0];
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), T(1) / T(n));
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets) {
  const auto& lv = logits.value();
  const std::size_t rows = lv.rows(), v = lv.cols();
  if (targets.size() != rows || rows == 0) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(lv.shape()));
  }
  Tensor<T> probs(Shape{rows, v});
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= v) throw DimensionError("cross_entropy: target out of range");
    const T* x = lv.row(r);
    T mx = *std::max_element(x, x + v);
    T total = 0;
    for (std::size_t j = 0; j < v; ++j) total += std::exp(x[j] - mx);
    const T lse = mx + std::log(total);
    loss += lse - x[tgt];
    T* p = probs.row(r);
    for (std::size_t j = 0; j < v; ++j) p[j] = std::exp(x[j] - lse);
  }
  loss /= T(rows);
  std::vector<int> tg(targets.begin(), targets.end());
  const auto ix = logits.id;
  return logits.tape->record(
      Tensor<T>::scalar(loss), logits.requires_grad(),
      [ix, tg = std::move(tg), probs = std::move(probs)](Tape<T>& t, const Tensor<T>& g) {
        auto& d = t.grad(ix);
        const std::size_t rows = probs.rows(), v = probs.cols();
        const T s = g[0] / T(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          T* dr = d.row(r);
          const T* p = probs.row(r);
          for (std::size_t j = 0; j < v; ++j) dr[j] += s * p[j];
          dr[tg[r]] -= s;
        }
      });
}

template <typename T>
Var<T> binary_cross_entropy(Var<T> probs, std::span<const int> targets) {
  const auto& pv = probs.value();
  const std::size_t n = pv.size();
  if (targets.size() != n || n == 0) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(pv.shape()));
  }
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] != 0 && targets[i] != 1) throw ContractError("binary_cross_entropy: targets must be 0/1");
    const T p = std::clamp(pv[i], lo, hi);
    loss -= targets[i] ? std::log(p) : std::log(T(1) - p);
  }
  loss /= T(n);
  std::vector<int> tg(targets.begin(), targets.end());
  const auto ip = probs.id;
  return probs.tape->record(Tensor<T>::scalar(loss), probs.requires_grad(),
                            [ip, tg = std::move(tg), lo, hi](Tape<T>& t, const Tensor<T>& g) {
                              const auto& pv = t.value(ip);
                              auto& d = t.grad(ip);
                              const T s = g[0] / T(tg.size());
                              for (std::size_t i = 0; i < tg.size(); ++i) {
                                const T p = pv[i];
                                if (p < lo || p > hi) continue;
                                d[i] += tg[i] ? -s / p : s / (T(1) - p);
                              }
                            });
}

// ------------------------------------------------------------- instantiation

#define VFA_INSTANTIATE_AUTOGRAD(T)                                                        \
  template struct Parameter<T>;                                                            \
  template class ParameterStore<T>;                                                        \
  template struct Var<T>;                                                                  \
  template class Tape<T>;                                                                  \
  template Var<T> add(Var<T>, Var<T>);                                                     \
  template Var<T> sub(Var<T>, Var<T>);                                                     \
  template Var<T> mul(Var<T>, Var<T>);                                                     \
  template Var<T> scale(Var<T>, T);                                                        \
  template Var<T> add_row(Var<T>, Var<T>);                                                 \
  template Var<T> add_constant(Var<T>, const Tensor<T>&);                                  \
  template Var<T> matmul(Var<T>, Var<T>);                                                  \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                               \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                          \
  template Var<T> sigmoid(Var<T>);                                                         \
  template Var<T> swish(Var<T>);                                                           \
  template Var<T> glu(Var<T>);                                                             \
  template Var<T> masked_softmax(Var<T>, const Tensor<T>*);                                \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                   \
  template Var<T> conv1d_depthwise(Var<T>, Var<T>);                                        \
  template Var<T> conv1d_pointwise(Var<T>, Var<T>);                                        \
  template Var<T> mfm_fuse(Var<T>, Var<T>);                                                \
  template Var<T> concat_rows(std::span<const Var<T>>);                                    \
  template Var<T> concat_cols(std::span<const Var<T>>);                                    \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                            \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                            \
  template Var<T> gather_rows(Var<T>, std::span<const int>);                               \
  template Var<T> reshape(Var<T>, Shape);                                                  \
  template Var<T> sum(Var<T>);                                                             \
  template Var<T> mean(Var<T>);                                                            \
  template Var<T> cross_entropy(Var<T>, std::span<const int>);                             \
  template Var<T> binary_cross_entropy(Var<T>, std::span<const int>);

VFA_INSTANTIATE_AUTOGRAD(float)
VFA_INSTANTIATE_AUTOGRAD(double)
#undef VFA_INSTANTIATE_AUTOGRAD

}  // namespace vfa
