#include "vfa/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace vfa {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
  }
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t i) const {
  if (i >= shape_.size()) throw DimensionError("dimension index out of range");
  return shape_[i];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

namespace kernels {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() != 2 || a.rank() < 1 || a.cols() != b.dim(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < m; ++i) {
    T* o = out.row(i);
    const T* ai = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b.row(p);
      for (std::size_t j = 0; j < n; ++j) o[j] += av * bp[j];
    }
  }
  return out;
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const Tensor<T>* mask) {
  if (mask && mask->shape() != logits.shape()) {
    throw DimensionError("masked_softmax: mask " + shape_str(mask->shape()) + " vs logits " +
                         shape_str(logits.shape()));
  }
  Tensor<T> out(logits.shape());
  const std::size_t rows = logits.rows(), n = logits.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = logits.row(r);
    const T* m = mask ? mask->row(r) : nullptr;
    T* y = out.row(r);
    T mx = std::numeric_limits<T>::lowest();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (m && is_masked(m[j])) continue;
      const T z = m ? x[j] + m[j] : x[j];
      if (!any || z > mx) mx = z;
      any = true;
    }
    if (!any) throw DegenerateMaskError("masked_softmax: row " + std::to_string(r) + " is fully masked");
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (m && is_masked(m[j])) {
        y[j] = 0;
        continue;
      }
      const T z = m ? x[j] + m[j] : x[j];
      y[j] = std::exp(z - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T epsilon) {
  const std::size_t c = x.cols();
  if (c == 0 || gain.size() != c || bias.size() != c) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " gain " + shape_str(gain.shape()));
  }
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* xi = x.row(r);
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= T(c);
    const T inv = T(1) / std::sqrt(var + epsilon);
    T* o = out.row(r);
    for (std::size_t j = 0; j < c; ++j) o[j] = (xi[j] - mu) * inv * gain[j] + bias[j];
  }
  return out;
}

template <typename T>
Tensor<T> conv1d_depthwise(const Tensor<T>& x, const Tensor<T>& kernels) {
  if (x.rank() != 2 || kernels.rank() != 2 || kernels.dim(1) != x.dim(1)) {
    throw DimensionError("conv1d_depthwise: input " + shape_str(x.shape()) + " kernels " +
                         shape_str(kernels.shape()));
  }
  const std::size_t frames = x.dim(0), channels = x.dim(1), k = kernels.dim(0);
  if (k % 2 == 0) throw DimensionError("conv1d_depthwise: kernel size must be odd");
  if (k > 2 * frames + 1) {
    throw KernelTooLargeError("conv1d_depthwise: kernel " + std::to_string(k) + " exceeds 2T+1 for T=" +
                              std::to_string(frames));
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto T_ = static_cast<std::ptrdiff_t>(frames);
  Tensor<T> out(x.shape());
  for (std::ptrdiff_t t = 0; t < T_; ++t) {
    T* o = out.row(static_cast<std::size_t>(t));
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(j) - pad;
      if (src < 0 || src >= T_) continue;
      const T* xs = x.row(static_cast<std::size_t>(src));
      const T* kj = kernels.row(j);
      for (std::size_t c = 0; c < channels; ++c) o[c] += kj[c] * xs[c];
    }
  }
  return out;
}

template <typename T>
Tensor<T> conv1d_pointwise(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
    throw DimensionError("conv1d_pointwise: input " + shape_str(x.shape()) + " weights " +
                         shape_str(w.shape()));
  }
  return matmul(x, w);
}

#define VFA_INSTANTIATE_KERNELS(T)                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> masked_softmax(const Tensor<T>&, const Tensor<T>*);                    \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);   \
  template Tensor<T> conv1d_depthwise(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> conv1d_pointwise(const Tensor<T>&, const Tensor<T>&);

VFA_INSTANTIATE_KERNELS(float)
VFA_INSTANTIATE_KERNELS(double)
#undef VFA_INSTANTIATE_KERNELS

}  // namespace kernels

namespace {

constexpr std::array<char, 4> kVftMagic{'V', 'F', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("VFT1: truncated header");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

}  // namespace

template <typename T>
void write_vft(std::ostream& out, const Tensor<T>& t) {
  out.write(kVftMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (T v : t.data()) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
  if (!out) throw FormatError("VFT1: write failed");
}

template <typename T>
void write_vft_file(const std::string& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  write_vft(out, t);
}

Tensor<float> read_vft(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kVftMagic) throw FormatError("VFT1: bad magic");
  const std::uint32_t rank = get_u32(in);
  if (rank > 8) throw FormatError("VFT1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(in);
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) {
    const std::uint32_t bits = get_u32(in);
    std::memcpy(&v, &bits, 4);
  }
  return Tensor<float>(std::move(shape), std::move(data));
}

Tensor<float> read_vft_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return read_vft(in);
}

template void write_vft(std::ostream&, const Tensor<float>&);
template void write_vft(std::ostream&, const Tensor<double>&);
template void write_vft_file(const std::string&, const Tensor<float>&);
template void write_vft_file(const std::string&, const Tensor<double>&);

}  // namespace vfa
