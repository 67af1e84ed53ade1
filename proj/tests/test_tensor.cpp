#include <cmath>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "vfa/tensor.hpp"

using namespace vfa;
using vfa::testing::random_tensor;

namespace {

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> c(Shape{a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.dim(1); ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k) {
  const std::size_t T = x.dim(0), C = x.dim(1), K = k.dim(0), pad = K / 2;
  // Explicitly zero-padded copy, then a direct sliding window.
  Tensor<double> padded(Shape{T + 2 * pad, C});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) padded.at(t + pad, c) = x.at(t, c);
  Tensor<double> y(Shape{T, C});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < K; ++j) s += k.at(j, c) * padded.at(t + j, c);
      y.at(t, c) = s;
    }
  return y;
}

}  // namespace

TEST_CASE("tensor construction and accessors") {
  Tensor<float> t(Shape{2, 3}, 1.5f);
  CHECK(t.rank() == 2);
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 1.5f);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  const auto s = Tensor<double>::scalar(4.0);
  CHECK(s.rank() == 0);
  CHECK(s.size() == 1);
  CHECK(t.reshaped(Shape{3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped(Shape{4, 2}), DimensionError);
}

TEST_CASE("matmul matches the triple loop") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng() % 7, k = 1 + rng() % 7, n = 1 + rng() % 7;
    const auto a = random_tensor(Shape{m, k}, rng);
    const auto b = random_tensor(Shape{k, n}, rng);
    CHECK(kernels::matmul(a, b) == naive_matmul(a, b));
  }
  CHECK_THROWS_AS(kernels::matmul(Tensor<double>(Shape{2, 3}), Tensor<double>(Shape{2, 3})), DimensionError);
}

TEST_CASE("masked softmax") {
  std::mt19937_64 rng(2);
  const auto logits = random_tensor(Shape{4, 5}, rng, -3, 3);
  Tensor<double> mask(Shape{4, 5});
  mask.at(0, 1) = mask.at(2, 0) = mask.at(2, 4) = mask_sentinel<double>();
  const auto p = kernels::masked_softmax(logits, &mask);
  for (std::size_t r = 0; r < 4; ++r) {
    double max = -1e300;
    for (std::size_t c = 0; c < 5; ++c)
      if (mask.at(r, c) == 0.0) max = std::max(max, logits.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < 5; ++c)
      if (mask.at(r, c) == 0.0) z += std::exp(logits.at(r, c) - max);
    double total = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      const double expected = mask.at(r, c) == 0.0 ? std::exp(logits.at(r, c) - max) / z : 0.0;
      CHECK(p.at(r, c) == doctest::Approx(expected).epsilon(1e-14));
      total += p.at(r, c);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK(p.at(0, 1) == 0.0);
  CHECK(p.at(2, 4) == 0.0);

  SUBCASE("fully masked row") {
    Tensor<double> full(Shape{4, 5});
    for (std::size_t c = 0; c < 5; ++c) full.at(3, c) = mask_sentinel<double>();
    CHECK_THROWS_AS(kernels::masked_softmax(logits, &full), DegenerateMaskError);
  }
  SUBCASE("mask shape") {
    Tensor<double> wrong(Shape{5, 4});
    CHECK_THROWS_AS(kernels::masked_softmax(logits, &wrong), DimensionError);
  }
  SUBCASE("large logits stay finite") {
    Tensor<float> big(Shape{1, 3}, std::vector<float>{1000.f, 999.f, -1000.f});
    const auto q = kernels::masked_softmax<float>(big, nullptr);
    CHECK(q.all_finite());
    CHECK(q[0] + q[1] + q[2] == doctest::Approx(1.0));
  }
}

TEST_CASE("layer norm uses the population variance") {
  std::mt19937_64 rng(3);
  const auto x = random_tensor(Shape{3, 6}, rng, -2, 2);
  const auto gain = random_tensor(Shape{6}, rng);
  const auto bias = random_tensor(Shape{6}, rng);
  const auto y = kernels::layer_norm(x, gain, bias);
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mean += x.at(r, c) / 6.0;
    for (std::size_t c = 0; c < 6; ++c) var += (x.at(r, c) - mean) * (x.at(r, c) - mean) / 6.0;
    for (std::size_t c = 0; c < 6; ++c) {
      const double expected = (x.at(r, c) - mean) / std::sqrt(var + 1e-5) * gain[c] + bias[c];
      CHECK(y.at(r, c) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  const Tensor<double> flat(Shape{1, 4}, 2.0);
  const auto z = kernels::layer_norm(flat, Tensor<double>(Shape{4}, 1.0), Tensor<double>(Shape{4}, 0.5));
  for (double v : z.data()) CHECK(v == 0.5);
}

TEST_CASE("depthwise convolution") {
  std::mt19937_64 rng(4);
  for (std::size_t T : {1, 2, 5, 9}) {
    for (std::size_t K : {1, 3, 5}) {
      if (K > 2 * T + 1) continue;
      const auto x = random_tensor(Shape{T, 3}, rng);
      const auto k = random_tensor(Shape{K, 3}, rng);
      const auto y = kernels::conv1d_depthwise(x, k);
      const auto expected = naive_conv(x, k);
      for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(expected[i]).epsilon(1e-14));
    }
  }
  SUBCASE("identity kernel") {
    const auto x = random_tensor(Shape{4, 2}, rng);
    Tensor<double> k(Shape{3, 2});
    k.at(1, 0) = k.at(1, 1) = 1.0;
    CHECK(kernels::conv1d_depthwise(x, k) == x);
  }
  SUBCASE("kernel limits") {
    const Tensor<double> x(Shape{3, 2}, 1.0);
    CHECK_NOTHROW(kernels::conv1d_depthwise(x, Tensor<double>(Shape{7, 2})));
    CHECK_THROWS_AS(kernels::conv1d_depthwise(x, Tensor<double>(Shape{9, 2})), KernelTooLargeError);
    CHECK_THROWS_AS(kernels::conv1d_depthwise(x, Tensor<double>(Shape{4, 2})), DimensionError);
    CHECK_THROWS_AS(kernels::conv1d_depthwise(x, Tensor<double>(Shape{3, 3})), DimensionError);
  }
}

TEST_CASE("VFT1 round trip and layout") {
  std::mt19937_64 rng(5);
  const auto t = random_tensor<float>(Shape{3, 4}, rng);
  std::stringstream ss;
  write_vft(ss, t);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == 4 + 4 + 2 * 4 + 12 * 4);
  CHECK(bytes.substr(0, 4) == "VFT1");
  CHECK(bytes[4] == 2);
  CHECK(bytes[8] == 3);
  CHECK(bytes[12] == 4);
  const auto back = read_vft(ss);
  CHECK(back == t);

  SUBCASE("double narrows to float") {
    const Tensor<double> d(Shape{2}, std::vector<double>{0.1, 1.0 / 3.0});
    std::stringstream s2;
    write_vft(s2, d);
    const auto f = read_vft(s2);
    CHECK(f[0] == 0.1f);
    CHECK(f[1] == static_cast<float>(1.0 / 3.0));
  }
  SUBCASE("rejects malformed input") {
    std::stringstream bad("VFT2\0\0\0\0");
    CHECK_THROWS_AS(read_vft(bad), FormatError);
    std::stringstream truncated(bytes.substr(0, bytes.size() - 2));
    CHECK_THROWS_AS(read_vft(truncated), FormatError);
    std::string deep = "VFT1";
    deep += std::string("\x09\0\0\0", 4);
    std::stringstream too_deep(deep);
    CHECK_THROWS_AS(read_vft(too_deep), FormatError);
  }
  SUBCASE("scalar and empty tensors") {
    std::stringstream s3;
    write_vft(s3, Tensor<float>::scalar(2.5f));
    write_vft(s3, Tensor<float>(Shape{0, 3}));
    CHECK(read_vft(s3) == Tensor<float>::scalar(2.5f));
    CHECK(read_vft(s3).shape() == Shape{0, 3});
  }
}
