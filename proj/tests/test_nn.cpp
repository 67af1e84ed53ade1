#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "vfa/grad_check.hpp"
#include "vfa/nn.hpp"

using namespace vfa;
using namespace vfa::nn;
using vfa::testing::random_tensor;
using vfa::testing::weighted_sum;

namespace {

// Plain nested-vector reference implementations.
using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor<double>& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

Mat ref_linear(const Mat& x, const ParameterStore<double>& store, const std::string& name) {
  const auto& w = store.get(name + ".weight").value;
  const auto& b = store.get(name + ".bias").value;
  Mat y(x.size(), std::vector<double>(w.cols()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < w.cols(); ++o) {
      double s = b[o];
      for (std::size_t k = 0; k < w.rows(); ++k) s += x[i][k] * w.at(k, o);
      y[i][o] = s;
    }
  return y;
}

double ref_sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Mat ref_layer_norm(const Mat& x, const ParameterStore<double>& store, const std::string& name) {
  const auto& g = store.get(name + ".gain").value;
  const auto& b = store.get(name + ".bias").value;
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = double(x[i].size());
    double mu = 0.0, var = 0.0;
    for (double v : x[i]) mu += v / n;
    for (double v : x[i]) var += (v - mu) * (v - mu) / n;
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return y;
}

// Attention with an explicit key set per query row.
Mat ref_attention(const Mat& xq, const Mat& xkv, const ParameterStore<double>& store, const std::string& name,
                  std::size_t heads, const std::function<bool(std::size_t, std::size_t)>& visible) {
  const Mat q = ref_linear(xq, store, name + ".query");
  const Mat k = ref_linear(xkv, store, name + ".key");
  const Mat v = ref_linear(xkv, store, name + ".value");
  const std::size_t c = q[0].size(), d = c / heads;
  Mat merged(xq.size(), std::vector<double>(c));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < xq.size(); ++i) {
      std::vector<double> w(xkv.size(), 0.0);
      double z = 0.0;
      for (std::size_t j = 0; j < xkv.size(); ++j) {
        if (!visible(i, j)) continue;
        double dot = 0.0;
        for (std::size_t e = 0; e < d; ++e) dot += q[i][h * d + e] * k[j][h * d + e];
        w[j] = std::exp(dot / std::sqrt(double(d)));
        z += w[j];
      }
      for (std::size_t j = 0; j < xkv.size(); ++j)
        for (std::size_t e = 0; e < d; ++e) merged[i][h * d + e] += w[j] / z * v[j][h * d + e];
    }
  }
  return ref_linear(merged, store, name + ".out");
}

void check_close(const Tensor<double>& got, const Mat& want, double tol) {
  REQUIRE(got.rows() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    REQUIRE(got.cols() == want[i].size());
    for (std::size_t j = 0; j < want[i].size(); ++j) CHECK(got.at(i, j) == doctest::Approx(want[i][j]).epsilon(tol));
  }
}

// Fills every parameter with random values so zero biases and unit gains do not hide mistakes.
void randomize(ParameterStore<double>& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : store) p->value = random_tensor(p->value.shape(), rng, -0.8, 0.8);
}

}  // namespace

TEST_CASE("local mask membership") {
  const auto m = local_attention_mask<double>(5, 4);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      const bool visible = (i > j ? i - j : j - i) <= 2;
      CHECK((m.at(i, j) == 0.0) == visible);
      if (!visible) CHECK(m.at(i, j) == mask_sentinel<double>());
    }
  // Window 1 keeps only the diagonal; an odd window rounds down.
  const auto d = local_attention_mask<double>(3, 1);
  CHECK(d.at(0, 0) == 0.0);
  CHECK(d.at(0, 1) != 0.0);
  CHECK(local_attention_mask<double>(6, 5) == local_attention_mask<double>(6, 4));
}

TEST_CASE("causal mask") {
  const auto m = causal_mask<float>(4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK((m.at(i, j) == 0.0f) == (j <= i));
}

TEST_CASE("positional encoding") {
  const auto pe = positional_encoding<double>(3, 6);
  for (std::size_t j = 0; j < 6; ++j) CHECK(pe.at(0, j) == (j % 2 == 0 ? 0.0 : 1.0));
  const auto small = positional_encoding<double>(2, 4);
  CHECK(small.at(1, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(small.at(1, 1) == doctest::Approx(std::cos(1.0)));
  CHECK(small.at(1, 2) == doctest::Approx(std::sin(0.01)));
  CHECK(small.at(1, 3) == doctest::Approx(std::cos(0.01)));
}

TEST_CASE("attention config validation") {
  CHECK_THROWS_AS((AttentionConfig{6, 4, 8}.validate()), ContractError);
  CHECK_THROWS_AS((AttentionConfig{8, 0, 8}.validate()), ContractError);
  CHECK_THROWS_AS((AttentionConfig{8, 2, 0}.validate()), ContractError);
  CHECK_THROWS_AS((ConvBranchConfig{4, 8}.validate()), ContractError);
  CHECK_NOTHROW((ConvBranchConfig{3, 8}.validate()));
}

TEST_CASE("multi-head attention matches the per-head reference") {
  std::mt19937_64 rng(30);
  ParameterStore<double> store;
  Initializer init(1);
  const MultiHeadAttention<double> att(store, "att", {4, 2, 2}, init);
  randomize(store, 31);
  const auto xq = random_tensor(Shape{3, 4}, rng);
  const auto xkv = random_tensor(Shape{5, 4}, rng);
  Tape<double> tape;

  SUBCASE("cross attention") {
    const auto y = att(tape, tape.constant(xq), tape.constant(xkv));
    check_close(y.value(), ref_attention(to_mat(xq), to_mat(xkv), store, "att", 2, [](auto, auto) { return true; }),
                1e-12);
  }
  SUBCASE("local self attention") {
    const auto mask = local_attention_mask<double>(3, 2);
    const auto y = att(tape, tape.constant(xq), tape.constant(xq), &mask);
    check_close(y.value(),
                ref_attention(to_mat(xq), to_mat(xq), store, "att", 2,
                              [](std::size_t i, std::size_t j) { return (i > j ? i - j : j - i) <= 1; }),
                1e-12);
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(att(tape, tape.constant(Tensor<double>(Shape{3, 5})), tape.constant(xkv)), DimensionError);
    const auto wrong = causal_mask<double>(3);
    CHECK_THROWS_AS(att(tape, tape.constant(xq), tape.constant(xkv), &wrong), DimensionError);
  }
}

TEST_CASE("attention degenerate cases") {
  std::mt19937_64 rng(32);
  ParameterStore<double> store;
  Initializer init(2);
  const MultiHeadAttention<double> att(store, "att", {4, 1, 4}, init);
  randomize(store, 33);

  SUBCASE("one frame returns the value projection") {
    const auto x = random_tensor(Shape{1, 4}, rng);
    Tape<double> tape;
    const auto y = att(tape, tape.constant(x), tape.constant(x));
    const Mat v = ref_linear(ref_linear(to_mat(x), store, "att.value"), store, "att.out");
    check_close(y.value(), v, 1e-12);
  }
  SUBCASE("zero query weights average the values") {
    store.get("att.query.weight").value.fill(0.0);
    store.get("att.query.bias").value.fill(0.0);
    const auto x = random_tensor(Shape{4, 4}, rng);
    Tape<double> tape;
    const auto y = att(tape, tape.constant(x), tape.constant(x));
    const Mat v = ref_linear(to_mat(x), store, "att.value");
    Mat avg(1, std::vector<double>(4, 0.0));
    for (const auto& row : v)
      for (std::size_t j = 0; j < 4; ++j) avg[0][j] += row[j] / 4.0;
    const Mat expected_row = ref_linear(avg, store, "att.out");
    check_close(y.value(), Mat(4, expected_row[0]), 1e-12);
  }
}

TEST_CASE("local attention with a wide window equals global attention") {
  std::mt19937_64 rng(34);
  ParameterStore<double> store;
  Initializer init(3);
  const MultiHeadAttention<double> att(store, "att", {8, 2, 12}, init);
  const auto x = random_tensor(Shape{6, 8}, rng);
  const auto mask = local_attention_mask<double>(6, 12);
  Tape<double> tape;
  const auto local = att(tape, tape.constant(x), tape.constant(x), &mask);
  const auto global = att(tape, tape.constant(x), tape.constant(x));
  for (std::size_t i = 0; i < local.value().size(); ++i)
    CHECK(local.value()[i] == doctest::Approx(global.value()[i]).epsilon(1e-14));
}

TEST_CASE("local attention ignores frames outside the window") {
  std::mt19937_64 rng(35);
  ParameterStore<double> store;
  Initializer init(4);
  const MultiHeadAttention<double> att(store, "att", {8, 2, 4}, init);
  const std::size_t frames = 10, radius = 2;
  const auto mask = local_attention_mask<double>(frames, 4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_tensor(Shape{frames, 8}, rng);
    const std::size_t changed = rng() % frames;
    auto y = x;
    for (std::size_t c = 0; c < 8; ++c) y.at(changed, c) += 3.0;
    Tape<double> tape;
    const auto a = att(tape, tape.constant(x), tape.constant(x), &mask);
    const auto b = att(tape, tape.constant(y), tape.constant(y), &mask);
    for (std::size_t i = 0; i < frames; ++i) {
      const std::size_t dist = i > changed ? i - changed : changed - i;
      if (dist <= radius) continue;
      for (std::size_t c = 0; c < 8; ++c) CHECK(a.value().at(i, c) == b.value().at(i, c));
    }
  }
}

TEST_CASE("convolution branch matches the stage-by-stage reference") {
  std::mt19937_64 rng(36);
  ParameterStore<double> store;
  Initializer init(5);
  const ConvBranch<double> conv(store, "conv", {5, 4}, init);
  randomize(store, 37);

  auto reference = [&](const Mat& x) {
    const Mat e = ref_linear(x, store, "conv.expand");
    const std::size_t frames = x.size(), c = 4;
    Mat g(frames, std::vector<double>(c));
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t j = 0; j < c; ++j) g[t][j] = e[t][j] * ref_sigmoid(e[t][c + j]);
    const auto& k = store.get("conv.depthwise").value;
    const long radius = 2;
    Mat d(frames, std::vector<double>(c, 0.0));
    for (long t = 0; t < long(frames); ++t)
      for (std::size_t j = 0; j < c; ++j)
        for (long o = -radius; o <= radius; ++o) {
          const long s = t + o;
          if (s >= 0 && s < long(frames)) d[t][j] += k.at(std::size_t(o + radius), j) * g[s][j];
        }
    Mat n = ref_layer_norm(d, store, "conv.norm");
    for (auto& row : n)
      for (auto& v : row) v = v * ref_sigmoid(v);
    return ref_linear(n, store, "conv.project");
  };

  for (std::size_t frames : {1, 2, 3, 7}) {
    const auto x = random_tensor(Shape{frames, 4}, rng);
    Tape<double> tape;
    check_close(conv(tape, tape.constant(x)).value(), reference(to_mat(x)), 1e-11);
  }
  SUBCASE("zero weights give zeros") {
    for (auto& p : store) p->value.fill(0.0);
    Tape<double> tape;
    const auto y = conv(tape, tape.constant(random_tensor(Shape{4, 4}, rng)));
    for (double v : y.value().data()) CHECK(v == 0.0);
  }
}

TEST_CASE("feed-forward matches the reference") {
  std::mt19937_64 rng(38);
  ParameterStore<double> store;
  Initializer init(6);
  const FeedForward<double> ffn(store, "ffn", 3, init);
  randomize(store, 39);
  const auto x = random_tensor(Shape{2, 3}, rng);
  Mat h = ref_linear(to_mat(x), store, "ffn.up");
  CHECK(h[0].size() == 12);
  for (auto& row : h)
    for (auto& v : row) v = v * ref_sigmoid(v);
  Tape<double> tape;
  check_close(ffn(tape, tape.constant(x)).value(), ref_linear(h, store, "ffn.down"), 1e-12);
}

TEST_CASE("initializer is seeded") {
  Initializer a(9), b(9), c(10);
  const auto ta = a.xavier<double>(4, 6);
  CHECK(ta == b.xavier<double>(4, 6));
  CHECK_FALSE(ta == c.xavier<double>(4, 6));
  const double bound = std::sqrt(6.0 / 10.0);
  for (double v : ta.data()) CHECK(std::abs(v) <= bound);
}

TEST_CASE("block gradients") {
  std::mt19937_64 rng(40);
  ParameterStore<double> store;
  Initializer init(7);
  auto& x = store.add("x", random_tensor(Shape{5, 4}, rng));
  auto& mem = store.add("mem", random_tensor(Shape{3, 4}, rng));
  const MultiHeadAttention<double> att(store, "att", {4, 2, 2}, init);
  const ConvBranch<double> conv(store, "conv", {7, 4}, init);
  const FeedForward<double> ffn(store, "ffn", 4, init);
  const auto mask = local_attention_mask<double>(5, 2);

  const auto self = check_gradients(store, [&](Tape<double>& t) {
    const auto xv = t.parameter(x);
    return weighted_sum(t, att(t, xv, xv, &mask));
  });
  CHECK(self.max_rel_error < 1e-6);
  const auto cross = check_gradients(store, [&](Tape<double>& t) {
    return weighted_sum(t, att(t, t.parameter(x), t.parameter(mem)));
  });
  CHECK(cross.max_rel_error < 1e-6);
  const auto branch = check_gradients(store, [&](Tape<double>& t) { return weighted_sum(t, conv(t, t.parameter(x))); });
  CHECK(branch.max_rel_error < 1e-6);
  // Three frames crop the seven-tap kernel to five; the outer taps get zero gradient.
  const auto cropped = check_gradients(store, [&](Tape<double>& t) {
    return weighted_sum(t, conv(t, t.parameter(mem)));
  });
  CHECK(cropped.max_rel_error < 1e-6);
  const auto ff = check_gradients(store, [&](Tape<double>& t) { return weighted_sum(t, ffn(t, t.parameter(x))); });
  CHECK(ff.max_rel_error < 1e-6);
}
