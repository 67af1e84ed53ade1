#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "support.hpp"
#include "vfa/grad_check.hpp"
#include "vfa/model.hpp"

using namespace vfa;
using namespace vfa::model;
using vfa::testing::random_tensor;
using vfa::testing::weighted_sum;

namespace {

CglConfig tiny(std::uint64_t seed = 1, std::size_t layers = 1) {
  CglConfig c;
  c.num_layers = layers;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.window = 4;
  c.global_kernel = 5;
  c.local_kernel = 3;
  c.feature_dim = 5;
  c.vocab_size = 10;
  c.decoder_layers = 1;
  c.seed = seed;
  return c;
}

const VocabSpec kVocab = VocabSpec::standard(6);

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("vfa_test_model_" + name);
}

}  // namespace

TEST_CASE("vocabulary layout") {
  CHECK(kVocab.size() == 10);
  CHECK(kVocab.name(kVocab.sil_id) == "SIL");
  CHECK(kVocab.is_word(4));
  CHECK_FALSE(kVocab.is_word(kVocab.sil_id));
  CHECK(kVocab.id_of(kVocab.name(7)) == 7);
  CHECK_THROWS_AS(kVocab.id_of("nope"), LabelError);
}

TEST_CASE("config validation") {
  auto c = tiny();
  CHECK_NOTHROW(c.validate());
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.global_kernel = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.vocab_size = 11;
  CHECK_THROWS_AS(CglModel<double>(c, kVocab), ConfigError);
}

TEST_CASE("encoder and head shapes") {
  const CglModel<double> m(tiny(), kVocab);
  std::mt19937_64 rng(50);
  for (std::size_t frames : {1, 2, 9}) {
    Tape<double> tape;
    const std::vector<int> text{4, 6};
    std::vector<BlockTrace<double>> trace;
    const auto enc = m.encoder_forward(tape, random_tensor(Shape{frames, 5}, rng), text, &trace);
    CHECK(enc.shape() == Shape{frames, 8});
    CHECK(trace.size() == 1);
    CHECK(trace[0].global_branch.shape() == Shape{frames, 8});
    CHECK(m.frame_head(tape, enc).shape() == Shape{frames, 10});
    const auto b = m.boundary_head(tape, enc);
    CHECK(b.shape() == Shape{frames, 1});
    for (double v : b.value().data()) CHECK((v > 0.0 && v < 1.0));
  }
  Tape<double> tape;
  CHECK_THROWS_AS(m.encoder_forward(tape, Tensor<double>(Shape{4, 3}), std::vector<int>{4}), DimensionError);
  CHECK_THROWS_AS(m.encoder_forward(tape, Tensor<double>(Shape{4, 5}), std::vector<int>{}), ContractError);
  CHECK_THROWS_AS(m.encoder_forward(tape, Tensor<double>(Shape{0, 5}), std::vector<int>{4}), ContractError);
}

TEST_CASE("global and local branches see different context") {
  const CglModel<double> m(tiny(), kVocab);
  std::mt19937_64 rng(51);
  Tape<double> tape;
  std::vector<BlockTrace<double>> trace;
  m.encoder_forward(tape, random_tensor(Shape{6, 5}, rng), std::vector<int>{4, 5}, &trace);
  const auto& g = trace[0].global_branch.value();
  const auto& l = trace[0].local_branch.value();
  CHECK_FALSE(g == l);
}

TEST_CASE("zero encoder blocks reduce to the normalized embedding") {
  CglModel<double> m(tiny(), kVocab);
  for (auto& p : m.parameters()) {
    if (p->name.rfind("encoder.", 0) != 0) continue;
    const bool gain = p->name.size() > 5 && p->name.substr(p->name.size() - 5) == ".gain";
    p->value.fill(gain ? 1.0 : 0.0);
  }
  std::mt19937_64 rng(52);
  const auto x = random_tensor(Shape{4, 5}, rng);
  Tape<double> tape;
  const auto enc = m.encoder_forward(tape, x, std::vector<int>{4});
  const auto& w = m.parameters().get("embed.features.weight").value;
  const auto& b = m.parameters().get("embed.features.bias").value;
  for (std::size_t t = 0; t < 4; ++t) {
    std::vector<double> e(8);
    for (std::size_t j = 0; j < 8; ++j) {
      e[j] = b[j] + (j % 2 == 0 ? std::sin(double(t) * std::pow(10000.0, -double(j) / 8.0))
                                : std::cos(double(t) * std::pow(10000.0, -double(j - 1) / 8.0)));
      for (std::size_t k = 0; k < 5; ++k) e[j] += x.at(t, k) * w.at(k, j);
    }
    double mu = 0.0, var = 0.0;
    for (double v : e) mu += v / 8.0;
    for (double v : e) var += (v - mu) * (v - mu) / 8.0;
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(enc.value().at(t, j) == doctest::Approx((e[j] - mu) / std::sqrt(var + 1e-5)).epsilon(1e-10));
  }
}

TEST_CASE("zero head weights give uniform emissions and even boundaries") {
  CglModel<double> m(tiny(), kVocab);
  for (auto& p : m.parameters())
    if (p->name.rfind("frame_head.", 0) == 0 || p->name.rfind("boundary_head.", 0) == 0) p->value.fill(0.0);
  std::mt19937_64 rng(53);
  const auto inf = m.infer(random_tensor(Shape{5, 5}, rng), std::vector<int>{4, 5});
  for (std::size_t t = 0; t < 5; ++t) {
    for (double p : inf.emissions.row(t)) CHECK(p == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(inf.boundaries.values[t] == 0.5);
  }
}

TEST_CASE("construction is deterministic in the seed") {
  const CglModel<double> a(tiny(3), kVocab), b(tiny(3), kVocab), c(tiny(4), kVocab);
  bool differs = false;
  auto ib = b.parameters().begin();
  auto ic = c.parameters().begin();
  for (const auto& p : a.parameters()) {
    CHECK(p->name == (*ib)->name);
    CHECK(p->value == (*ib)->value);
    if (!(p->value == (*ic)->value)) differs = true;
    ++ib;
    ++ic;
  }
  CHECK(differs);
  std::mt19937_64 rng(54);
  const auto x = random_tensor(Shape{6, 5}, rng);
  const std::vector<int> text{5, 4};
  const auto ia = a.infer(x, text), ib2 = b.infer(x, text);
  CHECK(ia.emissions == ib2.emissions);
  CHECK(ia.boundaries.values == ib2.boundaries.values);
  CHECK(ia.silence_seq.labels == ib2.silence_seq.labels);
}

TEST_CASE("silence decoder teacher forcing") {
  const CglModel<double> m(tiny(), kVocab);
  std::mt19937_64 rng(55);
  Tape<double> tape;
  const std::vector<int> text{4, 7};
  const auto enc = m.encoder_forward(tape, random_tensor(Shape{8, 5}, rng), text);
  const std::vector<int> gold{3, 4, 3, 7};
  CHECK(m.silence_decoder_train(tape, enc, text, gold).shape() == Shape{5, 10});
  CHECK_THROWS_AS(m.silence_decoder_train(tape, enc, text, std::vector<int>{4, 3}), LabelError);
  CHECK_THROWS_AS(m.silence_decoder_train(tape, enc, text, std::vector<int>{4, 1, 7}), LabelError);
  CHECK_THROWS_AS(m.silence_decoder_train(tape, enc, text, std::vector<int>{7, 4}), LabelError);

  // Causal self-attention: a row depends only on its own prefix.
  const std::vector<int> longer{3, 4, 3, 7, 3};
  const auto full = m.silence_decoder_train(tape, enc, text, longer);
  const auto part = m.silence_decoder_train(tape, enc, text, gold);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 10; ++c)
      CHECK(full.value().at(r, c) == doctest::Approx(part.value().at(r, c)).epsilon(1e-12));
}

TEST_CASE("constrained greedy decoding") {
  const std::vector<int> text{5, 8};
  // Logits 2 for the favourite, 1 for EOS, 0 elsewhere.
  auto prefer = [](int id) {
    return [id](std::span<const int>) {
      std::vector<double> logits(10, 0.0);
      logits[2] = 1.0;
      logits[std::size_t(id)] = 2.0;
      return logits;
    };
  };
  SUBCASE("single word") {
    CHECK(constrained_greedy_decode(std::vector<int>{6}, kVocab, prefer(6)).labels == std::vector<int>{6});
  }
  SUBCASE("words beat an inadmissible favourite") {
    CHECK(constrained_greedy_decode(text, kVocab, prefer(9)).labels == std::vector<int>{5, 8});
  }
  SUBCASE("always silence stops at the cap") {
    CHECK(constrained_greedy_decode(text, kVocab, prefer(3)).labels == std::vector<int>{3, 5, 3, 8, 3});
  }
  SUBCASE("early EOS is not admissible") {
    CHECK(constrained_greedy_decode(text, kVocab, prefer(2)).labels == std::vector<int>{5, 8});
  }
  SUBCASE("ties go to the word, then SIL, then EOS") {
    auto flat = [](std::span<const int>) { return std::vector<double>(10, 0.0); };
    CHECK(constrained_greedy_decode(text, kVocab, flat).labels == std::vector<int>{5, 8, 3});
    CHECK(constrained_greedy_decode(std::vector<int>{}, kVocab, flat).labels == std::vector<int>{3});
  }
  SUBCASE("the scorer sees the BOS-prefixed history") {
    std::vector<std::vector<int>> seen;
    constrained_greedy_decode(text, kVocab, [&](std::span<const int> prefix) {
      seen.emplace_back(prefix.begin(), prefix.end());
      std::vector<double> logits(10, 0.0);
      logits[3] = seen.size() == 2 ? 1.0 : 0.0;
      return logits;
    });
    REQUIRE(seen.size() == 5);
    CHECK(seen[0] == std::vector<int>{1});
    CHECK(seen[1] == std::vector<int>{1, 5});
    CHECK(seen[3] == std::vector<int>{1, 5, 3, 8});
    CHECK(seen[4] == std::vector<int>{1, 5, 3, 8, 3});
  }
  SUBCASE("random scorers always yield a valid sequence") {
    std::mt19937_64 rng(56);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < 200; ++i) {
      std::vector<int> words(1 + rng() % 6);
      for (auto& w : words) w = 4 + int(rng() % 6);
      const auto seq = constrained_greedy_decode(words, kVocab, [&](std::span<const int>) {
        std::vector<double> logits(10);
        for (auto& l : logits) l = unit(rng);
        return logits;
      });
      CHECK(align::reduces_to(seq.labels, words, kVocab.sil_id));
      CHECK(seq.labels.size() <= 2 * words.size() + 1);
      for (std::size_t k = 1; k < seq.labels.size(); ++k)
        CHECK_FALSE((seq.labels[k] == 3 && seq.labels[k - 1] == 3));
    }
  }
}

TEST_CASE("untrained models decode valid silence sequences") {
  std::mt19937_64 rng(57);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const CglModel<float> m(tiny(seed), kVocab);
    std::vector<int> words(1 + rng() % 4);
    for (auto& w : words) w = 4 + int(rng() % 6);
    const auto inf = m.infer(random_tensor<float>(Shape{12, 5}, rng), words);
    CHECK(align::reduces_to(inf.silence_seq.labels, words, kVocab.sil_id));
    CHECK(inf.emissions.frames() == 12);
  }
}

TEST_CASE("checkpoint round trip") {
  const CglModel<float> m(tiny(5, 2), kVocab);
  const auto path = temp_path("ckpt.bin");
  save_checkpoint(m, path.string());
  const auto back = load_checkpoint<float>(path.string());
  CHECK(back->config() == m.config());
  CHECK(back->vocab() == m.vocab());
  auto it = back->parameters().begin();
  for (const auto& p : m.parameters()) {
    CHECK(p->name == (*it)->name);
    CHECK(p->value == (*it)->value);
    ++it;
  }
  std::mt19937_64 rng(58);
  const auto x = random_tensor<float>(Shape{7, 5}, rng);
  const std::vector<int> text{4, 9};
  const auto a = m.infer(x, text), b = back->infer(x, text);
  CHECK(a.emissions == b.emissions);
  CHECK(a.boundaries.values == b.boundaries.values);
  CHECK(a.silence_seq.labels == b.silence_seq.labels);

  SUBCASE("saving again gives identical bytes") {
    const auto again = temp_path("ckpt2.bin");
    save_checkpoint(*back, again.string());
    std::ifstream f1(path, std::ios::binary), f2(again, std::ios::binary);
    const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);
    std::filesystem::remove(again);
  }
  SUBCASE("corrupt files are rejected") {
    std::ifstream in(path, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), {});
    const auto bad = temp_path("bad.bin");
    {
      std::ofstream out(bad, std::ios::binary);
      out << bytes.substr(0, bytes.size() / 2);
    }
    CHECK_THROWS_AS(load_checkpoint<float>(bad.string()), FormatError);
    {
      std::ofstream out(bad, std::ios::binary);
      out << "XXXX" << bytes.substr(4);
    }
    CHECK_THROWS_AS(load_checkpoint<float>(bad.string()), FormatError);
    std::filesystem::remove(bad);
    CHECK_THROWS(load_checkpoint<float>(temp_path("missing.bin").string()));
  }
  std::filesystem::remove(path);
}

TEST_CASE("whole-model gradient check") {
  CglModel<double> m(tiny(6, 2), kVocab);
  std::mt19937_64 rng(59);
  const auto x = random_tensor(Shape{6, 5}, rng);
  const std::vector<int> text{4, 8};
  const std::vector<int> gold{3, 4, 8};
  const auto r = check_gradients(m.parameters(), [&](Tape<double>& t) {
    const auto enc = m.encoder_forward(t, x, text);
    const auto f = weighted_sum(t, m.frame_head(t, enc), 1);
    const auto b = weighted_sum(t, m.boundary_head(t, enc), 2);
    const auto s = weighted_sum(t, m.silence_decoder_train(t, enc, text, gold), 3);
    return add(add(f, b), s);
  });
  CHECK(r.checked == m.parameters().num_elements());
  INFO("worst ", r.worst_parameter, "[", r.worst_index, "] analytic ", r.analytic, " numeric ", r.numeric);
  // Key biases have an exactly zero gradient, so the finite-difference noise
  // over the 1e-6 floor sets the scale here.
  CHECK(r.max_rel_error < 1e-4);
}
