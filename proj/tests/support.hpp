#pragma once

#include <random>

#include "vfa/align.hpp"
#include "vfa/autograd.hpp"

namespace vfa::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// Scalar sum(y * w) for a fixed random w, so every output element gets its own weight.
template <typename T>
Var<T> weighted_sum(Tape<T>& tape, Var<T> y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, tape.constant(random_tensor<T>(y.shape(), rng))));
}

struct AlignInstance {
  align::EmissionMatrix em;
  align::SilenceAwareSequence seq;
  align::BoundarySignal bnd;
};

// Random aligner input with T <= max_frames, C <= min(T, max_labels), V <= max_classes.
// Odd draws use coarse probabilities (zeros included) and boundary values on
// a grid containing 0.8 itself, so ties and the strict threshold get exercised.
inline AlignInstance random_instance(std::mt19937_64& rng, std::size_t max_frames = 10, std::size_t max_labels = 5,
                                     std::size_t max_classes = 6) {
  const std::size_t frames = 1 + rng() % max_frames;
  const std::size_t labels = 1 + rng() % std::min(frames, max_labels);
  const std::size_t classes = 1 + rng() % max_classes;
  const bool coarse = rng() % 2 == 1;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> probs(frames * classes);
  for (std::size_t t = 0; t < frames; ++t) {
    double total = 0.0;
    for (std::size_t v = 0; v < classes; ++v) {
      probs[t * classes + v] = coarse ? double(rng() % 3) : unit(rng);
      total += probs[t * classes + v];
    }
    for (std::size_t v = 0; v < classes; ++v) {
      probs[t * classes + v] = total > 0.0 ? probs[t * classes + v] / total : 1.0 / double(classes);
    }
  }
  AlignInstance inst{align::EmissionMatrix(frames, classes, std::move(probs)), {}, {}};
  for (std::size_t c = 0; c < labels; ++c) inst.seq.labels.push_back(static_cast<int>(rng() % classes));
  static constexpr double grid[] = {0.0, 0.3, 0.8, 0.81, 1.0};
  for (std::size_t t = 0; t < frames; ++t) inst.bnd.values.push_back(coarse ? grid[rng() % 5] : unit(rng));
  return inst;
}

}  // namespace vfa::testing
