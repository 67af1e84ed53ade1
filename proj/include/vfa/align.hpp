#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vfa/tensor.hpp"

namespace vfa::align {

// Boundary probability above which a frame forces a token advance.
inline constexpr double kDefaultThreshold = 0.8;
// Probabilities are clamped to this floor before taking logs.
inline constexpr double kProbFloor = 1e-12;

// Per-frame class probabilities, frames x classes. Rows sum to 1 within 1e-5.
class EmissionMatrix {
 public:
  EmissionMatrix() = default;
  EmissionMatrix(std::size_t frames, std::size_t classes, std::vector<double> probs);

  template <typename T>
  static EmissionMatrix from_tensor(const Tensor<T>& probs) {
    if (probs.rank() != 2) throw DimensionError("emission matrix must be 2-D, got " + shape_str(probs.shape()));
    return EmissionMatrix(probs.dim(0), probs.dim(1), std::vector<double>(probs.data().begin(), probs.data().end()));
  }

  std::size_t frames() const noexcept { return frames_; }
  std::size_t classes() const noexcept { return classes_; }
  double operator()(std::size_t t, std::size_t v) const { return probs_[t * classes_ + v]; }
  std::span<const double> row(std::size_t t) const { return {probs_.data() + t * classes_, classes_}; }

  friend bool operator==(const EmissionMatrix&, const EmissionMatrix&) = default;

 private:
  std::size_t frames_ = 0;
  std::size_t classes_ = 0;
  std::vector<double> probs_;
};

// Transcript with SIL tokens inserted; the label track walked by the DP.
struct SilenceAwareSequence {
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

struct BoundarySignal {
  std::vector<double> values;
};

// Token `token` covers frames [start, end], inclusive.
struct Segment {
  int token = 0;
  std::size_t start = 0;
  std::size_t end = 0;

  friend bool operator==(const Segment&, const Segment&) = default;
};

struct Alignment {
  // Index into the label sequence for every frame.
  std::vector<std::size_t> frame_tokens;
  std::vector<Segment> segments;
  // Sum of clamped log-probabilities along the path.
  double score = 0.0;
};

// Viterbi over a monotonic left-to-right label sequence in which every label
// occupies at least one frame. At frames t >= 1 (0-based) whose boundary
// probability exceeds `threshold`, every cell takes the advance transition
// whenever the advance predecessor is reachable; otherwise the usual argmax
// applies, with ties resolved toward advancing.
Alignment improved_viterbi(const EmissionMatrix& em, const SilenceAwareSequence& seq, const BoundarySignal& bnd,
                           double threshold = kDefaultThreshold);

// Same DP without boundary forcing.
Alignment plain_viterbi(const EmissionMatrix& em, const SilenceAwareSequence& seq);

// Per-frame argmax, lowest class index on ties.
std::vector<int> greedy_decode(const EmissionMatrix& em);

// Exhaustive search over every complete monotonic path. Test oracle; limited
// to T <= 12 and C <= 6.
Alignment brute_force_align(const EmissionMatrix& em, const SilenceAwareSequence& seq, const BoundarySignal& bnd,
                            double threshold = kDefaultThreshold);

// Run-length encodes frame_tokens into segments labelled labels[index].
std::vector<Segment> segments_from_frames(std::span<const std::size_t> frame_tokens, std::span<const int> labels);

// Run-length encodes per-frame class ids.
std::vector<Segment> segments_from_labels(std::span<const int> frame_labels);

// Expands segments back to per-frame token ids.
std::vector<int> frame_labels(std::span<const Segment> segments);

std::vector<int> remove_label(std::span<const int> labels, int label);

// True iff dropping every `sil` from `seq` gives `transcript` exactly.
bool reduces_to(std::span<const int> seq, std::span<const int> transcript, int sil);

// Throws ContractError describing the first violated Alignment invariant.
void check_alignment(const Alignment& a, std::size_t frames, const SilenceAwareSequence& seq);

}  // namespace vfa::align
