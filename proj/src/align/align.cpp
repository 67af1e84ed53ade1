#include "vfa/align.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

namespace vfa::align {

EmissionMatrix::EmissionMatrix(std::size_t frames, std::size_t classes, std::vector<double> probs)
    : frames_(frames), classes_(classes), probs_(std::move(probs)) {
  if (probs_.size() != frames_ * classes_) throw DimensionError("emission matrix: data size mismatch");
  for (std::size_t t = 0; t < frames_; ++t) {
    double total = 0.0;
    for (double p : row(t)) {
      if (!(p >= 0.0)) throw ContractError("emission matrix: negative or NaN probability at frame " + std::to_string(t));
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-5) {
      throw ContractError("emission matrix: frame " + std::to_string(t) + " sums to " + std::to_string(total));
    }
  }
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_prob(const EmissionMatrix& em, std::size_t t, int label) {
  return std::log(std::max(em(t, static_cast<std::size_t>(label)), kProbFloor));
}

void validate_inputs(const EmissionMatrix& em, const SilenceAwareSequence& seq) {
  if (em.frames() == 0 || seq.size() == 0) throw ContractError("alignment: empty emissions or label sequence");
  for (int l : seq.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= em.classes()) {
      throw DimensionError("alignment: label " + std::to_string(l) + " outside " + std::to_string(em.classes()) +
                           " emission classes");
    }
  }
  if (seq.size() > em.frames()) {
    throw InfeasibleAlignmentError("alignment: " + std::to_string(seq.size()) + " labels cannot fit in " +
                                   std::to_string(em.frames()) + " frames");
  }
}

void validate_boundaries(const EmissionMatrix& em, const BoundarySignal& bnd, double threshold) {
  if (bnd.values.size() != em.frames()) {
    throw DimensionError("alignment: " + std::to_string(bnd.values.size()) + " boundary values for " +
                         std::to_string(em.frames()) + " frames");
  }
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ContractError("alignment: threshold must lie in (0, 1]");
}

// DP over (T+1) x (C+1) cells. Choice 0 advances from c-1, choice 1 stays.
Alignment viterbi(const EmissionMatrix& em, const SilenceAwareSequence& seq, const BoundarySignal* bnd,
                  double threshold) {
  const std::size_t frames = em.frames(), count = seq.size();
  const std::size_t width = count + 1;
  std::vector<double> dp((frames + 1) * width, kNegInf);
  std::vector<std::uint8_t> path((frames + 1) * width, 0);
  dp[0] = 0.0;
  for (std::size_t t = 1; t <= frames; ++t) {
    const bool boundary = bnd && t >= 2 && bnd->values[t - 1] > threshold;
    for (std::size_t c = 1; c <= count; ++c) {
      const double advance = dp[(t - 1) * width + c - 1];
      const double stay = dp[(t - 1) * width + c];
      std::uint8_t choice;
      if (boundary && advance != kNegInf) {
        choice = 0;
      } else {
        choice = advance >= stay ? 0 : 1;
      }
      path[t * width + c] = choice;
      dp[t * width + c] = (choice == 0 ? advance : stay) + log_prob(em, t - 1, seq.labels[c - 1]);
    }
  }
  Alignment out;
  out.score = dp[frames * width + count];
  if (out.score == kNegInf) throw InfeasibleAlignmentError("alignment: no complete path");
  out.frame_tokens.resize(frames);
  std::size_t c = count;
  for (std::size_t t = frames; t > 0; --t) {
    out.frame_tokens[t - 1] = c - 1;
    if (path[t * width + c] == 0) --c;
  }
  out.segments = segments_from_frames(out.frame_tokens, seq.labels);
  return out;
}

}  // namespace

Alignment improved_viterbi(const EmissionMatrix& em, const SilenceAwareSequence& seq, const BoundarySignal& bnd,
                           double threshold) {
  validate_inputs(em, seq);
  validate_boundaries(em, bnd, threshold);
  return viterbi(em, seq, &bnd, threshold);
}

Alignment plain_viterbi(const EmissionMatrix& em, const SilenceAwareSequence& seq) {
  validate_inputs(em, seq);
  return viterbi(em, seq, nullptr, 1.0);
}

std::vector<int> greedy_decode(const EmissionMatrix& em) {
  std::vector<int> out(em.frames());
  for (std::size_t t = 0; t < em.frames(); ++t) {
    const auto r = em.row(t);
    out[t] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

Alignment brute_force_align(const EmissionMatrix& em, const SilenceAwareSequence& seq, const BoundarySignal& bnd,
                            double threshold) {
  validate_inputs(em, seq);
  validate_boundaries(em, bnd, threshold);
  const std::size_t frames = em.frames(), count = seq.size();
  if (frames > 12 || count > 6) throw OracleBoundError("brute_force_align: instance exceeds T <= 12, C <= 6");

  // reachable[t][c]: some rule-abiding partial path occupies label c (1-based)
  // at frame t (1-based). A forced frame may only stay when the advance
  // predecessor is unreachable, so reachability itself is unaffected by forcing.
  std::vector<std::vector<bool>> reachable(frames + 1, std::vector<bool>(count + 2, false));
  reachable[1][1] = true;
  for (std::size_t t = 2; t <= frames; ++t)
    for (std::size_t c = 1; c <= count; ++c) reachable[t][c] = reachable[t - 1][c - 1] || reachable[t - 1][c];

  const std::size_t steps = frames - 1;
  bool found = false;
  double best_score = 0.0;
  std::vector<std::uint8_t> best_moves;  // moves[s] for frame s+2 (1-based): 1 = advance
  std::vector<std::size_t> best_tokens;
  std::vector<std::uint8_t> moves(steps);
  std::vector<std::size_t> tokens(frames);
  for (std::uint32_t mask = 0; mask < (1u << steps); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != count - 1) continue;
    std::size_t c = 1;
    tokens[0] = 0;
    bool valid = true;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t t = s + 2;
      moves[s] = (mask >> s) & 1u;
      if (!moves[s] && bnd.values[t - 1] > threshold && reachable[t - 1][c - 1]) {
        valid = false;
        break;
      }
      c += moves[s];
      tokens[t - 1] = c - 1;
    }
    if (!valid) continue;
    double score = 0.0;
    for (std::size_t t = 0; t < frames; ++t) score += log_prob(em, t, seq.labels[tokens[t]]);
    bool better = !found || score > best_score;
    if (found && score == best_score) {
      // Ties: compare moves from the last frame backwards, advancing wins.
      for (std::size_t s = steps; s-- > 0;) {
        if (moves[s] != best_moves[s]) {
          better = moves[s] > best_moves[s];
          break;
        }
      }
    }
    if (better) {
      found = true;
      best_score = score;
      best_moves = moves;
      best_tokens = tokens;
    }
  }
  if (!found) throw InfeasibleAlignmentError("brute_force_align: no admissible path");
  Alignment out;
  out.score = best_score;
  out.frame_tokens = best_tokens;
  out.segments = segments_from_frames(out.frame_tokens, seq.labels);
  return out;
}

std::vector<Segment> segments_from_frames(std::span<const std::size_t> frame_tokens, std::span<const int> labels) {
  std::vector<Segment> out;
  for (std::size_t t = 0; t < frame_tokens.size(); ++t) {
    const std::size_t idx = frame_tokens[t];
    if (idx >= labels.size()) throw DimensionError("segments_from_frames: token index out of range");
    if (t > 0 && frame_tokens[t - 1] == idx) {
      out.back().end = t;
    } else {
      out.push_back({labels[idx], t, t});
    }
  }
  return out;
}

std::vector<Segment> segments_from_labels(std::span<const int> frame_labels) {
  std::vector<Segment> out;
  for (std::size_t t = 0; t < frame_labels.size(); ++t) {
    if (t > 0 && frame_labels[t - 1] == frame_labels[t]) {
      out.back().end = t;
    } else {
      out.push_back({frame_labels[t], t, t});
    }
  }
  return out;
}

std::vector<int> frame_labels(std::span<const Segment> segments) {
  std::vector<int> out;
  for (const auto& s : segments) {
    if (s.start != out.size() || s.end < s.start) throw ContractError("frame_labels: segments do not tile frames");
    out.insert(out.end(), s.end - s.start + 1, s.token);
  }
  return out;
}

std::vector<int> remove_label(std::span<const int> labels, int label) {
  std::vector<int> out;
  for (int l : labels)
    if (l != label) out.push_back(l);
  return out;
}

bool reduces_to(std::span<const int> seq, std::span<const int> transcript, int sil) {
  const auto stripped = remove_label(seq, sil);
  return std::equal(stripped.begin(), stripped.end(), transcript.begin(), transcript.end());
}

void check_alignment(const Alignment& a, std::size_t frames, const SilenceAwareSequence& seq) {
  const auto fail = [](const std::string& what) { throw ContractError("alignment invariant: " + what); };
  if (a.frame_tokens.size() != frames) fail("frame count mismatch");
  if (frames == 0) fail("empty alignment");
  if (a.frame_tokens.front() != 0) fail("first frame is not the first token");
  if (a.frame_tokens.back() + 1 != seq.size()) fail("last frame is not the last token");
  for (std::size_t t = 1; t < frames; ++t) {
    const std::size_t step = a.frame_tokens[t] - a.frame_tokens[t - 1];
    if (a.frame_tokens[t] < a.frame_tokens[t - 1] || step > 1) fail("non-monotonic step at frame " + std::to_string(t));
  }
  std::size_t next = 0;
  for (std::size_t i = 0; i < a.segments.size(); ++i) {
    const auto& s = a.segments[i];
    if (s.start != next || s.end < s.start) fail("segments do not tile the frames");
    if (i >= seq.size() || s.token != seq.labels[i]) fail("segment " + std::to_string(i) + " out of sequence order");
    next = s.end + 1;
  }
  if (next != frames || a.segments.size() != seq.size()) fail("segments do not cover every token and frame");
}

}  // namespace vfa::align
