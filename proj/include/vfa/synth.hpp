#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "vfa/align.hpp"
#include "vfa/tensor.hpp"
#include "vfa/vocab.hpp"

namespace vfa::synth {

struct SynthConfig {
  std::size_t vocab_size = 20;  // words, specials excluded
  std::size_t feature_dim = 32;
  std::size_t min_words = 4;
  std::size_t max_words = 8;
  // Token duration: min_dur + Geometric(dur_p) frames.
  std::size_t min_dur = 3;
  double dur_p = 0.3;
  double p_sil = 0.4;
  std::size_t sil_min = 2;
  std::size_t sil_max = 6;
  // Probability of a leading and, independently, a trailing SIL.
  double edge_sil_prob = 0.7;
  double noise_sigma = 0.5;
  // Width in frames of the linear cross-fade centred on each boundary.
  std::size_t blur = 2;
  // When nonzero, words share one of this many base prototypes and differ
  // only by a perturbation of scale viseme_jitter.
  std::size_t viseme_classes = 0;
  double viseme_jitter = 0.5;
  double fps = 25.0;
  std::uint64_t seed = 1;
  std::uint64_t prototype_seed = 7;

  void validate() const;
  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

struct SynthSample {
  std::string id;
  Tensor<float> features;  // T x D_in
  std::vector<int> transcript;
  std::vector<int> gold_frame_labels;
  std::vector<int> gold_boundaries;
  align::SilenceAwareSequence gold_silence_seq;
  double fps = 25.0;

  std::size_t frames() const noexcept { return gold_frame_labels.size(); }
  std::vector<align::Segment> gold_segments() const { return align::segments_from_labels(gold_frame_labels); }
};

// Vocabulary matching the ids the generator emits.
VocabSpec synth_vocab(const SynthConfig& cfg);

// One prototype row per vocabulary id; specials other than SIL are zero.
Tensor<float> make_prototypes(const SynthConfig& cfg);

SynthSample generate_sample(const SynthConfig& cfg, const Tensor<float>& prototypes, std::mt19937_64& rng);

// Sample `index` of the corpus seeded by cfg.seed; each index has its own stream.
SynthSample generate_indexed(const SynthConfig& cfg, const Tensor<float>& prototypes, std::size_t index);
std::vector<SynthSample> generate_corpus(const SynthConfig& cfg, std::size_t count);

// Throws ContractError naming the first violated sample invariant.
void check_sample(const SynthSample& s, const VocabSpec& vocab);

// Zeroes n_masks spans, each of uniform length in [1, max_mask_len] at a
// uniform start, all clipped to the sequence.
Tensor<float> time_mask(const Tensor<float>& features, std::size_t max_mask_len, std::size_t n_masks,
                        std::mt19937_64& rng);

// Corpus directory: manifest.json plus <id>.vft per sample.
void write_corpus(const std::vector<SynthSample>& samples, const std::filesystem::path& dir);
std::vector<SynthSample> read_corpus(const std::filesystem::path& dir);

}  // namespace vfa::synth
