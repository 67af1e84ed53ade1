#include "vfa/synth.hpp"

#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace vfa::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kFirstWordId = 4;

bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }

std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06zu", index);
  return buf;
}

}  // namespace

void SynthConfig::validate() const {
  if (vocab_size == 0) throw ConfigError("synth.vocab_size must be >= 1");
  if (feature_dim == 0) throw ConfigError("synth.feature_dim must be >= 1");
  if (min_words == 0 || min_words > max_words) throw ConfigError("synth: need 1 <= min_words <= max_words");
  if (vocab_size == 1 && max_words > 1) throw ConfigError("synth: adjacent words must differ, so vocab_size >= 2");
  if (min_dur == 0) throw ConfigError("synth.min_dur must be >= 1");
  if (!(dur_p > 0.0 && dur_p <= 1.0)) throw ConfigError("synth.dur_p must lie in (0, 1]");
  if (!is_probability(p_sil) || !is_probability(edge_sil_prob)) throw ConfigError("synth: probabilities must lie in [0, 1]");
  if (sil_min == 0 || sil_min > sil_max) throw ConfigError("synth: need 1 <= sil_min <= sil_max");
  if (!(noise_sigma >= 0.0)) throw ConfigError("synth.noise_sigma must be >= 0");
  if (!(viseme_jitter >= 0.0)) throw ConfigError("synth.viseme_jitter must be >= 0");
  if (!(fps > 0.0)) throw ConfigError("synth.fps must be > 0");
}

VocabSpec synth_vocab(const SynthConfig& cfg) { return VocabSpec::standard(cfg.vocab_size); }

Tensor<float> make_prototypes(const SynthConfig& cfg) {
  cfg.validate();
  const VocabSpec vocab = synth_vocab(cfg);
  std::mt19937_64 rng(cfg.prototype_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = cfg.feature_dim;
  Tensor<float> protos(Shape{vocab.size(), d});
  for (std::size_t j = 0; j < d; ++j) protos.at(vocab.sil_id, j) = static_cast<float>(normal(rng));
  std::vector<std::vector<double>> bases(cfg.viseme_classes, std::vector<double>(d));
  for (auto& b : bases)
    for (auto& v : b) v = normal(rng);
  for (std::size_t w = 0; w < cfg.vocab_size; ++w) {
    const std::size_t id = kFirstWordId + w;
    for (std::size_t j = 0; j < d; ++j) {
      const double own = normal(rng);
      const double v = bases.empty() ? own : bases[w % bases.size()][j] + cfg.viseme_jitter * own;
      protos.at(id, j) = static_cast<float>(v);
    }
  }
  return protos;
}

SynthSample generate_sample(const SynthConfig& cfg, const Tensor<float>& prototypes, std::mt19937_64& rng) {
  cfg.validate();
  const VocabSpec vocab = synth_vocab(cfg);
  if (prototypes.rank() != 2 || prototypes.rows() != vocab.size() || prototypes.cols() != cfg.feature_dim) {
    throw DimensionError("generate_sample: prototypes " + shape_str(prototypes.shape()) + " do not match config");
  }
  std::uniform_int_distribution<std::size_t> n_words(cfg.min_words, cfg.max_words);
  std::uniform_int_distribution<int> word(0, static_cast<int>(cfg.vocab_size) - 1);
  std::bernoulli_distribution sil_between(cfg.p_sil), sil_edge(cfg.edge_sil_prob);
  std::geometric_distribution<std::size_t> extra(cfg.dur_p);
  std::uniform_int_distribution<std::size_t> sil_len(cfg.sil_min, cfg.sil_max);
  std::normal_distribution<double> noise(0.0, 1.0);

  SynthSample s;
  s.fps = cfg.fps;
  const std::size_t n = n_words(rng);
  while (s.transcript.size() < n) {
    const int w = kFirstWordId + word(rng);
    if (!s.transcript.empty() && s.transcript.back() == w) continue;
    s.transcript.push_back(w);
  }
  auto& seq = s.gold_silence_seq.labels;
  if (sil_edge(rng)) seq.push_back(vocab.sil_id);
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0 && sil_between(rng)) seq.push_back(vocab.sil_id);
    seq.push_back(s.transcript[i]);
  }
  if (sil_edge(rng)) seq.push_back(vocab.sil_id);

  std::vector<align::Segment> segments;
  for (int token : seq) {
    const std::size_t len = token == vocab.sil_id ? sil_len(rng) : cfg.min_dur + extra(rng);
    const std::size_t start = segments.empty() ? 0 : segments.back().end + 1;
    segments.push_back({token, start, start + len - 1});
  }
  s.gold_frame_labels = align::frame_labels(segments);
  const std::size_t frames = s.gold_frame_labels.size();
  s.gold_boundaries.assign(frames, 0);
  for (const auto& seg : segments) s.gold_boundaries[seg.start] = 1;

  const std::size_t d = cfg.feature_dim;
  const double half = cfg.blur / 2.0;
  s.features = Tensor<float>(Shape{frames, d});
  for (std::size_t k = 0; k < segments.size(); ++k) {
    const auto& seg = segments[k];
    const float* cur = prototypes.row(static_cast<std::size_t>(seg.token));
    for (std::size_t t = seg.start; t <= seg.end; ++t) {
      // Blend toward the neighbour across the nearer boundary, weight 1/2 at the boundary itself.
      const double from_start = double(t - seg.start) + 0.5;
      const double to_end = double(seg.end + 1 - t) - 0.5;
      const float* other = nullptr;
      double w = 0.0;
      if (k > 0 && from_start < half && (from_start <= to_end || k + 1 == segments.size())) {
        other = prototypes.row(static_cast<std::size_t>(segments[k - 1].token));
        w = 0.5 - from_start / double(cfg.blur);
      } else if (k + 1 < segments.size() && to_end < half) {
        other = prototypes.row(static_cast<std::size_t>(segments[k + 1].token));
        w = 0.5 - to_end / double(cfg.blur);
      }
      float* out = s.features.row(t);
      for (std::size_t j = 0; j < d; ++j) {
        const double base = other ? (1.0 - w) * cur[j] + w * other[j] : cur[j];
        out[j] = static_cast<float>(base + cfg.noise_sigma * noise(rng));
      }
    }
  }
  return s;
}

SynthSample generate_indexed(const SynthConfig& cfg, const Tensor<float>& prototypes, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(std::uint64_t(index) >> 32)};
  std::mt19937_64 rng(seq);
  SynthSample s = generate_sample(cfg, prototypes, rng);
  s.id = sample_id(index);
  return s;
}

std::vector<SynthSample> generate_corpus(const SynthConfig& cfg, std::size_t count) {
  const Tensor<float> protos = make_prototypes(cfg);
  std::vector<SynthSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_indexed(cfg, protos, i));
  return out;
}

void check_sample(const SynthSample& s, const VocabSpec& vocab) {
  const auto fail = [&](const std::string& what) { throw ContractError("sample " + s.id + ": " + what); };
  const std::size_t frames = s.frames();
  if (frames == 0) fail("no frames");
  if (s.features.rank() != 2 || s.features.rows() != frames) fail("feature rows do not match frame labels");
  if (s.gold_boundaries.size() != frames) fail("boundary track length mismatch");
  for (std::size_t t = 0; t < frames; ++t) {
    const bool expected = t == 0 || s.gold_frame_labels[t] != s.gold_frame_labels[t - 1];
    if (s.gold_boundaries[t] != (expected ? 1 : 0)) fail("boundary flag wrong at frame " + std::to_string(t));
  }
  const auto segs = s.gold_segments();
  const auto& seq = s.gold_silence_seq.labels;
  if (segs.size() != seq.size()) fail("segment count differs from silence-aware sequence");
  for (std::size_t i = 0; i < segs.size(); ++i)
    if (segs[i].token != seq[i]) fail("segment " + std::to_string(i) + " token differs from sequence");
  for (int id : seq)
    if (id != vocab.sil_id && !vocab.is_word(id)) fail("sequence holds non-word token " + std::to_string(id));
  if (!align::reduces_to(seq, s.transcript, vocab.sil_id)) fail("sequence does not reduce to the transcript");
  if (s.transcript.empty()) fail("empty transcript");
}

Tensor<float> time_mask(const Tensor<float>& features, std::size_t max_mask_len, std::size_t n_masks,
                        std::mt19937_64& rng) {
  Tensor<float> out = features;
  const std::size_t frames = out.rows();
  if (frames == 0 || max_mask_len == 0) return out;
  const std::size_t longest = std::min(max_mask_len, frames);
  std::uniform_int_distribution<std::size_t> length(1, longest);
  for (std::size_t m = 0; m < n_masks; ++m) {
    const std::size_t len = length(rng);
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, frames - len)(rng);
    std::fill(out.row(start), out.row(start + len), 0.0f);
  }
  return out;
}

void write_corpus(const std::vector<SynthSample>& samples, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest = json::array();
  for (const auto& s : samples) {
    const std::string file = s.id + ".vft";
    write_vft_file((dir / file).string(), s.features);
    json segs = json::array();
    for (const auto& seg : s.gold_segments()) segs.push_back({{"token", seg.token}, {"start", seg.start}, {"end", seg.end}});
    manifest.push_back({{"id", s.id},
                        {"features", file},
                        {"transcript", s.transcript},
                        {"gold_segments", segs},
                        {"gold_silence_seq", s.gold_silence_seq.labels},
                        {"fps", s.fps}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw FormatError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

std::vector<SynthSample> read_corpus(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("cannot open " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  if (!manifest.is_array()) throw FormatError("manifest.json: expected an array of samples");
  std::vector<SynthSample> out;
  for (const auto& rec : manifest) {
    try {
      SynthSample s;
      s.id = rec.at("id").get<std::string>();
      s.transcript = rec.at("transcript").get<std::vector<int>>();
      s.gold_silence_seq.labels = rec.at("gold_silence_seq").get<std::vector<int>>();
      s.fps = rec.at("fps").get<double>();
      std::vector<align::Segment> segs;
      for (const auto& j : rec.at("gold_segments"))
        segs.push_back({j.at("token").get<int>(), j.at("start").get<std::size_t>(), j.at("end").get<std::size_t>()});
      s.gold_frame_labels = align::frame_labels(segs);
      s.gold_boundaries.assign(s.gold_frame_labels.size(), 0);
      for (const auto& seg : segs) s.gold_boundaries[seg.start] = 1;
      s.features = read_vft_file((dir / rec.at("features").get<std::string>()).string());
      if (s.features.rank() != 2 || s.features.rows() != s.frames()) {
        throw FormatError("sample " + s.id + ": features " + shape_str(s.features.shape()) + " for " +
                          std::to_string(s.frames()) + " labelled frames");
      }
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw FormatError(std::string("manifest.json: ") + e.what());
    } catch (const ContractError& e) {
      throw FormatError(std::string("manifest.json: ") + e.what());
    }
  }
  return out;
}

}  // namespace vfa::synth
