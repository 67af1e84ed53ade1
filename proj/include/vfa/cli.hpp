#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "vfa/align.hpp"
#include "vfa/model.hpp"
#include "vfa/synth.hpp"
#include "vfa/train.hpp"

namespace vfa::cli {

// Everything a command can be configured with. The text form is one
// `section.key = value` per line; `#` starts a comment.
struct RunConfig {
  synth::SynthConfig synth;
  model::CglConfig model;
  train::TrainConfig train;

  // model.vocab_size and model.feature_dim follow the synth section.
  model::CglConfig resolved_model() const;
  void validate() const;
};

// Throws ConfigError for unknown keys or unparsable values.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);
// "key=value" form used by --set.
void apply_assignment(RunConfig& cfg, std::string_view assignment);
void apply_config_text(RunConfig& cfg, std::string_view text);
void apply_config_file(RunConfig& cfg, const std::string& path);
// Sets synth.seed, model.seed and train.seed.
void apply_seed(RunConfig& cfg, std::uint64_t seed);

// Every key with its effective value, in the same text format.
std::string format_config(const RunConfig& cfg);

// Timed unit in alignment JSON and SRT export.
struct TimedToken {
  std::string token;
  std::size_t start_frame = 0;
  std::size_t end_frame = 0;
};

// Exact frame * 1000 / fps rounded half up to whole milliseconds.
long long frame_to_ms(std::size_t frame, double fps);
// HH:MM:SS,mmm
std::string srt_timestamp(long long ms);

std::vector<TimedToken> timed_tokens(std::span<const align::Segment> segments, const VocabSpec& vocab);
// JSON array of {token, start_frame, end_frame, start_ms, end_ms}.
std::string alignment_json(const std::vector<TimedToken>& tokens, double fps);
std::vector<TimedToken> parse_alignment_json(std::string_view text);

std::string format_srt(const std::vector<TimedToken>& tokens, double fps, bool drop_sil, std::string_view sil = "SIL");

struct SrtCue {
  int index = 0;
  long long start_ms = 0;
  long long end_ms = 0;
  std::string text;

  friend bool operator==(const SrtCue&, const SrtCue&) = default;
};
std::vector<SrtCue> parse_srt(std::string_view text);

// Entry point shared by the executable and the tests. Returns the exit code:
// 0 success, 1 usage or input error, 2 infeasible alignment.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vfa::cli
