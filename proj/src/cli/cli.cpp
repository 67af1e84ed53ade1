#include "vfa/cli.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

namespace vfa::cli {

using nlohmann::json;

// -------------------------------------------------------------------- config

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename V>
V parse_value(std::string_view key, std::string_view text) {
  const auto bad = [&] { return ConfigError("bad value '" + std::string(text) + "' for " + std::string(key)); };
  if constexpr (std::is_same_v<V, bool>) {
    if (text == "true" || text == "1" || text == "on" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "off" || text == "no") return false;
    throw bad();
  } else {
    V v{};
    if (text.empty() || (text.front() == '-' && std::is_unsigned_v<V>)) throw bad();
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || end != text.data() + text.size()) throw bad();
    if constexpr (std::is_floating_point_v<V>) {
      if (!std::isfinite(v)) throw bad();
    }
    return v;
  }
}

template <typename V>
std::string format_value(V v) {
  if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else {
    char buf[64];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
  }
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Acc>
Field make_field(std::string key, Acc acc) {
  using V = std::remove_reference_t<decltype(acc(std::declval<RunConfig&>()))>;
  return {key, [acc, key](RunConfig& c, std::string_view v) { acc(c) = parse_value<V>(key, v); },
          [acc](const RunConfig& c) { return format_value(acc(const_cast<RunConfig&>(c))); }};
}

#define VFA_FIELD(section, name) make_field(#section "." #name, [](RunConfig& c) -> auto& { return c.section.name; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      VFA_FIELD(synth, vocab_size),    VFA_FIELD(synth, feature_dim),    VFA_FIELD(synth, min_words),
      VFA_FIELD(synth, max_words),     VFA_FIELD(synth, min_dur),        VFA_FIELD(synth, dur_p),
      VFA_FIELD(synth, p_sil),         VFA_FIELD(synth, sil_min),        VFA_FIELD(synth, sil_max),
      VFA_FIELD(synth, edge_sil_prob), VFA_FIELD(synth, noise_sigma),    VFA_FIELD(synth, blur),
      VFA_FIELD(synth, viseme_classes), VFA_FIELD(synth, viseme_jitter), VFA_FIELD(synth, fps),
      VFA_FIELD(synth, seed),          VFA_FIELD(synth, prototype_seed), VFA_FIELD(model, num_layers),
      VFA_FIELD(model, embed_dim),     VFA_FIELD(model, num_heads),      VFA_FIELD(model, window),
      VFA_FIELD(model, global_kernel), VFA_FIELD(model, local_kernel),   VFA_FIELD(model, decoder_layers),
      VFA_FIELD(model, seed),          VFA_FIELD(train, epochs),         VFA_FIELD(train, lr),
      VFA_FIELD(train, beta1),         VFA_FIELD(train, beta2),          VFA_FIELD(train, eps),
      VFA_FIELD(train, clip),          VFA_FIELD(train, seed),           VFA_FIELD(train, augment),
      VFA_FIELD(train, mask_max_len),  VFA_FIELD(train, mask_count),
  };
  return table;
}

#undef VFA_FIELD

}  // namespace

model::CglConfig RunConfig::resolved_model() const {
  model::CglConfig m = model;
  m.vocab_size = synth_vocab(synth).size();
  m.feature_dim = synth.feature_dim;
  return m;
}

void RunConfig::validate() const {
  synth.validate();
  resolved_model().validate();
  train.validate();
}

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(cfg, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void apply_assignment(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("expected key=value, got '" + std::string(assignment) + "'");
  apply_setting(cfg, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void apply_config_text(RunConfig& cfg, std::string_view text) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      apply_assignment(cfg, line);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    apply_config_text(cfg, ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void apply_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.synth.seed = seed;
  cfg.model.seed = seed;
  cfg.train.seed = seed;
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

// ------------------------------------------------------------ alignment I/O

long long frame_to_ms(std::size_t frame, double fps) {
  if (!(fps > 0.0)) throw ContractError("fps must be > 0");
  return static_cast<long long>(std::floor(double(frame) * 1000.0 / fps + 0.5));
}

std::string srt_timestamp(long long ms) {
  if (ms < 0) throw ContractError("negative SRT time");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%02lld:%02lld:%02lld,%03lld", ms / 3600000, ms / 60000 % 60, ms / 1000 % 60,
                ms % 1000);
  return buf;
}

std::vector<TimedToken> timed_tokens(std::span<const align::Segment> segments, const VocabSpec& vocab) {
  std::vector<TimedToken> out;
  for (const auto& s : segments) out.push_back({vocab.name(s.token), s.start, s.end});
  return out;
}

std::string alignment_json(const std::vector<TimedToken>& tokens, double fps) {
  json arr = json::array();
  for (const auto& t : tokens) {
    arr.push_back({{"token", t.token},
                   {"start_frame", t.start_frame},
                   {"end_frame", t.end_frame},
                   {"start_ms", double(t.start_frame) * 1000.0 / fps},
                   {"end_ms", double(t.end_frame + 1) * 1000.0 / fps}});
  }
  return arr.dump(2);
}

std::vector<TimedToken> parse_alignment_json(std::string_view text) {
  std::vector<TimedToken> out;
  try {
    const json arr = json::parse(text);
    if (!arr.is_array()) throw FormatError("alignment JSON must be an array");
    for (const auto& j : arr) {
      TimedToken t{j.at("token").get<std::string>(), j.at("start_frame").get<std::size_t>(),
                   j.at("end_frame").get<std::size_t>()};
      if (t.end_frame < t.start_frame) throw FormatError("alignment JSON: end_frame before start_frame");
      out.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("alignment JSON: ") + e.what());
  }
  return out;
}

std::string format_srt(const std::vector<TimedToken>& tokens, double fps, bool drop_sil, std::string_view sil) {
  std::string out;
  int index = 0;
  for (const auto& t : tokens) {
    if (drop_sil && t.token == sil) continue;
    out += std::to_string(++index) + "\n";
    out += srt_timestamp(frame_to_ms(t.start_frame, fps)) + " --> " + srt_timestamp(frame_to_ms(t.end_frame + 1, fps)) +
           "\n";
    out += t.token + "\n\n";
  }
  return out;
}

namespace {

long long parse_srt_time(std::string_view s) {
  int h, m, sec, ms;
  char tail;
  const std::string str(trim(s));
  if (std::sscanf(str.c_str(), "%d:%d:%d,%d%c", &h, &m, &sec, &ms, &tail) != 4) {
    throw FormatError("SRT: bad timestamp '" + str + "'");
  }
  return ((h * 60LL + m) * 60 + sec) * 1000 + ms;
}

}  // namespace

std::vector<SrtCue> parse_srt(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.emplace_back(line);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
  }
  std::vector<SrtCue> out;
  std::size_t i = 0;
  while (i < lines.size()) {
    if (trim(lines[i]).empty()) {
      ++i;
      continue;
    }
    if (i + 1 >= lines.size()) throw FormatError("SRT: truncated cue");
    SrtCue cue;
    cue.index = parse_value<int>("SRT cue number", trim(lines[i]));
    const auto arrow = lines[i + 1].find("-->");
    if (arrow == std::string::npos) throw FormatError("SRT: missing '-->' in '" + lines[i + 1] + "'");
    cue.start_ms = parse_srt_time(std::string_view(lines[i + 1]).substr(0, arrow));
    cue.end_ms = parse_srt_time(std::string_view(lines[i + 1]).substr(arrow + 3));
    i += 2;
    for (; i < lines.size() && !trim(lines[i]).empty(); ++i) cue.text += (cue.text.empty() ? "" : "\n") + lines[i];
    out.push_back(std::move(cue));
  }
  return out;
}

// ------------------------------------------------------------------ commands

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Flat key = value config file");
    app->add_option("--set", sets, "Override one config key (key=value), repeatable");
    app->add_option("--seed", seed, "Seed for data, initialization and training");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& s : sets) apply_assignment(cfg, s);
    if (seed) apply_seed(cfg, *seed);
    cfg.validate();
    return cfg;
  }
};

void echo_config(const RunConfig& cfg, std::ostream& os) {
  std::istringstream lines(format_config(cfg));
  for (std::string line; std::getline(lines, line);) os << "# " << line << '\n';
}

void write_text(const std::string& path, const std::string& text, std::ostream& fallback) {
  if (path.empty()) {
    fallback << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<int> parse_tokens(std::string_view text, const VocabSpec& vocab) {
  std::vector<int> ids;
  std::istringstream in{std::string(text)};
  for (std::string tok; in >> tok;) ids.push_back(vocab.id_of(tok));
  return ids;
}

const synth::SynthSample& find_sample(const std::vector<synth::SynthSample>& corpus, const std::string& id) {
  for (const auto& s : corpus)
    if (s.id == id) return s;
  throw ContractError("no sample '" + id + "' in corpus");
}

void check_corpus_dims(const std::vector<synth::SynthSample>& corpus, const model::CglConfig& mc) {
  for (const auto& s : corpus) {
    if (s.features.cols() != mc.feature_dim) {
      throw ConfigError("sample " + s.id + " has " + std::to_string(s.features.cols()) +
                        "-dim features; model expects " + std::to_string(mc.feature_dim));
    }
    for (int id : s.gold_frame_labels)
      if (id < 0 || std::size_t(id) >= mc.vocab_size) throw ConfigError("sample " + s.id + " uses token ids beyond the vocabulary");
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Visual forced alignment toolkit"};
  app.require_subcommand(1);

  CommonOptions common;
  std::string out_path, corpus_dir, ckpt_path, curve_path, decoder = "improved";
  std::size_t count = 100;
  double threshold = align::kDefaultThreshold;
  std::optional<double> fps;

  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic corpus");
  common.attach(synth_cmd);
  synth_cmd->add_option("--out", out_path, "Corpus directory")->required();
  synth_cmd->add_option("--n", count, "Number of samples");

  auto* train_cmd = app.add_subcommand("train", "Train a model on a corpus");
  common.attach(train_cmd);
  train_cmd->add_option("--corpus", corpus_dir)->required();
  train_cmd->add_option("--out", out_path, "Checkpoint path")->required();
  train_cmd->add_option("--curve", curve_path, "Loss curve CSV (default: <out>.curve.csv)");

  std::string sample_id, features_path, transcript_text, emissions_path, boundaries_path, silence_text;
  auto* align_cmd = app.add_subcommand("align", "Align one sample");
  common.attach(align_cmd);
  align_cmd->add_option("--ckpt", ckpt_path);
  align_cmd->add_option("--corpus", corpus_dir);
  align_cmd->add_option("--sample", sample_id);
  align_cmd->add_option("--features", features_path, "VFT1 feature file");
  align_cmd->add_option("--transcript", transcript_text, "Space-separated word tokens");
  align_cmd->add_option("--emissions", emissions_path, "VFT1 T x V probabilities replacing the model's");
  align_cmd->add_option("--boundaries", boundaries_path, "VFT1 length-T boundary probabilities");
  align_cmd->add_option("--silence-seq", silence_text, "Space-separated silence-aware sequence");
  align_cmd->add_option("--decoder", decoder)->check(CLI::IsMember({"greedy", "viterbi", "improved"}));
  align_cmd->add_option("--threshold", threshold);
  align_cmd->add_option("--fps", fps);
  align_cmd->add_option("--out", out_path);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate one decoder on a corpus");
  common.attach(eval_cmd);
  eval_cmd->add_option("--ckpt", ckpt_path)->required();
  eval_cmd->add_option("--corpus", corpus_dir)->required();
  eval_cmd->add_option("--decoder", decoder)->check(CLI::IsMember({"greedy", "viterbi", "improved"}));
  eval_cmd->add_option("--threshold", threshold);
  eval_cmd->add_option("--out", out_path);

  auto* ablate_cmd = app.add_subcommand("ablate", "Compare greedy, plain and improved decoding");
  common.attach(ablate_cmd);
  ablate_cmd->add_option("--ckpt", ckpt_path)->required();
  ablate_cmd->add_option("--corpus", corpus_dir)->required();
  ablate_cmd->add_option("--threshold", threshold);
  ablate_cmd->add_option("--out", out_path);

  std::string alignment_path;
  bool drop_sil = false;
  auto* srt_cmd = app.add_subcommand("export-srt", "Convert alignment JSON to SRT subtitles");
  srt_cmd->add_option("--alignment", alignment_path)->required();
  srt_cmd->add_option("--fps", fps);
  srt_cmd->add_flag("--drop-sil", drop_sil);
  srt_cmd->add_option("--out", out_path);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("--threshold must lie in (0, 1]");
    if (fps && !(*fps > 0.0)) throw ConfigError("--fps must be > 0");
    // Artifacts written to files leave stdout for the config echo and a summary.
    std::ostream& log = out_path.empty() ? err : out;

    if (*synth_cmd) {
      const RunConfig cfg = common.resolve();
      echo_config(cfg, out);
      synth::write_corpus(synth::generate_corpus(cfg.synth, count), out_path);
      out << "wrote " << count << " samples to " << out_path << '\n';
      return 0;
    }

    if (*train_cmd) {
      const RunConfig cfg = common.resolve();
      echo_config(cfg, out);
      const auto corpus = synth::read_corpus(corpus_dir);
      const model::CglConfig mc = cfg.resolved_model();
      check_corpus_dims(corpus, mc);
      model::CglModel<float> model(mc, synth::synth_vocab(cfg.synth));
      const auto curve = train::train(model, corpus, cfg.train, [&](const train::EpochLoss& e) {
        out << "epoch " << e.epoch << " L_F=" << e.frame << " L_B=" << e.boundary << " L_S=" << e.silence
            << " L=" << e.total << std::endl;
      });
      model::save_checkpoint(model, out_path);
      train::write_loss_curve(curve, curve_path.empty() ? out_path + ".curve.csv" : curve_path);
      out << "saved " << out_path << '\n';
      return 0;
    }

    if (*align_cmd) {
      const RunConfig cfg = common.resolve();
      echo_config(cfg, log);
      std::unique_ptr<model::CglModel<float>> model;
      if (!ckpt_path.empty()) model = model::load_checkpoint<float>(ckpt_path);
      const VocabSpec vocab = model ? model->vocab() : synth::synth_vocab(cfg.synth);

      Tensor<float> features;
      std::vector<int> transcript;
      double sample_fps = cfg.synth.fps;
      if (!corpus_dir.empty()) {
        if (sample_id.empty()) throw ConfigError("--corpus needs --sample");
        const auto corpus = synth::read_corpus(corpus_dir);
        const auto& s = find_sample(corpus, sample_id);
        features = s.features;
        transcript = s.transcript;
        sample_fps = s.fps;
      } else {
        if (!features_path.empty()) features = read_vft_file(features_path);
        transcript = parse_tokens(transcript_text, vocab);
      }

      model::Inference inf;
      if (model) {
        if (features.empty()) throw ConfigError("align with --ckpt needs --corpus/--sample or --features");
        if (transcript.empty()) throw ConfigError("align needs a transcript");
        inf = model->infer(features, transcript);
      }
      if (!emissions_path.empty()) inf.emissions = align::EmissionMatrix::from_tensor(read_vft_file(emissions_path));
      if (!boundaries_path.empty()) {
        const auto b = read_vft_file(boundaries_path);
        inf.boundaries.values.assign(b.data().begin(), b.data().end());
      }
      if (!silence_text.empty()) inf.silence_seq.labels = parse_tokens(silence_text, vocab);
      if (!model) {
        if (emissions_path.empty()) throw ConfigError("align needs --ckpt or --emissions");
        if (decoder != "greedy" && silence_text.empty()) throw ConfigError("align without --ckpt needs --silence-seq");
        if (decoder == "improved" && boundaries_path.empty()) {
          throw ConfigError("align --decoder improved without --ckpt needs --boundaries");
        }
      }
      if (!silence_text.empty() && !transcript.empty() &&
          !align::reduces_to(inf.silence_seq.labels, transcript, vocab.sil_id)) {
        throw ConfigError("--silence-seq does not reduce to the transcript");
      }

      const auto kind = train::parse_decoder(decoder);
      std::vector<align::Segment> segments;
      if (kind == train::DecoderKind::greedy) {
        segments = align::segments_from_labels(align::greedy_decode(inf.emissions));
      } else {
        const align::Alignment a =
            kind == train::DecoderKind::improved
                ? align::improved_viterbi(inf.emissions, inf.silence_seq, inf.boundaries, threshold)
                : align::plain_viterbi(inf.emissions, inf.silence_seq);
        align::check_alignment(a, inf.emissions.frames(), inf.silence_seq);
        segments = a.segments;
      }
      write_text(out_path, alignment_json(timed_tokens(segments, vocab), fps.value_or(sample_fps)) + "\n", out);
      return 0;
    }

    if (*eval_cmd || *ablate_cmd) {
      const RunConfig cfg = common.resolve();
      echo_config(cfg, log);
      const auto model = model::load_checkpoint<float>(ckpt_path);
      const auto corpus = synth::read_corpus(corpus_dir);
      check_corpus_dims(corpus, model->config());
      std::string report;
      if (*eval_cmd) {
        const auto inferences = train::infer_corpus(*model, corpus);
        const auto r =
            train::evaluate(inferences, corpus, train::parse_decoder(decoder), model->vocab().sil_id, threshold);
        log << train::to_string(r.decoder) << ": acc=" << r.acc << " mae_ms=" << r.mae_ms << '\n';
        report = train::report_json(r);
      } else {
        const auto r = train::ablation_run(*model, corpus, threshold);
        for (const auto& row : r.rows)
          log << train::to_string(row.decoder) << ": acc=" << row.acc << " mae_ms=" << row.mae_ms << '\n';
        report = train::report_json(r);
      }
      write_text(out_path, report + "\n", out);
      return 0;
    }

    if (*srt_cmd) {
      const auto tokens = parse_alignment_json(read_text(alignment_path));
      write_text(out_path, format_srt(tokens, fps.value_or(25.0), drop_sil), out);
      return 0;
    }
  } catch (const InfeasibleAlignmentError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace vfa::cli
