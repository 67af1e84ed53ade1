#include "vfa/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"

namespace vfa::train {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
  if (!(clip > 0.0)) throw ConfigError("train.clip must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train.eps must be > 0");
  if (augment && mask_max_len == 0) throw ConfigError("train.mask_max_len must be >= 1 when augmenting");
}

template <typename T>
Var<T> frame_loss(Var<T> logits, std::span<const int> gold) {
  return cross_entropy(logits, gold);
}

template <typename T>
Var<T> boundary_loss(Var<T> probs, std::span<const int> gold) {
  return binary_cross_entropy(probs, gold);
}

template <typename T>
Var<T> silence_text_loss(Var<T> step_logits, std::span<const int> targets) {
  return cross_entropy(step_logits, targets);
}

template <typename T>
Var<T> total_loss(Var<T> lf, Var<T> lb, Var<T> ls) {
  return add(add(lf, lb), ls);
}

template <typename T>
SampleLosses<T> sample_losses(Tape<T>& tape, const model::CglModel<T>& model, const Tensor<T>& features,
                              const synth::SynthSample& sample) {
  const Var<T> enc = model.encoder_forward(tape, features, sample.transcript);
  SampleLosses<T> out;
  out.frame = frame_loss(model.frame_head(tape, enc), std::span<const int>(sample.gold_frame_labels));
  out.boundary = boundary_loss(model.boundary_head(tape, enc), std::span<const int>(sample.gold_boundaries));
  const auto& gold = sample.gold_silence_seq.labels;
  std::vector<int> targets(gold.begin(), gold.end());
  targets.push_back(model.vocab().eos_id);
  out.silence = silence_text_loss(model.silence_decoder_train(tape, enc, sample.transcript, gold),
                                  std::span<const int>(targets));
  out.total = total_loss(out.frame, out.boundary, out.silence);
  return out;
}

template <typename T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p->grad.data()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (const auto& p : params)
      for (T& g : p->grad.data()) g *= factor;
  }
  return norm;
}

template <typename T>
Adam<T>::Adam(ParameterStore<T>& params, const TrainConfig& cfg) : params_(&params), cfg_(cfg) {
  cfg_.validate();
  for (const auto& p : params) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  std::size_t k = 0;
  for (const auto& p : *params_) {
    auto value = p->value.data();
    const auto grad = p->grad.data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      value[i] = static_cast<T>(value[i] - cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps));
    }
    ++k;
  }
}

template <typename T>
std::vector<EpochLoss> train(model::CglModel<T>& model, const std::vector<synth::SynthSample>& corpus,
                             const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  if (corpus.empty()) throw ContractError("train: empty corpus");
  auto& params = model.parameters();
  Adam<T> adam(params, cfg);
  params.zero_grad();
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<EpochLoss> curve;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLoss acc{epoch};
    for (std::size_t idx : order) {
      const auto& sample = corpus[idx];
      Tensor<float> feats = cfg.augment ? synth::time_mask(sample.features, cfg.mask_max_len, cfg.mask_count, rng)
                                        : sample.features;
      Tape<T> tape;
      const auto losses = sample_losses(tape, model, feats.template cast<T>(), sample);
      const double total = losses.total.value()[0];
      if (!std::isfinite(total)) {
        throw TrainingDivergedError("train: non-finite loss at epoch " + std::to_string(epoch) + " on sample " +
                                    sample.id + " (L_F=" + std::to_string(losses.frame.value()[0]) +
                                    ", L_B=" + std::to_string(losses.boundary.value()[0]) +
                                    ", L_S=" + std::to_string(losses.silence.value()[0]) + ")");
      }
      acc.frame += losses.frame.value()[0];
      acc.boundary += losses.boundary.value()[0];
      acc.silence += losses.silence.value()[0];
      acc.total += total;
      tape.backward(losses.total);
      clip_grad_norm(params, cfg.clip);
      adam.step();
      params.zero_grad();
    }
    const double n = double(corpus.size());
    acc.frame /= n;
    acc.boundary /= n;
    acc.silence /= n;
    acc.total /= n;
    curve.push_back(acc);
    if (progress) progress(acc);
  }
  return curve;
}

void write_loss_curve(const std::vector<EpochLoss>& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << "epoch,L_F,L_B,L_S,L\n";
  out.precision(17);
  for (const auto& e : curve) out << e.epoch << ',' << e.frame << ',' << e.boundary << ',' << e.silence << ',' << e.total << '\n';
}

// ------------------------------------------------------------------- metrics

double frame_acc(std::span<const int> pred, std::span<const int> gold) {
  if (pred.size() != gold.size()) {
    throw DimensionError("frame_acc: " + std::to_string(pred.size()) + " predicted vs " + std::to_string(gold.size()) +
                         " gold frames");
  }
  if (gold.empty()) throw ContractError("frame_acc: no frames");
  std::size_t hits = 0;
  for (std::size_t t = 0; t < gold.size(); ++t) hits += pred[t] == gold[t];
  return double(hits) / double(gold.size());
}

double mae_ms(std::span<const align::Segment> pred, std::span<const align::Segment> gold, int sil_id, double fps) {
  if (!(fps > 0.0)) throw ContractError("mae_ms: fps must be > 0");
  std::vector<align::Segment> p, g;
  std::copy_if(pred.begin(), pred.end(), std::back_inserter(p), [&](const auto& s) { return s.token != sil_id; });
  std::copy_if(gold.begin(), gold.end(), std::back_inserter(g), [&](const auto& s) { return s.token != sil_id; });
  if (p.size() != g.size()) {
    throw MetricUndefinedError("mae_ms: " + std::to_string(p.size()) + " predicted vs " + std::to_string(g.size()) +
                               " gold units");
  }
  if (g.empty()) throw MetricUndefinedError("mae_ms: no non-SIL units");
  const double ms = 1000.0 / fps;
  double total = 0.0;
  for (std::size_t k = 0; k < g.size(); ++k) {
    if (p[k].token != g[k].token) throw MetricUndefinedError("mae_ms: token mismatch at unit " + std::to_string(k));
    total += std::abs(double(p[k].start) * ms - double(g[k].start) * ms);
    total += std::abs(double(p[k].end + 1) * ms - double(g[k].end + 1) * ms);
  }
  return total / double(2 * g.size());
}

std::string to_string(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::greedy: return "greedy";
    case DecoderKind::plain: return "plain_viterbi";
    case DecoderKind::improved: return "improved_viterbi";
  }
  return "?";
}

DecoderKind parse_decoder(const std::string& name) {
  if (name == "greedy") return DecoderKind::greedy;
  if (name == "viterbi" || name == "plain" || name == "plain_viterbi") return DecoderKind::plain;
  if (name == "improved" || name == "improved_viterbi") return DecoderKind::improved;
  throw ConfigError("unknown decoder '" + name + "' (expected greedy, viterbi or improved)");
}

Prediction decode(const model::Inference& inf, DecoderKind kind, std::span<const int> transcript, int sil_id,
                  double threshold) {
  Prediction out;
  if (kind == DecoderKind::greedy) {
    out.frame_labels = align::greedy_decode(inf.emissions);
    out.segments = align::segments_from_labels(out.frame_labels);
    std::vector<int> tokens;
    for (const auto& s : out.segments) tokens.push_back(s.token);
    out.conformant = align::reduces_to(tokens, transcript, sil_id);
    return out;
  }
  const align::Alignment a = kind == DecoderKind::improved
                                 ? align::improved_viterbi(inf.emissions, inf.silence_seq, inf.boundaries, threshold)
                                 : align::plain_viterbi(inf.emissions, inf.silence_seq);
  out.segments = a.segments;
  out.frame_labels = align::frame_labels(a.segments);
  out.conformant = align::reduces_to(inf.silence_seq.labels, transcript, sil_id);
  return out;
}

template <typename T>
std::vector<model::Inference> infer_corpus(const model::CglModel<T>& model,
                                           const std::vector<synth::SynthSample>& corpus) {
  std::vector<model::Inference> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) out.push_back(model.infer(s.features.template cast<T>(), s.transcript));
  return out;
}

EvalReport evaluate(const std::vector<model::Inference>& inferences, const std::vector<synth::SynthSample>& corpus,
                    DecoderKind kind, int sil_id, double threshold) {
  if (inferences.size() != corpus.size()) throw DimensionError("evaluate: inference and corpus sizes differ");
  EvalReport report;
  report.decoder = kind;
  report.threshold = threshold;
  double acc_sum = 0.0, mae_sum = 0.0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus[i];
    SampleScore score;
    score.id = s.id;
    try {
      const Prediction p = decode(inferences[i], kind, s.transcript, sil_id, threshold);
      score.acc = frame_acc(p.frame_labels, s.gold_frame_labels);
      if (p.conformant) {
        score.mae_ms = mae_ms(p.segments, s.gold_segments(), sil_id, s.fps);
      } else {
        score.note = "non-conformant";
      }
    } catch (const InfeasibleAlignmentError& e) {
      score.note = "infeasible";
    }
    acc_sum += score.acc;
    if (score.mae_ms) {
      mae_sum += *score.mae_ms;
      ++report.mae_samples;
    }
    report.samples.push_back(std::move(score));
  }
  report.acc = corpus.empty() ? 0.0 : acc_sum / double(corpus.size());
  report.mae_ms = report.mae_samples ? mae_sum / double(report.mae_samples) : std::nan("");
  return report;
}

template <typename T>
AblationReport ablation_run(const model::CglModel<T>& model, const std::vector<synth::SynthSample>& corpus,
                            double threshold) {
  const auto inferences = infer_corpus(model, corpus);
  AblationReport out;
  for (DecoderKind kind : {DecoderKind::greedy, DecoderKind::plain, DecoderKind::improved})
    out.rows.push_back(evaluate(inferences, corpus, kind, model.vocab().sil_id, threshold));
  return out;
}

namespace {

nlohmann::json report_object(const EvalReport& r, bool per_sample) {
  nlohmann::json j{{"decoder", to_string(r.decoder)},
                   {"acc", r.acc},
                   {"mae_ms", std::isfinite(r.mae_ms) ? nlohmann::json(r.mae_ms) : nlohmann::json(nullptr)},
                   {"mae_samples", r.mae_samples},
                   {"samples", r.samples.size()}};
  if (r.decoder == DecoderKind::improved) j["threshold"] = r.threshold;
  if (per_sample) {
    auto rows = nlohmann::json::array();
    for (const auto& s : r.samples) {
      nlohmann::json row{{"id", s.id}, {"acc", s.acc}, {"mae_ms", s.mae_ms ? nlohmann::json(*s.mae_ms) : nlohmann::json(nullptr)}};
      if (!s.note.empty()) row["note"] = s.note;
      rows.push_back(row);
    }
    j["per_sample"] = rows;
  }
  return j;
}

}  // namespace

std::string report_json(const EvalReport& report, bool per_sample) { return report_object(report, per_sample).dump(2); }

std::string report_json(const AblationReport& report) {
  auto rows = nlohmann::json::array();
  for (const auto& r : report.rows) rows.push_back(report_object(r, false));
  return nlohmann::json{{"ablation", rows}}.dump(2);
}

#define VFA_INSTANTIATE_TRAIN(T)                                                                              \
  template Var<T> frame_loss(Var<T>, std::span<const int>);                                                 \
  template Var<T> boundary_loss(Var<T>, std::span<const int>);                                              \
  template Var<T> silence_text_loss(Var<T>, std::span<const int>);                                          \
  template Var<T> total_loss(Var<T>, Var<T>, Var<T>);                                                       \
  template SampleLosses<T> sample_losses(Tape<T>&, const model::CglModel<T>&, const Tensor<T>&,             \
                                         const synth::SynthSample&);                                        \
  template double clip_grad_norm(ParameterStore<T>&, double);                                               \
  template class Adam<T>;                                                                                   \
  template std::vector<EpochLoss> train(model::CglModel<T>&, const std::vector<synth::SynthSample>&,        \
                                        const TrainConfig&, const ProgressFn&);                             \
  template std::vector<model::Inference> infer_corpus(const model::CglModel<T>&,                            \
                                                      const std::vector<synth::SynthSample>&);              \
  template AblationReport ablation_run(const model::CglModel<T>&, const std::vector<synth::SynthSample>&, double);

VFA_INSTANTIATE_TRAIN(float)
VFA_INSTANTIATE_TRAIN(double)
#undef VFA_INSTANTIATE_TRAIN

}  // namespace vfa::train
