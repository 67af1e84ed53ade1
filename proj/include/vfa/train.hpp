#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vfa/model.hpp"
#include "vfa/synth.hpp"

namespace vfa::train {

struct TrainConfig {
  std::size_t epochs = 6;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip = 1.0;
  std::uint64_t seed = 1;
  bool augment = false;
  std::size_t mask_max_len = 4;
  std::size_t mask_count = 1;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Mean cross-entropy of T x V logits against per-frame classes.
template <typename T>
Var<T> frame_loss(Var<T> logits, std::span<const int> gold);
// Mean BCE of boundary probabilities against 0/1 flags.
template <typename T>
Var<T> boundary_loss(Var<T> probs, std::span<const int> gold);
// Mean cross-entropy of teacher-forced decoder steps against gold + EOS.
template <typename T>
Var<T> silence_text_loss(Var<T> step_logits, std::span<const int> targets);
template <typename T>
Var<T> total_loss(Var<T> lf, Var<T> lb, Var<T> ls);

template <typename T>
struct SampleLosses {
  Var<T> frame, boundary, silence, total;
};

// Builds the full multi-task loss for one sample on `tape`.
template <typename T>
SampleLosses<T> sample_losses(Tape<T>& tape, const model::CglModel<T>& model, const Tensor<T>& features,
                              const synth::SynthSample& sample);

// Scales every gradient by min(1, max_norm / ||g||). Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm);

template <typename T>
class Adam {
 public:
  Adam(ParameterStore<T>& params, const TrainConfig& cfg);
  void step();

 private:
  ParameterStore<T>* params_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct EpochLoss {
  std::size_t epoch = 0;
  double frame = 0, boundary = 0, silence = 0, total = 0;

  friend bool operator==(const EpochLoss&, const EpochLoss&) = default;
};

using ProgressFn = std::function<void(const EpochLoss&)>;

// One sequence per update, order reshuffled every epoch from cfg.seed.
// Throws TrainingDivergedError on a non-finite loss.
template <typename T>
std::vector<EpochLoss> train(model::CglModel<T>& model, const std::vector<synth::SynthSample>& corpus,
                             const TrainConfig& cfg, const ProgressFn& progress = {});

void write_loss_curve(const std::vector<EpochLoss>& curve, const std::string& path);

// ------------------------------------------------------------------- metrics

double frame_acc(std::span<const int> pred, std::span<const int> gold);

// Mean |start| and |end| error in ms over matched non-SIL segments. Throws
// MetricUndefinedError unless both sides carry the same non-SIL token order.
double mae_ms(std::span<const align::Segment> pred, std::span<const align::Segment> gold, int sil_id, double fps);

enum class DecoderKind { greedy, plain, improved };
std::string to_string(DecoderKind kind);
DecoderKind parse_decoder(const std::string& name);

struct Prediction {
  std::vector<int> frame_labels;
  std::vector<align::Segment> segments;
  // Segments respect the transcript order, so MAE is defined.
  bool conformant = false;
};

// Decodes one model output. Plain and improved Viterbi walk the decoded
// silence-aware sequence; greedy takes the per-frame argmax.
Prediction decode(const model::Inference& inf, DecoderKind kind, std::span<const int> transcript, int sil_id,
                  double threshold = align::kDefaultThreshold);

struct SampleScore {
  std::string id;
  double acc = 0;
  std::optional<double> mae_ms;
  std::string note;
};

struct EvalReport {
  DecoderKind decoder = DecoderKind::improved;
  double threshold = align::kDefaultThreshold;
  double acc = 0;
  double mae_ms = 0;
  std::size_t mae_samples = 0;  // samples contributing to mae_ms
  std::vector<SampleScore> samples;
};

template <typename T>
std::vector<model::Inference> infer_corpus(const model::CglModel<T>& model,
                                           const std::vector<synth::SynthSample>& corpus);

EvalReport evaluate(const std::vector<model::Inference>& inferences, const std::vector<synth::SynthSample>& corpus,
                    DecoderKind kind, int sil_id, double threshold = align::kDefaultThreshold);

struct AblationReport {
  std::vector<EvalReport> rows;  // greedy, plain, improved
};

template <typename T>
AblationReport ablation_run(const model::CglModel<T>& model, const std::vector<synth::SynthSample>& corpus,
                            double threshold = align::kDefaultThreshold);

std::string report_json(const EvalReport& report, bool per_sample = true);
std::string report_json(const AblationReport& report);

}  // namespace vfa::train
