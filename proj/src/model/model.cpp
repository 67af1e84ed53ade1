#include "vfa/model.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>

#include "json.hpp"

namespace vfa::model {

using nlohmann::json;

// --------------------------------------------------------------------- vocab

void CglConfig::validate() const {
  const std::array<std::pair<const char*, std::size_t>, 9> fields{{{"num_layers", num_layers},
                                                                   {"embed_dim", embed_dim},
                                                                   {"num_heads", num_heads},
                                                                   {"window", window},
                                                                   {"global_kernel", global_kernel},
                                                                   {"local_kernel", local_kernel},
                                                                   {"feature_dim", feature_dim},
                                                                   {"vocab_size", vocab_size},
                                                                   {"decoder_layers", decoder_layers}}};
  for (const auto& [name, value] : fields)
    if (value == 0) throw ConfigError(std::string("model.") + name + " must be >= 1");
  if (embed_dim % num_heads != 0) throw ConfigError("model.embed_dim must be divisible by model.num_heads");
  if (global_kernel % 2 == 0 || local_kernel % 2 == 0) throw ConfigError("model kernels must be odd");
}

void to_json(json& j, const CglConfig& c) {
  j = json{{"num_layers", c.num_layers},       {"embed_dim", c.embed_dim},   {"num_heads", c.num_heads},
           {"window", c.window},               {"global_kernel", c.global_kernel},
           {"local_kernel", c.local_kernel},   {"feature_dim", c.feature_dim},
           {"vocab_size", c.vocab_size},       {"decoder_layers", c.decoder_layers},
           {"seed", c.seed}};
}

void from_json(const json& j, CglConfig& c) {
  j.at("num_layers").get_to(c.num_layers);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("num_heads").get_to(c.num_heads);
  j.at("window").get_to(c.window);
  j.at("global_kernel").get_to(c.global_kernel);
  j.at("local_kernel").get_to(c.local_kernel);
  j.at("feature_dim").get_to(c.feature_dim);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("decoder_layers").get_to(c.decoder_layers);
  j.at("seed").get_to(c.seed);
}

}  // namespace vfa::model

namespace vfa {

using nlohmann::json;

void to_json(json& j, const VocabSpec& v) {
  j = json{{"tokens", v.tokens}, {"pad_id", v.pad_id}, {"bos_id", v.bos_id}, {"eos_id", v.eos_id},
           {"sil_id", v.sil_id}};
}

void from_json(const json& j, VocabSpec& v) {
  j.at("tokens").get_to(v.tokens);
  j.at("pad_id").get_to(v.pad_id);
  j.at("bos_id").get_to(v.bos_id);
  j.at("eos_id").get_to(v.eos_id);
  j.at("sil_id").get_to(v.sil_id);
}

}  // namespace vfa

namespace vfa::model {

// -------------------------------------------------------------------- blocks

template <typename T>
CglBlock<T>::CglBlock(ParameterStore<T>& store, const std::string& name, const CglConfig& cfg,
                      nn::Initializer& init)
    : window_(cfg.window) {
  const std::size_t c = cfg.embed_dim;
  const nn::AttentionConfig attn{c, cfg.num_heads, cfg.window};
  ffn1_norm_ = nn::LayerNorm<T>::create(store, name + ".ffn1_norm", c);
  ffn1_ = nn::FeedForward<T>(store, name + ".ffn1", c, init);
  cross_norm_ = nn::LayerNorm<T>::create(store, name + ".cross_norm", c);
  cross_attn_ = nn::MultiHeadAttention<T>(store, name + ".cross_attn", attn, init);
  global_norm_ = nn::LayerNorm<T>::create(store, name + ".global_norm", c);
  global_attn_ = nn::MultiHeadAttention<T>(store, name + ".global_attn", attn, init);
  global_conv_norm_ = nn::LayerNorm<T>::create(store, name + ".global_conv_norm", c);
  global_conv_ = nn::ConvBranch<T>(store, name + ".global_conv", {cfg.global_kernel, c}, init);
  local_norm_ = nn::LayerNorm<T>::create(store, name + ".local_norm", c);
  local_attn_ = nn::MultiHeadAttention<T>(store, name + ".local_attn", attn, init);
  local_conv_norm_ = nn::LayerNorm<T>::create(store, name + ".local_conv_norm", c);
  local_conv_ = nn::ConvBranch<T>(store, name + ".local_conv", {cfg.local_kernel, c}, init);
  ffn2_norm_ = nn::LayerNorm<T>::create(store, name + ".ffn2_norm", c);
  ffn2_ = nn::FeedForward<T>(store, name + ".ffn2", c, init);
  out_norm_ = nn::LayerNorm<T>::create(store, name + ".out_norm", c);
}

template <typename T>
Var<T> CglBlock<T>::operator()(Tape<T>& tape, Var<T> x, Var<T> text, BlockTrace<T>* trace) const {
  x = add(x, scale(ffn1_(tape, ffn1_norm_(tape, x)), T(0.5)));
  x = add(x, cross_attn_(tape, cross_norm_(tape, x), text));

  const Var<T> xg = global_norm_(tape, x);
  Var<T> g = add(x, global_attn_(tape, xg, xg));
  g = add(g, global_conv_(tape, global_conv_norm_(tape, g)));

  const Tensor<T> mask = nn::local_attention_mask<T>(x.value().rows(), window_);
  const Var<T> xl = local_norm_(tape, x);
  Var<T> l = add(x, local_attn_(tape, xl, xl, &mask));
  l = add(l, local_conv_(tape, local_conv_norm_(tape, l)));

  if (trace) *trace = {g, l};
  x = mfm_fuse(g, l);
  x = add(x, scale(ffn2_(tape, ffn2_norm_(tape, x)), T(0.5)));
  return out_norm_(tape, x);
}

template <typename T>
DecoderLayer<T>::DecoderLayer(ParameterStore<T>& store, const std::string& name, const CglConfig& cfg,
                              nn::Initializer& init) {
  const std::size_t c = cfg.embed_dim;
  const nn::AttentionConfig attn{c, cfg.num_heads, cfg.window};
  self_norm_ = nn::LayerNorm<T>::create(store, name + ".self_norm", c);
  self_attn_ = nn::MultiHeadAttention<T>(store, name + ".self_attn", attn, init);
  cross_norm_ = nn::LayerNorm<T>::create(store, name + ".cross_norm", c);
  cross_attn_ = nn::MultiHeadAttention<T>(store, name + ".cross_attn", attn, init);
  ffn_norm_ = nn::LayerNorm<T>::create(store, name + ".ffn_norm", c);
  ffn_ = nn::FeedForward<T>(store, name + ".ffn", c, init);
}

template <typename T>
Var<T> DecoderLayer<T>::operator()(Tape<T>& tape, Var<T> y, Var<T> memory) const {
  const Tensor<T> mask = nn::causal_mask<T>(y.value().rows());
  const Var<T> ys = self_norm_(tape, y);
  y = add(y, self_attn_(tape, ys, ys, &mask));
  y = add(y, cross_attn_(tape, cross_norm_(tape, y), memory));
  return add(y, ffn_(tape, ffn_norm_(tape, y)));
}

// --------------------------------------------------------------------- model

template <typename T>
CglModel<T>::CglModel(CglConfig cfg, VocabSpec vocab) : cfg_(cfg), vocab_(std::move(vocab)) {
  cfg_.validate();
  vocab_.validate();
  if (vocab_.size() != cfg_.vocab_size) {
    throw ConfigError("model.vocab_size " + std::to_string(cfg_.vocab_size) + " does not match vocabulary of " +
                      std::to_string(vocab_.size()));
  }
  nn::Initializer init(cfg_.seed);
  const std::size_t c = cfg_.embed_dim, v = cfg_.vocab_size;
  feature_embed_ = nn::Linear<T>::create(params_, "embed.features", cfg_.feature_dim, c, init);
  token_embed_ = &params_.add("embed.tokens", init.uniform<T>(Shape{v, c}, std::sqrt(3.0 / double(c))));
  for (std::size_t i = 0; i < cfg_.num_layers; ++i)
    blocks_.emplace_back(params_, "encoder." + std::to_string(i), cfg_, init);
  frame_hidden_ = nn::Linear<T>::create(params_, "frame_head.hidden", c, c, init);
  frame_out_ = nn::Linear<T>::create(params_, "frame_head.out", c, v, init);
  boundary_hidden_ = nn::Linear<T>::create(params_, "boundary_head.hidden", c, c, init);
  boundary_out_ = nn::Linear<T>::create(params_, "boundary_head.out", c, 1, init);
  for (std::size_t i = 0; i < cfg_.decoder_layers; ++i)
    decoder_.emplace_back(params_, "decoder." + std::to_string(i), cfg_, init);
  decoder_norm_ = nn::LayerNorm<T>::create(params_, "decoder.norm", c);
  decoder_out_ = nn::Linear<T>::create(params_, "decoder.out", c, v, init);
}

template <typename T>
Var<T> CglModel<T>::embed_text(Tape<T>& tape, std::span<const int> ids) const {
  const Var<T> emb = gather_rows(tape.parameter(*token_embed_), ids);
  return add_constant(emb, nn::positional_encoding<T>(ids.size(), cfg_.embed_dim));
}

template <typename T>
Var<T> CglModel<T>::encoder_forward(Tape<T>& tape, const Tensor<T>& features, std::span<const int> text_ids,
                                    std::vector<BlockTrace<T>>* trace) const {
  if (features.rank() != 2 || features.rows() == 0 || text_ids.empty()) {
    throw ContractError("encoder_forward: needs T_v >= 1 frames and T_t >= 1 tokens");
  }
  if (features.cols() != cfg_.feature_dim) {
    throw DimensionError("encoder_forward: feature dim " + std::to_string(features.cols()) + ", expected " +
                         std::to_string(cfg_.feature_dim));
  }
  if (text_ids.size() >= features.rows()) {
    std::clog << "warning: transcript of " << text_ids.size() << " tokens is not shorter than " << features.rows()
              << " frames\n";
  }
  const std::size_t frames = features.rows();
  Var<T> x = feature_embed_(tape, tape.constant(features));
  x = add_constant(x, nn::positional_encoding<T>(frames, cfg_.embed_dim));
  const Var<T> text = embed_text(tape, text_ids);
  if (trace) trace->assign(blocks_.size(), {});
  for (std::size_t i = 0; i < blocks_.size(); ++i) x = blocks_[i](tape, x, text, trace ? &(*trace)[i] : nullptr);
  return x;
}

template <typename T>
Var<T> CglModel<T>::frame_head(Tape<T>& tape, Var<T> enc) const {
  return frame_out_(tape, swish(frame_hidden_(tape, enc)));
}

template <typename T>
Var<T> CglModel<T>::boundary_head(Tape<T>& tape, Var<T> enc) const {
  return sigmoid(boundary_out_(tape, swish(boundary_hidden_(tape, enc))));
}

template <typename T>
Var<T> CglModel<T>::silence_decoder_logits(Tape<T>& tape, Var<T> enc, std::span<const int> text_ids,
                                           std::span<const int> prefix) const {
  if (prefix.empty()) throw ContractError("silence decoder: empty prefix");
  const std::array<Var<T>, 2> parts{embed_text(tape, text_ids), enc};
  const Var<T> memory = concat_rows<T>(parts);
  Var<T> y = embed_text(tape, prefix);
  for (const auto& layer : decoder_) y = layer(tape, y, memory);
  return decoder_out_(tape, decoder_norm_(tape, y));
}

template <typename T>
Var<T> CglModel<T>::silence_decoder_train(Tape<T>& tape, Var<T> enc, std::span<const int> text_ids,
                                          std::span<const int> gold_silence_seq) const {
  for (int id : gold_silence_seq) {
    if (id != vocab_.sil_id && !vocab_.is_word(id)) {
      throw LabelError("silence decoder: gold sequence holds non-word token " + std::to_string(id));
    }
  }
  if (!align::reduces_to(gold_silence_seq, text_ids, vocab_.sil_id)) {
    throw LabelError("silence decoder: gold sequence is not the transcript with SIL insertions");
  }
  std::vector<int> prefix{vocab_.bos_id};
  prefix.insert(prefix.end(), gold_silence_seq.begin(), gold_silence_seq.end());
  return silence_decoder_logits(tape, enc, text_ids, prefix);
}

template <typename T>
align::SilenceAwareSequence CglModel<T>::silence_decoder_decode(const Tensor<T>& enc,
                                                                std::span<const int> text_ids) const {
  return constrained_greedy_decode(text_ids, vocab_, [&](std::span<const int> prefix) {
    Tape<T> tape;
    const Var<T> logits = silence_decoder_logits(tape, tape.constant(enc), text_ids, prefix);
    const auto& v = logits.value();
    const T* last = v.row(v.rows() - 1);
    return std::vector<double>(last, last + v.cols());
  });
}

template <typename T>
Inference CglModel<T>::infer(const Tensor<T>& features, std::span<const int> text_ids) const {
  Tape<T> tape;
  const Var<T> enc = encoder_forward(tape, features, text_ids);
  const Tensor<double> logits = frame_head(tape, enc).value().template cast<double>();
  Inference out;
  out.emissions = align::EmissionMatrix::from_tensor(kernels::masked_softmax<double>(logits, nullptr));
  const auto& bnd = boundary_head(tape, enc).value();
  out.boundaries.values.assign(bnd.data().begin(), bnd.data().end());
  out.silence_seq = silence_decoder_decode(enc.value(), text_ids);
  return out;
}

align::SilenceAwareSequence constrained_greedy_decode(std::span<const int> transcript, const VocabSpec& vocab,
                                                      const NextTokenScorer& scorer) {
  const std::size_t cap = 2 * transcript.size() + 1;
  std::vector<int> history{vocab.bos_id};
  align::SilenceAwareSequence out;
  std::size_t consumed = 0;
  while (out.labels.size() < cap) {
    std::vector<int> admissible;
    if (consumed < transcript.size()) admissible.push_back(transcript[consumed]);
    if (out.labels.empty() || out.labels.back() != vocab.sil_id) admissible.push_back(vocab.sil_id);
    if (consumed == transcript.size()) admissible.push_back(vocab.eos_id);
    const std::vector<double> logits = scorer(history);
    int best = admissible.front();
    for (int id : admissible) {
      if (static_cast<std::size_t>(id) >= logits.size()) throw DimensionError("decoder: logits narrower than vocab");
      if (logits[static_cast<std::size_t>(id)] > logits[static_cast<std::size_t>(best)]) best = id;
    }
    if (best == vocab.eos_id) break;
    out.labels.push_back(best);
    history.push_back(best);
    if (best != vocab.sil_id) ++consumed;
  }
  for (; consumed < transcript.size(); ++consumed) out.labels.push_back(transcript[consumed]);
  return out;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr std::array<char, 4> kCheckpointMagic{'V', 'F', 'C', 'K'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint: truncated");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

}  // namespace

template <typename T>
void save_checkpoint(const CglModel<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  const std::string header = json{{"config", model.config()}, {"vocab", model.vocab()}}.dump();
  out.write(kCheckpointMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  put_u32(out, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    put_u32(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    write_vft(out, p->value);
  }
  if (!out) throw FormatError("checkpoint: write failed for " + path);
}

template <typename T>
std::unique_ptr<CglModel<T>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kCheckpointMagic) throw FormatError("checkpoint: bad magic in " + path);
  std::string header(get_u32(in), '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header.size()))) throw FormatError("checkpoint: truncated header");
  json j;
  try {
    j = json::parse(header);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  auto model = std::make_unique<CglModel<T>>(j.at("config").get<CglConfig>(), j.at("vocab").get<VocabSpec>());
  const std::uint32_t count = get_u32(in);
  if (count != model->parameters().size()) {
    throw FormatError("checkpoint: " + std::to_string(count) + " records, model has " +
                      std::to_string(model->parameters().size()) + " parameters");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get_u32(in), '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw FormatError("checkpoint: truncated name");
    if (!model->parameters().contains(name)) throw FormatError("checkpoint: unexpected parameter " + name);
    auto& p = model->parameters().get(name);
    Tensor<float> value = read_vft(in);
    if (value.shape() != p.value.shape()) {
      throw FormatError("checkpoint: shape mismatch for " + name + ": " + shape_str(value.shape()) + " vs " +
                        shape_str(p.value.shape()));
    }
    p.value = value.template cast<T>();
  }
  return model;
}

template class CglBlock<float>;
template class CglBlock<double>;
template class DecoderLayer<float>;
template class DecoderLayer<double>;
template class CglModel<float>;
template class CglModel<double>;
template void save_checkpoint(const CglModel<float>&, const std::string&);
template void save_checkpoint(const CglModel<double>&, const std::string&);
template std::unique_ptr<CglModel<float>> load_checkpoint(const std::string&);
template std::unique_ptr<CglModel<double>> load_checkpoint(const std::string&);

}  // namespace vfa::model
