#pragma once

// Full model assembly for the four families: the recurrent and convolutional
// encoder-decoders, the transformer, and the hybrid with a transformer
// encoder and a recurrent decoder. Also exposes the path-length and
// receptive-field arithmetic used in the connectivity analysis.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "contraseq/errors.hpp"
#include "contraseq/layers.hpp"
#include "contraseq/rng.hpp"
#include "contraseq/special_tokens.hpp"
#include "contraseq/tensor.hpp"

namespace contraseq {

enum class Family { rnn, cnn, transformer, trans_rnn };

inline std::string family_name(Family f) {
  switch (f) {
    case Family::rnn: return "rnn";
    case Family::cnn: return "cnn";
    case Family::transformer: return "transformer";
    case Family::trans_rnn: return "trans_rnn";
  }
  return "?";
}

inline Family family_from_name(const std::string& s) {
  if (s == "rnn") return Family::rnn;
  if (s == "cnn") return Family::cnn;
  if (s == "transformer") return Family::transformer;
  if (s == "trans_rnn") return Family::trans_rnn;
  throw config_error("unknown model family '" + s + "'");
}

struct ModelConfig {
  Family family = Family::transformer;
  int64_t layers = 2;
  int64_t hidden = 64;
  int64_t kernel = 3;  // cnn only
  int64_t heads = 4;   // transformer / trans_rnn encoder
  double dropout_embed = 0.1;
  double dropout_block = 0.1;
  bool tie_embeddings = true;
  int64_t src_vocab = 0;
  int64_t tgt_vocab = 0;
  int64_t max_length = 128;
  NormPlacement norm = NormPlacement::post;
  RnnCellKind rnn_cell = RnnCellKind::lstm;
  // Positional mode defaults per family (learned for cnn, sinusoidal for
  // transformer/trans_rnn, none for rnn); settable for experiments.
  std::optional<PosMode> pos_mode_override;

  bool uses_transformer_encoder() const {
    return family == Family::transformer || family == Family::trans_rnn;
  }
  bool uses_rnn_decoder() const {
    return family == Family::rnn || family == Family::trans_rnn;
  }

  PosMode pos_mode() const {
    if (pos_mode_override) return *pos_mode_override;
    switch (family) {
      case Family::rnn: return PosMode::none;
      case Family::cnn: return PosMode::learned;
      default: return PosMode::sinusoidal;
    }
  }

  void validate() const {
    std::string bad;
    auto flag = [&bad](const std::string& f) { bad += bad.empty() ? f : ", " + f; };
    if (hidden <= 0) flag("hidden (must be > 0)");
    if (layers < 1) flag("layers (must be >= 1)");
    if (family == Family::cnn && (kernel < 1 || kernel % 2 == 0))
      flag("kernel (must be odd and >= 1)");
    if (uses_transformer_encoder() && (heads < 1 || hidden % heads != 0))
      flag("heads (must be >= 1 and divide hidden)");
    if (src_vocab <= 0) flag("src_vocab (must be > 0)");
    if (tgt_vocab <= 0) flag("tgt_vocab (must be > 0)");
    if (tie_embeddings && src_vocab != tgt_vocab)
      flag("tie_embeddings (requires src_vocab == tgt_vocab)");
    if (max_length < 2) flag("max_length (must be >= 2)");
    if (dropout_embed < 0 || dropout_embed >= 1) flag("dropout_embed (must be in [0,1))");
    if (dropout_block < 0 || dropout_block >= 1) flag("dropout_block (must be in [0,1))");
    if (!bad.empty()) throw config_error("invalid model config: " + bad);
  }

  std::map<std::string, std::string> to_kv() const {
    std::map<std::string, std::string> kv;
    kv["family"] = family_name(family);
    kv["layers"] = std::to_string(layers);
    kv["hidden"] = std::to_string(hidden);
    kv["kernel"] = std::to_string(kernel);
    kv["heads"] = std::to_string(heads);
    kv["dropout_embed"] = std::to_string(dropout_embed);
    kv["dropout_block"] = std::to_string(dropout_block);
    kv["tie_embeddings"] = tie_embeddings ? "true" : "false";
    kv["src_vocab"] = std::to_string(src_vocab);
    kv["tgt_vocab"] = std::to_string(tgt_vocab);
    kv["max_length"] = std::to_string(max_length);
    kv["norm"] = norm == NormPlacement::post ? "post" : "pre";
    kv["rnn_cell"] = rnn_cell == RnnCellKind::lstm ? "lstm" : "gru";
    switch (pos_mode()) {
      case PosMode::none: kv["pos"] = "none"; break;
      case PosMode::learned: kv["pos"] = "learned"; break;
      case PosMode::sinusoidal: kv["pos"] = "sinusoidal"; break;
    }
    return kv;
  }

  static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
    auto need = [&kv](const std::string& key) -> const std::string& {
      auto it = kv.find(key);
      if (it == kv.end()) throw config_error("model config missing key '" + key + "'");
      return it->second;
    };
    ModelConfig c;
    c.family = family_from_name(need("family"));
    c.layers = std::stoll(need("layers"));
    c.hidden = std::stoll(need("hidden"));
    c.kernel = std::stoll(need("kernel"));
    c.heads = std::stoll(need("heads"));
    c.dropout_embed = std::stod(need("dropout_embed"));
    c.dropout_block = std::stod(need("dropout_block"));
    c.tie_embeddings = need("tie_embeddings") == "true";
    c.src_vocab = std::stoll(need("src_vocab"));
    c.tgt_vocab = std::stoll(need("tgt_vocab"));
    c.max_length = std::stoll(need("max_length"));
    c.norm = need("norm") == "pre" ? NormPlacement::pre : NormPlacement::post;
    c.rnn_cell = need("rnn_cell") == "gru" ? RnnCellKind::gru : RnnCellKind::lstm;
    const std::string& pos = need("pos");
    if (pos == "none") c.pos_mode_override = PosMode::none;
    else if (pos == "learned") c.pos_mode_override = PosMode::learned;
    else c.pos_mode_override = PosMode::sinusoidal;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Model storage
// ---------------------------------------------------------------------------

template <typename T>
struct ModelT {
  ModelConfig config;
  // Unique trainable tensors in registration order; tied tables appear once.
  std::vector<std::pair<std::string, TensorT<T>>> params;

  TensorT<T> src_embed, tgt_embed;  // same node when tied
  PositionalTableT<T> pos_enc, pos_dec;

  // rnn encoder: bidirectional layer 0 (concat projected back to d), then
  // unidirectional residual layers.
  RnnCellParams<T> enc_fwd0, enc_bwd0;
  TensorT<T> enc_bi_w, enc_bi_b;
  std::vector<RnnCellParams<T>> enc_rnn;

  std::vector<ConvGluParams<T>> enc_conv;
  std::vector<TransformerBlockParams<T>> enc_blocks;
  LayerNormParams<T> enc_final_ln;  // pre-norm only

  std::vector<RnnCellParams<T>> dec_rnn;  // layer 0 raw, rest residual
  std::vector<ConvGluParams<T>> dec_conv;
  std::vector<TransformerBlockParams<T>> dec_blocks;
  LayerNormParams<T> dec_final_ln;  // pre-norm only

  // Single-head dot-product attention bridging rnn/cnn decoders to the
  // encoder states, applied after the top decoder layer.
  std::optional<AttentionParams<T>> bridge;

  TensorT<T> out_w, out_b;

  const TensorT<T>* find_param(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return &t;
    return nullptr;
  }
};

using Model = ModelT<float>;

namespace detail {

template <typename T>
class ParamRegistrar {
 public:
  ParamRegistrar(ModelT<T>& m, RngStream& rng) : model_(m), rng_(rng) {}

  TensorT<T> matrix(const std::string& name, int64_t rows, int64_t cols) {
    TensorT<T> t = TensorT<T>::zeros({rows, cols}, true);
    xavier_fill(t, rng_);
    model_.params.emplace_back(name, t);
    return t;
  }

  TensorT<T> vector_zero(const std::string& name, int64_t d) {
    TensorT<T> t = TensorT<T>::zeros({d}, true);
    model_.params.emplace_back(name, t);
    return t;
  }

  TensorT<T> vector_one(const std::string& name, int64_t d) {
    TensorT<T> t = TensorT<T>::full({d}, T(1), true);
    model_.params.emplace_back(name, t);
    return t;
  }

  RnnCellParams<T> rnn_cell(const std::string& prefix, RnnCellKind kind, int64_t d) {
    RnnCellParams<T> p;
    p.kind = kind;
    const int64_t gates = kind == RnnCellKind::lstm ? 4 : 3;
    p.wx = matrix(prefix + ".wx", d, gates * d);
    p.wh = matrix(prefix + ".wh", d, gates * d);
    p.bx = vector_zero(prefix + ".bx", gates * d);
    if (kind == RnnCellKind::gru) p.bh = vector_zero(prefix + ".bh", gates * d);
    return p;
  }

  ConvGluParams<T> conv(const std::string& prefix, int64_t k, int64_t d) {
    ConvGluParams<T> p;
    p.w = matrix(prefix + ".w", k * d, 2 * d);
    p.b = vector_zero(prefix + ".b", 2 * d);
    return p;
  }

  AttentionParams<T> attention(const std::string& prefix, int64_t d) {
    AttentionParams<T> p;
    p.wq = matrix(prefix + ".wq", d, d);
    p.wk = matrix(prefix + ".wk", d, d);
    p.wv = matrix(prefix + ".wv", d, d);
    p.wo = matrix(prefix + ".wo", d, d);
    p.bq = vector_zero(prefix + ".bq", d);
    p.bk = vector_zero(prefix + ".bk", d);
    p.bv = vector_zero(prefix + ".bv", d);
    p.bo = vector_zero(prefix + ".bo", d);
    return p;
  }

  LayerNormParams<T> layer_norm(const std::string& prefix, int64_t d) {
    LayerNormParams<T> p;
    p.gain = vector_one(prefix + ".gain", d);
    p.bias = vector_zero(prefix + ".bias", d);
    return p;
  }

  FfnParams<T> ffn(const std::string& prefix, int64_t d) {
    FfnParams<T> p;
    p.w1 = matrix(prefix + ".w1", d, 4 * d);
    p.b1 = vector_zero(prefix + ".b1", 4 * d);
    p.w2 = matrix(prefix + ".w2", 4 * d, d);
    p.b2 = vector_zero(prefix + ".b2", d);
    return p;
  }

  TransformerBlockParams<T> block(const std::string& prefix, int64_t d, bool cross) {
    TransformerBlockParams<T> p;
    p.self_attn = attention(prefix + ".self", d);
    p.ln_self = layer_norm(prefix + ".ln1", d);
    if (cross) {
      p.cross_attn = attention(prefix + ".cross", d);
      p.ln_cross = layer_norm(prefix + ".ln2", d);
    }
    p.ffn = ffn(prefix + ".ffn", d);
    p.ln_ffn = layer_norm(prefix + (cross ? ".ln3" : ".ln2"), d);
    return p;
  }

 private:
  ModelT<T>& model_;
  RngStream& rng_;
};

}  // namespace detail

// Deterministic model construction: identical (config, seed) pairs yield
// bit-identical parameters.
template <typename T>
ModelT<T> build_model_t(const ModelConfig& config, uint64_t seed) {
  config.validate();
  ModelT<T> m;
  m.config = config;
  RngStream rng(seed, "init");
  detail::ParamRegistrar<T> reg(m, rng);
  const int64_t d = config.hidden;
  const int64_t L = config.layers;

  if (config.tie_embeddings) {
    m.src_embed = reg.matrix("embed.shared", config.src_vocab, d);
    m.tgt_embed = m.src_embed;
  } else {
    m.src_embed = reg.matrix("embed.src", config.src_vocab, d);
    m.tgt_embed = reg.matrix("embed.tgt", config.tgt_vocab, d);
  }

  const PosMode pos = config.pos_mode();
  if (pos == PosMode::learned) {
    m.pos_enc.mode = PosMode::learned;
    m.pos_enc.table = reg.matrix("pos.enc", config.max_length, d);
    m.pos_dec.mode = PosMode::learned;
    m.pos_dec.table = reg.matrix("pos.dec", config.max_length, d);
  } else if (pos == PosMode::sinusoidal) {
    m.pos_enc = PositionalTableT<T>::sinusoidal(config.max_length, d);
    m.pos_dec = m.pos_enc;
  }

  // Encoder.
  if (config.uses_transformer_encoder()) {
    for (int64_t l = 0; l < L; ++l)
      m.enc_blocks.push_back(reg.block("enc.l" + std::to_string(l), d, false));
    if (config.norm == NormPlacement::pre) m.enc_final_ln = reg.layer_norm("enc.final_ln", d);
  } else if (config.family == Family::cnn) {
    for (int64_t l = 0; l < L; ++l)
      m.enc_conv.push_back(reg.conv("enc.l" + std::to_string(l) + ".conv", config.kernel, d));
  } else {  // rnn
    m.enc_fwd0 = reg.rnn_cell("enc.l0.fwd", config.rnn_cell, d);
    m.enc_bwd0 = reg.rnn_cell("enc.l0.bwd", config.rnn_cell, d);
    m.enc_bi_w = reg.matrix("enc.l0.proj.w", 2 * d, d);
    m.enc_bi_b = reg.vector_zero("enc.l0.proj.b", d);
    for (int64_t l = 1; l < L; ++l)
      m.enc_rnn.push_back(reg.rnn_cell("enc.l" + std::to_string(l) + ".cell", config.rnn_cell, d));
  }

  // Decoder.
  if (config.family == Family::transformer) {
    for (int64_t l = 0; l < L; ++l)
      m.dec_blocks.push_back(reg.block("dec.l" + std::to_string(l), d, true));
    if (config.norm == NormPlacement::pre) m.dec_final_ln = reg.layer_norm("dec.final_ln", d);
  } else if (config.family == Family::cnn) {
    for (int64_t l = 0; l < L; ++l)
      m.dec_conv.push_back(reg.conv("dec.l" + std::to_string(l) + ".conv", config.kernel, d));
    m.bridge = reg.attention("bridge", d);
  } else {  // rnn or trans_rnn decoder
    for (int64_t l = 0; l < L; ++l)
      m.dec_rnn.push_back(reg.rnn_cell("dec.l" + std::to_string(l) + ".cell", config.rnn_cell, d));
    m.bridge = reg.attention("bridge", d);
  }

  m.out_w = reg.matrix("out.w", d, config.tgt_vocab);
  m.out_b = reg.vector_zero("out.b", config.tgt_vocab);
  return m;
}

inline Model build_model(const ModelConfig& config, uint64_t seed) {
  return build_model_t<float>(config, seed);
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// train=true enables dropout, with all masks derived from dropout_seed.
struct RunMode {
  bool train = false;
  uint64_t dropout_seed = 0;
};

template <typename T>
TensorT<T> encode(const ModelT<T>& m, const std::vector<int>& source, RunMode mode = {}) {
  if (static_cast<int64_t>(source.size()) > m.config.max_length)
    throw length_error("source length " + std::to_string(source.size()) + " exceeds max_length " +
                       std::to_string(m.config.max_length));
  DropoutPlan plan{mode.train, mix_seed(mode.dropout_seed, fnv1a64("encoder"))};
  const PositionalTableT<T>* pos = m.pos_enc.mode == PosMode::none ? nullptr : &m.pos_enc;
  TensorT<T> x = embed_with_positions(source, m.src_embed, pos);
  x = plan.apply(x, m.config.dropout_embed);
  if (m.config.uses_transformer_encoder()) {
    for (const auto& block : m.enc_blocks)
      x = transformer_block(x, block, m.config.heads, nullptr, static_cast<const TensorT<T>*>(nullptr),
                            m.config.norm, &plan, m.config.dropout_block);
    if (m.config.norm == NormPlacement::pre) x = layer_norm(x, m.enc_final_ln);
  } else if (m.config.family == Family::cnn) {
    for (const auto& conv : m.enc_conv)
      x = conv_glu_layer(x, conv, m.config.kernel, false, &plan, m.config.dropout_block);
  } else {
    TensorT<T> fwd = rnn_layer(x, m.enc_fwd0, false, false);
    TensorT<T> bwd = rnn_layer(x, m.enc_bwd0, true, false);
    x = add_bias(matmul(concat_cols(fwd, bwd), m.enc_bi_w), m.enc_bi_b);
    for (const auto& cell : m.enc_rnn)
      x = rnn_layer(x, cell, false, true, static_cast<const TensorT<T>*>(nullptr), &plan, m.config.dropout_block);
  }
  return x;
}

// Teacher-forced decoder pass over an already-encoded source. `target` is
// the sequence to be predicted (callers append EOS for training/scoring);
// the decoder consumes BOS + target[:-1] and returns |target| x V logits.
template <typename T>
TensorT<T> decode_teacher_forced(const ModelT<T>& m, const TensorT<T>& encoder_states,
                                 const std::vector<int>& target, RunMode mode = {}) {
  if (target.empty()) throw contract_error("decode: empty target");
  const int64_t n = static_cast<int64_t>(target.size());
  if (n > m.config.max_length)
    throw length_error("target length " + std::to_string(n) + " exceeds max_length " +
                       std::to_string(m.config.max_length));
  std::vector<int> input(target.size());
  input[0] = kBosId;
  std::copy(target.begin(), target.end() - 1, input.begin() + 1);

  DropoutPlan plan{mode.train, mix_seed(mode.dropout_seed, fnv1a64("decoder"))};
  const bool rnn_dec = m.config.uses_rnn_decoder();
  const PositionalTableT<T>* pos =
      (rnn_dec || m.pos_dec.mode == PosMode::none) ? nullptr : &m.pos_dec;
  TensorT<T> x = embed_with_positions(input, m.tgt_embed, pos);
  x = plan.apply(x, m.config.dropout_embed);

  if (m.config.family == Family::transformer) {
    const AttnMask mask = causal_mask(n);
    for (const auto& block : m.dec_blocks)
      x = transformer_block(x, block, m.config.heads, &mask, &encoder_states, m.config.norm, &plan,
                            m.config.dropout_block);
    if (m.config.norm == NormPlacement::pre) x = layer_norm(x, m.dec_final_ln);
  } else if (m.config.family == Family::cnn) {
    for (const auto& conv : m.dec_conv)
      x = conv_glu_layer(x, conv, m.config.kernel, true, &plan, m.config.dropout_block);
    TensorT<T> context = multi_head_attention(x, encoder_states, encoder_states, 1, *m.bridge);
    x = add(x, plan.apply(context, m.config.dropout_block));
  } else {
    // Recurrent decoder; initial state is the mean of the encoder states.
    TensorT<T> init = mean_rows(encoder_states);
    x = rnn_layer(x, m.dec_rnn[0], false, false, &init);
    for (size_t l = 1; l < m.dec_rnn.size(); ++l)
      x = rnn_layer(x, m.dec_rnn[l], false, true, static_cast<const TensorT<T>*>(nullptr), &plan, m.config.dropout_block);
    TensorT<T> context = multi_head_attention(x, encoder_states, encoder_states, 1, *m.bridge);
    x = add(x, plan.apply(context, m.config.dropout_block));
  }
  return add_bias(matmul(x, m.out_w), m.out_b);
}

template <typename T>
TensorT<T> forward_teacher_forced(const ModelT<T>& m, const std::vector<int>& source,
                                  const std::vector<int>& target, RunMode mode = {}) {
  return decode_teacher_forced(m, encode(m, source, mode), target, mode);
}

// ---------------------------------------------------------------------------
// Path-length / receptive-field arithmetic
// ---------------------------------------------------------------------------

// Largest context a stacked convolution can see: L * (k - 1) tokens.
inline int64_t receptive_field(int64_t layers, int64_t kernel) {
  if (kernel < 2) throw config_error("receptive_field: kernel must be >= 2");
  if (layers < 1) throw config_error("receptive_field: layers must be >= 1");
  return layers * (kernel - 1);
}

// Network hops between positions at distance n: ceil(n / (k-1)) for a
// convolution of kernel k.
inline int64_t conv_path_length(int64_t distance, int64_t kernel) {
  if (kernel < 2) throw config_error("conv_path_length: kernel must be >= 2");
  if (distance < 0) throw contract_error("conv_path_length: negative distance");
  return (distance + kernel - 2) / (kernel - 1);
}

// Family dispatch: n hops for recurrence, ceil(n/(k-1)) for convolution,
// one hop for self-attention.
inline int64_t path_length(Family family, int64_t distance, int64_t kernel) {
  if (distance < 0) throw contract_error("path_length: negative distance");
  switch (family) {
    case Family::rnn: return distance;
    case Family::cnn: return conv_path_length(distance, kernel);
    default: return distance >= 1 ? 1 : 0;
  }
}

}  // namespace contraseq
