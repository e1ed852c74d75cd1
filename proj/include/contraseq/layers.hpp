#pragma once

// The building blocks shared by all model families: embeddings with
// positions, recurrent cells, convolution + GLU, multi-head attention,
// layer normalization and transformer blocks. Every function here is a pure
// map from (parameters, inputs) to outputs; parameters are plain tensors
// owned by the model.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "contraseq/errors.hpp"
#include "contraseq/rng.hpp"
#include "contraseq/tensor.hpp"

namespace contraseq {

inline constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

// Inverted dropout: kept activations are scaled by 1/(1-rate) at train time
// so evaluation needs no rescaling. The mask is derived from an explicit
// seed, which makes forward passes reproducible for any execution order.
template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double rate, uint64_t seed) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0)
    throw config_error("dropout rate must be in [0,1), got " + std::to_string(rate));
  RngStream rng(seed, "dropout.mask");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<uint8_t> mask(static_cast<size_t>(x.numel()));
  std::vector<T> out(x.data());
  for (size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng.next_double() >= rate;
    out[i] = mask[i] ? out[i] * keep_scale : T(0);
  }
  return TensorT<T>::make_op(x.shape(), std::move(out), {x},
                             [mask, keep_scale](TensorNode<T>& self) {
                               auto& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               p.ensure_grad();
                               for (size_t i = 0; i < mask.size(); ++i)
                                 if (mask[i]) p.grad[i] += self.grad[i] * keep_scale;
                             });
}

// Per-forward dropout bookkeeping. Each dropout site consumes one sub-seed,
// so a forward pass is a pure function of (inputs, seed, train flag).
struct DropoutPlan {
  bool train = false;
  uint64_t seed = 0;
  mutable uint64_t site = 0;

  template <typename T>
  TensorT<T> apply(const TensorT<T>& x, double rate) const {
    if (!train || rate <= 0.0) return x;
    return dropout(x, rate, mix_seed(seed, site++));
  }
};

// ---------------------------------------------------------------------------
// Embeddings and positions
// ---------------------------------------------------------------------------

enum class PosMode { none, learned, sinusoidal };

template <typename T>
struct PositionalTableT {
  PosMode mode = PosMode::none;
  TensorT<T> table;  // [max_length x d]; trainable iff mode == learned

  static PositionalTableT sinusoidal(int64_t max_length, int64_t d) {
    std::vector<T> data(static_cast<size_t>(max_length * d));
    for (int64_t pos = 0; pos < max_length; ++pos) {
      for (int64_t c = 0; c < d; ++c) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(c / 2) / static_cast<double>(d));
        const double angle = static_cast<double>(pos) * freq;
        data[pos * d + c] = static_cast<T>((c % 2 == 0) ? std::sin(angle) : std::cos(angle));
      }
    }
    PositionalTableT t;
    t.mode = PosMode::sinusoidal;
    t.table = TensorT<T>({max_length, d}, std::move(data), false);
    return t;
  }

  static PositionalTableT learned(int64_t max_length, int64_t d, RngStream& rng) {
    PositionalTableT t;
    t.mode = PosMode::learned;
    t.table = TensorT<T>::zeros({max_length, d}, true);
    xavier_fill(t.table, rng);
    return t;
  }
};

// Row i = E[tokens[i]] (+ P[i] when a positional table is given).
template <typename T>
TensorT<T> embed_with_positions(const std::vector<int>& tokens, const TensorT<T>& table,
                                const PositionalTableT<T>* pos) {
  TensorT<T> e = gather_rows(table, tokens);
  if (!pos || pos->mode == PosMode::none) return e;
  if (static_cast<int64_t>(tokens.size()) > pos->table.dim(0))
    throw length_error("sequence length " + std::to_string(tokens.size()) +
                       " exceeds positional table of " + std::to_string(pos->table.dim(0)));
  return add(e, slice_rows(pos->table, 0, static_cast<int64_t>(tokens.size())));
}

// ---------------------------------------------------------------------------
// Recurrent cells and layers
// ---------------------------------------------------------------------------

enum class RnnCellKind { lstm, gru };

// LSTM: wx [d x 4d], wh [d x 4d], bx [4d]; gate column blocks are [i f g o].
// GRU: wx [d x 3d], wh [d x 3d], bx [3d], bh [3d]; blocks are [r z n].
template <typename T>
struct RnnCellParams {
  RnnCellKind kind = RnnCellKind::lstm;
  TensorT<T> wx, wh, bx, bh;
};

template <typename T>
struct RnnState {
  TensorT<T> h, c;  // each [1 x d]
};

template <typename T>
RnnState<T> lstm_cell(const TensorT<T>& x, const TensorT<T>& h, const TensorT<T>& c,
                      const RnnCellParams<T>& p) {
  const int64_t d = x.dim(1);
  TensorT<T> gates = add_bias(add(matmul(x, p.wx), matmul(h, p.wh)), p.bx);
  TensorT<T> i = sigmoid(slice_cols(gates, 0, d));
  TensorT<T> f = sigmoid(slice_cols(gates, d, 2 * d));
  TensorT<T> g = tanh(slice_cols(gates, 2 * d, 3 * d));
  TensorT<T> o = sigmoid(slice_cols(gates, 3 * d, 4 * d));
  TensorT<T> c_next = add(mul(f, c), mul(i, g));
  TensorT<T> h_next = mul(o, tanh(c_next));
  return {h_next, c_next};
}

template <typename T>
RnnState<T> gru_cell(const TensorT<T>& x, const TensorT<T>& h, const RnnCellParams<T>& p) {
  const int64_t d = x.dim(1);
  TensorT<T> xa = add_bias(matmul(x, p.wx), p.bx);
  TensorT<T> ha = add_bias(matmul(h, p.wh), p.bh);
  TensorT<T> r = sigmoid(add(slice_cols(xa, 0, d), slice_cols(ha, 0, d)));
  TensorT<T> z = sigmoid(add(slice_cols(xa, d, 2 * d), slice_cols(ha, d, 2 * d)));
  TensorT<T> n = tanh(add(slice_cols(xa, 2 * d, 3 * d), mul(r, slice_cols(ha, 2 * d, 3 * d))));
  // h' = n + z * (h - n)
  TensorT<T> h_next = add(n, mul(z, add(h, scale(n, T(-1)))));
  return {h_next, h_next};
}

template <typename T>
RnnState<T> rnn_cell(const TensorT<T>& x, const RnnState<T>& s, const RnnCellParams<T>& p) {
  return p.kind == RnnCellKind::lstm ? lstm_cell(x, s.h, s.c, p) : gru_cell(x, s.h, p);
}

// Threads a recurrent cell along the sequence. With `residual` each output
// is input + cell output (the layer-l form); without it the raw recurrence
// (the layer-0 form). `init` seeds the hidden state when given.
template <typename T>
TensorT<T> rnn_layer(const TensorT<T>& seq, const RnnCellParams<T>& p, bool reverse, bool residual,
                     const TensorT<T>* init = nullptr, const DropoutPlan* drop = nullptr,
                     double drop_rate = 0.0) {
  const int64_t n = seq.dim(0), d = seq.dim(1);
  RnnState<T> state{init ? *init : TensorT<T>::zeros({1, d}), TensorT<T>::zeros({1, d})};
  std::vector<TensorT<T>> outputs(static_cast<size_t>(n));
  for (int64_t step = 0; step < n; ++step) {
    const int64_t t = reverse ? n - 1 - step : step;
    TensorT<T> x = slice_rows(seq, t, t + 1);
    state = rnn_cell(x, state, p);
    TensorT<T> branch = state.h;
    if (residual) {
      if (drop) branch = drop->apply(branch, drop_rate);
      branch = add(x, branch);
    }
    outputs[static_cast<size_t>(t)] = branch;
  }
  return concat_rows(outputs);
}

// ---------------------------------------------------------------------------
// Convolution + GLU
// ---------------------------------------------------------------------------

// w: [k*d x 2d] (first d output channels are the linear part, last d the
// gate), b: [2d].
template <typename T>
struct ConvGluParams {
  TensorT<T> w, b;
};

// Residual convolution layer: out_i = in_i + GLU(W . window_i + b).
// Encoder windows are symmetric (k odd); causal windows look back k-1 steps.
template <typename T>
TensorT<T> conv_glu_layer(const TensorT<T>& seq, const ConvGluParams<T>& p, int64_t k, bool causal,
                          const DropoutPlan* drop = nullptr, double drop_rate = 0.0) {
  if (k < 1) throw config_error("conv kernel size must be >= 1, got " + std::to_string(k));
  if (!causal && k % 2 == 0)
    throw config_error("encoder conv kernel must be odd, got " + std::to_string(k));
  const int64_t d = seq.dim(1);
  TensorT<T> windows = unfold_1d(seq, k, causal);
  TensorT<T> z = add_bias(matmul(windows, p.w), p.b);
  TensorT<T> linear = slice_cols(z, 0, d);
  TensorT<T> gate = slice_cols(z, d, 2 * d);
  TensorT<T> glu = mul(linear, sigmoid(gate));
  if (drop) glu = drop->apply(glu, drop_rate);
  return add(seq, glu);
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionParams {
  TensorT<T> wq, wk, wv, wo;  // each [d x d]
  TensorT<T> bq, bk, bv, bo;  // each [d]
};

// Row-major [n_q x n_k] mask; nonzero = allow.
using AttnMask = std::vector<uint8_t>;

inline AttnMask causal_mask(int64_t n) {
  AttnMask m(static_cast<size_t>(n * n), 0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j <= i; ++j) m[i * n + j] = 1;
  return m;
}

// Scaled dot-product attention with H heads over subspaces of size d/H,
// concatenated and output-projected. Forbidden positions receive -inf before
// the softmax, which makes their weights and gradients exactly zero.
template <typename T>
TensorT<T> multi_head_attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                int64_t heads, const AttentionParams<T>& p,
                                const AttnMask* mask = nullptr) {
  const int64_t d = q.dim(1);
  const int64_t n_q = q.dim(0), n_k = k.dim(0);
  if (heads < 1 || d % heads != 0)
    throw config_error("attention: model size " + std::to_string(d) +
                       " not divisible by head count " + std::to_string(heads));
  if (k.dim(0) != v.dim(0))
    throw shape_error("attention: key rows " + std::to_string(k.dim(0)) + " != value rows " +
                      std::to_string(v.dim(0)));
  if (mask) {
    if (static_cast<int64_t>(mask->size()) != n_q * n_k)
      throw shape_error("attention: mask size does not match n_q x n_k");
    for (int64_t i = 0; i < n_q; ++i) {
      bool any = false;
      for (int64_t j = 0; j < n_k && !any; ++j) any = (*mask)[i * n_k + j] != 0;
      if (!any)
        throw contract_error("attention: query row " + std::to_string(i) + " is fully masked");
    }
  }
  const int64_t dh = d / heads;
  const T scaling = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  TensorT<T> qp = add_bias(matmul(q, p.wq), p.bq);
  TensorT<T> kp = add_bias(matmul(k, p.wk), p.bk);
  TensorT<T> vp = add_bias(matmul(v, p.wv), p.bv);
  std::vector<TensorT<T>> head_outputs;
  head_outputs.reserve(static_cast<size_t>(heads));
  for (int64_t h = 0; h < heads; ++h) {
    TensorT<T> qh = slice_cols(qp, h * dh, (h + 1) * dh);
    TensorT<T> kh = slice_cols(kp, h * dh, (h + 1) * dh);
    TensorT<T> vh = slice_cols(vp, h * dh, (h + 1) * dh);
    TensorT<T> scores = scale(matmul(qh, transpose(kh)), scaling);
    if (mask) scores = masked_fill(scores, *mask, -std::numeric_limits<T>::infinity());
    TensorT<T> weights = softmax(scores, 1);
    head_outputs.push_back(matmul(weights, vh));
  }
  TensorT<T> merged = heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
  return add_bias(matmul(merged, p.wo), p.bo);
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormParams {
  TensorT<T> gain, bias;  // each [d]
};

// Normalizes the trailing axis: (x - mean) / sqrt(var + eps) * gain + bias.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias) {
  const int64_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw shape_error("layer_norm: gain/bias must have size " + std::to_string(d));
  const int64_t rows = x.numel() / d;
  std::vector<T> out(static_cast<size_t>(x.numel()));
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  std::vector<T> inv_std(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * d;
    T mean = 0;
    for (int64_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<T>(d);
    T var = 0;
    for (int64_t c = 0; c < d; ++c) {
      const T delta = row[c] - mean;
      var += delta * delta;
    }
    var /= static_cast<T>(d);
    const T istd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    inv_std[r] = istd;
    for (int64_t c = 0; c < d; ++c) {
      const T norm = (row[c] - mean) * istd;
      xhat[r * d + c] = norm;
      out[r * d + c] = norm * gain.data()[c] + bias.data()[c];
    }
  }
  return TensorT<T>::make_op(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& g = self.parents[1]->value;
        if (px.requires_grad) {
          px.ensure_grad();
          for (int64_t r = 0; r < rows; ++r) {
            T sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (int64_t c = 0; c < d; ++c) {
              const T dxhat = self.grad[r * d + c] * g[c];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat[r * d + c];
            }
            const T inv_d = T(1) / static_cast<T>(d);
            for (int64_t c = 0; c < d; ++c) {
              const T dxhat = self.grad[r * d + c] * g[c];
              px.grad[r * d + c] += inv_std[r] * (dxhat - inv_d * sum_dxhat -
                                                  xhat[r * d + c] * inv_d * sum_dxhat_xhat);
            }
          }
        }
        if (pg.requires_grad) {
          pg.ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < d; ++c)
              pg.grad[c] += self.grad[r * d + c] * xhat[r * d + c];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < d; ++c) pb.grad[c] += self.grad[r * d + c];
        }
      });
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const LayerNormParams<T>& p) {
  return layer_norm(x, p.gain, p.bias);
}

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

enum class NormPlacement { post, pre };

template <typename T>
struct FfnParams {
  TensorT<T> w1, b1, w2, b2;  // w1 [d x 4d], w2 [4d x d]
};

template <typename T>
TensorT<T> feed_forward(const TensorT<T>& x, const FfnParams<T>& p) {
  return add_bias(matmul(relu(add_bias(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

template <typename T>
struct TransformerBlockParams {
  AttentionParams<T> self_attn;
  LayerNormParams<T> ln_self;
  std::optional<AttentionParams<T>> cross_attn;
  LayerNormParams<T> ln_cross;  // used only when cross_attn is present
  FfnParams<T> ffn;
  LayerNormParams<T> ln_ffn;
};

// One encoder/decoder block. Post-norm (the default) applies layer norm
// after each residual add; pre-norm normalizes the branch input instead.
// Decoder blocks pass a causal mask and, when `cross` is given, attend over
// the encoder states between self-attention and the feed-forward.
template <typename T>
TensorT<T> transformer_block(const TensorT<T>& seq, const TransformerBlockParams<T>& p,
                             int64_t heads, const AttnMask* mask, const TensorT<T>* cross,
                             NormPlacement norm = NormPlacement::post,
                             const DropoutPlan* drop = nullptr, double drop_rate = 0.0) {
  auto branch_drop = [&](TensorT<T> t) { return drop ? drop->apply(t, drop_rate) : t; };
  TensorT<T> x = seq;
  if (norm == NormPlacement::post) {
    x = layer_norm(add(x, branch_drop(multi_head_attention(x, x, x, heads, p.self_attn, mask))),
                   p.ln_self);
    if (cross) {
      if (!p.cross_attn) throw contract_error("transformer_block: missing cross-attention params");
      x = layer_norm(
          add(x, branch_drop(multi_head_attention(x, *cross, *cross, heads, *p.cross_attn))),
          p.ln_cross);
    }
    x = layer_norm(add(x, branch_drop(feed_forward(x, p.ffn))), p.ln_ffn);
  } else {
    TensorT<T> n1 = layer_norm(x, p.ln_self);
    x = add(x, branch_drop(multi_head_attention(n1, n1, n1, heads, p.self_attn, mask)));
    if (cross) {
      if (!p.cross_attn) throw contract_error("transformer_block: missing cross-attention params");
      TensorT<T> n2 = layer_norm(x, p.ln_cross);
      x = add(x, branch_drop(multi_head_attention(n2, *cross, *cross, heads, *p.cross_attn)));
    }
    x = add(x, branch_drop(feed_forward(layer_norm(x, p.ln_ffn), p.ffn)));
  }
  return x;
}

}  // namespace contraseq
