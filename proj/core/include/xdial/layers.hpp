#pragma once

#include "xdial/autograd.hpp"

// Parameterized building blocks. All forward functions are pure given
// parameters and inputs; parameters are read-shared during inference and
// owned exclusively by the trainer during updates.

namespace xdial {

/// Optional inverted-dropout context threaded through the blocks by training.
struct DropoutCtx {
  double rate = 0.0;
  Rng* rng = nullptr;
  bool active() const { return rate > 0.0 && rng != nullptr; }
};

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const DropoutCtx* ctx) {
  if (!ctx || !ctx->active()) return x;
  return dropout(x, ctx->rate, *ctx->rng);
}

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) matrix init.
template <typename T>
Tensor<T> init_matrix(std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor<T>::uniform({fan_in, fan_out}, rng, -bound, bound);
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

template <typename T>
struct EmbeddingTable {
  Tensor<T> table;  // [V, d]

  static EmbeddingTable init(std::int64_t vocab, std::int64_t d, Rng& rng) {
    return {Tensor<T>::normal({vocab, d}, rng, 0.0, 0.02)};
  }
  std::int64_t vocab_size() const { return table.dim(0); }
  std::int64_t width() const { return table.dim(1); }
};

template <typename T>
Tensor<T> embed_lookup(const EmbeddingTable<T>& e, const IdTensor& ids) {
  return embed_lookup(e.table, ids);
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

/// Gated recurrent unit without bias terms by default: the update gate mixes
/// the previous state with a reset-gated candidate.
template <typename T>
struct GruParams {
  Tensor<T> w_update, w_reset, w_cand;  // [d_in, d]
  Tensor<T> u_update, u_reset, u_cand;  // [d, d]
  Tensor<T> b_update, b_reset, b_cand;  // [d], present when use_bias
  bool use_bias = false;

  static GruParams init(std::int64_t d_in, std::int64_t d, Rng& rng, bool bias = false) {
    GruParams p;
    p.w_update = init_matrix<T>(d_in, d, rng);
    p.w_reset = init_matrix<T>(d_in, d, rng);
    p.w_cand = init_matrix<T>(d_in, d, rng);
    p.u_update = init_matrix<T>(d, d, rng);
    p.u_reset = init_matrix<T>(d, d, rng);
    p.u_cand = init_matrix<T>(d, d, rng);
    p.use_bias = bias;
    if (bias) {
      p.b_update = Tensor<T>::zeros({d});
      p.b_reset = Tensor<T>::zeros({d});
      p.b_cand = Tensor<T>::zeros({d});
    }
    return p;
  }

  std::int64_t input_dim() const { return w_update.dim(0); }
  std::int64_t hidden_dim() const { return w_update.dim(1); }
};

template <typename T>
Tensor<T> gru_step(const GruParams<T>& p, const Tensor<T>& x_t, const Tensor<T>& h_prev) {
  if (x_t.dim(-1) != p.input_dim() || h_prev.dim(-1) != p.hidden_dim())
    throw DimError("gru_step: got x " + shape_str(x_t.shape()) + ", h " +
                   shape_str(h_prev.shape()) + " for params [" + std::to_string(p.input_dim()) +
                   "->" + std::to_string(p.hidden_dim()) + "]");
  auto gate = [&](const Tensor<T>& w, const Tensor<T>& u, const Tensor<T>& b) {
    auto s = add(matmul(x_t, w), matmul(h_prev, u));
    return p.use_bias ? add(s, b) : s;
  };
  auto z = sigmoid(gate(p.w_update, p.u_update, p.b_update));
  auto r = sigmoid(gate(p.w_reset, p.u_reset, p.b_reset));
  auto cand_in = add(matmul(x_t, p.w_cand), matmul(mul(r, h_prev), p.u_cand));
  auto cand = tanh(p.use_bias ? add(cand_in, p.b_cand) : cand_in);
  auto keep = sub(Tensor<T>::ones(z.shape()), z);
  return add(mul(keep, h_prev), mul(z, cand));
}

/// Runs the GRU over [B, L, d_in] and returns the hidden state at each
/// sequence's true final step. Steps at or past lengths[b] leave row b
/// untouched, so trailing padding cannot influence the result.
template <typename T>
Tensor<T> gru_encode(const GruParams<T>& p, const Tensor<T>& xs,
                     const std::vector<std::int64_t>& lengths) {
  if (xs.rank() != 3) throw DimError("gru_encode: want [B,L,d_in], got " + shape_str(xs.shape()));
  const std::int64_t batch = xs.dim(0), steps = xs.dim(1);
  if (static_cast<std::int64_t>(lengths.size()) != batch)
    throw DimError("gru_encode: lengths size " + std::to_string(lengths.size()) + " != batch " +
                   std::to_string(batch));
  std::int64_t max_len = 0;
  for (auto len : lengths) {
    if (len > steps)
      throw DimError("gru_encode: length " + std::to_string(len) + " exceeds padded steps " +
                     std::to_string(steps));
    if (len == 0) diag::warn("gru.zero_length", "gru_encode: zero-length sequence yields zeros");
    max_len = std::max(max_len, len);
  }
  Tensor<T> h = Tensor<T>::zeros({batch, p.hidden_dim()});
  for (std::int64_t t = 0; t < max_len; ++t) {
    auto x_t = reshape(narrow(xs, 1, t, 1), {batch, xs.dim(2)});
    auto h_next = gru_step(p, x_t, h);
    bool all_active = true;
    for (auto len : lengths) all_active = all_active && t < len;
    if (all_active) {
      h = h_next;
    } else {
      Tensor<T> active({batch, 1});
      auto am = active.mutable_data();
      for (std::int64_t b = 0; b < batch; ++b) am[static_cast<std::size_t>(b)] = t < lengths[static_cast<std::size_t>(b)] ? T(1) : T(0);
      Tensor<T> frozen({batch, 1});
      auto fm = frozen.mutable_data();
      for (std::int64_t b = 0; b < batch; ++b) fm[static_cast<std::size_t>(b)] = T(1) - am[static_cast<std::size_t>(b)];
      h = add(mul(active, h_next), mul(frozen, h));
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Softmax(Q K^T / sqrt(dk)) V with an optional blocking mask (true = the key
/// position may not be attended). A query row whose keys are all blocked
/// yields a zero output row instead of NaN; the condition is counted under
/// "attention.fully_masked_row".
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const MaskTensor* mask = nullptr) {
  const std::int64_t dk = q.dim(-1);
  if (k.dim(-1) != dk)
    throw DimError("attention: query/key width mismatch " + shape_str(q.shape()) + " vs " +
                   shape_str(k.shape()));
  if (k.dim(-2) != v.dim(-2))
    throw DimError("attention: key/value length mismatch " + shape_str(k.shape()) + " vs " +
                   shape_str(v.shape()));
  auto scores = scale(matmul(q, transpose_last2(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
  if (mask) {
    scores = masked_fill(scores, *mask, T(-1e9));
  }
  auto weights = softmax_lastdim(scores);
  if (mask) {
    // Zero out rows with no allowed key at all.
    const MaskTensor em = detail::expand_mask(*mask, scores.shape(), "attention");
    const std::int64_t lk = em.shape.back();
    const std::int64_t rows = em.numel() / lk;
    MaskTensor dead(Shape(em.shape.begin(), em.shape.end() - 1), false);
    bool any_dead = false;
    for (std::int64_t r2 = 0; r2 < rows; ++r2) {
      bool all_blocked = true;
      for (std::int64_t c = 0; c < lk && all_blocked; ++c)
        all_blocked = em.data[static_cast<std::size_t>(r2 * lk + c)] != 0;
      if (all_blocked) {
        dead.data[static_cast<std::size_t>(r2)] = 1;
        any_dead = true;
      }
    }
    if (any_dead) {
      diag::warn("attention.fully_masked_row",
                 "attention: fully masked query row, emitting zeros");
      Shape dead_shape = dead.shape;
      dead_shape.push_back(1);
      weights = masked_fill(weights, MaskTensor(dead_shape, std::move(dead.data)), T(0));
    }
  }
  return matmul(weights, v);
}

/// Multi-head attention: per-head projections to width d/H, scaled dot-product
/// attention per head with scale sqrt(d/H), concatenation, output map.
template <typename T>
struct MhaParams {
  std::vector<Tensor<T>> w_query, w_key, w_value;  // H x [d, d/H]
  Tensor<T> w_out;                                 // [d, d]

  static MhaParams init(std::int64_t d, int heads, Rng& rng) {
    if (heads <= 0 || d % heads != 0)
      throw ConfigError("multi_head_attention: heads must divide width, got d=" +
                        std::to_string(d) + ", H=" + std::to_string(heads));
    MhaParams p;
    const std::int64_t dh = d / heads;
    for (int i = 0; i < heads; ++i) {
      p.w_query.push_back(init_matrix<T>(d, dh, rng));
      p.w_key.push_back(init_matrix<T>(d, dh, rng));
      p.w_value.push_back(init_matrix<T>(d, dh, rng));
    }
    p.w_out = init_matrix<T>(d, d, rng);
    return p;
  }

  int heads() const { return static_cast<int>(w_query.size()); }
  std::int64_t width() const { return w_out.dim(0); }
};

template <typename T>
Tensor<T> multi_head_attention(const MhaParams<T>& p, const Tensor<T>& q_in,
                               const Tensor<T>& k_in, const Tensor<T>& v_in,
                               const MaskTensor* mask = nullptr) {
  std::vector<Tensor<T>> heads;
  heads.reserve(p.w_query.size());
  for (std::size_t i = 0; i < p.w_query.size(); ++i) {
    auto qi = matmul(q_in, p.w_query[i]);
    auto ki = matmul(k_in, p.w_key[i]);
    auto vi = matmul(v_in, p.w_value[i]);
    heads.push_back(scaled_dot_attention(qi, ki, vi, mask));
  }
  return matmul(concat_lastdim(heads), p.w_out);
}

// ---------------------------------------------------------------------------
// Transformer blocks (post-norm, ReLU feed-forward of width 4d)
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormParams {
  Tensor<T> gain, bias;
  static LayerNormParams init(std::int64_t d) {
    return {Tensor<T>::ones({d}), Tensor<T>::zeros({d})};
  }
};

template <typename T>
struct FeedForwardParams {
  Tensor<T> w1, b1, w2, b2;  // d -> d_ff -> d
  static FeedForwardParams init(std::int64_t d, std::int64_t d_ff, Rng& rng) {
    return {init_matrix<T>(d, d_ff, rng), Tensor<T>::zeros({d_ff}), init_matrix<T>(d_ff, d, rng),
            Tensor<T>::zeros({d})};
  }
};

template <typename T>
Tensor<T> feed_forward(const FeedForwardParams<T>& p, const Tensor<T>& x) {
  return add(matmul(relu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

template <typename T>
struct TransformerBlockParams {
  MhaParams<T> attn;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> ln_attn, ln_ffn;

  static TransformerBlockParams init(std::int64_t d, int heads, std::int64_t d_ff, Rng& rng) {
    return {MhaParams<T>::init(d, heads, rng), FeedForwardParams<T>::init(d, d_ff, rng),
            LayerNormParams<T>::init(d), LayerNormParams<T>::init(d)};
  }
};

/// out = LN(h + FFN(h)), h = LN(x + MHA(x, kv, kv, mask)).
template <typename T>
Tensor<T> transformer_block(const TransformerBlockParams<T>& p, const Tensor<T>& x,
                            const Tensor<T>& kv, const MaskTensor* mask = nullptr,
                            const DropoutCtx* drop = nullptr) {
  auto attn = maybe_dropout(multi_head_attention(p.attn, x, kv, kv, mask), drop);
  auto h = layer_norm(add(x, attn), p.ln_attn.gain, p.ln_attn.bias);
  auto ff = maybe_dropout(feed_forward(p.ffn, h), drop);
  return layer_norm(add(h, ff), p.ln_ffn.gain, p.ln_ffn.bias);
}

/// Decoder variant: causal self-attention over x, then cross-attention with
/// K,V from `kv`, then the feed-forward, each with residual + post-norm.
template <typename T>
struct DecoderBlockParams {
  MhaParams<T> self_attn, cross_attn;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> ln_self, ln_cross, ln_ffn;

  static DecoderBlockParams init(std::int64_t d, int heads, std::int64_t d_ff, Rng& rng) {
    return {MhaParams<T>::init(d, heads, rng), MhaParams<T>::init(d, heads, rng),
            FeedForwardParams<T>::init(d, d_ff, rng), LayerNormParams<T>::init(d),
            LayerNormParams<T>::init(d), LayerNormParams<T>::init(d)};
  }
};

template <typename T>
Tensor<T> decoder_block(const DecoderBlockParams<T>& p, const Tensor<T>& x, const Tensor<T>& kv,
                        const MaskTensor* self_mask, const MaskTensor* cross_mask,
                        const DropoutCtx* drop = nullptr) {
  auto self = maybe_dropout(multi_head_attention(p.self_attn, x, x, x, self_mask), drop);
  auto h1 = layer_norm(add(x, self), p.ln_self.gain, p.ln_self.bias);
  auto cross = maybe_dropout(multi_head_attention(p.cross_attn, h1, kv, kv, cross_mask), drop);
  auto h2 = layer_norm(add(h1, cross), p.ln_cross.gain, p.ln_cross.bias);
  auto ff = maybe_dropout(feed_forward(p.ffn, h2), drop);
  return layer_norm(add(h2, ff), p.ln_ffn.gain, p.ln_ffn.bias);
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

/// Fixed sinusoidal table [len, d]: even columns sin(pos/10000^(j/d)),
/// odd columns the matching cos.
template <typename T>
Tensor<T> sinusoidal_position_table(std::int64_t len, std::int64_t d) {
  Tensor<T> t({len, d});
  auto out = t.mutable_data();
  for (std::int64_t pos = 0; pos < len; ++pos)
    for (std::int64_t j = 0; j < d; ++j) {
      const double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(d);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      out[static_cast<std::size_t>(pos * d + j)] =
          static_cast<T>(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return t;
}

/// Adds the sinusoidal encoding for positions 0..L-1 to x [.., L, d].
template <typename T>
Tensor<T> positional_encode(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimError("positional_encode: want [.., L, d], got " + shape_str(x.shape()));
  return add(x, sinusoidal_position_table<T>(x.dim(-2), x.dim(-1)));
}

/// Causal mask [T, T]: true above the diagonal (future positions blocked).
inline MaskTensor causal_mask(std::int64_t t) {
  MaskTensor m({t, t}, false);
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t j = i + 1; j < t; ++j) m.data[static_cast<std::size_t>(i * t + j)] = 1;
  return m;
}

}  // namespace xdial
