#pragma once

#include "xdial/corpus.hpp"
#include "xdial/layers.hpp"

// The dialogue network: word-level GRU encoder over each context utterance,
// self-attention utterance-level encoder on top, and a decoder stack that is
// split into an intention part (cross-attending the context representations)
// and a generation part (cross-attending the per-utterance sentence
// representations). `decoder_mode` switches the split off for ablations.

namespace xdial {

enum class DecoderMode {
  kXFusion,      // intention layers read H_c, generation layers read H_u
  kContextOnly,  // every decoder layer reads H_c
  kSentenceOnly  // every decoder layer reads H_u
};

inline std::string to_string(DecoderMode m) {
  switch (m) {
    case DecoderMode::kXFusion: return "x_fusion";
    case DecoderMode::kContextOnly: return "context_only";
    case DecoderMode::kSentenceOnly: return "sentence_only";
  }
  return "?";
}

inline DecoderMode decoder_mode_from_string(const std::string& s) {
  if (s == "x_fusion") return DecoderMode::kXFusion;
  if (s == "context_only") return DecoderMode::kContextOnly;
  if (s == "sentence_only") return DecoderMode::kSentenceOnly;
  throw ConfigError("unknown decoder mode '" + s +
                    "' (expected x_fusion|context_only|sentence_only)");
}

struct ModelConfig {
  std::int64_t d = 512;
  int heads = 8;
  int enc_layers = 2;
  int dec_layers_intention = 2;
  int dec_layers_generation = 2;
  std::int64_t vocab_size = 13500;
  int max_turns = 10;
  std::int64_t max_sentence_len = 50;
  DecoderMode decoder_mode = DecoderMode::kXFusion;
  double dropout = 0.0;
  bool turn_pos = true;   // add sinusoidal turn positions to the utterance-encoder input
  bool token_pos = true;  // add sinusoidal token positions to the decoder input
  bool tie_output = false;
  bool gru_bias = false;

  std::int64_t d_ff() const { return 4 * d; }
  int dec_layers_total() const { return dec_layers_intention + dec_layers_generation; }

  void validate() const {
    if (d < 1) throw ConfigError("model: d must be positive");
    if (heads < 1 || d % heads != 0)
      throw ConfigError("model: heads must divide d, got d=" + std::to_string(d) +
                        ", heads=" + std::to_string(heads));
    if (enc_layers < 1) throw ConfigError("model: enc_layers must be >= 1");
    if (dec_layers_intention < 1 || dec_layers_generation < 1)
      throw ConfigError("model: decoder parts need at least one layer each");
    if (decoder_mode == DecoderMode::kXFusion &&
        dec_layers_intention != dec_layers_generation)
      throw ConfigError("model: x_fusion requires an even decoder split, got " +
                        std::to_string(dec_layers_intention) + "+" +
                        std::to_string(dec_layers_generation));
    if (vocab_size < 5) throw ConfigError("model: vocab_size must cover the specials");
    if (max_turns < 2) throw ConfigError("model: max_turns must be >= 2");
    if (max_sentence_len < 1) throw ConfigError("model: max_sentence_len must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0,1)");
  }
};

/// Named collection of every learnable tensor. std::map keeps iteration in
/// lexicographic path order, which the optimizer and checkpoints rely on.
template <typename T>
struct ParamSet {
  std::map<std::string, Tensor<T>> tensors;

  Tensor<T>& at(const std::string& path) {
    auto it = tensors.find(path);
    if (it == tensors.end()) throw ContractError("params: missing tensor '" + path + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& path) const {
    auto it = tensors.find(path);
    if (it == tensors.end()) throw ContractError("params: missing tensor '" + path + "'");
    return it->second;
  }
  void put(const std::string& path, Tensor<T>& t) {
    t.set_requires_grad(true);
    if (!tensors.emplace(path, t).second)
      throw ContractError("params: duplicate tensor '" + path + "'");
  }
  void zero_grads() {
    for (auto& [path, t] : tensors) t.zero_grad();
  }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& [path, t] : tensors) n += t.numel();
    return n;
  }
};

/// Typed views over a ParamSet; tensors share storage with the map entries.
template <typename T>
struct ModelParams {
  EmbeddingTable<T> embed;
  GruParams<T> gru;
  std::vector<TransformerBlockParams<T>> enc;
  std::vector<DecoderBlockParams<T>> dec;
  Tensor<T> out_w;  // absent when tie_output
  Tensor<T> out_b;
};

namespace model_detail {

template <typename T>
void register_mha(ParamSet<T>& ps, const std::string& prefix, MhaParams<T>& p) {
  for (std::size_t i = 0; i < p.w_query.size(); ++i) {
    ps.put(prefix + ".q." + std::to_string(i), p.w_query[i]);
    ps.put(prefix + ".k." + std::to_string(i), p.w_key[i]);
    ps.put(prefix + ".v." + std::to_string(i), p.w_value[i]);
  }
  ps.put(prefix + ".out", p.w_out);
}

template <typename T>
MhaParams<T> bind_mha(ParamSet<T>& ps, const std::string& prefix, int heads) {
  MhaParams<T> p;
  for (int i = 0; i < heads; ++i) {
    p.w_query.push_back(ps.at(prefix + ".q." + std::to_string(i)));
    p.w_key.push_back(ps.at(prefix + ".k." + std::to_string(i)));
    p.w_value.push_back(ps.at(prefix + ".v." + std::to_string(i)));
  }
  p.w_out = ps.at(prefix + ".out");
  return p;
}

template <typename T>
void register_ffn(ParamSet<T>& ps, const std::string& prefix, FeedForwardParams<T>& p) {
  ps.put(prefix + ".w1", p.w1);
  ps.put(prefix + ".b1", p.b1);
  ps.put(prefix + ".w2", p.w2);
  ps.put(prefix + ".b2", p.b2);
}

template <typename T>
FeedForwardParams<T> bind_ffn(ParamSet<T>& ps, const std::string& prefix) {
  return {ps.at(prefix + ".w1"), ps.at(prefix + ".b1"), ps.at(prefix + ".w2"),
          ps.at(prefix + ".b2")};
}

template <typename T>
void register_ln(ParamSet<T>& ps, const std::string& prefix, LayerNormParams<T>& p) {
  ps.put(prefix + ".gain", p.gain);
  ps.put(prefix + ".bias", p.bias);
}

template <typename T>
LayerNormParams<T> bind_ln(ParamSet<T>& ps, const std::string& prefix) {
  return {ps.at(prefix + ".gain"), ps.at(prefix + ".bias")};
}

}  // namespace model_detail

/// Fresh parameters, deterministically initialized from the seed.
template <typename T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet<T> ps;

  auto embed = EmbeddingTable<T>::init(cfg.vocab_size, cfg.d, rng);
  ps.put("embed.table", embed.table);

  auto gru = GruParams<T>::init(cfg.d, cfg.d, rng, cfg.gru_bias);
  ps.put("gru.w_update", gru.w_update);
  ps.put("gru.w_reset", gru.w_reset);
  ps.put("gru.w_cand", gru.w_cand);
  ps.put("gru.u_update", gru.u_update);
  ps.put("gru.u_reset", gru.u_reset);
  ps.put("gru.u_cand", gru.u_cand);
  if (cfg.gru_bias) {
    ps.put("gru.b_update", gru.b_update);
    ps.put("gru.b_reset", gru.b_reset);
    ps.put("gru.b_cand", gru.b_cand);
  }

  for (int i = 0; i < cfg.enc_layers; ++i) {
    const std::string prefix = "enc." + std::to_string(i);
    auto block = TransformerBlockParams<T>::init(cfg.d, cfg.heads, cfg.d_ff(), rng);
    model_detail::register_mha(ps, prefix + ".attn", block.attn);
    model_detail::register_ffn(ps, prefix + ".ffn", block.ffn);
    model_detail::register_ln(ps, prefix + ".ln_attn", block.ln_attn);
    model_detail::register_ln(ps, prefix + ".ln_ffn", block.ln_ffn);
  }

  for (int i = 0; i < cfg.dec_layers_total(); ++i) {
    const std::string prefix = "dec." + std::to_string(i);
    auto block = DecoderBlockParams<T>::init(cfg.d, cfg.heads, cfg.d_ff(), rng);
    model_detail::register_mha(ps, prefix + ".self", block.self_attn);
    model_detail::register_mha(ps, prefix + ".cross", block.cross_attn);
    model_detail::register_ffn(ps, prefix + ".ffn", block.ffn);
    model_detail::register_ln(ps, prefix + ".ln_self", block.ln_self);
    model_detail::register_ln(ps, prefix + ".ln_cross", block.ln_cross);
    model_detail::register_ln(ps, prefix + ".ln_ffn", block.ln_ffn);
  }

  if (!cfg.tie_output) {
    auto out_w = init_matrix<T>(cfg.d, cfg.vocab_size, rng);
    ps.put("out.w", out_w);
  }
  auto out_b = Tensor<T>::zeros({cfg.vocab_size});
  ps.put("out.b", out_b);
  return ps;
}

/// Typed views into `ps` (validates presence and shapes against `cfg`).
template <typename T>
ModelParams<T> bind_params(const ModelConfig& cfg, ParamSet<T>& ps) {
  cfg.validate();
  ModelParams<T> mp;
  mp.embed.table = ps.at("embed.table");
  if (mp.embed.table.shape() != Shape{cfg.vocab_size, cfg.d})
    throw ContractError("params: embed.table shape " + shape_str(mp.embed.table.shape()) +
                        " does not match config");
  mp.gru.w_update = ps.at("gru.w_update");
  mp.gru.w_reset = ps.at("gru.w_reset");
  mp.gru.w_cand = ps.at("gru.w_cand");
  mp.gru.u_update = ps.at("gru.u_update");
  mp.gru.u_reset = ps.at("gru.u_reset");
  mp.gru.u_cand = ps.at("gru.u_cand");
  mp.gru.use_bias = cfg.gru_bias;
  if (cfg.gru_bias) {
    mp.gru.b_update = ps.at("gru.b_update");
    mp.gru.b_reset = ps.at("gru.b_reset");
    mp.gru.b_cand = ps.at("gru.b_cand");
  }
  for (int i = 0; i < cfg.enc_layers; ++i) {
    const std::string prefix = "enc." + std::to_string(i);
    TransformerBlockParams<T> block;
    block.attn = model_detail::bind_mha(ps, prefix + ".attn", cfg.heads);
    block.ffn = model_detail::bind_ffn(ps, prefix + ".ffn");
    block.ln_attn = model_detail::bind_ln(ps, prefix + ".ln_attn");
    block.ln_ffn = model_detail::bind_ln(ps, prefix + ".ln_ffn");
    mp.enc.push_back(std::move(block));
  }
  for (int i = 0; i < cfg.dec_layers_total(); ++i) {
    const std::string prefix = "dec." + std::to_string(i);
    DecoderBlockParams<T> block;
    block.self_attn = model_detail::bind_mha(ps, prefix + ".self", cfg.heads);
    block.cross_attn = model_detail::bind_mha(ps, prefix + ".cross", cfg.heads);
    block.ffn = model_detail::bind_ffn(ps, prefix + ".ffn");
    block.ln_self = model_detail::bind_ln(ps, prefix + ".ln_self");
    block.ln_cross = model_detail::bind_ln(ps, prefix + ".ln_cross");
    block.ln_ffn = model_detail::bind_ln(ps, prefix + ".ln_ffn");
    mp.dec.push_back(std::move(block));
  }
  if (!cfg.tie_output) mp.out_w = ps.at("out.w");
  mp.out_b = ps.at("out.b");
  return mp;
}

/// Owning bundle: configuration, parameter map, typed views.
template <typename T>
struct Model {
  ModelConfig config;
  ParamSet<T> params;
  ModelParams<T> bound;

  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    Model m;
    m.config = cfg;
    m.params = init_params<T>(cfg, seed);
    m.bound = bind_params<T>(cfg, m.params);
    return m;
  }
  void rebind() { bound = bind_params<T>(config, params); }
};

/// Sentence representations H_u (GRU final states per turn), context
/// representations H_c (utterance-encoder output), and the turn mask.
template <typename T>
struct EncodedContext {
  Tensor<T> h_u;  // [B, turns, d]
  Tensor<T> h_c;  // [B, turns, d]
  MaskTensor turn_mask;
};

struct ForwardCtx {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

namespace model_detail {

/// Attention blocking mask [B, 1, turns] from a keep-mask over turns.
inline MaskTensor cross_block_mask(const MaskTensor& turn_mask) {
  const std::int64_t batch = turn_mask.shape[0], turns = turn_mask.shape[1];
  MaskTensor m({batch, 1, turns}, false);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = turn_mask.data[i] ? 0 : 1;
  return m;
}

}  // namespace model_detail

/// Word-level GRU over every context turn, then the utterance-level
/// self-attention stack. Padded turns contribute zero sentence vectors and are
/// blocked from attention on the key side.
template <typename T>
EncodedContext<T> encode(const ModelConfig& cfg, const ModelParams<T>& mp, const Batch& batch,
                         const DropoutCtx* drop = nullptr) {
  const std::int64_t bsz = batch.size(), turns = batch.turns(), words = batch.words();
  for (std::int64_t b = 0; b < bsz; ++b) {
    bool any = false;
    for (std::int64_t t = 0; t < turns && !any; ++t)
      any = batch.turn_mask.data[static_cast<std::size_t>(b * turns + t)] != 0;
    if (!any)
      throw ContractError("encode: batch row " + std::to_string(b) + " has an empty context");
  }

  IdTensor flat_ids({bsz * turns, words}, batch.ctx_ids.data);
  std::vector<std::int64_t> lengths(static_cast<std::size_t>(bsz * turns), 0);
  for (std::int64_t r = 0; r < bsz * turns; ++r) {
    std::int64_t len = 0;
    for (std::int64_t w = 0; w < words; ++w)
      if (batch.ctx_word_mask.data[static_cast<std::size_t>(r * words + w)]) len = w + 1;
    lengths[static_cast<std::size_t>(r)] = len;
  }

  auto embedded = embed_lookup(mp.embed.table, flat_ids);  // [B*turns, words, d]
  auto h_final = gru_encode(mp.gru, embedded, lengths);    // [B*turns, d]
  auto h_u = reshape(h_final, {bsz, turns, cfg.d});

  auto x = cfg.turn_pos ? positional_encode(h_u) : h_u;
  x = maybe_dropout(x, drop);
  const MaskTensor block = model_detail::cross_block_mask(batch.turn_mask);
  for (const auto& layer : mp.enc) x = transformer_block(layer, x, x, &block, drop);

  return {h_u, x, batch.turn_mask};
}

namespace model_detail {

template <typename T>
void check_decode_len(const ModelConfig& cfg, const Tensor<T>& x_r) {
  if (x_r.dim(-2) > cfg.max_sentence_len + 2)
    throw ContractError("decode: response length " + std::to_string(x_r.dim(-2)) +
                        " exceeds max_sentence_len+2 = " + std::to_string(cfg.max_sentence_len + 2));
}

template <typename T>
Tensor<T> run_decoder_span(const ModelConfig& cfg, const ModelParams<T>& mp, Tensor<T> x,
                           const Tensor<T>& kv, const EncodedContext<T>& enc, int first, int count,
                           const MaskTensor& causal, const DropoutCtx* drop) {
  check_decode_len(cfg, x);
  const MaskTensor cross = cross_block_mask(enc.turn_mask);
  for (int i = first; i < first + count; ++i)
    x = decoder_block(mp.dec[static_cast<std::size_t>(i)], x, kv, &causal, &cross, drop);
  return x;
}

}  // namespace model_detail

/// Intention part: the first dec_layers_intention blocks, cross-attending the
/// context representations H_c.
template <typename T>
Tensor<T> decode_intention(const ModelConfig& cfg, const ModelParams<T>& mp, const Tensor<T>& x_r,
                           const EncodedContext<T>& enc, const MaskTensor& causal,
                           const DropoutCtx* drop = nullptr) {
  return model_detail::run_decoder_span(cfg, mp, x_r, enc.h_c, enc, 0, cfg.dec_layers_intention,
                                        causal, drop);
}

/// Generation part: the remaining blocks, cross-attending the sentence
/// representations H_u.
template <typename T>
Tensor<T> decode_generation(const ModelConfig& cfg, const ModelParams<T>& mp,
                            const Tensor<T>& o_c, const EncodedContext<T>& enc,
                            const MaskTensor& causal, const DropoutCtx* drop = nullptr) {
  return model_detail::run_decoder_span(cfg, mp, o_c, enc.h_u, enc, cfg.dec_layers_intention,
                                        cfg.dec_layers_generation, causal, drop);
}

/// Vocabulary logits [B, T, V] for teacher-forced response inputs.
template <typename T>
Tensor<T> forward_logits(const ModelConfig& cfg, const ModelParams<T>& mp, const Batch& batch,
                         const ForwardCtx& fwd = {}) {
  Rng drop_rng(fwd.dropout_seed);
  DropoutCtx drop_ctx{cfg.dropout, &drop_rng};
  const DropoutCtx* drop = (fwd.training && cfg.dropout > 0.0) ? &drop_ctx : nullptr;

  auto enc = encode(cfg, mp, batch, drop);

  auto x_r = embed_lookup(mp.embed.table, batch.resp_in);  // [B, T, d]
  if (cfg.token_pos) x_r = positional_encode(x_r);
  x_r = maybe_dropout(x_r, drop);
  const MaskTensor causal = causal_mask(batch.resp_len());

  Tensor<T> final_state;
  switch (cfg.decoder_mode) {
    case DecoderMode::kXFusion: {
      auto o_c = decode_intention(cfg, mp, x_r, enc, causal, drop);
      final_state = decode_generation(cfg, mp, o_c, enc, causal, drop);
      break;
    }
    case DecoderMode::kContextOnly:
      final_state = model_detail::run_decoder_span(cfg, mp, x_r, enc.h_c, enc, 0,
                                                   cfg.dec_layers_total(), causal, drop);
      break;
    case DecoderMode::kSentenceOnly:
      final_state = model_detail::run_decoder_span(cfg, mp, x_r, enc.h_u, enc, 0,
                                                   cfg.dec_layers_total(), causal, drop);
      break;
  }

  auto logits = cfg.tie_output ? matmul(final_state, transpose_last2(mp.embed.table))
                               : matmul(final_state, mp.out_w);
  return add(logits, mp.out_b);
}

/// Eq.-style training objective: mean NLL over non-pad target positions.
template <typename T>
Tensor<T> nll_loss(const Tensor<T>& logits, const IdTensor& targets, const MaskTensor& mask) {
  return nll_loss_masked(logits, targets, mask);
}

}  // namespace xdial
