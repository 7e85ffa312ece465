#pragma once

#include <functional>

#include "xdial/model.hpp"

namespace xdial {

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct DecodeConfig {
  enum class Strategy { kGreedy, kBeam };
  Strategy strategy = Strategy::kGreedy;
  int beam_width = 4;
  std::int64_t max_len = 50;
  double length_penalty = 0.0;  // score = logprob / len^alpha; 0 disables

  void validate() const {
    if (beam_width < 1) throw ConfigError("decode: beam_width must be >= 1");
    if (max_len < 1) throw ConfigError("decode: max_len must be >= 1");
  }
};

/// Log-probabilities over the vocabulary for the position following `prefix`
/// (prefix starts with BOS). Decoding is defined against this interface so
/// search strategies can be tested on hand-built distributions.
using StepScorer = std::function<std::vector<double>(const std::vector<std::int32_t>& prefix)>;

/// Argmax decoding; ties resolve to the lowest id. EOS/BOS are not part of
/// the returned tokens.
std::vector<std::int32_t> greedy_decode(const StepScorer& scorer, std::int32_t bos,
                                        std::int32_t eos, std::int64_t max_len);

/// Length-normalized beam search. Finished hypotheses retire on EOS; returns
/// the best finished hypothesis, or the best live one if nothing finished by
/// max_len. Width 1 reproduces greedy_decode exactly.
std::vector<std::int32_t> beam_decode(const StepScorer& scorer, std::int32_t bos, std::int32_t eos,
                                      const DecodeConfig& cfg);

std::vector<std::int32_t> decode(const StepScorer& scorer, std::int32_t bos, std::int32_t eos,
                                 const DecodeConfig& cfg);

/// Model-backed scorer: encodes the context once, then scores response
/// prefixes with the decoder stack. Off-tape; read-shares the parameters.
template <typename T>
class ContextScorer {
 public:
  ContextScorer(const ModelConfig& cfg, const ModelParams<T>& mp,
                std::vector<std::vector<std::int32_t>> context)
      : cfg_(cfg), mp_(mp) {
    Sample s;
    s.context = std::move(context);
    enc_ = encode(cfg_, mp_, make_batch({s}));
  }

  std::vector<double> operator()(const std::vector<std::int32_t>& prefix) const {
    const auto len = static_cast<std::int64_t>(prefix.size());
    IdTensor ids({1, len}, prefix);
    auto x_r = embed_lookup(mp_.embed.table, ids);
    if (cfg_.token_pos) x_r = positional_encode(x_r);
    const MaskTensor causal = causal_mask(len);

    Tensor<T> state;
    switch (cfg_.decoder_mode) {
      case DecoderMode::kXFusion: {
        auto o_c = decode_intention(cfg_, mp_, x_r, enc_, causal);
        state = decode_generation(cfg_, mp_, o_c, enc_, causal);
        break;
      }
      case DecoderMode::kContextOnly:
        state = model_detail::run_decoder_span(cfg_, mp_, x_r, enc_.h_c, enc_, 0,
                                               cfg_.dec_layers_total(), causal, nullptr);
        break;
      case DecoderMode::kSentenceOnly:
        state = model_detail::run_decoder_span(cfg_, mp_, x_r, enc_.h_u, enc_, 0,
                                               cfg_.dec_layers_total(), causal, nullptr);
        break;
    }
    auto last = narrow(state, -2, len - 1, 1);  // [1, 1, d]
    auto logits = add(cfg_.tie_output ? matmul(last, transpose_last2(mp_.embed.table))
                                      : matmul(last, mp_.out_w),
                      mp_.out_b);
    // log softmax in double precision
    std::vector<double> row(logits.data().begin(), logits.data().end());
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0;
    for (double v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    for (double& v : row) v -= lse;
    return row;
  }

 private:
  ModelConfig cfg_;
  const ModelParams<T>& mp_;
  EncodedContext<T> enc_;
};

// ---------------------------------------------------------------------------
// Metrics (token-sequence level)
// ---------------------------------------------------------------------------

using Tokens = std::vector<std::string>;

/// Corpus-level BLEU-k: clipped modified n-gram precision against all
/// references, add-one smoothing on orders >= 2, geometric mean of orders
/// 1..k, brevity penalty against the closest reference length.
double bleu_k(const std::vector<Tokens>& candidates,
              const std::vector<std::vector<Tokens>>& references, int k);

/// Single-pair convenience (a one-sample corpus).
double bleu_k(const Tokens& candidate, const std::vector<Tokens>& references, int k);

struct RougeScores {
  double rouge_1 = 0.0;
  double rouge_2 = 0.0;
  double rouge_l = 0.0;
};

/// N-gram F1 (orders 1 and 2) and LCS-based F1 for one candidate/reference pair.
RougeScores rouge_pair(const Tokens& candidate, const Tokens& reference);

/// Unique k-grams over total k-grams across all candidates (0 when none).
double distinct_k(const std::vector<Tokens>& candidates, int k);

struct MetricReport {
  double bleu_1 = 0, bleu_2 = 0, bleu_3 = 0, bleu_4 = 0;
  double rouge_1 = 0, rouge_2 = 0, rouge_l = 0;
  double distinct_1 = 0, distinct_2 = 0;
  std::int64_t samples = 0;
  std::int64_t tokens = 0;
  std::int64_t skipped_empty_refs = 0;
};

/// All report metrics for aligned candidates/reference-sets. ROUGE takes the
/// max over references per sample and the mean over samples; samples whose
/// references are all empty are skipped and counted.
MetricReport compute_metrics(const std::vector<Tokens>& candidates,
                             const std::vector<std::vector<Tokens>>& references);

/// key: value lines, percentages with 2 decimals.
std::string format_report(const MetricReport& r);

/// Decodes one reply per context and scores it against the aligned reference
/// set. Replies (token lists) are returned through `replies_out` for audit.
template <typename T>
MetricReport evaluate_model(const ModelConfig& cfg, const ModelParams<T>& mp,
                            const std::vector<Sample>& contexts,
                            const std::vector<std::vector<Tokens>>& references,
                            const Vocab& vocab, const DecodeConfig& dc,
                            std::vector<Tokens>* replies_out = nullptr) {
  if (contexts.size() != references.size())
    throw ContractError("evaluate: " + std::to_string(contexts.size()) + " contexts vs " +
                        std::to_string(references.size()) + " reference sets");
  dc.validate();
  std::vector<Tokens> replies;
  replies.reserve(contexts.size());
  for (const auto& sample : contexts) {
    ContextScorer<T> scorer(cfg, mp, sample.context);
    auto ids = decode(scorer, Vocab::kBos, Vocab::kEos, dc);
    replies.push_back(vocab.decode(ids));
  }
  auto report = compute_metrics(replies, references);
  if (replies_out) *replies_out = std::move(replies);
  return report;
}

}  // namespace xdial
