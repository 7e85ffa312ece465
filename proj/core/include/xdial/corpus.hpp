#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "xdial/common.hpp"

// Dialogue corpus ingestion and batching. File conventions:
//   - corpus: UTF-8 text, one dialogue per line, utterances separated by the
//     literal token `__eou__`;
//   - multi-reference sidecar: one line per context line, TAB-separated
//     alternative references;
//   - vocab file: one token per line, line number = id, specials on lines 0-3.

namespace xdial {

struct Dialogue {
  std::vector<std::string> utterances;  // length >= 2, no empty utterance
};

struct Sample {
  std::vector<std::vector<std::int32_t>> context;  // most recent turn last
  std::vector<std::int32_t> response;
};

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kUnk = 3;

  Vocab();

  std::int32_t id_of(const std::string& token) const;  // kUnk when absent
  const std::string& token_of(std::int32_t id) const;  // IndexError when out of range
  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }

  std::vector<std::int32_t> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<std::int32_t>& ids) const;

  void add_token(const std::string& token);  // build_vocab/load only

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  /// FNV-1a fingerprint of the full token list; checkpoint compatibility key.
  std::uint64_t fingerprint() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct Batch {
  IdTensor ctx_ids;         // [B, turns, words]
  MaskTensor ctx_word_mask;  // true at non-PAD word positions
  MaskTensor turn_mask;      // [B, turns], true at real turns
  IdTensor resp_in;          // [B, T], BOS-prefixed
  IdTensor resp_target;      // [B, T], EOS-terminated
  MaskTensor resp_mask;      // true at non-PAD target positions

  std::int64_t size() const { return ctx_ids.shape[0]; }
  std::int64_t turns() const { return ctx_ids.shape[1]; }
  std::int64_t words() const { return ctx_ids.shape[2]; }
  std::int64_t resp_len() const { return resp_in.shape[1]; }
};

struct LoadStats {
  std::int64_t dialogues = 0;
  std::int64_t skipped_short = 0;  // fewer than 2 utterances
};

/// Parses a `__eou__`-separated corpus file. Dialogues with fewer than two
/// utterances are skipped and counted in `stats`.
std::vector<Dialogue> load_dialogues(const std::string& path, LoadStats* stats = nullptr);

/// Lowercase word/punctuation tokenizer: alphanumeric runs are tokens,
/// every other non-space character is its own token.
std::vector<std::string> tokenize(const std::string& text);

/// Joins tokens with single spaces (lossy inverse of tokenize).
std::string detokenize(const std::vector<std::string>& tokens);

/// Specials first, then corpus tokens by descending frequency (ties broken
/// lexicographically) up to max_size total entries.
Vocab build_vocab(const std::vector<Dialogue>& dialogues, std::int64_t max_size = 13500);

/// K-1 prefix samples of a dialogue: sample j has context = utterances 1..j
/// (only the most recent max_turns-1 kept) and response = utterance j+1.
std::vector<Sample> expand_samples(const Dialogue& d, const Vocab& vocab, int max_turns = 10,
                                   std::int64_t max_sentence_len = 50);

std::vector<Sample> expand_corpus(const std::vector<Dialogue>& dialogues, const Vocab& vocab,
                                  int max_turns = 10, std::int64_t max_sentence_len = 50);

/// Shuffles deterministically per seed, chunks into batches of `batch_size`
/// (final partial batch kept), pads to per-batch maxima.
std::vector<Batch> make_batches(const std::vector<Sample>& samples, std::int64_t batch_size = 32,
                                std::uint64_t seed = 0);

/// Single-sample batch (decode entry point).
Batch make_batch(const std::vector<Sample>& samples);

/// TAB-separated reference sets, one line per context.
std::vector<std::vector<std::vector<std::string>>> load_references(const std::string& path);

}  // namespace xdial
