#include "xdial/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

namespace xdial {

namespace {

const char* kEou = "__eou__";

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

Vocab::Vocab() {
  for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) add_token(s);
}

void Vocab::add_token(const std::string& token) {
  index_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
  tokens_.push_back(token);
}

std::int32_t Vocab::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token_of(std::int32_t id) const {
  if (id < 0 || id >= static_cast<std::int32_t>(tokens_.size()))
    throw IndexError("vocab: id " + std::to_string(id) + " out of range [0," +
                     std::to_string(tokens_.size()) + ")");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<std::int32_t> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id_of(t));
  return ids;
}

std::vector<std::string> Vocab::decode(const std::vector<std::int32_t>& ids) const {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (auto id : ids) tokens.push_back(token_of(id));
  return tokens;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("vocab: cannot write " + path);
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("vocab: cannot read " + path);
  Vocab v;
  std::string line;
  std::int32_t lineno = 0;
  while (std::getline(in, line)) {
    if (lineno < 4) {
      if (line != v.tokens_[static_cast<std::size_t>(lineno)])
        throw DataError("vocab: line " + std::to_string(lineno) + " must be special token " +
                        v.tokens_[static_cast<std::size_t>(lineno)] + ", got '" + line + "'");
    } else {
      v.add_token(line);
    }
    ++lineno;
  }
  if (lineno < 4) throw DataError("vocab: file " + path + " is missing the special tokens");
  return v;
}

std::uint64_t Vocab::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tokens_) {
    h ^= fnv1a64(t.data(), t.size());
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Loading and tokenization
// ---------------------------------------------------------------------------

std::vector<Dialogue> load_dialogues(const std::string& path, LoadStats* stats) {
  std::ifstream in(path);
  if (!in) throw DataError("corpus: cannot read " + path);
  std::vector<Dialogue> dialogues;
  LoadStats local;
  std::string line;
  bool saw_line = false;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    saw_line = true;
    Dialogue d;
    std::size_t pos = 0;
    const std::size_t eou_len = std::char_traits<char>::length(kEou);
    while (pos <= line.size()) {
      const std::size_t next = line.find(kEou, pos);
      const std::string seg =
          trim(next == std::string::npos ? line.substr(pos) : line.substr(pos, next - pos));
      if (!seg.empty()) d.utterances.push_back(seg);
      if (next == std::string::npos) break;
      pos = next + eou_len;
    }
    if (d.utterances.size() < 2) {
      ++local.skipped_short;
      continue;
    }
    ++local.dialogues;
    dialogues.push_back(std::move(d));
  }
  if (saw_line && dialogues.empty() && local.skipped_short == 0)
    throw DataError("corpus: no dialogues parsed from " + path);
  if (!saw_line) throw DataError("corpus: " + path + " is empty");
  if (stats) *stats = local;
  return dialogues;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      tokens.push_back(word);
      word.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c) || c >= 0x80) {
      // non-ASCII bytes cluster with the word (keeps UTF-8 sequences whole)
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      tokens.push_back(std::string(1, static_cast<char>(c)));
    }
  }
  flush();
  return tokens;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

Vocab build_vocab(const std::vector<Dialogue>& dialogues, std::int64_t max_size) {
  std::unordered_map<std::string, std::int64_t> freq;
  for (const auto& d : dialogues)
    for (const auto& u : d.utterances)
      for (auto& t : tokenize(u)) ++freq[t];

  std::vector<std::pair<std::string, std::int64_t>> entries(freq.begin(), freq.end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  for (const auto& [token, count] : entries) {
    (void)count;
    if (v.size() >= max_size) break;
    v.add_token(token);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Sample expansion and batching
// ---------------------------------------------------------------------------

std::vector<Sample> expand_samples(const Dialogue& d, const Vocab& vocab, int max_turns,
                                   std::int64_t max_sentence_len) {
  if (d.utterances.size() < 2)
    throw ContractError("expand_samples: dialogue has fewer than 2 utterances");
  auto encode_clipped = [&](const std::string& text) {
    auto ids = vocab.encode(tokenize(text));
    if (static_cast<std::int64_t>(ids.size()) > max_sentence_len)
      ids.resize(static_cast<std::size_t>(max_sentence_len));  // keep the head
    return ids;
  };
  std::vector<std::vector<std::int32_t>> encoded;
  encoded.reserve(d.utterances.size());
  for (const auto& u : d.utterances) encoded.push_back(encode_clipped(u));

  std::vector<Sample> samples;
  const std::size_t window = static_cast<std::size_t>(max_turns - 1);
  for (std::size_t j = 1; j < d.utterances.size(); ++j) {
    Sample s;
    const std::size_t first = j > window ? j - window : 0;  // keep the most recent turns
    s.context.assign(encoded.begin() + static_cast<std::ptrdiff_t>(first),
                     encoded.begin() + static_cast<std::ptrdiff_t>(j));
    s.response = encoded[j];
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<Sample> expand_corpus(const std::vector<Dialogue>& dialogues, const Vocab& vocab,
                                  int max_turns, std::int64_t max_sentence_len) {
  std::vector<Sample> all;
  for (const auto& d : dialogues) {
    auto s = expand_samples(d, vocab, max_turns, max_sentence_len);
    all.insert(all.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return all;
}

Batch make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw ContractError("make_batch: empty sample list");
  const std::int64_t batch = static_cast<std::int64_t>(samples.size());
  std::int64_t turns = 1, words = 1, resp = 1;
  for (const auto& s : samples) {
    turns = std::max(turns, static_cast<std::int64_t>(s.context.size()));
    for (const auto& u : s.context) words = std::max(words, static_cast<std::int64_t>(u.size()));
    resp = std::max(resp, static_cast<std::int64_t>(s.response.size()) + 1);  // BOS/EOS shift
  }

  Batch b;
  b.ctx_ids = IdTensor({batch, turns, words});
  b.ctx_word_mask = MaskTensor({batch, turns, words}, false);
  b.turn_mask = MaskTensor({batch, turns}, false);
  b.resp_in = IdTensor({batch, resp});
  b.resp_target = IdTensor({batch, resp});
  b.resp_mask = MaskTensor({batch, resp}, false);

  for (std::int64_t i = 0; i < batch; ++i) {
    const Sample& s = samples[static_cast<std::size_t>(i)];
    for (std::size_t t = 0; t < s.context.size(); ++t) {
      b.turn_mask.data[static_cast<std::size_t>(i * turns) + t] = 1;
      const auto& u = s.context[t];
      for (std::size_t w = 0; w < u.size(); ++w) {
        const auto off = static_cast<std::size_t>((i * turns + static_cast<std::int64_t>(t)) * words) + w;
        b.ctx_ids.data[off] = u[w];
        b.ctx_word_mask.data[off] = 1;
      }
    }
    b.resp_in.data[static_cast<std::size_t>(i * resp)] = Vocab::kBos;
    for (std::size_t w = 0; w < s.response.size(); ++w) {
      b.resp_in.data[static_cast<std::size_t>(i * resp) + w + 1] = s.response[w];
      b.resp_target.data[static_cast<std::size_t>(i * resp) + w] = s.response[w];
      b.resp_mask.data[static_cast<std::size_t>(i * resp) + w] = 1;
    }
    b.resp_target.data[static_cast<std::size_t>(i * resp) + s.response.size()] = Vocab::kEos;
    b.resp_mask.data[static_cast<std::size_t>(i * resp) + s.response.size()] = 1;
  }
  return b;
}

std::vector<Batch> make_batches(const std::vector<Sample>& samples, std::int64_t batch_size,
                                std::uint64_t seed) {
  if (samples.empty()) throw ContractError("make_batches: empty sample list");
  if (batch_size < 1) throw ContractError("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<Batch> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<Sample> chunk;
    chunk.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) chunk.push_back(samples[order[i]]);
    batches.push_back(make_batch(chunk));
  }
  return batches;
}

std::vector<std::vector<std::vector<std::string>>> load_references(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("references: cannot read " + path);
  std::string line;
  std::vector<std::vector<std::vector<std::string>>> refs;
  while (std::getline(in, line)) {
    std::vector<std::vector<std::string>> alternatives;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const std::size_t tab = line.find('\t', pos);
      const std::string part =
          tab == std::string::npos ? line.substr(pos) : line.substr(pos, tab - pos);
      const std::string t = trim(part);
      if (!t.empty()) alternatives.push_back(tokenize(t));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    refs.push_back(std::move(alternatives));
  }
  return refs;
}

}  // namespace xdial
