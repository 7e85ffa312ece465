#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "xdial/corpus.hpp"

using namespace xdial;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& content, const std::string& name) {
    path = std::string("/tmp/xdial_test_") + name;
    std::ofstream out(path);
    out << content;
  }
  ~TempFile() { std::remove(path.c_str()); }
};

Dialogue make_dialogue(std::initializer_list<const char*> utts) {
  Dialogue d;
  for (auto* u : utts) d.utterances.emplace_back(u);
  return d;
}

}  // namespace

TEST_CASE("load_dialogues parses __eou__ lines") {
  TempFile f("hi __eou__ hello __eou__\nsolo __eou__\n", "load.txt");
  LoadStats stats;
  auto ds = load_dialogues(f.path, &stats);
  REQUIRE(ds.size() == 1);
  CHECK(ds[0].utterances.size() == 2);
  CHECK(ds[0].utterances[0] == "hi");
  CHECK(ds[0].utterances[1] == "hello");
  CHECK(stats.skipped_short == 1);
  CHECK(stats.dialogues == 1);
}

TEST_CASE("load_dialogues drops trailing empties and keeps 5-utterance rounds") {
  // a five-utterance running apology exchange, same shape as real data
  TempFile f(
      "i am sorry i am so late . __eou__ it is ten after six . we are late . __eou__ "
      "i know . i lost my bag . __eou__ i will call the lost and found office . __eou__ "
      "thank you . i do apologize for being late . __eou__\n",
      "five.txt");
  auto ds = load_dialogues(f.path);
  REQUIRE(ds.size() == 1);
  CHECK(ds[0].utterances.size() == 5);
}

TEST_CASE("load_dialogues error paths") {
  CHECK_THROWS_AS(load_dialogues("/nonexistent/path.txt"), DataError);
  TempFile empty("", "empty.txt");
  CHECK_THROWS_AS(load_dialogues(empty.path), DataError);
}

TEST_CASE("tokenize splits punctuation and lowercases") {
  auto t = tokenize("It's ten after six.");
  std::vector<std::string> expect{"it", "'", "s", "ten", "after", "six", "."};
  CHECK(t == expect);
  CHECK(tokenize("").empty());
  CHECK(tokenize("   \t  ").empty());
}

TEST_CASE("tokenize is stable under detokenize round trip") {
  for (const char* s : {"Hello, world!", "don't stop", "x  y   z", "a-b c_d 10.5%"}) {
    auto once = tokenize(s);
    auto twice = tokenize(detokenize(once));
    CHECK(once == twice);
  }
}

TEST_CASE("build_vocab sizes, ordering and tie-break") {
  std::vector<Dialogue> ds{make_dialogue({"b b b a a c", "a"})};
  auto v = build_vocab(ds);
  CHECK(v.size() == 4 + 3);
  // three 'a' and three 'b': tie broken lexicographically, 'a' gets the lower id
  CHECK(v.id_of("a") == 4);
  CHECK(v.id_of("b") == 5);
  CHECK(v.id_of("c") == 6);
  CHECK(v.id_of("zzz") == Vocab::kUnk);

  // max_size caps the table
  auto small = build_vocab(ds, 5);
  CHECK(small.size() == 5);
  CHECK(small.id_of("c") == Vocab::kUnk);
}

TEST_CASE("build_vocab top token matches a counting oracle") {
  std::vector<Dialogue> ds;
  Rng rng(3);
  std::map<std::string, int> counts;
  const std::vector<std::string> words{"red", "green", "blue", "cyan", "teal", "plum"};
  for (int line = 0; line < 100; ++line) {
    Dialogue d;
    for (int u = 0; u < 2; ++u) {
      std::string text;
      for (int w = 0; w < 5; ++w) {
        const auto& token = words[static_cast<std::size_t>(rng.next_below(words.size()))];
        text += token + " ";
        counts[token]++;
      }
      d.utterances.push_back(text);
    }
    ds.push_back(std::move(d));
  }
  auto v = build_vocab(ds);
  std::string best;
  int best_count = -1;
  for (const auto& [token, c] : counts)
    if (c > best_count || (c == best_count && token < best)) {
      best = token;
      best_count = c;
    }
  CHECK(v.token_of(4) == best);
}

TEST_CASE("vocab encode/decode identity on in-vocabulary tokens") {
  std::vector<Dialogue> ds{make_dialogue({"alpha beta gamma", "delta"})};
  auto v = build_vocab(ds);
  std::vector<std::string> tokens{"alpha", "gamma", "beta"};
  CHECK(v.decode(v.encode(tokens)) == tokens);
}

TEST_CASE("specials cannot be produced by tokenization") {
  auto t = tokenize("<pad> <bos> <eos> <unk>");
  for (const auto& token : t) {
    CHECK(token != "<pad>");
    CHECK(token != "<bos>");
    CHECK(token != "<eos>");
    CHECK(token != "<unk>");
  }
}

TEST_CASE("vocab save/load round trip and fingerprint") {
  std::vector<Dialogue> ds{make_dialogue({"one two three", "four"})};
  auto v = build_vocab(ds);
  TempFile f("", "vocab.txt");
  v.save(f.path);
  auto loaded = Vocab::load(f.path);
  CHECK(loaded.size() == v.size());
  CHECK(loaded.fingerprint() == v.fingerprint());
  CHECK(loaded.id_of("two") == v.id_of("two"));

  std::vector<Dialogue> other{make_dialogue({"five six", "seven"})};
  CHECK(build_vocab(other).fingerprint() != v.fingerprint());
}

TEST_CASE("expand_samples produces K-1 prefix samples") {
  Vocab v = build_vocab({make_dialogue({"a b", "c", "d", "e", "f"})});

  auto two = expand_samples(make_dialogue({"a b", "c"}), v);
  CHECK(two.size() == 1);

  auto five = expand_samples(make_dialogue({"a b", "c", "d", "e", "f"}), v);
  CHECK(five.size() == 4);
  CHECK(five[0].context.size() == 1);
  CHECK(five[3].context.size() == 4);
  // contexts are prefixes; responses are the next utterance
  CHECK(five[1].response == v.encode(tokenize("d")));
}

TEST_CASE("expand_samples keeps only the most recent max_turns-1 turns") {
  Dialogue d;
  for (int i = 0; i < 12; ++i) d.utterances.push_back("u" + std::to_string(i));
  auto v = build_vocab({d});
  auto samples = expand_samples(d, v, /*max_turns=*/10);
  CHECK(samples.size() == 11);
  const auto& last = samples.back();
  CHECK(last.context.size() == 9);
  // windowing oracle: the final sample's context is utterances 2..10
  CHECK(last.context.front() == v.encode(tokenize("u2")));
  CHECK(last.context.back() == v.encode(tokenize("u10")));
  CHECK(last.response == v.encode(tokenize("u11")));
}

TEST_CASE("property: expansion count is K-1 for random K") {
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    const int k = 2 + static_cast<int>(rng.next_below(15));
    Dialogue d;
    for (int i = 0; i < k; ++i) d.utterances.push_back("w" + std::to_string(i));
    auto v = build_vocab({d});
    CHECK(expand_samples(d, v).size() == static_cast<std::size_t>(k - 1));
  }
}

TEST_CASE("utterances longer than max_sentence_len are truncated to the head") {
  std::string text;
  for (int i = 0; i < 60; ++i) text += "w" + std::to_string(i) + " ";
  Dialogue d = make_dialogue({text.c_str(), "ok"});
  auto v = build_vocab({d});
  auto samples = expand_samples(d, v, 10, 50);
  REQUIRE(samples.size() == 1);
  CHECK(samples[0].context[0].size() == 50);
  CHECK(samples[0].context[0][0] == v.id_of("w0"));
  CHECK(samples[0].context[0][49] == v.id_of("w49"));
}

TEST_CASE("make_batches sizes, determinism, padding and masks") {
  // 33 samples -> batches of 32 and 1
  std::vector<Dialogue> ds;
  for (int i = 0; i < 33; ++i)
    ds.push_back(make_dialogue({("hello number " + std::to_string(i)).c_str(), "ok then"}));
  auto v = build_vocab(ds);
  auto samples = expand_corpus(ds, v);
  REQUIRE(samples.size() == 33);

  auto batches = make_batches(samples, 32, /*seed=*/7);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0].size() == 32);
  CHECK(batches[1].size() == 1);

  auto again = make_batches(samples, 32, 7);
  CHECK(again[0].resp_in.data == batches[0].resp_in.data);
  CHECK(again[0].ctx_ids.data == batches[0].ctx_ids.data);

  auto other = make_batches(samples, 32, 8);
  CHECK(other[0].ctx_ids.data != batches[0].ctx_ids.data);

  // mask/shift invariants on every batch
  for (const auto& b : batches) {
    for (std::int64_t i = 0; i < b.size(); ++i) {
      CHECK(b.resp_in.data[static_cast<std::size_t>(i * b.resp_len())] == Vocab::kBos);
      std::int64_t last_real = -1;
      for (std::int64_t t = 0; t < b.resp_len(); ++t) {
        const auto off = static_cast<std::size_t>(i * b.resp_len() + t);
        if (b.resp_mask.data[off]) last_real = t;
        if (t + 1 < b.resp_len() && b.resp_mask.data[off + 1])
          CHECK(b.resp_in.data[off + 1] == b.resp_target.data[off]);
        if (!b.resp_mask.data[off]) CHECK(b.resp_target.data[off] == Vocab::kPad);
      }
      REQUIRE(last_real >= 0);
      CHECK(b.resp_target.data[static_cast<std::size_t>(i * b.resp_len() + last_real)] == Vocab::kEos);
    }
    // word mask is exactly the non-PAD indicator
    for (std::size_t i = 0; i < b.ctx_ids.data.size(); ++i)
      CHECK((b.ctx_ids.data[i] != Vocab::kPad) == (b.ctx_word_mask.data[i] != 0));
  }

  CHECK_THROWS_AS(make_batches({}, 32, 0), ContractError);
}

TEST_CASE("load_references parses TAB-separated alternatives") {
  TempFile f("good morning .\thello there !\nsee you later .\n", "refs.txt");
  auto refs = load_references(f.path);
  REQUIRE(refs.size() == 2);
  CHECK(refs[0].size() == 2);
  CHECK(refs[0][1] == tokenize("hello there !"));
  CHECK(refs[1].size() == 1);
}
