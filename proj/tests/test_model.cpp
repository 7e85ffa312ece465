#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "xdial/gradcheck.hpp"
#include "xdial/model.hpp"

using namespace xdial;

using T = double;
using Tsr = Tensor<double>;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers_intention = 1;
  cfg.dec_layers_generation = 1;
  cfg.vocab_size = 20;
  cfg.max_turns = 4;
  cfg.max_sentence_len = 6;
  return cfg;
}

Batch toy_batch(const std::vector<Sample>& samples) { return make_batch(samples); }

Sample make_sample(std::vector<std::vector<std::int32_t>> ctx, std::vector<std::int32_t> resp) {
  Sample s;
  s.context = std::move(ctx);
  s.response = std::move(resp);
  return s;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());

  ModelConfig bad = cfg;
  bad.heads = 3;  // does not divide 8
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.dec_layers_intention = 2;  // uneven split in x_fusion mode
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.decoder_mode = DecoderMode::kContextOnly;  // allowed off-fusion
  CHECK_NOTHROW(bad.validate());

  bad = cfg;
  bad.max_turns = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  CHECK(decoder_mode_from_string("x_fusion") == DecoderMode::kXFusion);
  CHECK(decoder_mode_from_string("context_only") == DecoderMode::kContextOnly);
  CHECK(decoder_mode_from_string("sentence_only") == DecoderMode::kSentenceOnly);
  CHECK_THROWS_AS(decoder_mode_from_string("fusion"), ConfigError);
}

TEST_CASE("init_params is deterministic per seed and binds by path") {
  auto cfg = tiny_config();
  auto a = init_params<T>(cfg, 42);
  auto b = init_params<T>(cfg, 42);
  auto c = init_params<T>(cfg, 43);
  REQUIRE(a.tensors.size() == b.tensors.size());
  bool any_diff_seed = false;
  for (const auto& [path, t] : a.tensors) {
    const auto& tb = b.at(path);
    REQUIRE(t.shape() == tb.shape());
    for (std::size_t i = 0; i < t.data().size(); ++i) CHECK(t.data()[i] == tb.data()[i]);
    const auto& tc = c.at(path);
    for (std::size_t i = 0; i < t.data().size(); ++i)
      if (t.data()[i] != tc.data()[i]) any_diff_seed = true;
  }
  CHECK(any_diff_seed);

  auto m = Model<T>::init(cfg, 42);
  CHECK(m.bound.enc.size() == 1);
  CHECK(m.bound.dec.size() == 2);
  CHECK(m.bound.embed.table.shape() == Shape{20, 8});
  // bound views alias the map storage
  m.params.at("embed.table").mutable_data()[0] = 123.0;
  CHECK(m.bound.embed.table.data()[0] == 123.0);
}

TEST_CASE("encode shapes, H_u oracle and padded-turn invariance") {
  auto cfg = tiny_config();
  auto m = Model<T>::init(cfg, 7);

  auto batch = toy_batch({make_sample({{4, 5, 6}, {7, 8}}, {9, 10})});
  auto enc = encode(cfg, m.bound, batch);
  CHECK(enc.h_u.shape() == Shape{1, 2, 8});
  CHECK(enc.h_c.shape() == Shape{1, 2, 8});

  // H_u rows match gru_encode on each utterance separately
  IdTensor u0({1, 3}, {4, 5, 6});
  auto h0 = gru_encode(m.bound.gru, embed_lookup(m.bound.embed.table, u0), {3});
  for (int j = 0; j < 8; ++j) CHECK(enc.h_u.data()[static_cast<std::size_t>(j)] == h0.data()[static_cast<std::size_t>(j)]);

  // fixed-params H_c equals hand-composed encoder stack on H_u (+ positions)
  auto x = positional_encode(enc.h_u);
  MaskTensor block({1, 1, 2}, false);
  auto expect = transformer_block(m.bound.enc[0], x, x, &block);
  for (std::size_t i = 0; i < expect.data().size(); ++i)
    CHECK(enc.h_c.data()[i] == expect.data()[i]);
}

TEST_CASE("single-turn context: H_c is a stack over one position") {
  auto cfg = tiny_config();
  auto m = Model<T>::init(cfg, 11);
  auto batch = toy_batch({make_sample({{4, 5}}, {6})});
  auto enc = encode(cfg, m.bound, batch);
  CHECK(enc.h_c.shape() == Shape{1, 1, 8});
  CHECK(enc.h_c.all_finite());
}

TEST_CASE("adding one more padded turn never changes real positions") {
  auto cfg = tiny_config();
  auto m = Model<T>::init(cfg, 13);

  auto small = toy_batch({make_sample({{4, 5, 6}, {7, 8}}, {9})});
  auto enc_small = encode(cfg, m.bound, small);

  Batch padded = small;
  const std::int64_t words = small.words();
  padded.ctx_ids = IdTensor({1, 3, words});
  padded.ctx_word_mask = MaskTensor({1, 3, words}, false);
  padded.turn_mask = MaskTensor({1, 3}, false);
  for (std::int64_t t = 0; t < 2; ++t) {
    padded.turn_mask.data[static_cast<std::size_t>(t)] = small.turn_mask.data[static_cast<std::size_t>(t)];
    for (std::int64_t w = 0; w < words; ++w) {
      padded.ctx_ids.data[static_cast<std::size_t>(t * words + w)] = small.ctx_ids.data[static_cast<std::size_t>(t * words + w)];
      padded.ctx_word_mask.data[static_cast<std::size_t>(t * words + w)] =
          small.ctx_word_mask.data[static_cast<std::size_t>(t * words + w)];
    }
  }
  auto enc_padded = encode(cfg, m.bound, padded);
  for (std::int64_t t = 0; t < 2; ++t)
    for (std::int64_t j = 0; j < 8; ++j)
      CHECK(enc_small.h_c.data()[static_cast<std::size_t>(t * 8 + j)] ==
            enc_padded.h_c.data()[static_cast<std::size_t>(t * 8 + j)]);
}

TEST_CASE("encode rejects an all-padded context row") {
  auto cfg = tiny_config();
  auto m = Model<T>::init(cfg, 17);
  Batch b;
  b.ctx_ids = IdTensor({1, 2, 3});
  b.ctx_word_mask = MaskTensor({1, 2, 3}, false);
  b.turn_mask = MaskTensor({1, 2}, false);
  b.resp_in = IdTensor({1, 2}, {Vocab::kBos, 4});
  b.resp_target = IdTensor({1, 2}, {4, Vocab::kEos});
  b.resp_mask = MaskTensor({1, 2}, true);
  CHECK_THROWS_AS(encode(cfg, m.bound, b), ContractError);
}

TEST_CASE("decoder length contract") {
  auto cfg = tiny_config();  // max_sentence_len 6 -> limit 8
  auto m = Model<T>::init(cfg, 19);
  auto batch = toy_batch({make_sample({{4, 5}}, {6, 7, 8, 9, 10, 11, 12, 13})});
  CHECK(batch.resp_len() == 9);
  CHECK_THROWS_AS(forward_logits(cfg, m.bound, batch), ContractError);
}

TEST_CASE("forward_logits shape in every decoder mode") {
  auto cfg = tiny_config();
  auto m = Model<T>::init(cfg, 23);
  auto batch = toy_batch({make_sample({{4, 5, 6}, {7}}, {8, 9}),
                          make_sample({{10}}, {11, 12, 13})});
  for (auto mode : {DecoderMode::kXFusion, DecoderMode::kContextOnly, DecoderMode::kSentenceOnly}) {
    ModelConfig c2 = cfg;
    c2.decoder_mode = mode;
    auto logits = forward_logits(c2, m.bound, batch);
    CHECK(logits.shape() == Shape{2, batch.resp_len(), cfg.vocab_size});
    CHECK(logits.all_finite());
  }
}

TEST_CASE("deterministic forward: same inputs give bit-identical logits") {
  auto cfg = tiny_config();
  auto m = Model<T>::init(cfg, 29);
  auto batch = toy_batch({make_sample({{4, 5, 6}, {7}}, {8, 9})});
  auto a = forward_logits(cfg, m.bound, batch);
  auto b = forward_logits(cfg, m.bound, batch);
  for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("causality: future response tokens never change past logits") {
  auto cfg = tiny_config();
  auto m = Model<T>::init(cfg, 31);
  auto base = toy_batch({make_sample({{4, 5, 6}, {7}}, {8, 9, 10, 11})});
  auto logits0 = forward_logits(cfg, m.bound, base);

  for (std::int64_t t = 1; t + 1 < base.resp_len(); ++t) {
    Batch perturbed = base;
    // change every response input strictly after position t
    for (std::int64_t u = t + 1; u < base.resp_len(); ++u)
      perturbed.resp_in.data[static_cast<std::size_t>(u)] =
          (perturbed.resp_in.data[static_cast<std::size_t>(u)] + 3) % 20;
    auto logits1 = forward_logits(cfg, m.bound, perturbed);
    const std::int64_t v = cfg.vocab_size;
    for (std::int64_t u = 0; u <= t; ++u)
      for (std::int64_t j = 0; j < v; ++j)
        CHECK(std::abs(logits0.data()[static_cast<std::size_t>(u * v + j)] -
                       logits1.data()[static_cast<std::size_t>(u * v + j)]) <= 1e-12);
  }
}

TEST_CASE("output projection is vocabulary-permutation equivariant") {
  auto cfg = tiny_config();
  auto m = Model<T>::init(cfg, 37);
  auto batch = toy_batch({make_sample({{4, 5}}, {6, 7})});
  auto logits0 = forward_logits(cfg, m.bound, batch);

  // swap vocabulary entries 3 and 5 of the output map and bias
  auto w = m.params.at("out.w").mutable_data();
  for (std::int64_t r = 0; r < cfg.d; ++r)
    std::swap(w[static_cast<std::size_t>(r * cfg.vocab_size + 3)], w[static_cast<std::size_t>(r * cfg.vocab_size + 5)]);
  auto bsp = m.params.at("out.b").mutable_data();
  std::swap(bsp[3], bsp[5]);

  auto logits1 = forward_logits(cfg, m.bound, batch);
  const std::int64_t v = cfg.vocab_size;
  for (std::int64_t row = 0; row < batch.resp_len(); ++row)
    for (std::int64_t j = 0; j < v; ++j) {
      const std::int64_t src = j == 3 ? 5 : j == 5 ? 3 : j;
      CHECK(logits1.data()[static_cast<std::size_t>(row * v + j)] ==
            logits0.data()[static_cast<std::size_t>(row * v + src)]);
    }
}

TEST_CASE("mode equivalence: with H_c := H_u the fusion route equals context_only") {
  auto cfg = tiny_config();
  auto m = Model<T>::init(cfg, 41);
  auto batch = toy_batch({make_sample({{4, 5, 6}, {7, 8}}, {9, 10, 11})});
  auto enc = encode(cfg, m.bound, batch);
  EncodedContext<T> degenerate{enc.h_u, enc.h_u, enc.turn_mask};

  auto x_r = positional_encode(embed_lookup(m.bound.embed.table, batch.resp_in));
  const MaskTensor causal = causal_mask(batch.resp_len());

  auto o_c = decode_intention(cfg, m.bound, x_r, degenerate, causal);
  auto o_r = decode_generation(cfg, m.bound, o_c, degenerate, causal);
  auto fusion_logits = add(matmul(o_r, m.bound.out_w), m.bound.out_b);

  // ablation route: every layer cross-attends the same H_c (== H_u here)
  MaskTensor cross({1, 1, 2}, false);
  auto x = x_r;
  for (const auto& block : m.bound.dec) x = decoder_block(block, x, degenerate.h_c, &causal, &cross);
  auto ablation_logits = add(matmul(x, m.bound.out_w), m.bound.out_b);

  for (std::size_t i = 0; i < fusion_logits.data().size(); ++i)
    CHECK(std::abs(fusion_logits.data()[i] - ablation_logits.data()[i]) < 1e-10);
}

TEST_CASE("tied output projection uses the embedding table") {
  auto cfg = tiny_config();
  cfg.tie_output = true;
  auto m = Model<T>::init(cfg, 43);
  CHECK(m.params.tensors.find("out.w") == m.params.tensors.end());
  auto batch = toy_batch({make_sample({{4, 5}}, {6})});
  auto logits = forward_logits(cfg, m.bound, batch);
  CHECK(logits.shape() == Shape{1, batch.resp_len(), cfg.vocab_size});
  CHECK(logits.all_finite());
}

TEST_CASE("uniform logits give ln(V) loss at the model surface") {
  Tsr logits({2, 3, 7}, 0.0);
  IdTensor targets({2, 3}, std::vector<std::int32_t>(6, 2));
  MaskTensor mask({2, 3}, true);
  CHECK(std::abs(nll_loss(logits, targets, mask).item() - std::log(7.0)) < 1e-12);
}

TEST_CASE("end-to-end gradient check on a d=8 H=2 model") {
  auto cfg = tiny_config();
  auto m = Model<T>::init(cfg, 47);
  auto batch = toy_batch({make_sample({{4, 5, 6}, {7, 8}}, {9, 10})});
  auto f = [&]() {
    auto logits = forward_logits(cfg, m.bound, batch);
    return nll_loss(logits, batch.resp_target, batch.resp_mask);
  };
  // a representative leaf per module; the acceptance suite sweeps all of them
  std::vector<Tensor<T>*> leaves{
      &m.params.at("embed.table"),    &m.params.at("gru.w_cand"),
      &m.params.at("gru.u_update"),   &m.params.at("enc.0.attn.q.0"),
      &m.params.at("enc.0.ffn.w1"),   &m.params.at("enc.0.ln_attn.gain"),
      &m.params.at("dec.0.self.k.1"), &m.params.at("dec.0.cross.v.0"),
      &m.params.at("dec.1.ffn.b2"),   &m.params.at("dec.1.ln_ffn.bias"),
      &m.params.at("out.w"),          &m.params.at("out.b")};
  CHECK(grad_check_params<T>(f, leaves) < 1e-4);
}

TEST_CASE("float32 instantiation runs the same network") {
  ModelConfig cfg = tiny_config();
  auto m = Model<float>::init(cfg, 53);
  auto batch = toy_batch({make_sample({{4, 5}}, {6, 7})});
  auto logits = forward_logits(cfg, m.bound, batch);
  CHECK(logits.shape() == Shape{1, batch.resp_len(), cfg.vocab_size});
  CHECK(logits.all_finite());
}
