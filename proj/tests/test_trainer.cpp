#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "xdial/trainer.hpp"

using namespace xdial;

using T = double;
using Tsr = Tensor<double>;

namespace {

bool close(double a, double b, double tol = 1e-12) { return std::abs(a - b) <= tol; }

// Scalar AdamW reference, the same update formulas element by element.
struct ScalarAdamW {
  double lr, b1, b2, eps, wd;
  double m = 0, v = 0;
  std::int64_t t = 0;
  double update(double p, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, static_cast<double>(t)));
    const double vhat = v / (1 - std::pow(b2, static_cast<double>(t)));
    return p - lr * mhat / (std::sqrt(vhat) + eps) - lr * wd * p;
  }
};

ParamSet<T> single_param(const Tsr& t) {
  ParamSet<T> ps;
  Tsr copy = t.clone();
  ps.put("p", copy);
  return ps;
}

void set_grad(ParamSet<T>& ps, const std::string& name, const std::vector<double>& g) {
  auto grads = ps.at(name).mutable_grad();
  REQUIRE(grads.size() == g.size());
  for (std::size_t i = 0; i < g.size(); ++i) grads[i] = g[i];
}

ModelConfig smoke_config() {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers_intention = 1;
  cfg.dec_layers_generation = 1;
  cfg.vocab_size = 24;
  cfg.max_turns = 4;
  cfg.max_sentence_len = 8;
  return cfg;
}

std::vector<Sample> toy_samples() {
  // four distinct (context, response) pairs over a tiny id space
  std::vector<Sample> samples;
  auto add = [&](std::vector<std::int32_t> ctx, std::vector<std::int32_t> resp) {
    Sample s;
    s.context = {std::move(ctx)};
    s.response = std::move(resp);
    samples.push_back(std::move(s));
  };
  add({4, 5}, {6, 7});
  add({8, 9}, {10, 11});
  add({12, 13}, {14, 15});
  add({16, 17}, {18, 19});
  return samples;
}

struct TempDir {
  std::string path;
  explicit TempDir(const std::string& name) : path("/tmp/xdial_trainer_" + name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("adamw decay-only case: zero gradient shrinks the parameter exactly") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  AdamW<T> opt(cfg);
  auto ps = single_param(Tsr({2}, {2.0, -3.0}));
  set_grad(ps, "p", {0.0, 0.0});
  opt.step(ps);
  CHECK(ps.at("p").data()[0] == 2.0 * (1.0 - 0.1 * 0.01));
  CHECK(ps.at("p").data()[1] == -3.0 * (1.0 - 0.1 * 0.01));
}

TEST_CASE("adamw matches the scalar oracle over many steps") {
  AdamWConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  AdamW<T> opt(cfg);
  auto ps = single_param(Tsr({1}, {0.7}));
  ScalarAdamW oracle{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
  double p = 0.7;
  Rng rng(3);
  for (int step = 0; step < 50; ++step) {
    const double g = rng.uniform(-1, 1);
    set_grad(ps, "p", {g});
    opt.step(ps);
    p = oracle.update(p, g);
    CHECK(close(ps.at("p").data()[0], p, 1e-12));
  }

  // with weight decay as well
  AdamWConfig cfg2 = cfg;
  cfg2.weight_decay = 0.01;
  AdamW<T> opt2(cfg2);
  auto ps2 = single_param(Tsr({1}, {0.7}));
  ScalarAdamW oracle2{cfg2.lr, cfg2.beta1, cfg2.beta2, cfg2.eps, cfg2.weight_decay};
  double p2 = 0.7;
  for (int step = 0; step < 50; ++step) {
    const double g = rng.uniform(-1, 1);
    set_grad(ps2, "p", {g});
    opt2.step(ps2);
    p2 = oracle2.update(p2, g);
    CHECK(close(ps2.at("p").data()[0], p2, 1e-12));
  }
}

TEST_CASE("parameters with identical gradient histories get identical updates") {
  AdamW<T> opt{AdamWConfig{}};
  ParamSet<T> ps;
  Tsr a({2}, {1.0, 1.0});
  Tsr b({2}, {1.0, 1.0});
  ps.put("a", a);
  ps.put("b", b);
  for (int step = 0; step < 5; ++step) {
    set_grad(ps, "a", {0.3, -0.2});
    set_grad(ps, "b", {0.3, -0.2});
    opt.step(ps);
    CHECK(ps.at("a").data()[0] == ps.at("b").data()[0]);
    CHECK(ps.at("a").data()[1] == ps.at("b").data()[1]);
  }
}

TEST_CASE("adamw refuses NaN gradients naming the parameter") {
  AdamW<T> opt{AdamWConfig{}};
  auto ps = single_param(Tsr({1}, {1.0}));
  set_grad(ps, "p", {std::nan("")});
  try {
    opt.step(ps);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("'p'") != std::string::npos);
  }
}

TEST_CASE("clip_grad_norm basics and direction preservation") {
  auto ps = single_param(Tsr({2}, {0.0, 0.0}));
  set_grad(ps, "p", {0.0, 0.0});
  CHECK(clip_grad_norm(ps, 1.0) == 1.0);

  set_grad(ps, "p", {3.0, 4.0});
  const double s = clip_grad_norm(ps, 1.0);
  CHECK(close(s, 0.2));
  CHECK(close(ps.at("p").grad()[0], 0.6));
  CHECK(close(ps.at("p").grad()[1], 0.8));

  // post-clip global norm <= max_norm, direction unchanged (property)
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    ParamSet<T> multi;
    Tsr x = Tsr::uniform({3}, rng, -1, 1);
    Tsr y = Tsr::uniform({4}, rng, -1, 1);
    multi.put("x", x);
    multi.put("y", y);
    std::vector<double> raw;
    for (auto& [name, p] : multi.tensors) {
      auto g = p.mutable_grad();
      for (auto& v : g) {
        v = rng.uniform(-5, 5);
        raw.push_back(v);
      }
    }
    clip_grad_norm(multi, 0.5);
    double sq = 0, dot = 0, raw_sq = 0;
    std::size_t k = 0;
    for (auto& [name, p] : multi.tensors)
      for (auto v : p.grad()) {
        sq += v * v;
        dot += v * raw[k];
        raw_sq += raw[k] * raw[k];
        ++k;
      }
    CHECK(std::sqrt(sq) <= 0.5 + 1e-9);
    const double cosine = dot / std::sqrt(sq * raw_sq);
    CHECK(close(cosine, 1.0, 1e-12));
  }
}

TEST_CASE("zero learning-rate... (skipped: lr must be positive; constancy via tiny lr)") {
  // lr is validated positive; the no-op equivalent is checked through exact
  // decay-only and oracle cases above.
  CHECK_THROWS_AS(AdamW<T>(AdamWConfig{0.0, 0.9, 0.999, 1e-8, 0.0, 0}), ConfigError);
}

TEST_CASE("train_epoch drives the toy model loss down and is deterministic") {
  auto cfg = smoke_config();
  TrainConfig tc;
  tc.batch_size = 4;
  tc.seed = 11;
  tc.grad_clip_norm = 1.0;

  auto run = [&](int epochs) {
    auto model = Model<T>::init(cfg, 5);
    AdamW<T> opt{AdamWConfig{}};
    std::vector<double> losses;
    auto samples = toy_samples();
    for (int e = 0; e < epochs; ++e) {
      auto batches = make_batches(samples, tc.batch_size, mix_seed(tc.seed, static_cast<std::uint64_t>(e)));
      losses.push_back(train_epoch(model, batches, opt, tc).train_loss);
    }
    return losses;
  };

  auto l1 = run(300);
  CHECK(l1.front() > l1.back());
  CHECK(l1.back() < 0.5);

  auto l2 = run(300);
  REQUIRE(l1.size() == l2.size());
  for (std::size_t i = 0; i < l1.size(); ++i) CHECK(l1[i] == l2[i]);  // bit-identical
}

TEST_CASE("checkpoint round trip is bit exact and refuses mismatches") {
  TempDir dir("ckpt");
  auto cfg = smoke_config();
  auto model = Model<T>::init(cfg, 21);
  AdamW<T> opt{AdamWConfig{}};

  // take a couple of real steps so the optimizer state is non-trivial
  TrainConfig tc;
  tc.batch_size = 2;
  tc.seed = 3;
  auto batches = make_batches(toy_samples(), tc.batch_size, 9);
  train_epoch(model, batches, opt, tc);

  CheckpointMeta meta;
  meta.vocab_hash = "abc123";
  meta.step = opt.steps();
  meta.epoch = 1;
  save_checkpoint(dir.path + "/ck", model, opt, meta);

  auto loaded = load_checkpoint<T>(dir.path + "/ck", std::string("abc123"));
  CHECK(loaded.meta.step == opt.steps());
  for (const auto& [name, p] : model.params.tensors) {
    const auto& q = loaded.params.at(name);
    REQUIRE(q.shape() == p.shape());
    for (std::size_t i = 0; i < p.data().size(); ++i) CHECK(p.data()[i] == q.data()[i]);
  }
  auto opt2 = loaded.make_optimizer();
  CHECK(opt2.steps() == opt.steps());
  for (const auto& [name, m] : opt.first_moments()) {
    const auto& m2 = opt2.first_moments().at(name);
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(m[i] == m2[i]);
  }

  // bit-identical forward after reload
  auto model2 = std::move(loaded).make_model();
  auto b0 = batches[0];
  auto a = forward_logits(cfg, model.bound, b0);
  auto b = forward_logits(cfg, model2.bound, b0);
  for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);

  // wrong vocab hash refused
  CHECK_THROWS_AS(load_checkpoint<T>(dir.path + "/ck", std::string("zzz")), CheckpointError);
  // wrong dtype refused
  CHECK_THROWS_AS(load_checkpoint<float>(dir.path + "/ck"), CheckpointError);
}

TEST_CASE("resumed training matches uninterrupted training bit for bit") {
  auto cfg = smoke_config();
  TrainConfig tc;
  tc.batch_size = 2;
  tc.seed = 77;
  auto samples = toy_samples();

  // uninterrupted: two epochs
  auto full = Model<T>::init(cfg, 9);
  AdamW<T> full_opt{AdamWConfig{}};
  for (int e = 0; e < 2; ++e) {
    auto batches = make_batches(samples, tc.batch_size, mix_seed(tc.seed, static_cast<std::uint64_t>(e)));
    train_epoch(full, batches, full_opt, tc);
  }

  // interrupted mid-epoch 1: run epoch 0 fully, epoch 1 first batch, checkpoint,
  // reload, finish epoch 1 from the skip point
  TempDir dir("resume");
  auto part = Model<T>::init(cfg, 9);
  AdamW<T> part_opt{AdamWConfig{}};
  {
    auto b0 = make_batches(samples, tc.batch_size, mix_seed(tc.seed, 0));
    train_epoch(part, b0, part_opt, tc);
    auto b1 = make_batches(samples, tc.batch_size, mix_seed(tc.seed, 1));
    std::vector<Batch> first_only(b1.begin(), b1.begin() + 1);
    train_epoch(part, first_only, part_opt, tc);
    CheckpointMeta meta;
    meta.vocab_hash = "h";
    meta.step = part_opt.steps();
    meta.epoch = 1;
    meta.step_in_epoch = 1;
    save_checkpoint(dir.path + "/mid", part, part_opt, meta);
  }
  auto loaded = load_checkpoint<T>(dir.path + "/mid", std::string("h"));
  auto resumed_opt = loaded.make_optimizer();
  auto resumed = std::move(loaded).make_model();
  {
    auto b1 = make_batches(samples, tc.batch_size, mix_seed(tc.seed, 1));
    train_epoch(resumed, b1, resumed_opt, tc, /*skip_first=*/1);
  }

  CHECK(resumed_opt.steps() == full_opt.steps());
  for (const auto& [name, p] : full.params.tensors) {
    const auto& q = resumed.params.at(name);
    for (std::size_t i = 0; i < p.data().size(); ++i) CHECK(p.data()[i] == q.data()[i]);
  }
}

TEST_CASE("train_loop writes last/best checkpoints and logs key=value lines") {
  TempDir dir("loop");
  auto cfg = smoke_config();
  auto model = Model<T>::init(cfg, 31);
  AdamW<T> opt{AdamWConfig{}};
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 2;
  tc.seed = 5;
  tc.validate_every = 1;
  tc.checkpoint_dir = dir.path;

  auto samples = toy_samples();
  std::ostringstream log;
  auto outcome = train_loop(model, samples, &samples, opt, tc, "vh", &log);
  CHECK(outcome.epochs.size() == 3);
  CHECK(outcome.steps == opt.steps());
  CHECK(std::filesystem::exists(dir.path + "/last/manifest.json"));
  CHECK(std::filesystem::exists(dir.path + "/best/params.bin"));
  CHECK(log.str().find("epoch=1 ") != std::string::npos);
  CHECK(log.str().find("train_nll=") != std::string::npos);
  CHECK(log.str().find("dev_nll=") != std::string::npos);

  auto best = load_checkpoint<T>(dir.path + "/best", std::string("vh"));
  CHECK(best.meta.has_dev_nll);
  CHECK(best.meta.dev_nll <= outcome.epochs.front().train_loss + 10.0);
}
