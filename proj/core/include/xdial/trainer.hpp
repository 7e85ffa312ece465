#pragma once

#include <chrono>
#include <iostream>
#include <limits>
#include <optional>

#include "xdial/checkpoint_io.hpp"
#include "xdial/model.hpp"

namespace xdial {

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  int warmup_steps = 0;  // linear warmup when > 0
};

/// AdamW with decoupled weight decay applied to the pre-update parameter:
///   p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * wd * p.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {
    if (cfg.lr <= 0) throw ConfigError("adamw: lr must be positive");
    if (cfg.beta1 <= 0 || cfg.beta1 >= 1 || cfg.beta2 <= 0 || cfg.beta2 >= 1)
      throw ConfigError("adamw: betas must lie in (0,1)");
    if (cfg.eps <= 0) throw ConfigError("adamw: eps must be positive");
    if (cfg.weight_decay < 0) throw ConfigError("adamw: weight_decay must be >= 0");
  }

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }

  void step(ParamSet<T>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double lr_t = cfg_.warmup_steps > 0
                            ? cfg_.lr * std::min(1.0, static_cast<double>(t_) /
                                                          static_cast<double>(cfg_.warmup_steps))
                            : cfg_.lr;
    for (auto& [path, p] : params.tensors) {
      auto grads = p.grad();
      for (T gv : grads)
        if (!std::isfinite(static_cast<double>(gv)))
          throw NumericError("adamw: non-finite gradient in parameter '" + path + "'");
      auto& m = m_[path];
      auto& v = v_[path];
      if (m.empty()) m.assign(grads.size(), T(0));
      if (v.empty()) v.assign(grads.size(), T(0));
      auto vals = p.mutable_data();
      for (std::size_t i = 0; i < grads.size(); ++i) {
        const double g = static_cast<double>(grads[i]);
        const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        const double prev = static_cast<double>(vals[i]);
        vals[i] = static_cast<T>(prev - lr_t * mhat / (std::sqrt(vhat) + cfg_.eps) -
                                 lr_t * cfg_.weight_decay * prev);
      }
    }
  }

  // Serialization access (checkpointing).
  std::map<std::string, std::vector<T>>& first_moments() { return m_; }
  std::map<std::string, std::vector<T>>& second_moments() { return v_; }
  const std::map<std::string, std::vector<T>>& first_moments() const { return m_; }
  const std::map<std::string, std::vector<T>>& second_moments() const { return v_; }
  void restore_step_count(std::int64_t t) { t_ = t; }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, std::vector<T>> m_, v_;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns annotation scale (1.0 when nothing was clipped).
template <typename T>
double clip_grad_norm(ParamSet<T>& params, double max_norm) {
  if (max_norm <= 0) throw ContractError("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (auto& [path, p] : params.tensors)
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return 1.0;
  const double s = max_norm / norm;
  for (auto& [path, p] : params.tensors)
    for (auto& g : p.mutable_grad()) g = static_cast<T>(static_cast<double>(g) * s);
  return s;
}

struct TrainConfig {
  int epochs = 10;
  std::int64_t batch_size = 32;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  int validate_every = 1;  // dev evaluation every N epochs; 0 disables
  std::string checkpoint_dir;
};

struct EpochStats {
  double train_loss = 0.0;  // token-weighted mean NLL
  double tokens_per_sec = 0.0;
  std::int64_t steps = 0;
  std::int64_t tokens = 0;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  Rng r(seed ^ (0x9e3779b97f4a7c15ULL * (salt + 1)));
  return r.next_u64();
}

inline std::int64_t count_mask(const MaskTensor& m) {
  std::int64_t n = 0;
  for (auto v : m.data) n += v ? 1 : 0;
  return n;
}

/// One optimization pass over `batches`: forward, NLL, backward, clip, AdamW
/// step, tape reset. `skip_first` supports mid-epoch checkpoint resume.
template <typename T>
EpochStats train_epoch(Model<T>& model, const std::vector<Batch>& batches, AdamW<T>& opt,
                       const TrainConfig& cfg, std::int64_t skip_first = 0) {
  EpochStats stats;
  double weighted = 0.0;
  const auto started = std::chrono::steady_clock::now();
  for (std::size_t bi = static_cast<std::size_t>(skip_first); bi < batches.size(); ++bi) {
    const Batch& batch = batches[bi];
    double loss_value = 0.0;
    {
      Tape<T> tape;
      ForwardCtx fwd;
      fwd.training = true;
      fwd.dropout_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(opt.steps()) + 1);
      auto logits = forward_logits(model.config, model.bound, batch, fwd);
      auto loss = nll_loss(logits, batch.resp_target, batch.resp_mask);
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value))
        throw NumericError("train: non-finite loss at batch " + std::to_string(bi));
      model.params.zero_grads();
      tape.backward(loss);
    }
    if (cfg.grad_clip_norm > 0) clip_grad_norm(model.params, cfg.grad_clip_norm);
    opt.step(model.params);

    const std::int64_t tokens = count_mask(batch.resp_mask);
    weighted += loss_value * static_cast<double>(tokens);
    stats.tokens += tokens;
    ++stats.steps;
  }
  const auto elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  stats.train_loss = stats.tokens > 0 ? weighted / static_cast<double>(stats.tokens) : 0.0;
  stats.tokens_per_sec = elapsed > 0 ? static_cast<double>(stats.tokens) / elapsed : 0.0;
  return stats;
}

/// Token-weighted mean NLL without gradients (dev/validation metric).
template <typename T>
double evaluate_nll(const Model<T>& model, const std::vector<Batch>& batches) {
  double weighted = 0.0;
  std::int64_t tokens = 0;
  for (const auto& batch : batches) {
    auto logits = forward_logits(model.config, model.bound, batch);
    auto loss = nll_loss(logits, batch.resp_target, batch.resp_mask);
    const std::int64_t n = count_mask(batch.resp_mask);
    weighted += static_cast<double>(loss.item()) * static_cast<double>(n);
    tokens += n;
  }
  if (tokens == 0) throw ContractError("evaluate_nll: no target tokens");
  return weighted / static_cast<double>(tokens);
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const std::string& dir, const Model<T>& model, const AdamW<T>& opt,
                     const CheckpointMeta& meta) {
  ensure_directory(dir);
  Manifest man;
  man.dtype = dtype_name<T>();
  man.model = model.config;
  man.meta = meta;
  man.optim_t = opt.steps();
  man.optim_lr = opt.config().lr;
  man.optim_beta1 = opt.config().beta1;
  man.optim_beta2 = opt.config().beta2;
  man.optim_eps = opt.config().eps;
  man.optim_weight_decay = opt.config().weight_decay;
  man.optim_warmup_steps = opt.config().warmup_steps;

  std::vector<T> params_blob;
  for (const auto& [name, p] : model.params.tensors) {  // std::map: lexicographic
    TensorRecord rec{name, p.shape(), static_cast<std::int64_t>(params_blob.size()), p.numel()};
    params_blob.insert(params_blob.end(), p.data().begin(), p.data().end());
    man.params.push_back(std::move(rec));
  }
  std::vector<T> optim_blob;
  auto dump_moments = [&](const std::map<std::string, std::vector<T>>& moments,
                          const std::string& prefix) {
    for (const auto& [name, values] : moments) {
      TensorRecord rec{prefix + name, model.params.at(name).shape(),
                       static_cast<std::int64_t>(optim_blob.size()),
                       static_cast<std::int64_t>(values.size())};
      optim_blob.insert(optim_blob.end(), values.begin(), values.end());
      man.optim.push_back(std::move(rec));
    }
  };
  dump_moments(opt.first_moments(), "m.");
  dump_moments(opt.second_moments(), "v.");

  write_blob(dir + "/params.bin", params_blob.data(), params_blob.size() * sizeof(T));
  write_blob(dir + "/optim.bin", optim_blob.data(), optim_blob.size() * sizeof(T));
  write_manifest(dir + "/manifest.json", man);
}

template <typename T>
struct LoadedCheckpoint {
  ModelConfig config;
  ParamSet<T> params;
  AdamWConfig optim_config;
  std::int64_t optim_t = 0;
  std::map<std::string, std::vector<T>> optim_m, optim_v;
  CheckpointMeta meta;

  Model<T> make_model() && {
    Model<T> m;
    m.config = config;
    m.params = std::move(params);
    m.rebind();
    return m;
  }
  AdamW<T> make_optimizer() const {
    AdamW<T> opt(optim_config);
    opt.first_moments() = optim_m;
    opt.second_moments() = optim_v;
    opt.restore_step_count(optim_t);
    return opt;
  }
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& dir,
                                    std::optional<std::string> expect_vocab_hash = {}) {
  Manifest man = read_manifest(dir + "/manifest.json");
  if (man.dtype != dtype_name<T>())
    throw CheckpointError("checkpoint: dtype is " + man.dtype + ", expected " +
                          std::string(dtype_name<T>()));
  if (expect_vocab_hash && *expect_vocab_hash != man.meta.vocab_hash)
    throw CheckpointError("checkpoint: vocab hash mismatch (checkpoint " + man.meta.vocab_hash +
                          ", current " + *expect_vocab_hash + ")");

  const auto params_bytes = read_blob(dir + "/params.bin");
  const auto optim_bytes = read_blob(dir + "/optim.bin");
  const T* pb = reinterpret_cast<const T*>(params_bytes.data());
  const T* ob = reinterpret_cast<const T*>(optim_bytes.data());
  const auto pcount = static_cast<std::int64_t>(params_bytes.size() / sizeof(T));
  const auto ocount = static_cast<std::int64_t>(optim_bytes.size() / sizeof(T));

  LoadedCheckpoint<T> out;
  out.config = man.model;
  out.meta = man.meta;
  out.optim_t = man.optim_t;
  out.optim_config = AdamWConfig{man.optim_lr, man.optim_beta1, man.optim_beta2, man.optim_eps,
                                 man.optim_weight_decay, man.optim_warmup_steps};
  for (const auto& rec : man.params) {
    if (rec.offset < 0 || rec.offset + rec.length > pcount || rec.length != shape_numel(rec.shape))
      throw CheckpointError("checkpoint: corrupt record for '" + rec.name + "'");
    Tensor<T> t(rec.shape, std::vector<T>(pb + rec.offset, pb + rec.offset + rec.length));
    out.params.put(rec.name, t);
  }
  for (const auto& rec : man.optim) {
    if (rec.offset < 0 || rec.offset + rec.length > ocount)
      throw CheckpointError("checkpoint: corrupt optimizer record for '" + rec.name + "'");
    std::vector<T> values(ob + rec.offset, ob + rec.offset + rec.length);
    if (rec.name.rfind("m.", 0) == 0)
      out.optim_m[rec.name.substr(2)] = std::move(values);
    else if (rec.name.rfind("v.", 0) == 0)
      out.optim_v[rec.name.substr(2)] = std::move(values);
    else
      throw CheckpointError("checkpoint: unknown optimizer record '" + rec.name + "'");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-epoch driver with per-epoch validation, best-dev checkpointing and
// deterministic resume (per-epoch shuffles derive from seed and epoch only).
// ---------------------------------------------------------------------------

struct TrainProgress {
  std::int64_t global_step = 0;
  std::int64_t epoch = 0;          // next epoch to run
  std::int64_t step_in_epoch = 0;  // batches already consumed in `epoch`
  double best_dev = std::numeric_limits<double>::infinity();
};

template <typename T>
struct TrainOutcome {
  std::vector<EpochStats> epochs;
  double best_dev = std::numeric_limits<double>::infinity();
  std::int64_t steps = 0;
};

template <typename T>
TrainOutcome<T> train_loop(Model<T>& model, const std::vector<Sample>& train_samples,
                           const std::vector<Sample>* dev_samples, AdamW<T>& opt,
                           const TrainConfig& cfg, const std::string& vocab_hash,
                           std::ostream* log = nullptr, TrainProgress progress = {}) {
  TrainOutcome<T> out;
  std::vector<Batch> dev_batches;
  if (dev_samples && !dev_samples->empty())
    dev_batches = make_batches(*dev_samples, cfg.batch_size, mix_seed(cfg.seed, 0xdee));

  out.best_dev = progress.best_dev;
  for (std::int64_t epoch = progress.epoch; epoch < cfg.epochs; ++epoch) {
    auto batches = make_batches(train_samples, cfg.batch_size,
                                mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    const std::int64_t skip = epoch == progress.epoch ? progress.step_in_epoch : 0;
    auto stats = train_epoch(model, batches, opt, cfg, skip);
    out.epochs.push_back(stats);
    out.steps = opt.steps();

    double dev_nll = 0.0;
    bool have_dev = false;
    if (!dev_batches.empty() && cfg.validate_every > 0 &&
        ((epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs)) {
      dev_nll = evaluate_nll(model, dev_batches);
      have_dev = true;
    }
    if (log) {
      (*log) << "epoch=" << (epoch + 1) << " step=" << opt.steps()
             << " train_nll=" << stats.train_loss;
      if (have_dev) (*log) << " dev_nll=" << dev_nll;
      (*log) << " tok_s=" << static_cast<std::int64_t>(stats.tokens_per_sec) << "\n";
    }

    if (!cfg.checkpoint_dir.empty()) {
      CheckpointMeta meta;
      meta.vocab_hash = vocab_hash;
      meta.step = opt.steps();
      meta.epoch = epoch + 1;
      meta.step_in_epoch = 0;
      meta.has_dev_nll = have_dev;
      meta.dev_nll = dev_nll;
      save_checkpoint(cfg.checkpoint_dir + "/last", model, opt, meta);
      if (have_dev && dev_nll < out.best_dev) {
        out.best_dev = dev_nll;
        save_checkpoint(cfg.checkpoint_dir + "/best", model, opt, meta);
      }
    }
  }
  return out;
}

}  // namespace xdial
