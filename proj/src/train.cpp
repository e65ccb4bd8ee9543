#include "rbsn/train.hpp"

#include <openssl/evp.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "rbsn/binio.hpp"
#include "rbsn/error.hpp"

namespace rbsn {

namespace {

void write_bn(ByteWriter& w, const std::vector<BnState>& states) {
  w.u32(static_cast<std::uint32_t>(states.size()));
  for (const auto& s : states) {
    w.u32(static_cast<std::uint32_t>(s.running_mean.size()));
    w.u64(std::bit_cast<std::uint64_t>(s.momentum));
    w.u64(std::bit_cast<std::uint64_t>(s.epsilon));
    for (double v : s.running_mean) w.u64(std::bit_cast<std::uint64_t>(v));
    for (double v : s.running_var) w.u64(std::bit_cast<std::uint64_t>(v));
  }
}

std::vector<BnState> read_bn(ByteReader& r) {
  std::vector<BnState> out(r.u32());
  for (auto& s : out) {
    const auto n = r.u32();
    RBSN_CHECK(n <= r.remaining() / 16, FormatError, r.what() + ": truncated batch-norm state");
    s = BnState(n);
    s.momentum = std::bit_cast<double>(r.u64());
    s.epsilon = std::bit_cast<double>(r.u64());
    for (auto& v : s.running_mean) v = std::bit_cast<double>(r.u64());
    for (auto& v : s.running_var) v = std::bit_cast<double>(r.u64());
  }
  return out;
}

void write_floats(ByteWriter& w, const std::vector<float>& values) {
  w.u64(values.size());
  for (float v : values) w.f32(v);
}

std::vector<float> read_floats(ByteReader& r) {
  const auto n = r.u64();
  RBSN_CHECK(n <= r.remaining() / 4, FormatError, r.what() + ": truncated float block");
  std::vector<float> out(n);
  for (auto& v : out) v = r.f32();
  return out;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

AttackKind parse_attack_kind(const std::string& name) {
  if (name == "none") return AttackKind::None;
  if (name == "pgd") return AttackKind::Pgd;
  if (name == "fgsm_atta") return AttackKind::FgsmAtta;
  throw ConfigError("unknown attack '" + name + "' (expected none, pgd or fgsm_atta)");
}

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::None: return "none";
    case AttackKind::Pgd: return "pgd";
    case AttackKind::FgsmAtta: return "fgsm_atta";
  }
  return "?";
}

void TrainConfig::validate() const {
  RBSN_CHECK(epochs >= 0, ConfigError, "epochs must be >= 0");
  RBSN_CHECK(batch_size >= 1 && eval_batch_size >= 1, ConfigError, "batch sizes must be positive");
  RBSN_CHECK(lr0 > 0.0, ConfigError, "lr0 must be positive");
  RBSN_CHECK(momentum >= 0.0 && momentum < 1.0, ConfigError, "momentum must be in [0, 1)");
  RBSN_CHECK(weight_decay >= 0.0, ConfigError, "weight_decay must be >= 0");
  RBSN_CHECK(budget.epsilon >= 0.0, ConfigError, "epsilon must be >= 0");
  RBSN_CHECK(train_pgd_steps >= 1 && eval_pgd_steps >= 0, ConfigError, "PGD step counts out of range");
  RBSN_CHECK(pgd_step_fraction > 0.0 && fgsm_step_fraction > 0.0, ConfigError, "attack step sizes must be positive");
  RBSN_CHECK(atta_factor >= 1, ConfigError, "atta_factor must be positive");
  RBSN_CHECK(r >= 0.0 && r < 1.0, ConfigError, "r must be in [0, 1)");
  RBSN_CHECK(p >= 0.0 && p <= 1.0, ConfigError, "p must be in [0, 1]");
}

std::string RunMetrics::to_csv() const {
  std::string out = "epoch,lr,train_loss,clean_acc,robust_acc,seconds\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.lr) + "," + format_double(e.train_loss) + "," +
           format_double(e.clean_acc) + "," + format_double(e.robust_acc) + "," +
           (e.seconds ? format_double(*e.seconds) : std::string()) + "\n";
  }
  return out;
}

double cosine_lr(int t, int total, double lr0) {
  RBSN_CHECK(total > 0, ConfigError, "cosine schedule needs at least one epoch");
  RBSN_CHECK(t >= 0 && t <= total, ConfigError, "epoch index outside the schedule");
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

void sgd_step(ScoreSet& scores, std::span<const Tensor<float>> grads, std::vector<std::vector<float>>& velocity,
              double lr, double momentum, double weight_decay) {
  RBSN_CHECK(grads.size() == scores.layers.size(), ShapeError, "gradient / score layer count mismatch");
  if (velocity.empty()) {
    for (const auto& l : scores.layers) velocity.emplace_back(l.values.size(), 0.0f);
  }
  RBSN_CHECK(velocity.size() == scores.layers.size(), ShapeError, "velocity layer count mismatch");
  const float lr_f = static_cast<float>(lr), mom = static_cast<float>(momentum), wd = static_cast<float>(weight_decay);
  for (std::size_t l = 0; l < grads.size(); ++l) {
    auto& s = scores.layers[l].values;
    auto& v = velocity[l];
    RBSN_CHECK(grads[l].size() == s.size() && v.size() == s.size(), ShapeError,
               "gradient shape mismatch in " + scores.layers[l].name);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const float g = grads[l][i] + wd * s[i];
      v[i] = mom * v[i] + g;
      s[i] -= lr_f * v[i];
    }
  }
}

std::string weight_hash(std::span<const Tensor<float>> weights) {
  ByteWriter w;
  for (const auto& t : weights) {
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (float v : t.data) w.f32(v);
  }
  const auto& bytes = w.bytes();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  RBSN_CHECK(EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) == 1, Error,
             "SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

MaskSet current_mask(const ScoreSet& scores, const AllocationPlan& plan, AllocationKind kind, double r) {
  return kind == AllocationKind::Global ? strategy_global(scores, r) : binarize(scores, plan);
}

EvalResult evaluate(Network<float>& net, const MaskSet& mask, const Dataset& data, const AdversarialBudget& budget,
                    int pgd_steps, double step_size, std::uint64_t seed, std::size_t batch_size) {
  RBSN_CHECK(batch_size >= 1, ConfigError, "evaluation batch size must be positive");
  EvalResult out;
  out.samples = data.size();
  if (data.size() == 0) return out;
  const bool attack = pgd_steps > 0 && budget.epsilon > 0.0;
  const Rng base = Rng::derive(seed, "eval-pgd");
  std::size_t clean = 0, robust = 0;
  std::vector<std::size_t> pos;
  for (std::size_t start = 0, b = 0; start < data.size(); start += batch_size, ++b) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    pos.resize(end - start);
    std::iota(pos.begin(), pos.end(), start);
    const auto x = data.gather_inputs(pos);
    std::span<const int> y(data.labels.data() + start, end - start);
    const auto pred = net.predict(mask, x);
    std::vector<int> adv_pred = pred;
    if (attack) {
      Rng rng = base.child(b);
      auto adv = pgd_attack<float>(network_loss_grad(net, mask, y, BnMode::Eval), x, budget,
                                   PgdOptions{pgd_steps, step_size, true}, rng);
      adv_pred = net.predict(mask, adv);
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
      clean += pred[i] == y[i];
      robust += adv_pred[i] == y[i];
    }
  }
  out.clean_acc = static_cast<double>(clean) / static_cast<double>(data.size());
  out.robust_acc = static_cast<double>(robust) / static_cast<double>(data.size());
  return out;
}

TrainResult train(const NetworkSpec& spec, const std::vector<Tensor<float>>& weights, const Dataset& train_set,
                  const Dataset& val_set, const TrainConfig& config, ScoreSet scores, const EpochCallback& on_epoch) {
  config.validate();
  Network<float> net(spec, weights);
  RBSN_CHECK(scores.layers.size() == net.prunable().size(), ShapeError, "score layers do not match the network");
  for (std::size_t l = 0; l < scores.layers.size(); ++l) {
    RBSN_CHECK(scores.layers[l].shape == net.prunable()[l].weight_shape, ShapeError,
               "scores for " + scores.layers[l].name + " have the wrong shape");
  }

  TrainResult result;
  result.weight_hash_before = weight_hash(net.weights());
  result.plan = solve_allocation(prunable_sizes(spec), config.r, config.p);

  std::vector<std::vector<float>> velocity;
  int start_epoch = 0;
  result.best_mask = current_mask(scores, result.plan, config.allocation, config.r);
  result.best_bn = net.bn_states();

  const double eps = config.budget.epsilon;
  std::optional<PerturbationCache> cache;
  if (config.attack == AttackKind::FgsmAtta) {
    cache.emplace(train_set.sample_shape(), config.atta_factor, eps);
    cache->set_key_space(train_set.indices);
  }
  const auto cache_path = [&] {
    auto p = config.checkpoint;
    p += ".cache";
    return p;
  };

  if (!config.checkpoint.empty() && std::filesystem::exists(config.checkpoint)) {
    auto ckpt = decode_checkpoint(read_file_bytes(config.checkpoint));
    RBSN_CHECK(ckpt.scores.layer_sizes().sizes == scores.layer_sizes().sizes, FormatError,
               "checkpoint does not match this network");
    start_epoch = ckpt.next_epoch;
    scores = std::move(ckpt.scores);
    velocity = std::move(ckpt.velocity);
    net.bn_states() = std::move(ckpt.bn);
    result.metrics = std::move(ckpt.metrics);
    result.best_mask = std::move(ckpt.best_mask);
    result.best_bn = std::move(ckpt.best_bn);
    if (cache && std::filesystem::exists(cache_path())) {
      *cache = PerturbationCache::load_file(cache_path());
      cache->set_key_space(train_set.indices);
    }
  }

  if (config.epochs > 0) {
    RBSN_CHECK(train_set.size() > 0, ConfigError, "empty training set");
    RBSN_CHECK(val_set.size() > 0, ConfigError, "empty validation set");
  }

  const std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  for (int epoch = start_epoch; epoch < config.epochs && !result.metrics.aborted; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr(epoch, config.epochs, config.lr0);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng::derive(config.seed, "shuffle").child(static_cast<std::uint64_t>(epoch)).shuffle(std::span(order));
    Rng aug_rng = Rng::derive(config.seed, "augment").child(static_cast<std::uint64_t>(epoch));
    Rng atk_rng = Rng::derive(config.seed, "attack").child(static_cast<std::uint64_t>(epoch));

    const ScoreSet last_good = scores;
    const auto last_good_velocity = velocity;
    const auto last_good_bn = net.bn_states();
    double loss_sum = 0.0;
    try {
      for (std::size_t start = 0; start < n; start += config.batch_size) {
        const std::size_t end = std::min(n, start + config.batch_size);
        std::span<const std::size_t> pos(order.data() + start, end - start);
        auto x = train_set.gather_inputs(pos);
        std::vector<int> y;
        std::vector<std::uint64_t> idx;
        for (auto p : pos) {
          y.push_back(train_set.labels[p]);
          idx.push_back(train_set.indices[p]);
        }
        const auto records = augment(x, config.augment, aug_rng);
        const auto mask = current_mask(scores, result.plan, config.allocation, config.r);

        Tensor<float> input;
        switch (config.attack) {
          case AttackKind::None:
            input = std::move(x);
            break;
          case AttackKind::Pgd:
            input = eps > 0.0 ? pgd_attack<float>(network_loss_grad(net, mask, y, config.attack_bn), x, config.budget,
                                                  PgdOptions{config.train_pgd_steps, eps * config.pgd_step_fraction, true},
                                                  atk_rng)
                              : std::move(x);
            break;
          case AttackKind::FgsmAtta:
            input = eps > 0.0 ? fgsm_atta_step(network_loss_grad(net, mask, y, config.attack_bn), x, idx, records,
                                               config.budget, eps * config.fgsm_step_fraction, *cache, atk_rng)
                              : std::move(x);
            break;
        }
        auto pass = net.forward(mask, input, ForwardOptions{BnMode::Train, true});
        auto res = net.backward(pass, y, BackwardOptions{true, false, false});
        sgd_step(scores, res.grad_scores, velocity, lr, config.momentum, config.weight_decay);
        for (const auto& l : scores.layers) {
          for (float v : l.values) {
            if (!std::isfinite(v)) throw DivergenceError("non-finite score after update");
          }
        }
        loss_sum += res.loss * static_cast<double>(end - start);
      }
    } catch (const DivergenceError& e) {
      result.metrics.aborted = true;
      result.metrics.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
      scores = last_good;
      velocity = last_good_velocity;
      net.bn_states() = last_good_bn;
      break;
    }

    const auto mask = current_mask(scores, result.plan, config.allocation, config.r);
    const auto ev = evaluate(net, mask, val_set, config.budget, config.eval_pgd_steps, eps * config.pgd_step_fraction,
                             Rng::derive(config.seed, "validation").child(static_cast<std::uint64_t>(epoch)).seed(),
                             config.eval_batch_size);
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(n);
    m.clean_acc = ev.clean_acc;
    m.robust_acc = ev.robust_acc;
    if (config.timing) {
      m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    result.metrics.epochs.push_back(m);
    if (ev.robust_acc > result.metrics.best_robust) {
      result.metrics.best_robust = ev.robust_acc;
      result.metrics.best_epoch = epoch;
      result.best_mask = mask;
      result.best_bn = net.bn_states();
    }
    if (!config.checkpoint.empty()) {
      Checkpoint ckpt{epoch + 1, scores, velocity, net.bn_states(), result.metrics, result.best_mask, result.best_bn};
      if (cache) cache->save(cache_path());
      write_file_atomic(config.checkpoint, encode_checkpoint(ckpt));
    }
    if (on_epoch) on_epoch(m, mask);
  }

  result.final_scores = std::move(scores);
  result.weight_hash_after = weight_hash(net.weights());
  RBSN_CHECK(result.weight_hash_before == result.weight_hash_after, Error, "frozen weights changed during training");
  return result;
}

// ----- serialization -----------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.magic("RBSC");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(ckpt.next_epoch));
  w.u64(std::bit_cast<std::uint64_t>(ckpt.scores.init_halfwidth));
  w.u32(static_cast<std::uint32_t>(ckpt.scores.layers.size()));
  for (const auto& l : ckpt.scores.layers) {
    w.str(l.name);
    w.u32(static_cast<std::uint32_t>(l.shape.size()));
    for (auto d : l.shape) w.u32(static_cast<std::uint32_t>(d));
    write_floats(w, l.values);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.velocity.size()));
  for (const auto& v : ckpt.velocity) write_floats(w, v);
  write_bn(w, ckpt.bn);
  w.u32(static_cast<std::uint32_t>(ckpt.metrics.best_epoch + 1));
  w.u64(std::bit_cast<std::uint64_t>(ckpt.metrics.best_robust));
  w.u32(static_cast<std::uint32_t>(ckpt.metrics.epochs.size()));
  for (const auto& e : ckpt.metrics.epochs) {
    w.u32(static_cast<std::uint32_t>(e.epoch));
    for (double v : {e.lr, e.train_loss, e.clean_acc, e.robust_acc}) w.u64(std::bit_cast<std::uint64_t>(v));
    w.u8(e.seconds ? 1 : 0);
    w.u64(std::bit_cast<std::uint64_t>(e.seconds.value_or(0.0)));
  }
  const auto mask = encode_rbsm(ckpt.best_mask);
  w.u64(mask.size());
  w.raw(mask);
  write_bn(w, ckpt.best_bn);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "RBSC checkpoint");
  r.expect_magic("RBSC");
  const auto version = r.u32();
  RBSN_CHECK(version == 1, FormatError, "RBSC checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  c.next_epoch = static_cast<int>(r.u32());
  c.scores.init_halfwidth = std::bit_cast<double>(r.u64());
  const auto layers = r.u32();
  for (std::uint32_t l = 0; l < layers; ++l) {
    ScoreTensor s;
    s.name = r.str();
    const auto ndim = r.u32();
    RBSN_CHECK(ndim <= 8, FormatError, "RBSC checkpoint: implausible rank");
    for (std::uint32_t d = 0; d < ndim; ++d) s.shape.push_back(r.u32());
    s.values = read_floats(r);
    RBSN_CHECK(s.values.size() == numel(s.shape), FormatError, "RBSC checkpoint: score size mismatch");
    c.scores.layers.push_back(std::move(s));
  }
  const auto vel = r.u32();
  for (std::uint32_t l = 0; l < vel; ++l) c.velocity.push_back(read_floats(r));
  c.bn = read_bn(r);
  c.metrics.best_epoch = static_cast<int>(r.u32()) - 1;
  c.metrics.best_robust = std::bit_cast<double>(r.u64());
  const auto rows = r.u32();
  for (std::uint32_t i = 0; i < rows; ++i) {
    EpochMetrics e;
    e.epoch = static_cast<int>(r.u32());
    e.lr = std::bit_cast<double>(r.u64());
    e.train_loss = std::bit_cast<double>(r.u64());
    e.clean_acc = std::bit_cast<double>(r.u64());
    e.robust_acc = std::bit_cast<double>(r.u64());
    const bool timed = r.u8() != 0;
    const double secs = std::bit_cast<double>(r.u64());
    if (timed) e.seconds = secs;
    c.metrics.epochs.push_back(e);
  }
  const auto mask_len = r.u64();
  RBSN_CHECK(mask_len <= r.remaining(), FormatError, "RBSC checkpoint: truncated mask");
  c.best_mask = decode_rbsm(r.raw(mask_len));
  c.best_bn = read_bn(r);
  RBSN_CHECK(r.at_end(), FormatError, "RBSC checkpoint: trailing bytes");
  return c;
}

std::vector<std::uint8_t> encode_bn_states(const std::vector<BnState>& states) {
  ByteWriter w;
  w.magic("RBSB");
  w.u32(1);
  write_bn(w, states);
  return w.take();
}

std::vector<BnState> decode_bn_states(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "RBSB batch-norm state");
  r.expect_magic("RBSB");
  RBSN_CHECK(r.u32() == 1, FormatError, "RBSB batch-norm state: unsupported version");
  auto out = read_bn(r);
  RBSN_CHECK(r.at_end(), FormatError, "RBSB batch-norm state: trailing bytes");
  return out;
}

}  // namespace rbsn
