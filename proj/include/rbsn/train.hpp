#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rbsn/alloc.hpp"
#include "rbsn/attack.hpp"
#include "rbsn/data.hpp"
#include "rbsn/mask.hpp"
#include "rbsn/nn.hpp"

namespace rbsn {

enum class AttackKind { None, Pgd, FgsmAtta };
enum class AllocationKind { Adaptive, Global };

AttackKind parse_attack_kind(const std::string& name);
std::string to_string(AttackKind kind);

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 128;
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  AttackKind attack = AttackKind::Pgd;
  AdversarialBudget budget{};
  int train_pgd_steps = 7;
  int eval_pgd_steps = 10;
  /// PGD step size as a fraction of epsilon.
  double pgd_step_fraction = 0.25;
  /// FGSM step size as a fraction of epsilon.
  double fgsm_step_fraction = 1.0;
  int atta_factor = 2;
  /// Batch-norm mode while generating training attacks.
  BnMode attack_bn = BnMode::Train;

  double r = 0.9;
  double p = 0.1;
  AllocationKind allocation = AllocationKind::Adaptive;
  AugmentPolicy augment = AugmentPolicy::None;
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 256;
  /// Fill the seconds column of the metrics CSV.
  bool timing = false;
  /// Write a checkpoint here after every epoch (and resume from it if present).
  std::filesystem::path checkpoint;

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double clean_acc = 0.0;
  double robust_acc = 0.0;
  std::optional<double> seconds;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  int best_epoch = -1;
  double best_robust = -1.0;
  bool aborted = false;
  std::string abort_reason;

  /// `epoch,lr,train_loss,clean_acc,robust_acc,seconds`; seconds empty unless timed.
  std::string to_csv() const;
};

struct EvalResult {
  double clean_acc = 0.0;
  double robust_acc = 0.0;
  std::size_t samples = 0;
};

struct TrainResult {
  AllocationPlan plan;
  MaskSet best_mask;
  std::vector<BnState> best_bn;
  ScoreSet final_scores;
  RunMetrics metrics;
  std::string weight_hash_before;
  std::string weight_hash_after;
};

double cosine_lr(int t, int total, double lr0);

/// g = grad + wd * s; v = momentum * v + g; s -= lr * v. Velocity is created on first use.
void sgd_step(ScoreSet& scores, std::span<const Tensor<float>> grads, std::vector<std::vector<float>>& velocity,
              double lr, double momentum, double weight_decay);

/// Hex SHA-256 over the shapes and raw bytes of every weight tensor.
std::string weight_hash(std::span<const Tensor<float>> weights);

/// Allocation for `scores` under the configured strategy.
MaskSet current_mask(const ScoreSet& scores, const AllocationPlan& plan, AllocationKind kind, double r);

/// Clean and PGD accuracy with eval-mode batch norm. steps == 0 or epsilon == 0
/// skips the attack (robust accuracy is then the clean accuracy).
EvalResult evaluate(Network<float>& net, const MaskSet& mask, const Dataset& data, const AdversarialBudget& budget,
                    int pgd_steps, double step_size, std::uint64_t seed, std::size_t batch_size = 256);

using EpochCallback = std::function<void(const EpochMetrics&, const MaskSet&)>;

/// Score-only adversarial training of the masked network. Weights are never
/// written; the returned mask and BN state come from the epoch with the best
/// robust validation accuracy.
TrainResult train(const NetworkSpec& spec, const std::vector<Tensor<float>>& weights, const Dataset& train_set,
                  const Dataset& val_set, const TrainConfig& config, ScoreSet scores,
                  const EpochCallback& on_epoch = {});

// Checkpoint ("RBSC"): everything needed to continue a run bit-identically.
struct Checkpoint {
  int next_epoch = 0;
  ScoreSet scores;
  std::vector<std::vector<float>> velocity;
  std::vector<BnState> bn;
  RunMetrics metrics;
  MaskSet best_mask;
  std::vector<BnState> best_bn;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// BN running statistics ("RBSB" header, f64 values) stored next to a mask.
std::vector<std::uint8_t> encode_bn_states(const std::vector<BnState>& states);
std::vector<BnState> decode_bn_states(std::span<const std::uint8_t> bytes);

}  // namespace rbsn
