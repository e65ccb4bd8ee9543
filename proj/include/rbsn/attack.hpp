#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <vector>

#include "rbsn/data.hpp"
#include "rbsn/nn.hpp"
#include "rbsn/rng.hpp"

namespace rbsn {

/// l-infinity ball of radius epsilon; with clip_valid_range the perturbed
/// input is also kept inside [0, 1].
struct AdversarialBudget {
  double epsilon = 8.0 / 255.0;
  bool clip_valid_range = true;
};

/// Clamps delta to [-eps, eps] and, if clipping, so that x + delta stays in [0, 1].
template <typename T>
void project_linf(Tensor<T>& delta, const Tensor<T>& x, const AdversarialBudget& budget);

/// Loss at x and its gradient with respect to x (written to grad).
template <typename T>
using LossGradFn = std::function<double(const Tensor<T>& x, Tensor<T>& grad)>;

/// Mean cross-entropy of a masked network. Batch norm runs in `mode` without
/// touching the running statistics.
template <typename T>
LossGradFn<T> network_loss_grad(Network<T>& net, const MaskSet& mask, std::span<const int> labels,
                                BnMode mode = BnMode::Train);

struct PgdOptions {
  int steps = 10;
  /// Step size alpha; the default protocol uses epsilon / 4.
  double step_size = 0.0;
  bool random_start = true;
};

/// delta <- Proj(delta + alpha * sign(grad)) for `steps` iterations starting
/// from uniform noise in the budget. Returns the perturbed input.
template <typename T>
Tensor<T> pgd_attack(const LossGradFn<T>& loss_grad, const Tensor<T>& x, const AdversarialBudget& budget,
                     const PgdOptions& options, Rng& rng);

/// Per-sample perturbations kept across epochs at reduced resolution.
/// Values are stored in the un-augmented frame and are always inside the
/// budget. Callers hold lock() while a batch reads and writes its entries.
class PerturbationCache {
 public:
  /// `sample_shape` is {C, H, W} (or {D} with factor 1); factor must divide H and W.
  PerturbationCache(Shape sample_shape, int factor, double epsilon);
  PerturbationCache(PerturbationCache&& other) noexcept;
  PerturbationCache& operator=(PerturbationCache&& other) noexcept;

  /// Restricts the keys that may be stored (the training split's indices).
  void set_key_space(std::vector<std::uint64_t> keys);

  bool contains(std::uint64_t index) const { return entries_.count(index) != 0; }
  std::size_t size() const { return entries_.size(); }
  int factor() const { return factor_; }
  double epsilon() const { return epsilon_; }
  const Shape& sample_shape() const { return sample_shape_; }
  const Shape& stored_shape() const { return stored_shape_; }
  std::mutex& lock() { return mutex_; }

  /// Inverse-augments delta, downsamples, projects into [-eps, eps] and stores it.
  void store(std::uint64_t index, std::span<const float> delta, const AugmentRecord* record);
  /// Upsamples the stored entry and re-applies the augmentation. False if absent.
  bool load(std::uint64_t index, std::span<float> delta, const AugmentRecord* record) const;
  const std::vector<float>* raw(std::uint64_t index) const;

  std::vector<float> downsample(std::span<const float> full) const;
  std::vector<float> upsample(std::span<const float> small) const;

  // "RBSP": u32 version, u32 factor, f64 epsilon, u32 ndim, dims of the full
  // sample, u64 count, then per entry u64 index and the stored floats.
  std::vector<std::uint8_t> encode() const;
  static PerturbationCache decode(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static PerturbationCache load_file(const std::filesystem::path& path);

  bool operator==(const PerturbationCache& other) const;

 private:
  Shape sample_shape_;
  Shape stored_shape_;
  int factor_;
  double epsilon_;
  std::map<std::uint64_t, std::vector<float>> entries_;
  std::vector<std::uint64_t> key_space_;  // sorted; empty means unrestricted
  std::mutex mutex_;
};

/// One FGSM step warm-started from the cache: start from the cached
/// perturbation (or uniform noise if absent), take one signed step of size
/// alpha, project, write the result back. `records` may be empty.
Tensor<float> fgsm_atta_step(const LossGradFn<float>& loss_grad, const Tensor<float>& x,
                             std::span<const std::uint64_t> indices, std::span<const AugmentRecord> records,
                             const AdversarialBudget& budget, double alpha, PerturbationCache& cache, Rng& rng);

}  // namespace rbsn
