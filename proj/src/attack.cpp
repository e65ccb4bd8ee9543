#include "rbsn/attack.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "rbsn/binio.hpp"
#include "rbsn/error.hpp"

namespace rbsn {

namespace {

template <typename T>
T sign_of(T v) {
  return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
}

template <typename T>
Tensor<T> apply_delta(const Tensor<T>& x, const Tensor<T>& delta, const AdversarialBudget& budget) {
  Tensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    T v = x[i] + delta[i];
    if (budget.clip_valid_range) v = std::clamp(v, T{0}, T{1});
    out[i] = v;
  }
  return out;
}

void check_budget(const AdversarialBudget& budget) {
  RBSN_CHECK(budget.epsilon >= 0.0 && std::isfinite(budget.epsilon), ConfigError, "epsilon must be finite and >= 0");
}

template <typename T>
void check_gradient(const Tensor<T>& grad, const Tensor<T>& x) {
  RBSN_CHECK(grad.shape == x.shape, ShapeError, "attack gradient shape mismatch");
  for (auto g : grad.data) {
    if (!std::isfinite(static_cast<double>(g))) throw DivergenceError("non-finite input gradient during attack");
  }
}

}  // namespace

template <typename T>
void project_linf(Tensor<T>& delta, const Tensor<T>& x, const AdversarialBudget& budget) {
  RBSN_CHECK(delta.shape == x.shape, ShapeError, "perturbation shape does not match input");
  check_budget(budget);
  const T eps = static_cast<T>(budget.epsilon);
  for (std::size_t i = 0; i < delta.size(); ++i) {
    T d = std::clamp(delta[i], -eps, eps);
    if (budget.clip_valid_range) d = std::clamp(x[i] + d, T{0}, T{1}) - x[i];
    delta[i] = d;
  }
}

template <typename T>
LossGradFn<T> network_loss_grad(Network<T>& net, const MaskSet& mask, std::span<const int> labels, BnMode mode) {
  return [&net, &mask, labels, mode](const Tensor<T>& x, Tensor<T>& grad) {
    auto pass = net.forward(mask, x, ForwardOptions{mode, false});
    auto res = net.backward(pass, labels, BackwardOptions{false, true, false});
    grad = std::move(res.grad_input);
    return res.loss;
  };
}

template <typename T>
Tensor<T> pgd_attack(const LossGradFn<T>& loss_grad, const Tensor<T>& x, const AdversarialBudget& budget,
                     const PgdOptions& options, Rng& rng) {
  check_budget(budget);
  RBSN_CHECK(options.steps >= 1, ConfigError, "PGD needs at least one step");
  RBSN_CHECK(options.step_size > 0.0, ConfigError, "PGD step size must be positive");
  Tensor<T> delta(x.shape);
  if (options.random_start) {
    for (auto& d : delta.data) d = static_cast<T>(rng.uniform(-budget.epsilon, budget.epsilon));
  }
  project_linf(delta, x, budget);
  const T alpha = static_cast<T>(options.step_size);
  Tensor<T> grad;
  for (int step = 0; step < options.steps; ++step) {
    loss_grad(apply_delta(x, delta, budget), grad);
    check_gradient(grad, x);
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += alpha * sign_of(grad[i]);
    project_linf(delta, x, budget);
  }
  return apply_delta(x, delta, budget);
}

// ----- perturbation cache ---------------------------------------------------------

PerturbationCache::PerturbationCache(Shape sample_shape, int factor, double epsilon)
    : sample_shape_(std::move(sample_shape)), factor_(factor), epsilon_(epsilon) {
  RBSN_CHECK(factor_ >= 1, ConfigError, "cache downsample factor must be positive");
  RBSN_CHECK(epsilon_ >= 0.0, ConfigError, "cache epsilon must be >= 0");
  if (sample_shape_.size() == 3) {
    const auto f = static_cast<std::size_t>(factor_);
    RBSN_CHECK(sample_shape_[1] % f == 0 && sample_shape_[2] % f == 0, ConfigError,
               "downsample factor " + std::to_string(factor_) + " does not divide " + shape_string(sample_shape_));
    stored_shape_ = {sample_shape_[0], sample_shape_[1] / f, sample_shape_[2] / f};
  } else {
    RBSN_CHECK(sample_shape_.size() == 1 && factor_ == 1, ConfigError, "vector samples need downsample factor 1");
    stored_shape_ = sample_shape_;
  }
}

PerturbationCache::PerturbationCache(PerturbationCache&& other) noexcept
    : sample_shape_(std::move(other.sample_shape_)),
      stored_shape_(std::move(other.stored_shape_)),
      factor_(other.factor_),
      epsilon_(other.epsilon_),
      entries_(std::move(other.entries_)),
      key_space_(std::move(other.key_space_)) {}

PerturbationCache& PerturbationCache::operator=(PerturbationCache&& other) noexcept {
  sample_shape_ = std::move(other.sample_shape_);
  stored_shape_ = std::move(other.stored_shape_);
  factor_ = other.factor_;
  epsilon_ = other.epsilon_;
  entries_ = std::move(other.entries_);
  key_space_ = std::move(other.key_space_);
  return *this;
}

void PerturbationCache::set_key_space(std::vector<std::uint64_t> keys) {
  std::sort(keys.begin(), keys.end());
  key_space_ = std::move(keys);
}

std::vector<float> PerturbationCache::downsample(std::span<const float> full) const {
  RBSN_CHECK(full.size() == numel(sample_shape_), ShapeError, "cache: perturbation size mismatch");
  if (factor_ == 1) return {full.begin(), full.end()};
  const std::size_t c = sample_shape_[0], h = sample_shape_[1], w = sample_shape_[2];
  const std::size_t f = static_cast<std::size_t>(factor_), ho = h / f, wo = w / f;
  std::vector<float> out(c * ho * wo);
  const double scale = 1.0 / static_cast<double>(f * f);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t x = 0; x < wo; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < f; ++dy) {
          for (std::size_t dx = 0; dx < f; ++dx) acc += full[(ch * h + y * f + dy) * w + x * f + dx];
        }
        out[(ch * ho + y) * wo + x] = static_cast<float>(acc * scale);
      }
    }
  }
  return out;
}

std::vector<float> PerturbationCache::upsample(std::span<const float> small) const {
  RBSN_CHECK(small.size() == numel(stored_shape_), ShapeError, "cache: stored perturbation size mismatch");
  if (factor_ == 1) return {small.begin(), small.end()};
  const std::size_t c = sample_shape_[0], h = sample_shape_[1], w = sample_shape_[2];
  const std::size_t f = static_cast<std::size_t>(factor_), ho = h / f, wo = w / f;
  std::vector<float> out(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = small[(ch * ho + y / f) * wo + x / f];
    }
  }
  return out;
}

void PerturbationCache::store(std::uint64_t index, std::span<const float> delta, const AugmentRecord* record) {
  RBSN_CHECK(key_space_.empty() || std::binary_search(key_space_.begin(), key_space_.end(), index), ConfigError,
             "cache: sample index " + std::to_string(index) + " is not in the training index space");
  std::vector<float> frame(delta.begin(), delta.end());
  if (record) {
    RBSN_CHECK(sample_shape_.size() == 3, ShapeError, "cache: augmentation records need image samples");
    invert_augment(delta, frame, sample_shape_, *record);
  }
  auto small = downsample(frame);
  const float eps = static_cast<float>(epsilon_);
  for (auto& v : small) v = std::clamp(v, -eps, eps);
  entries_[index] = std::move(small);
}

bool PerturbationCache::load(std::uint64_t index, std::span<float> delta, const AugmentRecord* record) const {
  auto it = entries_.find(index);
  if (it == entries_.end()) return false;
  auto full = upsample(it->second);
  RBSN_CHECK(delta.size() == full.size(), ShapeError, "cache: output size mismatch");
  if (record) apply_augment(full, delta, sample_shape_, *record);
  else std::copy(full.begin(), full.end(), delta.begin());
  return true;
}

const std::vector<float>* PerturbationCache::raw(std::uint64_t index) const {
  auto it = entries_.find(index);
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<std::uint8_t> PerturbationCache::encode() const {
  ByteWriter w;
  w.magic("RBSP");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(factor_));
  w.u64(std::bit_cast<std::uint64_t>(epsilon_));
  w.u32(static_cast<std::uint32_t>(sample_shape_.size()));
  for (auto d : sample_shape_) w.u32(static_cast<std::uint32_t>(d));
  w.u64(entries_.size());
  for (const auto& [index, values] : entries_) {
    w.u64(index);
    for (float v : values) w.f32(v);
  }
  return w.take();
}

PerturbationCache PerturbationCache::decode(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "RBSP cache");
  r.expect_magic("RBSP");
  const auto version = r.u32();
  RBSN_CHECK(version == 1, FormatError, "RBSP cache: unsupported version " + std::to_string(version));
  const int factor = static_cast<int>(r.u32());
  const double eps = std::bit_cast<double>(r.u64());
  const auto ndim = r.u32();
  RBSN_CHECK(ndim == 1 || ndim == 3, FormatError, "RBSP cache: bad rank");
  Shape shape;
  for (std::uint32_t i = 0; i < ndim; ++i) shape.push_back(r.u32());
  PerturbationCache cache(shape, factor, eps);
  const auto count = r.u64();
  const std::size_t per = numel(cache.stored_shape_);
  RBSN_CHECK(count <= r.remaining() / (8 + 4 * per), FormatError, "RBSP cache: truncated");
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto index = r.u64();
    std::vector<float> values(per);
    for (auto& v : values) v = r.f32();
    cache.entries_[index] = std::move(values);
  }
  RBSN_CHECK(r.at_end(), FormatError, "RBSP cache: trailing bytes");
  return cache;
}

void PerturbationCache::save(const std::filesystem::path& path) const { write_file_atomic(path, encode()); }

PerturbationCache PerturbationCache::load_file(const std::filesystem::path& path) {
  return decode(read_file_bytes(path));
}

bool PerturbationCache::operator==(const PerturbationCache& other) const {
  return sample_shape_ == other.sample_shape_ && factor_ == other.factor_ && epsilon_ == other.epsilon_ &&
         entries_ == other.entries_;
}

Tensor<float> fgsm_atta_step(const LossGradFn<float>& loss_grad, const Tensor<float>& x,
                             std::span<const std::uint64_t> indices, std::span<const AugmentRecord> records,
                             const AdversarialBudget& budget, double alpha, PerturbationCache& cache, Rng& rng) {
  check_budget(budget);
  RBSN_CHECK(alpha > 0.0, ConfigError, "FGSM step size must be positive");
  RBSN_CHECK(indices.size() == x.dim(0), ShapeError, "one sample index per batch row required");
  RBSN_CHECK(records.empty() || records.size() == x.dim(0), ShapeError, "augmentation records do not match batch");
  RBSN_CHECK(Shape(x.shape.begin() + 1, x.shape.end()) == cache.sample_shape(), ShapeError,
             "batch samples do not match the cache sample shape");

  std::lock_guard<std::mutex> guard(cache.lock());
  const std::size_t per = x.stride0();
  Tensor<float> delta(x.shape);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    std::span<float> d(delta.data.data() + i * per, per);
    const AugmentRecord* rec = records.empty() ? nullptr : &records[i];
    if (!cache.load(indices[i], d, rec)) {
      for (auto& v : d) v = static_cast<float>(rng.uniform(-budget.epsilon, budget.epsilon));
    }
  }
  project_linf(delta, x, budget);

  Tensor<float> grad;
  loss_grad(apply_delta(x, delta, budget), grad);
  check_gradient(grad, x);
  const float a = static_cast<float>(alpha);
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += a * sign_of(grad[i]);
  project_linf(delta, x, budget);

  for (std::size_t i = 0; i < x.dim(0); ++i) {
    std::span<const float> d(delta.data.data() + i * per, per);
    cache.store(indices[i], d, records.empty() ? nullptr : &records[i]);
  }
  return apply_delta(x, delta, budget);
}

template void project_linf<float>(Tensor<float>&, const Tensor<float>&, const AdversarialBudget&);
template void project_linf<double>(Tensor<double>&, const Tensor<double>&, const AdversarialBudget&);
template LossGradFn<float> network_loss_grad<float>(Network<float>&, const MaskSet&, std::span<const int>, BnMode);
template LossGradFn<double> network_loss_grad<double>(Network<double>&, const MaskSet&, std::span<const int>, BnMode);
template Tensor<float> pgd_attack<float>(const LossGradFn<float>&, const Tensor<float>&, const AdversarialBudget&,
                                         const PgdOptions&, Rng&);
template Tensor<double> pgd_attack<double>(const LossGradFn<double>&, const Tensor<double>&, const AdversarialBudget&,
                                           const PgdOptions&, Rng&);

}  // namespace rbsn
