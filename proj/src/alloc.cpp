#include "rbsn/alloc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rbsn/error.hpp"
#include "rbsn/mask.hpp"

namespace rbsn {

LayerSizes LayerSizes::from_counts(std::vector<std::int64_t> sizes) {
  LayerSizes out;
  out.names.reserve(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) out.names.push_back("layer" + std::to_string(i));
  out.sizes = std::move(sizes);
  return out;
}

std::int64_t LayerSizes::total() const { return std::accumulate(sizes.begin(), sizes.end(), std::int64_t{0}); }

void LayerSizes::validate() const {
  RBSN_CHECK(!sizes.empty(), ConfigError, "allocation needs at least one layer");
  RBSN_CHECK(names.empty() || names.size() == sizes.size(), ConfigError, "layer name count differs from size count");
  for (auto n : sizes) RBSN_CHECK(n >= 1, ConfigError, "layer sizes must be positive");
}

std::int64_t AllocationPlan::total_retained() const {
  return std::accumulate(retained.begin(), retained.end(), std::int64_t{0});
}

std::string AllocationPlan::to_table() const {
  std::ostringstream out;
  out << "layer,name,n,m\n";
  for (std::size_t i = 0; i < retained.size(); ++i) {
    out << i << ',' << (i < names.size() ? names[i] : "") << ',' << sizes[i] << ',' << retained[i] << '\n';
  }
  return out.str();
}

std::int64_t target_retained(std::int64_t total, double r) {
  RBSN_CHECK(total >= 0, ConfigError, "negative parameter total");
  RBSN_CHECK(std::isfinite(r) && r >= 0.0 && r <= 1.0, ConfigError, "pruning rate must lie in [0, 1]");
  if (r == 0.0) return total;
  // r = mantissa * 2^-shift exactly; r * total fits in 128 bits.
  int exp = 0;
  const double frac = std::frexp(r, &exp);  // r = frac * 2^exp, frac in [0.5, 1)
  const auto mantissa = static_cast<std::uint64_t>(std::ldexp(frac, 53));
  const int shift = 53 - exp;
  const unsigned __int128 product = static_cast<unsigned __int128>(mantissa) * static_cast<std::uint64_t>(total);
  if (shift >= 127) return total;  // r * total < 0.5
  const unsigned __int128 quotient = product >> shift;
  const unsigned __int128 rem = product - (quotient << shift);
  const unsigned __int128 half = static_cast<unsigned __int128>(1) << (shift - 1);
  // round(total - q - f) with halves up: subtract one more only when f > 1/2
  const auto q = static_cast<std::int64_t>(quotient);
  return total - q - (rem > half ? 1 : 0);
}

namespace {

void check_rate(double r) {
  RBSN_CHECK(std::isfinite(r) && r >= 0.0 && r < 1.0, ConfigError,
             "pruning rate must lie in [0, 1), got " + std::to_string(r));
}

}  // namespace

AllocationPlan solve_allocation(const LayerSizes& layers, double r, double p) {
  layers.validate();
  check_rate(r);
  RBSN_CHECK(std::isfinite(p) && p >= 0.0 && p <= 1.0, ConfigError,
             "allocation exponent must lie in [0, 1], got " + std::to_string(p));

  const std::size_t count = layers.sizes.size();
  const std::int64_t total = layers.total();
  const std::int64_t target = target_retained(total, r);
  RBSN_CHECK(target >= 1, ConfigError, "round((1 - r) * total) must be at least 1");
  const long double budget = (1.0L - static_cast<long double>(r)) * static_cast<long double>(total);
  RBSN_CHECK(target <= total, ConfigError, "retained total exceeds parameter count");

  AllocationPlan plan;
  plan.names = layers.names.empty() ? LayerSizes::from_counts(layers.sizes).names : layers.names;
  plan.sizes = layers.sizes;
  plan.rate = r;
  plan.exponent = p;

  std::vector<long double> weight(count);
  for (std::size_t i = 0; i < count; ++i) {
    weight[i] = std::pow(static_cast<long double>(layers.sizes[i]), static_cast<long double>(p));
  }

  // Water-filling: cap every layer whose share exceeds its size, re-solve the
  // multiplier over the rest, repeat until no new layer saturates.
  std::vector<bool> capped(count, false);
  long double lambda = 0.0L;
  for (;;) {
    long double free_weight = 0.0L;
    long double remaining = budget;
    for (std::size_t i = 0; i < count; ++i) {
      if (capped[i]) remaining -= static_cast<long double>(layers.sizes[i]);
      else free_weight += weight[i];
    }
    if (free_weight == 0.0L) {
      // everything saturated (r == 0): smallest multiplier that saturates all
      lambda = 0.0L;
      for (std::size_t i = 0; i < count; ++i) {
        lambda = std::max(lambda, static_cast<long double>(layers.sizes[i]) / weight[i]);
      }
      break;
    }
    lambda = remaining / free_weight;
    bool changed = false;
    for (std::size_t i = 0; i < count; ++i) {
      if (!capped[i] && lambda * weight[i] > static_cast<long double>(layers.sizes[i])) {
        capped[i] = true;
        changed = true;
      }
    }
    if (!changed) break;
  }
  plan.multiplier = static_cast<double>(lambda);

  std::vector<long double> share(count);
  plan.continuous.resize(count);
  plan.retained.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    share[i] = capped[i] ? static_cast<long double>(layers.sizes[i]) : lambda * weight[i];
    share[i] = std::min(share[i], static_cast<long double>(layers.sizes[i]));
    plan.continuous[i] = static_cast<double>(share[i]);
    plan.retained[i] = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(share[i])), layers.sizes[i]);
  }

  // Largest remainder; equal remainders favour the earlier layer.
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto remainder = [&](std::size_t i) { return share[i] - static_cast<long double>(plan.retained[i]); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder(a) > remainder(b); });
  std::int64_t units = target - plan.total_retained();
  while (units > 0) {
    bool progressed = false;
    for (std::size_t i : order) {
      if (units == 0) break;
      if (plan.retained[i] < layers.sizes[i]) {
        ++plan.retained[i];
        --units;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  while (units < 0) {
    bool progressed = false;
    for (auto it = order.rbegin(); it != order.rend() && units < 0; ++it) {
      if (plan.retained[*it] > 0) {
        --plan.retained[*it];
        ++units;
        progressed = true;
      }
    }
    if (!progressed) break;
  }

  // Floor of one parameter per layer with a positive share, funded by the
  // most over-allocated layer that can spare one.
  std::vector<std::size_t> starving;
  for (std::size_t i = 0; i < count; ++i) {
    if (plan.retained[i] == 0 && share[i] > 0.0L) starving.push_back(i);
  }
  std::stable_sort(starving.begin(), starving.end(), [&](std::size_t a, std::size_t b) { return share[a] > share[b]; });
  for (std::size_t i : starving) {
    std::size_t donor = count;
    long double best = 0.0L;
    for (std::size_t j = 0; j < count; ++j) {
      if (plan.retained[j] <= 1) continue;
      const long double excess = static_cast<long double>(plan.retained[j]) - share[j];
      if (donor == count || excess > best) {
        donor = j;
        best = excess;
      }
    }
    if (donor == count) break;
    --plan.retained[donor];
    plan.retained[i] = 1;
  }
  return plan;
}

AllocationPlan strategy_fixed_rate(const LayerSizes& sizes, double r) { return solve_allocation(sizes, r, 1.0); }

MaskSet strategy_global(const ScoreSet& scores, double r) {
  check_rate(r);
  RBSN_CHECK(!scores.layers.empty(), ConfigError, "global pruning needs at least one layer");

  std::vector<const float*> base;
  std::vector<std::size_t> offset;
  std::size_t total = 0;
  for (const auto& layer : scores.layers) {
    offset.push_back(total);
    total += layer.values.size();
  }
  std::vector<float> flat;
  flat.reserve(total);
  for (const auto& layer : scores.layers) flat.insert(flat.end(), layer.values.begin(), layer.values.end());

  const auto keep = target_retained(static_cast<std::int64_t>(total), r);
  std::vector<std::uint8_t> bits(total, 0);
  top_k_mask(flat, keep, bits);

  MaskSet out;
  for (std::size_t l = 0; l < scores.layers.size(); ++l) {
    const auto& layer = scores.layers[l];
    MaskTensor m{layer.name, layer.shape, {}};
    m.bits.assign(bits.begin() + static_cast<std::ptrdiff_t>(offset[l]),
                  bits.begin() + static_cast<std::ptrdiff_t>(offset[l] + layer.values.size()));
    out.layers.push_back(std::move(m));
  }
  return out;
}

}  // namespace rbsn
