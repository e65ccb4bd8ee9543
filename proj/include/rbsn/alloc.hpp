#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rbsn {

struct ScoreSet;
struct MaskSet;

/// Prunable parameter counts per layer, in forward order.
struct LayerSizes {
  std::vector<std::int64_t> sizes;
  std::vector<std::string> names;

  static LayerSizes from_counts(std::vector<std::int64_t> sizes);
  std::int64_t total() const;
  void validate() const;
};

/// Per-layer retained-parameter counts for a global pruning rate.
struct AllocationPlan {
  std::vector<std::string> names;
  std::vector<std::int64_t> sizes;
  std::vector<std::int64_t> retained;
  /// Water-filled real-valued solution before rounding.
  std::vector<double> continuous;
  double rate = 0.0;
  double exponent = 1.0;
  /// Scale of the uncapped layers: continuous[i] == multiplier * sizes[i]^exponent.
  double multiplier = 0.0;

  std::int64_t total_retained() const;
  /// `layer,name,n,m` table, one row per layer.
  std::string to_table() const;
};

/// round((1 - r) * total) evaluated exactly on the binary value of `r`,
/// rounding halves up.
std::int64_t target_retained(std::int64_t total, double r);

/// Adaptive pruning: m_i proportional to n_i^p, capped at n_i, summing to
/// round((1-r) * sum n_i). Layers with a positive continuous share keep at
/// least one parameter when the budget allows it.
AllocationPlan solve_allocation(const LayerSizes& sizes, double r, double p);

/// Equal per-layer pruning rate (p = 1).
AllocationPlan strategy_fixed_rate(const LayerSizes& sizes, double r);

/// Global top-k over the concatenation of all layers' scores. Can empty a
/// layer entirely.
MaskSet strategy_global(const ScoreSet& scores, double r);

}  // namespace rbsn
