#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rbsn/mask.hpp"
#include "rbsn/nn.hpp"

namespace rbsn {

// ----- cost model -------------------------------------------------------------

/// One sparse conv-BN-ReLU block: c x c kernels, s x s output maps.
struct BlockCostParams {
  double r = 0.0;
  double c = 3.0;
  double s = 1.0;
  double r_in = 1.0;
  double r_out = 1.0;

  void validate() const;
};

enum class CostPhase { ForwardTrain, ForwardEval, Backward };
enum class Precision { Full, Binary };

double flop_cost(const BlockCostParams& params, CostPhase phase, Precision precision);

struct FlopReport {
  struct Row {
    std::string layer;
    BlockCostParams params;
    double full[3] = {0, 0, 0};    // indexed by CostPhase
    double binary[3] = {0, 0, 0};
  };
  std::vector<Row> rows;
  double full_total[3] = {0, 0, 0};
  double binary_total[3] = {0, 0, 0};

  std::string to_csv() const;
};

/// Per-layer costs with each layer's own retained rate taken from the mask.
/// Fully-connected layers are treated as 1x1 blocks on a 1x1 map.
FlopReport flop_report(const NetworkSpec& spec, const MaskSet& mask);

// ----- retention distributions ------------------------------------------------

enum class PmfMethod {
  /// Binomial(m, slots / n) truncated to the slot count.
  ExactBinomial,
  /// Sampling without replacement: Hypergeometric(n, slots, m).
  Hypergeometric,
  /// Stirling-based closed form with c = e * m * slots / n, keeping the
  /// (1 - slots / n)^(m - k) factor. k = 0 uses (1 - slots / n)^m.
  StirlingApprox,
};

/// Retained-count distribution of one group of `slots` positions when m of n
/// positions survive uniformly at random.
std::vector<double> retention_pmf(std::int64_t n, std::int64_t m, std::int64_t slots, PmfMethod method);

/// Per-kernel distribution (9 slots) for a layer of n weights at rate r; m = round((1-r) n).
/// The approximation here is the kernel form with c = 9e(1-r), which drops the
/// (1 - 9/n)^(m-k) factor; k = 0 is the binomial limit exp(-9(1-r)).
std::vector<double> kernel_retention_pmf(std::int64_t n, double r, PmfMethod method);

/// Per-input-channel distribution: 9 * r_out slots, slot probability 1 / r_in.
/// The approximation uses c' = 9e * r_out * (1-r) and keeps (1 - 1/r_in)^(m-k).
std::vector<double> channel_retention_pmf(std::int64_t n, double r, int r_in, int r_out, PmfMethod method);

/// False when the Stirling form is outside 9 << m < n / 9.
bool stirling_regime(std::int64_t n, std::int64_t m);

double total_variation(const std::vector<double>& a, const std::vector<double>& b);

// ----- histograms -------------------------------------------------------------

enum class RetentionAxis { Kernel, InputChannel, OutputChannel };

std::string to_string(RetentionAxis axis);

/// counts[k] = number of groups (kernels or channels) with k retained weights.
/// Averaged histograms carry fractional counts.
struct RetentionHistogram {
  std::string layer;
  RetentionAxis axis = RetentionAxis::Kernel;
  std::vector<double> counts;

  double groups() const;
  double retained() const;
  /// counts normalized to sum to one.
  std::vector<double> pmf() const;
  /// Fraction of groups holding at least k retained weights.
  double tail_fraction(std::size_t k) const;
  double empty_fraction() const;
};

struct LayerHistograms {
  RetentionHistogram input_channel;
  RetentionHistogram output_channel;
  /// Present only for convolutions.
  std::optional<RetentionHistogram> kernel;
};

/// Kernel histograms need a 4-D {out, in, kh, kw} layer (ShapeError otherwise).
RetentionHistogram kernel_histogram(const MaskTensor& mask);
RetentionHistogram channel_histogram(const MaskTensor& mask, RetentionAxis axis);
LayerHistograms mask_histograms(const MaskTensor& mask);

struct MonteCarloResult {
  LayerHistograms mean;
  /// Largest per-kernel retained count seen in each trial (empty for 2-D layers).
  std::vector<std::uint32_t> max_kernel_count;
};

/// Uniformly retains m of the layer's weights `trials` times and averages the
/// histograms. Trial t draws from a stream derived from (seed, t), so the
/// result does not depend on how trials are scheduled.
MonteCarloResult monte_carlo_random_prune(const Shape& shape, std::int64_t m, std::size_t trials, std::uint64_t seed,
                                          std::string layer = "random");

struct AlignmentStats {
  std::size_t channels = 0;
  std::size_t empty_out_first = 0;  // fully pruned output channels of the first layer
  std::size_t empty_in_second = 0;  // fully pruned input channels of the second layer
  std::size_t intersection = 0;
  double jaccard = 0.0;
  /// e1 * e2 / C under independent placement.
  double expected_intersection = 0.0;
  double expected_jaccard = 0.0;
};

/// Overlap between the empty output channels of `first` and the empty input
/// channels of `second`. Two empty sets count as identical (Jaccard 1).
AlignmentStats consecutive_alignment(const MaskTensor& first, const MaskTensor& second);

// ----- allocation theorems ------------------------------------------------------

struct TheoremCheck {
  std::vector<std::vector<std::int64_t>> maximizers;
  /// Maximum objective in decimal (exact integer).
  std::string best_value;
  /// Maximizers that break the stated property.
  std::size_t violations = 0;
};

/// Maximizes prod C(n_i, m_i) over sum m_i = total by enumeration and checks
/// |m_j/n_j - m_k/n_k| < 1/n_j + 1/n_k for every pair of every maximizer.
TheoremCheck verify_rate_balance(const std::vector<std::int64_t>& sizes, std::int64_t total);

/// Maximizes prod m_i over 1 <= m_i <= n_i, sum m_i = total, and checks that
/// every coordinate has m_j = n_j or m_j >= m_k - 1 for all k.
TheoremCheck verify_path_count(const std::vector<std::int64_t>& sizes, std::int64_t total);

struct TheoremSweep {
  std::size_t configurations = 0;
  std::size_t rate_balance_cases = 0;
  std::size_t path_count_cases = 0;
  std::size_t rate_balance_violations = 0;
  std::size_t path_count_violations = 0;
  /// Cases where solve_allocation(p = 0) does not reach the maximal path count.
  std::size_t allocation_mismatches = 0;

  std::size_t counterexamples() const { return rate_balance_violations + path_count_violations; }
};

/// Every size vector with 1..max_layers layers and 1 <= n_i <= max_n, every feasible total.
TheoremSweep sweep_theorems(int max_n, int max_layers = 3);

// ----- output -------------------------------------------------------------------

/// RFC 4180 field quoting.
std::string csv_field(std::string_view text);

std::string histograms_csv(const std::vector<RetentionHistogram>& histograms);

struct ChartSeries {
  std::string label;
  std::vector<double> values;
};

/// Grouped bar chart over k = 0..n-1; optional log10 y axis (zeros drawn empty).
std::string svg_bar_chart(const std::string& title, const std::vector<ChartSeries>& series, bool log_scale);

/// Polylines over x = 0..n-1 on a linear y axis.
std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::vector<ChartSeries>& series);

}  // namespace rbsn
