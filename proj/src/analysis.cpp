#include "rbsn/analysis.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>

#include "rbsn/error.hpp"
#include "rbsn/rng.hpp"

namespace rbsn {

using boost::multiprecision::cpp_int;

// ----- cost model -------------------------------------------------------------

void BlockCostParams::validate() const {
  RBSN_CHECK(r >= 0.0 && r <= 1.0, ConfigError, "cost model: r must be in [0, 1]");
  RBSN_CHECK(c > 0.0 && s > 0.0 && r_in > 0.0 && r_out > 0.0, ConfigError,
             "cost model: c, s, r_in and r_out must be positive");
}

double flop_cost(const BlockCostParams& p, CostPhase phase, Precision precision) {
  p.validate();
  const double conv = (1.0 - p.r) * p.c * p.c * p.s * p.s * p.r_in * p.r_out;
  const double map = p.s * p.s * p.r_out;
  const bool full = precision == Precision::Full;
  switch (phase) {
    case CostPhase::ForwardTrain: return (full ? 2.0 : 1.0) * conv + 11.0 * map;
    case CostPhase::ForwardEval: return (full ? 2.0 : 1.0) * conv + 4.0 * map;
    case CostPhase::Backward:
      return full ? 4.0 * conv + 4.0 * map + p.c * p.c * p.r_in * p.r_out : 3.0 * conv + 4.0 * map;
  }
  return 0.0;
}

std::string FlopReport::to_csv() const {
  std::string out =
      "layer,r,c,s,r_in,r_out,full_forward_train,binary_forward_train,full_forward_eval,binary_forward_eval,"
      "full_backward,binary_backward\n";
  char buf[512];
  auto costs = [&](const double* f, const double* b) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", f[0], b[0], f[1], b[1], f[2], b[2]);
    return std::string(buf);
  };
  for (const auto& row : rows) {
    const auto& p = row.params;
    std::snprintf(buf, sizeof buf, "%.10g,%g,%g,%g,%g,", p.r, p.c, p.s, p.r_in, p.r_out);
    out += csv_field(row.layer) + "," + buf + costs(row.full, row.binary) + "\n";
  }
  out += "total,,,,,," + costs(full_total, binary_total) + "\n";
  return out;
}

FlopReport flop_report(const NetworkSpec& spec, const MaskSet& mask) {
  const auto layers = prunable_layers(spec);
  RBSN_CHECK(layers.size() == mask.layers.size(), ShapeError, "mask does not match the architecture");
  FlopReport report;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    RBSN_CHECK(mask.layers[l].shape == L.weight_shape, ShapeError, "mask layer " + mask.layers[l].name +
                                                                        " does not match " + L.name);
    FlopReport::Row row;
    row.layer = L.name;
    const double n = static_cast<double>(numel(L.weight_shape));
    row.params.r = 1.0 - static_cast<double>(mask.layers[l].popcount()) / n;
    row.params.c = L.is_conv ? L.kernel : 1;
    row.params.s = static_cast<double>(L.output_side);
    row.params.r_in = L.in_channels;
    row.params.r_out = L.out_channels;
    for (int ph = 0; ph < 3; ++ph) {
      row.full[ph] = flop_cost(row.params, static_cast<CostPhase>(ph), Precision::Full);
      row.binary[ph] = flop_cost(row.params, static_cast<CostPhase>(ph), Precision::Binary);
      report.full_total[ph] += row.full[ph];
      report.binary_total[ph] += row.binary[ph];
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

// ----- retention distributions ------------------------------------------------

namespace {

// long double keeps the cancellation error of large lgamma values near 1e-15
long double log_choose(long double n, long double k) {
  return std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1);
}

// sqrt(m / (2 pi k (m - k))) * (c / k)^k * tail^(m - k) for 1 <= k < m
double stirling_term(double m, double k, double c, double tail) {
  if (k >= m) return 0.0;
  return std::sqrt(m / (2.0 * std::numbers::pi * k * (m - k))) * std::pow(c / k, k) * std::pow(tail, m - k);
}

void check_counts(std::int64_t n, std::int64_t m, std::int64_t slots) {
  RBSN_CHECK(n >= 1, ConfigError, "retention pmf: n must be positive");
  RBSN_CHECK(m >= 0 && m <= n, ConfigError, "retention pmf: m must be in [0, n]");
  RBSN_CHECK(slots >= 1 && slots <= n, ConfigError, "retention pmf: slots must be in [1, n]");
}

std::int64_t retained_for_rate(std::int64_t n, double r) {
  RBSN_CHECK(r >= 0.0 && r <= 1.0, ConfigError, "pruning rate must be in [0, 1]");
  return target_retained(n, r);
}

}  // namespace

std::vector<double> retention_pmf(std::int64_t n, std::int64_t m, std::int64_t slots, PmfMethod method) {
  check_counts(n, m, slots);
  std::vector<double> pmf(static_cast<std::size_t>(slots) + 1, 0.0);
  const double N = static_cast<double>(n), M = static_cast<double>(m), S = static_cast<double>(slots);
  switch (method) {
    case PmfMethod::ExactBinomial: {
      const long double q = static_cast<long double>(S) / static_cast<long double>(N);
      if (slots == n) {
        pmf[static_cast<std::size_t>(m)] = 1.0;
        break;
      }
      for (std::int64_t k = 0; k <= std::min(m, slots); ++k) {
        const long double K = static_cast<long double>(k);
        pmf[static_cast<std::size_t>(k)] =
            static_cast<double>(std::exp(log_choose(M, K) + K * std::log(q) + (M - K) * std::log1p(-q)));
      }
      break;
    }
    case PmfMethod::Hypergeometric: {
      const std::int64_t lo = std::max<std::int64_t>(0, m - (n - slots)), hi = std::min(m, slots);
      for (std::int64_t k = lo; k <= hi; ++k) {
        const long double K = static_cast<long double>(k);
        pmf[static_cast<std::size_t>(k)] =
            static_cast<double>(std::exp(log_choose(S, K) + log_choose(N - S, M - K) - log_choose(N, M)));
      }
      break;
    }
    case PmfMethod::StirlingApprox: {
      const double tail = 1.0 - S / N;
      const double c = std::numbers::e * M * S / N;
      pmf[0] = std::pow(tail, M);
      for (std::int64_t k = 1; k <= slots; ++k) pmf[static_cast<std::size_t>(k)] = stirling_term(M, double(k), c, tail);
      break;
    }
  }
  return pmf;
}

std::vector<double> kernel_retention_pmf(std::int64_t n, double r, PmfMethod method) {
  const auto m = retained_for_rate(n, r);
  if (method != PmfMethod::StirlingApprox) return retention_pmf(n, m, 9, method);
  check_counts(n, m, 9);
  const double c = 9.0 * std::numbers::e * (1.0 - r);
  std::vector<double> pmf(10, 0.0);
  pmf[0] = std::exp(-9.0 * (1.0 - r));
  for (int k = 1; k <= 9; ++k) pmf[static_cast<std::size_t>(k)] = stirling_term(double(m), k, c, 1.0);
  return pmf;
}

std::vector<double> channel_retention_pmf(std::int64_t n, double r, int r_in, int r_out, PmfMethod method) {
  RBSN_CHECK(r_in >= 1 && r_out >= 1, ConfigError, "channel pmf: channel counts must be positive");
  RBSN_CHECK(n == 9LL * r_in * r_out, ConfigError, "channel pmf: n must equal 9 * r_in * r_out");
  const auto m = retained_for_rate(n, r);
  const std::int64_t slots = 9LL * r_out;
  if (method != PmfMethod::StirlingApprox) return retention_pmf(n, m, slots, method);
  check_counts(n, m, slots);
  const double c = 9.0 * std::numbers::e * r_out * (1.0 - r);
  const double tail = 1.0 - 1.0 / r_in;
  std::vector<double> pmf(static_cast<std::size_t>(slots) + 1, 0.0);
  pmf[0] = std::pow(tail, double(m));
  for (std::int64_t k = 1; k <= slots; ++k) pmf[static_cast<std::size_t>(k)] = stirling_term(double(m), double(k), c, tail);
  return pmf;
}

bool stirling_regime(std::int64_t n, std::int64_t m) { return m >= 90 && 9 * m < n; }

double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
  double sum = 0.0;
  for (std::size_t k = 0; k < std::max(a.size(), b.size()); ++k) {
    sum += std::abs((k < a.size() ? a[k] : 0.0) - (k < b.size() ? b[k] : 0.0));
  }
  return 0.5 * sum;
}

// ----- histograms -------------------------------------------------------------

std::string to_string(RetentionAxis axis) {
  switch (axis) {
    case RetentionAxis::Kernel: return "kernel";
    case RetentionAxis::InputChannel: return "input_channel";
    case RetentionAxis::OutputChannel: return "output_channel";
  }
  return "?";
}

double RetentionHistogram::groups() const {
  double g = 0.0;
  for (double c : counts) g += c;
  return g;
}

double RetentionHistogram::retained() const {
  double t = 0.0;
  for (std::size_t k = 0; k < counts.size(); ++k) t += static_cast<double>(k) * counts[k];
  return t;
}

std::vector<double> RetentionHistogram::pmf() const {
  const double g = groups();
  std::vector<double> out(counts.size(), 0.0);
  if (g > 0.0) {
    for (std::size_t k = 0; k < counts.size(); ++k) out[k] = counts[k] / g;
  }
  return out;
}

double RetentionHistogram::tail_fraction(std::size_t k) const {
  const double g = groups();
  if (g == 0.0) return 0.0;
  double t = 0.0;
  for (std::size_t i = k; i < counts.size(); ++i) t += counts[i];
  return t / g;
}

double RetentionHistogram::empty_fraction() const {
  const double g = groups();
  return g == 0.0 || counts.empty() ? 0.0 : counts[0] / g;
}

namespace {

// {out, in, kernel area}; 2-D layers have area 1
struct LayerGeometry {
  std::size_t out = 0, in = 0, area = 1;
  bool conv = false;
};

LayerGeometry geometry(const Shape& shape) {
  LayerGeometry g;
  if (shape.size() == 4) {
    g = {shape[0], shape[1], shape[2] * shape[3], true};
  } else if (shape.size() == 2) {
    g = {shape[0], shape[1], 1, false};
  } else {
    throw ShapeError("retention histograms need a 2-D or 4-D layer");
  }
  RBSN_CHECK(g.out > 0 && g.in > 0 && g.area > 0, ShapeError, "retention histograms: empty layer");
  return g;
}

}  // namespace

RetentionHistogram kernel_histogram(const MaskTensor& mask) {
  RBSN_CHECK(mask.shape.size() == 4, ShapeError, "kernel histogram needs a convolution, got layer " + mask.name);
  const auto g = geometry(mask.shape);
  RetentionHistogram h{mask.name, RetentionAxis::Kernel, std::vector<double>(g.area + 1, 0.0)};
  for (std::size_t kid = 0; kid < g.out * g.in; ++kid) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < g.area; ++j) c += mask.bits[kid * g.area + j];
    h.counts[c] += 1.0;
  }
  return h;
}

RetentionHistogram channel_histogram(const MaskTensor& mask, RetentionAxis axis) {
  RBSN_CHECK(axis != RetentionAxis::Kernel, ConfigError, "channel_histogram: use kernel_histogram for kernels");
  const auto g = geometry(mask.shape);
  RBSN_CHECK(mask.bits.size() == g.out * g.in * g.area, ShapeError, "mask bits do not match shape");
  const bool input = axis == RetentionAxis::InputChannel;
  std::vector<std::size_t> per(input ? g.in : g.out, 0);
  for (std::size_t i = 0; i < mask.bits.size(); ++i) {
    if (mask.bits[i]) ++per[input ? (i / g.area) % g.in : i / (g.in * g.area)];
  }
  const std::size_t slots = (input ? g.out : g.in) * g.area;
  RetentionHistogram h{mask.name, axis, std::vector<double>(slots + 1, 0.0)};
  for (auto c : per) h.counts[c] += 1.0;
  return h;
}

LayerHistograms mask_histograms(const MaskTensor& mask) {
  LayerHistograms out{channel_histogram(mask, RetentionAxis::InputChannel),
                      channel_histogram(mask, RetentionAxis::OutputChannel), std::nullopt};
  if (mask.shape.size() == 4) out.kernel = kernel_histogram(mask);
  return out;
}

MonteCarloResult monte_carlo_random_prune(const Shape& shape, std::int64_t m, std::size_t trials, std::uint64_t seed,
                                          std::string layer) {
  const auto g = geometry(shape);
  const std::size_t n = g.out * g.in * g.area;
  RBSN_CHECK(m >= 0 && static_cast<std::size_t>(m) <= n, ConfigError, "monte carlo: m must be in [0, n]");
  RBSN_CHECK(trials >= 1, ConfigError, "monte carlo: trials must be positive");
  const auto M = static_cast<std::size_t>(m);

  MonteCarloResult res;
  res.mean.input_channel = {layer, RetentionAxis::InputChannel, std::vector<double>(g.out * g.area + 1, 0.0)};
  res.mean.output_channel = {layer, RetentionAxis::OutputChannel, std::vector<double>(g.in * g.area + 1, 0.0)};
  if (g.conv) res.mean.kernel = RetentionHistogram{layer, RetentionAxis::Kernel, std::vector<double>(g.area + 1, 0.0)};

  std::vector<std::uint32_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<std::uint32_t>(i);
  std::vector<std::uint32_t> swaps(M);
  std::vector<std::uint32_t> kernel_count(g.conv ? g.out * g.in : 0, 0), in_count(g.in, 0), out_count(g.out, 0);
  std::vector<std::uint32_t> touched;
  // integer accumulators keep the average exact until the final division
  std::vector<std::uint64_t> kh(g.area + 1, 0), ih(g.out * g.area + 1, 0), oh(g.in * g.area + 1, 0);
  const Rng base = Rng::derive(seed, "random-prune");

  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = base.child(static_cast<std::uint64_t>(t));
    // partial Fisher-Yates; undone afterwards so every trial starts from the identity
    for (std::size_t i = 0; i < M; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(n - i));
      swaps[i] = static_cast<std::uint32_t>(j);
      std::swap(perm[i], perm[j]);
    }
    touched.clear();
    std::uint32_t max_k = 0;
    for (std::size_t i = 0; i < M; ++i) {
      const std::size_t pos = perm[i];
      ++in_count[(pos / g.area) % g.in];
      ++out_count[pos / (g.in * g.area)];
      if (g.conv) {
        const auto kid = static_cast<std::uint32_t>(pos / g.area);
        if (kernel_count[kid]++ == 0) touched.push_back(kid);
      }
    }
    for (auto& c : in_count) {
      ++ih[c];
      c = 0;
    }
    for (auto& c : out_count) {
      ++oh[c];
      c = 0;
    }
    if (g.conv) {
      kh[0] += g.out * g.in - touched.size();
      for (auto kid : touched) {
        max_k = std::max(max_k, kernel_count[kid]);
        ++kh[kernel_count[kid]];
        kernel_count[kid] = 0;
      }
      res.max_kernel_count.push_back(max_k);
    }
    for (std::size_t i = M; i-- > 0;) std::swap(perm[i], perm[swaps[i]]);
  }

  const double T = static_cast<double>(trials);
  auto average = [&](const std::vector<std::uint64_t>& src, RetentionHistogram& dst) {
    for (std::size_t k = 0; k < src.size(); ++k) dst.counts[k] = static_cast<double>(src[k]) / T;
  };
  average(ih, res.mean.input_channel);
  average(oh, res.mean.output_channel);
  if (g.conv) average(kh, *res.mean.kernel);
  return res;
}

AlignmentStats consecutive_alignment(const MaskTensor& first, const MaskTensor& second) {
  const auto a = geometry(first.shape);
  const auto b = geometry(second.shape);
  RBSN_CHECK(a.out == b.in, ShapeError,
             "alignment: " + first.name + " has " + std::to_string(a.out) + " output channels but " + second.name +
                 " has " + std::to_string(b.in) + " input channels");
  std::vector<bool> empty_out(a.out, true), empty_in(b.in, true);
  for (std::size_t i = 0; i < first.bits.size(); ++i) {
    if (first.bits[i]) empty_out[i / (a.in * a.area)] = false;
  }
  for (std::size_t i = 0; i < second.bits.size(); ++i) {
    if (second.bits[i]) empty_in[(i / b.area) % b.in] = false;
  }
  AlignmentStats s;
  s.channels = a.out;
  std::size_t uni = 0;
  for (std::size_t c = 0; c < a.out; ++c) {
    s.empty_out_first += empty_out[c];
    s.empty_in_second += empty_in[c];
    s.intersection += empty_out[c] && empty_in[c];
    uni += empty_out[c] || empty_in[c];
  }
  s.jaccard = uni == 0 ? 1.0 : static_cast<double>(s.intersection) / static_cast<double>(uni);
  const double e1 = static_cast<double>(s.empty_out_first), e2 = static_cast<double>(s.empty_in_second);
  s.expected_intersection = e1 * e2 / static_cast<double>(s.channels);
  const double expected_union = e1 + e2 - s.expected_intersection;
  s.expected_jaccard = expected_union == 0.0 ? 1.0 : s.expected_intersection / expected_union;
  return s;
}

// ----- allocation theorems ------------------------------------------------------

namespace {

constexpr double kMaxEnumeration = 2e7;

struct Best {
  cpp_int value = -1;
  std::vector<std::vector<std::int64_t>> maximizers;
};

// Visits every allocation with lo <= m_i <= n_i and records, per total, the
// maximizers of prod f_i(m_i).
std::map<std::int64_t, Best> enumerate_maxima(const std::vector<std::int64_t>& sizes, std::int64_t lo,
                                              const std::vector<std::vector<cpp_int>>& factor) {
  double space = 1.0;
  for (auto n : sizes) {
    RBSN_CHECK(n >= 1, ConfigError, "theorem oracle: sizes must be positive");
    space *= static_cast<double>(n - lo + 1);
  }
  RBSN_CHECK(!sizes.empty() && space <= kMaxEnumeration, ConfigError,
             "theorem oracle: search space too large for exhaustive enumeration");
  std::map<std::int64_t, Best> best;
  std::vector<std::int64_t> m(sizes.size(), lo);
  std::function<void(std::size_t, std::int64_t, const cpp_int&)> rec = [&](std::size_t i, std::int64_t sum,
                                                                          const cpp_int& prod) {
    if (i == sizes.size()) {
      auto& b = best[sum];
      if (prod > b.value) {
        b.value = prod;
        b.maximizers.clear();
      }
      if (prod == b.value) b.maximizers.push_back(m);
      return;
    }
    for (std::int64_t v = lo; v <= sizes[i]; ++v) {
      m[i] = v;
      rec(i + 1, sum + v, prod * factor[i][static_cast<std::size_t>(v)]);
    }
  };
  rec(0, 0, cpp_int(1));
  return best;
}

std::vector<std::vector<cpp_int>> binomial_factors(const std::vector<std::int64_t>& sizes) {
  std::vector<std::vector<cpp_int>> f;
  for (auto n : sizes) {
    std::vector<cpp_int> row(static_cast<std::size_t>(n) + 1);
    row[0] = 1;
    for (std::int64_t k = 1; k <= n; ++k) row[static_cast<std::size_t>(k)] = row[static_cast<std::size_t>(k - 1)] * (n - k + 1) / k;
    f.push_back(std::move(row));
  }
  return f;
}

std::vector<std::vector<cpp_int>> identity_factors(const std::vector<std::int64_t>& sizes) {
  std::vector<std::vector<cpp_int>> f;
  for (auto n : sizes) {
    std::vector<cpp_int> row(static_cast<std::size_t>(n) + 1);
    for (std::int64_t k = 0; k <= n; ++k) row[static_cast<std::size_t>(k)] = k;
    f.push_back(std::move(row));
  }
  return f;
}

// |m_j/n_j - m_k/n_k| < 1/n_j + 1/n_k, cross-multiplied to stay in integers
bool rate_balance_holds(const std::vector<std::int64_t>& n, const std::vector<std::int64_t>& m) {
  for (std::size_t j = 0; j < n.size(); ++j) {
    for (std::size_t k = j + 1; k < n.size(); ++k) {
      if (std::llabs(m[j] * n[k] - m[k] * n[j]) >= n[j] + n[k]) return false;
    }
  }
  return true;
}

bool path_count_holds(const std::vector<std::int64_t>& n, const std::vector<std::int64_t>& m) {
  for (std::size_t j = 0; j < n.size(); ++j) {
    if (m[j] == n[j]) continue;
    for (std::size_t k = 0; k < n.size(); ++k) {
      if (m[j] < m[k] - 1) return false;
    }
  }
  return true;
}

TheoremCheck finish(const Best& b, const std::vector<std::int64_t>& sizes,
                    bool (*holds)(const std::vector<std::int64_t>&, const std::vector<std::int64_t>&)) {
  TheoremCheck out;
  out.maximizers = b.maximizers;
  out.best_value = b.value.str();
  for (const auto& m : b.maximizers) out.violations += !holds(sizes, m);
  return out;
}

std::int64_t sum_of(const std::vector<std::int64_t>& v) {
  std::int64_t s = 0;
  for (auto x : v) s += x;
  return s;
}

}  // namespace

TheoremCheck verify_rate_balance(const std::vector<std::int64_t>& sizes, std::int64_t total) {
  RBSN_CHECK(total >= 0 && total <= sum_of(sizes), ConfigError, "rate-balance oracle: infeasible total");
  const auto best = enumerate_maxima(sizes, 0, binomial_factors(sizes));
  return finish(best.at(total), sizes, rate_balance_holds);
}

TheoremCheck verify_path_count(const std::vector<std::int64_t>& sizes, std::int64_t total) {
  RBSN_CHECK(total >= static_cast<std::int64_t>(sizes.size()) && total <= sum_of(sizes), ConfigError,
             "path-count oracle: infeasible total (every layer keeps at least one weight)");
  const auto best = enumerate_maxima(sizes, 1, identity_factors(sizes));
  return finish(best.at(total), sizes, path_count_holds);
}

TheoremSweep sweep_theorems(int max_n, int max_layers) {
  RBSN_CHECK(max_n >= 1 && max_layers >= 1, ConfigError, "theorem sweep: bounds must be positive");
  TheoremSweep sweep;
  std::vector<std::int64_t> sizes;
  std::function<void()> visit = [&]() {
    if (!sizes.empty()) {
      ++sweep.configurations;
      const auto t1 = enumerate_maxima(sizes, 0, binomial_factors(sizes));
      for (const auto& [total, b] : t1) {
        ++sweep.rate_balance_cases;
        sweep.rate_balance_violations += finish(b, sizes, rate_balance_holds).violations;
      }
      const auto t2 = enumerate_maxima(sizes, 1, identity_factors(sizes));
      const std::int64_t N = sum_of(sizes);
      for (const auto& [total, b] : t2) {
        ++sweep.path_count_cases;
        sweep.path_count_violations += finish(b, sizes, path_count_holds).violations;
        const double r = 1.0 - static_cast<double>(total) / static_cast<double>(N);
        const auto plan = solve_allocation(LayerSizes::from_counts(sizes), r, 0.0);
        cpp_int prod = 1;
        for (auto v : plan.retained) prod *= v;
        sweep.allocation_mismatches += plan.total_retained() != total || prod != b.value;
      }
    }
    if (static_cast<int>(sizes.size()) == max_layers) return;
    for (int n = 1; n <= max_n; ++n) {
      sizes.push_back(n);
      visit();
      sizes.pop_back();
    }
  };
  visit();
  return sweep;
}

// ----- output -------------------------------------------------------------------

std::string csv_field(std::string_view text) {
  if (text.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(text);
  std::string out = "\"";
  for (char ch : text) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string histograms_csv(const std::vector<RetentionHistogram>& histograms) {
  std::string out = "layer,axis,k,count\n";
  char buf[64];
  for (const auto& h : histograms) {
    for (std::size_t k = 0; k < h.counts.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%zu,%.10g", k, h.counts[k]);
      out += csv_field(h.layer) + "," + to_string(h.axis) + "," + buf + "\n";
    }
  }
  return out;
}

namespace {

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

}  // namespace

std::string svg_bar_chart(const std::string& title, const std::vector<ChartSeries>& series, bool log_scale) {
  static const char* palette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"};
  const double width = 720, height = 360, left = 60, right = 20, top = 40, bottom = 50;
  std::size_t bins = 0;
  double vmax = 0.0, vmin_pos = 0.0;
  for (const auto& s : series) {
    bins = std::max(bins, s.values.size());
    for (double v : s.values) {
      vmax = std::max(vmax, v);
      if (v > 0.0 && (vmin_pos == 0.0 || v < vmin_pos)) vmin_pos = v;
    }
  }
  double lo = 0.0, hi = vmax > 0.0 ? vmax : 1.0;
  if (log_scale) {
    lo = vmin_pos > 0.0 ? std::floor(std::log10(vmin_pos)) : 0.0;
    hi = vmax > 0.0 ? std::ceil(std::log10(vmax)) : lo + 1.0;
    if (hi <= lo) hi = lo + 1.0;
  }
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  auto y_of = [&](double v) {
    const double t = log_scale ? (std::log10(v) - lo) / (hi - lo) : v / hi;
    return top + plot_h * (1.0 - std::clamp(t, 0.0, 1.0));
  };

  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" font-family=\"sans-serif\" "
                "font-size=\"11\">\n",
                width, height);
  out += buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"20\" font-size=\"14\">", left);
  out += buf + xml_escape(title) + "</text>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", left, top + plot_h,
                left + plot_w, top + plot_h);
  out += buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", left, top, left,
                top + plot_h);
  out += buf;
  for (int i = 0; i <= 4; ++i) {
    const double v = log_scale ? lo + (hi - lo) * i / 4.0 : hi * i / 4.0;
    const double y = top + plot_h * (1.0 - i / 4.0);
    if (log_scale) {
      std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"end\">1e%g</text>\n", left - 4, y + 4, v);
    } else {
      std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"end\">%.3g</text>\n", left - 4, y + 4, v);
    }
    out += buf;
  }
  if (bins > 0 && !series.empty()) {
    const double group = plot_w / static_cast<double>(bins);
    const double bar = group * 0.8 / static_cast<double>(series.size());
    const std::size_t label_every = std::max<std::size_t>(1, bins / 20);
    for (std::size_t k = 0; k < bins; ++k) {
      const double gx = left + group * static_cast<double>(k);
      for (std::size_t si = 0; si < series.size(); ++si) {
        if (k >= series[si].values.size()) continue;
        const double v = series[si].values[k];
        if (v <= 0.0 || (log_scale && std::log10(v) < lo)) continue;
        const double y = y_of(v);
        std::snprintf(buf, sizeof buf, "<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" fill=\"%s\"/>\n",
                      gx + group * 0.1 + bar * static_cast<double>(si), y, bar, top + plot_h - y,
                      palette[si % std::size(palette)]);
        out += buf;
      }
      if (k % label_every == 0) {
        std::snprintf(buf, sizeof buf, "<text x=\"%.2f\" y=\"%g\" text-anchor=\"middle\">%zu</text>\n", gx + group / 2,
                      top + plot_h + 14, k);
        out += buf;
      }
    }
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">k</text>\n", left + plot_w / 2,
                height - 12);
  out += buf;
  for (std::size_t si = 0; si < series.size(); ++si) {
    const double y = top + 14.0 * static_cast<double>(si);
    std::snprintf(buf, sizeof buf, "<rect x=\"%g\" y=\"%g\" width=\"10\" height=\"10\" fill=\"%s\"/>\n",
                  left + plot_w - 150, y, palette[si % std::size(palette)]);
    out += buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\">", left + plot_w - 135, y + 9);
    out += buf + xml_escape(series[si].label) + "</text>\n";
  }
  return out + "</svg>\n";
}

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::vector<ChartSeries>& series) {
  static const char* palette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"};
  const double width = 720, height = 360, left = 60, right = 20, top = 40, bottom = 50;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  std::size_t points = 0;
  double hi = 0.0;
  for (const auto& s : series) {
    points = std::max(points, s.values.size());
    for (double v : s.values) hi = std::max(hi, v);
  }
  if (hi <= 0.0) hi = 1.0;
  auto x_of = [&](std::size_t i) {
    return left + (points > 1 ? plot_w * static_cast<double>(i) / static_cast<double>(points - 1) : plot_w / 2);
  };
  auto y_of = [&](double v) { return top + plot_h * (1.0 - std::clamp(v / hi, 0.0, 1.0)); };

  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" font-family=\"sans-serif\" "
                "font-size=\"11\">\n",
                width, height);
  out += buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"20\" font-size=\"14\">", left);
  out += buf + xml_escape(title) + "</text>\n";
  std::snprintf(buf, sizeof buf,
                "<path d=\"M%g %g V%g H%g\" fill=\"none\" stroke=\"black\"/>\n", left, top, top + plot_h,
                left + plot_w);
  out += buf;
  for (int i = 0; i <= 4; ++i) {
    const double y = top + plot_h * (1.0 - i / 4.0);
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"end\">%.3g</text>\n", left - 4, y + 4,
                  hi * i / 4.0);
    out += buf;
  }
  const std::size_t label_every = std::max<std::size_t>(1, points / 10);
  for (std::size_t i = 0; i < points; i += label_every) {
    std::snprintf(buf, sizeof buf, "<text x=\"%.2f\" y=\"%g\" text-anchor=\"middle\">%zu</text>\n", x_of(i),
                  top + plot_h + 14, i);
    out += buf;
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    if (series[si].values.empty()) continue;
    std::string d;
    for (std::size_t i = 0; i < series[si].values.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.2f %.2f", i == 0 ? "M" : " L", x_of(i), y_of(series[si].values[i]));
      d += buf;
    }
    out += "<path d=\"" + d + "\" fill=\"none\" stroke=\"" + palette[si % std::size(palette)] +
           "\" stroke-width=\"2\"/>\n";
    const double y = top + 14.0 * static_cast<double>(si);
    std::snprintf(buf, sizeof buf, "<rect x=\"%g\" y=\"%g\" width=\"10\" height=\"10\" fill=\"%s\"/>\n",
                  left + plot_w - 150, y, palette[si % std::size(palette)]);
    out += buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\">", left + plot_w - 135, y + 9);
    out += buf + xml_escape(series[si].label) + "</text>\n";
  }
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">", left + plot_w / 2, height - 12);
  out += buf + xml_escape(x_label) + "</text>\n";
  return out + "</svg>\n";
}

}  // namespace rbsn
