// Acceptance run: one PASS/FAIL/SKIP line per criterion.
//   acceptance [--work DIR] [--only N]...
// Exit 1 on any failure of a hard criterion, 77 when everything selected was skipped.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "rbsn/alloc.hpp"
#include "rbsn/analysis.hpp"
#include "rbsn/arch.hpp"
#include "rbsn/attack.hpp"
#include "rbsn/binio.hpp"
#include "rbsn/error.hpp"
#include "rbsn/experiment.hpp"
#include "rbsn/nn.hpp"
#include "rbsn/rng.hpp"

namespace fs = std::filesystem;
using namespace rbsn;

namespace {

struct Outcome {
  enum Kind { Pass, Fail, Skip } kind = Fail;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome verdict(bool ok, std::string detail) { return {ok ? Outcome::Pass : Outcome::Fail, std::move(detail)}; }

fs::path g_work;

ExperimentConfig desk_config() {
  const fs::path root = RBSN_SOURCE_DIR;
  auto cfg = load_config(root / "configs" / "digits_desk.cfg");
  for (const char* key : {"train_images", "train_labels", "test_images", "test_labels"}) {
    cfg.set(key, (root / cfg.get(key)).string());
  }
  return cfg;
}

MaskSet random_mask(const NetworkSpec& spec, double r, std::uint64_t seed) {
  auto scores = init_scores(spec, {ScoreInitKind::Uniform, 1.0}, seed);
  return binarize(scores, solve_allocation(prunable_sizes(spec), r, 0.5));
}

template <typename T>
Tensor<T> uniform_batch(const Shape& sample, std::size_t n, std::uint64_t seed) {
  Shape s{n};
  s.insert(s.end(), sample.begin(), sample.end());
  Tensor<T> x(s);
  Rng rng(seed);
  for (auto& v : x.data) v = static_cast<T>(rng.uniform());
  return x;
}

std::vector<int> random_labels(std::size_t n, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  return y;
}

// ----- 1 ---------------------------------------------------------------------------

Outcome flop_ratios() {
  const BlockCostParams b{0.99, 3.0, 16.0, 128.0, 128.0};
  const double expect[3] = {0.6616, 0.5740, 0.7065};
  const CostPhase phases[3] = {CostPhase::ForwardTrain, CostPhase::ForwardEval, CostPhase::Backward};
  bool ok = true;
  std::string d;
  for (int i = 0; i < 3; ++i) {
    const double ratio = flop_cost(b, phases[i], Precision::Binary) / flop_cost(b, phases[i], Precision::Full);
    ok = ok && std::round(ratio * 1e4) == std::round(expect[i] * 1e4);
    d += (i ? ", " : "") + fmt("%.4f", ratio) + " (want " + fmt("%.4f", expect[i]) + ")";
  }
  return verdict(ok, "forward-train, forward-eval, backward ratios " + d);
}

// ----- 2 ---------------------------------------------------------------------------

Outcome retention_distribution() {
  const std::int64_t n = 589824;
  const double r = 0.99;
  const double kernels = double(n) / 9.0;
  const auto approx = kernel_retention_pmf(n, r, PmfMethod::StirlingApprox);
  const double e3 = approx[3] * kernels, e4 = approx[4] * kernels;
  const bool counts_ok = std::abs(e3 - 8.19) <= 0.05 && std::abs(e4 - 0.18) <= 0.05;

  const Shape shape{256, 256, 3, 3};
  const auto m = target_retained(n, r);
  const auto t0 = std::chrono::steady_clock::now();
  const auto mc = monte_carlo_random_prune(shape, m, 100000, 2024, "mc");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto binom = kernel_retention_pmf(n, r, PmfMethod::ExactBinomial);
  const auto hyper = kernel_retention_pmf(n, r, PmfMethod::Hypergeometric);
  const auto observed = mc.mean.kernel->pmf();
  const double tv_binom = total_variation(observed, binom);
  const double tv_hyper = total_variation(observed, hyper);
  return verdict(counts_ok && tv_binom < 0.01,
                 "approx E[k=3] " + fmt("%.3f", e3) + ", E[k=4] " + fmt("%.3f", e4) + "; 1e5-trial MC TV vs binomial " +
                     fmt("%.2e", tv_binom) + " (vs hypergeometric " + fmt("%.2e", tv_hyper) + ") in " +
                     fmt("%.1f", secs) + " s");
}

// ----- 3 ---------------------------------------------------------------------------

Outcome allocation() {
  const auto single = solve_allocation(LayerSizes::from_counts({1728}), 0.99, 1.0);
  const bool example = single.retained[0] == 17;

  Rng rng(31337);
  int instances = 0, failures = 0;
  std::string first;
  auto fail = [&](bool ok) {
    if (!ok && first.empty()) first = " (first at instance " + std::to_string(instances) + ")";
    failures += ok ? 0 : 1;
  };
  while (instances < 1000) {
    const int layers = 1 + static_cast<int>(rng.below(8));
    std::vector<std::int64_t> sizes;
    for (int i = 0; i < layers; ++i) sizes.push_back(1 + static_cast<std::int64_t>(std::exp(rng.uniform(0.0, 13.0))));
    const auto total = std::accumulate(sizes.begin(), sizes.end(), std::int64_t{0});
    const double r = rng.uniform(0.0, 0.999);
    const double p = instances % 10 == 0 ? double(instances % 20 == 0) : rng.uniform(0.0, 1.0);
    if (target_retained(total, r) < layers) continue;
    ++instances;
    const auto plan = solve_allocation(LayerSizes::from_counts(sizes), r, p);
    fail(plan.total_retained() == target_retained(total, r));
    for (int i = 0; i < layers; ++i) fail(plan.retained[i] >= 1 && plan.retained[i] <= sizes[i]);
    for (int i = 0; i < layers; ++i) {
      for (int j = 0; j < layers; ++j) {
        if (plan.continuous[i] >= double(sizes[i]) || plan.continuous[j] >= double(sizes[j])) continue;
        const double law = std::pow(double(sizes[i]) / double(sizes[j]), p);
        fail(std::abs(plan.continuous[i] / plan.continuous[j] - law) <= 1e-9 * law);
      }
    }
    if (p == 1.0) {
      for (int j = 0; j < layers; ++j) {
        for (int k = 0; k < layers; ++k) {
          const double gap = std::abs(double(plan.retained[j]) / double(sizes[j]) - double(plan.retained[k]) / double(sizes[k]));
          fail(j == k || gap < 1.0 / double(sizes[j]) + 1.0 / double(sizes[k]));
        }
      }
    }
    fail(solve_allocation(LayerSizes::from_counts(sizes), r, p).retained == plan.retained);
    if (r + 0.01 < 1.0 && target_retained(total, r + 0.01) >= layers) {
      fail(solve_allocation(LayerSizes::from_counts(sizes), r + 0.01, p).total_retained() <= plan.total_retained());
    }
    if (p == 0.0) {
      std::int64_t lo = INT64_MAX, hi = 0;
      for (int i = 0; i < layers; ++i) {
        if (plan.retained[i] == sizes[i]) continue;
        lo = std::min(lo, plan.retained[i]);
        hi = std::max(hi, plan.retained[i]);
      }
      if (hi > 0) fail(hi - lo <= 1);
    }
  }
  return verdict(example && failures == 0, "1728 weights at r=0.99, p=1 keep " + std::to_string(single.retained[0]) +
                                               "; " + std::to_string(failures) + " property failures over " +
                                               std::to_string(instances) + " random instances" + first);
}

// ----- 4 ---------------------------------------------------------------------------

Outcome theorems() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto sweep = sweep_theorems(10, 3);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return verdict(sweep.counterexamples() == 0 && secs < 60.0,
                 std::to_string(sweep.configurations) + " size vectors, " + std::to_string(sweep.rate_balance_cases) +
                     " rate-balance and " + std::to_string(sweep.path_count_cases) + " path-count cases, " +
                     std::to_string(sweep.rate_balance_violations) + "+" + std::to_string(sweep.path_count_violations) +
                     " violations, " + std::to_string(sweep.allocation_mismatches) + " allocation mismatches, " +
                     fmt("%.1f", secs) + " s");
}

// ----- 5 ---------------------------------------------------------------------------

Outcome gradients() {
  const auto spec = make_cnn3_small({1, 8, 8}, 10);
  const auto weights = binary_init<double>(spec, 5);
  const auto mask = random_mask(spec, 0.5, 6);
  const auto x = uniform_batch<double>({1, 8, 8}, 4, 7);
  const auto y = random_labels(4, 10, 8);
  const ForwardOptions fwd{BnMode::Train, false};
  Network<double> net(spec, weights);
  const auto pass = net.forward(mask, x, fwd);
  const auto res = net.backward(pass, y);

  // oracle: central differences of the loss in the effective weights, times w (straight-through)
  MaskSet ones;
  for (const auto& p : prunable_layers(spec)) {
    ones.layers.push_back({p.name, p.weight_shape, std::vector<std::uint8_t>(numel(p.weight_shape), 1)});
  }
  Network<double> probe(spec, pass.effective_weights);
  auto loss_at = [&] { return softmax_cross_entropy(probe.forward(ones, x, fwd).logits, y, nullptr); };
  const double h = 1e-5;
  double worst = 0.0;
  std::size_t coords = 0, tiny = 0, bad = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (std::size_t i = 0; i < weights[l].size(); ++i) {
      auto& w = probe.mutable_weight(l)[i];
      const double orig = w;
      w = orig + h;
      const double up = loss_at();
      w = orig - h;
      const double down = loss_at();
      w = orig;
      const double fd = (up - down) / (2 * h) * weights[l][i];
      const double got = res.grad_scores[l][i];
      const double scale = std::max(std::abs(fd), std::abs(got));
      ++coords;
      if (scale < 1e-7) {
        // relative error is meaningless at the finite-difference noise floor
        ++tiny;
        bad += std::abs(got - fd) > 1e-9;
        continue;
      }
      const double rel = std::abs(got - fd) / scale;
      worst = std::max(worst, rel);
      bad += rel >= 1e-4;
    }
  }
  double worst_row = 0.0;
  Tensor<double> g;
  const auto logits = uniform_batch<double>({10}, 64, 9);
  softmax_cross_entropy(logits, random_labels(64, 10, 10), &g);
  for (std::size_t r = 0; r < 64; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 10; ++j) s += g[r * 10 + j];
    worst_row = std::max(worst_row, std::abs(s));
  }
  return verdict(bad == 0 && worst_row < 1e-10 && coords <= 5000,
                 std::to_string(coords) + " score coordinates, max rel. error " + fmt("%.2e", worst) + " (" +
                     std::to_string(tiny) + " below 1e-7 checked absolutely); max CE row sum " + fmt("%.1e", worst_row));
}

// ----- 6 ---------------------------------------------------------------------------

Outcome scale_invariance() {
  const auto base_cfg = desk_config();
  const auto data = load_experiment_data(base_cfg);
  const std::size_t batch = 256;
  Tensor<double> x({batch, 1, 8, 8});
  std::vector<int> y(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < 64; ++j) x[i * 64 + j] = data.test.inputs[i * 64 + j];
    y[i] = data.test.labels[i];
  }
  const ForwardOptions fwd{BnMode::Train, false};
  const BackwardOptions opts{false, false, true};

  struct Probe {
    std::vector<int> labels;
    Tensor<double> grad;  // into the last linear layer
  };
  auto probe = [&](bool last_bn, double alpha, double last_eps = 1e-5) {
    const auto spec = make_architecture("cnn4_narrow", {1, 8, 8}, 10, Activation::Relu, last_bn);
    Network<double> net(spec, binary_init<double>(spec, 11));
    if (last_bn) net.bn_states().back().epsilon = last_eps;
    const std::size_t last = net.prunable().size() - 1;
    for (auto& v : net.mutable_weight(last).data) v *= alpha;
    const auto mask = random_mask(spec, 0.9, 12);
    auto pass = net.forward(mask, x, fwd);
    auto res = net.backward(pass, y, opts);
    return Probe{argmax_rows(pass.logits), res.node_input_grads[net.last_linear_node()]};
  };

  auto rel_change = [](const Probe& a, const Probe& b) {
    double diff = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < a.grad.size(); ++i) {
      diff += (a.grad[i] - b.grad[i]) * (a.grad[i] - b.grad[i]);
      norm += a.grad[i] * a.grad[i];
    }
    return std::sqrt(diff / norm);
  };
  const auto a = probe(true, 1.0), b = probe(true, 16.0);
  const double rel = rel_change(a, b);
  // the same probe with the logit BN epsilon removed isolates its contribution
  const double rel_exact = rel_change(probe(true, 1.0, 0.0), probe(true, 16.0, 0.0));
  std::size_t flips = 0;
  for (std::size_t i = 0; i < batch; ++i) flips += a.labels[i] != b.labels[i];

  const auto c = probe(false, 1.0), d = probe(false, 16.0);
  const std::size_t width = c.grad.size() / batch;
  double before = 0.0, after = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < batch; ++i) {
    if (c.labels[i] != y[i] || d.labels[i] != y[i]) continue;
    ++correct;
    double nc = 0.0, nd = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      nc += c.grad[i * width + j] * c.grad[i * width + j];
      nd += d.grad[i * width + j] * d.grad[i * width + j];
    }
    before += std::sqrt(nc);
    after += std::sqrt(nd);
  }
  const double shrink = after > 0.0 ? before / after : INFINITY;
  return verdict(rel < 1e-6 && flips == 0 && correct > 0 && shrink > 10.0,
                 "with last BN (eps 1e-5): rel. gradient change " + fmt("%.2e", rel) + " (" + fmt("%.1e", rel_exact) +
                     " at eps 0), " + std::to_string(flips) +
                     " label changes / 256; without: gradient norm shrinks " + fmt("%.3g", shrink) + "x over " +
                     std::to_string(correct) + " correctly classified samples");
}

// ----- 7 ---------------------------------------------------------------------------

Outcome attacks() {
  const double eps = 8.0 / 255.0;
  std::size_t coords = 0, outside = 0;
  const auto spec = make_cnn3_small({3, 8, 8}, 4);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Network<float> net(spec, binary_init<float>(spec, seed));
    const auto mask = random_mask(spec, 0.5, seed + 100);
    const auto x = uniform_batch<float>({3, 8, 8}, 8, seed + 200);
    const auto y = random_labels(8, 4, seed + 300);
    Rng rng(seed);
    const auto adv = pgd_attack<float>(network_loss_grad(net, mask, y), x, {eps, true}, {10, eps / 4, true}, rng);
    for (std::size_t i = 0; i < x.size(); ++i) {
      ++coords;
      const double d = double(adv[i]) - double(x[i]);
      // one float ulp of slack at the boundary
      outside += std::abs(d) > eps * (1 + 1e-6) || adv[i] < 0.0f || adv[i] > 1.0f;
    }
  }

  // loss w.x on an unbounded domain: one step of size eps lands on x + eps sign(w)
  const std::vector<double> w{0.75, -2.0, 0.0, 1e-3, -1e-9};
  const Tensor<double> xl({1, 5}, {0.3, -1.0, 2.0, 5.0, 0.0});
  LossGradFn<double> linear = [&](const Tensor<double>& in, Tensor<double>& g) {
    g = Tensor<double>(in.shape);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      s += w[i] * in[i];
      g[i] = w[i];
    }
    return s;
  };
  Rng rng(1);
  const double le = 0.25;
  const auto worst = pgd_attack<double>(linear, xl, {le, false}, {1, le, false}, rng);
  bool analytic = true;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double want = xl[i] + (w[i] > 0 ? le : w[i] < 0 ? -le : 0.0);
    analytic = analytic && worst[i] == want;
  }

  Network<float> net(spec, binary_init<float>(spec, 1));
  const auto mask = random_mask(spec, 0.5, 2);
  const auto x = uniform_batch<float>({3, 8, 8}, 8, 3);
  const auto y = random_labels(8, 4, 4);
  const auto same = pgd_attack<float>(network_loss_grad(net, mask, y), x, {0.0, true}, {10, 0.01, true}, rng);
  const bool identity = same.data == x.data;

  PerturbationCache cache({3, 8, 8}, 2, eps);
  std::vector<std::uint64_t> keys(8);
  std::iota(keys.begin(), keys.end(), std::uint64_t{500});
  cache.set_key_space(keys);
  std::size_t cache_outside = 0, adv_outside = 0;
  for (int epoch = 0; epoch < 5; ++epoch) {
    Tensor<float> batch = x;
    auto recs = augment(batch, AugmentPolicy::Crop4Flip, rng);
    const auto adv = fgsm_atta_step(network_loss_grad(net, mask, y), batch, keys, recs, {eps, true}, eps, cache, rng);
    for (std::size_t i = 0; i < adv.size(); ++i) adv_outside += std::abs(double(adv[i]) - double(batch[i])) > eps * (1 + 1e-6);
    for (auto k : keys) {
      for (float v : *cache.raw(k)) cache_outside += std::abs(double(v)) > eps * (1 + 1e-6);
    }
  }
  return verdict(outside == 0 && analytic && identity && cache_outside == 0 && adv_outside == 0 && cache.size() == 8,
                 std::to_string(outside) + " of " + std::to_string(coords) + " PGD coordinates outside the ball; " +
                     "linear worst case " + (analytic ? "exact" : "wrong") + "; eps=0 " +
                     (identity ? "identity" : "not identity") + "; ATTA cache outside after 5 epochs: " +
                     std::to_string(cache_outside));
}

// ----- 8 ---------------------------------------------------------------------------

Outcome cifar_smoke() {
  const fs::path root = RBSN_SOURCE_DIR;
  auto cfg = load_config(root / "configs" / "cifar10_smoke.cfg");
  const char* env = std::getenv("RBSN_DATA_DIR");
  if (cfg.data_dir.empty() && (env == nullptr || !fs::exists(fs::path(env) / "test_batch.bin"))) {
    return {Outcome::Skip, "CIFAR-10 binaries not found; set RBSN_DATA_DIR"};
  }
  cfg.out_dir = (g_work / "cifar10_smoke").string();
  const auto run = run_train(cfg, [](std::string_view m) { std::fprintf(stderr, "  %.*s\n", int(m.size()), m.data()); });
  const auto mask = decode_rbsm(read_file_bytes(run.out_dir / "mask.rbsm"));
  const auto model = build_model(cfg, {3, 32, 32}, 10);
  check_mask_against_plan(mask, model, cfg);
  return verdict(run.test.clean_acc > 0.35 && run.test.robust_acc > 0.15 && !run.result.metrics.aborted,
                 "test clean " + fmt("%.4f", run.test.clean_acc) + ", PGD-10 " + fmt("%.4f", run.test.robust_acc) +
                     " (weight hash unchanged, popcounts exact)");
}

// ----- 9-11 on the 8x8 digits desk setup --------------------------------------------

double best_robust(const ExperimentConfig& cfg) {
  const auto run = run_train(cfg);
  const auto& m = run.result.metrics;
  if (m.aborted || m.best_epoch < 0) return 0.0;
  return m.best_robust;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

Outcome allocation_trend() {
  std::vector<double> adaptive, fixed;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto cfg = desk_config();
    cfg.r = 0.99;
    cfg.seed = seed;
    cfg.p = 0.1;
    cfg.out_dir = (g_work / ("trend_p0.1_s" + std::to_string(seed))).string();
    adaptive.push_back(best_robust(cfg));
    cfg.p = 1.0;
    cfg.out_dir = (g_work / ("trend_p1.0_s" + std::to_string(seed))).string();
    fixed.push_back(best_robust(cfg));
    per_seed += (seed ? "; " : "") + fmt("%.3f", adaptive.back()) + " vs " + fmt("%.3f", fixed.back());
  }
  const double a = median3(adaptive), f = median3(fixed);
  return verdict(a >= f, "(soft) r=0.99 robust val. accuracy, median p=0.1 " + fmt("%.3f", a) + " vs p=1.0 " +
                             fmt("%.3f", f) + " [per seed " + per_seed + "]");
}

fs::path smoke_dir() { return g_work / "desk_smoke"; }

std::string sign_summary(const AnalyzeRun& a) {
  const auto& e = a.empty_channel_test;
  const auto& t = a.kernel_tail_test;
  return "empty channels " + std::to_string(e.wins) + "-" + std::to_string(e.losses) + "-" + std::to_string(e.ties) +
         " p=" + fmt("%.3g", e.p_value) + ", k>=4 tail " + std::to_string(t.wins) + "-" + std::to_string(t.losses) + "-" +
         std::to_string(t.ties) + " p=" + fmt("%.3g", t.p_value);
}

Outcome mask_structure() {
  auto cfg = desk_config();
  cfg.out_dir = smoke_dir().string();
  if (!fs::exists(smoke_dir() / "mask.rbsm")) run_train(cfg);
  AnalyzeOptions opt;
  opt.random_trials = 200;
  const auto a = run_analyze(cfg, smoke_dir() / "mask.rbsm", opt, smoke_dir() / "analysis");
  std::string layers;
  for (const auto& l : a.layers) {
    if (!l.conv) continue;
    layers += " " + l.layer + " empty " + fmt("%.3f", l.empty_channels) + "/" + fmt("%.3f", l.random_empty_channels) +
              " tail " + fmt("%.4f", l.kernel_tail) + "/" + fmt("%.4f", l.random_kernel_tail) + ";";
  }
  std::string detail = "r=0.9 smoke mask, wins-losses-ties over conv layers (trained/random): " + sign_summary(a) +
                       " [" + layers + " ]";
  // informational only: the r=0.99 mask trained for criterion 9, if present
  const auto dense = g_work / "trend_p0.1_s0";
  if (fs::exists(dense / "mask.rbsm")) {
    const auto c99 = load_config(dense / "config.resolved");
    detail += "; supplementary r=0.99 mask: " + sign_summary(run_analyze(c99, dense / "mask.rbsm", opt, dense / "analysis"));
  }
  return verdict(a.empty_channel_test.majority() && a.kernel_tail_test.majority(), detail);
}

Outcome reproducibility() {
  auto cfg = desk_config();
  cfg.epochs = 2;
  std::vector<std::vector<std::uint8_t>> masks, metrics;
  for (const char* run : {"repro_a", "repro_b"}) {
    cfg.out_dir = (g_work / run).string();
    run_train(cfg);
    masks.push_back(read_file_bytes(g_work / run / "mask.rbsm"));
    metrics.push_back(read_file_bytes(g_work / run / "metrics.csv"));
  }
  return verdict(masks[0] == masks[1] && metrics[0] == metrics[1],
                 "mask.rbsm " + std::string(masks[0] == masks[1] ? "identical" : "DIFFERENT") + " (" +
                     std::to_string(masks[0].size()) + " bytes), metrics.csv " +
                     (metrics[0] == metrics[1] ? "identical" : "DIFFERENT"));
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  g_work = fs::temp_directory_path() / "rbsn_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      only.insert(std::atoi(argv[++i]));
    } else {
      std::fprintf(stderr, "usage: %s [--work DIR] [--only N]...\n", argv[0]);
      return 2;
    }
  }
  fs::create_directories(g_work);

  struct Criterion {
    int id;
    bool soft;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all = {
      {1, false, flop_ratios},  {2, false, retention_distribution}, {3, false, allocation},
      {4, false, theorems},     {5, false, gradients},              {6, false, scale_invariance},
      {7, false, attacks},      {8, false, cifar_smoke},            {9, true, allocation_trend},
      {10, false, mask_structure}, {11, false, reproducibility}};

  int hard_failures = 0, ran = 0, skipped = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Outcome::Fail, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const char* tag = o.kind == Outcome::Pass ? "PASS" : o.kind == Outcome::Skip ? "SKIP" : "FAIL";
    std::printf("criterion %2d %s  %s  [%.1f s]\n", c.id, tag, o.detail.c_str(), secs);
    std::fflush(stdout);
    hard_failures += o.kind == Outcome::Fail && !c.soft;
    skipped += o.kind == Outcome::Skip;
  }
  if (hard_failures > 0) return 1;
  return ran > 0 && skipped == ran ? 77 : 0;
}
