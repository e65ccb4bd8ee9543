#include "rbsn/experiment.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "rbsn/arch.hpp"
#include "rbsn/binio.hpp"
#include "rbsn/error.hpp"

namespace rbsn {

namespace fs = std::filesystem;

namespace {

std::uint64_t stream_seed(const ExperimentConfig& cfg, std::string_view name) {
  return Rng::derive(cfg.seed, name).seed();
}

void say(const LogFn& log, const std::string& msg) {
  if (log) log(msg);
}

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

Activation parse_activation(const std::string& name) {
  return name == "leaky_relu" ? Activation::LeakyRelu : Activation::Relu;
}

fs::path cifar_dir(const ExperimentConfig& cfg) {
  if (!cfg.data_dir.empty()) return cfg.data_dir;
  if (const char* env = std::getenv("RBSN_DATA_DIR"); env && *env) return env;
  throw ConfigError("dataset 'cifar10' needs data_dir (or the RBSN_DATA_DIR environment variable)");
}

std::string file_stem(const std::string& name) {
  std::string out = name;
  for (auto& ch : out) {
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
  }
  return out;
}

Dataset subset(const Dataset& d, std::size_t per_class) { return per_class == 0 ? d : first_k_per_class(d, per_class); }

std::string eval_csv(const std::string& split, const EvalResult& e) {
  return "split,samples,clean_acc,robust_acc\n" + split + "," + std::to_string(e.samples) + "," + fixed(e.clean_acc) +
         "," + fixed(e.robust_acc) + "\n";
}

}  // namespace

AdversarialBudget attack_budget(const ExperimentConfig& cfg) {
  AdversarialBudget b;
  b.epsilon = cfg.epsilon;
  // blob features are unbounded reals, not pixel intensities
  b.clip_valid_range = cfg.dataset != "blobs";
  return b;
}

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  cfg.validate();
  Dataset train, test;
  if (cfg.dataset == "cifar10") {
    std::tie(train, test) = load_cifar10_binary(cifar_dir(cfg));
  } else if (cfg.dataset == "idx") {
    train = load_idx(cfg.train_images, cfg.train_labels);
    test = load_idx(cfg.test_images, cfg.test_labels);
    train.split = "train";
    test.split = "test";
  } else {
    auto all = synth_blobs(cfg.blobs_classes, cfg.blobs_dim, cfg.blobs_per_class, cfg.blobs_separation,
                           stream_seed(cfg, "blobs"));
    std::tie(train, test) = split_validation(all, 0.2, stream_seed(cfg, "blobs-test"));
    train.split = "train";
    test.split = "test";
  }
  train = subset(train, cfg.train_per_class);
  test = subset(test, cfg.test_per_class);
  ExperimentData out;
  std::tie(out.train, out.val) = split_validation(train, cfg.val_fraction, stream_seed(cfg, "split"));
  out.test = std::move(test);
  out.train.split = "train";
  out.val.split = "val";
  out.test.split = "test";
  return out;
}

Model build_model(const ExperimentConfig& cfg, const Shape& sample_shape, int classes) {
  cfg.validate();
  Model m;
  m.spec = make_architecture(cfg.arch, sample_shape, classes, parse_activation(cfg.activation), cfg.last_bn);
  const auto wseed = stream_seed(cfg, "weights");
  m.weights = cfg.init == "binary" ? binary_init<float>(m.spec, wseed)
                                   : signed_kaiming_const_init<float>(m.spec, cfg.r, wseed);
  const ScoreInit si{cfg.score_init == "uniform" ? ScoreInitKind::Uniform : ScoreInitKind::FanScaled, cfg.score_a};
  m.scores = init_scores(m.spec, si, stream_seed(cfg, "scores"));
  m.plan = solve_allocation(prunable_sizes(m.spec), cfg.r, cfg.p);
  return m;
}

TrainConfig to_train_config(const ExperimentConfig& cfg) {
  cfg.validate();
  TrainConfig t;
  t.epochs = cfg.epochs;
  t.batch_size = cfg.batch_size;
  t.lr0 = cfg.lr0;
  t.momentum = cfg.momentum;
  t.weight_decay = cfg.weight_decay;
  t.attack = parse_attack_kind(cfg.attack);
  t.budget = attack_budget(cfg);
  t.train_pgd_steps = cfg.train_pgd_steps;
  t.eval_pgd_steps = cfg.eval_pgd_steps;
  t.pgd_step_fraction = cfg.pgd_step_fraction;
  t.fgsm_step_fraction = cfg.fgsm_step_fraction;
  t.atta_factor = cfg.atta_factor;
  t.attack_bn = cfg.attack_bn == "eval" ? BnMode::Eval : BnMode::Train;
  t.r = cfg.r;
  t.p = cfg.p;
  t.allocation = cfg.allocation == "global" ? AllocationKind::Global : AllocationKind::Adaptive;
  t.augment = parse_augment_policy(cfg.augment);
  t.seed = stream_seed(cfg, "train");
  t.eval_batch_size = cfg.eval_batch_size;
  t.timing = cfg.timing;
  if (cfg.checkpoint) t.checkpoint = fs::path(cfg.out_dir) / "checkpoint.rbsc";
  return t;
}

void check_mask_against_plan(const MaskSet& mask, const Model& model, const ExperimentConfig& cfg) {
  const auto layers = prunable_layers(model.spec);
  RBSN_CHECK(mask.layers.size() == layers.size(), ShapeError,
             "mask has " + std::to_string(mask.layers.size()) + " layers, architecture has " +
                 std::to_string(layers.size()));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    RBSN_CHECK(mask.layers[l].shape == layers[l].weight_shape, ShapeError,
               "mask layer " + mask.layers[l].name + " does not match architecture layer " + layers[l].name);
    if (cfg.allocation == "adaptive") {
      RBSN_CHECK(mask.layers[l].popcount() == model.plan.retained[l], ShapeError,
                 "mask layer " + mask.layers[l].name + " keeps " + std::to_string(mask.layers[l].popcount()) +
                     " weights, the allocation prescribes " + std::to_string(model.plan.retained[l]));
    }
  }
  RBSN_CHECK(mask.popcount() == model.plan.total_retained(), ShapeError,
             "mask keeps " + std::to_string(mask.popcount()) + " weights, expected " +
                 std::to_string(model.plan.total_retained()));
}

TrainRun run_train(const ExperimentConfig& cfg, const LogFn& log) {
  cfg.validate();
  const auto data = load_experiment_data(cfg);
  say(log, "data: " + std::to_string(data.train.size()) + " train, " + std::to_string(data.val.size()) + " val, " +
               std::to_string(data.test.size()) + " test");
  const auto model = build_model(cfg, data.train.sample_shape(), data.train.class_count);
  say(log, "model: " + cfg.arch + ", " + std::to_string(prunable_sizes(model.spec).total()) + " prunable weights, " +
               std::to_string(model.plan.total_retained()) + " retained");

  TrainRun run;
  run.out_dir = cfg.out_dir;
  fs::create_directories(run.out_dir);
  write_text_atomic(run.out_dir / "config.resolved", cfg.to_text());
  write_text_atomic(run.out_dir / "allocation.csv", model.plan.to_table());

  const auto tcfg = to_train_config(cfg);
  run.result = train(model.spec, model.weights, data.train, data.val, tcfg, model.scores,
                     [&](const EpochMetrics& m, const MaskSet&) {
                       say(log, "epoch " + std::to_string(m.epoch) + " lr " + fixed(m.lr) + " loss " +
                                    fixed(m.train_loss) + " val clean " + fixed(m.clean_acc) + " robust " +
                                    fixed(m.robust_acc));
                     });
  if (run.result.metrics.aborted) say(log, "aborted: " + run.result.metrics.abort_reason);

  Network<float> net(model.spec, model.weights);
  net.bn_states() = run.result.best_bn;
  if (cfg.epochs == 0) calibrate_bn(net, run.result.best_mask, data.train.inputs, cfg.batch_size);
  run.test = evaluate(net, run.result.best_mask, data.test, tcfg.budget, cfg.eval_pgd_steps,
                      cfg.epsilon * cfg.pgd_step_fraction, stream_seed(cfg, "test-eval"), cfg.eval_batch_size);
  say(log, "test: clean " + fixed(run.test.clean_acc) + " robust " + fixed(run.test.robust_acc));

  write_text_atomic(run.out_dir / "metrics.csv", run.result.metrics.to_csv());
  write_file_atomic(run.out_dir / "mask.rbsm", encode_rbsm(run.result.best_mask));
  write_file_atomic(run.out_dir / "bn.rbsb", encode_bn_states(net.bn_states()));
  write_text_atomic(run.out_dir / "test.csv", eval_csv("test", run.test));
  return run;
}

EvalResult run_eval(const ExperimentConfig& cfg, const fs::path& mask_path, const fs::path& bn_path,
                    const LogFn& log) {
  cfg.validate();
  const auto mask = decode_rbsm(read_file_bytes(mask_path));
  const auto data = load_experiment_data(cfg);
  const auto model = build_model(cfg, data.train.sample_shape(), data.train.class_count);
  check_mask_against_plan(mask, model, cfg);
  Network<float> net(model.spec, model.weights);

  fs::path bn = bn_path;
  if (bn.empty() && fs::exists(mask_path.parent_path() / "bn.rbsb")) bn = mask_path.parent_path() / "bn.rbsb";
  if (!bn.empty()) {
    auto states = decode_bn_states(read_file_bytes(bn));
    RBSN_CHECK(states.size() == net.bn_states().size(), ShapeError, "BN file does not match the architecture");
    for (std::size_t i = 0; i < states.size(); ++i) {
      RBSN_CHECK(states[i].running_mean.size() == net.bn_states()[i].running_mean.size(), ShapeError,
                 "BN file does not match the architecture");
    }
    net.bn_states() = std::move(states);
    say(log, "batch-norm statistics from " + bn.string());
  } else {
    calibrate_bn(net, mask, data.train.inputs, cfg.batch_size);
    say(log, "batch-norm statistics calibrated on the training split");
  }
  return evaluate(net, mask, data.test, attack_budget(cfg), cfg.eval_pgd_steps, cfg.epsilon * cfg.pgd_step_fraction,
                  stream_seed(cfg, "test-eval"), cfg.eval_batch_size);
}

SignTest sign_test(std::size_t wins, std::size_t losses, std::size_t ties) {
  SignTest t{wins, losses, ties, 1.0};
  const std::size_t n = wins + losses;
  double p = 0.0;
  for (std::size_t k = wins; k <= n; ++k) {
    p += std::exp(std::lgamma(double(n) + 1) - std::lgamma(double(k) + 1) - std::lgamma(double(n - k) + 1) -
                  double(n) * std::log(2.0));
  }
  t.p_value = n == 0 ? 1.0 : std::min(1.0, p);
  return t;
}

AnalyzeRun run_analyze(const ExperimentConfig& cfg, const fs::path& mask_path, const AnalyzeOptions& options,
                       const fs::path& out_dir, const LogFn& log) {
  cfg.validate();
  const auto mask = decode_rbsm(read_file_bytes(mask_path));
  // shapes only: the architecture is rebuilt without loading any data
  Shape sample;
  int classes = 10;
  if (cfg.dataset == "blobs") {
    sample = {cfg.blobs_dim};
    classes = cfg.blobs_classes;
  } else if (cfg.dataset == "idx") {
    const auto d = load_idx(cfg.test_images, cfg.test_labels);
    sample = d.sample_shape();
    classes = d.class_count;
  } else {
    sample = {3, 32, 32};
  }
  const auto model = build_model(cfg, sample, classes);
  check_mask_against_plan(mask, model, cfg);
  const auto layers = prunable_layers(model.spec);

  AnalyzeRun run;
  std::size_t ew = 0, el = 0, et = 0, tw = 0, tl = 0, tt = 0;
  std::vector<RetentionHistogram> all_hist;
  std::string structure =
      "layer,kind,n,m,rate,empty_channels,random_empty_channels,kernel_tail4,random_kernel_tail4\n";
  fs::create_directories(out_dir);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& mt = mask.layers[l];
    LayerStructure s;
    s.layer = layers[l].name;
    s.conv = layers[l].is_conv;
    s.n = static_cast<std::int64_t>(mt.bits.size());
    s.m = mt.popcount();
    s.trained = mask_histograms(mt);
    auto mc = monte_carlo_random_prune(mt.shape, s.m, options.random_trials,
                                       Rng::derive(cfg.seed, "analyze").child(static_cast<std::uint64_t>(l)).seed(),
                                       s.layer + "/random");
    s.random = std::move(mc.mean);
    auto empty_share = [](const LayerHistograms& h) {
      const double groups = h.input_channel.groups() + h.output_channel.groups();
      return (h.input_channel.counts[0] + h.output_channel.counts[0]) / groups;
    };
    s.empty_channels = empty_share(s.trained);
    s.random_empty_channels = empty_share(s.random);
    if (s.conv) {
      s.kernel_tail = s.trained.kernel->tail_fraction(4);
      s.random_kernel_tail = s.random.kernel->tail_fraction(4);
      (s.empty_channels > s.random_empty_channels ? ew : s.empty_channels < s.random_empty_channels ? el : et)++;
      (s.kernel_tail > s.random_kernel_tail ? tw : s.kernel_tail < s.random_kernel_tail ? tl : tt)++;
    }
    char buf[256];
    std::snprintf(buf, sizeof buf, ",%s,%lld,%lld,%.6f,%.6f,%.6f,", s.conv ? "conv" : "linear",
                  static_cast<long long>(s.n), static_cast<long long>(s.m),
                  1.0 - double(s.m) / double(s.n), s.empty_channels, s.random_empty_channels);
    structure += csv_field(s.layer) + buf;
    if (s.conv) {
      std::snprintf(buf, sizeof buf, "%.6f,%.6f", s.kernel_tail, s.random_kernel_tail);
      structure += buf;
    } else {
      structure += ",";
    }
    structure += "\n";

    for (const auto* h : {&s.trained.input_channel, &s.trained.output_channel, &s.random.input_channel,
                          &s.random.output_channel}) {
      all_hist.push_back(*h);
    }
    if (s.conv) {
      all_hist.push_back(*s.trained.kernel);
      all_hist.push_back(*s.random.kernel);
      write_text_atomic(out_dir / ("kernel_" + file_stem(s.layer) + ".svg"),
                        svg_bar_chart(s.layer + ": retained weights per kernel",
                                      {{"trained", s.trained.kernel->counts}, {"random", s.random.kernel->counts}},
                                      true));
    }
    write_text_atomic(out_dir / ("input_channel_" + file_stem(s.layer) + ".svg"),
                      svg_bar_chart(s.layer + ": retained weights per input channel",
                                    {{"trained", s.trained.input_channel.counts},
                                     {"random", s.random.input_channel.counts}},
                                    false));
    say(log, s.layer + ": empty channels " + fixed(s.empty_channels) + " (random " + fixed(s.random_empty_channels) +
                 ")" + (s.conv ? ", k>=4 kernels " + fixed(s.kernel_tail) + " (random " + fixed(s.random_kernel_tail) + ")"
                               : std::string()));
    run.layers.push_back(std::move(s));
  }
  run.empty_channel_test = sign_test(ew, el, et);
  run.kernel_tail_test = sign_test(tw, tl, tt);

  std::string align = "first,second,channels,empty_out_first,empty_in_second,intersection,jaccard,"
                      "expected_intersection,expected_jaccard\n";
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    if (!layers[l].is_conv || !layers[l + 1].is_conv || layers[l].out_channels != layers[l + 1].in_channels) continue;
    const auto a = consecutive_alignment(mask.layers[l], mask.layers[l + 1]);
    char buf[256];
    std::snprintf(buf, sizeof buf, ",%zu,%zu,%zu,%zu,%.6f,%.6f,%.6f\n", a.channels, a.empty_out_first,
                  a.empty_in_second, a.intersection, a.jaccard, a.expected_intersection, a.expected_jaccard);
    align += csv_field(layers[l].name) + "," + csv_field(layers[l + 1].name) + buf;
    run.alignment.emplace_back(layers[l].name + "->" + layers[l + 1].name, a);
  }

  run.flops = flop_report(model.spec, mask);
  write_text_atomic(out_dir / "structure.csv", structure);
  write_text_atomic(out_dir / "histograms.csv", histograms_csv(all_hist));
  write_text_atomic(out_dir / "alignment.csv", align);
  write_text_atomic(out_dir / "flops.csv", run.flops.to_csv());

  if (options.verify_theorems) {
    run.theorems = sweep_theorems(options.max_n, options.max_layers);
    const auto& t = *run.theorems;
    const std::string text = "configurations " + std::to_string(t.configurations) + "\nrate_balance_cases " +
                             std::to_string(t.rate_balance_cases) + "\npath_count_cases " +
                             std::to_string(t.path_count_cases) + "\nallocation_mismatches " +
                             std::to_string(t.allocation_mismatches) + "\n" + std::to_string(t.counterexamples()) +
                             " counterexamples\n";
    write_text_atomic(out_dir / "theorems.txt", text);
    say(log, "theorem sweep: " + std::to_string(t.counterexamples()) + " counterexamples over " +
                 std::to_string(t.configurations) + " size vectors");
  }
  return run;
}

std::string run_report(const fs::path& run_dir) {
  const auto bytes = read_file_bytes(run_dir / "metrics.csv");
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  std::getline(in, line);
  RBSN_CHECK(line.rfind("epoch,lr,train_loss,clean_acc,robust_acc", 0) == 0, FormatError,
             "metrics.csv: unexpected header");
  ChartSeries clean{"clean (val)", {}}, robust{"robust (val)", {}}, loss{"train loss", {}};
  int best = -1;
  double best_robust = -1.0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    RBSN_CHECK(cols.size() >= 5, FormatError, "metrics.csv: short row");
    loss.values.push_back(parse_real(cols[2], "train_loss"));
    clean.values.push_back(parse_real(cols[3], "clean_acc"));
    robust.values.push_back(parse_real(cols[4], "robust_acc"));
    if (robust.values.back() > best_robust) {
      best_robust = robust.values.back();
      best = static_cast<int>(robust.values.size()) - 1;
    }
  }
  write_text_atomic(run_dir / "metrics.svg", svg_line_chart("validation accuracy", "epoch", {clean, robust}));
  write_text_atomic(run_dir / "loss.svg", svg_line_chart("training loss", "epoch", {loss}));

  std::string summary = "epochs " + std::to_string(clean.values.size()) + "\n";
  if (best >= 0) {
    summary += "best epoch " + std::to_string(best) + ": val clean " + fixed(clean.values[best]) + ", val robust " +
               fixed(best_robust) + "\n";
  }
  if (fs::exists(run_dir / "test.csv")) {
    const auto t = read_file_bytes(run_dir / "test.csv");
    std::istringstream tin(std::string(t.begin(), t.end()));
    std::getline(tin, line);
    if (std::getline(tin, line)) {
      std::vector<std::string> cols;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
      RBSN_CHECK(cols.size() == 4, FormatError, "test.csv: malformed row");
      summary += "test (" + cols[1] + " samples): clean " + cols[2] + ", robust " + cols[3] + "\n";
    }
  }
  return summary;
}

}  // namespace rbsn
