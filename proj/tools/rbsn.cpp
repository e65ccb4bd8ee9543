#include <cstdio>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "rbsn/binio.hpp"
#include "rbsn/error.hpp"
#include "rbsn/experiment.hpp"

namespace fs = std::filesystem;
using namespace rbsn;

namespace {

struct Overrides {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    for (const auto& key : config_keys()) {
      std::string dashed = key.name;
      for (auto& ch : dashed) ch = ch == '_' ? '-' : ch;
      std::string names = "--" + dashed;
      if (dashed != key.name) names += ",--" + key.name;
      cmd->add_option(names, values[key.name], key.help);
    }
  }

  ExperimentConfig resolve(CLI::App* cmd) const {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    for (const auto& key : config_keys()) {
      if (cmd->count("--" + key.name) > 0) cfg.set(key.name, values.at(key.name));
    }
    cfg.validate();
    return cfg;
  }
};

void log_line(std::string_view msg) { std::cerr << msg << '\n'; }

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust binary subnetworks: edge-popup score training with adversarial examples"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "train scores and write mask, metrics and resolved config");
  Overrides train_ov;
  train_ov.attach(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "clean and PGD accuracy of a stored mask on the test split");
  Overrides eval_ov;
  eval_ov.attach(eval_cmd);
  std::string eval_mask, eval_bn, eval_out;
  eval_cmd->add_option("--mask", eval_mask, "RBSM mask file")->required();
  eval_cmd->add_option("--bn", eval_bn, "RBSB batch-norm statistics (default: bn.rbsb beside the mask)");
  eval_cmd->add_option("--out", eval_out, "also write the CSV here");

  auto* analyze_cmd = app.add_subcommand("analyze", "mask structure, FLOP model and theorem checks");
  Overrides analyze_ov;
  analyze_ov.attach(analyze_cmd);
  std::string analyze_mask, analyze_out;
  AnalyzeOptions analyze_opts;
  analyze_cmd->add_option("--mask", analyze_mask, "RBSM mask file");
  analyze_cmd->add_option("--out", analyze_out, "output directory (default: <out_dir>/analysis)");
  analyze_cmd->add_flag("--verify-theorems", analyze_opts.verify_theorems, "exhaustive allocation-theorem sweep");
  analyze_cmd->add_option("--max-n", analyze_opts.max_n, "largest layer size in the sweep")->check(CLI::Range(1, 30));
  analyze_cmd->add_option("--max-layers", analyze_opts.max_layers, "most layers in the sweep")->check(CLI::Range(1, 4));
  analyze_cmd->add_option("--random-trials", analyze_opts.random_trials, "random-pruning baseline trials")
      ->check(CLI::PositiveNumber);

  auto* report_cmd = app.add_subcommand("report", "render charts and a summary for a run directory");
  std::string report_dir;
  report_cmd->add_option("run_dir", report_dir, "directory written by train")->required()->check(CLI::ExistingDirectory);

  auto* keys_cmd = app.add_subcommand("keys", "list config keys with their defaults");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      const auto cfg = train_ov.resolve(train_cmd);
      const auto run = run_train(cfg, log_line);
      std::cout << "best_epoch " << run.result.metrics.best_epoch << "\n"
                << "test_clean " << fixed(run.test.clean_acc) << "\n"
                << "test_robust " << fixed(run.test.robust_acc) << "\n"
                << "out_dir " << run.out_dir.string() << "\n";
      return run.result.metrics.aborted ? 3 : 0;
    }
    if (*eval_cmd) {
      const auto cfg = eval_ov.resolve(eval_cmd);
      const auto res = run_eval(cfg, eval_mask, eval_bn, log_line);
      const std::string csv = "split,samples,clean_acc,robust_acc\ntest," + std::to_string(res.samples) + "," +
                              fixed(res.clean_acc) + "," + fixed(res.robust_acc) + "\n";
      std::cout << csv;
      if (!eval_out.empty()) write_text_atomic(eval_out, csv);
      return 0;
    }
    if (*analyze_cmd) {
      const auto cfg = analyze_ov.resolve(analyze_cmd);
      const fs::path out = analyze_out.empty() ? fs::path(cfg.out_dir) / "analysis" : fs::path(analyze_out);
      if (analyze_mask.empty()) {
        RBSN_CHECK(analyze_opts.verify_theorems, ConfigError, "analyze needs --mask (or --verify-theorems alone)");
        const auto sweep = sweep_theorems(analyze_opts.max_n, analyze_opts.max_layers);
        std::cout << sweep.counterexamples() << " counterexamples over " << sweep.configurations
                  << " size vectors (" << sweep.rate_balance_cases << " rate-balance and " << sweep.path_count_cases
                  << " path-count cases, " << sweep.allocation_mismatches << " allocation mismatches)\n";
        return sweep.counterexamples() == 0 ? 0 : 4;
      }
      const auto run = run_analyze(cfg, analyze_mask, analyze_opts, out, log_line);
      std::cout << "empty-channel sign test: " << run.empty_channel_test.wins << " wins, "
                << run.empty_channel_test.losses << " losses, p = " << run.empty_channel_test.p_value << "\n"
                << "kernel-tail sign test: " << run.kernel_tail_test.wins << " wins, " << run.kernel_tail_test.losses
                << " losses, p = " << run.kernel_tail_test.p_value << "\n";
      if (run.theorems) {
        std::cout << run.theorems->counterexamples() << " counterexamples over " << run.theorems->configurations
                  << " size vectors\n";
      }
      std::cout << "written to " << out.string() << "\n";
      return run.theorems && run.theorems->counterexamples() > 0 ? 4 : 0;
    }
    if (*report_cmd) {
      std::cout << run_report(report_dir);
      return 0;
    }
    if (*keys_cmd) {
      const ExperimentConfig defaults;
      for (const auto& key : config_keys()) {
        std::cout << key.name << " = " << defaults.get(key.name) << "    # " << key.help << "\n";
      }
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
