#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "doctest.h"
#include "rbsn/binio.hpp"
#include "rbsn/error.hpp"
#include "rbsn/experiment.hpp"

namespace fs = std::filesystem;
using namespace rbsn;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("rbsn_test_experiment_" + name);
  fs::remove_all(dir);
  return dir;
}

ExperimentConfig blobs_config(const fs::path& out) {
  ExperimentConfig c;
  c.dataset = "blobs";
  c.blobs_classes = 4;
  c.blobs_dim = 16;
  c.blobs_per_class = 60;
  c.val_fraction = 0.1;
  c.arch = "mlp";
  c.r = 0.9;
  c.epochs = 3;
  c.batch_size = 32;
  c.epsilon = 0.25;
  c.augment = "none";
  c.out_dir = out.string();
  return c;
}

ExperimentConfig digits_config(const fs::path& out) {
  const std::string d = RBSN_TEST_DATA_DIR;
  ExperimentConfig c;
  c.dataset = "idx";
  c.train_images = d + "/digits-train-images.idx";
  c.train_labels = d + "/digits-train-labels.idx";
  c.test_images = d + "/digits-test-images.idx";
  c.test_labels = d + "/digits-test-labels.idx";
  c.train_per_class = 0;
  c.test_per_class = 0;
  c.val_fraction = 0.1;
  c.arch = "cnn3";
  c.r = 0.5;
  c.epochs = 1;
  c.batch_size = 64;
  c.attack = "none";
  c.augment = "none";
  c.out_dir = out.string();
  return c;
}

std::string slurp(const fs::path& p) {
  const auto b = read_file_bytes(p);
  return {b.begin(), b.end()};
}

}  // namespace

TEST_CASE("blobs data: held-out test, disjoint validation, per-class caps") {
  auto cfg = blobs_config(scratch("data"));
  const auto d = load_experiment_data(cfg);
  // 240 points, 20% test, then 10% of the rest for validation
  CHECK(d.test.size() == 48);
  CHECK(d.val.size() == 20);
  CHECK(d.train.size() == 172);
  std::set<std::size_t> seen(d.train.indices.begin(), d.train.indices.end());
  for (auto i : d.val.indices) CHECK(seen.insert(i).second);
  CHECK(d.train.split == "train");
  CHECK(d.val.split == "val");

  cfg.test_per_class = 5;
  CHECK(load_experiment_data(cfg).test.size() == 20);
}

TEST_CASE("digits data loads with validation carved from training") {
  const auto d = load_experiment_data(digits_config(scratch("digits")));
  CHECK(d.train.size() + d.val.size() == 1437);
  CHECK(d.val.size() == 144);
  CHECK(d.test.size() == 360);
  CHECK(d.train.sample_shape() == Shape{1, 8, 8});
}

TEST_CASE("cifar10 without a directory is a config error") {
  ExperimentConfig c;
  c.dataset = "cifar10";
  if (std::getenv("RBSN_DATA_DIR") == nullptr) CHECK_THROWS_AS(load_experiment_data(c), ConfigError);
  c.data_dir = "/nonexistent/cifar";
  CHECK_THROWS_AS(load_experiment_data(c), Error);
}

TEST_CASE("attack budget clips pixels but not blob features") {
  ExperimentConfig c;
  CHECK(attack_budget(c).clip_valid_range);
  c.dataset = "blobs";
  CHECK_FALSE(attack_budget(c).clip_valid_range);
  c.epsilon = 0.5;
  CHECK(attack_budget(c).epsilon == 0.5);
}

TEST_CASE("weights regenerate from the seed") {
  const auto cfg = blobs_config(scratch("model"));
  const auto a = build_model(cfg, {16}, 4);
  const auto b = build_model(cfg, {16}, 4);
  REQUIRE(a.weights.size() == b.weights.size());
  for (std::size_t i = 0; i < a.weights.size(); ++i) CHECK(a.weights[i].data == b.weights[i].data);
  auto other = cfg;
  other.seed = 1;
  CHECK(build_model(other, {16}, 4).weights[0].data != a.weights[0].data);
}

TEST_CASE("run_train with zero epochs writes a complete run directory") {
  auto cfg = blobs_config(scratch("zero"));
  cfg.epochs = 0;
  const auto run = run_train(cfg);
  for (const char* f : {"config.resolved", "allocation.csv", "metrics.csv", "mask.rbsm", "bn.rbsb", "test.csv"}) {
    CHECK(fs::exists(run.out_dir / f));
  }
  CHECK(slurp(run.out_dir / "metrics.csv") == "epoch,lr,train_loss,clean_acc,robust_acc,seconds\n");
  CHECK(parse_config(slurp(run.out_dir / "config.resolved")).to_text() == cfg.to_text());
  const auto mask = decode_rbsm(read_file_bytes(run.out_dir / "mask.rbsm"));
  const auto model = build_model(cfg, {16}, 4);
  CHECK_NOTHROW(check_mask_against_plan(mask, model, cfg));
  CHECK(run.test.samples == 48);
}

TEST_CASE("run_train learns blobs and is byte-reproducible") {
  const auto a_dir = scratch("repro_a"), b_dir = scratch("repro_b");
  const auto a = run_train(blobs_config(a_dir));
  const auto b = run_train(blobs_config(b_dir));
  CHECK(a.test.clean_acc > 0.9);
  CHECK(a.test.robust_acc <= a.test.clean_acc);
  CHECK_FALSE(a.result.metrics.aborted);
  for (const char* f : {"mask.rbsm", "metrics.csv", "bn.rbsb", "test.csv", "allocation.csv"}) {
    CHECK_MESSAGE(slurp(a_dir / f) == slurp(b_dir / f), f);
  }
  auto other = blobs_config(scratch("repro_c"));
  other.seed = 7;
  run_train(other);
  CHECK(slurp(a_dir / "mask.rbsm") != slurp(other.out_dir + "/mask.rbsm"));
}

TEST_CASE("run_eval reproduces the stored test row and degrades to clean at eps 0") {
  const auto dir = scratch("eval");
  auto cfg = blobs_config(dir);
  const auto run = run_train(cfg);
  const auto again = run_eval(cfg, dir / "mask.rbsm");
  CHECK(again.clean_acc == run.test.clean_acc);
  CHECK(again.robust_acc == run.test.robust_acc);

  cfg.epsilon = 0.0;
  const auto clean = run_eval(cfg, dir / "mask.rbsm", dir / "bn.rbsb");
  CHECK(clean.robust_acc == clean.clean_acc);
  CHECK(clean.clean_acc == run.test.clean_acc);

  // no BN file anywhere: calibration pass instead
  fs::create_directories(dir / "bare");
  fs::copy_file(dir / "mask.rbsm", dir / "bare" / "mask.rbsm");
  CHECK(run_eval(cfg, dir / "bare" / "mask.rbsm").samples == run.test.samples);
}

TEST_CASE("run_eval rejects corrupted and mismatched masks") {
  const auto dir = scratch("corrupt");
  auto cfg = blobs_config(dir);
  cfg.epochs = 0;
  run_train(cfg);
  auto bytes = read_file_bytes(dir / "mask.rbsm");
  auto magic = bytes;
  magic[0] = 'X';
  write_file_atomic(dir / "magic.rbsm", magic);
  CHECK_THROWS_AS(run_eval(cfg, dir / "magic.rbsm"), FormatError);
  // the format has no checksum; a flipped payload byte breaks the popcounts instead
  bytes[bytes.size() - 3] ^= 0xff;
  write_file_atomic(dir / "bad.rbsm", bytes);
  CHECK_THROWS_AS(run_eval(cfg, dir / "bad.rbsm"), ShapeError);
  bytes.resize(bytes.size() / 3);
  write_file_atomic(dir / "short.rbsm", bytes);
  CHECK_THROWS_AS(run_eval(cfg, dir / "short.rbsm"), FormatError);
  CHECK_THROWS(run_eval(cfg, dir / "missing.rbsm"));

  auto wider = cfg;
  wider.r = 0.5;
  CHECK_THROWS_AS(run_eval(wider, dir / "mask.rbsm"), ShapeError);
  auto deeper = cfg;
  deeper.arch = "custom:fc:32,bn1d,relu,fc";
  CHECK_THROWS_AS(run_eval(deeper, dir / "mask.rbsm"), ShapeError);
}

TEST_CASE("checkpointed run resumes to the same mask") {
  const auto dir = scratch("ckpt");
  auto cfg = blobs_config(dir);
  cfg.checkpoint = true;
  const auto first = run_train(cfg);
  CHECK(fs::exists(dir / "checkpoint.rbsc"));
  // a finished checkpoint makes the second call a no-op training pass
  const auto second = run_train(cfg);
  CHECK(slurp(dir / "metrics.csv") == first.result.metrics.to_csv());
  CHECK(second.result.best_mask.layers.size() == first.result.best_mask.layers.size());
  CHECK(encode_rbsm(second.result.best_mask) == encode_rbsm(first.result.best_mask));
}

TEST_CASE("run_analyze writes structure, histograms, FLOPs and theorem report") {
  const auto dir = scratch("analyze");
  const auto cfg = digits_config(dir);
  run_train(cfg);
  AnalyzeOptions opt;
  opt.verify_theorems = true;
  opt.max_n = 5;
  opt.max_layers = 2;
  opt.random_trials = 20;
  const auto out = dir / "analysis";
  const auto a = run_analyze(cfg, dir / "mask.rbsm", opt, out);
  for (const char* f : {"structure.csv", "histograms.csv", "alignment.csv", "flops.csv", "theorems.txt"}) {
    CHECK_MESSAGE(fs::exists(out / f), f);
  }
  // cnn3: two conv layers and one linear layer
  REQUIRE(a.layers.size() == 3);
  CHECK(a.layers[0].conv);
  CHECK_FALSE(a.layers[2].conv);
  std::int64_t kept = 0, total = 0;
  for (const auto& l : a.layers) {
    kept += l.m;
    total += l.n;
    CHECK(l.m <= l.n);
    CHECK(l.empty_channels >= 0.0);
    CHECK(l.empty_channels <= 1.0);
  }
  CHECK(kept == total / 2);
  CHECK(a.empty_channel_test.wins + a.empty_channel_test.losses + a.empty_channel_test.ties == 2);
  REQUIRE(a.theorems.has_value());
  CHECK(a.theorems->counterexamples() == 0);
  const auto report = slurp(out / "theorems.txt");
  CHECK(report.find("0 counterexamples") != std::string::npos);
  CHECK(fs::exists(out / "kernel_conv1.svg"));
  CHECK(slurp(out / "histograms.csv").rfind("layer,axis,k,count\n", 0) == 0);
  CHECK_THROWS_AS(run_analyze(cfg, dir / "nope.rbsm", opt, out), Error);
}

TEST_CASE("sign test p-values") {
  CHECK(sign_test(0, 0, 3).p_value == 1.0);
  CHECK(sign_test(3, 0, 0).p_value == doctest::Approx(0.125));
  CHECK(sign_test(2, 1, 0).p_value == doctest::Approx(0.5));
  CHECK(sign_test(10, 0, 5).p_value == doctest::Approx(1.0 / 1024));
  CHECK(sign_test(3, 1, 0).majority());
  CHECK_FALSE(sign_test(1, 1, 0).majority());
}

TEST_CASE("run_report renders charts and a summary") {
  const auto dir = scratch("report");
  run_train(blobs_config(dir));
  const auto s = run_report(dir);
  CHECK(s.find("epochs 3") != std::string::npos);
  CHECK(s.find("best epoch") != std::string::npos);
  CHECK(s.find("test (48 samples)") != std::string::npos);
  CHECK(slurp(dir / "metrics.svg").rfind("<svg", 0) == 0);
  CHECK(fs::exists(dir / "loss.svg"));
  CHECK_THROWS(run_report(scratch("report_empty")));
}
