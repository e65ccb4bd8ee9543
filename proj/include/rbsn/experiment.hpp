#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rbsn/analysis.hpp"
#include "rbsn/config.hpp"
#include "rbsn/data.hpp"
#include "rbsn/train.hpp"

namespace rbsn {

using LogFn = std::function<void(std::string_view)>;

struct ExperimentData {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Loads (or synthesizes) the configured dataset, applies per-class
/// subsetting and carves the validation split out of the training data.
ExperimentData load_experiment_data(const ExperimentConfig& cfg);

/// Architecture, frozen weights and initial scores. Weights are regenerated
/// from the seed rather than stored, so a mask file plus the config fully
/// describe a trained subnetwork.
struct Model {
  NetworkSpec spec;
  std::vector<Tensor<float>> weights;
  ScoreSet scores;
  AllocationPlan plan;
};

Model build_model(const ExperimentConfig& cfg, const Shape& sample_shape, int classes);

/// Pixel datasets keep adversarial inputs inside [0, 1]; blobs do not clip.
AdversarialBudget attack_budget(const ExperimentConfig& cfg);

TrainConfig to_train_config(const ExperimentConfig& cfg);

/// Throws ShapeError unless the mask has the architecture's layers and the
/// popcounts the configured allocation prescribes.
void check_mask_against_plan(const MaskSet& mask, const Model& model, const ExperimentConfig& cfg);

struct TrainRun {
  TrainResult result;
  EvalResult test;
  std::filesystem::path out_dir;
};

/// Trains and writes config.resolved, allocation.csv, metrics.csv, mask.rbsm,
/// bn.rbsb and test.csv into cfg.out_dir.
TrainRun run_train(const ExperimentConfig& cfg, const LogFn& log = {});

/// Clean and PGD accuracy of a stored mask on the test split. BN statistics come
/// from `bn_path`, else bn.rbsb beside the mask, else a calibration pass over
/// the training data.
EvalResult run_eval(const ExperimentConfig& cfg, const std::filesystem::path& mask_path,
                    const std::filesystem::path& bn_path = {}, const LogFn& log = {});

struct AnalyzeOptions {
  bool verify_theorems = false;
  int max_n = 10;
  int max_layers = 3;
  std::size_t random_trials = 200;
};

struct LayerStructure {
  std::string layer;
  bool conv = false;
  std::int64_t n = 0;
  std::int64_t m = 0;
  LayerHistograms trained;
  LayerHistograms random;
  /// Fully pruned input plus output channels over all channels.
  double empty_channels = 0.0;
  double random_empty_channels = 0.0;
  /// Share of kernels with at least four retained weights.
  double kernel_tail = 0.0;
  double random_kernel_tail = 0.0;
};

struct SignTest {
  std::size_t wins = 0;
  std::size_t losses = 0;
  std::size_t ties = 0;
  /// One-sided P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
  double p_value = 1.0;
  bool majority() const { return wins > losses; }
};

SignTest sign_test(std::size_t wins, std::size_t losses, std::size_t ties);

struct AnalyzeRun {
  std::vector<LayerStructure> layers;
  std::vector<std::pair<std::string, AlignmentStats>> alignment;
  FlopReport flops;
  SignTest empty_channel_test;
  SignTest kernel_tail_test;
  std::optional<TheoremSweep> theorems;
};

/// Mask-structure report against matched random pruning; writes structure.csv,
/// histograms.csv, alignment.csv, flops.csv, per-layer SVG charts and
/// (optionally) theorems.txt into `out_dir`.
AnalyzeRun run_analyze(const ExperimentConfig& cfg, const std::filesystem::path& mask_path,
                       const AnalyzeOptions& options, const std::filesystem::path& out_dir, const LogFn& log = {});

/// Re-renders charts for a finished run directory (metrics.svg) and returns a
/// short text summary.
std::string run_report(const std::filesystem::path& run_dir);

}  // namespace rbsn
