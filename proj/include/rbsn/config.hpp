#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace rbsn {

/// Every knob of an experiment. Text form is one `key = value` per line with
/// `#` comments; see config_keys() for names, defaults and help.
struct ExperimentConfig {
  // data
  std::string dataset = "cifar10";  // cifar10 | idx | blobs
  std::string data_dir;             // cifar10; falls back to $RBSN_DATA_DIR
  std::string train_images, train_labels, test_images, test_labels;  // idx
  std::size_t train_per_class = 500;  // 0 keeps everything
  std::size_t test_per_class = 100;
  double val_fraction = 0.02;
  int blobs_classes = 4;
  std::size_t blobs_dim = 16;
  std::size_t blobs_per_class = 200;
  double blobs_separation = 8.0;

  // model
  std::string arch = "cnn4";
  std::string activation = "relu";
  bool last_bn = true;
  std::string init = "binary";  // binary | signed_kc
  std::string score_init = "uniform";  // uniform | fan_scaled
  double score_a = 0.01;

  // pruning
  double r = 0.9;
  double p = 0.1;
  std::string allocation = "adaptive";  // adaptive | global

  // optimization
  int epochs = 30;
  std::size_t batch_size = 128;
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  // adversary
  std::string attack = "pgd";  // pgd | fgsm_atta | none
  double epsilon = 8.0 / 255.0;
  int train_pgd_steps = 7;
  int eval_pgd_steps = 10;
  double pgd_step_fraction = 0.25;
  double fgsm_step_fraction = 1.0;
  int atta_factor = 2;
  std::string attack_bn = "train";  // train | eval
  std::string augment = "crop4_flip";
  std::size_t eval_batch_size = 256;

  // run
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  bool checkpoint = false;
  bool timing = false;

  /// Sets one key from its text form; ConfigError names the key on failure.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  /// Cross-field checks (ranges, enum spellings).
  void validate() const;
  /// Resolved snapshot: every key in canonical order, reparsable bit-exactly.
  std::string to_text() const;
};

struct ConfigKey {
  std::string name;
  std::string help;
};

const std::vector<ConfigKey>& config_keys();

/// Applies `key = value` lines on top of `base`. Unknown or repeated keys are errors.
ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});

/// Reals accept plain numbers or a fraction such as 8/255.
double parse_real(std::string_view text, std::string_view key);
bool parse_bool(std::string_view text, std::string_view key);
std::int64_t parse_int(std::string_view text, std::string_view key);

}  // namespace rbsn
