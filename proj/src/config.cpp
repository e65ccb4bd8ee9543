#include "rbsn/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>

#include "rbsn/binio.hpp"
#include "rbsn/error.hpp"

namespace rbsn {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::string name;
  std::string help;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename M>
Field text(std::string name, std::string help, M ExperimentConfig::*member) {
  return {name, help, [member](ExperimentConfig& c, std::string_view v) { c.*member = std::string(v); },
          [member](const ExperimentConfig& c) { return c.*member; }};
}

Field real(std::string name, std::string help, double ExperimentConfig::*member) {
  return {name, help, [member, name](ExperimentConfig& c, std::string_view v) { c.*member = parse_real(v, name); },
          [member](const ExperimentConfig& c) { return format_real(c.*member); }};
}

Field boolean(std::string name, std::string help, bool ExperimentConfig::*member) {
  return {name, help, [member, name](ExperimentConfig& c, std::string_view v) { c.*member = parse_bool(v, name); },
          [member](const ExperimentConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

template <typename I>
Field integer(std::string name, std::string help, I ExperimentConfig::*member, std::int64_t lo) {
  return {name, help,
          [member, name, lo](ExperimentConfig& c, std::string_view v) {
            const auto x = parse_int(v, name);
            RBSN_CHECK(x >= lo, ConfigError, "config key '" + name + "' must be >= " + std::to_string(lo));
            c.*member = static_cast<I>(x);
          },
          [member](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = {
      text("dataset", "cifar10, idx or blobs", &C::dataset),
      text("data_dir", "CIFAR-10 binary directory (default $RBSN_DATA_DIR)", &C::data_dir),
      text("train_images", "IDX training images", &C::train_images),
      text("train_labels", "IDX training labels", &C::train_labels),
      text("test_images", "IDX test images", &C::test_images),
      text("test_labels", "IDX test labels", &C::test_labels),
      integer("train_per_class", "first K training samples per class (0 = all)", &C::train_per_class, 0),
      integer("test_per_class", "first K test samples per class (0 = all)", &C::test_per_class, 0),
      real("val_fraction", "validation share of the training data", &C::val_fraction),
      integer("blobs_classes", "synthetic blob classes", &C::blobs_classes, 2),
      integer("blobs_dim", "synthetic blob dimension", &C::blobs_dim, 1),
      integer("blobs_per_class", "synthetic blob samples per class", &C::blobs_per_class, 1),
      real("blobs_separation", "minimum distance between blob centers", &C::blobs_separation),
      text("arch", "cnn4, resnet_mini, cnn3, mlp or custom:<layers>", &C::arch),
      text("activation", "relu or leaky_relu", &C::activation),
      boolean("last_bn", "batch norm on the logits", &C::last_bn),
      text("init", "weight init: binary or signed_kc", &C::init),
      text("score_init", "uniform or fan_scaled", &C::score_init),
      real("score_a", "half-width of the uniform score init", &C::score_a),
      real("r", "global pruning rate in [0, 1)", &C::r),
      real("p", "allocation exponent in [0, 1]", &C::p),
      text("allocation", "adaptive or global", &C::allocation),
      integer("epochs", "training epochs", &C::epochs, 0),
      integer("batch_size", "training batch size", &C::batch_size, 1),
      real("lr0", "initial learning rate (cosine schedule)", &C::lr0),
      real("momentum", "SGD momentum", &C::momentum),
      real("weight_decay", "weight decay on scores", &C::weight_decay),
      text("attack", "training attack: pgd, fgsm_atta or none", &C::attack),
      real("epsilon", "l-infinity budget, e.g. 8/255", &C::epsilon),
      integer("train_pgd_steps", "PGD steps during training", &C::train_pgd_steps, 1),
      integer("eval_pgd_steps", "PGD steps for validation and evaluation", &C::eval_pgd_steps, 0),
      real("pgd_step_fraction", "PGD step size as a fraction of epsilon", &C::pgd_step_fraction),
      real("fgsm_step_fraction", "FGSM step size as a fraction of epsilon", &C::fgsm_step_fraction),
      integer("atta_factor", "ATTA cache downsampling factor", &C::atta_factor, 1),
      text("attack_bn", "batch-norm mode while attacking: train or eval", &C::attack_bn),
      text("augment", "none or crop4_flip", &C::augment),
      integer("eval_batch_size", "evaluation batch size", &C::eval_batch_size, 1),
      integer("seed", "master seed", &C::seed, 0),
      text("out_dir", "output directory", &C::out_dir),
      boolean("checkpoint", "write and resume from out_dir/checkpoint.rbsc", &C::checkpoint),
      boolean("timing", "record wall time per epoch in metrics.csv", &C::timing),
  };
  return table;
}

const Field& field(std::string_view key) {
  for (const auto& f : fields()) {
    if (f.name == key) return f;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void check_choice(std::string_view key, const std::string& value, std::initializer_list<std::string_view> options) {
  for (auto o : options) {
    if (value == o) return;
  }
  std::string list;
  for (auto o : options) list += (list.empty() ? "" : ", ") + std::string(o);
  throw ConfigError("config key '" + std::string(key) + "': '" + value + "' is not one of " + list);
}

}  // namespace

double parse_real(std::string_view text, std::string_view key) {
  const auto t = trim(text);
  const auto bad = [&] { return ConfigError("config key '" + std::string(key) + "': '" + std::string(t) + "' is not a number"); };
  auto parse_one = [&](std::string_view s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) throw bad();
    return v;
  };
  const auto slash = t.find('/');
  double v = 0.0;
  if (slash == std::string_view::npos) {
    v = parse_one(t);
  } else {
    const double den = parse_one(trim(t.substr(slash + 1)));
    if (den == 0.0) throw bad();
    v = parse_one(trim(t.substr(0, slash))) / den;
  }
  if (!std::isfinite(v)) throw bad();
  return v;
}

bool parse_bool(std::string_view text, std::string_view key) {
  const auto t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("config key '" + std::string(key) + "': '" + std::string(t) + "' is not a boolean");
}

std::int64_t parse_int(std::string_view text, std::string_view key) {
  const auto t = trim(text);
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  RBSN_CHECK(ec == std::errc() && ptr == t.data() + t.size() && !t.empty(), ConfigError,
             "config key '" + std::string(key) + "': '" + std::string(t) + "' is not an integer");
  return v;
}

void ExperimentConfig::set(std::string_view key, std::string_view value) { field(key).set(*this, trim(value)); }

std::string ExperimentConfig::get(std::string_view key) const { return field(key).get(*this); }

void ExperimentConfig::validate() const {
  check_choice("dataset", dataset, {"cifar10", "idx", "blobs"});
  check_choice("activation", activation, {"relu", "leaky_relu"});
  check_choice("init", init, {"binary", "signed_kc"});
  check_choice("score_init", score_init, {"uniform", "fan_scaled"});
  check_choice("allocation", allocation, {"adaptive", "global"});
  check_choice("attack", attack, {"pgd", "fgsm_atta", "none"});
  check_choice("attack_bn", attack_bn, {"train", "eval"});
  check_choice("augment", augment, {"none", "crop4_flip"});
  RBSN_CHECK(r >= 0.0 && r < 1.0, ConfigError, "config key 'r': pruning rate must be in [0, 1), got " + format_real(r));
  RBSN_CHECK(p >= 0.0 && p <= 1.0, ConfigError, "config key 'p': exponent must be in [0, 1], got " + format_real(p));
  RBSN_CHECK(val_fraction > 0.0 && val_fraction < 1.0, ConfigError, "config key 'val_fraction' must be in (0, 1)");
  RBSN_CHECK(epsilon >= 0.0, ConfigError, "config key 'epsilon' must be >= 0");
  RBSN_CHECK(lr0 > 0.0, ConfigError, "config key 'lr0' must be positive");
  RBSN_CHECK(momentum >= 0.0 && momentum < 1.0, ConfigError, "config key 'momentum' must be in [0, 1)");
  RBSN_CHECK(weight_decay >= 0.0, ConfigError, "config key 'weight_decay' must be >= 0");
  RBSN_CHECK(score_a > 0.0, ConfigError, "config key 'score_a' must be positive");
  RBSN_CHECK(pgd_step_fraction > 0.0, ConfigError, "config key 'pgd_step_fraction' must be positive");
  RBSN_CHECK(fgsm_step_fraction > 0.0, ConfigError, "config key 'fgsm_step_fraction' must be positive");
  RBSN_CHECK(blobs_separation > 0.0, ConfigError, "config key 'blobs_separation' must be positive");
  RBSN_CHECK(!out_dir.empty(), ConfigError, "config key 'out_dir' must not be empty");
  if (dataset == "idx") {
    RBSN_CHECK(!train_images.empty() && !train_labels.empty() && !test_images.empty() && !test_labels.empty(),
               ConfigError, "dataset 'idx' needs train_images, train_labels, test_images and test_labels");
  }
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += f.name + " = " + f.get(*this) + "\n";
  return out;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back({f.name, f.help});
    return k;
  }();
  return keys;
}

ExperimentConfig parse_config(std::string_view text, ExperimentConfig base) {
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    RBSN_CHECK(eq != std::string_view::npos, ConfigError,
               "config line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    RBSN_CHECK(seen.insert(std::string(key)).second, ConfigError,
               "config line " + std::to_string(line_no) + ": key '" + std::string(key) + "' set twice");
    try {
      base.set(key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  const auto bytes = read_file_bytes(path);
  return parse_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), std::move(base));
}

}  // namespace rbsn
