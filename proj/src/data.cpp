#include "rbsn/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rbsn/binio.hpp"
#include "rbsn/error.hpp"

namespace rbsn {

namespace {

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at, const std::string& what) {
  RBSN_CHECK(at + 4 <= b.size(), FormatError, what + ": truncated header");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

Dataset concat(std::vector<Dataset> parts) {
  Dataset out = std::move(parts.front());
  for (std::size_t i = 1; i < parts.size(); ++i) {
    auto& p = parts[i];
    out.inputs.data.insert(out.inputs.data.end(), p.inputs.data.begin(), p.inputs.data.end());
    out.inputs.shape[0] += p.inputs.shape[0];
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.indices.insert(out.indices.end(), p.indices.begin(), p.indices.end());
  }
  return out;
}

}  // namespace

Tensor<float> Dataset::gather_inputs(std::span<const std::size_t> positions) const {
  Shape shape = inputs.shape;
  shape[0] = positions.size();
  Tensor<float> out(shape);
  const std::size_t per = inputs.stride0();
  for (std::size_t i = 0; i < positions.size(); ++i) {
    RBSN_CHECK(positions[i] < size(), ShapeError, "dataset position out of range");
    std::copy_n(inputs.data.begin() + static_cast<std::ptrdiff_t>(positions[i] * per), per,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

Dataset Dataset::take(std::span<const std::size_t> positions) const {
  Dataset out;
  out.inputs = gather_inputs(positions);
  out.split = split;
  out.class_count = class_count;
  for (auto p : positions) {
    out.labels.push_back(labels[p]);
    out.indices.push_back(indices[p]);
  }
  return out;
}

void Dataset::validate() const {
  RBSN_CHECK(inputs.rank() >= 2 && inputs.dim(0) == labels.size() && indices.size() == labels.size(), ShapeError,
             "dataset fields disagree on sample count");
  for (int y : labels) {
    RBSN_CHECK(y >= 0 && y < class_count, FormatError, "label " + std::to_string(y) + " out of range");
  }
}

// ----- CIFAR-10 -----------------------------------------------------------------

Dataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& what, std::uint64_t first_index) {
  RBSN_CHECK(!bytes.empty() && bytes.size() % kCifarRecord == 0, FormatError,
             what + ": size " + std::to_string(bytes.size()) + " is not a multiple of " + std::to_string(kCifarRecord));
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset out;
  out.inputs = Tensor<float>({n, 3, kCifarSide, kCifarSide});
  out.labels.resize(n);
  out.indices.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto* rec = bytes.data() + i * kCifarRecord;
    RBSN_CHECK(rec[0] <= 9, FormatError, what + ": label byte " + std::to_string(rec[0]) + " in record " + std::to_string(i));
    out.labels[i] = rec[0];
    out.indices[i] = first_index + i;
    float* dst = out.inputs.data.data() + i * (kCifarRecord - 1);
    for (std::size_t j = 0; j + 1 < kCifarRecord; ++j) dst[j] = static_cast<float>(rec[1 + j]) / 255.0f;
  }
  return out;
}

std::pair<Dataset, Dataset> load_cifar10_binary(const std::filesystem::path& dir) {
  std::vector<Dataset> parts;
  std::uint64_t next = 0;
  for (int b = 1; b <= 5; ++b) {
    const auto path = dir / ("data_batch_" + std::to_string(b) + ".bin");
    parts.push_back(parse_cifar10(read_file_bytes(path), path.string(), next));
    next += parts.back().size();
  }
  Dataset train = concat(std::move(parts));
  train.split = "train";
  const auto test_path = dir / "test_batch.bin";
  Dataset test = parse_cifar10(read_file_bytes(test_path), test_path.string(), 0);
  test.split = "test";
  return {std::move(train), std::move(test)};
}

// ----- IDX ----------------------------------------------------------------------

Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels) {
  RBSN_CHECK(read_be32(images, 0, "IDX images") == 0x00000803u, FormatError, "IDX images: bad magic");
  RBSN_CHECK(read_be32(labels, 0, "IDX labels") == 0x00000801u, FormatError, "IDX labels: bad magic");
  const std::size_t n = read_be32(images, 4, "IDX images");
  const std::size_t h = read_be32(images, 8, "IDX images");
  const std::size_t w = read_be32(images, 12, "IDX images");
  const std::size_t nl = read_be32(labels, 4, "IDX labels");
  RBSN_CHECK(n == nl, FormatError, "IDX: " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  RBSN_CHECK(images.size() == 16 + n * h * w, FormatError,
             "IDX images: expected " + std::to_string(16 + n * h * w) + " bytes, got " + std::to_string(images.size()));
  RBSN_CHECK(labels.size() == 8 + n, FormatError,
             "IDX labels: expected " + std::to_string(8 + n) + " bytes, got " + std::to_string(labels.size()));
  Dataset out;
  out.inputs = Tensor<float>({n, 1, h, w});
  for (std::size_t i = 0; i < n * h * w; ++i) out.inputs.data[i] = static_cast<float>(images[16 + i]) / 255.0f;
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out.labels.push_back(labels[8 + i]);
    out.indices.push_back(i);
    max_label = std::max(max_label, out.labels.back());
  }
  out.class_count = std::max(10, max_label + 1);
  return out;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  return parse_idx(read_file_bytes(images), read_file_bytes(labels));
}

// ----- synthetic ------------------------------------------------------------------

Dataset synth_blobs(int classes, std::size_t dim, std::size_t per_class, double separation, std::uint64_t seed,
                    double spread) {
  RBSN_CHECK(classes >= 2, ConfigError, "synth_blobs needs at least two classes");
  RBSN_CHECK(dim >= 1 && per_class >= 1 && separation > 0.0 && spread >= 0.0, ConfigError, "bad synth_blobs parameters");
  Rng rng = Rng::derive(seed, "blobs");
  const double box = separation * classes;
  std::vector<std::vector<double>> centers;
  auto dist2 = [&](const std::vector<double>& a, const double* b) {
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    return s;
  };
  for (int tries = 0; static_cast<int>(centers.size()) < classes; ++tries) {
    RBSN_CHECK(tries < 100000, ConfigError, "cannot place blob centers at the requested separation");
    std::vector<double> c(dim);
    for (auto& v : c) v = rng.uniform(-box, box);
    bool ok = true;
    for (const auto& other : centers) ok = ok && dist2(other, c.data()) >= separation * separation;
    if (ok) centers.push_back(std::move(c));
  }

  const std::size_t n = per_class * static_cast<std::size_t>(classes);
  Dataset out;
  out.inputs = Tensor<float>({n, dim});
  out.class_count = classes;
  out.split = "train";
  std::vector<double> point(dim);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i / per_class);
    for (std::size_t j = 0; j < dim; ++j) {
      point[j] = centers[y][j] + spread * rng.normal();
      out.inputs.data[i * dim + j] = static_cast<float>(point[j]);
    }
    // nearest-center oracle: the fixture must be perfectly separable
    const double own = dist2(centers[y], point.data());
    for (int k = 0; k < classes; ++k) {
      RBSN_CHECK(k == y || dist2(centers[k], point.data()) > own, ConfigError,
                 "synth_blobs: separation too small for the spread; sample " + std::to_string(i) + " is ambiguous");
    }
    out.labels.push_back(y);
    out.indices.push_back(i);
  }
  return out;
}

// ----- splits ----------------------------------------------------------------------

std::pair<Dataset, Dataset> split_validation(const Dataset& data, double fraction, std::uint64_t seed) {
  RBSN_CHECK(fraction > 0.0 && fraction < 1.0, ConfigError, "validation fraction must be in (0, 1)");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::derive(seed, "split");
  rng.shuffle(std::span(order));
  const auto n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(data.size())));
  RBSN_CHECK(n_val < data.size(), ConfigError, "validation split would leave no training data");
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  // keep dataset order inside each part
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  Dataset t = data.take(train), v = data.take(val);
  t.split = "train";
  v.split = "val";
  return {std::move(t), std::move(v)};
}

Dataset first_k_per_class(const Dataset& data, std::size_t k) {
  std::vector<std::size_t> seen(static_cast<std::size_t>(data.class_count), 0), keep;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& c = seen[static_cast<std::size_t>(data.labels[i])];
    if (c < k) {
      ++c;
      keep.push_back(i);
    }
  }
  return data.take(keep);
}

// ----- augmentation ------------------------------------------------------------------

void apply_augment(std::span<const float> src, std::span<float> dst, const Shape& chw, const AugmentRecord& rec) {
  const std::size_t c = chw[0], h = chw[1], w = chw[2];
  RBSN_CHECK(src.size() == c * h * w && dst.size() == src.size(), ShapeError, "augment: buffer size mismatch");
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t xs = rec.flip ? w - 1 - x : x;
        const long sy = static_cast<long>(y) + rec.dy - kCropPad;
        const long sx = static_cast<long>(xs) + rec.dx - kCropPad;
        const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
        dst[(ch * h + y) * w + x] = inside ? src[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] : 0.0f;
      }
    }
  }
}

void invert_augment(std::span<const float> src, std::span<float> dst, const Shape& chw, const AugmentRecord& rec) {
  const std::size_t c = chw[0], h = chw[1], w = chw[2];
  RBSN_CHECK(src.size() == c * h * w && dst.size() == src.size(), ShapeError, "augment: buffer size mismatch");
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        // original pixel (y, x) appears at augmented (y - dy + pad, x - dx + pad) before the flip
        const long ay = static_cast<long>(y) - rec.dy + kCropPad;
        long ax = static_cast<long>(x) - rec.dx + kCropPad;
        const bool inside = ay >= 0 && ax >= 0 && ay < static_cast<long>(h) && ax < static_cast<long>(w);
        if (inside && rec.flip) ax = static_cast<long>(w) - 1 - ax;
        dst[(ch * h + y) * w + x] = inside ? src[(ch * h + static_cast<std::size_t>(ay)) * w + static_cast<std::size_t>(ax)] : 0.0f;
      }
    }
  }
}

std::vector<AugmentRecord> augment(Tensor<float>& batch, AugmentPolicy policy, Rng& rng) {
  if (policy == AugmentPolicy::None) return {};
  RBSN_CHECK(batch.rank() == 4, ShapeError, "crop4_flip needs image batches");
  const Shape chw(batch.shape.begin() + 1, batch.shape.end());
  const std::size_t per = batch.stride0();
  std::vector<AugmentRecord> records(batch.dim(0));
  std::vector<float> tmp(per);
  for (std::size_t i = 0; i < batch.dim(0); ++i) {
    auto& rec = records[i];
    rec.dy = static_cast<int>(rng.below(2 * kCropPad + 1));
    rec.dx = static_cast<int>(rng.below(2 * kCropPad + 1));
    rec.flip = rng.coin();
    std::span<float> sample(batch.data.data() + i * per, per);
    apply_augment(sample, tmp, chw, rec);
    std::copy(tmp.begin(), tmp.end(), sample.begin());
  }
  return records;
}

AugmentPolicy parse_augment_policy(const std::string& name) {
  if (name == "none") return AugmentPolicy::None;
  if (name == "crop4_flip") return AugmentPolicy::Crop4Flip;
  throw ConfigError("unknown augmentation policy '" + name + "'");
}

}  // namespace rbsn
