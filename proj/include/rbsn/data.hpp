#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rbsn/rng.hpp"
#include "rbsn/tensor.hpp"

namespace rbsn {

/// Images [N x C x H x W] (or vectors [N x D]) with labels and stable
/// per-sample identifiers. Indices survive subsetting and splitting, so they
/// can key per-sample state such as the perturbation cache.
struct Dataset {
  Tensor<float> inputs;
  std::vector<int> labels;
  std::vector<std::uint64_t> indices;
  std::string split;
  int class_count = 10;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(inputs.shape.begin() + 1, inputs.shape.end()); }
  /// Rows at the given positions (not indices), in order.
  Dataset take(std::span<const std::size_t> positions) const;
  Tensor<float> gather_inputs(std::span<const std::size_t> positions) const;
  void validate() const;
};

/// CIFAR-10 binary records: 1 label byte then 3072 bytes (R, G, B planes of 32x32).
Dataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& what, std::uint64_t first_index = 0);
/// data_batch_1..5.bin and test_batch.bin from `dir`.
std::pair<Dataset, Dataset> load_cifar10_binary(const std::filesystem::path& dir);

/// Big-endian IDX files: images (magic 0x00000803, N x H x W) and labels (0x00000801).
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels);
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Gaussian clusters (stddev `spread`) around seeded centers whose pairwise
/// distance is at least `separation`. Throws if the generated points are not
/// all closer to their own center than to any other.
Dataset synth_blobs(int classes, std::size_t dim, std::size_t per_class, double separation, std::uint64_t seed,
                    double spread = 1.0);

/// Seeded shuffle; the first ceil(fraction * N) samples become validation.
/// Returns {train, validation}.
std::pair<Dataset, Dataset> split_validation(const Dataset& data, double fraction, std::uint64_t seed);

/// First k samples of each class in dataset order.
Dataset first_k_per_class(const Dataset& data, std::size_t k);

// ----- augmentation -----------------------------------------------------------

enum class AugmentPolicy { None, Crop4Flip };

inline constexpr int kCropPad = 4;

/// Crop offsets index the zero-padded image; (kCropPad, kCropPad) is the identity crop.
struct AugmentRecord {
  bool flip = false;
  int dy = kCropPad;
  int dx = kCropPad;
  bool operator==(const AugmentRecord&) const = default;
};

/// Crop from the zero-padded sample, then mirror horizontally if flipped.
void apply_augment(std::span<const float> src, std::span<float> dst, const Shape& chw, const AugmentRecord& rec);
/// Un-flip, then shift back; positions that left the frame are zero-filled.
void invert_augment(std::span<const float> src, std::span<float> dst, const Shape& chw, const AugmentRecord& rec);

/// Augments a batch in place. Returns one record per sample (empty for None).
std::vector<AugmentRecord> augment(Tensor<float>& batch, AugmentPolicy policy, Rng& rng);

AugmentPolicy parse_augment_policy(const std::string& name);

}  // namespace rbsn
