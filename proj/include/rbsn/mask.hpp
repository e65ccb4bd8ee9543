#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rbsn/alloc.hpp"
#include "rbsn/tensor.hpp"

namespace rbsn {

/// Trainable real-valued scores of one prunable layer; same shape as its weights.
struct ScoreTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct ScoreSet {
  std::vector<ScoreTensor> layers;
  /// Half-width of the uniform initialization interval (0 when fan-scaled).
  double init_halfwidth = 0.0;

  std::size_t total() const;
  LayerSizes layer_sizes() const;
};

struct MaskTensor {
  std::string name;
  Shape shape;
  std::vector<std::uint8_t> bits;  // 0 or 1

  std::int64_t popcount() const;
  bool operator==(const MaskTensor&) const = default;
};

struct MaskSet {
  std::vector<MaskTensor> layers;

  std::int64_t popcount() const;
  bool operator==(const MaskSet&) const = default;
};

/// Keeps the `keep` highest scores of one layer. Ties go to the lower flat index.
void top_k_mask(std::span<const float> scores, std::int64_t keep, std::span<std::uint8_t> out);

/// Per-layer top-k selection against an allocation plan.
MaskSet binarize(const ScoreSet& scores, const AllocationPlan& plan);

/// Straight-through score gradient: dL/ds = dL/d(w*m) * w, defined at every
/// position whether pruned or not.
template <typename T>
std::vector<Tensor<T>> score_gradient(std::span<const Tensor<T>> grad_effective,
                                      std::span<const Tensor<T>> weights) {
  if (grad_effective.size() != weights.size()) throw ShapeError("score_gradient: layer count mismatch");
  std::vector<Tensor<T>> out;
  out.reserve(weights.size());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const auto& g = grad_effective[l];
    const auto& w = weights[l];
    if (g.shape != w.shape) throw ShapeError("score_gradient: shape mismatch in layer " + std::to_string(l));
    Tensor<T> s(g.shape);
    for (std::size_t i = 0; i < g.size(); ++i) s[i] = g[i] * w[i];
    out.push_back(std::move(s));
  }
  return out;
}

// RBSM mask file: "RBSM", u32 version (1), u32 layer count, then per layer
// u32 name length, name bytes, u32 ndim, ndim x u32 dims, and the mask bits
// packed LSB-first, padded to a whole byte. All integers little-endian.
std::vector<std::uint8_t> encode_rbsm(const MaskSet& masks);
MaskSet decode_rbsm(std::span<const std::uint8_t> bytes);
void write_rbsm(const std::filesystem::path& path, const MaskSet& masks);
MaskSet read_rbsm(const std::filesystem::path& path);

}  // namespace rbsn
