#include "rbsn/mask.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rbsn/binio.hpp"
#include "rbsn/error.hpp"

namespace rbsn {

std::size_t ScoreSet::total() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.values.size();
  return n;
}

LayerSizes ScoreSet::layer_sizes() const {
  LayerSizes out;
  for (const auto& l : layers) {
    out.sizes.push_back(static_cast<std::int64_t>(l.values.size()));
    out.names.push_back(l.name);
  }
  return out;
}

std::int64_t MaskTensor::popcount() const {
  return std::count(bits.begin(), bits.end(), std::uint8_t{1});
}

std::int64_t MaskSet::popcount() const {
  std::int64_t n = 0;
  for (const auto& l : layers) n += l.popcount();
  return n;
}

void top_k_mask(std::span<const float> scores, std::int64_t keep, std::span<std::uint8_t> out) {
  RBSN_CHECK(out.size() == scores.size(), ShapeError, "top_k_mask: output size mismatch");
  RBSN_CHECK(keep >= 0 && static_cast<std::size_t>(keep) <= scores.size(), ConfigError,
             "top_k_mask: cannot keep " + std::to_string(keep) + " of " + std::to_string(scores.size()));
  for (float s : scores) RBSN_CHECK(std::isfinite(s), DivergenceError, "non-finite score");

  std::fill(out.begin(), out.end(), std::uint8_t{0});
  if (keep == 0) return;
  if (static_cast<std::size_t>(keep) == scores.size()) {
    std::fill(out.begin(), out.end(), std::uint8_t{1});
    return;
  }
  std::vector<std::uint32_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0u);
  // strict total order: higher score first, then lower index
  auto before = [&](std::uint32_t a, std::uint32_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::nth_element(idx.begin(), idx.begin() + keep, idx.end(), before);
  for (std::int64_t i = 0; i < keep; ++i) out[idx[static_cast<std::size_t>(i)]] = 1;
}

MaskSet binarize(const ScoreSet& scores, const AllocationPlan& plan) {
  RBSN_CHECK(plan.retained.size() == scores.layers.size(), ShapeError,
             "plan has " + std::to_string(plan.retained.size()) + " layers, scores have " +
                 std::to_string(scores.layers.size()));
  MaskSet out;
  out.layers.reserve(scores.layers.size());
  for (std::size_t l = 0; l < scores.layers.size(); ++l) {
    const auto& layer = scores.layers[l];
    RBSN_CHECK(static_cast<std::int64_t>(layer.values.size()) >= plan.retained[l], ShapeError,
               "layer " + layer.name + ": plan keeps more parameters than exist");
    MaskTensor m{layer.name, layer.shape, std::vector<std::uint8_t>(layer.values.size())};
    top_k_mask(layer.values, plan.retained[l], m.bits);
    out.layers.push_back(std::move(m));
  }
  return out;
}

std::vector<std::uint8_t> encode_rbsm(const MaskSet& masks) {
  ByteWriter w;
  w.magic("RBSM");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(masks.layers.size()));
  for (const auto& layer : masks.layers) {
    RBSN_CHECK(layer.bits.size() == numel(layer.shape), ShapeError, "mask " + layer.name + " size/shape mismatch");
    w.str(layer.name);
    w.u32(static_cast<std::uint32_t>(layer.shape.size()));
    for (auto d : layer.shape) w.u32(static_cast<std::uint32_t>(d));
    std::vector<std::uint8_t> packed((layer.bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < layer.bits.size(); ++i) {
      if (layer.bits[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    w.raw(packed);
  }
  return w.take();
}

MaskSet decode_rbsm(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "RBSM mask");
  r.expect_magic("RBSM");
  const auto version = r.u32();
  RBSN_CHECK(version == 1, FormatError, "RBSM mask: unsupported version " + std::to_string(version));
  const auto count = r.u32();
  MaskSet out;
  for (std::uint32_t l = 0; l < count; ++l) {
    MaskTensor m;
    m.name = r.str();
    const auto ndim = r.u32();
    RBSN_CHECK(ndim <= 8, FormatError, "RBSM mask: implausible rank " + std::to_string(ndim));
    for (std::uint32_t d = 0; d < ndim; ++d) m.shape.push_back(r.u32());
    const std::size_t n = numel(m.shape);
    auto packed = r.raw((n + 7) / 8);
    m.bits.resize(n);
    for (std::size_t i = 0; i < n; ++i) m.bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
    out.layers.push_back(std::move(m));
  }
  RBSN_CHECK(r.at_end(), FormatError, "RBSM mask: trailing bytes");
  return out;
}

void write_rbsm(const std::filesystem::path& path, const MaskSet& masks) { write_file_atomic(path, encode_rbsm(masks)); }

MaskSet read_rbsm(const std::filesystem::path& path) { return decode_rbsm(read_file_bytes(path)); }

}  // namespace rbsn
