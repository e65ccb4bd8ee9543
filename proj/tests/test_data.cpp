#include <algorithm>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "rbsn/binio.hpp"
#include "rbsn/data.hpp"
#include "rbsn/error.hpp"

using namespace rbsn;

namespace {

std::vector<std::uint8_t> cifar_records(std::size_t n) {
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(static_cast<std::uint8_t>((i * 3) % 10));
    for (std::size_t j = 0; j < 3072; ++j) out.push_back(static_cast<std::uint8_t>((i + j) % 256));
  }
  return out;
}

std::vector<std::uint8_t> be32(std::initializer_list<std::uint32_t> words) {
  std::vector<std::uint8_t> out;
  for (auto w : words) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(w >> s));
  }
  return out;
}

}  // namespace

TEST_CASE("CIFAR-10 records") {
  auto bytes = cifar_records(10);
  CHECK(bytes.size() == 30730);
  bytes[0] = 6;
  bytes[1] = 255;
  auto d = parse_cifar10(bytes, "batch", 100);
  CHECK(d.size() == 10);
  CHECK(d.inputs.shape == Shape{10, 3, 32, 32});
  CHECK(d.labels[0] == 6);
  CHECK(d.labels[1] == 3);
  CHECK(d.inputs[0] == 1.0f);
  CHECK(d.inputs[1] == 1.0f / 255.0f);
  // green plane of record 0 starts at byte 1 + 1024
  CHECK(d.inputs[1024] == static_cast<float>(1024 % 256) / 255.0f);
  CHECK(d.indices.front() == 100);
  CHECK(d.indices.back() == 109);
  for (auto v : d.inputs.data) CHECK((v >= 0.0f && v <= 1.0f));

  bytes.pop_back();
  CHECK_THROWS_AS(parse_cifar10(bytes, "batch"), FormatError);
  auto bad = cifar_records(2);
  bad[3073] = 10;
  CHECK_THROWS_AS(parse_cifar10(bad, "batch"), FormatError);
  CHECK_THROWS_AS(load_cifar10_binary("/nonexistent/cifar"), Error);
}

TEST_CASE("CIFAR-10 directory layout") {
  const auto dir = std::filesystem::temp_directory_path() / "rbsn_cifar_test";
  std::filesystem::create_directories(dir);
  for (int b = 1; b <= 5; ++b) {
    auto bytes = cifar_records(3);
    write_file_atomic(dir / ("data_batch_" + std::to_string(b) + ".bin"), bytes);
  }
  write_file_atomic(dir / "test_batch.bin", cifar_records(2));
  auto [train, test] = load_cifar10_binary(dir);
  CHECK(train.size() == 15);
  CHECK(test.size() == 2);
  CHECK(train.indices.back() == 14);
  CHECK(train.split == "train");
  CHECK(test.split == "test");
  std::filesystem::remove_all(dir);
}

TEST_CASE("IDX") {
  auto labels = be32({0x801, 3});
  labels.insert(labels.end(), {7, 2, 1});
  auto images = be32({0x803, 3, 2, 2});
  for (int i = 0; i < 12; ++i) images.push_back(static_cast<std::uint8_t>(i * 20));
  auto d = parse_idx(images, labels);
  CHECK(d.labels == std::vector<int>{7, 2, 1});
  CHECK(d.inputs.shape == Shape{3, 1, 2, 2});
  CHECK(d.inputs[5] == 100.0f / 255.0f);

  auto mnist_like = be32({0x803, 2, 28, 28});
  mnist_like.resize(mnist_like.size() + 2 * 28 * 28);
  auto two = be32({0x801, 2});
  two.insert(two.end(), {0, 9});
  CHECK(parse_idx(mnist_like, two).inputs.shape == Shape{2, 1, 28, 28});

  auto truncated = images;
  truncated.pop_back();
  CHECK_THROWS_AS(parse_idx(truncated, labels), FormatError);
  CHECK_THROWS_AS(parse_idx(labels, labels), FormatError);
  auto short_labels = be32({0x801, 2});
  short_labels.insert(short_labels.end(), {1, 2});
  CHECK_THROWS_AS(parse_idx(images, short_labels), FormatError);
  CHECK_THROWS_AS(parse_idx(std::span<const std::uint8_t>(images).first(6), labels), FormatError);
}

TEST_CASE("bundled digits files") {
  const std::filesystem::path dir = RBSN_TEST_DATA_DIR;
  auto train = load_idx(dir / "digits-train-images.idx", dir / "digits-train-labels.idx");
  auto test = load_idx(dir / "digits-test-images.idx", dir / "digits-test-labels.idx");
  CHECK(train.size() == 1437);
  CHECK(test.size() == 360);
  CHECK(train.inputs.shape == Shape{1437, 1, 8, 8});
  train.validate();
  for (auto v : train.inputs.data) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("synthetic blobs") {
  auto a = synth_blobs(3, 4, 50, 20.0, 1);
  auto b = synth_blobs(3, 4, 50, 20.0, 1);
  CHECK(a.inputs.data == b.inputs.data);
  CHECK(a.labels == b.labels);
  CHECK(a.size() == 150);
  CHECK(a.class_count == 3);
  CHECK(synth_blobs(3, 4, 50, 20.0, 2).inputs.data != a.inputs.data);
  auto tiny = synth_blobs(2, 1, 100, 10.0, 3, 0.1);
  CHECK(tiny.size() == 200);
  CHECK_THROWS_AS(synth_blobs(2, 1, 1000, 0.5, 3, 1.0), ConfigError);
  CHECK_THROWS_AS(synth_blobs(1, 2, 10, 5.0, 3), ConfigError);
}

TEST_CASE("validation split") {
  Dataset d;
  const std::size_t n = 50000;
  d.inputs = Tensor<float>({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    d.labels.push_back(static_cast<int>(i % 10));
    d.indices.push_back(i);
  }
  auto [train, val] = split_validation(d, 0.02, 5);
  CHECK(val.size() == 1000);
  CHECK(train.size() == 49000);
  std::set<std::uint64_t> all(train.indices.begin(), train.indices.end());
  for (auto i : val.indices) CHECK(all.insert(i).second);
  CHECK(all.size() == n);
  auto again = split_validation(d, 0.02, 5);
  CHECK(again.second.indices == val.indices);
  CHECK(split_validation(d, 0.02, 6).second.indices != val.indices);
  CHECK(split_validation(d, 0.0201, 5).second.size() == 1005);
  CHECK_THROWS_AS(split_validation(d, 0.0, 5), ConfigError);
  CHECK_THROWS_AS(split_validation(d, 1.0, 5), ConfigError);

  auto sub = first_k_per_class(d, 3);
  CHECK(sub.size() == 30);
  CHECK(sub.indices.front() == 0);
  CHECK(sub.indices.back() == 29);
}

TEST_CASE("augmentation") {
  const Shape chw{2, 6, 6};
  std::vector<float> img(72), out(72), back(72), twice(72);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i + 1);

  apply_augment(img, out, chw, AugmentRecord{});
  CHECK(out == img);

  AugmentRecord flip{true, kCropPad, kCropPad};
  apply_augment(img, out, chw, flip);
  CHECK(out[0] == img[5]);
  apply_augment(out, twice, chw, flip);
  CHECK(twice == img);

  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    AugmentRecord rec{rng.coin(), static_cast<int>(rng.below(9)), static_cast<int>(rng.below(9))};
    apply_augment(img, out, chw, rec);
    invert_augment(out, back, chw, rec);
    // pixels that stayed inside the crop come back exactly; the rest are zero
    for (std::size_t c = 0; c < 2; ++c) {
      for (int y = 0; y < 6; ++y) {
        for (int x = 0; x < 6; ++x) {
          const int ay = y - rec.dy + kCropPad, ax = x - rec.dx + kCropPad;
          const bool inside = ay >= 0 && ax >= 0 && ay < 6 && ax < 6;
          const auto i = (c * 6 + static_cast<std::size_t>(y)) * 6 + static_cast<std::size_t>(x);
          CHECK(back[i] == (inside ? img[i] : 0.0f));
        }
      }
    }
  }

  Tensor<float> batch({3, 2, 6, 6});
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = static_cast<float>(i);
  auto copy = batch;
  Rng r1(9);
  CHECK(augment(copy, AugmentPolicy::None, r1).empty());
  CHECK(copy.data == batch.data);
  auto recs = augment(copy, AugmentPolicy::Crop4Flip, r1);
  CHECK(recs.size() == 3);
  for (const auto& r : recs) CHECK((r.dy >= 0 && r.dy <= 8 && r.dx >= 0 && r.dx <= 8));
  CHECK(parse_augment_policy("crop4_flip") == AugmentPolicy::Crop4Flip);
  CHECK_THROWS_AS(parse_augment_policy("mixup"), ConfigError);
}
