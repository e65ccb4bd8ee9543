#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "rbsn/alloc.hpp"
#include "rbsn/arch.hpp"
#include "rbsn/error.hpp"
#include "rbsn/nn.hpp"
#include "rbsn/rng.hpp"

using namespace rbsn;

namespace {

MaskSet full_mask(const NetworkSpec& spec) {
  MaskSet m;
  for (const auto& p : prunable_layers(spec)) {
    m.layers.push_back({p.name, p.weight_shape, std::vector<std::uint8_t>(numel(p.weight_shape), 1)});
  }
  return m;
}

MaskSet random_mask(const NetworkSpec& spec, double r, std::uint64_t seed) {
  auto scores = init_scores(spec, {ScoreInitKind::Uniform, 1.0}, seed);
  return binarize(scores, solve_allocation(prunable_sizes(spec), r, 0.5));
}

template <typename T>
Tensor<T> random_input(const Shape& per_sample, std::size_t n, std::uint64_t seed) {
  Shape s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  Tensor<T> x(s);
  Rng rng(seed);
  for (auto& v : x.data) v = static_cast<T>(rng.uniform());
  return x;
}

std::vector<int> random_labels(std::size_t n, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  return y;
}

// Score gradients from the engine against central differences of the loss in
// the effective weights, composed with the elementwise identity ds = dw_eff * w.
void check_score_gradients(const NetworkSpec& spec, double r, std::uint64_t seed) {
  const auto weights = binary_init<double>(spec, seed);
  const auto mask = random_mask(spec, r, seed + 1);
  const auto x = random_input<double>(spec.input_shape, 4, seed + 2);
  const auto y = random_labels(4, spec.class_count, seed + 3);
  const ForwardOptions fwd{BnMode::Train, false};

  Network<double> net(spec, weights);
  auto pass = net.forward(mask, x, fwd);
  auto res = net.backward(pass, y);

  std::vector<Tensor<double>> eff = pass.effective_weights;
  Network<double> probe(spec, eff);
  const auto ones = full_mask(spec);
  auto loss_at = [&]() { return softmax_cross_entropy(probe.forward(ones, x, fwd).logits, y, nullptr); };

  const double h = 1e-5;
  std::size_t checked = 0;
  for (std::size_t l = 0; l < eff.size(); ++l) {
    for (std::size_t i = 0; i < eff[l].size(); ++i) {
      auto& wi = probe.mutable_weight(l)[i];
      const double orig = wi;
      wi = orig + h;
      const double up = loss_at();
      wi = orig - h;
      const double down = loss_at();
      wi = orig;
      const double fd = (up - down) / (2 * h) * weights[l][i];
      const double got = res.grad_scores[l][i];
      CAPTURE(l);
      CAPTURE(i);
      CHECK(std::abs(got - fd) <= 1e-4 * std::max(std::abs(got), std::abs(fd)) + 1e-9);
      ++checked;
    }
  }
  CHECK(checked == prunable_sizes(spec).total());
}

}  // namespace

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(NetworkSpec({{4}, {Linear{4, 3, true}}, true, 3}).validate(), ConfigError);
  CHECK_THROWS_AS(NetworkSpec({{4}, {Linear{5, 3}}, true, 3}).validate(), ShapeError);
  CHECK_THROWS_AS(NetworkSpec({{4}, {Linear{4, 2}}, true, 3}).validate(), ShapeError);
  CHECK_THROWS_AS(NetworkSpec({{1, 4, 4}, {ResidualBegin{}, Linear{16, 3}}, true, 3}).validate(), ShapeError);
  CHECK_NOTHROW(make_cnn4({3, 32, 32}, 10).validate());
  CHECK_NOTHROW(make_resnet_mini({3, 32, 32}, 10).validate());
  CHECK_THROWS_AS(make_architecture("vgg", {3, 32, 32}, 10, Activation::Relu, true), ConfigError);
}

TEST_CASE("architectures") {
  const auto cifar = prunable_sizes(make_cnn4({3, 32, 32}, 10));
  CHECK(cifar.total() > 250000);
  CHECK(cifar.total() < 350000);
  CHECK(cifar.sizes.front() == 3 * 32 * 9);
  const auto digits = prunable_layers(make_cnn4({1, 8, 8}, 10));
  CHECK(digits.size() == 5);
  CHECK(digits.back().weight_shape == Shape{10, 192 * 4});
  const auto custom = make_architecture("custom:conv:8:3:1:1,bn2d,relu,pool:2,fc", {1, 8, 8}, 10, Activation::Relu, true);
  CHECK(prunable_layers(custom).back().weight_shape == Shape{10, 8 * 16});
  const auto res = prunable_layers(make_resnet_mini({3, 16, 16}, 10));
  int shortcuts = 0;
  for (const auto& p : res) shortcuts += p.name.starts_with("shortcut");
  CHECK(shortcuts == 1);
}

TEST_CASE("batch norm") {
  SUBCASE("train mode normalizes with the population variance") {
    NetworkSpec spec{{2}, {Linear{2, 2}}, true, 2};
    Network<double> net(spec, {Tensor<double>({2, 2}, {1, 0, 0, 1})});
    auto out = net.forward(full_mask(spec), Tensor<double>({2, 2}, {1, 5, 3, 5})).logits;
    const double s = 1.0 / std::sqrt(1.0 + 1e-5);
    CHECK(out[0] == doctest::Approx(-s).epsilon(1e-12));
    CHECK(out[2] == doctest::Approx(s).epsilon(1e-12));
    // constant feature: zero variance normalizes to exactly zero
    CHECK(out[1] == 0.0);
    CHECK(out[3] == 0.0);
    const auto& st = net.bn_states().back();
    CHECK(st.running_mean[0] == doctest::Approx(0.2));
    CHECK(st.running_var[0] == doctest::Approx(0.9 + 0.1 * 1.0));
    CHECK(st.running_mean[1] == doctest::Approx(0.5));
    CHECK(st.running_var[1] == doctest::Approx(0.9));
  }
  SUBCASE("a fully pruned layer feeds zeros through BN") {
    auto spec = make_cnn3_small({1, 4, 4}, 3);
    Network<double> net(spec, binary_init<double>(spec, 1));
    auto mask = full_mask(spec);
    std::fill(mask.layers[0].bits.begin(), mask.layers[0].bits.end(), 0);
    auto pass = net.forward(mask, random_input<double>({1, 4, 4}, 3, 2));
    for (auto v : pass.logits.data) CHECK(v == 0.0);
  }
  SUBCASE("per-feature output statistics") {
    // with last_bn and no other layer after fc1 the logits are the BN output
    NetworkSpec spec{{5}, {Linear{5, 6}}, true, 6};
    Network<double> net(spec, binary_init<double>(spec, 9));
    auto x = random_input<double>({5}, 32, 4);
    for (auto& v : x.data) v *= 10.0;
    auto out = net.forward(full_mask(spec), x).logits;
    for (std::size_t f = 0; f < 6; ++f) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < 32; ++i) mean += out[i * 6 + f] / 32.0;
      for (std::size_t i = 0; i < 32; ++i) sq += (out[i * 6 + f] - mean) * (out[i * 6 + f] - mean) / 32.0;
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(sq - 1.0) < 1e-5);
    }
  }
  SUBCASE("eval mode uses running statistics") {
    NetworkSpec spec{{2}, {Linear{2, 2}}, true, 2};
    Network<double> net(spec, {Tensor<double>({2, 2}, {1, 0, 0, 1})});
    net.bn_states()[0].running_mean = {1.0, -1.0};
    net.bn_states()[0].running_var = {4.0, 1.0};
    auto out = net.forward(full_mask(spec), Tensor<double>({1, 2}, {3, 0}), {BnMode::Eval, true}).logits;
    CHECK(out[0] == doctest::Approx(2.0 / std::sqrt(4.0 + 1e-5)));
    CHECK(out[1] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)));
    CHECK(net.bn_states()[0].running_mean[0] == 1.0);
  }
}

TEST_CASE("identity convolution") {
  NetworkSpec spec{{2, 3, 3}, {Conv2d{2, 2, 1, 1, 0}, Linear{18, 18}}, false, 18};
  Tensor<double> eye_conv({2, 2, 1, 1}, {1, 0, 0, 1});
  Tensor<double> eye_fc({18, 18});
  for (std::size_t i = 0; i < 18; ++i) eye_fc[i * 18 + i] = 1.0;
  Network<double> net(spec, {eye_conv, eye_fc});
  const auto x = random_input<double>({2, 3, 3}, 2, 1);
  auto out = net.forward(full_mask(spec), x).logits;
  CHECK(out.data == x.data);
}

TEST_CASE("softmax cross-entropy") {
  Tensor<double> g;
  std::vector<int> y0{0};
  CHECK(softmax_cross_entropy(Tensor<double>({1, 2}, {0, 0}), y0, &g) == doctest::Approx(std::log(2.0)));
  CHECK(g.data == std::vector<double>{-0.5, 0.5});
  std::vector<int> y1{3};
  CHECK(softmax_cross_entropy(Tensor<double>({1, 7}, {2, 2, 2, 2, 2, 2, 2}), y1, nullptr) ==
        doctest::Approx(std::log(7.0)));
  std::vector<int> bad{2};
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor<double>({1, 2}), bad, nullptr), ConfigError);

  const auto logits = random_input<double>({10}, 16, 3);
  const auto labels = random_labels(16, 10, 4);
  softmax_cross_entropy(logits, labels, &g);
  for (std::size_t i = 0; i < 16; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 10; ++j) sum += g[i * 10 + j];
    CHECK(std::abs(sum) < 1e-10);
  }
}

TEST_CASE("argmax") {
  CHECK(argmax_rows(Tensor<double>({1, 3}, {2, 1, 0})) == std::vector<int>{0});
  CHECK(argmax_rows(Tensor<double>({1, 3}, {20, 10, 0})) == std::vector<int>{0});
  CHECK(argmax_rows(Tensor<double>({2, 3}, {1, 1, 0, 0, 3, 3})) == std::vector<int>{0, 1});
}

TEST_CASE("initialization") {
  const auto spec = make_mlp(100, {400, 200}, 10);
  SUBCASE("binary weights") {
    const auto w = binary_init<float>(spec, 42);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& t : w) {
      for (auto v : t.data) {
        CHECK((v == 1.0f || v == -1.0f));
        sum += v;
        ++n;
      }
    }
    CHECK(n >= 100000);
    CHECK(std::abs(sum / double(n)) < 4.0 / std::sqrt(double(n)));
    CHECK(binary_init<float>(spec, 42)[1].data == w[1].data);
    CHECK(binary_init<float>(spec, 43)[1].data != w[1].data);
  }
  SUBCASE("signed Kaiming constant") {
    CHECK(signed_kaiming_magnitude(512, 0.0) == doctest::Approx(0.0625).epsilon(1e-12));
    CHECK(signed_kaiming_magnitude(512, 0.5) == doctest::Approx(0.0883883476).epsilon(1e-9));
    CHECK(1.0 / signed_kaiming_magnitude(512, 0.0) == doctest::Approx(16.0));
    CHECK_THROWS_AS(signed_kaiming_magnitude(512, 1.0), ConfigError);
    const auto b = binary_init<double>(spec, 5);
    const auto k = signed_kaiming_const_init<double>(spec, 0.9, 5);
    const auto layers = prunable_layers(spec);
    for (std::size_t l = 0; l < b.size(); ++l) {
      const double mag = std::sqrt(2.0 / (double(layers[l].fan_in) * 0.1));
      for (std::size_t i = 0; i < b[l].size(); ++i) CHECK(k[l][i] == doctest::Approx(b[l][i] * mag).epsilon(1e-12));
    }
  }
  SUBCASE("scores") {
    auto s = init_scores(spec, {ScoreInitKind::Uniform, 0.01}, 1);
    double lo = 1, hi = -1;
    for (const auto& l : s.layers) {
      for (auto v : l.values) {
        lo = std::min(lo, double(v));
        hi = std::max(hi, double(v));
      }
    }
    CHECK(lo >= -0.01f);
    CHECK(hi <= 0.01f);
    CHECK(lo < -0.009);
    CHECK(hi > 0.009);
    CHECK(s.init_halfwidth == 0.01);
    CHECK(ScoreInit{}.halfwidth == 0.001);
    auto f = init_scores(spec, {ScoreInitKind::FanScaled, 0.0}, 1);
    for (auto v : f.layers[0].values) CHECK(std::abs(v) <= 0.1f);
    CHECK_THROWS_AS(init_scores(spec, {ScoreInitKind::Uniform, 0.0}, 1), ConfigError);
    CHECK(init_scores(spec, {}, 7).layers[2].values == init_scores(spec, {}, 7).layers[2].values);
  }
}

TEST_CASE("score gradients match finite differences") {
  SUBCASE("small CNN") { check_score_gradients(make_cnn3_small({1, 6, 6}, 5), 0.5, 100); }
  SUBCASE("small CNN without last BN") { check_score_gradients(make_cnn3_small({2, 4, 4}, 3, false), 0.3, 200); }
  SUBCASE("residual with projection and leaky relu") {
    check_score_gradients(
        parse_layers("conv:4:3:1:1,bn2d,leaky_relu,res_begin,conv:4:3:1:1,bn2d,relu,conv:6:3:2:1,bn2d,res_end:6:2,"
                     "relu,res_begin,conv:6:3:1:1,bn2d,res_end,pool:2,fc",
                     {2, 8, 8}, 3, true),
        0.4, 300);
  }
  SUBCASE("mlp") { check_score_gradients(make_mlp(6, {8, 7}, 4), 0.6, 400); }
}

TEST_CASE("input gradient matches finite differences") {
  const auto spec = make_cnn3_small({1, 4, 4}, 3);
  Network<double> net(spec, binary_init<double>(spec, 1));
  const auto mask = random_mask(spec, 0.3, 2);
  auto x = random_input<double>({1, 4, 4}, 3, 3);
  const auto y = random_labels(3, 3, 4);
  const ForwardOptions fwd{BnMode::Train, false};
  auto res = net.backward(net.forward(mask, x, fwd), y);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + 1e-5;
    const double up = softmax_cross_entropy(net.forward(mask, x, fwd).logits, y, nullptr);
    x[i] = orig - 1e-5;
    const double down = softmax_cross_entropy(net.forward(mask, x, fwd).logits, y, nullptr);
    x[i] = orig;
    const double fd = (up - down) / 2e-5;
    CHECK(std::abs(res.grad_input[i] - fd) <= 1e-4 * std::max(std::abs(fd), std::abs(res.grad_input[i])) + 1e-9);
  }
}

TEST_CASE("scale invariance") {
  const auto spec = make_cnn4({1, 8, 8}, 10, {8, 8, 8, 8});
  const auto mask = random_mask(spec, 0.5, 7);
  const auto x = random_input<double>({1, 8, 8}, 64, 8);
  const auto y = random_labels(64, 10, 9);

  SUBCASE("scaling a conv layer leaves predicted labels unchanged") {
    Network<double> a(spec, binary_init<double>(spec, 3));
    Network<double> b(spec, binary_init<double>(spec, 3));
    for (auto& v : b.mutable_weight(1).data) v *= 7.5;
    CHECK(argmax_rows(a.forward(mask, x).logits) == argmax_rows(b.forward(mask, x).logits));
  }
  SUBCASE("last BN cancels last-layer scaling in the penultimate gradient") {
    // rel. difference of the gradient into the last fc layer, and the smallest logit variance
    auto run = [&](double eps) {
      Network<double> a(spec, binary_init<double>(spec, 3));
      Network<double> b(spec, binary_init<double>(spec, 3));
      a.bn_states().back().epsilon = eps;
      b.bn_states().back().epsilon = eps;
      const std::size_t last = a.prunable().size() - 1;
      for (auto& v : b.mutable_weight(last).data) v *= 16.0;
      const BackwardOptions opts{true, true, true};
      const ForwardOptions fwd{BnMode::Train, true};
      auto pa = a.forward(mask, x, fwd);
      auto pb = b.forward(mask, x, fwd);
      CHECK(argmax_rows(pa.logits) == argmax_rows(pb.logits));
      auto ga = a.backward(pa, y, opts).node_input_grads[a.last_linear_node()];
      auto gb = b.backward(pb, y, opts).node_input_grads[b.last_linear_node()];
      double diff = 0.0, norm = 0.0;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        diff += (ga[i] - gb[i]) * (ga[i] - gb[i]);
        norm += ga[i] * ga[i];
      }
      CHECK(norm > 0.0);
      const auto& var = a.bn_states().back().running_var;  // 0.9 + 0.1 * batch variance
      const double min_var = (*std::min_element(var.begin(), var.end()) - 0.9) / 0.1;
      return std::pair{std::sqrt(diff / norm), min_var};
    };
    // exact cancellation without epsilon
    CHECK(run(0.0).first < 1e-12);
    // epsilon breaks it only at order eps / variance
    auto [rel, min_var] = run(1e-5);
    CHECK(rel < 1e-5 / min_var);
  }
}

TEST_CASE("network input checks and determinism") {
  const auto spec = make_cnn3_small({1, 4, 4}, 3);
  Network<float> net(spec, binary_init<float>(spec, 1));
  const auto mask = full_mask(spec);
  CHECK_THROWS_AS(net.forward(mask, random_input<float>({1, 4, 5}, 2, 1)), ShapeError);
  auto bad = mask;
  bad.layers.pop_back();
  CHECK_THROWS_AS(net.forward(bad, random_input<float>({1, 4, 4}, 2, 1)), ShapeError);
  CHECK_THROWS_AS(Network<float>(spec, {}), ShapeError);
  const auto x = random_input<float>({1, 4, 4}, 5, 2);
  Network<float> twin(spec, binary_init<float>(spec, 1));
  CHECK(net.forward(mask, x).logits.data == twin.forward(mask, x).logits.data);
  CHECK(net.bn_states() == twin.bn_states());
}

TEST_CASE("BN calibration averages batch statistics") {
  NetworkSpec spec{{1}, {Linear{1, 2}}, true, 2};
  Network<double> net(spec, {Tensor<double>({2, 1}, {1, -1})});
  Tensor<double> x({4, 1}, {0, 2, 10, 12});
  calibrate_bn(net, full_mask(spec), x, 2);
  const auto& st = net.bn_states()[0];
  CHECK(st.running_mean[0] == doctest::Approx(6.0));
  CHECK(st.running_var[0] == doctest::Approx(1.0));
  CHECK(st.momentum == 0.1);
}
