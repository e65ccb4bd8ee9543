#include "rbsn/arch.hpp"

#include <charconv>
#include <cmath>
#include <vector>

#include "rbsn/error.hpp"

namespace rbsn {

namespace {

LayerDesc activation(Activation act) {
  if (act == Activation::LeakyRelu) return LeakyRelu{0.01};
  return Relu{};
}

int parse_int(std::string_view s, std::string_view context) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("bad integer '" + std::string(s) + "' in layer '" + std::string(context) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    const auto end = pos == std::string_view::npos ? s.size() : pos;
    out.push_back(s.substr(start, end - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

NetworkSpec make_cnn4(const Shape& input, int classes, std::array<int, 4> widths, Activation act, bool last_bn) {
  RBSN_CHECK(input.size() == 3, ShapeError, "cnn4 needs an image input");
  RBSN_CHECK(input[1] == input[2], ShapeError, "cnn4 expects square inputs");
  int pools = 0;
  for (std::size_t side = input[1]; side > 2 && side % 2 == 0 && pools < 4; side /= 2) ++pools;

  NetworkSpec spec;
  spec.input_shape = input;
  spec.class_count = classes;
  spec.last_bn = last_bn;
  int in = static_cast<int>(input[0]);
  std::size_t side = input[1];
  for (int b = 0; b < 4; ++b) {
    spec.layers.push_back(Conv2d{in, widths[b], 3, 1, 1});
    spec.layers.push_back(BatchNorm2d{widths[b]});
    spec.layers.push_back(activation(act));
    if (b >= 4 - pools) {
      spec.layers.push_back(AvgPool{2});
      side /= 2;
    }
    in = widths[b];
  }
  spec.layers.push_back(Linear{static_cast<int>(static_cast<std::size_t>(in) * side * side), classes});
  return spec;
}

NetworkSpec make_resnet_mini(const Shape& input, int classes, int base_width, Activation act, bool last_bn) {
  RBSN_CHECK(input.size() == 3 && input[1] == input[2] && input[1] % 2 == 0, ShapeError,
             "resnet_mini needs a square image input with even side");
  NetworkSpec spec;
  spec.input_shape = input;
  spec.class_count = classes;
  spec.last_bn = last_bn;
  const int w1 = base_width, w2 = 2 * base_width;
  spec.layers.push_back(Conv2d{static_cast<int>(input[0]), w1, 3, 1, 1});
  spec.layers.push_back(BatchNorm2d{w1});
  spec.layers.push_back(activation(act));

  auto block = [&](int in, int out, int stride) {
    spec.layers.push_back(ResidualBegin{});
    spec.layers.push_back(Conv2d{in, out, 3, stride, 1});
    spec.layers.push_back(BatchNorm2d{out});
    spec.layers.push_back(activation(act));
    spec.layers.push_back(Conv2d{out, out, 3, 1, 1});
    spec.layers.push_back(BatchNorm2d{out});
    if (in != out || stride != 1) spec.layers.push_back(ResidualEnd{out, stride});
    else spec.layers.push_back(ResidualEnd{});
    spec.layers.push_back(activation(act));
  };
  block(w1, w1, 1);
  block(w1, w1, 1);
  block(w1, w2, 2);
  block(w2, w2, 1);
  const auto side = static_cast<int>(input[1] / 2);
  spec.layers.push_back(AvgPool{side});
  spec.layers.push_back(Linear{w2, classes});
  return spec;
}

NetworkSpec make_cnn3_small(const Shape& input, int classes, bool last_bn) {
  RBSN_CHECK(input.size() == 3 && input[1] % 2 == 0 && input[2] % 2 == 0, ShapeError,
             "cnn3 needs an image input with even sides");
  NetworkSpec spec;
  spec.input_shape = input;
  spec.class_count = classes;
  spec.last_bn = last_bn;
  const int c = static_cast<int>(input[0]);
  spec.layers = {Conv2d{c, 4, 3, 1, 1}, BatchNorm2d{4}, Relu{}, Conv2d{4, 8, 3, 1, 1}, BatchNorm2d{8}, Relu{},
                 AvgPool{2}, Linear{static_cast<int>(8 * (input[1] / 2) * (input[2] / 2)), classes}};
  return spec;
}

NetworkSpec make_mlp(std::size_t input_dim, const std::vector<int>& hidden, int classes, Activation act, bool last_bn) {
  NetworkSpec spec;
  spec.input_shape = {input_dim};
  spec.class_count = classes;
  spec.last_bn = last_bn;
  int in = static_cast<int>(input_dim);
  for (int h : hidden) {
    spec.layers.push_back(Linear{in, h});
    spec.layers.push_back(BatchNorm1d{h});
    spec.layers.push_back(activation(act));
    in = h;
  }
  spec.layers.push_back(Linear{in, classes});
  return spec;
}

NetworkSpec parse_layers(std::string_view text, const Shape& input, int classes, bool last_bn) {
  NetworkSpec spec;
  spec.input_shape = input;
  spec.class_count = classes;
  spec.last_bn = last_bn;
  Shape cur = input;
  std::vector<Shape> saved;
  for (auto item : split(text, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    auto parts = split(item, ':');
    const auto kind = parts[0];
    auto arg = [&](std::size_t i, int fallback) {
      return i < parts.size() && !parts[i].empty() ? parse_int(parts[i], item) : fallback;
    };
    if (kind == "conv") {
      RBSN_CHECK(cur.size() == 3, ShapeError, "conv on non-image activation in '" + std::string(item) + "'");
      Conv2d c{static_cast<int>(cur[0]), arg(1, 0), arg(2, 3), arg(3, 1), arg(4, 0)};
      spec.layers.push_back(c);
      const auto side = [&](std::size_t in) { return (in + 2 * c.padding - c.kernel) / c.stride + 1; };
      cur = {static_cast<std::size_t>(c.out_channels), side(cur[1]), side(cur[2])};
    } else if (kind == "fc") {
      const int out = arg(1, classes);
      spec.layers.push_back(Linear{static_cast<int>(numel(cur)), out});
      cur = {static_cast<std::size_t>(out)};
    } else if (kind == "bn2d") {
      spec.layers.push_back(BatchNorm2d{static_cast<int>(cur.at(0))});
    } else if (kind == "bn1d") {
      spec.layers.push_back(BatchNorm1d{static_cast<int>(cur.at(0))});
    } else if (kind == "relu") {
      spec.layers.push_back(Relu{});
    } else if (kind == "leaky_relu") {
      spec.layers.push_back(LeakyRelu{0.01});
    } else if (kind == "pool") {
      const int k = arg(1, 2);
      spec.layers.push_back(AvgPool{k});
      RBSN_CHECK(cur.size() == 3, ShapeError, "pool on non-image activation");
      cur = {cur[0], cur[1] / static_cast<std::size_t>(k), cur[2] / static_cast<std::size_t>(k)};
    } else if (kind == "res_begin") {
      spec.layers.push_back(ResidualBegin{});
      saved.push_back(cur);
    } else if (kind == "res_end") {
      spec.layers.push_back(ResidualEnd{arg(1, 0), arg(2, 1)});
      if (!saved.empty()) saved.pop_back();
    } else {
      throw ConfigError("unknown layer kind '" + std::string(kind) + "'");
    }
  }
  spec.validate();
  return spec;
}

NetworkSpec make_architecture(std::string_view name, const Shape& input, int classes, Activation act, bool last_bn) {
  NetworkSpec spec;
  if (name == "cnn4") {
    spec = make_cnn4(input, classes, {32, 64, 128, 192}, act, last_bn);
  } else if (name == "cnn4_narrow") {
    spec = make_cnn4(input, classes, {16, 32, 64, 64}, act, last_bn);
  } else if (name == "resnet_mini") {
    spec = make_resnet_mini(input, classes, 16, act, last_bn);
  } else if (name == "cnn3") {
    spec = make_cnn3_small(input, classes, last_bn);
  } else if (name == "mlp") {
    spec = make_mlp(numel(input), {64, 64}, classes, act, last_bn);
    spec.input_shape = {numel(input)};
  } else if (name.starts_with("custom:")) {
    spec = parse_layers(name.substr(7), input, classes, last_bn);
  } else {
    throw ConfigError("unknown architecture '" + std::string(name) + "'");
  }
  spec.validate();
  return spec;
}

}  // namespace rbsn
