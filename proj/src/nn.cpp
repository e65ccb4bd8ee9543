#include "rbsn/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "rbsn/error.hpp"
#include "rbsn/rng.hpp"

namespace rbsn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

using Kind = detail::NodePlan::Kind;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::size_t conv_out_side(std::size_t in, int kernel, int stride, int padding) {
  const long span = static_cast<long>(in) + 2L * padding - kernel;
  if (span < 0) return 0;
  return static_cast<std::size_t>(span / stride + 1);
}

struct Planned {
  std::vector<detail::NodePlan> nodes;
  std::vector<PrunableLayer> prunable;
  std::vector<std::size_t> bn_features;
};

Planned plan(const NetworkSpec& spec) {
  RBSN_CHECK(spec.input_shape.size() == 1 || spec.input_shape.size() == 3, ShapeError,
             "input shape must be {D} or {C,H,W}, got " + shape_string(spec.input_shape));
  for (auto d : spec.input_shape) RBSN_CHECK(d > 0, ShapeError, "input dimensions must be positive");
  RBSN_CHECK(spec.class_count >= 2, ConfigError, "class_count must be at least 2");

  Planned out;
  Shape cur = spec.input_shape;
  std::vector<Shape> saved;
  int convs = 0, fcs = 0, shortcuts = 0;

  auto add_conv = [&](const Conv2d& c, const std::string& name) {
    RBSN_CHECK(cur.size() == 3, ShapeError, name + ": convolution needs an image-shaped input");
    RBSN_CHECK(c.kernel >= 1 && c.stride >= 1 && c.padding >= 0 && c.out_channels >= 1, ConfigError,
               name + ": invalid convolution geometry");
    RBSN_CHECK(static_cast<std::size_t>(c.in_channels) == cur[0], ShapeError,
               name + ": expects " + std::to_string(c.in_channels) + " input channels, got " + std::to_string(cur[0]));
    const auto ho = conv_out_side(cur[1], c.kernel, c.stride, c.padding);
    const auto wo = conv_out_side(cur[2], c.kernel, c.stride, c.padding);
    RBSN_CHECK(ho > 0 && wo > 0, ShapeError, name + ": kernel larger than padded input");
    PrunableLayer p;
    p.name = name;
    p.weight_shape = {static_cast<std::size_t>(c.out_channels), static_cast<std::size_t>(c.in_channels),
                      static_cast<std::size_t>(c.kernel), static_cast<std::size_t>(c.kernel)};
    p.fan_in = static_cast<std::size_t>(c.in_channels) * c.kernel * c.kernel;
    p.is_conv = true;
    p.kernel = c.kernel;
    p.in_channels = c.in_channels;
    p.out_channels = c.out_channels;
    p.output_side = ho;
    out.prunable.push_back(p);
    cur = {static_cast<std::size_t>(c.out_channels), ho, wo};
    return static_cast<int>(out.prunable.size() - 1);
  };

  for (const auto& desc : spec.layers) {
    detail::NodePlan node;
    std::visit(Overloaded{
                   [&](const Conv2d& c) {
                     node.kind = Kind::Conv;
                     node.conv = c;
                     node.param = add_conv(c, "conv" + std::to_string(++convs));
                   },
                   [&](const Linear& l) {
                     RBSN_CHECK(!l.bias, ConfigError,
                                "fully-connected layer with bias rejected: biases break positive homogeneity");
                     const auto features = numel(cur);
                     RBSN_CHECK(l.in_features > 0 && static_cast<std::size_t>(l.in_features) == features, ShapeError,
                                "fc" + std::to_string(fcs + 1) + ": expects " + std::to_string(l.in_features) +
                                    " inputs, got " + std::to_string(features));
                     RBSN_CHECK(l.out_features >= 1, ConfigError, "fully-connected layer needs outputs");
                     node.kind = Kind::Linear;
                     PrunableLayer p;
                     p.name = "fc" + std::to_string(++fcs);
                     p.weight_shape = {static_cast<std::size_t>(l.out_features), features};
                     p.fan_in = features;
                     p.in_channels = l.in_features;
                     p.out_channels = l.out_features;
                     out.prunable.push_back(p);
                     node.param = static_cast<int>(out.prunable.size() - 1);
                     cur = {static_cast<std::size_t>(l.out_features)};
                   },
                   [&](const BatchNorm2d& b) {
                     RBSN_CHECK(cur.size() == 3 && static_cast<std::size_t>(b.channels) == cur[0], ShapeError,
                                "BatchNorm2d(" + std::to_string(b.channels) + ") on input " + shape_string(cur));
                     node.kind = Kind::Bn;
                     node.bn = static_cast<int>(out.bn_features.size());
                     out.bn_features.push_back(cur[0]);
                   },
                   [&](const BatchNorm1d& b) {
                     RBSN_CHECK(cur.size() == 1 && static_cast<std::size_t>(b.features) == cur[0], ShapeError,
                                "BatchNorm1d(" + std::to_string(b.features) + ") on input " + shape_string(cur));
                     node.kind = Kind::Bn;
                     node.bn = static_cast<int>(out.bn_features.size());
                     out.bn_features.push_back(cur[0]);
                   },
                   [&](const Relu&) { node.kind = Kind::Relu; },
                   [&](const LeakyRelu& l) {
                     RBSN_CHECK(l.slope >= 0.0 && l.slope < 1.0, ConfigError, "leaky relu slope must be in [0,1)");
                     node.kind = Kind::LeakyRelu;
                     node.slope = l.slope;
                   },
                   [&](const AvgPool& p) {
                     RBSN_CHECK(cur.size() == 3 && p.kernel >= 1 && cur[1] % p.kernel == 0 && cur[2] % p.kernel == 0,
                                ShapeError, "AvgPool(" + std::to_string(p.kernel) + ") does not tile " + shape_string(cur));
                     node.kind = Kind::Pool;
                     node.pool = p.kernel;
                     cur = {cur[0], cur[1] / p.kernel, cur[2] / p.kernel};
                   },
                   [&](const ResidualBegin&) {
                     node.kind = Kind::ResBegin;
                     saved.push_back(cur);
                   },
                   [&](const ResidualEnd& e) {
                     RBSN_CHECK(!saved.empty(), ShapeError, "ResidualEnd without matching ResidualBegin");
                     node.kind = Kind::ResEnd;
                     Shape skip = saved.back();
                     saved.pop_back();
                     if (e.shortcut_channels > 0) {
                       const Shape main = cur;
                       cur = skip;
                       Conv2d c{static_cast<int>(skip.at(0)), e.shortcut_channels, 1, e.shortcut_stride, 0};
                       node.shortcut_conv = c;
                       node.shortcut_param = add_conv(c, "shortcut" + std::to_string(++shortcuts));
                       node.shortcut_bn = static_cast<int>(out.bn_features.size());
                       out.bn_features.push_back(cur[0]);
                       skip = cur;
                       cur = main;
                     }
                     RBSN_CHECK(skip == cur, ShapeError,
                                "residual shapes differ: " + shape_string(skip) + " vs " + shape_string(cur));
                   },
               },
               desc);
    out.nodes.push_back(node);
  }
  RBSN_CHECK(saved.empty(), ShapeError, "unterminated ResidualBegin");
  RBSN_CHECK(cur.size() == 1 && cur[0] == static_cast<std::size_t>(spec.class_count), ShapeError,
             "network output " + shape_string(cur) + " does not match class_count " +
                 std::to_string(spec.class_count));
  RBSN_CHECK(!out.prunable.empty(), ConfigError, "network has no prunable layers");
  if (spec.last_bn) {
    detail::NodePlan node;
    node.kind = Kind::Bn;
    node.bn = static_cast<int>(out.bn_features.size());
    out.bn_features.push_back(cur[0]);
    out.nodes.push_back(node);
  }
  return out;
}

// ----- kernels ----------------------------------------------------------------

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Conv2d& c, const Tensor<T>& w, NodeCache<T>& cache) {
  const std::size_t n = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t k = static_cast<std::size_t>(c.kernel);
  const std::size_t ho = conv_out_side(h, c.kernel, c.stride, c.padding);
  const std::size_t wo = conv_out_side(wd, c.kernel, c.stride, c.padding);
  const std::size_t rows = ch * k * k, plane = ho * wo, cols_n = n * plane;
  const long stride = c.stride, pad = c.padding;

  Tensor<T> cols({rows, cols_n});
  for (std::size_t ci = 0; ci < ch; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = cols.data.data() + ((ci * k + ky) * k + kx) * cols_n;
        for (std::size_t s = 0; s < n; ++s) {
          const T* src = x.data.data() + (s * ch + ci) * h * wd;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ky);
            T* row = dst + s * plane + oy * wo;
            if (iy < 0 || iy >= static_cast<long>(h)) {
              std::fill(row, row + wo, T{0});
              continue;
            }
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kx);
              row[ox] = (ix < 0 || ix >= static_cast<long>(wd)) ? T{0} : src[iy * static_cast<long>(wd) + ix];
            }
          }
        }
      }
    }
  }
  const std::size_t co = static_cast<std::size_t>(c.out_channels);
  MapConstMat<T> wm(w.data.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(rows));
  MapConstMat<T> cm(cols.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols_n));
  RowMat<T> prod(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(cols_n));
  prod.noalias() = wm * cm;

  Tensor<T> out({n, co, ho, wo});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t o = 0; o < co; ++o) {
      const T* src = prod.data() + o * cols_n + s * plane;
      std::copy(src, src + plane, out.data.data() + (s * co + o) * plane);
    }
  }
  cache.in_shape = x.shape;
  cache.saved = std::move(cols);
  return out;
}

template <typename T>
Tensor<T> conv_backward(const Tensor<T>& gout, const Conv2d& c, const Tensor<T>& w, const NodeCache<T>& cache,
                        Tensor<T>* grad_w, bool need_input) {
  const std::size_t n = cache.in_shape[0], ch = cache.in_shape[1], h = cache.in_shape[2], wd = cache.in_shape[3];
  const std::size_t k = static_cast<std::size_t>(c.kernel);
  const std::size_t co = gout.dim(1), ho = gout.dim(2), wo = gout.dim(3);
  const std::size_t rows = ch * k * k, plane = ho * wo, cols_n = n * plane;

  RowMat<T> dout(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(cols_n));
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t o = 0; o < co; ++o) {
      const T* src = gout.data.data() + (s * co + o) * plane;
      std::copy(src, src + plane, dout.data() + o * cols_n + s * plane);
    }
  }
  MapConstMat<T> cm(cache.saved.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols_n));
  if (grad_w) {
    *grad_w = Tensor<T>(w.shape);
    MapMat<T> gw(grad_w->data.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(rows));
    gw.noalias() = dout * cm.transpose();
  }
  if (!need_input) return {};

  MapConstMat<T> wm(w.data.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(rows));
  RowMat<T> dcols(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols_n));
  dcols.noalias() = wm.transpose() * dout;

  Tensor<T> gin(cache.in_shape);
  const long stride = c.stride, pad = c.padding;
  for (std::size_t ci = 0; ci < ch; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = dcols.data() + ((ci * k + ky) * k + kx) * cols_n;
        for (std::size_t s = 0; s < n; ++s) {
          T* dst = gin.data.data() + (s * ch + ci) * h * wd;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ky);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            const T* row = src + s * plane + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kx);
              if (ix >= 0 && ix < static_cast<long>(wd)) dst[iy * static_cast<long>(wd) + ix] += row[ox];
            }
          }
        }
      }
    }
  }
  return gin;
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, NodeCache<T>& cache) {
  const std::size_t n = x.dim(0), f = x.stride0(), o = w.dim(0);
  MapConstMat<T> xm(x.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f));
  MapConstMat<T> wm(w.data.data(), static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(f));
  Tensor<T> out({n, o});
  MapMat<T> om(out.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(o));
  om.noalias() = xm * wm.transpose();
  cache.in_shape = x.shape;
  cache.saved = x;
  return out;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& gout, const Tensor<T>& w, const NodeCache<T>& cache, Tensor<T>* grad_w,
                          bool need_input) {
  const std::size_t n = gout.dim(0), o = gout.dim(1), f = w.dim(1);
  MapConstMat<T> gm(gout.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(o));
  if (grad_w) {
    *grad_w = Tensor<T>(w.shape);
    MapConstMat<T> xm(cache.saved.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f));
    MapMat<T> gw(grad_w->data.data(), static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(f));
    gw.noalias() = gm.transpose() * xm;
  }
  if (!need_input) return {};
  Tensor<T> gin(cache.in_shape);
  MapConstMat<T> wm(w.data.data(), static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(f));
  MapMat<T> gi(gin.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f));
  gi.noalias() = gm * wm;
  return gin;
}

template <typename T>
Tensor<T> bn_forward(const Tensor<T>& x, BnState& state, const ForwardOptions& opt, NodeCache<T>& cache) {
  const std::size_t n = x.dim(0), ch = x.dim(1);
  const std::size_t spatial = x.stride0() / ch;
  const double count = static_cast<double>(n * spatial);
  Tensor<T> out(x.shape);
  cache.in_shape = x.shape;
  cache.bn_mode = opt.mode;
  cache.inv_std.assign(ch, 0.0);
  for (std::size_t c = 0; c < ch; ++c) {
    double mean, var;
    if (opt.mode == BnMode::Train) {
      double sum = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* p = x.data.data() + (s * ch + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) sum += static_cast<double>(p[i]);
      }
      mean = sum / count;
      double sq = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const T* p = x.data.data() + (s * ch + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          const double d = static_cast<double>(p[i]) - mean;
          sq += d * d;
        }
      }
      var = sq / count;  // population variance
      if (opt.update_running_stats) {
        state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean;
        state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * var;
      }
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const double inv = 1.0 / std::sqrt(var + state.epsilon);
    cache.inv_std[c] = inv;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t base = (s * ch + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        out.data[base + i] = static_cast<T>((static_cast<double>(x.data[base + i]) - mean) * inv);
      }
    }
  }
  if (opt.mode == BnMode::Train) cache.saved = out;
  return out;
}

template <typename T>
Tensor<T> bn_backward(const Tensor<T>& gout, const NodeCache<T>& cache) {
  const std::size_t n = gout.dim(0), ch = gout.dim(1);
  const std::size_t spatial = gout.stride0() / ch;
  const double count = static_cast<double>(n * spatial);
  Tensor<T> gin(gout.shape);
  for (std::size_t c = 0; c < ch; ++c) {
    const double inv = cache.inv_std[c];
    if (cache.bn_mode == BnMode::Eval) {
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t base = (s * ch + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) gin.data[base + i] = static_cast<T>(gout.data[base + i] * inv);
      }
      continue;
    }
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t base = (s * ch + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const double g = gout.data[base + i];
        sum_g += g;
        sum_gx += g * static_cast<double>(cache.saved.data[base + i]);
      }
    }
    const double mean_g = sum_g / count, mean_gx = sum_gx / count;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t base = (s * ch + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const double xh = cache.saved.data[base + i];
        gin.data[base + i] = static_cast<T>(inv * (static_cast<double>(gout.data[base + i]) - mean_g - xh * mean_gx));
      }
    }
  }
  return gin;
}

template <typename T>
Tensor<T> pool_forward(const Tensor<T>& x, int kernel, NodeCache<T>& cache) {
  const std::size_t n = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3), k = static_cast<std::size_t>(kernel);
  const std::size_t ho = h / k, wo = w / k;
  Tensor<T> out({n, ch, ho, wo});
  const double scale = 1.0 / static_cast<double>(k * k);
  for (std::size_t p = 0; p < n * ch; ++p) {
    const T* src = x.data.data() + p * h * w;
    T* dst = out.data.data() + p * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) acc += src[(oy * k + dy) * w + ox * k + dx];
        }
        dst[oy * wo + ox] = static_cast<T>(acc * scale);
      }
    }
  }
  cache.in_shape = x.shape;
  return out;
}

template <typename T>
Tensor<T> pool_backward(const Tensor<T>& gout, int kernel, const NodeCache<T>& cache) {
  const std::size_t h = cache.in_shape[2], w = cache.in_shape[3], k = static_cast<std::size_t>(kernel);
  const std::size_t ho = h / k, wo = w / k, planes = cache.in_shape[0] * cache.in_shape[1];
  Tensor<T> gin(cache.in_shape);
  const T scale = static_cast<T>(1.0 / static_cast<double>(k * k));
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = gout.data.data() + p * ho * wo;
    T* dst = gin.data.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) dst[y * w + x] = src[(y / k) * wo + x / k] * scale;
    }
  }
  return gin;
}

void check_finite_double(double v, const char* what) {
  if (!std::isfinite(v)) throw DivergenceError(std::string("non-finite ") + what);
}

}  // namespace

// ----- spec-level helpers ------------------------------------------------------

void NetworkSpec::validate() const { (void)plan(*this); }

std::vector<detail::NodePlan> detail::plan_nodes(const NetworkSpec& spec) { return plan(spec).nodes; }

std::vector<PrunableLayer> prunable_layers(const NetworkSpec& spec) { return plan(spec).prunable; }

LayerSizes prunable_sizes(const NetworkSpec& spec) {
  LayerSizes out;
  for (const auto& p : prunable_layers(spec)) {
    out.sizes.push_back(static_cast<std::int64_t>(numel(p.weight_shape)));
    out.names.push_back(p.name);
  }
  return out;
}

std::vector<BnState> fresh_bn_states(const NetworkSpec& spec) {
  std::vector<BnState> out;
  for (auto f : plan(spec).bn_features) out.emplace_back(f);
  return out;
}

std::string describe(const NetworkSpec& spec) {
  std::ostringstream out;
  out << "input " << shape_string(spec.input_shape) << '\n';
  for (const auto& desc : spec.layers) {
    std::visit(Overloaded{
                   [&](const Conv2d& c) {
                     out << "conv " << c.in_channels << "->" << c.out_channels << " k" << c.kernel << " s" << c.stride
                         << " p" << c.padding << '\n';
                   },
                   [&](const Linear& l) { out << "fc " << l.in_features << "->" << l.out_features << '\n'; },
                   [&](const BatchNorm2d& b) { out << "bn2d " << b.channels << '\n'; },
                   [&](const BatchNorm1d& b) { out << "bn1d " << b.features << '\n'; },
                   [&](const Relu&) { out << "relu\n"; },
                   [&](const LeakyRelu& l) { out << "leaky_relu " << l.slope << '\n'; },
                   [&](const AvgPool& p) { out << "avgpool " << p.kernel << '\n'; },
                   [&](const ResidualBegin&) { out << "residual_begin\n"; },
                   [&](const ResidualEnd& e) {
                     out << "residual_end";
                     if (e.shortcut_channels > 0) out << " shortcut " << e.shortcut_channels << " s" << e.shortcut_stride;
                     out << '\n';
                   },
               },
               desc);
  }
  if (spec.last_bn) out << "last_bn " << spec.class_count << '\n';
  return out.str();
}

double signed_kaiming_magnitude(std::size_t fan_in, double r) {
  RBSN_CHECK(r < 1.0 && r >= 0.0, ConfigError, "signed Kaiming constant needs a pruning rate in [0, 1)");
  RBSN_CHECK(fan_in > 0, ConfigError, "fan-in must be positive");
  return std::sqrt(2.0 / (static_cast<double>(fan_in) * (1.0 - r)));
}

template <typename T>
std::vector<Tensor<T>> binary_init(const NetworkSpec& spec, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, "weights");
  std::vector<Tensor<T>> out;
  for (const auto& p : prunable_layers(spec)) {
    Tensor<T> w(p.weight_shape);
    for (auto& v : w.data) v = static_cast<T>(rng.sign());
    out.push_back(std::move(w));
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> signed_kaiming_const_init(const NetworkSpec& spec, double r, std::uint64_t seed) {
  auto out = binary_init<T>(spec, seed);
  const auto layers = prunable_layers(spec);
  for (std::size_t l = 0; l < out.size(); ++l) {
    const T mag = static_cast<T>(signed_kaiming_magnitude(layers[l].fan_in, r));
    for (auto& v : out[l].data) v *= mag;
  }
  return out;
}

ScoreSet init_scores(const NetworkSpec& spec, const ScoreInit& init, std::uint64_t seed) {
  if (init.kind == ScoreInitKind::Uniform) {
    RBSN_CHECK(init.halfwidth > 0.0 && std::isfinite(init.halfwidth), ConfigError,
               "score init half-width must be positive");
  }
  Rng rng = Rng::derive(seed, "scores");
  ScoreSet out;
  out.init_halfwidth = init.kind == ScoreInitKind::Uniform ? init.halfwidth : 0.0;
  for (const auto& p : prunable_layers(spec)) {
    const double a =
        init.kind == ScoreInitKind::Uniform ? init.halfwidth : std::sqrt(1.0 / static_cast<double>(p.fan_in));
    ScoreTensor s{p.name, p.weight_shape, std::vector<float>(numel(p.weight_shape))};
    for (auto& v : s.values) {
      // clamp guards against float rounding pushing a draw past the bound
      v = std::clamp(static_cast<float>(rng.uniform(-a, a)), static_cast<float>(-a), static_cast<float>(a));
    }
    out.layers.push_back(std::move(s));
  }
  return out;
}

template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels, std::type_identity_t<Tensor<T>>* grad) {
  RBSN_CHECK(logits.rank() == 2, ShapeError, "logits must be [N x classes]");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  RBSN_CHECK(labels.size() == n, ShapeError, "label count does not match batch size");
  if (grad) *grad = Tensor<T>(logits.shape);
  double loss = 0.0;
  std::vector<double> p(k);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    RBSN_CHECK(y >= 0 && static_cast<std::size_t>(y) < k, ConfigError, "label " + std::to_string(y) + " out of range");
    const T* row = logits.data.data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(static_cast<double>(row[j]) - mx);
      z += p[j];
    }
    loss += std::log(z) + mx - static_cast<double>(row[y]);
    if (grad) {
      for (std::size_t j = 0; j < k; ++j) {
        const double g = p[j] / z - (static_cast<int>(j) == y ? 1.0 : 0.0);
        grad->data[i * k + j] = static_cast<T>(g / static_cast<double>(n));
      }
    }
  }
  return loss / static_cast<double>(n);
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data.data() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

// ----- Network -----------------------------------------------------------------

template <typename T>
Network<T>::Network(NetworkSpec spec, std::vector<Tensor<T>> weights) : spec_(std::move(spec)), weights_(std::move(weights)) {
  auto planned = plan(spec_);
  nodes_ = std::move(planned.nodes);
  prunable_ = std::move(planned.prunable);
  for (auto f : planned.bn_features) bn_states_.emplace_back(f);
  RBSN_CHECK(weights_.size() == prunable_.size(), ShapeError,
             "expected " + std::to_string(prunable_.size()) + " weight tensors, got " + std::to_string(weights_.size()));
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    RBSN_CHECK(weights_[l].shape == prunable_[l].weight_shape, ShapeError,
               prunable_[l].name + ": weight shape " + shape_string(weights_[l].shape) + " expected " +
                   shape_string(prunable_[l].weight_shape));
  }
}

template <typename T>
std::size_t Network<T>::last_linear_node() const {
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].kind == Kind::Linear) return i;
  }
  throw ConfigError("network has no fully-connected layer");
}

template <typename T>
void Network<T>::check_mask(const MaskSet& mask) const {
  RBSN_CHECK(mask.layers.size() == prunable_.size(), ShapeError,
             "mask has " + std::to_string(mask.layers.size()) + " layers, network has " +
                 std::to_string(prunable_.size()));
  for (std::size_t l = 0; l < prunable_.size(); ++l) {
    RBSN_CHECK(mask.layers[l].shape == prunable_[l].weight_shape, ShapeError,
               "mask layer " + mask.layers[l].name + " has shape " + shape_string(mask.layers[l].shape) + ", expected " +
                   shape_string(prunable_[l].weight_shape));
  }
}

template <typename T>
ForwardPass<T> Network<T>::forward(const MaskSet& mask, const Tensor<T>& input, const ForwardOptions& options) {
  check_mask(mask);
  RBSN_CHECK(input.rank() == spec_.input_shape.size() + 1, ShapeError, "input must carry a batch axis");
  RBSN_CHECK(Shape(input.shape.begin() + 1, input.shape.end()) == spec_.input_shape, ShapeError,
             "input shape " + shape_string(input.shape) + " does not match network input " +
                 shape_string(spec_.input_shape));
  RBSN_CHECK(input.dim(0) >= 1, ShapeError, "empty batch");

  ForwardPass<T> pass;
  pass.input_shape = input.shape;
  pass.effective_weights.reserve(weights_.size());
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Tensor<T> eff(weights_[l].shape);
    const auto& bits = mask.layers[l].bits;
    for (std::size_t i = 0; i < eff.size(); ++i) eff.data[i] = bits[i] ? weights_[l].data[i] : T{0};
    pass.effective_weights.push_back(std::move(eff));
  }
  pass.nodes.resize(nodes_.size());

  Tensor<T> x = input;
  std::vector<Tensor<T>> skips;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& node = nodes_[i];
    auto& cache = pass.nodes[i];
    switch (node.kind) {
      case Kind::Conv:
        x = conv_forward(x, node.conv, pass.effective_weights[node.param], cache);
        break;
      case Kind::Linear:
        x = linear_forward(x, pass.effective_weights[node.param], cache);
        break;
      case Kind::Bn:
        x = bn_forward(x, bn_states_[node.bn], options, cache);
        break;
      case Kind::Relu:
        cache.saved = x;
        for (auto& v : x.data) v = v > T{0} ? v : T{0};
        break;
      case Kind::LeakyRelu: {
        cache.saved = x;
        const T slope = static_cast<T>(node.slope);
        for (auto& v : x.data) v = v > T{0} ? v : v * slope;
        break;
      }
      case Kind::Pool:
        x = pool_forward(x, node.pool, cache);
        break;
      case Kind::ResBegin:
        skips.push_back(x);
        break;
      case Kind::ResEnd: {
        Tensor<T> skip = std::move(skips.back());
        skips.pop_back();
        if (node.shortcut_param >= 0) {
          cache.shortcut.resize(2);
          skip = conv_forward(skip, node.shortcut_conv, pass.effective_weights[node.shortcut_param], cache.shortcut[0]);
          skip = bn_forward(skip, bn_states_[node.shortcut_bn], options, cache.shortcut[1]);
        }
        for (std::size_t j = 0; j < x.size(); ++j) x.data[j] += skip.data[j];
        break;
      }
    }
  }
  for (auto v : x.data) {
    if (!std::isfinite(static_cast<double>(v))) throw DivergenceError("non-finite logits in forward pass");
  }
  pass.logits = std::move(x);
  return pass;
}

template <typename T>
BackwardResult<T> Network<T>::backward(const ForwardPass<T>& pass, std::span<const int> labels,
                                       const BackwardOptions& options) const {
  Tensor<T> grad;
  const double loss = softmax_cross_entropy(pass.logits, labels, &grad);
  check_finite_double(loss, "loss");
  auto result = backward_from_logits(pass, grad, options);
  result.loss = loss;
  return result;
}

template <typename T>
BackwardResult<T> Network<T>::backward_from_logits(const ForwardPass<T>& pass, const Tensor<T>& grad_logits,
                                                   const BackwardOptions& options) const {
  RBSN_CHECK(pass.nodes.size() == nodes_.size(), ShapeError, "forward cache does not belong to this network");
  RBSN_CHECK(grad_logits.shape == pass.logits.shape, ShapeError, "logit gradient shape mismatch");
  BackwardResult<T> result;
  result.grad_logits = grad_logits;
  if (options.weight_grads) result.grad_effective.resize(weights_.size());
  if (options.record_node_input_grads) result.node_input_grads.resize(nodes_.size());

  Tensor<T> g = grad_logits;
  std::vector<Tensor<T>> skip_grads;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    const auto& node = nodes_[i];
    const auto& cache = pass.nodes[i];
    const bool need_input = i > 0 || options.input_grad;
    switch (node.kind) {
      case Kind::Conv:
        g = conv_backward(g, node.conv, pass.effective_weights[node.param], cache,
                          options.weight_grads ? &result.grad_effective[node.param] : nullptr, need_input);
        break;
      case Kind::Linear:
        g = linear_backward(g, pass.effective_weights[node.param], cache,
                            options.weight_grads ? &result.grad_effective[node.param] : nullptr, need_input);
        break;
      case Kind::Bn:
        g = bn_backward(g, cache);
        break;
      case Kind::Relu:
        for (std::size_t j = 0; j < g.size(); ++j) {
          if (!(cache.saved.data[j] > T{0})) g.data[j] = T{0};
        }
        break;
      case Kind::LeakyRelu: {
        const T slope = static_cast<T>(node.slope);
        for (std::size_t j = 0; j < g.size(); ++j) {
          if (!(cache.saved.data[j] > T{0})) g.data[j] *= slope;
        }
        break;
      }
      case Kind::Pool:
        g = pool_backward(g, node.pool, cache);
        break;
      case Kind::ResEnd: {
        Tensor<T> gs = g;
        if (node.shortcut_param >= 0) {
          gs = bn_backward(gs, cache.shortcut[1]);
          gs = conv_backward(gs, node.shortcut_conv, pass.effective_weights[node.shortcut_param], cache.shortcut[0],
                             options.weight_grads ? &result.grad_effective[node.shortcut_param] : nullptr, true);
        }
        skip_grads.push_back(std::move(gs));
        break;
      }
      case Kind::ResBegin: {
        const Tensor<T>& gs = skip_grads.back();
        if (g.data.empty()) g = gs;
        else
          for (std::size_t j = 0; j < g.size(); ++j) g.data[j] += gs.data[j];
        skip_grads.pop_back();
        break;
      }
    }
    if (options.record_node_input_grads) result.node_input_grads[i] = g;
  }
  if (options.input_grad) {
    result.grad_input = std::move(g);
    for (auto v : result.grad_input.data) {
      if (!std::isfinite(static_cast<double>(v))) throw DivergenceError("non-finite input gradient");
    }
  }
  if (options.weight_grads) {
    result.grad_scores = score_gradient<T>(result.grad_effective, weights_);
  }
  return result;
}

template <typename T>
std::vector<int> Network<T>::predict(const MaskSet& mask, const Tensor<T>& input) {
  auto pass = forward(mask, input, ForwardOptions{BnMode::Eval, false});
  return argmax_rows(pass.logits);
}

template <typename T>
void calibrate_bn(Network<T>& net, const MaskSet& mask, const Tensor<T>& input, std::size_t batch_size) {
  RBSN_CHECK(batch_size >= 1, ConfigError, "calibration batch size must be positive");
  auto& states = net.bn_states();
  std::vector<double> momenta;
  for (auto& s : states) {
    momenta.push_back(s.momentum);
    s = BnState(s.running_mean.size());
    s.momentum = momenta.back();
  }
  const std::size_t n = input.dim(0), per = input.stride0();
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    Shape shape = input.shape;
    shape[0] = end - start;
    Tensor<T> batch(shape, std::vector<T>(input.data.begin() + static_cast<std::ptrdiff_t>(start * per),
                                          input.data.begin() + static_cast<std::ptrdiff_t>(end * per)));
    // cumulative average: batch b gets weight 1/(b+1)
    ++batches;
    for (auto& s : states) s.momentum = 1.0 / static_cast<double>(batches);
    net.forward(mask, batch, ForwardOptions{BnMode::Train, true});
  }
  for (std::size_t i = 0; i < states.size(); ++i) states[i].momentum = momenta[i];
}

template std::vector<Tensor<float>> binary_init<float>(const NetworkSpec&, std::uint64_t);
template std::vector<Tensor<double>> binary_init<double>(const NetworkSpec&, std::uint64_t);
template std::vector<Tensor<float>> signed_kaiming_const_init<float>(const NetworkSpec&, double, std::uint64_t);
template std::vector<Tensor<double>> signed_kaiming_const_init<double>(const NetworkSpec&, double, std::uint64_t);
template double softmax_cross_entropy<float>(const Tensor<float>&, std::span<const int>, Tensor<float>*);
template double softmax_cross_entropy<double>(const Tensor<double>&, std::span<const int>, Tensor<double>*);
template std::vector<int> argmax_rows<float>(const Tensor<float>&);
template std::vector<int> argmax_rows<double>(const Tensor<double>&);
template class Network<float>;
template class Network<double>;
template void calibrate_bn<float>(Network<float>&, const MaskSet&, const Tensor<float>&, std::size_t);
template void calibrate_bn<double>(Network<double>&, const MaskSet&, const Tensor<double>&, std::size_t);

}  // namespace rbsn
