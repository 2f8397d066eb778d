#include "ctlab/segnet.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <thread>

#include "ctlab/error.hpp"
#include "ctlab/random.hpp"

namespace ctlab {

void UNetConfig::validate() const {
  if (input_channels < 1 || output_channels < 1 || base_width < 1) {
    throw InvalidArgument("UNetConfig: channel counts and base_width must be >= 1");
  }
  if (depth < 1) throw InvalidArgument("UNetConfig: depth must be >= 1");
  if (depth > 16 || image_side < 1 || image_side % (1 << depth) != 0) {
    std::ostringstream os;
    os << "UNetConfig: image_side " << image_side << " is not divisible by 2^" << depth << " = "
       << (1 << std::min(depth, 30));
    throw InvalidArgument(os.str());
  }
}

const char* to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw InvalidArgument("unknown optimizer '" + s + "'");
}

const char* to_string(StopReason r) {
  return r == StopReason::early_stop ? "early_stop" : "max_epochs";
}

namespace {

// Layer order: enc{l}.conv1/2 for l < depth, bottleneck.conv1/2, then for
// l = depth-1 .. 0 up{l}.conv, dec{l}.conv1, dec{l}.conv2, and finally head.
struct LayerIndex {
  int depth;
  int enc(int level, int j) const { return 2 * level + j; }
  int bottleneck(int j) const { return 2 * depth + j; }
  int up(int level) const { return 2 * depth + 2 + 3 * (depth - 1 - level); }
  int dec(int level, int j) const { return up(level) + 1 + j; }
  int head() const { return 5 * depth + 2; }
};

struct LayerShape {
  std::string name;
  int out, in, k;
};

std::vector<LayerShape> layer_shapes(const UNetConfig& c) {
  std::vector<LayerShape> s;
  int in = c.input_channels;
  for (int l = 0; l < c.depth; ++l) {
    const int w = c.width_at(l);
    s.push_back({"enc" + std::to_string(l) + ".conv1", w, in, 3});
    s.push_back({"enc" + std::to_string(l) + ".conv2", w, w, 3});
    in = w;
  }
  const int wb = c.width_at(c.depth);
  s.push_back({"bottleneck.conv1", wb, in, 3});
  s.push_back({"bottleneck.conv2", wb, wb, 3});
  for (int l = c.depth - 1; l >= 0; --l) {
    const int w = c.width_at(l);
    s.push_back({"up" + std::to_string(l) + ".conv", w, c.width_at(l + 1), 3});
    s.push_back({"dec" + std::to_string(l) + ".conv1", w, 2 * w, 3});
    s.push_back({"dec" + std::to_string(l) + ".conv2", w, w, 3});
  }
  s.push_back({"head", c.output_channels, c.base_width, 1});
  return s;
}

}  // namespace

template <class T>
std::size_t ParamSet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

template <class T>
bool ParamSet<T>::all_finite() const {
  for (const auto& l : layers) {
    for (T v : l.weight)
      if (!std::isfinite(v)) return false;
    for (T v : l.bias)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

template <class T>
T& ParamSet<T>::flat(std::size_t index) {
  for (auto& l : layers) {
    if (index < l.weight.size()) return l.weight[index];
    index -= l.weight.size();
    if (index < l.bias.size()) return l.bias[index];
    index -= l.bias.size();
  }
  throw InvalidArgument("parameter index out of range");
}

template <class T>
T ParamSet<T>::flat(std::size_t index) const {
  return const_cast<ParamSet*>(this)->flat(index);
}

template <class T>
void ParamSet<T>::validate() const {
  config.validate();
  const auto shapes = layer_shapes(config);
  if (shapes.size() != layers.size()) {
    throw ShapeError("parameter set has " + std::to_string(layers.size()) + " layers, config needs " +
                     std::to_string(shapes.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& s = shapes[i];
    const auto& l = layers[i];
    if (l.out_channels != s.out || l.in_channels != s.in || l.kernel != s.k ||
        l.weight.size() != static_cast<std::size_t>(s.out) * s.in * s.k * s.k ||
        l.bias.size() != static_cast<std::size_t>(s.out)) {
      throw ShapeError("layer '" + s.name + "' shape does not match config");
    }
  }
}

template <class T>
ParamSet<T> zeros_like(const ParamSet<T>& p) {
  ParamSet<T> z;
  z.config = p.config;
  z.init_seed = p.init_seed;
  z.layers.reserve(p.layers.size());
  for (const auto& l : p.layers) {
    z.layers.push_back({l.name, l.out_channels, l.in_channels, l.kernel,
                        std::vector<T>(l.weight.size(), T(0)), std::vector<T>(l.bias.size(), T(0))});
  }
  return z;
}

template <class T>
ParamSet<T> init_unet(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  ParamSet<T> p;
  p.config = config;
  p.init_seed = seed;
  Rng rng(seed);
  for (const auto& s : layer_shapes(config)) {
    ConvLayer<T> l{s.name, s.out, s.in, s.k, {}, std::vector<T>(s.out, T(0))};
    const double limit = std::sqrt(6.0 / static_cast<double>(l.fan_in()));
    l.weight.resize(static_cast<std::size_t>(s.out) * l.fan_in());
    for (auto& w : l.weight) w = static_cast<T>(rng.uniform(-limit, limit));
    p.layers.push_back(std::move(l));
  }
  return p;
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <class T>
struct Act {
  int c = 0, h = 0, w = 0;
  std::vector<T> v;

  void reset(int c_, int h_, int w_) {
    c = c_;
    h = h_;
    w = w_;
    v.assign(static_cast<std::size_t>(c) * h * w, T(0));
  }
  int plane() const { return h * w; }
};

template <class T>
void im2col3(const Act<T>& in, std::vector<T>& cols) {
  const int H = in.h, W = in.w, HW = H * W;
  cols.resize(static_cast<std::size_t>(in.c) * 9 * HW);
  for (int c = 0; c < in.c; ++c) {
    const T* src = in.v.data() + static_cast<std::size_t>(c) * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = cols.data() + static_cast<std::size_t>((c * 3 + ky) * 3 + kx) * HW;
        for (int y = 0; y < H; ++y) {
          const int sy = y + ky - 1;
          T* row = dst + y * W;
          if (sy < 0 || sy >= H) {
            std::fill(row, row + W, T(0));
            continue;
          }
          const T* srow = src + sy * W;
          for (int x = 0; x < W; ++x) {
            const int sx = x + kx - 1;
            row[x] = (sx >= 0 && sx < W) ? srow[sx] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im3(const std::vector<T>& cols, Act<T>& out) {
  const int H = out.h, W = out.w, HW = H * W;
  std::fill(out.v.begin(), out.v.end(), T(0));
  for (int c = 0; c < out.c; ++c) {
    T* dst = out.v.data() + static_cast<std::size_t>(c) * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = cols.data() + static_cast<std::size_t>((c * 3 + ky) * 3 + kx) * HW;
        for (int y = 0; y < H; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= H) continue;
          const T* row = src + y * W;
          T* drow = dst + sy * W;
          for (int x = 0; x < W; ++x) {
            const int sx = x + kx - 1;
            if (sx >= 0 && sx < W) drow[sx] += row[x];
          }
        }
      }
    }
  }
}

template <class T>
void conv_forward(const ConvLayer<T>& L, const Act<T>& in, Act<T>& out, std::vector<T>& cols) {
  const int HW = in.plane();
  const int K = static_cast<int>(L.fan_in());
  const T* colp = in.v.data();
  if (L.kernel == 3) {
    im2col3(in, cols);
    colp = cols.data();
  }
  out.reset(L.out_channels, in.h, in.w);
  MapMat<T> O(out.v.data(), L.out_channels, HW);
  CMapMat<T> Wm(L.weight.data(), L.out_channels, K);
  CMapMat<T> Cm(colp, K, HW);
  O.noalias() = Wm * Cm;
  for (int o = 0; o < L.out_channels; ++o) O.row(o).array() += L.bias[o];
}

// dOut is consumed in place; dIn is written when non-null.
template <class T>
void conv_backward(const ConvLayer<T>& L, const Act<T>& in, const std::vector<T>& dOut,
                   ConvLayer<T>& G, Act<T>* dIn, std::vector<T>& cols) {
  const int HW = in.plane();
  const int K = static_cast<int>(L.fan_in());
  const T* colp = in.v.data();
  if (L.kernel == 3) {
    im2col3(in, cols);
    colp = cols.data();
  }
  CMapMat<T> dO(dOut.data(), L.out_channels, HW);
  CMapMat<T> Cm(colp, K, HW);
  MapMat<T> gW(G.weight.data(), L.out_channels, K);
  gW.noalias() += dO * Cm.transpose();
  // Plain loop: Eigen's vectorised sum depends on buffer alignment.
  for (int o = 0; o < L.out_channels; ++o) {
    const T* row = dOut.data() + static_cast<std::size_t>(o) * HW;
    T acc = T(0);
    for (int k = 0; k < HW; ++k) acc += row[k];
    G.bias[o] += acc;
  }
  if (!dIn) return;
  dIn->reset(in.c, in.h, in.w);
  CMapMat<T> Wm(L.weight.data(), L.out_channels, K);
  if (L.kernel == 3) {
    std::vector<T> dcols(static_cast<std::size_t>(K) * HW);
    MapMat<T> dC(dcols.data(), K, HW);
    dC.noalias() = Wm.transpose() * dO;
    col2im3(dcols, *dIn);
  } else {
    MapMat<T> dC(dIn->v.data(), K, HW);
    dC.noalias() = Wm.transpose() * dO;
  }
}

template <class T>
void relu_inplace(Act<T>& a) {
  for (auto& v : a.v) v = v > T(0) ? v : T(0);
}

template <class T>
void relu_backward(const Act<T>& out, std::vector<T>& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(out.v[i] > T(0))) grad[i] = T(0);
  }
}

template <class T>
void maxpool_forward(const Act<T>& in, Act<T>& out, std::vector<unsigned char>& arg) {
  out.reset(in.c, in.h / 2, in.w / 2);
  arg.assign(out.v.size(), 0);
  for (int c = 0; c < in.c; ++c) {
    for (int y = 0; y < out.h; ++y) {
      for (int x = 0; x < out.w; ++x) {
        const T* base = in.v.data() + (static_cast<std::size_t>(c) * in.h + 2 * y) * in.w + 2 * x;
        const T cand[4] = {base[0], base[1], base[in.w], base[in.w + 1]};
        unsigned char best = 0;
        for (unsigned char k = 1; k < 4; ++k) {
          if (cand[k] > cand[best]) best = k;
        }
        const std::size_t o = (static_cast<std::size_t>(c) * out.h + y) * out.w + x;
        out.v[o] = cand[best];
        arg[o] = best;
      }
    }
  }
}

template <class T>
void maxpool_backward(const std::vector<T>& dOut, const std::vector<unsigned char>& arg, int c_,
                      int h_in, int w_in, std::vector<T>& dIn) {
  const int ho = h_in / 2, wo = w_in / 2;
  for (int c = 0; c < c_; ++c) {
    for (int y = 0; y < ho; ++y) {
      for (int x = 0; x < wo; ++x) {
        const std::size_t o = (static_cast<std::size_t>(c) * ho + y) * wo + x;
        const int k = arg[o];
        const int iy = 2 * y + (k >> 1), ix = 2 * x + (k & 1);
        dIn[(static_cast<std::size_t>(c) * h_in + iy) * w_in + ix] += dOut[o];
      }
    }
  }
}

template <class T>
void upsample_forward(const Act<T>& in, Act<T>& out) {
  out.reset(in.c, in.h * 2, in.w * 2);
  for (int c = 0; c < in.c; ++c) {
    for (int y = 0; y < out.h; ++y) {
      const T* srow = in.v.data() + (static_cast<std::size_t>(c) * in.h + y / 2) * in.w;
      T* drow = out.v.data() + (static_cast<std::size_t>(c) * out.h + y) * out.w;
      for (int x = 0; x < out.w; ++x) drow[x] = srow[x / 2];
    }
  }
}

template <class T>
void upsample_backward(const std::vector<T>& dOut, int c_, int h_in, int w_in, Act<T>& dIn) {
  dIn.reset(c_, h_in, w_in);
  const int ho = h_in * 2, wo = w_in * 2;
  for (int c = 0; c < c_; ++c) {
    for (int y = 0; y < ho; ++y) {
      const T* srow = dOut.data() + (static_cast<std::size_t>(c) * ho + y) * wo;
      T* drow = dIn.v.data() + (static_cast<std::size_t>(c) * h_in + y / 2) * w_in;
      for (int x = 0; x < wo; ++x) drow[x / 2] += srow[x];
    }
  }
}

template <class T>
T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

// Activations a sample's backward pass needs, indexed by layer.
template <class T>
struct Tape {
  std::vector<Act<T>> in;   // input of each layer
  std::vector<Act<T>> out;  // activated output of each layer
  std::vector<std::vector<unsigned char>> pool_arg;
  std::vector<T> cols;
};

template <class T>
void forward_sample(const ParamSet<T>& P, const T* input, Tape<T>& tape) {
  const auto& cfg = P.config;
  const LayerIndex ix{cfg.depth};
  const int L = cfg.layer_count();
  tape.in.resize(L);
  tape.out.resize(L);
  tape.pool_arg.resize(cfg.depth);

  Act<T> x;
  x.reset(cfg.input_channels, cfg.image_side, cfg.image_side);
  std::copy(input, input + x.v.size(), x.v.begin());

  auto conv_relu = [&](int li, const Act<T>& src) -> const Act<T>& {
    tape.in[li] = src;
    conv_forward(P.layers[li], tape.in[li], tape.out[li], tape.cols);
    relu_inplace(tape.out[li]);
    return tape.out[li];
  };

  for (int l = 0; l < cfg.depth; ++l) {
    conv_relu(ix.enc(l, 0), x);
    const auto& skip = conv_relu(ix.enc(l, 1), tape.out[ix.enc(l, 0)]);
    maxpool_forward(skip, x, tape.pool_arg[l]);
  }
  conv_relu(ix.bottleneck(0), x);
  x = conv_relu(ix.bottleneck(1), tape.out[ix.bottleneck(0)]);

  for (int l = cfg.depth - 1; l >= 0; --l) {
    Act<T> up;
    upsample_forward(x, up);
    const auto& upc = conv_relu(ix.up(l), up);
    const auto& skip = tape.out[ix.enc(l, 1)];
    Act<T> cat;
    cat.reset(skip.c + upc.c, skip.h, skip.w);
    std::copy(skip.v.begin(), skip.v.end(), cat.v.begin());
    std::copy(upc.v.begin(), upc.v.end(), cat.v.begin() + skip.v.size());
    conv_relu(ix.dec(l, 0), cat);
    x = conv_relu(ix.dec(l, 1), tape.out[ix.dec(l, 0)]);
  }

  const int h = ix.head();
  tape.in[h] = x;
  conv_forward(P.layers[h], tape.in[h], tape.out[h], tape.cols);
  const T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T(1), T(0));
  for (auto& v : tape.out[h].v) v = std::clamp(sigmoid(v), lo, hi);
}

// Accumulates into G the gradient for one sample given dL/dlogits of the head.
template <class T>
void backward_sample(const ParamSet<T>& P, Tape<T>& tape, std::vector<T> d_logits, ParamSet<T>& G) {
  const auto& cfg = P.config;
  const LayerIndex ix{cfg.depth};
  Act<T> dx;

  const int h = ix.head();
  conv_backward(P.layers[h], tape.in[h], d_logits, G.layers[h], &dx, tape.cols);

  auto back_relu = [&](int li, std::vector<T> grad, Act<T>& dIn) {
    relu_backward(tape.out[li], grad);
    conv_backward(P.layers[li], tape.in[li], grad, G.layers[li], &dIn, tape.cols);
  };

  std::vector<std::vector<T>> d_skip(cfg.depth);
  for (int l = 0; l < cfg.depth; ++l) {
    Act<T> d1, dcat, dup;
    back_relu(ix.dec(l, 1), std::move(dx.v), d1);
    back_relu(ix.dec(l, 0), std::move(d1.v), dcat);
    const int ws = tape.out[ix.enc(l, 1)].c;
    const std::size_t split = static_cast<std::size_t>(ws) * dcat.plane();
    d_skip[l].assign(dcat.v.begin(), dcat.v.begin() + split);
    std::vector<T> d_upc(dcat.v.begin() + split, dcat.v.end());
    back_relu(ix.up(l), std::move(d_upc), dup);
    const auto& below = l + 1 < cfg.depth ? tape.out[ix.dec(l + 1, 1)] : tape.out[ix.bottleneck(1)];
    upsample_backward(dup.v, below.c, below.h, below.w, dx);
  }

  {
    Act<T> d1;
    back_relu(ix.bottleneck(1), std::move(dx.v), d1);
    back_relu(ix.bottleneck(0), std::move(d1.v), dx);
  }

  for (int l = cfg.depth - 1; l >= 0; --l) {
    const auto& skip = tape.out[ix.enc(l, 1)];
    std::vector<T> d_b = std::move(d_skip[l]);
    maxpool_backward(dx.v, tape.pool_arg[l], skip.c, skip.h, skip.w, d_b);
    Act<T> d1;
    back_relu(ix.enc(l, 1), std::move(d_b), d1);
    // The network input needs no gradient.
    if (l == 0) {
      std::vector<T> g = std::move(d1.v);
      relu_backward(tape.out[ix.enc(0, 0)], g);
      conv_backward(P.layers[ix.enc(0, 0)], tape.in[ix.enc(0, 0)], g, G.layers[ix.enc(0, 0)],
                    static_cast<Act<T>*>(nullptr), tape.cols);
    } else {
      back_relu(ix.enc(l, 0), std::move(d1.v), dx);
    }
  }
}

void check_batch(const UNetConfig& cfg, int c, int h, int w, const char* what) {
  if (c != cfg.input_channels || h != cfg.image_side || w != cfg.image_side) {
    std::ostringstream os;
    os << what << " shape " << c << "x" << h << "x" << w << " does not match network input "
       << cfg.input_channels << "x" << cfg.image_side << "x" << cfg.image_side;
    throw ShapeError(os.str());
  }
}

constexpr int kGradientParts = 8;

// Runs fn(begin, end, worker) over contiguous chunks of [0, n).
template <class Fn>
void parallel_chunks(int n, int jobs, Fn&& fn) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    fn(0, n, 0);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t) {
    const int b = n * t / jobs, e = n * (t + 1) / jobs;
    pool.emplace_back([&fn, b, e, t] { fn(b, e, t); });
  }
  for (auto& th : pool) th.join();
}

template <class T>
void check_one_hot(const Tensor<T>& target) {
  const std::size_t plane = static_cast<std::size_t>(target.h) * target.w;
  for (int i = 0; i < target.n; ++i) {
    const T* s = target.sample(i);
    for (std::size_t p = 0; p < plane; ++p) {
      T sum = 0;
      for (int c = 0; c < target.c; ++c) {
        const T v = s[c * plane + p];
        if (v != T(0) && v != T(1)) throw InvalidArgument("target is not binary");
        sum += v;
      }
      if (sum != T(1)) throw InvalidArgument("target is not one-hot across channels");
    }
  }
}

double bce_term(double p, double t) {
  const double pc = std::clamp(p, kLossEpsilon, 1.0 - kLossEpsilon);
  return -(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc));
}

}  // namespace

template <class T>
Tensor<T> forward(const ParamSet<T>& params, const Tensor<T>& batch, int jobs) {
  const auto& cfg = params.config;
  check_batch(cfg, batch.c, batch.h, batch.w, "batch");
  Tensor<T> out(batch.n, cfg.output_channels, cfg.image_side, cfg.image_side);
  parallel_chunks(batch.n, jobs, [&](int b, int e, int) {
    Tape<T> tape;
    for (int i = b; i < e; ++i) {
      forward_sample(params, batch.sample(i), tape);
      const auto& p = tape.out[LayerIndex{cfg.depth}.head()].v;
      std::copy(p.begin(), p.end(), out.sample(i));
    }
  });
  return out;
}

template <class T>
double bce_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.n != target.n || pred.c != target.c || pred.h != target.h || pred.w != target.w) {
    throw ShapeError("prediction and target shapes differ");
  }
  if (pred.data.empty()) throw InvalidArgument("empty prediction");
  check_one_hot(target);
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    sum += bce_term(static_cast<double>(pred.data[i]), static_cast<double>(target.data[i]));
  }
  return sum / static_cast<double>(pred.data.size());
}

template <class T>
Gradient<T> backward(const ParamSet<T>& params, const Tensor<T>& batch, const Tensor<T>& target,
                     int jobs) {
  const auto& cfg = params.config;
  check_batch(cfg, batch.c, batch.h, batch.w, "batch");
  if (target.n != batch.n || target.c != cfg.output_channels || target.h != batch.h ||
      target.w != batch.w) {
    throw ShapeError("target shape does not match network output");
  }
  if (batch.n == 0) throw InvalidArgument("empty batch");
  check_one_hot(target);

  const double count = static_cast<double>(target.data.size());
  const T scale = static_cast<T>(1.0 / count);
  // A fixed partition of the batch, reduced in order, keeps the result
  // independent of the thread count.
  const int parts = std::min(batch.n, kGradientParts);
  std::vector<ParamSet<T>> grads(parts, zeros_like(params));
  std::vector<double> losses(parts, 0.0);

  parallel_chunks(parts, jobs, [&](int pb, int pe, int) {
    Tape<T> tape;
    for (int part = pb; part < pe; ++part) {
      const int b = batch.n * part / parts, e = batch.n * (part + 1) / parts;
      for (int i = b; i < e; ++i) {
        forward_sample(params, batch.sample(i), tape);
        const auto& p = tape.out[LayerIndex{cfg.depth}.head()].v;
        const T* y = target.sample(i);
        std::vector<T> dz(p.size());
        for (std::size_t k = 0; k < p.size(); ++k) {
          losses[part] += bce_term(static_cast<double>(p[k]), static_cast<double>(y[k]));
          // d/dz of BCE(sigmoid(z)) is p - y; the clamp zeroes it at saturation.
          const bool clamped = p[k] < T(kLossEpsilon) || p[k] > T(1.0 - kLossEpsilon);
          dz[k] = clamped ? T(0) : (p[k] - y[k]) * scale;
        }
        backward_sample(params, tape, std::move(dz), grads[part]);
      }
    }
  });

  Gradient<T> out{0.0, std::move(grads[0])};
  out.loss = losses[0];
  for (int t = 1; t < parts; ++t) {
    out.loss += losses[t];
    for (std::size_t li = 0; li < out.grad.layers.size(); ++li) {
      auto& dst = out.grad.layers[li];
      const auto& src = grads[t].layers[li];
      for (std::size_t k = 0; k < dst.weight.size(); ++k) dst.weight[k] += src.weight[k];
      for (std::size_t k = 0; k < dst.bias.size(); ++k) dst.bias[k] += src.bias[k];
    }
  }
  out.loss /= count;
  return out;
}

template <class T>
void Optimizer<T>::step(ParamSet<T>& params, const ParamSet<T>& grad) {
  const std::size_t n = params.parameter_count();
  if (grad.parameter_count() != n) throw ShapeError("gradient does not match parameters");
  if (kind_ == OptimizerKind::sgd) {
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
      auto& p = params.layers[li];
      const auto& g = grad.layers[li];
      for (std::size_t k = 0; k < p.weight.size(); ++k) p.weight[k] -= static_cast<T>(lr_ * g.weight[k]);
      for (std::size_t k = 0; k < p.bias.size(); ++k) p.bias[k] -= static_cast<T>(lr_ * g.bias[k]);
    }
    return;
  }

  if (m_.empty()) {
    m_.assign(n, 0.0);
    v_.assign(n, 0.0);
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(steps_));
  std::size_t idx = 0;
  auto update = [&](T& p, T g) {
    const double gd = static_cast<double>(g);
    m_[idx] = kBeta1 * m_[idx] + (1.0 - kBeta1) * gd;
    v_[idx] = kBeta2 * v_[idx] + (1.0 - kBeta2) * gd * gd;
    const double mh = m_[idx] / c1;
    const double vh = v_[idx] / c2;
    p = static_cast<T>(static_cast<double>(p) - lr_ * mh / (std::sqrt(vh) + kEpsilon));
    ++idx;
  };
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    auto& p = params.layers[li];
    const auto& g = grad.layers[li];
    for (std::size_t k = 0; k < p.weight.size(); ++k) update(p.weight[k], g.weight[k]);
    for (std::size_t k = 0; k < p.bias.size(); ++k) update(p.bias[k], g.bias[k]);
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (patience < 1) throw InvalidArgument("patience must be >= 1");
  if (max_epochs < 1) throw InvalidArgument("max_epochs must be >= 1");
  if (jobs < 1) throw InvalidArgument("jobs must be >= 1");
}

std::string TrainLog::csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,val_loss\n";
  for (const auto& e : epochs) os << e.epoch << "," << e.train_loss << "," << e.val_loss << "\n";
  return os.str();
}

template <class T>
Tensor<T> stack_inputs(std::span<const Sample* const> samples) {
  if (samples.empty()) return {};
  const auto& f = samples.front()->input;
  Tensor<T> t(static_cast<int>(samples.size()), f.channels, f.side, f.side);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& img = samples[i]->input;
    if (img.channels != f.channels || img.side != f.side) throw ShapeError("ragged sample inputs");
    std::copy(img.data.begin(), img.data.end(), t.sample(static_cast<int>(i)));
  }
  return t;
}

template <class T>
Tensor<T> stack_targets(std::span<const Sample* const> samples) {
  if (samples.empty()) return {};
  const auto& f = samples.front()->target;
  Tensor<T> t(static_cast<int>(samples.size()), f.channels, f.side, f.side);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& img = samples[i]->target;
    if (img.channels != f.channels || img.side != f.side) throw ShapeError("ragged sample targets");
    std::copy(img.data.begin(), img.data.end(), t.sample(static_cast<int>(i)));
  }
  return t;
}

template <class T>
double dataset_loss(const ParamSet<T>& params, std::span<const Sample> set, int chunk, int jobs) {
  if (set.empty()) throw InvalidArgument("empty dataset");
  double sum = 0.0;
  std::size_t count = 0;
  std::vector<const Sample*> ptrs;
  for (std::size_t b = 0; b < set.size(); b += chunk) {
    const std::size_t e = std::min(set.size(), b + static_cast<std::size_t>(chunk));
    ptrs.clear();
    for (std::size_t i = b; i < e; ++i) ptrs.push_back(&set[i]);
    const auto x = stack_inputs<T>(ptrs);
    const auto y = stack_targets<T>(ptrs);
    const auto p = forward(params, x, jobs);
    sum += bce_loss(p, y) * static_cast<double>(y.data.size());
    count += y.data.size();
  }
  return sum / static_cast<double>(count);
}

template <class T>
TrainResult<T> train(ParamSet<T> params, std::span<const Sample> train_set,
                     std::span<const Sample> val_set, const TrainConfig& cfg) {
  cfg.validate();
  params.validate();
  if (train_set.empty()) throw InvalidArgument("training set is empty");
  if (val_set.empty()) throw InvalidArgument("validation set is empty");

  Rng rng(cfg.seed);
  Optimizer<T> opt(cfg.optimizer, cfg.learning_rate);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult<T> result{params, {}};
  double best = std::numeric_limits<double>::infinity();
  int wait = 0;
  std::vector<const Sample*> ptrs;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (cfg.shuffle) rng.shuffle(order);
    double sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      ptrs.clear();
      for (std::size_t i = b; i < e; ++i) ptrs.push_back(&train_set[order[i]]);
      const auto x = stack_inputs<T>(ptrs);
      const auto y = stack_targets<T>(ptrs);
      auto g = backward(params, x, y, cfg.jobs);
      if (!std::isfinite(g.loss)) {
        throw TrainingDiverged(epoch, "training loss is not finite at epoch " + std::to_string(epoch));
      }
      opt.step(params, g.grad);
      sum += g.loss * static_cast<double>(e - b);
    }
    const double train_loss = sum / static_cast<double>(order.size());
    const double val_loss = dataset_loss(params, val_set, 32, cfg.jobs);
    if (!std::isfinite(val_loss) || !params.all_finite()) {
      throw TrainingDiverged(epoch, "validation loss is not finite at epoch " + std::to_string(epoch));
    }
    result.log.epochs.push_back({epoch, train_loss, val_loss});
    result.log.stopped_epoch = epoch;

    if (val_loss < best) {
      best = val_loss;
      result.params = params;
      result.log.best_epoch = epoch;
      wait = 0;
    } else if (++wait >= cfg.patience) {
      result.log.stop_reason = StopReason::early_stop;
      return result;
    }
  }
  result.log.stop_reason = StopReason::max_epochs;
  return result;
}

BinaryGrid predict_mask(const ParamSet<float>& params, const Sample& sample, double threshold) {
  return predict_masks(params, std::span<const Sample>(&sample, 1), threshold).front();
}

std::vector<BinaryGrid> predict_masks(const ParamSet<float>& params, std::span<const Sample> samples,
                                      double threshold, int chunk, int jobs) {
  std::vector<BinaryGrid> out;
  out.reserve(samples.size());
  std::vector<const Sample*> ptrs;
  const int side = params.config.image_side;
  for (std::size_t b = 0; b < samples.size(); b += chunk) {
    const std::size_t e = std::min(samples.size(), b + static_cast<std::size_t>(chunk));
    ptrs.clear();
    for (std::size_t i = b; i < e; ++i) ptrs.push_back(&samples[i]);
    const auto p = forward(params, stack_inputs<float>(ptrs), jobs);
    for (int i = 0; i < p.n; ++i) {
      BinaryGrid g(side, side);
      const float* s = p.sample(i);
      for (std::size_t k = 0; k < g.data.size(); ++k) g.data[k] = static_cast<double>(s[k]) >= threshold;
      out.push_back(std::move(g));
    }
  }
  return out;
}

#define CTLAB_INSTANTIATE(T)                                                                       \
  template struct ParamSet<T>;                                                                     \
  template ParamSet<T> zeros_like(const ParamSet<T>&);                                             \
  template ParamSet<T> init_unet<T>(const UNetConfig&, std::uint64_t);                             \
  template Tensor<T> forward(const ParamSet<T>&, const Tensor<T>&, int);                           \
  template double bce_loss(const Tensor<T>&, const Tensor<T>&);                                    \
  template Gradient<T> backward(const ParamSet<T>&, const Tensor<T>&, const Tensor<T>&, int);      \
  template class Optimizer<T>;                                                                     \
  template TrainResult<T> train(ParamSet<T>, std::span<const Sample>, std::span<const Sample>,     \
                                const TrainConfig&);                                               \
  template Tensor<T> stack_inputs<T>(std::span<const Sample* const>);                              \
  template Tensor<T> stack_targets<T>(std::span<const Sample* const>);                             \
  template double dataset_loss(const ParamSet<T>&, std::span<const Sample>, int, int);

CTLAB_INSTANTIATE(float)
CTLAB_INSTANTIATE(double)

#undef CTLAB_INSTANTIATE

}  // namespace ctlab
