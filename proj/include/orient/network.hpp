#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "orient/random.hpp"
#include "orient/volume.hpp"

namespace orient {

struct Tensor3 {
  int channels = 0, height = 0, width = 0;
  std::vector<double> v;

  void resize(int c, int h, int w) {
    channels = c;
    height = h;
    width = w;
    v.assign(static_cast<std::size_t>(c) * h * w, 0.0);
  }

  double* plane(int c) { return v.data() + static_cast<std::size_t>(c) * height * width; }
  const double* plane(int c) const {
    return v.data() + static_cast<std::size_t>(c) * height * width;
  }
};

struct ConvLayerSpec {
  int in_channels = 1;
  int out_channels = 16;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  /// Average-pooling factor applied after the activation. Pooling prefilters
  /// before subsampling, which keeps the features far more stable under
  /// sub-stride shifts than strided convolution.
  int pool = 2;

  int conv_extent(int in_extent) const { return (in_extent + 2 * pad - kernel) / stride + 1; }

  int out_extent(int in_extent) const {
    const int c = conv_extent(in_extent);
    if (pool <= 1 || c < pool) return c;  // degenerate planes skip the pool
    return c / pool;
  }
};

/// Stack of strided convolution blocks followed by global average pooling.
/// Any input of at least min_input_size pixels per side maps to exactly
/// feature_dim() values.
struct NetworkArchitecture {
  std::vector<ConvLayerSpec> layers;
  int min_input_size = 8;

  /// Default feature extractor: 3x3 stride-2 blocks, channels 16/32/64/n_f.
  static NetworkArchitecture standard(int feature_dim = 64) {
    NetworkArchitecture a;
    a.layers = {{1, 16}, {16, 32}, {32, 64}, {64, feature_dim}};
    return a;
  }

  int feature_dim() const { return layers.back().out_channels; }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("NetworkArchitecture: no layers");
    if (layers.front().in_channels != 1)
      throw std::invalid_argument("NetworkArchitecture: first layer must take 1 channel");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& L = layers[i];
      if (L.out_channels < 1 || L.kernel < 1 || L.stride < 1 || L.pad < 0 || L.pool < 1)
        throw std::invalid_argument("NetworkArchitecture: bad layer geometry");
      if (i > 0 && L.in_channels != layers[i - 1].out_channels)
        throw std::invalid_argument("NetworkArchitecture: channel chain mismatch");
    }
  }
};

namespace detail {

/// Shifted softplus: log(1 + e^x) - log 2. A smooth rectifier that is 0 at 0,
/// so zero inputs propagate to zero features through zero-bias convolutions.
inline double rectifier(double x) {
  if (x > 30.0) return x - 0.6931471805599453;
  if (x < -30.0) return -0.6931471805599453;
  return std::log1p(std::exp(x)) - 0.6931471805599453;
}

/// Derivative recovered from the activation value a = rectifier(x):
/// sigmoid(x) = 1 - exp(-a) / 2.
inline double rectifier_derivative_from_activation(double a) {
  return std::max(0.0, 1.0 - 0.5 * std::exp(-a));
}

}  // namespace detail

/// Convolutional feature extractor with explicit parameters. Weight layout
/// per layer: [out_channel][in_channel][ky][kx], biases per out channel.
class EmbeddingNet {
 public:
  NetworkArchitecture arch;
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;

  /// Fan-in-scaled uniform weights, zero biases.
  static EmbeddingNet create(const NetworkArchitecture& arch, std::uint64_t seed) {
    arch.validate();
    EmbeddingNet net;
    net.arch = arch;
    net.weights.resize(arch.layers.size());
    net.biases.resize(arch.layers.size());
    for (std::size_t l = 0; l < arch.layers.size(); ++l) {
      const auto& L = arch.layers[l];
      const std::size_t n_w = static_cast<std::size_t>(L.out_channels) * L.in_channels *
                              L.kernel * L.kernel;
      const double fan_in = static_cast<double>(L.in_channels) * L.kernel * L.kernel;
      const double bound = std::sqrt(3.0 / fan_in);
      std::mt19937_64 rng = make_rng(seed, l);
      std::uniform_real_distribution<double> u(-bound, bound);
      net.weights[l].resize(n_w);
      for (double& w : net.weights[l]) w = u(rng);
      net.biases[l].assign(static_cast<std::size_t>(L.out_channels), 0.0);
    }
    return net;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }
};

/// Per-image activations kept for the backward pass. activations[0] is the
/// standardized input and activations[l + 1] the pooled output of layer l;
/// conv_outputs[l] holds layer l's post-activation maps before pooling.
struct ForwardWorkspace {
  std::vector<Tensor3> activations;
  std::vector<Tensor3> conv_outputs;
  std::vector<double> features;
};

/// Parameter-shaped gradient accumulator.
struct GradientBuffer {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;

  void init_like(const EmbeddingNet& net) {
    weights.resize(net.weights.size());
    biases.resize(net.biases.size());
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      weights[l].assign(net.weights[l].size(), 0.0);
      biases[l].assign(net.biases[l].size(), 0.0);
    }
  }

  void clear() {
    for (auto& w : weights) std::fill(w.begin(), w.end(), 0.0);
    for (auto& b : biases) std::fill(b.begin(), b.end(), 0.0);
  }

  void add(const GradientBuffer& o) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      for (std::size_t k = 0; k < weights[l].size(); ++k) weights[l][k] += o.weights[l][k];
      for (std::size_t k = 0; k < biases[l].size(); ++k) biases[l][k] += o.biases[l][k];
    }
  }
};

namespace detail {

inline void conv_forward(const ConvLayerSpec& L, const Tensor3& in,
                         std::span<const double> w, std::span<const double> b, Tensor3& out) {
  const int oh = L.conv_extent(in.height), ow = L.conv_extent(in.width);
  out.resize(L.out_channels, oh, ow);
  const int k = L.kernel, stride = L.stride, pad = L.pad;
  for (int oc = 0; oc < L.out_channels; ++oc) {
    double* op = out.plane(oc);
    for (std::size_t t = 0; t < static_cast<std::size_t>(oh) * ow; ++t) op[t] = b[oc];
    for (int ic = 0; ic < L.in_channels; ++ic) {
      const double* ip = in.plane(ic);
      const double* wp = w.data() + (static_cast<std::size_t>(oc) * L.in_channels + ic) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double wv = wp[ky * k + kx];
          if (wv == 0.0) continue;
          for (int y = 0; y < oh; ++y) {
            const int iy = y * stride - pad + ky;
            if (iy < 0 || iy >= in.height) continue;
            const double* irow = ip + static_cast<std::size_t>(iy) * in.width;
            double* orow = op + static_cast<std::size_t>(y) * ow;
            for (int x = 0; x < ow; ++x) {
              const int ix = x * stride - pad + kx;
              if (ix < 0 || ix >= in.width) continue;
              orow[x] += wv * irow[ix];
            }
          }
        }
      }
    }
    for (std::size_t t = 0; t < static_cast<std::size_t>(oh) * ow; ++t) op[t] = rectifier(op[t]);
  }
}

/// dOut holds dL/d(post-activation output) on entry; converted to dL/d(pre-activation)
/// in place, then distributed to input and parameter gradients.
inline void conv_backward(const ConvLayerSpec& L, const Tensor3& in, const Tensor3& out,
                          std::span<const double> w, Tensor3& d_out, Tensor3& d_in,
                          std::span<double> d_w, std::span<double> d_b) {
  const int oh = out.height, ow = out.width;
  const int k = L.kernel, stride = L.stride, pad = L.pad;
  d_in.resize(L.in_channels, in.height, in.width);
  for (int oc = 0; oc < L.out_channels; ++oc) {
    double* dop = d_out.plane(oc);
    const double* op = out.plane(oc);
    double db = 0.0;
    for (std::size_t t = 0; t < static_cast<std::size_t>(oh) * ow; ++t) {
      dop[t] *= rectifier_derivative_from_activation(op[t]);
      db += dop[t];
    }
    d_b[oc] += db;
    for (int ic = 0; ic < L.in_channels; ++ic) {
      const double* ip = in.plane(ic);
      double* dip = d_in.plane(ic);
      const std::size_t w_base = (static_cast<std::size_t>(oc) * L.in_channels + ic) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double wv = w[w_base + ky * k + kx];
          double dw = 0.0;
          for (int y = 0; y < oh; ++y) {
            const int iy = y * stride - pad + ky;
            if (iy < 0 || iy >= in.height) continue;
            const double* irow = ip + static_cast<std::size_t>(iy) * in.width;
            double* dirow = dip + static_cast<std::size_t>(iy) * in.width;
            const double* dorow = dop + static_cast<std::size_t>(y) * ow;
            for (int x = 0; x < ow; ++x) {
              const int ix = x * stride - pad + kx;
              if (ix < 0 || ix >= in.width) continue;
              dw += irow[ix] * dorow[x];
              dirow[ix] += wv * dorow[x];
            }
          }
          d_w[w_base + ky * k + kx] += dw;
        }
      }
    }
  }
}

inline void avg_pool_forward(int pool, const Tensor3& in, Tensor3& out) {
  if (pool <= 1 || in.height < pool || in.width < pool) {
    out = in;
    return;
  }
  const int oh = in.height / pool, ow = in.width / pool;
  out.resize(in.channels, oh, ow);
  const double inv = 1.0 / (pool * pool);
  for (int c = 0; c < in.channels; ++c) {
    const double* ip = in.plane(c);
    double* op = out.plane(c);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0;
        for (int dy = 0; dy < pool; ++dy)
          for (int dx = 0; dx < pool; ++dx)
            s += ip[static_cast<std::size_t>(y * pool + dy) * in.width + (x * pool + dx)];
        op[static_cast<std::size_t>(y) * ow + x] = s * inv;
      }
  }
}

inline void avg_pool_backward(int pool, const Tensor3& in, const Tensor3& d_out, Tensor3& d_in) {
  if (pool <= 1 || in.height < pool || in.width < pool) {
    d_in = d_out;
    return;
  }
  d_in.resize(in.channels, in.height, in.width);
  const int oh = d_out.height, ow = d_out.width;
  const double inv = 1.0 / (pool * pool);
  for (int c = 0; c < in.channels; ++c) {
    double* dip = d_in.plane(c);
    const double* dop = d_out.plane(c);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const double g = dop[static_cast<std::size_t>(y) * ow + x] * inv;
        for (int dy = 0; dy < pool; ++dy)
          for (int dx = 0; dx < pool; ++dx)
            dip[static_cast<std::size_t>(y * pool + dy) * in.width + (x * pool + dx)] = g;
      }
  }
}

inline void standardize_image(const ProjectionImage& p, Tensor3& out) {
  out.resize(1, p.height, p.width);
  const double n = static_cast<double>(p.values.size());
  double mean = 0;
  for (double x : p.values) mean += x;
  mean /= n;
  double var = 0;
  for (double x : p.values) var += (x - mean) * (x - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + 1e-12);
  for (std::size_t t = 0; t < p.values.size(); ++t) out.v[t] = (p.values[t] - mean) * inv;
}

}  // namespace detail

/// Forward pass retaining activations. Throws for undersized inputs.
inline void embed_forward(const EmbeddingNet& net, const ProjectionImage& p,
                          ForwardWorkspace& ws) {
  if (p.height < net.arch.min_input_size || p.width < net.arch.min_input_size)
    throw std::invalid_argument("embed: image smaller than the minimum supported size");
  const std::size_t n_layers = net.arch.layers.size();
  ws.activations.resize(n_layers + 1);
  ws.conv_outputs.resize(n_layers);
  detail::standardize_image(p, ws.activations[0]);
  for (std::size_t l = 0; l < n_layers; ++l) {
    detail::conv_forward(net.arch.layers[l], ws.activations[l], net.weights[l], net.biases[l],
                         ws.conv_outputs[l]);
    detail::avg_pool_forward(net.arch.layers[l].pool, ws.conv_outputs[l], ws.activations[l + 1]);
  }
  const Tensor3& last = ws.activations[n_layers];
  ws.features.assign(static_cast<std::size_t>(last.channels), 0.0);
  const double inv_hw = 1.0 / (static_cast<double>(last.height) * last.width);
  for (int c = 0; c < last.channels; ++c) {
    const double* plane = last.plane(c);
    double s = 0;
    for (std::size_t t = 0; t < static_cast<std::size_t>(last.height) * last.width; ++t)
      s += plane[t];
    ws.features[static_cast<std::size_t>(c)] = s * inv_hw;
  }
}

inline std::vector<double> embed(const EmbeddingNet& net, const ProjectionImage& p) {
  ForwardWorkspace ws;
  embed_forward(net, p, ws);
  return ws.features;
}

/// Backpropagates dL/dfeatures through the network of a completed forward
/// pass, accumulating parameter gradients into `grads`.
inline void embed_backward(const EmbeddingNet& net, const ForwardWorkspace& ws,
                           std::span<const double> d_features, GradientBuffer& grads) {
  const std::size_t n_layers = net.arch.layers.size();
  const Tensor3& last = ws.activations[n_layers];
  Tensor3 d_cur;
  d_cur.resize(last.channels, last.height, last.width);
  const double inv_hw = 1.0 / (static_cast<double>(last.height) * last.width);
  for (int c = 0; c < last.channels; ++c) {
    double* plane = d_cur.plane(c);
    const double g = d_features[static_cast<std::size_t>(c)] * inv_hw;
    for (std::size_t t = 0; t < static_cast<std::size_t>(last.height) * last.width; ++t)
      plane[t] = g;
  }
  Tensor3 d_prev, d_conv;
  for (std::size_t l = n_layers; l-- > 0;) {
    detail::avg_pool_backward(net.arch.layers[l].pool, ws.conv_outputs[l], d_cur, d_conv);
    detail::conv_backward(net.arch.layers[l], ws.activations[l], ws.conv_outputs[l],
                          net.weights[l], d_conv, d_prev, grads.weights[l], grads.biases[l]);
    std::swap(d_cur, d_prev);
  }
}

// ---------------------------------------------------------------------------
// Checkpoint: 8-byte magic, u32 format version, u64 JSON descriptor length,
// JSON descriptor, then per-layer little-endian float32 blobs (weights, then
// biases).

inline constexpr char kCheckpointMagic[8] = {'O', 'R', 'N', 'T', 'N', 'E', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const EmbeddingNet& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  nlohmann::json desc;
  desc["format_version"] = kCheckpointVersion;
  desc["min_input_size"] = net.arch.min_input_size;
  desc["layers"] = nlohmann::json::array();
  for (const auto& L : net.arch.layers)
    desc["layers"].push_back({{"in_channels", L.in_channels},
                              {"out_channels", L.out_channels},
                              {"kernel", L.kernel},
                              {"stride", L.stride},
                              {"pad", L.pad},
                              {"pool", L.pool}});
  const std::string text = desc.dump();
  out.write(kCheckpointMagic, 8);
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    std::vector<float> blob(net.weights[l].begin(), net.weights[l].end());
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size() * 4));
    std::vector<float> bias_blob(net.biases[l].begin(), net.biases[l].end());
    out.write(reinterpret_cast<const char*>(bias_blob.data()),
              static_cast<std::streamsize>(bias_blob.size() * 4));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline EmbeddingNet load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (version != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported format version in " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || len > (1u << 20)) throw std::runtime_error("load_checkpoint: bad descriptor length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json desc;
  try {
    desc = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("load_checkpoint: invalid descriptor: ") + e.what());
  }
  NetworkArchitecture arch;
  arch.min_input_size = desc.at("min_input_size").get<int>();
  for (const auto& jl : desc.at("layers"))
    arch.layers.push_back({jl.at("in_channels").get<int>(), jl.at("out_channels").get<int>(),
                           jl.at("kernel").get<int>(), jl.at("stride").get<int>(),
                           jl.at("pad").get<int>(), jl.at("pool").get<int>()});
  arch.validate();
  EmbeddingNet net;
  net.arch = arch;
  net.weights.resize(arch.layers.size());
  net.biases.resize(arch.layers.size());
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const auto& L = arch.layers[l];
    const std::size_t n_w =
        static_cast<std::size_t>(L.out_channels) * L.in_channels * L.kernel * L.kernel;
    std::vector<float> blob(n_w);
    in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(n_w * 4));
    net.weights[l].assign(blob.begin(), blob.end());
    std::vector<float> bias_blob(static_cast<std::size_t>(L.out_channels));
    in.read(reinterpret_cast<char*>(bias_blob.data()),
            static_cast<std::streamsize>(bias_blob.size() * 4));
    net.biases[l].assign(bias_blob.begin(), bias_blob.end());
  }
  if (!in) throw std::runtime_error("load_checkpoint: truncated parameter blobs in " + path);
  return net;
}

}  // namespace orient
