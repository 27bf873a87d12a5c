#pragma once

// Fully convolutional encoder/decoder over raw waveforms: strided encoder,
// nearest-neighbour upsampling decoder, skip concatenation, PReLU, inverted
// dropout. Hand-written forward and backward passes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tdse/dsp.hpp"
#include "tdse/error.hpp"

namespace tdse {

enum class LayerMode { kEncodeStride, kDecodeUpsample, kPlain };

struct ConvLayerSpec {
  int in_channels = 1;
  int out_channels = 1;
  int stride = 1;
  int filter_len = 11;
  LayerMode mode = LayerMode::kPlain;
  int skip_from = -1;  // 0-based index of an earlier layer whose output is appended to the input
};

struct ModelConfig {
  std::vector<ConvLayerSpec> layers;
  std::size_t input_len = 38656;
  double dropout_rate = 0.2;
  std::vector<int> dropout_after;  // 1-based layer numbers

  int depth() const { return static_cast<int>(layers.size()); }
};

// Channels of layer l's input that come from the previous layer (the rest
// come from the skip source).
inline int MainInputChannels(const ModelConfig& cfg, int l) {
  return l == 0 ? 1 : cfg.layers[l - 1].out_channels;
}

// Checks channel bookkeeping, strides and lengths; returns per-layer output lengths.
inline std::vector<std::size_t> ValidateConfig(const ModelConfig& cfg) {
  Require(!cfg.layers.empty(), ErrorCode::kInvalidConfig, "model has no layers");
  Require(cfg.input_len > 0, ErrorCode::kInvalidConfig, "input length must be positive");
  Require(cfg.dropout_rate >= 0.0 && cfg.dropout_rate < 1.0, ErrorCode::kInvalidConfig,
          "dropout rate must be in [0, 1)");
  std::vector<std::size_t> len(cfg.layers.size());
  std::size_t cur = cfg.input_len;
  for (int l = 0; l < cfg.depth(); ++l) {
    const ConvLayerSpec& s = cfg.layers[l];
    const std::string where = "layer " + std::to_string(l + 1);
    Require(s.filter_len >= 1 && s.filter_len % 2 == 1, ErrorCode::kInvalidConfig, where + ": filter length must be odd");
    Require(s.in_channels >= 1 && s.out_channels >= 1, ErrorCode::kInvalidConfig, where + ": channel counts must be positive");
    switch (s.mode) {
      case LayerMode::kEncodeStride:
        Require(s.stride == 1 || s.stride == 2, ErrorCode::kInvalidConfig, where + ": stride must be 1 or 2");
        if (s.stride == 2) {
          Require(cur % 2 == 0, ErrorCode::kInvalidConfig,
                  where + ": input length " + std::to_string(cur) + " is not divisible by the stride");
          cur /= 2;
        }
        break;
      case LayerMode::kDecodeUpsample:
        Require(s.stride == 1, ErrorCode::kInvalidConfig, where + ": upsampling layers use stride 1");
        cur *= 2;
        break;
      case LayerMode::kPlain:
        Require(s.stride == 1, ErrorCode::kInvalidConfig, where + ": plain layers use stride 1");
        break;
    }
    int expect_in = MainInputChannels(cfg, l);
    if (s.skip_from >= 0) {
      Require(s.skip_from < l, ErrorCode::kInvalidConfig, where + ": skip source must be an earlier layer");
      Require(s.mode != LayerMode::kEncodeStride || s.stride == 1, ErrorCode::kInvalidConfig,
              where + ": skip concatenation on a strided layer");
      Require(len[s.skip_from] == cur, ErrorCode::kInvalidConfig,
              where + ": skip source length " + std::to_string(len[s.skip_from]) + " differs from " + std::to_string(cur));
      expect_in += cfg.layers[s.skip_from].out_channels;
    }
    Require(s.in_channels == expect_in, ErrorCode::kInvalidConfig,
            where + ": declares " + std::to_string(s.in_channels) + " input channels, wiring gives " +
                std::to_string(expect_in));
    len[l] = cur;
  }
  Require(cur == cfg.input_len, ErrorCode::kInvalidConfig, "output length differs from input length");
  Require(cfg.layers.back().out_channels == 1, ErrorCode::kInvalidConfig, "last layer must have one output channel");
  for (int d : cfg.dropout_after)
    Require(d >= 1 && d <= cfg.depth(), ErrorCode::kInvalidConfig, "dropout layer " + std::to_string(d) + " out of range");
  return len;
}

// Eighteen layers: nine encoder layers (stride 1, then eight stride-2 layers
// down to L/256) and nine decoder layers (eight upsampling layers back to L,
// then one plain output layer). Skip pairing, chosen so the concatenated
// widths are 512 at layers 10-11 and 256/128 where listed:
//   10 <- 8, 11 <- 7, 13 <- 5, 14 <- 4, 16 <- 2, 17 <- 1, 18 <- 1
// Layers 12 and 15 change width (256->128, 128->64) without a skip.
inline ModelConfig FullConfig(std::size_t input_len = 38656) {
  using M = LayerMode;
  ModelConfig c;
  c.input_len = input_len;
  c.layers = {
      {1, 64, 1, 11, M::kEncodeStride, -1},       // 1
      {64, 64, 2, 11, M::kEncodeStride, -1},      // 2
      {64, 64, 2, 11, M::kEncodeStride, -1},      // 3
      {64, 128, 2, 11, M::kEncodeStride, -1},     // 4
      {128, 128, 2, 11, M::kEncodeStride, -1},    // 5
      {128, 128, 2, 11, M::kEncodeStride, -1},    // 6
      {128, 256, 2, 11, M::kEncodeStride, -1},    // 7
      {256, 256, 2, 11, M::kEncodeStride, -1},    // 8
      {256, 256, 2, 11, M::kEncodeStride, -1},    // 9  (L/256)
      {512, 256, 1, 11, M::kDecodeUpsample, 7},   // 10 (L/128)
      {512, 256, 1, 11, M::kDecodeUpsample, 6},   // 11 (L/64)
      {256, 128, 1, 11, M::kDecodeUpsample, -1},  // 12 (L/32)
      {256, 128, 1, 11, M::kDecodeUpsample, 4},   // 13 (L/16)
      {256, 128, 1, 11, M::kDecodeUpsample, 3},   // 14 (L/8)
      {128, 64, 1, 11, M::kDecodeUpsample, -1},   // 15 (L/4)
      {128, 64, 1, 11, M::kDecodeUpsample, 1},    // 16 (L/2)
      {128, 64, 1, 11, M::kDecodeUpsample, 0},    // 17 (L)
      {128, 1, 1, 11, M::kPlain, 0},              // 18
  };
  c.dropout_rate = 0.2;
  c.dropout_after = {3, 6, 9, 12, 15};
  ValidateConfig(c);
  return c;
}

// Symmetric U-Net with widths w[0..D]: a stride-1 input layer to w[0], D
// stride-2 layers, D upsampling layers each concatenating the encoder output
// of matching resolution, and a plain output layer fed by the decoder output
// and the first encoder layer.
inline ModelConfig CompactConfig(std::size_t input_len, const std::vector<int>& widths, int filter_len = 11,
                                 double dropout_rate = 0.0) {
  using M = LayerMode;
  Require(!widths.empty(), ErrorCode::kInvalidConfig, "compact model needs at least one width");
  const int D = static_cast<int>(widths.size()) - 1;
  ModelConfig c;
  c.input_len = input_len;
  c.dropout_rate = dropout_rate;
  c.layers.push_back({1, widths[0], 1, filter_len, M::kEncodeStride, -1});
  for (int i = 1; i <= D; ++i) c.layers.push_back({widths[i - 1], widths[i], 2, filter_len, M::kEncodeStride, -1});
  int prev = widths[D];
  for (int i = D; i >= 1; --i) {
    c.layers.push_back({prev + widths[i - 1], widths[i - 1], 1, filter_len, M::kDecodeUpsample, i - 1});
    prev = widths[i - 1];
  }
  c.layers.push_back({prev + widths[0], 1, 1, filter_len, M::kPlain, 0});
  ValidateConfig(c);
  return c;
}

inline std::size_t ParamCount(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const ConvLayerSpec& s : cfg.layers)
    n += static_cast<std::size_t>(s.out_channels) * s.in_channels * s.filter_len + 2 * s.out_channels;
  return n;
}

// Receptive field of the encoder path (every layer before the first
// upsampling layer): 1 + sum (filter_len - 1) * product of earlier strides.
inline std::size_t ReceptiveField(const ModelConfig& cfg) {
  std::size_t rf = 1, jump = 1;
  for (const ConvLayerSpec& s : cfg.layers) {
    if (s.mode == LayerMode::kDecodeUpsample) break;
    rf += static_cast<std::size_t>(s.filter_len - 1) * jump;
    jump *= s.stride;
  }
  return rf;
}

namespace detail {

struct Span {
  long long lo, hi;  // inclusive; empty when lo > hi
  bool empty() const { return lo > hi; }
};

inline Span Hull(Span a, Span b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  return {std::min(a.lo, b.lo), std::max(a.hi, b.hi)};
}

inline long long FloorDiv(long long a, long long b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline long long CeilDiv(long long a, long long b) { return -FloorDiv(-a, b); }

}  // namespace detail

// Span of output samples that an impulse at input position p can reach, by
// interval propagation through every layer (clipped to the signal).
inline std::pair<long long, long long> ImpulseCone(const ModelConfig& cfg, std::size_t p) {
  const auto len = ValidateConfig(cfg);
  std::vector<detail::Span> out(cfg.layers.size());
  detail::Span prev{static_cast<long long>(p), static_cast<long long>(p)};
  for (int l = 0; l < cfg.depth(); ++l) {
    const ConvLayerSpec& s = cfg.layers[l];
    detail::Span in = prev;
    if (s.mode == LayerMode::kDecodeUpsample && !in.empty()) in = {2 * in.lo, 2 * in.hi + 1};
    if (s.skip_from >= 0) in = detail::Hull(in, out[s.skip_from]);
    const long long pad = (s.filter_len - 1) / 2;
    detail::Span o{1, 0};
    if (!in.empty()) {
      o.lo = std::max<long long>(0, detail::CeilDiv(in.lo - (s.filter_len - 1) + pad, s.stride));
      o.hi = std::min<long long>(static_cast<long long>(len[l]) - 1, detail::FloorDiv(in.hi + pad, s.stride));
    }
    out[l] = o;
    prev = o;
  }
  return {prev.lo, prev.hi};
}

// Widest impulse cone of the full network over all alignments of a centred
// impulse; includes the decoder's convolutions, unlike ReceptiveField.
inline std::size_t OutputReceptiveField(const ModelConfig& cfg) {
  std::size_t period = 1;
  for (const ConvLayerSpec& s : cfg.layers) period *= s.stride;
  std::size_t widest = 0;
  for (std::size_t r = 0; r < period; ++r) {
    const auto [lo, hi] = ImpulseCone(cfg, cfg.input_len / 2 + r);
    if (hi >= lo) widest = std::max<std::size_t>(widest, static_cast<std::size_t>(hi - lo + 1));
  }
  return widest;
}

struct LayerParams {
  std::vector<double> weight;  // [out][in][tap]
  std::vector<double> bias;    // [out]
  std::vector<double> slope;   // [out], PReLU
};

struct ModelParams {
  ModelConfig config;
  std::vector<LayerParams> layers;

  std::vector<std::span<double>> Tensors() {
    std::vector<std::span<double>> t;
    for (LayerParams& p : layers) {
      t.emplace_back(p.weight);
      t.emplace_back(p.bias);
      t.emplace_back(p.slope);
    }
    return t;
  }
  std::vector<std::span<const double>> Tensors() const {
    std::vector<std::span<const double>> t;
    for (const LayerParams& p : layers) {
      t.emplace_back(p.weight);
      t.emplace_back(p.bias);
      t.emplace_back(p.slope);
    }
    return t;
  }
  std::size_t size() const {
    std::size_t n = 0;
    for (auto t : Tensors()) n += t.size();
    return n;
  }
};

// Same shapes as `cfg`, all zero.
inline ModelParams ZeroParams(const ModelConfig& cfg) {
  ValidateConfig(cfg);
  ModelParams p;
  p.config = cfg;
  for (const ConvLayerSpec& s : cfg.layers) {
    LayerParams lp;
    lp.weight.assign(static_cast<std::size_t>(s.out_channels) * s.in_channels * s.filter_len, 0.0);
    lp.bias.assign(s.out_channels, 0.0);
    lp.slope.assign(s.out_channels, 0.0);
    p.layers.push_back(std::move(lp));
  }
  return p;
}

// Filters ~ U(-b, b) with b = sqrt(6 / fan_in), fan_in = in_channels * filter_len;
// zero biases; PReLU slopes 0.25.
inline ModelParams InitParams(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = ZeroParams(cfg);
  std::mt19937_64 rng(seed);
  for (int l = 0; l < cfg.depth(); ++l) {
    const ConvLayerSpec& s = cfg.layers[l];
    const double bound = std::sqrt(6.0 / (s.in_channels * s.filter_len));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& w : p.layers[l].weight) w = u(rng);
    std::fill(p.layers[l].slope.begin(), p.layers[l].slope.end(), 0.25);
  }
  return p;
}

inline void CheckParams(const ModelParams& p) {
  ValidateConfig(p.config);
  Require(p.layers.size() == p.config.layers.size(), ErrorCode::kShapeMismatch, "parameter/config layer count differs");
  for (int l = 0; l < p.config.depth(); ++l) {
    const ConvLayerSpec& s = p.config.layers[l];
    const LayerParams& lp = p.layers[l];
    Require(lp.weight.size() == static_cast<std::size_t>(s.out_channels) * s.in_channels * s.filter_len &&
                lp.bias.size() == static_cast<std::size_t>(s.out_channels) &&
                lp.slope.size() == static_cast<std::size_t>(s.out_channels),
            ErrorCode::kShapeMismatch, "layer " + std::to_string(l + 1) + " tensor shapes differ from config");
  }
}

struct LayerCache {
  std::vector<double> input;     // [in][len_in] after upsampling and concatenation
  std::vector<double> preact;    // [out][len]
  std::vector<double> output;    // [out][len] after PReLU and dropout
  std::vector<double> mask;      // dropout scale per element, empty when inactive
  std::size_t len_in = 0, len = 0;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  std::size_t input_len = 0;
};

namespace detail {

// Convolutions run as correlations over polyphase, zero-margined copies of
// the input: x[c][i*s + q] becomes row (c*s + q mod s) at offset i + q div s,
// so every tap reads a contiguous run.
struct Tap {
  int row;
  int offset;
  std::size_t widx;
};

struct Padded {
  std::vector<double> data;
  std::size_t len = 0, stride = 0;
  int margin = 0;
  const double* row(int r) const { return data.data() + r * stride + margin; }
};

inline void PadPhases(const double* x, int channels, std::size_t len, int s, int margin, Padded& p) {
  p.len = len / s;
  p.margin = margin;
  p.stride = p.len + 2 * static_cast<std::size_t>(margin);
  p.data.assign(static_cast<std::size_t>(channels) * s * p.stride, 0.0);
  for (int c = 0; c < channels; ++c)
    for (int ph = 0; ph < s; ++ph) {
      double* dst = p.data.data() + (c * s + ph) * p.stride + margin;
      const double* src = x + c * len + ph;
      for (std::size_t m = 0; m < p.len; ++m) dst[m] = src[m * s];
    }
}

inline constexpr std::size_t kBlock = 256;

typedef double Vec8 __attribute__((vector_size(64)));

// out[o][i] += sum_tap W[o*ostride + tap.widx] * in.row(tap.row)[i + tap.offset], i < n
inline void Correlate(int n_out, std::size_t n, const Padded& in, const std::vector<Tap>& taps, const double* W,
                      std::size_t ostride, double* out) {
  alignas(64) double acc[4][kBlock];
  for (std::size_t i0 = 0; i0 < n; i0 += kBlock) {
    const std::size_t nb = std::min(kBlock, n - i0);
    for (int o0 = 0; o0 < n_out; o0 += 4) {
      const int ko = std::min(4, n_out - o0);
      for (int k = 0; k < ko; ++k) std::copy(out + (o0 + k) * n + i0, out + (o0 + k) * n + i0 + nb, acc[k]);
      for (const Tap& tap : taps) {
        const double* x = in.row(tap.row) + i0 + tap.offset;
        if (ko == 4) {
          const double w0 = W[(o0 + 0) * ostride + tap.widx], w1 = W[(o0 + 1) * ostride + tap.widx];
          const double w2 = W[(o0 + 2) * ostride + tap.widx], w3 = W[(o0 + 3) * ostride + tap.widx];
          for (std::size_t j = 0; j < nb; ++j) {
            const double v = x[j];
            acc[0][j] += w0 * v;
            acc[1][j] += w1 * v;
            acc[2][j] += w2 * v;
            acc[3][j] += w3 * v;
          }
        } else {
          for (int k = 0; k < ko; ++k) {
            const double w = W[(o0 + k) * ostride + tap.widx];
            for (std::size_t j = 0; j < nb; ++j) acc[k][j] += w * x[j];
          }
        }
      }
      for (int k = 0; k < ko; ++k) std::copy(acc[k], acc[k] + nb, out + (o0 + k) * n + i0);
    }
  }
}

// G[o*ostride + tap.widx] += sum_{i<n} g[o][i] * in.row(tap.row)[i + tap.offset]
// Vectorised across output channels: g is transposed to [i][o] and each pass
// keeps a 4-tap by 8-channel block of sums in registers.
inline void CorrelateWeights(int n_out, std::size_t n, const Padded& in, const std::vector<Tap>& taps, const double* g,
                             std::size_t ostride, double* G) {
  constexpr int OB = 8, TB = 4;
  const int opad = (n_out + OB - 1) / OB * OB;
  std::vector<double> gt(n * opad, 0.0);
  for (int o = 0; o < n_out; ++o)
    for (std::size_t i = 0; i < n; ++i) gt[i * opad + o] = g[o * n + i];
  for (int o0 = 0; o0 < opad; o0 += OB) {
    const int ko = std::min(OB, n_out - o0);
    for (std::size_t t0 = 0; t0 < taps.size(); t0 += TB) {
      const int kt = static_cast<int>(std::min<std::size_t>(TB, taps.size() - t0));
      const double* x[TB];
      for (int b = 0; b < TB; ++b) {
        const Tap& tap = taps[t0 + std::min(b, kt - 1)];
        x[b] = in.row(tap.row) + tap.offset;
      }
      Vec8 a0 = {}, a1 = {}, a2 = {}, a3 = {};
      const double* gi = gt.data() + o0;
      for (std::size_t i = 0; i < n; ++i, gi += opad) {
        Vec8 gv;
        std::memcpy(&gv, gi, sizeof gv);
        a0 += x[0][i] * gv;
        a1 += x[1][i] * gv;
        a2 += x[2][i] * gv;
        a3 += x[3][i] * gv;
      }
      const Vec8 acc[TB] = {a0, a1, a2, a3};
      for (int b = 0; b < kt; ++b)
        for (int k = 0; k < ko; ++k) G[(o0 + k) * ostride + taps[t0 + b].widx] += acc[b][k];
    }
  }
}

inline int PosMod(int a, int m) { return ((a % m) + m) % m; }

// out[o][i] = b[o] + sum_c sum_t w[o][c][t] in[c][i*s + t - pad], zero padded.
inline void ConvForward(const ConvLayerSpec& s, const LayerParams& p, const std::vector<double>& in, std::size_t len_in,
                        std::size_t len, std::vector<double>& out) {
  const int K = s.filter_len, pad = (K - 1) / 2, st = s.stride;
  Padded x;
  PadPhases(in.data(), s.in_channels, len_in, st, pad + 1, x);
  std::vector<Tap> taps;
  for (int c = 0; c < s.in_channels; ++c)
    for (int t = 0; t < K; ++t) {
      const int q = t - pad, ph = PosMod(q, st);
      taps.push_back({c * st + ph, (q - ph) / st, static_cast<std::size_t>(c) * K + t});
    }
  out.resize(static_cast<std::size_t>(s.out_channels) * len);
  for (int o = 0; o < s.out_channels; ++o) std::fill(out.begin() + o * len, out.begin() + (o + 1) * len, p.bias[o]);
  Correlate(s.out_channels, len, x, taps, p.weight.data(), static_cast<std::size_t>(s.in_channels) * K, out.data());
}

inline void ConvBackward(const ConvLayerSpec& s, const LayerParams& p, const std::vector<double>& in, std::size_t len_in,
                         std::size_t len, const std::vector<double>& gz, LayerParams& g, std::vector<double>& gin) {
  const int K = s.filter_len, pad = (K - 1) / 2, st = s.stride, C = s.in_channels, O = s.out_channels;
  for (int o = 0; o < O; ++o) {
    double gb = 0.0;
    for (std::size_t i = 0; i < len; ++i) gb += gz[o * len + i];
    g.bias[o] += gb;
  }
  Padded x;
  PadPhases(in.data(), C, len_in, st, pad + 1, x);
  std::vector<Tap> taps;
  for (int c = 0; c < C; ++c)
    for (int t = 0; t < K; ++t) {
      const int q = t - pad, ph = PosMod(q, st);
      taps.push_back({c * st + ph, (q - ph) / st, static_cast<std::size_t>(c) * K + t});
    }
  CorrelateWeights(O, len, x, taps, gz.data(), static_cast<std::size_t>(C) * K, g.weight.data());

  // gin[c][m*s + ph] = sum_o sum_{t: q = ph mod s} w[o][c][t] gz[o][m - (q - ph)/s]
  Padded gp;
  PadPhases(gz.data(), O, len, 1, pad + 1, gp);
  gin.assign(static_cast<std::size_t>(C) * len_in, 0.0);
  std::vector<double> phase(static_cast<std::size_t>(C) * len);
  for (int ph = 0; ph < st; ++ph) {
    std::vector<Tap> back;
    for (int o = 0; o < O; ++o)
      for (int t = 0; t < K; ++t) {
        const int q = t - pad;
        if (PosMod(q - ph, st) != 0) continue;
        back.push_back({o, -(q - ph) / st, static_cast<std::size_t>(o) * C * K + t});
      }
    std::fill(phase.begin(), phase.end(), 0.0);
    Correlate(C, len, gp, back, p.weight.data(), K, phase.data());
    for (int c = 0; c < C; ++c)
      for (std::size_t m = 0; m < len; ++m) gin[c * len_in + m * st + ph] = phase[c * len + m];
  }
}

inline std::uint64_t DropoutSeed(std::uint64_t seed, int layer) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(layer + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// x_hat = f(y; params). In training mode dropout masks are drawn from `seed`;
// inference ignores the seed. When `cache` is given, everything backward
// needs is stored in it.
inline Waveform Forward(const ModelParams& params, const Waveform& y, bool training, std::uint64_t seed,
                        ForwardCache* cache = nullptr) {
  const ModelConfig& cfg = params.config;
  CheckParams(params);
  Require(y.size() == cfg.input_len, ErrorCode::kShapeMismatch,
          "input has " + std::to_string(y.size()) + " samples, model expects " + std::to_string(cfg.input_len));
  const auto lens = ValidateConfig(cfg);
  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  fc.layers.assign(cfg.layers.size(), {});
  fc.input_len = cfg.input_len;
  std::size_t prev_len = cfg.input_len;
  for (int l = 0; l < cfg.depth(); ++l) {
    const ConvLayerSpec& s = cfg.layers[l];
    LayerCache& lc = fc.layers[l];
    const std::vector<double>& prev = l == 0 ? y.samples : fc.layers[l - 1].output;
    const int main_ch = MainInputChannels(cfg, l);
    std::size_t len_in = prev_len;
    if (s.mode == LayerMode::kDecodeUpsample) len_in *= 2;
    lc.len_in = len_in;
    lc.len = lens[l];
    lc.input.resize(static_cast<std::size_t>(s.in_channels) * len_in);
    for (int c = 0; c < main_ch; ++c) {
      const double* src = prev.data() + c * prev_len;
      double* dst = lc.input.data() + c * len_in;
      if (s.mode == LayerMode::kDecodeUpsample) {
        for (std::size_t i = 0; i < prev_len; ++i) dst[2 * i] = dst[2 * i + 1] = src[i];
      } else {
        std::copy(src, src + prev_len, dst);
      }
    }
    if (s.skip_from >= 0) {
      const std::vector<double>& skip = fc.layers[s.skip_from].output;
      std::copy(skip.begin(), skip.end(), lc.input.begin() + static_cast<std::ptrdiff_t>(main_ch * len_in));
    }
    detail::ConvForward(s, params.layers[l], lc.input, len_in, lc.len, lc.preact);
    lc.output.resize(lc.preact.size());
    for (int o = 0; o < s.out_channels; ++o) {
      const double a = params.layers[l].slope[o];
      for (std::size_t i = 0; i < lc.len; ++i) {
        const double z = lc.preact[o * lc.len + i];
        lc.output[o * lc.len + i] = z > 0.0 ? z : a * z;
      }
    }
    lc.mask.clear();
    const bool drop = training && cfg.dropout_rate > 0.0 &&
                      std::find(cfg.dropout_after.begin(), cfg.dropout_after.end(), l + 1) != cfg.dropout_after.end();
    if (drop) {
      std::mt19937_64 rng(detail::DropoutSeed(seed, l));
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const double keep_scale = 1.0 / (1.0 - cfg.dropout_rate);
      lc.mask.resize(lc.output.size());
      for (std::size_t i = 0; i < lc.output.size(); ++i) {
        lc.mask[i] = u(rng) < cfg.dropout_rate ? 0.0 : keep_scale;
        lc.output[i] *= lc.mask[i];
      }
    }
    prev_len = lc.len;
    if (!cache && l > 0) {
      // Free what inference no longer needs, keeping skip sources.
      LayerCache& done = fc.layers[l - 1];
      bool is_skip_source = false;
      for (int k = l; k < cfg.depth(); ++k) is_skip_source |= cfg.layers[k].skip_from == l - 1;
      done.input.clear();
      done.preact.clear();
      if (!is_skip_source) done.output.clear();
    }
  }
  Waveform out;
  out.sample_rate = y.sample_rate;
  out.samples = fc.layers.back().output;
  return out;
}

struct BackwardResult {
  ModelParams grads;              // same shapes as the parameters
  std::vector<double> grad_input;  // d loss / d y
};

inline BackwardResult Backward(const ModelParams& params, const ForwardCache& cache, std::span<const double> grad_out) {
  const ModelConfig& cfg = params.config;
  CheckParams(params);
  Require(cache.layers.size() == cfg.layers.size() && cache.input_len == cfg.input_len, ErrorCode::kStaleCache,
          "forward cache does not match the model");
  for (int l = 0; l < cfg.depth(); ++l) {
    const LayerCache& lc = cache.layers[l];
    const ConvLayerSpec& s = cfg.layers[l];
    Require(lc.input.size() == static_cast<std::size_t>(s.in_channels) * lc.len_in &&
                lc.preact.size() == static_cast<std::size_t>(s.out_channels) * lc.len,
            ErrorCode::kStaleCache, "forward cache layer " + std::to_string(l + 1) + " has the wrong shape");
  }
  Require(grad_out.size() == cfg.input_len, ErrorCode::kShapeMismatch, "output gradient length differs from model output");

  BackwardResult r;
  r.grads = ZeroParams(cfg);
  std::vector<std::vector<double>> gout(cfg.layers.size());
  for (int l = 0; l < cfg.depth(); ++l) gout[l].assign(cache.layers[l].output.size(), 0.0);
  std::copy(grad_out.begin(), grad_out.end(), gout.back().begin());
  std::vector<double> gz, gin;
  for (int l = cfg.depth() - 1; l >= 0; --l) {
    const ConvLayerSpec& s = cfg.layers[l];
    const LayerCache& lc = cache.layers[l];
    const LayerParams& p = params.layers[l];
    LayerParams& g = r.grads.layers[l];
    gz.resize(lc.preact.size());
    for (int o = 0; o < s.out_channels; ++o) {
      const double a = p.slope[o];
      double ga = 0.0;
      for (std::size_t i = 0; i < lc.len; ++i) {
        const std::size_t k = o * lc.len + i;
        double gk = gout[l][k];
        if (!lc.mask.empty()) gk *= lc.mask[k];
        const double z = lc.preact[k];
        if (z > 0.0) {
          gz[k] = gk;
        } else {
          gz[k] = a * gk;
          ga += gk * z;
        }
      }
      g.slope[o] += ga;
    }
    detail::ConvBackward(s, p, lc.input, lc.len_in, lc.len, gz, g, gin);
    const int main_ch = MainInputChannels(cfg, l);
    if (s.skip_from >= 0) {
      std::vector<double>& dst = gout[s.skip_from];
      const double* src = gin.data() + main_ch * lc.len_in;
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    // gout[l - 1] may already hold skip contributions from later layers.
    std::vector<double>& gprev = l == 0 ? r.grad_input : gout[l - 1];
    const std::size_t prev_len = s.mode == LayerMode::kDecodeUpsample ? lc.len_in / 2 : lc.len_in;
    if (l == 0) gprev.assign(prev_len, 0.0);
    for (int c = 0; c < main_ch; ++c) {
      const double* src = gin.data() + c * lc.len_in;
      double* dst = gprev.data() + c * prev_len;
      if (s.mode == LayerMode::kDecodeUpsample) {
        for (std::size_t i = 0; i < prev_len; ++i) dst[i] += src[2 * i] + src[2 * i + 1];
      } else {
        for (std::size_t i = 0; i < prev_len; ++i) dst[i] += src[i];
      }
    }
  }
  return r;
}

// PReLU slopes set to 1 (the network becomes affine); dropout is off at inference.
inline ModelParams Linearized(ModelParams p) {
  for (LayerParams& lp : p.layers) std::fill(lp.slope.begin(), lp.slope.end(), 1.0);
  return p;
}

struct ImpulseSupport {
  std::size_t position = 0;
  long long first = -1, last = -1;  // nonzero output span, -1 when none
  std::size_t width() const { return first < 0 ? 0 : static_cast<std::size_t>(last - first + 1); }
};

// Response of the linearized model to a unit impulse at `position`, measured
// as forward(impulse) - forward(0) so biases cancel.
inline ImpulseSupport ProbeImpulse(const ModelParams& params, std::size_t position) {
  const ModelParams lin = Linearized(params);
  Waveform zero;
  zero.samples.assign(params.config.input_len, 0.0);
  Waveform imp = zero;
  Require(position < imp.size(), ErrorCode::kOutOfRange, "impulse position outside the input");
  imp.samples[position] = 1.0;
  const Waveform a = Forward(lin, imp, false, 0);
  const Waveform b = Forward(lin, zero, false, 0);
  ImpulseSupport s;
  s.position = position;
  for (std::size_t n = 0; n < a.size(); ++n) {
    if (a.samples[n] - b.samples[n] == 0.0) continue;
    if (s.first < 0) s.first = static_cast<long long>(n);
    s.last = static_cast<long long>(n);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints: "TDSECKPT", u32 version, config, tensors (raw little-endian
// doubles in declaration order), FNV-1a 64 checksum of all preceding bytes.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::uint64_t Fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void PutRaw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  template <typename T>
  T Get() {
    Require(pos_ + sizeof(T) <= b_.size(), ErrorCode::kParse, "checkpoint truncated");
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string EncodeCheckpoint(const ModelParams& p) {
  CheckParams(p);
  std::string out = "TDSECKPT";
  detail::PutRaw<std::uint32_t>(out, kCheckpointVersion);
  const ModelConfig& c = p.config;
  detail::PutRaw<std::uint64_t>(out, c.input_len);
  detail::PutRaw<double>(out, c.dropout_rate);
  detail::PutRaw<std::uint32_t>(out, static_cast<std::uint32_t>(c.dropout_after.size()));
  for (int d : c.dropout_after) detail::PutRaw<std::int32_t>(out, d);
  detail::PutRaw<std::uint32_t>(out, static_cast<std::uint32_t>(c.layers.size()));
  for (const ConvLayerSpec& s : c.layers) {
    for (int v : {s.in_channels, s.out_channels, s.stride, s.filter_len, static_cast<int>(s.mode), s.skip_from})
      detail::PutRaw<std::int32_t>(out, v);
  }
  for (auto t : p.Tensors()) {
    detail::PutRaw<std::uint64_t>(out, t.size());
    for (double v : t) detail::PutRaw<double>(out, v);
  }
  detail::PutRaw<std::uint64_t>(out, detail::Fnv1a(out));
  return out;
}

inline ModelParams DecodeCheckpoint(const std::string& bytes) {
  Require(bytes.size() >= 8 + 4 + 8 && bytes.compare(0, 8, "TDSECKPT") == 0, ErrorCode::kParse, "not a checkpoint");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  Require(detail::Fnv1a(bytes.substr(0, bytes.size() - 8)) == stored, ErrorCode::kChecksum, "checkpoint checksum mismatch");
  detail::Reader r(bytes);
  for (int i = 0; i < 8; ++i) r.Get<char>();
  const auto version = r.Get<std::uint32_t>();
  Require(version == kCheckpointVersion, ErrorCode::kParse, "unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.input_len = r.Get<std::uint64_t>();
  c.dropout_rate = r.Get<double>();
  const auto nd = r.Get<std::uint32_t>();
  for (std::uint32_t i = 0; i < nd; ++i) c.dropout_after.push_back(r.Get<std::int32_t>());
  const auto nl = r.Get<std::uint32_t>();
  Require(nl < 4096, ErrorCode::kParse, "implausible layer count");
  for (std::uint32_t i = 0; i < nl; ++i) {
    ConvLayerSpec s;
    s.in_channels = r.Get<std::int32_t>();
    s.out_channels = r.Get<std::int32_t>();
    s.stride = r.Get<std::int32_t>();
    s.filter_len = r.Get<std::int32_t>();
    const int mode = r.Get<std::int32_t>();
    Require(mode >= 0 && mode <= 2, ErrorCode::kParse, "bad layer mode");
    s.mode = static_cast<LayerMode>(mode);
    s.skip_from = r.Get<std::int32_t>();
    c.layers.push_back(s);
  }
  ModelParams p = ZeroParams(c);
  for (auto t : p.Tensors()) {
    Require(r.Get<std::uint64_t>() == t.size(), ErrorCode::kShapeMismatch, "checkpoint tensor size differs from config");
    for (double& v : t) v = r.Get<double>();
  }
  Require(r.pos() + 8 == bytes.size(), ErrorCode::kParse, "trailing bytes in checkpoint");
  return p;
}

inline void SaveCheckpoint(const ModelParams& p, const std::filesystem::path& path) {
  const std::string bytes = EncodeCheckpoint(p);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  Require(static_cast<bool>(f), ErrorCode::kIo, "cannot write " + path.string());
}

inline ModelParams LoadCheckpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  Require(static_cast<bool>(f), ErrorCode::kIo, "cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return DecodeCheckpoint(bytes);
}

}  // namespace tdse
