#pragma once

// One-third octave band analysis, short-time temporal envelopes and the
// energy-based frame VAD applied to training data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "tdse/dsp.hpp"
#include "tdse/error.hpp"

namespace tdse {

struct Band {
  int first_bin;  // 0-based DFT bin, inclusive
  int last_bin;   // 0-based DFT bin, inclusive
  double center_hz;
};

struct OctaveBandMap {
  std::vector<Band> bands;
  int dft_size = 0;
  int sample_rate = 0;

  int band_count() const { return static_cast<int>(bands.size()); }
};

// Bin k (0-based) belongs to band j when its center frequency k*fs/K lies in
// [cf(j) 2^(-1/6), cf(j) 2^(1/6)), cf(j) = f_start 2^(j/3).
inline OctaveBandMap ThirdOctaveBands(int sample_rate, int dft_size, int band_count,
                                      double f_start) {
  Require(sample_rate > 0 && dft_size > 0 && dft_size % 2 == 0 && band_count > 0 && f_start > 0,
          ErrorCode::kInvalidConfig, "band map parameters must be positive, dft size even");
  const double top = f_start * std::pow(2.0, (band_count - 1) / 3.0) * std::pow(2.0, 1.0 / 6.0);
  Require(top <= sample_rate / 2.0, ErrorCode::kNyquistExceeded,
          "upper band edge " + std::to_string(top) + " Hz exceeds Nyquist");
  OctaveBandMap map;
  map.dft_size = dft_size;
  map.sample_rate = sample_rate;
  const int bins = dft_size / 2 + 1;
  const double df = static_cast<double>(sample_rate) / dft_size;
  for (int j = 0; j < band_count; ++j) {
    const double cf = f_start * std::pow(2.0, j / 3.0);
    const double lo = cf * std::pow(2.0, -1.0 / 6.0);
    const double hi = cf * std::pow(2.0, 1.0 / 6.0);
    int first = -1;
    int last = -2;
    for (int k = 0; k < bins; ++k) {
      const double f = k * df;
      if (f >= lo && f < hi) {
        if (first < 0) first = k;
        last = k;
      }
    }
    Require(first >= 0 && first <= last, ErrorCode::kEmptyBand,
            "band " + std::to_string(j + 1) + " around " + std::to_string(cf) + " Hz has no DFT bin");
    map.bands.push_back({first, last, cf});
  }
  return map;
}

// a_j(m), stored J x M.
struct EnvelopeMatrix {
  Matrix values;
  int segment_len = 30;  // N

  int bands() const { return static_cast<int>(values.rows()); }
  int frames() const { return static_cast<int>(values.cols()); }
};

inline void CheckBandsFit(const AmplitudeSpectrogram& spec, const OctaveBandMap& bands) {
  Require(spec.bins() == bands.dft_size / 2 + 1, ErrorCode::kDimensionMismatch,
          "spectrogram has " + std::to_string(spec.bins()) + " bins, band map expects " +
              std::to_string(bands.dft_size / 2 + 1));
}

// a_j(m) = sqrt(sum_{k in band j} a(k,m)^2)
inline EnvelopeMatrix BandEnvelope(const AmplitudeSpectrogram& spec, const OctaveBandMap& bands,
                                   int segment_len = 30) {
  CheckBandsFit(spec, bands);
  const int M = spec.frame_count;
  EnvelopeMatrix env{Matrix(bands.band_count(), M), segment_len};
  for (int j = 0; j < bands.band_count(); ++j) {
    const Band& b = bands.bands[j];
    for (int m = 0; m < M; ++m) {
      double acc = 0.0;
      for (int k = b.first_bin; k <= b.last_bin; ++k) {
        const double a = spec.magnitudes(k, m);
        acc += a * a;
      }
      env.values(j, m) = std::sqrt(acc);
    }
  }
  return env;
}

// Given dL/da_j(m), returns dL/da(k,m) = dL/da_j(m) * a(k,m) / a_j(m); bands
// with zero energy pass no gradient.
inline Matrix BandEnvelopeBackward(const AmplitudeSpectrogram& spec, const OctaveBandMap& bands,
                                   const EnvelopeMatrix& env, const Matrix& grad_env) {
  CheckBandsFit(spec, bands);
  Matrix grad(spec.bins(), spec.frame_count);
  for (int j = 0; j < bands.band_count(); ++j) {
    const Band& b = bands.bands[j];
    for (int m = 0; m < spec.frame_count; ++m) {
      const double e = env.values(j, m);
      const double g = grad_env(j, m);
      if (e == 0.0 || g == 0.0) continue;
      for (int k = b.first_bin; k <= b.last_bin; ++k) grad(k, m) = g * spec.magnitudes(k, m) / e;
    }
  }
  return grad;
}

// Short-time temporal envelope [a_j(m-N+1), ..., a_j(m)] with 1-based band
// and frame indices; requires N <= frame <= M.
inline std::vector<double> EnvelopeSegment(const EnvelopeMatrix& env, int band, int frame) {
  const int N = env.segment_len;
  Require(band >= 1 && band <= env.bands(), ErrorCode::kOutOfRange,
          "band " + std::to_string(band) + " outside [1, " + std::to_string(env.bands()) + "]");
  Require(frame >= N && frame <= env.frames(), ErrorCode::kOutOfRange,
          "frame " + std::to_string(frame) + " outside [" + std::to_string(N) + ", " +
              std::to_string(env.frames()) + "]");
  std::vector<double> seg(N);
  for (int n = 0; n < N; ++n) seg[n] = env.values(band - 1, frame - N + n);
  return seg;
}

struct VadResult {
  Waveform trimmed;
  std::vector<std::uint8_t> keep;  // one flag per analysis frame
  int frame_len = 0;
};

// Splits x into non-overlapping frames of round(frame_ms*fs/1000) samples
// (final partial frame dropped) and removes frames whose energy is more than
// threshold_db below the most energetic frame.
inline VadResult VadTrim(const Waveform& x, double frame_ms = 25.0, double threshold_db = 40.0) {
  Require(!x.empty(), ErrorCode::kSignalTooShort, "empty waveform");
  const int frame_len = static_cast<int>(std::lround(frame_ms * x.sample_rate / 1000.0));
  Require(frame_len >= 1, ErrorCode::kInvalidConfig, "VAD frame length must be at least one sample");
  const std::size_t frames = x.size() / frame_len;
  Require(frames >= 1, ErrorCode::kSignalTooShort, "waveform shorter than one VAD frame");
  std::vector<double> energy_db(frames);
  double max_db = -std::numeric_limits<double>::infinity();
  for (std::size_t f = 0; f < frames; ++f) {
    double e = 0.0;
    for (int n = 0; n < frame_len; ++n) {
      const double s = x.samples[f * frame_len + n];
      e += s * s;
    }
    energy_db[f] = 10.0 * std::log10(std::max(e, 1e-300));
    max_db = std::max(max_db, energy_db[f]);
  }
  VadResult r;
  r.frame_len = frame_len;
  r.keep.resize(frames);
  r.trimmed.sample_rate = x.sample_rate;
  for (std::size_t f = 0; f < frames; ++f) {
    r.keep[f] = energy_db[f] >= max_db - threshold_db ? 1 : 0;
    if (r.keep[f])
      r.trimmed.samples.insert(r.trimmed.samples.end(), x.samples.begin() + f * frame_len,
                               x.samples.begin() + (f + 1) * frame_len);
  }
  return r;
}

// Applies a mask from VadTrim to a paired signal (e.g. the noisy mixture).
inline Waveform ApplyVadMask(const Waveform& y, std::span<const std::uint8_t> keep, int frame_len) {
  Require(y.size() >= keep.size() * static_cast<std::size_t>(frame_len), ErrorCode::kLengthMismatch,
          "paired signal shorter than the masked region");
  Waveform out;
  out.sample_rate = y.sample_rate;
  for (std::size_t f = 0; f < keep.size(); ++f)
    if (keep[f])
      out.samples.insert(out.samples.end(), y.samples.begin() + f * frame_len,
                         y.samples.begin() + (f + 1) * frame_len);
  return out;
}

}  // namespace tdse
