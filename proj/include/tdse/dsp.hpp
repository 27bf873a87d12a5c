#pragma once

// Framing, windowing and single-sided STFT amplitude analysis, plus the
// adjoint of the amplitude analysis used by the spectral losses.

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "tdse/error.hpp"

namespace tdse {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 10000;

  Waveform() = default;
  Waveform(std::vector<double> s, int rate) : samples(std::move(s)), sample_rate(rate) {}

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::span<const double> view() const { return samples; }
};

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

enum class WindowKind { kHann, kRectangular };

// Periodic Hann: w[n] = 0.5 - 0.5 cos(2 pi n / len).
inline std::vector<double> MakeWindow(WindowKind kind, int len) {
  std::vector<double> w(static_cast<std::size_t>(len), 1.0);
  if (kind == WindowKind::kHann) {
    for (int n = 0; n < len; ++n)
      w[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / len);
  }
  return w;
}

struct StftConfig {
  int dft_size = 256;  // K
  int hop = 128;       // I
  WindowKind window = WindowKind::kHann;
  // Analysis frame length; 0 means frame_len == dft_size. A shorter frame is
  // zero-padded to dft_size (e.g. 256-sample frames in a 512-point DFT).
  int frame_len = 0;

  int FrameLen() const { return frame_len == 0 ? dft_size : frame_len; }
  int Bins() const { return dft_size / 2 + 1; }

  void Validate() const {
    Require(dft_size > 0 && dft_size % 2 == 0, ErrorCode::kInvalidConfig,
            "dft size must be positive and even, got " + std::to_string(dft_size));
    Require(hop > 0, ErrorCode::kInvalidConfig, "hop must be positive");
    Require(FrameLen() > 0 && FrameLen() <= dft_size, ErrorCode::kInvalidConfig,
            "frame length must be in [1, dft size]");
    Require(hop <= FrameLen(), ErrorCode::kInvalidConfig,
            "hop " + std::to_string(hop) + " exceeds frame length " + std::to_string(FrameLen()));
  }
};

// Number of whole frames of frame_len samples at the given hop; trailing
// partial frames are dropped. For frame_len == 2 * hop this is floor(L/hop)-1.
inline int FrameCount(std::size_t length, int frame_len, int hop) {
  if (length < static_cast<std::size_t>(frame_len)) return 0;
  return static_cast<int>((length - frame_len) / hop) + 1;
}

// Returns a frame_len x M matrix whose column m holds frame m (0-based
// storage; frame m covers samples [m*hop, m*hop + frame_len)).
inline Matrix FrameSignal(std::span<const double> x, int frame_len, int hop) {
  Require(frame_len > 0 && hop > 0, ErrorCode::kInvalidConfig, "frame length and hop must be positive");
  const int frames = FrameCount(x.size(), frame_len, hop);
  Require(frames >= 1, ErrorCode::kSignalTooShort,
          "signal of " + std::to_string(x.size()) + " samples has no full frame of " +
              std::to_string(frame_len));
  Matrix out(frame_len, frames);
  for (int m = 0; m < frames; ++m)
    for (int n = 0; n < frame_len; ++n) out(n, m) = x[static_cast<std::size_t>(m) * hop + n];
  return out;
}

// Unnormalized complex DFT of a fixed size. Power-of-two sizes use an
// iterative radix-2 transform; other sizes fall back to the direct sum.
// inverse=true uses the +i exponent and still does not scale by 1/size.
class FftPlan {
 public:
  explicit FftPlan(int size) : size_(size) {
    Require(size > 0, ErrorCode::kInvalidConfig, "fft size must be positive");
    pow2_ = (size & (size - 1)) == 0;
    const std::size_t table = pow2_ ? static_cast<std::size_t>(size / 2) : static_cast<std::size_t>(size);
    twiddle_.resize(table);
    for (std::size_t k = 0; k < table; ++k) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k) / size;
      twiddle_[k] = {std::cos(ang), std::sin(ang)};
    }
    if (pow2_) {
      bitrev_.resize(size);
      int bits = 0;
      while ((1 << bits) < size) ++bits;
      for (int i = 0; i < size; ++i) {
        int r = 0;
        for (int b = 0; b < bits; ++b)
          if (i & (1 << b)) r |= 1 << (bits - 1 - b);
        bitrev_[i] = r;
      }
    }
  }

  int size() const { return size_; }

  void Transform(std::span<std::complex<double>> data, bool inverse) const {
    Require(static_cast<int>(data.size()) == size_, ErrorCode::kDimensionMismatch, "fft buffer size");
    if (pow2_) {
      Radix2(data, inverse);
    } else {
      Direct(data, inverse);
    }
  }

 private:
  void Radix2(std::span<std::complex<double>> a, bool inverse) const {
    const int n = size_;
    for (int i = 0; i < n; ++i)
      if (i < bitrev_[i]) std::swap(a[i], a[bitrev_[i]]);
    for (int len = 2; len <= n; len <<= 1) {
      const int half = len / 2;
      const int step = n / len;
      for (int start = 0; start < n; start += len) {
        for (int j = 0; j < half; ++j) {
          std::complex<double> w = twiddle_[static_cast<std::size_t>(j) * step];
          if (inverse) w = std::conj(w);
          const std::complex<double> u = a[start + j];
          const std::complex<double> v = a[start + j + half] * w;
          a[start + j] = u + v;
          a[start + j + half] = u - v;
        }
      }
    }
  }

  void Direct(std::span<std::complex<double>> a, bool inverse) const {
    const std::size_t n = a.size();
    std::vector<std::complex<double>> out(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::complex<double> acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        std::complex<double> w = twiddle_[(k * t) % n];
        if (inverse) w = std::conj(w);
        acc += a[t] * w;
      }
      out[k] = acc;
    }
    std::copy(out.begin(), out.end(), a.begin());
  }

  int size_;
  bool pow2_ = false;
  std::vector<std::complex<double>> twiddle_;
  std::vector<int> bitrev_;
};

// Magnitudes a(k,m), stored (K/2+1) x M.
struct AmplitudeSpectrogram {
  Matrix magnitudes;
  StftConfig config;
  int frame_count = 0;

  int bins() const { return static_cast<int>(magnitudes.rows()); }
};

// Single-sided STFT of one signal, keeping the complex bins so the
// amplitude analysis can be back-propagated.
class StftAnalysis {
 public:
  StftAnalysis(std::span<const double> x, const StftConfig& cfg)
      : cfg_(cfg), length_(x.size()) {
    cfg_.Validate();
    const int frame_len = cfg_.FrameLen();
    frames_ = FrameCount(x.size(), frame_len, cfg_.hop);
    Require(frames_ >= 1, ErrorCode::kSignalTooShort,
            "signal of " + std::to_string(x.size()) + " samples is shorter than one frame of " +
                std::to_string(frame_len));
    window_ = MakeWindow(cfg_.window, frame_len);
    const int K = cfg_.dft_size;
    const int bins = cfg_.Bins();
    spectra_.resize(static_cast<std::size_t>(frames_) * bins);
    amp_.config = cfg_;
    amp_.frame_count = frames_;
    amp_.magnitudes = Matrix(bins, frames_);
    FftPlan plan(K);
    std::vector<std::complex<double>> buf(K);
    for (int m = 0; m < frames_; ++m) {
      const std::size_t off = static_cast<std::size_t>(m) * cfg_.hop;
      for (int n = 0; n < K; ++n) buf[n] = n < frame_len ? x[off + n] * window_[n] : 0.0;
      plan.Transform(buf, false);
      for (int k = 0; k < bins; ++k) {
        spectra_[static_cast<std::size_t>(m) * bins + k] = buf[k];
        amp_.magnitudes(k, m) = std::abs(buf[k]);
      }
    }
  }

  const AmplitudeSpectrogram& amplitude() const { return amp_; }
  int frames() const { return frames_; }
  std::size_t length() const { return length_; }
  const StftConfig& config() const { return cfg_; }
  std::complex<double> bin(int k, int m) const {
    return spectra_[static_cast<std::size_t>(m) * cfg_.Bins() + k];
  }

  // Adds d(loss)/dx to grad_x given d(loss)/da(k,m). With X = sum_n w x e^{-i},
  // da/dx_n = w_n Re(X e^{+i 2 pi k n / K}) / a, so each frame's adjoint is a
  // one-sided inverse DFT of g*X/a followed by windowing and overlap-add.
  // Where a(k,m) == 0 the subgradient 0 is used.
  void Backward(const Matrix& grad_mag, std::span<double> grad_x) const {
    const int bins = cfg_.Bins();
    Require(grad_mag.rows() == static_cast<std::size_t>(bins) &&
                grad_mag.cols() == static_cast<std::size_t>(frames_),
            ErrorCode::kDimensionMismatch, "magnitude gradient shape");
    Require(grad_x.size() == length_, ErrorCode::kDimensionMismatch, "signal gradient length");
    const int K = cfg_.dft_size;
    const int frame_len = cfg_.FrameLen();
    FftPlan plan(K);
    std::vector<std::complex<double>> buf(K);
    for (int m = 0; m < frames_; ++m) {
      std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
      bool any = false;
      for (int k = 0; k < bins; ++k) {
        const double g = grad_mag(k, m);
        const std::complex<double> X = bin(k, m);
        const double a = std::abs(X);
        if (g == 0.0 || a == 0.0) continue;
        buf[k] = X * (g / a);
        any = true;
      }
      if (!any) continue;
      plan.Transform(buf, true);
      const std::size_t off = static_cast<std::size_t>(m) * cfg_.hop;
      for (int n = 0; n < frame_len; ++n) grad_x[off + n] += window_[n] * buf[n].real();
    }
  }

 private:
  StftConfig cfg_;
  std::size_t length_;
  int frames_ = 0;
  std::vector<double> window_;
  std::vector<std::complex<double>> spectra_;
  AmplitudeSpectrogram amp_;
};

inline AmplitudeSpectrogram StftAmplitude(std::span<const double> x, const StftConfig& cfg) {
  return StftAnalysis(x, cfg).amplitude();
}

inline AmplitudeSpectrogram StftAmplitude(const Waveform& x, const StftConfig& cfg) {
  Require(!x.empty(), ErrorCode::kSignalTooShort, "empty waveform");
  return StftAmplitude(x.view(), cfg);
}

}  // namespace tdse
