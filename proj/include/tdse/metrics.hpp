#pragma once

// Evaluation metrics: time-domain MSE, STSA-MSE, STOI, ESTOI and SI-SDR.
// The STOI/ESTOI cores optionally return the gradient of the score with
// respect to the enhanced band envelopes; the loss module chains that back to
// the waveform.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tdse/dsp.hpp"
#include "tdse/error.hpp"
#include "tdse/perceptual.hpp"

namespace tdse {

enum class MetricKind { kTimeMse, kStsaMse, kStoi, kEstoi, kSiSdr };

inline std::string_view MetricName(MetricKind kind) {
  switch (kind) {
    case MetricKind::kTimeMse: return "time-mse";
    case MetricKind::kStsaMse: return "stsa-mse";
    case MetricKind::kStoi: return "stoi";
    case MetricKind::kEstoi: return "estoi";
    case MetricKind::kSiSdr: return "si-sdr";
  }
  return "unknown";
}

inline MetricKind ParseMetric(std::string_view name) {
  for (MetricKind k : {MetricKind::kTimeMse, MetricKind::kStsaMse, MetricKind::kStoi,
                       MetricKind::kEstoi, MetricKind::kSiSdr})
    if (MetricName(k) == name) return k;
  Fail(ErrorCode::kParse, "unknown metric '" + std::string(name) + "'");
}

// True when larger values are better.
inline bool HigherIsBetter(MetricKind kind) {
  return kind == MetricKind::kStoi || kind == MetricKind::kEstoi || kind == MetricKind::kSiSdr;
}

inline constexpr double kSiSdrCapDb = 300.0;

struct MetricScore {
  MetricKind kind;
  double value;
  std::pair<double, double> valid_range;
  bool saturated = false;
};

struct SiSdrBreakdown {
  double alpha = 0.0;
  double target_energy = 0.0;    // ||alpha x||^2
  double residual_energy = 0.0;  // ||alpha x - xhat||^2
  double sisdr_db = 0.0;         // capped at +/- cap_db
  bool saturated = false;        // true SI-SDR >= cap_db (incl. zero residual)
};

// Analysis constants shared by STOI and ESTOI.
struct IntelligibilityConfig {
  StftConfig stft{};
  int sample_rate = 10000;
  int band_count = 15;         // J
  double first_center_hz = 150.0;
  int segment_len = 30;        // N
  double clip_db = -15.0;      // clipping constant 1 + 10^(clip_db/20)
  double degenerate_norm = 1e-12;

  double ClipFactor() const { return 1.0 + std::pow(10.0, clip_db / 20.0); }
  OctaveBandMap Bands() const {
    return ThirdOctaveBands(sample_rate, stft.dft_size, band_count, first_center_hz);
  }
};

inline void CheckPair(const Waveform& enhanced, const Waveform& clean) {
  Require(enhanced.size() == clean.size(), ErrorCode::kLengthMismatch,
          "enhanced has " + std::to_string(enhanced.size()) + " samples, clean has " +
              std::to_string(clean.size()));
  Require(enhanced.sample_rate == clean.sample_rate, ErrorCode::kRateMismatch,
          "sample rates differ: " + std::to_string(enhanced.sample_rate) + " vs " +
              std::to_string(clean.sample_rate));
  Require(!clean.empty(), ErrorCode::kSignalTooShort, "empty signals");
}

namespace detail {

struct CoreResult {
  double value = 0.0;
  long double exact_value = 0.0L;  // value before rounding to double
  Matrix grad;                         // d value / d enhanced envelope (J x M)
  std::vector<std::uint8_t> clip_mask;  // STOI only: 1 where the clip branch is taken
  double clip_fraction = 0.0;
};

inline int SegmentCount(const EnvelopeMatrix& env, int N) {
  const int M = env.frames();
  Require(M >= N, ErrorCode::kSignalTooShort,
          std::to_string(M) + " frames is fewer than the segment length " + std::to_string(N));
  return M - N + 1;
}

// d_STOI from clean and enhanced envelopes, averaging the clipped segment
// correlations over J bands and M-N+1 segment positions.
inline CoreResult StoiCore(const EnvelopeMatrix& clean, const EnvelopeMatrix& enh,
                           const IntelligibilityConfig& cfg, bool want_grad) {
  const int J = clean.bands();
  const int N = cfg.segment_len;
  const int T = SegmentCount(clean, N);
  const double clip = cfg.ClipFactor();
  const double tiny = cfg.degenerate_norm;
  const double scale = 1.0 / (static_cast<double>(J) * T);

  CoreResult r;
  if (want_grad) r.grad = Matrix(J, clean.frames());
  r.clip_mask.assign(static_cast<std::size_t>(J) * T * N, 0);
  std::vector<double> c(N), s(N), sp(N), u(N), v(N), g(N);
  std::size_t clipped = 0;
  long double total = 0.0L;
  for (int j = 0; j < J; ++j) {
    for (int t = 0; t < T; ++t) {
      double cc = 0.0, ss = 0.0;
      for (int n = 0; n < N; ++n) {
        c[n] = clean.values(j, t + n);
        s[n] = enh.values(j, t + n);
        cc += c[n] * c[n];
        ss += s[n] * s[n];
      }
      const double nc = std::sqrt(cc);
      const double ns = std::sqrt(ss);
      const double alpha = ns > 0.0 ? nc / ns : 0.0;
      std::uint8_t* mask = &r.clip_mask[(static_cast<std::size_t>(j) * T + t) * N];
      double mc = 0.0, ms = 0.0;
      for (int n = 0; n < N; ++n) {
        const double scaled = alpha * s[n];
        const double bound = clip * c[n];
        // ties take the normalized branch
        if (scaled <= bound) {
          sp[n] = scaled;
        } else {
          sp[n] = bound;
          mask[n] = 1;
          ++clipped;
        }
        mc += c[n];
        ms += sp[n];
      }
      mc /= N;
      ms /= N;
      double uv = 0.0, uu = 0.0, vv = 0.0;
      for (int n = 0; n < N; ++n) {
        u[n] = c[n] - mc;
        v[n] = sp[n] - ms;
        uv += u[n] * v[n];
        uu += u[n] * u[n];
        vv += v[n] * v[n];
      }
      const double nu = std::sqrt(uu);
      const double nv = std::sqrt(vv);
      if (nu < tiny || nv < tiny) continue;  // contributes 0, still counted
      const double d = uv / (nu * nv);
      total += d;
      if (!want_grad || alpha == 0.0) continue;
      // d(d)/d(s'), then through the normalized branch s' = alpha(s) s.
      double gs_dot = 0.0;
      for (int n = 0; n < N; ++n) {
        g[n] = mask[n] ? 0.0 : scale * (u[n] / (nu * nv) - d * v[n] / vv);
        gs_dot += g[n] * s[n];
      }
      const double k = alpha * gs_dot / ss;
      for (int n = 0; n < N; ++n) r.grad(j, t + n) += alpha * g[n] - k * s[n];
    }
  }
  r.exact_value = total * scale;
  r.value = static_cast<double>(r.exact_value);
  r.clip_fraction = static_cast<double>(clipped) / static_cast<double>(r.clip_mask.size());
  return r;
}

// In-place (v - mean)/||v - mean||; returns the norm, and zeroes v when the
// norm is below tiny.
inline double Standardize(std::span<double> v, double tiny) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double& x : v) {
    x -= mean;
    ss += x * x;
  }
  const double norm = std::sqrt(ss);
  if (norm < tiny) {
    std::fill(v.begin(), v.end(), 0.0);
    return 0.0;
  }
  for (double& x : v) x /= norm;
  return norm;
}

// Adjoint of Standardize: y = P v / ||P v||  =>  dv = P (g - y (y.g)) / norm.
inline void StandardizeBackward(std::span<const double> y, double norm, std::span<double> g) {
  if (norm == 0.0) {
    std::fill(g.begin(), g.end(), 0.0);
    return;
  }
  double yg = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) yg += y[i] * g[i];
  double mean = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    g[i] = (g[i] - y[i] * yg) / norm;
    mean += g[i];
  }
  mean /= static_cast<double>(g.size());
  for (double& x : g) x -= mean;
}

// Row then column standardization of the J x N segment ending at frame
// t+N-1 (0-based t). Keeps norms for the backward pass.
struct NormalizedSegment {
  Matrix rows_normed;  // J x N after row standardization
  Matrix both;         // N x J: column n (as a row) after column standardization
  std::vector<double> row_norms;
  std::vector<double> col_norms;
};

inline NormalizedSegment NormalizeSegment(const EnvelopeMatrix& env, int t, int N, double tiny) {
  const int J = env.bands();
  NormalizedSegment s{Matrix(J, N), Matrix(N, J), std::vector<double>(J), std::vector<double>(N)};
  for (int j = 0; j < J; ++j) {
    auto row = s.rows_normed.row(j);
    for (int n = 0; n < N; ++n) row[n] = env.values(j, t + n);
    s.row_norms[j] = Standardize(row, tiny);
  }
  for (int n = 0; n < N; ++n) {
    auto col = s.both.row(n);
    for (int j = 0; j < J; ++j) col[j] = s.rows_normed(j, n);
    s.col_norms[n] = Standardize(col, tiny);
  }
  return s;
}

// d_ESTOI: mean over n and the M-N+1 segment positions of the inner product
// between row- and column-normalized clean and enhanced columns.
inline CoreResult EstoiCore(const EnvelopeMatrix& clean, const EnvelopeMatrix& enh,
                            const IntelligibilityConfig& cfg, bool want_grad) {
  const int J = clean.bands();
  const int N = cfg.segment_len;
  const int T = SegmentCount(clean, N);
  const double tiny = cfg.degenerate_norm;
  const double scale = 1.0 / (static_cast<double>(N) * T);

  CoreResult r;
  if (want_grad) r.grad = Matrix(J, clean.frames());
  long double total = 0.0L;
  Matrix g_rows(J, N);
  std::vector<double> g_col(J);
  for (int t = 0; t < T; ++t) {
    const NormalizedSegment cs = NormalizeSegment(clean, t, N, tiny);
    const NormalizedSegment es = NormalizeSegment(enh, t, N, tiny);
    for (int n = 0; n < N; ++n) {
      auto a = cs.both.row(n);
      auto b = es.both.row(n);
      double dot = 0.0;
      for (int j = 0; j < J; ++j) dot += a[j] * b[j];
      total += dot;
    }
    if (!want_grad) continue;
    for (int n = 0; n < N; ++n) {
      for (int j = 0; j < J; ++j) g_col[j] = scale * cs.both(n, j);
      StandardizeBackward(es.both.row(n), es.col_norms[n], g_col);
      for (int j = 0; j < J; ++j) g_rows(j, n) = g_col[j];
    }
    for (int j = 0; j < J; ++j) {
      StandardizeBackward(es.rows_normed.row(j), es.row_norms[j], g_rows.row(j));
      for (int n = 0; n < N; ++n) r.grad(j, t + n) += g_rows(j, n);
    }
  }
  r.exact_value = total * scale;
  r.value = static_cast<double>(r.exact_value);
  return r;
}

inline EnvelopeMatrix EnvelopesOf(const Waveform& x, const IntelligibilityConfig& cfg,
                                  const OctaveBandMap& bands) {
  return BandEnvelope(StftAmplitude(x.view(), cfg.stft), bands, cfg.segment_len);
}

inline void CheckIntelligibilityInputs(const Waveform& enhanced, const Waveform& clean,
                                       const IntelligibilityConfig& cfg) {
  CheckPair(enhanced, clean);
  Require(clean.sample_rate == cfg.sample_rate, ErrorCode::kRateMismatch,
          "intelligibility metrics require " + std::to_string(cfg.sample_rate) + " Hz, got " +
              std::to_string(clean.sample_rate));
}

}  // namespace detail

inline MetricScore TimeMse(const Waveform& enhanced, const Waveform& clean) {
  CheckPair(enhanced, clean);
  long double acc = 0.0L;
  for (std::size_t n = 0; n < clean.size(); ++n) {
    const double e = enhanced.samples[n] - clean.samples[n];
    acc += e * e;
  }
  return {MetricKind::kTimeMse, static_cast<double>(acc / clean.size()),
          {0.0, std::numeric_limits<double>::infinity()}};
}

inline MetricScore StsaMse(const Waveform& enhanced, const Waveform& clean,
                           const StftConfig& cfg = {}) {
  CheckPair(enhanced, clean);
  const AmplitudeSpectrogram a = StftAmplitude(clean.view(), cfg);
  const AmplitudeSpectrogram b = StftAmplitude(enhanced.view(), cfg);
  long double acc = 0.0L;
  for (std::size_t i = 0; i < a.magnitudes.data().size(); ++i) {
    const double e = b.magnitudes.data()[i] - a.magnitudes.data()[i];
    acc += e * e;
  }
  return {MetricKind::kStsaMse, static_cast<double>(acc / a.magnitudes.data().size()),
          {0.0, std::numeric_limits<double>::infinity()}};
}

inline MetricScore Stoi(const Waveform& enhanced, const Waveform& clean,
                        const IntelligibilityConfig& cfg = {}) {
  detail::CheckIntelligibilityInputs(enhanced, clean, cfg);
  const OctaveBandMap bands = cfg.Bands();
  const auto r = detail::StoiCore(detail::EnvelopesOf(clean, cfg, bands),
                                  detail::EnvelopesOf(enhanced, cfg, bands), cfg, false);
  return {MetricKind::kStoi, r.value, {-1.0, 1.0}};
}

inline MetricScore Estoi(const Waveform& enhanced, const Waveform& clean,
                         const IntelligibilityConfig& cfg = {}) {
  detail::CheckIntelligibilityInputs(enhanced, clean, cfg);
  const OctaveBandMap bands = cfg.Bands();
  const auto r = detail::EstoiCore(detail::EnvelopesOf(clean, cfg, bands),
                                   detail::EnvelopesOf(enhanced, cfg, bands), cfg, false);
  return {MetricKind::kEstoi, r.value, {-1.0, 1.0}};
}

// alpha = xhat.x / x.x; SI-SDR = 10 log10(||alpha x||^2 / ||alpha x - xhat||^2),
// accumulated in extended precision.
inline SiSdrBreakdown SiSdr(const Waveform& enhanced, const Waveform& clean,
                            double cap_db = kSiSdrCapDb) {
  CheckPair(enhanced, clean);
  long double xx = 0.0L, xy = 0.0L;
  for (std::size_t n = 0; n < clean.size(); ++n) {
    const long double x = clean.samples[n];
    xx += x * x;
    xy += x * static_cast<long double>(enhanced.samples[n]);
  }
  Require(xx > 0.0L, ErrorCode::kZeroReference, "reference signal is identically zero");
  const long double alpha = xy / xx;
  long double res = 0.0L;
  for (std::size_t n = 0; n < clean.size(); ++n) {
    const long double e = alpha * clean.samples[n] - static_cast<long double>(enhanced.samples[n]);
    res += e * e;
  }
  SiSdrBreakdown b;
  b.alpha = static_cast<double>(alpha);
  b.target_energy = static_cast<double>(alpha * alpha * xx);
  b.residual_energy = static_cast<double>(res);
  const long double target = alpha * alpha * xx;
  if (target == 0.0L) {
    b.sisdr_db = -cap_db;  // estimate orthogonal to (or zero) the reference
  } else if (res == 0.0L || 10.0L * std::log10(target / res) >= cap_db) {
    b.saturated = true;
    b.sisdr_db = cap_db;
  } else {
    b.sisdr_db = std::max(static_cast<double>(10.0L * std::log10(target / res)), -cap_db);
  }
  return b;
}

inline MetricScore SiSdrScore(const Waveform& enhanced, const Waveform& clean) {
  const SiSdrBreakdown b = SiSdr(enhanced, clean);
  return {MetricKind::kSiSdr, b.sisdr_db, {-kSiSdrCapDb, kSiSdrCapDb}, b.saturated};
}

inline MetricScore ComputeMetric(MetricKind kind, const Waveform& enhanced, const Waveform& clean,
                                 const IntelligibilityConfig& cfg = {}) {
  switch (kind) {
    case MetricKind::kTimeMse: return TimeMse(enhanced, clean);
    case MetricKind::kStsaMse: return StsaMse(enhanced, clean, cfg.stft);
    case MetricKind::kStoi: return Stoi(enhanced, clean, cfg);
    case MetricKind::kEstoi: return Estoi(enhanced, clean, cfg);
    case MetricKind::kSiSdr: return SiSdrScore(enhanced, clean);
  }
  Fail(ErrorCode::kUnimplemented, "metric");
}

inline std::vector<MetricKind> AllMetrics() {
  return {MetricKind::kTimeMse, MetricKind::kStsaMse, MetricKind::kStoi, MetricKind::kEstoi,
          MetricKind::kSiSdr};
}

}  // namespace tdse
