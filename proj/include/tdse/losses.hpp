#pragma once

// Training losses with analytic gradients with respect to the enhanced
// waveform, and a central-difference gradient checker.
//
// Spectral losses are back-propagated stage by stage: score -> band
// envelopes -> STFT magnitudes -> windowed frames -> overlap-add.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "tdse/dsp.hpp"
#include "tdse/error.hpp"
#include "tdse/metrics.hpp"
#include "tdse/perceptual.hpp"

namespace tdse {

enum class LossKind { kTimeMse, kStsaMse, kStoi, kEstoi, kSiSdr, kPmsqe };

inline std::string_view LossName(LossKind kind) {
  switch (kind) {
    case LossKind::kTimeMse: return "time-mse";
    case LossKind::kStsaMse: return "stsa-mse";
    case LossKind::kStoi: return "stoi";
    case LossKind::kEstoi: return "estoi";
    case LossKind::kSiSdr: return "si-sdr";
    case LossKind::kPmsqe: return "pmsqe";
  }
  return "unknown";
}

inline LossKind ParseLoss(std::string_view name) {
  for (LossKind k : {LossKind::kTimeMse, LossKind::kStsaMse, LossKind::kStoi, LossKind::kEstoi,
                     LossKind::kSiSdr, LossKind::kPmsqe})
    if (LossName(k) == name) return k;
  Fail(ErrorCode::kParse, "unknown loss '" + std::string(name) + "'");
}

inline bool IsImplemented(LossKind kind) { return kind != LossKind::kPmsqe; }

inline std::vector<LossKind> ImplementedLosses() {
  return {LossKind::kTimeMse, LossKind::kStsaMse, LossKind::kStoi, LossKind::kEstoi,
          LossKind::kSiSdr};
}

// The evaluation metric each loss optimizes.
inline MetricKind MatchingMetric(LossKind kind) {
  switch (kind) {
    case LossKind::kTimeMse: return MetricKind::kTimeMse;
    case LossKind::kStsaMse: return MetricKind::kStsaMse;
    case LossKind::kStoi: return MetricKind::kStoi;
    case LossKind::kEstoi: return MetricKind::kEstoi;
    case LossKind::kSiSdr: return MetricKind::kSiSdr;
    case LossKind::kPmsqe: break;
  }
  Fail(ErrorCode::kUnimplemented, "PMSQE has no implemented metric");
}

struct LossReport {
  LossKind kind = LossKind::kTimeMse;
  double value = 0.0;
  long double exact_value = 0.0L;  // value before the final rounding to double
  std::vector<double> gradient;  // d loss / d enhanced, one per sample
  double clip_active_fraction = 0.0;
  std::vector<std::uint8_t> clip_mask;  // STOI only
};

// A loss bound to one clean reference. The clean-side analysis is computed
// once, so repeated evaluations (training, gradient checks) only analyse the
// enhanced signal.
class Loss {
 public:
  Loss(LossKind kind, Waveform clean, IntelligibilityConfig cfg = {})
      : kind_(kind), clean_(std::move(clean)), cfg_(std::move(cfg)) {
    Require(IsImplemented(kind_), ErrorCode::kUnimplemented,
            "loss '" + std::string(LossName(kind_)) + "' is reserved but not implemented");
    Require(!clean_.empty(), ErrorCode::kSignalTooShort, "empty clean reference");
    switch (kind_) {
      case LossKind::kStsaMse:
        clean_amp_ = std::make_unique<AmplitudeSpectrogram>(StftAmplitude(clean_.view(), cfg_.stft));
        break;
      case LossKind::kStoi:
      case LossKind::kEstoi:
        Require(clean_.sample_rate == cfg_.sample_rate, ErrorCode::kRateMismatch,
                "intelligibility losses require " + std::to_string(cfg_.sample_rate) + " Hz");
        bands_ = cfg_.Bands();
        clean_env_ = std::make_unique<EnvelopeMatrix>(detail::EnvelopesOf(clean_, cfg_, bands_));
        detail::SegmentCount(*clean_env_, cfg_.segment_len);
        break;
      case LossKind::kSiSdr: {
        long double xx = 0.0L;
        for (double v : clean_.samples) xx += static_cast<long double>(v) * v;
        Require(xx > 0.0L, ErrorCode::kZeroReference, "reference signal is identically zero");
        clean_energy_ = xx;
        break;
      }
      default:
        break;
    }
  }

  LossKind kind() const { return kind_; }
  const Waveform& clean() const { return clean_; }

  LossReport Evaluate(const Waveform& enhanced, bool want_grad = true) const {
    CheckPair(enhanced, clean_);
    LossReport r;
    r.kind = kind_;
    if (want_grad) r.gradient.assign(enhanced.size(), 0.0);
    switch (kind_) {
      case LossKind::kTimeMse: TimeMseLoss(enhanced, r, want_grad); break;
      case LossKind::kStsaMse: StsaMseLoss(enhanced, r, want_grad); break;
      case LossKind::kStoi: IntelligibilityLoss(enhanced, r, want_grad, true); break;
      case LossKind::kEstoi: IntelligibilityLoss(enhanced, r, want_grad, false); break;
      case LossKind::kSiSdr: SiSdrLoss(enhanced, r, want_grad); break;
      case LossKind::kPmsqe: Fail(ErrorCode::kUnimplemented, "pmsqe");
    }
    return r;
  }

 private:
  void TimeMseLoss(const Waveform& xh, LossReport& r, bool want_grad) const {
    const double L = static_cast<double>(xh.size());
    long double acc = 0.0L;
    for (std::size_t n = 0; n < xh.size(); ++n) {
      const double e = xh.samples[n] - clean_.samples[n];
      acc += e * e;
      if (want_grad) r.gradient[n] = 2.0 * e / L;
    }
    r.exact_value = acc / L;
    r.value = static_cast<double>(r.exact_value);
  }

  void StsaMseLoss(const Waveform& xh, LossReport& r, bool want_grad) const {
    const StftAnalysis est(xh.view(), cfg_.stft);
    const auto& a = clean_amp_->magnitudes.data();
    const auto& b = est.amplitude().magnitudes.data();
    const double count = static_cast<double>(a.size());
    Matrix grad(est.amplitude().magnitudes.rows(), est.amplitude().magnitudes.cols());
    long double acc = 0.0L;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double e = b[i] - a[i];
      acc += e * e;
      grad.data()[i] = 2.0 * e / count;
    }
    r.exact_value = acc / count;
    r.value = static_cast<double>(r.exact_value);
    if (want_grad) est.Backward(grad, r.gradient);
  }

  void IntelligibilityLoss(const Waveform& xh, LossReport& r, bool want_grad, bool stoi) const {
    const StftAnalysis est(xh.view(), cfg_.stft);
    const EnvelopeMatrix env = BandEnvelope(est.amplitude(), bands_, cfg_.segment_len);
    detail::CoreResult core = stoi ? detail::StoiCore(*clean_env_, env, cfg_, want_grad)
                                   : detail::EstoiCore(*clean_env_, env, cfg_, want_grad);
    r.value = -core.value;
    r.exact_value = -core.exact_value;
    r.clip_active_fraction = core.clip_fraction;
    r.clip_mask = std::move(core.clip_mask);
    if (!want_grad) return;
    for (double& g : core.grad.data()) g = -g;
    const Matrix grad_mag = BandEnvelopeBackward(est.amplitude(), bands_, env, core.grad);
    est.Backward(grad_mag, r.gradient);
  }

  // loss = -10 log10(alpha^2 E / R); d/dxhat = -(10/ln 10)(2x/p + 2e/R) with
  // p = x.xhat, e = alpha x - xhat, R = ||e||^2.
  void SiSdrLoss(const Waveform& xh, LossReport& r, bool want_grad) const {
    const SiSdrBreakdown b = SiSdr(xh, clean_);
    r.value = -b.sisdr_db;
    r.exact_value = r.value;
    if (!want_grad || b.saturated || b.target_energy == 0.0 || b.sisdr_db <= -kSiSdrCapDb) return;
    long double p = 0.0L;
    for (std::size_t n = 0; n < xh.size(); ++n)
      p += static_cast<long double>(clean_.samples[n]) * xh.samples[n];
    const long double alpha = p / clean_energy_;
    const long double R = b.residual_energy;
    const long double c = 10.0L / std::numbers::ln10_v<long double>;
    for (std::size_t n = 0; n < xh.size(); ++n) {
      const long double x = clean_.samples[n];
      const long double e = alpha * x - static_cast<long double>(xh.samples[n]);
      r.gradient[n] = static_cast<double>(-c * (2.0L * x / p + 2.0L * e / R));
    }
  }

  LossKind kind_;
  Waveform clean_;
  IntelligibilityConfig cfg_;
  OctaveBandMap bands_;
  std::unique_ptr<AmplitudeSpectrogram> clean_amp_;
  std::unique_ptr<EnvelopeMatrix> clean_env_;
  long double clean_energy_ = 0.0L;
};

// TIME_MSE / STSA_MSE are the metrics; STOI/ESTOI/SI-SDR losses are the
// negated scores.
inline double LossValue(LossKind kind, const Waveform& enhanced, const Waveform& clean,
                        const IntelligibilityConfig& cfg = {}) {
  return Loss(kind, clean, cfg).Evaluate(enhanced, false).value;
}

inline LossReport LossAndGrad(LossKind kind, const Waveform& enhanced, const Waveform& clean,
                              const IntelligibilityConfig& cfg = {}) {
  return Loss(kind, clean, cfg).Evaluate(enhanced, true);
}

struct GradcheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_coord = 0;
  double clip_active_fraction = 0.0;
  int checked = 0;
  int excluded = 0;  // coordinates where a clip branch switches within +/- step
};

// Finite-difference step and pass threshold per loss kind.
struct GradcheckDefaults {
  double step;
  double threshold;
};

inline GradcheckDefaults DefaultGradcheck(LossKind kind) {
  switch (kind) {
    case LossKind::kTimeMse: return {1e-2, 1e-10};
    case LossKind::kStsaMse: return {3e-6, 1e-6};
    case LossKind::kStoi: return {1e-5, 1e-4};
    case LossKind::kEstoi: return {1e-6, 1e-4};
    case LossKind::kSiSdr: return {1e-4, 1e-6};
    case LossKind::kPmsqe: break;
  }
  Fail(ErrorCode::kUnimplemented, "no gradient for " + std::string(LossName(kind)));
}

// n distinct coordinates in [0, length), chosen by a partial Fisher-Yates
// shuffle driven by mt19937_64.
inline std::vector<std::size_t> SampleCoordinates(std::size_t length, int n, std::uint64_t seed) {
  Require(n >= 0 && static_cast<std::size_t>(n) <= length, ErrorCode::kOutOfRange,
          "cannot sample " + std::to_string(n) + " coordinates from " + std::to_string(length));
  std::vector<std::size_t> idx(length);
  for (std::size_t i = 0; i < length; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (int i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (length - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  return idx;
}

// Compares the analytic gradient against central differences
// (f(x+h e_i) - f(x-h e_i)) / 2h, differencing the loss before its final
// rounding to double. Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-8).
inline GradcheckReport Gradcheck(LossKind kind, const Waveform& enhanced, const Waveform& clean,
                                 double step, int n_coords, std::uint64_t seed,
                                 const IntelligibilityConfig& cfg = {}) {
  Require(step > 0.0, ErrorCode::kInvalidConfig, "gradcheck step must be positive");
  const Loss loss(kind, clean, cfg);
  const LossReport base = loss.Evaluate(enhanced, true);
  GradcheckReport rep;
  rep.clip_active_fraction = base.clip_active_fraction;
  Waveform probe = enhanced;
  for (std::size_t i : SampleCoordinates(enhanced.size(), n_coords, seed)) {
    const double orig = probe.samples[i];
    probe.samples[i] = orig + step;
    const LossReport plus = loss.Evaluate(probe, false);
    probe.samples[i] = orig - step;
    const LossReport minus = loss.Evaluate(probe, false);
    probe.samples[i] = orig;
    if (plus.clip_mask != base.clip_mask || minus.clip_mask != base.clip_mask) {
      ++rep.excluded;
      continue;
    }
    const double numeric = static_cast<double>((plus.exact_value - minus.exact_value) / (2.0L * step));
    const double analytic = base.gradient[i];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    ++rep.checked;
    if (rel >= rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_coord = i;
    }
  }
  return rep;
}

}  // namespace tdse
