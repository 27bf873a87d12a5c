#pragma once

// Deterministic synthetic signals: white noise, tones, and a speech-like
// signal (resonant noise with a syllabic on/off envelope).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "tdse/dsp.hpp"

namespace tdse::synth {

inline Waveform WhiteNoise(std::size_t length, int rate, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(length);
  for (double& s : w.samples) s = dist(rng);
  return w;
}

inline Waveform Tone(double freq_hz, double amplitude, std::size_t length, int rate,
                     double phase = 0.0) {
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(length);
  for (std::size_t n = 0; n < length; ++n)
    w.samples[n] = amplitude * std::sin(2.0 * std::numbers::pi * freq_hz * n / rate + phase);
  return w;
}

// Two-pole resonator y[n] = x[n] + 2 r cos(w) y[n-1] - r^2 y[n-2].
inline void Resonate(std::vector<double>& x, double freq_hz, double bandwidth_hz, int rate) {
  const double r = std::exp(-std::numbers::pi * bandwidth_hz / rate);
  const double a1 = 2.0 * r * std::cos(2.0 * std::numbers::pi * freq_hz / rate);
  const double a2 = -r * r;
  double y1 = 0.0, y2 = 0.0;
  for (double& s : x) {
    const double y = s + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    s = y;
  }
}

// Syllable-like gain track: bursts of 120-320 ms at full level separated by
// 60-180 ms gaps at `floor_gain`, with 10 ms raised-cosine ramps.
inline std::vector<double> SyllabicEnvelope(std::size_t length, int rate, std::uint64_t seed,
                                            double floor_gain = 0.02) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> burst(0.12, 0.32), gap(0.06, 0.18);
  std::vector<double> env(length, floor_gain);
  const std::size_t ramp = static_cast<std::size_t>(0.01 * rate);
  std::size_t pos = static_cast<std::size_t>(gap(rng) * rate);
  while (pos < length) {
    const std::size_t len = static_cast<std::size_t>(burst(rng) * rate);
    for (std::size_t i = 0; i < len && pos + i < length; ++i) {
      double g = 1.0;
      if (i < ramp) g = 0.5 - 0.5 * std::cos(std::numbers::pi * i / ramp);
      if (len - i <= ramp) g = std::min(g, 0.5 - 0.5 * std::cos(std::numbers::pi * (len - i) / ramp));
      env[pos + i] = floor_gain + (1.0 - floor_gain) * g;
    }
    pos += len + static_cast<std::size_t>(gap(rng) * rate);
  }
  return env;
}

// Formant-shaped noise (resonances near 500, 1500 and 2500 Hz) under a
// syllabic envelope, scaled to unit peak-RMS order of magnitude (about 0.1).
inline Waveform SpeechLike(std::size_t length, int rate, std::uint64_t seed) {
  Waveform w = WhiteNoise(length, rate, seed);
  std::vector<double> a = w.samples, b = w.samples, c = w.samples;
  Resonate(a, 500.0, 150.0, rate);
  Resonate(b, 1500.0, 250.0, rate);
  Resonate(c, 2500.0, 350.0, rate);
  const std::vector<double> env = SyllabicEnvelope(length, rate, seed ^ 0x9e3779b97f4a7c15ULL);
  double ss = 0.0;
  for (std::size_t n = 0; n < length; ++n) {
    w.samples[n] = (a[n] + 0.6 * b[n] + 0.35 * c[n]) * env[n];
    ss += w.samples[n] * w.samples[n];
  }
  const double rms = std::sqrt(ss / static_cast<double>(length));
  if (rms > 0.0)
    for (double& s : w.samples) s *= 0.1 / rms;
  return w;
}

}  // namespace tdse::synth
