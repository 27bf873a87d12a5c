#pragma once

// Central-difference check of model backward, independent of the analytic
// adjoint: perturbs every parameter and input sample and differentiates the
// scalar sum_n g[n] * out[n].

#include <algorithm>
#include <cmath>
#include <vector>

#include "tdse/model.hpp"

namespace tdse::testing {

struct ModelFdReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // a PReLU sign flipped inside the stencil
};

struct Probe {
  long double value;
  std::vector<bool> signs;
};

inline Probe ProbeModel(const ModelParams& p, const Waveform& y, const std::vector<double>& g, bool training,
                        std::uint64_t seed) {
  ForwardCache c;
  const Waveform out = Forward(p, y, training, seed, &c);
  Probe r{0.0L, {}};
  for (std::size_t n = 0; n < out.size(); ++n) r.value += static_cast<long double>(g[n]) * out.samples[n];
  for (const LayerCache& lc : c.layers)
    for (double z : lc.preact) r.signs.push_back(z > 0.0);
  return r;
}

inline ModelFdReport ModelFiniteDifference(const ModelParams& params, const Waveform& y, const std::vector<double>& g,
                                           bool training, std::uint64_t seed, double step) {
  ForwardCache cache;
  Forward(params, y, training, seed, &cache);
  const BackwardResult br = Backward(params, cache, g);
  ModelFdReport rep;
  auto compare = [&](double analytic, const Probe& plus, const Probe& minus) {
    if (plus.signs != minus.signs) {
      ++rep.skipped;
      return;
    }
    const double numeric = static_cast<double>((plus.value - minus.value) / (2.0L * step));
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    rep.max_rel_err = std::max(rep.max_rel_err, std::abs(analytic - numeric) / denom);
    ++rep.checked;
  };
  ModelParams p = params;
  const auto tensors = p.Tensors();
  const auto grads = br.grads.Tensors();
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    for (std::size_t i = 0; i < tensors[t].size(); ++i) {
      const double keep = tensors[t][i];
      tensors[t][i] = keep + step;
      const Probe plus = ProbeModel(p, y, g, training, seed);
      tensors[t][i] = keep - step;
      const Probe minus = ProbeModel(p, y, g, training, seed);
      tensors[t][i] = keep;
      compare(grads[t][i], plus, minus);
    }
  }
  Waveform yy = y;
  for (std::size_t n = 0; n < y.size(); ++n) {
    yy.samples[n] = y.samples[n] + step;
    const Probe plus = ProbeModel(params, yy, g, training, seed);
    yy.samples[n] = y.samples[n] - step;
    const Probe minus = ProbeModel(params, yy, g, training, seed);
    yy.samples[n] = y.samples[n];
    compare(br.grad_input[n], plus, minus);
  }
  return rep;
}

}  // namespace tdse::testing
