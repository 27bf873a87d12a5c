#pragma once

// Adam, plateau learning-rate halving, early stopping, and the
// learning-rate sweep over loss kinds.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tdse/corpus.hpp"
#include "tdse/losses.hpp"
#include "tdse/metrics.hpp"
#include "tdse/model.hpp"
#include "tdse/synth.hpp"

namespace tdse {

struct TrainConfig {
  LossKind loss_kind = LossKind::kTimeMse;
  double lr0 = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 8;
  int lr_halve_patience = 2;
  int early_stop_patience = 5;
  int max_epochs = 200;
  std::uint64_t seed = 0;
  double improve_tol = 1e-6;
  int divergence_epochs = 3;       // consecutive epochs above the blow-up bound
  double divergence_factor = 10.0;  // bound = initial + (factor - 1) * |initial|,
                                    // initial = loss before the first update
};

inline void ValidateTrainConfig(const TrainConfig& c) {
  Require(c.beta1 > 0.0 && c.beta1 < 1.0 && c.beta2 > 0.0 && c.beta2 < 1.0, ErrorCode::kInvalidConfig,
          "Adam betas must lie in (0, 1)");
  Require(c.epsilon > 0.0, ErrorCode::kInvalidConfig, "epsilon must be positive");
  Require(c.lr0 >= 0.0 && std::isfinite(c.lr0), ErrorCode::kInvalidConfig, "learning rate must be finite and >= 0");
  Require(c.batch_size >= 1, ErrorCode::kInvalidConfig, "batch size must be >= 1");
  Require(c.lr_halve_patience >= 1 && c.early_stop_patience >= 1, ErrorCode::kInvalidConfig, "patiences must be >= 1");
  Require(c.max_epochs >= 1, ErrorCode::kInvalidConfig, "max_epochs must be >= 1");
  Require(c.divergence_epochs >= 1 && c.divergence_factor > 1.0, ErrorCode::kInvalidConfig, "bad divergence rule");
}

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;
};

inline AdamState MakeAdamState(const ModelParams& p) {
  AdamState s;
  for (auto t : p.Tensors()) {
    s.m.emplace_back(t.size(), 0.0);
    s.v.emplace_back(t.size(), 0.0);
  }
  return s;
}

inline void AdamStep(ModelParams& params, const ModelParams& grads, AdamState& state, double lr, double beta1 = 0.9,
                     double beta2 = 0.999, double epsilon = 1e-8) {
  const auto p = params.Tensors();
  const auto g = grads.Tensors();
  Require(g.size() == p.size() && state.m.size() == p.size() && state.v.size() == p.size(), ErrorCode::kShapeMismatch,
          "Adam: tensor count differs");
  for (std::size_t t = 0; t < p.size(); ++t)
    Require(g[t].size() == p[t].size() && state.m[t].size() == p[t].size() && state.v[t].size() == p[t].size(),
            ErrorCode::kShapeMismatch, "Adam: tensor " + std::to_string(t) + " size differs");
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < p.size(); ++t) {
    std::vector<double>& m = state.m[t];
    std::vector<double>& v = state.v[t];
    for (std::size_t i = 0; i < p[t].size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[t][i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[t][i] * g[t][i];
      p[t][i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon);
    }
  }
}

struct Example {
  Waveform noisy;
  Waveform clean;
};
using Dataset = std::vector<Example>;

// Reads the successful rows of an index.csv; paths are relative to its directory.
inline Dataset LoadIndexedDataset(const fs::path& index_path) {
  Dataset d;
  const fs::path base = index_path.parent_path();
  for (const IndexRow& r : LoadIndex(index_path)) {
    if (r.noisy_path.empty()) continue;
    d.push_back({LoadWav(base / r.noisy_path), LoadWav(base / r.clean_path)});
  }
  return d;
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  bool diverged = false;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;  // 0: initial parameters
  std::string stop_reason;
  bool diverged = false;
};

inline std::string TrainLogCsv(const TrainLog& log) {
  std::string out = "epoch,train_loss,val_loss,lr,diverged\n";
  for (const EpochRecord& e : log.epochs)
    out += std::to_string(e.epoch) + "," + FormatReal(e.train_loss) + "," + FormatReal(e.val_loss) + "," +
           FormatReal(e.lr) + "," + (e.diverged ? "1" : "0") + "\n";
  return out;
}

struct FitResult {
  ModelParams best;
  TrainLog log;
};

namespace detail {

inline bool AllFinite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline std::vector<Loss> BindLosses(LossKind kind, const Dataset& set) {
  std::vector<Loss> out;
  out.reserve(set.size());
  for (const Example& e : set) out.emplace_back(kind, e.clean);
  return out;
}

inline std::uint64_t Mix64(std::uint64_t a, std::uint64_t b) { return DropoutSeed(a + b * 0xd1b54a32d192ed03ULL, 0); }

}  // namespace detail

// Mean loss over `set` with dropout off; NaN as soon as anything is non-finite.
inline double MeanLoss(const ModelParams& params, const Dataset& set, const std::vector<Loss>& losses) {
  long double acc = 0.0L;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Waveform out = Forward(params, set[i].noisy, false, 0);
    if (!detail::AllFinite(out.samples)) return std::numeric_limits<double>::quiet_NaN();
    const double v = losses[i].Evaluate(out, false).value;
    if (!std::isfinite(v)) return std::numeric_limits<double>::quiet_NaN();
    acc += v;
  }
  return static_cast<double>(acc / set.size());
}

using EpochCallback = std::function<void(const EpochRecord&)>;

inline FitResult Fit(const ModelConfig& model_cfg, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                     const EpochCallback& on_epoch = {}) {
  ValidateTrainConfig(cfg);
  ValidateConfig(model_cfg);
  Require(!train.empty() && !val.empty(), ErrorCode::kInvalidConfig, "training and validation sets must be non-empty");
  const std::vector<Loss> train_losses = detail::BindLosses(cfg.loss_kind, train);
  const std::vector<Loss> val_losses = detail::BindLosses(cfg.loss_kind, val);

  ModelParams params = InitParams(model_cfg, cfg.seed);
  AdamState adam = MakeAdamState(params);
  FitResult res{params, {}};
  TrainLog& log = res.log;
  double lr = cfg.lr0;
  int since_improve_lr = 0, since_improve_stop = 0, blowup_run = 0;
  const double initial_train = MeanLoss(params, train, train_losses);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(detail::Mix64(cfg.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    long double loss_acc = 0.0L;
    bool bad = false;
    ForwardCache cache;
    for (std::size_t start = 0; start < order.size() && !bad; start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      ModelParams grads = ZeroParams(model_cfg);
      const auto gsum = grads.Tensors();
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t item = order[b];
        const std::uint64_t drop_seed =
            detail::Mix64(detail::Mix64(cfg.seed, static_cast<std::uint64_t>(epoch)), static_cast<std::uint64_t>(b));
        const Waveform out = Forward(params, train[item].noisy, true, drop_seed, &cache);
        if (!detail::AllFinite(out.samples)) {
          bad = true;
          break;
        }
        const LossReport lr_item = train_losses[item].Evaluate(out);
        if (!std::isfinite(lr_item.value) || !detail::AllFinite(lr_item.gradient)) {
          bad = true;
          break;
        }
        loss_acc += lr_item.value;
        const BackwardResult br = Backward(params, cache, lr_item.gradient);
        const auto gi = br.grads.Tensors();
        for (std::size_t t = 0; t < gsum.size(); ++t)
          for (std::size_t k = 0; k < gsum[t].size(); ++k) gsum[t][k] += gi[t][k];
      }
      if (bad) break;
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (auto t : gsum)
        for (double& v : t) v *= inv;
      AdamStep(params, grads, adam, lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    }

    rec.train_loss = bad ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(loss_acc / train.size());
    rec.val_loss = bad ? std::numeric_limits<double>::quiet_NaN() : MeanLoss(params, val, val_losses);
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss)) {
      rec.diverged = true;
    } else {
      const double bound = initial_train + (cfg.divergence_factor - 1.0) * std::abs(initial_train);
      blowup_run = rec.train_loss > bound ? blowup_run + 1 : 0;
      rec.diverged = blowup_run >= cfg.divergence_epochs;
    }
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.diverged) {
      log.diverged = true;
      log.stop_reason = "diverged";
      break;
    }

    if (rec.val_loss < log.best_val_loss - cfg.improve_tol) {
      log.best_val_loss = rec.val_loss;
      log.best_epoch = epoch;
      res.best = params;
      since_improve_lr = since_improve_stop = 0;
    } else {
      ++since_improve_lr;
      ++since_improve_stop;
      if (since_improve_lr >= cfg.lr_halve_patience) {
        lr *= 0.5;
        since_improve_lr = 0;
      }
      if (since_improve_stop >= cfg.early_stop_patience) {
        log.stop_reason = "early-stop";
        break;
      }
    }
    if (epoch == cfg.max_epochs) log.stop_reason = "max-epochs";
  }
  return res;
}

// Mean of one metric over a test set for an enhancement system.
inline double MeanMetric(MetricKind metric, const Dataset& test, const std::function<Waveform(const Waveform&)>& system) {
  Require(!test.empty(), ErrorCode::kInvalidConfig, "empty test set");
  long double acc = 0.0L;
  for (const Example& e : test) acc += ComputeMetric(metric, system(e.noisy), e.clean).value;
  return static_cast<double>(acc / test.size());
}

// ---------------------------------------------------------------------------
// Learning-rate sweep

inline std::vector<double> DefaultSweepLrs() { return {1e-2, 1e-3, 5e-4, 1e-4, 1e-5}; }

enum class CellStatus { kScheduled, kOk, kDiverged, kUnimplemented };

inline std::string_view CellStatusName(CellStatus s) {
  switch (s) {
    case CellStatus::kScheduled: return "scheduled";
    case CellStatus::kOk: return "ok";
    case CellStatus::kDiverged: return "diverged";
    case CellStatus::kUnimplemented: return "unimplemented";
  }
  return "?";
}

struct SweepCell {
  LossKind loss = LossKind::kTimeMse;
  double lr = 0.0;
  CellStatus status = CellStatus::kScheduled;
  std::map<MetricKind, double> scores;
  TrainLog log;
};

struct SweepResult {
  std::vector<LossKind> losses;
  std::vector<double> lrs;
  std::vector<MetricKind> metrics;
  std::map<MetricKind, double> noisy;  // unprocessed baseline
  std::vector<SweepCell> cells;        // loss-major, lr-minor

  const SweepCell& Cell(LossKind k, double lr) const {
    for (const SweepCell& c : cells)
      if (c.loss == k && c.lr == lr) return c;
    Fail(ErrorCode::kOutOfRange, "no sweep cell for " + std::string(LossName(k)));
  }
};

// One cell per (loss, lr); reserved losses are marked unimplemented up front.
inline SweepResult PlanSweep(const std::vector<LossKind>& losses, const std::vector<double>& lrs,
                             const std::vector<MetricKind>& metrics) {
  Require(!losses.empty() && !lrs.empty() && !metrics.empty(), ErrorCode::kInvalidConfig, "sweep axes must be non-empty");
  SweepResult r{losses, lrs, metrics, {}, {}};
  for (LossKind k : losses)
    for (double lr : lrs) {
      SweepCell c;
      c.loss = k;
      c.lr = lr;
      c.status = IsImplemented(k) ? CellStatus::kScheduled : CellStatus::kUnimplemented;
      r.cells.push_back(c);
    }
  return r;
}

struct SweepSets {
  Dataset train, val, test;
};

using CellCallback = std::function<void(const SweepCell&)>;

inline SweepResult LrSweep(const ModelConfig& model_cfg, const SweepSets& sets, const std::vector<LossKind>& losses,
                           const std::vector<double>& lrs, const std::vector<MetricKind>& metrics,
                           const TrainConfig& base, const CellCallback& on_cell = {}) {
  SweepResult r = PlanSweep(losses, lrs, metrics);
  for (MetricKind m : metrics) r.noisy[m] = MeanMetric(m, sets.test, [](const Waveform& y) { return y; });
  for (SweepCell& c : r.cells) {
    if (c.status == CellStatus::kScheduled) {
      TrainConfig tc = base;
      tc.loss_kind = c.loss;
      tc.lr0 = c.lr;
      FitResult fit = Fit(model_cfg, sets.train, sets.val, tc);
      c.log = fit.log;
      if (fit.log.diverged) {
        c.status = CellStatus::kDiverged;
      } else {
        c.status = CellStatus::kOk;
        for (MetricKind m : metrics)
          c.scores[m] = MeanMetric(m, sets.test, [&](const Waveform& y) { return Forward(fit.best, y, false, 0); });
      }
    }
    if (on_cell) on_cell(c);
  }
  return r;
}

// Rows: lr x metric; columns: noisy, then one per loss kind.
inline std::string SweepMatrixCsv(const SweepResult& r) {
  std::string out = "lr,metric,noisy";
  for (LossKind k : r.losses) out += "," + std::string(LossName(k));
  out += "\n";
  for (double lr : r.lrs)
    for (MetricKind m : r.metrics) {
      out += FormatReal(lr) + "," + std::string(MetricName(m)) + ",";
      out += r.noisy.count(m) ? FormatReal(r.noisy.at(m)) : "";
      for (LossKind k : r.losses) {
        const SweepCell& c = r.Cell(k, lr);
        out += ",";
        out += c.status == CellStatus::kOk ? FormatReal(c.scores.at(m)) : std::string(CellStatusName(c.status));
      }
      out += "\n";
    }
  return out;
}

struct BestLr {
  LossKind loss;
  std::optional<MetricKind> metric;  // empty for reserved losses
  std::optional<double> lr;          // empty when no cell trained
  double score = std::numeric_limits<double>::quiet_NaN();
};

// Per loss, the lr whose model scores best on the metric matching the loss.
inline std::vector<BestLr> BestLearningRates(const SweepResult& r) {
  std::vector<BestLr> out;
  for (LossKind k : r.losses) {
    BestLr b{k, std::nullopt, std::nullopt};
    if (IsImplemented(k)) {
      const MetricKind m = MatchingMetric(k);
      b.metric = m;
      for (double lr : r.lrs) {
        const SweepCell& c = r.Cell(k, lr);
        if (c.status != CellStatus::kOk || !c.scores.count(m)) continue;
        const double s = c.scores.at(m);
        const bool better = !b.lr || (HigherIsBetter(m) ? s > b.score : s < b.score);
        if (better) {
          b.lr = lr;
          b.score = s;
        }
      }
    }
    out.push_back(b);
  }
  return out;
}

inline std::string BestLrCsv(const std::vector<BestLr>& best) {
  std::string out = "loss,metric,best_lr,score\n";
  for (const BestLr& b : best) {
    out += std::string(LossName(b.loss)) + ",";
    out += b.metric ? std::string(MetricName(*b.metric)) : "";
    out += ",";
    out += b.lr ? FormatReal(*b.lr) : (IsImplemented(b.loss) ? "none" : "unimplemented");
    out += "," + (b.lr ? FormatReal(b.score) : std::string()) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Desk-scale synthetic task: amplitude-modulated tones and envelope-modulated
// narrowband noise in speech-shaped noise.

struct DeskTaskConfig {
  int n_train = 160;
  int n_val = 20;
  int n_test = 20;
  std::size_t length = 10240;
  int rate = 10000;
  double snr_lo = -5.0;
  double snr_hi = 5.0;
  int lpc_order = 12;
  std::uint64_t seed = 1;
};

// Even items: a tone at 300-1500 Hz with 2-6 Hz sinusoidal amplitude
// modulation. Odd items: white noise through a 120 Hz-wide resonator at
// 400-2000 Hz under a syllabic envelope. RMS 0.1.
inline Waveform DeskClean(std::size_t length, int rate, std::uint64_t seed, bool tone) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Waveform x;
  if (tone) {
    const double f = 300.0 + 1200.0 * u(rng), fm = 2.0 + 4.0 * u(rng), ph = 2.0 * std::numbers::pi * u(rng);
    x = synth::Tone(f, 1.0, length, rate, ph);
    for (std::size_t n = 0; n < length; ++n)
      x.samples[n] *= 0.55 + 0.45 * std::sin(2.0 * std::numbers::pi * fm * n / rate + 3.0 * ph);
  } else {
    const double f = 400.0 + 1600.0 * u(rng);
    x = synth::WhiteNoise(length, rate, rng());
    synth::Resonate(x.samples, f, 120.0, rate);
    const std::vector<double> env = synth::SyllabicEnvelope(length, rate, rng());
    for (std::size_t n = 0; n < length; ++n) x.samples[n] *= env[n];
  }
  const double rms = Rms(x.view());
  for (double& v : x.samples) v *= 0.1 / rms;
  return x;
}

inline SweepSets MakeDeskTask(const DeskTaskConfig& cfg) {
  Require(cfg.n_train > 0 && cfg.n_val > 0 && cfg.n_test > 0, ErrorCode::kInvalidConfig, "desk split sizes must be positive");
  std::vector<Waveform> speech;
  for (int k = 0; k < 8; ++k) speech.push_back(synth::SpeechLike(cfg.length, cfg.rate, detail::Mix64(cfg.seed, 1000 + k)));
  const LpcModel lpc = FitLpc(speech, cfg.lpc_order);
  SweepSets sets;
  const int total = cfg.n_train + cfg.n_val + cfg.n_test;
  for (int k = 0; k < total; ++k) {
    std::mt19937_64 rng(detail::Mix64(cfg.seed, static_cast<std::uint64_t>(k)));
    const Waveform clean = DeskClean(cfg.length, cfg.rate, rng(), k % 2 == 0);
    const Waveform noise = SynthesizeSsn(lpc, cfg.length, cfg.rate, rng());
    const double snr = cfg.snr_lo + (cfg.snr_hi - cfg.snr_lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    Example e{MixAtSnr(clean, noise, snr).noisy, clean};
    Dataset& dst = k < cfg.n_train ? sets.train : k < cfg.n_train + cfg.n_val ? sets.val : sets.test;
    dst.push_back(std::move(e));
  }
  return sets;
}

// Model used for desk-scale runs: widths {8, 16, 16}, filter 11.
inline ModelConfig DeskModelConfig(std::size_t length = 10240) { return CompactConfig(length, {8, 16, 16}, 11, 0.0); }

}  // namespace tdse
