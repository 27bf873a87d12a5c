#pragma once

// Batch evaluation over (noise type, SNR, metric, system) cells, report CSV,
// markdown tables with the best system per row marked, and the shift /
// polarity diagnostic.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "tdse/corpus.hpp"
#include "tdse/metrics.hpp"
#include "tdse/model.hpp"

namespace tdse {

struct CellKey {
  std::string noise_type;
  double snr_db = 0.0;
  MetricKind metric = MetricKind::kStoi;
  std::string system;

  bool operator<(const CellKey& o) const {
    return std::tie(noise_type, snr_db, metric, system) < std::tie(o.noise_type, o.snr_db, o.metric, o.system);
  }
};

enum class CellFlag { kNone, kDiverged, kUnimplemented };

struct MetricCell {
  double value = std::numeric_limits<double>::quiet_NaN();  // mean over successful pairs
  std::size_t n = 0;
  std::size_t saturated = 0;  // SI-SDR values that entered the mean at the cap
  std::size_t failed = 0;
  CellFlag flag = CellFlag::kNone;
};

class MetricTable {
 public:
  void Set(const CellKey& key, const MetricCell& cell) {
    Require(!cells_.count(key), ErrorCode::kInvalidConfig,
            "duplicate cell " + key.noise_type + "/" + FormatReal(key.snr_db) + "/" + std::string(MetricName(key.metric)) +
                "/" + key.system);
    cells_[key] = cell;
    Remember(noise_types_, key.noise_type);
    Remember(systems_, key.system);
    if (std::find(metrics_.begin(), metrics_.end(), key.metric) == metrics_.end()) metrics_.push_back(key.metric);
    if (std::find(snrs_.begin(), snrs_.end(), key.snr_db) == snrs_.end()) {
      snrs_.push_back(key.snr_db);
      std::sort(snrs_.begin(), snrs_.end());
    }
  }

  const MetricCell* Find(const CellKey& key) const {
    const auto it = cells_.find(key);
    return it == cells_.end() ? nullptr : &it->second;
  }
  const MetricCell& At(const CellKey& key) const {
    const MetricCell* c = Find(key);
    Require(c != nullptr, ErrorCode::kOutOfRange, "no cell for system " + key.system);
    return *c;
  }

  // Best score among the systems of one (noise type, SNR, metric) row: the
  // maximum for higher-is-better metrics, the minimum for the MSEs.
  bool IsBest(const CellKey& key) const {
    const MetricCell* mine = Find(key);
    if (!mine || mine->flag != CellFlag::kNone || mine->n == 0) return false;
    for (const std::string& s : systems_) {
      CellKey other = key;
      other.system = s;
      const MetricCell* c = Find(other);
      if (!c || c->flag != CellFlag::kNone || c->n == 0) continue;
      if (HigherIsBetter(key.metric) ? c->value > mine->value : c->value < mine->value) return false;
    }
    return true;
  }

  const std::vector<std::string>& noise_types() const { return noise_types_; }
  const std::vector<std::string>& systems() const { return systems_; }
  const std::vector<double>& snrs() const { return snrs_; }
  const std::vector<MetricKind>& metrics() const { return metrics_; }
  const std::map<CellKey, MetricCell>& cells() const { return cells_; }

  // noise_type,snr_db,metric,system,value,n,flags (flags ';'-separated)
  std::string Csv() const {
    std::string out = "noise_type,snr_db,metric,system,value,n,flags\n";
    for (const std::string& nt : noise_types_)
      for (double snr : snrs_)
        for (MetricKind m : metrics_)
          for (const std::string& sys : systems_) {
            const CellKey key{nt, snr, m, sys};
            const MetricCell* c = Find(key);
            if (!c) continue;
            std::vector<std::string> flags;
            if (c->flag == CellFlag::kDiverged) flags.push_back("diverged");
            if (c->flag == CellFlag::kUnimplemented) flags.push_back("unimplemented");
            if (IsBest(key)) flags.push_back("best");
            if (c->saturated) flags.push_back("saturated=" + std::to_string(c->saturated));
            if (c->failed) flags.push_back("failed=" + std::to_string(c->failed));
            std::string f;
            for (const std::string& s : flags) f += (f.empty() ? "" : ";") + s;
            const std::string value = c->flag == CellFlag::kNone && c->n > 0 ? FormatReal(c->value) : "";
            out += nt + "," + FormatReal(snr) + "," + std::string(MetricName(m)) + "," + sys + "," + value + "," +
                   std::to_string(c->n) + "," + f + "\n";
          }
    return out;
  }

  // One markdown table per noise type: rows SNR x metric, columns systems,
  // best value in bold, saturated counts as a dagger footnote.
  std::string Markdown(int digits = 3) const {
    std::string out;
    for (const std::string& nt : noise_types_) {
      out += "### " + nt + "\n\n| SNR (dB) | metric |";
      for (const std::string& s : systems_) out += " " + s + " |";
      out += "\n|---|---|";
      for (std::size_t i = 0; i < systems_.size(); ++i) out += "---|";
      out += "\n";
      bool any_saturated = false;
      for (double snr : snrs_)
        for (MetricKind m : metrics_) {
          out += "| " + FormatFixed(snr, 1) + " | " + std::string(MetricName(m)) + " |";
          for (const std::string& sys : systems_) {
            const CellKey key{nt, snr, m, sys};
            const MetricCell* c = Find(key);
            std::string txt;
            if (!c) {
              txt = "";
            } else if (c->flag == CellFlag::kDiverged) {
              txt = "diverged";
            } else if (c->flag == CellFlag::kUnimplemented) {
              txt = "unimplemented";
            } else if (c->n == 0) {
              txt = "n/a";
            } else {
              txt = FormatFixed(c->value, digits);
              if (IsBest(key)) txt = "**" + txt + "**";
              if (c->saturated) {
                txt += "†";
                any_saturated = true;
              }
            }
            out += " " + txt + " |";
          }
          out += "\n";
        }
      if (any_saturated) out += "\n† includes SI-SDR values saturated at " + FormatFixed(kSiSdrCapDb, 0) + " dB\n";
      out += "\n";
    }
    return out;
  }

  static std::string FormatFixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
  }

 private:
  static void Remember(std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  }

  std::map<CellKey, MetricCell> cells_;
  std::vector<std::string> noise_types_, systems_;
  std::vector<double> snrs_;
  std::vector<MetricKind> metrics_;
};

struct EvalPair {
  std::string id;
  std::string noise_type;
  double snr_db = 0.0;
  fs::path clean;
  fs::path enhanced;
};

struct PairFailure {
  std::string id;
  std::string error;
};

struct EvalResult {
  MetricTable table;
  std::vector<PairFailure> failures;
};

// Rows of an index.csv as evaluation pairs. With `enhanced_dir` empty the
// noisy files are scored (the unprocessed system); otherwise
// enhanced_dir/<id>.wav. Rows whose mixture failed are skipped.
inline std::vector<EvalPair> PairsFromIndex(const fs::path& index_path, const fs::path& enhanced_dir = {}) {
  std::vector<EvalPair> pairs;
  const fs::path base = index_path.parent_path();
  for (const IndexRow& r : LoadIndex(index_path)) {
    if (r.noisy_path.empty()) continue;
    const fs::path enh = enhanced_dir.empty() ? base / r.noisy_path : enhanced_dir / (r.id + ".wav");
    pairs.push_back({r.id, r.noise_kind, r.snr_db, base / r.clean_path, enh});
  }
  return pairs;
}

// Each metric per pair on the whole signals (no VAD), averaged per
// (noise type, SNR). Pairs that cannot be read or scored are listed in
// `failures` and counted in the cell; they do not enter the mean.
inline void EvaluatePairsInto(MetricTable& table, std::vector<PairFailure>& failures, const std::vector<EvalPair>& pairs,
                              const std::vector<MetricKind>& metrics, const std::string& system) {
  Require(!metrics.empty(), ErrorCode::kInvalidConfig, "no metrics requested");
  struct Acc {
    long double sum = 0.0L;
    std::size_t n = 0, saturated = 0, failed = 0;
  };
  std::map<std::pair<std::string, double>, std::map<MetricKind, Acc>> acc;
  std::vector<std::pair<std::string, double>> order;
  for (const EvalPair& p : pairs) {
    const auto cell = std::make_pair(p.noise_type, p.snr_db);
    if (!acc.count(cell)) order.push_back(cell);
    auto& row = acc[cell];
    for (MetricKind m : metrics) row[m];
    try {
      const Waveform clean = LoadWav(p.clean);
      const Waveform enh = LoadWav(p.enhanced);
      std::vector<MetricScore> scores;
      for (MetricKind m : metrics) scores.push_back(ComputeMetric(m, enh, clean));
      for (const MetricScore& s : scores) {
        Acc& a = row[s.kind];
        a.sum += s.value;
        ++a.n;
        a.saturated += s.saturated;
      }
    } catch (const Error& e) {
      failures.push_back({p.id, e.what()});
      for (MetricKind m : metrics) ++row[m].failed;
    }
  }
  for (const auto& cell : order)
    for (MetricKind m : metrics) {
      const Acc& a = acc[cell][m];
      MetricCell c;
      c.n = a.n;
      c.saturated = a.saturated;
      c.failed = a.failed;
      if (a.n) c.value = static_cast<double>(a.sum / a.n);
      table.Set({cell.first, cell.second, m, system}, c);
    }
}

inline EvalResult EvaluatePairs(const std::vector<EvalPair>& pairs, const std::vector<MetricKind>& metrics,
                                const std::string& system = "enhanced") {
  EvalResult r;
  EvaluatePairsInto(r.table, r.failures, pairs, metrics, system);
  return r;
}

inline std::string FailuresCsv(const std::vector<PairFailure>& failures) {
  std::string out = "id,error\n";
  for (const PairFailure& f : failures) {
    std::string msg = f.error;
    std::replace(msg.begin(), msg.end(), ',', ';');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    out += f.id + "," + msg + "\n";
  }
  return out;
}

// Runs the model over every noisy file of an index and writes
// out_dir/<id>.wav (16-bit, so scores reflect what is on disk).
inline std::vector<PairFailure> EnhanceIndex(const ModelParams& params, const fs::path& index_path,
                                             const fs::path& out_dir) {
  std::vector<PairFailure> failures;
  const fs::path base = index_path.parent_path();
  fs::create_directories(out_dir);
  for (const IndexRow& r : LoadIndex(index_path)) {
    if (r.noisy_path.empty()) continue;
    try {
      const Waveform y = LoadWav(base / r.noisy_path);
      WriteWav(out_dir / (r.id + ".wav"), Forward(params, y, false, 0));
    } catch (const Error& e) {
      failures.push_back({r.id, e.what()});
    }
  }
  return failures;
}

// ---------------------------------------------------------------------------
// Shift / polarity diagnostic

struct ProbeRow {
  int shift = 0;
  int polarity = 1;
  std::map<MetricKind, double> scores;
  bool si_sdr_saturated = false;
};

// x delayed by s samples (advanced for s < 0), zero filled.
inline Waveform Shifted(const Waveform& x, int s) {
  Waveform y = x;
  const long long n = static_cast<long long>(x.size());
  for (long long i = 0; i < n; ++i) {
    const long long j = i - s;
    y.samples[i] = j >= 0 && j < n ? x.samples[j] : 0.0;
  }
  return y;
}

// For each shift: x delayed, -x, and -x delayed (shift 0 appears once per
// polarity), scored against x with every metric.
inline std::vector<ProbeRow> ShiftPolarityProbe(const Waveform& x, const std::vector<int>& shifts) {
  for (int s : shifts)
    Require(static_cast<std::size_t>(std::abs(s)) < x.size() / 4, ErrorCode::kOutOfRange,
            "shift " + std::to_string(s) + " is not small relative to the signal");
  std::vector<ProbeRow> rows;
  std::vector<std::pair<int, int>> cases;
  for (int pol : {1, -1})
    for (int s : shifts)
      if (std::find(cases.begin(), cases.end(), std::make_pair(s, pol)) == cases.end()) cases.push_back({s, pol});
  for (const auto& [s, pol] : cases) {
    Waveform y = Shifted(x, s);
    if (pol < 0)
      for (double& v : y.samples) v = -v;
    ProbeRow r;
    r.shift = s;
    r.polarity = pol;
    for (MetricKind m : AllMetrics()) {
      const MetricScore sc = ComputeMetric(m, y, x);
      r.scores[m] = sc.value;
      if (m == MetricKind::kSiSdr) r.si_sdr_saturated = sc.saturated;
    }
    rows.push_back(r);
  }
  return rows;
}

inline std::string ProbeCsv(const std::vector<ProbeRow>& rows) {
  std::string out = "shift,polarity";
  for (MetricKind m : AllMetrics()) out += "," + std::string(MetricName(m));
  out += ",si_sdr_saturated\n";
  for (const ProbeRow& r : rows) {
    out += std::to_string(r.shift) + "," + (r.polarity > 0 ? "+" : "-");
    for (MetricKind m : AllMetrics()) out += "," + FormatReal(r.scores.at(m));
    out += std::string(",") + (r.si_sdr_saturated ? "1" : "0") + "\n";
  }
  return out;
}

}  // namespace tdse
