#pragma once

// Audio I/O, SNR-controlled mixing, stationary noise synthesis (speech-shaped
// and babble) and manifest-driven dataset construction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tdse/dsp.hpp"
#include "tdse/error.hpp"
#include "tdse/perceptual.hpp"

namespace tdse {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// WAV: RIFF, mono, 16-bit PCM, little-endian.

namespace detail {

inline std::uint32_t ReadU32(const unsigned char* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t ReadU16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

inline void PutU32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void PutU16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

}  // namespace detail

inline Waveform DecodeWav(const std::string& bytes, const std::string& name = "<memory>") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  Require(n >= 12 && bytes.compare(0, 4, "RIFF") == 0 && bytes.compare(8, 4, "WAVE") == 0,
          ErrorCode::kUnsupportedFormat, name + ": not a RIFF/WAVE file");
  bool have_fmt = false;
  int channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= n) {
    const std::string id = bytes.substr(pos, 4);
    const std::size_t size = detail::ReadU32(p + pos + 4);
    const std::size_t body = pos + 8;
    Require(body + size <= n, ErrorCode::kUnsupportedFormat, name + ": truncated '" + id + "' chunk");
    if (id == "fmt ") {
      Require(size >= 16, ErrorCode::kUnsupportedFormat, name + ": short fmt chunk");
      format = detail::ReadU16(p + body);
      channels = detail::ReadU16(p + body + 2);
      rate = detail::ReadU32(p + body + 4);
      bits = detail::ReadU16(p + body + 14);
      have_fmt = true;
    } else if (id == "data") {
      Require(have_fmt, ErrorCode::kUnsupportedFormat, name + ": data chunk before fmt chunk");
      Require(format == 1, ErrorCode::kUnsupportedFormat,
              name + ": audio format " + std::to_string(format) + " is not linear PCM");
      Require(channels == 1, ErrorCode::kUnsupportedFormat,
              name + ": " + std::to_string(channels) + " channels, only mono is supported");
      Require(bits == 16, ErrorCode::kUnsupportedFormat,
              name + ": " + std::to_string(bits) + "-bit samples, only 16-bit is supported");
      Waveform w;
      w.sample_rate = static_cast<int>(rate);
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i)
        w.samples[i] = static_cast<std::int16_t>(detail::ReadU16(p + body + 2 * i)) / 32768.0;
      return w;
    }
    pos = body + size + (size & 1);
  }
  Fail(ErrorCode::kUnsupportedFormat, name + ": no data chunk");
}

inline std::int16_t QuantizeSample(double v) {
  const double q = std::nearbyint(v * 32768.0);
  return static_cast<std::int16_t>(std::clamp(q, -32768.0, 32767.0));
}

inline std::string EncodeWav(const Waveform& w) {
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  detail::PutU32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::PutU32(out, 16);
  detail::PutU16(out, 1);
  detail::PutU16(out, 1);
  detail::PutU32(out, static_cast<std::uint32_t>(w.sample_rate));
  detail::PutU32(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  detail::PutU16(out, 2);
  detail::PutU16(out, 16);
  out += "data";
  detail::PutU32(out, data_bytes);
  for (double v : w.samples) detail::PutU16(out, static_cast<std::uint16_t>(QuantizeSample(v)));
  return out;
}

inline std::string ReadFileBytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  Require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void WriteFileBytes(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  Require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  Require(static_cast<bool>(out), ErrorCode::kIo, "short write to " + path.string());
}

inline Waveform LoadWav(const fs::path& path) { return DecodeWav(ReadFileBytes(path), path.string()); }
inline void WriteWav(const fs::path& path, const Waveform& w) { WriteFileBytes(path, EncodeWav(w)); }

// ---------------------------------------------------------------------------
// Levels and mixing

inline double Rms(std::span<const double> x) {
  Require(!x.empty(), ErrorCode::kSignalTooShort, "RMS of an empty signal");
  long double acc = 0.0L;
  for (double v : x) acc += static_cast<long double>(v) * v;
  return static_cast<double>(std::sqrt(acc / x.size()));
}

// RMS over the frames kept by the 25 ms / 40 dB energy VAD; an approximation
// of an active speech level measurement.
inline double ActiveLevel(const Waveform& x) {
  Require(std::any_of(x.samples.begin(), x.samples.end(), [](double v) { return v != 0.0; }),
          ErrorCode::kZeroSignal, "active level of an all-zero signal");
  return Rms(VadTrim(x).trimmed.view());
}

struct Mixture {
  Waveform noisy;
  double gain = 0.0;
};

inline double NoiseGainForSnr(double active_level, double noise_rms, double snr_db) {
  return active_level / (noise_rms * std::pow(10.0, snr_db / 20.0));
}

inline double MixSnrDb(const Waveform& clean, const Waveform& noise, double gain) {
  return 20.0 * std::log10(ActiveLevel(clean) / (gain * Rms(noise.view())));
}

// y = x + g v with g chosen so that 20 log10(active_level(x) / (g rms(v))) = snr_db.
inline Mixture MixAtSnr(const Waveform& clean, const Waveform& noise, double snr_db) {
  Require(clean.size() == noise.size(), ErrorCode::kLengthMismatch,
          "clean has " + std::to_string(clean.size()) + " samples, noise has " +
              std::to_string(noise.size()));
  Require(std::isfinite(snr_db), ErrorCode::kInvalidConfig, "SNR must be finite");
  const double noise_rms = Rms(noise.view());
  Require(noise_rms > 0.0, ErrorCode::kZeroSignal, "noise has zero energy");
  Mixture m;
  m.gain = NoiseGainForSnr(ActiveLevel(clean), noise_rms, snr_db);
  m.noisy = clean;
  for (std::size_t n = 0; n < clean.size(); ++n) m.noisy.samples[n] += m.gain * noise.samples[n];
  return m;
}

// ---------------------------------------------------------------------------
// Speech-shaped noise

// Prediction polynomial A(z) = 1 + a[1] z^-1 + ... + a[p] z^-p; a[0] == 1.
struct LpcModel {
  std::vector<double> a{1.0};
  std::vector<double> reflection;
  double error = 0.0;
  int order() const { return static_cast<int>(a.size()) - 1; }
};

inline LpcModel FitLpc(const std::vector<Waveform>& corpus, int order) {
  Require(!corpus.empty(), ErrorCode::kCorpusTooSmall, "LPC fit needs a non-empty corpus");
  Require(order >= 0, ErrorCode::kInvalidConfig, "LPC order must be non-negative");
  // Autocorrelation of the concatenated corpus.
  std::vector<double> joined;
  for (const Waveform& w : corpus) joined.insert(joined.end(), w.samples.begin(), w.samples.end());
  Require(joined.size() > static_cast<std::size_t>(order), ErrorCode::kSignalTooShort,
          "corpus shorter than the LPC order");
  std::vector<long double> r(order + 1, 0.0L);
  for (int k = 0; k <= order; ++k)
    for (std::size_t n = k; n < joined.size(); ++n)
      r[k] += static_cast<long double>(joined[n]) * joined[n - k];
  Require(r[0] > 0.0L, ErrorCode::kZeroSignal, "LPC corpus has zero energy");

  LpcModel m;
  m.a.assign(order + 1, 0.0);
  m.a[0] = 1.0;
  std::vector<long double> a(order + 1, 0.0L), prev;
  a[0] = 1.0L;
  long double err = r[0];
  for (int i = 1; i <= order; ++i) {
    long double acc = r[i];
    for (int j = 1; j < i; ++j) acc += a[j] * r[i - j];
    const long double k = -acc / err;
    Require(std::isfinite(static_cast<double>(k)) && std::fabs(static_cast<double>(k)) < 1.0,
            ErrorCode::kUnstableFilter,
            "reflection coefficient " + std::to_string(static_cast<double>(k)) + " at order " +
                std::to_string(i));
    prev = a;
    for (int j = 1; j < i; ++j) a[j] = prev[j] + k * prev[i - j];
    a[i] = k;
    err *= (1.0L - k * k);
    m.reflection.push_back(static_cast<double>(k));
  }
  for (int i = 0; i <= order; ++i) m.a[i] = static_cast<double>(a[i]);
  m.error = static_cast<double>(err);
  return m;
}

inline constexpr std::size_t kSsnWarmup = 2048;

// Seeded white Gaussian noise through 1/A(z), first kSsnWarmup samples
// discarded, scaled to unit RMS.
inline Waveform SynthesizeSsn(const LpcModel& lpc, std::size_t length, int rate, std::uint64_t seed) {
  Require(length > 0, ErrorCode::kInvalidConfig, "noise length must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int p = lpc.order();
  std::vector<double> hist(p, 0.0);  // y[n-1], ..., y[n-p]
  Waveform out;
  out.sample_rate = rate;
  out.samples.resize(length);
  for (std::size_t n = 0; n < length + kSsnWarmup; ++n) {
    double y = gauss(rng);
    for (int k = 1; k <= p; ++k) y -= lpc.a[k] * hist[k - 1];
    if (p > 0) {
      std::copy_backward(hist.begin(), hist.end() - 1, hist.end());
      hist[0] = y;
    }
    if (n >= kSsnWarmup) out.samples[n - kSsnWarmup] = y;
  }
  const double rms = Rms(out.view());
  for (double& v : out.samples) v /= rms;
  return out;
}

inline Waveform GenSsn(const std::vector<Waveform>& corpus, int lpc_order, std::size_t length,
                       std::uint64_t seed) {
  return SynthesizeSsn(FitLpc(corpus, lpc_order), length, corpus.front().sample_rate, seed);
}

// ---------------------------------------------------------------------------
// Babble

struct BabblePiece {
  std::size_t utterance;
  std::size_t offset;  // first sample taken from the utterance
  std::size_t count;
};

// Stream s draws its pieces from one mt19937_64 seeded with `seed`, streams in
// order: an utterance index rng() % corpus_size and, for the first piece only,
// a start offset rng() % utterance_length; later pieces start at sample 0.
inline std::vector<std::vector<BabblePiece>> BabblePlan(const std::vector<std::size_t>& lengths,
                                                        int n_speakers, std::size_t length,
                                                        std::uint64_t seed) {
  Require(n_speakers >= 1, ErrorCode::kInvalidConfig, "babble needs at least one speaker");
  Require(lengths.size() >= static_cast<std::size_t>(n_speakers), ErrorCode::kCorpusTooSmall,
          "babble with " + std::to_string(n_speakers) + " speakers needs at least that many utterances, got " +
              std::to_string(lengths.size()));
  for (std::size_t len : lengths) Require(len > 0, ErrorCode::kSignalTooShort, "empty babble utterance");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<BabblePiece>> plan(n_speakers);
  for (int s = 0; s < n_speakers; ++s) {
    std::size_t filled = 0;
    bool first = true;
    while (filled < length) {
      const std::size_t u = rng() % lengths.size();
      const std::size_t off = first ? rng() % lengths[u] : 0;
      const std::size_t take = std::min(lengths[u] - off, length - filled);
      plan[s].push_back({u, off, take});
      filled += take;
      first = false;
    }
  }
  return plan;
}

inline Waveform GenBabble(const std::vector<Waveform>& corpus, int n_speakers, std::size_t length,
                          std::uint64_t seed) {
  Require(length > 0, ErrorCode::kInvalidConfig, "noise length must be positive");
  std::vector<std::size_t> lengths;
  for (const Waveform& w : corpus) lengths.push_back(w.size());
  const auto plan = BabblePlan(lengths, n_speakers, length, seed);
  Waveform out;
  out.sample_rate = corpus.front().sample_rate;
  out.samples.assign(length, 0.0);
  std::vector<double> stream(length);
  for (const auto& pieces : plan) {
    std::size_t pos = 0;
    for (const BabblePiece& p : pieces) {
      std::copy_n(corpus[p.utterance].samples.begin() + p.offset, p.count, stream.begin() + pos);
      pos += p.count;
    }
    const double rms = Rms(stream);
    Require(rms > 0.0, ErrorCode::kZeroSignal, "babble stream has zero energy");
    for (std::size_t n = 0; n < length; ++n) out.samples[n] += stream[n] / rms;
  }
  const double rms = Rms(out.view());
  Require(rms > 0.0, ErrorCode::kZeroSignal, "babble sums to zero");
  for (double& v : out.samples) v /= rms;
  return out;
}

// ---------------------------------------------------------------------------
// Dataset construction

enum class NoiseKind { kSsn, kBabble, kFile };

inline std::string_view NoiseKindName(NoiseKind k) {
  switch (k) {
    case NoiseKind::kSsn: return "ssn";
    case NoiseKind::kBabble: return "babble";
    case NoiseKind::kFile: return "file";
  }
  return "unknown";
}

struct NoiseSource {
  NoiseKind kind = NoiseKind::kSsn;
  int lpc_order = 12;
  int n_speakers = 6;
  fs::path file;
};

// "ssn", "ssn:ORDER", "babble", "babble:SPEAKERS" or "file:PATH".
inline NoiseSource ParseNoiseSource(const std::string& text) {
  NoiseSource src;
  const std::size_t colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  auto to_int = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    Fail(ErrorCode::kParse, "bad integer '" + s + "' in noise source '" + text + "'");
  };
  if (head == "ssn") {
    src.kind = NoiseKind::kSsn;
    if (!arg.empty()) src.lpc_order = to_int(arg);
    Require(src.lpc_order >= 1, ErrorCode::kInvalidConfig, "LPC order must be at least 1");
  } else if (head == "babble") {
    src.kind = NoiseKind::kBabble;
    if (!arg.empty()) src.n_speakers = to_int(arg);
    Require(src.n_speakers >= 1, ErrorCode::kInvalidConfig, "babble needs at least one speaker");
  } else if (head == "file" && !arg.empty()) {
    src.kind = NoiseKind::kFile;
    src.file = arg;
  } else {
    Fail(ErrorCode::kParse, "unknown noise source '" + text + "'");
  }
  return src;
}

inline std::string NoiseSourceText(const NoiseSource& s) {
  switch (s.kind) {
    case NoiseKind::kSsn: return "ssn:" + std::to_string(s.lpc_order);
    case NoiseKind::kBabble: return "babble:" + std::to_string(s.n_speakers);
    case NoiseKind::kFile: return "file:" + s.file.string();
  }
  return "";
}

struct MixSpec {
  std::string id;
  fs::path clean_path;
  NoiseSource noise;
  double snr_db = 0.0;
  std::uint64_t seed = 0;
  bool apply_vad = false;
  int target_rate = 10000;
  std::size_t target_len = 38656;
};

inline constexpr const char* kManifestHeader = "id,clean_path,noise,snr_db,seed,apply_vad,target_rate,target_len";
inline constexpr const char* kIndexHeader = "id,clean_path,noisy_path,snr_db,noise_kind,seed,gain";

inline std::vector<std::string> SplitCsvLine(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string FormatReal(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double ParseReal(const std::string& s, const std::string& what) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  Fail(ErrorCode::kParse, "bad number '" + s + "' for " + what);
}

inline std::uint64_t ParseUint(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used == s.size() && s.find('-') == std::string::npos) return v;
  } catch (const std::exception&) {
  }
  Fail(ErrorCode::kParse, "bad unsigned integer '" + s + "' for " + what);
}

// Non-empty lines with any trailing '\r' removed.
inline std::vector<std::string> SplitLines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline std::vector<std::string> ReadLines(const fs::path& path) { return SplitLines(ReadFileBytes(path)); }

// Relative clean and noise paths resolve against `base`.
inline std::vector<MixSpec> ParseManifest(const std::vector<std::string>& lines, const fs::path& base = {}) {
  Require(!lines.empty() && lines[0] == kManifestHeader, ErrorCode::kParse,
          std::string("manifest header must be '") + kManifestHeader + "'");
  std::vector<MixSpec> specs;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto c = SplitCsvLine(lines[i]);
    const std::string where = "manifest line " + std::to_string(i + 1);
    Require(c.size() == 8, ErrorCode::kParse, where + ": expected 8 fields, got " + std::to_string(c.size()));
    MixSpec s;
    s.id = c[0];
    Require(!s.id.empty() && s.id.find('/') == std::string::npos, ErrorCode::kParse, where + ": bad id");
    s.clean_path = c[1];
    if (s.clean_path.is_relative()) s.clean_path = base / s.clean_path;
    s.noise = ParseNoiseSource(c[2]);
    if (s.noise.kind == NoiseKind::kFile && s.noise.file.is_relative()) s.noise.file = base / s.noise.file;
    s.snr_db = ParseReal(c[3], where + " snr_db");
    Require(std::isfinite(s.snr_db), ErrorCode::kInvalidConfig, where + ": snr_db must be finite");
    s.seed = ParseUint(c[4], where + " seed");
    Require(c[5] == "0" || c[5] == "1", ErrorCode::kParse, where + ": apply_vad must be 0 or 1");
    s.apply_vad = c[5] == "1";
    s.target_rate = static_cast<int>(ParseUint(c[6], where + " target_rate"));
    s.target_len = ParseUint(c[7], where + " target_len");
    Require(s.target_len > 0, ErrorCode::kInvalidConfig, where + ": target_len must be positive");
    specs.push_back(std::move(s));
  }
  return specs;
}

inline std::vector<MixSpec> LoadManifest(const fs::path& path) {
  return ParseManifest(ReadLines(path), path.parent_path());
}

inline std::string ManifestText(const std::vector<MixSpec>& specs) {
  std::string out = std::string(kManifestHeader) + "\n";
  for (const MixSpec& s : specs)
    out += s.id + "," + s.clean_path.string() + "," + NoiseSourceText(s.noise) + "," + FormatReal(s.snr_db) +
           "," + std::to_string(s.seed) + "," + (s.apply_vad ? "1" : "0") + "," +
           std::to_string(s.target_rate) + "," + std::to_string(s.target_len) + "\n";
  return out;
}

struct IndexRow {
  std::string id;
  std::string clean_path;  // relative to the index file
  std::string noisy_path;  // empty when the item failed
  double snr_db = 0.0;
  std::string noise_kind;
  std::uint64_t seed = 0;
  double gain = std::numeric_limits<double>::quiet_NaN();
};

inline std::string IndexText(const std::vector<IndexRow>& rows) {
  std::string out = std::string(kIndexHeader) + "\n";
  for (const IndexRow& r : rows)
    out += r.id + "," + r.clean_path + "," + r.noisy_path + "," + FormatReal(r.snr_db) + "," + r.noise_kind +
           "," + std::to_string(r.seed) + "," + FormatReal(r.gain) + "\n";
  return out;
}

inline std::vector<IndexRow> LoadIndex(const fs::path& path) {
  const auto lines = ReadLines(path);
  Require(!lines.empty() && lines[0] == kIndexHeader, ErrorCode::kParse,
          path.string() + ": index header must be '" + kIndexHeader + "'");
  std::vector<IndexRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto c = SplitCsvLine(lines[i]);
    const std::string where = path.string() + " line " + std::to_string(i + 1);
    Require(c.size() == 7, ErrorCode::kParse, where + ": expected 7 fields");
    rows.push_back({c[0], c[1], c[2], ParseReal(c[3], where), c[4], ParseUint(c[5], where),
                    ParseReal(c[6], where)});
  }
  return rows;
}

// Reference material shared by every item of a build: the speech corpus for
// SSN fitting and babble, and cached LPC fits per order.
class NoiseBank {
 public:
  explicit NoiseBank(std::vector<Waveform> corpus) : corpus_(std::move(corpus)) {}

  const std::vector<Waveform>& corpus() const { return corpus_; }

  Waveform Make(const NoiseSource& src, std::size_t length, int rate, std::uint64_t seed) {
    switch (src.kind) {
      case NoiseKind::kSsn: {
        Require(!corpus_.empty(), ErrorCode::kCorpusTooSmall, "SSN needs a speech corpus");
        auto it = std::find_if(lpc_.begin(), lpc_.end(),
                               [&](const LpcModel& m) { return m.order() == src.lpc_order; });
        if (it == lpc_.end()) {
          lpc_.push_back(FitLpc(corpus_, src.lpc_order));
          it = lpc_.end() - 1;
        }
        return SynthesizeSsn(*it, length, rate, seed);
      }
      case NoiseKind::kBabble: {
        Waveform b = GenBabble(corpus_, src.n_speakers, length, seed);
        b.sample_rate = rate;
        return b;
      }
      case NoiseKind::kFile: {
        const Waveform& src_wav = FileNoise(src.file);
        Require(src_wav.sample_rate == rate, ErrorCode::kRateMismatch,
                src.file.string() + " is at " + std::to_string(src_wav.sample_rate) + " Hz, need " +
                    std::to_string(rate));
        std::mt19937_64 rng(seed);
        const std::size_t start = rng() % src_wav.size();
        Waveform out;
        out.sample_rate = rate;
        out.samples.resize(length);
        for (std::size_t n = 0; n < length; ++n) out.samples[n] = src_wav.samples[(start + n) % src_wav.size()];
        return out;
      }
    }
    Fail(ErrorCode::kInvalidConfig, "noise kind");
  }

 private:
  const Waveform& FileNoise(const fs::path& path) {
    for (auto& [p, w] : files_)
      if (p == path) return w;
    Waveform w = LoadWav(path);
    Require(!w.empty(), ErrorCode::kSignalTooShort, path.string() + " is empty");
    files_.emplace_back(path, std::move(w));
    return files_.back().second;
  }

  std::vector<Waveform> corpus_;
  std::vector<LpcModel> lpc_;
  std::vector<std::pair<fs::path, Waveform>> files_;
};

// Loads, optionally VAD-trims, then truncates or zero-pads (at the tail) a
// clean utterance to the item's target length.
inline Waveform PrepareClean(const MixSpec& spec) {
  Waveform x = LoadWav(spec.clean_path);
  Require(x.sample_rate == spec.target_rate, ErrorCode::kRateMismatch,
          spec.clean_path.string() + " is at " + std::to_string(x.sample_rate) + " Hz, expected " +
              std::to_string(spec.target_rate));
  if (spec.apply_vad) x = VadTrim(x).trimmed;
  x.samples.resize(spec.target_len, 0.0);
  return x;
}

// Every distinct readable clean file of a manifest, in first-use order;
// unreadable files are skipped here and reported per item by the build.
inline std::vector<Waveform> ManifestCorpus(const std::vector<MixSpec>& manifest) {
  std::vector<fs::path> seen;
  std::vector<Waveform> corpus;
  for (const MixSpec& s : manifest) {
    if (std::find(seen.begin(), seen.end(), s.clean_path) != seen.end()) continue;
    seen.push_back(s.clean_path);
    try {
      corpus.push_back(LoadWav(s.clean_path));
    } catch (const Error&) {
    }
  }
  return corpus;
}

struct BuildResult {
  std::vector<IndexRow> rows;
  std::vector<std::pair<std::string, std::string>> errors;  // id, message
  fs::path index_path;
};

// Writes clean/<id>.wav, noisy/<id>.wav, index.csv and index_errors.csv under
// out_dir. Noise for SSN and babble is derived from `corpus`; pass an empty
// corpus to use every clean file referenced by the manifest.
inline BuildResult BuildDataset(const std::vector<MixSpec>& manifest, const fs::path& out_dir,
                                std::vector<Waveform> corpus = {}) {
  if (corpus.empty()) corpus = ManifestCorpus(manifest);
  NoiseBank bank(std::move(corpus));
  fs::create_directories(out_dir / "clean");
  fs::create_directories(out_dir / "noisy");
  BuildResult result;
  for (const MixSpec& spec : manifest) {
    IndexRow row;
    row.id = spec.id;
    row.snr_db = spec.snr_db;
    row.noise_kind = std::string(NoiseKindName(spec.noise.kind));
    row.seed = spec.seed;
    try {
      const Waveform x = PrepareClean(spec);
      const Waveform v = bank.Make(spec.noise, spec.target_len, spec.target_rate, spec.seed);
      const Mixture mix = MixAtSnr(x, v, spec.snr_db);
      row.clean_path = "clean/" + spec.id + ".wav";
      row.noisy_path = "noisy/" + spec.id + ".wav";
      WriteWav(out_dir / row.clean_path, x);
      WriteWav(out_dir / row.noisy_path, mix.noisy);
      row.gain = mix.gain;
    } catch (const Error& e) {
      row.noisy_path.clear();
      result.errors.emplace_back(spec.id, e.what());
    }
    result.rows.push_back(std::move(row));
  }
  result.index_path = out_dir / "index.csv";
  WriteFileBytes(result.index_path, IndexText(result.rows));
  std::string err = "id,error\n";
  for (const auto& [id, msg] : result.errors) {
    std::string clean = msg;
    std::replace(clean.begin(), clean.end(), ',', ';');
    std::replace(clean.begin(), clean.end(), '\n', ' ');
    err += id + "," + clean + "\n";
  }
  WriteFileBytes(out_dir / "index_errors.csv", err);
  return result;
}

// Recomputes each successful row's SNR from the written clean file, the
// regenerated noise and the recorded gain; returns the largest deviation in dB.
inline double MaxSnrDeviationDb(const std::vector<MixSpec>& manifest, const fs::path& out_dir,
                                std::vector<Waveform> corpus = {}) {
  if (corpus.empty()) corpus = ManifestCorpus(manifest);
  NoiseBank bank(std::move(corpus));
  const auto rows = LoadIndex(out_dir / "index.csv");
  Require(rows.size() == manifest.size(), ErrorCode::kDimensionMismatch, "index and manifest differ in length");
  double worst = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].noisy_path.empty()) continue;
    const Waveform x = LoadWav(out_dir / rows[i].clean_path);
    const Waveform v = bank.Make(manifest[i].noise, manifest[i].target_len, manifest[i].target_rate, rows[i].seed);
    worst = std::max(worst, std::abs(MixSnrDb(x, v, rows[i].gain) - rows[i].snr_db));
  }
  return worst;
}

}  // namespace tdse
