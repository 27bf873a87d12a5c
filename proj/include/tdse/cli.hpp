#pragma once

#include <CLI11.hpp>

#include <charconv>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tdse/evalreport.hpp"
#include "tdse/losses.hpp"
#include "tdse/synth.hpp"
#include "tdse/train.hpp"

namespace tdse::cli {

enum ExitCode { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KeySpec {
  std::string key;
  std::string flag;
  std::string fallback;
  std::string help;
  bool is_path = false;
};

inline const std::vector<KeySpec>& AllKeys() {
  static const std::vector<KeySpec> keys = {
      {"seed", "--seed", "0", "random seed"},
      {"loss", "--loss", "time-mse", "loss kind: time-mse|stsa-mse|stoi|estoi|si-sdr"},
      {"lr", "--lr", "0.001", "initial learning rate"},
      {"manifest", "--manifest", "", "mixing manifest CSV", true},
      {"out", "--out", "", "output directory", true},
      {"metrics", "--metrics", "time-mse,stsa-mse,stoi,estoi,si-sdr", "comma-separated metric list"},
      {"sample_rate", "--sample-rate", "10000", "sample rate in Hz"},
      {"train", "--train", "", "training index.csv (default: synthetic desk task)", true},
      {"val", "--val", "", "validation index.csv", true},
      {"test", "--test", "", "test index.csv", true},
      {"index", "--index", "", "dataset index.csv", true},
      {"checkpoint", "--checkpoint", "", "model checkpoint", true},
      {"clean", "--clean", "", "clean reference WAV", true},
      {"enhanced", "--enhanced", "", "enhanced WAV", true},
      {"epochs", "--epochs", "30", "maximum epochs"},
      {"batch", "--batch", "8", "minibatch size"},
      {"model", "--model", "desk", "model: desk|full"},
      {"losses", "--losses", "time-mse,stsa-mse,stoi,estoi,si-sdr", "comma-separated loss list"},
      {"lrs", "--lrs", "0.01,0.001,0.0005,0.0001,1e-05", "comma-separated learning rates"},
      {"shifts", "--shifts", "5", "comma-separated sample shifts"},
      {"step", "--step", "", "finite-difference step (default: per loss)"},
      {"threshold", "--threshold", "", "pass threshold on max_rel_err (default: per loss)"},
      {"coords", "--coords", "40", "number of checked coordinates"},
      {"length", "--length", "", "fixture length in samples (default: 1 s)"},
  };
  return keys;
}

inline const KeySpec& Key(const std::string& key) {
  for (const KeySpec& k : AllKeys())
    if (k.key == key) return k;
  throw std::logic_error("unregistered key " + key);
}

template <class F>
auto ParseName(const std::string& s, F parse) {
  try {
    return parse(s);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

class RunConfig {
 public:
  std::string command;
  std::map<std::string, std::string> values;

  bool Has(const std::string& key) const { return values.count(key) && !values.at(key).empty(); }

  const std::string& Str(const std::string& key) const {
    const auto it = values.find(key);
    if (it == values.end()) throw std::logic_error(command + " does not take " + key);
    return it->second;
  }

  fs::path Path(const std::string& key) const { return Str(key); }

  double Real(const std::string& key) const {
    const std::string& s = Str(key);
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw UsageError(Key(key).flag + ": not a number: '" + s + "'");
    return v;
  }

  long long Int(const std::string& key) const {
    const std::string& s = Str(key);
    long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw UsageError(Key(key).flag + ": not an integer: '" + s + "'");
    return v;
  }

  long long PositiveInt(const std::string& key) const {
    const long long v = Int(key);
    if (v < 1) throw UsageError(Key(key).flag + " must be positive");
    return v;
  }

  std::uint64_t Seed() const {
    const long long v = Int("seed");
    if (v < 0) throw UsageError("--seed must be non-negative");
    return static_cast<std::uint64_t>(v);
  }

  std::vector<std::string> List(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(Str(key));
    for (std::string item; std::getline(ss, item, ',');)
      if (!item.empty()) out.push_back(item);
    if (out.empty()) throw UsageError(Key(key).flag + " must not be empty");
    return out;
  }

  LossKind Loss() const { return ParseName(Str("loss"), ParseLoss); }

  std::vector<LossKind> Losses() const {
    std::vector<LossKind> out;
    for (const std::string& s : List("losses")) out.push_back(ParseName(s, ParseLoss));
    return out;
  }

  std::vector<MetricKind> Metrics() const {
    std::vector<MetricKind> out;
    for (const std::string& s : List("metrics")) out.push_back(ParseName(s, ParseMetric));
    return out;
  }

  std::vector<double> Reals(const std::string& key) const {
    std::vector<double> out;
    for (const std::string& s : List(key)) {
      RunConfig one;
      one.values[key] = s;
      out.push_back(one.Real(key));
    }
    return out;
  }

  // Flat `key = value` lines, sorted, loadable again through --config.
  std::string Record() const {
    std::string text = "# tdse " + command + "\n";
    for (const auto& [k, v] : values) text += k + " = " + v + "\n";
    return text;
  }
};

// `key = value` per line; blank lines and lines starting with '#' are skipped.
inline std::map<std::string, std::string> ParseConfigText(const std::string& text, const std::vector<std::string>& allowed) {
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  int line_no = 0;
  for (std::string line; std::getline(ss, line);) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw UsageError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    if (out.count(key)) throw UsageError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

using Runner = int (*)(const RunConfig&, std::ostream&);

struct Command {
  std::string name;
  std::string help;
  std::vector<std::string> keys;
  std::vector<std::string> required;
  Runner run;
};

namespace detail {

inline void Emit(const RunConfig& c, const std::string& name, const std::string& text) {
  WriteFileBytes(c.Path("out") / name, text);
}

// With an output directory the record goes to run_config.txt; otherwise it is
// printed as comment lines ahead of the report.
inline void Record(const RunConfig& c, std::ostream& out) {
  if (c.Has("out")) {
    fs::create_directories(c.Path("out"));
    Emit(c, "run_config.txt", c.Record());
    return;
  }
  std::stringstream ss(c.Record());
  for (std::string line; std::getline(ss, line);) out << (line[0] == '#' ? line : "# " + line) << "\n";
}

inline void CheckRate(const Dataset& d, int rate, const std::string& what) {
  for (const Example& e : d)
    Require(e.noisy.sample_rate == rate && e.clean.sample_rate == rate, ErrorCode::kRateMismatch,
            what + " data is not at " + std::to_string(rate) + " Hz");
}

inline SweepSets LoadSets(const RunConfig& c, bool need_test) {
  const int rate = static_cast<int>(c.PositiveInt("sample_rate"));
  const bool given = c.Has("train") || c.Has("val") || (need_test && c.Has("test"));
  if (!given) {
    DeskTaskConfig desk;
    desk.rate = rate;
    desk.seed = c.Seed();
    return MakeDeskTask(desk);
  }
  if (!c.Has("train") || !c.Has("val") || (need_test && !c.Has("test")))
    throw UsageError(need_test ? "--train, --val and --test go together" : "--train and --val go together");
  SweepSets s;
  s.train = LoadIndexedDataset(c.Path("train"));
  s.val = LoadIndexedDataset(c.Path("val"));
  if (need_test) s.test = LoadIndexedDataset(c.Path("test"));
  Require(!s.train.empty() && !s.val.empty() && (!need_test || !s.test.empty()), ErrorCode::kCorpusTooSmall,
          "an index has no usable rows");
  CheckRate(s.train, rate, "training");
  CheckRate(s.val, rate, "validation");
  CheckRate(s.test, rate, "test");
  return s;
}

inline ModelConfig ModelFor(const RunConfig& c, std::size_t length) {
  const std::string& m = c.Str("model");
  if (m == "desk") return DeskModelConfig(length);
  if (m == "full") return FullConfig(length);
  throw UsageError("--model must be desk or full, got '" + m + "'");
}

inline TrainConfig TrainFor(const RunConfig& c) {
  TrainConfig t;
  t.seed = c.Seed();
  t.batch_size = static_cast<int>(c.PositiveInt("batch"));
  t.max_epochs = static_cast<int>(c.PositiveInt("epochs"));
  if (c.values.count("loss")) t.loss_kind = c.Loss();
  if (c.values.count("lr")) t.lr0 = c.Real("lr");
  return t;
}

inline int RunMix(const RunConfig& c, std::ostream& out) {
  const std::vector<MixSpec> manifest = LoadManifest(c.Path("manifest"));
  Record(c, out);
  const BuildResult r = BuildDataset(manifest, c.Path("out"));
  out << "rows," << r.rows.size() << "\nfailed," << r.errors.size() << "\n";
  return kExitOk;
}

inline int RunTrain(const RunConfig& c, std::ostream& out) {
  const TrainConfig tc = TrainFor(c);
  const SweepSets sets = LoadSets(c, false);
  const ModelConfig mc = ModelFor(c, sets.train.front().noisy.size());
  Record(c, out);
  const FitResult fit = Fit(mc, sets.train, sets.val, tc, [&](const EpochRecord& e) {
    out << "epoch " << e.epoch << " train " << FormatReal(e.train_loss) << " val " << FormatReal(e.val_loss) << "\n";
  });
  SaveCheckpoint(fit.best, c.Path("out") / "model.ckpt");
  Emit(c, "train_log.csv", TrainLogCsv(fit.log));
  out << "stop," << fit.log.stop_reason << "\nbest_epoch," << fit.log.best_epoch << "\nbest_val_loss,"
      << FormatReal(fit.log.best_val_loss) << "\n";
  return fit.log.diverged ? kExitRuntime : kExitOk;
}

inline int RunSweep(const RunConfig& c, std::ostream& out) {
  const TrainConfig base = TrainFor(c);
  const auto losses = c.Losses();
  const auto lrs = c.Reals("lrs");
  const auto metrics = c.Metrics();
  const SweepSets sets = LoadSets(c, true);
  const ModelConfig mc = ModelFor(c, sets.train.front().noisy.size());
  Record(c, out);
  const SweepResult r = LrSweep(mc, sets, losses, lrs, metrics, base, [&](const SweepCell& cell) {
    out << LossName(cell.loss) << " lr " << FormatReal(cell.lr) << " " << CellStatusName(cell.status) << "\n";
  });
  const std::string best = BestLrCsv(BestLearningRates(r));
  Emit(c, "sweep_matrix.csv", SweepMatrixCsv(r));
  Emit(c, "best_lr.csv", best);
  out << best;
  return kExitOk;
}

inline int RunEval(const RunConfig& c, std::ostream& out) {
  const auto metrics = c.Metrics();
  const fs::path index = c.Path("index");
  Record(c, out);
  MetricTable table;
  std::vector<PairFailure> failures;
  EvaluatePairsInto(table, failures, PairsFromIndex(index), metrics, "noisy");
  if (c.Has("checkpoint")) {
    const ModelParams params = LoadCheckpoint(c.Path("checkpoint"));
    const fs::path enh = c.Path("out") / "enhanced";
    fs::remove_all(enh);
    for (PairFailure f : EnhanceIndex(params, index, enh)) {
      f.error = "enhance: " + f.error;
      failures.push_back(f);
    }
    EvaluatePairsInto(table, failures, PairsFromIndex(index, enh), metrics, "enhanced");
  }
  const std::string md = table.Markdown();
  Emit(c, "report.csv", table.Csv());
  Emit(c, "report.md", md);
  Emit(c, "failures.csv", FailuresCsv(failures));
  out << md;
  return kExitOk;
}

inline int RunProbe(const RunConfig& c, std::ostream& out) {
  const int rate = static_cast<int>(c.PositiveInt("sample_rate"));
  std::vector<int> shifts;
  for (double s : c.Reals("shifts")) {
    if (s != std::floor(s)) throw UsageError("--shifts must be integers");
    shifts.push_back(static_cast<int>(s));
  }
  const Waveform x = c.Has("clean") ? LoadWav(c.Path("clean")) : synth::SpeechLike(3 * rate, rate, c.Seed());
  Record(c, out);
  const std::string csv = ProbeCsv(ShiftPolarityProbe(x, shifts));
  Emit(c, "probe.csv", csv);
  out << csv;
  return kExitOk;
}

inline int RunGradcheck(const RunConfig& c, std::ostream& out) {
  const LossKind kind = c.Loss();
  const int rate = static_cast<int>(c.PositiveInt("sample_rate"));
  const std::size_t length = c.Has("length") ? static_cast<std::size_t>(c.PositiveInt("length")) : rate;
  const int coords = static_cast<int>(c.PositiveInt("coords"));
  const std::uint64_t seed = c.Seed();
  const double step_in = c.Has("step") ? c.Real("step") : 0.0;
  const double threshold_in = c.Has("threshold") ? c.Real("threshold") : 0.0;
  Record(c, out);
  const GradcheckDefaults d = DefaultGradcheck(kind);
  const double step = c.Has("step") ? step_in : d.step;
  const double threshold = c.Has("threshold") ? threshold_in : d.threshold;
  const Waveform clean = synth::SpeechLike(length, rate, seed);
  Waveform enhanced = clean;
  const Waveform noise = synth::WhiteNoise(length, rate, seed + 1000, 0.05);
  for (std::size_t n = 0; n < length; ++n) enhanced.samples[n] += noise.samples[n];
  const GradcheckReport r = Gradcheck(kind, enhanced, clean, step, coords, seed);
  const bool pass = r.checked > 0 && r.max_rel_err < threshold;
  const std::string csv = "loss,max_rel_err,worst_coord,checked,excluded,clip_active_fraction,threshold,pass\n" +
                          std::string(LossName(kind)) + "," + FormatReal(r.max_rel_err) + "," +
                          std::to_string(r.worst_coord) + "," + std::to_string(r.checked) + "," +
                          std::to_string(r.excluded) + "," + FormatReal(r.clip_active_fraction) + "," +
                          FormatReal(threshold) + "," + (pass ? "1" : "0") + "\n";
  if (c.Has("out")) Emit(c, "gradcheck.csv", csv);
  out << csv;
  return pass ? kExitOk : kExitRuntime;
}

inline int RunMetrics(const RunConfig& c, std::ostream& out) {
  const auto metrics = c.Metrics();
  const Waveform clean = LoadWav(c.Path("clean"));
  const Waveform enhanced = LoadWav(c.Path("enhanced"));
  Record(c, out);
  std::string csv = "metric,value,saturated\n";
  for (MetricKind m : metrics) {
    const MetricScore s = ComputeMetric(m, enhanced, clean);
    csv += std::string(MetricName(m)) + "," + FormatReal(s.value) + "," + (s.saturated ? "1" : "0") + "\n";
  }
  if (c.Has("out")) Emit(c, "metrics.csv", csv);
  out << csv;
  return kExitOk;
}

}  // namespace detail

inline const std::vector<Command>& Commands() {
  static const std::vector<Command> commands = {
      {"mix", "Build a mixed dataset from a manifest", {"manifest", "out"}, {"manifest", "out"}, detail::RunMix},
      {"train",
       "Train one model",
       {"seed", "loss", "lr", "out", "train", "val", "epochs", "batch", "model", "sample_rate"},
       {"out"},
       detail::RunTrain},
      {"sweep",
       "Learning-rate sweep over loss kinds",
       {"seed", "losses", "lrs", "metrics", "out", "train", "val", "test", "epochs", "batch", "model", "sample_rate"},
       {"out"},
       detail::RunSweep},
      {"eval", "Score an indexed dataset, optionally through a model", {"index", "checkpoint", "metrics", "out"},
       {"index", "out"}, detail::RunEval},
      {"probe", "Time-shift and polarity diagnostic", {"clean", "shifts", "seed", "sample_rate", "out"}, {"out"},
       detail::RunProbe},
      {"gradcheck",
       "Check a loss gradient against finite differences",
       {"loss", "seed", "step", "threshold", "coords", "sample_rate", "length", "out"},
       {},
       detail::RunGradcheck},
      {"metrics", "Score one enhanced/clean pair", {"clean", "enhanced", "metrics", "out"}, {"clean", "enhanced"},
       detail::RunMetrics},
  };
  return commands;
}

// Defaults, then the --config file, then explicit flags. Paths are made absolute.
inline RunConfig Resolve(const Command& cmd, const std::map<std::string, std::string>& file,
                         const std::map<std::string, std::string>& flags) {
  RunConfig c;
  c.command = cmd.name;
  for (const std::string& k : cmd.keys) c.values[k] = Key(k).fallback;
  for (const auto& [k, v] : file) c.values[k] = v;
  for (const auto& [k, v] : flags) c.values[k] = v;
  for (const std::string& k : cmd.required)
    if (!c.Has(k)) throw UsageError(cmd.name + ": " + Key(k).flag + " is required");
  for (auto& [k, v] : c.values)
    if (Key(k).is_path && !v.empty()) v = fs::absolute(v).lexically_normal().string();
  return c;
}

inline int CmdDispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Time-domain speech enhancement: losses, metrics, training and evaluation", "tdse"};
  app.require_subcommand(1, 1);
  std::map<std::string, std::map<std::string, std::string>> flag_values;
  std::map<std::string, std::map<std::string, CLI::Option*>> options;
  for (const Command& cmd : Commands()) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    options[cmd.name]["config"] = sub->add_option("--config", flag_values[cmd.name]["config"], "flat key = value file");
    for (const std::string& k : cmd.keys)
      options[cmd.name][k] = sub->add_option(Key(k).flag, flag_values[cmd.name][k], Key(k).help);
  }
  const Command* cmd = nullptr;
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kExitOk;
    for (const CLI::App* sub : app.get_subcommands()) err << sub->help();
    if (app.get_subcommands().empty()) err << app.help();
    return kExitUsage;
  }
  for (const Command& c : Commands())
    if (app.got_subcommand(c.name)) cmd = &c;
  try {
    std::map<std::string, std::string> flags, file;
    for (const auto& [k, opt] : options[cmd->name])
      if (k != "config" && opt->count()) flags[k] = flag_values[cmd->name][k];
    if (options[cmd->name]["config"]->count())
      file = ParseConfigText(ReadFileBytes(flag_values[cmd->name]["config"]), cmd->keys);
    return cmd->run(Resolve(*cmd, file, flags), out);
  } catch (const UsageError& e) {
    err << "tdse " << cmd->name << ": " << e.what() << "\n" << app.get_subcommand(cmd->name)->help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "tdse " << cmd->name << ": " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace tdse::cli
