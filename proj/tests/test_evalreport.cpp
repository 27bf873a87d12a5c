#include <gtest/gtest.h>

#include <algorithm>

#include "tdse/evalreport.hpp"
#include "tdse/synth.hpp"
#include "test_util.hpp"

namespace tdse {
namespace {

using testing::ExpectError;

fs::path FreshDir(const std::string& name) {
  const fs::path dir = fs::path(::testing::TempDir()) / ("tdse_eval_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Waveform Noisy(const Waveform& x, std::uint64_t seed, double level) {
  Waveform y = x;
  const Waveform v = synth::WhiteNoise(x.size(), x.sample_rate, seed, level);
  for (std::size_t n = 0; n < y.size(); ++n) y.samples[n] += v.samples[n];
  return y;
}

// Ten pairs over two noise types and two SNR labels, written as WAV files.
std::vector<EvalPair> WritePairs(const fs::path& dir, bool enhanced_is_clean) {
  std::vector<EvalPair> pairs;
  for (int k = 0; k < 10; ++k) {
    const std::string id = "p" + std::to_string(k);
    const Waveform x = synth::SpeechLike(10000, 10000, 50 + k);
    WriteWav(dir / "clean" / (id + ".wav"), x);
    WriteWav(dir / "enh" / (id + ".wav"), enhanced_is_clean ? x : Noisy(x, 500 + k, 0.02 + 0.01 * (k % 3)));
    pairs.push_back({id, k % 2 ? "ssn" : "babble", k < 5 ? 0.0 : 5.0, dir / "clean" / (id + ".wav"),
                     dir / "enh" / (id + ".wav")});
  }
  return pairs;
}

TEST(EvaluatePairs, CleanInputGivesPerfectCells) {
  const fs::path dir = FreshDir("perfect");
  const EvalResult r = EvaluatePairs(WritePairs(dir, true), AllMetrics());
  EXPECT_TRUE(r.failures.empty());
  for (const auto& [key, cell] : r.table.cells()) {
    EXPECT_GT(cell.n, 0u);
    if (key.metric == MetricKind::kStoi || key.metric == MetricKind::kEstoi) {
      EXPECT_NEAR(cell.value, 1.0, 1e-9);
    }
    if (key.metric == MetricKind::kTimeMse || key.metric == MetricKind::kStsaMse) {
      EXPECT_EQ(cell.value, 0.0);
    }
    if (key.metric == MetricKind::kSiSdr) {
      EXPECT_EQ(cell.value, kSiSdrCapDb);
      EXPECT_EQ(cell.saturated, cell.n);
    }
  }
  EXPECT_NE(r.table.Csv().find("saturated="), std::string::npos);
}

TEST(EvaluatePairs, AveragesEqualPerPairMean) {
  const fs::path dir = FreshDir("mean");
  const auto pairs = WritePairs(dir, false);
  const EvalResult r = EvaluatePairs(pairs, AllMetrics(), "sys");
  for (MetricKind m : AllMetrics()) {
    double sum = 0.0;
    int n = 0;
    for (const EvalPair& p : pairs) {
      if (p.noise_type != "ssn" || p.snr_db != 5.0) continue;
      sum += ComputeMetric(m, LoadWav(p.enhanced), LoadWav(p.clean)).value;
      ++n;
    }
    const MetricCell& c = r.table.At({"ssn", 5.0, m, "sys"});
    EXPECT_EQ(c.n, static_cast<std::size_t>(n));
    EXPECT_NEAR(c.value, sum / n, 1e-12 * std::max(1.0, std::abs(sum / n))) << MetricName(m);
  }
}

TEST(EvaluatePairs, PermutationInvariant) {
  const fs::path dir = FreshDir("perm");
  auto pairs = WritePairs(dir, false);
  const EvalResult a = EvaluatePairs(pairs, {MetricKind::kStoi, MetricKind::kSiSdr});
  std::reverse(pairs.begin(), pairs.end());
  std::rotate(pairs.begin(), pairs.begin() + 3, pairs.end());
  const EvalResult b = EvaluatePairs(pairs, {MetricKind::kStoi, MetricKind::kSiSdr});
  for (const auto& [key, cell] : a.table.cells()) {
    EXPECT_EQ(b.table.At(key).n, cell.n);
    EXPECT_NEAR(b.table.At(key).value, cell.value, 1e-12 * std::max(1.0, std::abs(cell.value)));
  }
}

TEST(EvaluatePairs, FailuresAreCountedNotAveraged) {
  const fs::path dir = FreshDir("fail");
  auto pairs = WritePairs(dir, false);
  pairs[0].enhanced = dir / "missing.wav";
  const EvalResult r = EvaluatePairs(pairs, {MetricKind::kStoi});
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0].id, "p0");
  const MetricCell& c = r.table.At({"babble", 0.0, MetricKind::kStoi, "enhanced"});
  EXPECT_EQ(c.failed, 1u);
  EXPECT_EQ(c.n, 2u);
  EXPECT_NE(r.table.Csv().find("failed=1"), std::string::npos);
  EXPECT_EQ(FailuresCsv(r.failures).rfind("id,error\np0,", 0), 0u);
}

TEST(EvaluatePairs, IdentitySystemFromIndexMatchesDirectScores) {
  const fs::path dir = FreshDir("index");
  std::vector<IndexRow> rows;
  for (int k = 0; k < 4; ++k) {
    const std::string id = "u" + std::to_string(k);
    const Waveform x = synth::SpeechLike(8000, 10000, 70 + k);
    WriteWav(dir / "clean" / (id + ".wav"), x);
    WriteWav(dir / "noisy" / (id + ".wav"), Noisy(x, 90 + k, 0.05));
    rows.push_back({id, "clean/" + id + ".wav", "noisy/" + id + ".wav", 0.0, "ssn", 1, 0.5});
  }
  rows.push_back({"bad", "clean/bad.wav", "", 0.0, "ssn", 1, std::nan("")});
  WriteFileBytes(dir / "index.csv", IndexText(rows));
  const auto pairs = PairsFromIndex(dir / "index.csv");
  ASSERT_EQ(pairs.size(), 4u);
  const EvalResult r = EvaluatePairs(pairs, {MetricKind::kEstoi}, "noisy");
  double sum = 0.0;
  for (int k = 0; k < 4; ++k) {
    const std::string id = "u" + std::to_string(k);
    sum += Estoi(LoadWav(dir / "noisy" / (id + ".wav")), LoadWav(dir / "clean" / (id + ".wav"))).value;
  }
  EXPECT_NEAR(r.table.At({"ssn", 0.0, MetricKind::kEstoi, "noisy"}).value, sum / 4, 1e-12);
  EXPECT_EQ(PairsFromIndex(dir / "index.csv", dir / "enh")[2].enhanced, dir / "enh" / "u2.wav");
}

TEST(MetricTable, BestIsDirectionAware) {
  MetricTable t;
  MetricCell a, b, d;
  a.value = 0.7;
  a.n = 3;
  b.value = 0.8;
  b.n = 3;
  d.flag = CellFlag::kDiverged;
  t.Set({"ssn", 0.0, MetricKind::kStoi, "a"}, a);
  t.Set({"ssn", 0.0, MetricKind::kStoi, "b"}, b);
  t.Set({"ssn", 0.0, MetricKind::kStoi, "c"}, d);
  t.Set({"ssn", 0.0, MetricKind::kTimeMse, "a"}, a);
  t.Set({"ssn", 0.0, MetricKind::kTimeMse, "b"}, b);
  EXPECT_FALSE(t.IsBest({"ssn", 0.0, MetricKind::kStoi, "a"}));
  EXPECT_TRUE(t.IsBest({"ssn", 0.0, MetricKind::kStoi, "b"}));
  EXPECT_FALSE(t.IsBest({"ssn", 0.0, MetricKind::kStoi, "c"}));
  EXPECT_TRUE(t.IsBest({"ssn", 0.0, MetricKind::kTimeMse, "a"}));
  ExpectError(ErrorCode::kInvalidConfig, [&] { t.Set({"ssn", 0.0, MetricKind::kStoi, "a"}, a); });
  const std::string csv = t.Csv();
  EXPECT_EQ(csv.rfind("noise_type,snr_db,metric,system,value,n,flags\n", 0), 0u);
  EXPECT_NE(csv.find("ssn,0,stoi,b,0.80000000000000004,3,best\n"), std::string::npos);
  EXPECT_NE(csv.find("ssn,0,stoi,c,,0,diverged\n"), std::string::npos);
  const std::string md = t.Markdown();
  EXPECT_NE(md.find("**0.800**"), std::string::npos);
  EXPECT_NE(md.find("diverged"), std::string::npos);
}

TEST(ShiftPolarityProbe, SiSdrCollapsesUnderShiftOnly) {
  const Waveform x = synth::SpeechLike(30000, 10000, 14);
  const auto rows = ShiftPolarityProbe(x, {0, 5});
  ASSERT_EQ(rows.size(), 4u);
  for (const ProbeRow& r : rows) {
    if (r.shift == 0) {
      EXPECT_NEAR(r.scores.at(MetricKind::kStoi), 1.0, 1e-9);
      EXPECT_NEAR(r.scores.at(MetricKind::kEstoi), 1.0, 1e-9);
      EXPECT_TRUE(r.si_sdr_saturated);
    } else {
      EXPECT_LT(r.scores.at(MetricKind::kSiSdr), 5.0);
      EXPECT_GT(r.scores.at(MetricKind::kStoi), 0.95);
      EXPECT_FALSE(r.si_sdr_saturated);
    }
  }
  EXPECT_EQ(rows[1].scores.at(MetricKind::kStoi), rows[3].scores.at(MetricKind::kStoi));
  const std::string csv = ProbeCsv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "shift,polarity,time-mse,stsa-mse,stoi,estoi,si-sdr,si_sdr_saturated");
  ExpectError(ErrorCode::kOutOfRange, [&] { ShiftPolarityProbe(x, {20000}); });
}

TEST(ShiftPolarityProbe, ShiftedHelper) {
  const Waveform x{{1, 2, 3, 4}, 10000};
  EXPECT_EQ(Shifted(x, 1).samples, (std::vector<double>{0, 1, 2, 3}));
  EXPECT_EQ(Shifted(x, -2).samples, (std::vector<double>{3, 4, 0, 0}));
}

}  // namespace
}  // namespace tdse
