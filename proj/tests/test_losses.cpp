#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "tdse/losses.hpp"
#include "tdse/synth.hpp"
#include "test_util.hpp"

namespace tdse {
namespace {

using testing::ExpectError;

struct Pair {
  Waveform clean, enhanced;
};

Pair MakePair(std::uint64_t seed, std::size_t len = 10000, double noise = 0.05) {
  Pair p{synth::SpeechLike(len, 10000, seed), {}};
  p.enhanced = p.clean;
  const Waveform n = synth::WhiteNoise(len, 10000, seed + 1000, noise);
  for (std::size_t i = 0; i < len; ++i) p.enhanced.samples[i] += n.samples[i];
  return p;
}

TEST(Losses, NamesAndImplementedSet) {
  for (LossKind k : ImplementedLosses()) EXPECT_EQ(ParseLoss(LossName(k)), k);
  EXPECT_EQ(ParseLoss("pmsqe"), LossKind::kPmsqe);
  EXPECT_FALSE(IsImplemented(LossKind::kPmsqe));
  EXPECT_EQ(ImplementedLosses().size(), 5u);
  ExpectError(ErrorCode::kParse, [] { ParseLoss("l1"); });
}

TEST(Losses, PmsqeIsReservedOnly) {
  const Pair p = MakePair(1);
  ExpectError(ErrorCode::kUnimplemented, [&] { LossValue(LossKind::kPmsqe, p.enhanced, p.clean); });
  ExpectError(ErrorCode::kUnimplemented, [] { MatchingMetric(LossKind::kPmsqe); });
}

TEST(Losses, ValuesAgreeWithMetrics) {
  const Pair p = MakePair(2);
  EXPECT_EQ(LossValue(LossKind::kTimeMse, p.enhanced, p.clean), TimeMse(p.enhanced, p.clean).value);
  EXPECT_NEAR(LossValue(LossKind::kStsaMse, p.enhanced, p.clean), StsaMse(p.enhanced, p.clean).value,
              1e-15);
  EXPECT_NEAR(LossValue(LossKind::kStoi, p.enhanced, p.clean), -Stoi(p.enhanced, p.clean).value, 1e-15);
  EXPECT_NEAR(LossValue(LossKind::kEstoi, p.enhanced, p.clean), -Estoi(p.enhanced, p.clean).value,
              1e-15);
  EXPECT_EQ(LossValue(LossKind::kSiSdr, p.enhanced, p.clean), -SiSdr(p.enhanced, p.clean).sisdr_db);
}

TEST(Losses, TimeMseGradientIsExact) {
  const Pair p = MakePair(3, 1000);
  const LossReport r = LossAndGrad(LossKind::kTimeMse, p.enhanced, p.clean);
  for (std::size_t n = 0; n < 1000; ++n)
    EXPECT_EQ(r.gradient[n], 2.0 * (p.enhanced.samples[n] - p.clean.samples[n]) / 1000.0);
}

TEST(SampleCoordinates, DistinctAndDeterministic) {
  const auto a = SampleCoordinates(100, 40, 7);
  EXPECT_EQ(a, SampleCoordinates(100, 40, 7));
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 40u);
  EXPECT_NE(a, SampleCoordinates(100, 40, 8));
  ExpectError(ErrorCode::kOutOfRange, [] { SampleCoordinates(10, 11, 0); });
}

struct GradCase {
  LossKind kind;
  double step;
  double tol;
};

class GradcheckTest : public ::testing::TestWithParam<GradCase> {};

TEST_P(GradcheckTest, MatchesCentralDifferences) {
  const GradCase c = GetParam();
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    const Pair p = MakePair(40 + seed);
    const GradcheckReport r = Gradcheck(c.kind, p.enhanced, p.clean, c.step, 40, seed);
    EXPECT_GT(r.checked, 20);
    EXPECT_LT(r.max_rel_err, c.tol) << LossName(c.kind) << " worst coord " << r.worst_coord;
  }
}

INSTANTIATE_TEST_SUITE_P(AllLosses, GradcheckTest,
                         ::testing::Values(GradCase{LossKind::kTimeMse, 1e-2, 1e-10},
                                           GradCase{LossKind::kStsaMse, 3e-6, 1e-6},
                                           GradCase{LossKind::kStoi, 1e-5, 1e-4},
                                           GradCase{LossKind::kEstoi, 1e-6, 1e-4},
                                           GradCase{LossKind::kSiSdr, 1e-4, 1e-6}),
                         [](const auto& info) {
                           std::string n(LossName(info.param.kind));
                           std::replace(n.begin(), n.end(), '-', '_');
                           return n;
                         });

TEST(Losses, StoiGradientFlipsWithPolarity) {
  const Pair p = MakePair(5);
  Waveform neg = p.enhanced;
  for (double& v : neg.samples) v = -v;
  for (LossKind k : {LossKind::kStoi, LossKind::kEstoi, LossKind::kStsaMse}) {
    const LossReport a = LossAndGrad(k, p.enhanced, p.clean);
    const LossReport b = LossAndGrad(k, neg, p.clean);
    EXPECT_EQ(a.value, b.value);
    for (std::size_t n = 0; n < a.gradient.size(); ++n) EXPECT_EQ(b.gradient[n], -a.gradient[n]);
  }
}

TEST(Losses, SiSdrGradientOrthogonalToEstimate) {
  const Pair p = MakePair(6);
  const LossReport r = LossAndGrad(LossKind::kSiSdr, p.enhanced, p.clean);
  double dot = 0.0, gn = 0.0, xn = 0.0;
  for (std::size_t n = 0; n < r.gradient.size(); ++n) {
    dot += r.gradient[n] * p.enhanced.samples[n];
    gn += r.gradient[n] * r.gradient[n];
    xn += p.enhanced.samples[n] * p.enhanced.samples[n];
  }
  EXPECT_LT(std::abs(dot), 1e-9 * std::sqrt(gn * xn));
}

TEST(Losses, SaturatedSiSdrHasZeroGradient) {
  const Pair p = MakePair(7);
  const LossReport r = LossAndGrad(LossKind::kSiSdr, p.clean, p.clean);
  EXPECT_EQ(r.value, -kSiSdrCapDb);
  for (double g : r.gradient) EXPECT_EQ(g, 0.0);
}

TEST(Losses, GradientStepDecreasesLoss) {
  const Pair p = MakePair(8, 10000, 0.1);
  for (LossKind k : ImplementedLosses()) {
    const Loss loss(k, p.clean);
    const LossReport r = loss.Evaluate(p.enhanced);
    double gn = 0.0;
    for (double g : r.gradient) gn += g * g;
    Waveform stepped = p.enhanced;
    const double eta = 1e-3 / std::sqrt(gn);
    for (std::size_t n = 0; n < stepped.size(); ++n) stepped.samples[n] -= eta * r.gradient[n];
    EXPECT_LT(loss.Evaluate(stepped, false).value, r.value) << LossName(k);
  }
}

TEST(Losses, StoiReportsClipFraction) {
  const Pair p = MakePair(9, 10000, 0.5);
  const LossReport r = LossAndGrad(LossKind::kStoi, p.enhanced, p.clean);
  EXPECT_GT(r.clip_active_fraction, 0.0);
  EXPECT_LT(r.clip_active_fraction, 1.0);
  EXPECT_FALSE(r.clip_mask.empty());
}

TEST(Losses, ConstructionErrors) {
  const Waveform z{std::vector<double>(10000, 0.0), 10000};
  ExpectError(ErrorCode::kZeroReference, [&] { Loss(LossKind::kSiSdr, z); });
  Waveform x = synth::SpeechLike(10000, 16000, 1);
  ExpectError(ErrorCode::kRateMismatch, [&] { Loss(LossKind::kStoi, x); });
  const Pair p = MakePair(10);
  const Loss loss(LossKind::kTimeMse, p.clean);
  ExpectError(ErrorCode::kLengthMismatch, [&] { loss.Evaluate(synth::SpeechLike(100, 10000, 1)); });
}

}  // namespace
}  // namespace tdse
