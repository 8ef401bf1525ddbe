#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mrgenius;

namespace {

// Loop-level recursion with saturated E(A|G) and a 2x2 Cramer solve.
struct OraclePath {
    std::vector<double> times, b_a, b_g;
};

OraclePath recursion_oracle(const ObservationTable& t)
{
    const auto g = oracle::col(t, 0);
    const auto a = oracle::vec(t.a());
    const auto y = oracle::vec(t.y());
    const auto d = oracle::vec(t.delta());
    const auto fit = oracle::group_mean_fit(a, g);
    const double gb = oracle::mean(g);
    const std::size_t n = g.size();
    std::vector<double> ts;
    for (std::size_t i = 0; i < n; ++i)
        if (d[i] == 1.0) ts.push_back(y[i]);
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    OraclePath out;
    double ba = 0, bg = 0;
    for (double s : ts) {
        double m00 = 0, m01 = 0, m10 = 0, m11 = 0, b0 = 0, b1 = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (y[i] < s) continue;
            const double e = std::exp(ba * a[i] + bg * g[i]);
            const double h0 = g[i] - gb, h1 = (g[i] - gb) * (a[i] - fit[i]);
            m00 += a[i] * h0 * e;
            m01 += a[i] * h1 * e;
            m10 += g[i] * h0 * e;
            m11 += g[i] * h1 * e;
            if (y[i] == s && d[i] == 1.0) {
                b0 += h0 * e;
                b1 += h1 * e;
            }
        }
        // solve M' x = b, M = [[m00, m01], [m10, m11]]
        const double det = m00 * m11 - m10 * m01;
        const double x0 = (b0 * m11 - m10 * b1) / det;
        const double x1 = (m00 * b1 - m01 * b0) / det;
        ba += x0;
        bg += x1;
        out.times.push_back(s);
        out.b_a.push_back(ba);
        out.b_g.push_back(bg);
    }
    return out;
}

ObservationTable hand_fixture()
{
    Matrix g(6, 1);
    g << 0, 0, 0, 1, 1, 1;
    Vector a(6), y(6), d(6);
    a << 0.2, 1.0, 0.6, 2.0, 0.1, 1.3;
    y << 1.0, 2.5, 3.0, 0.5, 2.0, 4.0;
    d << 0, 1, 0, 1, 0, 0;
    return {g, a, y, ExposureKind::continuous, d};
}

// Additive hazard 0.5 + b_a A + b_g G + 0.5 U with exponential censoring.
ObservationTable hazard_fixture(std::uint64_t seed, Eigen::Index n, double b_a, double b_g,
                                double censor_rate = 0.45)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u;
    std::exponential_distribution<double> unit(1.0);
    Matrix g(n, 1);
    Vector a(n), y(n), d(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        g(i, 0) = u(rng) < 0.5 ? 1.0 : 0.0;
        const double conf = u(rng);
        a(i) = 0.5 * conf + (0.3 + 0.7 * g(i, 0)) * std::abs(z(rng));
        const double rate = 0.5 + b_a * a(i) + b_g * g(i, 0) + 0.5 * conf;
        const double event = unit(rng) / rate;
        const double censor = unit(rng) / censor_rate;
        y(i) = std::min(event, censor);
        d(i) = event <= censor ? 1.0 : 0.0;
    }
    return {g, a, y, ExposureKind::continuous, d};
}

// The tail of the at-risk set is too thin to identify both increments.
SurvivalOptions tail_cut()
{
    SurvivalOptions o;
    o.horizon = 1.5;
    return o;
}

} // namespace

TEST(AdditiveHazards, FourUnitBinaryFixture)
{
    Matrix g(4, 1);
    g << 0, 0, 1, 1;
    Vector a(4), y(4), d(4);
    a << 0, 0, 0, 1;
    y << 1, 2, 3, 4;
    d << 1, 0, 1, 0;
    const ObservationTable t(g, a, y, ExposureKind::binary, d);
    const auto path = genius_additive_hazards(t);
    const auto ref = recursion_oracle(t);
    ASSERT_EQ(path.size(), 2u);
    for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_NEAR(path.b_a[k], ref.b_a[k], 1e-12);
        EXPECT_NEAR(path.b_g[k], ref.b_g[k], 1e-12);
    }
}

TEST(AdditiveHazards, HandFixtureMatchesOracle)
{
    const auto t = hand_fixture();
    const auto path = genius_additive_hazards(t);
    const auto ref = recursion_oracle(t);
    ASSERT_EQ(path.size(), 2u);
    ASSERT_EQ(ref.times.size(), 2u);
    for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(path.times[k], ref.times[k]);
        EXPECT_NEAR(path.b_a[k], ref.b_a[k], 1e-12);
        EXPECT_NEAR(path.b_g[k], ref.b_g[k], 1e-12);
    }
    EXPECT_EQ(path.at_risk[0], 6);
    EXPECT_EQ(path.at_risk[1], 3);
    EXPECT_EQ(path.events[1], 1);
}

TEST(AdditiveHazards, SimulatedPathsMatchOracle)
{
    for (std::uint64_t s = 1; s <= 3; ++s) {
        const auto t = hazard_fixture(s, 150, 0.3, 0.2);
        const auto path = genius_additive_hazards(t, tail_cut());
        const auto ref = recursion_oracle(t);
        ASSERT_GT(path.size(), 20u);
        ASSERT_GT(ref.times.size(), path.size());
        for (std::size_t k = 0; k < path.size(); ++k) {
            EXPECT_NEAR(path.b_a[k], ref.b_a[k], 1e-9 * std::max(1.0, std::abs(ref.b_a[k])));
            EXPECT_NEAR(path.b_g[k], ref.b_g[k], 1e-9 * std::max(1.0, std::abs(ref.b_g[k])));
        }
    }
}

TEST(AdditiveHazards, StepResidualsVanish)
{
    const auto path = genius_additive_hazards(hazard_fixture(4, 300, 0.3, 0.2), tail_cut());
    ASSERT_GT(path.size(), 0u);
    for (double r : path.residual) EXPECT_LT(r, 1e-10);
}

TEST(AdditiveHazards, AllCensoredGivesZeroPath)
{
    auto t = hand_fixture();
    const ObservationTable c(t.g(), t.a(), t.y(), t.kind(), Vector::Zero(t.n()));
    const auto path = genius_additive_hazards(c);
    EXPECT_EQ(path.size(), 0u);
    EXPECT_EQ(path_interpolate(path, 10.0), std::make_pair(0.0, 0.0));
}

TEST(AdditiveHazards, InterpolationIsRightContinuous)
{
    const auto path = genius_additive_hazards(hand_fixture());
    EXPECT_EQ(path_interpolate(path, 0.49), std::make_pair(0.0, 0.0));
    EXPECT_EQ(path_interpolate(path, 0.5), std::make_pair(path.b_a[0], path.b_g[0]));
    EXPECT_EQ(path_interpolate(path, 2.49), std::make_pair(path.b_a[0], path.b_g[0]));
    EXPECT_EQ(path_interpolate(path, 2.5), std::make_pair(path.b_a[1], path.b_g[1]));
    EXPECT_EQ(path_interpolate(path, 100.0), std::make_pair(path.b_a[1], path.b_g[1]));
}

TEST(AdditiveHazards, HorizonTruncates)
{
    const auto t = hazard_fixture(5, 400, 0.3, 0.2);
    SurvivalOptions o;
    o.horizon = 0.8;
    const auto cut = genius_additive_hazards(t, o);
    const auto full = genius_additive_hazards(t);
    ASSERT_GT(cut.size(), 0u);
    EXPECT_LE(cut.times.back(), 0.8);
    EXPECT_LT(cut.size(), full.size());
    for (std::size_t k = 0; k < cut.size(); ++k) EXPECT_EQ(cut.b_a[k], full.b_a[k]);
}

TEST(AdditiveHazards, Deterministic)
{
    const auto t = hazard_fixture(6, 300, 0.3, 0.2);
    const auto p1 = genius_additive_hazards(t, tail_cut());
    const auto p2 = genius_additive_hazards(t, tail_cut());
    EXPECT_EQ(p1.b_a, p2.b_a);
    EXPECT_EQ(p1.b_g, p2.b_g);
}

TEST(AdditiveHazards, CollinearExposureIsIdentificationError)
{
    auto t = hazard_fixture(7, 100, 0.3, 0.2);
    const ObservationTable c(t.g(), t.g(0), t.y(), t.kind(), t.delta());
    EXPECT_THROW(genius_additive_hazards(c), IdentificationError);
}

TEST(AdditiveHazards, RequiresEventIndicator)
{
    EXPECT_THROW(genius_additive_hazards(oracle::continuous_fixture(1, 50)), ValidationError);
}

TEST(AdditiveHazards, RecoversLinearCumulativeEffects)
{
    const auto t = hazard_fixture(2024, 2000, 0.3, 0.2);
    const double censored = 1.0 - t.delta().mean();
    EXPECT_GT(censored, 0.2);
    EXPECT_LT(censored, 0.4);
    BootstrapOptions b;
    b.replicates = 200;
    b.seed = 11;
    b.threads = 4;
    const auto bs = bootstrap_paths(t, {0.5, 1.0}, tail_cut(), b);
    for (std::size_t k = 0; k < 2; ++k) {
        const double h = bs.horizons[k];
        EXPECT_LT(std::abs(bs.estimate[k].first - 0.3 * h), 3.0 * bs.se_a[k]) << h;
        EXPECT_LT(std::abs(bs.estimate[k].second - 0.2 * h), 3.0 * bs.se_g[k]) << h;
    }
    EXPECT_LT(bs.failures, 10);
}

TEST(AdditiveHazards, DirectInstrumentEffectNearZeroUnderNull)
{
    const auto t = hazard_fixture(77, 2000, 0.3, 0.0);
    BootstrapOptions b;
    b.replicates = 100;
    b.threads = 4;
    const auto bs = bootstrap_paths(t, {1.0}, tail_cut(), b);
    EXPECT_LT(std::abs(bs.estimate[0].second), 3.0 * bs.se_g[0]);
}

TEST(AdditiveHazards, BootstrapInvariantToThreadCount)
{
    const auto t = hazard_fixture(8, 300, 0.3, 0.2);
    BootstrapOptions b;
    b.replicates = 40;
    b.seed = 3;
    b.threads = 1;
    const auto one = bootstrap_paths(t, {0.5, 1.0}, tail_cut(), b);
    b.threads = 4;
    const auto four = bootstrap_paths(t, {0.5, 1.0}, tail_cut(), b);
    EXPECT_EQ(one.se_a, four.se_a);
    EXPECT_EQ(one.se_g, four.se_g);
    EXPECT_EQ(one.failures, four.failures);
    EXPECT_THROW(bootstrap_paths(t, {1.0}, {}, BootstrapOptions{1, 1, 1}), ValidationError);
}
