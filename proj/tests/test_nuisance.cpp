#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mrgenius;

TEST(Nuisance, SaturatedFitIsGroupMeans)
{
    Matrix g(6, 1);
    g << 0, 0, 1, 1, 2, 2;
    Vector a(6);
    a << 1, 3, 2, 2, 10, 0;
    const auto m = fit_saturated(a, g);
    ASSERT_EQ(m.dim(), 3);
    EXPECT_DOUBLE_EQ(m.coefficients(0), 2.0);
    EXPECT_DOUBLE_EQ(m.coefficients(1), 2.0);
    EXPECT_DOUBLE_EQ(m.coefficients(2), 5.0);
    Matrix unseen(1, 1);
    unseen << 7;
    EXPECT_THROW(m.predict(unseen), ValidationError);
}

TEST(Nuisance, LinearFitMatchesNormalEquations)
{
    const auto t = oracle::continuous_fixture(5, 200, false);
    const auto m = fit_linear(t.a(), t.g());
    const auto fit = oracle::linear_fit(oracle::vec(t.a()), oracle::col(t, 0));
    const Vector pred = m.predict(t.g());
    for (Eigen::Index i = 0; i < t.n(); ++i) EXPECT_NEAR(pred(i), fit[static_cast<std::size_t>(i)], 1e-10);
    EXPECT_LT(m.score_norm, 1e-10);
}

TEST(Nuisance, RankDeficientLinearFitNamesColumns)
{
    Matrix x(5, 2);
    x << 1, 2, 2, 4, 3, 6, 4, 8, 5, 10;
    try {
        fit_linear(Vector::LinSpaced(5, 0, 1), x, {"u", "v"});
        FAIL();
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_TRUE(msg.find(" u") != std::string::npos || msg.find(" v") != std::string::npos) << msg;
    }
}

TEST(Nuisance, LogisticSolvesScoreEquations)
{
    std::mt19937_64 rng(9);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u;
    const Eigen::Index n = 5000;
    Matrix x(n, 2);
    Vector y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        x(i, 0) = z(rng);
        x(i, 1) = u(rng) < 0.5 ? 1.0 : 0.0;
        y(i) = u(rng) < stats::expit(-0.5 + 0.8 * x(i, 0) - 0.6 * x(i, 1)) ? 1.0 : 0.0;
    }
    const auto m = fit_logistic(y, x);
    const Matrix d = with_intercept(x);
    const Vector score = d.transpose() * (y - m.predict(x)) / static_cast<double>(n);
    EXPECT_LT(score.norm(), 1e-8);
    EXPECT_NEAR(m.coefficients(0), -0.5, 0.15);
    EXPECT_NEAR(m.coefficients(1), 0.8, 0.1);
    EXPECT_NEAR(m.coefficients(2), -0.6, 0.15);
}

TEST(Nuisance, LogisticOnBinaryInstrumentEqualsGroupMeans)
{
    const auto t = oracle::binary_fixture(2, 300);
    const auto lg = fit_logistic(t.a(), t.g());
    const auto sat = fit_saturated(t.a(), t.g());
    EXPECT_LT((lg.predict(t.g()) - sat.predict(t.g())).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Nuisance, LogisticSeparationIsConvergenceError)
{
    Matrix x(6, 1);
    x << -3, -2, -1, 1, 2, 3;
    Vector y(6);
    y << 0, 0, 0, 1, 1, 1;
    EXPECT_THROW(fit_logistic(y, x), ConvergenceError);
    EXPECT_THROW(fit_logistic(Vector::Zero(6), x), ConvergenceError);
    EXPECT_THROW(fit_logistic(Vector::Constant(6, 0.5), x), ValidationError);
}

TEST(Nuisance, ExponentialMeanSolvesQuasiScore)
{
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u;
    const Eigen::Index n = 3000;
    Matrix x(n, 1);
    Vector y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        x(i, 0) = u(rng) < 0.5 ? 1.0 : 0.0;
        std::poisson_distribution<int> pois(std::exp(0.3 + 0.7 * x(i, 0)));
        y(i) = pois(rng);
    }
    const auto m = fit_exponential_mean(y, x);
    const Vector score = with_intercept(x).transpose() * (y - m.predict(x)) / static_cast<double>(n);
    EXPECT_LT(score.norm(), 1e-8);
    // binary regressor: log link reproduces the two group means
    const auto sat = fit_saturated(y, x);
    EXPECT_LT((m.predict(x) - sat.predict(x)).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(Nuisance, LogMeanRatioBinaryClosedForm)
{
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u;
    const Eigen::Index n = 500;
    Matrix g(n, 1);
    Vector a(n);
    double s1 = 0, c1 = 0, s0 = 0, c0 = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        g(i, 0) = u(rng) < 0.4 ? 1.0 : 0.0;
        std::poisson_distribution<int> pois(g(i, 0) == 1.0 ? 3.0 : 1.5);
        a(i) = pois(rng);
        (g(i, 0) == 1.0 ? (s1 += a(i), c1 += 1) : (s0 += a(i), c0 += 1));
    }
    const auto m = fit_log_mean_ratio(a, g);
    EXPECT_NEAR(m.coefficients(0), std::log((s1 / c1) / (s0 / c0)), 1e-8);
    // estimating equation residual
    const Vector q = a.array() * (-m.coefficients(0) * g.col(0).array()).exp();
    const double mom = ((g.col(0).array() - g.col(0).mean()) * q.array()).mean();
    EXPECT_LT(std::abs(mom), 1e-8);
}

TEST(Nuisance, LogMeanRatioMultiInstrument)
{
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u;
    const Eigen::Index n = 4000;
    Matrix g(n, 2);
    Vector a(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        g(i, 0) = u(rng) < 0.5 ? 1.0 : 0.0;
        g(i, 1) = u(rng) < 0.3 ? 1.0 : 0.0;
        std::poisson_distribution<int> pois(2.0 * std::exp(0.4 * g(i, 0) - 0.3 * g(i, 1)));
        a(i) = pois(rng);
    }
    const auto m = fit_log_mean_ratio(a, g);
    const Matrix gc = g.rowwise() - g.colwise().mean();
    const Vector q = a.array() * (-(g * m.coefficients)).array().exp();
    EXPECT_LT((gc.transpose() * q / static_cast<double>(n)).norm(), 1e-7);
    EXPECT_NEAR(m.coefficients(0), 0.4, 0.1);
    EXPECT_NEAR(m.coefficients(1), -0.3, 0.1);
}

TEST(Nuisance, LogitContrastPerLevel)
{
    Matrix g(10, 1);
    g << 0, 0, 0, 0, 1, 1, 1, 1, 1, 2;
    Vector a(10);
    a << 1, 0, 0, 0, 1, 1, 1, 0, 0, 1;
    g(9, 0) = 2;
    Matrix g2 = g;
    Vector a2 = a;
    // level 2 must have both exposure values
    g2.conservativeResize(11, 1);
    a2.conservativeResize(11);
    g2(10, 0) = 2;
    a2(10) = 0;
    const auto m = fit_logit_contrast(a2, g2);
    const auto lg = [](double p) { return std::log(p / (1 - p)); };
    Matrix q(3, 1);
    q << 0, 1, 2;
    const Vector phi = m.predict(q);
    EXPECT_NEAR(phi(0), 0.0, 1e-14);
    EXPECT_NEAR(phi(1), lg(0.6) - lg(0.25), 1e-12);
    EXPECT_NEAR(phi(2), lg(0.5) - lg(0.25), 1e-12);
    EXPECT_THROW(fit_logit_contrast(a, g), ValidationError); // level 2 has A = 1 only
}

TEST(Nuisance, LogitContrastNeedsReferenceLevel)
{
    Matrix g(4, 1);
    g << 1, 1, 2, 2;
    Vector a(4);
    a << 0, 1, 0, 1;
    EXPECT_THROW(fit_logit_contrast(a, g), ValidationError);
}

TEST(Nuisance, GradientMatchesFiniteDifferences)
{
    const auto t = oracle::binary_fixture(6, 200);
    Matrix x(t.n(), 1);
    x.col(0) = t.g(0) + Vector::LinSpaced(t.n(), -0.5, 0.5);
    for (auto kind : {ModelKind::linear, ModelKind::logistic, ModelKind::exponential_mean}) {
        NuisanceModel m = kind == ModelKind::linear    ? fit_linear(t.a(), x)
                          : kind == ModelKind::logistic ? fit_logistic(t.a(), x)
                                                        : fit_exponential_mean(t.y(), x);
        const Matrix grad = m.gradient(x);
        const Matrix fd = oracle::fd_jacobian(
            [&](const Vector& c) { return m.with_coefficients(c).predict(x); }, m.coefficients);
        EXPECT_LT((grad - fd).cwiseAbs().maxCoeff(), 1e-6) << to_string(kind);
    }
}

TEST(Nuisance, AutomaticChoice)
{
    const auto tb = oracle::binary_fixture(1, 100);
    EXPECT_EQ(fit_conditional_mean(tb.a(), tb.g(), NuisanceChoice::automatic).kind, ModelKind::logistic);
    const auto tc = oracle::continuous_fixture(1, 100);
    EXPECT_EQ(fit_conditional_mean(tc.a(), tc.g(), NuisanceChoice::automatic).kind, ModelKind::linear);
    EXPECT_EQ(parse_nuisance_choice("saturated"), NuisanceChoice::saturated);
    EXPECT_THROW(parse_nuisance_choice("forest"), ValidationError);
}
