#pragma once

#include "mrgenius/data.hpp"
#include "mrgenius/errors.hpp"
#include "mrgenius/estimate.hpp"
#include "mrgenius/inference.hpp"
#include "mrgenius/link.hpp"
#include "mrgenius/nuisance.hpp"
#include "mrgenius/regression.hpp"
#include "mrgenius/rootfind.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <utility>

namespace mrgenius {

enum class GmmWeight { identity, two_step, iterated };

inline std::string to_string(GmmWeight w)
{
    switch (w) {
    case GmmWeight::identity: return "identity";
    case GmmWeight::two_step: return "two-step";
    case GmmWeight::iterated: return "iterated";
    }
    return "unknown";
}

inline GmmWeight parse_gmm_weight(std::string_view s)
{
    if (s == "identity") return GmmWeight::identity;
    if (s == "two-step" || s == "two_step") return GmmWeight::two_step;
    if (s == "iterated") return GmmWeight::iterated;
    throw ValidationError("unknown GMM weight '" + std::string(s) + "'");
}

struct GmmConfig {
    std::function<Matrix(const Matrix&)> transform; // h(G); identity when empty
    GmmWeight weight = GmmWeight::two_step;
    int max_iterations = 10; // iterated weighting only
    double tolerance = 1e-10;
    bool center = true;      // center U before forming the weight and meat
    bool use_covariates = false;
};

namespace detail {

inline void check_ratio(double num, double den, double scale, double tol, const std::string& method)
{
    if (!(std::abs(den) > tol * scale) || !std::isfinite(num))
        throw IdentificationError(method + ": denominator is zero; the heteroscedasticity condition "
                                           "cov{G, var(A|G)} != 0 fails in this sample");
}

// Ratio solution of the scalar linear moment P_n[W (Y - offset - beta A)] = 0.
inline CausalEstimate ratio_estimate(const ObservationTable& t, const GeniusMoments& sys, const std::string& method,
                                     const EstimatorOptions& opt)
{
    const Vector w = sys.instrument_weights().col(0);
    const Vector& a = sys.a;
    const double n = static_cast<double>(t.n());
    const double num = w.dot(sys.y - sys.offset) / n;
    const double den = w.dot(a) / n;
    const double scale = std::sqrt(w.squaredNorm() / n * a.squaredNorm() / n);
    check_ratio(num, den, scale, opt.identification_tol, method);

    CausalEstimate est;
    est.method = method;
    est.level = opt.level;
    est.n = t.n();
    est.p = t.p();
    est.beta = num / den;
    est.diagnostics.objective = std::abs(sys.mean(est.beta)(0));
    attach_relevance(est, t, opt.weak_z);
    if (opt.compute_se) attach_se(est, sandwich_single(sys, est.beta));
    return est;
}

struct GmmSolution {
    double beta = 0.0;
    Matrix weight;
    Eigen::Index weight_rank = 0;
    int iterations = 0;
    double objective = 0.0;
    bool converged = true;
};

// Closed-form minimizer of m(b)'W m(b) for m(b) = P - b Q.
inline double gmm_step(const Vector& p_bar, const Vector& q_bar, const Matrix& w, double tol)
{
    const double curvature = q_bar.dot(w * q_bar);
    const double scale = q_bar.squaredNorm() * std::max(w.norm(), 1e-300);
    if (!(curvature > tol * scale))
        throw IdentificationError("GMM objective has a singular second derivative at the solution");
    return q_bar.dot(w * p_bar) / curvature;
}

inline GmmSolution solve_gmm(const GeniusMoments& sys, const GmmConfig& cfg)
{
    const Vector p_bar = sys.mean(0.0);
    const Vector q_bar = -sys.mean_derivative(0.0);
    const Eigen::Index K = sys.k();
    const Matrix wc = sys.weight.asDiagonal() * sys.centered();
    const Vector dq = sys.outcome_factor_derivative(0.0);
    const double a_rms = std::sqrt((sys.a.array() - sys.a.mean()).square().mean());
    const double q_ref = std::sqrt(wc.squaredNorm() / static_cast<double>(sys.n())) * a_rms
                         * std::sqrt(dq.squaredNorm() / static_cast<double>(sys.n()));
    if (!(q_bar.norm() > cfg.tolerance * q_ref))
        throw IdentificationError("GMM moments do not depend on beta; the exposure has no residual variation");
    GmmSolution s;
    s.weight = Matrix::Identity(K, K);
    s.weight_rank = K;
    s.beta = gmm_step(p_bar, q_bar, s.weight, cfg.tolerance);
    if (cfg.weight != GmmWeight::identity) {
        const int cap = cfg.weight == GmmWeight::two_step ? 1 : std::max(1, cfg.max_iterations);
        s.converged = cfg.weight == GmmWeight::two_step;
        for (int it = 0; it < cap; ++it) {
            const auto pinv = pseudo_inverse(outer_mean(sys.rows(s.beta), cfg.center));
            if (pinv.rank == 0) break; // moments vanish identically at beta
            s.weight = pinv.inverse;
            s.weight_rank = pinv.rank;
            const double next = gmm_step(p_bar, q_bar, s.weight, cfg.tolerance);
            const double change = std::abs(next - s.beta);
            s.beta = next;
            s.iterations = it + 1;
            if (cfg.weight == GmmWeight::iterated && change <= 1e-10 * std::max(1.0, std::abs(next))) {
                s.converged = true;
                break;
            }
        }
    }
    const Vector m = p_bar - s.beta * q_bar;
    s.objective = m.dot(s.weight * m);
    return s;
}

inline CausalEstimate gmm_estimate(const ObservationTable& t, const GeniusMoments& sys, const GmmConfig& cfg,
                                   const std::string& method, const EstimatorOptions& opt)
{
    const GmmSolution s = solve_gmm(sys, cfg);
    CausalEstimate est;
    est.method = method;
    est.level = opt.level;
    est.n = t.n();
    est.p = t.p();
    est.beta = s.beta;
    est.diagnostics.iterations = s.iterations;
    est.diagnostics.objective = s.objective;
    est.diagnostics.weight_rank = s.weight_rank;
    est.diagnostics.converged = s.converged;
    if (s.weight_rank < sys.k())
        est.diagnostics.warnings.push_back("GMM weight matrix is numerically singular; pseudo-inverse rank "
                                           + std::to_string(s.weight_rank) + " of " + std::to_string(sys.k()));
    if (!s.converged)
        est.diagnostics.warnings.push_back("iterated GMM reached the iteration cap");
    attach_relevance(est, t, opt.weak_z);
    if (opt.compute_se) attach_se(est, sandwich_gmm(sys, est.beta, s.weight, cfg.center));
    return est;
}

inline MomentSpec moment_spec(const EstimatorOptions& opt)
{
    MomentSpec spec;
    spec.exposure_model = opt.exposure_model;
    spec.center_model = opt.center_model;
    return spec;
}

} // namespace detail

/// beta = P_n[(G - Gbar)(A - E(A|G))Y] / P_n[(G - Gbar)(A - E(A|G))A].
inline CausalEstimate genius_single(const ObservationTable& t, const EstimatorOptions& opt = {})
{
    if (t.p() != 1) throw ValidationError("genius requires exactly one instrument column; use genius-gmm");
    const GeniusMoments sys = build_moments(t, detail::moment_spec(opt));
    return detail::ratio_estimate(t, sys, "genius", opt);
}

/// Two-step form: OLS residuals of A on G, then 2SLS of Y on A with the
/// generated instrument (G - Gbar) * residual.
inline CausalEstimate genius_single_lewbel(const ObservationTable& t, const EstimatorOptions& opt = {})
{
    if (t.p() != 1) throw ValidationError("genius-lewbel requires exactly one instrument column");
    const Matrix ones = Matrix::Ones(t.n(), 1);
    const OlsFit first = ols(t.a(), with_intercept(t.g()));
    const Vector z = (t.g(0).array() - t.g(0).mean()) * first.residuals.array();
    const double scale = std::sqrt(z.squaredNorm() * t.a().squaredNorm()) / static_cast<double>(t.n());
    detail::check_ratio(0.0, z.dot(t.a() - Vector::Constant(t.n(), t.a().mean())) / static_cast<double>(t.n()),
                        scale, opt.identification_tol, "genius-lewbel");
    const TslsFit fit = two_stage_least_squares(t.y(), t.a(), ones, z);

    EstimatorOptions lin = opt;
    lin.exposure_model = NuisanceChoice::linear;
    const GeniusMoments sys = build_moments(t, detail::moment_spec(lin));

    CausalEstimate est;
    est.method = "genius-lewbel";
    est.level = opt.level;
    est.n = t.n();
    est.p = t.p();
    est.beta = fit.coefficients(1);
    est.diagnostics.objective = std::abs(sys.mean(est.beta)(0));
    attach_relevance(est, t, opt.weak_z);
    if (opt.compute_se) attach_se(est, sandwich_single(sys, est.beta));
    return est;
}

/// Solves P_n[h(C){G - E(G|C)}{A - E(A|G,C)}(Y - beta A)] = 0; `h` maps the
/// covariate matrix to row weights (h = 1 when empty).
inline CausalEstimate genius_covariates(const ObservationTable& t,
                                        const std::function<Vector(const Matrix&)>& h = {},
                                        const EstimatorOptions& opt = {})
{
    if (t.p() != 1) throw ValidationError("genius-covariates requires exactly one instrument column");
    if (!t.has_covariates()) throw ValidationError("genius-covariates requires covariate columns");
    MomentSpec spec = detail::moment_spec(opt);
    spec.use_covariates = true;
    if (h) spec.weight = h(t.c());
    const GeniusMoments sys = build_moments(t, spec);
    return detail::ratio_estimate(t, sys, "genius-covariates", opt);
}

/// argmin_b P_n[U(b)]' W P_n[U(b)] over the K moments U = (h - E h)(A - E(A|G))(Y - bA).
inline CausalEstimate genius_gmm(const ObservationTable& t, const GmmConfig& cfg = {}, const EstimatorOptions& opt = {})
{
    MomentSpec spec = detail::moment_spec(opt);
    spec.transform = cfg.transform;
    spec.use_covariates = cfg.use_covariates;
    const GeniusMoments sys = build_moments(t, spec);
    if (sys.k() < 1) throw ValidationError("GMM needs at least one moment");
    return detail::gmm_estimate(t, sys, cfg, "genius-gmm", opt);
}

namespace detail {

inline CausalEstimate plain_genius(const ObservationTable& t, const EstimatorOptions& opt)
{
    return t.p() == 1 ? genius_single(t, opt) : genius_gmm(t, GmmConfig{}, opt);
}

inline NuisanceModel fit_outcome_mean(const Vector& y0, const ObservationTable& t, NuisanceChoice choice)
{
    if (choice == NuisanceChoice::automatic) choice = NuisanceChoice::linear;
    return fit_conditional_mean(y0, t.g(), choice, t.iv_names());
}

inline CausalEstimate efficient_additive(const ObservationTable& t, const EstimatorOptions& opt)
{
    CausalEstimate init = plain_genius(t, opt);
    GeniusMoments sys = build_moments(t, moment_spec(opt));
    try {
        const Vector y0 = t.y() - init.beta * t.a();
        sys.offset = fit_outcome_mean(y0, t, opt.outcome_model).predict(t.g());
    } catch (const std::exception& e) {
        init.method = "genius-efficient";
        init.diagnostics.warnings.push_back(std::string("outcome-mean fit failed (") + e.what()
                                            + "); returning the plain estimate");
        return init;
    }
    CausalEstimate est = t.p() == 1 ? ratio_estimate(t, sys, "genius-efficient", opt)
                                    : gmm_estimate(t, sys, GmmConfig{}, "genius-efficient", opt);
    est.diagnostics.warnings.insert(est.diagnostics.warnings.begin(), init.diagnostics.warnings.begin(),
                                    init.diagnostics.warnings.end());
    return est;
}

inline CausalEstimate efficient_multiplicative(const ObservationTable& t, const EstimatorOptions& opt)
{
    if (t.p() != 1) throw ValidationError("multiplicative efficient variant requires one instrument column");
    LinkEstimate init = genius_mult_outcome(t, std::nullopt, opt);
    MomentSpec spec = moment_spec(opt);
    spec.scale = OutcomeScale::multiplicative;
    GeniusMoments sys = build_moments(t, spec);
    const Matrix g0 = Matrix::Zero(1, 1);
    const bool nonneg = !(t.y().array() < 0.0).any();
    NuisanceChoice choice = opt.outcome_model;
    if (choice == NuisanceChoice::automatic) choice = NuisanceChoice::linear;

    // mu(0; b) / mu(G; b) for the fitted mean of Y exp(-bA) given G.
    auto ratio = [&](double b) -> Vector {
        const Vector y0 = (t.y().array() * (-b * t.a().array()).exp()).matrix();
        NuisanceModel m;
        if (choice == NuisanceChoice::saturated)
            m = fit_saturated(y0, t.g(), t.iv_names());
        else if (nonneg)
            m = fit_exponential_mean(y0, t.g(), t.iv_names());
        else
            m = fit_linear(y0, t.g(), t.iv_names());
        const Vector mu = m.predict(t.g());
        if (!(mu.array() > 0.0).all()) throw ConvergenceError("fitted outcome mean is not positive", 0.0);
        return (m.predict(g0)(0) / mu.array()).matrix();
    };

    auto fallback = [&](const std::string& why) {
        CausalEstimate out = init;
        out.method = "genius-efficient";
        out.diagnostics.warnings.push_back("outcome-mean fit failed (" + why + "); returning the plain estimate");
        return out;
    };
    double beta = 0.0;
    int iterations = 0;
    try {
        if (choice == NuisanceChoice::saturated && !is_discrete(t.g(0)))
            throw ValidationError("saturated outcome mean needs a discrete instrument");
        auto f = [&](double b) {
            GeniusMoments s = sys;
            s.multiplier = ratio(b);
            return s.mean(b)(0);
        };
        RootOptions local;
        local.lo = init.beta - 1.0;
        local.hi = init.beta + 1.0;
        local.grid_points = 400;
        local.max_abs = std::max(30.0, std::abs(init.beta) + 1.0);
        RootResult r;
        try {
            r = find_root(f, init.beta, local);
        } catch (const IdentificationError&) {
            r = find_root(f, init.beta);
        }
        beta = r.root;
        iterations = r.iterations;
        sys.multiplier = ratio(beta);
    } catch (const IdentificationError&) {
        throw;
    } catch (const std::exception& e) {
        return fallback(e.what());
    }

    CausalEstimate est;
    est.method = "genius-efficient";
    est.level = opt.level;
    est.n = t.n();
    est.p = t.p();
    est.beta = beta;
    est.diagnostics.iterations = iterations;
    est.diagnostics.objective = std::abs(sys.mean(beta)(0));
    est.diagnostics.warnings = init.diagnostics.warnings;
    attach_relevance(est, t, opt.weak_z);
    if (opt.compute_se) attach_se(est, sandwich_single(sys, beta));
    return est;
}

} // namespace detail

/// Efficiency-augmented GENIUS: subtracts a fitted treatment-free outcome mean
/// mu(G) (additive) or rescales by mu(0)/mu(G) (multiplicative) and re-solves.
inline CausalEstimate genius_efficient(const ObservationTable& t, OutcomeScale scale = OutcomeScale::additive,
                                       const EstimatorOptions& opt = {})
{
    return scale == OutcomeScale::additive ? detail::efficient_additive(t, opt)
                                           : detail::efficient_multiplicative(t, opt);
}

} // namespace mrgenius
