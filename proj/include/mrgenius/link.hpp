#pragma once

#include "mrgenius/data.hpp"
#include "mrgenius/errors.hpp"
#include "mrgenius/estimate.hpp"
#include "mrgenius/inference.hpp"
#include "mrgenius/nuisance.hpp"
#include "mrgenius/rootfind.hpp"
#include "mrgenius/stats.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mrgenius {

/// Externally supplied E(G) and E(A|G=g), used in place of the in-sample
/// moments (case-control designs).
struct ExternalMoments {
    double mean_g = 0.0;
    std::map<double, double> exposure_mean; // g -> E(A|G=g)

    void validate(bool binary_exposure) const
    {
        if (!std::isfinite(mean_g)) throw ValidationError("external E(G) is not finite");
        if (exposure_mean.empty()) throw ValidationError("external E(A|G) map is empty");
        for (const auto& [g, m] : exposure_mean) {
            if (!std::isfinite(m)) throw ValidationError("external E(A|G) is not finite");
            if (binary_exposure && (m < 0.0 || m > 1.0))
                throw ValidationError("external E(A|G=" + std::to_string(g) + ") outside [0,1]");
        }
    }
};

struct MultExposureOptions {
    double identification_tol = 0.05; // on |var(A|g)/var(A|0)/exp(w g) - 1|
    std::optional<double> fixed_log_ratio; // bypasses the fitted w
};

namespace detail {

inline void require_single_iv(const ObservationTable& t, const char* method)
{
    if (t.p() != 1) throw ValidationError(std::string(method) + " requires exactly one instrument column");
}

inline GeniusMoments external_moments_system(const ObservationTable& t, const ExternalMoments& ext)
{
    const Eigen::Index n = t.n();
    GeniusMoments sys;
    sys.a = t.a();
    sys.y = t.y();
    sys.scale = OutcomeScale::multiplicative;
    sys.offset = Vector::Zero(n);
    sys.multiplier = Vector::Ones(n);
    sys.weight = Vector::Ones(n);
    sys.instruments = t.g();

    FittedNuisance center;
    center.x = Matrix(n, 0);
    center.target = t.g(0);
    center.model.kind = ModelKind::linear;
    center.model.coefficients = Vector::Constant(1, ext.mean_g);
    center.model.columns = {};
    sys.centers.push_back(std::move(center));

    FittedNuisance exposure;
    exposure.x = t.g();
    exposure.target = t.a();
    exposure.model.kind = ModelKind::saturated;
    exposure.model.coefficients.resize(static_cast<Eigen::Index>(ext.exposure_mean.size()));
    Eigen::Index k = 0;
    for (const auto& [g, m] : ext.exposure_mean) {
        exposure.model.levels.push_back({g});
        exposure.model.coefficients(k++) = m;
    }
    exposure.model.columns = t.iv_names();
    sys.exposure = std::move(exposure);
    return sys;
}

inline void finish_link(LinkEstimate& est, const ObservationTable& t, const EstimatorOptions& opt)
{
    est.level = opt.level;
    est.n = t.n();
    est.p = t.p();
    est.method = to_string(est.link);
    if (!std::isfinite(est.beta)) throw IdentificationError(est.method + ": estimate is not finite");
}

} // namespace detail

/// Root in beta of P_n[{G - E(G)}{A - E(A|G)} Y exp(-beta A)] = 0.
inline LinkEstimate genius_mult_outcome(const ObservationTable& t,
                                        const std::optional<ExternalMoments>& external = std::nullopt,
                                        const EstimatorOptions& opt = {})
{
    detail::require_single_iv(t, "mult-outcome");
    LinkEstimate est;
    est.link = Link::mult_outcome;
    if ((t.y().array() < 0.0).any())
        est.diagnostics.warnings.push_back("negative outcomes present; the multiplicative model expects Y >= 0");
    attach_relevance(est, t, opt.weak_z);

    if ((t.a().array() == t.a()(0)).all())
        throw IdentificationError("mult-outcome: exposure is constant, so the estimating equation does not depend on beta");
    const bool binary_a = (t.a().array() == 0.0 || t.a().array() == 1.0).all();
    GeniusMoments sys;
    if (external) {
        external->validate(binary_a);
        sys = detail::external_moments_system(t, *external);
    } else {
        MomentSpec spec;
        spec.exposure_model = opt.exposure_model;
        spec.scale = OutcomeScale::multiplicative;
        sys = build_moments(t, spec);
    }

    const Vector w = sys.instrument_weights().col(0);
    const Vector wy = w.cwiseProduct(t.y());
    const double scale = w.cwiseAbs().maxCoeff() * t.y().cwiseAbs().maxCoeff() * t.a().cwiseAbs().maxCoeff();
    if (!(scale > 0.0) || wy.cwiseProduct(t.a()).cwiseAbs().maxCoeff() <= 1e-12 * scale)
        throw IdentificationError("mult-outcome: estimating equation is constant in beta (no exposure variation)");

    auto f = [&](double b) { return sys.mean(b)(0); };
    if (binary_a) {
        const double c0 = wy.cwiseProduct((1.0 - t.a().array()).matrix()).mean();
        const double c1 = wy.cwiseProduct(t.a()).mean();
        if (!(c0 * c1 < 0.0))
            throw IdentificationError("mult-outcome: estimating equation has no root (moments share a sign)");
        est.beta = std::log(-c1 / c0);
        est.diagnostics.iterations = 0;
    } else {
        const RootResult r = find_root(f, 0.0);
        est.beta = r.root;
        est.diagnostics.iterations = r.iterations;
    }
    est.diagnostics.objective = std::abs(f(est.beta));
    detail::finish_link(est, t, opt);

    const double deriv = sys.mean_derivative(est.beta)(0);
    const double dscale = wy.cwiseProduct(t.a()).cwiseAbs().mean();
    if (std::abs(deriv) <= 1e-6 * dscale)
        est.diagnostics.warnings.push_back("derivative of the estimating equation is near zero at the root");

    if (opt.compute_se) {
        if (external) {
            // external moments are treated as known
            const Vector u = sys.rows(est.beta).col(0);
            const double var = u.squaredNorm() / static_cast<double>(t.n()) / (deriv * deriv)
                               / static_cast<double>(t.n());
            est.se = std::sqrt(var);
            auto [lo, hi] = wald_ci(est.beta, est.se, est.level);
            est.ci_lo = lo;
            est.ci_hi = hi;
            est.covariance = Matrix::Constant(1, 1, var);
            est.layout = {{"beta", 1}};
        } else {
            attach_se(est, sandwich_single(sys, est.beta));
        }
    }
    return est;
}

/// Ratio estimator under a log-linear exposure model
/// log E(A|G=g)/E(A|G=0) = w g.
inline LinkEstimate genius_mult_exposure(const ObservationTable& t, const EstimatorOptions& opt = {},
                                         const MultExposureOptions& mopt = {})
{
    detail::require_single_iv(t, "mult-exposure");
    if (t.kind() == ExposureKind::continuous)
        throw ValidationError("mult-exposure requires a binary or count exposure");
    if ((t.a().array() < 0.0).any()) throw ValidationError("mult-exposure requires a non-negative exposure");

    LinkEstimate est;
    est.link = Link::mult_exposure;
    attach_relevance(est, t, opt.weak_z);

    const Vector g = t.g(0);
    const Vector& a = t.a();
    const Vector& y = t.y();
    const auto n = static_cast<double>(t.n());

    double varpi = 0.0;
    if (mopt.fixed_log_ratio) {
        varpi = *mopt.fixed_log_ratio;
    } else {
        const NuisanceModel m = fit_log_mean_ratio(a, t.g(), t.iv_names());
        varpi = m.coefficients(0);
        est.diagnostics.iterations = m.iterations;
    }

    if (is_discrete(g)) {
        std::map<double, std::vector<double>> by_level;
        for (Eigen::Index i = 0; i < t.n(); ++i) by_level[g(i)].push_back(a(i));
        auto variance = [](const std::vector<double>& v) {
            if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
            double m = 0.0;
            for (double x : v) m += x;
            m /= static_cast<double>(v.size());
            double s = 0.0;
            for (double x : v) s += (x - m) * (x - m);
            return s / static_cast<double>(v.size() - 1);
        };
        const auto ref = by_level.find(0.0);
        if (ref != by_level.end()) {
            const double v0 = variance(ref->second);
            double worst = 0.0;
            for (const auto& [lvl, vals] : by_level) {
                if (lvl == 0.0) continue;
                const double vg = variance(vals);
                if (!std::isfinite(vg)) continue;
                const double dev = v0 > 0.0 ? std::abs(vg / v0 / std::exp(varpi * lvl) - 1.0)
                                            : (vg > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
                worst = std::max(worst, dev);
            }
            if (worst < mopt.identification_tol)
                throw IdentificationError(
                    "mult-exposure: var(A|g)/var(A|0) is within tolerance of exp(w g) at every level, so the "
                    "effect is not identified; use the additive estimator instead");
        } else {
            est.diagnostics.warnings.push_back("reference level G=0 not observed; identification check skipped");
        }
    } else {
        est.diagnostics.warnings.push_back("continuous instrument; variance-ratio identification check skipped");
    }

    const Vector q = a.array() * (-varpi * g.array()).exp();
    const double kappa = q.mean();
    const double gbar = g.mean();
    const Vector wt = (g.array() - gbar) * (q.array() - kappa);
    const double num = wt.cwiseProduct(y).sum() / n;
    const double den = wt.cwiseProduct(a).sum() / n;
    const double dscale = wt.cwiseProduct(a).cwiseAbs().sum() / n;
    if (!(std::abs(den) > 1e-10 * dscale) || dscale == 0.0)
        throw IdentificationError("mult-exposure: denominator moment is zero");
    est.beta = num / den;
    est.diagnostics.objective = std::abs(num - est.beta * den);
    detail::finish_link(est, t, opt);

    if (opt.compute_se) {
        const bool fixed = mopt.fixed_log_ratio.has_value();
        auto rows = [&](const Vector& th) {
            const double mu = th(0), w = th(1), k = th(2), b = th(3);
            Matrix r(t.n(), 4);
            const Vector qq = a.array() * (-w * g.array()).exp();
            r.col(0) = (g.array() - mu).matrix();
            r.col(1) = fixed ? Vector((w - varpi) * Vector::Ones(t.n()))
                             : Vector(qq.array() * (g.array() - mu));
            r.col(2) = (qq.array() - k).matrix();
            r.col(3) = ((g.array() - mu) * (qq.array() - k) * (y.array() - b * a.array())).matrix();
            return r;
        };
        Vector theta(4);
        theta << gbar, varpi, kappa, est.beta;
        auto parts = numeric_sandwich(rows, theta);
        parts.layout = {{"center", 1}, {"log_ratio", 1}, {"kappa", 1}, {"beta", 1}};
        attach_se(est, parts);
    }
    return est;
}

/// Closed form for the odds-ratio exposure model:
/// theta = -log(1 - P_n[wY]/P_n[wAY]) with
/// w = {G - E(G|A=0)}{A - E(A|G=0)} exp(-phi(G) A).
inline LinkEstimate genius_odds_ratio(const ObservationTable& t, const EstimatorOptions& opt = {})
{
    detail::require_single_iv(t, "odds-ratio");
    if (!(t.a().array() == 0.0 || t.a().array() == 1.0).all())
        throw ValidationError("odds-ratio estimator requires a binary exposure");

    LinkEstimate est;
    est.link = Link::odds_ratio_exposure;
    attach_relevance(est, t, opt.weak_z);

    const Vector g = t.g(0);
    const Vector& a = t.a();
    const Vector& y = t.y();
    const auto nn = static_cast<double>(t.n());

    const Vector a0 = (1.0 - a.array()).matrix();
    const Vector g0 = (g.array() == 0.0).cast<double>().matrix();
    if (a0.sum() == 0.0) throw ValidationError("odds-ratio estimator needs units with A=0");
    if (g0.sum() == 0.0) throw ValidationError("odds-ratio estimator needs units with G=0");
    const double nu = g.dot(a0) / a0.sum();
    const double tau = a.dot(g0) / g0.sum();

    // P(A=1|G) model; the contrast phi(g) = logit p(g) - logit p(0).
    const bool saturated = is_discrete(g);
    NuisanceModel pa;
    if (saturated) {
        fit_logit_contrast(a, t.g(), t.iv_names()); // validates levels
        pa = fit_saturated(a, t.g(), t.iv_names());
    } else {
        pa = fit_logistic(a, t.g(), t.iv_names());
    }
    auto contrast = [&](const NuisanceModel& m) -> Vector {
        if (saturated) {
            const Vector p = m.predict(t.g());
            const double p0 = m.predict(Matrix::Zero(1, 1))(0);
            return (p.unaryExpr([](double v) { return stats::logit(v); }).array() - stats::logit(p0)).matrix();
        }
        return m.coefficients(1) * g;
    };

    const Vector phi = contrast(pa);
    const Vector w = ((g.array() - nu) * (a.array() - tau) * (-phi.array() * a.array()).exp()).matrix();
    const double num = w.dot(y) / nn;
    const Vector way = w.cwiseProduct(a).cwiseProduct(y);
    const double den = way.sum() / nn;
    const double scale = way.cwiseAbs().sum() / nn;
    if (!(std::abs(den) > 1e-8 * scale) || scale == 0.0)
        throw IdentificationError("odds-ratio: denominator moment is zero; the effect is not identified when every "
                                  "instrument satisfies the exclusion restriction");
    const double arg = 1.0 - num / den;
    if (!(arg > 0.0)) throw IdentificationError("odds-ratio: closed form has no finite solution");
    est.beta = -std::log(arg);
    detail::finish_link(est, t, opt);

    auto moment_rows = [&](const NuisanceModel& m, double n_, double t_, double b) -> Vector {
        const Vector ph = contrast(m);
        return ((g.array() - n_) * (a.array() - t_) * (-ph.array() * a.array()).exp() * y.array()
                * (-b * a.array()).exp())
            .matrix();
    };
    est.diagnostics.objective = std::abs(moment_rows(pa, nu, tau, est.beta).mean());

    {
        const Vector m0 = moment_rows(pa, nu, tau, 0.0);
        NullTest nt;
        nt.moment = m0.mean();
        nt.se = std::sqrt((m0.array() - nt.moment).square().sum() / (nn - 1.0) / nn);
        nt.z = nt.se > 0.0 ? nt.moment / nt.se : 0.0;
        nt.p_value = 2.0 * (1.0 - stats::normal_cdf(std::abs(nt.z)));
        est.diagnostics.null_test = nt;
    }

    if (opt.compute_se) {
        const Eigen::Index d = pa.dim();
        const Matrix sd = pa.score_design(t.g());
        auto rows = [&](const Vector& th) {
            Matrix r(t.n(), d + 3);
            const double n_ = th(0), t_ = th(1), b = th(d + 2);
            const NuisanceModel m = pa.with_coefficients(th.segment(2, d));
            r.col(0) = (a0.array() * (g.array() - n_)).matrix();
            r.col(1) = (g0.array() * (a.array() - t_)).matrix();
            const Vector resid = a - m.predict(t.g());
            r.middleCols(2, d) = sd.array().colwise() * resid.array();
            r.col(d + 2) = moment_rows(m, n_, t_, b);
            return r;
        };
        Vector theta(d + 3);
        theta(0) = nu;
        theta(1) = tau;
        theta.segment(2, d) = pa.coefficients;
        theta(d + 2) = est.beta;
        auto parts = numeric_sandwich(rows, theta);
        parts.layout = {{"center", 1}, {"reference_exposure", 1}, {"exposure", d}, {"beta", 1}};
        attach_se(est, parts);
    }
    return est;
}

/// E(G) and E(A|G=g) for case-control samples: control-only moments under a
/// rare outcome, or inverse-probability-of-sampling weighted moments given
/// the sampling fractions (f1 for cases, f0 for controls).
inline ExternalMoments case_control_adjust(const ObservationTable& t, bool rare_outcome,
                                           std::optional<std::pair<double, double>> fractions = std::nullopt)
{
    detail::require_single_iv(t, "case-control adjustment");
    if (!(t.y().array() == 0.0 || t.y().array() == 1.0).all())
        throw ValidationError("case-control adjustment requires a binary outcome");
    const Vector g = t.g(0);
    if (!is_discrete(g)) throw ValidationError("case-control adjustment requires a discrete instrument");

    Vector w(t.n());
    if (fractions) {
        const auto [f1, f0] = *fractions;
        if (!(f1 > 0.0 && f1 <= 1.0 && f0 > 0.0 && f0 <= 1.0))
            throw ValidationError("sampling fractions must lie in (0,1]");
        for (Eigen::Index i = 0; i < t.n(); ++i) w(i) = t.y()(i) == 1.0 ? 1.0 / f1 : 1.0 / f0;
    } else if (rare_outcome) {
        w = (t.y().array() == 0.0).cast<double>().matrix();
        if (w.sum() == 0.0) throw ValidationError("case-control adjustment: no controls (Y=0) in the data");
    } else {
        throw ValidationError("case-control adjustment needs the rare-outcome flag or sampling fractions");
    }

    ExternalMoments out;
    out.mean_g = w.dot(g) / w.sum();
    std::map<double, std::pair<double, double>> acc; // level -> (sum w a, sum w)
    for (Eigen::Index i = 0; i < t.n(); ++i) {
        if (w(i) == 0.0) continue;
        auto& s = acc[g(i)];
        s.first += w(i) * t.a()(i);
        s.second += w(i);
    }
    for (const auto& [lvl, s] : acc) out.exposure_mean[lvl] = s.first / s.second;
    out.validate((t.a().array() == 0.0 || t.a().array() == 1.0).all());
    return out;
}

} // namespace mrgenius
