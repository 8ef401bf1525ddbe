#pragma once

#include "mrgenius/data.hpp"
#include "mrgenius/errors.hpp"
#include "mrgenius/inference.hpp"
#include "mrgenius/linalg.hpp"
#include "mrgenius/regression.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace mrgenius {

struct BaselineEstimate {
    std::string method;
    double beta = 0.0;
    double se = std::numeric_limits<double>::quiet_NaN();
    double ci_lo = std::numeric_limits<double>::quiet_NaN();
    double ci_hi = std::numeric_limits<double>::quiet_NaN();
    double level = 0.95;
    Eigen::Index n = 0;
    Eigen::Index p = 0;
    std::optional<double> intercept; // MR-Egger pleiotropy intercept
    std::optional<double> intercept_se;
    std::vector<Eigen::Index> instruments; // columns used as excluded instruments
};

namespace detail {

inline void finish_baseline(BaselineEstimate& est, double level)
{
    est.level = level;
    if (std::isfinite(est.se)) {
        auto [lo, hi] = wald_ci(est.beta, est.se, level);
        est.ci_lo = lo;
        est.ci_hi = hi;
    }
}

inline Matrix select_columns(const Matrix& m, const std::vector<Eigen::Index>& cols)
{
    Matrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(cols[k]);
    return out;
}

inline std::vector<Eigen::Index> all_columns(Eigen::Index p)
{
    std::vector<Eigen::Index> v(static_cast<std::size_t>(p));
    for (Eigen::Index j = 0; j < p; ++j) v[static_cast<std::size_t>(j)] = j;
    return v;
}

} // namespace detail

/// Classical 2SLS of Y on A (with intercept) using every instrument column
/// as excluded; homoscedastic standard error.
inline BaselineEstimate tsls(const ObservationTable& t, double level = 0.95)
{
    const auto fit = two_stage_least_squares(t.y(), t.a(), Matrix::Ones(t.n(), 1), t.g());
    BaselineEstimate est;
    est.method = "tsls";
    est.n = t.n();
    est.p = t.p();
    est.beta = fit.coefficients(1);
    est.se = std::sqrt(fit.covariance(1, 1));
    est.instruments = detail::all_columns(t.p());
    detail::finish_baseline(est, level);
    return est;
}

/// 2SLS that knows which instruments are valid: the invalid ones enter the
/// outcome equation as exogenous regressors.
inline BaselineEstimate oracle_tsls(const ObservationTable& t, const std::vector<Eigen::Index>& valid,
                                    double level = 0.95)
{
    if (valid.empty()) throw ValidationError("oracle TSLS needs at least one valid instrument");
    std::vector<bool> is_valid(static_cast<std::size_t>(t.p()), false);
    for (auto j : valid) {
        if (j < 0 || j >= t.p()) throw ValidationError("valid instrument index out of range");
        is_valid[static_cast<std::size_t>(j)] = true;
    }
    std::vector<Eigen::Index> invalid;
    std::vector<Eigen::Index> used;
    for (Eigen::Index j = 0; j < t.p(); ++j) (is_valid[static_cast<std::size_t>(j)] ? used : invalid).push_back(j);

    const Matrix exog = with_intercept(detail::select_columns(t.g(), invalid));
    const auto fit = two_stage_least_squares(t.y(), t.a(), exog, detail::select_columns(t.g(), used));
    const Eigen::Index b = exog.cols();
    BaselineEstimate est;
    est.method = "oracle-tsls";
    est.n = t.n();
    est.p = t.p();
    est.beta = fit.coefficients(b);
    est.se = std::sqrt(fit.covariance(b, b));
    est.instruments = used;
    detail::finish_baseline(est, level);
    return est;
}

/// MR-Egger on per-instrument summary associations built from the individual
/// data: gamma_j (A on G_j) and Gamma_j (Y on G_j), oriented so gamma_j > 0,
/// then weighted regression of Gamma on (1, gamma) with weights 1/se(Gamma)^2.
inline BaselineEstimate mr_egger(const ObservationTable& t, double level = 0.95)
{
    const Eigen::Index p = t.p();
    if (p < 3) throw ValidationError("MR-Egger needs at least three instruments");
    Vector gx(p), gy(p), w(p);
    for (Eigen::Index j = 0; j < p; ++j) {
        const Matrix x = with_intercept(t.g().col(j));
        const OlsFit fa = ols(t.a(), x);
        const OlsFit fy = ols(t.y(), x);
        const double sign = fa.coefficients(1) < 0.0 ? -1.0 : 1.0;
        gx(j) = sign * fa.coefficients(1);
        gy(j) = sign * fy.coefficients(1);
        const double v = fy.covariance(1, 1);
        if (!(v > 0.0)) throw ValidationError("MR-Egger: zero standard error for an instrument-outcome association");
        w(j) = 1.0 / v;
    }
    const Matrix x = with_intercept(gx);
    const OlsFit fit = ols(gy, x, w);
    const Matrix xtwx = x.transpose() * w.asDiagonal() * x;
    const Matrix inv = xtwx.inverse();
    const double inflate = std::max(1.0, std::sqrt(fit.sigma2));

    BaselineEstimate est;
    est.method = "mr-egger";
    est.n = t.n();
    est.p = p;
    est.beta = fit.coefficients(1);
    est.se = std::sqrt(inv(1, 1)) * inflate;
    est.intercept = fit.coefficients(0);
    est.intercept_se = std::sqrt(inv(0, 0)) * inflate;
    est.instruments = detail::all_columns(p);
    detail::finish_baseline(est, level);
    return est;
}

} // namespace mrgenius
