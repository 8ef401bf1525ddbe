#pragma once

#include "mrgenius/errors.hpp"
#include "mrgenius/linalg.hpp"

#include <string>

namespace mrgenius {

struct OlsFit {
    Vector coefficients;
    Vector residuals;
    double sigma2 = 0.0; // residual variance with n - k degrees of freedom
    Matrix covariance;   // sigma2 (X'X)^-1
};

inline OlsFit ols(const Vector& y, const Matrix& x, const Vector& weights = {})
{
    if (x.rows() != y.size()) throw ValidationError("ols: length mismatch");
    const Vector w = weights.size() ? weights : Vector::Ones(y.size());
    const Vector sw = w.array().sqrt();
    const Matrix xw = sw.asDiagonal() * x;
    Eigen::ColPivHouseholderQR<Matrix> qr(xw);
    qr.setThreshold(1e-10);
    if (qr.rank() < x.cols()) throw ValidationError("ols: design matrix is rank deficient");
    OlsFit f;
    f.coefficients = qr.solve(sw.asDiagonal() * y);
    f.residuals = y - x * f.coefficients;
    const double dof = static_cast<double>(x.rows() - x.cols());
    f.sigma2 = dof > 0 ? (w.array() * f.residuals.array().square()).sum() / dof : 0.0;
    const Matrix xtx = xw.transpose() * xw;
    f.covariance = f.sigma2 * xtx.inverse();
    return f;
}

struct TslsFit {
    Vector coefficients; // (exogenous..., endogenous)
    Matrix covariance;   // homoscedastic
    double sigma2 = 0.0;
};

/// Two-stage least squares of y on [exog, endog] using instruments
/// [exog, excluded]. exog should carry the intercept column.
inline TslsFit two_stage_least_squares(const Vector& y, const Vector& endog, const Matrix& exog, const Matrix& excluded)
{
    const Matrix z = hcat(exog, excluded);
    Matrix x(y.size(), exog.cols() + 1);
    x << exog, endog;
    Eigen::ColPivHouseholderQR<Matrix> zqr(z);
    zqr.setThreshold(1e-10);
    if (zqr.rank() < z.cols()) throw ValidationError("first-stage instrument matrix is rank deficient");
    const Matrix xhat = z * zqr.solve(x); // P_Z X
    Eigen::ColPivHouseholderQR<Matrix> xqr(xhat);
    xqr.setThreshold(1e-10);
    if (xqr.rank() < xhat.cols()) throw ValidationError("second-stage design is rank deficient");
    TslsFit f;
    f.coefficients = xqr.solve(y);
    const Vector e = y - x * f.coefficients;
    const double dof = static_cast<double>(y.size() - x.cols());
    f.sigma2 = dof > 0 ? e.squaredNorm() / dof : 0.0;
    f.covariance = f.sigma2 * (xhat.transpose() * xhat).inverse();
    return f;
}

} // namespace mrgenius
