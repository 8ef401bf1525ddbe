#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace mrgenius {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Relative singular-value cutoff shared by every generalized inverse.
inline constexpr double kPinvRelTol = 1e-12;

struct PseudoInverse {
    Matrix inverse;
    Eigen::Index rank = 0;
    double condition = 0.0; // sigma_max / sigma_min over the full spectrum
};

// Moore-Penrose inverse via SVD, dropping singular values below
// rel_tol * sigma_max.
inline PseudoInverse pseudo_inverse(const Matrix& m, double rel_tol = kPinvRelTol)
{
    PseudoInverse out;
    if (m.size() == 0) {
        out.inverse = Matrix(m.cols(), m.rows());
        return out;
    }
    Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& s = svd.singularValues();
    const double smax = s.size() > 0 ? s(0) : 0.0;
    const double cut = rel_tol * smax;
    Vector sinv = Vector::Zero(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        if (s(i) > cut && s(i) > 0.0) {
            sinv(i) = 1.0 / s(i);
            ++out.rank;
        }
    }
    const double smin = s.size() > 0 ? s(s.size() - 1) : 0.0;
    out.condition = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
    out.inverse = svd.matrixV() * sinv.asDiagonal() * svd.matrixU().transpose();
    return out;
}

inline double condition_number(const Matrix& m)
{
    Eigen::JacobiSVD<Matrix> svd(m);
    const Vector& s = svd.singularValues();
    if (s.size() == 0) return 0.0;
    const double smin = s(s.size() - 1);
    return smin > 0.0 ? s(0) / smin : std::numeric_limits<double>::infinity();
}

// Design with a leading column of ones.
inline Matrix with_intercept(const Matrix& x)
{
    Matrix d(x.rows(), x.cols() + 1);
    d.col(0).setOnes();
    d.rightCols(x.cols()) = x;
    return d;
}

inline Matrix hcat(const Matrix& a, const Matrix& b)
{
    Matrix out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

inline Vector column_means(const Matrix& m)
{
    return m.colwise().mean().transpose();
}

// Sample second moment of rows, P_n[x x'], optionally about the column means.
inline Matrix outer_mean(const Matrix& rows, bool center)
{
    const double n = static_cast<double>(rows.rows());
    if (!center) return rows.transpose() * rows / n;
    Matrix c = rows.rowwise() - rows.colwise().mean();
    return c.transpose() * c / n;
}

} // namespace mrgenius
