#pragma once

#include "mrgenius/data.hpp"
#include "mrgenius/errors.hpp"
#include "mrgenius/linalg.hpp"
#include "mrgenius/nuisance.hpp"
#include "mrgenius/stats.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace mrgenius {

enum class OutcomeScale { additive, multiplicative };

// A nuisance model together with the regressors and target it was fitted on.
struct FittedNuisance {
    NuisanceModel model;
    Matrix x;
    Vector target;

    Vector fitted() const { return model.predict(x); }
    Matrix gradient() const { return model.gradient(x); }
    Vector score_mean() const
    {
        return model.score_design(x).transpose() * (target - fitted()) / static_cast<double>(x.rows());
    }
};

/// The G-estimation moment
///
///   U_k(beta) = w * {H_k - E(H_k|C)} * {A - E(A|G,C)} * e(beta)
///
/// with e(beta) = Y - beta*A - offset on the additive scale and
/// e(beta) = Y*exp(-beta*A)*multiplier on the multiplicative scale, stacked with
/// the score equations of every nuisance model it plugs in.
struct GeniusMoments {
    Matrix instruments;                  // H, n x K
    std::vector<FittedNuisance> centers; // one per column of H
    FittedNuisance exposure;             // E(A | G[, C])
    Vector weight;                       // h(C) row weights
    Vector a;
    Vector y;
    Vector offset;                       // additive scale only
    Vector multiplier;                   // multiplicative scale only
    OutcomeScale scale = OutcomeScale::additive;

    Eigen::Index n() const { return a.size(); }
    Eigen::Index k() const { return instruments.cols(); }

    Matrix centered() const
    {
        Matrix c(n(), k());
        for (Eigen::Index j = 0; j < k(); ++j) c.col(j) = instruments.col(j) - centers[static_cast<std::size_t>(j)].fitted();
        return c;
    }
    Vector residual() const { return a - exposure.fitted(); }

    Vector outcome_factor(double beta) const
    {
        if (scale == OutcomeScale::additive) return y - beta * a - offset;
        return (y.array() * (-beta * a.array()).exp() * multiplier.array()).matrix();
    }
    Vector outcome_factor_derivative(double beta) const
    {
        if (scale == OutcomeScale::additive) return -a;
        return (-a.array() * y.array() * (-beta * a.array()).exp() * multiplier.array()).matrix();
    }

    // Row-wise w * c_k * r, the part of U that does not involve beta.
    Matrix instrument_weights() const
    {
        const Vector wr = weight.array() * residual().array();
        return wr.asDiagonal() * centered();
    }
    Matrix rows(double beta) const { return outcome_factor(beta).asDiagonal() * instrument_weights(); }
    Vector mean(double beta) const { return column_means(rows(beta)); }
    Vector mean_derivative(double beta) const
    {
        return column_means(outcome_factor_derivative(beta).asDiagonal() * instrument_weights());
    }

    // Parameter layout (omega_1..omega_K, psi, beta).
    std::vector<std::pair<std::string, Eigen::Index>> layout() const
    {
        std::vector<std::pair<std::string, Eigen::Index>> out;
        for (std::size_t j = 0; j < centers.size(); ++j)
            out.emplace_back("center" + std::to_string(j + 1), centers[j].model.dim());
        out.emplace_back("exposure", exposure.model.dim());
        out.emplace_back("beta", 1);
        return out;
    }
    Eigen::Index nuisance_dim() const
    {
        Eigen::Index d = exposure.model.dim();
        for (const auto& c : centers) d += c.model.dim();
        return d;
    }

    Vector parameters(double beta) const
    {
        Vector th(nuisance_dim() + 1);
        Eigen::Index o = 0;
        for (const auto& c : centers) {
            th.segment(o, c.model.dim()) = c.model.coefficients;
            o += c.model.dim();
        }
        th.segment(o, exposure.model.dim()) = exposure.model.coefficients;
        th(th.size() - 1) = beta;
        return th;
    }

    // Copy with nuisance coefficients taken from theta; returns the beta entry.
    std::pair<GeniusMoments, double> at(const Vector& theta) const
    {
        GeniusMoments m = *this;
        Eigen::Index o = 0;
        for (auto& c : m.centers) {
            c.model = c.model.with_coefficients(theta.segment(o, c.model.dim()));
            o += c.model.dim();
        }
        m.exposure.model = m.exposure.model.with_coefficients(theta.segment(o, exposure.model.dim()));
        return {std::move(m), theta(theta.size() - 1)};
    }

    // Per-row stacked moments m~(theta): nuisance scores then U_1..U_K.
    Matrix stacked_rows(double beta) const
    {
        const Eigen::Index d = nuisance_dim();
        Matrix out(n(), d + k());
        Eigen::Index o = 0;
        for (const auto& c : centers) {
            const Matrix s = c.model.score_design(c.x).array().colwise() * (c.target - c.fitted()).array();
            out.middleCols(o, s.cols()) = s;
            o += s.cols();
        }
        const Matrix s = exposure.model.score_design(exposure.x).array().colwise() * (a - exposure.fitted()).array();
        out.middleCols(o, s.cols()) = s;
        out.rightCols(k()) = rows(beta);
        return out;
    }

    // P_n[dU/dtheta], K x dim(theta), from the closed-form derivatives.
    Matrix moment_jacobian(double beta) const
    {
        const Eigen::Index d = nuisance_dim();
        Matrix jac = Matrix::Zero(k(), d + 1);
        const Vector r = residual();
        const Vector e = outcome_factor(beta);
        const Matrix c = centered();
        const double nn = static_cast<double>(n());
        Eigen::Index o = 0;
        for (Eigen::Index j = 0; j < k(); ++j) {
            const auto& cj = centers[static_cast<std::size_t>(j)];
            const Vector f = -(weight.array() * r.array() * e.array());
            jac.block(j, o, 1, cj.model.dim()) = (cj.gradient().transpose() * f).transpose() / nn;
            o += cj.model.dim();
        }
        const Matrix grad_a = exposure.gradient();
        for (Eigen::Index j = 0; j < k(); ++j) {
            const Vector f = -(weight.array() * c.col(j).array() * e.array());
            jac.block(j, o, 1, grad_a.cols()) = (grad_a.transpose() * f).transpose() / nn;
        }
        jac.col(d) = mean_derivative(beta);
        return jac;
    }
};

struct SandwichParts {
    Matrix bread;       // B(theta)
    Matrix meat;        // P_n[m~ m~']
    Matrix combination; // M, identity on nuisance scores and Lambda'W on U
    Matrix covariance;  // B^- M meat M' B^-' / n
    double beta_variance = 0.0;
    std::vector<std::pair<std::string, Eigen::Index>> layout;
    Eigen::Index bread_rank = 0;
    bool bread_singular = false;
};

/// Stacked moments (P_n scores, Lambda'W P_n U) at theta, with the row
/// combination Lambda'W held fixed. The analytic bread is their Jacobian.
inline Vector stacked_moments(const GeniusMoments& sys, const Vector& theta, const Matrix& lambda_w)
{
    auto [m, beta] = sys.at(theta);
    const Eigen::Index d = m.nuisance_dim();
    Vector out(d + 1);
    Eigen::Index o = 0;
    for (const auto& c : m.centers) {
        out.segment(o, c.model.dim()) = c.score_mean();
        o += c.model.dim();
    }
    out.segment(o, m.exposure.model.dim()) = m.exposure.score_mean();
    out(d) = (lambda_w * m.mean(beta))(0);
    return out;
}

inline Matrix analytic_bread(const GeniusMoments& sys, double beta, const Matrix& lambda_w)
{
    const Eigen::Index d = sys.nuisance_dim();
    Matrix bread = Matrix::Zero(d + 1, d + 1);
    const double nn = static_cast<double>(sys.n());
    Eigen::Index o = 0;
    for (const auto& c : sys.centers) {
        bread.block(o, o, c.model.dim(), c.model.dim()) =
            -c.model.score_design(c.x).transpose() * c.gradient() / nn;
        o += c.model.dim();
    }
    const auto& e = sys.exposure;
    bread.block(o, o, e.model.dim(), e.model.dim()) = -e.model.score_design(e.x).transpose() * e.gradient() / nn;
    bread.row(d) = lambda_w * sys.moment_jacobian(beta);
    return bread;
}

/// Stacked-moment sandwich for the GENIUS family. `weight` is the K x K GMM
/// weight (1x1 identity for a single instrument); `center_moments` subtracts
/// P_n U before forming the meat.
inline SandwichParts sandwich(const GeniusMoments& sys, double beta, const Matrix& weight, bool center_moments = true)
{
    const Eigen::Index d = sys.nuisance_dim();
    const Eigen::Index K = sys.k();
    const Matrix lambda_w = sys.mean_derivative(beta).transpose() * weight; // 1 x K

    SandwichParts out;
    out.layout = sys.layout();
    out.bread = analytic_bread(sys, beta, lambda_w);

    Matrix rows = sys.stacked_rows(beta);
    if (center_moments) rows.rightCols(K).rowwise() -= rows.rightCols(K).colwise().mean();
    out.meat = rows.transpose() * rows / static_cast<double>(sys.n());

    out.combination = Matrix::Zero(d + 1, d + K);
    out.combination.topLeftCorner(d, d).setIdentity();
    out.combination.block(d, d, 1, K) = lambda_w;

    const auto pinv = pseudo_inverse(out.bread);
    out.bread_rank = pinv.rank;
    out.bread_singular = pinv.rank < out.bread.rows();
    const Matrix& binv = pinv.inverse;
    out.covariance = binv * out.combination * out.meat * out.combination.transpose() * binv.transpose()
                     / static_cast<double>(sys.n());
    out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
    out.beta_variance = std::max(0.0, out.covariance(d, d));
    return out;
}

inline SandwichParts sandwich_single(const GeniusMoments& sys, double beta)
{
    if (sys.k() != 1) throw ValidationError("single-instrument sandwich needs exactly one moment");
    return sandwich(sys, beta, Matrix::Identity(1, 1));
}

inline SandwichParts sandwich_gmm(const GeniusMoments& sys, double beta, const Matrix& weight,
                                  bool center_moments = true)
{
    if (weight.rows() != sys.k() || weight.cols() != sys.k())
        throw ValidationError("GMM weight dimension does not match the moment dimension");
    return sandwich(sys, beta, weight, center_moments);
}

/// Generic exactly-identified sandwich with a central-difference bread, for
/// estimating equations without a closed-form Jacobian. `row_moments(theta)`
/// returns the n x dim(theta) matrix of per-row moments.
inline SandwichParts numeric_sandwich(const std::function<Matrix(const Vector&)>& row_moments, const Vector& theta,
                                      double rel_step = 1e-6)
{
    const Matrix rows = row_moments(theta);
    const double n = static_cast<double>(rows.rows());
    const Eigen::Index d = theta.size();
    SandwichParts out;
    out.bread.resize(d, d);
    for (Eigen::Index j = 0; j < d; ++j) {
        const double h = rel_step * std::max(1.0, std::abs(theta(j)));
        Vector tp = theta, tm = theta;
        tp(j) += h;
        tm(j) -= h;
        out.bread.col(j) = (column_means(row_moments(tp)) - column_means(row_moments(tm))) / (2.0 * h);
    }
    out.meat = rows.transpose() * rows / n;
    out.combination = Matrix::Identity(d, d);
    const auto pinv = pseudo_inverse(out.bread);
    out.bread_rank = pinv.rank;
    out.bread_singular = pinv.rank < d;
    out.covariance = pinv.inverse * out.meat * pinv.inverse.transpose() / n;
    out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
    out.beta_variance = std::max(0.0, out.covariance(d - 1, d - 1));
    return out;
}

/// beta +- z_{(1+level)/2} * se.
inline std::pair<double, double> wald_ci(double beta, double se, double level = 0.95)
{
    if (!(level > 0.0 && level < 1.0)) throw ValidationError("confidence level must lie in (0,1)");
    if (!(se >= 0.0)) throw ValidationError("standard error must be finite and non-negative");
    const double z = stats::normal_quantile(0.5 + level / 2.0);
    return {beta - z * se, beta + z * se};
}

// ---------------------------------------------------------------------------
// Assembly of the moment system from a table.

struct MomentSpec {
    NuisanceChoice exposure_model = NuisanceChoice::automatic;
    NuisanceChoice center_model = NuisanceChoice::automatic; // used with covariates
    bool use_covariates = false;
    std::function<Matrix(const Matrix&)> transform; // h(G); identity when empty
    Vector weight;                                  // h(C); ones when empty
    OutcomeScale scale = OutcomeScale::additive;
};

inline GeniusMoments build_moments(const ObservationTable& t, const MomentSpec& spec)
{
    GeniusMoments sys;
    const Eigen::Index n = t.n();
    sys.a = t.a();
    sys.y = t.y();
    sys.scale = spec.scale;
    sys.offset = Vector::Zero(n);
    sys.multiplier = Vector::Ones(n);
    sys.instruments = spec.transform ? spec.transform(t.g()) : t.g();
    if (sys.instruments.rows() != n) throw ValidationError("instrument transformation changed the row count");
    sys.weight = spec.weight.size() ? spec.weight : Vector::Ones(n);
    if (sys.weight.size() != n) throw ValidationError("row weights must have length n");

    const bool cov = spec.use_covariates;
    if (cov && !t.has_covariates()) throw ValidationError("covariate adjustment requested but no covariates present");

    std::vector<std::string> g_names = t.iv_names().empty() ? default_names(t.p(), "G") : t.iv_names();
    std::vector<std::string> c_names = cov ? (t.covariate_names().empty() ? default_names(t.q(), "C") : t.covariate_names())
                                           : std::vector<std::string>{};
    for (Eigen::Index j = 0; j < sys.instruments.cols(); ++j) {
        FittedNuisance f;
        f.target = sys.instruments.col(j);
        if (cov) {
            f.x = t.c();
            f.model = fit_conditional_mean(f.target, f.x, spec.center_model, c_names);
        } else {
            f.x = Matrix(n, 0);
            f.model = fit_linear(f.target, f.x, {});
        }
        sys.centers.push_back(std::move(f));
    }
    sys.exposure.target = t.a();
    if (cov) {
        sys.exposure.x = hcat(t.g(), t.c());
        g_names.insert(g_names.end(), c_names.begin(), c_names.end());
    } else {
        sys.exposure.x = t.g();
    }
    NuisanceChoice choice = spec.exposure_model;
    if (choice == NuisanceChoice::automatic && !cov && t.p() == 1 && is_discrete(t.g(0)))
        choice = NuisanceChoice::saturated;
    sys.exposure.model = fit_conditional_mean(t.a(), sys.exposure.x, choice, g_names);
    return sys;
}

} // namespace mrgenius
