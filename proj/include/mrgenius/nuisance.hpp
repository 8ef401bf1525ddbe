#pragma once

#include "mrgenius/data.hpp"
#include "mrgenius/errors.hpp"
#include "mrgenius/linalg.hpp"
#include "mrgenius/rootfind.hpp"
#include "mrgenius/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace mrgenius {

enum class ModelKind { saturated, linear, logistic, exponential_mean };

inline std::string to_string(ModelKind k)
{
    switch (k) {
    case ModelKind::saturated: return "saturated";
    case ModelKind::linear: return "linear";
    case ModelKind::logistic: return "logistic";
    case ModelKind::exponential_mean: return "exponential-mean";
    }
    return "unknown";
}

/// A fitted conditional-mean model m(x; coefficients).
///
/// Saturated models keep one coefficient per observed level of the
/// conditioning variables (the within-level mean), so every kind exposes the
/// same coefficient-vector interface: prediction, the per-row derivative of
/// the prediction with respect to the coefficients, and the design D of the
/// estimating equation P_n[D'(target - m)] = 0 the fit solves.
struct NuisanceModel {
    ModelKind kind = ModelKind::linear;
    Vector coefficients;
    std::vector<std::vector<double>> levels; // saturated only, aligned with coefficients
    bool intercept = true;
    std::vector<std::string> columns;        // design description
    int iterations = 0;
    double score_norm = 0.0;

    Eigen::Index dim() const noexcept { return coefficients.size(); }

    Vector predict(const Matrix& x) const
    {
        switch (kind) {
        case ModelKind::saturated: {
            Vector out(x.rows());
            for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = coefficients(level_index(x, i));
            return out;
        }
        case ModelKind::linear: return linear_predictor(x);
        case ModelKind::logistic: return linear_predictor(x).unaryExpr([](double e) { return stats::expit(e); });
        case ModelKind::exponential_mean: return linear_predictor(x).array().exp();
        }
        return {};
    }

    Matrix gradient(const Matrix& x) const
    {
        switch (kind) {
        case ModelKind::saturated: return indicators(x);
        case ModelKind::linear: return design(x);
        case ModelKind::logistic: {
            const Vector p = predict(x);
            return (p.array() * (1.0 - p.array())).matrix().asDiagonal() * design(x);
        }
        case ModelKind::exponential_mean: return predict(x).asDiagonal() * design(x);
        }
        return {};
    }

    Matrix score_design(const Matrix& x) const
    {
        return kind == ModelKind::saturated ? indicators(x) : design(x);
    }

    Matrix design(const Matrix& x) const { return intercept ? with_intercept(x) : x; }

    NuisanceModel with_coefficients(Vector c) const
    {
        NuisanceModel m = *this;
        m.coefficients = std::move(c);
        return m;
    }

    std::map<std::vector<double>, double> group_means() const
    {
        std::map<std::vector<double>, double> out;
        for (std::size_t k = 0; k < levels.size(); ++k)
            out.emplace(levels[k], coefficients(static_cast<Eigen::Index>(k)));
        return out;
    }

private:
    Vector linear_predictor(const Matrix& x) const { return design(x) * coefficients; }

    Eigen::Index level_index(const Matrix& x, Eigen::Index i) const
    {
        for (std::size_t k = 0; k < levels.size(); ++k) {
            bool match = true;
            for (Eigen::Index j = 0; j < x.cols() && match; ++j)
                match = levels[k][static_cast<std::size_t>(j)] == x(i, j);
            if (match) return static_cast<Eigen::Index>(k);
        }
        std::ostringstream msg;
        msg << "saturated model has no level (";
        for (Eigen::Index j = 0; j < x.cols(); ++j) msg << (j ? "," : "") << x(i, j);
        msg << ")";
        throw ValidationError(msg.str());
    }

    Matrix indicators(const Matrix& x) const
    {
        Matrix out = Matrix::Zero(x.rows(), static_cast<Eigen::Index>(levels.size()));
        for (Eigen::Index i = 0; i < x.rows(); ++i) out(i, level_index(x, i)) = 1.0;
        return out;
    }
};

/// Within-level means of `target` over the distinct rows of `by`.
inline NuisanceModel fit_saturated(const Vector& target, const Matrix& by,
                                   std::vector<std::string> columns = {})
{
    if (by.rows() != target.size()) throw ValidationError("saturated fit: length mismatch");
    std::map<std::vector<double>, std::pair<double, double>> acc;
    for (Eigen::Index i = 0; i < by.rows(); ++i) {
        std::vector<double> key(static_cast<std::size_t>(by.cols()));
        for (Eigen::Index j = 0; j < by.cols(); ++j) key[static_cast<std::size_t>(j)] = by(i, j);
        auto& [s, c] = acc[key];
        s += target(i);
        c += 1.0;
    }
    NuisanceModel m;
    m.kind = ModelKind::saturated;
    m.intercept = false;
    m.columns = std::move(columns);
    m.coefficients.resize(static_cast<Eigen::Index>(acc.size()));
    Eigen::Index k = 0;
    for (const auto& [key, sc] : acc) {
        m.levels.push_back(key);
        m.coefficients(k++) = sc.first / sc.second;
    }
    return m;
}

inline std::vector<std::string> default_names(Eigen::Index cols, const std::string& stem = "x")
{
    std::vector<std::string> out;
    for (Eigen::Index j = 0; j < cols; ++j) out.push_back(stem + std::to_string(j + 1));
    return out;
}

/// Ordinary least squares of `target` on (1, x). Throws on rank deficiency,
/// naming the columns that are linear combinations of the others.
inline NuisanceModel fit_linear(const Vector& target, const Matrix& x,
                                std::vector<std::string> columns = {}, bool intercept = true)
{
    if (x.rows() != target.size()) throw ValidationError("linear fit: length mismatch");
    if (columns.empty()) columns = default_names(x.cols());
    NuisanceModel m;
    m.kind = ModelKind::linear;
    m.intercept = intercept;
    m.columns = columns;
    const Matrix d = m.design(x);
    Eigen::ColPivHouseholderQR<Matrix> qr(d);
    qr.setThreshold(1e-10);
    if (qr.rank() < d.cols()) {
        std::vector<std::string> names;
        if (intercept) names.push_back("(intercept)");
        names.insert(names.end(), columns.begin(), columns.end());
        std::string msg = "design matrix is rank deficient; collinear column(s):";
        for (Eigen::Index k = qr.rank(); k < d.cols(); ++k)
            msg += " " + names[static_cast<std::size_t>(qr.colsPermutation().indices()(k))];
        throw ValidationError(msg);
    }
    m.coefficients = qr.solve(target);
    m.score_norm = (d.transpose() * (target - d * m.coefficients)).norm() / static_cast<double>(d.rows());
    return m;
}

struct IrlsOptions {
    double tolerance = 1e-8; // on the mean score norm
    int max_iterations = 100;
};

namespace detail {

inline double logistic_deviance(const Vector& y, const Vector& eta)
{
    double dev = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        // log(1 + e^eta) - y*eta, computed without overflow
        const double e = eta(i);
        const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
        dev += softplus - y(i) * e;
    }
    return 2.0 * dev;
}

} // namespace detail

/// Logistic regression by IRLS with step-halving whenever the deviance rises.
inline NuisanceModel fit_logistic(const Vector& target, const Matrix& x,
                                  std::vector<std::string> columns = {}, const IrlsOptions& opt = {})
{
    if (x.rows() != target.size()) throw ValidationError("logistic fit: length mismatch");
    if (!(target.array() == 0.0 || target.array() == 1.0).all())
        throw ValidationError("logistic fit requires a binary {0,1} target");
    if (columns.empty()) columns = default_names(x.cols());
    NuisanceModel m;
    m.kind = ModelKind::logistic;
    m.columns = std::move(columns);
    const Matrix d = with_intercept(x);
    const double n = static_cast<double>(d.rows());
    const double ybar = target.mean();
    if (ybar <= 0.0 || ybar >= 1.0)
        throw ConvergenceError("logistic fit: target is constant (complete separation)", 0.0);

    Vector beta = Vector::Zero(d.cols());
    beta(0) = stats::logit(ybar);
    Vector eta = d * beta;
    double dev = detail::logistic_deviance(target, eta);
    double gnorm = 0.0;
    for (int it = 0; it <= opt.max_iterations; ++it) {
        const Vector p = eta.unaryExpr([](double e) { return stats::expit(e); });
        const Vector score = d.transpose() * (target - p);
        gnorm = score.norm() / n;
        m.iterations = it;
        if (gnorm < opt.tolerance) {
            m.coefficients = beta;
            m.score_norm = gnorm;
            return m;
        }
        if (it == opt.max_iterations) break;
        const Vector w = p.array() * (1.0 - p.array());
        const Matrix info = d.transpose() * w.asDiagonal() * d;
        Eigen::LDLT<Matrix> ldlt(info);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
            throw ConvergenceError("logistic fit: information matrix not positive definite", gnorm);
        Vector step = ldlt.solve(score);
        double t = 1.0;
        Vector next = beta + step;
        Vector next_eta = d * next;
        double next_dev = detail::logistic_deviance(target, next_eta);
        for (int h = 0; h < 30 && !(next_dev <= dev * (1.0 + 1e-12) + 1e-12); ++h) {
            t *= 0.5;
            next = beta + t * step;
            next_eta = d * next;
            next_dev = detail::logistic_deviance(target, next_eta);
        }
        beta = next;
        eta = next_eta;
        dev = next_dev;
        if (eta.cwiseAbs().maxCoeff() > 35.0)
            throw ConvergenceError("logistic fit did not converge: fitted probabilities numerically 0 or 1 "
                                   "(separation); final score norm " + std::to_string(gnorm), gnorm);
    }
    throw ConvergenceError("logistic fit did not converge in " + std::to_string(opt.max_iterations)
                           + " iterations; final score norm " + std::to_string(gnorm), gnorm);
}

/// Log-linear mean model E(target|x) = exp(b0 + b'x), fitted by the Poisson
/// quasi-likelihood score equations. Target must be non-negative.
inline NuisanceModel fit_exponential_mean(const Vector& target, const Matrix& x,
                                          std::vector<std::string> columns = {},
                                          const IrlsOptions& opt = {})
{
    if ((target.array() < 0.0).any()) throw ValidationError("exponential-mean fit requires target >= 0");
    const double ybar = target.mean();
    if (!(ybar > 0.0)) throw ValidationError("exponential-mean fit requires a non-zero target");
    if (columns.empty()) columns = default_names(x.cols());
    NuisanceModel m;
    m.kind = ModelKind::exponential_mean;
    m.columns = std::move(columns);
    const Matrix d = with_intercept(x);
    const double n = static_cast<double>(d.rows());
    Vector beta = Vector::Zero(d.cols());
    beta(0) = std::log(ybar);
    auto objective = [&](const Vector& b) { // negative quasi log-likelihood
        const Vector e = d * b;
        return (e.array().exp() - target.array() * e.array()).sum();
    };
    double obj = objective(beta);
    double gnorm = 0.0;
    for (int it = 0; it <= opt.max_iterations; ++it) {
        const Vector mu = (d * beta).array().exp();
        const Vector score = d.transpose() * (target - mu);
        gnorm = score.norm() / (n * ybar);
        m.iterations = it;
        if (gnorm < opt.tolerance) {
            m.coefficients = beta;
            m.score_norm = gnorm;
            return m;
        }
        if (it == opt.max_iterations) break;
        const Matrix info = d.transpose() * mu.asDiagonal() * d;
        Eigen::LDLT<Matrix> ldlt(info);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
            throw ConvergenceError("exponential-mean fit: information matrix not positive definite", gnorm);
        const Vector step = ldlt.solve(score);
        double t = 1.0;
        Vector next = beta + step;
        double next_obj = objective(next);
        for (int h = 0; h < 30 && !(next_obj <= obj + 1e-12 * std::abs(obj)); ++h) {
            t *= 0.5;
            next = beta + t * step;
            next_obj = objective(next);
        }
        beta = next;
        obj = next_obj;
        if (!beta.allFinite() || beta.cwiseAbs().maxCoeff() > 700.0)
            throw ConvergenceError("exponential-mean fit diverged", gnorm);
    }
    throw ConvergenceError("exponential-mean fit did not converge; final score norm " + std::to_string(gnorm),
                           gnorm);
}

/// Solves P_n[A exp(-w'G)(G - P_n G)] = 0 for the log mean-ratio
/// coefficients w, so that E(A|G=g)/E(A|G=0) = exp(w'g). Damped Newton; a
/// bracketing root search takes over for a single instrument when Newton
/// stalls. The returned model predicts exp(w'g) (no intercept).
inline NuisanceModel fit_log_mean_ratio(const Vector& a, const Matrix& g, std::vector<std::string> columns = {},
                                        double tolerance = 1e-8, int max_iterations = 100)
{
    if ((a.array() < 0.0).any()) throw ValidationError("log mean-ratio fit requires exposure >= 0");
    if ((a.array() == 0.0).all()) throw ValidationError("log mean-ratio fit requires a non-zero exposure");
    if (columns.empty()) columns = default_names(g.cols(), "G");
    const double n = static_cast<double>(g.rows());
    const Matrix gc = g.rowwise() - g.colwise().mean();
    const double scale = std::max(1.0, (gc.cwiseAbs().transpose() * a).norm() / n);
    const double tol = tolerance * scale;
    auto moment = [&](const Vector& w) -> Vector {
        const Vector q = a.array() * (-(g * w)).array().exp();
        return gc.transpose() * q / n;
    };
    NuisanceModel m;
    m.kind = ModelKind::exponential_mean;
    m.intercept = false;
    m.columns = std::move(columns);

    Vector w = Vector::Zero(g.cols());
    Vector mom = moment(w);
    double norm = mom.norm();
    std::vector<double> trace{norm};
    for (int it = 0; it < max_iterations && norm >= tol; ++it) {
        const Vector q = a.array() * (-(g * w)).array().exp();
        const Matrix jac = -(gc.transpose() * q.asDiagonal() * g) / n;
        const Vector step = -pseudo_inverse(jac).inverse * mom;
        double t = 1.0;
        Vector next = w + step;
        Vector next_mom = moment(next);
        for (int h = 0; h < 40 && !(next_mom.allFinite() && next_mom.norm() < norm); ++h) {
            t *= 0.5;
            next = w + t * step;
            next_mom = moment(next);
        }
        if (!(next_mom.allFinite() && next_mom.norm() < norm)) break;
        w = next;
        mom = next_mom;
        norm = mom.norm();
        trace.push_back(norm);
        m.iterations = it + 1;
    }
    if (norm >= tol && g.cols() == 1) {
        auto f = [&](double v) { return moment(Vector::Constant(1, v))(0); };
        try {
            auto r = find_root(f, w(0));
            w(0) = r.root;
            norm = std::abs(f(r.root));
            trace.push_back(norm);
        } catch (const IdentificationError&) {
        }
    }
    if (!(norm < tol)) {
        std::ostringstream msg;
        msg << "log mean-ratio estimating equation did not converge; residual norm trace:";
        for (double v : trace) msg << ' ' << v;
        throw ConvergenceError(msg.str(), norm);
    }
    m.coefficients = w;
    m.score_norm = norm;
    return m;
}

/// phi_g(g) = logit Pr(A=1|G=g) - logit Pr(A=1|G=0). Per-level empirical
/// logits for a single discrete instrument; otherwise the slopes of a
/// main-effects logistic regression. Either way the returned model predicts
/// phi_g directly.
inline NuisanceModel fit_logit_contrast(const Vector& a, const Matrix& g, std::vector<std::string> columns = {})
{
    if (!(a.array() == 0.0 || a.array() == 1.0).all())
        throw ValidationError("logit contrast requires a binary exposure");
    if (columns.empty()) columns = default_names(g.cols(), "G");
    if (g.cols() == 1 && is_discrete(g.col(0))) {
        NuisanceModel sat = fit_saturated(a, g, columns);
        const auto means = sat.group_means();
        auto ref = means.find(std::vector<double>{0.0});
        if (ref == means.end()) throw ValidationError("logit contrast: reference level G=0 is not observed");
        if (ref->second <= 0.0 || ref->second >= 1.0)
            throw ValidationError("logit contrast: both exposure levels must be observed at G=0");
        const double ref_logit = stats::logit(ref->second);
        for (Eigen::Index k = 0; k < sat.dim(); ++k) {
            const double pk = sat.coefficients(k);
            if (pk <= 0.0 || pk >= 1.0)
                throw ValidationError("logit contrast: exposure is constant within an instrument level");
            sat.coefficients(k) = stats::logit(pk) - ref_logit;
        }
        return sat;
    }
    NuisanceModel lg = fit_logistic(a, g, columns);
    NuisanceModel m;
    m.kind = ModelKind::linear;
    m.intercept = false;
    m.columns = lg.columns;
    m.coefficients = lg.coefficients.tail(g.cols());
    m.iterations = lg.iterations;
    m.score_norm = lg.score_norm;
    return m;
}

enum class NuisanceChoice { automatic, saturated, linear, logistic };

/// E(target | x) with the requested model family; `automatic` picks
/// logistic for a binary target and linear otherwise.
inline NuisanceModel fit_conditional_mean(const Vector& target, const Matrix& x, NuisanceChoice choice,
                                          std::vector<std::string> columns = {})
{
    const bool binary = (target.array() == 0.0 || target.array() == 1.0).all();
    switch (choice) {
    case NuisanceChoice::saturated: return fit_saturated(target, x, std::move(columns));
    case NuisanceChoice::linear: return fit_linear(target, x, std::move(columns));
    case NuisanceChoice::logistic: return fit_logistic(target, x, std::move(columns));
    case NuisanceChoice::automatic:
        return binary ? fit_logistic(target, x, std::move(columns)) : fit_linear(target, x, std::move(columns));
    }
    return {};
}

inline NuisanceChoice parse_nuisance_choice(std::string_view s)
{
    if (s == "auto" || s == "automatic") return NuisanceChoice::automatic;
    if (s == "saturated") return NuisanceChoice::saturated;
    if (s == "linear") return NuisanceChoice::linear;
    if (s == "logistic") return NuisanceChoice::logistic;
    throw ValidationError("unknown nuisance model '" + std::string(s) + "'");
}

} // namespace mrgenius
