#pragma once

#include "mrgenius/data.hpp"
#include "mrgenius/errors.hpp"
#include "mrgenius/linalg.hpp"
#include "mrgenius/nuisance.hpp"
#include "mrgenius/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <utility>
#include <vector>

namespace mrgenius {

/// Right-continuous step functions B_a(y), B_g(y), starting at zero and
/// jumping at each distinct event time.
struct CumulativeEffectPath {
    std::vector<double> times;
    std::vector<double> b_a;
    std::vector<double> b_g;
    std::vector<Eigen::Index> at_risk;
    std::vector<Eigen::Index> events;
    std::vector<double> condition; // of the 2x2 system at each time
    std::vector<double> residual;  // norm of the per-time estimating equation after the step

    std::size_t size() const noexcept { return times.size(); }
};

struct SurvivalOptions {
    NuisanceChoice exposure_model = NuisanceChoice::automatic;
    double horizon = std::numeric_limits<double>::infinity(); // events after it are ignored
    double max_condition = 1e12;
};

/// Forward recursion over event times s:
///   M(s) = P_n[(A,G)' h' R(s) e],  b(s) = P_n[h' e dN(s)],  dB' = b' M^-1,
/// with e = exp(B_a(s-) A + B_g(s-) G) and h = ((G - Gbar), (G - Gbar)(A - E(A|G))).
inline CumulativeEffectPath genius_additive_hazards(const ObservationTable& t, const SurvivalOptions& opt = {})
{
    if (!t.has_delta()) throw ValidationError("additive-hazards estimator requires an event indicator column");
    if (t.p() != 1) throw ValidationError("additive-hazards estimator requires exactly one instrument column");
    const Eigen::Index n = t.n();
    const double nn = static_cast<double>(n);
    const Vector g = t.g(0);
    const Vector& a = t.a();
    const Vector& time = t.y();
    const Vector& delta = t.delta();

    NuisanceChoice choice = opt.exposure_model;
    if (choice == NuisanceChoice::automatic && is_discrete(g)) choice = NuisanceChoice::saturated;
    const Vector ea = fit_conditional_mean(a, t.g(), choice, t.iv_names()).predict(t.g());
    const Vector h1 = (g.array() - g.mean()).matrix();
    const Vector h2 = (h1.array() * (a - ea).array()).matrix();

    std::vector<double> event_times;
    for (Eigen::Index i = 0; i < n; ++i)
        if (delta(i) == 1.0 && time(i) <= opt.horizon) event_times.push_back(time(i));
    std::sort(event_times.begin(), event_times.end());
    event_times.erase(std::unique(event_times.begin(), event_times.end()), event_times.end());

    CumulativeEffectPath path;
    double ba = 0.0, bg = 0.0;
    for (double s : event_times) {
        Eigen::Matrix2d m = Eigen::Matrix2d::Zero();
        Eigen::Vector2d b = Eigen::Vector2d::Zero();
        Eigen::Index risk = 0, ev = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (time(i) < s) continue;
            ++risk;
            const double e = std::exp(ba * a(i) + bg * g(i));
            const double x[2] = {a(i), g(i)};
            const double h[2] = {h1(i), h2(i)};
            for (int r = 0; r < 2; ++r)
                for (int c = 0; c < 2; ++c) m(r, c) += x[r] * h[c] * e;
            if (time(i) == s && delta(i) == 1.0) {
                ++ev;
                b(0) += h[0] * e;
                b(1) += h[1] * e;
            }
        }
        m /= nn;
        b /= nn;
        const double cond = condition_number(m);
        Eigen::FullPivLU<Eigen::Matrix2d> lu(m.transpose());
        if (!lu.isInvertible() || !(cond <= opt.max_condition)) {
            std::ostringstream msg;
            msg << "additive-hazards: at-risk matrix is singular at time " << s << " (condition number " << cond
                << ", " << risk << " at risk); consider a smaller horizon";
            throw IdentificationError(msg.str());
        }
        const Eigen::Vector2d db = lu.solve(b);
        ba += db(0);
        bg += db(1);
        path.times.push_back(s);
        path.b_a.push_back(ba);
        path.b_g.push_back(bg);
        path.at_risk.push_back(risk);
        path.events.push_back(ev);
        path.condition.push_back(cond);
        path.residual.push_back((b - m.transpose() * db).norm());
    }
    return path;
}

/// (B_a(y), B_g(y)) including any jump at y; (0, 0) before the first event.
inline std::pair<double, double> path_interpolate(const CumulativeEffectPath& path, double y)
{
    const auto it = std::upper_bound(path.times.begin(), path.times.end(), y);
    if (it == path.times.begin()) return {0.0, 0.0};
    const auto k = static_cast<std::size_t>(std::distance(path.times.begin(), it) - 1);
    return {path.b_a[k], path.b_g[k]};
}

struct BootstrapOptions {
    int replicates = 200;
    std::uint64_t seed = 1;
    unsigned threads = 1;
};

struct PathBootstrap {
    std::vector<double> horizons;
    std::vector<std::pair<double, double>> estimate; // point estimate at each horizon
    std::vector<double> se_a;
    std::vector<double> se_g;
    int replicates = 0;
    int failures = 0;
};

/// Nonparametric bootstrap over units for the path values at `horizons`.
/// Replicate b draws from its own stream, so results do not depend on the
/// thread count.
inline PathBootstrap bootstrap_paths(const ObservationTable& t, const std::vector<double>& horizons,
                                     const SurvivalOptions& opt = {}, const BootstrapOptions& bopt = {})
{
    if (bopt.replicates < 2) throw ValidationError("bootstrap needs at least two replicates");
    for (double h : horizons)
        if (!(h >= 0.0)) throw ValidationError("horizons must be non-negative");
    const auto path = genius_additive_hazards(t, opt);
    PathBootstrap out;
    out.horizons = horizons;
    for (double h : horizons) out.estimate.push_back(path_interpolate(path, h));

    const auto reps = static_cast<std::size_t>(bopt.replicates);
    const std::size_t H = horizons.size();
    std::vector<std::vector<std::pair<double, double>>> draws(reps);
    std::vector<char> ok(reps, 0);
    parallel_for(reps, bopt.threads, [&](std::size_t r) {
        auto rng = make_stream(bopt.seed, r);
        std::uniform_int_distribution<Eigen::Index> pick(0, t.n() - 1);
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(t.n()));
        for (auto& i : idx) i = pick(rng);
        try {
            const auto p = genius_additive_hazards(t.rows(idx), opt);
            draws[r].reserve(H);
            for (double h : horizons) draws[r].push_back(path_interpolate(p, h));
            ok[r] = 1;
        } catch (const std::exception&) {
        }
    });

    out.replicates = bopt.replicates;
    std::size_t good = 0;
    for (char c : ok) good += c ? 1 : 0;
    out.failures = static_cast<int>(reps - good);
    if (good < 2) throw IdentificationError("bootstrap: fewer than two replicates produced a path");
    for (std::size_t k = 0; k < H; ++k) {
        double sa = 0.0, sg = 0.0, qa = 0.0, qg = 0.0;
        for (std::size_t r = 0; r < reps; ++r) {
            if (!ok[r]) continue;
            sa += draws[r][k].first;
            sg += draws[r][k].second;
        }
        const double m = static_cast<double>(good);
        sa /= m;
        sg /= m;
        for (std::size_t r = 0; r < reps; ++r) {
            if (!ok[r]) continue;
            qa += (draws[r][k].first - sa) * (draws[r][k].first - sa);
            qg += (draws[r][k].second - sg) * (draws[r][k].second - sg);
        }
        out.se_a.push_back(std::sqrt(qa / (m - 1.0)));
        out.se_g.push_back(std::sqrt(qg / (m - 1.0)));
    }
    return out;
}

} // namespace mrgenius
