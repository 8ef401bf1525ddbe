#pragma once

#include "mrgenius/errors.hpp"

#include <boost/math/tools/roots.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>

namespace mrgenius {

struct RootResult {
    double root = 0.0;
    double residual = 0.0;
    int iterations = 0;
    std::pair<double, double> bracket{0.0, 0.0};
};

struct RootOptions {
    double lo = -10.0;     // initial search interval
    double hi = 10.0;
    double max_abs = 30.0; // geometric expansion limit
    int grid_points = 200; // sign-change scan resolution per interval
    int max_iterations = 200;
};

// Scans [lo, hi] on a uniform grid for the sign change closest to `hint`,
// widening the interval geometrically up to +-max_abs, then polishes the root
// with TOMS 748. Throws IdentificationError when no sign change exists.
inline RootResult find_root(const std::function<double(double)>& f, double hint,
                            const RootOptions& opt = {})
{
    double lo = opt.lo, hi = opt.hi;
    std::optional<std::pair<double, double>> bracket;
    while (true) {
        const int m = opt.grid_points;
        double best = std::numeric_limits<double>::infinity();
        double x0 = lo, f0 = f(lo);
        if (f0 == 0.0) return {lo, 0.0, 0, {lo, lo}};
        for (int k = 1; k <= m; ++k) {
            const double x1 = lo + (hi - lo) * static_cast<double>(k) / m;
            const double f1 = f(x1);
            if (f1 == 0.0) return {x1, 0.0, k, {x1, x1}};
            if (std::isfinite(f0) && std::isfinite(f1) && (f0 < 0.0) != (f1 < 0.0)) {
                const double d = std::min(std::abs(x0 - hint), std::abs(x1 - hint));
                if (d < best) {
                    best = d;
                    bracket = {x0, x1};
                }
            }
            x0 = x1;
            f0 = f1;
        }
        if (bracket) break;
        if (lo <= -opt.max_abs && hi >= opt.max_abs)
            throw IdentificationError("estimating equation has no sign change on ["
                                      + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        const double half = 0.5 * (hi - lo);
        lo = std::max(lo - half, -opt.max_abs);
        hi = std::min(hi + half, opt.max_abs);
    }
    auto [a, b] = *bracket;
    std::uintmax_t iters = static_cast<std::uintmax_t>(opt.max_iterations);
    auto tol = boost::math::tools::eps_tolerance<double>(52);
    auto r = boost::math::tools::toms748_solve(f, a, b, tol, iters);
    const double fa = f(r.first), fb = f(r.second);
    const double root = std::abs(fa) <= std::abs(fb) ? r.first : r.second;
    return {root, std::min(std::abs(fa), std::abs(fb)), static_cast<int>(iters), {a, b}};
}

} // namespace mrgenius
