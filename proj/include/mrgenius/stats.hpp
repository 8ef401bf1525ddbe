#pragma once

#include "mrgenius/errors.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace mrgenius::stats {

// Linear interpolation between order statistics (R type 7).
inline double quantile(std::vector<double> values, double prob)
{
    if (values.empty()) throw ValidationError("quantile of an empty sample");
    if (!(prob >= 0.0 && prob <= 1.0)) throw ValidationError("quantile probability outside [0,1]");
    std::sort(values.begin(), values.end());
    const double h = (static_cast<double>(values.size()) - 1.0) * prob;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

inline double median(std::span<const double> values)
{
    return quantile({values.begin(), values.end()}, 0.5);
}

// IQR / 1.349, a normal-consistent scale estimate.
inline double robust_sd(std::span<const double> values)
{
    std::vector<double> v(values.begin(), values.end());
    return (quantile(v, 0.75) - quantile(v, 0.25)) / 1.349;
}

inline double normal_quantile(double p)
{
    return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

inline double normal_cdf(double x)
{
    return boost::math::cdf(boost::math::normal_distribution<double>(), x);
}

inline double normal_pdf(double x)
{
    return boost::math::pdf(boost::math::normal_distribution<double>(), x);
}

inline double expit(double x)
{
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

} // namespace mrgenius::stats
