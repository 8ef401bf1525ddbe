#pragma once

#include "mrgenius/data.hpp"
#include "mrgenius/inference.hpp"
#include "mrgenius/linalg.hpp"
#include "mrgenius/nuisance.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mrgenius {

struct NullTest {
    double moment = 0.0; // estimating equation evaluated at beta = 0
    double se = 0.0;
    double z = 0.0;
    double p_value = 1.0;
};

struct Diagnostics {
    double phi_hat = std::numeric_limits<double>::quiet_NaN();
    bool converged = true;
    int iterations = 0;
    double objective = 0.0; // GMM objective, or |moment| at a root
    Eigen::Index weight_rank = 0;
    std::vector<std::string> warnings;
    std::optional<NullTest> null_test;
};

/// Point estimate with Wald interval. `beta` is on the outcome-mean scale for
/// the additive estimators and the log scale for the link estimators.
struct CausalEstimate {
    std::string method;
    double beta = 0.0;
    double se = std::numeric_limits<double>::quiet_NaN();
    double ci_lo = std::numeric_limits<double>::quiet_NaN();
    double ci_hi = std::numeric_limits<double>::quiet_NaN();
    double level = 0.95;
    Eigen::Index n = 0;
    Eigen::Index p = 0;
    Diagnostics diagnostics;
    Matrix covariance; // full stacked covariance when available
    std::vector<std::pair<std::string, Eigen::Index>> layout;
};

enum class Link { mult_outcome, mult_exposure, odds_ratio_exposure };

inline std::string to_string(Link l)
{
    switch (l) {
    case Link::mult_outcome: return "mult-outcome";
    case Link::mult_exposure: return "mult-exposure";
    case Link::odds_ratio_exposure: return "odds-ratio-exposure";
    }
    return "unknown";
}

struct LinkEstimate : CausalEstimate {
    Link link = Link::mult_outcome;

    double exp_beta() const { return std::exp(beta); }
    double exp_ci_lo() const { return std::exp(ci_lo); }
    double exp_ci_hi() const { return std::exp(ci_hi); }
};

struct EstimatorOptions {
    NuisanceChoice exposure_model = NuisanceChoice::automatic;
    NuisanceChoice center_model = NuisanceChoice::automatic;
    NuisanceChoice outcome_model = NuisanceChoice::automatic; // mu(G) in the efficient variant
    double level = 0.95;
    bool compute_se = true;
    double weak_z = 2.0;
    double identification_tol = 1e-10;
};

inline void attach_se(CausalEstimate& est, const SandwichParts& parts)
{
    est.se = std::sqrt(parts.beta_variance);
    est.covariance = parts.covariance;
    est.layout = parts.layout;
    if (parts.bread_singular)
        est.diagnostics.warnings.push_back("bread matrix numerically singular (rank "
                                           + std::to_string(parts.bread_rank) + "); pseudo-inverse used");
    if (std::isfinite(est.se)) {
        auto [lo, hi] = wald_ci(est.beta, est.se, est.level);
        est.ci_lo = lo;
        est.ci_hi = hi;
    }
}

inline void attach_relevance(CausalEstimate& est, const ObservationTable& t, double weak_z)
{
    const auto diag = relevance_diagnostic(t, weak_z);
    est.diagnostics.phi_hat = diag.phi_hat;
    for (const auto& iv : diag.per_iv) {
        if (iv.constant)
            est.diagnostics.warnings.push_back("instrument " + iv.name + " is constant");
        else if (iv.weak)
            est.diagnostics.warnings.push_back("weak heteroscedasticity for " + iv.name + ": |phi|/se = "
                                               + std::to_string(std::abs(iv.z)));
    }
}

} // namespace mrgenius
