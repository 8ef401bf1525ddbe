#pragma once

#include "mrgenius/additive.hpp"
#include "mrgenius/baselines.hpp"
#include "mrgenius/data.hpp"
#include "mrgenius/estimate.hpp"
#include "mrgenius/link.hpp"
#include "mrgenius/nuisance.hpp"
#include "mrgenius/simulation.hpp"
#include "mrgenius/survival.hpp"

#include <json.hpp>

#include <cmath>

namespace mrgenius {

using json = nlohmann::ordered_json;

namespace detail {

// NaN and infinities become null.
inline json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json vector_json(const Vector& v)
{
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(number(v(i)));
    return out;
}

inline json matrix_json(const Matrix& m)
{
    json out = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(vector_json(m.row(i).transpose()));
    return out;
}

} // namespace detail

inline json to_json(const Diagnostics& d)
{
    json out;
    out["phi_hat"] = detail::number(d.phi_hat);
    out["converged"] = d.converged;
    out["iterations"] = d.iterations;
    out["objective"] = detail::number(d.objective);
    if (d.weight_rank > 0) out["weight_rank"] = d.weight_rank;
    out["warnings"] = d.warnings;
    if (d.null_test) {
        out["null_test"] = {{"moment", detail::number(d.null_test->moment)},
                            {"se", detail::number(d.null_test->se)},
                            {"z", detail::number(d.null_test->z)},
                            {"p_value", detail::number(d.null_test->p_value)}};
    }
    return out;
}

inline json to_json(const CausalEstimate& e)
{
    json out;
    out["method"] = e.method;
    out["beta"] = detail::number(e.beta);
    out["se"] = detail::number(e.se);
    out["ci_lo"] = detail::number(e.ci_lo);
    out["ci_hi"] = detail::number(e.ci_hi);
    out["level"] = e.level;
    out["phi_hat"] = detail::number(e.diagnostics.phi_hat);
    out["n"] = e.n;
    out["p"] = e.p;
    out["diagnostics"] = to_json(e.diagnostics);
    return out;
}

inline json to_json(const LinkEstimate& e)
{
    json out = to_json(static_cast<const CausalEstimate&>(e));
    out["link"] = to_string(e.link);
    out["exp_beta"] = detail::number(e.exp_beta());
    out["exp_ci_lo"] = detail::number(e.exp_ci_lo());
    out["exp_ci_hi"] = detail::number(e.exp_ci_hi());
    return out;
}

inline json to_json(const BaselineEstimate& e)
{
    json out;
    out["method"] = e.method;
    out["beta"] = detail::number(e.beta);
    out["se"] = detail::number(e.se);
    out["ci_lo"] = detail::number(e.ci_lo);
    out["ci_hi"] = detail::number(e.ci_hi);
    out["level"] = e.level;
    out["n"] = e.n;
    out["p"] = e.p;
    if (e.intercept) out["intercept"] = detail::number(*e.intercept);
    if (e.intercept_se) out["intercept_se"] = detail::number(*e.intercept_se);
    json ivs = json::array();
    for (auto j : e.instruments) ivs.push_back(j + 1);
    out["instruments"] = ivs;
    return out;
}

inline json to_json(const NuisanceModel& m)
{
    json out;
    out["kind"] = to_string(m.kind);
    out["intercept"] = m.intercept;
    out["columns"] = m.columns;
    out["coefficients"] = detail::vector_json(m.coefficients);
    if (!m.levels.empty()) out["levels"] = m.levels;
    out["iterations"] = m.iterations;
    out["score_norm"] = detail::number(m.score_norm);
    return out;
}

inline json to_json(const RelevanceDiagnostic& d)
{
    json out;
    out["phi_hat"] = detail::number(d.phi_hat);
    out["any_weak"] = d.any_weak;
    json per = json::array();
    for (const auto& iv : d.per_iv)
        per.push_back({{"name", iv.name},
                       {"phi_hat", detail::number(iv.phi_hat)},
                       {"se", detail::number(iv.se)},
                       {"z", detail::number(iv.z)},
                       {"constant", iv.constant},
                       {"weak", iv.weak}});
    out["instruments"] = per;
    return out;
}

inline json to_json(const ScenarioSpec& s)
{
    json out;
    out["name"] = s.name;
    out["exposure"] = to_string(s.exposure);
    out["n"] = s.n;
    out["p"] = s.p;
    out["invalid"] = s.invalid;
    out["tag"] = to_string(s.tag);
    out["beta"] = s.beta;
    if (s.alpha) out["alpha"] = *s.alpha;
    if (s.phi) out["phi"] = *s.phi;
    if (s.gamma) out["gamma"] = *s.gamma;
    out["lambda0"] = s.lambda0;
    out["lambda1"] = s.p == 1 ? s.lambda1 : s.lambda1_multi;
    out["replicates"] = s.replicates;
    out["seed"] = s.seed;
    out["estimators"] = s.estimators;
    return out;
}

inline json to_json(const MonteCarloReport& r, bool include_estimates = false)
{
    json out;
    out["scenario"] = to_json(r.spec);
    json rows = json::array();
    for (const auto& e : r.estimators) {
        json row;
        row["estimator"] = e.name;
        row["replicates"] = e.replicates;
        row["failures"] = e.failures;
        row["median_abs_bias"] = detail::number(e.median_bias);
        row["median_abs_error"] = detail::number(e.median_abs_error);
        row["robust_sd"] = detail::number(e.robust_sd);
        row["mean"] = detail::number(e.mean);
        row["mean_se"] = detail::number(e.mean_se);
        row["coverage"] = detail::number(e.coverage);
        if (!e.errors.empty()) row["errors"] = e.errors;
        if (include_estimates) row["estimates"] = e.estimates;
        rows.push_back(row);
    }
    out["estimators"] = rows;
    if (r.spec.exposure == ExposureKind::binary) out["clipped_probabilities"] = {{"count", r.clipped}, {"draws", r.draws}};
    if (r.runtime_seconds) out["runtime_seconds"] = *r.runtime_seconds;
    return out;
}

inline json to_json(const CumulativeEffectPath& p)
{
    json out;
    out["event_times"] = p.times.size();
    out["final_time"] = p.times.empty() ? json(nullptr) : json(p.times.back());
    out["final_b_a"] = p.b_a.empty() ? 0.0 : p.b_a.back();
    out["final_b_g"] = p.b_g.empty() ? 0.0 : p.b_g.back();
    double worst = 0.0, cond = 0.0;
    for (double v : p.residual) worst = std::max(worst, v);
    for (double v : p.condition) cond = std::max(cond, v);
    out["max_residual"] = worst;
    out["max_condition"] = cond;
    return out;
}

} // namespace mrgenius
