#pragma once

#include "mrgenius/additive.hpp"
#include "mrgenius/baselines.hpp"
#include "mrgenius/data.hpp"
#include "mrgenius/errors.hpp"
#include "mrgenius/parallel.hpp"
#include "mrgenius/stats.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace mrgenius {

enum class ScenarioTag { TTT, TTF, TFF };

inline std::string to_string(ScenarioTag t)
{
    switch (t) {
    case ScenarioTag::TTT: return "TTT";
    case ScenarioTag::TTF: return "TTF";
    case ScenarioTag::TFF: return "TFF";
    }
    return "unknown";
}

inline ScenarioTag parse_scenario_tag(std::string_view s)
{
    if (s == "TTT") return ScenarioTag::TTT;
    if (s == "TTF") return ScenarioTag::TTF;
    if (s == "TFF") return ScenarioTag::TFF;
    throw ValidationError("unknown scenario tag '" + std::string(s) + "' (expected TTT, TTF or TFF)");
}

/// Simulation design. With p = 1 the scalar parameters apply directly; with
/// p = 10 the invalid-instrument patterns are fixed by `invalid` and `tag`.
/// Optional fields left empty take the tag's defaults.
struct ScenarioSpec {
    std::string name = "scenario";
    ExposureKind exposure = ExposureKind::continuous;
    Eigen::Index n = 500;
    int p = 1;
    int invalid = 0;
    ScenarioTag tag = ScenarioTag::TTT;
    double beta = 0.5;
    std::optional<double> alpha; // direct effect, single IV
    std::optional<double> phi;   // instrument-confounder association, single IV
    std::optional<double> gamma; // instrument-exposure effect, single IV
    double lambda0 = 1.0;
    double lambda1 = 1.0;        // single IV; each entry for p = 10 uses lambda1_multi
    double lambda1_multi = 0.5;
    double trunc_a = 0.2;
    double trunc_b = 0.5;
    double trunc_mu = 0.35;
    double trunc_sigma = 1.0;
    int replicates = 200;
    std::uint64_t seed = 1;
    std::vector<std::string> estimators{"genius", "tsls"};

    void validate() const
    {
        if (n < 10) throw ValidationError("scenario: n must be at least 10");
        if (p != 1 && p != 10) throw ValidationError("scenario: p must be 1 or 10");
        if (exposure == ExposureKind::count) throw ValidationError("scenario: exposure must be binary or continuous");
        if (replicates < 1) throw ValidationError("scenario: replicates must be positive");
        if (!(trunc_a < trunc_b) || !(trunc_sigma > 0.0)) throw ValidationError("scenario: invalid truncation bounds");
        if (p == 10) {
            if (invalid != 0 && invalid != 3 && invalid != 6 && invalid != 10)
                throw ValidationError("scenario: invalid count must be 0, 3, 6 or 10");
            if ((tag == ScenarioTag::TTT) != (invalid == 0))
                throw ValidationError("scenario: tag TTT requires invalid = 0 and vice versa");
            if (alpha || phi || gamma) throw ValidationError("scenario: alpha/phi/gamma overrides apply to p = 1 only");
        } else {
            if (invalid != 0 && invalid != 1) throw ValidationError("scenario: invalid count for p = 1 must be 0 or 1");
            if (tag == ScenarioTag::TTT && ((alpha && *alpha != 0.0) || (phi && *phi != 0.0)))
                throw ValidationError("scenario: tag TTT requires alpha = 0 and phi = 0");
            if (tag == ScenarioTag::TTF && phi && *phi != 0.0)
                throw ValidationError("scenario: tag TTF requires phi = 0");
        }
        for (const auto& e : estimators) {
            if (e != "genius" && e != "genius-efficient" && e != "genius-lewbel" && e != "tsls" && e != "oracle-tsls"
                && e != "mr-egger")
                throw ValidationError("scenario: unknown estimator '" + e + "'");
            if (e == "mr-egger" && p < 3) throw ValidationError("scenario: mr-egger needs p = 10");
            if (e == "genius-lewbel" && p != 1) throw ValidationError("scenario: genius-lewbel needs p = 1");
            if (e == "oracle-tsls" && invalid >= p && tag != ScenarioTag::TTT)
                throw ValidationError("scenario: oracle-tsls needs at least one valid instrument");
        }
    }
};

namespace detail {

inline std::string strip(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double parse_double_field(const std::string& key, const std::string& v)
{
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (...) {
        used = 0;
    }
    if (used != v.size() || !std::isfinite(out))
        throw ValidationError("scenario: '" + key + "' expects a number, got '" + v + "'");
    return out;
}

inline long long parse_int_field(const std::string& key, const std::string& v)
{
    const double d = parse_double_field(key, v);
    if (d != std::floor(d)) throw ValidationError("scenario: '" + key + "' expects an integer, got '" + v + "'");
    return static_cast<long long>(d);
}

} // namespace detail

/// key = value lines; '#' starts a comment.
inline ScenarioSpec parse_scenario(std::istream& in)
{
    ScenarioSpec s;
    std::string line;
    int lineno = 0;
    bool invalid_set = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::strip(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("scenario line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::strip(line.substr(0, eq));
        const std::string v = detail::strip(line.substr(eq + 1));
        if (key == "name") s.name = v;
        else if (key == "exposure") s.exposure = parse_exposure_kind(v);
        else if (key == "n") s.n = detail::parse_int_field(key, v);
        else if (key == "p") s.p = static_cast<int>(detail::parse_int_field(key, v));
        else if (key == "invalid") {
            s.invalid = static_cast<int>(detail::parse_int_field(key, v));
            invalid_set = true;
        }
        else if (key == "tag") s.tag = parse_scenario_tag(v);
        else if (key == "beta") s.beta = detail::parse_double_field(key, v);
        else if (key == "alpha") s.alpha = detail::parse_double_field(key, v);
        else if (key == "phi") s.phi = detail::parse_double_field(key, v);
        else if (key == "gamma") s.gamma = detail::parse_double_field(key, v);
        else if (key == "lambda0") s.lambda0 = detail::parse_double_field(key, v);
        else if (key == "lambda1") s.lambda1 = detail::parse_double_field(key, v);
        else if (key == "lambda1_multi") s.lambda1_multi = detail::parse_double_field(key, v);
        else if (key == "trunc_a") s.trunc_a = detail::parse_double_field(key, v);
        else if (key == "trunc_b") s.trunc_b = detail::parse_double_field(key, v);
        else if (key == "trunc_mu") s.trunc_mu = detail::parse_double_field(key, v);
        else if (key == "trunc_sigma") s.trunc_sigma = detail::parse_double_field(key, v);
        else if (key == "replicates") s.replicates = static_cast<int>(detail::parse_int_field(key, v));
        else if (key == "seed") s.seed = static_cast<std::uint64_t>(detail::parse_int_field(key, v));
        else if (key == "estimators") {
            s.estimators.clear();
            std::stringstream ss(v);
            std::string item;
            while (std::getline(ss, item, ','))
                if (auto e = detail::strip(item); !e.empty()) s.estimators.push_back(e);
        } else
            throw ValidationError("scenario line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (!invalid_set && s.p == 1) s.invalid = s.tag == ScenarioTag::TTT ? 0 : 1;
    s.validate();
    return s;
}

inline ScenarioSpec load_scenario(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open scenario file '" + path + "'");
    return parse_scenario(in);
}

/// Inverse-CDF draw from N(mu, sigma^2) truncated to [a, b].
template <class Rng>
double truncated_normal_sample(double a, double b, double mu, double sigma, Rng& rng)
{
    const double lo = stats::normal_cdf((a - mu) / sigma);
    const double hi = stats::normal_cdf((b - mu) / sigma);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const double pr = std::clamp(lo + u * (hi - lo), lo, hi);
    double x = mu;
    if (pr > 0.0 && pr < 1.0) x = mu + sigma * stats::normal_quantile(pr);
    return std::clamp(x, a, b);
}

inline double truncated_normal_mean(double a, double b, double mu, double sigma)
{
    const double al = (a - mu) / sigma, be = (b - mu) / sigma;
    const double z = stats::normal_cdf(be) - stats::normal_cdf(al);
    return mu + sigma * (stats::normal_pdf(al) - stats::normal_pdf(be)) / z;
}

/// Parameter vectors in effect for one replicate.
struct DgpParameters {
    Vector alpha;
    Vector phi;
    Vector gamma;
    Vector lambda1;
    double lambda0 = 1.0;
    std::vector<Eigen::Index> valid; // instruments with alpha_j = phi_j = 0
};

struct GeneratedData {
    ObservationTable table;
    DgpParameters parameters;
    Eigen::Index clipped = 0; // success probabilities clipped into [0,1]
};

template <class Rng>
DgpParameters draw_parameters(const ScenarioSpec& s, Rng& rng)
{
    DgpParameters d;
    const bool binary = s.exposure == ExposureKind::binary;
    d.lambda0 = s.lambda0;
    auto unif = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    if (s.p == 1) {
        d.gamma = Vector::Constant(1, s.gamma.value_or(-1.0));
        d.alpha = Vector::Constant(1, s.tag == ScenarioTag::TTT ? 0.0 : s.alpha.value_or(-0.5));
        d.phi = Vector::Constant(1, s.tag == ScenarioTag::TFF ? s.phi.value_or(binary ? -0.2 : -2.0) : 0.0);
        d.lambda1 = Vector::Constant(1, s.lambda1);
    } else {
        const Eigen::Index p = s.p;
        d.gamma.resize(p);
        for (Eigen::Index j = 0; j < p; ++j) d.gamma(j) = binary ? unif(-0.15, -0.05) : unif(-3.0, -2.0);
        d.lambda1 = Vector::Constant(p, s.lambda1_multi);
        d.alpha = Vector::Zero(p);
        d.phi = Vector::Zero(p);
        if (s.invalid == 3) {
            d.alpha.head(3).setConstant(-0.5);
            d.phi.head(3).setConstant(binary ? -0.05 : -0.25);
        } else if (s.invalid == 6) {
            d.alpha.head(6) << -0.25, -0.25, -0.5, -0.5, -1.0, -1.0;
            if (binary)
                d.phi.head(6) << -0.01, -0.01, -0.03, -0.03, -0.05, -0.05;
            else
                d.phi.head(6) << -0.125, -0.125, -0.25, -0.25, -0.5, -0.5;
        } else if (s.invalid == 10) {
            for (Eigen::Index j = 0; j < p; ++j) d.alpha(j) = unif(-2.0, -0.5);
            for (Eigen::Index j = 0; j < p; ++j) d.phi(j) = binary ? unif(-0.02, -0.01) : unif(-2.0, -0.5);
        }
        if (s.tag != ScenarioTag::TFF) d.phi.setZero();
        if (s.tag == ScenarioTag::TTT) d.alpha.setZero();
    }
    for (Eigen::Index j = 0; j < d.alpha.size(); ++j)
        if (d.alpha(j) == 0.0 && d.phi(j) == 0.0) d.valid.push_back(j);
    return d;
}

/// One data set from the design, reproducible from `seed`.
inline GeneratedData generate(const ScenarioSpec& s, std::uint64_t seed)
{
    s.validate();
    std::mt19937_64 rng(seed);
    DgpParameters d = draw_parameters(s, rng);
    const Eigen::Index n = s.n;
    const Eigen::Index p = s.p;
    const bool binary = s.exposure == ExposureKind::binary;
    const double e_eps = truncated_normal_mean(s.trunc_a, s.trunc_b, s.trunc_mu, s.trunc_sigma);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> norm(0.0, 1.0);

    Matrix g(n, p);
    Vector a(n), y(n);
    Eigen::Index clipped = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) g(i, j) = unif(rng) < 0.5 ? 1.0 : 0.0;
        const auto gi = g.row(i).transpose();
        double u = 0.0;
        if (binary) {
            const double eps = truncated_normal_sample(s.trunc_a, s.trunc_b, s.trunc_mu, s.trunc_sigma, rng);
            u = d.phi.dot(gi) + eps;
            double pr = stats::expit(d.gamma.dot(gi)) + (eps - e_eps);
            if (pr < 0.0 || pr > 1.0) {
                ++clipped;
                pr = std::clamp(pr, 0.0, 1.0);
            }
            a(i) = unif(rng) < pr ? 1.0 : 0.0;
        } else {
            u = d.phi.dot(gi) + norm(rng);
            const double sd = std::abs(d.lambda0 + d.lambda1.dot(gi));
            a(i) = d.gamma.dot(gi) + u + sd * norm(rng);
        }
        y(i) = d.alpha.dot(gi) + s.beta * a(i) + u + norm(rng);
    }
    std::vector<std::string> names;
    for (Eigen::Index j = 0; j < p; ++j) names.push_back("G" + std::to_string(j + 1));
    ObservationTable t(std::move(g), std::move(a), std::move(y),
                       binary ? ExposureKind::binary : ExposureKind::continuous, std::nullopt, std::nullopt,
                       std::move(names));
    return {std::move(t), std::move(d), clipped};
}

struct ReplicateResult {
    double beta = std::numeric_limits<double>::quiet_NaN();
    double se = std::numeric_limits<double>::quiet_NaN();
    double ci_lo = std::numeric_limits<double>::quiet_NaN();
    double ci_hi = std::numeric_limits<double>::quiet_NaN();
    bool ok = false;
    std::string error;
};

inline ReplicateResult run_estimator(const std::string& name, const GeneratedData& d, double level = 0.95)
{
    ReplicateResult r;
    try {
        const auto& t = d.table;
        EstimatorOptions opt;
        opt.level = level;
        auto take = [&](const auto& est) {
            r.beta = est.beta;
            r.se = est.se;
            r.ci_lo = est.ci_lo;
            r.ci_hi = est.ci_hi;
        };
        if (name == "genius") take(t.p() == 1 ? genius_single(t, opt) : genius_gmm(t, GmmConfig{}, opt));
        else if (name == "genius-efficient") take(genius_efficient(t, OutcomeScale::additive, opt));
        else if (name == "genius-lewbel") take(genius_single_lewbel(t, opt));
        else if (name == "tsls") take(tsls(t, level));
        else if (name == "oracle-tsls") take(oracle_tsls(t, d.parameters.valid, level));
        else if (name == "mr-egger") take(mr_egger(t, level));
        else throw ValidationError("unknown estimator '" + name + "'");
        r.ok = std::isfinite(r.beta);
        if (!r.ok) r.error = "non-finite estimate";
    } catch (const std::exception& e) {
        r.ok = false;
        r.error = e.what();
    }
    return r;
}

struct EstimatorSummary {
    std::string name;
    int replicates = 0;
    int failures = 0;
    double median_bias = std::numeric_limits<double>::quiet_NaN();      // |median(beta_hat) - beta|
    double median_abs_error = std::numeric_limits<double>::quiet_NaN(); // median |beta_hat - beta|
    double robust_sd = std::numeric_limits<double>::quiet_NaN();        // IQR / 1.349
    double mean = std::numeric_limits<double>::quiet_NaN();
    double mean_se = std::numeric_limits<double>::quiet_NaN();
    double coverage = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> estimates; // converged replicates, in replicate order
    std::vector<std::string> errors; // distinct failure messages
};

struct MonteCarloReport {
    ScenarioSpec spec;
    std::vector<EstimatorSummary> estimators;
    Eigen::Index clipped = 0;
    Eigen::Index draws = 0;
    std::optional<double> runtime_seconds;

    const EstimatorSummary& at(const std::string& name) const
    {
        for (const auto& e : estimators)
            if (e.name == name) return e;
        throw ValidationError("report has no estimator '" + name + "'");
    }
};

/// Summary statistics over converged replicates.
inline EstimatorSummary summarize(const std::string& name, const std::vector<ReplicateResult>& reps, double truth)
{
    EstimatorSummary s;
    s.name = name;
    s.replicates = static_cast<int>(reps.size());
    std::vector<double> err, ses;
    int covered = 0, with_ci = 0;
    for (const auto& r : reps) {
        if (!r.ok) {
            ++s.failures;
            if (std::find(s.errors.begin(), s.errors.end(), r.error) == s.errors.end() && s.errors.size() < 5)
                s.errors.push_back(r.error);
            continue;
        }
        s.estimates.push_back(r.beta);
        err.push_back(std::abs(r.beta - truth));
        if (std::isfinite(r.se)) ses.push_back(r.se);
        if (std::isfinite(r.ci_lo) && std::isfinite(r.ci_hi)) {
            ++with_ci;
            if (r.ci_lo <= truth && truth <= r.ci_hi) ++covered;
        }
    }
    if (!s.estimates.empty()) {
        s.median_bias = std::abs(stats::median(s.estimates) - truth);
        s.median_abs_error = stats::median(err);
        s.robust_sd = stats::robust_sd(s.estimates);
        double m = 0.0;
        for (double v : s.estimates) m += v;
        s.mean = m / static_cast<double>(s.estimates.size());
    }
    if (!ses.empty()) {
        double m = 0.0;
        for (double v : ses) m += v;
        s.mean_se = m / static_cast<double>(ses.size());
    }
    if (with_ci > 0) s.coverage = static_cast<double>(covered) / with_ci;
    return s;
}

/// Replicate r uses the stream stream_seed(spec.seed, r), so the report does
/// not depend on `threads`.
inline MonteCarloReport run_monte_carlo(const ScenarioSpec& spec, unsigned threads = 1, bool timing = false,
                                        double level = 0.95)
{
    spec.validate();
    const auto start = std::chrono::steady_clock::now();
    const auto reps = static_cast<std::size_t>(spec.replicates);
    const std::size_t k = spec.estimators.size();
    std::vector<std::vector<ReplicateResult>> results(k, std::vector<ReplicateResult>(reps));
    std::vector<Eigen::Index> clipped(reps, 0);
    parallel_for(reps, threads, [&](std::size_t r) {
        const GeneratedData d = generate(spec, stream_seed(spec.seed, r));
        clipped[r] = d.clipped;
        for (std::size_t e = 0; e < k; ++e) results[e][r] = run_estimator(spec.estimators[e], d, level);
    });
    MonteCarloReport rep;
    rep.spec = spec;
    for (std::size_t e = 0; e < k; ++e) rep.estimators.push_back(summarize(spec.estimators[e], results[e], spec.beta));
    for (auto c : clipped) rep.clipped += c;
    rep.draws = static_cast<Eigen::Index>(reps) * spec.n;
    if (timing)
        rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

inline std::string format_report_table(const MonteCarloReport& rep)
{
    std::ostringstream o;
    const auto& s = rep.spec;
    o << "Scenario " << s.name << ": " << to_string(s.exposure) << " exposure, p=" << s.p << ", invalid=" << s.invalid
      << ", " << to_string(s.tag) << ", n=" << s.n << ", replicates=" << s.replicates << ", seed=" << s.seed << "\n";
    o << std::left << std::setw(18) << "estimator" << std::right << std::setw(14) << "median|bias|" << std::setw(12)
      << "robust SD" << std::setw(10) << "mean SE" << std::setw(10) << "coverage" << std::setw(10) << "failures"
      << "\n";
    o << std::fixed << std::setprecision(3);
    for (const auto& e : rep.estimators) {
        o << std::left << std::setw(18) << e.name << std::right << std::setw(14) << e.median_bias << std::setw(12)
          << e.robust_sd << std::setw(10) << e.mean_se << std::setw(10) << e.coverage << std::setw(10) << e.failures
          << "\n";
    }
    if (s.exposure == ExposureKind::binary)
        o << "clipped probabilities: " << rep.clipped << " of " << rep.draws << "\n";
    if (rep.runtime_seconds) o << "runtime: " << std::setprecision(2) << *rep.runtime_seconds << " s\n";
    return o.str();
}

} // namespace mrgenius
