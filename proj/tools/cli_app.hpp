#pragma once

#include "mrgenius/io_json.hpp"
#include "mrgenius/mrgenius.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace mrgenius::cli {

enum ExitCode : int { ok = 0, unexpected = 1, validation = 2, identification = 3, convergence = 4 };

struct EstimateArgs {
    std::string input;
    std::vector<std::string> iv_cols;
    std::string exposure_col = "A";
    std::string outcome_col;
    std::string time_col;
    std::vector<std::string> covariate_cols;
    std::string event_col;
    std::string exposure_kind;
    std::string method = "genius";
    double level = 0.95;
    std::string out;
    std::string emit_vcov;
    std::vector<std::string> valid_ivs;
    bool case_control = false;
    bool controls_only = false;
    std::vector<double> sampling_fractions;
    std::vector<double> horizons;
    double tau = std::numeric_limits<double>::infinity();
    int bootstrap = 200;
    std::string path_out;
    std::uint64_t seed = 1;
    unsigned threads = 0;
    std::string nuisance = "auto";
    std::string gmm_weight = "two-step";
    std::string scale = "additive";
};

struct SimulateArgs {
    std::string scenario;
    std::optional<int> replicates;
    std::optional<std::uint64_t> seed;
    std::optional<long long> n;
    unsigned threads = 0;
    std::string out;
    std::string table_out;
    bool timing = false;
    bool estimates = false;
};

namespace detail {

inline void write_text(const std::string& path, const std::string& text, std::ostream& fallback)
{
    if (path.empty() || path == "-") {
        fallback << text;
        return;
    }
    std::ofstream f(path);
    if (!f) throw ValidationError("cannot write '" + path + "'");
    f << text;
}

inline ObservationTable load(const EstimateArgs& a, bool survival)
{
    ColumnSchema schema;
    if (a.iv_cols.empty()) throw ValidationError("--iv-cols is required");
    schema.iv_cols = a.iv_cols;
    schema.exposure_col = a.exposure_col;
    if (survival) {
        if (a.time_col.empty() && a.outcome_col.empty())
            throw ValidationError("add-hazards needs --time-col (follow-up time)");
        if (a.event_col.empty()) throw ValidationError("add-hazards needs --event-col (event indicator)");
        schema.outcome_col = a.time_col.empty() ? a.outcome_col : a.time_col;
        schema.event_col = a.event_col;
    } else {
        if (!a.event_col.empty() || !a.time_col.empty())
            throw ValidationError("--event-col/--time-col are only used by --method add-hazards");
        if (a.outcome_col.empty()) throw ValidationError("--outcome-col is required");
        schema.outcome_col = a.outcome_col;
    }
    schema.covariate_cols = a.covariate_cols;
    if (!a.exposure_kind.empty()) schema.exposure_kind = parse_exposure_kind(a.exposure_kind);
    return load_csv(a.input, schema);
}

inline std::vector<Eigen::Index> resolve_ivs(const std::vector<std::string>& spec, const ObservationTable& t)
{
    std::vector<Eigen::Index> out;
    for (const auto& s : spec) {
        Eigen::Index idx = -1;
        for (std::size_t k = 0; k < t.iv_names().size(); ++k)
            if (t.iv_names()[k] == s) idx = static_cast<Eigen::Index>(k);
        if (idx < 0) {
            try {
                std::size_t used = 0;
                const long v = std::stol(s, &used);
                if (used == s.size()) idx = v - 1;
            } catch (...) {
            }
        }
        if (idx < 0 || idx >= t.p()) throw ValidationError("--valid-ivs: '" + s + "' is not an instrument column");
        out.push_back(idx);
    }
    return out;
}

inline std::string vcov_csv(const Matrix& cov, const std::vector<std::pair<std::string, Eigen::Index>>& layout)
{
    std::vector<std::string> names;
    for (const auto& [name, dim] : layout)
        for (Eigen::Index k = 0; k < dim; ++k) names.push_back(dim == 1 ? name : name + "_" + std::to_string(k + 1));
    while (static_cast<Eigen::Index>(names.size()) < cov.rows()) names.push_back("theta" + std::to_string(names.size() + 1));
    std::ostringstream o;
    o << std::setprecision(17) << "parameter";
    for (Eigen::Index j = 0; j < cov.cols(); ++j) o << ',' << names[static_cast<std::size_t>(j)];
    o << '\n';
    for (Eigen::Index i = 0; i < cov.rows(); ++i) {
        o << names[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < cov.cols(); ++j) o << ',' << cov(i, j);
        o << '\n';
    }
    return o.str();
}

inline unsigned thread_count(unsigned flag) { return flag > 0 ? flag : default_threads(); }

inline json run_survival(const EstimateArgs& a, const ObservationTable& t, std::ostream& out_stream)
{
    SurvivalOptions so;
    so.exposure_model = parse_nuisance_choice(a.nuisance);
    so.horizon = a.tau;
    const auto path = genius_additive_hazards(t, so);
    if (!a.path_out.empty()) {
        std::ostringstream o;
        o << std::setprecision(17) << "time,B_a,B_g,at_risk,events\n";
        for (std::size_t k = 0; k < path.size(); ++k)
            o << path.times[k] << ',' << path.b_a[k] << ',' << path.b_g[k] << ',' << path.at_risk[k] << ','
              << path.events[k] << '\n';
        write_text(a.path_out, o.str(), out_stream);
    }
    json out;
    out["method"] = "add-hazards";
    out["n"] = t.n();
    out["path"] = to_json(path);
    std::vector<double> horizons = a.horizons;
    if (horizons.empty() && !path.times.empty()) horizons.push_back(path.times[path.size() / 2]);
    json rows = json::array();
    if (a.bootstrap > 0 && !path.times.empty()) {
        BootstrapOptions bo;
        bo.replicates = a.bootstrap;
        bo.seed = a.seed;
        bo.threads = thread_count(a.threads);
        const auto boot = bootstrap_paths(t, horizons, so, bo);
        for (std::size_t k = 0; k < horizons.size(); ++k)
            rows.push_back({{"time", horizons[k]},
                            {"B_a", boot.estimate[k].first},
                            {"B_g", boot.estimate[k].second},
                            {"se_a", mrgenius::detail::number(boot.se_a[k])},
                            {"se_g", mrgenius::detail::number(boot.se_g[k])}});
        out["bootstrap"] = {{"replicates", boot.replicates}, {"failures", boot.failures}, {"seed", a.seed}};
    } else {
        for (double h : horizons) {
            const auto [ba, bg] = path_interpolate(path, h);
            rows.push_back({{"time", h}, {"B_a", ba}, {"B_g", bg}});
        }
    }
    out["horizons"] = rows;
    return out;
}

inline int estimate(const EstimateArgs& a, std::ostream& out)
{
    static const std::vector<std::string> methods{
        "genius",      "genius-lewbel", "genius-covariates", "genius-gmm", "genius-efficient", "mult-outcome",
        "mult-exposure", "odds-ratio",  "add-hazards",       "tsls",       "oracle-tsls",      "mr-egger"};
    if (std::find(methods.begin(), methods.end(), a.method) == methods.end())
        throw ValidationError("unknown --method '" + a.method + "'");
    if (!(a.level > 0.0 && a.level < 1.0)) throw ValidationError("--level must lie in (0,1)");
    if ((a.case_control || a.controls_only || !a.sampling_fractions.empty()) && a.method != "mult-outcome")
        throw ValidationError("case-control options apply to --method mult-outcome only");
    if (a.case_control && !a.controls_only && a.sampling_fractions.empty())
        throw ValidationError("--case-control needs --controls-only or --sampling-fractions f1,f0");
    if (!a.sampling_fractions.empty() && a.sampling_fractions.size() != 2)
        throw ValidationError("--sampling-fractions expects two values f1,f0");

    const bool survival = a.method == "add-hazards";
    const ObservationTable t = load(a, survival);
    if (a.method == "odds-ratio" && t.kind() != ExposureKind::binary)
        throw ValidationError("method odds-ratio requires a binary exposure; declared exposure is "
                              + to_string(t.kind()));
    if (a.method == "mult-exposure" && t.kind() == ExposureKind::continuous)
        throw ValidationError("method mult-exposure requires a binary or count exposure");
    if (a.method == "genius-covariates" && !t.has_covariates())
        throw ValidationError("method genius-covariates requires --covariate-cols");
    if (t.has_covariates() && a.method != "genius-covariates" && a.method != "genius-gmm")
        throw ValidationError("--covariate-cols is only used by genius-covariates and genius-gmm");

    EstimatorOptions opt;
    opt.level = a.level;
    opt.exposure_model = parse_nuisance_choice(a.nuisance);

    json result;
    Matrix vcov;
    std::vector<std::pair<std::string, Eigen::Index>> layout;
    auto keep = [&](const CausalEstimate& e) {
        vcov = e.covariance;
        layout = e.layout;
    };
    if (survival) {
        result = run_survival(a, t, out);
    } else if (a.method == "genius") {
        const auto e = genius_single(t, opt);
        result = to_json(e);
        keep(e);
    } else if (a.method == "genius-lewbel") {
        const auto e = genius_single_lewbel(t, opt);
        result = to_json(e);
        keep(e);
    } else if (a.method == "genius-covariates") {
        const auto e = genius_covariates(t, {}, opt);
        result = to_json(e);
        keep(e);
    } else if (a.method == "genius-gmm") {
        GmmConfig cfg;
        cfg.weight = parse_gmm_weight(a.gmm_weight);
        cfg.use_covariates = t.has_covariates();
        const auto e = genius_gmm(t, cfg, opt);
        result = to_json(e);
        keep(e);
    } else if (a.method == "genius-efficient") {
        OutcomeScale scale;
        if (a.scale == "additive") scale = OutcomeScale::additive;
        else if (a.scale == "multiplicative") scale = OutcomeScale::multiplicative;
        else throw ValidationError("--scale must be additive or multiplicative");
        const auto e = genius_efficient(t, scale, opt);
        result = to_json(e);
        keep(e);
    } else if (a.method == "mult-outcome") {
        std::optional<ExternalMoments> ext;
        if (a.case_control) {
            std::optional<std::pair<double, double>> fr;
            if (!a.sampling_fractions.empty()) fr = std::make_pair(a.sampling_fractions[0], a.sampling_fractions[1]);
            ext = case_control_adjust(t, a.controls_only, fr);
        }
        const auto e = genius_mult_outcome(t, ext, opt);
        result = to_json(e);
        keep(e);
    } else if (a.method == "mult-exposure") {
        const auto e = genius_mult_exposure(t, opt);
        result = to_json(e);
        keep(e);
    } else if (a.method == "odds-ratio") {
        const auto e = genius_odds_ratio(t, opt);
        result = to_json(e);
        keep(e);
    } else if (a.method == "tsls") {
        result = to_json(tsls(t, a.level));
    } else if (a.method == "oracle-tsls") {
        if (a.valid_ivs.empty()) throw ValidationError("oracle-tsls needs --valid-ivs");
        result = to_json(oracle_tsls(t, resolve_ivs(a.valid_ivs, t), a.level));
    } else if (a.method == "mr-egger") {
        result = to_json(mr_egger(t, a.level));
    }

    if (!a.emit_vcov.empty()) {
        if (vcov.size() == 0) throw ValidationError("--emit-vcov: no stacked covariance for method " + a.method);
        write_text(a.emit_vcov, vcov_csv(vcov, layout), out);
    }
    write_text(a.out, result.dump(2) + "\n", out);
    return ok;
}

inline int diagnose(const EstimateArgs& a, std::ostream& out)
{
    EstimateArgs b = a;
    if (b.outcome_col.empty() && b.time_col.empty()) throw ValidationError("--outcome-col is required");
    const bool survival = !b.event_col.empty();
    const ObservationTable t = load(b, survival);
    json result;
    result["n"] = t.n();
    result["p"] = t.p();
    result["exposure_kind"] = to_string(t.kind());
    result["relevance"] = to_json(relevance_diagnostic(t));
    const auto choice = parse_nuisance_choice(a.nuisance);
    NuisanceChoice c = choice;
    if (c == NuisanceChoice::automatic && t.p() == 1 && is_discrete(t.g(0))) c = NuisanceChoice::saturated;
    result["exposure_model"] = to_json(fit_conditional_mean(t.a(), t.g(), c, t.iv_names()));
    write_text(a.out, result.dump(2) + "\n", out);
    return ok;
}

inline int simulate(const SimulateArgs& a, std::ostream& out)
{
    ScenarioSpec spec = load_scenario(a.scenario);
    if (a.replicates) spec.replicates = *a.replicates;
    if (a.seed) spec.seed = *a.seed;
    if (a.n) spec.n = static_cast<Eigen::Index>(*a.n);
    spec.validate();
    const auto report = run_monte_carlo(spec, thread_count(a.threads), a.timing);
    if (!a.table_out.empty()) write_text(a.table_out, format_report_table(report), out);
    write_text(a.out, to_json(report, a.estimates).dump(2) + "\n", out);
    return ok;
}

inline void add_data_options(CLI::App* cmd, EstimateArgs& a)
{
    cmd->add_option("--input", a.input, "CSV file with a header row")->required();
    cmd->add_option("--iv-cols", a.iv_cols, "instrument columns")->delimiter(',')->required();
    cmd->add_option("--exposure-col", a.exposure_col, "exposure column")->capture_default_str();
    cmd->add_option("--outcome-col", a.outcome_col, "outcome column");
    cmd->add_option("--time-col", a.time_col, "follow-up time column (add-hazards)");
    cmd->add_option("--event-col", a.event_col, "event indicator column (add-hazards)");
    cmd->add_option("--covariate-cols", a.covariate_cols, "covariate columns")->delimiter(',');
    cmd->add_option("--exposure-kind", a.exposure_kind, "binary, continuous or count (default: detect)");
    cmd->add_option("--nuisance", a.nuisance, "exposure model: auto, saturated, linear or logistic")
        ->capture_default_str();
    cmd->add_option("--out", a.out, "output file (default stdout)");
}

} // namespace detail

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Heteroscedasticity-based instrumental-variable estimation"};
    app.require_subcommand(1);
    EstimateArgs est, diag;
    SimulateArgs sim;

    auto* e = app.add_subcommand("estimate", "estimate a causal effect from a CSV file");
    detail::add_data_options(e, est);
    e->add_option("--method", est.method,
                  "genius, genius-lewbel, genius-covariates, genius-gmm, genius-efficient, mult-outcome, "
                  "mult-exposure, odds-ratio, add-hazards, tsls, oracle-tsls, mr-egger")
        ->capture_default_str();
    e->add_option("--level", est.level, "confidence level")->capture_default_str();
    e->add_option("--emit-vcov", est.emit_vcov, "write the stacked covariance matrix as CSV");
    e->add_option("--valid-ivs", est.valid_ivs, "valid instruments for oracle-tsls (names or 1-based indices)")
        ->delimiter(',');
    e->add_flag("--case-control", est.case_control, "use case-control adjusted moments (mult-outcome)");
    e->add_flag("--controls-only", est.controls_only, "rare outcome: take moments from the controls");
    e->add_option("--sampling-fractions", est.sampling_fractions, "case and control sampling fractions f1,f0")
        ->delimiter(',');
    e->add_option("--horizons", est.horizons, "times at which to report the cumulative effects")->delimiter(',');
    e->add_option("--tau", est.tau, "ignore events after this time (add-hazards)");
    e->add_option("--bootstrap", est.bootstrap, "bootstrap resamples for add-hazards (0 disables)")
        ->capture_default_str();
    e->add_option("--path-out", est.path_out, "write the cumulative-effect step functions as CSV");
    e->add_option("--seed", est.seed, "bootstrap seed")->capture_default_str();
    e->add_option("--threads", est.threads, "worker threads (default MRGENIUS_THREADS or all cores)");
    e->add_option("--gmm-weight", est.gmm_weight, "identity, two-step or iterated")->capture_default_str();
    e->add_option("--scale", est.scale, "genius-efficient outcome scale: additive or multiplicative")
        ->capture_default_str();

    auto* d = app.add_subcommand("diagnose", "instrument relevance and nuisance fit");
    detail::add_data_options(d, diag);

    auto* s = app.add_subcommand("simulate", "Monte Carlo study from a scenario file");
    s->add_option("--scenario", sim.scenario, "scenario file (key = value lines)")->required();
    s->add_option("--replicates", sim.replicates, "override the replicate count");
    s->add_option("--seed", sim.seed, "override the master seed");
    s->add_option("--n", sim.n, "override the sample size");
    s->add_option("--threads", sim.threads, "worker threads (default MRGENIUS_THREADS or all cores)");
    s->add_option("--out", sim.out, "JSON report file (default stdout)");
    s->add_option("--table-out", sim.table_out, "formatted text table ('-' for stdout)");
    s->add_flag("--timing", sim.timing, "include wall-clock runtime in the report");
    s->add_flag("--estimates", sim.estimates, "include per-replicate estimates in the report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        out << app.help();
        return ok;
    } catch (const CLI::CallForAllHelp& ex) {
        out << app.help("", CLI::AppFormatMode::All);
        return ok;
    } catch (const CLI::ParseError& ex) {
        err << "error: " << ex.what() << "\n";
        return validation;
    }

    try {
        if (*e) return detail::estimate(est, out);
        if (*d) return detail::diagnose(diag, out);
        if (*s) return detail::simulate(sim, out);
    } catch (const ValidationError& ex) {
        err << "validation error: " << ex.what();
        for (std::size_t k = 0; k < ex.details().size(); ++k) err << (k ? "; " : ": ") << ex.details()[k];
        err << "\n";
        return validation;
    } catch (const IdentificationError& ex) {
        err << "identification error: " << ex.what() << "\n";
        return identification;
    } catch (const ConvergenceError& ex) {
        err << "convergence error: " << ex.what() << "\n";
        return convergence;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return unexpected;
    }
    return unexpected;
}

} // namespace mrgenius::cli
