#pragma once

#include "mrgenius/errors.hpp"
#include "mrgenius/linalg.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace mrgenius {

enum class ExposureKind { binary, continuous, count };

inline std::string to_string(ExposureKind k)
{
    switch (k) {
    case ExposureKind::binary: return "binary";
    case ExposureKind::continuous: return "continuous";
    case ExposureKind::count: return "count";
    }
    return "unknown";
}

inline ExposureKind parse_exposure_kind(std::string_view s)
{
    if (s == "binary") return ExposureKind::binary;
    if (s == "continuous") return ExposureKind::continuous;
    if (s == "count") return ExposureKind::count;
    throw ValidationError("unknown exposure kind '" + std::string(s) + "'");
}

// Columns with at most this many distinct values are treated as discrete
// (saturated fits, group variances, level maps).
inline constexpr std::size_t kMaxDiscreteLevels = 16;

inline std::vector<double> distinct_values(const Vector& v)
{
    std::set<double> s(v.data(), v.data() + v.size());
    return {s.begin(), s.end()};
}

inline bool is_discrete(const Vector& v)
{
    std::set<double> s;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        s.insert(v(i));
        if (s.size() > kMaxDiscreteLevels) return false;
    }
    return true;
}

/// Per-unit records (G, A, Y[, Delta][, C]). Immutable once constructed;
/// the constructor enforces the shape and domain invariants.
class ObservationTable {
public:
    ObservationTable(Matrix g, Vector a, Vector y, ExposureKind kind,
                     std::optional<Vector> delta = std::nullopt,
                     std::optional<Matrix> c = std::nullopt,
                     std::vector<std::string> iv_names = {},
                     std::vector<std::string> covariate_names = {})
        : g_(std::move(g)), a_(std::move(a)), y_(std::move(y)), delta_(std::move(delta)),
          c_(std::move(c)), kind_(kind), iv_names_(std::move(iv_names)),
          covariate_names_(std::move(covariate_names))
    {
        validate();
    }

    Eigen::Index n() const noexcept { return a_.size(); }
    Eigen::Index p() const noexcept { return g_.cols(); }
    Eigen::Index q() const noexcept { return c_ ? c_->cols() : 0; }

    const Matrix& g() const noexcept { return g_; }
    Vector g(Eigen::Index j) const { return g_.col(j); }
    const Vector& a() const noexcept { return a_; }
    const Vector& y() const noexcept { return y_; }
    bool has_delta() const noexcept { return delta_.has_value(); }
    const Vector& delta() const
    {
        if (!delta_) throw ValidationError("table has no event indicator");
        return *delta_;
    }
    bool has_covariates() const noexcept { return c_.has_value() && c_->cols() > 0; }
    const Matrix& c() const
    {
        if (!c_) throw ValidationError("table has no covariates");
        return *c_;
    }
    ExposureKind kind() const noexcept { return kind_; }
    const std::vector<std::string>& iv_names() const noexcept { return iv_names_; }
    const std::vector<std::string>& covariate_names() const noexcept { return covariate_names_; }

    // Row subset (duplicates allowed), used by resampling and case-control work.
    ObservationTable rows(const std::vector<Eigen::Index>& idx) const
    {
        const auto m = static_cast<Eigen::Index>(idx.size());
        Matrix g(m, p());
        Vector a(m), y(m);
        std::optional<Vector> d;
        std::optional<Matrix> c;
        if (delta_) d = Vector(m);
        if (c_) c = Matrix(m, c_->cols());
        for (Eigen::Index k = 0; k < m; ++k) {
            const auto i = idx[static_cast<std::size_t>(k)];
            g.row(k) = g_.row(i);
            a(k) = a_(i);
            y(k) = y_(i);
            if (d) (*d)(k) = (*delta_)(i);
            if (c) c->row(k) = c_->row(i);
        }
        return {std::move(g), std::move(a), std::move(y), kind_, std::move(d), std::move(c),
                iv_names_, covariate_names_};
    }

    ObservationTable with_outcome(Vector y) const
    {
        return {g_, a_, std::move(y), kind_, delta_, c_, iv_names_, covariate_names_};
    }

    ObservationTable with_ivs(Matrix g, std::vector<std::string> names = {}) const
    {
        return {std::move(g), a_, y_, kind_, delta_, c_, std::move(names), covariate_names_};
    }

private:
    void validate() const
    {
        const auto n = a_.size();
        if (n == 0) throw ValidationError("observation table is empty");
        if (g_.cols() < 1) throw ValidationError("at least one instrument column is required");
        if (g_.rows() != n || y_.size() != n)
            throw ValidationError("instrument, exposure and outcome lengths differ");
        if (delta_ && delta_->size() != n) throw ValidationError("event indicator length differs");
        if (c_ && c_->rows() != n) throw ValidationError("covariate rows differ from n");
        if (!iv_names_.empty() && static_cast<Eigen::Index>(iv_names_.size()) != g_.cols())
            throw ValidationError("instrument names do not match instrument columns");
        auto finite = [](const auto& m) { return m.allFinite(); };
        if (!finite(g_) || !finite(a_) || !finite(y_) || (c_ && !finite(*c_)))
            throw ValidationError("table contains non-finite values");
        for (Eigen::Index i = 0; i < n; ++i) {
            const double ai = a_(i);
            if (kind_ == ExposureKind::binary && ai != 0.0 && ai != 1.0)
                throw ValidationError("binary exposure outside {0,1} at row " + std::to_string(i + 1));
            if (kind_ == ExposureKind::count && (ai < 0.0 || ai != std::floor(ai)))
                throw ValidationError("count exposure not a non-negative integer at row "
                                      + std::to_string(i + 1));
            if (delta_) {
                const double di = (*delta_)(i);
                if (di != 0.0 && di != 1.0)
                    throw ValidationError("event indicator outside {0,1} at row " + std::to_string(i + 1));
                if (y_(i) < 0.0)
                    throw ValidationError("negative follow-up time at row " + std::to_string(i + 1));
            }
        }
    }

    Matrix g_;
    Vector a_;
    Vector y_;
    std::optional<Vector> delta_;
    std::optional<Matrix> c_;
    ExposureKind kind_;
    std::vector<std::string> iv_names_;
    std::vector<std::string> covariate_names_;
};

// Column-role mapping for CSV ingestion.
struct ColumnSchema {
    std::vector<std::string> iv_cols;
    std::string exposure_col;
    std::string outcome_col;
    std::vector<std::string> covariate_cols;
    std::optional<std::string> event_col;
    std::optional<ExposureKind> exposure_kind; // nullopt: binary if all in {0,1}, else continuous
};

namespace detail {

inline std::string trim(std::string_view s)
{
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    std::string out(s.substr(b, e - b + 1));
    if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
    return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string_view sv(line);
    std::size_t start = 0;
    while (true) {
        auto pos = sv.find(',', start);
        out.push_back(trim(sv.substr(start, pos == std::string_view::npos ? sv.npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::optional<double> parse_number(const std::string& s)
{
    if (s.empty()) return std::nullopt;
    double v = 0.0;
    const char* first = s.data();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

} // namespace detail

/// Reads a comma-separated file with a header row. Every row with a missing or
/// non-numeric declared field is reported (1-based data-row index); nothing is
/// imputed.
inline ObservationTable load_csv(const std::string& path, const ColumnSchema& schema)
{
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("'" + path + "' has no header row");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3); // BOM
    const auto header = detail::split_csv_line(line);
    std::map<std::string, std::size_t> index;
    for (std::size_t k = 0; k < header.size(); ++k) index.emplace(header[k], k);

    std::vector<std::string> missing;
    auto locate = [&](const std::string& name) -> std::size_t {
        auto it = index.find(name);
        if (it == index.end()) {
            missing.push_back(name);
            return 0;
        }
        return it->second;
    };
    if (schema.iv_cols.empty()) throw ValidationError("no instrument columns declared");
    std::vector<std::size_t> ivs, covs;
    for (const auto& c : schema.iv_cols) ivs.push_back(locate(c));
    const auto ai = locate(schema.exposure_col);
    const auto yi = locate(schema.outcome_col);
    for (const auto& c : schema.covariate_cols) covs.push_back(locate(c));
    std::optional<std::size_t> di;
    if (schema.event_col) di = locate(*schema.event_col);
    if (!missing.empty()) {
        std::string msg = "missing column(s):";
        for (const auto& m : missing) msg += " " + m;
        throw ValidationError(msg, missing);
    }

    std::vector<std::vector<double>> g, c;
    std::vector<double> a, y, d;
    std::vector<std::string> errors;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        ++row;
        const auto cells = detail::split_csv_line(line);
        bool ok = true;
        auto get = [&](std::size_t col, const std::string& name) -> double {
            if (col >= cells.size() || cells[col].empty()) {
                errors.push_back("row " + std::to_string(row) + ": missing value in '" + name + "'");
                ok = false;
                return 0.0;
            }
            auto v = detail::parse_number(cells[col]);
            if (!v) {
                errors.push_back("row " + std::to_string(row) + ": non-numeric value '" + cells[col]
                                 + "' in '" + name + "'");
                ok = false;
                return 0.0;
            }
            return *v;
        };
        std::vector<double> grow, crow;
        for (std::size_t k = 0; k < ivs.size(); ++k) grow.push_back(get(ivs[k], schema.iv_cols[k]));
        const double av = get(ai, schema.exposure_col);
        const double yv = get(yi, schema.outcome_col);
        for (std::size_t k = 0; k < covs.size(); ++k) crow.push_back(get(covs[k], schema.covariate_cols[k]));
        double dv = 0.0;
        if (di) dv = get(*di, *schema.event_col);
        if (ok && schema.exposure_kind == ExposureKind::binary && av != 0.0 && av != 1.0) {
            errors.push_back("row " + std::to_string(row) + ": exposure value " + cells[ai]
                             + " outside {0,1} under binary declaration");
            ok = false;
        }
        if (ok && schema.exposure_kind == ExposureKind::count && (av < 0.0 || av != std::floor(av))) {
            errors.push_back("row " + std::to_string(row) + ": exposure value " + cells[ai]
                             + " is not a non-negative integer count");
            ok = false;
        }
        if (ok && di && dv != 0.0 && dv != 1.0) {
            errors.push_back("row " + std::to_string(row) + ": event indicator outside {0,1}");
            ok = false;
        }
        if (ok && di && yv < 0.0) {
            errors.push_back("row " + std::to_string(row) + ": negative follow-up time");
            ok = false;
        }
        if (!ok) continue;
        g.push_back(std::move(grow));
        c.push_back(std::move(crow));
        a.push_back(av);
        y.push_back(yv);
        d.push_back(dv);
    }
    if (!errors.empty()) {
        std::string msg = std::to_string(errors.size()) + " invalid row(s) in '" + path + "'; first: " + errors.front();
        throw ValidationError(msg, errors);
    }
    if (a.empty()) throw ValidationError("'" + path + "' has no data rows");

    const auto n = static_cast<Eigen::Index>(a.size());
    Matrix gm(n, static_cast<Eigen::Index>(ivs.size()));
    Matrix cm(n, static_cast<Eigen::Index>(covs.size()));
    Vector av(n), yv(n), dv(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto s = static_cast<std::size_t>(i);
        for (Eigen::Index j = 0; j < gm.cols(); ++j) gm(i, j) = g[s][static_cast<std::size_t>(j)];
        for (Eigen::Index j = 0; j < cm.cols(); ++j) cm(i, j) = c[s][static_cast<std::size_t>(j)];
        av(i) = a[s];
        yv(i) = y[s];
        dv(i) = d[s];
    }
    ExposureKind kind = ExposureKind::continuous;
    if (schema.exposure_kind) {
        kind = *schema.exposure_kind;
    } else if ((av.array() == 0.0 || av.array() == 1.0).all()) {
        kind = ExposureKind::binary;
    }
    std::optional<Vector> delta;
    if (di) delta = std::move(dv);
    std::optional<Matrix> cov;
    if (!covs.empty()) cov = std::move(cm);
    return {std::move(gm), std::move(av), std::move(yv), kind, std::move(delta), std::move(cov),
            schema.iv_cols, schema.covariate_cols};
}

/// Writes the table back as CSV with shortest round-trip number formatting.
inline void write_csv(const std::string& path, const ObservationTable& t, const ColumnSchema& schema)
{
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    auto num = [](double v) {
        char buf[64];
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
        return std::string(buf, ptr);
    };
    std::vector<std::string> cols = schema.iv_cols;
    cols.push_back(schema.exposure_col);
    cols.push_back(schema.outcome_col);
    for (const auto& c : schema.covariate_cols) cols.push_back(c);
    if (schema.event_col) cols.push_back(*schema.event_col);
    for (std::size_t k = 0; k < cols.size(); ++k) out << (k ? "," : "") << cols[k];
    out << '\n';
    for (Eigen::Index i = 0; i < t.n(); ++i) {
        for (Eigen::Index j = 0; j < t.p(); ++j) out << (j ? "," : "") << num(t.g()(i, j));
        out << ',' << num(t.a()(i)) << ',' << num(t.y()(i));
        for (Eigen::Index j = 0; j < t.q(); ++j) out << ',' << num(t.c()(i, j));
        if (schema.event_col) out << ',' << num(t.delta()(i));
        out << '\n';
    }
}

struct IvRelevance {
    std::string name;
    double phi_hat = 0.0;
    double se = 0.0;
    double z = 0.0;
    bool constant = false;
    bool weak = false; // |phi|/se below the threshold, or phi numerically zero
};

struct RelevanceDiagnostic {
    double phi_hat = 0.0; // strongest instrument's value (by |z|)
    std::vector<IvRelevance> per_iv;
    bool any_weak = false;
};

/// Empirical cov{G_j, var(A|G_j)} for each instrument column.
///
/// With r = A - E^(A|G_j) (group means for discrete G_j, otherwise a
/// linear fit), group variances or the linear fit of r^2 on G_j both give
/// phi_j = P_n[(G_j - mean G_j) r^2]; for binary G_j this is
/// var(G)(var(A|G=1) - var(A|G=0)) with 1/n variances.
inline RelevanceDiagnostic relevance_diagnostic(const ObservationTable& t, double z_threshold = 2.0)
{
    RelevanceDiagnostic out;
    const double n = static_cast<double>(t.n());
    double best = -1.0;
    for (Eigen::Index j = 0; j < t.p(); ++j) {
        IvRelevance iv;
        iv.name = j < static_cast<Eigen::Index>(t.iv_names().size()) ? t.iv_names()[static_cast<std::size_t>(j)]
                                                                    : "G" + std::to_string(j + 1);
        const Vector gj = t.g(j);
        const double gbar = gj.mean();
        if ((gj.array() == gj(0)).all()) {
            iv.constant = iv.weak = true;
            out.any_weak = true;
            out.per_iv.push_back(iv);
            continue;
        }
        Vector fitted(t.n());
        if (is_discrete(gj)) {
            std::map<double, std::pair<double, double>> acc;
            for (Eigen::Index i = 0; i < t.n(); ++i) {
                auto& [s, c] = acc[gj(i)];
                s += t.a()(i);
                c += 1.0;
            }
            for (Eigen::Index i = 0; i < t.n(); ++i) {
                const auto& [s, c] = acc[gj(i)];
                fitted(i) = s / c;
            }
        } else {
            const Matrix x = with_intercept(gj);
            const Vector coef = x.colPivHouseholderQr().solve(t.a());
            fitted = x * coef;
        }
        const Vector r2 = (t.a() - fitted).array().square();
        const Vector d = (gj.array() - gbar) * r2.array();
        iv.phi_hat = d.mean();
        const double var = (d.array() - iv.phi_hat).square().sum() / n;
        iv.se = std::sqrt(var / n);
        const double scale = std::sqrt((gj.array() - gbar).square().mean() * r2.squaredNorm() / n);
        if (iv.se > 0.0) iv.z = iv.phi_hat / iv.se;
        iv.weak = std::abs(iv.phi_hat) <= 1e-12 * std::max(scale, 1e-300) || std::abs(iv.z) < z_threshold;
        out.any_weak = out.any_weak || iv.weak;
        if (std::abs(iv.z) > best) {
            best = std::abs(iv.z);
            out.phi_hat = iv.phi_hat;
        }
        out.per_iv.push_back(iv);
    }
    return out;
}

} // namespace mrgenius
