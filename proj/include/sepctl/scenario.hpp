#pragma once

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "sepctl/errors.hpp"
#include "sepctl/experiments.hpp"
#include "sepctl/kalman.hpp"
#include "sepctl/laws.hpp"
#include "sepctl/loop.hpp"
#include "sepctl/model.hpp"
#include "sepctl/noise.hpp"
#include "sepctl/shiryaev.hpp"
#include "sepctl/synthesis.hpp"
#include "sepctl/volterra.hpp"

namespace sepctl {

// ---------------------------------------------------------------------------
// Value syntax

namespace cfg {

inline std::string trim(std::string_view s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return std::string(s.substr(a, b - a));
}

// Splits on `sep` outside brackets and parentheses; pieces are trimmed.
inline std::vector<std::string> split_top(std::string_view s, char sep) {
    std::vector<std::string> out;
    int depth = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (c == '(' || c == '[') ++depth;
        if (c == ')' || c == ']') {
            if (--depth < 0) throw InvalidArgument("unbalanced brackets in '" + std::string(s) + "'");
        }
        if (c == sep && depth == 0) {
            out.push_back(trim(s.substr(start, i - start)));
            start = i + 1;
        }
    }
    if (depth != 0) throw InvalidArgument("unbalanced brackets in '" + std::string(s) + "'");
    out.push_back(trim(s.substr(start)));
    return out;
}

inline double parse_double(std::string_view s) {
    const std::string t = trim(s);
    if (t.empty()) throw InvalidArgument("expected a number");
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size() || !std::isfinite(v)) throw InvalidArgument("'" + t + "' is not a finite number");
    return v;
}

inline long long parse_int(std::string_view s) {
    const std::string t = trim(s);
    if (t.empty()) throw InvalidArgument("expected an integer");
    char* end = nullptr;
    errno = 0;
    const long long v = std::strtoll(t.c_str(), &end, 10);
    if (end == t.c_str() + t.size() && errno == 0) return v;
    // Accept integral floating notation such as 1e4.
    const double d = parse_double(t);
    if (d != std::floor(d) || std::abs(d) > 9.0e18) throw InvalidArgument("'" + t + "' is not an integer");
    return static_cast<long long>(d);
}

inline bool parse_bool(std::string_view s) {
    const std::string t = trim(s);
    if (t == "true" || t == "yes" || t == "1") return true;
    if (t == "false" || t == "no" || t == "0") return false;
    throw InvalidArgument("'" + t + "' is not a boolean");
}

inline std::string format_number(double v) { return detail::format_double(v); }

// `[a b; c d]` (commas between entries allowed) or a bare number for 1 x 1.
inline Matrix parse_matrix(std::string_view s) {
    const std::string t = trim(s);
    if (t.empty()) throw InvalidArgument("expected a matrix");
    if (t.front() != '[') return Matrix::Constant(1, 1, parse_double(t));
    if (t.back() != ']') throw InvalidArgument("matrix '" + t + "' is missing ']'");
    std::vector<std::vector<double>> rows;
    for (const auto& row : split_top(std::string_view(t).substr(1, t.size() - 2), ';')) {
        std::string r = row;
        std::replace(r.begin(), r.end(), ',', ' ');
        std::istringstream in(r);
        std::vector<double> vals;
        std::string tok;
        while (in >> tok) vals.push_back(parse_double(tok));
        rows.push_back(std::move(vals));
    }
    if (rows.empty() || rows.front().empty()) throw InvalidArgument("matrix '" + t + "' is empty");
    for (const auto& r : rows)
        if (r.size() != rows.front().size()) throw InvalidArgument("matrix '" + t + "' has ragged rows");
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    return m;
}

inline std::string format_matrix(const Matrix& m) {
    if (m.rows() == 1 && m.cols() == 1) return format_number(m(0, 0));
    std::string out = "[";
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        if (i) out += "; ";
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j) out += ' ';
            out += format_number(m(i, j));
        }
    }
    return out + "]";
}

struct Call {
    std::string name;
    std::vector<std::string> args;
    bool has_args = false;
};

// `name` or `name(a, b, ...)`.
inline Call parse_call(std::string_view s) {
    const std::string t = trim(s);
    Call c;
    std::size_t i = 0;
    while (i < t.size() && (std::isalnum(static_cast<unsigned char>(t[i])) || t[i] == '_')) ++i;
    c.name = t.substr(0, i);
    if (c.name.empty()) throw InvalidArgument("expected a name in '" + t + "'");
    const std::string rest = trim(std::string_view(t).substr(i));
    if (rest.empty()) return c;
    if (rest.front() != '(' || rest.back() != ')') throw InvalidArgument("malformed call '" + t + "'");
    c.has_args = true;
    const std::string inner = rest.substr(1, rest.size() - 2);
    if (!trim(inner).empty()) c.args = split_top(inner, ',');
    return c;
}

inline MatrixSchedule parse_schedule(std::string_view s) {
    const std::string t = trim(s);
    if (t.rfind("poly", 0) == 0 || t.rfind("table", 0) == 0) {
        const Call c = parse_call(t);
        if (c.name == "poly") {
            std::vector<Matrix> coeffs;
            for (const auto& a : c.args) coeffs.push_back(parse_matrix(a));
            return MatrixSchedule::polynomial(std::move(coeffs));
        }
        if (c.name == "table") {
            std::vector<double> times;
            std::vector<Matrix> values;
            for (const auto& a : c.args) {
                const auto colon = a.find(':');
                if (colon == std::string::npos) throw InvalidArgument("table entry '" + a + "' needs 't: value'");
                times.push_back(parse_double(std::string_view(a).substr(0, colon)));
                values.push_back(parse_matrix(std::string_view(a).substr(colon + 1)));
            }
            return MatrixSchedule::table(std::move(times), std::move(values));
        }
        throw InvalidArgument("unknown schedule form '" + c.name + "'");
    }
    return MatrixSchedule::constant(parse_matrix(t));
}

inline std::string format_schedule(const MatrixSchedule& s) {
    switch (s.kind()) {
        case MatrixSchedule::Kind::constant:
            return format_matrix(s.coefficients().front());
        case MatrixSchedule::Kind::polynomial: {
            std::string out = "poly(";
            for (std::size_t i = 0; i < s.coefficients().size(); ++i)
                out += (i ? ", " : "") + format_matrix(s.coefficients()[i]);
            return out + ")";
        }
        case MatrixSchedule::Kind::table: {
            std::string out = "table(";
            for (std::size_t i = 0; i < s.coefficients().size(); ++i)
                out += (i ? ", " : "") + format_number(s.table_times()[i]) + ": " + format_matrix(s.coefficients()[i]);
            return out + ")";
        }
        case MatrixSchedule::Kind::function:
            break;
    }
    throw InvalidArgument("callable schedules cannot be written to a scenario file");
}

inline bool same_schedule(const MatrixSchedule& a, const MatrixSchedule& b) {
    if (a.kind() != b.kind() || a.kind() == MatrixSchedule::Kind::function) return false;
    if (a.table_times() != b.table_times() || a.coefficients().size() != b.coefficients().size()) return false;
    for (std::size_t i = 0; i < a.coefficients().size(); ++i) {
        const auto& x = a.coefficients()[i];
        const auto& y = b.coefficients()[i];
        if (x.rows() != y.rows() || x.cols() != y.cols() || x != y) return false;
    }
    return true;
}

inline bool same_matrix(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
}

// wiener(d) + poisson(rate) + gbm(vol[, drift=x][, non_martingale]) + step[(T)]
inline NoiseSpec parse_noise(std::string_view s) {
    NoiseSpec spec;
    for (const auto& part : split_top(s, '+')) {
        const Call c = parse_call(part);
        auto nargs = [&](std::size_t lo, std::size_t hi) {
            if (c.args.size() < lo || c.args.size() > hi)
                throw InvalidArgument("noise component '" + part + "' has the wrong number of arguments");
        };
        if (c.name == "wiener") {
            nargs(0, 1);
            spec.components.push_back(Wiener{c.args.empty() ? 1 : static_cast<int>(parse_int(c.args[0]))});
        } else if (c.name == "poisson") {
            nargs(1, 1);
            spec.components.push_back(CompensatedPoisson{parse_double(c.args[0])});
        } else if (c.name == "gbm") {
            nargs(1, 3);
            GbmMartingale g{parse_double(c.args[0]), 0.0, false};
            for (std::size_t i = 1; i < c.args.size(); ++i) {
                const std::string& a = c.args[i];
                if (a == "non_martingale")
                    g.allow_non_martingale = true;
                else if (a.rfind("drift", 0) == 0 && a.find('=') != std::string::npos)
                    g.drift = parse_double(std::string_view(a).substr(a.find('=') + 1));
                else
                    throw InvalidArgument("unknown gbm option '" + a + "'");
            }
            spec.components.push_back(g);
        } else if (c.name == "step") {
            nargs(0, 1);
            spec.components.push_back(StepChange{c.args.empty() ? 0.0 : parse_double(c.args[0])});
        } else {
            throw InvalidArgument("unknown noise component '" + c.name + "'");
        }
    }
    return spec;
}

inline std::string format_noise(const NoiseSpec& spec) {
    std::string out;
    for (const auto& comp : spec.components) {
        if (!out.empty()) out += " + ";
        if (const auto* w = std::get_if<Wiener>(&comp))
            out += "wiener(" + std::to_string(w->dims) + ")";
        else if (const auto* p = std::get_if<CompensatedPoisson>(&comp))
            out += "poisson(" + format_number(p->rate) + ")";
        else if (const auto* g = std::get_if<GbmMartingale>(&comp)) {
            out += "gbm(" + format_number(g->volatility);
            if (g->drift != 0.0) out += ", drift=" + format_number(g->drift);
            if (g->allow_non_martingale) out += ", non_martingale";
            out += ")";
        } else if (const auto* st = std::get_if<StepChange>(&comp)) {
            out += st->horizon > 0.0 ? "step(" + format_number(st->horizon) + ")" : "step";
        }
    }
    return out;
}

}  // namespace cfg

// ---------------------------------------------------------------------------
// Law descriptions

struct LawSpec {
    enum class Kind { zero, state_feedback, separated_lqg, class_l, delayed, shiryaev };
    Kind kind = Kind::separated_lqg;
    double scale = 1.0;           // gain multiplier
    double delay = 0.0;           // delayed: epsilon in time units
    std::vector<LawSpec> inner;   // delayed: the wrapped law

    // Full state is observed by the law (or by the law it wraps).
    bool uses_state() const {
        if (kind == Kind::state_feedback) return true;
        return kind == Kind::delayed && !inner.empty() && inner.front().uses_state();
    }
    bool uses(Kind k) const {
        if (kind == k) return true;
        return kind == Kind::delayed && !inner.empty() && inner.front().uses(k);
    }
    friend bool operator==(const LawSpec&, const LawSpec&) = default;
};

namespace cfg {

inline LawSpec parse_law(std::string_view s) {
    const Call c = parse_call(s);
    LawSpec l;
    auto scale_only = [&](LawSpec::Kind k) {
        if (c.args.size() > 1) throw InvalidArgument("law '" + c.name + "' takes at most one argument (gain scale)");
        l.kind = k;
        if (!c.args.empty()) l.scale = parse_double(c.args[0]);
    };
    if (c.name == "zero" || c.name == "shiryaev") {
        if (c.has_args) throw InvalidArgument("law '" + c.name + "' takes no arguments");
        l.kind = c.name == "zero" ? LawSpec::Kind::zero : LawSpec::Kind::shiryaev;
    } else if (c.name == "state_feedback") {
        scale_only(LawSpec::Kind::state_feedback);
    } else if (c.name == "separated_lqg") {
        scale_only(LawSpec::Kind::separated_lqg);
    } else if (c.name == "class_l") {
        scale_only(LawSpec::Kind::class_l);
    } else if (c.name == "delayed") {
        if (c.args.size() != 2) throw InvalidArgument("delayed(law, epsilon) needs two arguments");
        l.kind = LawSpec::Kind::delayed;
        l.inner.push_back(parse_law(c.args[0]));
        l.delay = parse_double(c.args[1]);
    } else {
        throw InvalidArgument("unknown law '" + c.name + "'");
    }
    return l;
}

inline std::string format_law(const LawSpec& l) {
    auto scaled = [&](const char* name) {
        return l.scale == 1.0 ? std::string(name) : std::string(name) + "(" + format_number(l.scale) + ")";
    };
    switch (l.kind) {
        case LawSpec::Kind::zero: return "zero";
        case LawSpec::Kind::shiryaev: return "shiryaev";
        case LawSpec::Kind::state_feedback: return scaled("state_feedback");
        case LawSpec::Kind::separated_lqg: return scaled("separated_lqg");
        case LawSpec::Kind::class_l: return scaled("class_l");
        case LawSpec::Kind::delayed:
            return "delayed(" + (l.inner.empty() ? std::string("?") : format_law(l.inner.front())) + ", " +
                   format_number(l.delay) + ")";
    }
    return "?";
}

template <class T, class F>
std::string join(const std::vector<T>& v, F f) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + f(v[i]);
    return out;
}

}  // namespace cfg

// ---------------------------------------------------------------------------
// Scenario

inline const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names = {
        "estimate_cost", "cost_decomposition", "sigma_invariance", "optimality", "ito_identity",
        "martingale",    "causality",          "uniqueness",       "shiryaev",   "loop_equivalence"};
    return names;
}

// Kernel-based laws store an O(N^2) kernel; keep them to moderate grids.
inline constexpr int max_kernel_steps = 4000;

struct Tolerances {
    double ito_relative = 0.01;
    double ito_order = 0.8;
    double pathwise = 1e-10;
    double picard = 1e-8;
    double shiryaev_rms = 5e-3;
    double innovation = 1e-10;
    double loop_equivalence = 1e-10;
    friend bool operator==(const Tolerances&, const Tolerances&) = default;
};

struct Scenario {
    std::string name = "scenario";
    double horizon = 1.0;
    int steps = 10000;
    SystemModel model;
    CostSpec cost;
    NoiseSpec noise;
    LawSpec law;
    std::vector<std::string> experiments;
    int paths = 10000;
    std::uint64_t seed = 1;
    Tolerances tolerance;
    std::vector<double> perturbations = {-0.2, 0.2};
    std::optional<ComparisonMode> optimality_mode;  // default: separated for Wiener noise
    std::vector<LawSpec> sigma_laws;                // empty: default set
    int ito_seeds = 20;
    int ito_levels = 3;
    int ito_steps = 0;  // 0: grid.steps
    std::vector<double> causality_cuts;  // empty: T/4, T/2, 3T/4
    int causality_seeds = 3;
    int uniqueness_starts = 2;
    int loop_seeds = 10;
    int martingale_bins = 4;
    int shiryaev_seeds = 100;
    double shiryaev_min_detection = 0.0;
    std::string output;  // empty: out/<name>

    TimeGrid grid() const { return TimeGrid(horizon, steps); }
    int ito_grid_steps() const { return ito_steps > 0 ? ito_steps : steps; }
    std::vector<LawSpec> invariance_laws() const {
        if (!sigma_laws.empty()) return sigma_laws;
        return {{LawSpec::Kind::zero, 1.0, 0.0, {}},
                {LawSpec::Kind::separated_lqg, 1.0, 0.0, {}},
                {LawSpec::Kind::separated_lqg, 0.8, 0.0, {}},
                {LawSpec::Kind::delayed, 1.0, 0.05 * horizon, {{LawSpec::Kind::separated_lqg, 1.0, 0.0, {}}}}};
    }
    std::vector<double> cut_times() const {
        if (!causality_cuts.empty()) return causality_cuts;
        return {0.25 * horizon, 0.5 * horizon, 0.75 * horizon};
    }
    ComparisonMode comparison_mode() const;
    std::string output_dir() const { return output.empty() ? "out/" + name : output; }
};

// Every component has unit quadratic-variation rate, so the Riccati noise
// terms apply without rescaling.
inline bool unit_intensity(const NoiseSpec& spec) {
    for (const auto& c : spec.components) {
        if (std::holds_alternative<Wiener>(c)) continue;
        if (const auto* p = std::get_if<CompensatedPoisson>(&c); p && p->rate == 1.0) continue;
        return false;
    }
    return !spec.components.empty();
}

inline bool pure_wiener(const NoiseSpec& spec) {
    for (const auto& c : spec.components)
        if (!std::holds_alternative<Wiener>(c)) return false;
    return !spec.components.empty();
}

inline ComparisonMode Scenario::comparison_mode() const {
    if (optimality_mode) return *optimality_mode;
    return pure_wiener(noise) ? ComparisonMode::separated : ComparisonMode::full_information;
}

inline bool operator==(const Scenario& a, const Scenario& b) {
    using cfg::same_matrix;
    using cfg::same_schedule;
    return a.name == b.name && a.horizon == b.horizon && a.steps == b.steps && same_schedule(a.model.A, b.model.A) &&
           same_schedule(a.model.B1, b.model.B1) && same_schedule(a.model.B2, b.model.B2) &&
           same_schedule(a.model.C, b.model.C) && same_schedule(a.model.D, b.model.D) &&
           same_matrix(a.model.x0.mean, b.model.x0.mean) && same_matrix(a.model.x0.covariance, b.model.x0.covariance) &&
           a.model.independent_noise == b.model.independent_noise && same_schedule(a.cost.Q, b.cost.Q) &&
           same_schedule(a.cost.R, b.cost.R) && same_matrix(a.cost.S, b.cost.S) && a.noise == b.noise &&
           a.law == b.law && a.experiments == b.experiments && a.paths == b.paths && a.seed == b.seed &&
           a.tolerance == b.tolerance && a.perturbations == b.perturbations &&
           a.optimality_mode == b.optimality_mode && a.sigma_laws == b.sigma_laws && a.ito_seeds == b.ito_seeds &&
           a.ito_levels == b.ito_levels && a.ito_steps == b.ito_steps && a.causality_cuts == b.causality_cuts &&
           a.causality_seeds == b.causality_seeds && a.uniqueness_starts == b.uniqueness_starts &&
           a.loop_seeds == b.loop_seeds && a.martingale_bins == b.martingale_bins &&
           a.shiryaev_seeds == b.shiryaev_seeds && a.shiryaev_min_detection == b.shiryaev_min_detection &&
           a.output == b.output;
}

// ---------------------------------------------------------------------------
// Validation

namespace detail {

class IssueLog {
public:
    void add(std::string key, std::string message) { issues_.push_back({std::move(key), std::move(message)}); }
    bool has(const std::string& key) const {
        return std::any_of(issues_.begin(), issues_.end(), [&](const ValidationIssue& i) { return i.key == key; });
    }
    std::vector<ValidationIssue>& issues() { return issues_; }

private:
    std::vector<ValidationIssue> issues_;
};

inline void check_symmetric(IssueLog& log, const std::string& key, const MatrixSchedule& s, const TimeGrid& grid,
                            bool definite) {
    const int nodes = s.is_constant() ? 1 : grid.nodes();
    for (int k = 0; k < nodes; ++k) {
        const auto c = inspect_symmetric(s(grid.t(k)));
        const bool ok = c.symmetric && (definite ? c.min_eigenvalue > 0.0 : c.min_eigenvalue >= -1e-12);
        if (!ok) {
            log.add(key, std::string("not symmetric positive ") + (definite ? "definite" : "semidefinite") +
                             " at t = " + format_short(grid.t(k)) + " (smallest eigenvalue " +
                             format_short(c.min_eigenvalue) + ")");
            return;
        }
    }
}

inline bool is_const_value(const MatrixSchedule& s, const Matrix& v) {
    return s.is_constant() && cfg::same_matrix(s.coefficients().front(), v);
}

inline void check_law_spec(IssueLog& log, const std::string& key, const LawSpec& l, const Scenario& s) {
    if (!std::isfinite(l.scale)) log.add(key, "gain scale must be finite");
    if (l.kind == LawSpec::Kind::delayed) {
        if (l.inner.size() != 1) {
            log.add(key, "delayed law needs exactly one inner law");
            return;
        }
        if (!(l.delay > 0.0)) log.add(key, "delay epsilon must be positive");
        if (l.inner.front().uses(LawSpec::Kind::shiryaev)) log.add(key, "the shiryaev law cannot be delayed");
        check_law_spec(log, key, l.inner.front(), s);
    }
    if (l.kind == LawSpec::Kind::class_l && s.steps > max_kernel_steps)
        log.add(key, "class_l stores an O(N^2) kernel; needs grid.steps <= " + std::to_string(max_kernel_steps));
}

// The shiryaev law is tied to the scalar step-change plant with Q = 1, S = 0.
inline void check_shiryaev_plant(IssueLog& log, const Scenario& s) {
    const auto& m = s.model;
    Matrix b2(1, 2);
    b2 << 1.0, 0.0;
    const Matrix one = Matrix::Ones(1, 1), zero = Matrix::Zero(1, 1);
    if (!is_const_value(m.A, zero)) log.add("model.A", "shiryaev law needs A = 0");
    if (!is_const_value(m.B1, one)) log.add("model.B1", "shiryaev law needs B1 = 1");
    if (!is_const_value(m.B2, b2)) log.add("model.B2", "shiryaev law needs B2 = [1 0]");
    if (!is_const_value(m.C, one)) log.add("model.C", "shiryaev law needs C = 1");
    if (!m.D.is_constant() || m.D.rows() != 1 || m.D.cols() != 2 || m.D.coefficients().front()(0, 0) != 0.0 ||
        !(m.D.coefficients().front()(0, 1) > 0.0))
        log.add("model.D", "shiryaev law needs D = [0 sigma] with sigma > 0");
    if (!m.x0.is_deterministic() || m.x0.mean.size() != 1 || m.x0.mean(0) != 0.0)
        log.add("model.x0", "shiryaev law needs x(0) = 0");
    if (!is_const_value(s.cost.Q, one)) log.add("cost.Q", "shiryaev law assumes Q = 1");
    if (!s.cost.R.is_constant() || s.cost.R.rows() != 1 || s.cost.R.cols() != 1)
        log.add("cost.R", "shiryaev law needs a constant scalar R");
    if (!cfg::same_matrix(s.cost.S, zero)) log.add("cost.S", "shiryaev law assumes S = 0");
    const bool noise_ok = s.noise.components.size() == 2 && std::holds_alternative<StepChange>(s.noise.components[0]) &&
                          s.noise.components[1] == NoiseComponent{Wiener{1}};
    if (!noise_ok) log.add("noise", "shiryaev law needs noise = step + wiener(1)");
}

}  // namespace detail

// All issues found, each tagged with the key it concerns.
inline std::vector<ValidationIssue> validate_scenario(const Scenario& s) {
    detail::IssueLog log;
    if (s.name.empty()) log.add("name", "must not be empty");
    if (!(s.horizon > 0.0) || !std::isfinite(s.horizon)) log.add("grid.horizon", "must be positive and finite");
    if (s.steps < 1) log.add("grid.steps", "must be at least 1");
    if (s.paths < 2) log.add("paths", "must be at least 2");
    const bool grid_ok = !log.has("grid.horizon") && !log.has("grid.steps");

    // Shapes.
    const auto& m = s.model;
    const auto n = m.A.rows();
    bool shapes = true;
    auto need = [&](bool ok, const char* key, const std::string& msg) {
        if (!ok) {
            log.add(key, msg);
            shapes = false;
        }
    };
    need(n > 0 && m.A.cols() == n, "model.A", "must be a non-empty square matrix");
    need(m.B1.rows() == n && m.B1.cols() > 0, "model.B1", "must have n = " + std::to_string(n) + " rows");
    need(m.B2.rows() == n && m.B2.cols() > 0, "model.B2", "must have n = " + std::to_string(n) + " rows");
    need(m.C.cols() == n && m.C.rows() > 0, "model.C", "must have n = " + std::to_string(n) + " columns");
    need(m.D.rows() == m.C.rows() && m.D.cols() == m.B2.cols(), "model.D",
         "must be p x q = " + std::to_string(m.C.rows()) + " x " + std::to_string(m.B2.cols()));
    need(m.x0.mean.size() == n, "model.x0", "must have n = " + std::to_string(n) + " entries");
    need(m.x0.covariance.rows() == n && m.x0.covariance.cols() == n, "model.P0", "must be n x n");
    const auto mm = m.B1.cols();
    need(s.cost.Q.rows() == n && s.cost.Q.cols() == n, "cost.Q", "must be n x n");
    need(s.cost.R.rows() == mm && s.cost.R.cols() == mm, "cost.R", "must be m x m");
    need(s.cost.S.rows() == n && s.cost.S.cols() == n, "cost.S", "must be n x n");

    if (shapes && grid_ok) {
        const TimeGrid grid = s.grid();
        const auto p0 = inspect_symmetric(m.x0.covariance);
        if (!p0.symmetric || p0.min_eigenvalue < -1e-12) log.add("model.P0", "not symmetric positive semidefinite");
        try {
            check_noise(m, grid);
        } catch (const SynthesisFailure& e) {
            log.add("model.D", e.what());
        } catch (const InvalidArgument& e) {
            log.add("model.independent_noise", e.what());
        }
        detail::check_symmetric(log, "cost.Q", s.cost.Q, grid, false);
        detail::check_symmetric(log, "cost.R", s.cost.R, grid, true);
        detail::check_symmetric(log, "cost.S", MatrixSchedule::constant(s.cost.S), grid, false);
    }

    try {
        s.noise.validate();
        if (shapes && s.noise.dims() != m.B2.cols())
            log.add("noise", "has " + std::to_string(s.noise.dims()) + " dimensions, model expects q = " +
                                 std::to_string(m.B2.cols()));
    } catch (const InvalidArgument& e) {
        log.add("noise", e.what());
    }

    detail::check_law_spec(log, "law", s.law, s);
    if (s.law.uses(LawSpec::Kind::shiryaev)) detail::check_shiryaev_plant(log, s);

    // Experiments.
    if (s.experiments.empty()) log.add("experiments", "select at least one experiment");
    std::set<std::string> seen;
    for (const auto& e : s.experiments) {
        if (std::find(experiment_names().begin(), experiment_names().end(), e) == experiment_names().end())
            log.add("experiments", "unknown experiment '" + e + "'");
        else if (!seen.insert(e).second)
            log.add("experiments", "experiment '" + e + "' listed twice");
    }
    auto selected = [&](const char* e) { return seen.count(e) > 0; };
    if (selected("shiryaev") && s.law.kind != LawSpec::Kind::shiryaev)
        log.add("experiments", "the shiryaev experiment needs law = shiryaev");
    if (s.law.kind == LawSpec::Kind::shiryaev)
        for (const char* e : {"cost_decomposition", "sigma_invariance", "optimality", "ito_identity", "loop_equivalence"})
            if (selected(e)) log.add("experiments", std::string(e) + " is not defined for the shiryaev law");
    if (selected("cost_decomposition") && !unit_intensity(s.noise))
        log.add("noise", "cost_decomposition needs unit-intensity noise (Wiener or poisson(1))");
    if (selected("sigma_invariance")) {
        const auto laws = s.invariance_laws();
        if (laws.size() < 2) log.add("sigma_invariance.laws", "needs at least two laws");
        for (const auto& l : laws) {
            detail::check_law_spec(log, "sigma_invariance.laws", l, s);
            if (l.uses_state()) log.add("sigma_invariance.laws", "laws must use output feedback");
            if (l.uses(LawSpec::Kind::shiryaev)) log.add("sigma_invariance.laws", "the shiryaev law is not allowed here");
        }
    }
    if (selected("optimality")) {
        if (s.perturbations.empty()) log.add("optimality.perturbations", "needs at least one perturbation");
        for (double d : s.perturbations)
            if (!std::isfinite(d)) log.add("optimality.perturbations", "must be finite");
    }
    if (selected("ito_identity")) {
        if (s.ito_seeds < 1) log.add("ito.seeds", "must be at least 1");
        if (s.ito_levels < 1 || s.ito_levels > 8) log.add("ito.levels", "must be in 1..8");
        else if (s.ito_grid_steps() % (1 << (s.ito_levels - 1)) != 0)
            log.add("ito.steps", "must be divisible by 2^(levels - 1)");
        if (s.ito_steps < 0) log.add("ito.steps", "must be non-negative");
        if (s.law.uses(LawSpec::Kind::class_l) && s.ito_grid_steps() > max_kernel_steps)
            log.add("ito.steps", "class_l law needs at most " + std::to_string(max_kernel_steps) + " steps");
    }
    if (selected("causality")) {
        if (s.causality_seeds < 1) log.add("causality.seeds", "must be at least 1");
        for (double t : s.causality_cuts)
            if (!(t > 0.0 && t <= s.horizon)) log.add("causality.cuts", "cut times must lie in (0, T]");
    }
    if (selected("uniqueness") && s.uniqueness_starts < 2) log.add("uniqueness.starts", "must be at least 2");
    if (selected("loop_equivalence")) {
        if (s.steps > 2000) log.add("grid.steps", "loop_equivalence builds dense kernels; needs grid.steps <= 2000");
        if (s.loop_seeds < 1) log.add("loop_equivalence.seeds", "must be at least 1");
        if (shapes && !m.x0.mean.isZero(0.0)) log.add("model.x0", "loop_equivalence needs a zero-mean initial state");
    }
    if (selected("martingale") && s.martingale_bins < 1) log.add("martingale.bins", "must be at least 1");
    if (selected("shiryaev")) {
        if (s.shiryaev_seeds < 1) log.add("shiryaev.seeds", "must be at least 1");
        if (!(s.shiryaev_min_detection >= 0.0 && s.shiryaev_min_detection <= 1.0))
            log.add("shiryaev.min_detection", "must lie in [0, 1]");
    }
    const Tolerances& t = s.tolerance;
    for (auto [key, v] : {std::pair{"tolerance.ito_relative", t.ito_relative}, {"tolerance.ito_order", t.ito_order},
                          {"tolerance.pathwise", t.pathwise},               {"tolerance.picard", t.picard},
                          {"tolerance.shiryaev_rms", t.shiryaev_rms},       {"tolerance.innovation", t.innovation},
                          {"tolerance.loop_equivalence", t.loop_equivalence}})
        if (!(v >= 0.0) || !std::isfinite(v)) log.add(key, "must be a non-negative number");
    return std::move(log.issues());
}

// ---------------------------------------------------------------------------
// Parsing and serialization

namespace detail {

struct KeyHandler {
    std::function<void(Scenario&, const std::string&)> set;
    bool required = false;
};

inline std::vector<double> parse_list(const std::string& v) {
    std::vector<double> out;
    for (const auto& p : cfg::split_top(v, ','))
        if (!p.empty()) out.push_back(cfg::parse_double(p));
    return out;
}

inline int parse_count(const std::string& v) {
    const long long x = cfg::parse_int(v);
    if (x < -1000000000LL || x > 1000000000LL) throw InvalidArgument("value out of range");
    return static_cast<int>(x);
}

inline Vector parse_vector(const std::string& v) {
    const Matrix m = cfg::parse_matrix(v);
    if (m.rows() != 1 && m.cols() != 1) throw InvalidArgument("expected a vector");
    return Eigen::Map<const Vector>(m.data(), m.size());
}

inline const std::map<std::string, KeyHandler>& key_handlers() {
    using S = Scenario;
    using V = const std::string&;
    static const std::map<std::string, KeyHandler> h = {
        {"name", {[](S& s, V v) { s.name = v; }}},
        {"grid.horizon", {[](S& s, V v) { s.horizon = cfg::parse_double(v); }}},
        {"grid.steps", {[](S& s, V v) { s.steps = parse_count(v); }}},
        {"model.A", {[](S& s, V v) { s.model.A = cfg::parse_schedule(v); }, true}},
        {"model.B1", {[](S& s, V v) { s.model.B1 = cfg::parse_schedule(v); }, true}},
        {"model.B2", {[](S& s, V v) { s.model.B2 = cfg::parse_schedule(v); }, true}},
        {"model.C", {[](S& s, V v) { s.model.C = cfg::parse_schedule(v); }, true}},
        {"model.D", {[](S& s, V v) { s.model.D = cfg::parse_schedule(v); }, true}},
        {"model.x0", {[](S& s, V v) { s.model.x0.mean = parse_vector(v); }}},
        {"model.P0", {[](S& s, V v) { s.model.x0.covariance = cfg::parse_matrix(v); }}},
        {"model.independent_noise", {[](S& s, V v) { s.model.independent_noise = cfg::parse_bool(v); }}},
        {"cost.Q", {[](S& s, V v) { s.cost.Q = cfg::parse_schedule(v); }, true}},
        {"cost.R", {[](S& s, V v) { s.cost.R = cfg::parse_schedule(v); }, true}},
        {"cost.S", {[](S& s, V v) { s.cost.S = cfg::parse_matrix(v); }}},
        {"noise", {[](S& s, V v) { s.noise = cfg::parse_noise(v); }, true}},
        {"law", {[](S& s, V v) { s.law = cfg::parse_law(v); }, true}},
        {"experiments",
         {[](S& s, V v) {
              s.experiments.clear();
              for (const auto& e : cfg::split_top(v, ','))
                  if (!e.empty()) s.experiments.push_back(e);
          },
          true}},
        {"paths", {[](S& s, V v) { s.paths = parse_count(v); }}},
        {"seed",
         {[](S& s, V v) {
              const long long x = cfg::parse_int(v);
              if (x < 0) throw InvalidArgument("seed must be non-negative");
              s.seed = static_cast<std::uint64_t>(x);
          }}},
        {"output", {[](S& s, V v) { s.output = v; }}},
        {"tolerance.ito_relative", {[](S& s, V v) { s.tolerance.ito_relative = cfg::parse_double(v); }}},
        {"tolerance.ito_order", {[](S& s, V v) { s.tolerance.ito_order = cfg::parse_double(v); }}},
        {"tolerance.pathwise", {[](S& s, V v) { s.tolerance.pathwise = cfg::parse_double(v); }}},
        {"tolerance.picard", {[](S& s, V v) { s.tolerance.picard = cfg::parse_double(v); }}},
        {"tolerance.shiryaev_rms", {[](S& s, V v) { s.tolerance.shiryaev_rms = cfg::parse_double(v); }}},
        {"tolerance.innovation", {[](S& s, V v) { s.tolerance.innovation = cfg::parse_double(v); }}},
        {"tolerance.loop_equivalence", {[](S& s, V v) { s.tolerance.loop_equivalence = cfg::parse_double(v); }}},
        {"optimality.perturbations", {[](S& s, V v) { s.perturbations = parse_list(v); }}},
        {"optimality.mode",
         {[](S& s, V v) {
              if (v == "separated")
                  s.optimality_mode = ComparisonMode::separated;
              else if (v == "full_information")
                  s.optimality_mode = ComparisonMode::full_information;
              else
                  throw InvalidArgument("expected separated or full_information");
          }}},
        {"sigma_invariance.laws",
         {[](S& s, V v) {
              s.sigma_laws.clear();
              for (const auto& l : cfg::split_top(v, ',')) s.sigma_laws.push_back(cfg::parse_law(l));
          }}},
        {"ito.seeds", {[](S& s, V v) { s.ito_seeds = parse_count(v); }}},
        {"ito.levels", {[](S& s, V v) { s.ito_levels = parse_count(v); }}},
        {"ito.steps", {[](S& s, V v) { s.ito_steps = parse_count(v); }}},
        {"causality.cuts", {[](S& s, V v) { s.causality_cuts = parse_list(v); }}},
        {"causality.seeds", {[](S& s, V v) { s.causality_seeds = parse_count(v); }}},
        {"uniqueness.starts", {[](S& s, V v) { s.uniqueness_starts = parse_count(v); }}},
        {"loop_equivalence.seeds", {[](S& s, V v) { s.loop_seeds = parse_count(v); }}},
        {"martingale.bins", {[](S& s, V v) { s.martingale_bins = parse_count(v); }}},
        {"shiryaev.seeds", {[](S& s, V v) { s.shiryaev_seeds = parse_count(v); }}},
        {"shiryaev.min_detection", {[](S& s, V v) { s.shiryaev_min_detection = cfg::parse_double(v); }}},
    };
    return h;
}

}  // namespace detail

// Line-oriented `key = value` document; `#` starts a comment. Unset optional
// keys keep their defaults (grid.steps = 10^4, paths = 10^4, x0 = 0, P0 = 0,
// S = 0). Throws ValidationError listing every problem found.
inline Scenario parse_scenario(std::string_view text) {
    detail::IssueLog log;
    Scenario s;
    std::set<std::string> present;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string t = cfg::trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            log.add("line " + std::to_string(lineno), "expected 'key = value'");
            continue;
        }
        const std::string key = cfg::trim(std::string_view(t).substr(0, eq));
        const std::string value = cfg::trim(std::string_view(t).substr(eq + 1));
        const auto& handlers = detail::key_handlers();
        const auto it = handlers.find(key);
        if (it == handlers.end()) {
            log.add(key, "unknown key");
            continue;
        }
        if (!present.insert(key).second) {
            log.add(key, "set more than once");
            continue;
        }
        try {
            it->second.set(s, value);
        } catch (const Error& e) {
            log.add(key, e.what());
        }
    }
    for (const auto& [key, h] : detail::key_handlers())
        if (h.required && !present.count(key)) log.add(key, "required key is missing");
    if (!log.issues().empty()) throw ValidationError(std::move(log.issues()));

    const auto n = s.model.A.rows();
    if (!present.count("model.x0")) s.model.x0.mean = Vector::Zero(n);
    if (!present.count("model.P0")) s.model.x0.covariance = Matrix::Zero(n, n);
    if (!present.count("cost.S")) s.cost.S = Matrix::Zero(n, n);
    auto issues = validate_scenario(s);
    if (!issues.empty()) throw ValidationError(std::move(issues));
    return s;
}

// Canonical document: every key, fixed order, full-precision numbers.
inline std::string serialize_scenario(const Scenario& s) {
    std::ostringstream o;
    auto kv = [&](const std::string& k, const std::string& v) { o << k << " = " << v << '\n'; };
    auto num = [](double v) { return cfg::format_number(v); };
    kv("name", s.name);
    kv("grid.horizon", num(s.horizon));
    kv("grid.steps", std::to_string(s.steps));
    kv("model.A", cfg::format_schedule(s.model.A));
    kv("model.B1", cfg::format_schedule(s.model.B1));
    kv("model.B2", cfg::format_schedule(s.model.B2));
    kv("model.C", cfg::format_schedule(s.model.C));
    kv("model.D", cfg::format_schedule(s.model.D));
    kv("model.x0", cfg::format_matrix(s.model.x0.mean.transpose()));
    kv("model.P0", cfg::format_matrix(s.model.x0.covariance));
    kv("model.independent_noise", s.model.independent_noise ? "true" : "false");
    kv("cost.Q", cfg::format_schedule(s.cost.Q));
    kv("cost.R", cfg::format_schedule(s.cost.R));
    kv("cost.S", cfg::format_matrix(s.cost.S));
    kv("noise", cfg::format_noise(s.noise));
    kv("law", cfg::format_law(s.law));
    kv("experiments", cfg::join(s.experiments, [](const std::string& e) { return e; }));
    kv("paths", std::to_string(s.paths));
    kv("seed", std::to_string(s.seed));
    if (!s.output.empty()) kv("output", s.output);
    kv("tolerance.ito_relative", num(s.tolerance.ito_relative));
    kv("tolerance.ito_order", num(s.tolerance.ito_order));
    kv("tolerance.pathwise", num(s.tolerance.pathwise));
    kv("tolerance.picard", num(s.tolerance.picard));
    kv("tolerance.shiryaev_rms", num(s.tolerance.shiryaev_rms));
    kv("tolerance.innovation", num(s.tolerance.innovation));
    kv("tolerance.loop_equivalence", num(s.tolerance.loop_equivalence));
    if (!s.perturbations.empty()) kv("optimality.perturbations", cfg::join(s.perturbations, num));
    if (s.optimality_mode)
        kv("optimality.mode", *s.optimality_mode == ComparisonMode::separated ? "separated" : "full_information");
    if (!s.sigma_laws.empty()) kv("sigma_invariance.laws", cfg::join(s.sigma_laws, cfg::format_law));
    kv("ito.seeds", std::to_string(s.ito_seeds));
    kv("ito.levels", std::to_string(s.ito_levels));
    if (s.ito_steps > 0) kv("ito.steps", std::to_string(s.ito_steps));
    if (!s.causality_cuts.empty()) kv("causality.cuts", cfg::join(s.causality_cuts, num));
    kv("causality.seeds", std::to_string(s.causality_seeds));
    kv("uniqueness.starts", std::to_string(s.uniqueness_starts));
    kv("loop_equivalence.seeds", std::to_string(s.loop_seeds));
    kv("martingale.bins", std::to_string(s.martingale_bins));
    kv("shiryaev.seeds", std::to_string(s.shiryaev_seeds));
    kv("shiryaev.min_detection", num(s.shiryaev_min_detection));
    return o.str();
}

inline Scenario load_scenario(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot read scenario file " + file.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_scenario(buf.str());
}

// ---------------------------------------------------------------------------
// Presets

struct Preset {
    std::string name;
    std::string description;
    std::string text;
};

inline const std::vector<Preset>& presets() {
    static const std::vector<Preset> p = {
        {"lqg_scalar", "scalar LQG benchmark with Wiener noise; full experiment suite",
         R"(# Scalar LQG benchmark: unstable plant, noisy output, Gaussian x(0).
name = lqg_scalar
grid.horizon = 1
grid.steps = 1000
model.A = 0.5
model.B1 = 1
model.B2 = [1 0]
model.C = 1
model.D = [0 0.5]
model.P0 = 1
model.independent_noise = true
cost.Q = 1
cost.R = 0.1
cost.S = 1
noise = wiener(2)
law = separated_lqg
experiments = estimate_cost, cost_decomposition, sigma_invariance, optimality, ito_identity, martingale, causality, uniqueness, loop_equivalence
paths = 10000
seed = 1
sigma_invariance.laws = zero, separated_lqg, separated_lqg(0.8), class_l, delayed(separated_lqg, 0.05)
ito.steps = 10000
)"},
        {"lqg_poisson", "scalar plant driven by compensated Poisson noise under full-state feedback",
         R"(# Jump noise in the plant, Wiener noise on the output, u = K x.
name = lqg_poisson
grid.horizon = 1
grid.steps = 1000
model.A = 0.5
model.B1 = 1
model.B2 = [1 0]
model.C = 1
model.D = [0 0.5]
model.P0 = 1
model.independent_noise = true
cost.Q = 1
cost.R = 0.1
cost.S = 1
noise = poisson(1) + wiener(1)
law = state_feedback
experiments = estimate_cost, cost_decomposition, optimality, ito_identity, martingale, causality, uniqueness
paths = 10000
seed = 1
ito.steps = 10000
)"},
        {"shiryaev_step", "step-change plant dx = u dt + dv, dy = x dt + sigma dw with the Shiryaev filter law",
         R"(# v is a +-1 step at a uniform time; u = k(t) xhat with the Shiryaev estimate.
name = shiryaev_step
grid.horizon = 1
grid.steps = 10000
model.A = 0
model.B1 = 1
model.B2 = [1 0]
model.C = 1
model.D = [0 1]
model.independent_noise = true
cost.Q = 1
cost.R = 1
cost.S = 0
noise = step + wiener(1)
law = shiryaev
experiments = shiryaev, causality, uniqueness
paths = 10000
seed = 1
shiryaev.seeds = 100
)"},
    };
    return p;
}

inline const Preset& find_preset(const std::string& name) {
    for (const auto& p : presets())
        if (p.name == name) return p;
    throw InvalidArgument("unknown preset '" + name + "'");
}

inline Scenario preset_scenario(const std::string& name) { return parse_scenario(find_preset(name).text); }

// ---------------------------------------------------------------------------
// Law construction

// Synthesized objects a law may refer to, on one grid.
struct LawContext {
    std::shared_ptr<const SampledModel> model;
    std::shared_ptr<const ControlSynthesis> ctrl;
    std::shared_ptr<const FilterSynthesis> filt;  // null if the model has no usable filter
    std::shared_ptr<const GainSchedule> K;
    std::shared_ptr<const std::vector<double>> shiryaev_gain;
    double shiryaev_sigma = 0.0;
};

inline LawContext make_law_context(const Scenario& s, const TimeGrid& grid) {
    LawContext c;
    c.model = std::make_shared<const SampledModel>(sample_model(s.model, grid));
    c.ctrl = std::make_shared<const ControlSynthesis>(solve_control_riccati(s.model, s.cost, grid));
    c.K = std::make_shared<const GainSchedule>(c.ctrl->K);
    c.filt = std::make_shared<const FilterSynthesis>(solve_filter_riccati(s.model, grid));
    if (s.law.kind == LawSpec::Kind::shiryaev) {
        c.shiryaev_sigma = s.model.D(0.0)(0, 1);
        c.shiryaev_gain = std::make_shared<const std::vector<double>>(scalar_lqg_gain(s.cost.R(0.0)(0, 0), grid));
    }
    return c;
}

// Class-L rendering of the certainty-equivalent law: offset from E x(0),
// kernel from the one-step recursion of the estimate.
inline std::unique_ptr<ClassLLaw> class_l_law(const LawContext& c, double scale) {
    const SampledModel& m = *c.model;
    const TimeGrid& grid = m.grid;
    auto F = std::make_shared<VolterraKernel>(separated_lqg_kernel(m, *c.K, *c.filt, KernelForm::discrete));
    auto offset = std::make_shared<SamplePath>(grid, m.m());
    Vector e = m.x0.mean, next(m.n());
    for (int k = 0; k <= grid.steps(); ++k) {
        const auto ku = static_cast<std::size_t>(k);
        offset->at(k) = (*c.K)[ku] * e;
        const Matrix Fk = m.A[ku] + m.B1[ku] * (*c.K)[ku] - c.filt->L[ku] * m.C[ku];
        next = e + grid.dt() * (Fk * e);
        e = next;
    }
    if (scale != 1.0) {
        offset->values() *= scale;
        for (int k = 0; k < grid.nodes(); ++k)
            for (int j = 0; j <= k; ++j) F->block(k, j) *= scale;
    }
    return std::make_unique<ClassLLaw>(std::move(offset), std::move(F));
}

inline LawPtr build_law(const LawSpec& l, const LawContext& c) {
    switch (l.kind) {
        case LawSpec::Kind::zero:
            return std::make_unique<ZeroLaw>(c.model->m());
        case LawSpec::Kind::state_feedback:
            return std::make_unique<StateFeedbackLaw>(c.K, l.scale);
        case LawSpec::Kind::separated_lqg:
            return std::make_unique<SeparatedLqgLaw>(c.model, c.filt, c.K, l.scale);
        case LawSpec::Kind::class_l:
            return class_l_law(c, l.scale);
        case LawSpec::Kind::delayed:
            return std::make_unique<DelayedLaw>(build_law(l.inner.at(0), c), DelayedLaw::steps_for(l.delay, c.model->grid));
        case LawSpec::Kind::shiryaev:
            if (!c.shiryaev_gain) throw InvalidArgument("shiryaev law needs the step-change gain");
            return std::make_unique<ShiryaevLaw>(c.shiryaev_sigma, c.shiryaev_gain, c.model->grid);
    }
    throw InvalidArgument("unknown law kind");
}

inline Feedback feedback_for(const LawSpec& l) { return l.uses_state() ? Feedback::state : Feedback::output; }

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { summary, full };

inline nlohmann::ordered_json report_json(const ExperimentReport& r, ReportFormat format) {
    using J = nlohmann::ordered_json;
    auto est = [](const Estimate& e) {
        J j;
        j["name"] = e.name;
        j["value"] = e.value;
        j["se"] = e.se;
        if (e.tolerance) j["tolerance"] = *e.tolerance;
        return j;
    };
    J j;
    j["experiment"] = r.experiment;
    j["verdict"] = to_string(r.verdict);
    j["rule"] = r.rule;
    j["paths"] = r.paths;
    j["seed_first"] = r.seed_first;
    j["seed_last"] = r.seed_last;
    j["estimates"] = J::array();
    for (const auto& e : r.estimates) j["estimates"].push_back(est(e));
    if (r.violation_time) j["violation_time"] = *r.violation_time;
    if (r.violation_seed) j["violation_seed"] = *r.violation_seed;
    if (format == ReportFormat::full) {
        j["components"] = J::array();
        for (const auto& e : r.components) j["components"].push_back(est(e));
        j["notes"] = r.notes;
        j["artifacts"] = r.artifacts;
    }
    return j;
}

// Deterministic: no wall-clock fields; identical runs give identical bytes.
inline void emit_report(const ExperimentReport& r, ReportFormat format, std::ostream& out) {
    out << report_json(r, format).dump(2) << '\n';
    if (!out) throw IoError("failed writing report " + r.experiment);
}

inline void emit_report(const ExperimentReport& r, ReportFormat format, const std::filesystem::path& file) {
    std::ofstream out(file);
    if (!out) throw IoError("cannot open " + file.string() + " for writing");
    emit_report(r, format, out);
}

// ---------------------------------------------------------------------------
// Running a scenario

struct RunResult {
    std::string scenario;
    Verdict status = Verdict::fail;
    std::vector<ExperimentReport> reports;
    std::vector<std::pair<std::string, double>> timing;
    std::filesystem::path out_dir;

    // 0 pass, 2 insufficient power, 1 fail.
    int exit_code() const {
        switch (status) {
            case Verdict::pass: return 0;
            case Verdict::insufficient_power: return 2;
            case Verdict::fail: return 1;
        }
        return 1;
    }
    const ExperimentReport& report(const std::string& experiment) const {
        for (const auto& r : reports)
            if (r.experiment == experiment) return r;
        throw InvalidArgument("run has no report for " + experiment);
    }
};

struct RunOptions {
    std::optional<int> paths, steps;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    bool write_files = true;
    ReportFormat format = ReportFormat::full;
};

// Overrides are applied in a fixed order, independent of how they were given.
inline Scenario apply_overrides(Scenario s, const RunOptions& o) {
    if (o.paths) s.paths = *o.paths;
    if (o.steps) s.steps = *o.steps;
    if (o.seed) s.seed = *o.seed;
    if (o.out) s.output = *o.out;
    auto issues = validate_scenario(s);
    if (!issues.empty()) throw ValidationError(std::move(issues));
    return s;
}

namespace detail {

inline std::vector<std::uint64_t> seed_range(std::uint64_t first, int count) {
    std::vector<std::uint64_t> v;
    for (int i = 0; i < count; ++i) v.push_back(first + static_cast<std::uint64_t>(i));
    return v;
}

inline ExperimentReport run_martingale(const Scenario& s, const TimeGrid& grid) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto rep = empirical_martingale_check(s.noise, grid, s.paths, s.martingale_bins, s.seed);
    ExperimentReport r;
    r.experiment = "empirical_martingale_check";
    r.rule = "every populated cell: |E[dw | past bin]| <= 3 SE";
    r.paths = rep.paths;
    r.seed_first = s.seed;
    r.seed_last = s.seed + static_cast<std::uint64_t>(s.paths) - 1;
    r.estimates.push_back({"max |conditional mean|", rep.max_abs_conditional_mean, rep.standard_error_at_max,
                           3.0 * rep.standard_error_at_max});
    r.estimates.push_back({"max |mean| / SE", rep.max_z, 0.0, 3.0});
    for (const auto& c : rep.cells) {
        if (c.count == 0) continue;
        r.components.push_back({"cell t=" + format_short(grid.t(c.condition_node)) + " dim=" + std::to_string(c.dim) +
                                    " bin=" + std::to_string(c.bin),
                                c.mean, c.standard_error});
        if (!r.violation_time && std::abs(c.mean) > 3.0 * c.standard_error) r.violation_time = grid.t(c.condition_node);
    }
    finish(r, true, rep.pass, t0);
    return r;
}

inline ExperimentReport run_causality(const Scenario& s, const LawContext& c) {
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentReport r;
    r.experiment = "causality_check";
    r.rule = "closed-loop prefix up to each cut is bit-identical after resampling the noise beyond the cut";
    const auto seeds = seed_range(s.seed, s.causality_seeds);
    r.paths = static_cast<int>(seeds.size());
    r.seed_first = seeds.front();
    r.seed_last = seeds.back();
    std::vector<LawSpec> laws = {s.law};
    if (std::find(s.experiments.begin(), s.experiments.end(), "sigma_invariance") != s.experiments.end())
        for (const auto& l : s.invariance_laws())
            if (!(l == s.law)) laws.push_back(l);
    bool ok = true;
    for (const auto& spec : laws) {
        const LawPtr law = build_law(spec, c);
        const auto rep = causality_check(*c.model, *law, s.noise, seeds, s.cut_times(), feedback_for(spec));
        int identical = 0;
        for (const auto& cs : rep.cases) {
            identical += cs.identical ? 1 : 0;
            if (!cs.identical && !r.violation_seed) {
                r.violation_seed = cs.seed;
                r.violation_time = cs.cut_time;
            }
            if (!cs.violation.empty()) r.notes.push_back(cfg::format_law(spec) + ": " + cs.violation);
        }
        r.estimates.push_back({"identical cases [" + cfg::format_law(spec) + "]", static_cast<double>(identical), 0.0,
                               static_cast<double>(rep.cases.size())});
        ok = ok && rep.pass;
    }
    finish(r, false, ok, t0);
    return r;
}

inline ExperimentReport run_uniqueness(const Scenario& s, const LawContext& c) {
    const auto t0 = std::chrono::steady_clock::now();
    const SampledModel& m = *c.model;
    const LawPtr law = build_law(s.law, c);
    const Vector x0 = draw_initial_state(m.x0, s.seed);
    const NoisePath w = sample_noise(s.noise, m.grid, s.seed);
    const int budget = m.grid.steps() + 1;
    const auto starts = seed_range(s.seed + 1000003ULL, s.uniqueness_starts);
    const auto rep = uniqueness_check(m, *law, w, x0, budget, starts, feedback_for(s.law), s.tolerance.picard);
    ExperimentReport r;
    r.experiment = "uniqueness_check";
    r.rule = "Picard iteration from every start reaches the forward-substitution solution within " +
             format_short(s.tolerance.picard) + " (sup norm) in <= N + 1 = " + std::to_string(budget) + " iterations";
    r.paths = 1;
    r.seed_first = r.seed_last = s.seed;
    for (const auto& run : rep.runs) {
        const std::string tag = " [start " + std::to_string(run.start_seed) + "]";
        r.estimates.push_back({"iterations to tolerance" + tag, static_cast<double>(run.iterations), 0.0,
                               static_cast<double>(budget)});
        r.components.push_back({"iterations to bit identity" + tag, static_cast<double>(run.exact_iterations), 0.0});
        r.components.push_back({"final sup distance" + tag, run.final_distance, 0.0});
        if (!run.failure.empty()) r.notes.push_back(run.failure);
        if (!run.converged && !r.violation_seed) r.violation_seed = run.start_seed;
    }
    r.notes.push_back("law: " + law->name());
    finish(r, false, rep.pass, t0);
    return r;
}

inline ExperimentReport run_loop_equivalence(const Scenario& s, const LawContext& c) {
    const auto t0 = std::chrono::steady_clock::now();
    const SampledModel& m = *c.model;
    const VolterraKernel M = separated_lqg_kernel(m, *c.K, *c.filt, KernelForm::discrete);
    const ResolventLoop rl = resolvent_loop(m, M);
    const auto seeds = seed_range(s.seed, s.loop_seeds);
    ExperimentReport r;
    r.experiment = "loop_equivalence";
    r.rule = "max |y_forward - y_resolvent| <= " + format_short(s.tolerance.loop_equivalence) +
             "; bit-identical paths counted";
    r.paths = static_cast<int>(seeds.size());
    r.seed_first = seeds.front();
    r.seed_last = seeds.back();
    double worst = 0.0;
    int identical = 0;
    for (auto seed : seeds) {
        const auto in = path_inputs(m, s.noise, seed);
        SeparatedLqgLaw law(c.model, c.filt, c.K);
        const LoopSolution fwd = solve_closed_loop(m, law, in.noise, in.x0);
        const Trajectory open = simulate_open_loop(m, in.noise, SamplePath(m.grid, m.m()), in.x0);
        const SamplePath z = apply_resolvent(stack_paths(open.x, open.y), rl.R);
        const SamplePath y(m.grid, Eigen::MatrixXd(z.values().bottomRows(m.p())));
        const double d = sup_distance(fwd.y, y);
        if (d == 0.0) ++identical;
        if (d > worst) {
            worst = d;
            if (d > s.tolerance.loop_equivalence && !r.violation_seed) r.violation_seed = seed;
        }
    }
    r.estimates.push_back({"max |y_forward - y_resolvent|", worst, 0.0, s.tolerance.loop_equivalence});
    r.estimates.push_back({"bit-identical paths", static_cast<double>(identical), 0.0});
    r.notes.push_back("separated_lqg kernel in discrete one-step form");
    finish(r, false, worst <= s.tolerance.loop_equivalence, t0);
    return r;
}

struct ShiryaevRow {
    bool ok = false;
    std::string error;
    double rms = 0.0, innovation = 0.0, reconstruction = 0.0, cost = 0.0;
    bool detected = false;
    int clamps = 0;
};

inline ExperimentReport run_shiryaev(const Scenario& s, const LawContext& c, const std::filesystem::path* dir) {
    const auto t0 = std::chrono::steady_clock::now();
    const TimeGrid& grid = c.model->grid;
    const double sigma = c.shiryaev_sigma;
    const double rw = s.cost.R(0.0)(0, 0);
    const int count = s.shiryaev_seeds;
    auto rows = map_paths<ShiryaevRow>(
        count, [] { return 0; },
        [&](int&, int i) {
            ShiryaevRow row;
            try {
                const auto rep = run_step_change_scenario(sigma, rw, s.seed + static_cast<std::uint64_t>(i), grid);
                row = {true, {}, rep.oracle_rms, rep.innovation_identity_max, rep.reconstruction_max,
                       rep.cost, rep.detected, rep.clamp_events};
            } catch (const Error& e) {
                row.error = e.what();
            }
            return row;
        });
    ExperimentReport r;
    r.experiment = "shiryaev_step_change";
    r.paths = count;
    r.seed_first = s.seed;
    r.seed_last = s.seed + static_cast<std::uint64_t>(count) - 1;
    r.rule = "mean RMS |rho_filter - rho_oracle| <= " + format_short(s.tolerance.shiryaev_rms) +
             "; innovation identity and y0 reconstruction within " + format_short(s.tolerance.innovation) +
             "; rho = 0 exactly for y = 0; detection rate >= " + format_short(s.shiryaev_min_detection);
    std::vector<double> rms, cost;
    double innov = 0.0, recon = 0.0, rms_max = 0.0;
    int detected = 0, clamps = 0, failures = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (!row.ok) {
            ++failures;
            if (!r.violation_seed) r.violation_seed = s.seed + i;
            r.notes.push_back("seed " + std::to_string(s.seed + i) + ": " + row.error);
            continue;
        }
        rms.push_back(row.rms);
        cost.push_back(row.cost);
        rms_max = std::max(rms_max, row.rms);
        innov = std::max(innov, row.innovation);
        recon = std::max(recon, row.reconstruction);
        detected += row.detected ? 1 : 0;
        clamps += row.clamps;
    }
    const MeanSe mr = mean_se(rms), mc = mean_se(cost);
    const double rate = rows.empty() ? 0.0 : static_cast<double>(detected) / static_cast<double>(rows.size());

    // Symmetric fixed point: with y = 0 both hypotheses stay equally likely.
    const ShiryaevTrajectory flat = run_shiryaev_filter(SamplePath(grid, 1), sigma, *c.shiryaev_gain);
    double flat_max = 0.0;
    for (double v : flat.rho) flat_max = std::max(flat_max, std::abs(v));

    r.estimates.push_back({"mean oracle RMS", mr.mean, mr.se, s.tolerance.shiryaev_rms});
    r.estimates.push_back({"max innovation identity error", innov, 0.0, s.tolerance.innovation});
    r.estimates.push_back({"max y0 reconstruction error", recon, 0.0, s.tolerance.innovation});
    r.estimates.push_back({"max |rho| for y = 0", flat_max, 0.0, 0.0});
    r.estimates.push_back({"detection rate", rate, 0.0, s.shiryaev_min_detection});
    r.estimates.push_back({"failed paths", static_cast<double>(failures), 0.0, 0.0});
    r.components = {{"max oracle RMS", rms_max, 0.0}, {"cost", mc.mean, mc.se},
                    {"clamp events", static_cast<double>(clamps), 0.0}};
    r.notes.push_back("sigma = " + format_short(sigma) + ", R = " + format_short(rw));
    const bool ok = failures == 0 && mr.mean <= s.tolerance.shiryaev_rms && innov <= s.tolerance.innovation &&
                    recon <= s.tolerance.innovation && flat_max == 0.0 && rate >= s.shiryaev_min_detection;

    if (dir) {
        const auto rep = run_step_change_scenario(sigma, rw, s.seed, grid);
        SamplePath xhat(grid, 1), rho(grid, 1), oracle(grid, 1);
        for (int k = 0; k < grid.nodes(); ++k) {
            const auto i = static_cast<std::size_t>(k);
            xhat(0, k) = rep.filter.xhat[i];
            rho(0, k) = rep.filter.rho[i];
            oracle(0, k) = rep.oracle.rho[i];
        }
        const auto file = *dir / "shiryaev_trajectory.csv";
        std::ofstream out(file);
        if (!out) throw IoError("cannot open " + file.string());
        write_paths_csv(out, {{"x", &rep.loop.x},
                              {"y", &rep.loop.y},
                              {"u", &rep.loop.u},
                              {"xhat", &xhat},
                              {"rho", &rho},
                              {"rho_oracle", &oracle}});
        r.artifacts.push_back("shiryaev_trajectory.csv");
    }
    finish(r, false, ok, t0);
    return r;
}

inline ExperimentReport run_experiment(const std::string& name, const Scenario& s, const LawContext& c,
                                       const std::filesystem::path* dir) {
    const SampledModel& m = *c.model;
    const Feedback fb = feedback_for(s.law);
    if (name == "estimate_cost") {
        const LawPtr law = build_law(s.law, c);
        std::optional<double> target;
        if (unit_intensity(s.noise) && s.law.scale == 1.0) {
            if (s.law.kind == LawSpec::Kind::state_feedback) target = full_information_cost(m, *c.ctrl);
            if (s.law.kind == LawSpec::Kind::separated_lqg)
                target = full_information_cost(m, *c.ctrl) +
                         estimation_cost_term(sample_cost(s.cost, m.grid), *c.ctrl, *c.filt);
        }
        return estimate_cost(m, s.cost, *law, s.noise, s.paths, s.seed, fb, target);
    }
    if (name == "cost_decomposition") {
        const LawPtr law = build_law(s.law, c);
        return cost_decomposition_check(m, s.cost, *law, s.noise, s.paths, s.seed, *c.ctrl,
                                        fb == Feedback::output ? c.filt.get() : nullptr, fb);
    }
    if (name == "sigma_invariance") {
        std::vector<LawPtr> owned;
        std::vector<const ControlLaw*> laws;
        for (const auto& l : s.invariance_laws()) {
            owned.push_back(build_law(l, c));
            laws.push_back(owned.back().get());
        }
        return sigma_invariance_experiment(m, laws, s.noise, s.paths, s.seed, *c.filt, {}, Feedback::output,
                                           s.tolerance.pathwise);
    }
    if (name == "optimality")
        return optimality_comparison(m, s.cost, s.noise, s.paths, s.seed, s.perturbations, *c.ctrl, c.filt.get(),
                                     s.comparison_mode());
    if (name == "ito_identity") {
        const LawSpec spec = s.law;
        const SystemModel sys = s.model;
        LawFactory factory = [spec, sys](const SampledModel& lm, const ControlSynthesis& ctrl) -> LawPtr {
            LawContext lc;
            lc.model = std::make_shared<const SampledModel>(lm);
            lc.ctrl = std::make_shared<const ControlSynthesis>(ctrl);
            lc.K = std::make_shared<const GainSchedule>(ctrl.K);
            if (!spec.uses_state() && !spec.uses(LawSpec::Kind::zero))
                lc.filt = std::make_shared<const FilterSynthesis>(solve_filter_riccati(sys, lm.grid));
            return build_law(spec, lc);
        };
        return pathwise_ito_identity_check(s.model, s.cost, factory, s.noise, TimeGrid(s.horizon, s.ito_grid_steps()),
                                           seed_range(s.seed, s.ito_seeds), fb, s.ito_levels,
                                           s.tolerance.ito_relative, s.tolerance.ito_order);
    }
    if (name == "martingale") return run_martingale(s, m.grid);
    if (name == "causality") return run_causality(s, c);
    if (name == "uniqueness") return run_uniqueness(s, c);
    if (name == "loop_equivalence") return run_loop_equivalence(s, c);
    if (name == "shiryaev") return run_shiryaev(s, c, dir);
    throw InvalidArgument("unknown experiment '" + name + "'");
}

inline void write_text(const std::filesystem::path& file, const std::string& text) {
    std::ofstream out(file);
    if (!out) throw IoError("cannot open " + file.string() + " for writing");
    out << text;
    if (!out) throw IoError("failed writing " + file.string());
}

// Gains, filter and one closed-loop trajectory for the first seed.
inline std::vector<std::string> write_run_csv(const Scenario& s, const LawContext& c, const std::filesystem::path& dir) {
    const SampledModel& m = *c.model;
    std::vector<std::string> files;
    GainSchedule P = c.ctrl->P;
    write_schedule_csv((dir / "control_gain.csv").string(), "K", m.grid, c.ctrl->K);
    write_schedule_csv((dir / "control_riccati.csv").string(), "P", m.grid, P);
    write_schedule_csv((dir / "filter_gain.csv").string(), "L", m.grid, c.filt->L);
    write_schedule_csv((dir / "filter_riccati.csv").string(), "Sigma", m.grid, c.filt->Sigma);
    files = {"control_gain.csv", "control_riccati.csv", "filter_gain.csv", "filter_riccati.csv"};
    const LawPtr law = build_law(s.law, c);
    const auto in = path_inputs(m, s.noise, s.seed);
    const LoopSolution loop = solve_closed_loop(m, *law, in.noise, in.x0, feedback_for(s.law));
    const FilterRun fr = run_kalman_filter(m, *c.filt, loop.y, loop.u);
    const SamplePath& w = in.noise.values();
    std::ofstream out(dir / "trajectory.csv");
    if (!out) throw IoError("cannot open " + (dir / "trajectory.csv").string());
    write_paths_csv(out, {{"x", &loop.x}, {"y", &loop.y}, {"u", &loop.u}, {"xhat", &fr.xhat}, {"w", &w}});
    files.push_back("trajectory.csv");
    return files;
}

}  // namespace detail

// Runs the selected experiments in declared order. Each experiment that
// throws is recorded as a failure; the run continues with the next one.
inline RunResult run_scenario(const Scenario& scenario, const RunOptions& opts = {}) {
    const Scenario s = apply_overrides(scenario, opts);
    RunResult res;
    res.scenario = s.name;
    res.out_dir = s.output_dir();
    const std::filesystem::path* dir = opts.write_files ? &res.out_dir : nullptr;
    if (dir) {
        std::error_code ec;
        std::filesystem::create_directories(*dir, ec);
        if (ec) throw IoError("cannot create output directory " + dir->string() + ": " + ec.message());
        std::filesystem::remove(*dir / "FAILED", ec);
    }

    std::vector<std::string> shared_artifacts;
    std::optional<LawContext> ctx;
    std::string setup_error;
    try {
        ctx = make_law_context(s, s.grid());
        if (dir) shared_artifacts = detail::write_run_csv(s, *ctx, *dir);
    } catch (const Error& e) {
        setup_error = e.what();
    }

    for (const auto& name : s.experiments) {
        const auto t0 = std::chrono::steady_clock::now();
        ExperimentReport r;
        if (!ctx) {
            r.experiment = name;
            r.rule = "synthesis must succeed";
            r.notes.push_back("setup failed: " + setup_error);
        } else {
            try {
                r = detail::run_experiment(name, s, *ctx, dir);
            } catch (const Error& e) {
                r = ExperimentReport{};
                r.experiment = name;
                r.rule = "experiment must complete";
                r.verdict = Verdict::fail;
                r.notes.push_back(std::string("error: ") + e.what());
            }
        }
        for (const auto& a : shared_artifacts) r.artifacts.push_back(a);
        res.timing.emplace_back(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        res.reports.push_back(std::move(r));
    }

    bool any_fail = false, any_weak = false;
    for (const auto& r : res.reports) {
        any_fail = any_fail || r.verdict == Verdict::fail;
        any_weak = any_weak || r.verdict == Verdict::insufficient_power;
    }
    res.status = any_fail ? Verdict::fail : any_weak ? Verdict::insufficient_power : Verdict::pass;

    if (dir) {
        nlohmann::ordered_json j;
        j["scenario"] = s.name;
        j["status"] = to_string(res.status);
        j["experiments"] = nlohmann::ordered_json::array();
        for (const auto& r : res.reports) j["experiments"].push_back(report_json(r, opts.format));
        detail::write_text(*dir / "report.json", j.dump(2) + "\n");
        nlohmann::ordered_json t;
        for (const auto& [name, secs] : res.timing) t[name] = secs;
        detail::write_text(*dir / "timing.json", t.dump(2) + "\n");
        detail::write_text(*dir / "scenario.cfg", serialize_scenario(s));
        if (res.status == Verdict::fail) {
            std::string failed;
            for (const auto& r : res.reports)
                if (r.verdict == Verdict::fail) failed += r.experiment + "\n";
            detail::write_text(*dir / "FAILED", failed);
        }
    }
    return res;
}

}  // namespace sepctl
