#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <gmpxx.h>

#include "sepctl/errors.hpp"
#include "sepctl/kalman.hpp"
#include "sepctl/laws.hpp"
#include "sepctl/loop.hpp"
#include "sepctl/model.hpp"
#include "sepctl/noise.hpp"
#include "sepctl/synthesis.hpp"
#include "sepctl/transition.hpp"

namespace sepctl {

enum class Verdict { pass, insufficient_power, fail };

inline const char* to_string(Verdict v) {
    switch (v) {
        case Verdict::pass: return "pass";
        case Verdict::insufficient_power: return "insufficient-power";
        case Verdict::fail: return "fail";
    }
    return "fail";
}

// Statistical verdicts below this many paths are reported as insufficient.
inline constexpr int min_power_paths = 1000;

struct Estimate {
    Estimate() = default;
    Estimate(std::string n, double v, double s = 0.0, std::optional<double> tol = std::nullopt)
        : name(std::move(n)), value(v), se(s), tolerance(tol) {}

    std::string name;
    double value = 0.0;
    double se = 0.0;  // zero for deterministic quantities
    std::optional<double> tolerance;  // acceptance bound applied to this estimate
};

struct ExperimentReport {
    std::string experiment;
    std::string rule;
    Verdict verdict = Verdict::fail;
    int paths = 0;
    std::uint64_t seed_first = 0, seed_last = 0;
    double wall_seconds = 0.0;
    std::vector<Estimate> estimates;
    std::vector<Estimate> components;
    std::optional<double> violation_time;
    std::optional<std::uint64_t> violation_seed;
    std::vector<std::string> notes;
    std::vector<std::string> artifacts;  // per-path data files written alongside

    const Estimate& estimate(const std::string& name) const {
        for (const auto& e : estimates)
            if (e.name == name) return e;
        for (const auto& e : components)
            if (e.name == name) return e;
        throw InvalidArgument("report " + experiment + " has no estimate named " + name);
    }
    bool passed() const { return verdict == Verdict::pass; }
};

// ---------------------------------------------------------------------------
// Statistics

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
    int n = 0;
};

inline MeanSe mean_se(const std::vector<double>& v) {
    MeanSe r;
    r.n = static_cast<int>(v.size());
    if (v.empty()) return r;
    double s = 0.0;
    for (double x : v) s += x;
    r.mean = s / r.n;
    if (r.n > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - r.mean) * (x - r.mean);
        r.se = std::sqrt(ss / (r.n - 1) / r.n);
    }
    return r;
}

inline double trapezoid(const std::vector<double>& f, double dt) {
    if (f.size() < 2) return 0.0;
    double s = 0.5 * (f.front() + f.back());
    for (std::size_t i = 1; i + 1 < f.size(); ++i) s += f[i];
    return s * dt;
}

// ---------------------------------------------------------------------------
// Path-parallel map with ordered results

inline int worker_count() {
    if (const char* env = std::getenv("SEPCTL_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

// results[i] = fn(ctx, i) for i in [0, count); each worker builds its own
// context (law clones and scratch). The first failure is rethrown with its
// path index once all workers stop.
template <class Result, class MakeCtx, class Fn>
std::vector<Result> map_paths(int count, MakeCtx make_ctx, Fn fn, int workers = worker_count()) {
    std::vector<std::optional<Result>> slots(static_cast<std::size_t>(std::max(0, count)));
    workers = std::clamp(workers, 1, std::max(1, count));
    std::mutex mu;
    int failed_index = -1;
    std::string failure;
    auto body = [&](int w) {
        auto ctx = make_ctx();
        for (int i = w; i < count; i += workers) {
            {
                std::lock_guard<std::mutex> lock(mu);
                if (failed_index >= 0 && failed_index < i) return;
            }
            try {
                slots[static_cast<std::size_t>(i)].emplace(fn(ctx, i));
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(mu);
                if (failed_index < 0 || i < failed_index) {
                    failed_index = i;
                    failure = e.what();
                }
                return;
            }
        }
    };
    if (workers == 1) {
        body(0);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(body, w);
        for (auto& t : pool) t.join();
    }
    if (failed_index >= 0) throw Error("path " + std::to_string(failed_index) + " failed: " + failure);
    std::vector<Result> out;
    out.reserve(slots.size());
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

// ---------------------------------------------------------------------------
// Cost functional

struct SampledCost {
    std::vector<Matrix> Q, R;
    Matrix S;
};

inline SampledCost sample_cost(const CostSpec& cost, const TimeGrid& grid) {
    return {sample_schedule(cost.Q, grid), sample_schedule(cost.R, grid), cost.S};
}

struct PathCost {
    double state = 0.0, control = 0.0, terminal = 0.0;
    double total() const { return state + control + terminal; }
};

// int x'Qx dt + int u'Ru dt (trapezoidal) + x(T)'S x(T).
inline PathCost path_cost(const SampledCost& c, const LoopSolution& s) {
    const int n = s.x.nodes();
    const double dt = s.x.grid().dt();
    PathCost pc;
    for (int k = 0; k < n; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        const double w = (k == 0 || k == n - 1) ? 0.5 * dt : dt;
        pc.state += w * s.x.at(k).dot(c.Q[ku] * s.x.at(k));
        pc.control += w * s.u.at(k).dot(c.R[ku] * s.u.at(k));
    }
    pc.terminal = s.x.at(n - 1).dot(c.S * s.x.at(n - 1));
    return pc;
}

// int (u - K e)' R (u - K e) dt with e = x or xhat.
inline double gain_residual(const SampledCost& c, const GainSchedule& K, const SamplePath& u, const SamplePath& e) {
    const int n = u.nodes();
    const double dt = u.grid().dt();
    double r = 0.0;
    Vector d;
    for (int k = 0; k < n; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        d = u.at(k) - K[ku] * e.at(k);
        r += ((k == 0 || k == n - 1) ? 0.5 * dt : dt) * d.dot(c.R[ku] * d);
    }
    return r;
}

// E x(0)'P(0)x(0) + int tr(B2'P B2) dt: the cost of u = Kx.
inline double full_information_cost(const SampledModel& model, const ControlSynthesis& ctrl) {
    const Matrix& P0 = ctrl.P.front();
    std::vector<double> f(ctrl.P.size());
    for (std::size_t k = 0; k < f.size(); ++k)
        f[k] = (model.B2[k].transpose() * ctrl.P[k] * model.B2[k]).trace();
    return model.x0.mean.dot(P0 * model.x0.mean) + (P0 * model.x0.covariance).trace() +
           trapezoid(f, model.grid.dt());
}

inline double noise_cost_term(const SampledModel& model, const ControlSynthesis& ctrl) {
    std::vector<double> f(ctrl.P.size());
    for (std::size_t k = 0; k < f.size(); ++k)
        f[k] = (model.B2[k].transpose() * ctrl.P[k] * model.B2[k]).trace();
    return trapezoid(f, model.grid.dt());
}

// int tr(K'RK Sigma) dt with Sigma the filter error covariance.
inline double estimation_cost_term(const SampledCost& c, const ControlSynthesis& ctrl, const FilterSynthesis& filt) {
    std::vector<double> f(ctrl.K.size());
    for (std::size_t k = 0; k < f.size(); ++k)
        f[k] = (ctrl.K[k].transpose() * c.R[k] * ctrl.K[k] * filt.Sigma[k]).trace();
    return trapezoid(f, ctrl.grid.dt());
}

// Cost of u = 0: Pi' = A Pi + Pi A' + B2 B2', Pi(0) = E x(0)x(0)',
// J = int tr(Q Pi) dt + tr(S Pi(T)).
inline double open_loop_cost(const SystemModel& model, const CostSpec& cost, const TimeGrid& grid) {
    Matrix Pi = model.x0.covariance + model.x0.mean * model.x0.mean.transpose();
    auto rhs = [&](double t, const Matrix& X) -> Matrix {
        const Matrix A = model.A(t);
        const Matrix B2 = model.B2(t);
        return A * X + X * A.transpose() + B2 * B2.transpose();
    };
    std::vector<double> f(static_cast<std::size_t>(grid.nodes()));
    f[0] = (cost.Q(0.0) * Pi).trace();
    for (int k = 0; k < grid.steps(); ++k) {
        Pi = rk4_step(rhs, grid.t(k), Pi, grid.dt());
        f[static_cast<std::size_t>(k + 1)] = (cost.Q(grid.t(k + 1)) * Pi).trace();
    }
    return trapezoid(f, grid.dt()) + (cost.S * Pi).trace();
}

// ---------------------------------------------------------------------------
// Shared path plumbing

struct PathInputs {
    Vector x0;
    NoisePath noise;
};

inline PathInputs path_inputs(const SampledModel& model, const NoiseSpec& spec, std::uint64_t seed) {
    return {draw_initial_state(model.x0, seed), sample_noise(spec, model.grid, seed)};
}

namespace detail {

inline void check_noise_spec(const SampledModel& model, const NoiseSpec& spec) {
    if (spec.dims() != model.q())
        throw InvalidArgument("noise spec has " + std::to_string(spec.dims()) + " dims, model expects " +
                              std::to_string(model.q()));
}

inline void finish(ExperimentReport& r, bool statistical, bool ok, std::chrono::steady_clock::time_point t0) {
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (statistical && r.paths < min_power_paths)
        r.verdict = Verdict::insufficient_power;
    else
        r.verdict = ok ? Verdict::pass : Verdict::fail;
}

inline std::vector<LawPtr> clone_all(const std::vector<const ControlLaw*>& laws) {
    std::vector<LawPtr> out;
    for (const auto* l : laws) out.push_back(l->clone());
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// estimate_cost

inline ExperimentReport estimate_cost(const SampledModel& model, const CostSpec& cost, const ControlLaw& law,
                                      const NoiseSpec& spec, int paths, std::uint64_t seed0,
                                      Feedback fb = Feedback::output, std::optional<double> target = std::nullopt) {
    if (paths < 2) throw InvalidArgument("cost estimation needs at least 2 paths");
    detail::check_noise_spec(model, spec);
    const auto t0 = std::chrono::steady_clock::now();
    const SampledCost c = sample_cost(cost, model.grid);
    auto costs = map_paths<PathCost>(
        paths, [&] { return law.clone(); },
        [&](LawPtr& l, int i) {
            const auto in = path_inputs(model, spec, seed0 + static_cast<std::uint64_t>(i));
            return path_cost(c, solve_closed_loop(model, *l, in.noise, in.x0, fb));
        });
    std::vector<double> J, xs, us, term;
    for (const auto& pc : costs) {
        J.push_back(pc.total());
        xs.push_back(pc.state);
        us.push_back(pc.control);
        term.push_back(pc.terminal);
    }
    ExperimentReport r;
    r.experiment = "estimate_cost";
    r.paths = paths;
    r.seed_first = seed0;
    r.seed_last = seed0 + static_cast<std::uint64_t>(paths) - 1;
    const MeanSe j = mean_se(J);
    r.estimates.push_back({"J", j.mean, j.se});
    const MeanSe a = mean_se(xs), b = mean_se(us), d = mean_se(term);
    r.components = {{"state", a.mean, a.se}, {"control", b.mean, b.se}, {"terminal", d.mean, d.se}};
    bool ok = true;
    if (target) {
        r.estimates.front().tolerance = 3.0 * j.se;
        r.estimates.push_back({"target", *target, 0.0});
        r.rule = "|J - target| <= 3 SE(J)";
        ok = std::abs(j.mean - *target) <= 3.0 * j.se;
    } else {
        r.rule = "estimate only";
    }
    r.notes.push_back("law: " + law.name());
    detail::finish(r, target.has_value(), ok, t0);
    return r;
}

// ---------------------------------------------------------------------------
// cost_decomposition_check

// J = E x(0)'P(0)x(0) + E int (u - Kx)'R(u - Kx) dt + int tr(B2'P B2) dt, and
// with a filter E int (u-Kx)'R(u-Kx) = E int (u-Kxhat)'R(u-Kxhat) + int tr(K'RK Sigma).
inline ExperimentReport cost_decomposition_check(const SampledModel& model, const CostSpec& cost,
                                                 const ControlLaw& law, const NoiseSpec& spec, int paths,
                                                 std::uint64_t seed0, const ControlSynthesis& ctrl,
                                                 const FilterSynthesis* filt = nullptr,
                                                 Feedback fb = Feedback::output) {
    if (paths < 2) throw InvalidArgument("cost decomposition needs at least 2 paths");
    detail::check_noise_spec(model, spec);
    const auto t0 = std::chrono::steady_clock::now();
    const SampledCost c = sample_cost(cost, model.grid);
    struct Row {
        double J, init, resid, resid_hat;
    };
    auto rows = map_paths<Row>(
        paths, [&] { return law.clone(); },
        [&](LawPtr& l, int i) {
            const auto in = path_inputs(model, spec, seed0 + static_cast<std::uint64_t>(i));
            const LoopSolution s = solve_closed_loop(model, *l, in.noise, in.x0, fb);
            Row r{path_cost(c, s).total(), in.x0.dot(ctrl.P.front() * in.x0), gain_residual(c, ctrl.K, s.u, s.x),
                  0.0};
            if (filt) r.resid_hat = gain_residual(c, ctrl.K, s.u, run_kalman_filter(model, *filt, s.y, s.u).xhat);
            return r;
        });
    const double noise_term = noise_cost_term(model, ctrl);
    std::vector<double> J, init, resid, gap, split;
    for (const auto& r : rows) {
        J.push_back(r.J);
        init.push_back(r.init);
        resid.push_back(r.resid);
        gap.push_back(r.J - r.init - r.resid);
        split.push_back(r.resid - r.resid_hat);
    }
    ExperimentReport r;
    r.experiment = "cost_decomposition_check";
    r.paths = paths;
    r.seed_first = seed0;
    r.seed_last = seed0 + static_cast<std::uint64_t>(paths) - 1;
    const MeanSe mj = mean_se(J), mi = mean_se(init), mr = mean_se(resid), mg = mean_se(gap);
    r.estimates.push_back({"J", mj.mean, mj.se});
    r.estimates.push_back({"J - x0'P0x0 - residual", mg.mean, mg.se, 3.0 * mg.se});
    r.estimates.push_back({"int tr(B2'PB2)", noise_term, 0.0});
    r.components = {{"x0'P0x0", mi.mean, mi.se}, {"residual", mr.mean, mr.se}};
    bool ok = std::abs(mg.mean - noise_term) <= 3.0 * mg.se;
    r.rule = "|mean(J - x0'P0x0 - residual) - int tr(B2'PB2)| <= 3 SE";
    if (filt) {
        const MeanSe ms = mean_se(split);
        const double est = estimation_cost_term(c, ctrl, *filt);
        std::vector<double> rh;
        for (const auto& row : rows) rh.push_back(row.resid_hat);
        const MeanSe mh = mean_se(rh);
        r.components.push_back({"residual_hat", mh.mean, mh.se});
        r.estimates.push_back({"residual - residual_hat", ms.mean, ms.se, 3.0 * ms.se});
        r.estimates.push_back({"int tr(K'RK Sigma)", est, 0.0});
        ok = ok && std::abs(ms.mean - est) <= 3.0 * ms.se;
        r.rule += "; |mean(residual - residual_hat) - int tr(K'RK Sigma)| <= 3 SE";
    }
    r.notes.push_back("law: " + law.name());
    detail::finish(r, true, ok, t0);
    return r;
}

// ---------------------------------------------------------------------------
// sigma_invariance_experiment

inline ExperimentReport sigma_invariance_experiment(const SampledModel& model,
                                                    const std::vector<const ControlLaw*>& laws,
                                                    const NoiseSpec& spec, int paths, std::uint64_t seed0,
                                                    const FilterSynthesis& filt, std::vector<double> probe_times = {},
                                                    Feedback fb = Feedback::output, double pathwise_tol = 1e-10) {
    if (laws.size() < 2) throw InvalidArgument("sigma invariance needs at least two laws");
    if (paths < 2) throw InvalidArgument("sigma invariance needs at least 2 paths");
    detail::check_noise_spec(model, spec);
    const auto t0 = std::chrono::steady_clock::now();
    const TimeGrid& grid = model.grid;
    if (probe_times.empty()) probe_times = {0.25 * grid.horizon(), 0.5 * grid.horizon(), grid.horizon()};
    std::vector<int> probes;
    for (double t : probe_times) probes.push_back(std::clamp(grid.node_at_or_after(t), 0, grid.steps()));
    const auto n = model.n();
    const std::size_t L = laws.size(), P = probes.size();
    bool all_linear = true;
    for (const auto* l : laws) all_linear = all_linear && l->is_linear();

    struct Row {
        std::vector<Vector> err;  // [law * P + probe]
        double pathwise = 0.0;    // max over laws and nodes of |e_law - e_first|
    };
    auto rows = map_paths<Row>(
        paths, [&] { return detail::clone_all(laws); },
        [&](std::vector<LawPtr>& ls, int i) {
            const auto in = path_inputs(model, spec, seed0 + static_cast<std::uint64_t>(i));
            Row row;
            Eigen::MatrixXd first;
            for (std::size_t a = 0; a < L; ++a) {
                const LoopSolution s = solve_closed_loop(model, *ls[a], in.noise, in.x0, fb);
                const FilterRun fr = run_kalman_filter(model, filt, s.y, s.u);
                const Eigen::MatrixXd e = s.x.values() - fr.xhat.values();
                if (a == 0)
                    first = e;
                else
                    row.pathwise = std::max(row.pathwise, (e - first).cwiseAbs().maxCoeff());
                for (int pr : probes) row.err.push_back(e.col(pr));
            }
            return row;
        });

    ExperimentReport r;
    r.experiment = "sigma_invariance_experiment";
    r.paths = paths;
    r.seed_first = seed0;
    r.seed_last = seed0 + static_cast<std::uint64_t>(paths) - 1;
    r.rule = "||Sigma_a(t) - Sigma_b(t)||_F <= 3 combined SE at every probe";
    bool ok = true;

    // Second moments of x - xhat (zero mean) per law and probe.
    for (std::size_t pr = 0; pr < P; ++pr) {
        const double tp = grid.t(probes[pr]);
        for (std::size_t a = 0; a < L; ++a) {
            std::vector<double> tr;
            for (const auto& row : rows) tr.push_back(row.err[a * P + pr].squaredNorm());
            const MeanSe m = mean_se(tr);
            r.components.push_back({"tr Sigma[" + laws[a]->name() + "](" + detail::format_short(tp) + ")", m.mean, m.se});
        }
        r.components.push_back({"tr Sigma_filter(" + detail::format_short(tp) + ")",
                                filt.Sigma[static_cast<std::size_t>(probes[pr])].trace(), 0.0});
        for (std::size_t a = 0; a < L; ++a)
            for (std::size_t b = a + 1; b < L; ++b) {
                // Entry-wise SE of the per-path difference of outer products.
                Matrix mean = Matrix::Zero(n, n), sq = Matrix::Zero(n, n);
                for (const auto& row : rows) {
                    const Matrix d = row.err[a * P + pr] * row.err[a * P + pr].transpose() -
                                     row.err[b * P + pr] * row.err[b * P + pr].transpose();
                    mean += d;
                    sq += d.cwiseProduct(d);
                }
                mean /= paths;
                const Matrix var = ((sq / paths - mean.cwiseProduct(mean)) * (paths / (paths - 1.0))).cwiseMax(0.0);
                const double se = std::sqrt(var.sum() / paths);
                const double diff = mean.norm();
                r.estimates.push_back({"||Sigma[" + laws[a]->name() + "] - Sigma[" + laws[b]->name() + "]||_F(" +
                                           detail::format_short(tp) + ")",
                                       diff, se, 3.0 * se});
                if (diff > 3.0 * se) {
                    if (ok) r.violation_time = tp;
                    ok = false;
                }
            }
    }
    double pathwise = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].pathwise > pathwise) pathwise = rows[i].pathwise;
        if (all_linear && rows[i].pathwise > pathwise_tol && !r.violation_seed)
            r.violation_seed = seed0 + static_cast<std::uint64_t>(i);
    }
    r.estimates.push_back({"max pathwise |e_a - e_b|", pathwise, 0.0});
    if (all_linear) {
        r.estimates.back().tolerance = pathwise_tol;
        r.rule += "; per-path x - xhat agree within " + detail::format_short(pathwise_tol) + " (linear laws)";
        ok = ok && pathwise <= pathwise_tol;
    }
    std::string names;
    for (const auto* l : laws) names += (names.empty() ? "" : ", ") + l->name();
    r.notes.push_back("laws: " + names);
    detail::finish(r, true, ok, t0);
    return r;
}

// ---------------------------------------------------------------------------
// optimality_comparison

enum class ComparisonMode { separated, full_information };

// J((1 + delta) K) - J(K) with common random numbers; passes iff every
// detuned law is worse by more than 3 SE of the paired difference (delta = 0:
// difference within 3 SE of zero).
inline ExperimentReport optimality_comparison(const SampledModel& model, const CostSpec& cost,
                                              const NoiseSpec& spec, int paths, std::uint64_t seed0,
                                              const std::vector<double>& perturbations,
                                              const ControlSynthesis& ctrl, const FilterSynthesis* filt,
                                              ComparisonMode mode) {
    if (perturbations.empty()) throw InvalidArgument("optimality comparison needs perturbations");
    if (mode == ComparisonMode::separated && !filt) throw InvalidArgument("separated comparison needs a filter");
    detail::check_noise_spec(model, spec);
    const auto t0 = std::chrono::steady_clock::now();
    const SampledCost c = sample_cost(cost, model.grid);
    auto K = std::make_shared<const GainSchedule>(ctrl.K);
    auto sm = std::make_shared<const SampledModel>(model);
    std::shared_ptr<const FilterSynthesis> fs = filt ? std::make_shared<const FilterSynthesis>(*filt) : nullptr;
    auto make = [&](double scale) -> LawPtr {
        if (mode == ComparisonMode::separated) return std::make_unique<SeparatedLqgLaw>(sm, fs, K, scale);
        return std::make_unique<StateFeedbackLaw>(K, scale);
    };
    const Feedback fb = mode == ComparisonMode::separated ? Feedback::output : Feedback::state;
    std::vector<const ControlLaw*> protos;
    std::vector<LawPtr> owned;
    owned.push_back(make(1.0));
    for (double d : perturbations) owned.push_back(make(1.0 + d));
    for (auto& l : owned) protos.push_back(l.get());

    auto rows = map_paths<std::vector<double>>(
        paths, [&] { return detail::clone_all(protos); },
        [&](std::vector<LawPtr>& ls, int i) {
            const auto in = path_inputs(model, spec, seed0 + static_cast<std::uint64_t>(i));
            std::vector<double> J;
            for (auto& l : ls) J.push_back(path_cost(c, solve_closed_loop(model, *l, in.noise, in.x0, fb)).total());
            return J;
        });

    ExperimentReport r;
    r.experiment = "optimality_comparison";
    r.paths = paths;
    r.seed_first = seed0;
    r.seed_last = seed0 + static_cast<std::uint64_t>(paths) - 1;
    r.rule = "J((1+d)K) - J(K) > 3 SE(difference) for d != 0; |difference| <= 3 SE for d = 0";
    std::vector<double> base;
    for (const auto& row : rows) base.push_back(row[0]);
    const MeanSe mb = mean_se(base);
    r.estimates.push_back({"J(K)", mb.mean, mb.se});
    bool ok = true;
    for (std::size_t p = 0; p < perturbations.size(); ++p) {
        std::vector<double> Jp, diff;
        for (const auto& row : rows) {
            Jp.push_back(row[p + 1]);
            diff.push_back(row[p + 1] - row[0]);
        }
        const MeanSe mp = mean_se(Jp), md = mean_se(diff);
        const std::string tag = detail::format_short(1.0 + perturbations[p]);
        r.components.push_back({"J(" + tag + "K)", mp.mean, mp.se});
        r.estimates.push_back({"J(" + tag + "K) - J(K)", md.mean, md.se, 3.0 * md.se});
        const bool good = perturbations[p] == 0.0 ? std::abs(md.mean) <= 3.0 * md.se : md.mean > 3.0 * md.se;
        ok = ok && good;
    }
    r.notes.push_back(mode == ComparisonMode::separated ? "mode: separated (Kalman estimate)"
                                                        : "mode: full information");
    detail::finish(r, true, ok, t0);
    return r;
}

// ---------------------------------------------------------------------------
// pathwise_ito_identity_check

// Per-path terms of
//   x(T)'Sx(T) + int x'Qx + u'Ru dt
//     = x(0)'P(0)x(0) + int (u-Kx)'R(u-Kx) dt + int tr(P d[v,v'])
//       + 2 int x(t-)' P B2 dw
// with v = B2 w, evaluated with left limits and the pathwise quadratic
// variation of w (jumps enter through [w,w']).
struct ItoTerms {
    double lhs = 0.0;
    double initial = 0.0, residual = 0.0, quadratic_variation = 0.0, stochastic = 0.0;
    double rhs() const { return initial + residual + quadratic_variation + stochastic; }
    double relative_mismatch() const {
        const double scale = std::max(std::abs(lhs), 1e-300);
        return std::abs(lhs - rhs()) / scale;
    }
};

inline ItoTerms ito_terms(const SampledModel& model, const SampledCost& c, const ControlSynthesis& ctrl,
                          const NoisePath& noise, const LoopSolution& s) {
    ItoTerms t;
    t.lhs = path_cost(c, s).total();
    t.initial = s.x.at(0).dot(ctrl.P.front() * s.x.at(0));
    t.residual = gain_residual(c, ctrl.K, s.u, s.x);
    for (int k = 0; k < model.grid.steps(); ++k) {
        const auto ku = static_cast<std::size_t>(k);
        const Matrix& P = ctrl.P[ku];
        const Matrix& B2 = model.B2[ku];
        t.quadratic_variation += (P * B2 * noise.quadratic_variation_increment(k) * B2.transpose()).trace();
        t.stochastic += 2.0 * s.x.at(k).dot(P * (B2 * noise.increment(k)));
    }
    return t;
}

// Jump remainder sum_s [x(s)'P x(s) - x(s-)'P x(s-) - 2 x(s-)'P Dx_s - Dx_s'P Dx_s]
// over jump nodes, in exact rational arithmetic with Dx_s = x(s) - x(s-).
inline mpq_class jump_remainder(const ControlSynthesis& ctrl, const NoisePath& noise, const SamplePath& x) {
    std::vector<int> nodes;
    for (const auto& j : noise.jumps())
        if (nodes.empty() || nodes.back() != j.node) nodes.push_back(j.node);
    const auto n = x.dim();
    mpq_class f = 0;
    std::vector<mpq_class> xs(static_cast<std::size_t>(n)), xm(xs), dx(xs);
    for (int node : nodes) {
        const Matrix& P = ctrl.P[static_cast<std::size_t>(node)];
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto iu = static_cast<std::size_t>(i);
            xs[iu] = mpq_class(x(i, node));
            xm[iu] = mpq_class(x(i, node - 1));
            dx[iu] = xs[iu] - xm[iu];
        }
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j) {
                const auto iu = static_cast<std::size_t>(i), ju = static_cast<std::size_t>(j);
                const mpq_class p(P(i, j));
                f += p * (xs[iu] * xs[ju] - xm[iu] * xm[ju] - 2 * xm[iu] * dx[ju] - dx[iu] * dx[ju]);
            }
    }
    return f;
}

struct ItoLevel {
    int steps = 0;
    double dt = 0.0;
    double max_relative_mismatch = 0.0;
    double mean_relative_mismatch = 0.0;
};

// Builds a law for a grid from the sampled model and the control synthesis on
// that grid.
using LawFactory = std::function<LawPtr(const SampledModel&, const ControlSynthesis&)>;

inline ExperimentReport pathwise_ito_identity_check(const SystemModel& model, const CostSpec& cost,
                                                    const LawFactory& make_law, const NoiseSpec& spec,
                                                    const TimeGrid& grid, const std::vector<std::uint64_t>& seeds,
                                                    Feedback fb = Feedback::state, int levels = 3,
                                                    double tolerance = 0.01, double min_order = 0.8) {
    if (seeds.empty()) throw InvalidArgument("identity check needs seeds");
    if (levels < 1) throw InvalidArgument("identity check needs at least one grid level");
    const auto t0 = std::chrono::steady_clock::now();
    struct Level {
        TimeGrid grid;
        SampledModel model;
        ControlSynthesis ctrl;
        SampledCost cost;
        int factor;
    };
    std::vector<Level> lv;
    for (int l = 0; l < levels; ++l) {
        const int f = 1 << l;
        if (grid.steps() % f != 0) throw InvalidArgument("grid steps must be divisible by 2^(levels-1)");
        const TimeGrid g(grid.horizon(), grid.steps() / f);
        lv.push_back({g, sample_model(model, g), solve_control_riccati(model, cost, g), sample_cost(cost, g), f});
    }
    detail::check_noise_spec(lv.front().model, spec);

    struct Row {
        std::vector<double> mismatch;  // per level
        double stochastic = 0.0;       // finest level
        bool exact_zero = true;
        int jumps = 0;
    };
    const int count = static_cast<int>(seeds.size());
    auto rows = map_paths<Row>(
        count, [] { return 0; },
        [&](int&, int i) {
            const auto seed = seeds[static_cast<std::size_t>(i)];
            const Vector x0 = draw_initial_state(model.x0, seed);
            const NoisePath fine = sample_noise(spec, grid, seed);
            Row row;
            row.jumps = static_cast<int>(fine.jumps().size());
            for (const auto& L : lv) {
                const NoisePath w = L.factor == 1 ? fine : fine.coarsen(L.factor);
                auto law = make_law(L.model, L.ctrl);
                const LoopSolution s = solve_closed_loop(L.model, *law, w, x0, fb);
                const ItoTerms t = ito_terms(L.model, L.cost, L.ctrl, w, s);
                row.mismatch.push_back(t.relative_mismatch());
                if (L.factor == 1) {
                    row.stochastic = t.stochastic;
                    row.exact_zero = jump_remainder(L.ctrl, w, s.x) == 0;
                }
            }
            return row;
        });

    ExperimentReport r;
    r.experiment = "pathwise_ito_identity_check";
    r.paths = count;
    r.seed_first = seeds.front();
    r.seed_last = seeds.back();
    r.rule = "max per-path relative mismatch <= " + detail::format_short(tolerance) +
             " on the finest grid; observed refinement order >= " + detail::format_short(min_order) +
             "; jump remainder exactly 0 on every path";
    std::vector<ItoLevel> summary;
    bool ok = true;
    for (std::size_t l = 0; l < lv.size(); ++l) {
        ItoLevel s{lv[l].grid.steps(), lv[l].grid.dt(), 0.0, 0.0};
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const double m = rows[i].mismatch[l];
            s.mean_relative_mismatch += m / count;
            if (m > s.max_relative_mismatch) {
                s.max_relative_mismatch = m;
                if (l == 0 && m > tolerance && !r.violation_seed) r.violation_seed = seeds[i];
            }
        }
        summary.push_back(s);
        r.components.push_back({"mean relative mismatch (N=" + std::to_string(s.steps) + ")", s.mean_relative_mismatch, 0.0});
        r.components.push_back({"max relative mismatch (N=" + std::to_string(s.steps) + ")", s.max_relative_mismatch, 0.0});
    }
    r.estimates.push_back({"max relative mismatch", summary.front().max_relative_mismatch, 0.0, tolerance});
    ok = summary.front().max_relative_mismatch <= tolerance;
    if (lv.size() > 1) {
        // Least-squares slope of log2(mean mismatch) against log2(dt).
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        const double m = static_cast<double>(summary.size());
        for (const auto& s : summary) {
            const double x = std::log2(s.dt), y = std::log2(std::max(s.mean_relative_mismatch, 1e-300));
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        const double order = (m * sxy - sx * sy) / (m * sxx - sx * sx);
        r.estimates.push_back({"observed order", order, 0.0, min_order});
        ok = ok && (summary.front().mean_relative_mismatch == 0.0 || order >= min_order);
    }
    std::vector<double> stoch;
    bool zero = true;
    int jumps = 0;
    for (const auto& row : rows) {
        stoch.push_back(row.stochastic);
        zero = zero && row.exact_zero;
        jumps += row.jumps;
    }
    const MeanSe ms = mean_se(stoch);
    r.estimates.push_back({"mean 2 int x(t-)'P B2 dw", ms.mean, ms.se});
    r.estimates.push_back({"jump remainder exactly zero", zero ? 1.0 : 0.0, 0.0});
    r.components.push_back({"logged jumps", static_cast<double>(jumps), 0.0});
    ok = ok && zero;
    detail::finish(r, false, ok, t0);
    return r;
}

}  // namespace sepctl
