#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sepctl/errors.hpp"
#include "sepctl/laws.hpp"
#include "sepctl/model.hpp"
#include "sepctl/noise.hpp"
#include "sepctl/path.hpp"
#include "sepctl/random.hpp"
#include "sepctl/simulate.hpp"
#include "sepctl/synthesis.hpp"
#include "sepctl/transition.hpp"
#include "sepctl/volterra.hpp"

namespace sepctl {

// What the law observes: the output y (default) or the full state x.
enum class Feedback { output, state };

struct LoopSolution {
    SamplePath x, y, u;
};

inline SamplePath stack_paths(const SamplePath& a, const SamplePath& b) {
    if (!(a.grid() == b.grid())) throw InvalidArgument("cannot stack paths on different grids");
    Eigen::MatrixXd v(a.dim() + b.dim(), a.nodes());
    v << a.values(), b.values();
    return SamplePath(a.grid(), std::move(v));
}

inline SamplePath loop_state(const LoopSolution& s) { return stack_paths(s.x, s.y); }

namespace detail {

inline Eigen::Index observed_dim(const SampledModel& model, Feedback fb) {
    return fb == Feedback::output ? model.p() : model.n();
}

inline void check_law(const SampledModel& model, const ControlLaw& law) {
    if (law.input_dim() != model.m())
        throw InvalidArgument("law " + law.name() + " produces " + std::to_string(law.input_dim()) +
                              " inputs, model expects " + std::to_string(model.m()));
}

}  // namespace detail

// Forward substitution of z = z0 + g pi H z: at node k the law sees the
// observations up to t_k, then the plant takes one Ito step.
inline LoopSolution solve_closed_loop(const SampledModel& model, ControlLaw& law, const NoisePath& noise,
                                      const Vector& x0, Feedback fb = Feedback::output) {
    check_noise_matches(model, noise);
    detail::check_law(model, law);
    if (x0.size() != model.n()) throw InvalidArgument("initial state has the wrong dimension");
    const TimeGrid& grid = model.grid;
    LoopSolution s{SamplePath(grid, model.n()), SamplePath(grid, model.p()), SamplePath(grid, model.m())};
    s.x.at(0) = x0;
    const Eigen::MatrixXd& obs = fb == Feedback::output ? s.y.values() : s.x.values();
    PlantStepper stepper(model);
    law.reset();
    for (int k = 0; k <= grid.steps(); ++k) {
        law.compute(k, ObservationHistory(obs, k), s.u.at(k));
        if (!s.u.at(k).allFinite()) throw NumericalBlowup("law " + law.name() + " produced a non-finite input", k);
        if (k == grid.steps()) break;
        stepper.step(k, s.x.at(k), s.y.at(k), s.u.at(k), noise.increment(k), s.x.at(k + 1), s.y.at(k + 1));
        if (!s.x.at(k + 1).allFinite() || !s.y.at(k + 1).allFinite())
            throw NumericalBlowup("closed loop produced a non-finite state", k + 1);
    }
    return s;
}

// u = pi(obs) for a complete observation path.
inline SamplePath apply_law(ControlLaw& law, const SamplePath& obs) {
    SamplePath u(obs.grid(), law.input_dim());
    law.reset();
    for (int k = 0; k < obs.nodes(); ++k) law.compute(k, ObservationHistory(obs.values(), k), u.at(k));
    return u;
}

// Input-driven part of the output, H g u, with zero noise and x(0) = 0.
inline SamplePath control_response(const SampledModel& model, const SamplePath& u) {
    return simulate_open_loop(model, NoisePath::zero(model.grid, model.q()), u, Vector::Zero(model.n())).y;
}

// y0 = (1 - H g pi) y for an output-feedback law.
inline SamplePath remove_control(const SampledModel& model, ControlLaw& law, const SamplePath& y) {
    detail::check_law(model, law);
    const SamplePath u = apply_law(law, y);
    const SamplePath yu = control_response(model, u);
    return SamplePath(y.grid(), y.values() - yu.values());
}

// y = (1 - H g pi)^{-1} y0 by forward substitution on the uncontrolled output.
inline SamplePath solve_loop_from_output(const SampledModel& model, ControlLaw& law, const SamplePath& y0) {
    detail::check_law(model, law);
    const TimeGrid& grid = model.grid;
    SamplePath y(grid, model.p()), e(grid, model.n()), c(grid, model.p());
    SamplePath u(grid, model.m());
    const Vector zero_noise = Vector::Zero(model.q());
    PlantStepper stepper(model);
    law.reset();
    for (int k = 0; k <= grid.steps(); ++k) {
        y.at(k) = y0.at(k) + c.at(k);
        law.compute(k, ObservationHistory(y.values(), k), u.at(k));
        if (k == grid.steps()) break;
        stepper.step(k, e.at(k), c.at(k), u.at(k), zero_noise, e.at(k + 1), c.at(k + 1));
    }
    return y;
}

// ---------------------------------------------------------------------------
// Causality: resample the noise after a cut and compare the prefixes.

struct CausalityCase {
    std::uint64_t seed = 0;
    int cut_step = 0;
    double cut_time = 0.0;
    bool identical = false;
    int first_mismatch_node = -1;
    std::string violation;  // set when the law read a future node
};

struct CausalityReport {
    std::string law;
    std::vector<CausalityCase> cases;
    bool pass = false;
};

inline CausalityReport causality_check(const SampledModel& model, const ControlLaw& law, const NoiseSpec& spec,
                                       const std::vector<std::uint64_t>& seeds,
                                       const std::vector<double>& cut_times, Feedback fb = Feedback::output) {
    if (seeds.empty() || cut_times.empty()) throw InvalidArgument("causality check needs seeds and cut times");
    CausalityReport rep{law.name(), {}, true};
    const TimeGrid& grid = model.grid;
    for (auto seed : seeds)
        for (double tc : cut_times) {
            CausalityCase c;
            c.seed = seed;
            c.cut_step = std::clamp(grid.node_at_or_after(tc), 0, grid.steps());
            c.cut_time = grid.t(c.cut_step);
            const Vector x0 = draw_initial_state(model.x0, seed);
            const NoisePath w = sample_noise(spec, grid, seed);
            const NoisePath w2 = sample_noise(spec, grid, seed, Resample{c.cut_step, splitmix64(seed ^ 0x5eedcafeULL)});
            try {
                auto a = law.clone();
                auto b = law.clone();
                const LoopSolution s1 = solve_closed_loop(model, *a, w, x0, fb);
                const LoopSolution s2 = solve_closed_loop(model, *b, w2, x0, fb);
                c.identical = true;
                for (int k = 0; k <= c.cut_step; ++k)
                    if (s1.x.at(k) != s2.x.at(k) || s1.y.at(k) != s2.y.at(k) || s1.u.at(k) != s2.u.at(k)) {
                        c.identical = false;
                        c.first_mismatch_node = k;
                        break;
                    }
            } catch (const CausalityViolation& e) {
                c.violation = e.what();
            }
            rep.pass = rep.pass && c.identical;
            rep.cases.push_back(std::move(c));
        }
    return rep;
}

// ---------------------------------------------------------------------------
// Uniqueness: Picard iteration from arbitrary starting paths.

struct PicardRun {
    std::uint64_t start_seed = 0;
    int iterations = -1;        // first iterate within tolerance of forward substitution
    int exact_iterations = -1;  // first iterate bit-identical to it
    double final_distance = std::numeric_limits<double>::infinity();
    bool converged = false;
    std::string failure;
};

struct UniquenessReport {
    std::string law;
    int budget = 0;
    double tolerance = 1e-8;
    std::vector<PicardRun> runs;
    bool pass = false;
};

// Starting guess: x(0), y(0) = 0 followed by independent Gaussian steps of
// variance dt, so every start is a plausible rough path.
inline SamplePath random_loop_start(const SampledModel& model, const Vector& x0, std::uint64_t seed) {
    const TimeGrid& grid = model.grid;
    SamplePath z(grid, model.n() + model.p());
    Engine rng = make_engine(seed, streams::test_data);
    std::normal_distribution<double> gauss;
    const double sd = std::sqrt(grid.dt());
    z.at(0).head(model.n()) = x0;
    for (int k = 0; k < grid.steps(); ++k)
        for (Eigen::Index i = 0; i < z.dim(); ++i) z(i, k + 1) = z(i, k) + sd * gauss(rng);
    return z;
}

inline UniquenessReport uniqueness_check(const SampledModel& model, const ControlLaw& law, const NoisePath& noise,
                                         const Vector& x0, int iterations,
                                         const std::vector<std::uint64_t>& start_seeds,
                                         Feedback fb = Feedback::output, double tolerance = 1e-8) {
    if (start_seeds.size() < 2) throw InvalidArgument("uniqueness check needs at least two starts");
    UniquenessReport rep{law.name(), iterations, tolerance, {}, true};
    auto ref_law = law.clone();
    const LoopSolution ref = solve_closed_loop(model, *ref_law, noise, x0, fb);
    const SamplePath zref = loop_state(ref);
    const auto n = model.n(), p = model.p();

    for (auto seed : start_seeds) {
        PicardRun run;
        run.start_seed = seed;
        SamplePath z = random_loop_start(model, x0, seed);
        auto l = law.clone();
        try {
            for (int it = 1; it <= iterations; ++it) {
                const SamplePath obs = fb == Feedback::output
                                           ? SamplePath(model.grid, Eigen::MatrixXd(z.values().bottomRows(p)))
                                           : SamplePath(model.grid, Eigen::MatrixXd(z.values().topRows(n)));
                const SamplePath u = apply_law(*l, obs);
                const Trajectory tr = simulate_open_loop(model, noise, u, x0);
                z = stack_paths(tr.x, tr.y);
                run.final_distance = sup_distance(z, zref);
                if (run.iterations < 0 && run.final_distance <= tolerance) run.iterations = it;
                if (z == zref) {
                    run.exact_iterations = it;
                    break;
                }
            }
        } catch (const Error& e) {
            run.failure = e.what();
        }
        run.converged = run.iterations > 0 && run.failure.empty();
        rep.pass = rep.pass && run.converged;
        rep.runs.push_back(std::move(run));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Linear laws as Volterra kernels.

enum class KernelForm {
    discrete,   // one-step products of the Euler recursion used by the loop
    continuous  // transition matrix of A + B1 K - L C from the 4-stage integrator
};

// M(t_k, t_j) = K(t_k) Psi(t_k, t_{j+1}) L(t_j) for j < k: the certainty
// equivalent law as u_k = sum_{j<k} M_kj dy_j (zero initial estimate).
inline VolterraKernel separated_lqg_kernel(const SampledModel& model, const GainSchedule& K,
                                           const FilterSynthesis& filt, KernelForm form = KernelForm::discrete) {
    const TimeGrid& grid = model.grid;
    const auto n = model.n(), m = model.m(), p = model.p();
    const int N = grid.steps();
    const double dt = grid.dt();
    VolterraKernel M(grid, m, p);
    std::vector<Matrix> F(static_cast<std::size_t>(N + 1));
    for (int k = 0; k <= N; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        F[ku] = model.A[ku] + model.B1[ku] * K[ku] - filt.L[ku] * model.C[ku];
    }
    if (form == KernelForm::discrete) {
        Matrix Y(n, p), next(n, p);
        for (int j = 0; j < N; ++j) {
            Y = filt.L[static_cast<std::size_t>(j)];
            for (int k = j + 1; k <= N; ++k) {
                const auto ku = static_cast<std::size_t>(k);
                M.block(k, j) = K[ku] * Y;
                next.noalias() = F[ku] * Y;
                Y += dt * next;
            }
        }
    } else {
        auto rhs = [&](double t, const Matrix& X) -> Matrix {
            const int k = std::clamp(static_cast<int>(std::floor(t / dt + 1e-9)), 0, N);
            const double w = std::clamp(t / dt - k, 0.0, 1.0);
            const Matrix Fk = k < N ? Matrix((1.0 - w) * F[static_cast<std::size_t>(k)] +
                                             w * F[static_cast<std::size_t>(k + 1)])
                                    : F[static_cast<std::size_t>(N)];
            return Fk * X;
        };
        for (int j = 0; j < N; ++j) {
            Matrix Y = filt.L[static_cast<std::size_t>(j)];
            for (int k = j + 1; k <= N; ++k) {
                Y = rk4_step(rhs, grid.t(k - 1), Y, dt);
                M.block(k, j) = K[static_cast<std::size_t>(k)] * Y;
            }
        }
    }
    return M;
}

// Kernel Q of the discrete loop dz = dz0 + dt sum_{j<k} Q_kj dz_j for a
// strictly causal output-feedback kernel M (m x p). Q acts on the y part
// of dz only and has a zero diagonal.
inline VolterraKernel loop_kernel(const SampledModel& model, const VolterraKernel& M) {
    const TimeGrid& grid = model.grid;
    if (!(M.grid() == grid) || M.block_rows() != model.m() || M.block_cols() != model.p())
        throw InvalidArgument("law kernel does not match the model");
    const auto n = model.n(), p = model.p(), d = n + p;
    const int N = grid.steps();
    const double dt = grid.dt();
    VolterraKernel Q(grid, d, d);
    Matrix X(n, p), next(n, p), um(model.m(), p);
    for (int j = 0; j < N; ++j) {
        X.setZero();
        for (int k = j + 1; k <= N; ++k) {
            const auto ku = static_cast<std::size_t>(k);
            const auto km = static_cast<std::size_t>(k - 1);
            um = M.block(k - 1, j);
            next.noalias() = model.A[km] * X;
            X += dt * next;
            X.noalias() += dt * model.B1[km] * um;
            auto q = Q.block(k, j);
            q.topRightCorner(n, p).noalias() = model.A[ku] * X;
            q.topRightCorner(n, p).noalias() += model.B1[ku] * M.block(k, j);
            q.bottomRightCorner(p, p).noalias() = model.C[ku] * X;
        }
    }
    return Q;
}

// y-part of apply_resolvent(z0, resolvent(loop_kernel(M))).
struct ResolventLoop {
    VolterraKernel Q;
    VolterraKernel R;
};

inline ResolventLoop resolvent_loop(const SampledModel& model, const VolterraKernel& M) {
    VolterraKernel Q = loop_kernel(model, M);
    VolterraKernel R = volterra_resolvent(Q);
    return {std::move(Q), std::move(R)};
}

}  // namespace sepctl
