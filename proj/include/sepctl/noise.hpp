#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "sepctl/errors.hpp"
#include "sepctl/grid.hpp"
#include "sepctl/path.hpp"
#include "sepctl/random.hpp"

namespace sepctl {

// ---------------------------------------------------------------------------
// Noise descriptions

struct Wiener {
    int dims = 1;
    friend bool operator==(const Wiener&, const Wiener&) = default;
};

// N(t) - rate * t for a unit-jump Poisson counter N.
struct CompensatedPoisson {
    double rate = 1.0;
    friend bool operator==(const CompensatedPoisson&, const CompensatedPoisson&) = default;
};

// dw = drift * w dt + volatility * w dW, w(0) = 1. A nonzero drift is only a
// martingale when it is zero, so it must be enabled explicitly.
struct GbmMartingale {
    double volatility = 0.2;
    double drift = 0.0;
    bool allow_non_martingale = false;
    friend bool operator==(const GbmMartingale&, const GbmMartingale&) = default;
};

// v(t) = theta * 1{t >= tau}, theta = +-1 equiprobable, tau ~ U[0, horizon].
// horizon <= 0 means "use the grid horizon".
struct StepChange {
    double horizon = 0.0;
    friend bool operator==(const StepChange&, const StepChange&) = default;
};

using NoiseComponent = std::variant<Wiener, CompensatedPoisson, GbmMartingale, StepChange>;

// Independent components stacked into one vector martingale.
struct NoiseSpec {
    std::vector<NoiseComponent> components;

    static NoiseSpec wiener(int dims) { return {{Wiener{dims}}}; }

    static int component_dims(const NoiseComponent& c) {
        if (const auto* w = std::get_if<Wiener>(&c)) return w->dims;
        return 1;
    }

    int dims() const {
        int d = 0;
        for (const auto& c : components) d += component_dims(c);
        return d;
    }

    void validate() const {
        if (components.empty()) throw InvalidArgument("noise spec has no components");
        for (const auto& c : components) {
            if (const auto* w = std::get_if<Wiener>(&c)) {
                if (w->dims < 1) throw InvalidArgument("Wiener component needs dims >= 1");
            } else if (const auto* p = std::get_if<CompensatedPoisson>(&c)) {
                if (!(p->rate > 0.0) || !std::isfinite(p->rate))
                    throw InvalidArgument("Poisson rate must be positive");
            } else if (const auto* g = std::get_if<GbmMartingale>(&c)) {
                if (!(g->volatility > 0.0) || !std::isfinite(g->volatility))
                    throw InvalidArgument("GBM volatility must be positive");
                if (g->drift != 0.0 && !g->allow_non_martingale)
                    throw InvalidArgument("GBM drift must be zero unless the non-martingale flag is set");
            } else if (const auto* s = std::get_if<StepChange>(&c)) {
                if (!(s->horizon >= 0.0)) throw InvalidArgument("step change horizon must be >= 0");
            }
        }
    }

    friend bool operator==(const NoiseSpec&, const NoiseSpec&) = default;
};

// ---------------------------------------------------------------------------
// Noise sample path

struct Jump {
    int node;       // the jump is visible from this node on
    int dim;        // noise coordinate
    double size;
    friend bool operator==(const Jump&, const Jump&) = default;
};

class NoisePath {
public:
    // Builds values and quadratic variation from increments. Coordinates
    // flagged in `jump_dims` are pure-jump: their quadratic variation is the
    // sum of squared logged jumps. Other coordinates use realized products.
    NoisePath(TimeGrid grid, Eigen::MatrixXd increments, std::vector<Jump> jumps,
              std::vector<bool> jump_dims, Eigen::VectorXd w0)
        : grid_(grid),
          increments_(std::move(increments)),
          jumps_(std::move(jumps)),
          jump_dims_(std::move(jump_dims)),
          values_(grid, increments_.rows()),
          qv_(Eigen::MatrixXd::Zero(increments_.rows() * increments_.rows(), grid.nodes())) {
        const auto q = increments_.rows();
        if (increments_.cols() != grid.steps()) throw InvalidArgument("noise increments must have N columns");
        if (static_cast<Eigen::Index>(jump_dims_.size()) != q || w0.size() != q)
            throw InvalidArgument("noise path metadata has the wrong dimension");
        if (!increments_.allFinite()) throw NumericalBlowup("non-finite noise increment", 0);
        std::sort(jumps_.begin(), jumps_.end(),
                  [](const Jump& a, const Jump& b) { return a.node < b.node || (a.node == b.node && a.dim < b.dim); });

        values_.at(0) = w0;
        for (int k = 0; k < grid.steps(); ++k) values_.at(k + 1) = values_.at(k) + increments_.col(k);

        Eigen::MatrixXd step(q, q);
        std::size_t next_jump = 0;
        for (int k = 0; k < grid.steps(); ++k) {
            step.setZero();
            for (Eigen::Index i = 0; i < q; ++i) {
                if (jump_dims_[static_cast<std::size_t>(i)]) continue;
                for (Eigen::Index j = 0; j < q; ++j) {
                    if (jump_dims_[static_cast<std::size_t>(j)]) continue;
                    step(i, j) = increments_(i, k) * increments_(j, k);
                }
            }
            while (next_jump < jumps_.size() && jumps_[next_jump].node == k + 1) {
                const auto d = jumps_[next_jump].dim;
                step(d, d) += jumps_[next_jump].size * jumps_[next_jump].size;
                ++next_jump;
            }
            qv_.col(k + 1) = qv_.col(k) + step.reshaped();
        }
    }

    static NoisePath zero(TimeGrid grid, Eigen::Index dims) {
        return NoisePath(grid, Eigen::MatrixXd::Zero(dims, grid.steps()), {},
                         std::vector<bool>(static_cast<std::size_t>(dims), false), Eigen::VectorXd::Zero(dims));
    }

    const TimeGrid& grid() const noexcept { return grid_; }
    Eigen::Index dims() const noexcept { return increments_.rows(); }

    // Delta w over [t_k, t_{k+1}).
    auto increment(int k) const { return increments_.col(k); }
    const Eigen::MatrixXd& increments() const noexcept { return increments_; }
    const SamplePath& values() const noexcept { return values_; }
    const std::vector<Jump>& jumps() const noexcept { return jumps_; }
    const std::vector<bool>& jump_dims() const noexcept { return jump_dims_; }
    const std::vector<std::string>& warnings() const noexcept { return warnings_; }
    void add_warning(std::string w) { warnings_.push_back(std::move(w)); }

    // [w, w'] accumulated up to node k.
    Eigen::MatrixXd quadratic_variation(int k) const { return qv_.col(k).reshaped(dims(), dims()); }
    Eigen::MatrixXd quadratic_variation_increment(int k) const {
        return (qv_.col(k + 1) - qv_.col(k)).reshaped(dims(), dims());
    }

    // Aggregates `factor` consecutive steps into one. Jumps move to the
    // coarse node at or after their original node.
    NoisePath coarsen(int factor) const {
        if (factor < 1 || grid_.steps() % factor != 0)
            throw InvalidArgument("coarsening factor must divide the number of steps");
        const TimeGrid coarse(grid_.horizon(), grid_.steps() / factor);
        Eigen::MatrixXd inc = Eigen::MatrixXd::Zero(dims(), coarse.steps());
        for (int k = 0; k < grid_.steps(); ++k) inc.col(k / factor) += increments_.col(k);
        std::vector<Jump> j = jumps_;
        for (auto& jump : j) jump.node = (jump.node + factor - 1) / factor;
        NoisePath out(coarse, std::move(inc), std::move(j), jump_dims_, values_.at(0));
        out.warnings_ = warnings_;
        return out;
    }

private:
    TimeGrid grid_;
    Eigen::MatrixXd increments_;
    std::vector<Jump> jumps_;
    std::vector<bool> jump_dims_;
    SamplePath values_;
    Eigen::MatrixXd qv_;
    std::vector<std::string> warnings_;
};

// ---------------------------------------------------------------------------
// Sampling

// Resampling request: increments at steps >= cut_step come from `seed`.
struct Resample {
    int cut_step;
    std::uint64_t seed;
};

inline NoisePath sample_noise(const NoiseSpec& spec, const TimeGrid& grid, std::uint64_t seed,
                              std::optional<Resample> resample = std::nullopt) {
    spec.validate();
    const int q = spec.dims();
    const int steps = grid.steps();
    const double dt = grid.dt();
    const double sqdt = std::sqrt(dt);
    const int cut = resample ? std::clamp(resample->cut_step, 0, steps) : steps;

    Engine pre = make_engine(seed, streams::noise);
    Engine post = make_engine(resample ? resample->seed : seed, streams::noise_resample);
    std::normal_distribution<double> gauss_pre, gauss_post;

    Eigen::MatrixXd inc = Eigen::MatrixXd::Zero(q, steps);
    Eigen::VectorXd w0 = Eigen::VectorXd::Zero(q);
    std::vector<Jump> jumps;
    std::vector<bool> jump_dims(static_cast<std::size_t>(q), false);
    std::vector<std::string> warnings;

    // Step-change draws happen before the step loop so that they are part of
    // the pre-cut stream.
    struct StepDraw {
        int dim;
        int node;
        double theta;
    };
    std::vector<StepDraw> step_draws;
    {
        int d = 0;
        for (const auto& c : spec.components) {
            if (const auto* s = std::get_if<StepChange>(&c)) {
                const double horizon = s->horizon > 0.0 ? s->horizon : grid.horizon();
                std::uniform_real_distribution<double> unif(0.0, horizon);
                std::bernoulli_distribution coin(0.5);
                double theta = coin(pre) ? 1.0 : -1.0;
                double tau = unif(pre);
                int node = std::max(1, grid.node_at_or_after(tau));
                if (node - 1 >= cut) {
                    // Jump lies in the resampled window: redraw conditionally on tau > t_cut.
                    std::uniform_real_distribution<double> tail(grid.t(cut), std::max(horizon, grid.t(cut)));
                    theta = coin(post) ? 1.0 : -1.0;
                    tau = tail(post);
                    node = std::max(cut + 1, grid.node_at_or_after(tau));
                }
                if (tau < grid.horizon()) step_draws.push_back({d, node, theta});
                jump_dims[static_cast<std::size_t>(d)] = true;
            }
            d += NoiseSpec::component_dims(c);
        }
    }

    for (const auto& c : spec.components) {
        if (const auto* p = std::get_if<CompensatedPoisson>(&c)) {
            if (p->rate * dt > 0.1)
                warnings.push_back("Poisson rate*dt = " + std::to_string(p->rate * dt) +
                                   " > 0.1: coarse grid clusters jumps");
        }
    }

    std::vector<double> gbm_level(static_cast<std::size_t>(q), 1.0);
    for (int k = 0; k < steps; ++k) {
        const bool after = k >= cut;
        Engine& rng = after ? post : pre;
        auto& gauss = after ? gauss_post : gauss_pre;
        int d = 0;
        for (const auto& c : spec.components) {
            if (const auto* w = std::get_if<Wiener>(&c)) {
                for (int i = 0; i < w->dims; ++i) inc(d + i, k) = sqdt * gauss(rng);
            } else if (const auto* p = std::get_if<CompensatedPoisson>(&c)) {
                std::poisson_distribution<int> counts(p->rate * dt);
                const int n = counts(rng);
                for (int j = 0; j < n; ++j) jumps.push_back({k + 1, d, 1.0});
                inc(d, k) = n - p->rate * dt;
                jump_dims[static_cast<std::size_t>(d)] = true;
            } else if (const auto* g = std::get_if<GbmMartingale>(&c)) {
                auto& level = gbm_level[static_cast<std::size_t>(d)];
                const double dW = sqdt * gauss(rng);
                const double dw = g->drift * level * dt + g->volatility * level * dW;
                inc(d, k) = dw;
                w0(d) = 1.0;
                level += dw;
            }
            d += NoiseSpec::component_dims(c);
        }
    }
    for (const auto& s : step_draws) {
        inc(s.dim, s.node - 1) += s.theta;
        jumps.push_back({s.node, s.dim, s.theta});
    }

    NoisePath path(grid, std::move(inc), std::move(jumps), std::move(jump_dims), std::move(w0));
    for (auto& w : warnings) path.add_warning(std::move(w));
    return path;
}

// ---------------------------------------------------------------------------
// Empirical martingale diagnostic

struct MartingaleCell {
    int condition_node;
    int window_end;
    int dim;
    int bin;
    int count;
    double mean;
    double standard_error;
};

struct MartingaleCheckReport {
    int paths = 0;
    double max_abs_conditional_mean = 0.0;
    double standard_error_at_max = 0.0;
    double max_z = 0.0;
    bool pass = true;
    std::vector<MartingaleCell> cells;
};

// Estimates E[w(t_b) - w(t_a) | bin of w(t_a) - w(0)] for conditioning nodes
// at T/4, T/2, 3T/4 (window to the next conditioning node or T). Bins are
// sample quantiles. Passes iff every populated cell has |mean| <= 3 SE.
inline MartingaleCheckReport empirical_martingale_check(const std::function<NoisePath(std::uint64_t)>& sampler,
                                                        const TimeGrid& grid, int paths, int bins = 4,
                                                        std::uint64_t seed0 = 1, int min_cell = 30) {
    if (paths < 2 || bins < 1) throw InvalidArgument("martingale check needs >= 2 paths and >= 1 bin");
    const int N = grid.steps();
    std::vector<int> conds;
    for (int f = 1; f <= 3; ++f) {
        const int c = (N * f) / 4;
        if (c > 0 && c < N && (conds.empty() || c > conds.back())) conds.push_back(c);
    }
    if (conds.empty()) conds.push_back(0);

    std::vector<Eigen::MatrixXd> past(conds.size()), future(conds.size());
    Eigen::Index q = 0;
    for (int i = 0; i < paths; ++i) {
        const NoisePath w = sampler(seed0 + static_cast<std::uint64_t>(i));
        if (i == 0) {
            q = w.dims();
            for (std::size_t c = 0; c < conds.size(); ++c) {
                past[c].resize(q, paths);
                future[c].resize(q, paths);
            }
        }
        const auto& v = w.values();
        for (std::size_t c = 0; c < conds.size(); ++c) {
            const int a = conds[c];
            const int b = c + 1 < conds.size() ? conds[c + 1] : N;
            past[c].col(i) = v.at(a) - v.at(0);
            future[c].col(i) = v.at(b) - v.at(a);
        }
    }

    MartingaleCheckReport rep;
    rep.paths = paths;
    for (std::size_t c = 0; c < conds.size(); ++c) {
        const int b = c + 1 < conds.size() ? conds[c + 1] : N;
        for (Eigen::Index d = 0; d < q; ++d) {
            std::vector<double> sorted(static_cast<std::size_t>(paths));
            for (int i = 0; i < paths; ++i) sorted[static_cast<std::size_t>(i)] = past[c](d, i);
            std::sort(sorted.begin(), sorted.end());
            std::vector<double> edges;
            for (int e = 1; e < bins; ++e) edges.push_back(sorted[static_cast<std::size_t>((paths * e) / bins)]);
            std::vector<double> sum(static_cast<std::size_t>(bins), 0.0), sum2(sum), cnt(sum);
            for (int i = 0; i < paths; ++i) {
                const double x = past[c](d, i);
                const auto bin = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), x) - edges.begin());
                const double y = future[c](d, i);
                sum[bin] += y;
                sum2[bin] += y * y;
                cnt[bin] += 1.0;
            }
            for (int bin = 0; bin < bins; ++bin) {
                const auto ub = static_cast<std::size_t>(bin);
                if (cnt[ub] < min_cell) continue;
                const double mean = sum[ub] / cnt[ub];
                const double var = std::max(0.0, (sum2[ub] - cnt[ub] * mean * mean) / (cnt[ub] - 1.0));
                const double se = std::sqrt(var / cnt[ub]);
                rep.cells.push_back({conds[c], b, static_cast<int>(d), bin, static_cast<int>(cnt[ub]), mean, se});
                const double z = se > 0.0 ? std::abs(mean) / se : (mean == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
                if (std::abs(mean) > rep.max_abs_conditional_mean) {
                    rep.max_abs_conditional_mean = std::abs(mean);
                    rep.standard_error_at_max = se;
                }
                rep.max_z = std::max(rep.max_z, z);
                if (std::abs(mean) > 3.0 * se) rep.pass = false;
            }
        }
    }
    return rep;
}

inline MartingaleCheckReport empirical_martingale_check(const NoiseSpec& spec, const TimeGrid& grid, int paths,
                                                        int bins = 4, std::uint64_t seed0 = 1) {
    return empirical_martingale_check([&](std::uint64_t s) { return sample_noise(spec, grid, s); }, grid, paths,
                                      bins, seed0);
}

}  // namespace sepctl
