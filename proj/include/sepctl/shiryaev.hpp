#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sepctl/errors.hpp"
#include "sepctl/grid.hpp"
#include "sepctl/laws.hpp"
#include "sepctl/loop.hpp"
#include "sepctl/model.hpp"
#include "sepctl/noise.hpp"
#include "sepctl/path.hpp"
#include "sepctl/random.hpp"

namespace sepctl {

// k(t) = -R^{-1/2} tanh(R^{-1/2} (T - t)).
inline std::vector<double> scalar_lqg_gain(double r_weight, const TimeGrid& grid) {
    if (!(r_weight > 0.0)) throw InvalidArgument("control weight must be positive");
    const double s = 1.0 / std::sqrt(r_weight);
    std::vector<double> k(static_cast<std::size_t>(grid.nodes()));
    for (int i = 0; i < grid.nodes(); ++i) k[static_cast<std::size_t>(i)] = -s * std::tanh(s * (grid.horizon() - grid.t(i)));
    return k;
}

// dx = u dt + dv,  dy = x dt + sigma dw,  v a +-1 step at a uniform time.
inline SystemModel step_change_model(double sigma) {
    if (!(sigma > 0.0)) throw InvalidArgument("observation noise level must be positive");
    Matrix b2(1, 2), d(1, 2);
    b2 << 1.0, 0.0;
    d << 0.0, sigma;
    SystemModel m{MatrixSchedule::constant(Matrix::Zero(1, 1)), MatrixSchedule::constant(Matrix::Ones(1, 1)),
                  MatrixSchedule::constant(b2),                  MatrixSchedule::constant(Matrix::Ones(1, 1)),
                  MatrixSchedule::constant(d),                   InitialState::deterministic(Vector::Zero(1)),
                  true};
    return m;
}

inline NoiseSpec step_change_noise(double horizon) { return NoiseSpec{{StepChange{horizon}, Wiener{1}}}; }

struct ShiryaevState {
    double xhat = 0.0;
    double rho = 0.0;
    double phi = 0.0;
};

// One Euler step of
//   dxhat = k xhat dt + g (dy - xhat dt),  drho = g (dy - xhat dt),
//   dphi = -sigma^{-2} phi rho (dy - xhat dt),
// g = sigma^{-2} (1 - rho^2 - 2 (T - t) phi). rho is clamped to [-1, 1]
// and xhat moved by the same amount so that xhat - rho keeps tracking the
// integrated input.
class ShiryaevStepper {
public:
    ShiryaevStepper(double sigma, const TimeGrid& grid) : inv_s2_(1.0 / (sigma * sigma)), grid_(grid) {
        if (!(sigma > 0.0)) throw InvalidArgument("observation noise level must be positive");
    }

    ShiryaevState initial() const { return {0.0, 0.0, 1.0 / (2.0 * grid_.horizon())}; }

    // Advances s from node k to k+1; returns true when rho had to be clamped.
    bool step(int k, double gain, double dy, ShiryaevState& s) const {
        const double dt = grid_.dt();
        const double e = dy - s.xhat * dt;
        const double g = inv_s2_ * (1.0 - s.rho * s.rho - 2.0 * (grid_.horizon() - grid_.t(k)) * s.phi);
        ShiryaevState n;
        n.xhat = s.xhat + gain * s.xhat * dt + g * e;
        n.rho = s.rho + g * e;
        n.phi = s.phi - inv_s2_ * s.phi * s.rho * e;
        bool clamped = false;
        if (std::abs(n.rho) > 1.0) {
            const double c = std::clamp(n.rho, -1.0, 1.0);
            n.xhat += c - n.rho;
            n.rho = c;
            clamped = true;
        }
        if (!std::isfinite(n.xhat) || !std::isfinite(n.phi)) throw NumericalBlowup("Shiryaev filter became non-finite", k + 1);
        if (n.phi <= 0.0 && k + 1 < grid_.steps())
            throw NumericalBlowup("Shiryaev normalizer phi reached zero before T; refine the grid", k + 1);
        s = n;
        return clamped;
    }

private:
    double inv_s2_;
    TimeGrid grid_;
};

struct ShiryaevTrajectory {
    TimeGrid grid;
    std::vector<double> xhat, rho, phi;
    std::vector<int> clamp_nodes;

    explicit ShiryaevTrajectory(const TimeGrid& g)
        : grid(g),
          xhat(static_cast<std::size_t>(g.nodes()), 0.0),
          rho(static_cast<std::size_t>(g.nodes()), 0.0),
          phi(static_cast<std::size_t>(g.nodes()), 0.0) {}

    void store(int k, const ShiryaevState& s) {
        const auto i = static_cast<std::size_t>(k);
        xhat[i] = s.xhat;
        rho[i] = s.rho;
        phi[i] = s.phi;
    }
    int clamp_events() const { return static_cast<int>(clamp_nodes.size()); }
};

inline ShiryaevTrajectory run_shiryaev_filter(const SamplePath& y, double sigma, const std::vector<double>& gain) {
    const TimeGrid& grid = y.grid();
    if (y.dim() != 1) throw InvalidArgument("the Shiryaev filter needs a scalar observation");
    if (static_cast<int>(gain.size()) != grid.nodes()) throw InvalidArgument("gain schedule does not match the grid");
    ShiryaevStepper stepper(sigma, grid);
    ShiryaevTrajectory tr(grid);
    ShiryaevState s = stepper.initial();
    tr.store(0, s);
    for (int k = 0; k < grid.steps(); ++k) {
        if (stepper.step(k, gain[static_cast<std::size_t>(k)], y(0, k + 1) - y(0, k), s)) tr.clamp_nodes.push_back(k + 1);
        tr.store(k + 1, s);
    }
    return tr;
}

// u(t_k) = k(t_k) xhat(t_k) with the Shiryaev filter driven by y.
class ShiryaevLaw final : public ControlLaw {
public:
    ShiryaevLaw(double sigma, std::shared_ptr<const std::vector<double>> gain, const TimeGrid& grid)
        : sigma_(sigma), gain_(std::move(gain)), stepper_(sigma, grid), trajectory_(grid) {
        if (static_cast<int>(gain_->size()) != grid.nodes()) throw InvalidArgument("gain schedule does not match the grid");
    }
    LawPtr clone() const override { return std::make_unique<ShiryaevLaw>(sigma_, gain_, trajectory_.grid); }
    std::string name() const override { return "shiryaev"; }
    Eigen::Index input_dim() const override { return 1; }
    double sigma() const noexcept { return sigma_; }

    void reset() override {
        restart();
        trajectory_ = ShiryaevTrajectory(trajectory_.grid);
        state_ = stepper_.initial();
        trajectory_.store(0, state_);
    }
    void compute(int k, const ObservationHistory& obs, Eigen::Ref<Vector> u) override {
        expect_step(k);
        const double yk = obs.at(k)(0);
        if (k > 0) {
            if (stepper_.step(k - 1, (*gain_)[static_cast<std::size_t>(k - 1)], yk - y_prev_, state_))
                trajectory_.clamp_nodes.push_back(k);
            trajectory_.store(k, state_);
        }
        y_prev_ = yk;
        u(0) = (*gain_)[static_cast<std::size_t>(k)] * state_.xhat;
    }
    const ShiryaevTrajectory& trajectory() const noexcept { return trajectory_; }

private:
    double sigma_;
    std::shared_ptr<const std::vector<double>> gain_;
    ShiryaevStepper stepper_;
    ShiryaevTrajectory trajectory_;
    ShiryaevState state_;
    double y_prev_ = 0.0;
};

// ---------------------------------------------------------------------------
// Bayes-formula oracle

struct OracleTrajectory {
    TimeGrid grid;
    std::vector<double> log_sigma, log_sigma_bar;  // -inf at t = 0
    std::vector<double> sigma, sigma_bar, numer, denom, rho;
};

namespace detail {

inline double log_add_exp(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace detail

// Sigma(t)    = int_0^t exp(( y0(t) - y0(s) - (t - s)/2) / sigma^2) ds,
// Sigmabar(t) = int_0^t exp((-(y0(t) - y0(s)) - (t - s)/2) / sigma^2) ds,
// by the trapezoidal rule over the nodes s = t_0..t_k, in log domain. With
// b(t) = (y0(t) - t/2)/sigma^2 the integrand factors as e^{b(t)} e^{-b(s)},
// so each node reuses the running log-sum of e^{-b(s)} over earlier nodes.
inline OracleTrajectory bayes_oracle(const SamplePath& y0, double sigma) {
    if (y0.dim() != 1) throw InvalidArgument("the Bayes oracle needs a scalar observation");
    if (!(sigma > 0.0)) throw InvalidArgument("observation noise level must be positive");
    const TimeGrid& grid = y0.grid();
    const auto n = static_cast<std::size_t>(grid.nodes());
    const double inv_s2 = 1.0 / (sigma * sigma);
    const double ninf = -std::numeric_limits<double>::infinity();
    const double log_dt = std::log(grid.dt());
    const double log_half = std::log(0.5);
    OracleTrajectory o{grid, std::vector<double>(n), std::vector<double>(n), std::vector<double>(n),
                       std::vector<double>(n), std::vector<double>(n), std::vector<double>(n),
                       std::vector<double>(n)};

    double run_p = ninf, run_m = ninf;  // log sum_{j<k} w_j e^{-b(t_j)}, and with -y0
    for (std::size_t k = 0; k < n; ++k) {
        const int ki = static_cast<int>(k);
        const double t = grid.t(ki);
        const double bp = (y0(0, ki) - 0.5 * t) * inv_s2;
        const double bm = (-y0(0, ki) - 0.5 * t) * inv_s2;
        double lp = ninf, lm = ninf;
        if (k > 0) {
            lp = bp + log_dt + detail::log_add_exp(run_p, log_half - bp);
            lm = bm + log_dt + detail::log_add_exp(run_m, log_half - bm);
        }
        const double lw = k == 0 ? log_half : 0.0;
        run_p = detail::log_add_exp(run_p, lw - bp);
        run_m = detail::log_add_exp(run_m, lw - bm);

        o.log_sigma[k] = lp;
        o.log_sigma_bar[k] = lm;
        o.sigma[k] = std::exp(lp);
        o.sigma_bar[k] = std::exp(lm);
        const double rest = 2.0 * (grid.horizon() - t);
        o.numer[k] = o.sigma[k] - o.sigma_bar[k];
        o.denom[k] = o.sigma[k] + o.sigma_bar[k] + rest;
        // rho = (e^lp - e^lm) / (e^lp + e^lm + rest), rescaled by the largest term.
        const double lr = rest > 0.0 ? std::log(rest) : ninf;
        const double top = std::max({lp, lm, lr});
        if (top == ninf) {
            o.rho[k] = 0.0;
        } else {
            const double ep = std::exp(lp - top), em = std::exp(lm - top), er = std::exp(lr - top);
            o.rho[k] = std::clamp((ep - em) / (ep + em + er), -1.0, 1.0);
        }
    }
    return o;
}

// Euler propagation of dSigma = sigma^{-2} Sigma dy0 + dt and the mirrored
// equation for Sigmabar; cross-check for the quadrature.
inline std::pair<std::vector<double>, std::vector<double>> propagate_sigma_sde(const SamplePath& y0, double sigma) {
    const TimeGrid& grid = y0.grid();
    const double inv_s2 = 1.0 / (sigma * sigma);
    std::vector<double> s(static_cast<std::size_t>(grid.nodes()), 0.0), sb(s);
    for (int k = 0; k < grid.steps(); ++k) {
        const auto i = static_cast<std::size_t>(k);
        const double dy = y0(0, k + 1) - y0(0, k);
        s[i + 1] = s[i] + inv_s2 * s[i] * dy + grid.dt();
        sb[i + 1] = sb[i] - inv_s2 * sb[i] * dy + grid.dt();
    }
    return {s, sb};
}

inline double rms_difference(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw InvalidArgument("RMS difference needs equally long, non-empty series");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Closed-loop scenario

struct StepChangeReport {
    double sigma = 0.0, r_weight = 0.0;
    std::uint64_t seed = 0;
    double theta = 0.0;
    int jump_node = -1;
    double jump_time = 0.0;
    double cost = 0.0;
    double cost_state = 0.0, cost_control = 0.0;
    bool detected = false;  // sign(rho(T)) == theta
    int clamp_events = 0;
    double oracle_rms = 0.0;
    double innovation_identity_max = 0.0;  // |(dy0 - rho dt) - (dy - xhat dt)|
    double reconstruction_max = 0.0;       // |y0 reconstructed - y0 simulated|
    LoopSolution loop;
    ShiryaevTrajectory filter;
    OracleTrajectory oracle;
    SamplePath y0;
};

inline StepChangeReport run_step_change_scenario(double sigma, double r_weight, std::uint64_t seed,
                                                 const TimeGrid& grid) {
    const SampledModel model = sample_model(step_change_model(sigma), grid);
    const NoisePath noise = sample_noise(step_change_noise(grid.horizon()), grid, seed);
    auto gain = std::make_shared<const std::vector<double>>(scalar_lqg_gain(r_weight, grid));
    ShiryaevLaw law(sigma, gain, grid);
    LoopSolution loop = solve_closed_loop(model, law, noise, Vector::Zero(1));
    const ShiryaevTrajectory& f = law.trajectory();
    const double dt = grid.dt();

    SamplePath y0(grid, 1), y0_sim(grid, 1);
    double innov = 0.0;
    for (int k = 0; k < grid.steps(); ++k) {
        const auto i = static_cast<std::size_t>(k);
        const double dy = loop.y(0, k + 1) - loop.y(0, k);
        const double dy0 = dy - (f.xhat[i] - f.rho[i]) * dt;
        y0(0, k + 1) = y0(0, k) + dy0;
        innov = std::max(innov, std::abs((dy0 - f.rho[i] * dt) - (dy - f.xhat[i] * dt)));
        y0_sim(0, k + 1) = y0_sim(0, k) + noise.values()(0, k) * dt + sigma * noise.increment(k)(1);
    }
    OracleTrajectory oracle = bayes_oracle(y0, sigma);

    StepChangeReport rep{sigma, r_weight, seed, 0.0, -1, 0.0, 0.0, 0.0, 0.0, false, f.clamp_events(),
                         rms_difference(f.rho, oracle.rho), innov, sup_distance(y0, y0_sim), std::move(loop),
                         f, std::move(oracle), std::move(y0)};
    for (const auto& j : noise.jumps())
        if (j.dim == 0) {
            rep.theta = j.size;
            rep.jump_node = j.node;
            rep.jump_time = grid.t(j.node);
        }
    for (int k = 0; k < grid.steps(); ++k) {
        const double w = 0.5 * dt;
        const double x0 = rep.loop.x(0, k), x1 = rep.loop.x(0, k + 1);
        const double u0 = rep.loop.u(0, k), u1 = rep.loop.u(0, k + 1);
        rep.cost_state += w * (x0 * x0 + x1 * x1);
        rep.cost_control += w * r_weight * (u0 * u0 + u1 * u1);
    }
    rep.cost = rep.cost_state + rep.cost_control;
    rep.detected = (rep.filter.rho.back() > 0.0 ? 1.0 : -1.0) == rep.theta && rep.filter.rho.back() != 0.0;
    return rep;
}

}  // namespace sepctl
