#pragma once

#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sepctl/errors.hpp"
#include "sepctl/grid.hpp"
#include "sepctl/model.hpp"
#include "sepctl/path.hpp"
#include "sepctl/transition.hpp"

namespace sepctl {

// Per-node matrix sequence on a grid.
using GainSchedule = std::vector<Matrix>;

struct ControlSynthesis {
    TimeGrid grid;
    GainSchedule P;  // Riccati solution, n x n
    GainSchedule K;  // feedback gain -R^{-1} B1' P, m x n
};

struct FilterSynthesis {
    TimeGrid grid;
    GainSchedule Sigma;  // error covariance, n x n
    GainSchedule L;      // Kalman gain, n x p
};

namespace detail {

inline void symmetrize(Matrix& m) { m = 0.5 * (m + m.transpose()).eval(); }

// Smallest eigenvalue must stay above -1e-10 (1 + |P|).
inline void require_psd(const Matrix& m, int node, const char* what) {
    if (!m.allFinite()) throw NumericalBlowup(std::string(what) + " became non-finite", node);
    Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double scale = 1.0 + es.eigenvalues().cwiseAbs().maxCoeff();
    if (lo < -1e-10 * scale)
        throw NumericalBlowup(std::string(what) + " lost positive semidefiniteness (min eig " + std::to_string(lo) +
                                  ")",
                              node);
}

}  // namespace detail

// -K = R^{-1} B1' P for one node; throws if R is numerically singular.
inline Matrix gain_at(const Matrix& P, const Matrix& B1, const Matrix& R, int node) {
    Eigen::LLT<Matrix> llt(R);
    if (llt.info() != Eigen::Success) throw SynthesisFailure("control weight R is not positive definite", node);
    return -llt.solve(B1.transpose() * P);
}

inline GainSchedule control_gain(const GainSchedule& P, const SystemModel& model, const CostSpec& cost,
                                 const TimeGrid& grid) {
    if (static_cast<int>(P.size()) != grid.nodes()) throw InvalidArgument("P schedule does not match the grid");
    GainSchedule K;
    K.reserve(P.size());
    for (int k = 0; k < grid.nodes(); ++k) {
        const double t = grid.t(k);
        const auto& Pk = P[static_cast<std::size_t>(k)];
        if (Pk.rows() != model.n() || Pk.cols() != model.n()) throw InvalidArgument("P has the wrong shape");
        K.push_back(gain_at(Pk, model.B1(t), cost.R(t), k));
    }
    return K;
}

// Backward integration of  dP/dt = -A'P - PA + P B1 R^{-1} B1' P - Q,  P(T) = S.
inline ControlSynthesis solve_control_riccati(const SystemModel& model, const CostSpec& cost, const TimeGrid& grid) {
    model.check_shapes();
    check_cost(cost, grid, model.n(), model.m());
    const int N = grid.steps();
    GainSchedule P(static_cast<std::size_t>(N + 1));
    P[static_cast<std::size_t>(N)] = cost.S;
    int current = N;
    auto rhs = [&](double t, const Matrix& X) -> Matrix {
        const Matrix A = model.A(t);
        const Matrix B1 = model.B1(t);
        Eigen::LLT<Matrix> llt(cost.R(t));
        if (llt.info() != Eigen::Success) throw SynthesisFailure("control weight R is singular", current);
        const Matrix BtX = B1.transpose() * X;
        return -A.transpose() * X - X * A + BtX.transpose() * llt.solve(BtX) - cost.Q(t);
    };
    for (int k = N - 1; k >= 0; --k) {
        current = k;
        Matrix next = rk4_step(rhs, grid.t(k + 1), P[static_cast<std::size_t>(k + 1)], -grid.dt());
        detail::symmetrize(next);
        detail::require_psd(next, k, "control Riccati solution");
        P[static_cast<std::size_t>(k)] = std::move(next);
    }
    ControlSynthesis out{grid, std::move(P), {}};
    out.K = control_gain(out.P, model, cost, grid);
    return out;
}

inline Matrix kalman_gain_at(const Matrix& Sigma, const Matrix& C, const Matrix& B2, const Matrix& D) {
    const Matrix DDt = D * D.transpose();
    const Matrix cross = Sigma * C.transpose() + B2 * D.transpose();
    return DDt.ldlt().solve(cross.transpose()).transpose();
}

// Forward integration of
//   dS/dt = A S + S A' + B2 B2' - (S C' + B2 D')(D D')^{-1}(S C' + B2 D')',
// S(0) = initial covariance;  L = (S C' + B2 D')(D D')^{-1}.
inline FilterSynthesis solve_filter_riccati(const SystemModel& model, const TimeGrid& grid,
                                            double max_condition = 1e12) {
    check_noise(model, grid, max_condition);
    const int N = grid.steps();
    GainSchedule S(static_cast<std::size_t>(N + 1));
    S[0] = model.x0.covariance;
    detail::symmetrize(S[0]);
    detail::require_psd(S[0], 0, "initial covariance");
    auto rhs = [&](double t, const Matrix& X) -> Matrix {
        const Matrix A = model.A(t);
        const Matrix B2 = model.B2(t);
        const Matrix C = model.C(t);
        const Matrix D = model.D(t);
        const Matrix cross = X * C.transpose() + B2 * D.transpose();
        const Matrix DDt = D * D.transpose();
        return A * X + X * A.transpose() + B2 * B2.transpose() - cross * DDt.ldlt().solve(cross.transpose());
    };
    for (int k = 0; k < N; ++k) {
        Matrix next = rk4_step(rhs, grid.t(k), S[static_cast<std::size_t>(k)], grid.dt());
        detail::symmetrize(next);
        detail::require_psd(next, k + 1, "filter Riccati solution");
        S[static_cast<std::size_t>(k + 1)] = std::move(next);
    }
    FilterSynthesis out{grid, std::move(S), {}};
    out.L.reserve(out.Sigma.size());
    for (int k = 0; k <= N; ++k) {
        const double t = grid.t(k);
        out.L.push_back(kalman_gain_at(out.Sigma[static_cast<std::size_t>(k)], model.C(t), model.B2(t), model.D(t)));
    }
    return out;
}

// CSV with a `t` column followed by row-major matrix entries name_i_j.
inline void write_schedule_csv(std::ostream& out, const std::string& name, const TimeGrid& grid,
                               const GainSchedule& s) {
    if (static_cast<int>(s.size()) != grid.nodes()) throw InvalidArgument("schedule does not match the grid");
    const auto r = s.front().rows(), c = s.front().cols();
    out << 't';
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) out << ',' << name << '_' << i << '_' << j;
    out << '\n';
    for (int k = 0; k < grid.nodes(); ++k) {
        out << detail::format_double(grid.t(k));
        const auto& m = s[static_cast<std::size_t>(k)];
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) out << ',' << detail::format_double(m(i, j));
        out << '\n';
    }
}

inline void write_schedule_csv(const std::string& file, const std::string& name, const TimeGrid& grid,
                               const GainSchedule& s) {
    std::ofstream out(file);
    if (!out) throw IoError("cannot open " + file + " for writing");
    write_schedule_csv(out, name, grid, s);
}

}  // namespace sepctl
