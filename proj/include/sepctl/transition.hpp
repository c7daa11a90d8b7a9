#pragma once

#include <Eigen/Dense>

#include "sepctl/errors.hpp"
#include "sepctl/grid.hpp"
#include "sepctl/model.hpp"

namespace sepctl {

// One classical four-stage step of dX/dt = f(t, X) with step h (h may be negative).
template <class Rhs>
Matrix rk4_step(const Rhs& f, double t, const Matrix& X, double h) {
    const Matrix k1 = f(t, X);
    const Matrix k2 = f(t + 0.5 * h, X + (0.5 * h) * k1);
    const Matrix k3 = f(t + 0.5 * h, X + (0.5 * h) * k2);
    const Matrix k4 = f(t + h, X + h * k3);
    return X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Phi(t, s) for dPhi/dt = A(t) Phi, Phi(s, s) = I, integrated on the grid.
inline Matrix transition_matrix(const MatrixSchedule& A, const TimeGrid& grid, int t_index, int s_index) {
    if (s_index > t_index) throw InvalidArgument("transition matrix needs s <= t");
    if (s_index < 0 || t_index > grid.steps()) throw InvalidArgument("transition matrix index out of range");
    const auto n = A.rows();
    Matrix phi = Matrix::Identity(n, n);
    auto rhs = [&A](double t, const Matrix& X) -> Matrix { return A(t) * X; };
    for (int k = s_index; k < t_index; ++k) phi = rk4_step(rhs, grid.t(k), phi, grid.dt());
    return phi;
}

inline Matrix transition_matrix(const SystemModel& model, const TimeGrid& grid, int t_index, int s_index) {
    return transition_matrix(model.A, grid, t_index, s_index);
}

}  // namespace sepctl
