#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "sepctl/sepctl.hpp"

namespace sepctl::test {

inline MatrixSchedule konst(double v) { return MatrixSchedule::constant(Matrix::Constant(1, 1, v)); }

inline Matrix row(double a, double b) {
    Matrix m(1, 2);
    m << a, b;
    return m;
}

// dx = a x dt + u dt + dw1, dy = x dt + d dw2, x(0) ~ N(0, p0).
inline SystemModel scalar_plant(double a = 0.5, double d = 0.5, double p0 = 1.0) {
    return {konst(a),
            konst(1.0),
            MatrixSchedule::constant(row(1.0, 0.0)),
            konst(1.0),
            MatrixSchedule::constant(row(0.0, d)),
            p0 > 0.0 ? InitialState::gaussian(Matrix::Constant(1, 1, p0)) : InitialState::deterministic(Vector::Zero(1)),
            true};
}

inline CostSpec scalar_cost(double q = 1.0, double r = 0.1, double s = 1.0) {
    return {konst(q), konst(r), Matrix::Constant(1, 1, s)};
}

// Two-state plant with time-varying dynamics and correlated noise.
inline SystemModel two_state_plant() {
    Matrix a0(2, 2), a1(2, 2), b1(2, 1), b2(2, 3), c(1, 2), d(1, 3);
    a0 << 0.0, 1.0, -1.0, -0.3;
    a1 << 0.0, 0.0, 0.4, 0.0;
    b1 << 0.0, 1.0;
    b2 << 0.3, 0.0, 0.1, 0.0, 0.5, 0.0;
    c << 1.0, 0.0;
    d << 0.0, 0.2, 0.4;
    Matrix p0(2, 2);
    p0 << 0.5, 0.1, 0.1, 0.3;
    return {MatrixSchedule::polynomial({a0, a1}),
            MatrixSchedule::constant(b1),
            MatrixSchedule::constant(b2),
            MatrixSchedule::constant(c),
            MatrixSchedule::constant(d),
            InitialState::gaussian(p0),
            false};
}

inline CostSpec two_state_cost() {
    Matrix q = Matrix::Identity(2, 2), s = 0.5 * Matrix::Identity(2, 2);
    return {MatrixSchedule::constant(q), MatrixSchedule::constant(Matrix::Constant(1, 1, 0.2)), s};
}

}  // namespace sepctl::test
