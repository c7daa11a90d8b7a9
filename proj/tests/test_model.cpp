#include <cmath>
#include <sstream>

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include "support.hpp"

using namespace sepctl;
using namespace sepctl::test;

TEST(TimeGrid, LastNodeIsHorizon) {
    const TimeGrid g(0.7, 3);
    EXPECT_EQ(g.nodes(), 4);
    EXPECT_EQ(g.t(3), 0.7);
    EXPECT_DOUBLE_EQ(g.t(1), 0.7 / 3);
    EXPECT_EQ(g.node_at_or_after(0.0), 0);
    EXPECT_EQ(g.node_at_or_after(0.7 / 3), 1);
    EXPECT_EQ(g.node_at_or_after(0.25), 2);
    EXPECT_EQ(g.node_at_or_after(5.0), 3);
    EXPECT_THROW(TimeGrid(0.0, 3), InvalidArgument);
    EXPECT_THROW(TimeGrid(1.0, 0), InvalidArgument);
}

TEST(MatrixSchedule, PolynomialAndTable) {
    Matrix c0(1, 2), c1(1, 2), c2(1, 2);
    c0 << 1, 2;
    c1 << 0, -1;
    c2 << 3, 0;
    const auto p = MatrixSchedule::polynomial({c0, c1, c2});
    const double t = 0.3;
    EXPECT_NEAR(p(t)(0, 0), 1 + 3 * t * t, 1e-15);
    EXPECT_NEAR(p(t)(0, 1), 2 - t, 1e-15);

    const auto tab = MatrixSchedule::table({0.0, 1.0, 3.0}, {konst(0.0)(0), konst(2.0)(0), konst(-2.0)(0)});
    EXPECT_DOUBLE_EQ(tab(0.5)(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(tab(2.0)(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(tab(-1.0)(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(tab(9.0)(0, 0), -2.0);
    EXPECT_THROW(MatrixSchedule::table({0.0, 0.0}, {c0, c0}), InvalidArgument);
    EXPECT_THROW(MatrixSchedule::polynomial({c0, Matrix::Ones(2, 2)}), InvalidArgument);
}

TEST(SamplePath, CsvLayout) {
    const TimeGrid g(1.0, 2);
    SamplePath x(g, 2);
    x(0, 1) = 0.1;
    x(1, 2) = -3.0;
    std::ostringstream out;
    write_path_csv(out, "x", x);
    EXPECT_EQ(out.str(), "t,x_0,x_1\n0,0,0\n0.5,0.10000000000000001,0\n1,0,-3\n");
}

TEST(Transition, MatchesMatrixExponentialForConstantA) {
    Matrix a(2, 2);
    a << 0.0, 1.0, -2.0, -0.5;
    const TimeGrid g(1.0, 200);
    const Matrix phi = transition_matrix(MatrixSchedule::constant(a), g, 200, 50);
    const Matrix exact = (a * 0.75).exp();
    EXPECT_LT((phi - exact).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Transition, ClosedFormForScalarTimeVaryingA) {
    // A(t) = a0 + a1 t: Phi(t, s) = exp(a0 (t - s) + a1 (t^2 - s^2) / 2).
    Matrix a0 = Matrix::Constant(1, 1, -0.4), a1 = Matrix::Constant(1, 1, 1.3);
    const auto A = MatrixSchedule::polynomial({a0, a1});
    const TimeGrid g(2.0, 400);
    const double t = g.t(320), s = g.t(40);
    const double exact = std::exp(-0.4 * (t - s) + 0.65 * (t * t - s * s));
    EXPECT_NEAR(transition_matrix(A, g, 320, 40)(0, 0), exact, 1e-10 * exact);
}

TEST(Transition, Cocycle) {
    const SystemModel m = two_state_plant();
    const TimeGrid g(1.0, 300);
    const Matrix lhs = transition_matrix(m, g, 300, 0);
    const Matrix rhs = transition_matrix(m, g, 300, 170) * transition_matrix(m, g, 170, 0);
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-13);
    EXPECT_TRUE(transition_matrix(m, g, 7, 7).isIdentity(0.0));
}

TEST(ModelChecks, NoiseConditioningAndIndependence) {
    const TimeGrid g(1.0, 10);
    SystemModel m = scalar_plant();
    const auto nc = check_noise(m, g);
    EXPECT_DOUBLE_EQ(nc.max_condition, 1.0);

    m.D = MatrixSchedule::constant(row(0.0, 0.0));
    EXPECT_THROW(check_noise(m, g), SynthesisFailure);

    m = scalar_plant();
    m.D = MatrixSchedule::constant(row(0.3, 0.5));
    EXPECT_THROW(check_noise(m, g), InvalidArgument);
    m.independent_noise = false;
    EXPECT_NO_THROW(check_noise(m, g));
}

TEST(ModelChecks, CostDefiniteness) {
    const TimeGrid g(1.0, 10);
    EXPECT_NO_THROW(check_cost(scalar_cost(), g, 1, 1));
    EXPECT_THROW(check_cost(scalar_cost(-1.0), g, 1, 1), InvalidArgument);
    EXPECT_THROW(check_cost(scalar_cost(1.0, 0.0), g, 1, 1), InvalidArgument);
    CostSpec c = scalar_cost();
    c.R = MatrixSchedule::polynomial({Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, -2.0)});
    EXPECT_THROW(check_cost(c, g, 1, 1), InvalidArgument);  // R(t) <= 0 for t >= 1/2
}

TEST(InitialState, GaussianMoments) {
    Matrix cov(2, 2);
    cov << 2.0, 0.6, 0.6, 0.5;
    InitialState law = InitialState::gaussian(cov);
    law.mean = Vector::Constant(2, 1.0);
    const int M = 20000;
    Vector mean = Vector::Zero(2);
    Matrix second = Matrix::Zero(2, 2);
    for (int i = 0; i < M; ++i) {
        const Vector x = draw_initial_state(law, static_cast<std::uint64_t>(i));
        mean += x / M;
        second += (x - law.mean) * (x - law.mean).transpose() / M;
    }
    // 4-sigma bands from the known variances.
    EXPECT_NEAR(mean(0), 1.0, 4 * std::sqrt(2.0 / M));
    EXPECT_NEAR(mean(1), 1.0, 4 * std::sqrt(0.5 / M));
    EXPECT_NEAR(second(0, 0), 2.0, 4 * 2.0 * std::sqrt(2.0 / M));
    EXPECT_NEAR(second(0, 1), 0.6, 4 * std::sqrt((2.0 * 0.5 + 0.36) / M));
    EXPECT_EQ(draw_initial_state(InitialState::deterministic(Vector::Ones(2)), 3), Vector::Ones(2));
}
