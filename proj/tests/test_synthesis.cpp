#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace sepctl;
using namespace sepctl::test;

namespace {

// a = 0, q = 1, r = 1/4, s = 1/5:  -P' = q - P^2 / r,
// P(t) = sqrt(qr) tanh(sqrt(q/r)(T - t) + atanh(s / sqrt(qr))).
double control_exact(double T, double t) { return 0.5 * std::tanh(2.0 * (T - t) + std::atanh(0.4)); }

double control_error(int N) {
    const double T = 1.5;
    const TimeGrid g(T, N);
    const auto ctrl = solve_control_riccati(scalar_plant(0.0), scalar_cost(1.0, 0.25, 0.2), g);
    double err = 0.0;
    for (int k = 0; k <= N; ++k) err = std::max(err, std::abs(ctrl.P[k](0, 0) - control_exact(T, g.t(k))));
    return err;
}

}  // namespace

TEST(ControlRiccati, MatchesTanhClosedForm) {
    EXPECT_LT(control_error(1000), 1e-10);
    const TimeGrid g(1.5, 1000);
    const auto ctrl = solve_control_riccati(scalar_plant(0.0), scalar_cost(1.0, 0.25, 0.2), g);
    EXPECT_DOUBLE_EQ(ctrl.P.back()(0, 0), 0.2);
    for (int k : {0, 400, 1000}) EXPECT_DOUBLE_EQ(ctrl.K[k](0, 0), -4.0 * ctrl.P[k](0, 0));
}

TEST(ControlRiccati, FourthOrderConvergence) {
    const double e1 = control_error(10), e2 = control_error(20), e3 = control_error(40);
    EXPECT_GT(e1 / e2, 12.0);
    EXPECT_LT(e1 / e2, 20.0);
    EXPECT_GT(e2 / e3, 12.0);
    EXPECT_LT(e2 / e3, 20.0);
}

TEST(FilterRiccati, MatchesTanhClosedForm) {
    // dx = dw1, dy = x dt + sigma dw2, Sigma(0) = 0:  Sigma(t) = sigma tanh(t / sigma).
    const double sigma = 0.7;
    const TimeGrid g(2.0, 2000);
    const auto filt = solve_filter_riccati(scalar_plant(0.0, sigma, 0.0), g);
    double err = 0.0;
    for (int k = 0; k <= g.steps(); ++k) err = std::max(err, std::abs(filt.Sigma[k](0, 0) - sigma * std::tanh(g.t(k) / sigma)));
    EXPECT_LT(err, 1e-10);
    for (int k : {0, 900, 2000}) EXPECT_NEAR(filt.L[k](0, 0), filt.Sigma[k](0, 0) / (sigma * sigma), 1e-14);
}

TEST(FilterRiccati, DualToControlRiccati) {
    // With B2 D' = 0 and constant coefficients, Sigma(t) = P_dual(T - t) for the
    // control problem (A', C', Q = B2 B2', R = D D', S = P0).
    Matrix a(2, 2), b2(2, 3), c(1, 2), d(1, 3), p0(2, 2);
    a << 0.0, 1.0, -1.0, -0.3;
    b2 << 0.3, 0.0, 0.0, 0.1, 0.5, 0.0;
    c << 1.0, 0.5;
    d << 0.0, 0.0, 0.4;
    p0 << 0.5, 0.1, 0.1, 0.3;
    const SystemModel plant{MatrixSchedule::constant(a), MatrixSchedule::constant(Matrix::Zero(2, 1)),
                            MatrixSchedule::constant(b2), MatrixSchedule::constant(c),
                            MatrixSchedule::constant(d), InitialState::gaussian(p0), true};
    const SystemModel dual{MatrixSchedule::constant(a.transpose()), MatrixSchedule::constant(c.transpose()),
                           MatrixSchedule::constant(Matrix::Zero(2, 1)), MatrixSchedule::constant(Matrix::Zero(1, 2)),
                           MatrixSchedule::constant(Matrix::Zero(1, 1)),
                           InitialState::deterministic(Vector::Zero(2)), false};
    const CostSpec dual_cost{MatrixSchedule::constant(b2 * b2.transpose()), MatrixSchedule::constant(d * d.transpose()),
                             p0};
    const TimeGrid g(1.0, 500);
    const auto filt = solve_filter_riccati(plant, g);
    const auto ctrl = solve_control_riccati(dual, dual_cost, g);
    double err = 0.0;
    for (int k = 0; k <= g.steps(); ++k)
        err = std::max(err, (filt.Sigma[k] - ctrl.P[g.steps() - k]).cwiseAbs().maxCoeff());
    EXPECT_LT(err, 1e-12);
}

TEST(FilterRiccati, CorrelatedNoiseGainIncludesCrossTerm) {
    const SystemModel m = two_state_plant();
    const TimeGrid g(1.0, 200);
    const auto filt = solve_filter_riccati(m, g);
    for (int k : {0, 100, 200}) {
        const double t = g.t(k);
        const Matrix D = m.D(t);
        const Matrix expected = (filt.Sigma[k] * m.C(t).transpose() + m.B2(t) * D.transpose()) /
                                (D * D.transpose())(0, 0);
        EXPECT_LT((filt.L[k] - expected).cwiseAbs().maxCoeff(), 1e-14);
    }
    for (const auto& s : filt.Sigma) {
        EXPECT_EQ(s, s.transpose());
        EXPECT_GE(Eigen::SelfAdjointEigenSolver<Matrix>(s).eigenvalues().minCoeff(), 0.0);
    }
}

TEST(FilterRiccati, SingularObservationNoiseIsReported) {
    SystemModel m = scalar_plant();
    m.D = MatrixSchedule::polynomial({row(0.0, 1.0), row(0.0, -2.0)});  // D(1/2) = 0
    const TimeGrid g(1.0, 10);
    try {
        solve_filter_riccati(m, g);
        FAIL() << "expected SynthesisFailure";
    } catch (const SynthesisFailure& e) {
        EXPECT_EQ(e.node(), 5);
    }
}

TEST(Schedules, CsvLayout) {
    const TimeGrid g(1.0, 1);
    GainSchedule s{Matrix::Constant(1, 2, 1.0), Matrix::Constant(1, 2, 0.5)};
    std::ostringstream out;
    write_schedule_csv(out, "K", g, s);
    EXPECT_EQ(out.str(), "t,K_0_0,K_0_1\n0,1,1\n1,0.5,0.5\n");
}
