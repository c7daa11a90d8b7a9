#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace sepctl;

namespace {

// Random kernel with zero diagonal blocks.
VolterraKernel strictly_causal_kernel(const TimeGrid& g, Eigen::Index d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss;
    VolterraKernel Q(g, d, d);
    for (int k = 0; k < g.nodes(); ++k)
        for (int j = 0; j < k; ++j)
            for (Eigen::Index a = 0; a < d; ++a)
                for (Eigen::Index b = 0; b < d; ++b) Q.block(k, j)(a, b) = gauss(rng);
    return Q;
}

}  // namespace

TEST(Resolvent, ConstantKernelHasExponentialResolvent) {
    // Q = c: R(t, s) = c exp(c (t - s)).
    const double c = 0.7;
    const TimeGrid g(1.0, 1000);
    const auto Q = VolterraKernel::sample(g, 1, 1, [&](double, double) { return Matrix::Constant(1, 1, c); });
    const VolterraKernel R = volterra_resolvent(Q);
    double err = 0.0;
    for (int k = 0; k < g.nodes(); ++k)
        for (int j = 0; j <= k; ++j) err = std::max(err, std::abs(R.block(k, j)(0, 0) - c * std::exp(c * (g.t(k) - g.t(j)))));
    EXPECT_LT(err, 1e-6);
}

TEST(Resolvent, SeparableKernel) {
    // Q(t, s) = a(t) b(s) with a = e^t, b = 1: R(t, s) = e^t exp(e^t - e^s).
    const TimeGrid g(1.0, 2000);
    const auto Q = VolterraKernel::sample(g, 1, 1, [](double t, double) { return Matrix::Constant(1, 1, std::exp(t)); });
    const VolterraKernel R = volterra_resolvent(Q);
    double err = 0.0;
    for (int k = 0; k < g.nodes(); k += 7)
        for (int j = 0; j <= k; j += 5) {
            const double t = g.t(k), s = g.t(j);
            err = std::max(err, std::abs(R.block(k, j)(0, 0) - std::exp(t) * std::exp(std::exp(t) - std::exp(s))));
        }
    EXPECT_LT(err, 1e-5);
}

TEST(Resolvent, InverseIdentityForStrictlyCausalKernel) {
    const TimeGrid g(1.0, 200);
    const VolterraKernel Q = strictly_causal_kernel(g, 2, 42);
    const VolterraKernel R = volterra_resolvent(Q);
    const Eigen::MatrixXd q = induced_operator(Q), r = induced_operator(R);
    const auto I = Eigen::MatrixXd::Identity(q.rows(), q.cols());
    EXPECT_LT(((I + r) * (I - q) - I).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(((I - q) * (I + r) - I).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Resolvent, DiagonalLoadingLeavesKnownResidual) {
    // With Q(t, t) != 0 the diagonal blocks of (I + R~)(I - Q~) - I equal
    // -(dt/2)^2 R(t,t) Q(t,t) because R(t, t) = Q(t, t).
    const TimeGrid g(1.0, 200);
    VolterraKernel Q = strictly_causal_kernel(g, 2, 7);
    Matrix diag(2, 2);
    diag << 0.3, -0.1, 0.2, 0.5;
    for (int k = 0; k < g.nodes(); ++k) Q.block(k, k) = diag;
    const VolterraKernel R = volterra_resolvent(Q);
    for (int k = 0; k < g.nodes(); k += 50) EXPECT_EQ(Matrix(R.block(k, k)), diag);
    const Eigen::MatrixXd q = induced_operator(Q), r = induced_operator(R);
    const auto I = Eigen::MatrixXd::Identity(q.rows(), q.cols());
    const Eigen::MatrixXd res = (I + r) * (I - q) - I;
    const double h = 0.5 * g.dt();
    const Matrix expected = -h * h * diag * diag;
    double off = 0.0, on = 0.0;
    for (int k = 0; k < g.nodes(); ++k)
        for (int j = 0; j <= k; ++j) {
            const Matrix b = res.block(2 * k, 2 * j, 2, 2);
            if (j == k)
                on = std::max(on, (b - expected).cwiseAbs().maxCoeff());
            else
                off = std::max(off, b.cwiseAbs().maxCoeff());
        }
    EXPECT_LT(on, 1e-15);
    EXPECT_LT(off, 1e-12);
}

TEST(Resolvent, ApplyMatchesLoopRecursion) {
    // dz_m = dz0_m + dt sum_{j<m} Q_mj dz_j solved by forward substitution.
    const TimeGrid g(1.0, 150);
    const VolterraKernel Q = strictly_causal_kernel(g, 3, 9);
    const VolterraKernel R = volterra_resolvent(Q);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> gauss;
    SamplePath z0(g, 3);
    for (int k = 0; k < g.steps(); ++k)
        for (int i = 0; i < 3; ++i) z0(i, k + 1) = z0(i, k) + std::sqrt(g.dt()) * gauss(rng);
    z0.at(0) = Vector::Constant(3, 0.5);
    for (int k = 1; k <= g.steps(); ++k) z0.at(k) += Vector::Constant(3, 0.5);

    Eigen::MatrixXd dz(3, g.steps());
    SamplePath z(g, 3);
    z.at(0) = z0.at(0);
    for (int m = 0; m < g.steps(); ++m) {
        Vector acc = z0.increment(m);
        for (int j = 0; j < m; ++j) acc += g.dt() * Q.block(m, j) * dz.col(j);
        dz.col(m) = acc;
        z.at(m + 1) = z.at(m) + acc;
    }
    const SamplePath viaR = apply_resolvent(z0, R);
    EXPECT_LT(sup_distance(z, viaR), 1e-11);
}

TEST(Resolvent, RejectsBadShapes) {
    const TimeGrid g(1.0, 4);
    EXPECT_THROW(volterra_resolvent(VolterraKernel(g, 2, 1)), InvalidArgument);
    VolterraKernel V(g, 1, 1);
    EXPECT_THROW(V.block(1, 2), InvalidArgument);
    EXPECT_THROW(apply_resolvent(SamplePath(g, 2), V), InvalidArgument);
}

TEST(Resolvent, KernelCsv) {
    const TimeGrid g(1.0, 1);
    const auto V = VolterraKernel::sample(g, 1, 1, [](double t, double s) { return Matrix::Constant(1, 1, t - s); });
    std::ostringstream out;
    write_kernel_csv(out, "V", V);
    EXPECT_EQ(out.str(), "t,s,V_0_0\n0,0,0\n1,0,1\n1,1,0\n");
}
