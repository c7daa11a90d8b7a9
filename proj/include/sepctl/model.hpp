#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sepctl/errors.hpp"
#include "sepctl/grid.hpp"
#include "sepctl/random.hpp"
#include "sepctl/schedule.hpp"

namespace sepctl {

// Law of x(0): deterministic when the covariance is zero, Gaussian otherwise.
struct InitialState {
    Vector mean;
    Matrix covariance;

    static InitialState deterministic(Vector x0) {
        const auto n = x0.size();
        return {std::move(x0), Matrix::Zero(n, n)};
    }
    static InitialState gaussian(Matrix cov) {
        const auto n = cov.rows();
        return {Vector::Zero(n), std::move(cov)};
    }
    bool is_deterministic() const { return covariance.isZero(0.0); }
};

// dx = A x dt + B1 u dt + B2 dw,  dy = C x dt + D dw,  y(0) = 0.
struct SystemModel {
    MatrixSchedule A, B1, B2, C, D;
    InitialState x0;
    // When set, B2(t) D(t)' must vanish at every node.
    bool independent_noise = false;

    Eigen::Index n() const { return A.rows(); }
    Eigen::Index m() const { return B1.cols(); }
    Eigen::Index p() const { return C.rows(); }
    Eigen::Index q() const { return B2.cols(); }

    void check_shapes() const {
        const auto nn = n();
        auto need = [](bool ok, const std::string& what) {
            if (!ok) throw InvalidArgument("system model: " + what);
        };
        need(A.cols() == nn, "A must be square");
        need(B1.rows() == nn, "B1 must have n rows");
        need(B2.rows() == nn, "B2 must have n rows");
        need(C.cols() == nn, "C must have n columns");
        need(D.rows() == p(), "D must have p rows");
        need(D.cols() == q(), "D must have as many columns as B2");
        need(x0.mean.size() == nn, "initial mean must have n entries");
        need(x0.covariance.rows() == nn && x0.covariance.cols() == nn, "initial covariance must be n x n");
    }
};

struct CostSpec {
    MatrixSchedule Q, R;
    Matrix S;
};

// Model matrices evaluated at every node of a grid.
struct SampledModel {
    TimeGrid grid;
    std::vector<Matrix> A, B1, B2, C, D;
    InitialState x0;

    Eigen::Index n() const { return A.front().rows(); }
    Eigen::Index m() const { return B1.front().cols(); }
    Eigen::Index p() const { return C.front().rows(); }
    Eigen::Index q() const { return B2.front().cols(); }
};

inline std::vector<Matrix> sample_schedule(const MatrixSchedule& s, const TimeGrid& grid) {
    std::vector<Matrix> out;
    out.reserve(static_cast<std::size_t>(grid.nodes()));
    for (int k = 0; k < grid.nodes(); ++k) {
        out.push_back(s(grid.t(k)));
        if (!out.back().allFinite()) throw NumericalBlowup("schedule evaluates to a non-finite value", k);
    }
    return out;
}

inline SampledModel sample_model(const SystemModel& model, const TimeGrid& grid) {
    model.check_shapes();
    return {grid,
            sample_schedule(model.A, grid),
            sample_schedule(model.B1, grid),
            sample_schedule(model.B2, grid),
            sample_schedule(model.C, grid),
            sample_schedule(model.D, grid),
            model.x0};
}

struct SymmetricCheck {
    bool symmetric = true;
    double min_eigenvalue = 0.0;
};

inline SymmetricCheck inspect_symmetric(const Matrix& m, double rel_tol = 1e-10) {
    SymmetricCheck c;
    const double scale = 1.0 + m.cwiseAbs().maxCoeff();
    c.symmetric = m.rows() == m.cols() && (m - m.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
    if (m.rows() == m.cols() && m.rows() > 0) {
        Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
        c.min_eigenvalue = es.eigenvalues().minCoeff();
    }
    return c;
}

struct NoiseConditioning {
    double max_condition = 1.0;  // of D D'
    int worst_node = 0;
};

// Condition number of D D' over the grid. Throws when it is singular or when
// the independence flag is set and B2 D' does not vanish.
inline NoiseConditioning check_noise(const SystemModel& model, const TimeGrid& grid,
                                     double max_condition = 1e12) {
    model.check_shapes();
    NoiseConditioning out;
    for (int k = 0; k < grid.nodes(); ++k) {
        const double t = grid.t(k);
        const Matrix D = model.D(t);
        const Matrix DDt = D * D.transpose();
        Eigen::SelfAdjointEigenSolver<Matrix> es(DDt, Eigen::EigenvaluesOnly);
        const double lo = es.eigenvalues().minCoeff();
        const double hi = es.eigenvalues().maxCoeff();
        const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
        if (cond > out.max_condition) {
            out.max_condition = cond;
            out.worst_node = k;
        }
        if (!(cond <= max_condition))
            throw SynthesisFailure("D D' is singular or ill-conditioned (cond " + std::to_string(cond) + ")", k);
        if (model.independent_noise) {
            const Matrix cross = model.B2(t) * D.transpose();
            if (cross.cwiseAbs().maxCoeff() > 1e-12 * (1.0 + cross.size()))
                throw InvalidArgument("independent noise flag set but B2 D' != 0 at node " + std::to_string(k));
        }
    }
    return out;
}

struct CostCheck {
    double min_eigenvalue_R = std::numeric_limits<double>::infinity();
    int worst_node_R = 0;
};

// Q symmetric PSD, R symmetric PD, S symmetric PSD at every node.
inline CostCheck check_cost(const CostSpec& cost, const TimeGrid& grid, Eigen::Index n, Eigen::Index m) {
    CostCheck out;
    if (cost.Q.rows() != n || cost.Q.cols() != n) throw InvalidArgument("cost Q must be n x n");
    if (cost.R.rows() != m || cost.R.cols() != m) throw InvalidArgument("cost R must be m x m");
    if (cost.S.rows() != n || cost.S.cols() != n) throw InvalidArgument("cost S must be n x n");
    for (int k = 0; k < grid.nodes(); ++k) {
        const double t = grid.t(k);
        const auto q = inspect_symmetric(cost.Q(t));
        if (!q.symmetric || q.min_eigenvalue < -1e-12)
            throw InvalidArgument("cost Q is not symmetric positive semidefinite at node " + std::to_string(k));
        const auto r = inspect_symmetric(cost.R(t));
        if (!r.symmetric || !(r.min_eigenvalue > 0.0))
            throw InvalidArgument("cost R is not symmetric positive definite at node " + std::to_string(k));
        if (r.min_eigenvalue < out.min_eigenvalue_R) {
            out.min_eigenvalue_R = r.min_eigenvalue;
            out.worst_node_R = k;
        }
    }
    const auto s = inspect_symmetric(cost.S);
    if (!s.symmetric || s.min_eigenvalue < -1e-12)
        throw InvalidArgument("terminal weight S is not symmetric positive semidefinite");
    return out;
}

inline Vector draw_initial_state(const InitialState& law, Engine& rng) {
    if (law.is_deterministic()) return law.mean;
    Eigen::LDLT<Matrix> ldlt(law.covariance);
    if (ldlt.info() != Eigen::Success) throw InvalidArgument("initial covariance factorization failed");
    std::normal_distribution<double> gauss;
    Vector z(law.mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = gauss(rng);
    // cov = P' L D L' P; sample = P' L sqrt(D) z
    Vector d = ldlt.vectorD().cwiseMax(0.0).cwiseSqrt();
    Vector y = ldlt.matrixL() * d.cwiseProduct(z).eval();
    return law.mean + ldlt.transpositionsP().transpose() * y;
}

inline Vector draw_initial_state(const InitialState& law, std::uint64_t seed) {
    Engine rng = make_engine(seed, streams::initial_state);
    return draw_initial_state(law, rng);
}

}  // namespace sepctl
