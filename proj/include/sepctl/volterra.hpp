#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sepctl/errors.hpp"
#include "sepctl/grid.hpp"
#include "sepctl/path.hpp"

namespace sepctl {

// Lower-triangular two-time kernel V(t_k, t_j), j <= k, with r x c blocks.
class VolterraKernel {
public:
    using Block = Eigen::Map<Eigen::MatrixXd>;
    using ConstBlock = Eigen::Map<const Eigen::MatrixXd>;

    VolterraKernel(TimeGrid grid, Eigen::Index rows, Eigen::Index cols)
        : grid_(grid), rows_(rows), cols_(cols) {
        const auto n = static_cast<std::size_t>(grid.nodes());
        data_.assign(n * (n + 1) / 2 * static_cast<std::size_t>(rows * cols), 0.0);
    }

    // Samples f(t, s) on every node pair s <= t.
    static VolterraKernel sample(TimeGrid grid, Eigen::Index rows, Eigen::Index cols,
                                 const std::function<Eigen::MatrixXd(double, double)>& f) {
        VolterraKernel out(grid, rows, cols);
        for (int k = 0; k < grid.nodes(); ++k)
            for (int j = 0; j <= k; ++j) {
                Eigen::MatrixXd v = f(grid.t(k), grid.t(j));
                if (v.rows() != rows || v.cols() != cols) throw InvalidArgument("kernel function returned a wrong shape");
                out.block(k, j) = v;
            }
        return out;
    }

    const TimeGrid& grid() const noexcept { return grid_; }
    Eigen::Index block_rows() const noexcept { return rows_; }
    Eigen::Index block_cols() const noexcept { return cols_; }
    int nodes() const noexcept { return grid_.nodes(); }

    Block block(int k, int j) { return Block(ptr(k, j), rows_, cols_); }
    ConstBlock block(int k, int j) const { return ConstBlock(ptr(k, j), rows_, cols_); }
    double* raw(int k, int j) { return ptr(k, j); }
    const double* raw(int k, int j) const { return ptr(k, j); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::size_t offset(int k, int j) const {
        if (j > k || j < 0 || k >= grid_.nodes()) throw InvalidArgument("kernel block index outside the lower triangle");
        const auto kk = static_cast<std::size_t>(k);
        return (kk * (kk + 1) / 2 + static_cast<std::size_t>(j)) * static_cast<std::size_t>(rows_ * cols_);
    }
    double* ptr(int k, int j) { return data_.data() + offset(k, j); }
    const double* ptr(int k, int j) const { return data_.data() + offset(k, j); }

    TimeGrid grid_;
    Eigen::Index rows_, cols_;
    std::vector<double> data_;
};

namespace detail {

// acc (r x c) += alpha * a (r x s) * b (s x c), column-major raw blocks.
inline void block_gemm_acc(double* acc, const double* a, const double* b, Eigen::Index r, Eigen::Index s,
                           Eigen::Index c, double alpha) {
    if (r == 1 && s == 1 && c == 1) {
        acc[0] += alpha * a[0] * b[0];
        return;
    }
    for (Eigen::Index j = 0; j < c; ++j)
        for (Eigen::Index l = 0; l < s; ++l) {
            const double blj = alpha * b[l + j * s];
            if (blj == 0.0) continue;
            for (Eigen::Index i = 0; i < r; ++i) acc[i + j * r] += a[i + l * r] * blj;
        }
}

}  // namespace detail

// Resolvent of a square kernel Q: the solution R of
//
//   R(t, s) = Q(t, s) + int_s^t R(t, tau) Q(tau, s) dtau
//
// discretized with the trapezoidal rule on [t_j, t_k]. Row k is solved from
// the diagonal R(t_k, t_k) = Q(t_k, t_k) backwards in j; the implicit end term
// at tau = s is handled by a right solve against (I - dt/2 Q(t_j, t_j)).
inline VolterraKernel volterra_resolvent(const VolterraKernel& Q) {
    if (Q.block_rows() != Q.block_cols()) throw InvalidArgument("resolvent needs a square kernel");
    const auto d = Q.block_rows();
    const auto bs = static_cast<std::size_t>(d * d);
    const int n = Q.nodes();
    const double dt = Q.grid().dt();
    VolterraKernel R(Q.grid(), d, d);

    // (I - dt/2 Q_jj)^{-1}, identity for strictly causal kernels.
    std::vector<Eigen::MatrixXd> end_solve(static_cast<std::size_t>(n));
    bool has_diagonal = false;
    for (int j = 0; j < n; ++j) {
        const Eigen::MatrixXd qjj = Q.block(j, j);
        if (!qjj.isZero(0.0)) has_diagonal = true;
        end_solve[static_cast<std::size_t>(j)] =
            (Eigen::MatrixXd::Identity(d, d) - 0.5 * dt * qjj).inverse();
    }

    std::vector<double> acc;
    Eigen::MatrixXd tmp(d, d);
    for (int k = 0; k < n; ++k) {
        R.block(k, k) = Q.block(k, k);
        if (k == 0) continue;
        acc.assign(static_cast<std::size_t>(k) * bs, 0.0);
        for (int j = 0; j < k; ++j) {
            std::copy(Q.raw(k, j), Q.raw(k, j) + bs, acc.data() + static_cast<std::size_t>(j) * bs);
            if (has_diagonal)
                detail::block_gemm_acc(acc.data() + static_cast<std::size_t>(j) * bs, R.raw(k, k), Q.raw(k, j), d, d, d,
                                       0.5 * dt);
        }
        for (int i = k - 1; i >= 0; --i) {
            Eigen::Map<Eigen::MatrixXd> ai(acc.data() + static_cast<std::size_t>(i) * bs, d, d);
            if (has_diagonal) {
                tmp.noalias() = ai * end_solve[static_cast<std::size_t>(i)];
                R.block(k, i) = tmp;
            } else {
                R.block(k, i) = ai;
            }
            const double* rki = R.raw(k, i);
            for (int j = 0; j < i; ++j)
                detail::block_gemm_acc(acc.data() + static_cast<std::size_t>(j) * bs, rki, Q.raw(i, j), d, d, d, dt);
        }
    }
    if (!R.all_finite()) throw NumericalBlowup("resolvent kernel became non-finite", 0);
    return R;
}

// Block lower-triangular matrix of the quadrature operator
// (V f)(t_k) ~ sum_j w_kj V(t_k, t_j) f(t_j), with w = dt below the diagonal
// and dt/2 on it. For strictly causal kernels (zero diagonal) the resolvent
// above satisfies (I + R~)(I - Q~) = I exactly on the grid.
inline Eigen::MatrixXd induced_operator(const VolterraKernel& V) {
    const auto r = V.block_rows(), c = V.block_cols();
    const int n = V.nodes();
    const double dt = V.grid().dt();
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n * r, n * c);
    for (int k = 0; k < n; ++k)
        for (int j = 0; j <= k; ++j) M.block(k * r, j * c, r, c) = (j == k ? 0.5 * dt : dt) * V.block(k, j);
    return M;
}

// z(t_k) = z0(t_k) + sum_{j<k} W_kj dz0_j,  W_kj = dt sum_{j<m<k} R(t_m, t_j):
// the left-point (Ito) rendering of z = z0 + int_0^t int_s^t R(r, s) dr dz0(s).
inline SamplePath apply_resolvent(const SamplePath& z0, const VolterraKernel& R) {
    if (!(z0.grid() == R.grid())) throw InvalidArgument("path and kernel live on different grids");
    if (R.block_rows() != z0.dim() || R.block_cols() != z0.dim())
        throw InvalidArgument("resolvent blocks must match the path dimension");
    const auto d = z0.dim();
    const int n = z0.nodes();
    const double dt = z0.grid().dt();
    Eigen::MatrixXd dz0(d, std::max(0, n - 1));
    for (int j = 0; j + 1 < n; ++j) dz0.col(j) = z0.at(j + 1) - z0.at(j);

    SamplePath z(z0.grid(), d);
    Eigen::VectorXd corr = Eigen::VectorXd::Zero(d);
    Eigen::VectorXd s(d);
    z.at(0) = z0.at(0);
    for (int m = 0; m + 1 < n; ++m) {
        s.setZero();
        for (int j = 0; j < m; ++j) detail::block_gemm_acc(s.data(), R.raw(m, j), dz0.col(j).data(), d, d, 1, 1.0);
        corr += dt * s;
        z.at(m + 1) = z0.at(m + 1) + corr;
    }
    return z;
}

// Block list: one row per (k, j) with the block entries in row-major order.
inline void write_kernel_csv(std::ostream& out, const std::string& name, const VolterraKernel& V) {
    out << "t,s";
    for (Eigen::Index i = 0; i < V.block_rows(); ++i)
        for (Eigen::Index j = 0; j < V.block_cols(); ++j) out << ',' << name << '_' << i << '_' << j;
    out << '\n';
    for (int k = 0; k < V.nodes(); ++k)
        for (int j = 0; j <= k; ++j) {
            out << detail::format_double(V.grid().t(k)) << ',' << detail::format_double(V.grid().t(j));
            const auto b = V.block(k, j);
            for (Eigen::Index r = 0; r < b.rows(); ++r)
                for (Eigen::Index c = 0; c < b.cols(); ++c) out << ',' << detail::format_double(b(r, c));
            out << '\n';
        }
}

}  // namespace sepctl
