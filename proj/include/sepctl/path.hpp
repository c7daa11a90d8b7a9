#pragma once

#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sepctl/errors.hpp"
#include "sepctl/grid.hpp"

namespace sepctl {

// Right-continuous vector trajectory sampled on a grid.
//
// Column k holds the value at t_k (the right limit). The left limit at t_k,
// k >= 1, is the value stored at node k-1.
class SamplePath {
public:
    SamplePath(TimeGrid grid, Eigen::Index dim)
        : grid_(grid), values_(Eigen::MatrixXd::Zero(dim, grid.nodes())) {}

    SamplePath(TimeGrid grid, Eigen::MatrixXd values) : grid_(grid), values_(std::move(values)) {
        if (values_.cols() != grid_.nodes())
            throw InvalidArgument("sample path has " + std::to_string(values_.cols()) +
                                  " columns for a grid with " + std::to_string(grid_.nodes()) + " nodes");
    }

    const TimeGrid& grid() const noexcept { return grid_; }
    Eigen::Index dim() const noexcept { return values_.rows(); }
    int nodes() const noexcept { return static_cast<int>(values_.cols()); }

    auto at(int k) const { return values_.col(k); }
    auto at(int k) { return values_.col(k); }
    double operator()(Eigen::Index i, int k) const { return values_(i, k); }
    double& operator()(Eigen::Index i, int k) { return values_(i, k); }

    auto left_limit(int k) const {
        if (k < 1) throw InvalidArgument("left limit is undefined at t_0");
        return values_.col(k - 1);
    }

    // Increment from t_k to t_{k+1}.
    Eigen::VectorXd increment(int k) const { return values_.col(k + 1) - values_.col(k); }

    const Eigen::MatrixXd& values() const noexcept { return values_; }
    Eigen::MatrixXd& values() noexcept { return values_; }

    bool all_finite() const { return values_.allFinite(); }

    friend bool operator==(const SamplePath& a, const SamplePath& b) {
        return a.grid_ == b.grid_ && a.values_.rows() == b.values_.rows() &&
               a.values_.cols() == b.values_.cols() && a.values_ == b.values_;
    }

private:
    TimeGrid grid_;
    Eigen::MatrixXd values_;
};

inline double sup_distance(const SamplePath& a, const SamplePath& b) {
    if (!(a.grid() == b.grid()) || a.dim() != b.dim())
        throw InvalidArgument("sup distance needs paths on the same grid and dimension");
    double d = 0.0;
    for (int k = 0; k < a.nodes(); ++k) d = std::max(d, (a.at(k) - b.at(k)).norm());
    return d;
}

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Short form for labels.
inline std::string format_short(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace detail

// Writes `t,<name>_0,...,<name>_{d-1}` followed by one row per node.
// Several paths on the same grid may be written side by side.
inline void write_paths_csv(std::ostream& out,
                            const std::vector<std::pair<std::string, const SamplePath*>>& columns) {
    if (columns.empty()) throw InvalidArgument("no paths to write");
    const TimeGrid& grid = columns.front().second->grid();
    for (const auto& [name, path] : columns)
        if (!(path->grid() == grid)) throw InvalidArgument("paths written together must share a grid");
    out << 't';
    for (const auto& [name, path] : columns)
        for (Eigen::Index i = 0; i < path->dim(); ++i) out << ',' << name << '_' << i;
    out << '\n';
    for (int k = 0; k < grid.nodes(); ++k) {
        out << detail::format_double(grid.t(k));
        for (const auto& [name, path] : columns)
            for (Eigen::Index i = 0; i < path->dim(); ++i) out << ',' << detail::format_double((*path)(i, k));
        out << '\n';
    }
}

inline void write_path_csv(std::ostream& out, const std::string& name, const SamplePath& path) {
    write_paths_csv(out, {{name, &path}});
}

inline void write_path_csv(const std::string& file, const std::string& name, const SamplePath& path) {
    std::ofstream out(file);
    if (!out) throw IoError("cannot open " + file + " for writing");
    write_path_csv(out, name, path);
    if (!out) throw IoError("failed writing " + file);
}

}  // namespace sepctl
