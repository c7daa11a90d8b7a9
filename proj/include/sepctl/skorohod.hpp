#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "sepctl/errors.hpp"
#include "sepctl/path.hpp"

namespace sepctl {

// Skorohod J1 distance restricted to monotone time warps whose breakpoints sit
// on grid nodes:
//
//   min over monotone alignments (i_r, j_r) from (0,0) to (N,N) of
//   max_r max(|t_{i_r} - t_{j_r}|, |x(t_{i_r}) - y(t_{j_r})|).
//
// Solved as a bottleneck path problem. Cells farther from the diagonal than
// the sup-norm distance can never improve on the identity warp and are skipped.
inline double skorohod_distance(const SamplePath& x, const SamplePath& y) {
    if (!(x.grid() == y.grid()) || x.dim() != y.dim())
        throw InvalidArgument("Skorohod distance needs paths on the same grid and dimension");
    const auto& grid = x.grid();
    const int n = grid.nodes();
    const double sup = sup_distance(x, y);
    if (sup == 0.0) return 0.0;
    const int band = std::min(n - 1, static_cast<int>(std::ceil(sup / grid.dt())) + 1);
    constexpr double inf = std::numeric_limits<double>::infinity();

    auto cost = [&](int i, int j) {
        return std::max(std::abs(grid.t(i) - grid.t(j)), (x.at(i) - y.at(j)).norm());
    };

    std::vector<double> prev(static_cast<std::size_t>(n), inf), cur(static_cast<std::size_t>(n), inf);
    for (int i = 0; i < n; ++i) {
        std::fill(cur.begin(), cur.end(), inf);
        const int lo = std::max(0, i - band), hi = std::min(n - 1, i + band);
        for (int j = lo; j <= hi; ++j) {
            double best;
            if (i == 0 && j == 0) {
                best = 0.0;
            } else {
                best = inf;
                if (i > 0) best = std::min(best, prev[static_cast<std::size_t>(j)]);
                if (j > 0) best = std::min(best, cur[static_cast<std::size_t>(j - 1)]);
                if (i > 0 && j > 0) best = std::min(best, prev[static_cast<std::size_t>(j - 1)]);
            }
            cur[static_cast<std::size_t>(j)] = std::max(best, cost(i, j));
        }
        std::swap(prev, cur);
    }
    return std::min(prev[static_cast<std::size_t>(n - 1)], sup);
}

}  // namespace sepctl
