#pragma once

#include <cmath>

#include "sepctl/errors.hpp"

namespace sepctl {

// Uniform grid t_k = k * dt on [0, T], k = 0..N.
class TimeGrid {
public:
    TimeGrid(double horizon, int steps) : horizon_(horizon), steps_(steps) {
        if (!(horizon > 0.0) || !std::isfinite(horizon))
            throw InvalidArgument("time grid horizon must be positive and finite");
        if (steps < 1) throw InvalidArgument("time grid needs at least one step");
        dt_ = horizon / steps;
    }

    double horizon() const noexcept { return horizon_; }
    int steps() const noexcept { return steps_; }
    int nodes() const noexcept { return steps_ + 1; }
    double dt() const noexcept { return dt_; }

    // The last node is pinned to T so that t_N == T exactly.
    double t(int k) const noexcept { return k == steps_ ? horizon_ : k * dt_; }

    // Smallest node index k with t_k >= time (clamped to [0, N]).
    int node_at_or_after(double time) const noexcept {
        if (time <= 0.0) return 0;
        if (time >= horizon_) return steps_;
        int k = static_cast<int>(std::ceil(time / dt_ - 1e-12));
        if (k > steps_) k = steps_;
        return k;
    }

    friend bool operator==(const TimeGrid& a, const TimeGrid& b) noexcept {
        return a.horizon_ == b.horizon_ && a.steps_ == b.steps_;
    }

private:
    double horizon_;
    int steps_;
    double dt_;
};

inline TimeGrid build_grid(double horizon, int steps) { return TimeGrid(horizon, steps); }

}  // namespace sepctl
