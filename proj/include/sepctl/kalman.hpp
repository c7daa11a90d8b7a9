#pragma once

#include <Eigen/Dense>

#include "sepctl/errors.hpp"
#include "sepctl/model.hpp"
#include "sepctl/path.hpp"
#include "sepctl/synthesis.hpp"

namespace sepctl {

struct FilterRun {
    SamplePath xhat;                   // n-dim estimate
    Eigen::MatrixXd innovation_steps;  // p x N, dy - C xhat dt per step
    const FilterSynthesis* gains = nullptr;
};

// One Euler step of the Kalman-Bucy filter; also used inside the separated
// control law so that both produce identical estimates.
class KalmanStepper {
public:
    KalmanStepper(const SampledModel& model, const FilterSynthesis& filt)
        : model_(&model), filt_(&filt), ax_(model.n()), cx_(model.p()), innov_(model.p()), corr_(model.n()) {
        if (!(filt.grid == model.grid)) throw InvalidArgument("filter gains live on a different grid");
    }

    // Returns the innovation dy - C xhat dt and writes the next estimate.
    const Vector& step(int k, const Eigen::Ref<const Vector>& xhat, const Eigen::Ref<const Vector>& u,
                       const Eigen::Ref<const Vector>& dy, Eigen::Ref<Vector> xhat_next) {
        const auto& m = *model_;
        const auto ku = static_cast<std::size_t>(k);
        const double dt = m.grid.dt();
        cx_.noalias() = m.C[ku] * xhat;
        innov_ = dy - cx_ * dt;
        ax_.noalias() = m.A[ku] * xhat;
        ax_.noalias() += m.B1[ku] * u;
        corr_.noalias() = filt_->L[ku] * innov_;
        xhat_next = xhat + ax_ * dt + corr_;
        return innov_;
    }

private:
    const SampledModel* model_;
    const FilterSynthesis* filt_;
    Vector ax_, cx_, innov_, corr_;
};

// Left-point propagation of
//   dxhat = A xhat dt + B1 u dt + L (dy - C xhat dt),  xhat(0) = E x(0).
inline FilterRun run_kalman_filter(const SampledModel& model, const FilterSynthesis& filt, const SamplePath& y,
                                   const SamplePath& u) {
    if (!(y.grid() == model.grid) || y.dim() != model.p())
        throw InvalidArgument("observation path must live on the model grid with dimension p");
    if (!(u.grid() == model.grid) || u.dim() != model.m())
        throw InvalidArgument("input path must live on the model grid with dimension m");
    FilterRun run{SamplePath(model.grid, model.n()), Eigen::MatrixXd::Zero(model.p(), model.grid.steps()), &filt};
    run.xhat.at(0) = model.x0.mean;
    KalmanStepper stepper(model, filt);
    Vector dy(model.p());
    for (int k = 0; k < model.grid.steps(); ++k) {
        dy = y.at(k + 1) - y.at(k);
        run.innovation_steps.col(k) = stepper.step(k, run.xhat.at(k), u.at(k), dy, run.xhat.at(k + 1));
        if (!run.xhat.at(k + 1).allFinite()) throw NumericalBlowup("Kalman filter estimate became non-finite", k + 1);
    }
    return run;
}

// Cumulative innovation v(t_k) = sum_{j<k} (dy_j - C xhat_j dt), v(0) = 0.
inline SamplePath innovation_path(const FilterRun& run) {
    const TimeGrid& grid = run.xhat.grid();
    SamplePath v(grid, run.innovation_steps.rows());
    for (int k = 0; k < grid.steps(); ++k) v.at(k + 1) = v.at(k) + run.innovation_steps.col(k);
    return v;
}

}  // namespace sepctl
