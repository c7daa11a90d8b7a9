#pragma once

#include <utility>

#include <Eigen/Dense>

#include "sepctl/errors.hpp"
#include "sepctl/model.hpp"
#include "sepctl/noise.hpp"
#include "sepctl/path.hpp"

namespace sepctl {

// Left-point (Ito) Euler-Maruyama step of the plant, shared by every
// simulation path in the library so that identical inputs give
// bit-identical trajectories regardless of who drives the loop.
class PlantStepper {
public:
    explicit PlantStepper(const SampledModel& model)
        : model_(&model), ax_(model.n()), bw_(model.n()), cx_(model.p()), dw_(model.p()) {}

    // x_next = x + (A x + B1 u) dt + B2 dw,  y_next = y + C x dt + D dw.
    void step(int k, const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y,
              const Eigen::Ref<const Vector>& u, const Eigen::Ref<const Vector>& dw, Eigen::Ref<Vector> x_next,
              Eigen::Ref<Vector> y_next) {
        const auto& m = *model_;
        const auto ku = static_cast<std::size_t>(k);
        const double dt = m.grid.dt();
        ax_.noalias() = m.A[ku] * x;
        ax_.noalias() += m.B1[ku] * u;
        bw_.noalias() = m.B2[ku] * dw;
        x_next = x + ax_ * dt + bw_;
        cx_.noalias() = m.C[ku] * x;
        dw_.noalias() = m.D[ku] * dw;
        y_next = y + cx_ * dt + dw_;
    }

private:
    const SampledModel* model_;
    Vector ax_, bw_, cx_, dw_;
};

struct Trajectory {
    SamplePath x;
    SamplePath y;
};

inline void check_noise_matches(const SampledModel& model, const NoisePath& noise) {
    if (!(noise.grid() == model.grid)) throw InvalidArgument("noise path lives on a different grid");
    if (noise.dims() != model.q())
        throw InvalidArgument("noise has " + std::to_string(noise.dims()) + " dims, model expects " +
                              std::to_string(model.q()));
}

// Open-loop response to a given input path u (dimension m) and initial state.
inline Trajectory simulate_open_loop(const SampledModel& model, const NoisePath& noise, const SamplePath& u,
                                     const Vector& x0) {
    check_noise_matches(model, noise);
    if (!(u.grid() == model.grid) || u.dim() != model.m())
        throw InvalidArgument("input path must live on the model grid with dimension m");
    if (x0.size() != model.n()) throw InvalidArgument("initial state has the wrong dimension");
    Trajectory tr{SamplePath(model.grid, model.n()), SamplePath(model.grid, model.p())};
    tr.x.at(0) = x0;
    PlantStepper stepper(model);
    for (int k = 0; k < model.grid.steps(); ++k) {
        stepper.step(k, tr.x.at(k), tr.y.at(k), u.at(k), noise.increment(k), tr.x.at(k + 1), tr.y.at(k + 1));
        if (!tr.x.at(k + 1).allFinite() || !tr.y.at(k + 1).allFinite())
            throw NumericalBlowup("open-loop simulation produced a non-finite state", k + 1);
    }
    return tr;
}

inline Trajectory simulate_open_loop(const SystemModel& model, const NoisePath& noise, const SamplePath& u,
                                     const Vector& x0) {
    return simulate_open_loop(sample_model(model, noise.grid()), noise, u, x0);
}

}  // namespace sepctl
