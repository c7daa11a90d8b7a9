// Scalar LQG: Riccati synthesis, one closed-loop path and a small Monte Carlo
// cost estimate compared with the closed-form value.

#include <cstdio>
#include <memory>

#include "sepctl/sepctl.hpp"

int main() {
    using namespace sepctl;
    Matrix b2(1, 2), d(1, 2);
    b2 << 1.0, 0.0;
    d << 0.0, 0.5;
    SystemModel sys{MatrixSchedule::constant(Matrix::Constant(1, 1, 0.5)), MatrixSchedule::constant(Matrix::Ones(1, 1)),
                    MatrixSchedule::constant(b2), MatrixSchedule::constant(Matrix::Ones(1, 1)),
                    MatrixSchedule::constant(d), InitialState::gaussian(Matrix::Ones(1, 1)), true};
    CostSpec cost{MatrixSchedule::constant(Matrix::Ones(1, 1)), MatrixSchedule::constant(Matrix::Constant(1, 1, 0.1)),
                  Matrix::Ones(1, 1)};
    const TimeGrid grid(1.0, 1000);

    const ControlSynthesis ctrl = solve_control_riccati(sys, cost, grid);
    const FilterSynthesis filt = solve_filter_riccati(sys, grid);
    std::printf("P(0) = %.6f  K(0) = %.6f  Sigma(T) = %.6f  L(T) = %.6f\n", ctrl.P.front()(0, 0),
                ctrl.K.front()(0, 0), filt.Sigma.back()(0, 0), filt.L.back()(0, 0));

    auto model = std::make_shared<const SampledModel>(sample_model(sys, grid));
    auto K = std::make_shared<const GainSchedule>(ctrl.K);
    auto F = std::make_shared<const FilterSynthesis>(filt);
    SeparatedLqgLaw law(model, F, K);
    const NoiseSpec noise = NoiseSpec::wiener(2);

    const SampledCost c = sample_cost(cost, grid);
    const double target = full_information_cost(*model, ctrl) + estimation_cost_term(c, ctrl, filt);
    const ExperimentReport r = estimate_cost(*model, cost, law, noise, 2000, 1, Feedback::output, target);
    std::printf("J = %.5f +- %.5f, closed form %.5f, verdict %s\n", r.estimate("J").value, r.estimate("J").se, target,
                to_string(r.verdict));
    return r.passed() ? 0 : 1;
}
