#include <cmath>
#include <memory>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace sepctl;
using namespace sepctl::test;

namespace {

struct LqgSetup {
    std::shared_ptr<const SampledModel> model;
    std::shared_ptr<const FilterSynthesis> filt;
    std::shared_ptr<const GainSchedule> K;
};

// The plants used here start from a zero-mean state, so the separated law
// is exactly its kernel form.
LqgSetup make_setup(const SystemModel& plant, const CostSpec& cost, const TimeGrid& g) {
    return {std::make_shared<const SampledModel>(sample_model(plant, g)),
            std::make_shared<const FilterSynthesis>(solve_filter_riccati(plant, g)),
            std::make_shared<const GainSchedule>(solve_control_riccati(plant, cost, g).K)};
}

std::unique_ptr<ClassLLaw> kernel_law(const LqgSetup& s) {
    auto F = std::make_shared<const VolterraKernel>(separated_lqg_kernel(*s.model, *s.K, *s.filt));
    auto offset = std::make_shared<const SamplePath>(s.model->grid, s.model->m());
    return std::make_unique<ClassLLaw>(offset, F);
}

std::vector<LawPtr> all_laws(const LqgSetup& s) {
    std::vector<LawPtr> laws;
    laws.push_back(std::make_unique<ZeroLaw>(s.model->m()));
    laws.push_back(std::make_unique<SeparatedLqgLaw>(s.model, s.filt, s.K));
    laws.push_back(std::make_unique<SeparatedLqgLaw>(s.model, s.filt, s.K, 0.8));
    laws.push_back(kernel_law(s));
    laws.push_back(std::make_unique<DelayedLaw>(std::make_unique<SeparatedLqgLaw>(s.model, s.filt, s.K), 7));
    laws.push_back(std::make_unique<CustomLaw>("saturated", 1, [](int k, const ObservationHistory& obs, Eigen::Ref<Vector> u) {
        u(0) = std::tanh(obs.at(k)(0)) - 0.5 * (k > 0 ? obs.at(k - 1)(0) : 0.0);
    }));
    return laws;
}

}  // namespace

TEST(ObservationHistory, EnforcesVisibilityAndDelay) {
    Eigen::MatrixXd data(1, 5);
    data << 1, 2, 3, 4, 5;
    const ObservationHistory h(data, 2);
    EXPECT_EQ(h.at(2)(0), 3.0);
    EXPECT_EQ(h.increment(1)(0), 1.0);
    try {
        h.at(3);
        FAIL() << "expected CausalityViolation";
    } catch (const CausalityViolation& e) {
        EXPECT_EQ(e.requested(), 3);
        EXPECT_EQ(e.visible(), 2);
    }
    const ObservationHistory d = h.delayed(2);
    EXPECT_EQ(d.at(0)(0), 0.0);
    EXPECT_EQ(d.at(1)(0), 0.0);
    EXPECT_EQ(d.at(2)(0), 1.0);
    EXPECT_THROW(d.at(3), CausalityViolation);
}

TEST(ClosedLoop, ZeroLawIsOpenLoop) {
    const SystemModel plant = two_state_plant();
    const TimeGrid g(1.0, 200);
    const SampledModel m = sample_model(plant, g);
    const auto in = path_inputs(m, NoiseSpec::wiener(3), 4);
    ZeroLaw law(1);
    const LoopSolution s = solve_closed_loop(m, law, in.noise, in.x0);
    const Trajectory tr = simulate_open_loop(m, in.noise, SamplePath(g, 1), in.x0);
    EXPECT_EQ(s.x.values(), tr.x.values());
    EXPECT_EQ(s.y.values(), tr.y.values());
}

TEST(ClosedLoop, ScalarStateFeedbackRecursion) {
    // x_{k+1} = x_k + (a + b k_k) x_k dt + dw1_k, written out by hand.
    const TimeGrid g(1.0, 100);
    const SystemModel plant = scalar_plant(0.5, 0.5, 0.0);
    const SampledModel m = sample_model(plant, g);
    const auto ctrl = solve_control_riccati(plant, scalar_cost(), g);
    auto K = std::make_shared<const GainSchedule>(ctrl.K);
    StateFeedbackLaw law(K);
    const NoisePath w = sample_noise(NoiseSpec::wiener(2), g, 8);
    Vector x0(1);
    x0 << 0.3;
    const LoopSolution s = solve_closed_loop(m, law, w, x0, Feedback::state);
    double x = 0.3, y = 0.0;
    for (int k = 0; k < g.steps(); ++k) {
        const double u = ctrl.K[k](0, 0) * x;
        ASSERT_EQ(s.u(0, k), u);
        const double xn = x + (0.5 * x + u) * g.dt() + w.increment(k)(0);
        y += x * g.dt() + 0.5 * w.increment(k)(1);
        x = xn;
        ASSERT_NEAR(s.x(0, k + 1), x, 1e-14);
        ASSERT_NEAR(s.y(0, k + 1), y, 1e-14);
    }
}

TEST(ClosedLoop, OutputMapInverse) {
    // y = (1 - H g pi)^{-1} (1 - H g pi) y for linear and nonlinear laws.
    const TimeGrid g(1.0, 300);
    const LqgSetup s = make_setup(scalar_plant(0.5, 0.5, 0.0), scalar_cost(), g);
    const auto in = path_inputs(*s.model, NoiseSpec::wiener(2), 5);
    for (auto& law : all_laws(s)) {
        const LoopSolution loop = solve_closed_loop(*s.model, *law, in.noise, in.x0);
        const SamplePath y0 = remove_control(*s.model, *law, loop.y);
        const Trajectory open = simulate_open_loop(*s.model, in.noise, SamplePath(g, 1), in.x0);
        EXPECT_LT(sup_distance(y0, open.y), 1e-12) << law->name();
        EXPECT_LT(sup_distance(solve_loop_from_output(*s.model, *law, y0), loop.y), 1e-12) << law->name();
    }
}

TEST(KernelLaw, DiscreteKernelReproducesSeparatedLaw) {
    const TimeGrid g(1.0, 250);
    const LqgSetup s = make_setup(two_state_plant(), two_state_cost(), g);
    const auto in = path_inputs(*s.model, NoiseSpec::wiener(3), 6);
    SeparatedLqgLaw sep(s.model, s.filt, s.K);
    auto kl = kernel_law(s);
    const LoopSolution a = solve_closed_loop(*s.model, sep, in.noise, in.x0);
    const LoopSolution b = solve_closed_loop(*s.model, *kl, in.noise, in.x0);
    EXPECT_LT(sup_distance(a.u, b.u), 1e-12);
    EXPECT_LT(sup_distance(a.x, b.x), 1e-12);
}

TEST(KernelLaw, ContinuousFormConvergesToDiscrete) {
    double prev = 0.0;
    for (int N : {100, 200, 400}) {
        const TimeGrid g(1.0, N);
        const LqgSetup s = make_setup(scalar_plant(0.5, 0.5, 0.0), scalar_cost(), g);
        const auto Md = separated_lqg_kernel(*s.model, *s.K, *s.filt, KernelForm::discrete);
        const auto Mc = separated_lqg_kernel(*s.model, *s.K, *s.filt, KernelForm::continuous);
        double err = 0.0;
        for (int k = 0; k <= N; ++k)
            for (int j = 0; j < k; ++j) err = std::max(err, std::abs(Md.block(k, j)(0, 0) - Mc.block(k, j)(0, 0)));
        if (prev > 0.0) {
            EXPECT_NEAR(prev / err, 2.0, 0.3);  // first order in dt
        }
        prev = err;
    }
}

TEST(KernelLaw, ResolventLoopMatchesForwardSubstitution) {
    const TimeGrid g(1.0, 200);
    const LqgSetup s = make_setup(two_state_plant(), two_state_cost(), g);
    const VolterraKernel M = separated_lqg_kernel(*s.model, *s.K, *s.filt);
    const ResolventLoop rl = resolvent_loop(*s.model, M);
    for (int k = 0; k < g.nodes(); ++k) EXPECT_TRUE(Matrix(rl.Q.block(k, k)).isZero(0.0));
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const auto in = path_inputs(*s.model, NoiseSpec::wiener(3), seed);
        SeparatedLqgLaw law(s.model, s.filt, s.K);
        const LoopSolution fwd = solve_closed_loop(*s.model, law, in.noise, in.x0);
        const Trajectory open = simulate_open_loop(*s.model, in.noise, SamplePath(g, 1), in.x0);
        const SamplePath z = apply_resolvent(stack_paths(open.x, open.y), rl.R);
        EXPECT_LT(sup_distance(loop_state(fwd), z), 1e-10);
    }
}

TEST(Causality, EveryCausalLawPasses) {
    const TimeGrid g(1.0, 200);
    const LqgSetup s = make_setup(scalar_plant(), scalar_cost(), g);
    for (auto& law : all_laws(s)) {
        const auto rep = causality_check(*s.model, *law, NoiseSpec::wiener(2), {1, 2}, {0.25, 0.5, 0.75});
        EXPECT_TRUE(rep.pass) << law->name();
        EXPECT_EQ(rep.cases.size(), 6u);
    }
    StateFeedbackLaw sf(s.K);
    EXPECT_TRUE(causality_check(*s.model, sf, NoiseSpec{{Wiener{1}, CompensatedPoisson{3.0}}}, {3}, {0.5},
                                Feedback::state)
                    .pass);
}

TEST(Causality, PeekingLawIsCaught) {
    const TimeGrid g(1.0, 100);
    const LqgSetup s = make_setup(scalar_plant(), scalar_cost(), g);
    CustomLaw peek("peek", 1, [](int k, const ObservationHistory& obs, Eigen::Ref<Vector> u) {
        u = obs.at(std::min(k + 1, 100));
    });
    const auto rep = causality_check(*s.model, peek, NoiseSpec::wiener(2), {1}, {0.5});
    EXPECT_FALSE(rep.pass);
    ASSERT_EQ(rep.cases.size(), 1u);
    EXPECT_NE(rep.cases.front().violation.find("read node 1"), std::string::npos);
}

TEST(Uniqueness, PicardReachesForwardSolution) {
    const TimeGrid g(1.0, 100);
    const LqgSetup s = make_setup(scalar_plant(), scalar_cost(), g);
    const auto in = path_inputs(*s.model, NoiseSpec::wiener(2), 2);
    for (auto& law : all_laws(s)) {
        const auto rep = uniqueness_check(*s.model, *law, in.noise, in.x0, g.steps() + 1, {11, 12});
        EXPECT_TRUE(rep.pass) << law->name();
        for (const auto& r : rep.runs) {
            EXPECT_GT(r.exact_iterations, 0) << law->name();
            EXPECT_LE(r.exact_iterations, g.steps() + 1);
        }
    }
}

TEST(Uniqueness, BudgetTooSmallFails) {
    const TimeGrid g(1.0, 100);
    const LqgSetup s = make_setup(scalar_plant(), scalar_cost(), g);
    const auto in = path_inputs(*s.model, NoiseSpec::wiener(2), 2);
    CustomLaw big("big", 1, [](int k, const ObservationHistory& obs, Eigen::Ref<Vector> u) { u = -40.0 * obs.at(k); });
    const auto rep = uniqueness_check(*s.model, big, in.noise, in.x0, 1, {11, 12});
    EXPECT_FALSE(rep.pass);
}
