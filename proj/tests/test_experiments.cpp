#include <cmath>
#include <cstdlib>
#include <memory>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace sepctl;
using namespace sepctl::test;

namespace {

struct Scalar {
    SystemModel plant = scalar_plant();
    CostSpec cost = scalar_cost();
    TimeGrid grid{1.0, 400};
    SampledModel model = sample_model(plant, grid);
    ControlSynthesis ctrl = solve_control_riccati(plant, cost, grid);
    FilterSynthesis filt = solve_filter_riccati(plant, grid);
};

}  // namespace

TEST(MapPaths, OrderedAndThreadCountIndependent) {
    auto square = [](int&, int i) { return i * i; };
    const auto one = map_paths<int>(37, [] { return 0; }, square, 1);
    const auto four = map_paths<int>(37, [] { return 0; }, square, 4);
    EXPECT_EQ(one, four);
    for (int i = 0; i < 37; ++i) EXPECT_EQ(one[i], i * i);
    EXPECT_THROW(map_paths<int>(
                     10, [] { return 0; },
                     [](int&, int i) {
                         if (i == 6) throw InvalidArgument("boom");
                         return i;
                     },
                     3),
                 Error);
}

TEST(MeanSe, KnownValues) {
    const MeanSe m = mean_se({1.0, 2.0, 3.0, 4.0});
    EXPECT_DOUBLE_EQ(m.mean, 2.5);
    EXPECT_DOUBLE_EQ(m.se, std::sqrt((2.25 + 0.25 + 0.25 + 2.25) / 3.0 / 4.0));
    EXPECT_DOUBLE_EQ(trapezoid({1.0, 3.0, 5.0}, 0.5), 3.0);
}

TEST(EstimateCost, FullInformationTarget) {
    const Scalar s;
    StateFeedbackLaw law(std::make_shared<const GainSchedule>(s.ctrl.K));
    const double target = full_information_cost(s.model, s.ctrl);
    // Closed form check of the target itself: P(0) p0 + int P dt for B2 = [1 0].
    std::vector<double> p;
    for (const auto& P : s.ctrl.P) p.push_back(P(0, 0));
    EXPECT_NEAR(target, s.ctrl.P.front()(0, 0) * 1.0 + trapezoid(p, s.grid.dt()), 1e-12);
    const auto r = estimate_cost(s.model, s.cost, law, NoiseSpec::wiener(2), 2000, 1, Feedback::state, target);
    EXPECT_EQ(r.verdict, Verdict::pass) << r.estimate("J").value << " vs " << target;
}

TEST(EstimateCost, OpenLoopTarget) {
    const Scalar s;
    ZeroLaw law(1);
    const double target = open_loop_cost(s.plant, s.cost, s.grid);
    // u = 0, a = 1/2, x0 ~ N(0,1): E x(t)^2 = 2 e^{t} - 1, J = int + E x(T)^2.
    const double exact = (2.0 * std::exp(1.0) - 3.0) + (2.0 * std::exp(1.0) - 1.0);
    EXPECT_NEAR(target, exact, 1e-5);
    const auto r = estimate_cost(s.model, s.cost, law, NoiseSpec::wiener(2), 2000, 1, Feedback::output, target);
    EXPECT_EQ(r.verdict, Verdict::pass);
}

TEST(EstimateCost, StandardErrorScalesWithPaths) {
    const Scalar s;
    SeparatedLqgLaw law(std::make_shared<const SampledModel>(s.model), std::make_shared<const FilterSynthesis>(s.filt),
                        std::make_shared<const GainSchedule>(s.ctrl.K));
    const auto a = estimate_cost(s.model, s.cost, law, NoiseSpec::wiener(2), 1000, 1);
    const auto b = estimate_cost(s.model, s.cost, law, NoiseSpec::wiener(2), 4000, 5001);
    EXPECT_NEAR(a.estimate("J").se / b.estimate("J").se, 2.0, 0.4);
    EXPECT_EQ(a.verdict, Verdict::pass);  // no target: estimate only
}

TEST(EstimateCost, DeterministicAndPowerGated) {
    const Scalar s;
    StateFeedbackLaw law(std::make_shared<const GainSchedule>(s.ctrl.K));
    const auto a = estimate_cost(s.model, s.cost, law, NoiseSpec::wiener(2), 50, 9, Feedback::state, 1.0);
    const auto b = estimate_cost(s.model, s.cost, law, NoiseSpec::wiener(2), 50, 9, Feedback::state, 1.0);
    EXPECT_EQ(a.estimate("J").value, b.estimate("J").value);
    EXPECT_EQ(a.verdict, Verdict::insufficient_power);
    EXPECT_EQ(a.seed_first, 9u);
    EXPECT_EQ(a.seed_last, 58u);
}

TEST(CostDecomposition, SeparatedLawSplits) {
    const Scalar s;
    SeparatedLqgLaw law(std::make_shared<const SampledModel>(s.model), std::make_shared<const FilterSynthesis>(s.filt),
                        std::make_shared<const GainSchedule>(s.ctrl.K));
    const auto r = cost_decomposition_check(s.model, s.cost, law, NoiseSpec::wiener(2), 2000, 1, s.ctrl, &s.filt);
    EXPECT_EQ(r.verdict, Verdict::pass);
    EXPECT_NEAR(r.estimate("int tr(B2'PB2)").value, noise_cost_term(s.model, s.ctrl), 0.0);
}

TEST(SigmaInvariance, EstimationErrorIgnoresTheLaw) {
    const Scalar s;
    auto sm = std::make_shared<const SampledModel>(s.model);
    auto sf = std::make_shared<const FilterSynthesis>(s.filt);
    auto K = std::make_shared<const GainSchedule>(s.ctrl.K);
    ZeroLaw zero(1);
    SeparatedLqgLaw sep(sm, sf, K);
    SeparatedLqgLaw detuned(sm, sf, K, 0.5);
    DelayedLaw delayed(std::make_unique<SeparatedLqgLaw>(sm, sf, K), 20);
    const auto r = sigma_invariance_experiment(s.model, {&zero, &sep, &detuned, &delayed}, NoiseSpec::wiener(2), 1500,
                                               1, s.filt);
    EXPECT_EQ(r.verdict, Verdict::pass);
    EXPECT_LT(r.estimate("max pathwise |e_a - e_b|").value, 1e-10);
}

TEST(Optimality, DetunedGainsCostMore) {
    const Scalar s;
    const auto sep = optimality_comparison(s.model, s.cost, NoiseSpec::wiener(2), 2000, 1, {-0.3, 0.3}, s.ctrl, &s.filt,
                                           ComparisonMode::separated);
    EXPECT_EQ(sep.verdict, Verdict::pass);
    const auto fi = optimality_comparison(s.model, s.cost, NoiseSpec{{CompensatedPoisson{1.0}, Wiener{1}}}, 2000, 1,
                                          {-0.3, 0.3}, s.ctrl, nullptr, ComparisonMode::full_information);
    EXPECT_EQ(fi.verdict, Verdict::pass);
}

TEST(ItoIdentity, HoldsWithJumps) {
    const Scalar s;
    const LawFactory fb = [](const SampledModel&, const ControlSynthesis& c) -> LawPtr {
        return std::make_unique<StateFeedbackLaw>(std::make_shared<const GainSchedule>(c.K));
    };
    const TimeGrid g(1.0, 4000);
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t i = 1; i <= 10; ++i) seeds.push_back(i);
    const auto r = pathwise_ito_identity_check(s.plant, s.cost, fb, NoiseSpec{{CompensatedPoisson{2.0}, Wiener{1}}}, g,
                                               seeds, Feedback::state, 3, 0.05, 0.8);
    EXPECT_EQ(r.verdict, Verdict::pass) << r.estimate("max relative mismatch").value << " "
                                        << r.estimate("observed order").value;
    EXPECT_EQ(r.estimate("jump remainder exactly zero").value, 1.0);
}

TEST(ItoIdentity, JumpRemainderVanishesForQuadraticForms) {
    // f(x) = x'Px has a zero second-order Taylor remainder at every jump.
    const Scalar s;
    const TimeGrid g(1.0, 50);
    const NoisePath w = sample_noise(NoiseSpec{{CompensatedPoisson{20.0}, Wiener{1}}}, g, 3);
    ASSERT_FALSE(w.jumps().empty());
    const ControlSynthesis ctrl = solve_control_riccati(s.plant, s.cost, g);
    SamplePath x(g, 1);
    for (int k = 0; k <= g.steps(); ++k) x(0, k) = std::sin(3.0 * k) * 1e3 + 1.0 / (k + 3.0);
    EXPECT_EQ(jump_remainder(ctrl, w, x), 0);
}
