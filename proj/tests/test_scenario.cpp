#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "sepctl/scenario.hpp"
#include "support.hpp"

using namespace sepctl;
namespace fs = std::filesystem;

namespace {

const std::string minimal = R"(# comment line
model.A = 0.5
model.B1 = 1
model.B2 = [1 0]
model.C = 1
model.D = [0 0.5]   # trailing comment
model.independent_noise = true
cost.Q = 1
cost.R = 0.1
noise = wiener(2)
law = separated_lqg
experiments = estimate_cost
)";

std::string with(const std::string& base, const std::string& extra) { return base + extra + "\n"; }

std::string replace(std::string text, const std::string& from, const std::string& to) {
    const auto at = text.find(from);
    if (at == std::string::npos) throw std::runtime_error("fixture text not found: " + from);
    return text.replace(at, from.size(), to);
}

std::vector<ValidationIssue> issues_of(const std::string& text) {
    try {
        parse_scenario(text);
    } catch (const ValidationError& e) {
        return e.issues();
    }
    return {};
}

bool has_issue(const std::vector<ValidationIssue>& v, const std::string& key) {
    for (const auto& i : v)
        if (i.key == key) return true;
    return false;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("sepctl_test_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST(ConfigText, Helpers) {
    const Matrix m = cfg::parse_matrix("[1 2; 3 -4.5]");
    ASSERT_EQ(m.rows(), 2);
    EXPECT_EQ(m(1, 1), -4.5);
    EXPECT_EQ(cfg::parse_matrix("0.25")(0, 0), 0.25);
    EXPECT_THROW(cfg::parse_matrix("[1 2; 3]"), Error);
    EXPECT_EQ(cfg::parse_int("1e4"), 10000);
    EXPECT_THROW(cfg::parse_int("1.5"), Error);
    EXPECT_TRUE(cfg::parse_bool("true"));
    EXPECT_EQ(cfg::split_top("a, f(b, c), [1 2; 3 4]", ',').size(), 3u);

    const MatrixSchedule p = cfg::parse_schedule("poly(1, [2])");
    EXPECT_DOUBLE_EQ(p(0.5)(0, 0), 2.0);
    const MatrixSchedule t = cfg::parse_schedule("table(0: 1, 2: 3)");
    EXPECT_DOUBLE_EQ(t(1.0)(0, 0), 2.0);
    EXPECT_TRUE(cfg::same_schedule(cfg::parse_schedule(cfg::format_schedule(t)), t));

    const NoiseSpec n = cfg::parse_noise("poisson(2) + wiener(3) + gbm(0.2) + step");
    EXPECT_EQ(n.dims(), 6);
    EXPECT_EQ(cfg::parse_noise(cfg::format_noise(n)), n);
    EXPECT_THROW(cfg::parse_noise("gbm(0.2, drift=0.1)").validate(), InvalidArgument);
    EXPECT_NO_THROW(cfg::parse_noise("gbm(0.2, drift=0.1, non_martingale)").validate());

    const LawSpec l = cfg::parse_law("delayed(separated_lqg(0.8), 0.05)");
    EXPECT_EQ(l.kind, LawSpec::Kind::delayed);
    EXPECT_EQ(cfg::format_law(cfg::parse_law(cfg::format_law(l))), cfg::format_law(l));
}

TEST(ScenarioParse, Defaults) {
    const Scenario s = parse_scenario(minimal);
    EXPECT_EQ(s.steps, 10000);
    EXPECT_EQ(s.paths, 10000);
    EXPECT_EQ(s.seed, 1u);
    EXPECT_EQ(s.horizon, 1.0);
    EXPECT_EQ(s.model.x0.mean, Vector::Zero(1));
    EXPECT_EQ(s.model.x0.covariance, Matrix::Zero(1, 1));
    EXPECT_EQ(s.cost.S, Matrix::Zero(1, 1));
    EXPECT_EQ(s.output_dir(), "out/scenario");
    EXPECT_EQ(s.cut_times(), (std::vector<double>{0.25, 0.5, 0.75}));
}

TEST(ScenarioParse, RejectsBadInput) {
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "cost.Q = 1", "cost.Q = -1")), "cost.Q"));
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "cost.R = 0.1", "cost.R = 0")), "cost.R"));
    EXPECT_TRUE(has_issue(issues_of(with(minimal, "cost.S = -2")), "cost.S"));
    EXPECT_TRUE(has_issue(issues_of(with(minimal, "model.P0 = -1")), "model.P0"));
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "model.D = [0 0.5]", "model.D = [0 0]")), "model.D"));
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "model.D = [0 0.5]", "model.D = [0.1 0.5]")),
                          "model.independent_noise"));
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "estimate_cost", "estimate_cost, telepathy")), "experiments"));
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "estimate_cost", "estimate_cost, estimate_cost")),
                          "experiments"));
    EXPECT_TRUE(has_issue(issues_of(with(minimal, "cost.T = 1")), "cost.T"));
    EXPECT_TRUE(has_issue(issues_of(with(minimal, "cost.R = 1")), "cost.R"));
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "noise = wiener(2)\n", "")), "noise"));
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "noise = wiener(2)", "noise = wiener(3)")), "noise"));
    EXPECT_TRUE(has_issue(issues_of(with(minimal, "paths = 1")), "paths"));
    EXPECT_TRUE(has_issue(issues_of(with(minimal, "this line has no equals sign")), "line 13"));
    EXPECT_TRUE(has_issue(issues_of(with(minimal, "tolerance.picard = -1")), "tolerance.picard"));

    // Every issue is reported, not only the first.
    const auto syntax = issues_of(with(replace(minimal, "law = separated_lqg\n", ""), "foo = 2\nnoise = wiener(2)"));
    EXPECT_TRUE(has_issue(syntax, "foo"));
    EXPECT_TRUE(has_issue(syntax, "noise"));
    EXPECT_TRUE(has_issue(syntax, "law"));
    const auto semantic = issues_of(with(replace(minimal, "cost.Q = 1", "cost.Q = -1"), "paths = 1"));
    EXPECT_TRUE(has_issue(semantic, "cost.Q"));
    EXPECT_TRUE(has_issue(semantic, "paths"));
}

TEST(ScenarioParse, ExperimentSpecificChecks) {
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "estimate_cost", "ito_identity") + "ito.steps = 1001\n"),
                          "ito.steps"));
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "estimate_cost", "loop_equivalence") + "grid.steps = 5000\n"),
                          "grid.steps"));
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "estimate_cost", "loop_equivalence") +
                                    "grid.steps = 100\nmodel.x0 = 1\n"),
                          "model.x0"));
    EXPECT_TRUE(has_issue(issues_of(replace(replace(minimal, "estimate_cost", "cost_decomposition"), "wiener(2)",
                                            "poisson(2) + wiener(1)")),
                          "noise"));
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "law = separated_lqg", "law = class_l")), "law"));
    EXPECT_TRUE(has_issue(issues_of(replace(minimal, "law = separated_lqg", "law = shiryaev")), "model.A"));
}

TEST(ScenarioParse, RoundTrip) {
    for (const auto& p : presets()) {
        const Scenario s = preset_scenario(p.name);
        EXPECT_TRUE(parse_scenario(serialize_scenario(s)) == s) << p.name;
    }
    const std::string rich = with(replace(replace(minimal, "model.A = 0.5", "model.A = poly(0.5, -0.25, [0.125])"),
                                          "cost.Q = 1", "cost.Q = table(0: 1, 0.5: 2, 1: 0.3333333333333333)"),
                                  "grid.steps = 400\nseed = 77\npaths = 1e3\noptimality.mode = full_information\n"
                                  "sigma_invariance.laws = zero, delayed(separated_lqg(0.7), 0.1)\n"
                                  "causality.cuts = 0.1, 0.9\nmodel.x0 = 0.3\nmodel.P0 = 0.2\n"
                                  "tolerance.picard = 1e-9\noutput = somewhere/else");
    const Scenario s = parse_scenario(rich);
    EXPECT_EQ(s.paths, 1000);
    const Scenario back = parse_scenario(serialize_scenario(s));
    EXPECT_TRUE(back == s);
    EXPECT_EQ(serialize_scenario(back), serialize_scenario(s));
}

TEST(Presets, MatchScenarioFiles) {
    for (const auto& p : presets()) {
        const fs::path file = fs::path(SEPCTL_SCENARIO_DIR) / (p.name + ".cfg");
        ASSERT_TRUE(fs::exists(file)) << file;
        EXPECT_EQ(slurp(file), p.text) << p.name;
        EXPECT_TRUE(load_scenario(file) == preset_scenario(p.name)) << p.name;
    }
    EXPECT_THROW(find_preset("nope"), InvalidArgument);
    EXPECT_THROW(load_scenario("/nonexistent/file.cfg"), IoError);
}

TEST(Presets, StepChangeMatchesItsModel) {
    const Scenario s = preset_scenario("shiryaev_step");
    const SystemModel ref = step_change_model(1.0);
    for (double t : {0.0, 0.5, 1.0}) {
        EXPECT_EQ(s.model.A(t), ref.A(t));
        EXPECT_EQ(s.model.B1(t), ref.B1(t));
        EXPECT_EQ(s.model.B2(t), ref.B2(t));
        EXPECT_EQ(s.model.C(t), ref.C(t));
        EXPECT_EQ(s.model.D(t), ref.D(t));
    }
    EXPECT_EQ(s.noise, step_change_noise(0.0));
    EXPECT_EQ(s.steps, 10000);
}

TEST(Overrides, AppliedAndRevalidated) {
    const Scenario s = preset_scenario("lqg_scalar");
    RunOptions o;
    o.paths = 123;
    o.steps = 200;
    o.seed = 9;
    o.out = "x/y";
    const Scenario t = apply_overrides(s, o);
    EXPECT_EQ(t.paths, 123);
    EXPECT_EQ(t.steps, 200);
    EXPECT_EQ(t.seed, 9u);
    EXPECT_EQ(t.output_dir(), "x/y");
    o.steps = 0;
    EXPECT_THROW(apply_overrides(s, o), ValidationError);
}

TEST(Run, ReportsAreReproducible) {
    const std::string doc = with(replace(minimal, "estimate_cost", "estimate_cost, martingale, causality"),
                                 "grid.steps = 100\npaths = 40\nmodel.P0 = 1");
    const Scenario s = parse_scenario(doc);
    RunOptions a, b;
    a.out = scratch("repro_a").string();
    b.out = scratch("repro_b").string();
    const RunResult ra = run_scenario(s, a), rb = run_scenario(s, b);
    EXPECT_EQ(slurp(fs::path(*a.out) / "report.json"), slurp(fs::path(*b.out) / "report.json"));
    EXPECT_EQ(ra.status, Verdict::insufficient_power);
    EXPECT_EQ(ra.exit_code(), 2);
    for (const char* f : {"report.json", "timing.json", "scenario.cfg", "control_gain.csv", "control_riccati.csv",
                          "filter_gain.csv", "filter_riccati.csv", "trajectory.csv"})
        EXPECT_TRUE(fs::exists(fs::path(*a.out) / f)) << f;
    EXPECT_FALSE(fs::exists(fs::path(*a.out) / "FAILED"));
    // The written scenario document reproduces the effective scenario.
    EXPECT_TRUE(load_scenario(fs::path(*a.out) / "scenario.cfg") == apply_overrides(s, a));
}

TEST(Run, FailureCarriesSeedAndMarker) {
    const std::string doc = with(replace(minimal, "estimate_cost", "ito_identity, causality"),
                                 "grid.steps = 400\nito.seeds = 3\ntolerance.ito_relative = 0");
    RunOptions o;
    o.out = scratch("fail").string();
    const RunResult r = run_scenario(parse_scenario(doc), o);
    EXPECT_EQ(r.status, Verdict::fail);
    EXPECT_EQ(r.exit_code(), 1);
    EXPECT_EQ(r.report("causality_check").verdict, Verdict::pass);
    const auto& ito = r.report("pathwise_ito_identity_check");
    EXPECT_EQ(ito.verdict, Verdict::fail);
    ASSERT_TRUE(ito.violation_seed.has_value());
    EXPECT_EQ(*ito.violation_seed, 1u);
    const std::string marker = slurp(fs::path(*o.out) / "FAILED");
    EXPECT_NE(marker.find("pathwise_ito_identity_check"), std::string::npos);
    const auto j = nlohmann::json::parse(slurp(fs::path(*o.out) / "report.json"));
    EXPECT_EQ(j["status"], "fail");
    EXPECT_EQ(j["experiments"][0]["violation_seed"], 1);

    // A passing rerun into the same directory clears the marker.
    o.paths = 1000;
    const std::string ok = with(replace(minimal, "estimate_cost", "causality"), "grid.steps = 100");
    EXPECT_EQ(run_scenario(parse_scenario(ok), o).status, Verdict::pass);
    EXPECT_FALSE(fs::exists(fs::path(*o.out) / "FAILED"));
}

TEST(Run, SummaryFormatOmitsDetail) {
    ExperimentReport r;
    r.experiment = "x";
    r.verdict = Verdict::pass;
    r.paths = 5;
    r.estimates.push_back({"a", 1.0, 0.1, 0.3});
    r.components.push_back({"b", 2.0});
    r.notes.push_back("n");
    const auto full = report_json(r, ReportFormat::full);
    const auto summary = report_json(r, ReportFormat::summary);
    EXPECT_TRUE(full.contains("components"));
    EXPECT_FALSE(summary.contains("components"));
    EXPECT_FALSE(summary.contains("notes"));
    EXPECT_EQ(summary["estimates"][0]["tolerance"], 0.3);
    EXPECT_EQ(summary["verdict"], "pass");
}
