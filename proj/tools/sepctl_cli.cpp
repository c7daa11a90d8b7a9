// Command-line driver: run, validate and list scenarios.
//
// Exit status: 0 pass, 1 fail, 2 insufficient power, 3 invalid scenario,
// 4 I/O or other error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sepctl/scenario.hpp"

namespace {

constexpr int exit_invalid = 3;
constexpr int exit_error = 4;

struct Source {
    std::string file;
    std::string preset;

    sepctl::Scenario load() const {
        if (!preset.empty()) return sepctl::preset_scenario(preset);
        return sepctl::load_scenario(file);
    }
};

void add_source(CLI::App* cmd, Source& src) {
    auto* f = cmd->add_option("--scenario", src.file, "scenario file (key = value lines)");
    auto* p = cmd->add_option("--preset", src.preset, "built-in scenario name (see list-presets)");
    f->excludes(p);
    p->excludes(f);
    cmd->require_option(1, 0);
}

void print_issues(const sepctl::ValidationError& e) {
    std::cerr << "invalid scenario:\n";
    for (const auto& i : e.issues()) std::cerr << "  " << i.key << ": " << i.message << '\n';
}

void print_report_line(const sepctl::ExperimentReport& r) {
    std::printf("%-28s %-18s", r.experiment.c_str(), sepctl::to_string(r.verdict));
    for (const auto& e : r.estimates) {
        if (e.se > 0.0)
            std::printf("  %s = %.6g +- %.2g", e.name.c_str(), e.value, e.se);
        else
            std::printf("  %s = %.6g", e.name.c_str(), e.value);
        break;
    }
    std::printf("\n");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sepctl: separation-principle experiments for linear-quadratic stochastic control"};
    app.require_subcommand(1);

    Source run_src;
    std::optional<int> paths, steps;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::string format = "full";
    bool quiet = false;
    auto* run = app.add_subcommand("run", "run the experiments selected by a scenario");
    add_source(run, run_src);
    run->add_option("--paths", paths, "Monte Carlo paths M");
    run->add_option("--seed", seed, "first seed k");
    run->add_option("--steps", steps, "grid steps N");
    run->add_option("--out", out, "output directory");
    run->add_option("--format", format, "report detail")->check(CLI::IsMember({"summary", "full"}));
    run->add_flag("--quiet", quiet, "print only the final status");

    Source val_src;
    auto* validate = app.add_subcommand("validate", "parse and validate a scenario without running it");
    add_source(validate, val_src);

    app.add_subcommand("list-presets", "list built-in scenarios");

    std::string show_name;
    auto* show = app.add_subcommand("show-preset", "print a built-in scenario document");
    show->add_option("name", show_name, "preset name")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("list-presets")) {
            for (const auto& p : sepctl::presets()) std::printf("%-16s %s\n", p.name.c_str(), p.description.c_str());
            return 0;
        }
        if (app.got_subcommand(show)) {
            std::cout << sepctl::find_preset(show_name).text;
            return 0;
        }
        if (app.got_subcommand(validate)) {
            const sepctl::Scenario s = val_src.load();
            std::printf("ok: %s (%zu experiments, N = %d, M = %d)\n", s.name.c_str(), s.experiments.size(), s.steps,
                        s.paths);
            return 0;
        }
        sepctl::RunOptions opts;
        opts.paths = paths;
        opts.steps = steps;
        opts.seed = seed;
        opts.out = out;
        opts.format = format == "summary" ? sepctl::ReportFormat::summary : sepctl::ReportFormat::full;
        const sepctl::RunResult res = sepctl::run_scenario(run_src.load(), opts);
        if (!quiet)
            for (const auto& r : res.reports) print_report_line(r);
        std::printf("%s: %s (report in %s)\n", res.scenario.c_str(), sepctl::to_string(res.status),
                    (res.out_dir / "report.json").string().c_str());
        return res.exit_code();
    } catch (const sepctl::ValidationError& e) {
        print_issues(e);
        return exit_invalid;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_error;
    }
}
