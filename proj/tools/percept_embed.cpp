// percept_embed: fetch data, generate lander scenes, run the experiment
// matrix and emit reports.
//
// Exit codes: 0 success, 1 config or usage error, 2 cell or runtime failure,
// 3 verification failure.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "percept/percept.hpp"
#include "percept/fetch.hpp"

namespace fs = std::filesystem;
using namespace percept;

namespace {

enum Exit { ok = 0, config_error = 1, cell_failure = 2, verify_failure = 3 };

struct Globals {
    std::string config;
    std::string data_root;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    std::string profile;
    int jobs = 1;
    bool quiet = false;
};

void log_line(const std::string& s) {
    const std::time_t t = std::time(nullptr);
    char stamp[16];
    std::strftime(stamp, sizeof stamp, "%H:%M:%S", std::localtime(&t));
    const std::string line = std::string(stamp) + " " + s + "\n";
    std::fwrite(line.data(), 1, line.size(), stderr);
    std::fflush(stderr);
}

ExperimentMatrix load_matrix(const Globals& g) {
    std::optional<Profile> profile;
    if (!g.profile.empty()) profile = parse_profile(g.profile);
    ExperimentMatrix m;
    if (!g.config.empty()) {
        m = ExperimentMatrix::from_config(Config::parse_file(g.config), profile);
    } else {
        m = ExperimentMatrix::defaults(profile.value_or(Profile::desk));
    }
    if (!g.data_root.empty()) m.data_root = g.data_root;
    if (g.seed) m.seeds = {*g.seed};
    m.validate();
    return m;
}

fs::path self_dir() {
    std::error_code ec;
    const fs::path exe = fs::read_symlink("/proc/self/exe", ec);
    return ec ? fs::current_path() : exe.parent_path();
}

int cmd_fetch(const Globals& g, const std::vector<std::string>& names) {
    const ExperimentMatrix m = load_matrix(g);
    std::vector<std::string> todo = names;
    if (todo.empty())
        for (const auto& d : m.datasets)
            if (d != "lander") todo.push_back(d);
    FetchOptions opt;
    if (!g.quiet) opt.log = log_line;
    for (const auto& n : todo) {
        const fs::path dir = fetch_dataset(n, m.data_root, opt);
        std::cout << n << ": " << dir.string() << "\n";
    }
    return ok;
}

int cmd_gen_lander(const Globals& g, const std::string& dir_opt, int rollouts, int frames, int stride) {
    ExperimentMatrix m = load_matrix(g);
    if (rollouts > 0) m.lander.rollouts = rollouts;
    if (frames > 0) m.lander.frames = frames;
    if (stride > 0) m.lander.frame_stride = stride;
    m.lander.validate();
    const std::uint64_t seed = m.seeds.front();
    const fs::path dir = dir_opt.empty() ? m.data_root / "lander" : fs::path(dir_opt);
    const LanderWorld world(m.lander, seed);
    write_lander_collection(world, dir);
    std::cout << "wrote " << world.frames().size() << " frames from " << m.lander.rollouts << " rollouts to "
              << dir.string() << "\n"
              << "removed (sprite not fully visible, second half): " << removed_fraction(world) * 100.0 << "%\n";
    return ok;
}

int cmd_report(const Globals& g) {
    const ReportSummary rs = report(g.out);
    for (const auto& f : rs.files) std::cout << f.string() << "\n";
    for (auto s : rs.partial_seeds) std::cout << "seed " << s << ": incomplete, tables skipped\n";
    return ok;
}

int cmd_run(const Globals& g, bool no_report) {
    const ExperimentMatrix m = load_matrix(g);
    if (!g.quiet)
        log_line("profile " + std::string(to_string(m.profile)) + ", " + std::to_string(enumerate_cells(m).size()) +
                 " cells, output " + g.out);
    const RunSummary s = run_matrix(m, g.out, g.jobs, g.quiet ? Logger{} : Logger{log_line});
    std::cout << "cells: " << s.total << " total, " << s.skipped << " already complete, " << s.completed
              << " completed, " << s.failed.size() << " failed\n";
    for (const auto& f : s.failed) std::cout << "  FAILED " << f << "\n";
    if (!no_report && s.completed + s.skipped > 0) cmd_report(g);
    return s.failed.empty() ? ok : cell_failure;
}

int cmd_verify(const Globals& g, const std::string& suite_opt, const std::string& criteria) {
    const fs::path suite = suite_opt.empty() ? self_dir() / "percept_acceptance" : fs::path(suite_opt);
    if (!fs::exists(suite)) {
        std::cerr << "acceptance suite not found at " << suite.string() << " (use --suite)\n";
        return verify_failure;
    }
    std::vector<std::string> args = {suite.string()};
    if (!criteria.empty()) {
        args.push_back("--criteria");
        args.push_back(criteria);
    }
    if (!g.out.empty() && g.out != "out") {
        args.push_back("--work");
        args.push_back(g.out);
    }
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    std::fflush(nullptr);
    const pid_t pid = ::fork();
    if (pid < 0) throw std::runtime_error("fork failed");
    if (pid == 0) {
        ::execv(argv[0], argv.data());
        std::perror("execv");
        ::_exit(127);
    }
    int status = 0;
    ::waitpid(pid, &status, 0);
    return WIFEXITED(status) && WEXITSTATUS(status) == 0 ? ok : verify_failure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Perceptual-loss autoencoder embeddings: experiments and reports"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Experiment config file (key = value lines)");
    app.add_option("--data-root", g.data_root, "Dataset root directory");
    app.add_option("--out", g.out, "Results directory")->capture_default_str();
    app.add_option("--seed", g.seed, "Run seed (replaces the configured seed list)");
    app.add_option("--profile", g.profile, "Preset: paper or desk")->check(CLI::IsMember({"paper", "desk"}));
    app.add_option("--jobs", g.jobs, "Cells run in parallel worker processes")->check(CLI::PositiveNumber);
    app.add_flag("-q,--quiet", g.quiet, "Only print results");

    std::vector<std::string> fetch_names;
    auto* fetch = app.add_subcommand("fetch", "Download and verify STL-10 / SVHN");
    fetch->add_option("datasets", fetch_names, "stl10, svhn (default: datasets of the matrix)")
        ->check(CLI::IsMember({"stl10", "svhn"}));

    std::string lander_dir;
    int rollouts = 0, frames = 0, stride = 0;
    auto* gen = app.add_subcommand("gen-lander", "Generate the synthetic lander collection on disk");
    gen->add_option("--dir", lander_dir, "Output directory (default: <data-root>/lander)");
    gen->add_option("--rollouts", rollouts, "Override the number of rollouts");
    gen->add_option("--frames", frames, "Override simulated timesteps per rollout");
    gen->add_option("--frame-stride", stride, "Override the kept-timestep stride");

    bool no_report = false;
    auto* run = app.add_subcommand("run", "Run every incomplete cell of the experiment matrix");
    run->add_flag("--no-report", no_report, "Skip regenerating the report");

    auto* rep = app.add_subcommand("report", "Regenerate tables, plots and summaries from stored records");

    std::string suite, criteria;
    auto* ver = app.add_subcommand("verify", "Run the acceptance suite");
    ver->add_option("--suite", suite, "Path to percept_acceptance (default: next to this binary)");
    ver->add_option("--criteria", criteria, "Comma-separated criterion numbers (default: all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ok : config_error;
    }

    try {
        if (*fetch) return cmd_fetch(g, fetch_names);
        if (*gen) return cmd_gen_lander(g, lander_dir, rollouts, frames, stride);
        if (*run) return cmd_run(g, no_report);
        if (*rep) return cmd_report(g);
        if (*ver) return cmd_verify(g, suite, criteria);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return config_error;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return config_error;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cell_failure;
    }
    return ok;
}
