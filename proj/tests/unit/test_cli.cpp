#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string output;
};

Result run(const std::string& args) {
    const std::string cmd = std::string(PERCEPT_CLI) + " " + args + " 2>&1";
    Result r;
    FILE* p = ::popen(cmd.c_str(), "r");
    std::array<char, 4096> buf{};
    while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) r.output.append(buf.data(), n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("percept_cli_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
    EXPECT_EQ(run("--help").code, 0);
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("frobnicate").code, 1);
    EXPECT_EQ(run("--profile huge run").code, 1);
    EXPECT_EQ(run("--jobs 0 run").code, 1);
}

TEST(Cli, ConfigErrorNamesFileAndLine) {
    const fs::path d = fresh_dir("cfg");
    std::ofstream(d / "bad.cfg") << "datasets = lander\nmodel_kinds = AE, XYZ\n";
    const Result r = run("--config " + (d / "bad.cfg").string() + " --out " + (d / "out").string() + " run");
    EXPECT_EQ(r.code, 1) << r.output;
    EXPECT_NE(r.output.find("bad.cfg:2:"), std::string::npos) << r.output;
    const Result missing = run("--config " + (d / "none.cfg").string() + " run");
    EXPECT_EQ(missing.code, 1) << missing.output;
    fs::remove_all(d);
}

TEST(Cli, ReportWithoutRecordsFails) {
    const fs::path d = fresh_dir("empty");
    const Result r = run("--out " + d.string() + " report");
    EXPECT_EQ(r.code, 2) << r.output;
    fs::remove_all(d);
}

TEST(Cli, GenerateLanderCollection) {
    const fs::path d = fresh_dir("gen");
    const Result r = run("--data-root " + d.string() + " -q gen-lander --rollouts 6 --frames 5 --frame-stride 1");
    EXPECT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(d / "lander"));
    EXPECT_FALSE(fs::is_empty(d / "lander"));
    fs::remove_all(d);
}

TEST(Cli, RunThenReport) {
    const fs::path d = fresh_dir("run");
    std::ofstream(d / "tiny.cfg") << "model_kinds = AE, VAE\nlander.rollouts = 12\nlander.frames = 8\nlander.frame_stride = 1\n"
                                     "train.max_epochs = 1\ntrain.patience = 1\nretrain.max_epochs = 1\n"
                                     "retrain.patience = 1\nprobe.max_epochs = 1\nprobe.patience = 1\n";
    const std::string base = "-q --config " + (d / "tiny.cfg").string() + " --out " + (d / "out").string();
    const Result r = run(base + " run");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(d / "out" / "report" / "summary.txt"));
    const Result again = run(base + " run --no-report");
    EXPECT_EQ(again.code, 0) << again.output;
    EXPECT_EQ(run(base + " report").code, 0);
    fs::remove_all(d);
}
