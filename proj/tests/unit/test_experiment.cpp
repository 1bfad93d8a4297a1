#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "percept/experiment.hpp"

using namespace percept;
namespace fs = std::filesystem;

namespace {

ExperimentMatrix tiny_matrix() {
    ExperimentMatrix m = ExperimentMatrix::defaults(Profile::desk);
    m.lander.rollouts = 12;
    m.lander.frames = 8;
    m.lander.frame_stride = 1;
    m.train.max_epochs = 1;
    m.train.patience = 1;
    m.train.batch_size = 16;
    m.retrain = m.train;
    m.probe.max_epochs = 2;
    m.probe.patience = 1;
    m.recon_grid = 2;
    return m;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        files[fs::relative(e.path(), dir).string()] = ss.str();
    }
    return files;
}

class TinyRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        out_ = fs::temp_directory_path() / ("percept_exp_" + std::to_string(::getpid()));
        fs::remove_all(out_);
        first_ = run_matrix(tiny_matrix(), out_);
    }
    static void TearDownTestSuite() { fs::remove_all(out_); }

    static inline fs::path out_;
    static inline RunSummary first_;
};

}  // namespace

TEST_F(TinyRun, EveryCellCompletesWithArtifacts) {
    ASSERT_TRUE(first_.failed.empty()) << first_.failed.front();
    EXPECT_EQ(first_.completed, 4u);
    for (const auto& c : enumerate_cells(tiny_matrix())) {
        const fs::path d = cell_dir(out_, c);
        for (const char* f : {"record.json", "model.wts", "manifest.json", "history.csv", "retrain_history.csv",
                              "probes.csv", "recon.ppm"})
            EXPECT_TRUE(fs::exists(d / f)) << c.label() << " " << f;
    }
    const auto stored = load_records(out_);
    ASSERT_EQ(stored.size(), 4u);
    for (const auto& s : stored) {
        ASSERT_EQ(s.records.size(), 2u);
        for (const auto& r : s.records) {
            EXPECT_GE(r.metric_value, 0.0);
            EXPECT_GT(r.recon_l1, 0.0);
            EXPECT_GE(r.best_index, 0);
        }
    }
}

TEST_F(TinyRun, RerunSkipsCompletedCells) {
    const auto before = fs::last_write_time(cell_dir(out_, enumerate_cells(tiny_matrix())[0]) / "record.json");
    const RunSummary again = run_matrix(tiny_matrix(), out_);
    EXPECT_EQ(again.skipped, 4u);
    EXPECT_EQ(again.completed, 0u);
    EXPECT_EQ(fs::last_write_time(cell_dir(out_, enumerate_cells(tiny_matrix())[0]) / "record.json"), before);
}

TEST_F(TinyRun, ReportIsReproducibleFromRecords) {
    const ReportSummary a = report(out_);
    EXPECT_EQ(a.complete_seeds, (std::vector<std::uint64_t>{1}));
    const auto first = snapshot(out_ / "report");
    EXPECT_TRUE(first.count("seed_1/lander_mlp.csv"));
    EXPECT_TRUE(first.count("seed_1/recon_relative.csv"));
    EXPECT_TRUE(first.count("summary.txt"));
    EXPECT_TRUE(first.count("timing_overhead.csv"));
    fs::remove_all(out_ / "report");
    report(out_);
    EXPECT_EQ(snapshot(out_ / "report"), first);
}

TEST_F(TinyRun, ForkedWorkersMatchSerialRun) {
    ExperimentMatrix m = tiny_matrix();
    m.model_kinds = {ModelKind::ae, ModelKind::vae};
    const fs::path out = out_.string() + "_jobs";
    fs::remove_all(out);
    const RunSummary s = run_matrix(m, out, 2);
    EXPECT_TRUE(s.failed.empty());
    EXPECT_EQ(s.completed, 2u);
    for (const auto& c : enumerate_cells(m)) {
        // Same config hash as the serial run, so the records must agree exactly.
        std::ifstream a(cell_dir(out, c) / "record.json"), b(cell_dir(out_, c) / "record.json");
        const auto ja = nlohmann::json::parse(a), jb = nlohmann::json::parse(b);
        for (std::size_t i = 0; i < ja["records"].size(); ++i) {
            EXPECT_EQ(ja["records"][i]["metric_value"], jb["records"][i]["metric_value"]);
            EXPECT_EQ(ja["records"][i]["recon_l1"], jb["records"][i]["recon_l1"]);
        }
    }
    fs::remove_all(out);
}

TEST(RunMatrix, FailingCellIsReportedNotFatal) {
    ExperimentMatrix m = tiny_matrix();
    m.model_kinds = {ModelKind::ae};
    m.lander_dir = "/nonexistent/lander";
    const fs::path out = fs::temp_directory_path() / ("percept_fail_" + std::to_string(::getpid()));
    fs::remove_all(out);
    const RunSummary s = run_matrix(m, out);
    ASSERT_EQ(s.failed.size(), 1u);
    EXPECT_EQ(s.completed, 0u);
    EXPECT_TRUE(fs::exists(out / "cells"));
    EXPECT_THROW(report(out), std::runtime_error);
    fs::remove_all(out);
}

TEST(Plot, SvgMentionsEverySeries) {
    const std::string svg = metric_plot_svg("t", "err", {{"AE", {{32, 10.0}, {64, 9.0}}}, {"P.AE", {{32, 5.0}, {64, 4.0}}}});
    EXPECT_NE(svg.find("<svg"), std::string::npos);
    EXPECT_NE(svg.find("P.AE"), std::string::npos);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
}
