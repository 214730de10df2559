#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dit4sr/commands.hpp"

using namespace dit4sr;
namespace fs = std::filesystem;

namespace {

std::string cli() {
    const char* p = std::getenv("DIT4SR_CLI");
    return p ? p : "./dit4sr_cli";
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

class CliTest : public ::testing::Test {
protected:
    fs::path dir;

    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir = fs::temp_directory_path() / ("dit4sr_cli_" + std::string(info->name()));
        fs::remove_all(dir);
        fs::create_directories(dir);
        std::ofstream(dir / "run.cfg") << "[model]\n"
                                          "latent_h = 32\nlatent_w = 32\ntoken_dim = 8\nheads = 2\ndepth = 2\n"
                                          "text_len = 2\npooled_dim = 8\n"
                                          "[data]\ncount = 6\nseed = 4\n"
                                          "[train]\nsteps = 3\nbatch_size = 2\n"
                                          "[sample]\nsteps = 2\n"
                                          "[paths]\n"
                                       << "data_dir = " << (dir / "data").string() << '\n'
                                       << "checkpoint = " << (dir / "model.ckpt").string() << '\n'
                                       << "report_dir = " << (dir / "reports").string() << '\n';
    }
    void TearDown() override { fs::remove_all(dir); }

    int run(const std::string& args) const {
        const std::string cmd = "DIT4SR_LOG=quiet " + cli() + " " + args + " --config " + (dir / "run.cfg").string() +
                                " > " + (dir / "stdout.txt").string() + " 2> " + (dir / "stderr.txt").string();
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }
    std::string out() const { return slurp(dir / "stdout.txt"); }
};

std::vector<double> loss_column(const fs::path& metrics) {
    std::ifstream f(metrics);
    std::string line;
    std::getline(f, line);
    EXPECT_EQ(line, "step,loss,wall_ms");
    std::vector<double> out;
    while (std::getline(f, line)) {
        const auto a = line.find(','), b = line.find(',', a + 1);
        out.push_back(std::stod(line.substr(a + 1, b - a - 1)));
    }
    return out;
}

}  // namespace

TEST_F(CliTest, SynthWritesOneManifestRowPerPair) {
    ASSERT_EQ(run("synth"), 0) << slurp(dir / "stderr.txt");
    EXPECT_EQ(read_manifest(dir / "data").size(), 6u);
    std::ifstream f(dir / "data" / kManifestName);
    std::size_t lines = 0;
    for (std::string l; std::getline(f, l);) ++lines;
    EXPECT_EQ(lines, 6u);
    const auto lr = read_image((dir / "data" / "lr" / "00000.ppm").string());
    EXPECT_EQ(lr.height, 8u);
}

TEST_F(CliTest, SynthIsBitwiseReproducible) {
    ASSERT_EQ(run("synth"), 0);
    const std::string a = slurp(dir / "data" / "lr" / "00003.ppm"), m = slurp(dir / "data" / kManifestName);
    fs::remove_all(dir / "data");
    ASSERT_EQ(run("synth"), 0);
    EXPECT_EQ(slurp(dir / "data" / "lr" / "00003.ppm"), a);
    EXPECT_EQ(slurp(dir / "data" / kManifestName), m);
}

TEST_F(CliTest, TrainIsReproducibleAndLossIsFinite) {
    ASSERT_EQ(run("synth"), 0);
    ASSERT_EQ(run("train"), 0) << slurp(dir / "stderr.txt");
    const std::string ckpt = slurp(dir / "model.ckpt"), metrics_eval = slurp(dir / "reports" / "eval.csv");
    const auto losses = loss_column(dir / "reports" / "metrics.csv");
    ASSERT_EQ(losses.size(), 3u);
    for (double l : losses) EXPECT_TRUE(std::isfinite(l));
    ASSERT_EQ(run("train"), 0);
    EXPECT_EQ(slurp(dir / "model.ckpt"), ckpt);
    EXPECT_EQ(slurp(dir / "reports" / "eval.csv"), metrics_eval);
    EXPECT_EQ(loss_column(dir / "reports" / "metrics.csv"), losses);
}

TEST_F(CliTest, ResumingWithNoFurtherStepsReproducesEvaluation) {
    ASSERT_EQ(run("synth"), 0);
    ASSERT_EQ(run("train"), 0);
    const std::string ckpt = slurp(dir / "model.ckpt"), ev = slurp(dir / "reports" / "eval.csv");
    ASSERT_EQ(run("train --resume"), 0) << slurp(dir / "stderr.txt");
    EXPECT_EQ(slurp(dir / "reports" / "eval.csv"), ev);
    EXPECT_EQ(slurp(dir / "model.ckpt"), ckpt);
    EXPECT_EQ(loss_column(dir / "reports" / "metrics.csv").size(), 3u);
}

TEST_F(CliTest, SampleIsFourTimesTheInputAndReproducible) {
    ASSERT_EQ(run("synth"), 0);
    ASSERT_EQ(run("train"), 0);
    const std::string in = (dir / "data" / "lr" / "00001.ppm").string(), o = (dir / "out.ppm").string();
    ASSERT_EQ(run("sample --paths.input=" + in + " --paths.output=" + o), 0) << slurp(dir / "stderr.txt");
    const auto img = read_image(o);
    EXPECT_EQ(img.height, 32u);
    EXPECT_EQ(img.width, 32u);
    const std::string first = slurp(o);
    ASSERT_EQ(run("sample --paths.input=" + in + " --paths.output=" + o), 0);
    EXPECT_EQ(slurp(o), first);
}

TEST_F(CliTest, LossDropsOverTwoHundredSteps) {
    ASSERT_EQ(run("synth"), 0);
    ASSERT_EQ(run("train --train.steps=201 --train.learning_rate=0.001 --train.optimizer=adam"), 0)
        << slurp(dir / "stderr.txt");
    const auto losses = loss_column(dir / "reports" / "metrics.csv");
    ASSERT_EQ(losses.size(), 201u);
    EXPECT_LT(losses[200], losses[0]);
}

TEST_F(CliTest, UnknownKeyIsUsageError) {
    EXPECT_EQ(run("synth --model.bogus=1"), kExitUsage);
    EXPECT_FALSE(fs::exists(dir / "data"));
    std::ofstream(dir / "run.cfg", std::ios::app) << "[train]\nlearning_rat = 0.1\n";
    EXPECT_EQ(run("synth"), kExitUsage);
    EXPECT_NE(slurp(dir / "stderr.txt").find("learning_rat"), std::string::npos);
}

TEST_F(CliTest, MissingFilesAreIoErrors) {
    EXPECT_EQ(run("train"), kExitIo);
    ASSERT_EQ(run("synth"), 0);
    EXPECT_EQ(run("sample --paths.input=" + (dir / "data" / "lr" / "00000.ppm").string()), kExitIo);
}

TEST_F(CliTest, AttentionAtInitIsUniform) {
    ASSERT_EQ(run("synth"), 0);
    ASSERT_EQ(run("attn --paths.checkpoint="), 0) << slurp(dir / "stderr.txt");
    std::ifstream f(dir / "reports" / "attn_depth.csv");
    std::string line;
    std::getline(f, line);
    const double uniform = 1.0 / (2 * 256 + 2);
    std::size_t rows = 0;
    while (std::getline(f, line)) {
        double v[3];
        ASSERT_EQ(std::sscanf(line.c_str(), "%lf,%lf,%lf", &v[0], &v[1], &v[2]), 3);
        EXPECT_NEAR(v[1], uniform, 1e-6);
        EXPECT_NEAR(v[2], uniform, 1e-6);
        ++rows;
    }
    EXPECT_EQ(rows, 2u);
    EXPECT_TRUE(fs::exists(dir / "reports" / "attn" / "block1_head1.pgm"));
}

TEST_F(CliTest, AblateReportListsEveryVariant) {
    ASSERT_EQ(run("synth"), 0);
    ASSERT_EQ(run("ablate --train.steps=1"), 0) << slurp(dir / "stderr.txt");
    const std::string csv = slurp(dir / "reports" / "ablation.csv");
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    std::vector<std::string> names;
    while (std::getline(is, line)) names.push_back(line.substr(0, line.find(',')));
    EXPECT_EQ(names, (std::vector<std::string>{"FULL", "A", "B", "C", "D"}));
    EXPECT_TRUE(fs::exists(dir / "reports" / "ablation.txt"));
}

TEST_F(CliTest, ConfigDumpReloads) {
    ASSERT_EQ(run("config --train.steps=17"), 0);
    std::ofstream(dir / "dump.cfg") << out();
    const RunConfig c = load_config((dir / "dump.cfg").string());
    EXPECT_EQ(c.train.steps, 17u);
    EXPECT_EQ(dump_config(c), out());
}
