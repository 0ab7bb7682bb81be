#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "brushfit/brushfit.hpp"

using namespace brushfit;
namespace fs = std::filesystem;

namespace {

const std::string kData = BRUSHFIT_TEST_DATA;

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("brushfit_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string file(const std::string& name) const { return (dir_ / name).string(); }

    int run(const std::string& args) const {
        const std::string cmd = std::string(BRUSHFIT_CLI) + " " + args + " >" + file("stdout.txt") + " 2>" + file("stderr.txt");
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    std::string stderr_text() const { return read_file(file("stderr.txt")); }

    std::string small_config(const std::string& extra = "") const {
        const std::string path = file("cfg.json");
        write_file(path, R"({"canvas_size": 32, "num_strokes": 40, "stroke_steps": 15, "preview_every": 5)" + extra + "}");
        return path;
    }

    fs::path dir_;
};

} // namespace

TEST_F(CliTest, RenderReproducesGoldenImage) {
    ASSERT_EQ(run("render --strokes " + kData + "/golden_strokes.json --out " + file("g.png")), 0) << stderr_text();
    EXPECT_EQ(read_file(file("g.png")), read_file(kData + "/golden_render.png"));
}

TEST_F(CliTest, FitWithZeroStepsWritesInitialization) {
    const auto cfg = small_config();
    ASSERT_EQ(run("fit -q --content " + kData + "/astronaut_128.png --config " + cfg + " --steps 0 --seed 5 --out " +
                  file("s.json")),
              0)
        << stderr_text();
    const auto got = load_strokes(file("s.json"));
    const auto content = resize(load_image(kData + "/astronaut_128.png"), 32, 32);
    const auto want = initialize_strokes(content, 40, 5);
    ASSERT_EQ(got.size(), want.size());
    const auto a = got.flatten(), b = want.flatten();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST_F(CliTest, FitIsDeterministic) {
    const auto cfg = small_config();
    const std::string base = "fit -q --content " + kData + "/coffee_128.png --config " + cfg + " --seed 3 ";
    ASSERT_EQ(run(base + "--out " + file("a.json") + " --history " + file("ha.json")), 0) << stderr_text();
    ASSERT_EQ(run(base + "--out " + file("b.json") + " --history " + file("hb.json")), 0) << stderr_text();
    EXPECT_EQ(read_file(file("a.json")), read_file(file("b.json")));
    EXPECT_EQ(read_file(file("ha.json")), read_file(file("hb.json")));
    EXPECT_EQ(json::parse(read_file(file("ha.json"))).size(), 15u);
}

TEST_F(CliTest, FitWritesPreviewFrames) {
    const auto cfg = small_config();
    ASSERT_EQ(run("fit -q --content " + kData + "/chelsea_128.png --config " + cfg + " --out " + file("s.json") + " --preview " +
                  file("p.png") + " --preview-dir " + file("frames")),
              0)
        << stderr_text();
    const auto preview = load_image(file("p.png"));
    EXPECT_EQ(std::min(preview.height(), preview.width()), 32);
    for (const char* f : {"strokes_000005.png", "strokes_000010.png", "strokes_000015.png"})
        EXPECT_TRUE(fs::exists(file("frames") + "/" + f)) << f;
}

TEST_F(CliTest, StylizeProducesImage) {
    const auto cfg = small_config(R"(, "stroke_steps": 3, "pixel_steps": 2, "pixel_target_side": 40)");
    ASSERT_EQ(run("stylize -q --content " + kData + "/astronaut_128.png --style " + kData + "/coffee_128.png --config " + cfg +
                  " --out " + file("o.png") + " --strokes-out " + file("s.json")),
              0)
        << stderr_text();
    const auto out = load_image(file("o.png"));
    EXPECT_EQ(std::min(out.height(), out.width()), 40);
    EXPECT_EQ(load_strokes(file("s.json")).size(), 40u);
}

TEST_F(CliTest, FlowAcceptsPaths) {
    const auto cfg = small_config(R"(, "stroke_steps": 5)");
    write_file(file("paths.json"), "[[[2,2],[8,8],[14,14],[20,20],[26,26]]]");
    ASSERT_EQ(run("flow -q --content " + kData + "/astronaut_128.png --config " + cfg + " --paths " + file("paths.json") +
                  " --L 5 --out " + file("s.json")),
              0)
        << stderr_text();
    EXPECT_EQ(load_strokes(file("s.json")).size(), 40u);
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
    const std::string content = " --content " + kData + "/astronaut_128.png";
    EXPECT_EQ(run("stylize --style " + kData + "/coffee_128.png --L 5 --out " + file("o.png") + content), 2);
    EXPECT_NE(stderr_text().find("--L"), std::string::npos);
    EXPECT_EQ(run("fit --content " + file("missing.png") + " --out " + file("s.json")), 2);
    EXPECT_NE(stderr_text().find("missing.png"), std::string::npos);
    write_file(file("bad.json"), R"({"render": {"sampels": 4}})");
    EXPECT_EQ(run("fit --config " + file("bad.json") + " --out " + file("s.json") + content), 2);
    EXPECT_NE(stderr_text().find("render.sampels"), std::string::npos);
    EXPECT_EQ(run("fit" + content), 2);
    EXPECT_EQ(run("fit --paths " + file("p.json") + " --out " + file("s.json") + content), 2);
    EXPECT_EQ(run("render --strokes " + file("none.json") + " --out " + file("x.png")), 2);
    EXPECT_EQ(run("flow --out " + file("s.json") + content), 2);
    write_file(file("short.json"), "[[[0,0],[1,1],[2,2]]]");
    EXPECT_EQ(run("flow --paths " + file("short.json") + " --out " + file("s.json") + content), 2);
    EXPECT_EQ(run(""), 2);
    EXPECT_EQ(run("paint"), 2);
    EXPECT_EQ(run("fit --steps nine"), 2);
}

TEST_F(CliTest, RuntimeErrorsExitOne) {
    ASSERT_EQ(run("render --strokes " + kData + "/golden_strokes.json --out " + file("x.jpg")), 1);
    EXPECT_NE(stderr_text().find(".jpg"), std::string::npos);
}
