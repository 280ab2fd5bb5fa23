#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <set>

#include "palgan/image_io.hpp"
#include "palgan/palette.hpp"
#include "support/cli.hpp"
#include "support/synthetic.hpp"

using namespace palgan;
using fixtures::quote;
namespace fs = std::filesystem;

namespace {

/// One trained tiny checkpoint shared by the inference tests.
class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root = fixtures::temp_dir("cli");
        fixtures::write_corpus(root / "data" / "train", 8, 24, 21);
        fixtures::write_corpus(root / "data" / "val", 5, 24, 22);
        std::ofstream(root / "tiny.toml") << fixtures::tiny_config_text();
        const auto r = fixtures::run_cli("train --config " + quote(root / "tiny.toml") + " --data " + quote(root / "data") +
                                             " --out " + quote(root / "run"),
                                         root);
        ASSERT_EQ(r.code, 0) << r.err;
        checkpoint = root / "run" / "final.palg";
    }

    fixtures::CliResult run(const std::string& args) { return fixtures::run_cli(args, root); }

    static fs::path root, checkpoint;
};

fs::path CliTest::root, CliTest::checkpoint;

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

std::string last_lines(const std::string& s, int n) {
    std::size_t pos = s.size() - 1;
    for (int k = 0; k < n && pos != std::string::npos; ++k) pos = s.rfind('\n', pos - 1);
    return s.substr(pos + 1);
}

}  // namespace

TEST_F(CliTest, HelpAndUsageErrors) {
    EXPECT_EQ(run("--help").code, 0);
    for (const char* sub : {"train", "colorize", "colorize-ref", "palette", "eval"}) {
        const auto r = run(std::string(sub) + " --help");
        EXPECT_EQ(r.code, 0) << sub;
        EXPECT_NE(r.out.find("--"), std::string::npos) << sub;
    }
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("colorize --checkpoint x --out y img.png --bogus").code, 1);
}

TEST_F(CliTest, TrainWritesCheckpointsLogAndConfig) {
    const auto run_dir = root / "run";
    EXPECT_TRUE(fs::exists(run_dir / "final.palg"));
    EXPECT_TRUE(fs::exists(run_dir / "checkpoint_2.palg"));
    EXPECT_TRUE(fs::exists(run_dir / "config.toml"));
    const auto log = fixtures::slurp(run_dir / "progress.csv");
    EXPECT_EQ(log.rfind("step,epoch,tau,", 0), 0u);
    EXPECT_EQ(count_lines(log), 5u);  // header + 4 steps
}

TEST_F(CliTest, TrainMissingDataRootFails) {
    const auto missing = root / "no_such_dir";
    const auto r = run("train --data " + quote(missing) + " --out " + quote(root / "x"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find(missing.string()), std::string::npos) << r.err;
}

TEST_F(CliTest, TrainRejectsUnknownConfigKey) {
    std::ofstream(root / "bad.toml") << "batch_size = 2\nwidth_of_everything = 3\n";
    const auto r = run("train --config " + quote(root / "bad.toml") + " --data " + quote(root / "data") + " --out " +
                       quote(root / "bad_run"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("line 2"), std::string::npos) << r.err;
}

TEST_F(CliTest, ResumeContinuesFromRecordedStep) {
    fs::copy(root / "run", root / "resumed", fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    const auto r = run("train --data " + quote(root / "data") + " --out " + quote(root / "resumed") + " --resume " +
                       quote(root / "resumed" / "checkpoint_2.palg"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("resuming from step 2"), std::string::npos) << r.out;
    // resumed steps 3 and 4 reproduce the uninterrupted run's rows
    const auto straight = fixtures::slurp(root / "run" / "progress.csv");
    const auto resumed = fixtures::slurp(root / "resumed" / "progress.csv");
    EXPECT_EQ(count_lines(resumed), 7u);
    EXPECT_EQ(last_lines(resumed, 2), last_lines(straight, 2));
    EXPECT_EQ(fixtures::slurp(root / "resumed" / "final.palg"), fixtures::slurp(root / "run" / "final.palg"));
}

TEST_F(CliTest, NumericalAbortExitsWithTwo) {
    std::ofstream(root / "explode.toml") << fixtures::tiny_config_text() << "lr_generator = 3e38\nlr_discriminator = 3e38\n";
    const auto r = run("train --config " + quote(root / "explode.toml") + " --data " + quote(root / "data") + " --out " +
                       quote(root / "explode"));
    EXPECT_EQ(r.code, 2) << r.out << r.err;
    EXPECT_NE(r.err.find("non-finite"), std::string::npos) << r.err;
}

TEST_F(CliTest, ColorizeKeepsSizeAndSamplesDiffer) {
    GrayImage g(30, 45);
    for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = static_cast<double>(i % 45) / 44.0;
    write_gray_png((root / "gray.png").string(), g);
    const auto one = run("colorize --checkpoint " + quote(checkpoint) + " --out " + quote(root / "c1") + " " + quote(root / "gray.png"));
    ASSERT_EQ(one.code, 0) << one.err;
    const auto img = read_image((root / "c1" / "gray.png").string());
    EXPECT_EQ(img.rgb.height, 30);
    EXPECT_EQ(img.rgb.width, 45);
    EXPECT_EQ(img.source_channels, 3);

    const std::string multi = "colorize --checkpoint " + quote(checkpoint) + " --samples 3 --seed 7 --out ";
    ASSERT_EQ(run(multi + quote(root / "s1") + " " + quote(root / "gray.png")).code, 0);
    ASSERT_EQ(run(multi + quote(root / "s2") + " " + quote(root / "gray.png")).code, 0);
    std::set<std::string> distinct;
    for (int k = 0; k < 3; ++k) {
        const auto name = "gray_" + std::to_string(k) + ".png";
        const auto a = fixtures::slurp(root / "s1" / name);
        EXPECT_FALSE(a.empty());
        EXPECT_EQ(a, fixtures::slurp(root / "s2" / name));
        distinct.insert(a);
    }
    EXPECT_GT(distinct.size(), 1u);
}

TEST_F(CliTest, ColorizeRejectsUnreadableInput) {
    EXPECT_EQ(run("colorize --checkpoint " + quote(checkpoint) + " --out " + quote(root / "c2") + " " + quote(root / "nothing.png")).code, 1);
    EXPECT_EQ(run("colorize --checkpoint " + quote(root / "nothing.palg") + " --out " + quote(root / "c2") + " " +
                  quote(root / "data/val/img_000.png"))
                  .code,
              1);
}

TEST_F(CliTest, ColorizeWithReference) {
    const auto input = root / "data" / "val" / "img_001.png";
    const std::string base = "colorize-ref --checkpoint " + quote(checkpoint) + " " + quote(input) + " --reference ";
    ASSERT_EQ(run(base + quote(root / "data/val/img_002.png") + " --out " + quote(root / "r1")).code, 0);
    ASSERT_EQ(run(base + quote(root / "data/val/img_002.png") + " --out " + quote(root / "r2")).code, 0);
    EXPECT_EQ(fixtures::slurp(root / "r1" / "img_001.png"), fixtures::slurp(root / "r2" / "img_001.png"));

    const auto grid = PaletteGrid::square(64, 0.1);
    write_palette_file((root / "wrong.json").string(), PaletteHistogram::uniform(grid), 0.1);
    const auto r = run(base + quote(root / "wrong.json") + " --out " + quote(root / "r3"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("64 bins"), std::string::npos) << r.err;

    write_palette_file((root / "right.json").string(), PaletteHistogram::uniform(PaletteGrid::square(16, 0.1)), 0.1);
    EXPECT_EQ(run(base + quote(root / "right.json") + " --out " + quote(root / "r4")).code, 0);
}

TEST_F(CliTest, PaletteExtraction) {
    const auto r = run("palette " + quote(root / "data/val/img_000.png") + " --bins 64 --out " + quote(root / "p"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto file = read_palette_file((root / "p" / "img_000.palette.json").string());
    EXPECT_EQ(file.histogram.bins(), 64);
    double sum = 0;
    for (double w : file.histogram.weights) sum += w;
    EXPECT_NEAR(sum, 1.0, 1e-4);
    const auto heat = read_image((root / "p" / "img_000.palette.png").string());
    EXPECT_EQ(heat.rgb.height % 8, 0);
    EXPECT_EQ(heat.rgb.height / 8, heat.rgb.width / 8);
    EXPECT_GT(heat.rgb.height, 8);

    RgbImage gray_rgb(20, 20);
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x)
            for (int c = 0; c < 3; ++c) gray_rgb.at(y, x, c) = (y + x) / 40.0;
    write_png((root / "neutral.png").string(), gray_rgb);
    // odd grid so that ab = (0, 0) is a bin centre rather than a corner
    ASSERT_EQ(run("palette " + quote(root / "neutral.png") + " --bins 225 --out " + quote(root / "p")).code, 0);
    const auto neutral = read_palette_file((root / "p" / "neutral.palette.json").string()).histogram;
    const auto peak = std::max_element(neutral.weights.begin(), neutral.weights.end()) - neutral.weights.begin();
    const auto expected = hard_histogram(ChromaMap(1, 1), PaletteGrid::square(225, 0.1));
    EXPECT_EQ(peak, std::max_element(expected.weights.begin(), expected.weights.end()) - expected.weights.begin());

    GrayImage g(12, 12, 0.3);
    write_gray_png((root / "only_gray.png").string(), g);
    EXPECT_EQ(run("palette " + quote(root / "only_gray.png") + " --out " + quote(root / "p")).code, 1);
}

TEST_F(CliTest, EvalWritesReportsDeterministically) {
    const std::string base = "eval --checkpoint " + quote(checkpoint) + " --data " + quote(root / "data") + " --out ";
    ASSERT_EQ(run(base + quote(root / "e1")).code, 0);
    ASSERT_EQ(run(base + quote(root / "e2") + " --deterministic").code, 0);
    const auto csv = fixtures::slurp(root / "e1" / "eval.csv");
    EXPECT_EQ(count_lines(csv), 6u);
    EXPECT_EQ(csv, fixtures::slurp(root / "e2" / "eval.csv"));
    const auto summary = nlohmann::json::parse(fixtures::slurp(root / "e1" / "eval.json"));
    EXPECT_EQ(summary["count"], 5);

    std::string bytes = fixtures::slurp(checkpoint);
    bytes[1] = 'Z';
    std::ofstream(root / "bad.palg", std::ios::binary) << bytes;
    const auto r = run("eval --checkpoint " + quote(root / "bad.palg") + " --data " + quote(root / "data") + " --out " + quote(root / "e3"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("magic"), std::string::npos) << r.err;
}
