#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "palgan/metrics.hpp"
#include "support/synthetic.hpp"

using namespace palgan;

namespace {

RgbImage constant(int h, int w, double v) {
    RgbImage img(h, w);
    for (auto& p : img.pixels) p = v;
    return img;
}

RgbImage noise(int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    RgbImage img(h, w);
    for (auto& p : img.pixels) p = std::uniform_real_distribution<double>(0, 1)(rng);
    return img;
}

RgbImage negative(const RgbImage& x) {
    RgbImage out = x;
    for (auto& p : out.pixels) p = 1.0 - p;
    return out;
}

template <class F>
RgbImage remap(const RgbImage& x, F f) {
    RgbImage out(x.height, x.width);
    for (int y = 0; y < x.height; ++y)
        for (int c = 0; c < x.width; ++c) {
            const auto [sy, sx] = f(y, c);
            for (int k = 0; k < 3; ++k) out.at(y, c, k) = x.at(sy, sx, k);
        }
    return out;
}

/// Direct 2-D window evaluation of mean SSIM on luma.
double ssim_oracle(const RgbImage& a, const RgbImage& b) {
    auto luma = [](const RgbImage& x, int y, int c) {
        return 0.299 * x.at(y, c, 0) + 0.587 * x.at(y, c, 1) + 0.114 * x.at(y, c, 2);
    };
    double g[11], total = 0;
    for (int i = 0; i < 11; ++i) total += g[i] = std::exp(-(i - 5.0) * (i - 5.0) / (2 * 1.5 * 1.5));
    double acc = 0;
    int count = 0;
    for (int y = 0; y + 11 <= a.height; ++y)
        for (int x = 0; x + 11 <= a.width; ++x) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double w = g[i] * g[j] / (total * total);
                    const double p = luma(a, y + i, x + j), q = luma(b, y + i, x + j);
                    mx += w * p;
                    my += w * q;
                    sxx += w * p * p;
                    syy += w * q * q;
                    sxy += w * p * q;
                }
            const double c1 = 1e-4, c2 = 9e-4;
            acc += (2 * mx * my + c1) * (2 * (sxy - mx * my) + c2) /
                   ((mx * mx + my * my + c1) * (sxx - mx * mx + syy - my * my + c2));
            ++count;
        }
    return acc / count;
}

}  // namespace

TEST(Psnr, ClosedForms) {
    const auto a = noise(8, 8, 1);
    EXPECT_TRUE(std::isinf(psnr(a, a)));
    EXPECT_NEAR(psnr(constant(4, 4, 0.0), constant(4, 4, 0.5)), 10 * std::log10(4.0), 1e-12);
    EXPECT_THROW(psnr(a, noise(8, 9, 1)), ValidationError);
}

TEST(Psnr, MatchesLoopOracleAndIsSymmetric) {
    const auto a = noise(13, 17, 2), b = noise(13, 17, 3);
    double se = 0;
    for (int y = 0; y < 13; ++y)
        for (int x = 0; x < 17; ++x)
            for (int c = 0; c < 3; ++c) se += std::pow(a.at(y, x, c) - b.at(y, x, c), 2);
    EXPECT_NEAR(psnr(a, b), 10 * std::log10(13 * 17 * 3 / se), 1e-9);
    EXPECT_EQ(psnr(a, b), psnr(b, a));
}

TEST(Psnr, InvariantToSharedPixelPermutation) {
    const auto a = noise(10, 10, 4), b = noise(10, 10, 5);
    std::vector<int> perm(100);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(6));
    auto p = [&](int y, int x) { return std::pair{perm[y * 10 + x] / 10, perm[y * 10 + x] % 10}; };
    EXPECT_NEAR(psnr(remap(a, p), remap(b, p)), psnr(a, b), 1e-9);
}

TEST(Ssim, IdentityAndConstants) {
    const auto a = fixtures::synthetic_image(32, 40, 7);
    EXPECT_NEAR(ssim(a, a), 1.0, 1e-9);
    EXPECT_NEAR(ssim(constant(16, 16, 0.5), constant(16, 16, 0.5)), 1.0, 1e-12);
    EXPECT_THROW(ssim(constant(10, 30, 0.5), constant(10, 30, 0.5)), ValidationError);
}

TEST(Ssim, MatchesDirectWindowOracle) {
    const auto a = fixtures::synthetic_image(24, 30, 8), b = noise(24, 30, 9);
    RgbImage mixed = a;
    for (std::size_t i = 0; i < mixed.pixels.size(); ++i) mixed.pixels[i] = 0.7 * a.pixels[i] + 0.3 * b.pixels[i];
    EXPECT_NEAR(ssim(a, mixed), ssim_oracle(a, mixed), 1e-9);
    EXPECT_NEAR(ssim(mixed, a), ssim(a, mixed), 1e-12);
}

TEST(Ssim, NegativeImageScoresBelowHalf) {
    for (std::uint64_t s = 0; s < 8; ++s) {
        const auto a = fixtures::synthetic_image(48, 48, 20 + s);
        EXPECT_LT(ssim(negative(a), a), 0.5) << "image " << s;
    }
}

TEST(Ssim, InvariantToWindowPreservingPermutations) {
    const auto a = fixtures::synthetic_image(32, 32, 30), b = noise(32, 32, 31);
    const double base = ssim(a, b);
    auto flip_h = [](int y, int x) { return std::pair{y, 31 - x}; };
    auto flip_v = [](int y, int x) { return std::pair{31 - y, x}; };
    auto transpose = [](int y, int x) { return std::pair{x, y}; };
    EXPECT_NEAR(ssim(remap(a, flip_h), remap(b, flip_h)), base, 1e-12);
    EXPECT_NEAR(ssim(remap(a, flip_v), remap(b, flip_v)), base, 1e-12);
    EXPECT_NEAR(ssim(remap(a, transpose), remap(b, transpose)), base, 1e-12);
}

TEST(EvalReport, MeansExcludeInfinitePsnr) {
    EvalReport r;
    r.rows = {{"a", 20.0, 0.5, 0.1, 2.0}, {"b", std::numeric_limits<double>::infinity(), 1.0, 0.0, 3.0}, {"c", 30.0, 0.8, 0.3, 4.0}};
    r.summarize();
    EXPECT_DOUBLE_EQ(r.mean_psnr, 25.0);
    EXPECT_EQ(r.infinite_psnr, 1u);
    EXPECT_NEAR(r.mean_ssim, 2.3 / 3, 1e-12);
    EXPECT_NEAR(r.mean_palette_l1, 0.4 / 3, 1e-12);
    EXPECT_NEAR(r.mean_palette_entropy, 3.0, 1e-12);
    const auto csv = r.csv();
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    EXPECT_NE(csv.find("b,inf,1,0,3"), std::string::npos) << csv;
    const auto j = r.summary();
    EXPECT_EQ(j["count"], 3);
    EXPECT_EQ(j["psnr_infinite_excluded"], 1);
}

class EvaluateTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir = fixtures::temp_dir("evaluate");
        fixtures::write_corpus(dir, 5, 40, 12);
    }
    std::filesystem::path dir;
};

TEST_F(EvaluateTest, GroundTruthThroughPipeline) {
    const auto index = build_index(dir, Split::val);
    const auto grid = PaletteGrid{};
    std::mt19937_64 unused(0);
    const auto report = evaluate(index, 32, grid, [&](const GrayImage&, std::size_t i) {
        return rgb_to_lab(crop_image(index.image(i), 32, Split::val, unused)).chroma;
    });
    ASSERT_EQ(report.count(), 5u);
    EXPECT_EQ(report.infinite_psnr, 5u);
    for (const auto& row : report.rows) {
        EXPECT_NEAR(row.ssim, 1.0, 1e-9);
        EXPECT_NEAR(row.palette_l1, 0.0, 1e-12);
    }
    EXPECT_EQ(report.rows[0].image, "img_000.png");
}

TEST_F(EvaluateTest, MeansRecomputeFromRowsAndRunsRepeat) {
    const auto index = build_index(dir, Split::val);
    auto predictor = [](const GrayImage& g, std::size_t i) {
        ChromaMap c(g.height, g.width);
        for (int y = 0; y < g.height; ++y)
            for (int x = 0; x < g.width; ++x) {
                c.at(y, x, 0) = 0.2 * g.at(y, x) - 0.05 * static_cast<double>(i);
                c.at(y, x, 1) = 0.1 - 0.3 * g.at(y, x);
            }
        return c;
    };
    const auto a = evaluate(index, 32, PaletteGrid{}, predictor);
    const auto b = evaluate(index, 32, PaletteGrid{}, predictor);
    EXPECT_EQ(a.csv(), b.csv());
    double psnr_sum = 0, ssim_sum = 0;
    for (const auto& r : a.rows) {
        psnr_sum += r.psnr;
        ssim_sum += r.ssim;
    }
    EXPECT_NEAR(a.mean_psnr, psnr_sum / 5, 1e-9);
    EXPECT_NEAR(a.mean_ssim, ssim_sum / 5, 1e-9);
    EXPECT_THROW(evaluate(index, 32, PaletteGrid{}, [](const GrayImage&, std::size_t) { return ChromaMap(4, 4); }),
                 ValidationError);
}
