#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <map>
#include <random>

#include "palgan/nn.hpp"
#include "support/gradcheck.hpp"

using namespace palgan;

namespace {

Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.values()) v = std::uniform_real_distribution<double>(lo, hi)(rng);
    return t;
}

Var<double> weighted_sum(const Var<double>& y, std::mt19937_64& rng) {
    static thread_local std::map<Shape, Tensor<double>> weights;
    auto it = weights.find(y.shape());
    if (it == weights.end()) it = weights.emplace(y.shape(), random_tensor(y.shape(), rng)).first;
    return ops::sum(ops::mul(y, Var<double>(it->second)));
}

double top_singular_value(const Tensor<double>& w) {
    const int o = w.dim(0);
    const int cols = static_cast<int>(w.size()) / o;
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(w.data(), o, cols);
    return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

}  // namespace

TEST(Autograd, ChainAndAccumulation) {
    Var<double> x(Tensor<double>(Shape{1}, 3.0), true);
    auto y = ops::add(ops::mul(x, x), ops::scale(x, 2.0));  // x^2 + 2x
    backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(Autograd, NoGradGuardBuildsNoGraph) {
    Var<double> x(Tensor<double>(Shape{2}, 1.0), true);
    NoGradGuard guard;
    auto y = ops::sum(ops::mul(x, x));
    EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, DetachBlocksGradient) {
    Var<double> x(Tensor<double>(Shape{1}, 2.0), true);
    auto y = ops::add(ops::mul(x, ops::detach(x)), x);
    backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(Autograd, SelectRowsRoutesGradient) {
    Var<double> a(Tensor<double>(Shape{2, 3}, 1.0), true), b(Tensor<double>(Shape{2, 3}, 2.0), true);
    auto y = ops::select_rows(a, b, {true, false});
    EXPECT_EQ(y.value()[0], 1.0);
    backward(ops::sum(y));
    EXPECT_EQ(a.grad()[0], 1.0);
    EXPECT_EQ(a.grad()[3], 0.0);
    EXPECT_EQ(b.grad()[0], 0.0);
    EXPECT_EQ(b.grad()[3], 1.0);
}

TEST(Ops, Conv2dMatchesDirectLoop) {
    std::mt19937_64 rng(1);
    const auto x = random_tensor({2, 3, 7, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng);
    for (int stride : {1, 2}) {
        auto y = ops::conv2d(Var<double>(x), Var<double>(w), stride, 1);
        const int ho = (7 + 2 - 3) / stride + 1, wo = (6 + 2 - 3) / stride + 1;
        ASSERT_EQ(y.shape(), Shape({2, 4, ho, wo}));
        for (int n = 0; n < 2; ++n)
            for (int o = 0; o < 4; ++o)
                for (int i = 0; i < ho; ++i)
                    for (int j = 0; j < wo; ++j) {
                        double acc = 0;
                        for (int c = 0; c < 3; ++c)
                            for (int ky = 0; ky < 3; ++ky)
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int yy = i * stride + ky - 1, xx = j * stride + kx - 1;
                                    if (yy >= 0 && yy < 7 && xx >= 0 && xx < 6) acc += x.at(n, c, yy, xx) * w.at(o, c, ky, kx);
                                }
                        EXPECT_NEAR(y.value().at(n, o, i, j), acc, 1e-12);
                    }
    }
}

TEST(Ops, BoxMeanUsesReflectPadding) {
    Tensor<double> t(Shape{1, 1, 3, 3});
    for (int i = 0; i < 9; ++i) t[i] = i;
    auto y = ops::box_mean(Var<double>(t), 3);
    // corner (0,0): reflected rows {1,0,1}, cols {1,0,1}
    double acc = 0;
    for (int r : {1, 0, 1})
        for (int c : {1, 0, 1}) acc += t[r * 3 + c];
    EXPECT_NEAR(y.value()[0], acc / 9, 1e-12);
    EXPECT_NEAR(y.value()[4], 4.0, 1e-12);
    EXPECT_THROW(ops::box_mean(Var<double>(t), 5), ValidationError);
}

TEST(Ops, ResizeBilinearKeepsConstants) {
    Tensor<double> t(Shape{1, 2, 4, 4}, 0.25);
    auto y = ops::resize_bilinear(Var<double>(t), 8, 6);
    for (double v : y.value().values()) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(Ops, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(3);
    Var<double> x(random_tensor({2, 3, 6, 6}, rng), true);
    Var<double> w(random_tensor({4, 3, 3, 3}, rng), true);
    Var<double> rows(random_tensor({3, 5}, rng, 0.1, 1.0), true);
    Var<double> other(random_tensor({3, 5}, rng, 0.1, 1.0), true);
    Var<double> lin(random_tensor({4, 5}, rng), true);
    Var<double> gamma(random_tensor({2, 3}, rng), true), beta(random_tensor({2, 3}, rng), true);
    Var<double> l(random_tensor({2, 1, 6, 6}, rng), true);
    Var<double> bias(random_tensor({3}, rng), true);

    const std::vector<std::pair<const char*, std::function<Var<double>()>>> cases = {
        {"conv s1", [&] { return weighted_sum(ops::conv2d(x, w, 1, 1), rng); }},
        {"conv s2", [&] { return weighted_sum(ops::conv2d(x, w, 2, 1), rng); }},
        {"conv 1x1", [&] { return weighted_sum(ops::conv2d(x, ops::reshape(ops::slice_cols(ops::reshape(w, {4, 27}), 0, 3), {4, 3, 1, 1}), 1, 0), rng); }},
        {"resize up", [&] { return weighted_sum(ops::resize_bilinear(x, 12, 9), rng); }},
        {"resize down", [&] { return weighted_sum(ops::resize_bilinear(x, 3, 4), rng); }},
        {"avg pool", [&] { return weighted_sum(ops::avg_pool(x, 2), rng); }},
        {"box mean", [&] { return weighted_sum(ops::box_mean(x, 3), rng); }},
        {"global pool", [&] { return weighted_sum(ops::global_pool(x, false), rng); }},
        {"leaky", [&] { return weighted_sum(ops::leaky_relu(x, 0.2), rng); }},
        {"tanh sigmoid", [&] { return weighted_sum(ops::tanh(ops::sigmoid(x)), rng); }},
        {"reciprocal", [&] { return weighted_sum(ops::reciprocal(rows), rng); }},
        {"normalize rows", [&] { return weighted_sum(ops::normalize_rows(rows), rng); }},
        {"entropy rows", [&] { return weighted_sum(ops::entropy_rows(ops::normalize_rows(rows)), rng); }},
        {"l1 rows", [&] { return weighted_sum(ops::l1_rows(rows, other), rng); }},
        {"rowdot", [&] { return weighted_sum(ops::rowdot(rows, other), rng); }},
        {"linear", [&] { return weighted_sum(ops::linear(rows, lin), rng); }},
        {"concat", [&] { return weighted_sum(ops::concat<double>({rows, other}), rng); }},
        {"affine", [&] { return weighted_sum(ops::affine_per_sample_channel(x, gamma, beta), rng); }},
        {"broadcast", [&] { return weighted_sum(ops::mul_broadcast_channel(x, l), rng); }},
        {"bias", [&] { return weighted_sum(ops::add_channel_bias(x, bias), rng); }},
        {"mean abs diff", [&] { return ops::mean_abs_diff(rows, other); }},
        {"bmm", [&] { return weighted_sum(ops::bmm(ops::reshape(x, {2, 3, 36}), ops::reshape(x, {2, 3, 36}), true, false), rng); }},
    };
    for (const auto& [name, f] : cases) {
        auto r = fixtures::gradcheck(f, {x, w, rows, other, lin, gamma, beta, l, bias}, 16);
        EXPECT_LE(r.relative_error, 1e-3) << name;
    }
}

TEST(BatchNorm, NormalisesBatchStatistics) {
    std::mt19937_64 rng(4);
    Tensor<double> mean(Shape{3}), var(Shape{3}, 1.0);
    auto x = random_tensor({8, 3, 5, 5}, rng, -2, 5);
    auto y = ops::batch_norm(Var<double>(x), mean, var, true, true);
    for (int c = 0; c < 3; ++c) {
        double s = 0, s2 = 0;
        for (int n = 0; n < 8; ++n)
            for (int i = 0; i < 25; ++i) {
                const double v = y.value()[(n * 3 + c) * 25 + i];
                s += v;
                s2 += v * v;
            }
        EXPECT_LE(std::abs(s / 200), 1e-5);
        EXPECT_NEAR(s2 / 200, 1.0, 1e-3);
        EXPECT_NE(mean[c], 0.0);
    }
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
    Tensor<double> mean(Shape{1}, 2.0), var(Shape{1}, 4.0);
    Tensor<double> x(Shape{1, 1, 1, 2});
    x[0] = 4.0;
    x[1] = 0.0;
    auto y = ops::batch_norm(Var<double>(x), mean, var, false, false);
    EXPECT_NEAR(y.value()[0], 2.0 / std::sqrt(4.0 + 1e-5), 1e-12);
    EXPECT_EQ(mean[0], 2.0);
}

TEST(BatchNorm, GradientInTrainingMode) {
    std::mt19937_64 rng(5);
    Tensor<double> mean(Shape{2}), var(Shape{2}, 1.0);
    Var<double> x(random_tensor({3, 2, 4, 4}, rng), true);
    auto f = [&] { return weighted_sum(ops::batch_norm(x, mean, var, true, false), rng); };
    EXPECT_LE(fixtures::gradcheck(f, {x}, 40).relative_error, 1e-3);
}

TEST(SpectralNorm, WarmStartBoundsTopSingularValue) {
    std::mt19937_64 rng(6);
    ParameterSet<double> ps;
    Conv2d<double> conv(ps, "c", 8, 16, 3, 1, 1, rng);
    Linear<double> lin(ps, "l", 20, 7, rng);
    for (const auto& wsn : {conv.effective_weight(ForwardMode::eval()), lin.effective_weight(ForwardMode::eval())})
        EXPECT_NEAR(top_singular_value(wsn.value()), 1.0, 0.05);
}

TEST(SpectralNorm, GradientWithFixedVector) {
    std::mt19937_64 rng(7);
    Var<double> w(random_tensor({5, 2, 3, 3}, rng), true);
    Tensor<double> u(Shape{5}, 0.0);
    u[0] = 1.0;
    auto f = [&] { return weighted_sum(ops::spectral_normalize(w, u, false), rng); };
    EXPECT_LE(fixtures::gradcheck(f, {w}, 40).relative_error, 1e-3);
}

TEST(PaletteNorm, IdentityAffineIsPlainBatchNorm) {
    std::mt19937_64 rng(8);
    ParameterSet<double> ps;
    PaletteNorm<double> pn(ps, "pn", 3, 6, rng);
    zero_parameters(pn.g().weight());
    zero_parameters(pn.g().bias());
    auto x = random_tensor({4, 3, 5, 5}, rng);
    auto cond = random_tensor({4, 6}, rng);
    Tensor<double> mean(Shape{3}), var(Shape{3}, 1.0);
    auto expected = ops::batch_norm(Var<double>(x), mean, var, true, false);
    auto y = pn(Var<double>(x), Var<double>(cond), ForwardMode::frozen_train());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.value()[i], expected.value()[i], 1e-6);
}

TEST(PaletteNorm, RespondsToPalette) {
    std::mt19937_64 rng(9);
    ParameterSet<double> ps;
    PaletteNorm<double> pn(ps, "pn", 3, 6, rng);
    auto x = random_tensor({2, 3, 4, 4}, rng);
    auto a = random_tensor({2, 6}, rng, 0, 1), b = random_tensor({2, 6}, rng, 0, 1);
    auto ya = pn(Var<double>(x), Var<double>(a), ForwardMode::frozen_train());
    auto yb = pn(Var<double>(x), Var<double>(b), ForwardMode::frozen_train());
    double diff = 0;
    for (std::size_t i = 0; i < x.size(); ++i) diff += std::abs(ya.value()[i] - yb.value()[i]);
    EXPECT_GT(diff, 0.0);
}

TEST(PaletteNorm, PreAffineStatistics) {
    std::mt19937_64 rng(10);
    ParameterSet<double> ps;
    PaletteNorm<double> pn(ps, "pn", 4, 6, rng);
    auto xhat = pn.normalize(Var<double>(random_tensor({8, 4, 6, 6}, rng, 3, 9)), ForwardMode::train());
    for (int c = 0; c < 4; ++c) {
        double s = 0, s2 = 0;
        for (int n = 0; n < 8; ++n)
            for (int i = 0; i < 36; ++i) {
                const double v = xhat.value()[(n * 4 + c) * 36 + i];
                s += v;
                s2 += v * v;
            }
        EXPECT_LE(std::abs(s / 288), 1e-5);
        EXPECT_NEAR(s2 / 288 - (s / 288) * (s / 288), 1.0, 1e-3);
    }
}

TEST(PaletteNorm, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(11);
    ParameterSet<double> ps;
    PaletteNorm<double> pn(ps, "pn", 3, 5, rng);
    Var<double> x(random_tensor({3, 3, 4, 4}, rng), true), cond(random_tensor({3, 5}, rng), true);
    auto f = [&] { return weighted_sum(pn(x, cond, ForwardMode::frozen_train()), rng); };
    std::vector<Var<double>> in{x, cond};
    for (auto& p : ps.parameters()) in.push_back(p.var);
    EXPECT_LE(fixtures::gradcheck(f, in, 24).relative_error, 1e-3);
}
