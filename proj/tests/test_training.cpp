#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <fstream>
#include <random>

#include "palgan/training.hpp"
#include "support/synthetic.hpp"
#include "support/toy.hpp"

using namespace palgan;
namespace fs = std::filesystem;

namespace {

Batch synthetic_batch(int n, int size, std::uint64_t seed) {
    Batch b;
    for (int i = 0; i < n; ++i) {
        auto lab = rgb_to_lab(fixtures::synthetic_image(size, size, seed + static_cast<std::uint64_t>(i)));
        b.gray.push_back(lab.gray);
        b.chroma.push_back(lab.chroma);
        b.items.push_back(static_cast<std::size_t>(i));
    }
    return b;
}

std::vector<Tensor<float>> snapshot(const ParameterSet<float>& ps) {
    std::vector<Tensor<float>> out;
    for (const auto& p : ps.parameters()) out.push_back(p.var.value());
    return out;
}

bool same(const std::vector<Tensor<float>>& a, const ParameterSet<float>& ps) {
    const auto b = snapshot(ps);
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].storage() != b[i].storage()) return false;
    return true;
}

const fs::path& corpus() {
    static const fs::path dir = [] {
        auto d = fixtures::temp_dir("training_corpus");
        fixtures::write_corpus(d, 6, 24, 11);
        return d;
    }();
    return dir;
}

}  // namespace

TEST(TauSchedule, LinearFromOneToZero) {
    EXPECT_EQ(tau_schedule(0, 100), 1.0);
    EXPECT_EQ(tau_schedule(100, 100), 0.0);
    EXPECT_EQ(tau_schedule(50, 100), 0.5);
    EXPECT_THROW(tau_schedule(101, 100), ValidationError);
    EXPECT_THROW(tau_schedule(-1, 100), ValidationError);
}

TEST(TeacherForcing, EdgeCases) {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 10000; ++i) {
        ASSERT_TRUE(draw_teacher_forcing(1.0, rng));
        ASSERT_TRUE(draw_teacher_forcing(0.9, rng));
    }
    EXPECT_THROW(draw_teacher_forcing(1.5, rng), ValidationError);
    EXPECT_THROW(draw_teacher_forcing(-0.1, rng), ValidationError);
}

TEST(TeacherForcing, EmpiricalRateMatchesClosedForm) {
    for (double tau : {0.0, 0.25, 0.5, 0.75, 0.9, 1.0}) {
        std::mt19937_64 rng(mix_seed(42, static_cast<std::uint64_t>(tau * 100)));
        int hits = 0;
        for (int i = 0; i < 10000; ++i) hits += draw_teacher_forcing(tau, rng);
        EXPECT_NEAR(hits / 10000.0, std::min(1.0, 0.2 / (1.0 - tau)), 0.02) << "tau " << tau;
        EXPECT_NEAR(teacher_forcing_probability(tau), std::min(1.0, 0.2 / (1.0 - tau)), 1e-12);
    }
}

TEST(TeacherForcing, MixPaletteSelectsOneInput) {
    const PaletteGrid grid{};
    const auto gt = PaletteHistogram::one_hot(grid, 3), pred = PaletteHistogram::uniform(grid);
    std::mt19937_64 rng(2);
    EXPECT_EQ(mix_palette(gt, pred, 1.0, rng), gt);
    int gt_count = 0;
    for (int i = 0; i < 2000; ++i) {
        const auto h = mix_palette(gt, pred, 0.0, rng);
        ASSERT_TRUE(h == gt || h == pred);
        gt_count += h == gt;
    }
    EXPECT_NEAR(gt_count / 2000.0, 0.2, 0.03);
    EXPECT_THROW(mix_palette(gt, PaletteHistogram::uniform(PaletteGrid::square(64, 0.1)), 0.5, rng), ValidationError);
}

TEST(Trainer, DefaultsUseTwoTimescales) {
    TrainConfig cfg;
    EXPECT_DOUBLE_EQ(cfg.lr_discriminator / cfg.lr_generator, 4.0);
    EXPECT_EQ(cfg.adam_beta1, 0.0);
    EXPECT_EQ(cfg.adam_beta2, 0.9);
    Trainer<float> t(fixtures::tiny_config());
    EXPECT_DOUBLE_EQ(t.discriminator_optimizer().config().lr / t.generator_optimizer().config().lr, 4.0);
}

TEST(Trainer, OptimizersCoverDisjointParameterSets) {
    Trainer<float> t(fixtures::tiny_config());
    auto& m = t.model();
    std::size_t g = 0;
    for (const auto& s : t.generator_optimizer().slots()) {
        EXPECT_TRUE(s.name.rfind("encoder.", 0) == 0 || s.name.rfind("generator.", 0) == 0) << s.name;
        ++g;
    }
    for (const auto& s : t.discriminator_optimizer().slots()) EXPECT_EQ(s.name.rfind("disc.", 0), 0u) << s.name;
    EXPECT_EQ(g, m.encoder_params.parameters().size() + m.generator_params.parameters().size());
    EXPECT_EQ(t.discriminator_optimizer().slots().size(), m.discriminator_params.parameters().size());
}

TEST(Trainer, EachOptimizerTouchesOnlyItsNetwork) {
    Trainer<float> t(fixtures::tiny_config());
    auto& m = t.model();
    auto fill_grads = [&] {
        for (auto* ps : {&m.encoder_params, &m.generator_params, &m.discriminator_params})
            for (auto& p : ps->parameters()) {
                auto v = p.var;
                v.mutable_grad().fill(0.5f);
            }
    };
    fill_grads();
    const auto enc = snapshot(m.encoder_params), gen = snapshot(m.generator_params), disc = snapshot(m.discriminator_params);
    t.discriminator_optimizer().step();
    EXPECT_TRUE(same(enc, m.encoder_params));
    EXPECT_TRUE(same(gen, m.generator_params));
    EXPECT_FALSE(same(disc, m.discriminator_params));

    fill_grads();
    const auto disc2 = snapshot(m.discriminator_params);
    t.generator_optimizer().step();
    EXPECT_TRUE(same(disc2, m.discriminator_params));
    EXPECT_FALSE(same(enc, m.encoder_params));
    EXPECT_FALSE(same(gen, m.generator_params));
}

TEST(Trainer, StepReportsScheduleAndFiniteLosses) {
    Trainer<float> t(fixtures::tiny_config());
    t.set_total_steps(4);
    const auto batch = synthetic_batch(2, 16, 5);
    double last_tau = 2.0;
    for (int i = 0; i < 4; ++i) {
        const auto r = t.train_step(batch);
        EXPECT_EQ(r.step, i + 1);
        EXPECT_DOUBLE_EQ(r.tau, 1.0 - i / 4.0);
        EXPECT_LE(r.tau, last_tau);
        last_tau = r.tau;
        for (double v : {r.palette_total, r.generator_total, r.regression, r.output_palette, r.adversarial, r.discriminator})
            EXPECT_TRUE(std::isfinite(v));
        EXPECT_NEAR(r.palette_total, 5.0 * r.palette_reconstruction - r.palette_entropy, 1e-4);
    }
    EXPECT_EQ(t.step(), 4);
    EXPECT_TRUE(t.finished());
    EXPECT_THROW(t.train_step(batch), ValidationError);
}

TEST(Trainer, FirstStepIsFullyTeacherForced) {
    Trainer<float> t(fixtures::tiny_config());
    t.set_total_steps(10);
    EXPECT_EQ(t.train_step(synthetic_batch(2, 16, 6)).teacher_forcing, 1.0);
}

TEST(Trainer, SpectralNormKeepsTopSingularValueBounded) {
    Trainer<float> t(fixtures::tiny_config());
    t.set_total_steps(5);
    const auto batch = synthetic_batch(2, 16, 7);
    for (int i = 0; i < 5; ++i) t.train_step(batch);
    auto& m = t.model();
    NoGradGuard guard;
    const auto check = [](const std::string& name, const Tensor<float>& w) {
        const int o = w.dim(0);
        const int cols = static_cast<int>(w.size()) / o;
        Eigen::MatrixXd mat(o, cols);
        for (int i = 0; i < o; ++i)
            for (int j = 0; j < cols; ++j) mat(i, j) = w[static_cast<std::size_t>(i) * cols + j];
        const double top = Eigen::JacobiSVD<Eigen::MatrixXd>(mat).singularValues()(0);
        EXPECT_LE(top, 1.05) << name;
    };
    std::size_t checked = 0;
    for (auto* ps : {&m.encoder_params, &m.generator_params, &m.discriminator_params}) {
        std::map<std::string, Tensor<float>> buffers;
        for (const auto& b : ps->buffers()) buffers[b.name] = b.value;
        for (const auto& p : ps->parameters()) {
            if (!p.name.ends_with(".weight")) continue;
            const auto stem = p.name.substr(0, p.name.size() - 7);
            auto it = buffers.find(stem + ".sn_u");
            ASSERT_NE(it, buffers.end()) << p.name;
            Tensor<float> u = it->second;
            check(p.name, ops::spectral_normalize(p.var, u, false).value());
            ++checked;
        }
    }
    EXPECT_GT(checked, 10u);
}

TEST(Trainer, NonFiniteLossAbortsWithTerm) {
    Trainer<float> t(fixtures::tiny_config());
    t.set_total_steps(2);
    auto head = t.model().generator_params.parameters().back().var;
    head.mutable_value().fill(std::numeric_limits<float>::quiet_NaN());
    try {
        t.train_step(synthetic_batch(2, 16, 8));
        FAIL() << "expected a numerical abort";
    } catch (const NumericalError& e) {
        EXPECT_FALSE(e.term().empty());
        EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
    }
}

TEST(Trainer, SeededRunsAreBitIdentical) {
    const auto index = build_index(corpus(), Split::train);
    auto run = [&] {
        Trainer<float> t(fixtures::tiny_config(9));
        std::vector<std::string> rows;
        for (int i = 0; i < 4; ++i) rows.push_back(t.run_step(index).csv_row());
        std::vector<Tensor<float>> params = snapshot(t.model().generator_params);
        return std::pair{rows, params};
    };
    const auto [a_rows, a_params] = run();
    const auto [b_rows, b_params] = run();
    EXPECT_EQ(a_rows, b_rows);
    for (std::size_t i = 0; i < a_params.size(); ++i) EXPECT_EQ(a_params[i].storage(), b_params[i].storage());
    Trainer<float> other(fixtures::tiny_config(10));
    EXPECT_NE(other.run_step(index).csv_row(), a_rows[0]);
}

TEST(Trainer, PlanUsesEpochsTimesStepsPerEpoch) {
    const auto index = build_index(corpus(), Split::train);
    Trainer<float> t(fixtures::tiny_config());
    t.plan(index.size());
    EXPECT_EQ(t.total_steps(), 2 * 3);
    auto cfg = fixtures::tiny_config();
    cfg.max_steps = 5;
    Trainer<float> capped(cfg);
    capped.plan(index.size());
    EXPECT_EQ(capped.total_steps(), 5);
    cfg.batch_size = 8;
    Trainer<float> too_big(cfg);
    EXPECT_THROW(too_big.plan(index.size()), ValidationError);
}

TEST(Checkpoint, RoundTripRestoresEveryField) {
    const auto dir = fixtures::temp_dir("ckpt_roundtrip");
    const auto index = build_index(corpus(), Split::train);
    Trainer<float> t(fixtures::tiny_config());
    for (int i = 0; i < 2; ++i) t.run_step(index);
    t.save((dir / "a.palg").string());
    auto loaded = Trainer<float>::load((dir / "a.palg").string());
    EXPECT_EQ(loaded->step(), t.step());
    EXPECT_EQ(loaded->total_steps(), t.total_steps());
    EXPECT_EQ(config_to_text(loaded->config()), config_to_text(t.config()));
    EXPECT_EQ(loaded->rng(), t.rng());
    auto& a = t.model();
    auto& b = loaded->model();
    for (auto [pa, pb] : {std::pair{&a.encoder_params, &b.encoder_params}, std::pair{&a.generator_params, &b.generator_params},
                          std::pair{&a.discriminator_params, &b.discriminator_params}}) {
        const auto xa = pa->parameters(), xb = pb->parameters();
        ASSERT_EQ(xa.size(), xb.size());
        for (std::size_t i = 0; i < xa.size(); ++i) EXPECT_EQ(xa[i].var.value().storage(), xb[i].var.value().storage()) << xa[i].name;
        const auto ba = pa->buffers(), bb = pb->buffers();
        ASSERT_EQ(ba.size(), bb.size());
        for (std::size_t i = 0; i < ba.size(); ++i) EXPECT_EQ(ba[i].value.storage(), bb[i].value.storage()) << ba[i].name;
    }
    for (auto [oa, ob] : {std::pair{&t.generator_optimizer(), &loaded->generator_optimizer()},
                          std::pair{&t.discriminator_optimizer(), &loaded->discriminator_optimizer()}}) {
        EXPECT_EQ(oa->steps(), ob->steps());
        const auto sa = oa->slots(), sb = ob->slots();
        for (std::size_t i = 0; i < sa.size(); ++i) {
            EXPECT_EQ(sa[i].m.storage(), sb[i].m.storage());
            EXPECT_EQ(sa[i].v.storage(), sb[i].v.storage());
        }
    }
}

TEST(Checkpoint, ResumedRunMatchesUninterrupted) {
    const auto dir = fixtures::temp_dir("ckpt_resume");
    const auto index = build_index(corpus(), Split::train);
    auto cfg = fixtures::tiny_config(4);
    cfg.epochs = 3;  // crosses an epoch boundary after the resume point
    Trainer<float> straight(cfg);
    std::vector<std::string> expected;
    while (!straight.finished()) expected.push_back(straight.run_step(index).csv_row());

    Trainer<float> first(cfg);
    std::vector<std::string> got;
    for (int i = 0; i < 4; ++i) got.push_back(first.run_step(index).csv_row());
    first.save((dir / "mid.palg").string());
    auto resumed = Trainer<float>::load((dir / "mid.palg").string());
    while (!resumed->finished()) got.push_back(resumed->run_step(index).csv_row());
    EXPECT_EQ(got, expected);
}

TEST(Checkpoint, RejectsCorruptFiles) {
    const auto dir = fixtures::temp_dir("ckpt_corrupt");
    Trainer<float> t(fixtures::tiny_config());
    const auto good = (dir / "good.palg").string();
    t.save(good);
    std::ifstream is(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

    auto write = [&](const std::string& name, const std::string& content) {
        std::ofstream os(dir / name, std::ios::binary);
        os << content;
        return (dir / name).string();
    };
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(Trainer<float>::load(write("magic.palg", bad_magic)), FormatError);
    std::string bad_version = bytes;
    bad_version[4] = 9;
    try {
        Trainer<float>::load(write("version.palg", bad_version));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
    }
    EXPECT_THROW(Trainer<float>::load(write("short.palg", bytes.substr(0, bytes.size() / 2))), FormatError);
    EXPECT_THROW(Trainer<float>::load((dir / "missing.palg").string()), IoError);
}
