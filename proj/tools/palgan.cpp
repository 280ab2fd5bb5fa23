// palgan: train, colorize and evaluate palette-conditioned colorization models.
//
// Exit codes: 0 success, 1 usage or I/O error, 2 numerical abort.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "CLI11.hpp"
#include "palgan/metrics.hpp"
#include "palgan/training.hpp"

namespace fs = std::filesystem;
using namespace palgan;

namespace {

using Model = Trainer<float>;

void configure_threads(bool deterministic) {
    int threads = 1;
    if (const char* env = std::getenv("PALGAN_NUM_THREADS")) threads = std::max(1, std::atoi(env));
    Eigen::setNbThreads(deterministic ? 1 : threads);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
}

void ensure_directory(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

std::unique_ptr<Model> load_checkpoint(const std::string& path) {
    if (!fs::exists(path)) throw IoError("checkpoint not found: " + path);
    return Model::load(path);
}

RgbImage colorize_rgb(const Model& m, const GrayImage& gray, std::uint64_t seed,
                      const std::optional<PaletteHistogram>& reference = std::nullopt) {
    return lab_to_rgb(gray, m.model().colorize(gray, seed, reference).chroma);
}

/// Jet colour map for t in [0,1].
std::array<double, 3> jet(double t) {
    auto ramp = [](double x) { return std::clamp(1.5 - std::abs(x), 0.0, 1.0); };
    return {ramp(4 * t - 3), ramp(4 * t - 2), ramp(4 * t - 1)};
}

RgbImage palette_heatmap(const PaletteHistogram& h, int scale) {
    double peak = 0.0;
    for (double v : h.weights) peak = std::max(peak, v);
    RgbImage img(h.n_a * scale, h.n_b * scale);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double t = peak > 0 ? h.at(y / scale, x / scale) / peak : 0.0;
            const auto c = jet(t);
            for (int k = 0; k < 3; ++k) img.at(y, x, k) = c[k];
        }
    return img;
}

struct Options {
    std::string config, data, out, checkpoint, reference, resume;
    std::vector<std::string> inputs;
    int samples = 1;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool deterministic = false;
    int bins = 0;
    int crop = 0;
    double sigma = 0.1;
};

int cmd_train(const Options& o) {
    std::unique_ptr<Model> trainer;
    if (!o.resume.empty()) {
        trainer = load_checkpoint(o.resume);
        std::cout << "resuming from step " << trainer->step() << "\n";
    } else {
        TrainConfig cfg = o.config.empty() ? TrainConfig{} : read_config(o.config);
        if (o.seed_set) cfg.seed = o.seed;
        if (o.bins) cfg.bins = o.bins;
        if (o.crop) cfg.crop_size = o.crop;
        if (o.deterministic) cfg.deterministic = true;
        cfg.validate();
        trainer = std::make_unique<Model>(cfg);
    }
    const auto& cfg = trainer->config();
    configure_threads(cfg.deterministic);
    if (!fs::is_directory(o.data)) throw IoError("data root is not a readable directory: " + o.data);
    const auto index = build_index(o.data, Split::train);
    for (const auto& w : index.warnings) std::cerr << "warning: " << w << "\n";
    trainer->plan(index.size());

    const fs::path out(o.out);
    ensure_directory(out);
    write_text(out / "config.toml", config_to_text(cfg));
    const fs::path log_path = out / "progress.csv";
    const bool append = !o.resume.empty() && fs::exists(log_path);
    std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write " + log_path.string());
    if (!append) log << LossReport::csv_header() << "\n";

    std::cout << "training " << index.size() << " images, steps " << trainer->step() << " -> " << trainer->total_steps()
              << "\n";
    while (!trainer->finished()) {
        const auto r = trainer->run_step(index);
        if (r.step % cfg.log_interval == 0 || r.step == 1 || trainer->finished()) {
            log << r.csv_row() << "\n" << std::flush;
            std::cout << r.csv_row() << "\n";
        }
        if (cfg.checkpoint_interval > 0 && r.step % cfg.checkpoint_interval == 0 && !trainer->finished())
            trainer->save((out / ("checkpoint_" + std::to_string(r.step) + ".palg")).string());
    }
    trainer->save((out / "final.palg").string());
    std::cout << "wrote " << (out / "final.palg").string() << "\n";
    return 0;
}

GrayImage read_gray(const std::string& path) { return rgb_to_lab(read_image(path).rgb).gray; }

int cmd_colorize(const Options& o) {
    configure_threads(o.deterministic);
    const auto m = load_checkpoint(o.checkpoint);
    if (o.samples < 1) throw ValidationError("--samples must be at least 1");
    const fs::path out(o.out);
    ensure_directory(out);
    for (const auto& input : o.inputs) {
        const auto gray = read_gray(input);
        const std::string stem = fs::path(input).stem().string();
        for (int k = 0; k < o.samples; ++k) {
            const auto name = o.samples == 1 ? stem + ".png" : stem + "_" + std::to_string(k) + ".png";
            write_png((out / name).string(), colorize_rgb(*m, gray, mix_seed(o.seed, static_cast<std::uint64_t>(k))));
            std::cout << (out / name).string() << "\n";
        }
    }
    return 0;
}

int cmd_colorize_ref(const Options& o) {
    configure_threads(o.deterministic);
    const auto m = load_checkpoint(o.checkpoint);
    const auto grid = m->model().grid();
    PaletteHistogram reference;
    if (detail::lower_extension(o.reference) == ".json") {
        const auto file = read_palette_file(o.reference);
        if (file.histogram.bins() != grid.bins())
            throw ValidationError("reference palette has " + std::to_string(file.histogram.bins()) +
                                  " bins but the model uses " + std::to_string(grid.bins()));
        reference = file.histogram;
    } else {
        reference = soft_histogram(rgb_to_lab(read_image(o.reference).rgb).chroma, grid);
    }
    const fs::path out(o.out);
    ensure_directory(out);
    for (const auto& input : o.inputs) {
        const auto path = out / (fs::path(input).stem().string() + ".png");
        write_png(path.string(), colorize_rgb(*m, read_gray(input), mix_seed(o.seed, 0), reference));
        std::cout << path.string() << "\n";
    }
    return 0;
}

int cmd_palette(const Options& o) {
    const auto grid = PaletteGrid::square(o.bins ? o.bins : 256, o.sigma);
    const fs::path out(o.out);
    ensure_directory(out);
    for (const auto& input : o.inputs) {
        const auto decoded = read_image(input);
        if (decoded.source_channels == 1)
            throw ValidationError(input + " is a grayscale image; a palette needs chroma to bin");
        const auto h = soft_histogram(rgb_to_lab(decoded.rgb).chroma, grid);
        const std::string stem = fs::path(input).stem().string();
        write_palette_file((out / (stem + ".palette.json")).string(), h, grid.sigma);
        write_png((out / (stem + ".palette.png")).string(), palette_heatmap(h, 16));
        std::cout << (out / (stem + ".palette.json")).string() << "\n";
    }
    return 0;
}

int cmd_eval(const Options& o) {
    configure_threads(o.deterministic);
    const auto m = load_checkpoint(o.checkpoint);
    if (!fs::is_directory(o.data)) throw IoError("data root is not a readable directory: " + o.data);
    const auto index = build_index(o.data, Split::val);
    for (const auto& w : index.warnings) std::cerr << "warning: " << w << "\n";
    const int crop = o.crop ? o.crop : m->config().crop_size;
    const auto report = evaluate(index, crop, m->model().grid(), [&](const GrayImage& g, std::size_t i) {
        return m->model().colorize(g, mix_seed(o.seed, i)).chroma;
    });
    const fs::path out(o.out);
    ensure_directory(out);
    write_text(out / "eval.csv", report.csv());
    write_text(out / "eval.json", report.summary().dump(2) + "\n");
    std::cout << report.summary().dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Palette-conditioned automatic and reference-based image colorization"};
    app.require_subcommand(1);
    Options o;

    auto seed_option = [&](CLI::App* c) {
        c->add_option_function<std::uint64_t>(
             "--seed", [&](std::uint64_t s) { o.seed = s, o.seed_set = true; }, "seed for latent codes / training")
            ->type_name("INT");
    };
    auto det_flag = [&](CLI::App* c) {
        c->add_flag("--deterministic", o.deterministic, "single-threaded, bit-reproducible execution");
    };

    auto* train = app.add_subcommand("train", "train a model on an image folder");
    train->add_option("--config", o.config, "TOML-style training config")->check(CLI::ExistingFile);
    train->add_option("--data", o.data, "dataset root (uses <root>/train when present)")->required();
    train->add_option("--out", o.out, "output directory for checkpoints and progress.csv")->required();
    train->add_option("--resume", o.resume, "checkpoint to continue from");
    train->add_option("--bins", o.bins, "palette bins (perfect square), overrides the config");
    train->add_option("--crop", o.crop, "crop size, overrides the config");
    seed_option(train);
    det_flag(train);

    auto* colorize = app.add_subcommand("colorize", "automatic colorization of gray or color images");
    colorize->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
    colorize->add_option("inputs", o.inputs, "input images")->required();
    colorize->add_option("--out", o.out, "output directory")->required();
    colorize->add_option("--samples", o.samples, "number of latent samples per input");
    seed_option(colorize);
    det_flag(colorize);

    auto* colorize_ref = app.add_subcommand("colorize-ref", "colorize with the palette of a reference image or JSON");
    colorize_ref->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
    colorize_ref->add_option("inputs", o.inputs, "input images")->required();
    colorize_ref->add_option("--reference", o.reference, "reference color image or palette JSON")->required();
    colorize_ref->add_option("--out", o.out, "output directory")->required();
    seed_option(colorize_ref);
    det_flag(colorize_ref);

    auto* palette = app.add_subcommand("palette", "extract a palette histogram and render it");
    palette->add_option("inputs", o.inputs, "color images")->required();
    palette->add_option("--out", o.out, "output directory")->required();
    palette->add_option("--bins", o.bins, "palette bins (perfect square, default 256)");
    palette->add_option("--sigma", o.sigma, "kernel width (default 0.1)");

    auto* eval = app.add_subcommand("eval", "PSNR / SSIM / palette metrics on a validation folder");
    eval->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
    eval->add_option("--data", o.data, "dataset root (uses <root>/val when present)")->required();
    eval->add_option("--out", o.out, "output directory for eval.csv and eval.json")->required();
    eval->add_option("--crop", o.crop, "evaluation size (default: training crop)");
    seed_option(eval);
    det_flag(eval);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*train) return cmd_train(o);
        if (*colorize) return cmd_colorize(o);
        if (*colorize_ref) return cmd_colorize_ref(o);
        if (*palette) return cmd_palette(o);
        if (*eval) return cmd_eval(o);
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort (" << e.term() << "): " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
