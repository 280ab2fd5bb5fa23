#pragma once

// The three networks with their parameter sets, plus inference helpers.

#include <memory>
#include <optional>
#include <random>

#include "palgan/config.hpp"
#include "palgan/data.hpp"

namespace palgan {

template <class T>
class PalGanModel {
public:
    explicit PalGanModel(const TrainConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        std::mt19937_64 rng(mix_seed(cfg_.seed, 1));
        encoder_ = std::make_unique<PaletteEncoder<T>>(encoder_params, cfg_.encoder_config(), rng);
        generator_ = std::make_unique<AssignmentGenerator<T>>(generator_params, cfg_.generator_config(), rng);
        discriminator_ = std::make_unique<Discriminator<T>>(discriminator_params, cfg_.discriminator_config(), rng);
    }

    PalGanModel(const PalGanModel&) = delete;
    PalGanModel& operator=(const PalGanModel&) = delete;

    ParameterSet<T> encoder_params;
    ParameterSet<T> generator_params;
    ParameterSet<T> discriminator_params;

    const PaletteEncoder<T>& encoder() const { return *encoder_; }
    const AssignmentGenerator<T>& generator() const { return *generator_; }
    const Discriminator<T>& discriminator() const { return *discriminator_; }
    const TrainConfig& config() const noexcept { return cfg_; }
    PaletteGrid grid() const { return cfg_.grid(); }
    int stride() const { return cfg_.encoder_config().stride(); }

    /// Standard-normal latent codes [n, d_z].
    Tensor<T> sample_latent(int n, std::mt19937_64& rng) const {
        Tensor<T> z(Shape{n, cfg_.model.latent_dim});
        std::normal_distribution<double> dist;
        for (auto& v : z.values()) v = static_cast<T>(dist(rng));
        return z;
    }

    struct Prediction {
        Tensor<T> chroma;   // [N,2,H,W]
        Tensor<T> palette;  // [N,bins] palette the generator was conditioned on
    };

    /// Eval-mode colorization of a gray batch whose size is a multiple of the
    /// stride. `palette` replaces the encoder's prediction when given; the
    /// semantic map always comes from the input.
    Prediction predict(const Tensor<T>& gray, const Tensor<T>& latent, const std::optional<Tensor<T>>& palette = std::nullopt) const {
        NoGradGuard guard;
        const auto mode = ForwardMode::eval();
        Var<T> g(gray);
        auto enc = encoder_->forward(g, mode);
        Var<T> h = palette ? Var<T>(*palette) : enc.palette;
        if (h.shape() != enc.palette.shape())
            throw ValidationError("palette " + shape_string(h.shape()) + " does not match the model grid " +
                                  shape_string(enc.palette.shape()));
        auto c = generator_->forward(g, h, Var<T>(latent), enc.semantic_features, mode);
        return {c.value(), h.value()};
    }

    struct ImageResult {
        ChromaMap chroma;
        PaletteHistogram palette;
    };

    /// Colorizes one image of any size: reflect-pads to the stride, runs the
    /// model with z drawn from `seed`, crops back.
    ImageResult colorize(const GrayImage& gray, std::uint64_t seed,
                         const std::optional<PaletteHistogram>& reference = std::nullopt) const {
        const int s = stride();
        const int ph = (gray.height + s - 1) / s * s, pw = (gray.width + s - 1) / s * s;
        GrayImage padded = reflect_pad(gray, ph, pw);
        std::optional<Tensor<T>> h;
        if (reference) {
            if (reference->n_a != grid().n_a || reference->n_b != grid().n_b)
                throw ValidationError("reference palette is " + std::to_string(reference->n_a) + "x" +
                                      std::to_string(reference->n_b) + " but the model uses " + std::to_string(grid().n_a) +
                                      "x" + std::to_string(grid().n_b));
            const PaletteHistogram hs[] = {*reference};
            h = to_tensor<T>(std::span<const PaletteHistogram>(hs));
        }
        std::mt19937_64 rng(seed);
        const GrayImage gs[] = {padded};
        auto pred = predict(to_tensor<T>(std::span<const GrayImage>(gs)), sample_latent(1, rng), h);
        ChromaMap full = chroma_from_tensor(pred.chroma, 0);
        ChromaMap out(gray.height, gray.width);
        for (int y = 0; y < gray.height; ++y)
            for (int x = 0; x < gray.width; ++x)
                for (int c = 0; c < 2; ++c) out.at(y, x, c) = full.at(y, x, c);
        return {std::move(out), detail::histogram_from_row(pred.palette, 0, grid())};
    }

    static GrayImage reflect_pad(const GrayImage& g, int out_h, int out_w) {
        auto fold = [](int i, int n) {
            if (n == 1) return 0;
            const int period = 2 * (n - 1);
            i %= period;
            return i < n ? i : period - i;
        };
        GrayImage out(out_h, out_w);
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) out.at(y, x) = g.at(fold(y, g.height), fold(x, g.width));
        return out;
    }

private:
    TrainConfig cfg_;
    std::unique_ptr<PaletteEncoder<T>> encoder_;
    std::unique_ptr<AssignmentGenerator<T>> generator_;
    std::unique_ptr<Discriminator<T>> discriminator_;
};

}  // namespace palgan
