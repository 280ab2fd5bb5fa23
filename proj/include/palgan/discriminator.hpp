#pragma once

// Color discriminator with palette projection:
//   score = (W g)^T h + u^T g + b
// where g is a pooled embedding of concat(ab, rgb). The unconditional head
// (u, b) can be switched off for a pure projection score.

#include <random>
#include <string>
#include <vector>

#include "palgan/nn.hpp"

namespace palgan {

struct DiscriminatorConfig {
    std::vector<int> widths{32, 64, 128};  // stride-2 blocks before the embedding block
    int embedding_dim = 256;
    PaletteGrid grid{};
    bool unconditional_head = true;
};

template <class T>
struct DiscriminatorOutput {
    Var<T> score;           // [N]
    Var<T> projection;      // [N], (W g)^T h
    Var<T> unconditional;   // [N], zero when the head is disabled
    Var<T> projected;       // [N, bins], W g
};

template <class T>
class Discriminator {
public:
    Discriminator(ParameterSet<T>& ps, DiscriminatorConfig cfg, std::mt19937_64& rng) : cfg_(std::move(cfg)) {
        cfg_.grid.validate();
        int in = 5;
        for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
            blocks_.emplace_back(ps, "disc.down" + std::to_string(i), in, cfg_.widths[i], 3, 2, 1, rng);
            in = cfg_.widths[i];
        }
        embed_ = Conv2d<T>(ps, "disc.embed", in, cfg_.embedding_dim, 3, 2, 1, rng);
        projection_ = Linear<T>(ps, "disc.projection", cfg_.embedding_dim, cfg_.grid.bins(), rng, false);
        if (cfg_.unconditional_head) head_ = Linear<T>(ps, "disc.head", cfg_.embedding_dim, 1, rng);
    }

    /// chroma [N,2,H,W], rgb [N,3,H,W], palette [N,bins].
    DiscriminatorOutput<T> forward(const Var<T>& chroma, const Var<T>& rgb, const Var<T>& palette,
                                   const ForwardMode& mode) const {
        if (chroma.shape().size() != 4 || chroma.dim(1) != 2 || rgb.shape().size() != 4 || rgb.dim(1) != 3 ||
            chroma.dim(0) != rgb.dim(0) || chroma.dim(2) != rgb.dim(2) || chroma.dim(3) != rgb.dim(3))
            throw ValidationError("discriminator: chroma " + shape_string(chroma.shape()) + " and rgb " +
                                  shape_string(rgb.shape()) + " are not aligned");
        const int n = chroma.dim(0);
        if (palette.shape() != Shape({n, cfg_.grid.bins()}))
            throw ValidationError("discriminator: palette " + shape_string(palette.shape()) + " does not match the model grid");
        constexpr T slope = T(0.2);
        Var<T> x = ops::concat<T>({chroma, rgb});
        for (const auto& b : blocks_) x = ops::leaky_relu(b(x, mode), slope);
        auto g = ops::global_pool(ops::leaky_relu(embed_(x, mode), slope), false);
        auto projected = projection_(g, mode);
        auto proj = ops::rowdot(projected, palette);
        Var<T> uncond = cfg_.unconditional_head ? ops::reshape(head_(g, mode), Shape{n}) : Var<T>(Tensor<T>(Shape{n}));
        return {ops::add(proj, uncond), proj, uncond, projected};
    }

    const DiscriminatorConfig& config() const noexcept { return cfg_; }

private:
    DiscriminatorConfig cfg_;
    std::vector<Conv2d<T>> blocks_;
    Conv2d<T> embed_;
    Linear<T> projection_;
    Linear<T> head_;
};

}  // namespace palgan
