#pragma once

// Palette assignment generator: (L | h, z) -> ab.
//
//   enc1  conv3x3        1  -> c    @ H      PN, ReLU
//   enc2  conv3x3 s2     c  -> 2c   @ H/2    PN, ReLU
//   enc3  conv3x3 s2     2c -> 4c   @ H/4    PN, ReLU
//   res   [conv PN ReLU conv PN] + skip, repeated
//   up1   resize x2, conv 4c -> 2c  @ H/2    PN, ReLU, + enc2
//   CA    chromatic attention on the H/2 map
//   up2   resize x2, conv 2c -> c   @ H      PN, ReLU, + enc1
//   head  conv3x3 c -> 2, tanh
//
// Every PN layer is conditioned on concat(h, z).

#include <random>
#include <string>
#include <vector>

#include "palgan/chromatic_attention.hpp"

namespace palgan {

struct GeneratorConfig {
    int base_channels = 16;
    int num_residual_blocks = 2;
    int latent_dim = 64;  // d_z
    PaletteGrid grid{};
    int semantic_channels = 128;
    int attention_stride = 16;  // input size / attention grid size
    ChromaticAttentionConfig attention{};
    bool use_attention = true;

    void validate() const {
        grid.validate();
        if (base_channels < 1 || num_residual_blocks < 0 || latent_dim < 0 || semantic_channels < 1)
            throw ValidationError("GeneratorConfig: sizes must be positive");
        if (attention_stride < 2 || attention_stride % 2 != 0)
            throw ValidationError("GeneratorConfig: attention stride must be an even number");
    }
};

template <class T>
class AssignmentGenerator {
public:
    AssignmentGenerator(ParameterSet<T>& ps, GeneratorConfig cfg, std::mt19937_64& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const int c = cfg_.base_channels;
        const int cond = cfg_.grid.bins() + cfg_.latent_dim;
        enc1_ = Block(ps, "generator.enc1", 1, c, 1, cond, rng);
        enc2_ = Block(ps, "generator.enc2", c, 2 * c, 2, cond, rng);
        enc3_ = Block(ps, "generator.enc3", 2 * c, 4 * c, 2, cond, rng);
        for (int i = 0; i < cfg_.num_residual_blocks; ++i) {
            const std::string n = "generator.res" + std::to_string(i);
            res_.push_back({Block(ps, n + ".a", 4 * c, 4 * c, 1, cond, rng), Block(ps, n + ".b", 4 * c, 4 * c, 1, cond, rng)});
        }
        up1_ = Block(ps, "generator.up1", 4 * c, 2 * c, 1, cond, rng);
        up2_ = Block(ps, "generator.up2", 2 * c, c, 1, cond, rng);
        head_ = Conv2d<T>(ps, "generator.head", c, 2, 3, 1, 1, rng);
        ChromaticAttentionConfig ca = cfg_.attention;
        ca.feature_channels = 2 * c;
        ca.semantic_channels = cfg_.semantic_channels;
        attention_ = std::make_unique<ChromaticAttention<T>>(ps, "generator.ca", ca, rng);
    }

    /// gray [N,1,H,W], palette [N,bins], latent [N,d_z], semantic [N,C_s,H/s,W/s]
    /// -> chroma [N,2,H,W] in [-1,1].
    Var<T> forward(const Var<T>& gray, const Var<T>& palette, const Var<T>& latent, const Var<T>& semantic,
                   const ForwardMode& mode) const {
        if (gray.shape().size() != 4 || gray.dim(1) != 1)
            throw ValidationError("generator: expected gray input [N,1,H,W], got " + shape_string(gray.shape()));
        const int n = gray.dim(0), h = gray.dim(2), w = gray.dim(3);
        if (h % cfg_.attention_stride != 0 || w % cfg_.attention_stride != 0)
            throw ValidationError("generator: input " + std::to_string(h) + "x" + std::to_string(w) +
                                  " must be divisible by " + std::to_string(cfg_.attention_stride));
        if (palette.shape() != Shape({n, cfg_.grid.bins()}))
            throw ValidationError("generator: palette " + shape_string(palette.shape()) + " does not match the " +
                                  std::to_string(cfg_.grid.n_a) + "x" + std::to_string(cfg_.grid.n_b) + " model grid");
        if (latent.shape() != Shape({n, cfg_.latent_dim}))
            throw ValidationError("generator: latent code must be [N," + std::to_string(cfg_.latent_dim) + "]");

        auto cond = cfg_.latent_dim > 0 ? ops::concat<T>({palette, latent}) : palette;
        auto e1 = enc1_(gray, cond, mode);
        auto e2 = enc2_(e1, cond, mode);
        auto x = enc3_(e2, cond, mode);
        for (const auto& [a, b] : res_) x = ops::add(x, b(a(x, cond, mode), cond, mode, false));
        auto f = ops::add(up1_(ops::resize_bilinear(x, h / 2, w / 2), cond, mode), e2);
        if (cfg_.use_attention) f = attention_->forward(f, semantic, gray, mode);
        auto y = ops::add(up2_(ops::resize_bilinear(f, h, w), cond, mode), e1);
        return ops::tanh(head_(y, mode));
    }

    const GeneratorConfig& config() const noexcept { return cfg_; }
    ChromaticAttention<T>& attention() noexcept { return *attention_; }

private:
    /// conv -> palette norm -> (ReLU)
    struct Block {
        Conv2d<T> conv;
        PaletteNorm<T> norm;

        Block() = default;
        Block(ParameterSet<T>& ps, const std::string& name, int in, int out, int stride, int cond, std::mt19937_64& rng)
            : conv(ps, name + ".conv", in, out, 3, stride, 1, rng), norm(ps, name + ".pn", out, cond, rng) {}

        Var<T> operator()(const Var<T>& x, const Var<T>& cond, const ForwardMode& mode, bool activate = true) const {
            auto y = norm(conv(x, mode), cond, mode);
            return activate ? ops::relu(y) : y;
        }
    };

    GeneratorConfig cfg_;
    Block enc1_, enc2_, enc3_, up1_, up2_;
    std::vector<std::pair<Block, Block>> res_;
    Conv2d<T> head_;
    std::unique_ptr<ChromaticAttention<T>> attention_;
};

}  // namespace palgan
