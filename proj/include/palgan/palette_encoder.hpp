#pragma once

// Palette generator: grayscale image -> predicted palette histogram, plus the
// coarse semantic feature map consumed by chromatic attention.

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "palgan/nn.hpp"

namespace palgan {

struct PaletteEncoderConfig {
    std::vector<int> widths{32, 64, 128, 256};  // one stride-2 block each
    int semantic_channels = 128;               // d_s
    int mlp_hidden = 256;
    PaletteGrid grid{};

    /// Total downsampling factor of the semantic map.
    int stride() const { return 1 << widths.size(); }
};

template <class T>
struct PaletteEncoderOutput {
    Var<T> palette;            // [N, bins], rows sum to 1
    Var<T> semantic_features;  // [N, d_s, H/16, W/16]
};

template <class T>
class PaletteEncoder {
public:
    PaletteEncoder(ParameterSet<T>& ps, PaletteEncoderConfig cfg, std::mt19937_64& rng) : cfg_(std::move(cfg)) {
        cfg_.grid.validate();
        if (cfg_.widths.empty()) throw ValidationError("PaletteEncoder: need at least one block");
        int in = 1;
        for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
            blocks_.emplace_back(ps, "encoder.down" + std::to_string(i), in, cfg_.widths[i], 3, 2, 1, rng);
            in = cfg_.widths[i];
        }
        semantic_ = Conv2d<T>(ps, "encoder.semantic", in, cfg_.semantic_channels, 3, 1, 1, rng);
        hidden_ = Linear<T>(ps, "encoder.mlp0", cfg_.semantic_channels, cfg_.mlp_hidden, rng);
        logits_ = Linear<T>(ps, "encoder.mlp1", cfg_.mlp_hidden, cfg_.grid.bins(), rng);
    }

    /// gray: [N,1,H,W] with H, W divisible by the encoder stride (16 by default).
    PaletteEncoderOutput<T> forward(const Var<T>& gray, const ForwardMode& mode) const {
        const int s = cfg_.stride();
        if (gray.shape().size() != 4 || gray.dim(1) != 1)
            throw ValidationError("PaletteEncoder: expected gray input [N,1,H,W], got " + shape_string(gray.shape()));
        const int h = gray.dim(2), w = gray.dim(3);
        if (h % s != 0 || w % s != 0)
            throw ValidationError("PaletteEncoder: input " + std::to_string(h) + "x" + std::to_string(w) +
                                  " must be divisible by " + std::to_string(s) + "; pad by " +
                                  std::to_string((s - h % s) % s) + " rows and " + std::to_string((s - w % s) % s) +
                                  " columns");
        constexpr T slope = T(0.2);
        Var<T> x = gray;
        for (const auto& b : blocks_) x = ops::leaky_relu(b(x, mode), slope);
        Var<T> features = ops::leaky_relu(semantic_(x, mode), slope);
        Var<T> pooled = ops::global_pool(features, true);
        Var<T> hidden = ops::leaky_relu(hidden_(pooled, mode), slope);
        Var<T> palette = ops::normalize_rows(ops::sigmoid(logits_(hidden, mode)));
        return {palette, features};
    }

    const PaletteEncoderConfig& config() const noexcept { return cfg_; }

private:
    PaletteEncoderConfig cfg_;
    std::vector<Conv2d<T>> blocks_;
    Conv2d<T> semantic_;
    Linear<T> hidden_;
    Linear<T> logits_;
};

}  // namespace palgan
