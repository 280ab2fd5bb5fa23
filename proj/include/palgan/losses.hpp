#pragma once

// Training objectives.
//   palette:        L_E = l_rec1 |h - h_hat|_1 - l_rg E(h_hat)
//   generator:      L_G = l_reg mean|C - C_hat| + l_rec2 |h - h_tilde|_1 - l_adv mean D(fake)
//   discriminator:  mean max(0, 1 - D(real)) + mean max(0, 1 + D(fake))
// Batch terms are averaged over the batch.

#include "palgan/palette.hpp"

namespace palgan {

struct LossWeights {
    double lambda_rec1 = 5.0;
    double lambda_rg = 1.0;
    double lambda_reg = 5.0;
    double lambda_rec2 = 1.0;
    double lambda_adv = 1.0;

    void validate() const {
        for (double v : {lambda_rec1, lambda_rg, lambda_reg, lambda_rec2, lambda_adv})
            if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("loss weights must be non-negative");
    }
};

template <class T>
struct PaletteLossTerms {
    Var<T> total;
    Var<T> reconstruction;  // mean_n |h - h_hat|_1
    Var<T> entropy;         // mean_n E(h_hat)
};

template <class T>
struct GeneratorLossTerms {
    Var<T> total;
    Var<T> regression;      // mean |C - C_hat|
    Var<T> reconstruction;  // mean_n |h - h_tilde|_1
    Var<T> adversarial;     // -mean D(fake)
};

/// h_gt, h_pred: [N, bins].
template <class T>
PaletteLossTerms<T> palette_loss(const Var<T>& h_gt, const Var<T>& h_pred, const LossWeights& w) {
    if (h_gt.shape() != h_pred.shape()) throw ValidationError("palette_loss: palette grids differ");
    auto rec = ops::mean(ops::l1_rows(h_gt, h_pred));
    auto ent = ops::mean(ops::entropy_rows(h_pred));
    auto total = ops::sub(ops::scale(rec, static_cast<T>(w.lambda_rec1)), ops::scale(ent, static_cast<T>(w.lambda_rg)));
    return {total, rec, ent};
}

/// c_gt, c_pred: [N,2,H,W]; h_gt: [N,bins]; d_fake: [N].
template <class T>
GeneratorLossTerms<T> generator_loss(const Var<T>& c_gt, const Var<T>& c_pred, const Var<T>& h_gt, const Var<T>& d_fake,
                                     const PaletteGrid& grid, const LossWeights& w) {
    if (c_gt.shape() != c_pred.shape()) throw ValidationError("generator_loss: chroma shapes differ");
    auto reg = ops::mean_abs_diff(c_gt, c_pred);
    auto h_tilde = ops::soft_histogram(c_pred, grid);
    if (h_tilde.shape() != h_gt.shape()) throw ValidationError("generator_loss: palette grid mismatch");
    auto rec = ops::mean(ops::l1_rows(h_gt, h_tilde));
    auto adv = ops::scale(ops::mean(d_fake), T(-1));
    auto total = ops::add(ops::add(ops::scale(reg, static_cast<T>(w.lambda_reg)), ops::scale(rec, static_cast<T>(w.lambda_rec2))),
                          ops::scale(adv, static_cast<T>(w.lambda_adv)));
    return {total, reg, rec, adv};
}

/// Hinge loss on [N] real and fake scores.
template <class T>
Var<T> discriminator_loss(const Var<T>& d_real, const Var<T>& d_fake) {
    auto real = ops::mean(ops::relu(ops::add_scalar(ops::scale(d_real, T(-1)), T(1))));
    auto fake = ops::mean(ops::relu(ops::add_scalar(d_fake, T(1))));
    return ops::add(real, fake);
}

// ---- plain-value forms

inline double palette_loss(const PaletteHistogram& h_gt, const PaletteHistogram& h_pred, const LossWeights& w = {}) {
    return w.lambda_rec1 * histogram_l1(h_gt, h_pred) - w.lambda_rg * entropy(h_pred);
}

inline double generator_loss(const ChromaMap& c_gt, const ChromaMap& c_pred, const PaletteHistogram& h_gt,
                             double d_score_fake, const PaletteGrid& grid, const LossWeights& w = {}) {
    if (c_gt.height != c_pred.height || c_gt.width != c_pred.width)
        throw ValidationError("generator_loss: chroma shapes differ");
    NoGradGuard guard;
    ChromaMap gt[] = {c_gt};
    ChromaMap pred[] = {c_pred};
    PaletteHistogram hs[] = {h_gt};
    Var<double> cg(to_tensor<double>(std::span<const ChromaMap>(gt)));
    Var<double> cp(to_tensor<double>(std::span<const ChromaMap>(pred)));
    Var<double> hg(to_tensor<double>(std::span<const PaletteHistogram>(hs)));
    Var<double> d(Tensor<double>(Shape{1}, d_score_fake));
    return generator_loss(cg, cp, hg, d, grid, w).total.item();
}

inline double discriminator_loss(double d_score_real, double d_score_fake) {
    return std::max(0.0, 1.0 - d_score_real) + std::max(0.0, 1.0 + d_score_fake);
}

}  // namespace palgan
