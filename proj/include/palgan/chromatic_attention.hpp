#pragma once

// Chromatic attention: a feature-map residual built from
//   global interaction   F^g_p = sum_q w_pq F^V_q,  w = softmax_q cos(S^K_p, S^Q_q)
//   local delineation    F^l = A * L + B,  A = Psi(cov(F,L) / (var(L) + eps)),
//                        B = mean(F) - A * mean(L)
// fused as  CA(F, S, L) = F + f(F^g ++ F^l).

#include <cmath>
#include <random>
#include <string>

#include "palgan/nn.hpp"

namespace palgan {

namespace ops {

/// Cosine-similarity attention rows: K, Q [N,C,P] -> w [N,P,P], where
/// w[n,p,:] = softmax_q( <K_p, Q_q> / (|K_p| |Q_q|) ).
template <class T>
Var<T> cosine_attention_weights(const Var<T>& keys, const Var<T>& queries) {
    detail::require_rank(keys.shape(), 3, "cosine_attention_weights");
    detail::require_same(keys, queries, "cosine_attention_weights");
    const int n = keys.dim(0), c = keys.dim(1), p = keys.dim(2);
    constexpr T tiny = T(1e-12);

    // unit-normalised columns, kept for the backward pass
    auto kh = std::make_shared<RowMat<T>>();
    auto qh = std::make_shared<RowMat<T>>();
    auto kn = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * p);
    auto qn = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * p);
    kh->resize(static_cast<Eigen::Index>(n) * c, p);
    qh->resize(static_cast<Eigen::Index>(n) * c, p);
    auto unit = [&](const Tensor<T>& src, RowMat<T>& dst, std::vector<T>& norms) {
        for (int b = 0; b < n; ++b)
            for (int j = 0; j < p; ++j) {
                T s = 0;
                for (int ch = 0; ch < c; ++ch) {
                    T v = src[(static_cast<std::size_t>(b) * c + ch) * p + j];
                    s += v * v;
                }
                const T norm = std::sqrt(s + tiny);
                norms[static_cast<std::size_t>(b) * p + j] = norm;
                for (int ch = 0; ch < c; ++ch)
                    dst(b * c + ch, j) = src[(static_cast<std::size_t>(b) * c + ch) * p + j] / norm;
            }
    };
    unit(keys.value(), *kh, *kn);
    unit(queries.value(), *qh, *qn);

    Tensor<T> out(Shape{n, p, p});
    for (int b = 0; b < n; ++b) {
        MatMap<T> w(out.data() + static_cast<std::size_t>(b) * p * p, p, p);
        w.noalias() = kh->middleRows(b * c, c).transpose() * qh->middleRows(b * c, c);
        for (int r = 0; r < p; ++r) {
            const T mx = w.row(r).maxCoeff();
            w.row(r) = (w.row(r).array() - mx).exp();
            w.row(r) /= w.row(r).sum();
        }
    }
    auto wv = std::make_shared<Tensor<T>>(out);
    return make_result<T>(std::move(out), {keys, queries}, [=](Node<T>& self) {
        auto* gk = parent_grad(self, 0);
        auto* gq = parent_grad(self, 1);
        RowMat<T> dlogit(p, p);
        for (int b = 0; b < n; ++b) {
            ConstMatMap<T> w(wv->data() + static_cast<std::size_t>(b) * p * p, p, p);
            ConstMatMap<T> dw(self.grad.data() + static_cast<std::size_t>(b) * p * p, p, p);
            for (int r = 0; r < p; ++r) {
                const T dot = w.row(r).dot(dw.row(r));
                dlogit.row(r) = w.row(r).array() * (dw.row(r).array() - dot);
            }
            auto khb = kh->middleRows(b * c, c);
            auto qhb = qh->middleRows(b * c, c);
            // logits = khb^T qhb
            RowMat<T> dkh = qhb * dlogit.transpose();  // [c, p]
            RowMat<T> dqh = khb * dlogit;              // [c, p]
            auto push = [&](Tensor<T>* g, const RowMat<T>& dhat, const decltype(khb)& hat, const std::vector<T>& norms) {
                if (!g) return;
                for (int j = 0; j < p; ++j) {
                    T proj = 0;
                    for (int ch = 0; ch < c; ++ch) proj += hat(ch, j) * dhat(ch, j);
                    const T norm = norms[static_cast<std::size_t>(b) * p + j];
                    for (int ch = 0; ch < c; ++ch)
                        (*g)[(static_cast<std::size_t>(b) * c + ch) * p + j] += (dhat(ch, j) - hat(ch, j) * proj) / norm;
                }
            };
            push(gk, dkh, khb, *kn);
            push(gq, dqh, qhb, *qn);
        }
    });
}

}  // namespace ops

struct ChromaticAttentionConfig {
    int feature_channels = 32;   // C_f
    int semantic_channels = 128; // C_s
    int key_channels = 32;
    int window = 3;              // box-filter size for local statistics
    double epsilon = 1e-4;       // variance regulariser
    bool use_global = true;
    bool use_local = true;
    bool psi_identity = false;   // replace Psi by the identity map
};

template <class T>
class ChromaticAttention {
public:
    ChromaticAttention(ParameterSet<T>& ps, const std::string& name, ChromaticAttentionConfig cfg, std::mt19937_64& rng)
        : cfg_(cfg) {
        if (cfg_.window < 1 || cfg_.window % 2 == 0) throw ValidationError("ChromaticAttention: window must be odd");
        const int cf = cfg_.feature_channels;
        key_ = Conv2d<T>(ps, name + ".key", cfg_.semantic_channels, cfg_.key_channels, 1, 1, 0, rng);
        query_ = Conv2d<T>(ps, name + ".query", cfg_.semantic_channels, cfg_.key_channels, 1, 1, 0, rng);
        value_ = Conv2d<T>(ps, name + ".value", cf, cf, 1, 1, 0, rng);
        psi0_ = Conv2d<T>(ps, name + ".psi0", cf, cf, 1, 1, 0, rng);
        psi1_ = Conv2d<T>(ps, name + ".psi1", cf, cf, 1, 1, 0, rng);
        fuse0_ = Conv2d<T>(ps, name + ".fuse0", 2 * cf, cf, 3, 1, 1, rng);
        fuse1_ = Conv2d<T>(ps, name + ".fuse1", cf, cf, 1, 1, 0, rng);
    }

    /// f: [N,C_f,H_f,W_f], s: [N,C_s,r,r'] with r | H_f and r' | W_f.
    Var<T> global_interaction(const Var<T>& f, const Var<T>& s, const ForwardMode& mode) const {
        check_feature(f);
        if (s.shape().size() != 4 || s.dim(0) != f.dim(0) || s.dim(1) != cfg_.semantic_channels)
            throw ValidationError("global_interaction: semantic map " + shape_string(s.shape()) + " incompatible");
        const int n = f.dim(0), cf = f.dim(1), hf = f.dim(2), wf = f.dim(3);
        const int rh = s.dim(2), rw = s.dim(3);
        if (rh > hf || rw > wf || hf % rh != 0 || wf % rw != 0 || hf / rh != wf / rw)
            throw ValidationError("global_interaction: attention grid " + std::to_string(rh) + "x" + std::to_string(rw) +
                                  " does not evenly divide feature map " + std::to_string(hf) + "x" + std::to_string(wf));
        require_finite(f.value(), "feature map");
        require_finite(s.value(), "semantic map");
        const int p = rh * rw, ck = cfg_.key_channels;
        auto keys = ops::reshape(key_(s, mode), Shape{n, ck, p});
        auto queries = ops::reshape(query_(s, mode), Shape{n, ck, p});
        auto values = ops::reshape(value_(ops::avg_pool(f, hf / rh), mode), Shape{n, cf, p});
        auto weights = ops::cosine_attention_weights(keys, queries);
        auto mixed = ops::reshape(ops::bmm(values, weights, false, true), Shape{n, cf, rh, rw});
        return (rh == hf && rw == wf) ? mixed : ops::resize_bilinear(mixed, hf, wf);
    }

    /// Attention rows for inspection: [N, P, P].
    Var<T> attention_weights(const Var<T>& s, const ForwardMode& mode) const {
        const int n = s.dim(0), p = s.dim(2) * s.dim(3), ck = cfg_.key_channels;
        return ops::cosine_attention_weights(ops::reshape(key_(s, mode), Shape{n, ck, p}),
                                             ops::reshape(query_(s, mode), Shape{n, ck, p}));
    }

    /// gray: [N,1,H,W] at any resolution; it is resized bilinearly to f's.
    Var<T> local_delineation(const Var<T>& gray, const Var<T>& f, const ForwardMode& mode) const {
        check_feature(f);
        require_finite(f.value(), "feature map");
        const int hf = f.dim(2), wf = f.dim(3), k = cfg_.window;
        if (k > hf || k > wf)
            throw ValidationError("local_delineation: window " + std::to_string(k) + " larger than feature map " +
                                  std::to_string(hf) + "x" + std::to_string(wf));
        auto lum = (gray.dim(2) == hf && gray.dim(3) == wf) ? gray : ops::resize_bilinear(gray, hf, wf);
        auto mean_l = ops::box_mean(lum, k);
        auto mean_f = ops::box_mean(f, k);
        auto mean_fl = ops::box_mean(ops::mul_broadcast_channel(f, lum), k);
        auto var_l = ops::sub(ops::box_mean(ops::mul(lum, lum), k), ops::mul(mean_l, mean_l));
        auto cov = ops::sub(mean_fl, ops::mul_broadcast_channel(mean_f, mean_l));
        auto ratio = ops::mul_broadcast_channel(cov, ops::reciprocal(ops::add_scalar(var_l, static_cast<T>(cfg_.epsilon))));
        auto a = cfg_.psi_identity ? ratio : psi1_(ops::leaky_relu(psi0_(ratio, mode), T(0.2)), mode);
        auto b = ops::sub(mean_f, ops::mul_broadcast_channel(a, mean_l));
        return ops::add(ops::mul_broadcast_channel(a, lum), b);
    }

    Var<T> forward(const Var<T>& f, const Var<T>& s, const Var<T>& gray, const ForwardMode& mode) const {
        check_feature(f);
        Var<T> global = cfg_.use_global ? global_interaction(f, s, mode) : Var<T>(Tensor<T>(f.shape()));
        Var<T> local = cfg_.use_local ? local_delineation(gray, f, mode) : Var<T>(Tensor<T>(f.shape()));
        auto residual = fuse1_(ops::leaky_relu(fuse0_(ops::concat<T>({global, local}), mode), T(0.2)), mode);
        return ops::add(f, residual);
    }

    const ChromaticAttentionConfig& config() const noexcept { return cfg_; }
    Conv2d<T>& key() noexcept { return key_; }
    Conv2d<T>& query() noexcept { return query_; }
    Conv2d<T>& value() noexcept { return value_; }
    Conv2d<T>& psi0() noexcept { return psi0_; }
    Conv2d<T>& psi1() noexcept { return psi1_; }
    Conv2d<T>& fuse0() noexcept { return fuse0_; }
    Conv2d<T>& fuse1() noexcept { return fuse1_; }

private:
    void check_feature(const Var<T>& f) const {
        if (f.shape().size() != 4 || f.dim(1) != cfg_.feature_channels)
            throw ValidationError("chromatic attention: expected feature map with " +
                                  std::to_string(cfg_.feature_channels) + " channels, got " + shape_string(f.shape()));
    }

    static void require_finite(const Tensor<T>& t, const char* what) {
        for (T v : t.values())
            if (!std::isfinite(static_cast<double>(v)))
                throw ValidationError(std::string("chromatic attention: non-finite ") + what);
    }

    ChromaticAttentionConfig cfg_;
    Conv2d<T> key_, query_, value_;
    Conv2d<T> psi0_, psi1_;
    Conv2d<T> fuse0_, fuse1_;
};

}  // namespace palgan
