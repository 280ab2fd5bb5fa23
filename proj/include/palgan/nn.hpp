#pragma once

// Parameter storage and the few layer types the networks are built from.
// Every weight matrix is spectrally normalised; the persistent power-iteration
// vector lives next to it as a named buffer.

#include <cmath>
#include <deque>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "palgan/ops.hpp"
#include "palgan/palette.hpp"

namespace palgan {

/// How a forward pass treats stateful layers.
///  training:     batch statistics in batch norm
///  update_stats: fold batch statistics into running averages and advance
///                spectral-norm power iterations
struct ForwardMode {
    bool training = false;
    bool update_stats = false;

    static ForwardMode eval() { return {false, false}; }
    static ForwardMode train() { return {true, true}; }
    /// Training-mode numerics without touching any state (gradient checks).
    static ForwardMode frozen_train() { return {true, false}; }
};

template <class T>
class ParameterSet {
public:
    struct Parameter {
        std::string name;
        Var<T> var;
    };
    struct Buffer {
        std::string name;
        Tensor<T> value;
    };

    Var<T> add_parameter(const std::string& name, Tensor<T> init) {
        require_unique(name);
        params_.push_back({name, Var<T>(std::move(init), true)});
        return params_.back().var;
    }

    /// Returned reference stays valid for the lifetime of the set.
    Tensor<T>& add_buffer(const std::string& name, Tensor<T> init) {
        require_unique(name);
        buffers_.push_back({name, std::move(init)});
        return buffers_.back().value;
    }

    std::vector<Parameter>& parameters() noexcept { return params_; }
    const std::vector<Parameter>& parameters() const noexcept { return params_; }
    std::deque<Buffer>& buffers() noexcept { return buffers_; }
    const std::deque<Buffer>& buffers() const noexcept { return buffers_; }

    void zero_grad() {
        for (auto& p : params_) p.var.zero_grad();
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.var.size();
        return n;
    }

private:
    void require_unique(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) throw ValidationError("duplicate parameter name " + name);
        for (const auto& b : buffers_)
            if (b.name == name) throw ValidationError("duplicate buffer name " + name);
    }

    std::vector<Parameter> params_;
    std::deque<Buffer> buffers_;
};

namespace detail {

template <class T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

/// Random unit vector pushed through `iterations` power steps on `w`.
template <class T>
Tensor<T> warm_singular_vector(const Tensor<T>& w, std::mt19937_64& rng, int iterations = 30) {
    const int o = w.dim(0);
    Tensor<T> u = normal_tensor<T>(Shape{o}, 1.0, rng);
    T norm = 0;
    for (T v : u.values()) norm += v * v;
    for (auto& v : u.values()) v /= std::sqrt(norm);
    Var<T> wv(w, false);
    for (int i = 0; i < iterations; ++i) ops::spectral_normalize(wv, u, true);
    return u;
}

}  // namespace detail

/// Spectrally normalised convolution with optional bias.
template <class T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ParameterSet<T>& ps, const std::string& name, int in, int out, int kernel, int stride, int pad,
           std::mt19937_64& rng, bool bias = true)
        : stride_(stride), pad_(pad) {
        const double fan_in = static_cast<double>(in) * kernel * kernel;
        weight_ = ps.add_parameter(name + ".weight",
                                   detail::normal_tensor<T>(Shape{out, in, kernel, kernel}, std::sqrt(2.0 / fan_in), rng));
        u_ = &ps.add_buffer(name + ".sn_u", detail::warm_singular_vector(weight_.value(), rng));
        if (bias) bias_ = ps.add_parameter(name + ".bias", Tensor<T>(Shape{out}));
    }

    Var<T> operator()(const Var<T>& x, const ForwardMode& mode) const {
        auto y = ops::conv2d(x, effective_weight(mode), stride_, pad_);
        return bias_.defined() ? ops::add_channel_bias(y, bias_) : y;
    }

    Var<T> effective_weight(const ForwardMode& mode) const { return ops::spectral_normalize(weight_, *u_, mode.update_stats); }

    Var<T>& weight() noexcept { return weight_; }
    Var<T>& bias() noexcept { return bias_; }

private:
    Var<T> weight_;
    Var<T> bias_;
    Tensor<T>* u_ = nullptr;
    int stride_ = 1;
    int pad_ = 0;
};

/// Spectrally normalised fully-connected map x W^T (+ b).
template <class T>
class Linear {
public:
    Linear() = default;
    Linear(ParameterSet<T>& ps, const std::string& name, int in, int out, std::mt19937_64& rng, bool bias = true) {
        weight_ = ps.add_parameter(name + ".weight", detail::normal_tensor<T>(Shape{out, in}, std::sqrt(2.0 / in), rng));
        u_ = &ps.add_buffer(name + ".sn_u", detail::warm_singular_vector(weight_.value(), rng));
        if (bias) bias_ = ps.add_parameter(name + ".bias", Tensor<T>(Shape{out}));
    }

    Var<T> operator()(const Var<T>& x, const ForwardMode& mode) const {
        auto y = ops::linear(x, effective_weight(mode));
        return bias_.defined() ? ops::add_channel_bias(y, bias_) : y;
    }

    Var<T> effective_weight(const ForwardMode& mode) const { return ops::spectral_normalize(weight_, *u_, mode.update_stats); }

    Var<T>& weight() noexcept { return weight_; }
    Var<T>& bias() noexcept { return bias_; }

private:
    Var<T> weight_;
    Var<T> bias_;
    Tensor<T>* u_ = nullptr;
};

/// Batch normalisation followed by a per-sample affine map whose scale and
/// shift come from a single fully-connected layer g over the conditioning
/// vector (flattened palette, latent code):  y = (1 + dgamma) * xhat + beta.
template <class T>
class PaletteNorm {
public:
    PaletteNorm() = default;
    PaletteNorm(ParameterSet<T>& ps, const std::string& name, int channels, int cond_dim, std::mt19937_64& rng)
        : channels_(channels), g_(ps, name + ".g", cond_dim, 2 * channels, rng) {
        mean_ = &ps.add_buffer(name + ".running_mean", Tensor<T>(Shape{channels}));
        var_ = &ps.add_buffer(name + ".running_var", Tensor<T>(Shape{channels}, T(1)));
    }

    Var<T> operator()(const Var<T>& x, const Var<T>& cond, const ForwardMode& mode) const {
        return modulate(normalize(x, mode), cond, mode);
    }

    Var<T> normalize(const Var<T>& x, const ForwardMode& mode) const {
        return ops::batch_norm(x, *mean_, *var_, mode.training, mode.update_stats);
    }

    Var<T> modulate(const Var<T>& xhat, const Var<T>& cond, const ForwardMode& mode) const {
        auto gb = g_(cond, mode);
        auto gamma = ops::add_scalar(ops::slice_cols(gb, 0, channels_), T(1));
        auto beta = ops::slice_cols(gb, channels_, channels_);
        return ops::affine_per_sample_channel(xhat, gamma, beta);
    }

    Linear<T>& g() noexcept { return g_; }

private:
    int channels_ = 0;
    Linear<T> g_;
    Tensor<T>* mean_ = nullptr;
    Tensor<T>* var_ = nullptr;
};

/// Zeroes every parameter of a layer (used to build identity configurations).
template <class T>
void zero_parameters(Var<T>& v) {
    if (v.defined()) v.mutable_value().fill(T(0));
}

}  // namespace palgan
