#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "palgan/autograd.hpp"

namespace palgan {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double eps = 1e-8;
};

/// Adam with bias correction over a fixed list of named parameters.
template <class T>
class Adam {
public:
    struct Slot {
        std::string name;
        Var<T> param;
        Tensor<T> m;
        Tensor<T> v;
    };

    Adam() = default;
    Adam(const std::vector<std::pair<std::string, Var<T>>>& params, AdamConfig cfg) : cfg_(cfg) {
        if (!(cfg.lr > 0) || cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1 || !(cfg.eps > 0))
            throw ValidationError("Adam: invalid hyper-parameters");
        for (const auto& [name, p] : params) slots_.push_back({name, p, Tensor<T>(p.shape()), Tensor<T>(p.shape())});
    }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T lr = static_cast<T>(cfg_.lr / c1);
        const T inv_c2 = static_cast<T>(1.0 / c2);
        const T eps = static_cast<T>(cfg_.eps);
        for (auto& s : slots_) {
            const auto& g = s.param.grad();
            auto& w = s.param.mutable_value();
            for (std::size_t i = 0; i < w.size(); ++i) {
                s.m[i] = b1 * s.m[i] + (T(1) - b1) * g[i];
                s.v[i] = b2 * s.v[i] + (T(1) - b2) * g[i] * g[i];
                w[i] -= lr * s.m[i] / (std::sqrt(s.v[i] * inv_c2) + eps);
            }
#ifndef NDEBUG
            for (T x : w.values())
                if (!std::isfinite(x)) throw NumericalError(s.name, "non-finite parameter after update: " + s.name);
#endif
        }
    }

    std::vector<Slot>& slots() noexcept { return slots_; }
    const std::vector<Slot>& slots() const noexcept { return slots_; }
    std::uint64_t steps() const noexcept { return t_; }
    void set_steps(std::uint64_t t) noexcept { t_ = t; }
    const AdamConfig& config() const noexcept { return cfg_; }

private:
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    std::uint64_t t_ = 0;
};

}  // namespace palgan
