#pragma once

// Differentiable tensor ops. Each op checks its shapes, computes the forward
// value and registers a closure that accumulates into its parents' gradients.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "palgan/autograd.hpp"

namespace palgan::ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ValidationError(what);
}

inline void require_rank(const Shape& s, int rank, const char* op) {
    require(static_cast<int>(s.size()) == rank,
            std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
}

template <class T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
    require(a.shape() == b.shape(),
            std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> detach(const Var<T>& x) {
    return Var<T>(x.value(), false);
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "add");
    Tensor<T> out = a.value();
    out += b.value();
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t k = 0; k < 2; ++k)
            if (auto* g = parent_grad(self, k)) *g += self.grad;
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "sub");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) *g += self.grad;
        if (auto* g = parent_grad(self, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "mul");
    Tensor<T> out(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (auto* g = parent_grad(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
        if (auto* g = parent_grad(self, 1))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * s;
    return make_result<T>(std::move(out), {x}, [s](Node<T>& self) {
        if (auto* g = parent_grad(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] + s;
    return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0)) *g += self.grad;
    });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        T v = x.value()[i];
        out[i] = v > T(0) ? v : slope * v;
    }
    return make_result<T>(std::move(out), {x}, [slope](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        if (auto* g = parent_grad(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (xv[i] > T(0) ? T(1) : slope);
    });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    return leaky_relu(x, T(0));
}

template <class T>
Var<T> tanh(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.value()[i]);
    auto y = std::make_shared<Tensor<T>>(out);
    return make_result<T>(std::move(out), {x}, [y](Node<T>& self) {
        if (auto* g = parent_grad(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (T(1) - (*y)[i] * (*y)[i]);
    });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x.value()[i]));
    auto y = std::make_shared<Tensor<T>>(out);
    return make_result<T>(std::move(out), {x}, [y](Node<T>& self) {
        if (auto* g = parent_grad(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (*y)[i] * (T(1) - (*y)[i]);
    });
}

template <class T>
Var<T> reciprocal(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / x.value()[i];
    auto y = std::make_shared<Tensor<T>>(out);
    return make_result<T>(std::move(out), {x}, [y](Node<T>& self) {
        if (auto* g = parent_grad(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i] * (*y)[i] * (*y)[i];
    });
}

// ----------------------------------------------------------------- reductions

template <class T>
Var<T> sum(const Var<T>& x) {
    Tensor<T> out(Shape{1}, x.value().sum());
    return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0))
            for (auto& v : g->values()) v += self.grad[0];
    });
}

template <class T>
Var<T> mean(const Var<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// mean |a - b| over all elements; subgradient 0 at ties.
template <class T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "mean_abs_diff");
    const std::size_t n = a.size();
    detail::require(n > 0, "mean_abs_diff: empty input");
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(a.value()[i] - b.value()[i]);
    Tensor<T> out(Shape{1}, acc / static_cast<T>(n));
    return make_result<T>(std::move(out), {a, b}, [n](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        const T s = self.grad[0] / static_cast<T>(n);
        auto* ga = parent_grad(self, 0);
        auto* gb = parent_grad(self, 1);
        for (std::size_t i = 0; i < n; ++i) {
            T d = av[i] - bv[i];
            T sg = d > T(0) ? s : (d < T(0) ? -s : T(0));
            if (ga) (*ga)[i] += sg;
            if (gb) (*gb)[i] -= sg;
        }
    });
}

/// Per-row L1 distance of [N,K] tensors -> [N].
template <class T>
Var<T> l1_rows(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "l1_rows");
    detail::require_rank(a.shape(), 2, "l1_rows");
    const int rows = a.dim(0), cols = a.dim(1);
    Tensor<T> out(Shape{rows});
    for (int r = 0; r < rows; ++r) {
        T acc = 0;
        for (int c = 0; c < cols; ++c) acc += std::abs(a.value()[r * cols + c] - b.value()[r * cols + c]);
        out[r] = acc;
    }
    return make_result<T>(std::move(out), {a, b}, [rows, cols](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        auto* ga = parent_grad(self, 0);
        auto* gb = parent_grad(self, 1);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                std::size_t i = static_cast<std::size_t>(r) * cols + c;
                T d = av[i] - bv[i];
                T sg = d > T(0) ? self.grad[r] : (d < T(0) ? -self.grad[r] : T(0));
                if (ga) (*ga)[i] += sg;
                if (gb) (*gb)[i] -= sg;
            }
    });
}

/// Per-row Shannon entropy -sum h log h of [N,K] -> [N]; log argument
/// clamped at 1e-12 so empty bins contribute 0.
template <class T>
Var<T> entropy_rows(const Var<T>& h) {
    detail::require_rank(h.shape(), 2, "entropy_rows");
    const int rows = h.dim(0), cols = h.dim(1);
    constexpr T floor = T(1e-12);
    Tensor<T> out(Shape{rows});
    for (int r = 0; r < rows; ++r) {
        T acc = 0;
        for (int c = 0; c < cols; ++c) {
            T v = h.value()[r * cols + c];
            acc -= v * std::log(std::max(v, floor));
        }
        out[r] = acc;
    }
    return make_result<T>(std::move(out), {h}, [rows, cols](Node<T>& self) {
        const auto& hv = self.parents[0]->value;
        if (auto* g = parent_grad(self, 0))
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) {
                    std::size_t i = static_cast<std::size_t>(r) * cols + c;
                    T v = hv[i];
                    T d = v > floor ? -(std::log(v) + T(1)) : -std::log(floor);
                    (*g)[i] += self.grad[r] * d;
                }
    });
}

/// Per-row inner product of [N,K] tensors -> [N].
template <class T>
Var<T> rowdot(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "rowdot");
    detail::require_rank(a.shape(), 2, "rowdot");
    const int rows = a.dim(0), cols = a.dim(1);
    Tensor<T> out(Shape{rows});
    for (int r = 0; r < rows; ++r) {
        T acc = 0;
        for (int c = 0; c < cols; ++c) acc += a.value()[r * cols + c] * b.value()[r * cols + c];
        out[r] = acc;
    }
    return make_result<T>(std::move(out), {a, b}, [rows, cols](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        auto* ga = parent_grad(self, 0);
        auto* gb = parent_grad(self, 1);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                std::size_t i = static_cast<std::size_t>(r) * cols + c;
                if (ga) (*ga)[i] += self.grad[r] * bv[i];
                if (gb) (*gb)[i] += self.grad[r] * av[i];
            }
    });
}

/// Divides each row of a positive [N,K] tensor by its sum.
template <class T>
Var<T> normalize_rows(const Var<T>& x) {
    detail::require_rank(x.shape(), 2, "normalize_rows");
    const int rows = x.dim(0), cols = x.dim(1);
    Tensor<T> out(x.shape());
    std::vector<T> sums(rows);
    for (int r = 0; r < rows; ++r) {
        T s = 0;
        for (int c = 0; c < cols; ++c) s += x.value()[r * cols + c];
        detail::require(s > T(0), "normalize_rows: row sum must be positive");
        sums[r] = s;
        for (int c = 0; c < cols; ++c) out[r * cols + c] = x.value()[r * cols + c] / s;
    }
    auto y = std::make_shared<Tensor<T>>(out);
    return make_result<T>(std::move(out), {x}, [rows, cols, sums, y](Node<T>& self) {
        if (auto* g = parent_grad(self, 0))
            for (int r = 0; r < rows; ++r) {
                T dot = 0;
                for (int c = 0; c < cols; ++c) dot += self.grad[r * cols + c] * (*y)[r * cols + c];
                for (int c = 0; c < cols; ++c)
                    (*g)[r * cols + c] += (self.grad[r * cols + c] - dot) / sums[r];
            }
    });
}

/// Row r of the result is a[r] when take_a[r], else b[r].
template <class T>
Var<T> select_rows(const Var<T>& a, const Var<T>& b, const std::vector<bool>& take_a) {
    detail::require_same(a, b, "select_rows");
    const int rows = a.dim(0);
    detail::require(static_cast<int>(take_a.size()) == rows, "select_rows: mask length mismatch");
    const std::size_t stride = a.size() / static_cast<std::size_t>(rows);
    Tensor<T> out(a.shape());
    for (int r = 0; r < rows; ++r) {
        const auto& src = take_a[r] ? a.value() : b.value();
        std::copy_n(src.data() + r * stride, stride, out.data() + r * stride);
    }
    return make_result<T>(std::move(out), {a, b}, [take_a, stride, rows](Node<T>& self) {
        for (int r = 0; r < rows; ++r) {
            auto* g = parent_grad(self, take_a[r] ? 0 : 1);
            if (!g) continue;
            for (std::size_t i = 0; i < stride; ++i) (*g)[r * stride + i] += self.grad[r * stride + i];
        }
    });
}

// -------------------------------------------------------------------- shaping

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
        if (auto* g = parent_grad(self, 0))
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    });
}

/// Concatenates along dim 1. Inputs share every other dimension.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
    detail::require(!parts.empty(), "concat: no inputs");
    Shape shape = parts[0].shape();
    detail::require(shape.size() >= 2, "concat: rank must be >= 2");
    const int n = shape[0];
    std::size_t inner = 1;
    for (std::size_t d = 2; d < shape.size(); ++d) inner *= static_cast<std::size_t>(shape[d]);
    std::vector<int> channels;
    int total = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        detail::require(s.size() == shape.size() && s[0] == n, "concat: incompatible shapes");
        for (std::size_t d = 2; d < shape.size(); ++d) detail::require(s[d] == shape[d], "concat: incompatible shapes");
        channels.push_back(s[1]);
        total += s[1];
    }
    shape[1] = total;
    Tensor<T> out(shape);
    for (int b = 0; b < n; ++b) {
        std::size_t dst = static_cast<std::size_t>(b) * total * inner;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            std::size_t len = channels[k] * inner;
            std::copy_n(parts[k].value().data() + b * len, len, out.data() + dst);
            dst += len;
        }
    }
    return make_result<T>(std::move(out), parts, [n, inner, channels, total](Node<T>& self) {
        for (int b = 0; b < n; ++b) {
            std::size_t src = static_cast<std::size_t>(b) * total * inner;
            for (std::size_t k = 0; k < channels.size(); ++k) {
                std::size_t len = channels[k] * inner;
                if (auto* g = parent_grad(self, k))
                    for (std::size_t i = 0; i < len; ++i) (*g)[b * len + i] += self.grad[src + i];
                src += len;
            }
        }
    });
}

/// Columns [start, start+count) of a rank-2 tensor.
template <class T>
Var<T> slice_cols(const Var<T>& x, int start, int count) {
    detail::require_rank(x.shape(), 2, "slice_cols");
    const int rows = x.dim(0), cols = x.dim(1);
    detail::require(start >= 0 && count >= 0 && start + count <= cols, "slice_cols: range out of bounds");
    Tensor<T> out(Shape{rows, count});
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < count; ++c) out[r * count + c] = x.value()[r * cols + start + c];
    return make_result<T>(std::move(out), {x}, [rows, cols, start, count](Node<T>& self) {
        if (auto* g = parent_grad(self, 0))
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < count; ++c) (*g)[r * cols + start + c] += self.grad[r * count + c];
    });
}

// ------------------------------------------------------------ broadcast / affine

/// y[n,c,...] = x[n,c,...] * gamma[n,c] + beta[n,c]
template <class T>
Var<T> affine_per_sample_channel(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
    const int n = x.dim(0), c = x.dim(1);
    detail::require(gamma.shape() == Shape({n, c}) && beta.shape() == Shape({n, c}),
                    "affine_per_sample_channel: gamma/beta must be [N,C]");
    const std::size_t inner = x.size() / (static_cast<std::size_t>(n) * c);
    Tensor<T> out(x.shape());
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const T gm = gamma.value()[b * c + ch], bt = beta.value()[b * c + ch];
            const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[base + i] = x.value()[base + i] * gm + bt;
        }
    return make_result<T>(std::move(out), {x, gamma, beta}, [n, c, inner](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& gv = self.parents[1]->value;
        auto* gx = parent_grad(self, 0);
        auto* gg = parent_grad(self, 1);
        auto* gb = parent_grad(self, 2);
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * inner;
                T sg = 0, sb = 0;
                for (std::size_t i = 0; i < inner; ++i) {
                    T d = self.grad[base + i];
                    if (gx) (*gx)[base + i] += d * gv[b * c + ch];
                    sg += d * xv[base + i];
                    sb += d;
                }
                if (gg) (*gg)[b * c + ch] += sg;
                if (gb) (*gb)[b * c + ch] += sb;
            }
    });
}

/// y[n,c,h,w] = x[n,c,h,w] * l[n,0,h,w]
template <class T>
Var<T> mul_broadcast_channel(const Var<T>& x, const Var<T>& l) {
    detail::require_rank(x.shape(), 4, "mul_broadcast_channel");
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    detail::require(l.shape() == Shape({n, 1, x.dim(2), x.dim(3)}), "mul_broadcast_channel: l must be [N,1,H,W]");
    Tensor<T> out(x.shape());
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < hw; ++i)
                out[(static_cast<std::size_t>(b) * c + ch) * hw + i] =
                    x.value()[(static_cast<std::size_t>(b) * c + ch) * hw + i] * l.value()[b * hw + i];
    return make_result<T>(std::move(out), {x, l}, [n, c, hw](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& lv = self.parents[1]->value;
        auto* gx = parent_grad(self, 0);
        auto* gl = parent_grad(self, 1);
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < hw; ++i) {
                    std::size_t k = (static_cast<std::size_t>(b) * c + ch) * hw + i;
                    if (gx) (*gx)[k] += self.grad[k] * lv[b * hw + i];
                    if (gl) (*gl)[b * hw + i] += self.grad[k] * xv[k];
                }
    });
}

/// Adds a [C] bias along dim 1 of a rank >= 2 tensor.
template <class T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
    const int n = x.dim(0), c = x.dim(1);
    detail::require(bias.shape() == Shape({c}), "add_channel_bias: bias must be [C]");
    const std::size_t inner = x.size() / (static_cast<std::size_t>(n) * c);
    Tensor<T> out = x.value();
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < inner; ++i) out[(static_cast<std::size_t>(b) * c + ch) * inner + i] += bias.value()[ch];
    return make_result<T>(std::move(out), {x, bias}, [n, c, inner](Node<T>& self) {
        if (auto* gx = parent_grad(self, 0)) *gx += self.grad;
        if (auto* gb = parent_grad(self, 1))
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < inner; ++i)
                        (*gb)[ch] += self.grad[(static_cast<std::size_t>(b) * c + ch) * inner + i];
    });
}

// -------------------------------------------------------------- linear algebra

/// x[N,K] W[O,K]^T -> [N,O]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight) {
    detail::require_rank(x.shape(), 2, "linear");
    detail::require_rank(weight.shape(), 2, "linear");
    const int n = x.dim(0), k = x.dim(1), o = weight.dim(0);
    detail::require(weight.dim(1) == k, "linear: weight expects " + std::to_string(weight.dim(1)) + " inputs, got " +
                                            std::to_string(k));
    Tensor<T> out(Shape{n, o});
    MatMap<T>(out.data(), n, o).noalias() =
        ConstMatMap<T>(x.value().data(), n, k) * ConstMatMap<T>(weight.value().data(), o, k).transpose();
    return make_result<T>(std::move(out), {x, weight}, [n, k, o](Node<T>& self) {
        ConstMatMap<T> dy(self.grad.data(), n, o);
        if (auto* gx = parent_grad(self, 0))
            MatMap<T>(gx->data(), n, k).noalias() += dy * ConstMatMap<T>(self.parents[1]->value.data(), o, k);
        if (auto* gw = parent_grad(self, 1))
            MatMap<T>(gw->data(), o, k).noalias() += dy.transpose() * ConstMatMap<T>(self.parents[0]->value.data(), n, k);
    });
}

/// Batched product out[b] = op(A[b]) op(B[b]) with optional transposes.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
    detail::require_rank(a.shape(), 3, "bmm");
    detail::require_rank(b.shape(), 3, "bmm");
    const int batch = a.dim(0);
    detail::require(b.dim(0) == batch, "bmm: batch mismatch");
    const int ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
    const int m = trans_a ? ac : ar, ka = trans_a ? ar : ac;
    const int kb = trans_b ? bc : br, nn = trans_b ? br : bc;
    detail::require(ka == kb, "bmm: inner dimension mismatch");
    Tensor<T> out(Shape{batch, m, nn});
    for (int i = 0; i < batch; ++i) {
        ConstMatMap<T> A(a.value().data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
        ConstMatMap<T> B(b.value().data() + static_cast<std::size_t>(i) * br * bc, br, bc);
        MatMap<T> C(out.data() + static_cast<std::size_t>(i) * m * nn, m, nn);
        if (!trans_a && !trans_b) C.noalias() = A * B;
        else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
        else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
    return make_result<T>(std::move(out), {a, b}, [=](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        auto* gb = parent_grad(self, 1);
        for (int i = 0; i < batch; ++i) {
            ConstMatMap<T> A(self.parents[0]->value.data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
            ConstMatMap<T> B(self.parents[1]->value.data() + static_cast<std::size_t>(i) * br * bc, br, bc);
            ConstMatMap<T> dC(self.grad.data() + static_cast<std::size_t>(i) * m * nn, m, nn);
            if (ga) {
                MatMap<T> dA(ga->data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
                // op(A) = A or A^T; d op(A) = dC op(B)^T
                RowMat<T> dopa = trans_b ? RowMat<T>(dC * B) : RowMat<T>(dC * B.transpose());
                if (trans_a) dA += dopa.transpose();
                else dA += dopa;
            }
            if (gb) {
                MatMap<T> dB(gb->data() + static_cast<std::size_t>(i) * br * bc, br, bc);
                RowMat<T> dopb = trans_a ? RowMat<T>(A * dC) : RowMat<T>(A.transpose() * dC);
                if (trans_b) dB += dopb.transpose();
                else dB += dopb;
            }
        }
    });
}

// ---------------------------------------------------------------- convolution

/// 2-D convolution, zero padding. x[N,C,H,W], w[O,C,k,k] -> [N,O,Ho,Wo].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, int stride, int pad) {
    detail::require_rank(x.shape(), 4, "conv2d");
    detail::require_rank(weight.shape(), 4, "conv2d");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int o = weight.dim(0), k = weight.dim(2);
    detail::require(weight.dim(1) == c && weight.dim(3) == k,
                    "conv2d: weight " + shape_string(weight.shape()) + " incompatible with input " + shape_string(x.shape()));
    detail::require(stride >= 1 && pad >= 0, "conv2d: bad stride/padding");
    const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
    detail::require(ho >= 1 && wo >= 1, "conv2d: kernel larger than padded input");
    const int ckk = c * k * k, p = ho * wo;
    const bool pointwise = (k == 1 && stride == 1 && pad == 0);

    // im2col of every sample, kept for the backward pass
    auto cols = std::make_shared<AlignedVector<T>>();
    if (!pointwise) {
        cols->assign(static_cast<std::size_t>(n) * ckk * p, T(0));
        for (int b = 0; b < n; ++b) {
            T* cb = cols->data() + static_cast<std::size_t>(b) * ckk * p;
            const T* xb = x.value().data() + static_cast<std::size_t>(b) * c * h * w;
            for (int ch = 0; ch < c; ++ch)
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        T* row = cb + static_cast<std::size_t>((ch * k + ky) * k + kx) * p;
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int ox = 0; ox < wo; ++ox) {
                                const int ix = ox * stride - pad + kx;
                                if (ix >= 0 && ix < w) row[oy * wo + ox] = xb[(ch * h + iy) * w + ix];
                            }
                        }
                    }
        }
    }
    auto col_ptr = [&x, cols, pointwise, ckk, p](int b) -> const T* {
        return pointwise ? x.value().data() + static_cast<std::size_t>(b) * ckk * p
                         : cols->data() + static_cast<std::size_t>(b) * ckk * p;
    };

    Tensor<T> out(Shape{n, o, ho, wo});
    ConstMatMap<T> wm(weight.value().data(), o, ckk);
    for (int b = 0; b < n; ++b)
        MatMap<T>(out.data() + static_cast<std::size_t>(b) * o * p, o, p).noalias() = wm * ConstMatMap<T>(col_ptr(b), ckk, p);

    return make_result<T>(std::move(out), {x, weight}, [=](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        ConstMatMap<T> wm(self.parents[1]->value.data(), o, ckk);
        auto* gx = parent_grad(self, 0);
        auto* gw = parent_grad(self, 1);
        RowMat<T> dcols(ckk, p);
        for (int b = 0; b < n; ++b) {
            ConstMatMap<T> dy(self.grad.data() + static_cast<std::size_t>(b) * o * p, o, p);
            const T* cb = pointwise ? xv.data() + static_cast<std::size_t>(b) * ckk * p
                                    : cols->data() + static_cast<std::size_t>(b) * ckk * p;
            if (gw) MatMap<T>(gw->data(), o, ckk).noalias() += dy * ConstMatMap<T>(cb, ckk, p).transpose();
            if (!gx) continue;
            if (pointwise) {
                MatMap<T>(gx->data() + static_cast<std::size_t>(b) * ckk * p, ckk, p).noalias() += wm.transpose() * dy;
                continue;
            }
            dcols.noalias() = wm.transpose() * dy;
            T* gxb = gx->data() + static_cast<std::size_t>(b) * c * h * w;
            for (int ch = 0; ch < c; ++ch)
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T* row = dcols.data() + static_cast<std::size_t>((ch * k + ky) * k + kx) * p;
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int ox = 0; ox < wo; ++ox) {
                                const int ix = ox * stride - pad + kx;
                                if (ix >= 0 && ix < w) gxb[(ch * h + iy) * w + ix] += row[oy * wo + ox];
                            }
                        }
                    }
        }
    });
}

// ------------------------------------------------------------------ resampling

namespace detail {
struct Tap {
    int i0, i1;
    double frac;
};

/// Half-pixel-centre bilinear taps along one axis.
inline std::vector<Tap> bilinear_taps(int in, int out) {
    std::vector<Tap> taps(out);
    const double scale = static_cast<double>(in) / out;
    for (int i = 0; i < out; ++i) {
        double src = std::max(0.0, (i + 0.5) * scale - 0.5);
        int i0 = std::min(static_cast<int>(src), in - 1);
        int i1 = std::min(i0 + 1, in - 1);
        taps[i] = {i0, i1, src - i0};
    }
    return taps;
}
}  // namespace detail

/// Bilinear resize of [N,C,H,W] to [N,C,out_h,out_w].
template <class T>
Var<T> resize_bilinear(const Var<T>& x, int out_h, int out_w) {
    detail::require_rank(x.shape(), 4, "resize_bilinear");
    detail::require(out_h >= 1 && out_w >= 1, "resize_bilinear: bad output size");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    auto ty = detail::bilinear_taps(h, out_h);
    auto tx = detail::bilinear_taps(w, out_w);
    Tensor<T> out(Shape{n, c, out_h, out_w});
    for (int bc = 0; bc < n * c; ++bc) {
        const T* src = x.value().data() + static_cast<std::size_t>(bc) * h * w;
        T* dst = out.data() + static_cast<std::size_t>(bc) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const auto& a = ty[oy];
            for (int ox = 0; ox < out_w; ++ox) {
                const auto& b = tx[ox];
                const T fy = static_cast<T>(a.frac), fx = static_cast<T>(b.frac);
                dst[oy * out_w + ox] = (T(1) - fy) * ((T(1) - fx) * src[a.i0 * w + b.i0] + fx * src[a.i0 * w + b.i1]) +
                                       fy * ((T(1) - fx) * src[a.i1 * w + b.i0] + fx * src[a.i1 * w + b.i1]);
            }
        }
    }
    return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        for (int bc = 0; bc < n * c; ++bc) {
            T* dsrc = g->data() + static_cast<std::size_t>(bc) * h * w;
            const T* dy = self.grad.data() + static_cast<std::size_t>(bc) * out_h * out_w;
            for (int oy = 0; oy < out_h; ++oy) {
                const auto& a = ty[oy];
                for (int ox = 0; ox < out_w; ++ox) {
                    const auto& b = tx[ox];
                    const T fy = static_cast<T>(a.frac), fx = static_cast<T>(b.frac);
                    const T d = dy[oy * out_w + ox];
                    dsrc[a.i0 * w + b.i0] += d * (T(1) - fy) * (T(1) - fx);
                    dsrc[a.i0 * w + b.i1] += d * (T(1) - fy) * fx;
                    dsrc[a.i1 * w + b.i0] += d * fy * (T(1) - fx);
                    dsrc[a.i1 * w + b.i1] += d * fy * fx;
                }
            }
        }
    });
}

/// Non-overlapping factor x factor average pooling.
template <class T>
Var<T> avg_pool(const Var<T>& x, int factor) {
    detail::require_rank(x.shape(), 4, "avg_pool");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    detail::require(factor >= 1 && h % factor == 0 && w % factor == 0, "avg_pool: size not divisible by factor");
    const int oh = h / factor, ow = w / factor;
    const T inv = T(1) / static_cast<T>(factor * factor);
    Tensor<T> out(Shape{n, c, oh, ow});
    for (int bc = 0; bc < n * c; ++bc)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                out[(static_cast<std::size_t>(bc) * oh + y / factor) * ow + xx / factor] +=
                    x.value()[(static_cast<std::size_t>(bc) * h + y) * w + xx] * inv;
    return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
        if (auto* g = parent_grad(self, 0))
            for (int bc = 0; bc < n * c; ++bc)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx)
                        (*g)[(static_cast<std::size_t>(bc) * h + y) * w + xx] +=
                            self.grad[(static_cast<std::size_t>(bc) * oh + y / factor) * ow + xx / factor] * inv;
    });
}

/// [N,C,H,W] -> [N,C] by summing (or averaging) over space.
template <class T>
Var<T> global_pool(const Var<T>& x, bool average) {
    detail::require_rank(x.shape(), 4, "global_pool");
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const T s = average ? T(1) / static_cast<T>(hw) : T(1);
    Tensor<T> out(Shape{n, c});
    for (int bc = 0; bc < n * c; ++bc) {
        T acc = 0;
        for (int i = 0; i < hw; ++i) acc += x.value()[static_cast<std::size_t>(bc) * hw + i];
        out[bc] = acc * s;
    }
    return make_result<T>(std::move(out), {x}, [n, c, hw, s](Node<T>& self) {
        if (auto* g = parent_grad(self, 0))
            for (int bc = 0; bc < n * c; ++bc)
                for (int i = 0; i < hw; ++i) (*g)[static_cast<std::size_t>(bc) * hw + i] += self.grad[bc] * s;
    });
}

/// Mean over a k x k window with reflect padding (k odd, k/2 < H, W).
template <class T>
Var<T> box_mean(const Var<T>& x, int k) {
    detail::require_rank(x.shape(), 4, "box_mean");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    detail::require(k >= 1 && k % 2 == 1, "box_mean: window size must be odd");
    detail::require(k <= h && k <= w, "box_mean: window " + std::to_string(k) + " larger than feature map " +
                                          std::to_string(h) + "x" + std::to_string(w));
    const int r = k / 2;
    auto reflect = [](int i, int size) { return i < 0 ? -i : (i >= size ? 2 * size - 2 - i : i); };
    std::vector<int> iy(static_cast<std::size_t>(h) * k), ix(static_cast<std::size_t>(w) * k);
    for (int y = 0; y < h; ++y)
        for (int d = 0; d < k; ++d) iy[y * k + d] = reflect(y + d - r, h);
    for (int xx = 0; xx < w; ++xx)
        for (int d = 0; d < k; ++d) ix[xx * k + d] = reflect(xx + d - r, w);
    const T inv = T(1) / static_cast<T>(k * k);
    Tensor<T> out(x.shape());
    for (int bc = 0; bc < n * c; ++bc) {
        const T* src = x.value().data() + static_cast<std::size_t>(bc) * h * w;
        T* dst = out.data() + static_cast<std::size_t>(bc) * h * w;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                T acc = 0;
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) acc += src[iy[y * k + dy] * w + ix[xx * k + dx]];
                dst[y * w + xx] = acc * inv;
            }
    }
    return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        for (int bc = 0; bc < n * c; ++bc) {
            T* dsrc = g->data() + static_cast<std::size_t>(bc) * h * w;
            const T* dy_ = self.grad.data() + static_cast<std::size_t>(bc) * h * w;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const T d = dy_[y * w + xx] * inv;
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx) dsrc[iy[y * k + dy] * w + ix[xx * k + dx]] += d;
                }
        }
    });
}

// -------------------------------------------------------------- normalization

/// Per-channel normalisation over (N,H,W), no affine part. In training mode
/// batch statistics are used and, when `update_stats`, folded into the
/// running buffers.
template <class T>
Var<T> batch_norm(const Var<T>& x, Tensor<T>& running_mean, Tensor<T>& running_var, bool training, bool update_stats,
                  T momentum = T(0.1), T eps = T(1e-5)) {
    detail::require_rank(x.shape(), 4, "batch_norm");
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const std::size_t m = static_cast<std::size_t>(n) * hw;
    detail::require(running_mean.size() == static_cast<std::size_t>(c) && running_var.size() == static_cast<std::size_t>(c),
                    "batch_norm: stats/channel mismatch");
    std::vector<T> mu(c), inv_std(c);
    for (int ch = 0; ch < c; ++ch) {
        if (training) {
            T s = 0;
            for (int b = 0; b < n; ++b)
                for (int i = 0; i < hw; ++i) s += x.value()[(static_cast<std::size_t>(b) * c + ch) * hw + i];
            const T mean_c = s / static_cast<T>(m);
            T v = 0;
            for (int b = 0; b < n; ++b)
                for (int i = 0; i < hw; ++i) {
                    T d = x.value()[(static_cast<std::size_t>(b) * c + ch) * hw + i] - mean_c;
                    v += d * d;
                }
            const T var_c = v / static_cast<T>(m);
            mu[ch] = mean_c;
            inv_std[ch] = T(1) / std::sqrt(var_c + eps);
            if (update_stats) {
                const T unbiased = m > 1 ? v / static_cast<T>(m - 1) : var_c;
                running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mean_c;
                running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * unbiased;
            }
        } else {
            mu[ch] = running_mean[ch];
            inv_std[ch] = T(1) / std::sqrt(running_var[ch] + eps);
        }
    }
    Tensor<T> out(x.shape());
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < hw; ++i) {
                std::size_t k = (static_cast<std::size_t>(b) * c + ch) * hw + i;
                out[k] = (x.value()[k] - mu[ch]) * inv_std[ch];
            }
    auto y = std::make_shared<Tensor<T>>(out);
    return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        for (int ch = 0; ch < c; ++ch) {
            if (!training) {
                for (int b = 0; b < n; ++b)
                    for (int i = 0; i < hw; ++i) {
                        std::size_t k = (static_cast<std::size_t>(b) * c + ch) * hw + i;
                        (*g)[k] += self.grad[k] * inv_std[ch];
                    }
                continue;
            }
            T sd = 0, sdy = 0;
            for (int b = 0; b < n; ++b)
                for (int i = 0; i < hw; ++i) {
                    std::size_t k = (static_cast<std::size_t>(b) * c + ch) * hw + i;
                    sd += self.grad[k];
                    sdy += self.grad[k] * (*y)[k];
                }
            const T mm = static_cast<T>(m);
            for (int b = 0; b < n; ++b)
                for (int i = 0; i < hw; ++i) {
                    std::size_t k = (static_cast<std::size_t>(b) * c + ch) * hw + i;
                    (*g)[k] += inv_std[ch] / mm * (mm * self.grad[k] - sd - (*y)[k] * sdy);
                }
        }
    });
}

/// W / sigma(W), with sigma estimated from the persistent left singular
/// vector `u` (length O). When `update` is set, one power iteration refines
/// `u` first. With u held fixed, sigma = |W^T u| and the gradient is exact.
template <class T>
Var<T> spectral_normalize(const Var<T>& weight, Tensor<T>& u, bool update) {
    const int o = weight.dim(0);
    const int cols = static_cast<int>(weight.size() / static_cast<std::size_t>(o));
    detail::require(u.size() == static_cast<std::size_t>(o), "spectral_normalize: u has wrong length");
    ConstMatMap<T> wm(weight.value().data(), o, cols);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> uv(u.data(), o);
    constexpr T tiny = T(1e-12);
    if (update) {
        Eigen::Matrix<T, Eigen::Dynamic, 1> v = wm.transpose() * uv;
        v /= std::max(v.norm(), tiny);
        Eigen::Matrix<T, Eigen::Dynamic, 1> nu = wm * v;
        const T nn = nu.norm();
        if (nn > tiny) uv = nu / nn;
    }
    Eigen::Matrix<T, Eigen::Dynamic, 1> u_fixed = uv;
    Eigen::Matrix<T, Eigen::Dynamic, 1> v = wm.transpose() * u_fixed;
    const T sigma = std::max(v.norm(), tiny);
    v /= sigma;
    Tensor<T> out(weight.shape());
    MatMap<T>(out.data(), o, cols) = wm / sigma;
    auto wsn = std::make_shared<Tensor<T>>(out);
    return make_result<T>(std::move(out), {weight}, [=](Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        ConstMatMap<T> dy(self.grad.data(), o, cols);
        const T dot = (dy.array() * ConstMatMap<T>(wsn->data(), o, cols).array()).sum();
        MatMap<T>(g->data(), o, cols) += (dy - dot * u_fixed * v.transpose()) / sigma;
    });
}

}  // namespace palgan::ops
