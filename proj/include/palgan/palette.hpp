#pragma once

// Palette histograms over the normalised ab plane.
//
// The soft histogram places an inverse-quadratic kernel
//     k(c, centre) = prod_{i in {a,b}} 1 / (1 + ((c_i - centre_i) / sigma)^2)
// around every pixel, samples it at each bin centre, sums over pixels and
// normalises the grid to 1. It is differentiable in every chroma value.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "palgan/colorspace.hpp"

namespace palgan {

/// Uniform n_a x n_b grid of bin centres on [-1,1]^2, row-major in (a, b).
struct PaletteGrid {
    int n_a = 16;
    int n_b = 16;
    double sigma = 0.1;

    int bins() const noexcept { return n_a * n_b; }
    static double center(int i, int n) noexcept { return (2.0 * i + 1.0) / n - 1.0; }
    double center_a(int i) const noexcept { return center(i, n_a); }
    double center_b(int j) const noexcept { return center(j, n_b); }

    void validate() const {
        if (n_a < 1 || n_b < 1) throw ValidationError("PaletteGrid: bin counts must be positive");
        if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("PaletteGrid: sigma must be positive");
    }

    /// Square grid with `bins` total bins (must be a perfect square).
    static PaletteGrid square(int bins, double sigma = 0.1) {
        const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(bins))));
        if (bins < 1 || side * side != bins)
            throw ValidationError("bin count " + std::to_string(bins) + " is not a perfect square");
        return PaletteGrid{side, side, sigma};
    }

    bool operator==(const PaletteGrid&) const = default;
};

/// Non-negative weights over a PaletteGrid summing to 1.
struct PaletteHistogram {
    int n_a = 0;
    int n_b = 0;
    std::vector<double> weights;

    bool operator==(const PaletteHistogram&) const = default;

    double& at(int i, int j) { return weights[static_cast<std::size_t>(i) * n_b + j]; }
    double at(int i, int j) const { return weights[static_cast<std::size_t>(i) * n_b + j]; }
    int bins() const noexcept { return n_a * n_b; }

    void validate(double tolerance = 1e-6) const {
        if (n_a < 1 || n_b < 1 || weights.size() != static_cast<std::size_t>(n_a) * n_b)
            throw ValidationError("PaletteHistogram: weight count does not match grid");
        double s = 0.0;
        for (double w : weights) {
            if (!std::isfinite(w) || w < 0.0) throw ValidationError("PaletteHistogram: negative or non-finite weight");
            s += w;
        }
        if (std::abs(s - 1.0) > tolerance) throw ValidationError("PaletteHistogram: weights do not sum to 1");
    }

    static PaletteHistogram uniform(const PaletteGrid& grid) {
        return {grid.n_a, grid.n_b, std::vector<double>(grid.bins(), 1.0 / grid.bins())};
    }
    static PaletteHistogram one_hot(const PaletteGrid& grid, int index) {
        PaletteHistogram h{grid.n_a, grid.n_b, std::vector<double>(grid.bins(), 0.0)};
        h.weights.at(static_cast<std::size_t>(index)) = 1.0;
        return h;
    }
};

namespace ops {

/// Soft palette histogram of chroma [N,2,H,W] -> [N, n_a*n_b].
template <class T>
Var<T> soft_histogram(const Var<T>& chroma, const PaletteGrid& grid) {
    grid.validate();
    detail::require_rank(chroma.shape(), 4, "soft_histogram");
    detail::require(chroma.dim(1) == 2, "soft_histogram: chroma must have 2 channels");
    const int n = chroma.dim(0), hw = chroma.dim(2) * chroma.dim(3);
    detail::require(n > 0 && hw > 0, "soft_histogram: empty image");
    const int na = grid.n_a, nb = grid.n_b, bins = grid.bins();
    const T sigma = static_cast<T>(grid.sigma);
    std::vector<T> ca(na), cb(nb);
    for (int i = 0; i < na; ++i) ca[i] = static_cast<T>(grid.center_a(i));
    for (int j = 0; j < nb; ++j) cb[j] = static_cast<T>(grid.center_b(j));

    // per-pixel kernel rows, kept for the backward pass
    auto ka = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(n) * hw * na);
    auto kb = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(n) * hw * nb);
    std::vector<T> z(n);
    Tensor<T> out(Shape{n, bins});
    for (int b = 0; b < n; ++b) {
        const T* a_plane = chroma.value().data() + static_cast<std::size_t>(b) * 2 * hw;
        const T* b_plane = a_plane + hw;
        T* kab = ka->data() + static_cast<std::size_t>(b) * hw * na;
        T* kbb = kb->data() + static_cast<std::size_t>(b) * hw * nb;
        for (int p = 0; p < hw; ++p) {
            for (int i = 0; i < na; ++i) {
                const T u = (a_plane[p] - ca[i]) / sigma;
                kab[p * na + i] = T(1) / (T(1) + u * u);
            }
            for (int j = 0; j < nb; ++j) {
                const T u = (b_plane[p] - cb[j]) / sigma;
                kbb[p * nb + j] = T(1) / (T(1) + u * u);
            }
        }
        MatMap<T> raw(out.data() + static_cast<std::size_t>(b) * bins, na, nb);
        raw.noalias() = ConstMatMap<T>(kab, hw, na).transpose() * ConstMatMap<T>(kbb, hw, nb);
        z[b] = raw.sum();
        raw /= z[b];
    }
    auto h = std::make_shared<Tensor<T>>(out);
    return make_result<T>(std::move(out), {chroma}, [=](Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        RowMat<T> draw(na, nb);
        RowMat<T> dka(hw, na), dkb(hw, nb);
        for (int b = 0; b < n; ++b) {
            const T* dh = self.grad.data() + static_cast<std::size_t>(b) * bins;
            const T* hb = h->data() + static_cast<std::size_t>(b) * bins;
            T dot = 0;
            for (int k = 0; k < bins; ++k) dot += dh[k] * hb[k];
            for (int k = 0; k < bins; ++k) draw.data()[k] = (dh[k] - dot) / z[b];
            ConstMatMap<T> kab(ka->data() + static_cast<std::size_t>(b) * hw * na, hw, na);
            ConstMatMap<T> kbb(kb->data() + static_cast<std::size_t>(b) * hw * nb, hw, nb);
            dka.noalias() = kbb * draw.transpose();
            dkb.noalias() = kab * draw;
            const T* a_plane = self.parents[0]->value.data() + static_cast<std::size_t>(b) * 2 * hw;
            const T* b_plane = a_plane + hw;
            T* ga = g->data() + static_cast<std::size_t>(b) * 2 * hw;
            T* gb = ga + hw;
            for (int p = 0; p < hw; ++p) {
                T acc = 0;
                for (int i = 0; i < na; ++i) {
                    const T u = (a_plane[p] - ca[i]) / sigma;
                    const T kv = kab(p, i);
                    acc += dka(p, i) * (T(-2) * u / sigma) * kv * kv;
                }
                ga[p] += acc;
                acc = 0;
                for (int j = 0; j < nb; ++j) {
                    const T u = (b_plane[p] - cb[j]) / sigma;
                    const T kv = kbb(p, j);
                    acc += dkb(p, j) * (T(-2) * u / sigma) * kv * kv;
                }
                gb[p] += acc;
            }
        }
    });
}

}  // namespace ops

namespace detail {
inline void require_same_grid(const PaletteHistogram& a, const PaletteHistogram& b) {
    if (a.n_a != b.n_a || a.n_b != b.n_b || a.weights.size() != b.weights.size())
        throw ValidationError("palette grids differ: " + std::to_string(a.n_a) + "x" + std::to_string(a.n_b) + " vs " +
                              std::to_string(b.n_a) + "x" + std::to_string(b.n_b));
}

template <class T>
PaletteHistogram histogram_from_row(const Tensor<T>& t, int row, const PaletteGrid& grid) {
    PaletteHistogram h{grid.n_a, grid.n_b, std::vector<double>(grid.bins())};
    for (int k = 0; k < grid.bins(); ++k) h.weights[k] = static_cast<double>(t[static_cast<std::size_t>(row) * grid.bins() + k]);
    return h;
}
}  // namespace detail

inline PaletteHistogram soft_histogram(const ChromaMap& chroma, const PaletteGrid& grid) {
    if (chroma.height < 1 || chroma.width < 1) throw ValidationError("soft_histogram: empty image");
    validate(chroma);
    NoGradGuard guard;
    ChromaMap one[] = {chroma};
    Var<double> c(to_tensor<double>(std::span<const ChromaMap>(one)));
    return detail::histogram_from_row(ops::soft_histogram(c, grid).value(), 0, grid);
}

/// Nearest-bin-centre counting, normalised to sum 1.
inline PaletteHistogram hard_histogram(const ChromaMap& chroma, const PaletteGrid& grid) {
    grid.validate();
    if (chroma.height < 1 || chroma.width < 1) throw ValidationError("hard_histogram: empty image");
    validate(chroma);
    auto bin_of = [](double v, int n) {
        int i = static_cast<int>(std::floor((v + 1.0) * 0.5 * n));
        return std::min(n - 1, std::max(0, i));
    };
    PaletteHistogram h{grid.n_a, grid.n_b, std::vector<double>(grid.bins(), 0.0)};
    const std::size_t count = static_cast<std::size_t>(chroma.height) * chroma.width;
    for (std::size_t p = 0; p < count; ++p)
        h.at(bin_of(chroma.pixels[2 * p], grid.n_a), bin_of(chroma.pixels[2 * p + 1], grid.n_b)) += 1.0;
    for (double& w : h.weights) w /= static_cast<double>(count);
    return h;
}

/// -sum h log h (natural log); empty bins contribute 0.
inline double entropy(const PaletteHistogram& h) {
    double e = 0.0;
    for (double w : h.weights)
        if (w > 0.0) e -= w * std::log(std::max(w, 1e-12));
    return e;
}

inline double histogram_l1(const PaletteHistogram& a, const PaletteHistogram& b) {
    detail::require_same_grid(a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.weights.size(); ++i) s += std::abs(a.weights[i] - b.weights[i]);
    return s;
}

/// Stacks histograms into a [N, bins] tensor.
template <class T>
Tensor<T> to_tensor(std::span<const PaletteHistogram> hs) {
    if (hs.empty()) throw ValidationError("to_tensor: empty palette batch");
    const int bins = hs[0].bins();
    Tensor<T> out(Shape{static_cast<int>(hs.size()), bins});
    for (std::size_t r = 0; r < hs.size(); ++r) {
        detail::require_same_grid(hs[0], hs[r]);
        for (int k = 0; k < bins; ++k) out[r * bins + k] = static_cast<T>(hs[r].weights[k]);
    }
    return out;
}

// ------------------------------------------------------------------ file format

/// {"n_a", "n_b", "sigma", "weights": row-major flat array}.
inline std::string palette_to_json(const PaletteHistogram& h, double sigma) {
    nlohmann::json j;
    j["n_a"] = h.n_a;
    j["n_b"] = h.n_b;
    j["sigma"] = sigma;
    j["weights"] = h.weights;
    return j.dump(2);
}

struct PaletteFile {
    PaletteGrid grid;
    PaletteHistogram histogram;
};

/// Parses a palette JSON document; weights must sum to 1 within 1e-4 and are
/// renormalised exactly.
inline PaletteFile palette_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("palette JSON: ") + e.what());
    }
    try {
        PaletteFile f;
        f.grid.n_a = j.at("n_a").get<int>();
        f.grid.n_b = j.at("n_b").get<int>();
        f.grid.sigma = j.at("sigma").get<double>();
        f.grid.validate();
        f.histogram = {f.grid.n_a, f.grid.n_b, j.at("weights").get<std::vector<double>>()};
        if (f.histogram.weights.size() != static_cast<std::size_t>(f.grid.bins()))
            throw FormatError("palette JSON: expected " + std::to_string(f.grid.bins()) + " weights, got " +
                              std::to_string(f.histogram.weights.size()));
        f.histogram.validate(1e-4);
        double s = 0.0;
        for (double w : f.histogram.weights) s += w;
        for (double& w : f.histogram.weights) w /= s;
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("palette JSON: ") + e.what());
    } catch (const ValidationError& e) {
        throw FormatError(std::string("palette JSON: ") + e.what());
    }
}

inline void write_palette_file(const std::string& path, const PaletteHistogram& h, double sigma) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write palette file " + path);
    os << palette_to_json(h, sigma) << '\n';
}

inline PaletteFile read_palette_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read palette file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return palette_from_json(ss.str());
}

}  // namespace palgan
