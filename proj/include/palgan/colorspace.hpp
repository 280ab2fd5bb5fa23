#pragma once

// sRGB (D65) <-> CIE Lab, with the normalised L / ab layout every other module
// consumes: L in [0,1] is L*/100, ab in [-1,1] is (a*,b*)/128 clamped.

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "palgan/ops.hpp"

namespace palgan {

/// H x W x 3 sRGB values in [0,1], interleaved.
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    RgbImage() = default;
    RgbImage(int h, int w, double fill = 0.0) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}
    double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// H x W lightness, L*/100.
struct GrayImage {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    GrayImage() = default;
    GrayImage(int h, int w, double fill = 0.0) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}
    double& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

/// H x W x 2 chroma, (a*,b*)/128, interleaved.
struct ChromaMap {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;

    ChromaMap() = default;
    ChromaMap(int h, int w, double fill = 0.0) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 2, fill) {}
    double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 2 + c]; }
    double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 2 + c]; }
};

namespace color {

inline constexpr double kWhiteX = 0.95047;
inline constexpr double kWhiteY = 1.0;
inline constexpr double kWhiteZ = 1.08883;
inline constexpr double kDelta = 6.0 / 29.0;
inline constexpr double kLScale = 100.0;
inline constexpr double kAbScale = 128.0;

inline constexpr std::array<double, 9> kRgbToXyz = {0.4124564, 0.3575761, 0.1804375,  //
                                                    0.2126729, 0.7151522, 0.0721750,  //
                                                    0.0193339, 0.1191920, 0.9503041};
inline constexpr std::array<double, 9> kXyzToRgb = {3.2404542,  -1.5371385, -0.4985314,  //
                                                    -0.9692660, 1.8760108,  0.0415560,   //
                                                    0.0556434,  -0.2040259, 1.0572252};

template <class T>
T srgb_to_linear(T c) {
    return c <= T(0.04045) ? c / T(12.92) : std::pow((c + T(0.055)) / T(1.055), T(2.4));
}

template <class T>
T linear_to_srgb(T c) {
    return c <= T(0.0031308) ? T(12.92) * c : T(1.055) * std::pow(c, T(1) / T(2.4)) - T(0.055);
}

template <class T>
T linear_to_srgb_derivative(T c) {
    return c <= T(0.0031308) ? T(12.92) : T(1.055) / T(2.4) * std::pow(c, T(1) / T(2.4) - T(1));
}

template <class T>
T lab_f(T t) {
    constexpr T d = T(kDelta);
    return t > d * d * d ? std::cbrt(t) : t / (T(3) * d * d) + T(4) / T(29);
}

template <class T>
T lab_f_inv(T t) {
    constexpr T d = T(kDelta);
    return t > d ? t * t * t : T(3) * d * d * (t - T(4) / T(29));
}

template <class T>
T lab_f_inv_derivative(T t) {
    constexpr T d = T(kDelta);
    return t > d ? T(3) * t * t : T(3) * d * d;
}

/// sRGB in [0,1] -> (L*/100, a*/128, b*/128), ab clamped to [-1,1].
template <class T>
std::array<T, 3> rgb_to_lab_normalized(T r, T g, T b) {
    const T lr = srgb_to_linear(r), lg = srgb_to_linear(g), lb = srgb_to_linear(b);
    const auto& m = kRgbToXyz;
    const T x = T(m[0]) * lr + T(m[1]) * lg + T(m[2]) * lb;
    const T y = T(m[3]) * lr + T(m[4]) * lg + T(m[5]) * lb;
    const T z = T(m[6]) * lr + T(m[7]) * lg + T(m[8]) * lb;
    const T fx = lab_f(x / T(kWhiteX)), fy = lab_f(y / T(kWhiteY)), fz = lab_f(z / T(kWhiteZ));
    const T l_star = T(116) * fy - T(16);
    const T a_star = T(500) * (fx - fy);
    const T b_star = T(200) * (fy - fz);
    auto clamp1 = [](T v) { return std::min(T(1), std::max(T(-1), v)); };
    return {l_star / T(kLScale), clamp1(a_star / T(kAbScale)), clamp1(b_star / T(kAbScale))};
}

/// Intermediate values of the inverse pipeline, enough to differentiate it.
template <class T>
struct LabToRgbTrace {
    T fx, fy, fz;
    std::array<T, 3> linear;
    std::array<T, 3> rgb;  // clamped
};

template <class T>
LabToRgbTrace<T> lab_to_rgb_trace(T l, T a, T b) {
    LabToRgbTrace<T> t{};
    t.fy = (l * T(kLScale) + T(16)) / T(116);
    t.fx = t.fy + a * T(kAbScale) / T(500);
    t.fz = t.fy - b * T(kAbScale) / T(200);
    const T x = T(kWhiteX) * lab_f_inv(t.fx);
    const T y = T(kWhiteY) * lab_f_inv(t.fy);
    const T z = T(kWhiteZ) * lab_f_inv(t.fz);
    const auto& m = kXyzToRgb;
    for (int c = 0; c < 3; ++c) {
        t.linear[c] = T(m[3 * c]) * x + T(m[3 * c + 1]) * y + T(m[3 * c + 2]) * z;
        t.rgb[c] = std::min(T(1), std::max(T(0), linear_to_srgb(t.linear[c])));
    }
    return t;
}

/// Vector-Jacobian product of lab_to_rgb_trace at `t`: returns d/d(l,a,b).
template <class T>
std::array<T, 3> lab_to_rgb_vjp(const LabToRgbTrace<T>& t, const std::array<T, 3>& d_rgb) {
    std::array<T, 3> g{};
    for (int c = 0; c < 3; ++c) {
        const T s = linear_to_srgb(t.linear[c]);
        const bool inside = s > T(0) && s < T(1);
        g[c] = inside ? d_rgb[c] * linear_to_srgb_derivative(t.linear[c]) : T(0);
    }
    const auto& m = kXyzToRgb;
    T dx = 0, dy = 0, dz = 0;
    for (int c = 0; c < 3; ++c) {
        dx += T(m[3 * c]) * g[c];
        dy += T(m[3 * c + 1]) * g[c];
        dz += T(m[3 * c + 2]) * g[c];
    }
    const T dfx = dx * T(kWhiteX) * lab_f_inv_derivative(t.fx);
    const T dfz = dz * T(kWhiteZ) * lab_f_inv_derivative(t.fz);
    const T dfy = dy * T(kWhiteY) * lab_f_inv_derivative(t.fy) + dfx + dfz;
    return {dfy * T(kLScale) / T(116), dfx * T(kAbScale) / T(500), -dfz * T(kAbScale) / T(200)};
}

}  // namespace color

namespace detail {
inline void require_finite_unit(std::span<const double> v, double lo, double hi, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw ValidationError(std::string(what) + ": non-finite pixel value");
        if (x < lo || x > hi) throw ValidationError(std::string(what) + ": pixel value out of range");
    }
}
}  // namespace detail

inline void validate(const RgbImage& img) {
    if (img.height < 1 || img.width < 1) throw ValidationError("RgbImage: empty image");
    if (img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * 3)
        throw ValidationError("RgbImage: pixel buffer size mismatch");
    detail::require_finite_unit(img.pixels, 0.0, 1.0, "RgbImage");
}

inline void validate(const GrayImage& img) {
    if (img.height < 1 || img.width < 1) throw ValidationError("GrayImage: empty image");
    if (img.pixels.size() != static_cast<std::size_t>(img.height) * img.width)
        throw ValidationError("GrayImage: pixel buffer size mismatch");
    detail::require_finite_unit(img.pixels, 0.0, 1.0, "GrayImage");
}

inline void validate(const ChromaMap& img) {
    if (img.height < 1 || img.width < 1) throw ValidationError("ChromaMap: empty image");
    if (img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * 2)
        throw ValidationError("ChromaMap: pixel buffer size mismatch");
    detail::require_finite_unit(img.pixels, -1.0, 1.0, "ChromaMap");
}

struct LabImage {
    GrayImage gray;
    ChromaMap chroma;
};

inline LabImage rgb_to_lab(const RgbImage& img) {
    validate(img);
    LabImage out{GrayImage(img.height, img.width), ChromaMap(img.height, img.width)};
    const std::size_t n = static_cast<std::size_t>(img.height) * img.width;
    for (std::size_t i = 0; i < n; ++i) {
        auto lab = color::rgb_to_lab_normalized(img.pixels[3 * i], img.pixels[3 * i + 1], img.pixels[3 * i + 2]);
        out.gray.pixels[i] = std::min(1.0, std::max(0.0, lab[0]));
        out.chroma.pixels[2 * i] = lab[1];
        out.chroma.pixels[2 * i + 1] = lab[2];
    }
    return out;
}

inline RgbImage lab_to_rgb(const GrayImage& gray, const ChromaMap& chroma) {
    validate(gray);
    validate(chroma);
    if (gray.height != chroma.height || gray.width != chroma.width)
        throw ValidationError("lab_to_rgb: gray and chroma sizes differ");
    RgbImage out(gray.height, gray.width);
    const std::size_t n = static_cast<std::size_t>(gray.height) * gray.width;
    for (std::size_t i = 0; i < n; ++i) {
        auto t = color::lab_to_rgb_trace(gray.pixels[i], chroma.pixels[2 * i], chroma.pixels[2 * i + 1]);
        for (int c = 0; c < 3; ++c) out.pixels[3 * i + c] = t.rgb[c];
    }
    return out;
}

/// Luminance-only copy of an RGB image, as gray RGB (a = b = 0).
inline RgbImage strip_chroma(const RgbImage& img) {
    auto lab = rgb_to_lab(img);
    return lab_to_rgb(lab.gray, ChromaMap(img.height, img.width));
}

// ------------------------------------------------------------- tensor bridges

template <class T>
Tensor<T> to_tensor(std::span<const GrayImage> images) {
    if (images.empty()) throw ValidationError("to_tensor: empty batch");
    const int h = images[0].height, w = images[0].width;
    Tensor<T> out(Shape{static_cast<int>(images.size()), 1, h, w});
    for (std::size_t b = 0; b < images.size(); ++b) {
        if (images[b].height != h || images[b].width != w) throw ValidationError("to_tensor: mixed image sizes");
        for (std::size_t i = 0; i < images[b].pixels.size(); ++i)
            out[b * images[b].pixels.size() + i] = static_cast<T>(images[b].pixels[i]);
    }
    return out;
}

template <class T>
Tensor<T> to_tensor(std::span<const ChromaMap> images) {
    if (images.empty()) throw ValidationError("to_tensor: empty batch");
    const int h = images[0].height, w = images[0].width;
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    Tensor<T> out(Shape{static_cast<int>(images.size()), 2, h, w});
    for (std::size_t b = 0; b < images.size(); ++b) {
        if (images[b].height != h || images[b].width != w) throw ValidationError("to_tensor: mixed image sizes");
        for (std::size_t i = 0; i < hw; ++i)
            for (int c = 0; c < 2; ++c) out[(b * 2 + c) * hw + i] = static_cast<T>(images[b].pixels[2 * i + c]);
    }
    return out;
}

template <class T>
Tensor<T> to_tensor(std::span<const RgbImage> images) {
    if (images.empty()) throw ValidationError("to_tensor: empty batch");
    const int h = images[0].height, w = images[0].width;
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    Tensor<T> out(Shape{static_cast<int>(images.size()), 3, h, w});
    for (std::size_t b = 0; b < images.size(); ++b)
        for (std::size_t i = 0; i < hw; ++i)
            for (int c = 0; c < 3; ++c) out[(b * 3 + c) * hw + i] = static_cast<T>(images[b].pixels[3 * i + c]);
    return out;
}

/// Sample `b` of a [N,2,H,W] tensor, clamped to [-1,1].
template <class T>
ChromaMap chroma_from_tensor(const Tensor<T>& t, int b) {
    const int h = t.dim(2), w = t.dim(3);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    ChromaMap out(h, w);
    for (std::size_t i = 0; i < hw; ++i)
        for (int c = 0; c < 2; ++c)
            out.pixels[2 * i + c] = std::min(1.0, std::max(-1.0, static_cast<double>(t[(b * 2 + c) * hw + i])));
    return out;
}

namespace ops {

/// Differentiable Lab -> sRGB: gray [N,1,H,W], chroma [N,2,H,W] -> [N,3,H,W],
/// clamped to [0,1] (zero gradient where clamped).
template <class T>
Var<T> lab_to_rgb(const Var<T>& gray, const Var<T>& chroma) {
    detail::require_rank(gray.shape(), 4, "lab_to_rgb");
    const int n = gray.dim(0), h = gray.dim(2), w = gray.dim(3);
    detail::require(gray.dim(1) == 1 && chroma.shape() == Shape({n, 2, h, w}), "lab_to_rgb: expected [N,1,H,W] and [N,2,H,W]");
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    Tensor<T> out(Shape{n, 3, h, w});
    for (int b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
            auto t = color::lab_to_rgb_trace(gray.value()[b * hw + i], chroma.value()[(b * 2) * hw + i],
                                             chroma.value()[(b * 2 + 1) * hw + i]);
            for (int c = 0; c < 3; ++c) out[(b * 3 + c) * hw + i] = t.rgb[c];
        }
    return make_result<T>(std::move(out), {gray, chroma}, [n, hw](Node<T>& self) {
        const auto& lv = self.parents[0]->value;
        const auto& cv = self.parents[1]->value;
        auto* gl = parent_grad(self, 0);
        auto* gc = parent_grad(self, 1);
        for (int b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
                auto t = color::lab_to_rgb_trace(lv[b * hw + i], cv[(b * 2) * hw + i], cv[(b * 2 + 1) * hw + i]);
                std::array<T, 3> d{self.grad[(b * 3) * hw + i], self.grad[(b * 3 + 1) * hw + i],
                                   self.grad[(b * 3 + 2) * hw + i]};
                auto g = color::lab_to_rgb_vjp(t, d);
                if (gl) (*gl)[b * hw + i] += g[0];
                if (gc) {
                    (*gc)[(b * 2) * hw + i] += g[1];
                    (*gc)[(b * 2 + 1) * hw + i] += g[2];
                }
            }
    });
}

}  // namespace ops

}  // namespace palgan
