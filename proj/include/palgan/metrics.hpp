#pragma once

// PSNR, SSIM and palette diagnostics over a validation set.

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "palgan/data.hpp"
#include "palgan/palette.hpp"

namespace palgan {

/// 10 log10(1 / MSE) over all channels; +infinity for identical images.
inline double psnr(const RgbImage& pred, const RgbImage& gt) {
    if (pred.height != gt.height || pred.width != gt.width) throw ValidationError("psnr: image sizes differ");
    if (gt.pixels.empty()) throw ValidationError("psnr: empty image");
    double se = 0.0;
    for (std::size_t i = 0; i < gt.pixels.size(); ++i) {
        const double d = pred.pixels[i] - gt.pixels[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(gt.pixels.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

namespace detail {

/// Rec. 601 luma of an RGB image.
inline std::vector<double> luma(const RgbImage& img) {
    std::vector<double> y(static_cast<std::size_t>(img.height) * img.width);
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            y[static_cast<std::size_t>(r) * img.width + c] =
                0.299 * img.at(r, c, 0) + 0.587 * img.at(r, c, 1) + 0.114 * img.at(r, c, 2);
    return y;
}

/// Separable Gaussian filter over valid windows only.
inline std::vector<double> gaussian_valid(const std::vector<double>& src, int h, int w, const std::vector<double>& k) {
    const int n = static_cast<int>(k.size());
    const int oh = h - n + 1, ow = w - n + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow), out(static_cast<std::size_t>(oh) * ow);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < ow; ++c) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) acc += k[i] * src[static_cast<std::size_t>(r) * w + c + i];
            tmp[static_cast<std::size_t>(r) * ow + c] = acc;
        }
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) acc += k[i] * tmp[static_cast<std::size_t>(r + i) * ow + c];
            out[static_cast<std::size_t>(r) * ow + c] = acc;
        }
    return out;
}

}  // namespace detail

/// Mean structural similarity of the luma channels (data range 1).
inline double ssim(const RgbImage& pred, const RgbImage& gt, const SsimOptions& opt = {}) {
    if (pred.height != gt.height || pred.width != gt.width) throw ValidationError("ssim: image sizes differ");
    if (std::min(gt.height, gt.width) < opt.window)
        throw ValidationError("ssim: image " + std::to_string(gt.height) + "x" + std::to_string(gt.width) +
                              " is smaller than the " + std::to_string(opt.window) + "x" + std::to_string(opt.window) +
                              " window");
    std::vector<double> k(static_cast<std::size_t>(opt.window));
    double total = 0.0;
    for (int i = 0; i < opt.window; ++i) {
        const double d = i - (opt.window - 1) / 2.0;
        k[i] = std::exp(-d * d / (2 * opt.sigma * opt.sigma));
        total += k[i];
    }
    for (double& v : k) v /= total;

    const int h = gt.height, w = gt.width;
    const auto x = detail::luma(pred), y = detail::luma(gt);
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = detail::gaussian_valid(x, h, w, k), my = detail::gaussian_valid(y, h, w, k);
    const auto sxx = detail::gaussian_valid(xx, h, w, k), syy = detail::gaussian_valid(yy, h, w, k);
    const auto sxy = detail::gaussian_valid(xy, h, w, k);
    const double c1 = opt.k1 * opt.k1, c2 = opt.k2 * opt.k2;
    double acc = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
        acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return acc / static_cast<double>(mx.size());
}

struct EvalRow {
    std::string image;
    double psnr = 0;             // +inf when prediction equals ground truth
    double ssim = 0;
    double palette_l1 = 0;       // |h(pred) - h(gt)|_1
    double palette_entropy = 0;  // E(h(pred))
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double mean_psnr = 0;       // over rows with finite PSNR
    std::size_t infinite_psnr = 0;
    double mean_ssim = 0;
    double mean_palette_l1 = 0;
    double mean_palette_entropy = 0;

    std::size_t count() const noexcept { return rows.size(); }

    void summarize() {
        mean_psnr = mean_ssim = mean_palette_l1 = mean_palette_entropy = 0;
        infinite_psnr = 0;
        std::size_t finite = 0;
        for (const auto& r : rows) {
            if (std::isfinite(r.psnr)) {
                mean_psnr += r.psnr;
                ++finite;
            } else {
                ++infinite_psnr;
            }
            mean_ssim += r.ssim;
            mean_palette_l1 += r.palette_l1;
            mean_palette_entropy += r.palette_entropy;
        }
        mean_psnr = finite ? mean_psnr / static_cast<double>(finite) : std::numeric_limits<double>::infinity();
        if (!rows.empty()) {
            const double n = static_cast<double>(rows.size());
            mean_ssim /= n;
            mean_palette_l1 /= n;
            mean_palette_entropy /= n;
        }
    }

    std::string csv() const {
        std::ostringstream os;
        os.precision(10);
        os << "image,psnr,ssim,palette_l1,palette_entropy\n";
        for (const auto& r : rows) {
            os << r.image << ',';
            if (std::isfinite(r.psnr)) os << r.psnr;
            else os << "inf";
            os << ',' << r.ssim << ',' << r.palette_l1 << ',' << r.palette_entropy << '\n';
        }
        return os.str();
    }

    nlohmann::json summary() const {
        nlohmann::json j;
        j["count"] = rows.size();
        j["mean_psnr"] = std::isfinite(mean_psnr) ? nlohmann::json(mean_psnr) : nlohmann::json("inf");
        j["psnr_infinite_excluded"] = infinite_psnr;
        j["mean_ssim"] = mean_ssim;
        j["mean_palette_l1"] = mean_palette_l1;
        j["mean_palette_entropy"] = mean_palette_entropy;
        return j;
    }
};

/// Maps (gray input, item index) to a predicted chroma map of the same size.
using ChromaPredictor = std::function<ChromaMap(const GrayImage&, std::size_t)>;

/// Scores one prediction against its ground truth; RGB is composed from the
/// ground-truth L and each chroma map.
inline EvalRow score_prediction(const std::string& name, const GrayImage& gray, const ChromaMap& gt, const ChromaMap& pred,
                                const PaletteGrid& grid) {
    const RgbImage rgb_gt = lab_to_rgb(gray, gt);
    const RgbImage rgb_pred = lab_to_rgb(gray, pred);
    const auto h_pred = soft_histogram(pred, grid);
    return {name, psnr(rgb_pred, rgb_gt), ssim(rgb_pred, rgb_gt), histogram_l1(h_pred, soft_histogram(gt, grid)), entropy(h_pred)};
}

/// Centre-crops every indexed image to `crop`, predicts its chroma and scores it.
inline EvalReport evaluate(const DatasetIndex& index, int crop, const PaletteGrid& grid, const ChromaPredictor& predict) {
    EvalReport report;
    std::mt19937_64 unused(0);
    for (std::size_t i = 0; i < index.size(); ++i) {
        const auto lab = rgb_to_lab(crop_image(index.image(i), crop, Split::val, unused));
        const ChromaMap pred = predict(lab.gray, i);
        if (pred.height != lab.gray.height || pred.width != lab.gray.width)
            throw ValidationError("evaluate: prediction size does not match the input");
        const auto name = std::filesystem::relative(index.files[i], index.root).generic_string();
        report.rows.push_back(score_prediction(name, lab.gray, lab.chroma, pred, grid));
    }
    report.summarize();
    return report;
}

}  // namespace palgan
