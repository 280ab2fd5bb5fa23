#pragma once

// 8-bit PNG / JPEG decoding into [0,1] RGB and PNG encoding with
// round-half-up quantisation.

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "palgan/colorspace.hpp"

namespace palgan {

struct DecodedImage {
    RgbImage rgb;
    int source_channels = 3;  // 1 for grayscale files
};

namespace detail {

inline std::string lower_extension(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext;
}

inline DecodedImage decode_png(const std::string& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError("cannot decode PNG " + path + ": " + image.message);
    const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
    image.format = PNG_FORMAT_RGB;
    if (image.width == 0 || image.height == 0) {
        png_image_free(&image);
        throw IoError("PNG has zero pixels: " + path);
    }
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw IoError("cannot decode PNG " + path + ": " + msg);
    }
    DecodedImage out{RgbImage(static_cast<int>(image.height), static_cast<int>(image.width)), color ? 3 : 1};
    for (std::size_t i = 0; i < buffer.size(); ++i) out.rgb.pixels[i] = buffer[i] / 255.0;
    return out;
}

struct JpegErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

inline DecodedImage decode_jpeg(const std::string& path) {
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!file) throw IoError("cannot open " + path);
    jpeg_decompress_struct cinfo{};
    JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = [](j_common_ptr info) {
        auto* e = reinterpret_cast<JpegErrorManager*>(info->err);
        (*info->err->format_message)(info, e->message);
        std::longjmp(e->jump, 1);
    };
    std::vector<unsigned char> pixels;
    int width = 0, height = 0, channels = 3;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw IoError("cannot decode JPEG " + path + ": " + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, file.get());
    jpeg_read_header(&cinfo, TRUE);
    channels = cinfo.jpeg_color_space == JCS_GRAYSCALE ? 1 : 3;
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    width = static_cast<int>(cinfo.output_width);
    height = static_cast<int>(cinfo.output_height);
    pixels.resize(static_cast<std::size_t>(width) * height * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    if (width == 0 || height == 0) throw IoError("JPEG has zero pixels: " + path);
    DecodedImage out{RgbImage(height, width), channels};
    for (std::size_t i = 0; i < pixels.size(); ++i) out.rgb.pixels[i] = pixels[i] / 255.0;
    return out;
}

inline unsigned char quantize(double v) {
    const double q = std::floor(std::min(1.0, std::max(0.0, v)) * 255.0 + 0.5);
    return static_cast<unsigned char>(q);
}

}  // namespace detail

inline bool is_image_path(const std::filesystem::path& p) {
    const auto ext = detail::lower_extension(p);
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// Decodes a PNG or JPEG file (chosen by extension) to [0,1] RGB.
inline DecodedImage read_image(const std::string& path) {
    const auto ext = detail::lower_extension(path);
    if (ext == ".png") return detail::decode_png(path);
    if (ext == ".jpg" || ext == ".jpeg") return detail::decode_jpeg(path);
    throw IoError("unsupported image type: " + path);
}

/// Writes 8-bit RGB PNG; values are clamped and rounded half-up.
inline void write_png(const std::string& path, const RgbImage& img) {
    std::vector<png_byte> buffer(img.pixels.size());
    for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = detail::quantize(img.pixels[i]);
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr))
        throw IoError("cannot write PNG " + path + ": " + image.message);
}

/// Writes a single-channel 8-bit PNG from [0,1] values.
inline void write_gray_png(const std::string& path, const GrayImage& img) {
    std::vector<png_byte> buffer(img.pixels.size());
    for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = detail::quantize(img.pixels[i]);
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr))
        throw IoError("cannot write PNG " + path + ": " + image.message);
}

/// Separable triangle-filter resize; the filter widens with the scale factor
/// when downscaling so the result is antialiased.
inline RgbImage resize(const RgbImage& src, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw ValidationError("resize: bad output size");
    if (out_h == src.height && out_w == src.width) return src;
    struct Weights {
        int first;
        std::vector<double> w;
    };
    auto plan = [](int in, int out) {
        std::vector<Weights> table(out);
        const double scale = static_cast<double>(in) / out;
        const double support = std::max(1.0, scale);
        for (int i = 0; i < out; ++i) {
            const double centre = (i + 0.5) * scale;
            int lo = static_cast<int>(std::floor(centre - support));
            int hi = static_cast<int>(std::ceil(centre + support));
            lo = std::max(lo, 0);
            hi = std::min(hi, in);
            Weights wt{lo, {}};
            double total = 0.0;
            for (int j = lo; j < hi; ++j) {
                const double d = std::abs((j + 0.5 - centre) / support);
                const double v = std::max(0.0, 1.0 - d);
                wt.w.push_back(v);
                total += v;
            }
            if (total <= 0.0) {
                int nearest = std::min(in - 1, std::max(0, static_cast<int>(centre)));
                wt = {nearest, {1.0}};
                total = 1.0;
            }
            for (double& v : wt.w) v /= total;
            table[i] = std::move(wt);
        }
        return table;
    };
    const auto wx = plan(src.width, out_w);
    const auto wy = plan(src.height, out_h);
    RgbImage tmp(src.height, out_w);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < out_w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (std::size_t k = 0; k < wx[x].w.size(); ++k) acc += wx[x].w[k] * src.at(y, wx[x].first + static_cast<int>(k), c);
                tmp.at(y, x, c) = acc;
            }
    RgbImage out(out_h, out_w);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (std::size_t k = 0; k < wy[y].w.size(); ++k) acc += wy[y].w[k] * tmp.at(wy[y].first + static_cast<int>(k), x, c);
                out.at(y, x, c) = std::min(1.0, std::max(0.0, acc));
            }
    return out;
}

}  // namespace palgan
