#pragma once

// Image-folder datasets: indexing, crop sampling and deterministic batching.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "palgan/image_io.hpp"

namespace palgan {

enum class Split { train, val };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "val"; }

enum class CachePolicy { none, memory };

/// splitmix64 finaliser; combines seeds into well-spread stream ids.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    auto step = [](std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    };
    return step(step(step(a) ^ b) ^ c);
}

/// Uniform integer in [0, bound) without modulo bias dependence on the stdlib.
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(rng()) * bound) >> 64);
}

/// Uniform real in [0,1) from the top 53 bits.
inline double uniform_unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

class DatasetIndex {
public:
    std::filesystem::path root;
    std::vector<std::filesystem::path> files;  // sorted
    Split split = Split::train;
    CachePolicy cache = CachePolicy::memory;
    std::vector<std::string> warnings;

    std::size_t size() const noexcept { return files.size(); }

    /// Decoded image `i`, from the cache when enabled.
    const RgbImage& image(std::size_t i) const {
        if (i >= files.size()) throw ValidationError("dataset index out of range");
        auto it = cached_.find(i);
        if (it != cached_.end()) return it->second;
        ++reads_;
        RgbImage img = read_image(files[i].string()).rgb;
        if (cache == CachePolicy::none) {
            scratch_ = std::move(img);
            return scratch_;
        }
        return cached_.emplace(i, std::move(img)).first->second;
    }

    /// Number of file decodes performed since construction.
    std::size_t reads() const noexcept { return reads_; }

private:
    mutable std::map<std::size_t, RgbImage> cached_;
    mutable RgbImage scratch_;
    mutable std::size_t reads_ = 0;
};

/// Lists PNG/JPEG files under `root` (or `root/<split>` when that directory
/// exists), recursively and sorted. A manifest file, when given, lists one
/// path per line (relative to root) and replaces the directory walk.
/// Unreadable or empty images are skipped with a warning.
inline DatasetIndex build_index(const std::filesystem::path& root, Split split,
                                const std::optional<std::filesystem::path>& manifest = std::nullopt,
                                CachePolicy cache = CachePolicy::memory) {
    namespace fs = std::filesystem;
    if (!fs::exists(root) || !fs::is_directory(root)) throw IoError("dataset root is not a readable directory: " + root.string());
    DatasetIndex index;
    index.split = split;
    index.cache = cache;
    index.root = fs::is_directory(root / split_name(split)) ? root / split_name(split) : root;

    std::vector<fs::path> candidates;
    if (manifest) {
        std::ifstream is(*manifest);
        if (!is) throw IoError("cannot read manifest " + manifest->string());
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty() || line[0] == '#') continue;
            fs::path p(line);
            candidates.push_back(p.is_absolute() ? p : root / p);
        }
    } else {
        for (const auto& entry : fs::recursive_directory_iterator(index.root))
            if (entry.is_regular_file() && is_image_path(entry.path())) candidates.push_back(entry.path());
    }
    std::sort(candidates.begin(), candidates.end());

    for (const auto& p : candidates) {
        try {
            auto decoded = read_image(p.string());
            if (decoded.rgb.height < 1 || decoded.rgb.width < 1) throw IoError("zero-pixel image");
            index.files.push_back(p);
        } catch (const std::exception& e) {
            index.warnings.push_back("skipping " + p.string() + ": " + e.what());
        }
    }
    if (index.files.empty()) throw IoError("no readable images under " + index.root.string());
    return index;
}

struct TrainingPair {
    GrayImage gray;
    ChromaMap chroma;
};

/// Resizes so the shorter side equals `crop` (aspect ratio kept), then takes a
/// crop x crop window: random in train mode, centred in val mode.
inline RgbImage crop_image(const RgbImage& src, int crop, Split split, std::mt19937_64& rng) {
    if (crop < 1) throw ValidationError("crop size must be positive");
    int h = src.height, w = src.width;
    if (h <= w) {
        w = std::max(crop, static_cast<int>(std::lround(static_cast<double>(w) * crop / h)));
        h = crop;
    } else {
        h = std::max(crop, static_cast<int>(std::lround(static_cast<double>(h) * crop / w)));
        w = crop;
    }
    RgbImage resized = resize(src, h, w);
    int oy = (h - crop) / 2, ox = (w - crop) / 2;
    if (split == Split::train) {
        oy = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(h - crop + 1)));
        ox = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(w - crop + 1)));
    }
    RgbImage out(crop, crop);
    for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = resized.at(y + oy, x + ox, c);
    return out;
}

inline TrainingPair sample_pair(const DatasetIndex& index, std::size_t i, int crop, std::mt19937_64& rng) {
    auto lab = rgb_to_lab(crop_image(index.image(i), crop, index.split, rng));
    return {std::move(lab.gray), std::move(lab.chroma)};
}

/// Item order for one epoch. Train: seeded Fisher-Yates shuffle of every item,
/// last partial batch dropped. Val: sorted order, all items kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t items, int batch_size, Split split, std::uint64_t seed,
                                                     std::uint64_t epoch) {
    if (batch_size < 1) throw ValidationError("batch size must be positive");
    std::vector<std::size_t> order(items);
    for (std::size_t i = 0; i < items; ++i) order[i] = i;
    if (split == Split::train) {
        std::mt19937_64 rng(mix_seed(seed, epoch, 0x5eed));
        for (std::size_t i = items; i > 1; --i) std::swap(order[i - 1], order[uniform_below(rng, i)]);
    }
    std::vector<std::vector<std::size_t>> out;
    const std::size_t b = static_cast<std::size_t>(batch_size);
    for (std::size_t start = 0; start < items; start += b) {
        const std::size_t end = std::min(items, start + b);
        if (end - start < b && split == Split::train) break;
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

struct Batch {
    std::vector<GrayImage> gray;
    std::vector<ChromaMap> chroma;
    std::vector<std::size_t> items;
};

/// Materialises a batch; each item's crop offset comes from its own stream
/// keyed on (seed, epoch, item), so batch contents depend only on those.
inline Batch load_batch(const DatasetIndex& index, const std::vector<std::size_t>& items, int crop, std::uint64_t seed,
                        std::uint64_t epoch) {
    Batch b;
    b.items = items;
    for (std::size_t i : items) {
        std::mt19937_64 rng(mix_seed(seed, epoch, i + 1));
        auto pair = sample_pair(index, i, crop, rng);
        b.gray.push_back(std::move(pair.gray));
        b.chroma.push_back(std::move(pair.chroma));
    }
    return b;
}

}  // namespace palgan
