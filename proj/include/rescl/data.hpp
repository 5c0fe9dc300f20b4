#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rescl/io_common.hpp"
#include "rescl/random.hpp"
#include "rescl/tensor.hpp"

namespace rescl {

/// Labeled image set. Images are float32 in [0,1], labels in [0, classes).
struct Dataset {
    Tensor<float> images;  // [N x C x H x W]
    std::vector<std::uint16_t> labels;
    std::size_t classes = 0;
    std::string split;

    std::size_t size() const { return labels.size(); }
};

enum class PatternFamily { Bars, Glyphs, Blobs, Halves };

inline const char* family_name(PatternFamily f) {
    switch (f) {
        case PatternFamily::Bars: return "bars";
        case PatternFamily::Glyphs: return "glyphs";
        case PatternFamily::Blobs: return "blobs";
        case PatternFamily::Halves: return "halves";
    }
    return "?";
}

inline PatternFamily family_from_name(const std::string& s) {
    if (s == "bars") return PatternFamily::Bars;
    if (s == "glyphs") return PatternFamily::Glyphs;
    if (s == "blobs") return PatternFamily::Blobs;
    if (s == "halves") return PatternFamily::Halves;
    throw std::invalid_argument("unknown pattern family: " + s);
}

/// Everything needed to regenerate a task bit-identically.
struct TaskSpec {
    PatternFamily family = PatternFamily::Bars;
    std::size_t classes = 4;
    std::size_t resolution = 8;  // square images, one channel
    std::size_t n_train = 2000, n_val = 400, n_test = 400;
    double noise = 0.15;
    std::uint64_t seed = 1;
};

struct TaskData {
    Dataset train, val, test;
};

namespace detail {

// All pattern geometry is integer-derived; pixel values use only +,-,*
// so rendering is reproducible across platforms.

inline void render_bars(float* img, std::size_t hw, std::size_t label, SplitMix64& rng) {
    const float bg = 0.1f, fg = 0.9f;
    for (std::size_t i = 0; i < hw * hw; ++i) img[i] = bg;
    std::size_t t = 1 + rng.below(2);  // thickness
    auto paint = [&](std::size_t y, std::size_t x) { img[y * hw + x] = fg; };
    if (label == 0) {  // horizontal
        std::size_t r0 = rng.below(hw - t + 1);
        for (std::size_t r = r0; r < r0 + t; ++r)
            for (std::size_t x = 0; x < hw; ++x) paint(r, x);
    } else if (label == 1) {  // vertical
        std::size_t c0 = rng.below(hw - t + 1);
        for (std::size_t c = c0; c < c0 + t; ++c)
            for (std::size_t y = 0; y < hw; ++y) paint(y, c);
    } else if (label == 2) {  // main diagonal, offset jitter
        std::ptrdiff_t jitter = static_cast<std::ptrdiff_t>(hw) / 2 - 1;
        std::ptrdiff_t d = static_cast<std::ptrdiff_t>(rng.below(2 * jitter + 1)) - jitter;
        for (std::size_t y = 0; y < hw; ++y)
            for (std::size_t x = 0; x < hw; ++x) {
                std::ptrdiff_t v = static_cast<std::ptrdiff_t>(x) -
                                   static_cast<std::ptrdiff_t>(y) - d;
                if (v >= 0 && v < static_cast<std::ptrdiff_t>(t)) paint(y, x);
            }
    } else {  // anti-diagonal
        std::ptrdiff_t jitter = static_cast<std::ptrdiff_t>(hw) / 2 - 1;
        std::ptrdiff_t d = static_cast<std::ptrdiff_t>(rng.below(2 * jitter + 1)) - jitter;
        for (std::size_t y = 0; y < hw; ++y)
            for (std::size_t x = 0; x < hw; ++x) {
                std::ptrdiff_t v = static_cast<std::ptrdiff_t>(x) +
                                   static_cast<std::ptrdiff_t>(y) -
                                   (static_cast<std::ptrdiff_t>(hw) - 1) - d;
                if (v >= 0 && v < static_cast<std::ptrdiff_t>(t)) paint(y, x);
            }
    }
}

// 5x5 stroke masks, placed with positional jitter
inline const std::uint8_t* glyph_mask(std::size_t label) {
    static const std::uint8_t masks[4][25] = {
        // L
        {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 1, 1, 0, 0},
        // T
        {1, 1, 1, 1, 1, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0},
        // X
        {1, 0, 0, 0, 1, 0, 1, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 0, 1, 0, 0, 0, 1},
        // O
        {1, 1, 1, 1, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1, 1, 1, 1, 1},
    };
    return masks[label % 4];
}

inline void render_glyphs(float* img, std::size_t hw, std::size_t label, SplitMix64& rng) {
    const float bg = 0.1f, fg = 0.9f;
    for (std::size_t i = 0; i < hw * hw; ++i) img[i] = bg;
    const std::uint8_t* mask = glyph_mask(label);
    std::size_t dy = rng.below(hw - 5 + 1), dx = rng.below(hw - 5 + 1);
    for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t x = 0; x < 5; ++x)
            if (mask[y * 5 + x]) img[(y + dy) * hw + (x + dx)] = fg;
}

// blob counting: the class is the number of solid 2x2 clumps on a lattice
// of 2x2 cells, and single-pixel dot cells pad every image to the same
// total brightness. Count is therefore only readable from clump shape,
// never from overall mass, and the useful features (compact spot
// detectors) conflict with the stroke orientations of the other families.
// That makes this the dissimilar task of the suite.
inline void render_blobs(float* img, std::size_t hw, std::size_t label, SplitMix64& rng) {
    const float bg = 0.1f, fg = 0.9f;
    for (std::size_t i = 0; i < hw * hw; ++i) img[i] = bg;
    std::size_t count = label + 1;  // 1..4 blob cells
    std::size_t grid = hw / 2;      // lattice of 2x2 cells
    std::vector<std::size_t> cells(grid * grid);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
    rng.shuffle(cells);
    std::size_t mass = 16;  // bright pixels per image, identical across classes
    std::size_t dots = mass - 4 * count;
    for (std::size_t i = 0; i < count + dots && i < cells.size(); ++i) {
        std::size_t cy = (cells[i] / grid) * 2, cx = (cells[i] % grid) * 2;
        if (i < count) {  // solid 2x2 clump
            for (std::size_t y = 0; y < 2; ++y)
                for (std::size_t x = 0; x < 2; ++x) img[(cy + y) * hw + (cx + x)] = fg;
        } else {  // one bright pixel in a random corner of the cell
            std::size_t corner = rng.below(4);
            img[(cy + corner / 2) * hw + (cx + corner % 2)] = fg;
        }
    }
}

// linearly separable by construction (used by probe tests)
inline void render_halves(float* img, std::size_t hw, std::size_t label, SplitMix64& rng) {
    const float bg = 0.1f, fg = 0.9f;
    std::size_t b = hw / 2 - 1 + rng.below(3);  // boundary jitter
    for (std::size_t y = 0; y < hw; ++y)
        for (std::size_t x = 0; x < hw; ++x) {
            bool on = false;
            if (label == 0)
                on = x < b;
            else if (label == 1)
                on = x >= b;
            else if (label == 2)
                on = y < b;
            else
                on = y >= b;
            img[y * hw + x] = on ? fg : bg;
        }
}

}  // namespace detail

/// Deterministic synthetic task: same spec (including seed) always yields
/// bit-identical train/val/test splits, generated as one stream and sliced,
/// so the splits are disjoint by construction.
inline TaskData gen_task(const TaskSpec& spec) {
    if (spec.classes < 2 || spec.classes > 4)
        throw std::invalid_argument("gen_task: classes must be in [2,4]");
    if (spec.resolution < 6) throw std::invalid_argument("gen_task: resolution too small");
    if (spec.n_train == 0 || spec.n_val == 0 || spec.n_test == 0)
        throw std::invalid_argument("gen_task: empty split");
    if (spec.noise < 0 || spec.noise > 0.5)
        throw std::invalid_argument("gen_task: noise must be in [0, 0.5]");
    const std::size_t hw = spec.resolution;
    const std::size_t total = spec.n_train + spec.n_val + spec.n_test;
    SplitMix64 rng(spec.seed);
    Tensor<float> images(Shape{total, 1, hw, hw});
    std::vector<std::uint16_t> labels(total);
    for (std::size_t i = 0; i < total; ++i) {
        std::size_t label = rng.below(spec.classes);
        labels[i] = static_cast<std::uint16_t>(label);
        float* img = images.data.data() + i * hw * hw;
        switch (spec.family) {
            case PatternFamily::Bars: detail::render_bars(img, hw, label, rng); break;
            case PatternFamily::Glyphs: detail::render_glyphs(img, hw, label, rng); break;
            case PatternFamily::Blobs: detail::render_blobs(img, hw, label, rng); break;
            case PatternFamily::Halves: detail::render_halves(img, hw, label, rng); break;
        }
        if (spec.noise > 0) {
            for (std::size_t p = 0; p < hw * hw; ++p) {
                float u = static_cast<float>((rng.uniform() * 2.0 - 1.0) * spec.noise);
                float v = img[p] + u;
                img[p] = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
            }
        }
    }
    auto slice = [&](std::size_t start, std::size_t len, const char* split) {
        Dataset d;
        d.images = Tensor<float>(Shape{len, 1, hw, hw});
        std::copy(images.data.begin() + start * hw * hw,
                  images.data.begin() + (start + len) * hw * hw, d.images.data.begin());
        d.labels.assign(labels.begin() + start, labels.begin() + start + len);
        d.classes = spec.classes;
        d.split = split;
        return d;
    };
    TaskData out;
    out.train = slice(0, spec.n_train, "train");
    out.val = slice(spec.n_train, spec.n_val, "val");
    out.test = slice(spec.n_train + spec.n_val, spec.n_test, "test");
    return out;
}

/// Per-sample random horizontal flip and random crop from a zero-padded
/// image. Output shape equals input shape. Draws nothing from the RNG for
/// disabled options, so disabling both is the exact identity.
inline Tensor<float> augment(const Tensor<float>& batch, bool flip, int pad_crop,
                             SplitMix64& rng) {
    if (pad_crop < 0) throw std::invalid_argument("augment: pad_crop must be >= 0");
    if (batch.rank() != 4) throw std::invalid_argument("augment: expected [N x C x H x W]");
    if (!flip && pad_crop == 0) return batch;
    const std::size_t n = batch.shape[0], c = batch.shape[1], h = batch.shape[2],
                      w = batch.shape[3];
    const std::size_t p = static_cast<std::size_t>(pad_crop);
    Tensor<float> out(batch.shape);
    for (std::size_t i = 0; i < n; ++i) {
        bool mirrored = flip && rng.below(2) == 1;
        std::size_t dy = 0, dx = 0;
        if (p > 0) {
            dy = rng.below(2 * p + 1);
            dx = rng.below(2 * p + 1);
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
            const float* src = batch.data.data() + (i * c + ch) * h * w;
            float* dst = out.data.data() + (i * c + ch) * h * w;
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) -
                                        static_cast<std::ptrdiff_t>(p);
                    std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + dx) -
                                        static_cast<std::ptrdiff_t>(p);
                    float v = 0.0f;
                    if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx >= 0 &&
                        sx < static_cast<std::ptrdiff_t>(w)) {
                        std::size_t col = mirrored ? w - 1 - static_cast<std::size_t>(sx)
                                                   : static_cast<std::size_t>(sx);
                        v = src[static_cast<std::size_t>(sy) * w + col];
                    }
                    dst[y * w + x] = v;
                }
        }
    }
    return out;
}

inline Tensor<float> flip_horizontal(const Tensor<float>& batch) {
    Tensor<float> out = batch;
    const std::size_t n = batch.shape[0], c = batch.shape[1], h = batch.shape[2],
                      w = batch.shape[3];
    for (std::size_t i = 0; i < n * c; ++i) {
        float* img = out.data.data() + i * h * w;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w / 2; ++x)
                std::swap(img[y * w + x], img[y * w + (w - 1 - x)]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset file format ("RCLD"): magic, version u32, N/C/H/W/K as u64,
// labels as u16, image data as little-endian float32.

constexpr std::uint32_t kDatasetVersion = 1;

inline void store_dataset(const std::string& path, const Dataset& d) {
    if (d.size() == 0) throw FileError("dataset: refusing to store empty dataset");
    auto os = io::open_out(path);
    io::put_magic(os, "RCLD");
    io::put_u32(os, kDatasetVersion);
    io::put_u64(os, d.images.shape[0]);
    io::put_u64(os, d.images.shape[1]);
    io::put_u64(os, d.images.shape[2]);
    io::put_u64(os, d.images.shape[3]);
    io::put_u64(os, d.classes);
    for (auto l : d.labels) {
        os.put(static_cast<char>(l & 0xff));
        os.put(static_cast<char>(l >> 8));
    }
    for (float v : d.images.data) io::put_f32(os, v);
    if (!os) throw FileError("dataset: write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    auto is = io::open_in(path);
    io::check_magic(is, "RCLD", "dataset");
    std::uint32_t version = io::get_u32(is, "dataset");
    if (version != kDatasetVersion)
        throw FileError("dataset: unsupported version " + std::to_string(version));
    std::uint64_t n = io::get_u64(is, "dataset");
    std::uint64_t c = io::get_u64(is, "dataset");
    std::uint64_t h = io::get_u64(is, "dataset");
    std::uint64_t w = io::get_u64(is, "dataset");
    std::uint64_t k = io::get_u64(is, "dataset");
    if (n == 0) throw FileError("dataset: empty dataset rejected");
    Dataset d;
    d.classes = k;
    d.labels.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        int lo = is.get(), hi = is.get();
        if (lo < 0 || hi < 0) throw FileError("dataset: truncated");
        d.labels[i] = static_cast<std::uint16_t>(lo | (hi << 8));
        if (d.labels[i] >= k) throw FileError("dataset: label out of range");
    }
    d.images = Tensor<float>(Shape{n, c, h, w});
    for (auto& v : d.images.data) v = io::get_f32(is, "dataset");
    return d;
}

}  // namespace rescl
