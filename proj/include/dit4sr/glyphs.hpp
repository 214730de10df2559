#pragma once

// Procedural HR images: short glyph strings from a 5x7 bitmap font over
// geometric shapes and stripe textures, rendered with 4x4 supersampling.
// Each image carries the tag ids that describe it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "dit4sr/image.hpp"
#include "dit4sr/rng.hpp"

namespace dit4sr {

enum Tag : std::size_t {
    kTagText = 0,
    kTagCircle,
    kTagRectangle,
    kTagTriangle,
    kTagStripes,
    kTagRing,
    kTagDarkBackground,
    kTagLightBackground,
    kTagWarm,
    kTagCool,
    kTagLargeText,
    kTagSmallText,
    kTagManyShapes,
    kTagFewShapes,
    kTagGray,
    kTagChecker,
    kTagCount
};

inline constexpr std::array<std::string_view, kTagCount> kTagNames = {
    "text",      "circle", "rectangle", "triangle",    "stripes",     "ring",        "dark_background", "light_background",
    "warm",      "cool",   "large_text", "small_text", "many_shapes", "few_shapes", "gray",            "checker"};

namespace detail {

struct GlyphBits {
    char ch;
    std::array<std::uint8_t, 7> rows;  // 5 bits per row, MSB = leftmost column
};

// clang-format off
inline constexpr std::array<GlyphBits, 36> kFont5x7 = {{
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'A', {0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
}};
// clang-format on

using Rgb = std::array<double, 3>;

struct Primitive {
    enum Kind { rect, circle, ring, triangle, stripes, checker, text } kind;
    Rgb color;
    Rgb color2{};  // second color for textures
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0, r = 0, r2 = 0, period = 1, angle = 0;
    std::array<double, 6> tri{};
    std::vector<std::size_t> glyphs;  // font indices
    double cell = 1;

    // Returns the color at (x, y) if the primitive covers it.
    bool sample(double x, double y, Rgb& out) const {
        switch (kind) {
            case rect:
                if (x >= x0 && x < x1 && y >= y0 && y < y1) return out = color, true;
                return false;
            case circle:
                if ((x - x0) * (x - x0) + (y - y0) * (y - y0) <= r * r) return out = color, true;
                return false;
            case ring: {
                const double d2 = (x - x0) * (x - x0) + (y - y0) * (y - y0);
                if (d2 <= r * r && d2 >= r2 * r2) return out = color, true;
                return false;
            }
            case triangle: {
                auto edge = [&](int a, int b) {
                    return (tri[2 * b] - tri[2 * a]) * (y - tri[2 * a + 1]) -
                           (tri[2 * b + 1] - tri[2 * a + 1]) * (x - tri[2 * a]);
                };
                const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
                if ((e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)) return out = color, true;
                return false;
            }
            case stripes: {
                if (!(x >= x0 && x < x1 && y >= y0 && y < y1)) return false;
                const double u = x * std::cos(angle) + y * std::sin(angle);
                out = std::fmod(std::floor(u / period), 2.0) == 0.0 ? color : color2;
                return true;
            }
            case checker: {
                if (!(x >= x0 && x < x1 && y >= y0 && y < y1)) return false;
                const long cx = static_cast<long>(std::floor((x - x0) / period));
                const long cy = static_cast<long>(std::floor((y - y0) / period));
                out = ((cx + cy) & 1) ? color2 : color;
                return true;
            }
            case text: {
                if (x < x0 || y < y0) return false;
                const long col = static_cast<long>(std::floor((x - x0) / cell));
                const long row = static_cast<long>(std::floor((y - y0) / cell));
                if (row >= 7) return false;
                const auto gi = static_cast<std::size_t>(col / 6);
                const long gc = col % 6;
                if (gi >= glyphs.size() || gc >= 5) return false;
                const std::uint8_t bits = kFont5x7[glyphs[gi]].rows[static_cast<std::size_t>(row)];
                if ((bits >> (4 - gc)) & 1u) return out = color, true;
                return false;
            }
        }
        return false;
    }
};

inline Rgb random_color(CounterRng& rng, int palette) {
    // palette: 0 any, 1 warm, 2 cool, 3 gray
    switch (palette) {
        case 1: return {rng.uniform(0.6, 1.0), rng.uniform(0.2, 0.7), rng.uniform(0.0, 0.3)};
        case 2: return {rng.uniform(0.0, 0.3), rng.uniform(0.3, 0.8), rng.uniform(0.6, 1.0)};
        case 3: {
            const double g = rng.uniform();
            return {g, g, g};
        }
        default: return {rng.uniform(), rng.uniform(), rng.uniform()};
    }
}

inline double luminance(const Rgb& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

}  // namespace detail

struct GlyphImage {
    ImageBuffer image;
    std::vector<std::size_t> tags;  // sorted, unique
};

/// Deterministic in (seed, index). Tags list text first so it survives truncation.
inline GlyphImage generate_glyph_image(std::size_t height, std::size_t width, std::uint64_t seed, std::uint64_t index) {
    using namespace detail;
    CounterRng rng(seed, index, hash_name("glyphs"));
    const int palette = static_cast<int>(rng.uniform_int(0, 3));
    const double H = static_cast<double>(height), W = static_cast<double>(width);
    std::vector<std::size_t> tags;
    Rgb bg = random_color(rng, palette);
    // Keep glyph contrast: push the background to one end of the luminance range.
    const bool dark = rng.uniform() < 0.5;
    for (double& v : bg) v = dark ? v * 0.35 : 0.65 + 0.35 * v;
    tags.push_back(dark ? kTagDarkBackground : kTagLightBackground);
    if (palette == 1) tags.push_back(kTagWarm);
    if (palette == 2) tags.push_back(kTagCool);
    if (palette == 3) tags.push_back(kTagGray);

    auto contrast_color = [&]() {
        Rgb c = random_color(rng, palette);
        for (double& v : c) v = dark ? 0.6 + 0.4 * v : 0.4 * v;
        return c;
    };

    std::vector<Primitive> prims;
    const auto n_shapes = static_cast<std::size_t>(rng.uniform_int(1, 4));
    tags.push_back(n_shapes >= 3 ? kTagManyShapes : kTagFewShapes);
    for (std::size_t s = 0; s < n_shapes; ++s) {
        Primitive p{};
        const auto kind = rng.uniform_int(0, 5);
        p.color = random_color(rng, palette);
        p.color2 = contrast_color();
        const double cx = rng.uniform(0, W), cy = rng.uniform(0, H);
        const double size = rng.uniform(0.12, 0.35) * std::min(H, W);
        switch (kind) {
            case 0:
                p.kind = Primitive::rect;
                p.x0 = cx - size;
                p.y0 = cy - size * rng.uniform(0.4, 1.0);
                p.x1 = cx + size;
                p.y1 = cy + size * rng.uniform(0.4, 1.0);
                tags.push_back(kTagRectangle);
                break;
            case 1:
                p.kind = Primitive::circle;
                p.x0 = cx;
                p.y0 = cy;
                p.r = size;
                tags.push_back(kTagCircle);
                break;
            case 2:
                p.kind = Primitive::ring;
                p.x0 = cx;
                p.y0 = cy;
                p.r = size;
                p.r2 = size * rng.uniform(0.5, 0.8);
                tags.push_back(kTagRing);
                break;
            case 3:
                p.kind = Primitive::triangle;
                for (int v = 0; v < 3; ++v) {
                    const double a = rng.uniform(0, 2 * 3.141592653589793);
                    p.tri[static_cast<std::size_t>(2 * v)] = cx + size * 1.3 * std::cos(a);
                    p.tri[static_cast<std::size_t>(2 * v + 1)] = cy + size * 1.3 * std::sin(a);
                }
                tags.push_back(kTagTriangle);
                break;
            case 4:
                p.kind = Primitive::stripes;
                p.x0 = cx - size;
                p.y0 = cy - size;
                p.x1 = cx + size;
                p.y1 = cy + size;
                p.period = rng.uniform(2.0, 5.0);
                p.angle = rng.uniform(0, 3.141592653589793);
                tags.push_back(kTagStripes);
                break;
            default:
                p.kind = Primitive::checker;
                p.x0 = cx - size;
                p.y0 = cy - size;
                p.x1 = cx + size;
                p.y1 = cy + size;
                p.period = rng.uniform(3.0, 6.0);
                tags.push_back(kTagChecker);
                break;
        }
        prims.push_back(std::move(p));
    }

    // Glyph string drawn last so it sits on top.
    Primitive t{};
    t.kind = Primitive::text;
    t.color = contrast_color();
    const double max_cell = std::max(1.0, std::floor(W / (6.0 * 2.0)));
    t.cell = std::clamp(std::floor(rng.uniform(0.045, 0.08) * std::min(H, W)), 1.0, max_cell);
    const auto max_chars = static_cast<std::int64_t>(std::max(1.0, std::floor((W - 2) / (6.0 * t.cell))));
    const auto n_chars = rng.uniform_int(std::min<std::int64_t>(2, max_chars), std::min<std::int64_t>(5, max_chars));
    for (std::int64_t i = 0; i < n_chars; ++i)
        t.glyphs.push_back(static_cast<std::size_t>(rng.uniform_int(0, kFont5x7.size() - 1)));
    const double text_w = static_cast<double>(n_chars) * 6.0 * t.cell, text_h = 7.0 * t.cell;
    t.x0 = std::floor(rng.uniform(0, std::max(0.0, W - text_w)));
    t.y0 = std::floor(rng.uniform(0, std::max(0.0, H - text_h)));
    prims.push_back(t);
    tags.push_back(kTagText);
    tags.push_back(t.cell >= 0.06 * std::min(H, W) ? kTagLargeText : kTagSmallText);

    ImageBuffer img(height, width, 3);
    constexpr int ss = 4;
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            Rgb acc{0, 0, 0};
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double px = static_cast<double>(x) + (sx + 0.5) / ss;
                    const double py = static_cast<double>(y) + (sy + 0.5) / ss;
                    Rgb c = bg, hit{};
                    for (const auto& p : prims)
                        if (p.sample(px, py, hit)) c = hit;
                    for (int ch = 0; ch < 3; ++ch) acc[static_cast<std::size_t>(ch)] += c[static_cast<std::size_t>(ch)];
                }
            for (std::size_t ch = 0; ch < 3; ++ch) img.at(y, x, ch) = acc[ch] / (ss * ss);
        }
    img.clamp01();

    std::sort(tags.begin(), tags.end());
    tags.erase(std::unique(tags.begin(), tags.end()), tags.end());
    return {std::move(img), std::move(tags)};
}

}  // namespace dit4sr
