#pragma once

// RGB float images, resampling kernels and 8-bit Netpbm I/O.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "dit4sr/errors.hpp"

namespace dit4sr {

/// Interleaved [height][width][channels] image with values in [0, 1].
struct ImageBuffer {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<double> values;

    ImageBuffer() = default;
    ImageBuffer(std::size_t h, std::size_t w, std::size_t c = 3, double fill = 0.0)
        : height(h), width(w), channels(c), values(h * w * c, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return values[(y * width + x) * channels + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * channels + c]; }
    std::size_t size() const { return values.size(); }

    void clamp01() {
        for (double& v : values) v = std::clamp(v, 0.0, 1.0);
    }

    bool operator==(const ImageBuffer&) const = default;
};

/// Snaps every value to the nearest 8-bit level, as a write/read round trip would.
inline ImageBuffer quantize_u8(ImageBuffer img) {
    for (double& v : img.values) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
    return img;
}

// ------------------------------------------------------------------ resampling

enum class ResizeMethod { nearest, bilinear, bicubic };

inline std::string_view to_string(ResizeMethod m) {
    switch (m) {
        case ResizeMethod::nearest: return "nearest";
        case ResizeMethod::bilinear: return "bilinear";
        case ResizeMethod::bicubic: return "bicubic";
    }
    return "?";
}

inline ResizeMethod parse_resize_method(std::string_view s) {
    if (s == "nearest") return ResizeMethod::nearest;
    if (s == "bilinear") return ResizeMethod::bilinear;
    if (s == "bicubic") return ResizeMethod::bicubic;
    throw ConfigError("unknown resize method '" + std::string(s) + "'");
}

namespace detail {
inline double cubic_kernel(double x) {
    constexpr double a = -0.5;  // Keys
    x = std::abs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}
}  // namespace detail

/// Dense [out][in] 1-D resampling weights under the half-pixel-center convention:
/// output sample i sits at source coordinate (i + 0.5) * in / out - 0.5. Borders
/// replicate; every row sums to one.
inline std::vector<double> interpolation_matrix(std::size_t in, std::size_t out, ResizeMethod method) {
    if (in == 0 || out == 0) throw ConfigError("interpolation_matrix: zero extent");
    std::vector<double> m(out * in, 0.0);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    auto clampi = [in](long i) { return static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(in) - 1)); };
    for (std::size_t i = 0; i < out; ++i) {
        const double center = (static_cast<double>(i) + 0.5) * ratio;
        double* row = m.data() + i * in;
        switch (method) {
            case ResizeMethod::nearest: row[clampi(static_cast<long>(std::floor(center)))] = 1.0; break;
            case ResizeMethod::bilinear: {
                const double src = center - 0.5;
                const long i0 = static_cast<long>(std::floor(src));
                const double f = src - static_cast<double>(i0);
                row[clampi(i0)] += 1.0 - f;
                row[clampi(i0 + 1)] += f;
                break;
            }
            case ResizeMethod::bicubic: {
                const double src = center - 0.5;
                const long i0 = static_cast<long>(std::floor(src));
                const double f = src - static_cast<double>(i0);
                for (long k = -1; k <= 2; ++k) row[clampi(i0 + k)] += detail::cubic_kernel(static_cast<double>(k) - f);
                break;
            }
        }
    }
    return m;
}

inline ImageBuffer resize(const ImageBuffer& img, std::size_t out_h, std::size_t out_w, ResizeMethod method) {
    const auto wh = interpolation_matrix(img.height, out_h, method);
    const auto ww = interpolation_matrix(img.width, out_w, method);
    const std::size_t c = img.channels;
    // Rows first, then columns; zero weights are skipped so nearest stays exact.
    ImageBuffer tmp(out_h, img.width, c);
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t sy = 0; sy < img.height; ++sy) {
            const double wgt = wh[y * img.height + sy];
            if (wgt == 0.0) continue;
            for (std::size_t x = 0; x < img.width * c; ++x) tmp.values[y * img.width * c + x] += wgt * img.values[sy * img.width * c + x];
        }
    ImageBuffer out(out_h, out_w, c);
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x)
            for (std::size_t sx = 0; sx < img.width; ++sx) {
                const double wgt = ww[x * img.width + sx];
                if (wgt == 0.0) continue;
                for (std::size_t ch = 0; ch < c; ++ch) out.at(y, x, ch) += wgt * tmp.at(y, sx, ch);
            }
    out.clamp01();
    return out;
}

// ------------------------------------------------------------------------ I/O

namespace detail {
inline void skip_netpbm_ws(std::istream& in) {
    while (true) {
        const int ch = in.peek();
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (ch == ' ' || ch == '\n' || ch == '\r' || ch == '\t') {
            in.get();
        } else {
            return;
        }
    }
}
}  // namespace detail

/// Reads binary PPM (P6, 3 channels) or PGM (P5, 1 channel), maxval 255.
inline ImageBuffer read_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image '" + path + "'");
    std::string magic;
    in >> magic;
    if (magic != "P6" && magic != "P5") throw IoError("'" + path + "' is not a binary PPM/PGM file");
    std::size_t w = 0, h = 0, maxval = 0;
    detail::skip_netpbm_ws(in);
    in >> w;
    detail::skip_netpbm_ws(in);
    in >> h;
    detail::skip_netpbm_ws(in);
    in >> maxval;
    in.get();
    if (!in || maxval != 255 || w == 0 || h == 0) throw IoError("unsupported header in '" + path + "'");
    const std::size_t c = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> bytes(w * h * c);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw IoError("truncated pixel data in '" + path + "'");
    ImageBuffer img(h, w, c);
    for (std::size_t i = 0; i < bytes.size(); ++i) img.values[i] = bytes[i] / 255.0;
    return img;
}

/// Writes 8-bit PPM (3 channels) or PGM (1 channel); values are clamped and rounded.
inline void write_image(const std::string& path, const ImageBuffer& img) {
    if (img.channels != 3 && img.channels != 1) throw IoError("write_image: need 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write image '" + path + "'");
    out << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
    std::vector<unsigned char> bytes(img.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.values[i], 0.0, 1.0) * 255.0));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace dit4sr
