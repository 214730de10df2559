#pragma once

// Seeded synthetic degradation chain: blur -> resize -> noise -> block-DCT
// compression, optionally applied twice, then a final resize to HR / scale.
// Every random draw comes from a CounterRng keyed by (seed, sample index, stage),
// and every drawn parameter lands in a DegradationTrace that replays the chain.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "dit4sr/image.hpp"
#include "dit4sr/rng.hpp"

namespace dit4sr {

struct DegradationConfig {
    std::array<double, 2> blur_sigma_range{0.2, 1.2};
    std::array<double, 2> noise_sigma_range{0.0, 0.02};
    std::vector<ResizeMethod> resize_methods{ResizeMethod::bilinear, ResizeMethod::bicubic};
    // Relative extent of the in-chain resize, before the final resize to HR / scale.
    std::array<double, 2> resize_factor_range{0.5, 1.0};
    std::array<int, 2> compress_quality_range{60, 95};
    bool second_order = false;
    int scale_factor = 4;
    std::uint64_t seed = 0;

    void validate() const {
        auto range = [](const auto& r, const char* name) {
            if (!(r[0] <= r[1])) throw ConfigError(std::string("degradation.") + name + ": lo > hi");
        };
        range(blur_sigma_range, "blur_sigma_range");
        range(noise_sigma_range, "noise_sigma_range");
        range(resize_factor_range, "resize_factor_range");
        range(compress_quality_range, "compress_quality_range");
        if (blur_sigma_range[0] < 0) throw ConfigError("degradation.blur_sigma_range: negative sigma");
        if (noise_sigma_range[0] < 0 || noise_sigma_range[1] > 1)
            throw ConfigError("degradation.noise_sigma_range must lie in [0, 1]");
        if (resize_factor_range[0] <= 0) throw ConfigError("degradation.resize_factor_range must be positive");
        if (compress_quality_range[0] < 10 || compress_quality_range[1] > 100)
            throw ConfigError("degradation.compress_quality_range must lie in [10, 100]");
        if (resize_methods.empty()) throw ConfigError("degradation.resize_methods is empty");
        if (scale_factor < 1) throw ConfigError("degradation.scale_factor must be >= 1");
    }
};

// ------------------------------------------------------------------ stages

namespace detail {
inline long reflect101(long i, long n) {
    if (n == 1) return 0;
    const long period = 2 * n - 2;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}
}  // namespace detail

/// Normalized 1-D Gaussian taps of radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
    if (sigma < 0) throw ConfigError("gaussian_blur: negative sigma");
    if (sigma == 0) return {1.0};
    const long r = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double s = 0;
    for (long i = -r; i <= r; ++i) {
        const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + r)] = v;
        s += v;
    }
    for (double& v : k) v /= s;
    return k;
}

/// Separable isotropic Gaussian with reflect-101 borders; sigma 0 is the identity.
inline ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
    if (sigma < 0) throw ConfigError("gaussian_blur: negative sigma");
    if (sigma == 0) return img;
    const auto k = gaussian_kernel(sigma);
    const long r = static_cast<long>(k.size() / 2);
    const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
    const std::size_t c = img.channels;
    ImageBuffer tmp(img.height, img.width, c), out(img.height, img.width, c);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) {
                double s = 0;
                for (long t = -r; t <= r; ++t)
                    s += k[static_cast<std::size_t>(t + r)] *
                         img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(detail::reflect101(x + t, w)), ch);
                tmp.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), ch) = s;
            }
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
            for (std::size_t ch = 0; ch < c; ++ch) {
                double s = 0;
                for (long t = -r; t <= r; ++t)
                    s += k[static_cast<std::size_t>(t + r)] *
                         tmp.at(static_cast<std::size_t>(detail::reflect101(y + t, h)), static_cast<std::size_t>(x), ch);
                out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), ch) = s;
            }
    out.clamp01();
    return out;
}

/// i.i.d. zero-mean Gaussian per pixel and channel, then clamp.
inline ImageBuffer add_gaussian_noise(const ImageBuffer& img, double sigma, CounterRng& rng) {
    if (sigma < 0) throw ConfigError("add_gaussian_noise: negative sigma");
    if (sigma == 0) return img;
    ImageBuffer out = img;
    for (double& v : out.values) v = v + sigma * rng.normal();
    out.clamp01();
    return out;
}

/// Standard JPEG luminance quantization table (row-major 8x8).
inline constexpr std::array<int, 64> kLumaQuant = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24, 40,  57,
    69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55, 64,
    81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

/// IJG quality scaling of the luma table; entries clamped to [1, 255].
inline std::array<double, 64> quant_table(int quality) {
    if (quality < 1 || quality > 100) throw ConfigError("block_compress: quality outside [1, 100]");
    const int s = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    std::array<double, 64> q{};
    for (std::size_t i = 0; i < 64; ++i) q[i] = std::clamp((kLumaQuant[i] * s + 50) / 100, 1, 255);
    return q;
}

/// Orthonormal DCT-II basis, basis[u * 8 + x].
inline const std::array<double, 64>& dct8_basis() {
    static const std::array<double, 64> basis = [] {
        std::array<double, 64> b{};
        for (int u = 0; u < 8; ++u)
            for (int x = 0; x < 8; ++x)
                b[static_cast<std::size_t>(u * 8 + x)] =
                    (u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0)) *
                    std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
        return b;
    }();
    return basis;
}

/// JPEG-like surrogate: per channel 8x8 block DCT on 255-scaled level-shifted values,
/// quantize/dequantize with the scaled luma table, inverse DCT, clamp. Partial edge
/// blocks are reflect-padded. Quality 100 is treated as lossless and returns the input.
inline ImageBuffer block_compress(const ImageBuffer& img, int quality) {
    const auto q = quant_table(quality);
    if (quality == 100) return img;
    const auto& b = dct8_basis();
    ImageBuffer out = img;
    const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
    std::array<double, 64> blk{}, tmp{}, coef{};
    for (std::size_t ch = 0; ch < img.channels; ++ch)
        for (long by = 0; by < h; by += 8)
            for (long bx = 0; bx < w; bx += 8) {
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x)
                        blk[static_cast<std::size_t>(y * 8 + x)] =
                            255.0 * img.at(static_cast<std::size_t>(detail::reflect101(by + y, h)),
                                           static_cast<std::size_t>(detail::reflect101(bx + x, w)), ch) -
                            128.0;
                // coef = B . blk . B^T
                for (int u = 0; u < 8; ++u)
                    for (int x = 0; x < 8; ++x) {
                        double s = 0;
                        for (int y = 0; y < 8; ++y) s += b[static_cast<std::size_t>(u * 8 + y)] * blk[static_cast<std::size_t>(y * 8 + x)];
                        tmp[static_cast<std::size_t>(u * 8 + x)] = s;
                    }
                for (int u = 0; u < 8; ++u)
                    for (int v = 0; v < 8; ++v) {
                        double s = 0;
                        for (int x = 0; x < 8; ++x) s += tmp[static_cast<std::size_t>(u * 8 + x)] * b[static_cast<std::size_t>(v * 8 + x)];
                        const auto i = static_cast<std::size_t>(u * 8 + v);
                        coef[i] = std::round(s / q[i]) * q[i];
                    }
                // blk = B^T . coef . B
                for (int y = 0; y < 8; ++y)
                    for (int v = 0; v < 8; ++v) {
                        double s = 0;
                        for (int u = 0; u < 8; ++u) s += b[static_cast<std::size_t>(u * 8 + y)] * coef[static_cast<std::size_t>(u * 8 + v)];
                        tmp[static_cast<std::size_t>(y * 8 + v)] = s;
                    }
                for (int y = 0; y < 8 && by + y < h; ++y)
                    for (int x = 0; x < 8 && bx + x < w; ++x) {
                        double s = 0;
                        for (int v = 0; v < 8; ++v) s += tmp[static_cast<std::size_t>(y * 8 + v)] * b[static_cast<std::size_t>(v * 8 + x)];
                        out.at(static_cast<std::size_t>(by + y), static_cast<std::size_t>(bx + x), ch) = (s + 128.0) / 255.0;
                    }
            }
    out.clamp01();
    return out;
}

// ------------------------------------------------------------------- chain

struct DegradationStage {
    double blur_sigma = 0;
    ResizeMethod resize_method = ResizeMethod::nearest;
    std::size_t resize_h = 0, resize_w = 0;
    double noise_sigma = 0;
    int quality = 100;
};

/// Every parameter drawn for one sample; replaying it reproduces the LR image bitwise.
struct DegradationTrace {
    std::uint64_t seed = 0;
    std::uint64_t index = 0;
    std::vector<DegradationStage> stages;
    ResizeMethod final_method = ResizeMethod::nearest;
    std::size_t out_h = 0, out_w = 0;

    bool operator==(const DegradationTrace& o) const {
        if (seed != o.seed || index != o.index || final_method != o.final_method || out_h != o.out_h ||
            out_w != o.out_w || stages.size() != o.stages.size())
            return false;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const auto &a = stages[i], &b = o.stages[i];
            if (a.blur_sigma != b.blur_sigma || a.resize_method != b.resize_method || a.resize_h != b.resize_h ||
                a.resize_w != b.resize_w || a.noise_sigma != b.noise_sigma || a.quality != b.quality)
                return false;
        }
        return true;
    }

    /// key=value lines. Keys: seed, index, orders, stage<k>.{blur_sigma, resize_method,
    /// resize_h, resize_w, noise_sigma, quality}, final.{resize_method, h, w}. Reals use
    /// 17 significant digits so they parse back exactly.
    std::string to_text() const {
        std::ostringstream os;
        os.precision(17);
        os << "seed=" << seed << "\nindex=" << index << "\norders=" << stages.size() << '\n';
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const auto& s = stages[i];
            const std::string p = "stage" + std::to_string(i + 1) + ".";
            os << p << "blur_sigma=" << s.blur_sigma << '\n'
               << p << "resize_method=" << to_string(s.resize_method) << '\n'
               << p << "resize_h=" << s.resize_h << '\n'
               << p << "resize_w=" << s.resize_w << '\n'
               << p << "noise_sigma=" << s.noise_sigma << '\n'
               << p << "quality=" << s.quality << '\n';
        }
        os << "final.resize_method=" << to_string(final_method) << "\nfinal.h=" << out_h << "\nfinal.w=" << out_w
           << '\n';
        return os.str();
    }

    static DegradationTrace parse(const std::string& text) {
        DegradationTrace t;
        std::istringstream is(text);
        std::string line;
        auto stage_at = [&t](std::size_t k) -> DegradationStage& {
            if (k == 0) throw ConfigError("trace: stage numbering starts at 1");
            if (t.stages.size() < k) t.stages.resize(k);
            return t.stages[k - 1];
        };
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError("trace: malformed line '" + line + "'");
            const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
            try {
                if (key == "seed") t.seed = std::stoull(val);
                else if (key == "index") t.index = std::stoull(val);
                else if (key == "orders") t.stages.resize(std::stoul(val));
                else if (key == "final.resize_method") t.final_method = parse_resize_method(val);
                else if (key == "final.h") t.out_h = std::stoul(val);
                else if (key == "final.w") t.out_w = std::stoul(val);
                else if (key.rfind("stage", 0) == 0) {
                    const auto dot = key.find('.');
                    auto& s = stage_at(std::stoul(key.substr(5, dot - 5)));
                    const std::string f = key.substr(dot + 1);
                    if (f == "blur_sigma") s.blur_sigma = std::stod(val);
                    else if (f == "resize_method") s.resize_method = parse_resize_method(val);
                    else if (f == "resize_h") s.resize_h = std::stoul(val);
                    else if (f == "resize_w") s.resize_w = std::stoul(val);
                    else if (f == "noise_sigma") s.noise_sigma = std::stod(val);
                    else if (f == "quality") s.quality = std::stoi(val);
                    else throw ConfigError("trace: unknown key '" + key + "'");
                } else {
                    throw ConfigError("trace: unknown key '" + key + "'");
                }
            } catch (const std::logic_error& e) {
                if (dynamic_cast<const ConfigError*>(&e)) throw;
                throw ConfigError("trace: bad value for '" + key + "'");
            }
        }
        return t;
    }
};

namespace stage_id {
inline constexpr std::uint64_t params = hash_name("degrade.params");
inline constexpr std::uint64_t noise = hash_name("degrade.noise");
}  // namespace stage_id

/// Applies the exact chain a trace describes.
inline ImageBuffer replay(const ImageBuffer& hr, const DegradationTrace& trace) {
    ImageBuffer img = hr;
    for (std::size_t k = 0; k < trace.stages.size(); ++k) {
        const auto& s = trace.stages[k];
        img = gaussian_blur(img, s.blur_sigma);
        img = resize(img, s.resize_h, s.resize_w, s.resize_method);
        CounterRng noise_rng(trace.seed, trace.index, stage_id::noise + k);
        img = add_gaussian_noise(img, s.noise_sigma, noise_rng);
        img = block_compress(img, s.quality);
    }
    return resize(img, trace.out_h, trace.out_w, trace.final_method);
}

/// Draws the chain's parameters for (cfg.seed, sample_index) without applying them.
inline DegradationTrace draw_trace(std::size_t hr_h, std::size_t hr_w, const DegradationConfig& cfg,
                                   std::uint64_t sample_index) {
    cfg.validate();
    const auto sf = static_cast<std::size_t>(cfg.scale_factor);
    if (hr_h % sf != 0 || hr_w % sf != 0)
        throw ConfigError("degrade: HR extent " + std::to_string(hr_h) + "x" + std::to_string(hr_w) +
                          " not divisible by scale factor " + std::to_string(sf));
    DegradationTrace t;
    t.seed = cfg.seed;
    t.index = sample_index;
    std::size_t h = hr_h, w = hr_w;
    const std::size_t orders = cfg.second_order ? 2 : 1;
    for (std::size_t k = 0; k < orders; ++k) {
        CounterRng rng(cfg.seed, sample_index, stage_id::params + k);
        DegradationStage s;
        s.blur_sigma = rng.uniform(cfg.blur_sigma_range[0], cfg.blur_sigma_range[1]);
        s.resize_method = cfg.resize_methods[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(cfg.resize_methods.size()) - 1))];
        const double f = rng.uniform(cfg.resize_factor_range[0], cfg.resize_factor_range[1]);
        s.resize_h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(h) * f)));
        s.resize_w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(w) * f)));
        s.noise_sigma = rng.uniform(cfg.noise_sigma_range[0], cfg.noise_sigma_range[1]);
        s.quality = static_cast<int>(rng.uniform_int(cfg.compress_quality_range[0], cfg.compress_quality_range[1]));
        h = s.resize_h;
        w = s.resize_w;
        t.stages.push_back(s);
    }
    CounterRng rng(cfg.seed, sample_index, stage_id::params + orders);
    t.final_method = cfg.resize_methods[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(cfg.resize_methods.size()) - 1))];
    t.out_h = hr_h / sf;
    t.out_w = hr_w / sf;
    return t;
}

struct DegradationResult {
    ImageBuffer lr;
    DegradationTrace trace;
};

/// Pure function of (hr, cfg, sample_index).
inline DegradationResult degrade(const ImageBuffer& hr, const DegradationConfig& cfg, std::uint64_t sample_index) {
    DegradationTrace trace = draw_trace(hr.height, hr.width, cfg, sample_index);
    ImageBuffer lr = replay(hr, trace);
    return {std::move(lr), std::move(trace)};
}

}  // namespace dit4sr
