#pragma once

// Attention-map statistics, full-reference fidelity metrics and gradient-based
// information-flow probes.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "dit4sr/diffusion.hpp"

namespace dit4sr {

struct RegionMatrix {
    std::string name;  // "X->L" reads: rows are X queries, columns are L keys
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

/// Splits an [S, S] map into segment-by-segment blocks, row-major over (query, key) segments.
template <class T>
std::vector<RegionMatrix> extract_regions(const Tensor<T>& map, const std::vector<std::string>& names,
                                          const std::vector<std::size_t>& segments) {
    std::size_t s = 0;
    for (auto n : segments) s += n;
    if (names.size() != segments.size()) throw ConfigError("extract_regions: names do not match segments");
    if (map.rank() != 2 || map.dim(0) != s || map.dim(1) != s)
        throw ConfigError("extract_regions: map " + shape_str(map.shape()) + " does not tile segments summing to " +
                          std::to_string(s));
    std::vector<RegionMatrix> out;
    std::size_t r0 = 0;
    for (std::size_t a = 0; a < segments.size(); ++a) {
        std::size_t c0 = 0;
        for (std::size_t b = 0; b < segments.size(); ++b) {
            RegionMatrix m{names[a] + "->" + names[b], segments[a], segments[b], {}};
            m.values.reserve(m.rows * m.cols);
            for (std::size_t i = 0; i < m.rows; ++i)
                for (std::size_t j = 0; j < m.cols; ++j)
                    m.values.push_back(static_cast<double>(map[(r0 + i) * s + c0 + j]));
            out.push_back(std::move(m));
            c0 += segments[b];
        }
        r0 += segments[a];
    }
    return out;
}

/// The nine regions of a three-stream map with (X, L, C) extents (K, K, M).
template <class T>
std::vector<RegionMatrix> extract_regions(const Tensor<T>& map, std::size_t k, std::size_t m) {
    return extract_regions(map, {"X", "L", "C"}, {k, k, m});
}

template <class T>
std::vector<RegionMatrix> extract_regions(const AttentionRecord<T>& rec, std::size_t head) {
    return extract_regions(rec.maps.at(head), rec.segment_names, rec.segments);
}

inline const RegionMatrix& find_region(const std::vector<RegionMatrix>& regions, const std::string& name) {
    for (const auto& r : regions)
        if (r.name == name) return r;
    throw ConfigError("no attention region named " + name);
}

/// Inverse of extract_regions: the full [S, S] map.
inline std::vector<double> reassemble(const std::vector<RegionMatrix>& regions, const std::vector<std::size_t>& segments) {
    std::size_t s = 0;
    for (auto n : segments) s += n;
    if (regions.size() != segments.size() * segments.size()) throw ConfigError("reassemble: region count mismatch");
    std::vector<double> map(s * s);
    std::size_t idx = 0, r0 = 0;
    for (std::size_t a = 0; a < segments.size(); ++a) {
        std::size_t c0 = 0;
        for (std::size_t b = 0; b < segments.size(); ++b, ++idx) {
            const auto& reg = regions[idx];
            for (std::size_t i = 0; i < reg.rows; ++i)
                for (std::size_t j = 0; j < reg.cols; ++j) map[(r0 + i) * s + c0 + j] = reg.at(i, j);
            c0 += segments[b];
        }
        r0 += segments[a];
    }
    return map;
}

/// Mean of the diagonal entries of a square region.
inline double diagonal_mass(const RegionMatrix& r) {
    if (r.rows != r.cols || r.rows == 0) throw ConfigError("diagonal_mass: region " + r.name + " is not square");
    double s = 0.0;
    for (std::size_t i = 0; i < r.rows; ++i) s += r.at(i, i);
    return s / static_cast<double>(r.rows);
}

/// Mean of the K^2 - K entries off the diagonal.
inline double off_diagonal_mean(const RegionMatrix& r) {
    if (r.rows != r.cols || r.rows < 2) throw ConfigError("off_diagonal_mean: region " + r.name + " is not square");
    double s = 0.0;
    for (std::size_t i = 0; i < r.rows; ++i)
        for (std::size_t j = 0; j < r.cols; ++j)
            if (i != j) s += r.at(i, j);
    return s / static_cast<double>(r.rows * r.rows - r.rows);
}

/// Mean over rows of the entropy of each row's share of the region (natural log).
inline double row_entropy_mean(const RegionMatrix& r) {
    double total = 0.0;
    for (std::size_t i = 0; i < r.rows; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < r.cols; ++j) z += r.at(i, j);
        double h = 0.0;
        if (z > 0)
            for (std::size_t j = 0; j < r.cols; ++j) {
                const double p = r.at(i, j) / z;
                if (p > 0) h -= p * std::log(p);
            }
        total += h;
    }
    return r.rows ? total / static_cast<double>(r.rows) : 0.0;
}

struct RegionStats {
    std::size_t block = 0;
    std::size_t head = 0;
    std::string region;
    double mass = 0.0;               // mean entry of the region
    double diagonal = std::numeric_limits<double>::quiet_NaN();
    double off_diagonal = std::numeric_limits<double>::quiet_NaN();
    double entropy = 0.0;
};

template <class T>
std::vector<RegionStats> region_stats(const std::vector<AttentionRecord<T>>& records) {
    std::vector<RegionStats> out;
    for (std::size_t b = 0; b < records.size(); ++b)
        for (std::size_t h = 0; h < records[b].maps.size(); ++h)
            for (const auto& reg : extract_regions(records[b], h)) {
                RegionStats s;
                s.block = b;
                s.head = h;
                s.region = reg.name;
                double sum = 0.0;
                for (double v : reg.values) sum += v;
                s.mass = sum / static_cast<double>(reg.values.size());
                if (reg.rows == reg.cols && reg.rows > 1) {
                    s.diagonal = diagonal_mass(reg);
                    s.off_diagonal = off_diagonal_mean(reg);
                }
                s.entropy = row_entropy_mean(reg);
                out.push_back(std::move(s));
            }
    return out;
}

struct DepthPoint {
    std::size_t block = 0;
    double diagonal = 0.0;      // X->L diagonal mass
    double off_diagonal = 0.0;  // X->L off-diagonal mean
};

/// Per-block X->L diagonal mass averaged over heads and over the probe batch.
/// `batch_records[p][b]` is the record of block b for probe sample p.
template <class T>
std::vector<DepthPoint> depth_decay_curve(const std::vector<std::vector<AttentionRecord<T>>>& batch_records) {
    if (batch_records.empty()) throw ConfigError("depth_decay_curve: empty probe batch");
    const std::size_t blocks = batch_records[0].size();
    std::vector<DepthPoint> curve(blocks);
    for (std::size_t b = 0; b < blocks; ++b) {
        curve[b].block = b;
        std::size_t n = 0;
        for (const auto& recs : batch_records) {
            if (recs.size() != blocks) throw ConfigError("depth_decay_curve: ragged records");
            for (std::size_t h = 0; h < recs[b].maps.size(); ++h) {
                const auto regions = extract_regions(recs[b], h);
                const auto& xl = find_region(regions, "X->L");
                curve[b].diagonal += diagonal_mass(xl);
                curve[b].off_diagonal += off_diagonal_mean(xl);
                ++n;
            }
        }
        curve[b].diagonal /= static_cast<double>(n);
        curve[b].off_diagonal /= static_cast<double>(n);
    }
    return curve;
}

// ------------------------------------------------------------------ metrics

/// PSNR reported for identical images (MSE = 0).
inline constexpr double kPsnrIdentical = 100.0;

inline void check_same_extents(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
    if (a.height != b.height || a.width != b.width || a.channels != b.channels)
        throw ConfigError(std::string(what) + ": image extents differ");
}

/// Peak 1.0; capped at kPsnrIdentical.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
    check_same_extents(a, b, "psnr");
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const double d = a.values[i] - b.values[i];
        s += d * d;
    }
    const double mse_v = s / static_cast<double>(a.values.size());
    if (mse_v == 0.0) return kPsnrIdentical;
    return std::min(kPsnrIdentical, -10.0 * std::log10(mse_v));
}

/// Mean SSIM over channels and all valid 11x11 window positions (Gaussian sigma 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 1).
inline double ssim(const ImageBuffer& a, const ImageBuffer& b) {
    check_same_extents(a, b, "ssim");
    constexpr std::size_t win = 11;
    if (a.height < win || a.width < win) throw ConfigError("ssim: images must be at least 11x11");
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    std::array<double, win> g{};
    double gs = 0.0;
    for (std::size_t i = 0; i < win; ++i) {
        const double x = static_cast<double>(i) - 5.0;
        g[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
        gs += g[i];
    }
    for (auto& v : g) v /= gs;
    const std::size_t oh = a.height - win + 1, ow = a.width - win + 1;
    double total = 0.0;
    for (std::size_t c = 0; c < a.channels; ++c)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
                for (std::size_t i = 0; i < win; ++i)
                    for (std::size_t j = 0; j < win; ++j) {
                        const double w = g[i] * g[j];
                        const double va = a.at(y + i, x + j, c), vb = b.at(y + i, x + j, c);
                        mx += w * va;
                        my += w * vb;
                        sxx += w * va * va;
                        syy += w * vb * vb;
                        sxy += w * va * vb;
                    }
                const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
    return total / static_cast<double>(a.channels * oh * ow);
}

// ------------------------------------------------------------------ probes

struct FlowProbe {
    double lr_state_wrt_latent = 0.0;      // max |d<L_final, r>/dZ_t|
    double output_wrt_lr = 0.0;            // max |d<v, r>/dI_LR|
    double output_wrt_lr_attention = 0.0;  // same with the MLP injection switched off
};

namespace stage_id {
inline constexpr std::uint64_t probe = hash_name("analysis.probe");
}  // namespace stage_id

namespace detail {

template <class T>
Tensor<T> random_unit(const Shape& shape, std::uint64_t seed, std::uint64_t which) {
    CounterRng rng(seed, which, stage_id::probe);
    std::vector<T> v(numel_of(shape));
    double n2 = 0.0;
    for (auto& x : v) {
        const double d = rng.normal();
        x = static_cast<T>(d);
        n2 += d * d;
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(n2));
    for (auto& x : v) x *= inv;
    return Tensor<T>(shape, std::move(v));
}

template <class T>
double max_abs(const std::vector<T>& g) {
    double m = 0.0;
    for (T x : g) m = std::max(m, std::abs(static_cast<double>(x)));
    return m;
}

}  // namespace detail

/// Vector-Jacobian probes of the two information paths, at Z_t = forward_noise(z0, eps, t).
/// Parameter gradients touched here are cleared again.
template <class T>
FlowProbe flow_probe(Model<T>& model, const TrainSample<T>& s, std::uint64_t seed = 0) {
    FlowProbe out;
    auto run = [&](bool want_lr_state, bool injection) {
        Tensor<T> zt = forward_noise(s.z0, s.eps, s.t);
        zt.set_requires_grad(true);
        Tensor<T> lr = s.lr.detach();
        lr.set_requires_grad(true);
        ForwardOptions opts;
        opts.injection = injection;
        auto res = model.forward(zt, model.encode_lr(lr), s.tags, s.t, opts);
        const Tensor<T>& y = want_lr_state ? res.lr_state : res.velocity;
        if (!y.defined()) throw ConfigError("flow_probe: variant has no LR state");
        const Tensor<T> loss = dot(y, detail::random_unit<T>(y.shape(), seed, want_lr_state ? 1 : 2));
        if (loss.requires_grad()) backward(loss);
        model.params().zero_grad();
        return std::pair{detail::max_abs(zt.grad()), detail::max_abs(lr.grad())};
    };
    out.lr_state_wrt_latent = run(true, true).first;
    out.output_wrt_lr = run(false, true).second;
    out.output_wrt_lr_attention = run(false, false).second;
    return out;
}

// ------------------------------------------------------------------ export

/// Attention map as an 8-bit grayscale image, scaled so the largest entry is white.
template <class T>
ImageBuffer attention_map_image(const Tensor<T>& map) {
    if (map.rank() != 2) throw ConfigError("attention_map_image: map must be 2-D");
    ImageBuffer img(map.dim(0), map.dim(1), 1);
    double mx = 0.0;
    for (std::size_t i = 0; i < map.numel(); ++i) mx = std::max(mx, static_cast<double>(map[i]));
    for (std::size_t i = 0; i < map.numel(); ++i) img.values[i] = mx > 0 ? static_cast<double>(map[i]) / mx : 0.0;
    return quantize_u8(std::move(img));
}

}  // namespace dit4sr
