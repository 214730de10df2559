#pragma once

// In-memory (HR, LR, tags) pairs: procedural glyph images degraded by the
// synthetic chain, both quantized to 8 bits so they match what lands on disk.

#include <cmath>
#include <cstdint>
#include <vector>

#include "dit4sr/degradation.hpp"
#include "dit4sr/glyphs.hpp"

namespace dit4sr {

struct SamplePair {
    std::uint64_t index = 0;
    ImageBuffer hr;
    ImageBuffer lr;
    std::vector<std::size_t> tags;
    DegradationTrace trace;
};

inline SamplePair make_glyph_pair(std::size_t hr_h, std::size_t hr_w, const DegradationConfig& deg,
                                  std::uint64_t index) {
    GlyphImage g = generate_glyph_image(hr_h, hr_w, deg.seed, index);
    SamplePair p;
    p.index = index;
    p.hr = quantize_u8(std::move(g.image));
    auto d = degrade(p.hr, deg, index);
    p.lr = quantize_u8(std::move(d.lr));
    p.tags = std::move(g.tags);
    p.trace = std::move(d.trace);
    return p;
}

/// Pairs for indices [first, first + count).
inline std::vector<SamplePair> synthesize_pairs(std::size_t hr_h, std::size_t hr_w, const DegradationConfig& deg,
                                                std::size_t count, std::uint64_t first = 0) {
    std::vector<SamplePair> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(make_glyph_pair(hr_h, hr_w, deg, first + i));
    return out;
}

struct DataSplit {
    std::vector<SamplePair> train;
    std::vector<SamplePair> heldout;
};

/// The last round(n * fraction) pairs are held out, at least one of each side.
inline DataSplit split_heldout(std::vector<SamplePair> pairs, double fraction) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("eval split fraction must lie in (0, 1)");
    if (pairs.size() < 2) throw ConfigError("need at least two pairs to split train/held-out");
    auto n_eval = static_cast<std::size_t>(std::lround(static_cast<double>(pairs.size()) * fraction));
    n_eval = std::clamp<std::size_t>(n_eval, 1, pairs.size() - 1);
    DataSplit s;
    const std::size_t n_train = pairs.size() - n_eval;
    s.train.assign(std::make_move_iterator(pairs.begin()), std::make_move_iterator(pairs.begin() + n_train));
    s.heldout.assign(std::make_move_iterator(pairs.begin() + n_train), std::make_move_iterator(pairs.end()));
    return s;
}

}  // namespace dit4sr
