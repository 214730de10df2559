#pragma once

// Full network: latent stub, patchify, shared position embedding, toy tag/timestep
// conditioner, N blocks threading (X, L, C), modulated final norm and unpatchify.
// The CONTROLNET variant swaps the three-stream blocks for two-stream ones plus a
// one-way control branch over (L, C).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dit4sr/block.hpp"
#include "dit4sr/image.hpp"
#include "dit4sr/params.hpp"
#include "dit4sr/variant.hpp"

namespace dit4sr {

struct ModelConfig {
    std::size_t latent_h = 64;
    std::size_t latent_w = 64;
    std::size_t latent_channels = 3;
    std::size_t patch_size = 2;
    std::size_t token_dim = 64;
    std::size_t heads = 2;
    std::size_t depth = 4;
    std::size_t text_len = 4;
    std::size_t pooled_dim = 64;
    std::size_t tag_vocab_size = 16;
    VariantId variant = VariantId::FULL;
    std::size_t scale_factor = 4;
    std::size_t controlnet_blocks = 0;  // 0 selects depth / 2

    std::size_t grid_h() const { return latent_h / patch_size; }
    std::size_t grid_w() const { return latent_w / patch_size; }
    std::size_t tokens() const { return grid_h() * grid_w(); }
    std::size_t patch_dim() const { return patch_size * patch_size * latent_channels; }
    std::size_t control_blocks() const { return controlnet_blocks == 0 ? depth / 2 : controlnet_blocks; }

    void validate() const {
        if (patch_size == 0 || latent_h % patch_size != 0 || latent_w % patch_size != 0)
            throw ConfigError("latent extents " + std::to_string(latent_h) + "x" + std::to_string(latent_w) +
                              " are not divisible by patch size " + std::to_string(patch_size));
        if (latent_h == 0 || latent_w == 0 || latent_channels == 0) throw ConfigError("latent extents must be positive");
        if (heads == 0 || token_dim % heads != 0)
            throw ConfigError(std::to_string(heads) + " heads do not divide token_dim " + std::to_string(token_dim));
        if (token_dim % 4 != 0) throw ConfigError("token_dim must be a multiple of 4 for the 2-D position embedding");
        if (pooled_dim == 0 || pooled_dim % 2 != 0) throw ConfigError("pooled_dim must be positive and even");
        if (depth == 0) throw ConfigError("depth must be at least 1");
        if (text_len == 0) throw ConfigError("text_len must be at least 1");
        if (tag_vocab_size == 0) throw ConfigError("tag_vocab_size must be at least 1");
        if (scale_factor == 0 || latent_h % scale_factor != 0 || latent_w % scale_factor != 0)
            throw ConfigError("latent extents are not divisible by scale_factor " + std::to_string(scale_factor));
        if (variant == VariantId::CONTROLNET && control_blocks() > depth)
            throw ConfigError("controlnet_blocks exceeds depth");
    }

    bool operator==(const ModelConfig&) const = default;
};

struct InitOptions {
    std::uint64_t seed = 0;
    /// Initial bias of every adaLN gate. Zero reproduces adaLN-zero exactly; the
    /// default stands in for a pretrained base whose sub-blocks are already active.
    double gate_init = 0.1;
};

// ------------------------------------------------------------ free helpers

/// 2-D sine-cosine table [gh*gw, D]: the first D/2 channels encode the row, the
/// rest the column, each as D/4 sines followed by D/4 cosines.
template <class T>
Tensor<T> position_embedding(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
    if (dim % 4 != 0) throw ConfigError("position_embedding: D = " + std::to_string(dim) + " is not a multiple of 4");
    const std::size_t quarter = dim / 4;
    std::vector<T> v(grid_h * grid_w * dim);
    for (std::size_t r = 0; r < grid_h; ++r)
        for (std::size_t c = 0; c < grid_w; ++c) {
            T* row = v.data() + (r * grid_w + c) * dim;
            for (std::size_t k = 0; k < quarter; ++k) {
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(quarter));
                row[k] = static_cast<T>(std::sin(static_cast<double>(r) * omega));
                row[quarter + k] = static_cast<T>(std::cos(static_cast<double>(r) * omega));
                row[2 * quarter + k] = static_cast<T>(std::sin(static_cast<double>(c) * omega));
                row[3 * quarter + k] = static_cast<T>(std::cos(static_cast<double>(c) * omega));
            }
        }
    return Tensor<T>({grid_h * grid_w, dim}, std::move(v));
}

/// Flat source index of every patch element: token k = (gy, gx) row-major, inner
/// layout (py, px, channel).
inline std::vector<std::size_t> patch_index(std::size_t h, std::size_t w, std::size_t c, std::size_t p) {
    if (p == 0 || h % p != 0 || w % p != 0)
        throw ConfigError("patchify: " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by p = " +
                          std::to_string(p));
    std::vector<std::size_t> idx;
    idx.reserve(h * w * c);
    for (std::size_t gy = 0; gy < h / p; ++gy)
        for (std::size_t gx = 0; gx < w / p; ++gx)
            for (std::size_t py = 0; py < p; ++py)
                for (std::size_t px = 0; px < p; ++px)
                    for (std::size_t ch = 0; ch < c; ++ch) idx.push_back(((gy * p + py) * w + gx * p + px) * c + ch);
    return idx;
}

/// The inverse permutation of patch_index.
inline std::vector<std::size_t> unpatch_index(std::size_t h, std::size_t w, std::size_t c, std::size_t p) {
    const auto fwd = patch_index(h, w, c, p);
    std::vector<std::size_t> inv(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
    return inv;
}

/// Z [H, W, C] -> patches [K, p*p*C] (no projection).
template <class T>
Tensor<T> to_patches(const Tensor<T>& z, std::size_t p) {
    if (z.rank() != 3) throw ConfigError("patchify: latent must be [H, W, C], got " + shape_str(z.shape()));
    const std::size_t h = z.dim(0), w = z.dim(1), c = z.dim(2);
    auto idx = patch_index(h, w, c, p);
    return gather(z, std::move(idx), {(h / p) * (w / p), p * p * c});
}

/// patches [K, p*p*C] -> Z [H, W, C].
template <class T>
Tensor<T> from_patches(const Tensor<T>& patches, std::size_t h, std::size_t w, std::size_t c, std::size_t p) {
    if (patches.rank() != 2 || patches.dim(0) * patches.dim(1) != h * w * c || patches.dim(1) != p * p * c)
        throw ConfigError("unpatchify: " + shape_str(patches.shape()) + " does not tile " + std::to_string(h) + "x" +
                          std::to_string(w) + "x" + std::to_string(c));
    auto idx = unpatch_index(h, w, c, p);
    return gather(patches, std::move(idx), {h, w, c});
}

/// Patches flattened then mapped to D by one shared linear projection.
template <class T>
Tensor<T> patchify(const Tensor<T>& z, const Linear<T>& proj, std::size_t p) {
    return proj(to_patches(z, p));
}

/// Final linear map D -> p*p*C followed by the inverse patch scatter.
template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, const Linear<T>& proj, std::size_t h, std::size_t w, std::size_t c,
                     std::size_t p) {
    return from_patches(proj(tokens), h, w, c, p);
}

/// Sinusoidal timestep features [1, dim] for t in [0, 1] (scaled by 1000).
template <class T>
Tensor<T> timestep_features(double t, std::size_t dim) {
    const std::size_t half = dim / 2;
    std::vector<T> v(dim);
    for (std::size_t k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
        v[k] = static_cast<T>(std::cos(1000.0 * t * freq));
        v[half + k] = static_cast<T>(std::sin(1000.0 * t * freq));
    }
    return Tensor<T>({1, dim}, std::move(v));
}

template <class T>
Tensor<T> image_to_tensor(const ImageBuffer& img) {
    return Tensor<T>({img.height, img.width, img.channels}, std::vector<T>(img.values.begin(), img.values.end()));
}

/// Identity latent stub: [0,1] image values -> [-1,1] latent, and back with a clamp.
template <class T>
Tensor<T> encode_latent(const ImageBuffer& img) {
    std::vector<T> v(img.values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(2.0 * img.values[i] - 1.0);
    return Tensor<T>({img.height, img.width, img.channels}, std::move(v));
}

template <class T>
ImageBuffer decode_latent(const Tensor<T>& z) {
    if (z.rank() != 3) throw ConfigError("decode: latent must be [H, W, C]");
    ImageBuffer img(z.dim(0), z.dim(1), z.dim(2));
    for (std::size_t i = 0; i < z.numel(); ++i) img.values[i] = (static_cast<double>(z[i]) + 1.0) * 0.5;
    img.clamp01();
    return img;
}

// ------------------------------------------------------------ model

struct ForwardOptions {
    bool record = false;      // keep attention maps of the main blocks
    bool control = true;      // CONTROLNET only: run the control branch
    bool injection = true;    // disable the L -> X MLP injection (path-ablated probes)
};

template <class T>
struct ForwardResult {
    Tensor<T> velocity;                   // [H, W, C]
    Tensor<T> lr_state;                   // final L of the main blocks, or of the control branch
    std::vector<AttentionRecord<T>> records;
};

template <class T>
class Model {
public:
    Model(ModelConfig cfg, InitOptions init = {}) : cfg_(cfg), init_(init), spec_(VariantSpec::of(cfg.variant)) {
        cfg_.validate();
        build();
    }

    const ModelConfig& config() const { return cfg_; }
    const InitOptions& init_options() const { return init_; }
    const VariantSpec& variant() const { return spec_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    std::size_t depth() const { return blocks_.size(); }
    const BlockParams<T>& block(std::size_t i) const { return blocks_.at(i); }
    BlockLayout block_layout() const { return spec_.block_layout(); }
    BlockGeometry geometry() const { return {cfg_.grid_h(), cfg_.grid_w(), cfg_.heads}; }

    /// The embedding added on the X path and on the L path; one tensor serves both.
    const Tensor<T>& x_position_embedding() const { return pos_; }
    const Tensor<T>& l_position_embedding() const { return pos_; }
    const Linear<T>& x_embed() const { return x_embed_; }
    const Linear<T>& l_embed() const { return l_embed_; }
    const Linear<T>& final_out() const { return final_out_; }

    /// X tokens [K, D] for a latent [H, W, C].
    Tensor<T> embed_latent(const Tensor<T>& z) const {
        check_latent(z, "forward");
        return add(patchify(z, x_embed_, cfg_.patch_size), pos_);
    }

    /// LR image tensor [h, w, C] in [0, 1] -> L tokens [K, D]: bicubic upsample to the
    /// latent extents, latent stub, L projection, shared position embedding.
    Tensor<T> encode_lr(const Tensor<T>& lr) const {
        if (lr.rank() != 3 || lr.dim(2) != cfg_.latent_channels)
            throw ConfigError("encode_lr: LR image must be [h, w, " + std::to_string(cfg_.latent_channels) + "], got " +
                              shape_str(lr.shape()));
        const std::size_t h = lr.dim(0), w = lr.dim(1), c = lr.dim(2);
        if (h * cfg_.scale_factor != cfg_.latent_h || w * cfg_.scale_factor != cfg_.latent_w)
            throw ConfigError("encode_lr: LR " + std::to_string(h) + "x" + std::to_string(w) + " times scale " +
                              std::to_string(cfg_.scale_factor) + " does not match HR " + std::to_string(cfg_.latent_h) +
                              "x" + std::to_string(cfg_.latent_w));
        const Tensor<T> up_h = interp_tensor(h, cfg_.latent_h);
        const Tensor<T> up_w = interp_tensor(w, cfg_.latent_w);
        const Tensor<T> rows = matmul(up_h, reshape(lr, {h, w * c}));                       // [H, w*C]
        const Tensor<T> full = matmul(up_w, reshape(rows, {cfg_.latent_h, w, c}));          // [H, W, C]
        const Tensor<T> latent = add_scalar(scale(full, T{2}), T{-1});
        return add(patchify(latent, l_embed_, cfg_.patch_size), pos_);
    }

    Tensor<T> encode_lr(const ImageBuffer& lr) const { return encode_lr(image_to_tensor<T>(lr)); }

    /// Text tokens [M, D]: one row per tag (sorted order, truncated to M), padded with the null row.
    Tensor<T> text_tokens(const std::vector<std::size_t>& tags) const {
        const auto ids = tag_ids(tags);
        std::vector<std::size_t> idx;
        const std::size_t d = cfg_.token_dim;
        for (std::size_t j = 0; j < cfg_.text_len; ++j) {
            const std::size_t row = j < ids.size() ? ids[j] : cfg_.tag_vocab_size;
            for (std::size_t k = 0; k < d; ++k) idx.push_back(row * d + k);
        }
        return gather(tag_table_, std::move(idx), {cfg_.text_len, d});
    }

    /// Pooled conditioning [1, P]: mean of the tags' pooled rows (null row if empty)
    /// plus an affine map of the timestep features.
    Tensor<T> pooled_cond(const std::vector<std::size_t>& tags, double t) const {
        const auto ids = tag_ids(tags);
        const std::size_t pd = cfg_.pooled_dim;
        std::vector<std::size_t> rows = ids;
        if (rows.empty()) rows.push_back(cfg_.tag_vocab_size);
        std::vector<std::size_t> idx;
        for (auto r : rows)
            for (std::size_t k = 0; k < pd; ++k) idx.push_back(r * pd + k);
        const Tensor<T> picked = gather(pooled_table_, std::move(idx), {rows.size(), pd});
        const Tensor<T> avg = Tensor<T>::full({1, rows.size()}, T{1} / static_cast<T>(rows.size()));
        return add(matmul(avg, picked), time_proj_(timestep_features<T>(t, pd)));
    }

    ForwardResult<T> forward(const Tensor<T>& z_t, const Tensor<T>& l_tokens, const std::vector<std::size_t>& tags,
                             double t, ForwardOptions opts = {}) const {
        check_latent(z_t, "forward");
        if (l_tokens.rank() != 2 || l_tokens.dim(0) != cfg_.tokens() || l_tokens.dim(1) != cfg_.token_dim)
            throw ConfigError("forward: L tokens " + shape_str(l_tokens.shape()) + " must be [" +
                              std::to_string(cfg_.tokens()) + ", " + std::to_string(cfg_.token_dim) + "]");
        const Tensor<T> pooled = pooled_cond(tags, t);
        const Tensor<T> text = text_tokens(tags);
        const BlockGeometry geo = geometry();
        ForwardResult<T> res;

        std::vector<Tensor<T>> control_out;
        if (spec_.id == VariantId::CONTROLNET && opts.control) {
            const BlockLayout two_stream{false, false, false, Injection::none};
            TokenBundle<T> cb{l_tokens, Tensor<T>(), text};
            for (std::size_t i = 0; i < control_.size(); ++i) {
                cb = block_forward(cb, pooled, control_[i], two_stream, geo);
                control_out.push_back(control_proj_[i](cb.x));
            }
            res.lr_state = cb.x;
        }

        BlockLayout layout = spec_.block_layout();
        if (!opts.injection) layout.injection = Injection::none;
        TokenBundle<T> b{embed_latent(z_t), layout.lr_stream ? l_tokens : Tensor<T>(), text};
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            if (i < control_out.size()) b.x = add(b.x, control_out[i]);
            AttentionRecord<T> rec;
            b = block_forward(b, pooled, blocks_[i], layout, geo, opts.record ? &rec : nullptr);
            if (opts.record) res.records.push_back(std::move(rec));
        }
        if (layout.lr_stream) res.lr_state = b.l;

        auto fm = split(final_mod_(pooled), {cfg_.token_dim, cfg_.token_dim}, 1);
        res.velocity = unpatchify(modulate(b.x, fm[0], fm[1]), final_out_, cfg_.latent_h, cfg_.latent_w,
                                  cfg_.latent_channels, cfg_.patch_size);
        return res;
    }

    Tensor<T> velocity(const Tensor<T>& z_t, const Tensor<T>& l_tokens, const std::vector<std::size_t>& tags,
                       double t) const {
        return forward(z_t, l_tokens, tags, t).velocity;
    }

private:
    void check_latent(const Tensor<T>& z, const char* where) const {
        if (z.rank() != 3 || z.dim(0) != cfg_.latent_h || z.dim(1) != cfg_.latent_w || z.dim(2) != cfg_.latent_channels)
            throw ConfigError(std::string(where) + ": latent " + shape_str(z.shape()) + " does not match config [" +
                              std::to_string(cfg_.latent_h) + ", " + std::to_string(cfg_.latent_w) + ", " +
                              std::to_string(cfg_.latent_channels) + "]");
    }

    std::vector<std::size_t> tag_ids(const std::vector<std::size_t>& tags) const {
        std::vector<std::size_t> ids = tags;
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        for (auto id : ids)
            if (id >= cfg_.tag_vocab_size)
                throw ConfigError("tag id " + std::to_string(id) + " outside vocabulary of " +
                                  std::to_string(cfg_.tag_vocab_size));
        return ids;
    }

    Tensor<T> interp_tensor(std::size_t in, std::size_t out) const {
        const auto m = interpolation_matrix(in, out, ResizeMethod::bicubic);
        return Tensor<T>({out, in}, std::vector<T>(m.begin(), m.end()));
    }

    // Parameter construction. `key` names the initialization stream so that copies
    // (L from X, control from main) draw identical values.
    Tensor<T> xavier(const std::string& name, const std::string& key, std::size_t in, std::size_t out) {
        return params_.add(name, Tensor<T>({in, out}, xavier_values<T>(init_.seed, key, in, out, in * out)));
    }
    Tensor<T> zeros(const std::string& name, Shape s) { return params_.add(name, Tensor<T>(std::move(s))); }

    Linear<T> dense(const std::string& name, const std::string& key, std::size_t in, std::size_t out) {
        return {xavier(name + ".w", key + ".w", in, out), zeros(name + ".b", {out})};
    }
    Linear<T> zero_dense(const std::string& name, std::size_t in, std::size_t out, bool bias = true) {
        return {zeros(name + ".w", {in, out}), bias ? zeros(name + ".b", {out}) : Tensor<T>()};
    }

    Linear<T> modulation(const std::string& name, std::size_t chunks) {
        const std::size_t d = cfg_.token_dim;
        Linear<T> m = zero_dense(name, cfg_.pooled_dim, chunks * d);
        if (chunks == 6) {
            auto b = m.b.mutable_data();
            for (std::size_t k = 0; k < d; ++k) {
                b[2 * d + k] = static_cast<T>(init_.gate_init);
                b[5 * d + k] = static_cast<T>(init_.gate_init);
            }
        }
        return m;
    }

    /// Stream weights. Queries start at zero in every stream so the initial attention
    /// is exactly uniform; `zero_kv` also zeroes keys and values (new LR projections).
    StreamWeights<T> stream(const std::string& name, const std::string& key, bool zero_kv) {
        const std::size_t d = cfg_.token_dim;
        StreamWeights<T> s;
        s.modulation = modulation(name + ".modulation", 6);
        s.q = zero_dense(name + ".q", d, d);
        s.k = zero_kv ? zero_dense(name + ".k", d, d) : dense(name + ".k", key + ".k", d, d);
        s.v = zero_kv ? zero_dense(name + ".v", d, d) : dense(name + ".v", key + ".v", d, d);
        s.out = dense(name + ".out", key + ".out", d, d);
        s.mlp_up = dense(name + ".mlp_up", key + ".mlp_up", d, 4 * d);
        s.mlp_down = dense(name + ".mlp_down", key + ".mlp_down", 4 * d, d);
        return s;
    }

    void build() {
        const std::size_t d = cfg_.token_dim, pd = cfg_.pooled_dim, v = cfg_.tag_vocab_size;
        pos_ = position_embedding<T>(cfg_.grid_h(), cfg_.grid_w(), d);

        x_embed_ = dense("x_embed", "x_embed", cfg_.patch_dim(), d);
        const BlockLayout layout = spec_.block_layout();
        if (layout.lr_stream || spec_.id == VariantId::CONTROLNET) l_embed_ = dense("l_embed", "x_embed", cfg_.patch_dim(), d);

        tag_table_ = params_.add("cond.tag_table",
                                 Tensor<T>({v + 1, d}, xavier_values<T>(init_.seed, "cond.tag_table", v + 1, d, (v + 1) * d)));
        pooled_table_ = params_.add(
            "cond.pooled_table", Tensor<T>({v + 1, pd}, xavier_values<T>(init_.seed, "cond.pooled_table", v + 1, pd, (v + 1) * pd)));
        time_proj_ = dense("cond.time", "cond.time", pd, pd);

        for (std::size_t i = 0; i < cfg_.depth; ++i) {
            const std::string base = "blocks." + std::to_string(i);
            BlockParams<T> bp;
            bp.x = stream(base + ".x", base + ".x", false);
            if (layout.lr_stream) bp.l = stream(base + ".l", base + ".x", true);
            bp.c = stream(base + ".c", base + ".c", false);
            if (layout.injection == Injection::conv) bp.injection = zeros(base + ".injection", {3, 3, 4 * d});
            if (layout.injection == Injection::linear) bp.injection = zeros(base + ".injection", {4 * d, 4 * d});
            blocks_.push_back(std::move(bp));
        }
        if (spec_.id == VariantId::CONTROLNET) {
            for (std::size_t i = 0; i < cfg_.control_blocks(); ++i) {
                const std::string base = "control." + std::to_string(i);
                const std::string key = "blocks." + std::to_string(i);
                BlockParams<T> bp;
                bp.x = stream(base + ".x", key + ".x", false);
                bp.c = stream(base + ".c", key + ".c", false);
                control_.push_back(std::move(bp));
                control_proj_.push_back(zero_dense(base + ".proj", d, d));
            }
        }
        final_mod_ = modulation("final.modulation", 2);
        final_out_ = dense("final.out", "final.out", d, cfg_.patch_dim());
    }

    ModelConfig cfg_;
    InitOptions init_;
    VariantSpec spec_;
    ParamStore<T> params_;
    Tensor<T> pos_;
    Linear<T> x_embed_, l_embed_, time_proj_, final_mod_, final_out_;
    Tensor<T> tag_table_, pooled_table_;
    std::vector<BlockParams<T>> blocks_;
    std::vector<BlockParams<T>> control_;
    std::vector<Linear<T>> control_proj_;
};

}  // namespace dit4sr
