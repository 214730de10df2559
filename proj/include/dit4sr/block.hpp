#pragma once

// MM-DiT-Control block: three token streams (noisy image X, LR image L, text C),
// each with its own adaLN modulation, attention projections and MLP. Attention
// is a single softmax over the token-length concatenation of all participating
// streams; the LR MLP's expanded hidden state is injected into the X MLP through
// a 3x3 depth-wise convolution over the patch grid.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dit4sr/ops.hpp"
#include "dit4sr/params.hpp"

namespace dit4sr {

enum class Injection { conv, linear, none };

inline std::string_view to_string(Injection i) {
    switch (i) {
        case Injection::conv: return "conv";
        case Injection::linear: return "linear";
        case Injection::none: return "none";
    }
    return "?";
}

/// Wiring switches for one block.
struct BlockLayout {
    bool lr_stream = true;       // false: plain two-stream MM-DiT block (X, C)
    bool lr_integration = true;  // L takes part in joint attention
    bool lr_residual = true;     // L keeps its shortcut around attention
    Injection injection = Injection::conv;
};

struct BlockGeometry {
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::size_t heads = 1;
};

template <class T>
struct StreamWeights {
    Linear<T> modulation;  // pooled -> 6D: shift/scale/gate for attention, then MLP
    Linear<T> q, k, v, out;
    Linear<T> mlp_up, mlp_down;  // D -> 4D -> D
};

template <class T>
struct BlockParams {
    StreamWeights<T> x, l, c;
    Tensor<T> injection;  // [3, 3, 4D] for conv, [4D, 4D] for linear
};

template <class T>
struct TokenBundle {
    Tensor<T> x;  // [K, D]
    Tensor<T> l;  // [K, D]; undefined for two-stream blocks
    Tensor<T> c;  // [M, D]
};

/// Attention maps of one block, one [S, S] map per head, with the token-length
/// segment sizes in concatenation order (X, L, C when L participates).
template <class T>
struct AttentionRecord {
    std::vector<std::string> segment_names;
    std::vector<std::size_t> segments;
    std::vector<Tensor<T>> maps;

    std::size_t tokens() const {
        std::size_t s = 0;
        for (auto n : segments) s += n;
        return s;
    }
};

template <class T>
struct AdaLNChunks {
    Tensor<T> shift_attn, scale_attn, gate_attn, shift_mlp, scale_mlp, gate_mlp;
};

/// Six [1, D] modulation vectors from the pooled conditioning [1, P].
template <class T>
AdaLNChunks<T> adaln_chunks(const Tensor<T>& pooled, const Linear<T>& producer) {
    const std::size_t d6 = producer.w.dim(1);
    if (d6 % 6 != 0) throw ConfigError("modulation producer width must be a multiple of 6");
    const std::size_t d = d6 / 6;
    auto parts = split(producer(pooled), {d, d, d, d, d, d}, 1);
    return {parts[0], parts[1], parts[2], parts[3], parts[4], parts[5]};
}

/// layer_norm(x) * (1 + scale) + shift
template <class T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale) {
    return add(mul(layer_norm(x), add_scalar(scale, T{1})), shift);
}

/// Joint attention over the concatenated streams. `inputs[i]` are the modulated
/// tokens of stream i, projected by `weights[i]`. Returns each stream's attention
/// output after its own output projection.
template <class T>
std::vector<Tensor<T>> joint_attention(const std::vector<Tensor<T>>& inputs,
                                       const std::vector<const StreamWeights<T>*>& weights, std::size_t heads,
                                       AttentionRecord<T>* record = nullptr) {
    if (inputs.size() != weights.size() || inputs.empty()) throw ConfigError("joint_attention: stream count mismatch");
    const std::size_t dim = inputs[0].dim(1);
    if (heads == 0 || dim % heads != 0)
        throw ConfigError("joint_attention: " + std::to_string(heads) + " heads do not divide D = " +
                          std::to_string(dim));
    std::vector<Tensor<T>> qs, ks, vs;
    std::vector<std::size_t> segments;
    for (std::size_t s = 0; s < inputs.size(); ++s) {
        if (inputs[s].rank() != 2 || inputs[s].dim(1) != dim)
            throw ConfigError("joint_attention: stream " + std::to_string(s) + " has shape " +
                              shape_str(inputs[s].shape()) + ", expected [*, " + std::to_string(dim) + "]");
        qs.push_back(weights[s]->q(inputs[s]));
        ks.push_back(weights[s]->k(inputs[s]));
        vs.push_back(weights[s]->v(inputs[s]));
        segments.push_back(inputs[s].dim(0));
    }
    const Tensor<T> q = concat(qs, 0), k = concat(ks, 0), v = concat(vs, 0);
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dim / heads));
    std::vector<std::vector<T>> maps;
    const Tensor<T> o = attention(q, k, v, heads, inv_sqrt, record ? &maps : nullptr);
    if (record) {
        const std::size_t n = q.dim(0);
        record->segments = segments;
        record->maps.clear();
        for (auto& m : maps) record->maps.emplace_back(Shape{n, n}, std::move(m));
    }
    auto pieces = split(o, segments, 0);
    std::vector<Tensor<T>> deltas;
    for (std::size_t s = 0; s < pieces.size(); ++s) deltas.push_back(weights[s]->out(pieces[s]));
    return deltas;
}

/// L after the attention sub-block: L_in + gate * dL, or gate * dL without the residual.
template <class T>
Tensor<T> lr_residual(const Tensor<T>& l_in, const Tensor<T>& delta, const Tensor<T>& gate, bool residual) {
    const Tensor<T> gated = mul(delta, gate);
    return residual ? add(l_in, gated) : gated;
}

template <class T>
struct MlpDeltas {
    Tensor<T> x;
    Tensor<T> l;
};

/// X and L MLPs with the L hidden state eta(L) injected into phi(X) after the activation.
template <class T>
MlpDeltas<T> mlp_with_injection(const Tensor<T>& x_mod, const Tensor<T>& l_mod, const BlockParams<T>& p,
                                Injection injection, std::size_t grid_h, std::size_t grid_w) {
    const Tensor<T> phi = gelu(p.x.mlp_up(x_mod));
    const Tensor<T> eta = gelu(p.l.mlp_up(l_mod));
    Tensor<T> hidden = phi;
    if (injection == Injection::conv) {
        const std::size_t k = eta.dim(0), width = eta.dim(1);
        if (grid_h * grid_w != k)
            throw ConfigError("mlp_with_injection: K = " + std::to_string(k) + " is not grid " +
                              std::to_string(grid_h) + "x" + std::to_string(grid_w));
        const Tensor<T> grid = reshape(eta, {grid_h, grid_w, width});
        hidden = add(phi, reshape(depthwise_conv3x3(grid, p.injection), {k, width}));
    } else if (injection == Injection::linear) {
        hidden = add(phi, matmul(eta, p.injection));
    }
    return {p.x.mlp_down(hidden), p.l.mlp_down(eta)};
}

template <class T>
Tensor<T> plain_mlp(const Tensor<T>& x_mod, const StreamWeights<T>& w) {
    return w.mlp_down(gelu(w.mlp_up(x_mod)));
}

/// One block. Per stream: modulate -> joint attention -> gated residual -> modulate
/// -> MLP (with injection into X) -> gated residual.
template <class T>
TokenBundle<T> block_forward(const TokenBundle<T>& in, const Tensor<T>& pooled, const BlockParams<T>& p,
                             const BlockLayout& layout, const BlockGeometry& geo,
                             AttentionRecord<T>* record = nullptr) {
    if (in.x.dim(0) != geo.grid_h * geo.grid_w)
        throw ConfigError("block_forward: X has " + std::to_string(in.x.dim(0)) + " tokens, grid is " +
                          std::to_string(geo.grid_h) + "x" + std::to_string(geo.grid_w));
    const bool has_l = layout.lr_stream;
    if (has_l && (!in.l.defined() || in.l.shape() != in.x.shape()))
        throw ConfigError("block_forward: L must match X's [K, D]");

    const auto mx = adaln_chunks(pooled, p.x.modulation);
    const auto mc = adaln_chunks(pooled, p.c.modulation);
    std::optional<AdaLNChunks<T>> ml;
    if (has_l) ml = adaln_chunks(pooled, p.l.modulation);

    // Attention sub-block.
    std::vector<Tensor<T>> att_in{modulate(in.x, mx.shift_attn, mx.scale_attn)};
    std::vector<const StreamWeights<T>*> att_w{&p.x};
    std::vector<std::string> names{"X"};
    const bool l_attends = has_l && layout.lr_integration;
    if (l_attends) {
        att_in.push_back(modulate(in.l, ml->shift_attn, ml->scale_attn));
        att_w.push_back(&p.l);
        names.push_back("L");
    }
    att_in.push_back(modulate(in.c, mc.shift_attn, mc.scale_attn));
    att_w.push_back(&p.c);
    names.push_back("C");
    auto deltas = joint_attention(att_in, att_w, geo.heads, record);
    if (record) record->segment_names = names;

    TokenBundle<T> out;
    out.l = in.l;
    out.x = add(in.x, mul(deltas[0], mx.gate_attn));
    out.c = add(in.c, mul(deltas.back(), mc.gate_attn));
    if (l_attends) out.l = lr_residual(in.l, deltas[1], ml->gate_attn, layout.lr_residual);

    // MLP sub-block.
    const Tensor<T> x_mod = modulate(out.x, mx.shift_mlp, mx.scale_mlp);
    const Tensor<T> c_mod = modulate(out.c, mc.shift_mlp, mc.scale_mlp);
    if (has_l) {
        const Tensor<T> l_mod = modulate(out.l, ml->shift_mlp, ml->scale_mlp);
        const auto mlp = mlp_with_injection(x_mod, l_mod, p, layout.injection, geo.grid_h, geo.grid_w);
        out.x = add(out.x, mul(mlp.x, mx.gate_mlp));
        out.l = add(out.l, mul(mlp.l, ml->gate_mlp));
    } else {
        out.x = add(out.x, mul(plain_mlp(x_mod, p.x), mx.gate_mlp));
    }
    out.c = add(out.c, mul(plain_mlp(c_mod, p.c), mc.gate_mlp));
    return out;
}

}  // namespace dit4sr
