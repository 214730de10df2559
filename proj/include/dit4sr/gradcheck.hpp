#pragma once

// Central finite-difference checks of the reverse-mode gradients, at double precision.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "dit4sr/model.hpp"

namespace dit4sr {

struct GradcheckOptions {
    double step = 1e-5;
    double rel_tol = 1e-4;
    double abs_floor = 1e-8;  // elements below this magnitude are judged by absolute error
    bool richardson = false;  // combine steps h and h/2 to cancel the O(h^2) term
    double refine_step = 0.0;  // if > 0, elements that miss the tolerance are re-estimated by Ridders' method from this step
    std::uint64_t seed = 0;
};

struct GradcheckItem {
    std::string name;
    std::size_t elements = 0;
    double worst_rel = 0.0;
    double worst_abs = 0.0;  // over elements below the floor
    bool pass = true;
};

struct GradcheckReport {
    std::vector<GradcheckItem> items;
    double seconds = 0.0;

    bool all_pass() const {
        for (const auto& i : items)
            if (!i.pass) return false;
        return !items.empty();
    }

    std::string to_text() const {
        std::ostringstream os;
        char line[256];
        for (const auto& i : items) {
            std::snprintf(line, sizeof line, "%-4s %-32s n=%-7zu worst_rel=%.3e worst_abs=%.3e\n",
                          i.pass ? "PASS" : "FAIL", i.name.c_str(), i.elements, i.worst_rel, i.worst_abs);
            os << line;
        }
        return os.str();
    }
};

using GradFn = std::function<Tensor<double>()>;

/// Compares d/d(leaves) of sum(f() * R), R a fixed random weighting, against central
/// differences. Leaves must be fresh leaf tensors that `f` reads.
namespace detail {

// Ridders' polynomial extrapolation of central differences over a shrinking step ladder;
// returns the tableau entry with the smallest internal error estimate.
template <class Central>
double ridders(Central& central, double h0) {
    constexpr int ntab = 10;
    constexpr double con = 1.4, con2 = con * con, safe = 2.0;
    double a[ntab][ntab];
    double h = h0, err = std::numeric_limits<double>::max();
    a[0][0] = central(h);
    double ans = a[0][0];
    for (int i = 1; i < ntab; ++i) {
        h /= con;
        a[0][i] = central(h);
        double fac = con2;
        for (int j = 1; j <= i; ++j) {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= con2;
            const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
            if (e <= err) {
                err = e;
                ans = a[j][i];
            }
        }
        if (std::abs(a[i][i] - a[i - 1][i - 1]) >= safe * err) break;
    }
    return ans;
}

}  // namespace detail

inline GradcheckItem check_gradient(std::string name, std::vector<Tensor<double>> leaves, const GradFn& f,
                                    const GradcheckOptions& opt = {}) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    const Tensor<double> out0 = f();
    CounterRng rng(opt.seed, hash_name(name), hash_name("gradcheck.weights"));
    std::vector<double> w(out0.numel());
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    const Tensor<double> weights(out0.shape(), w);
    backward(sum(mul(out0, weights)));

    auto objective = [&] {
        NoGradGuard guard;
        const Tensor<double> out = f();
        double s = 0.0;
        for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * w[i];
        return s;
    };

    GradcheckItem item;
    item.name = std::move(name);
    for (auto& leaf : leaves) {
        const std::vector<double> analytic = leaf.grad();
        auto x = leaf.mutable_data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = x[i];
            auto central = [&](double h) {
                x[i] = orig + h;
                const double up = objective();
                x[i] = orig - h;
                const double down = objective();
                x[i] = orig;
                return (up - down) / (2.0 * h);
            };
            double numeric =
                opt.richardson ? (4.0 * central(0.5 * opt.step) - central(opt.step)) / 3.0 : central(opt.step);
            auto judge = [&](double est) {
                const double err = std::abs(analytic[i] - est);
                const double mag = std::max(std::abs(analytic[i]), std::abs(est));
                return std::pair{err, mag};
            };
            auto [err, mag] = judge(numeric);
            const bool miss = mag < opt.abs_floor ? err >= opt.abs_floor : err / mag >= opt.rel_tol;
            if (opt.refine_step > 0.0 && (miss || !std::isfinite(err))) {
                numeric = detail::ridders(central, opt.refine_step);
                std::tie(err, mag) = judge(numeric);
            }
            if (!std::isfinite(err)) {
                item.pass = false;
                item.worst_rel = std::numeric_limits<double>::infinity();
            } else if (mag < opt.abs_floor) {
                item.worst_abs = std::max(item.worst_abs, err);
                if (err >= opt.abs_floor) item.pass = false;
            } else {
                item.worst_rel = std::max(item.worst_rel, err / mag);
                if (err / mag >= opt.rel_tol) item.pass = false;
            }
            ++item.elements;
        }
        leaf.zero_grad();
    }
    return item;
}

namespace detail {

inline Tensor<double> random_leaf(Shape s, CounterRng& rng, double scale = 1.0) {
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = scale * rng.normal();
    return Tensor<double>(std::move(s), std::move(v));
}

/// Overwrites every parameter with N(0, scale^2) so zero-initialized paths carry gradient.
inline void randomize_params(ParamStore<double>& params, std::uint64_t seed, double scale) {
    CounterRng rng(seed, hash_name("gradcheck.params"), 0);
    for (const auto& [name, t] : params.items()) {
        Tensor<double> p = t;
        for (auto& x : p.mutable_data()) x = scale * rng.normal();
    }
}

inline std::vector<Tensor<double>> param_leaves(const ParamStore<double>& params) {
    std::vector<Tensor<double>> out;
    for (const auto& [_, t] : params.items()) out.push_back(t);
    return out;
}

}  // namespace detail

/// Every exported differentiable op on small random inputs.
inline std::vector<GradcheckItem> gradcheck_ops(const GradcheckOptions& opt = {}) {
    CounterRng rng(opt.seed, hash_name("gradcheck.ops"), 0);
    auto leaf = [&](Shape s, double scale = 1.0) { return detail::random_leaf(std::move(s), rng, scale); };
    std::vector<GradcheckItem> items;
    auto run = [&](const std::string& name, std::vector<Tensor<double>> leaves, const GradFn& f) {
        items.push_back(check_gradient(name, std::move(leaves), f, opt));
    };

    {
        auto a = leaf({4, 6}), b = leaf({4, 6}), r = leaf({1, 6});
        run("add", {a, b}, [=] { return add(a, b); });
        run("add (broadcast)", {a, r}, [=] { return add(a, r); });
        run("sub (broadcast)", {a, r}, [=] { return sub(r, a); });
        run("mul", {a, b}, [=] { return mul(a, b); });
        run("mul (broadcast)", {a, r}, [=] { return mul(a, r); });
        run("scale", {a}, [=] { return scale(a, 1.7); });
        run("add_scalar", {a}, [=] { return add_scalar(a, -0.3); });
        run("gelu", {a}, [=] { return gelu(a); });
        run("square", {a}, [=] { return square(a); });
        run("sum", {a}, [=] { return sum(a); });
        run("mean", {a}, [=] { return mean(a); });
        run("mse", {a, b}, [=] { return mse(a, b); });
        run("dot", {a, b}, [=] { return dot(a, b); });
        run("transpose", {a}, [=] { return transpose(a); });
        run("softmax (rows)", {a}, [=] { return softmax(a, -1); });
        run("softmax (columns)", {a}, [=] { return softmax(a, 0); });
        run("layer_norm", {a}, [=] { return layer_norm(a); });
        run("reshape", {a}, [=] { return reshape(a, {3, 8}); });
        run("gather", {a}, [=] { return gather(a, {0, 5, 5, 23, 7, 11}, {2, 3}); });
        run("concat (rows)", {a, b}, [=] { return concat<double>({a, b}, 0); });
        run("concat (columns)", {a, b}, [=] { return concat<double>({a, b}, 1); });
        run("slice", {a}, [=] { return slice(a, 1, 2, 3); });
        run("split", {a}, [=] {
            auto parts = split(a, {1, 3}, 0);
            return add(scale(parts[0], 2.0), sum(parts[1]));
        });
    }
    {
        auto a = leaf({3, 5}), b = leaf({5, 4}), bias = leaf({4});
        run("matmul", {a, b}, [=] { return matmul(a, b); });
        run("linear", {a, b, bias}, [=] { return linear(a, b, bias); });
        auto batch = leaf({2, 3, 5});
        run("matmul (batched)", {batch, b}, [=] { return matmul(batch, b); });
    }
    {
        auto q = leaf({5, 4}), k = leaf({5, 4}), v = leaf({5, 4});
        run("attention (2 heads)", {q, k, v}, [=] { return attention(q, k, v, 2, 0.7); });
        run("attention (1 head)", {q, k, v}, [=] { return attention(q, k, v, 1, 0.5); });
    }
    {
        auto x = leaf({3, 4, 5}), w = leaf({3, 3, 5});
        run("depthwise_conv3x3", {x, w}, [=] { return depthwise_conv3x3(x, w); });
    }
    {
        auto x = leaf({4, 6}), shift = leaf({1, 6}), sc = leaf({1, 6});
        run("modulate", {x, shift, sc}, [=] { return modulate(x, shift, sc); });
        auto d = leaf({4, 6});
        run("lr_residual", {x, d, sc}, [=] { return lr_residual(x, d, sc, true); });
        run("lr_residual (no shortcut)", {x, d, sc}, [=] { return lr_residual(x, d, sc, false); });
    }
    {
        auto z = leaf({4, 6, 3}), w = leaf({12, 5}), b = leaf({5});
        run("patchify", {z, w, b}, [=] { return patchify(z, Linear<double>{w, b}, 2); });
        auto tok = leaf({6, 5}), wo = leaf({5, 12}), bo = leaf({12});
        run("unpatchify", {tok, wo, bo}, [=] { return unpatchify(tok, Linear<double>{wo, bo}, 4, 6, 3, 2); });
    }
    return items;
}

/// block_forward on K = 4, M = 2, D = 8, 2 heads, for the conv- and linear-injection
/// three-stream wirings and the two-stream wiring.
inline std::vector<GradcheckItem> gradcheck_block(GradcheckOptions opt = {}) {
    opt.step = 1e-4;
    std::vector<GradcheckItem> items;
    for (VariantId id : {VariantId::FULL, VariantId::D, VariantId::CONTROLNET}) {
        ModelConfig cfg;
        cfg.latent_h = cfg.latent_w = 4;
        cfg.latent_channels = 1;
        cfg.patch_size = 2;
        cfg.token_dim = 8;
        cfg.heads = 2;
        cfg.depth = 1;
        cfg.text_len = 2;
        cfg.pooled_dim = 6;
        cfg.tag_vocab_size = 3;
        cfg.scale_factor = 2;
        cfg.variant = id == VariantId::CONTROLNET ? VariantId::FULL : id;
        Model<double> model(cfg);
        detail::randomize_params(model.params(), opt.seed, 0.4);

        CounterRng rng(opt.seed, hash_name("gradcheck.block"), static_cast<std::uint64_t>(id));
        auto x = detail::random_leaf({4, 8}, rng), l = detail::random_leaf({4, 8}, rng),
             c = detail::random_leaf({2, 8}, rng), pooled = detail::random_leaf({1, 6}, rng);
        BlockLayout layout = VariantSpec::of(id).block_layout();
        const BlockParams<double>& p = model.block(0);
        const BlockGeometry geo = model.geometry();
        auto leaves = detail::param_leaves(model.params());
        leaves.insert(leaves.end(), {x, c, pooled});
        if (layout.lr_stream) leaves.push_back(l);
        auto f = [&, x, l, c, pooled] {
            const TokenBundle<double> in{x, layout.lr_stream ? l : Tensor<double>(), c};
            const auto out = block_forward(in, pooled, p, layout, geo);
            std::vector<Tensor<double>> parts{out.x, out.c};
            if (layout.lr_stream) parts.push_back(out.l);
            return concat(parts, 0);
        };
        const char* name = id == VariantId::FULL ? "block_forward (conv injection)"
                           : id == VariantId::D  ? "block_forward (linear injection)"
                                                 : "block_forward (two-stream)";
        items.push_back(check_gradient(name, leaves, f, opt));
    }
    return items;
}

/// model.forward on an 8x8 latent with N = 2, D = 16, including the LR encoder.
/// Deep random graphs need the extrapolated difference; tiny gradients near round-off get Ridders.
inline std::vector<GradcheckItem> gradcheck_model(GradcheckOptions opt = {}) {
    opt.step = 1e-3;
    opt.richardson = true;
    opt.refine_step = 0.1;
    std::vector<GradcheckItem> items;
    for (VariantId id : {VariantId::FULL, VariantId::CONTROLNET}) {
        ModelConfig cfg;
        cfg.latent_h = cfg.latent_w = 8;
        cfg.latent_channels = 3;
        cfg.patch_size = 2;
        cfg.token_dim = 16;
        cfg.heads = 2;
        cfg.depth = 2;
        cfg.text_len = 2;
        cfg.pooled_dim = 8;
        cfg.tag_vocab_size = 4;
        cfg.scale_factor = 2;
        cfg.variant = id;
        Model<double> model(cfg);
        detail::randomize_params(model.params(), opt.seed, 0.3);

        CounterRng rng(opt.seed, hash_name("gradcheck.model"), static_cast<std::uint64_t>(id));
        auto z = detail::random_leaf({8, 8, 3}, rng), lr = detail::random_leaf({4, 4, 3}, rng, 0.3);
        auto leaves = detail::param_leaves(model.params());
        leaves.insert(leaves.end(), {z, lr});
        const std::vector<std::size_t> tags{2, 0};
        auto f = [&, z, lr] { return model.forward(z, model.encode_lr(lr), tags, 0.37).velocity; };
        items.push_back(check_gradient("model.forward (" + std::string(to_string(id)) + ")", leaves, f, opt));
    }
    return items;
}

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckReport r;
    for (auto&& group : {gradcheck_ops(opt), gradcheck_block(opt), gradcheck_model(opt)})
        r.items.insert(r.items.end(), group.begin(), group.end());
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace dit4sr
