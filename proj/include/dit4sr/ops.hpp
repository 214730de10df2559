#pragma once

// Differentiable kernels over Tensor<T>. Every op validates extents, computes
// its forward eagerly and, when recording, attaches a closure that accumulates
// input gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "dit4sr/blas.hpp"
#include "dit4sr/tensor.hpp"

namespace dit4sr {

namespace detail {

// Maps a flat output index to a flat operand index under numpy broadcasting.
struct SameIdx {
    std::size_t operator()(std::size_t i) const { return i; }
};
struct ScalarIdx {
    std::size_t operator()(std::size_t) const { return 0; }
};
struct ModIdx {  // operand matches the output's trailing extents
    std::size_t n;
    std::size_t operator()(std::size_t i) const { return i % n; }
};
struct DivIdx {  // operand matches the output's leading extents
    std::size_t d;
    std::size_t operator()(std::size_t i) const { return i / d; }
};
struct TableIdx {
    std::vector<std::size_t> idx;
    std::size_t operator()(std::size_t i) const { return idx[i]; }
};
using Indexer = std::variant<SameIdx, ScalarIdx, ModIdx, DivIdx, TableIdx>;

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

inline Indexer make_indexer(const Shape& in, const Shape& out) {
    const std::size_t n_in = numel_of(in), n_out = numel_of(out);
    if (n_in == n_out) return SameIdx{};
    if (n_in == 1) return ScalarIdx{};
    const std::size_t r = out.size();
    Shape padded(r, 1);
    for (std::size_t i = 0; i < in.size(); ++i) padded[r - in.size() + i] = in[i];
    // Trailing block: leading extents are 1 and the rest match.
    std::size_t lead = 0;
    while (lead < r && padded[lead] == 1 && out[lead] != 1) ++lead;
    bool tail = true;
    for (std::size_t i = lead; i < r; ++i) tail = tail && padded[i] == out[i];
    if (tail) return ModIdx{n_in};
    std::size_t trail = r;
    while (trail > 0 && padded[trail - 1] == 1 && out[trail - 1] != 1) --trail;
    bool head = true;
    for (std::size_t i = 0; i < trail; ++i) head = head && padded[i] == out[i];
    if (head) return DivIdx{n_out / n_in};
    TableIdx t;
    t.idx.resize(n_out);
    std::vector<std::size_t> in_stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = r; i-- > 0;) {
        in_stride[i] = padded[i] == 1 ? 0 : s;
        s *= padded[i];
    }
    std::vector<std::size_t> counter(r, 0);
    std::size_t off = 0;
    for (std::size_t k = 0; k < n_out; ++k) {
        t.idx[k] = off;
        for (std::size_t i = r; i-- > 0;) {
            off += in_stride[i];
            if (++counter[i] < out[i]) break;
            off -= in_stride[i] * counter[i];
            counter[i] = 0;
        }
    }
    return t;
}

template <class T, class Fwd, class GradA, class GradB>
Tensor<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fwd fwd, GradA ga, GradB gb) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
    const std::size_t n = numel_of(out_shape);
    Indexer ia = make_indexer(a.shape(), out_shape);
    Indexer ib = make_indexer(b.shape(), out_shape);
    std::vector<T> out(n);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    std::visit(
        [&](const auto& fa, const auto& fb) {
            for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[fa(i)], pb[fb(i)]);
        },
        ia, ib);
    auto [res, record] = make_result<T>(out_shape, std::move(out), {a, b}, op);
    if (record) {
        res.node()->backward = [ia = std::move(ia), ib = std::move(ib), n, ga, gb](Node<T>& self) {
            Node<T>& na = *self.inputs[0];
            Node<T>& nb = *self.inputs[1];
            const T* g = self.grad.data();
            const T* va = na.value.data();
            const T* vb = nb.value.data();
            std::visit(
                [&](const auto& fa, const auto& fb) {
                    if (na.requires_grad) {
                        T* da = na.grad_data();
                        for (std::size_t i = 0; i < n; ++i) da[fa(i)] += g[i] * ga(va[fa(i)], vb[fb(i)]);
                    }
                    if (nb.requires_grad) {
                        T* db = nb.grad_data();
                        for (std::size_t i = 0; i < n; ++i) db[fb(i)] += g[i] * gb(va[fa(i)], vb[fb(i)]);
                    }
                },
                ia, ib);
        };
    }
    return res;
}

template <class T, class Fwd, class Grad>
Tensor<T> unary(const Tensor<T>& x, const char* op, Fwd fwd, Grad grad) {
    const std::size_t n = x.numel();
    std::vector<T> out(n);
    const T* px = x.ptr();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(px[i]);
    auto [res, record] = make_result<T>(x.shape(), std::move(out), {x}, op);
    if (record) {
        res.node()->backward = [grad](Node<T>& self) {
            Node<T>& nx = *self.inputs[0];
            T* dx = nx.grad_data();
            const T* g = self.grad.data();
            for (std::size_t i = 0; i < self.value.size(); ++i) dx[i] += g[i] * grad(nx.value[i], self.value[i]);
        };
    }
    return res;
}

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
    const long r = static_cast<long>(rank);
    if (axis < -r || axis >= r)
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(rank));
    return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcast_binary(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T{1}; }, [](T, T) { return T{1}; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcast_binary(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T{1}; }, [](T, T) { return T{-1}; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcast_binary(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    return detail::unary(x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return detail::unary(x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

/// tanh-approximation GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = static_cast<T>(0.044715);
    return detail::unary(
        x, "gelu",
        [](T v) { return T{0.5} * v * (T{1} + std::tanh(c * (v + k * v * v * v))); },
        [](T v, T) {
            const T u = c * (v + k * v * v * v);
            const T th = std::tanh(u);
            const T du = c * (T{1} + T{3} * k * v * v);
            return T{0.5} * (T{1} + th) + T{0.5} * v * (T{1} - th * th) * du;
        });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

// ----------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T s{0};
    for (T v : x.data()) s += v;
    auto [res, record] = detail::make_result<T>(Shape{}, {s}, {x}, "sum");
    if (record) {
        res.node()->backward = [](Node<T>& self) {
            Node<T>& nx = *self.inputs[0];
            T* dx = nx.grad_data();
            const T g = self.grad[0];
            for (std::size_t i = 0; i < nx.value.size(); ++i) dx[i] += g;
        };
    }
    return res;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

/// mean((a - b)^2) over all elements; shapes must match.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw DimensionError("mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t n = a.numel();
    T s{0};
    for (std::size_t i = 0; i < n; ++i) {
        const T d = a[i] - b[i];
        s += d * d;
    }
    auto [res, record] = detail::make_result<T>(Shape{}, {s / static_cast<T>(n)}, {a, b}, "mse");
    if (record) {
        res.node()->backward = [n](Node<T>& self) {
            Node<T>& na = *self.inputs[0];
            Node<T>& nb = *self.inputs[1];
            const T g = self.grad[0] * T{2} / static_cast<T>(n);
            if (na.requires_grad) {
                T* d = na.grad_data();
                for (std::size_t i = 0; i < n; ++i) d[i] += g * (na.value[i] - nb.value[i]);
            }
            if (nb.requires_grad) {
                T* d = nb.grad_data();
                for (std::size_t i = 0; i < n; ++i) d[i] -= g * (na.value[i] - nb.value[i]);
            }
        };
    }
    return res;
}

/// <a, b> over all elements; shapes must match.
template <class T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw DimensionError("dot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    return sum(mul(a, b));
}

// ------------------------------------------------------------------- matmul

/// Batched matrix product a[..., p, q] . b[..., q, r] with broadcast batch dimensions.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2 || a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2])
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t p = a.shape()[a.rank() - 2], q = a.shape()[a.rank() - 1], r = b.shape()[b.rank() - 1];
    const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    Shape batch;
    try {
        batch = detail::broadcast_shape(batch_a, batch_b, "matmul");
    } catch (const DimensionError&) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t nb = numel_of(batch);
    // Per-batch operand offsets (in matrices).
    std::vector<std::size_t> off_a(nb), off_b(nb);
    {
        auto ia = detail::make_indexer(batch_a, batch);
        auto ib = detail::make_indexer(batch_b, batch);
        std::visit([&](const auto& fa) { for (std::size_t i = 0; i < nb; ++i) off_a[i] = fa(i); }, ia);
        std::visit([&](const auto& fb) { for (std::size_t i = 0; i < nb; ++i) off_b[i] = fb(i); }, ib);
    }
    Shape out_shape = batch;
    out_shape.push_back(p);
    out_shape.push_back(r);
    std::vector<T> out(nb * p * r);
    for (std::size_t i = 0; i < nb; ++i)
        blas::gemm(false, false, p, r, q, T{1}, a.ptr() + off_a[i] * p * q, q, b.ptr() + off_b[i] * q * r, r, T{0},
                   out.data() + i * p * r, r);
    auto [res, record] = detail::make_result<T>(std::move(out_shape), std::move(out), {a, b}, "matmul");
    if (record) {
        res.node()->backward = [off_a = std::move(off_a), off_b = std::move(off_b), nb, p, q, r](Node<T>& self) {
            Node<T>& na = *self.inputs[0];
            Node<T>& nbn = *self.inputs[1];
            const T* g = self.grad.data();
            for (std::size_t i = 0; i < nb; ++i) {
                // dA = dC . B^T ; dB = A^T . dC  (accumulated over broadcast batches)
                if (na.requires_grad)
                    blas::gemm(false, true, p, q, r, T{1}, g + i * p * r, r, nbn.value.data() + off_b[i] * q * r, r,
                               T{1}, na.grad_data() + off_a[i] * p * q, q);
                if (nbn.requires_grad)
                    blas::gemm(true, false, q, r, p, T{1}, na.value.data() + off_a[i] * p * q, q, g + i * p * r, r,
                               T{1}, nbn.grad_data() + off_b[i] * q * r, r);
            }
        };
    }
    return res;
}

/// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() < 2) throw DimensionError("transpose: rank < 2 " + shape_str(x.shape()));
    Shape s = x.shape();
    const std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
    std::swap(s[s.size() - 2], s[s.size() - 1]);
    const std::size_t batches = x.numel() / (m * n);
    std::vector<T> out(x.numel());
    for (std::size_t b = 0; b < batches; ++b)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = x[b * m * n + i * n + j];
    auto [res, record] = detail::make_result<T>(std::move(s), std::move(out), {x}, "transpose");
    if (record) {
        res.node()->backward = [batches, m, n](Node<T>& self) {
            T* dx = self.inputs[0]->grad_data();
            const T* g = self.grad.data();
            for (std::size_t b = 0; b < batches; ++b)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) dx[b * m * n + i * n + j] += g[b * m * n + j * m + i];
        };
    }
    return res;
}

/// x[..., in] . w[in, out] + bias[out]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    Tensor<T> y = matmul(x, w);
    return bias.defined() ? add(y, bias) : y;
}

// -------------------------------------------------------- normalization etc.

/// Numerically stable softmax along `axis` (max subtraction).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, long axis = -1) {
    const std::size_t ax = detail::normalize_axis(axis, x.rank(), "softmax");
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
    for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[ax];
    std::vector<T> out(x.numel());
    const T* px = x.ptr();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = px[base];
            for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, px[base + k * inner]);
            T z{0};
            for (std::size_t k = 0; k < len; ++k) {
                const T e = std::exp(px[base + k * inner] - mx);
                out[base + k * inner] = e;
                z += e;
            }
            const T inv = T{1} / z;
            for (std::size_t k = 0; k < len; ++k) out[base + k * inner] *= inv;
        }
    auto [res, record] = detail::make_result<T>(s, std::move(out), {x}, "softmax");
    if (record) {
        res.node()->backward = [outer, inner, len](Node<T>& self) {
            T* dx = self.inputs[0]->grad_data();
            const T* y = self.value.data();
            const T* g = self.grad.data();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    T d{0};
                    for (std::size_t k = 0; k < len; ++k) d += g[base + k * inner] * y[base + k * inner];
                    for (std::size_t k = 0; k < len; ++k)
                        dx[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - d);
                }
        };
    }
    return res;
}

namespace detail {

/// exp for float via range reduction and a degree-6 polynomial; written branch-free
/// so loops over it vectorize. Relative error stays within a few ulp.
inline float exp_approx(float x) {
    x = x > -87.0f ? x : -87.0f;
    x = x < 88.0f ? x : 88.0f;
    const float fn = (x * 1.44269504088896341f + 12582912.0f) - 12582912.0f;  // round to nearest
    const float r = (x - fn * 0.693359375f) + fn * 2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    const std::int32_t bits = (static_cast<std::int32_t>(fn) + 127) << 23;
    float scale;
    std::memcpy(&scale, &bits, sizeof scale);
    return p * scale;
}

inline void exp_shifted(float* x, std::size_t n, float shift) {
    for (std::size_t j = 0; j < n; ++j) x[j] = exp_approx(x[j] - shift);
}
inline void exp_shifted(double* x, std::size_t n, double shift) {
    for (std::size_t j = 0; j < n; ++j) x[j] = std::exp(x[j] - shift);
}

// Lane-split reductions: a fixed association order that still vectorizes.
template <class T>
T row_max(const T* x, std::size_t n) {
    constexpr std::size_t L = 16;
    T acc[L];
    for (std::size_t l = 0; l < L; ++l) acc[l] = x[0];
    std::size_t j = 0;
    for (; j + L <= n; j += L)
        for (std::size_t l = 0; l < L; ++l) acc[l] = x[j + l] > acc[l] ? x[j + l] : acc[l];
    T m = acc[0];
    for (std::size_t l = 1; l < L; ++l) m = acc[l] > m ? acc[l] : m;
    for (; j < n; ++j) m = x[j] > m ? x[j] : m;
    return m;
}

template <class T>
T row_sum(const T* x, std::size_t n) {
    constexpr std::size_t L = 16;
    T acc[L] = {};
    std::size_t j = 0;
    for (; j + L <= n; j += L)
        for (std::size_t l = 0; l < L; ++l) acc[l] += x[j + l];
    T z{0};
    for (std::size_t l = 0; l < L; ++l) z += acc[l];
    for (; j < n; ++j) z += x[j];
    return z;
}

}  // namespace detail

/// Multi-head scaled dot-product attention softmax(s * Q_h K_h^T) V_h over q, k, v [S, D],
/// heads taking contiguous column groups of width D / heads. Rows are processed in
/// blocks and the probabilities are recomputed in the backward pass, so no [S, S]
/// buffer outlives the call. When `maps` is given it receives one [S, S] map per head.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads, T s,
                    std::vector<std::vector<T>>* maps = nullptr) {
    if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape())
        throw DimensionError("attention: q, k, v must share one [S, D] shape, got " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    const std::size_t n = q.dim(0), dim = q.dim(1);
    if (heads == 0 || dim % heads != 0)
        throw DimensionError("attention: " + std::to_string(heads) + " heads do not divide D = " + std::to_string(dim));
    const std::size_t hd = dim / heads;
    static constexpr std::size_t kRowBlock = 128;

    // Row statistics per head: max logit and reciprocal normalizer.
    std::vector<T> row_max(heads * n), row_inv(heads * n);
    std::vector<T> out(n * dim);
    std::vector<T> block(kRowBlock * n);
    if (maps) maps->assign(heads, std::vector<T>(n * n));

    auto probs = [n](T* p, std::size_t rows, const T* mx, const T* inv) {
        for (std::size_t i = 0; i < rows; ++i) {
            T* row = p + i * n;
            detail::exp_shifted(row, n, mx[i]);
            for (std::size_t j = 0; j < n; ++j) row[j] *= inv[i];
        }
    };
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t r0 = 0; r0 < n; r0 += kRowBlock) {
            const std::size_t rows = std::min(kRowBlock, n - r0);
            blas::gemm(false, true, rows, n, hd, s, q.ptr() + r0 * dim + h * hd, dim, k.ptr() + h * hd, dim, T{0},
                       block.data(), n);
            T* mx = row_max.data() + h * n + r0;
            T* inv = row_inv.data() + h * n + r0;
            for (std::size_t i = 0; i < rows; ++i) {
                T* row = block.data() + i * n;
                mx[i] = detail::row_max(row, n);
                detail::exp_shifted(row, n, mx[i]);
                inv[i] = T{1} / detail::row_sum(row, n);
                for (std::size_t j = 0; j < n; ++j) row[j] *= inv[i];
            }
            if (maps) std::copy(block.begin(), block.begin() + rows * n, (*maps)[h].begin() + r0 * n);
            blas::gemm(false, false, rows, hd, n, T{1}, block.data(), n, v.ptr() + h * hd, dim, T{0},
                       out.data() + r0 * dim + h * hd, dim);
        }

    auto [res, record] = detail::make_result<T>({n, dim}, std::move(out), {q, k, v}, "attention");
    if (record) {
        res.node()->backward = [row_max = std::move(row_max), row_inv = std::move(row_inv), n, dim, hd, heads, s,
                                probs](Node<T>& self) {
            Node<T>& nq = *self.inputs[0];
            Node<T>& nk = *self.inputs[1];
            Node<T>& nv = *self.inputs[2];
            const T* g = self.grad.data();
            const T* o = self.value.data();
            std::vector<T> p(kRowBlock * n), dp(kRowBlock * n);
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t r0 = 0; r0 < n; r0 += kRowBlock) {
                    const std::size_t rows = std::min(kRowBlock, n - r0);
                    const T* qb = nq.value.data() + r0 * dim + h * hd;
                    const T* gb = g + r0 * dim + h * hd;
                    blas::gemm(false, true, rows, n, hd, s, qb, dim, nk.value.data() + h * hd, dim, T{0}, p.data(), n);
                    probs(p.data(), rows, row_max.data() + h * n + r0, row_inv.data() + h * n + r0);
                    if (nv.requires_grad)
                        blas::gemm(true, false, n, hd, rows, T{1}, p.data(), n, gb, dim, T{1}, nv.grad_data() + h * hd,
                                   dim);
                    if (!nq.requires_grad && !nk.requires_grad) continue;
                    blas::gemm(false, true, rows, n, hd, T{1}, gb, dim, nv.value.data() + h * hd, dim, T{0}, dp.data(),
                               n);
                    // dS = P * (dP - rowsum(dO * O))
                    for (std::size_t i = 0; i < rows; ++i) {
                        T d{0};
                        const T* gi = gb + i * dim;
                        const T* oi = o + (r0 + i) * dim + h * hd;
                        for (std::size_t c = 0; c < hd; ++c) d += gi[c] * oi[c];
                        T* pr = p.data() + i * n;
                        T* dr = dp.data() + i * n;
                        for (std::size_t j = 0; j < n; ++j) dr[j] = pr[j] * (dr[j] - d);
                    }
                    if (nq.requires_grad)
                        blas::gemm(false, false, rows, hd, n, s, dp.data(), n, nk.value.data() + h * hd, dim, T{1},
                                   nq.grad_data() + r0 * dim + h * hd, dim);
                    if (nk.requires_grad)
                        blas::gemm(true, false, n, hd, rows, s, dp.data(), n, qb, dim, T{1}, nk.grad_data() + h * hd,
                                   dim);
                }
        };
    }
    return res;
}

inline constexpr double kLayerNormEps = 1e-6;

/// Per-row standardization over the last axis, no affine.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps = static_cast<T>(kLayerNormEps)) {
    if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("layer_norm: empty last axis");
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    std::vector<T> out(x.numel()), rstd(rows);
    const T* px = x.ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = px + r * d;
        T mu{0};
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var{0};
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        rstd[r] = T{1} / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (row[j] - mu) * rstd[r];
    }
    auto [res, record] = detail::make_result<T>(x.shape(), std::move(out), {x}, "layer_norm");
    if (record) {
        res.node()->backward = [rstd = std::move(rstd), d, rows](Node<T>& self) {
            T* dx = self.inputs[0]->grad_data();
            const T* xh = self.value.data();
            const T* g = self.grad.data();
            for (std::size_t r = 0; r < rows; ++r) {
                T mg{0}, mgx{0};
                for (std::size_t j = 0; j < d; ++j) {
                    mg += g[r * d + j];
                    mgx += g[r * d + j] * xh[r * d + j];
                }
                mg /= static_cast<T>(d);
                mgx /= static_cast<T>(d);
                for (std::size_t j = 0; j < d; ++j)
                    dx[r * d + j] += rstd[r] * (g[r * d + j] - mg - xh[r * d + j] * mgx);
            }
        };
    }
    return res;
}

/// Per-channel 3x3 correlation over x[h, w, c] with zero padding 1; w[3, 3, c].
template <class T>
Tensor<T> depthwise_conv3x3(const Tensor<T>& x, const Tensor<T>& w) {
    if (x.rank() != 3 || w.rank() != 3 || w.dim(0) != 3 || w.dim(1) != 3 || w.dim(2) != x.dim(2))
        throw DimensionError("depthwise_conv3x3: input " + shape_str(x.shape()) + " vs kernel " +
                             shape_str(w.shape()));
    const std::size_t h = x.dim(0), wd = x.dim(1), c = x.dim(2);
    std::vector<T> out(x.numel(), T{0});
    const T* px = x.ptr();
    const T* pw = w.ptr();
    auto for_taps = [h, wd, c](auto&& body) {
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < wd; ++j)
                for (int di = -1; di <= 1; ++di) {
                    const long si = static_cast<long>(i) + di;
                    if (si < 0 || si >= static_cast<long>(h)) continue;
                    for (int dj = -1; dj <= 1; ++dj) {
                        const long sj = static_cast<long>(j) + dj;
                        if (sj < 0 || sj >= static_cast<long>(wd)) continue;
                        const std::size_t o = (i * wd + j) * c;
                        const std::size_t s = (static_cast<std::size_t>(si) * wd + static_cast<std::size_t>(sj)) * c;
                        const std::size_t k = static_cast<std::size_t>((di + 1) * 3 + (dj + 1)) * c;
                        body(o, s, k);
                    }
                }
    };
    for_taps([&](std::size_t o, std::size_t s, std::size_t k) {
        for (std::size_t ch = 0; ch < c; ++ch) out[o + ch] += px[s + ch] * pw[k + ch];
    });
    auto [res, record] = detail::make_result<T>(x.shape(), std::move(out), {x, w}, "depthwise_conv3x3");
    if (record) {
        res.node()->backward = [for_taps, c](Node<T>& self) {
            Node<T>& nx = *self.inputs[0];
            Node<T>& nw = *self.inputs[1];
            const T* g = self.grad.data();
            T* dx = nx.requires_grad ? nx.grad_data() : nullptr;
            T* dw = nw.requires_grad ? nw.grad_data() : nullptr;
            const T* vx = nx.value.data();
            const T* vw = nw.value.data();
            for_taps([&](std::size_t o, std::size_t s, std::size_t k) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    if (dx) dx[s + ch] += g[o + ch] * vw[k + ch];
                    if (dw) dw[k + ch] += g[o + ch] * vx[s + ch];
                }
            });
        };
    }
    return res;
}

// ------------------------------------------------------------- structural

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    auto [res, record] = detail::make_result<T>(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()),
                                                {x}, "reshape");
    if (record) {
        res.node()->backward = [](Node<T>& self) {
            T* dx = self.inputs[0]->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
        };
    }
    return res;
}

/// out[i] = x[index[i]]; gradients scatter-add back.
template <class T>
Tensor<T> gather(const Tensor<T>& x, std::vector<std::size_t> index, Shape out_shape) {
    if (numel_of(out_shape) != index.size())
        throw DimensionError("gather: index count " + std::to_string(index.size()) + " vs shape " +
                             shape_str(out_shape));
    std::vector<T> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= x.numel()) throw DimensionError("gather: index out of range");
        out[i] = x[index[i]];
    }
    auto [res, record] = detail::make_result<T>(std::move(out_shape), std::move(out), {x}, "gather");
    if (record) {
        res.node()->backward = [index = std::move(index)](Node<T>& self) {
            T* dx = self.inputs[0]->grad_data();
            for (std::size_t i = 0; i < index.size(); ++i) dx[index[i]] += self.grad[i];
        };
    }
    return res;
}

/// Concatenation along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, long axis = 0) {
    if (xs.empty()) throw DimensionError("concat: no inputs");
    const std::size_t ax = detail::normalize_axis(axis, xs[0].rank(), "concat");
    Shape out_shape = xs[0].shape();
    out_shape[ax] = 0;
    for (const auto& t : xs) {
        if (t.rank() != out_shape.size()) throw DimensionError("concat: rank mismatch " + shape_str(t.shape()));
        for (std::size_t i = 0; i < t.rank(); ++i)
            if (i != ax && t.shape()[i] != xs[0].shape()[i])
                throw DimensionError("concat: " + shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
        out_shape[ax] += t.shape()[ax];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
    for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
    const std::size_t out_row = out_shape[ax] * inner;
    std::vector<std::size_t> col_off(xs.size());
    std::vector<T> out(numel_of(out_shape));
    std::size_t off = 0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        col_off[t] = off;
        const std::size_t seg = xs[t].shape()[ax] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(xs[t].ptr() + o * seg, seg, out.begin() + static_cast<long>(o * out_row + off));
        off += seg;
    }
    auto [res, record] = detail::make_result<T>(std::move(out_shape), std::move(out), xs, "concat");
    if (record) {
        res.node()->backward = [col_off = std::move(col_off), outer, out_row](Node<T>& self) {
            const T* g = self.grad.data();
            for (std::size_t t = 0; t < self.inputs.size(); ++t) {
                Node<T>& in = *self.inputs[t];
                if (!in.requires_grad) continue;
                T* d = in.grad_data();
                const std::size_t seg = in.value.size() / outer;
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t k = 0; k < seg; ++k) d[o * seg + k] += g[o * out_row + col_off[t] + k];
            }
        };
    }
    return res;
}

/// Contiguous sub-range [start, start + len) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t start, std::size_t len) {
    const std::size_t ax = detail::normalize_axis(axis, x.rank(), "slice");
    if (start + len > x.shape()[ax])
        throw DimensionError("slice: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                             ") exceeds axis extent of " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[ax] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
    for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
    const std::size_t in_row = x.shape()[ax] * inner, seg = len * inner, off = start * inner;
    std::vector<T> out(outer * seg);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.ptr() + o * in_row + off, seg, out.begin() + static_cast<long>(o * seg));
    auto [res, record] = detail::make_result<T>(std::move(out_shape), std::move(out), {x}, "slice");
    if (record) {
        res.node()->backward = [outer, in_row, seg, off](Node<T>& self) {
            T* d = self.inputs[0]->grad_data();
            const T* g = self.grad.data();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t k = 0; k < seg; ++k) d[o * in_row + off + k] += g[o * seg + k];
        };
    }
    return res;
}

/// Inverse of concat: consecutive pieces of the given extents along `axis`.
template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<std::size_t>& sizes, long axis = 0) {
    const std::size_t ax = detail::normalize_axis(axis, x.rank(), "split");
    std::size_t total = 0;
    for (auto s : sizes) total += s;
    if (total != x.shape()[ax])
        throw DimensionError("split: sizes sum to " + std::to_string(total) + " but axis extent of " +
                             shape_str(x.shape()) + " is " + std::to_string(x.shape()[ax]));
    std::vector<Tensor<T>> out;
    std::size_t start = 0;
    for (auto s : sizes) {
        out.push_back(slice(x, static_cast<long>(ax), start, s));
        start += s;
    }
    return out;
}

}  // namespace dit4sr
