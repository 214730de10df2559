#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dit4sr/ops.hpp"
#include "dit4sr/rng.hpp"

namespace dit4sr {

/// y = x . w + b with w stored [in, out]; b may be undefined.
template <class T>
struct Linear {
    Tensor<T> w;
    Tensor<T> b;

    bool defined() const { return w.defined(); }
    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }
};

/// Ordered registry of named trainable leaves. The order is creation order and
/// defines serialization and optimizer iteration.
template <class T>
class ParamStore {
public:
    Tensor<T> add(std::string name, Tensor<T> t) {
        for (const auto& [n, _] : items_)
            if (n == name) throw ContractError("duplicate parameter name '" + name + "'");
        t.set_requires_grad(true);
        items_.emplace_back(std::move(name), t);
        return t;
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }

    Tensor<T> find(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return t;
        throw ContractError("no parameter named '" + name + "'");
    }
    bool contains(const std::string& name) const {
        for (const auto& [n, _] : items_)
            if (n == name) return true;
        return false;
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : items_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : items_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
};

/// Xavier-uniform values drawn from a stream keyed by (seed, key name), so the same
/// name always yields the same values regardless of which other parameters exist.
template <class T>
std::vector<T> xavier_values(std::uint64_t seed, const std::string& key, std::size_t fan_in, std::size_t fan_out,
                             std::size_t count) {
    CounterRng rng(seed, hash_name(key), hash_name("init"));
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<T> v(count);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-a, a));
    return v;
}

}  // namespace dit4sr
