#pragma once

// Binary checkpoint:
//   magic "DIT4SR\0\0" | u32 version | u32 variant | ModelConfig echo (13 x u64)
//   body: u64 count, then per tensor
//     u32 name length | name bytes | u8 dtype (0 f32, 1 f64) | u32 rank | rank x u64 | data
// All integers and reals little-endian. A standalone tensor file is the body alone.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dit4sr/diffusion.hpp"

namespace dit4sr {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::array<char, 8> kCheckpointMagic = {'D', 'I', 'T', '4', 'S', 'R', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

namespace detail {

template <class V>
void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V get(std::istream& is, const std::string& what) {
    V v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated file while reading " + what);
    return v;
}

template <class T>
constexpr std::uint8_t dtype_tag() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
}

inline std::array<std::uint64_t, 13> config_echo(const ModelConfig& c) {
    return {c.latent_h,   c.latent_w,       c.latent_channels, c.patch_size,
            c.token_dim,  c.heads,          c.depth,           c.text_len,
            c.pooled_dim, c.tag_vocab_size, static_cast<std::uint64_t>(c.variant),
            c.scale_factor, c.controlnet_blocks};
}

inline ModelConfig config_from_echo(const std::array<std::uint64_t, 13>& e) {
    ModelConfig c;
    c.latent_h = e[0];
    c.latent_w = e[1];
    c.latent_channels = e[2];
    c.patch_size = e[3];
    c.token_dim = e[4];
    c.heads = e[5];
    c.depth = e[6];
    c.text_len = e[7];
    c.pooled_dim = e[8];
    c.tag_vocab_size = e[9];
    if (e[10] > static_cast<std::uint64_t>(VariantId::CONTROLNET)) throw IoError("checkpoint: unknown variant id");
    c.variant = static_cast<VariantId>(e[10]);
    c.scale_factor = e[11];
    c.controlnet_blocks = e[12];
    return c;
}

}  // namespace detail

template <class T>
void write_tensor_body(std::ostream& os, const NamedTensors<T>& items) {
    detail::put<std::uint64_t>(os, items.size());
    for (const auto& [name, t] : items) {
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put<std::uint8_t>(os, detail::dtype_tag<T>());
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) detail::put<std::uint64_t>(os, e);
        os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
    }
}

/// Reads a body; tensors stored in the other precision are converted.
template <class T>
NamedTensors<T> read_tensor_body(std::istream& is) {
    const auto count = detail::get<std::uint64_t>(is, "tensor count");
    NamedTensors<T> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = detail::get<std::uint32_t>(is, "name length");
        if (len > (1u << 16)) throw IoError("corrupt tensor name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw IoError("truncated tensor name");
        const auto dtype = detail::get<std::uint8_t>(is, "dtype of " + name);
        if (dtype > 1) throw IoError("unknown dtype tag " + std::to_string(dtype) + " for " + name);
        const auto rank = detail::get<std::uint32_t>(is, "rank of " + name);
        if (rank > 16) throw IoError("corrupt rank for " + name);
        Shape shape(rank);
        for (auto& e : shape) e = static_cast<std::size_t>(detail::get<std::uint64_t>(is, "extent of " + name));
        const std::size_t n = numel_of(shape);
        std::vector<T> values(n);
        auto read_as = [&]<class S>(S) {
            std::vector<S> raw(n);
            if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(S))))
                throw IoError("truncated data for " + name);
            for (std::size_t j = 0; j < n; ++j) values[j] = static_cast<T>(raw[j]);
        };
        if (dtype == 0)
            read_as(float{});
        else
            read_as(double{});
        out.emplace_back(std::move(name), Tensor<T>(std::move(shape), std::move(values)));
    }
    return out;
}

template <class T>
void write_tensor_file(const std::string& path, const NamedTensors<T>& items) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    write_tensor_body(f, items);
    if (!f) throw IoError("write failed for " + path);
}

template <class T>
NamedTensors<T> read_tensor_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    return read_tensor_body<T>(f);
}

/// Header check; returns the echoed model configuration.
inline ModelConfig read_checkpoint_header(std::istream& is, const std::string& path) {
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) throw IoError(path + ": not a checkpoint");
    const auto version = detail::get<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw IoError(path + ": checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
    const auto variant = detail::get<std::uint32_t>(is, "variant");
    std::array<std::uint64_t, 13> echo{};
    for (auto& e : echo) e = detail::get<std::uint64_t>(is, "config echo");
    ModelConfig c = detail::config_from_echo(echo);
    if (variant != static_cast<std::uint32_t>(c.variant)) throw IoError(path + ": variant id disagrees with config echo");
    return c;
}

inline ModelConfig read_checkpoint_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    return read_checkpoint_header(f, path);
}

/// Weights, plus optimizer state and step counter when `opt` is given.
template <class T>
void save_checkpoint(const std::string& path, const Model<T>& model, const Optimizer<T>* opt = nullptr) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    detail::put<std::uint32_t>(f, kCheckpointVersion);
    detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(model.config().variant));
    for (auto e : detail::config_echo(model.config())) detail::put<std::uint64_t>(f, e);
    NamedTensors<T> items = model.params().items();
    if (opt) {
        items.emplace_back("optim.steps", Tensor<T>::full({1}, static_cast<T>(opt->steps())));
        for (const auto& [name, t] : opt->state()) items.emplace_back("optim." + name, t);
    }
    write_tensor_body(f, items);
    if (!f) throw IoError("write failed for " + path);
}

/// Loads weights into `model`, whose configuration must equal the checkpoint's echo.
template <class T>
void load_checkpoint(const std::string& path, Model<T>& model, Optimizer<T>* opt = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    const ModelConfig echo = read_checkpoint_header(f, path);
    if (!(echo == model.config())) throw ConfigError(path + ": model configuration does not match the checkpoint");
    auto items = read_tensor_body<T>(f);
    auto& params = model.params();
    std::size_t loaded = 0;
    bool has_optim = false;
    std::uint64_t steps = 0;
    std::vector<std::pair<std::string, Tensor<T>>> optim;
    for (auto& [name, t] : items) {
        if (name.rfind("optim.", 0) == 0) {
            has_optim = true;
            if (name == "optim.steps")
                steps = static_cast<std::uint64_t>(t.data()[0]);
            else
                optim.emplace_back(name.substr(6), t);
            continue;
        }
        Tensor<T> p = params.find(name);
        if (p.shape() != t.shape())
            throw ConfigError(path + ": tensor " + name + " has shape " + shape_str(t.shape()) + ", model expects " +
                              shape_str(p.shape()));
        std::copy(t.data().begin(), t.data().end(), p.mutable_data().begin());
        ++loaded;
    }
    if (loaded != params.items().size())
        throw ConfigError(path + ": checkpoint holds " + std::to_string(loaded) + " of " +
                          std::to_string(params.items().size()) + " parameters");
    if (opt && has_optim) {
        opt->state() = std::move(optim);
        opt->set_steps(steps);
    }
}

}  // namespace dit4sr
