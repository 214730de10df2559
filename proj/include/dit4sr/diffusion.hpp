#pragma once

// Rectified flow: Z_t = (1 - t) Z_0 + t eps, velocity target eps - Z_0, MSE loss,
// SGD with momentum (or Adam), and an Euler sampler on the grid t_k = k / T.

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <functional>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "dit4sr/dataset.hpp"
#include "dit4sr/model.hpp"

namespace dit4sr {

struct DiffusionSchedule {
    std::size_t steps = 1;

    /// t_T = 1 > ... > t_0 = 0, listed from t_T down.
    std::vector<double> grid() const {
        if (steps < 1) throw ConfigError("sampling steps T must be >= 1, got " + std::to_string(steps));
        std::vector<double> g(steps + 1);
        for (std::size_t i = 0; i <= steps; ++i)
            g[i] = static_cast<double>(steps - i) / static_cast<double>(steps);
        return g;
    }
};

template <class T>
Tensor<T> forward_noise(const Tensor<T>& z0, const Tensor<T>& eps, double t) {
    if (z0.shape() != eps.shape())
        throw DimensionError("forward_noise: " + shape_str(z0.shape()) + " vs " + shape_str(eps.shape()));
    std::vector<T> v(z0.numel());
    const T a = static_cast<T>(1.0 - t), b = static_cast<T>(t);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a * z0[i] + b * eps[i];
    return Tensor<T>(z0.shape(), std::move(v));
}

template <class T>
Tensor<T> flow_target(const Tensor<T>& z0, const Tensor<T>& eps) {
    std::vector<T> v(z0.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = eps[i] - z0[i];
    return Tensor<T>(z0.shape(), std::move(v));
}

template <class T>
Tensor<T> gaussian_tensor(Shape shape, CounterRng& rng) {
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return Tensor<T>(std::move(shape), std::move(v));
}

template <class T>
struct TrainSample {
    Tensor<T> z0;    // HR latent [H, W, C]
    Tensor<T> lr;    // LR image [h, w, C] in [0, 1]
    std::vector<std::size_t> tags;
    Tensor<T> eps;
    double t = 0.5;
};

template <class T>
using TrainBatch = std::vector<TrainSample<T>>;

enum class OptimizerKind { sgd_momentum, adam };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd_momentum"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
    if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
    if (s == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected sgd_momentum or adam)");
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd_momentum;
    double learning_rate = 0.02;
    double momentum = 0.9;  // heavy-ball coefficient, or Adam's beta1
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t cosine_steps = 0;  // > 0: learning rate follows a half cosine to zero over this many steps

    double rate_at(std::uint64_t step) const {
        if (cosine_steps == 0) return learning_rate;
        const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(cosine_steps));
        return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * f));
    }
};

/// Heavy-ball SGD (v <- mu v + g; p <- p - lr v) or Adam with bias correction.
/// State tensors are kept per parameter name in parameter order.
template <class T>
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore<T>& params) {
        const std::size_t slots = cfg_.kind == OptimizerKind::adam ? 2 : 1;
        if (state_.empty()) {
            for (std::size_t s = 0; s < slots; ++s)
                for (const auto& [name, p] : params.items())
                    state_.emplace_back((s == 0 ? "m." : "v.") + name, Tensor<T>(p.shape()));
        }
        const std::size_t n = params.items().size();
        if (state_.size() != slots * n) throw ContractError("optimizer state does not match parameters");
        const T lr = static_cast<T>(cfg_.rate_at(steps_));
        ++steps_;
        const T mu = static_cast<T>(cfg_.momentum);
        const T b2 = static_cast<T>(cfg_.beta2), eps = static_cast<T>(cfg_.epsilon);
        const T c1 = static_cast<T>(1.0 - std::pow(cfg_.momentum, static_cast<double>(steps_)));
        const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_)));
        for (std::size_t i = 0; i < n; ++i) {
            Tensor<T> p = params.items()[i].second;
            const auto g = p.grad();
            auto w = p.mutable_data();
            auto m = state_[i].second.mutable_data();
            if (cfg_.kind == OptimizerKind::sgd_momentum) {
                for (std::size_t j = 0; j < w.size(); ++j) {
                    m[j] = mu * m[j] + g[j];
                    w[j] -= lr * m[j];
                }
            } else {
                auto v = state_[n + i].second.mutable_data();
                for (std::size_t j = 0; j < w.size(); ++j) {
                    m[j] = mu * m[j] + (T{1} - mu) * g[j];
                    v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
                    w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
                }
            }
        }
    }

    const OptimizerConfig& config() const { return cfg_; }
    std::uint64_t steps() const { return steps_; }
    void set_steps(std::uint64_t s) { steps_ = s; }
    std::vector<std::pair<std::string, Tensor<T>>>& state() { return state_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& state() const { return state_; }

private:
    OptimizerConfig cfg_;
    std::vector<std::pair<std::string, Tensor<T>>> state_;
    std::uint64_t steps_ = 0;
};

/// Per-sample flow-matching loss; the graph is left for the caller.
template <class T>
Tensor<T> sample_loss(const Model<T>& model, const TrainSample<T>& s) {
    const Tensor<T> zt = forward_noise(s.z0, s.eps, s.t);
    const Tensor<T> v = model.forward(zt, model.encode_lr(s.lr), s.tags, s.t).velocity;
    return mse(v, flow_target(s.z0, s.eps));
}

/// Mean loss over the batch before the update. Gradients are accumulated sample by
/// sample in batch order, then the optimizer steps once.
template <class T>
double training_step(Model<T>& model, const TrainBatch<T>& batch, Optimizer<T>& opt) {
    if (batch.empty()) throw ConfigError("training_step: empty batch");
    model.params().zero_grad();
    double total = 0.0;
    const T w = T{1} / static_cast<T>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Tensor<T> loss = sample_loss(model, batch[i]);
        const double l = static_cast<double>(loss.item());
        if (!std::isfinite(l))
            throw NumericalError("non-finite loss at batch sample " + std::to_string(i) + " (t = " +
                                 std::to_string(batch[i].t) + ")");
        total += l;
        backward(scale(loss, w));
    }
    for (const auto& [name, p] : model.params().items())
        for (T g : p.grad())
            if (!std::isfinite(static_cast<double>(g))) throw NumericalError("non-finite gradient in " + name);
    opt.step(model.params());
    return total / static_cast<double>(batch.size());
}

enum class TimestepLaw { uniform, logit_normal };

inline std::string_view to_string(TimestepLaw l) { return l == TimestepLaw::logit_normal ? "logit_normal" : "uniform"; }

inline TimestepLaw parse_timestep_law(std::string_view s) {
    if (s == "uniform") return TimestepLaw::uniform;
    if (s == "logit_normal") return TimestepLaw::logit_normal;
    throw ConfigError("unknown timestep law '" + std::string(s) + "' (expected uniform or logit_normal)");
}

/// Training-time distribution of t on (0, 1).
struct TimestepSampling {
    TimestepLaw law = TimestepLaw::uniform;
    double mean = 0.0;  // logit_normal: t = sigmoid(mean + std * n)
    double std = 1.0;

    double draw(CounterRng& rng) const {
        if (law == TimestepLaw::uniform) return rng.uniform();
        return 1.0 / (1.0 + std::exp(-(mean + std * rng.normal())));
    }
};

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 1;
    OptimizerConfig optimizer;
    std::uint64_t seed = 0;
    double tag_drop = 0.1;
    TimestepSampling timesteps;
};

namespace stage_id {
inline constexpr std::uint64_t train_batch = hash_name("train.batch");
inline constexpr std::uint64_t sample_noise = hash_name("sample.noise");
}  // namespace stage_id

/// Batch for a given step: sample index, timestep, noise and tag drop all come from
/// a stream keyed by (seed, step), so any step can be rebuilt independently.
template <class T>
TrainBatch<T> draw_batch(const std::vector<SamplePair>& data, const TrainConfig& cfg, std::uint64_t step) {
    if (data.empty()) throw ConfigError("training set is empty");
    CounterRng rng(cfg.seed, step, stage_id::train_batch);
    TrainBatch<T> batch;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const auto& pair = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
        TrainSample<T> s;
        s.z0 = encode_latent<T>(pair.hr);
        s.lr = image_to_tensor<T>(pair.lr);
        s.t = cfg.timesteps.draw(rng);
        if (rng.uniform() >= cfg.tag_drop) s.tags = pair.tags;
        s.eps = gaussian_tensor<T>(s.z0.shape(), rng);
        batch.push_back(std::move(s));
    }
    return batch;
}

template <class T>
class Trainer {
public:
    Trainer(Model<T>& model, const std::vector<SamplePair>& data, TrainConfig cfg)
        : model_(model), data_(data), cfg_(cfg), opt_(cfg.optimizer) {}

    /// One optimizer step; returns the pre-step batch loss.
    double step() {
        const auto batch = draw_batch<T>(data_, cfg_, opt_.steps());
        return training_step(model_, batch, opt_);
    }

    std::uint64_t steps_done() const { return opt_.steps(); }
    Optimizer<T>& optimizer() { return opt_; }
    const TrainConfig& config() const { return cfg_; }

private:
    Model<T>& model_;
    const std::vector<SamplePair>& data_;
    TrainConfig cfg_;
    Optimizer<T> opt_;
};

/// Euler integration of dZ/dt = v from t = 1 down to t = 0 over the schedule grid.
template <class T>
Tensor<T> euler_integrate(const std::function<Tensor<T>(const Tensor<T>&, double)>& velocity, Tensor<T> z,
                          const DiffusionSchedule& schedule) {
    const auto g = schedule.grid();
    for (std::size_t i = 0; i + 1 < g.size(); ++i) {
        const Tensor<T> v = velocity(z, g[i]);
        const T dt = static_cast<T>(g[i + 1] - g[i]);
        std::vector<T> next(z.numel());
        for (std::size_t j = 0; j < next.size(); ++j) next[j] = z[j] + dt * v[j];
        z = Tensor<T>(z.shape(), std::move(next));
    }
    return z;
}

/// Restored latent Z_0_hat for one LR input, starting from eps(seed).
template <class T>
Tensor<T> sample_latent(const Model<T>& model, const Tensor<T>& lr, const std::vector<std::size_t>& tags,
                        const DiffusionSchedule& schedule, std::uint64_t seed) {
    NoGradGuard guard;
    const auto& c = model.config();
    CounterRng rng(seed, 0, stage_id::sample_noise);
    Tensor<T> z = gaussian_tensor<T>({c.latent_h, c.latent_w, c.latent_channels}, rng);
    const Tensor<T> l_tokens = model.encode_lr(lr);
    return euler_integrate<T>([&](const Tensor<T>& zt, double t) { return model.velocity(zt, l_tokens, tags, t); },
                              std::move(z), schedule);
}

template <class T>
ImageBuffer sample(const Model<T>& model, const ImageBuffer& lr, const std::vector<std::size_t>& tags,
                   const DiffusionSchedule& schedule, std::uint64_t seed) {
    return decode_latent(sample_latent(model, image_to_tensor<T>(lr), tags, schedule, seed));
}

}  // namespace dit4sr
