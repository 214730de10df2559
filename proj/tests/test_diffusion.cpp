#include <gtest/gtest.h>

#include <cmath>

#include "dit4sr/diffusion.hpp"

using namespace dit4sr;

namespace {

using TD = Tensor<double>;

TD random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
    CounterRng rng(seed, 9, 9);
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = scale * rng.normal();
    return TD(std::move(s), std::move(v));
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.latent_h = cfg.latent_w = 8;
    cfg.token_dim = 8;
    cfg.heads = 2;
    cfg.depth = 1;
    cfg.text_len = 2;
    cfg.pooled_dim = 4;
    cfg.tag_vocab_size = 3;
    cfg.scale_factor = 2;
    return cfg;
}

TrainSample<double> random_sample(std::uint64_t seed, double t) {
    return {random_tensor({8, 8, 3}, seed, 0.5), TD::full({4, 4, 3}, 0.4), {1}, random_tensor({8, 8, 3}, seed + 1), t};
}

void zero_output_head(Model<double>& m) {
    for (const char* n : {"final.out.w", "final.out.b"})
        for (auto& v : m.params().find(n).mutable_data()) v = 0.0;
}

double rms_diff(const TD& a, const TD& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s / static_cast<double>(a.numel()));
}

}  // namespace

TEST(ForwardNoise, EndpointsAreBitwise) {
    const auto z0 = random_tensor({4, 4, 3}, 1), eps = random_tensor({4, 4, 3}, 2);
    const auto a = forward_noise(z0, eps, 0.0), b = forward_noise(z0, eps, 1.0);
    for (std::size_t i = 0; i < z0.numel(); ++i) {
        EXPECT_EQ(a[i], z0[i]);
        EXPECT_EQ(b[i], eps[i]);
    }
}

TEST(ForwardNoise, Midpoint) {
    const auto z = forward_noise(TD({2, 2, 1}), TD::full({2, 2, 1}, 2.0), 0.5);
    for (double v : z.data()) EXPECT_EQ(v, 1.0);
    EXPECT_THROW(forward_noise(TD({2, 2, 1}), TD({2, 1, 1}), 0.5), DimensionError);
}

TEST(Loss, ZeroWhenOutputEqualsTarget) {
    const auto t = random_tensor({4, 4, 3}, 3);
    EXPECT_EQ(mse(t, t).item(), 0.0);
}

TEST(Loss, ZeroOutputModelWithUnitNoiseGivesOne) {
    Model<double> model(tiny_config());
    zero_output_head(model);
    TrainSample<double> s = random_sample(4, 0.3);
    s.z0 = TD({8, 8, 3});
    std::vector<double> e(192);
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = i % 3 == 0 ? -1.0 : 1.0;
    s.eps = TD({8, 8, 3}, e);
    EXPECT_DOUBLE_EQ(sample_loss(model, s).item(), 1.0);
}

TEST(Loss, NonNegative) {
    const Model<double> model(tiny_config());
    for (std::uint64_t k = 0; k < 5; ++k) EXPECT_GE(sample_loss(model, random_sample(10 + k, 0.2 * k + 0.1)).item(), 0.0);
}

TEST(TrainingStep, SmallStepAlongGradientDecreasesLoss) {
    const TrainBatch<double> batch{random_sample(20, 0.3), random_sample(22, 0.7)};
    auto batch_loss = [&](const Model<double>& m) {
        double total = 0;
        for (const auto& s : batch) total += sample_loss(m, s).item();
        return total / static_cast<double>(batch.size());
    };
    bool decreased = false;
    for (double lr = 0.1; lr > 1e-7 && !decreased; lr /= 2) {
        Model<double> model(tiny_config());
        Optimizer<double> opt({OptimizerKind::sgd_momentum, lr, 0.0});
        const double before = training_step(model, batch, opt);
        EXPECT_DOUBLE_EQ(before, batch_loss(Model<double>(tiny_config())));
        decreased = batch_loss(model) < before;
    }
    EXPECT_TRUE(decreased);
}

TEST(TrainingStep, NonFiniteLossNamesTheSample) {
    Model<double> model(tiny_config());
    TrainBatch<double> batch{random_sample(30, 0.5), random_sample(31, 0.5)};
    std::vector<double> e(192, 0.0);
    e[5] = std::numeric_limits<double>::quiet_NaN();
    batch[1].eps = TD({8, 8, 3}, e);
    Optimizer<double> opt;
    try {
        training_step(model, batch, opt);
        FAIL();
    } catch (const NumericalError& err) {
        EXPECT_NE(std::string(err.what()).find("sample 1"), std::string::npos);
    }
}

TEST(Optimizer, HeavyBallUpdate) {
    ParamStore<double> ps;
    auto p = ps.add("p", TD({2}, {1.0, -1.0}));
    Optimizer<double> opt({OptimizerKind::sgd_momentum, 0.1, 0.5});
    for (int k = 0; k < 2; ++k) {
        ps.zero_grad();
        backward(sum(p));  // gradient of ones
        opt.step(ps);
    }
    // v1 = 1, v2 = 1.5; p = 1 - 0.1 - 0.15
    EXPECT_NEAR(p[0], 0.75, 1e-15);
    EXPECT_NEAR(p[1], -1.25, 1e-15);
    EXPECT_EQ(opt.steps(), 2u);
}

TEST(Optimizer, AdamFirstStepIsLearningRateTimesSign) {
    ParamStore<double> ps;
    auto p = ps.add("p", TD({2}, {0.0, 0.0}));
    Optimizer<double> opt({OptimizerKind::adam, 0.01, 0.9, 0.999, 0.0});
    backward(sum(mul(p, TD({2}, {3.0, -0.5}))));
    opt.step(ps);
    EXPECT_NEAR(p[0], -0.01, 1e-12);
    EXPECT_NEAR(p[1], 0.01, 1e-12);
    EXPECT_EQ(opt.state().size(), 2u);
}

TEST(Schedule, GridEndpointsAndOrder) {
    for (std::size_t t : {1u, 2u, 7u, 64u}) {
        const auto g = DiffusionSchedule{t}.grid();
        ASSERT_EQ(g.size(), t + 1);
        EXPECT_EQ(g.front(), 1.0);
        EXPECT_EQ(g.back(), 0.0);
        for (std::size_t i = 0; i + 1 < g.size(); ++i) EXPECT_GT(g[i], g[i + 1]);
    }
    EXPECT_THROW(DiffusionSchedule{0}.grid(), ConfigError);
}

TEST(Euler, ConstantFieldIsExactForAnyStepCount) {
    const auto z0 = random_tensor({4, 4, 3}, 40), eps = random_tensor({4, 4, 3}, 41);
    const auto v = flow_target(z0, eps);
    for (std::size_t t : {1u, 3u, 16u, 100u}) {
        const auto z = euler_integrate<double>([&](const TD&, double) { return v; }, eps, DiffusionSchedule{t});
        for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(z[i], z0[i], 1e-12);
    }
}

TEST(Euler, LinearToyModelConvergesUnderRefinement) {
    // v(z) = a z + b, with (a, b) the least-squares fit of the target along the path
    const auto z0 = random_tensor({4, 4, 3}, 42), eps = random_tensor({4, 4, 3}, 43);
    const auto target = flow_target(z0, eps);
    double sxx = 0, sx = 0, sxy = 0, sy = 0, n = 0;
    for (int k = 0; k <= 10; ++k) {
        const auto zt = forward_noise(z0, eps, k / 10.0);
        for (std::size_t i = 0; i < zt.numel(); ++i) {
            sxx += zt[i] * zt[i];
            sx += zt[i];
            sxy += zt[i] * target[i];
            sy += target[i];
            n += 1;
        }
    }
    const double a = (n * sxy - sx * sy) / (n * sxx - sx * sx), b = (sy - a * sx) / n;
    std::function<TD(const TD&, double)> field = [&](const TD& z, double) { return add_scalar(scale(z, a), b); };
    const auto coarse = euler_integrate<double>(field, eps, DiffusionSchedule{64});
    const auto fine = euler_integrate<double>(field, eps, DiffusionSchedule{1024});
    EXPECT_LT(rms_diff(coarse, fine), 1e-3);
}

TEST(Sample, FixedSeedIsBitwiseIdentical) {
    const Model<float> model(tiny_config());
    const ImageBuffer lr(4, 4, 3, 0.3);
    const auto a = sample(model, lr, {2}, DiffusionSchedule{3}, 7);
    const auto b = sample(model, lr, {2}, DiffusionSchedule{3}, 7);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.height, 8u);
    EXPECT_FALSE(a == sample(model, lr, {2}, DiffusionSchedule{3}, 8));
}

TEST(Sample, ZeroStepsIsConfigError) {
    const Model<float> model(tiny_config());
    EXPECT_THROW(sample(model, ImageBuffer(4, 4, 3), {}, DiffusionSchedule{0}, 1), ConfigError);
}

TEST(Decode, StubIsInverseWithClamp) {
    ImageBuffer img(2, 2, 3, 0.25);
    img.values[0] = 1.0;
    const auto z = encode_latent<double>(img);
    EXPECT_EQ(z[0], 1.0);
    EXPECT_EQ(z[1], -0.5);
    EXPECT_EQ(decode_latent(z), img);
    EXPECT_EQ(decode_latent(TD::full({1, 1, 3}, 3.0)).values[0], 1.0);
}

TEST(Timesteps, DrawsStayInsideUnitInterval) {
    CounterRng rng(50, 0, 0);
    for (auto law : {TimestepLaw::uniform, TimestepLaw::logit_normal}) {
        TimestepSampling ts{law, 0.5, 1.0};
        for (int i = 0; i < 1000; ++i) {
            const double t = ts.draw(rng);
            EXPECT_GE(t, 0.0);
            EXPECT_LT(t, 1.0);
        }
    }
}

TEST(Batches, EachStepIsRebuiltIdentically) {
    DegradationConfig deg;
    deg.seed = 3;
    const auto pairs = synthesize_pairs(16, 16, deg, 4);
    TrainConfig cfg;
    cfg.seed = 5;
    cfg.batch_size = 3;
    const auto a = draw_batch<double>(pairs, cfg, 17), b = draw_batch<double>(pairs, cfg, 17);
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(a[i].t, b[i].t);
        EXPECT_EQ(a[i].tags, b[i].tags);
        for (std::size_t j = 0; j < a[i].eps.numel(); ++j) EXPECT_EQ(a[i].eps[j], b[i].eps[j]);
    }
    EXPECT_NE(draw_batch<double>(pairs, cfg, 18)[0].t, a[0].t);
    EXPECT_THROW(draw_batch<double>({}, cfg, 0), ConfigError);
}

TEST(Batches, FullTagDropEmptiesTags) {
    DegradationConfig deg;
    const auto pairs = synthesize_pairs(16, 16, deg, 2);
    TrainConfig cfg;
    cfg.tag_drop = 1.0;
    for (std::uint64_t s = 0; s < 10; ++s) EXPECT_TRUE(draw_batch<double>(pairs, cfg, s)[0].tags.empty());
}
